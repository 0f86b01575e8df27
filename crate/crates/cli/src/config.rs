//! Run configuration. Every section has defaults and rejects unknown keys;
//! component seeds are always derived from the global seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ganuq_core::distill::DistillConfig;
use ganuq_core::eval::{ScanConfig, ThresholdSpec, UniformConfig};
use ganuq_core::rng::derive_seed;
use ganuq_core::{AdversarialSchedule, Error, GanConfig, Result, StructuredDropoutSpec, SyntheticSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSection,
    pub model: ModelSection,
    pub distill: DistillSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("ganuq-out"),
            data: DataSection::default(),
            model: ModelSection::default(),
            distill: DistillSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Synthetic law to draw from; ignored when `csv` is set.
    pub synthetic: Option<SyntheticSpec>,
    pub n_rows: usize,
    /// Existing dataset in the `cond_*, y_*, species` layout.
    pub csv: Option<PathBuf>,
    pub split: SplitSection,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { synthetic: Some(SyntheticSpec::default()), n_rows: 40_000, csv: None, split: SplitSection::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Uniform,
    Extrapolation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub kind: SplitKind,
    pub train_fraction: f64,
    /// Projection direction over the condition features (extrapolation only).
    pub direction: Option<Vec<f64>>,
    pub n_test_bands: usize,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self { kind: SplitKind::Uniform, train_fraction: 0.5, direction: None, n_test_bands: 10 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ensemble,
    Mcdropout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub method: Method,
    /// Species the generators are trained on; `None` trains on every row.
    pub species: Option<String>,
    pub gan: GanConfig,
    pub ensemble: EnsembleSection,
    pub mcdropout: DropoutSection,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            method: Method::Ensemble,
            species: Some("pion".into()),
            gan: GanConfig::default(),
            ensemble: EnsembleSection::default(),
            mcdropout: DropoutSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSection {
    pub n_members: usize,
    pub schedule: AdversarialSchedule,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        Self { n_members: 5, schedule: AdversarialSchedule::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DropoutSection {
    pub spec: StructuredDropoutSpec,
    /// Masks in the evaluation-time virtual ensemble.
    pub n_masks: usize,
    pub mask_seed: u64,
}

impl Default for DropoutSection {
    fn default() -> Self {
        Self { spec: StructuredDropoutSpec::default(), n_masks: 10, mask_seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSection {
    pub enabled: bool,
    pub params: DistillConfig,
    /// Held-out condition rows compared against direct Monte Carlo.
    pub check_points: usize,
    /// Pairs per check point for the Monte Carlo reference.
    pub check_pairs: usize,
}

impl Default for DistillSection {
    fn default() -> Self {
        Self { enabled: true, params: DistillConfig::default(), check_points: 5, check_pairs: 20_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub specs: Vec<ThresholdSpec>,
    pub uniform: UniformConfig,
    pub scan: ScanConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            specs: vec![
                ThresholdSpec::default(),
                ThresholdSpec { signal: "muon".into(), score_index: 1, ..ThresholdSpec::default() },
            ],
            uniform: UniformConfig::default(),
            scan: ScanConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    /// Applies flag overrides, derives component seeds and validates.
    pub fn resolve(mut self, out: Option<PathBuf>, seed: Option<u64>) -> Result<Self> {
        if let Some(out) = out {
            self.output_dir = out;
        }
        if let Some(seed) = seed {
            self.seed = seed;
        }
        let s = self.seed;
        if let Some(spec) = &mut self.data.synthetic {
            spec.seed = derive_seed(s, "data");
        }
        self.model.gan.seed = derive_seed(s, "model");
        self.model.mcdropout.mask_seed = derive_seed(s, "masks");
        self.distill.params.seed = derive_seed(s, "distill");
        self.distill.params.regressor.seed = derive_seed(s, "regressor");
        self.eval.uniform.seed = derive_seed(s, "evaluate");
        self.eval.scan.seed = derive_seed(s, "scan");
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        match (&d.csv, &d.synthetic) {
            (None, None) => return Err(Error::Config("data needs either `csv` or `synthetic`".into())),
            (None, Some(spec)) => {
                spec.validate()?;
                if d.n_rows == 0 {
                    return Err(Error::Config("data.n_rows must be positive".into()));
                }
            }
            (Some(_), _) => {}
        }
        if !(d.split.train_fraction > 0.0 && d.split.train_fraction < 1.0) {
            return Err(Error::Config(format!("split.train_fraction {} outside (0, 1)", d.split.train_fraction)));
        }
        if d.split.kind == SplitKind::Extrapolation && d.split.direction.is_none() {
            return Err(Error::Config("an extrapolation split needs `direction`".into()));
        }
        self.model.gan.validate()?;
        match self.model.method {
            Method::Ensemble => {
                self.model.ensemble.schedule.validate()?;
                if self.model.ensemble.n_members < 2 {
                    return Err(Error::Config("model.ensemble.n_members must be at least 2".into()));
                }
            }
            Method::Mcdropout => {
                self.model.mcdropout.spec.validate()?;
                if self.model.mcdropout.n_masks < 2 {
                    return Err(Error::Config("model.mcdropout.n_masks must be at least 2".into()));
                }
            }
        }
        if self.eval.specs.is_empty() {
            return Err(Error::Config("eval.specs is empty".into()));
        }
        for spec in &self.eval.specs {
            spec.validate()?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_the_default() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"sede": 3}"#), Err(Error::Config(_))));
        assert!(RunConfig::from_json(r#"{"model": {"gan": {"lr": 0.1}}}"#).is_err());
    }

    #[test]
    fn seeds_follow_the_global_seed_only() {
        let a = RunConfig::default().resolve(None, Some(7)).unwrap();
        let mut edited = RunConfig::default();
        edited.model.gan.batch_size = 64;
        let b = edited.resolve(None, Some(7)).unwrap();
        assert_eq!(a.model.gan.seed, b.model.gan.seed);
        assert_eq!(a.distill.params.seed, b.distill.params.seed);
        let c = RunConfig::default().resolve(None, Some(8)).unwrap();
        assert_ne!(a.model.gan.seed, c.model.gan.seed);
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig::default().resolve(Some("x".into()), Some(1)).unwrap();
        assert_eq!(RunConfig::from_json(&cfg.to_json().unwrap()).unwrap(), cfg);
        assert_eq!(cfg.output_dir, PathBuf::from("x"));
    }

    #[test]
    fn extrapolation_needs_direction() {
        let mut cfg = RunConfig::default();
        cfg.data.split.kind = SplitKind::Extrapolation;
        assert!(cfg.resolve(None, None).is_err());
    }
}
