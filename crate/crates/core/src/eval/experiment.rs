use serde::{Deserialize, Serialize};

use crate::data::{sample_band, sample_rows, BandSplit, Dataset};
use crate::distill::SystUncertainty;
use crate::error::{Error, Result};
use crate::eval::{background_efficiency, bin_of, equal_count_edges, fit_threshold, BinReport, EfficiencyReport, ThresholdSpec};
use crate::ndmath::Tensor;
use crate::rng::{derive_seed, substream, SimRng};
use crate::sampler::{ConditionalSampler, UncertainGenerator};

/// Events per band in the extrapolation scan.
pub const DEFAULT_N_PER_BAND: usize = 101_917;

/// Rows (all species) making up one bin of a report.
#[derive(Clone, Debug)]
pub struct BinGroup {
    pub label: String,
    pub data: Dataset,
}

fn score_column(t: &Tensor, index: usize) -> Result<Vec<f64>> {
    if index >= t.cols() {
        return Err(Error::dim("score column", format!("index < {}", t.cols()), index));
    }
    Ok(t.column(index))
}

/// Background conditions and real scores of a group, or `None` when the
/// group has no background rows.
fn background_part(group: &Dataset, spec: &ThresholdSpec) -> Result<Option<(Tensor, Vec<f64>)>> {
    let bg = group.species_index(&spec.background)?;
    let rows = group.rows_of_species(bg);
    if rows.is_empty() {
        return Ok(None);
    }
    let real = score_column(&group.responses.select_rows(&rows), spec.score_index)?;
    Ok(Some((group.conditions.select_rows(&rows), real)))
}

fn mean_and_sample_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn binomial_stderr(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

/// Per group: the real background efficiency, every member's efficiency at
/// the same conditions, and the band `mean +- sample sd` over members.
pub(crate) fn group_bands(
    ug: &dyn UncertainGenerator,
    spec: &ThresholdSpec,
    groups: &[BinGroup],
    rng: &mut SimRng,
) -> Result<(Vec<BinReport>, Vec<usize>)> {
    let t = spec.fitted_threshold()?;
    let (mut bins, mut dropped) = (Vec::new(), Vec::new());
    for (index, group) in groups.iter().enumerate() {
        let Some((cond, real_scores)) = background_part(&group.data, spec)? else {
            log::warn!("bin {index} ({}) has no `{}` rows; dropped", group.label, spec.background);
            dropped.push(index);
            continue;
        };
        let real = background_efficiency(&real_scores, t)?;
        let members = (0..ug.n_members())
            .map(|m| {
                let y = ug.sample_member(m, &cond, rng)?;
                background_efficiency(&score_column(&y, spec.score_index)?, t)
            })
            .collect::<Result<Vec<_>>>()?;
        let (center, half_width) = mean_and_sample_sd(&members);
        bins.push(BinReport {
            index,
            label: group.label.clone(),
            count: real_scores.len(),
            real,
            real_stderr: binomial_stderr(real, real_scores.len()),
            members,
            center,
            half_width,
        });
    }
    Ok((bins, dropped))
}

/// Test rows grouped by the bin of condition `feature`.
pub fn feature_groups(test: &Dataset, feature: usize, edges: &[f64]) -> Result<Vec<BinGroup>> {
    if feature >= test.cond_dim() {
        return Err(Error::dim("binning feature", format!("index < {}", test.cond_dim()), feature));
    }
    let n_bins = edges.len() - 1;
    let mut rows = vec![Vec::new(); n_bins];
    for i in 0..test.len() {
        rows[bin_of(edges, test.conditions.get(i, feature))].push(i);
    }
    Ok(rows
        .iter()
        .enumerate()
        .map(|(b, r)| BinGroup { label: format!("[{:.4}, {:.4})", edges[b], edges[b + 1]), data: test.subset(r) })
        .collect())
}

/// Report over bins of condition `feature` with the given `edges`; `spec`
/// must carry a threshold fitted on training rows.
pub fn efficiency_bands(
    ug: &dyn UncertainGenerator,
    test: &Dataset,
    spec: &ThresholdSpec,
    feature: usize,
    edges: &[f64],
    rng: &mut SimRng,
) -> Result<EfficiencyReport> {
    if edges.len() < 2 {
        return Err(Error::Config("binning needs at least two edges".into()));
    }
    let groups = feature_groups(test, feature, edges)?;
    let (bins, dropped) = group_bands(ug, spec, &groups, rng)?;
    Ok(EfficiencyReport::new(spec.clone(), Some(feature), edges.to_vec(), bins, dropped))
}

/// Fits `spec` on the signal rows of `train`.
fn fit_spec(spec: &ThresholdSpec, train: &Dataset) -> Result<ThresholdSpec> {
    spec.validate()?;
    let signal = train.filter_species(&spec.signal)?;
    let scores = score_column(&signal.responses, spec.score_index)?;
    let fit = fit_threshold(&scores, spec.target_efficiency)?;
    if fit.degenerate {
        log::warn!("degenerate threshold for `{}`: acceptance {:.3}", spec.signal, fit.achieved);
    }
    Ok(ThresholdSpec { threshold: Some(fit.threshold), ..spec.clone() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UniformConfig {
    /// Condition feature binned over.
    pub feature: usize,
    pub n_bins: usize,
    pub seed: u64,
}

impl Default for UniformConfig {
    fn default() -> Self {
        Self { feature: 1, n_bins: 10, seed: 0 }
    }
}

/// One report per threshold spec. Thresholds are fitted on `train`;
/// efficiencies are measured on `test`, which must be a different dataset.
pub fn run_uniform_experiment(
    ug: &dyn UncertainGenerator,
    train: &Dataset,
    test: &Dataset,
    specs: &[ThresholdSpec],
    cfg: &UniformConfig,
) -> Result<Vec<EfficiencyReport>> {
    if train.fingerprint() == test.fingerprint() {
        return Err(Error::Contract("threshold-fit and evaluation sets are identical".into()));
    }
    let total = train.len() + test.len();
    log::info!(
        "uniform split: {} train ({:.3}), {} test ({:.3})",
        train.len(),
        train.len() as f64 / total as f64,
        test.len(),
        test.len() as f64 / total as f64
    );
    specs
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let fitted = fit_spec(spec, train)?;
            let bg = test.filter_species(&spec.background)?;
            if cfg.feature >= bg.cond_dim() {
                return Err(Error::dim("binning feature", format!("index < {}", bg.cond_dim()), cfg.feature));
            }
            let edges = equal_count_edges(&bg.conditions.column(cfg.feature), cfg.n_bins)?;
            let mut rng = substream(cfg.seed, &format!("uniform-report-{i}"));
            efficiency_bands(ug, test, &fitted, cfg.feature, &edges, &mut rng)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanConfig {
    /// Equal-count bands the train region is cut into.
    pub n_train_bands: usize,
    /// Rows sampled per band, capped by the band size.
    pub n_per_band: usize,
    pub seed: u64,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self { n_train_bands: 1, n_per_band: DEFAULT_N_PER_BAND, seed: 0 }
    }
}

/// Train bands followed by test bands, each subsampled to `n_per_band`.
pub fn scan_groups(split: &BandSplit, cfg: &ScanConfig) -> Result<Vec<BinGroup>> {
    let mut groups = Vec::new();
    for (i, band) in split.train_bands(cfg.n_train_bands)?.iter().enumerate() {
        let n = cfg.n_per_band.min(band.len());
        let data = sample_rows(&split.dataset, band, n, derive_seed(cfg.seed, &format!("train-band-{i}")))?;
        groups.push(BinGroup { label: format!("train {i}"), data });
    }
    for (i, band) in split.test_bands.iter().enumerate() {
        let n = cfg.n_per_band.min(band.len());
        groups.push(BinGroup { label: format!("test {i}"), data: sample_band(split, i, n, cfg.seed)? });
    }
    Ok(groups)
}

/// Band reports over the extrapolation scan. `split.dataset` must be in the
/// generator's (normalized) space; thresholds are fitted on the train part.
pub fn run_scan_experiment(
    ug: &dyn UncertainGenerator,
    split: &BandSplit,
    specs: &[ThresholdSpec],
    cfg: &ScanConfig,
) -> Result<Vec<EfficiencyReport>> {
    let train = split.train_set();
    let groups = scan_groups(split, cfg)?;
    specs
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let fitted = fit_spec(spec, &train)?;
            let mut rng = substream(cfg.seed, &format!("scan-report-{i}"));
            let (bins, dropped) = group_bands(ug, &fitted, &groups, &mut rng)?;
            Ok(EfficiencyReport::new(fitted, None, split.boundaries.clone(), bins, dropped))
        })
        .collect()
}

/// Replaces member-spread bands with distilled ones: the center is the
/// efficiency of `reference` alone, and the half-width is half the change in
/// efficiency when every score moves from `-sigma_syst(X)` to `+sigma_syst(X)`.
pub fn sigma_syst_bands(
    report: &EfficiencyReport,
    reference: &dyn ConditionalSampler,
    groups: &[BinGroup],
    syst: &SystUncertainty,
    rng: &mut SimRng,
) -> Result<EfficiencyReport> {
    let spec = &report.spec;
    let t = spec.fitted_threshold()?;
    let mut bins = Vec::with_capacity(report.bins.len());
    for bin in &report.bins {
        let group = groups
            .get(bin.index)
            .ok_or_else(|| Error::Contract(format!("no row group for bin {}", bin.index)))?;
        let Some((cond, _)) = background_part(&group.data, spec)? else {
            return Err(Error::Contract(format!("bin {} lost its background rows", bin.index)));
        };
        let scores = score_column(&reference.sample(&cond, rng)?, spec.score_index)?;
        let sigma = syst.sigma_syst(&cond)?;
        if spec.score_index >= sigma.cols() {
            return Err(Error::dim("sigma_syst score dimension", format!("index < {}", sigma.cols()), spec.score_index));
        }
        let shifted = |sign: f64| -> Vec<f64> {
            scores.iter().enumerate().map(|(r, s)| s + sign * sigma.get(r, spec.score_index)).collect()
        };
        let center = background_efficiency(&scores, t)?;
        let up = background_efficiency(&shifted(1.0), t)?;
        let down = background_efficiency(&shifted(-1.0), t)?;
        bins.push(BinReport { members: vec![center], center, half_width: 0.5 * (up - down).abs(), ..bin.clone() });
    }
    Ok(EfficiencyReport::new(spec.clone(), report.feature, report.edges.clone(), bins, report.dropped.clone()))
}
