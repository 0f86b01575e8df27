//! Synthetic detector-response data with a closed-form conditional law.
//!
//! Each condition feature is drawn from a declared distribution and mapped to
//! a canonical coordinate `z` (uniform features to `[-1, 1]`, log-normal
//! features to a standard normal). Responses are Gaussian given `z`:
//! `y_j = mean_j(z) + sigma_j(z) * N(0, 1) + shift_j(species)`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Normalizer};
use crate::error::{Error, Result};
use crate::ndmath::Tensor;
use crate::rng::{derive_seed, rng_from_seed, SimRng};
use crate::sampler::{check_conditions, ConditionalSampler, UncertainGenerator};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConditionDist {
    Uniform { low: f64, high: f64 },
    /// `ln x ~ N(mu, sigma^2)`.
    LogNormal { mu: f64, sigma: f64 },
}

impl ConditionDist {
    fn sample(&self, rng: &mut SimRng) -> f64 {
        match *self {
            ConditionDist::Uniform { low, high } => rng.random_range(low..high),
            ConditionDist::LogNormal { mu, sigma } => {
                let z: f64 = StandardNormal.sample(rng);
                (mu + sigma * z).exp()
            }
        }
    }

    /// Canonical coordinate the response law is written in.
    pub fn canonical(&self, x: f64) -> f64 {
        match *self {
            ConditionDist::Uniform { low, high } => (2.0 * x - low - high) / (high - low),
            ConditionDist::LogNormal { mu, sigma } => (x.max(f64::MIN_POSITIVE).ln() - mu) / sigma,
        }
    }

    pub fn from_canonical(&self, z: f64) -> f64 {
        match *self {
            ConditionDist::Uniform { low, high } => 0.5 * (z * (high - low) + low + high),
            ConditionDist::LogNormal { mu, sigma } => (mu + sigma * z).exp(),
        }
    }

    fn validate(&self, i: usize) -> Result<()> {
        let ok = match *self {
            ConditionDist::Uniform { low, high } => low.is_finite() && high.is_finite() && low < high,
            ConditionDist::LogNormal { mu, sigma } => mu.is_finite() && sigma.is_finite() && sigma > 0.0,
        };
        if !ok {
            return Err(Error::Config(format!("condition {i}: invalid distribution parameters")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeanFn {
    Affine { bias: f64, weights: Vec<f64> },
    /// `bias + weights . z + quad . z^2`.
    Quadratic { bias: f64, weights: Vec<f64>, quad: Vec<f64> },
}

impl MeanFn {
    pub fn eval(&self, z: &[f64]) -> f64 {
        match self {
            MeanFn::Affine { bias, weights } => bias + dot(weights, z),
            MeanFn::Quadratic { bias, weights, quad } => {
                bias + dot(weights, z) + quad.iter().zip(z).map(|(q, v)| q * v * v).sum::<f64>()
            }
        }
    }

    fn widths(&self) -> Vec<usize> {
        match self {
            MeanFn::Affine { weights, .. } => vec![weights.len()],
            MeanFn::Quadratic { weights, quad, .. } => vec![weights.len(), quad.len()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum SigmaFn {
    Constant { value: f64 },
    /// `max(floor, base + slope . z)`.
    LinearRamp { base: f64, slope: Vec<f64>, floor: f64 },
    /// `exp(log_base + weights . z)`.
    ExpAffine { log_base: f64, weights: Vec<f64> },
}

impl SigmaFn {
    pub fn eval(&self, z: &[f64]) -> f64 {
        match self {
            SigmaFn::Constant { value } => *value,
            SigmaFn::LinearRamp { base, slope, floor } => (base + dot(slope, z)).max(*floor),
            SigmaFn::ExpAffine { log_base, weights } => (log_base + dot(weights, z)).exp(),
        }
    }

    fn validate(&self, j: usize, c: usize) -> Result<()> {
        let (ok, width) = match self {
            SigmaFn::Constant { value } => (*value > 0.0 && value.is_finite(), c),
            SigmaFn::LinearRamp { base, slope, floor } => (*floor > 0.0 && base.is_finite(), slope.len()),
            SigmaFn::ExpAffine { log_base, weights } => (log_base.is_finite(), weights.len()),
        };
        if !ok {
            return Err(Error::Config(format!("sigma {j}: must be strictly positive on the domain")));
        }
        if width != c {
            return Err(Error::Config(format!("sigma {j}: expects {width} features, spec has {c}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeciesSpec {
    pub name: String,
    /// Relative abundance; normalized over all species.
    pub fraction: f64,
    /// Added to the responses of this species (length k).
    pub shift: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub conditions: Vec<ConditionDist>,
    pub means: Vec<MeanFn>,
    pub sigmas: Vec<SigmaFn>,
    pub species: Vec<SpeciesSpec>,
    pub seed: u64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Default for SyntheticSpec {
    /// Three conditions in the roles (pseudorapidity, momentum, track
    /// multiplicity), five responses, one background and two signal species.
    fn default() -> Self {
        let shift = |j: usize| {
            let mut s = vec![0.0; 5];
            s[j] = 2.5;
            s
        };
        Self {
            conditions: vec![
                ConditionDist::Uniform { low: 1.8, high: 5.5 },
                ConditionDist::LogNormal { mu: 20_000f64.ln(), sigma: 0.8 },
                ConditionDist::LogNormal { mu: 150f64.ln(), sigma: 0.5 },
            ],
            means: vec![
                MeanFn::Quadratic { bias: 0.0, weights: vec![0.5, 0.8, -0.3], quad: vec![0.0, 0.15, 0.0] },
                MeanFn::Quadratic { bias: 0.5, weights: vec![-0.4, 0.6, 0.2], quad: vec![0.2, 0.0, 0.0] },
                MeanFn::Affine { bias: -0.3, weights: vec![0.3, -0.5, 0.1] },
                MeanFn::Affine { bias: 0.0, weights: vec![0.2, 0.3, 0.4] },
                MeanFn::Affine { bias: 1.0, weights: vec![-0.6, 0.0, 0.3] },
            ],
            sigmas: vec![
                SigmaFn::LinearRamp { base: 1.0, slope: vec![0.0, -0.3, 0.2], floor: 0.3 },
                SigmaFn::ExpAffine { log_base: 0.0, weights: vec![0.1, -0.2, 0.1] },
                SigmaFn::Constant { value: 0.8 },
                SigmaFn::LinearRamp { base: 0.7, slope: vec![0.2, 0.0, 0.0], floor: 0.2 },
                SigmaFn::Constant { value: 1.2 },
            ],
            species: vec![
                SpeciesSpec { name: "pion".into(), fraction: 0.6, shift: vec![0.0; 5] },
                SpeciesSpec { name: "kaon".into(), fraction: 0.2, shift: shift(0) },
                SpeciesSpec { name: "muon".into(), fraction: 0.2, shift: shift(1) },
            ],
            seed: 20_220_001,
        }
    }
}

impl SyntheticSpec {
    /// Parses and validates a JSON spec; unknown family tags are config
    /// errors.
    pub fn from_json(s: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(s).map_err(|e| Error::Config(format!("synthetic spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn cond_dim(&self) -> usize {
        self.conditions.len()
    }

    pub fn resp_dim(&self) -> usize {
        self.means.len()
    }

    pub fn species_names(&self) -> Vec<String> {
        self.species.iter().map(|s| s.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let (c, k) = (self.cond_dim(), self.resp_dim());
        if c == 0 || k == 0 {
            return Err(Error::Config("synthetic spec needs at least one condition and one response".into()));
        }
        for (i, d) in self.conditions.iter().enumerate() {
            d.validate(i)?;
        }
        if self.sigmas.len() != k {
            return Err(Error::Config(format!("{} sigma functions for {k} responses", self.sigmas.len())));
        }
        for (j, m) in self.means.iter().enumerate() {
            if m.widths().iter().any(|&w| w != c) {
                return Err(Error::Config(format!("mean {j}: weight width does not match {c} conditions")));
            }
        }
        for (j, s) in self.sigmas.iter().enumerate() {
            s.validate(j, c)?;
        }
        if self.species.is_empty() {
            return Err(Error::Config("at least one species is required".into()));
        }
        for s in &self.species {
            if !(s.fraction > 0.0) || s.shift.len() != k {
                return Err(Error::Config(format!("species `{}`: need fraction > 0 and {k} shifts", s.name)));
            }
        }
        Ok(())
    }

    pub fn canonical(&self, raw: &[f64]) -> Vec<f64> {
        self.conditions.iter().zip(raw).map(|(d, &x)| d.canonical(x)).collect()
    }

    /// Conditional mean of every response at raw conditions `raw`.
    pub fn mean_true(&self, raw: &[f64], species: usize) -> Vec<f64> {
        let z = self.canonical(raw);
        self.means
            .iter()
            .zip(&self.species[species].shift)
            .map(|(m, s)| m.eval(&z) + s)
            .collect()
    }

    /// Conditional standard deviation of every response at raw conditions.
    pub fn sigma_true(&self, raw: &[f64]) -> Vec<f64> {
        let z = self.canonical(raw);
        self.sigmas.iter().map(|s| s.eval(&z)).collect()
    }

    fn sample_species(&self, rng: &mut SimRng) -> usize {
        let total: f64 = self.species.iter().map(|s| s.fraction).sum();
        let u = rng.random::<f64>() * total;
        let mut acc = 0.0;
        for (i, s) in self.species.iter().enumerate() {
            acc += s.fraction;
            if u < acc {
                return i;
            }
        }
        self.species.len() - 1
    }

    fn sample_response(&self, raw: &[f64], species: usize, rng: &mut SimRng, out: &mut [f64]) {
        let mean = self.mean_true(raw, species);
        let sigma = self.sigma_true(raw);
        for j in 0..out.len() {
            let e: f64 = StandardNormal.sample(rng);
            out[j] = mean[j] + sigma[j] * e;
        }
    }
}

/// Draws `n` i.i.d. rows. Deterministic in `spec.seed`.
pub fn generate_synthetic(spec: &SyntheticSpec, n: usize) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config("requested an empty synthetic dataset".into()));
    }
    let (c, k) = (spec.cond_dim(), spec.resp_dim());
    let mut rng = rng_from_seed(derive_seed(spec.seed, "synthetic"));
    let mut conds = Vec::with_capacity(n * c);
    let mut resps = vec![0.0; n * k];
    let mut species = Vec::with_capacity(n);
    for i in 0..n {
        let row: Vec<f64> = spec.conditions.iter().map(|d| d.sample(&mut rng)).collect();
        let s = spec.sample_species(&mut rng);
        spec.sample_response(&row, s, &mut rng, &mut resps[i * k..(i + 1) * k]);
        conds.extend_from_slice(&row);
        species.push(s);
    }
    Dataset::new(
        Tensor::from_vec(n, c, conds)?,
        Tensor::from_vec(n, k, resps)?,
        species,
        spec.species_names(),
    )
}

/// Exact sampler of the synthetic conditional law, optionally offset by a
/// constant vector. With a normalizer, it accepts normalized conditions and
/// emits normalized responses.
#[derive(Clone, Debug)]
pub struct OracleSampler {
    pub spec: SyntheticSpec,
    pub species: usize,
    pub normalizer: Option<Normalizer>,
    pub offset: Vec<f64>,
}

impl OracleSampler {
    pub fn new(spec: SyntheticSpec, species: usize) -> Self {
        let k = spec.resp_dim();
        Self { spec, species, normalizer: None, offset: vec![0.0; k] }
    }

    pub fn with_normalizer(mut self, n: Normalizer) -> Self {
        self.normalizer = Some(n);
        self
    }

    pub fn with_offset(mut self, offset: Vec<f64>) -> Self {
        self.offset = offset;
        self
    }
}

impl ConditionalSampler for OracleSampler {
    fn cond_dim(&self) -> usize {
        self.spec.cond_dim()
    }

    fn resp_dim(&self) -> usize {
        self.spec.resp_dim()
    }

    fn sample(&self, conditions: &Tensor, rng: &mut SimRng) -> Result<Tensor> {
        check_conditions(conditions, self.cond_dim(), "OracleSampler::sample")?;
        let raw = match &self.normalizer {
            Some(n) => n.denormalize_conditions(conditions)?,
            None => conditions.clone(),
        };
        let k = self.resp_dim();
        let mut out = Tensor::zeros(raw.rows(), k);
        for r in 0..raw.rows() {
            let row = out.row_mut(r);
            self.spec.sample_response(raw.row(r), self.species, rng, row);
            for (v, o) in row.iter_mut().zip(&self.offset) {
                *v += o;
            }
        }
        match &self.normalizer {
            Some(n) => n.normalize_responses(&out),
            None => Ok(out),
        }
    }
}

/// A family of oracle samplers, typically differing only by offset.
#[derive(Clone, Debug)]
pub struct OracleEnsemble {
    pub members: Vec<OracleSampler>,
}

impl OracleEnsemble {
    pub fn new(members: Vec<OracleSampler>) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::Config("an ensemble needs at least two members".into()));
        }
        Ok(Self { members })
    }
}

impl UncertainGenerator for OracleEnsemble {
    fn n_members(&self) -> usize {
        self.members.len()
    }

    fn cond_dim(&self) -> usize {
        self.members[0].cond_dim()
    }

    fn resp_dim(&self) -> usize {
        self.members[0].resp_dim()
    }

    fn sample_member(&self, member: usize, conditions: &Tensor, rng: &mut SimRng) -> Result<Tensor> {
        self.members
            .get(member)
            .ok_or_else(|| Error::Config(format!("no member {member}")))?
            .sample(conditions, rng)
    }
}
