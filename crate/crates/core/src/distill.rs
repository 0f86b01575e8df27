//! Distillation of ensemble spread into explicit variance regressors.
//!
//! For two independent draws from one generator at fixed `X`,
//! `E[(Y2 - Y1)^2] / 2 = Var_pdf(Y|X)`; for draws from two distinct members it
//! is `Var_tot(Y|X)`. Regressors `f_r` and `f_e` trained on these squared
//! differences give `sigma_syst(X) = sqrt(max(0, f_e(X)/2 - f_r(X)/2))`.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndmath::{adam_step, softplus, Activation, AdamConfig, AdamState, Graph, MlpDocument, MlpParams, Tensor};
use crate::rng::{derive_seed, substream, SimRng};
use crate::sampler::{check_conditions, ConditionalSampler, UncertainGenerator};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSource {
    Reference,
    Ensemble,
}

/// Conditions with per-output squared differences of paired draws.
#[derive(Clone, Debug, PartialEq)]
pub struct PairTargetSet {
    pub conditions: Tensor,
    /// `n x k`, all entries `>= 0`.
    pub targets: Tensor,
    pub source: PairSource,
}

impl PairTargetSet {
    pub fn len(&self) -> usize {
        self.targets.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Column means of the targets halved: the variance estimate per output.
    pub fn half_mean(&self) -> Vec<f64> {
        let n = self.len() as f64;
        self.targets.sum_rows().as_slice().iter().map(|s| s / n / 2.0).collect()
    }
}

fn squared_diff(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, "squared_diff", |x, y| (y - x) * (y - x))
}

/// Two independent draws from the same sampler per condition row.
pub fn build_reference_pairs(gen: &dyn ConditionalSampler, conditions: &Tensor, rng: &mut SimRng) -> Result<PairTargetSet> {
    check_conditions(conditions, gen.cond_dim(), "build_reference_pairs")?;
    let y1 = gen.sample(conditions, rng)?;
    let y2 = gen.sample(conditions, rng)?;
    Ok(PairTargetSet { conditions: conditions.clone(), targets: squared_diff(&y1, &y2)?, source: PairSource::Reference })
}

/// One draw from each of two distinct members, chosen uniformly per row.
pub fn build_ensemble_pairs(ug: &dyn UncertainGenerator, conditions: &Tensor, rng: &mut SimRng) -> Result<PairTargetSet> {
    check_conditions(conditions, ug.cond_dim(), "build_ensemble_pairs")?;
    let m = ug.n_members();
    if m < 2 {
        return Err(Error::Config(format!("ensemble pairs need at least 2 members, got {m}")));
    }
    let n = conditions.rows();
    let picks: Vec<(usize, usize)> = (0..n)
        .map(|_| {
            let a = rng.random_range(0..m);
            let b = (a + rng.random_range(1..m)) % m;
            (a, b)
        })
        .collect();
    let k = ug.resp_dim();
    let mut draws = [Tensor::zeros(n, k), Tensor::zeros(n, k)];
    for (slot, out) in draws.iter_mut().enumerate() {
        for member in 0..m {
            let rows: Vec<usize> =
                (0..n).filter(|&r| if slot == 0 { picks[r].0 } else { picks[r].1 } == member).collect();
            if rows.is_empty() {
                continue;
            }
            let y = ug.sample_member(member, &conditions.select_rows(&rows), rng)?;
            for (i, &r) in rows.iter().enumerate() {
                out.row_mut(r).copy_from_slice(y.row(i));
            }
        }
    }
    Ok(PairTargetSet {
        conditions: conditions.clone(),
        targets: squared_diff(&draws[0], &draws[1])?,
        source: PairSource::Ensemble,
    })
}

/// `n` condition rows: with probability `1 - hull_fraction` a resampled
/// training row, otherwise a uniform draw from the training bounding box
/// widened by `expansion` of its range on each side.
pub fn pair_conditions(train: &Tensor, n: usize, expansion: f64, hull_fraction: f64, rng: &mut SimRng) -> Result<Tensor> {
    if train.rows() == 0 {
        return Err(Error::Config("no training conditions to draw pair conditions from".into()));
    }
    let c = train.cols();
    let (mut lo, mut hi) = (vec![f64::INFINITY; c], vec![f64::NEG_INFINITY; c]);
    for r in 0..train.rows() {
        for (j, &v) in train.row(r).iter().enumerate() {
            lo[j] = lo[j].min(v);
            hi[j] = hi[j].max(v);
        }
    }
    let mut out = Tensor::zeros(n, c);
    for r in 0..n {
        if rng.random::<f64>() < hull_fraction {
            for j in 0..c {
                let pad = expansion * (hi[j] - lo[j]);
                out.set(r, j, rng.random_range((lo[j] - pad)..=(hi[j] + pad)));
            }
        } else {
            let src = rng.random_range(0..train.rows());
            out.row_mut(r).copy_from_slice(train.row(src));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressorConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            epochs: 20,
            batch_size: 256,
            adam: AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 },
            seed: 0,
        }
    }
}

pub const MIN_PAIR_ROWS: usize = 1000;

/// MLP with a softplus head, so predictions are strictly positive.
#[derive(Clone, Debug, PartialEq)]
pub struct VarianceRegressor {
    pub mlp: MlpParams,
}

impl VarianceRegressor {
    pub fn predict(&self, conditions: &Tensor) -> Result<Tensor> {
        Ok(self.mlp.forward(conditions)?.map(softplus))
    }

    pub fn cond_dim(&self) -> usize {
        self.mlp.input_dim()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegressorLog {
    /// Mean minibatch MSE per epoch.
    pub epoch_mse: Vec<f64>,
}

pub fn train_variance_regressor(pairs: &PairTargetSet, cfg: &RegressorConfig) -> Result<(VarianceRegressor, RegressorLog)> {
    if pairs.len() < MIN_PAIR_ROWS {
        return Err(Error::Config(format!("{} pair rows, need at least {MIN_PAIR_ROWS}", pairs.len())));
    }
    if cfg.batch_size == 0 || cfg.hidden.contains(&0) {
        return Err(Error::Config("regressor sizes must be positive".into()));
    }
    let dims: Vec<usize> = std::iter::once(pairs.conditions.cols())
        .chain(cfg.hidden.iter().copied())
        .chain(std::iter::once(pairs.targets.cols()))
        .collect();
    let mut mlp = MlpParams::init(&dims, Activation::Relu, Activation::Linear, derive_seed(cfg.seed, "regressor-init"))?;
    // The head starts as the constant mean target.
    let inverse_softplus = |t: f64| if t > 30.0 { t } else { t.exp_m1().max(1e-12).ln() };
    let means = pairs.targets.sum_rows().map(|s| s / pairs.len() as f64);
    if let Some(last) = mlp.layers.last_mut() {
        last.weight.as_mut_slice().fill(0.0);
        last.bias = means.map(inverse_softplus);
    }
    let mut adam = AdamState::new(cfg.adam, mlp.tensors());
    let mut rng = substream(cfg.seed, "regressor-batches");
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut log = RegressorLog::default();
    // Cosine decay to zero; a constant rate leaves the final fit noisy.
    let total_steps = (cfg.epochs * pairs.len().div_ceil(cfg.batch_size)) as f64;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let vars = mlp.register(&mut g, true);
            let x = g.constant(pairs.conditions.select_rows(chunk));
            let t = g.constant(pairs.targets.select_rows(chunk));
            let raw = mlp.trace(&mut g, &vars, x, None)?;
            let pred = g.softplus(raw);
            let err = g.sub(pred, t)?;
            let sq = g.square(err);
            let loss = g.mean(sq);
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Training { step: epoch, context: format!("variance regressor ({:?})", pairs.source) });
            }
            total += value;
            batches += 1;
            let grads = vars.gradients(&g.backward(loss)?, &mlp);
            adam.config.lr = cfg.adam.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps).cos());
            adam_step(&mut mlp.tensors_mut(), &grads, &mut adam)?;
            step += 1;
        }
        log.epoch_mse.push(total / batches as f64);
    }
    Ok((VarianceRegressor { mlp }, log))
}

/// `sqrt(max(0, f_e/2 - f_r/2))`; the flag reports a clamp (`f_e < f_r`).
pub fn sigma_syst_value(f_e: f64, f_r: f64) -> (f64, bool) {
    let d = 0.5 * f_e - 0.5 * f_r;
    if d > 0.0 {
        (d.sqrt(), false)
    } else {
        (0.0, f_e < f_r)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairManifest {
    pub reference_rows: usize,
    pub ensemble_rows: usize,
    pub reference_member: usize,
    pub seed: u64,
    pub regressor: RegressorConfig,
    pub reference_log: RegressorLog,
    pub ensemble_log: RegressorLog,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VarianceRegressorPair {
    pub f_r: VarianceRegressor,
    pub f_e: VarianceRegressor,
    pub manifest: PairManifest,
}

pub const REGRESSOR_PAIR_FORMAT: &str = "ganuq-variance-regressors";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegressorPairDocument {
    format: String,
    version: u32,
    manifest: PairManifest,
    f_r: MlpDocument,
    f_e: MlpDocument,
}

impl VarianceRegressorPair {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&RegressorPairDocument {
            format: REGRESSOR_PAIR_FORMAT.into(),
            version: 1,
            manifest: self.manifest.clone(),
            f_r: self.f_r.mlp.to_document(),
            f_e: self.f_e.mlp.to_document(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: RegressorPairDocument = serde_json::from_str(s)?;
        if doc.format != REGRESSOR_PAIR_FORMAT || doc.version != 1 {
            return Err(Error::Serialization(format!("not a regressor pair: {} v{}", doc.format, doc.version)));
        }
        Ok(Self {
            f_r: VarianceRegressor { mlp: MlpParams::from_document(doc.f_r)? },
            f_e: VarianceRegressor { mlp: MlpParams::from_document(doc.f_e)? },
            manifest: doc.manifest,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub n_pairs: usize,
    /// Widening of the training bounding box, as a fraction of its range.
    pub hull_expansion: f64,
    /// Share of pair conditions drawn from the widened box.
    pub hull_fraction: f64,
    /// Member that provides the reference (single-generator) pairs.
    pub reference_member: usize,
    pub regressor: RegressorConfig,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            n_pairs: 100_000,
            hull_expansion: 0.2,
            hull_fraction: 0.2,
            reference_member: 0,
            regressor: RegressorConfig::default(),
            seed: 0,
        }
    }
}

/// Builds both pair sets on shared conditions and fits `f_r` and `f_e`.
pub fn distill(ug: &dyn UncertainGenerator, train_conditions: &Tensor, cfg: &DistillConfig) -> Result<VarianceRegressorPair> {
    if cfg.reference_member >= ug.n_members() {
        return Err(Error::Config(format!("reference member {} out of range", cfg.reference_member)));
    }
    let mut cond_rng = substream(cfg.seed, "pair-conditions");
    let cond = pair_conditions(train_conditions, cfg.n_pairs, cfg.hull_expansion, cfg.hull_fraction, &mut cond_rng)?;
    let reference = crate::sampler::MemberSampler::new(ug, cfg.reference_member)?;
    let ref_pairs = build_reference_pairs(&reference, &cond, &mut substream(cfg.seed, "reference-pairs"))?;
    let ens_pairs = build_ensemble_pairs(ug, &cond, &mut substream(cfg.seed, "ensemble-pairs"))?;
    let (f_r, reference_log) = train_variance_regressor(
        &ref_pairs,
        &RegressorConfig { seed: derive_seed(cfg.seed, "f_r"), ..cfg.regressor.clone() },
    )?;
    let (f_e, ensemble_log) = train_variance_regressor(
        &ens_pairs,
        &RegressorConfig { seed: derive_seed(cfg.seed, "f_e"), ..cfg.regressor.clone() },
    )?;
    Ok(VarianceRegressorPair {
        f_r,
        f_e,
        manifest: PairManifest {
            reference_rows: ref_pairs.len(),
            ensemble_rows: ens_pairs.len(),
            reference_member: cfg.reference_member,
            seed: cfg.seed,
            regressor: cfg.regressor.clone(),
            reference_log,
            ensemble_log,
        },
    })
}

/// Fast `sigma_syst(X)` evaluator over a trained regressor pair. Counts the
/// entries clamped to 0 because `f_e < f_r`.
#[derive(Debug)]
pub struct SystUncertainty {
    pub pair: VarianceRegressorPair,
    clamped: AtomicUsize,
}

impl Clone for SystUncertainty {
    fn clone(&self) -> Self {
        Self { pair: self.pair.clone(), clamped: AtomicUsize::new(self.clamp_count()) }
    }
}

impl SystUncertainty {
    pub fn new(pair: VarianceRegressorPair) -> Self {
        Self { pair, clamped: AtomicUsize::new(0) }
    }

    pub fn clamp_count(&self) -> usize {
        self.clamped.load(Ordering::Relaxed)
    }

    /// `n x k` non-negative values.
    pub fn sigma_syst(&self, conditions: &Tensor) -> Result<Tensor> {
        check_conditions(conditions, self.pair.f_r.cond_dim(), "sigma_syst")?;
        let f_e = self.pair.f_e.predict(conditions)?;
        let f_r = self.pair.f_r.predict(conditions)?;
        let out = f_e.zip_map(&f_r, "sigma_syst", |e, r| sigma_syst_value(e, r).0)?;
        let clamps = f_e.as_slice().iter().zip(f_r.as_slice()).filter(|(e, r)| sigma_syst_value(**e, **r).1).count();
        if clamps > 0 {
            self.clamped.fetch_add(clamps, Ordering::Relaxed);
            log::debug!("sigma_syst clamped {clamps} entries where f_e < f_r");
        }
        Ok(out)
    }
}

/// Direct Monte Carlo `sqrt(max(0, Var_tot - Var_pdf))` per condition row,
/// from `n_pairs` pairs of each kind at that row.
pub fn monte_carlo_sigma_syst(
    ug: &dyn UncertainGenerator,
    reference_member: usize,
    conditions: &Tensor,
    n_pairs: usize,
    rng: &mut SimRng,
) -> Result<Tensor> {
    let reference = crate::sampler::MemberSampler::new(ug, reference_member)?;
    let k = ug.resp_dim();
    let mut out = Tensor::zeros(conditions.rows(), k);
    for r in 0..conditions.rows() {
        let cond = Tensor::from_vec(1, conditions.cols(), conditions.row(r).to_vec())?.broadcast_rows(n_pairs);
        let pdf = build_reference_pairs(&reference, &cond, rng)?.half_mean();
        let tot = build_ensemble_pairs(ug, &cond, rng)?.half_mean();
        for j in 0..k {
            out.set(r, j, (tot[j] - pdf[j]).max(0.0).sqrt());
        }
    }
    Ok(out)
}
