//! Structured Monte Carlo dropout.
//!
//! A mask drops, for every hidden unit `i` independently with probability
//! `p`, the block of `k` units `i, i+1, .., i+k-1` (indices wrap around the
//! layer). A unit therefore survives with probability `(1-p)^k`, and kept
//! activations are scaled by `1/(1-p)^k` when the mask is built. A fixed set
//! of masks turns one trained generator into a virtual ensemble.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gan::{CriticModel, GanConfig, GanTrainer, GeneratorModel, TrainingLog};
use crate::ndmath::Tensor;
use crate::rng::{substream, SimRng};
use crate::sampler::{check_conditions, UncertainGenerator};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StructuredDropoutSpec {
    /// Probability that a unit starts a dropped block.
    pub p: f64,
    /// Block length.
    pub k: usize,
    /// Hidden layers carrying dropout; `None` means all of them.
    #[serde(default)]
    pub layers: Option<Vec<usize>>,
}

impl Default for StructuredDropoutSpec {
    fn default() -> Self {
        Self { p: 0.05, k: 3, layers: None }
    }
}

impl StructuredDropoutSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.p) {
            return Err(Error::Config(format!("dropout p = {} outside [0, 1)", self.p)));
        }
        if self.k == 0 {
            return Err(Error::Config("dropout block size k must be at least 1".into()));
        }
        if self.keep_probability() <= 0.0 {
            return Err(Error::Config("dropout keep probability underflows to 0".into()));
        }
        Ok(())
    }

    pub fn keep_probability(&self) -> f64 {
        (1.0 - self.p).powi(self.k as i32)
    }

    pub fn applies_to(&self, layer: usize) -> bool {
        self.layers.as_ref().is_none_or(|l| l.contains(&layer))
    }
}

/// One mask: per hidden layer, the kept flags (or `None` for an undropped
/// layer) and the common inverted-dropout scale.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask {
    pub keep: Vec<Option<Vec<bool>>>,
    pub scale: f64,
}

impl DropoutMask {
    /// Per-layer multipliers (`scale` for kept units, 0 for dropped) in the
    /// form taken by the masked forward passes.
    pub fn layer_tensors(&self) -> Vec<Option<Tensor>> {
        self.keep
            .iter()
            .map(|layer| {
                layer.as_ref().map(|flags| {
                    Tensor::row_vector(flags.iter().map(|&k| if k { self.scale } else { 0.0 }).collect())
                })
            })
            .collect()
    }
}

pub fn make_structured_mask(spec: &StructuredDropoutSpec, layer_widths: &[usize], rng: &mut SimRng) -> Result<DropoutMask> {
    spec.validate()?;
    let keep = layer_widths
        .iter()
        .enumerate()
        .map(|(l, &w)| {
            spec.applies_to(l).then(|| {
                let mut flags = vec![true; w];
                for i in 0..w {
                    if rng.random::<f64>() < spec.p {
                        for j in 0..spec.k {
                            flags[(i + j) % w] = false;
                        }
                    }
                }
                flags
            })
        })
        .collect();
    Ok(DropoutMask { keep, scale: 1.0 / spec.keep_probability() })
}

/// Generator forward pass under `mask`, with fresh standard-normal noise.
pub fn dropout_forward(gen: &GeneratorModel, mask: &DropoutMask, conditions: &Tensor, rng: &mut SimRng) -> Result<Tensor> {
    check_conditions(conditions, gen.cond_dim(), "dropout_forward")?;
    let noise = gen.draw_noise(conditions.rows(), rng);
    gen.sample_with_noise(conditions, &noise, Some(&mask.layer_tensors()))
}

/// `M` masks generated once from `seed`; regenerable bit for bit from
/// `(spec, widths, M, seed)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub spec: StructuredDropoutSpec,
    pub seed: u64,
    masks: Vec<DropoutMask>,
}

impl MaskSet {
    pub fn generate(spec: &StructuredDropoutSpec, layer_widths: &[usize], m: usize, seed: u64) -> Result<Self> {
        let mut rng = substream(seed, "mask-set");
        let masks = (0..m)
            .map(|_| make_structured_mask(spec, layer_widths, &mut rng))
            .collect::<Result<_>>()?;
        Ok(Self { spec: spec.clone(), seed, masks })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&DropoutMask> {
        self.masks.get(i)
    }
}

/// A dropout-trained generator presented as an `M`-member family.
#[derive(Clone, Debug, PartialEq)]
pub struct VirtualEnsemble {
    pub generator: GeneratorModel,
    pub masks: MaskSet,
}

pub const DROPOUT_MODEL_FORMAT: &str = "ganuq-dropout-model";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VirtualEnsembleDocument {
    format: String,
    version: u32,
    spec: StructuredDropoutSpec,
    n_masks: usize,
    mask_seed: u64,
    generator: serde_json::Value,
}

pub fn virtual_ensemble(gen: &GeneratorModel, spec: &StructuredDropoutSpec, m: usize, seed: u64) -> Result<VirtualEnsemble> {
    if m < 2 {
        return Err(Error::Config(format!("a virtual ensemble needs at least 2 masks, got {m}")));
    }
    let masks = MaskSet::generate(spec, &gen.mlp.hidden_widths(), m, seed)?;
    Ok(VirtualEnsemble { generator: gen.clone(), masks })
}

impl VirtualEnsemble {
    /// The mask set is stored as `(spec, M, seed)` and regenerated on load.
    pub fn to_json(&self) -> Result<String> {
        let generator: serde_json::Value = serde_json::from_str(&self.generator.to_json()?)?;
        Ok(serde_json::to_string_pretty(&VirtualEnsembleDocument {
            format: DROPOUT_MODEL_FORMAT.into(),
            version: 1,
            spec: self.masks.spec.clone(),
            n_masks: self.masks.len(),
            mask_seed: self.masks.seed,
            generator,
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: VirtualEnsembleDocument = serde_json::from_str(s)?;
        if doc.format != DROPOUT_MODEL_FORMAT || doc.version != 1 {
            return Err(Error::Serialization(format!("not a dropout model document: {} v{}", doc.format, doc.version)));
        }
        let generator = GeneratorModel::from_json(&doc.generator.to_string())?;
        virtual_ensemble(&generator, &doc.spec, doc.n_masks, doc.mask_seed)
    }
}

impl UncertainGenerator for VirtualEnsemble {
    fn n_members(&self) -> usize {
        self.masks.len()
    }

    fn cond_dim(&self) -> usize {
        self.generator.cond_dim()
    }

    fn resp_dim(&self) -> usize {
        self.generator.resp_dim()
    }

    fn sample_member(&self, member: usize, conditions: &Tensor, rng: &mut SimRng) -> Result<Tensor> {
        let mask = self
            .masks
            .get(member)
            .ok_or_else(|| Error::Config(format!("member {member} out of range for {} masks", self.masks.len())))?;
        dropout_forward(&self.generator, mask, conditions, rng)
    }
}

/// Trains a GAN whose generator draws a fresh mask for every forward pass.
/// With `p = 0` no masks are drawn and the result equals `train_gan` bit for
/// bit.
pub fn train_mc_dropout_gan(
    cfg: &GanConfig,
    spec: &StructuredDropoutSpec,
    train: &Dataset,
) -> Result<(GeneratorModel, CriticModel, TrainingLog)> {
    let mut trainer = GanTrainer::new(cfg, train, Some(spec.clone()))?;
    trainer.context = format!("mcdropout p={} k={}", spec.p, spec.k);
    let mut log = TrainingLog { records: Vec::new(), dropout: Some(spec.clone()) };
    trainer.run(train, cfg.generator_steps, &mut log)?;
    Ok((trainer.gen, trainer.critic, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gan::train_gan;
    use crate::ndmath::{Activation, AdamConfig, Layer, MlpParams};
    use crate::rng::{rng_from_seed, standard_normal};
    use crate::Normalizer;
    use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, Discrete};

    fn spec(p: f64, k: usize) -> StructuredDropoutSpec {
        StructuredDropoutSpec { p, k, layers: None }
    }

    #[test]
    fn zero_rate_gives_all_ones() {
        let m = make_structured_mask(&spec(0.0, 3), &[7, 4], &mut rng_from_seed(1)).unwrap();
        assert_eq!(m.scale, 1.0);
        assert!(m.keep.iter().all(|l| l.as_ref().unwrap().iter().all(|&k| k)));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        for bad in [spec(1.0, 1), spec(-0.1, 1), spec(0.1, 0)] {
            assert!(make_structured_mask(&bad, &[4], &mut rng_from_seed(1)).is_err());
        }
    }

    #[test]
    fn block_wraps_around_the_layer() {
        // With p close to 1 almost every unit starts a block, so every unit is dropped.
        let m = make_structured_mask(&spec(0.999999, 2), &[5], &mut rng_from_seed(3)).unwrap();
        assert_eq!(m.keep[0].as_ref().unwrap(), &vec![false; 5]);
    }

    #[test]
    fn selected_layers_only() {
        let s = StructuredDropoutSpec { p: 0.5, k: 1, layers: Some(vec![1]) };
        let m = make_structured_mask(&s, &[4, 4, 4], &mut rng_from_seed(1)).unwrap();
        assert!(m.keep[0].is_none() && m.keep[1].is_some() && m.keep[2].is_none());
        let t = m.layer_tensors();
        assert!(t[0].is_none());
        assert!(t[1].as_ref().unwrap().as_slice().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn keep_rate_follows_block_law() {
        let s = spec(0.1, 3);
        let mut rng = rng_from_seed(11);
        let (mut kept, mut total) = (0usize, 0usize);
        for _ in 0..10_000 {
            let m = make_structured_mask(&s, &[128], &mut rng).unwrap();
            let flags = m.keep[0].as_ref().unwrap();
            kept += flags.iter().filter(|&&k| k).count();
            total += flags.len();
        }
        let rate = kept as f64 / total as f64;
        assert!((rate / 0.729 - 1.0).abs() < 0.02, "keep rate {rate}");
    }

    #[test]
    fn single_unit_blocks_are_bernoulli() {
        let (p, width, n_masks) = (0.2, 32u64, 10_000);
        let mut rng = rng_from_seed(12);
        let mut counts = vec![0usize; width as usize + 1];
        for _ in 0..n_masks {
            let m = make_structured_mask(&spec(p, 1), &[width as usize], &mut rng).unwrap();
            counts[m.keep[0].as_ref().unwrap().iter().filter(|&&k| !k).count()] += 1;
        }
        // Dropped-unit counts per mask against Binomial(width, p), pooling
        // sparse tails so every cell expects at least 5.
        let binom = Binomial::new(p, width).unwrap();
        let mut cells: Vec<(f64, f64)> = Vec::new();
        let (mut obs, mut exp) = (0.0, 0.0);
        for (d, &c) in counts.iter().enumerate() {
            obs += c as f64;
            exp += binom.pmf(d as u64) * n_masks as f64;
            if exp >= 5.0 {
                cells.push((obs, exp));
                (obs, exp) = (0.0, 0.0);
            }
        }
        let last = cells.last_mut().unwrap();
        last.0 += obs;
        last.1 += exp;
        let stat: f64 = cells.iter().map(|(o, e)| (o - e).powi(2) / e).sum();
        let p_value = 1.0 - ChiSquared::new((cells.len() - 1) as f64).unwrap().cdf(stat);
        assert!(p_value > 0.01, "chi-square {stat} over {} cells, p = {p_value}", cells.len());
    }

    fn tiny_generator() -> GeneratorModel {
        let cfg = GanConfig {
            d_noise: 2,
            generator_hidden: vec![6, 6],
            critic_hidden: vec![4],
            critic_dim: 2,
            ..GanConfig::default()
        };
        let mut g = GeneratorModel::init(2, 2, &cfg, 3).unwrap();
        for l in &mut g.mlp.layers {
            l.bias = l.bias.map(|_| 0.3);
        }
        g
    }

    #[test]
    fn all_ones_mask_matches_plain_sampling() {
        let gen = tiny_generator();
        let cond = standard_normal(5, 2, &mut rng_from_seed(1));
        let m = make_structured_mask(&spec(0.0, 2), &gen.mlp.hidden_widths(), &mut rng_from_seed(2)).unwrap();
        let a = dropout_forward(&gen, &m, &cond, &mut rng_from_seed(9)).unwrap();
        let b = crate::ConditionalSampler::sample(&gen, &cond, &mut rng_from_seed(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn all_zero_mask_leaves_only_biases() {
        let gen = tiny_generator();
        let cond = standard_normal(4, 2, &mut rng_from_seed(1));
        let widths = gen.mlp.hidden_widths();
        let mask = DropoutMask { keep: widths.iter().map(|&w| Some(vec![false; w])).collect(), scale: 2.0 };
        let out = dropout_forward(&gen, &mask, &cond, &mut rng_from_seed(5)).unwrap();
        let last = gen.mlp.layers.last().unwrap();
        for r in 0..4 {
            assert_eq!(out.row(r), last.bias.as_slice());
        }
    }

    #[test]
    fn masked_linear_layer_is_unbiased() {
        // input -> hidden (linear, masked) -> output (identity)
        let w1 = Tensor::from_rows(&[vec![1.0, -0.5, 2.0, 0.25, 1.5, -1.0]]).unwrap();
        let layers = vec![
            Layer { weight: w1, bias: Tensor::row_vector(vec![0.1; 6]), activation: Activation::Linear },
            Layer { weight: Tensor::ones(6, 1), bias: Tensor::zeros(1, 1), activation: Activation::Linear },
        ];
        let net = MlpParams { layers, seed: 0 };
        let x = Tensor::from_rows(&[vec![0.7]]).unwrap();
        let plain = net.forward(&x).unwrap().item();
        let s = spec(0.1, 2);
        let mut rng = rng_from_seed(4);
        let n = 10_000;
        let mean: f64 = (0..n)
            .map(|_| {
                let m = make_structured_mask(&s, &[6], &mut rng).unwrap();
                net.forward_masked(&x, Some(&m.layer_tensors())).unwrap().item()
            })
            .sum::<f64>()
            / n as f64;
        assert!((mean / plain - 1.0).abs() < 0.01, "masked mean {mean}, plain {plain}");
    }

    #[test]
    fn virtual_ensemble_contract() {
        let gen = tiny_generator();
        let s = spec(0.2, 2);
        assert!(virtual_ensemble(&gen, &s, 1, 0).is_err());
        let a = virtual_ensemble(&gen, &s, 6, 42).unwrap();
        let b = virtual_ensemble(&gen, &s, 6, 42).unwrap();
        assert_eq!(a.masks, b.masks);
        let cond = standard_normal(3, 2, &mut rng_from_seed(1));
        let outs: Vec<Tensor> =
            (0..6).map(|m| a.sample_member(m, &cond, &mut rng_from_seed(8)).unwrap()).collect();
        let distinct = (0..6).flat_map(|i| (i + 1..6).map(move |j| (i, j))).filter(|&(i, j)| outs[i] != outs[j]).count();
        assert!(distinct >= 10, "only {distinct} of 15 member pairs differ");
        assert_eq!(VirtualEnsemble::from_json(&a.to_json().unwrap()).unwrap(), a);
    }

    #[test]
    fn zero_rate_training_equals_plain_training() {
        let mut rng = rng_from_seed(3);
        let n = 200;
        let cond = standard_normal(n, 1, &mut rng);
        let resp = standard_normal(n, 1, &mut rng);
        let ds = Dataset::new(cond, resp, vec![0; n], vec!["a".into()]).unwrap();
        let ds = Normalizer::fit(&ds).unwrap().apply(&ds).unwrap();
        let cfg = GanConfig {
            batch_size: 32,
            generator_steps: 6,
            critic_steps: 2,
            adam: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
            d_noise: 2,
            generator_hidden: vec![8, 8],
            critic_hidden: vec![8],
            critic_dim: 3,
            seed: 9,
            ..GanConfig::default()
        };
        let (g0, c0, l0) = train_gan(&cfg, &ds).unwrap();
        let (g1, c1, l1) = train_mc_dropout_gan(&cfg, &spec(0.0, 3), &ds).unwrap();
        assert_eq!(g0, g1);
        assert_eq!(c0, c1);
        assert_eq!(l0.records, l1.records);
        assert_eq!(l1.dropout, Some(spec(0.0, 3)));
        let (g2, _, _) = train_mc_dropout_gan(&cfg, &spec(0.3, 2), &ds).unwrap();
        assert_ne!(g0, g2);
    }
}
