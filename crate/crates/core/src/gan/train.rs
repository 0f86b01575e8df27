use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gan::loss::trace_critic_loss;
use crate::gan::{trace_generator_loss, CriticModel, GanConfig, GeneratorModel};
use crate::mcdropout::{make_structured_mask, StructuredDropoutSpec};
use crate::ndmath::{adam_step, AdamState, Graph, Tensor};
use crate::rng::{derive_seed, substream, SimRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Critic objective after the last critic update of this step.
    pub critic_loss: f64,
    /// `mean f(y_r) - mean f(y_g)`, without the diversity term.
    pub generator_loss: f64,
    pub alpha: f64,
    /// Batch mean of `|D(y_g) - D(y_union)|`, when the diversity term is active.
    pub diversity: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<StepRecord>,
    /// Dropout spec the generator was trained with, if any.
    pub dropout: Option<StructuredDropoutSpec>,
}

pub(crate) struct Batch {
    pub cond: Tensor,
    pub y_r: Tensor,
}

/// One generator/critic pair with its optimizer state and random streams.
///
/// Every stochastic ingredient has its own substream of `cfg.seed`, so
/// enabling dropout (which draws masks) does not perturb batches or noise.
pub(crate) struct GanTrainer {
    pub cfg: GanConfig,
    pub gen: GeneratorModel,
    pub critic: CriticModel,
    gen_adam: AdamState,
    critic_adam: AdamState,
    batch_rng: SimRng,
    noise_rng: SimRng,
    interp_rng: SimRng,
    mask_rng: SimRng,
    pub dropout: Option<StructuredDropoutSpec>,
    pub step: usize,
    /// Free-form tag attached to training errors (member, phase).
    pub context: String,
}

impl GanTrainer {
    pub fn new(cfg: &GanConfig, train: &Dataset, dropout: Option<StructuredDropoutSpec>) -> Result<Self> {
        cfg.validate()?;
        let Some(normalizer) = &train.normalizer else {
            return Err(Error::Contract("GAN training requires a normalized dataset".into()));
        };
        if train.is_empty() {
            return Err(Error::Config("empty training set".into()));
        }
        if let Some(spec) = &dropout {
            spec.validate()?;
        }
        let mut gen =
            GeneratorModel::init(train.cond_dim(), train.resp_dim(), cfg, derive_seed(cfg.seed, "generator-init"))?;
        gen.normalizer = Some(normalizer.clone());
        let critic =
            CriticModel::init(train.cond_dim(), train.resp_dim(), cfg, derive_seed(cfg.seed, "critic-init"))?;
        let gen_adam = AdamState::new(cfg.adam, gen.mlp.tensors());
        let critic_adam = AdamState::new(cfg.adam, critic.mlp.tensors());
        Ok(Self {
            cfg: cfg.clone(),
            gen,
            critic,
            gen_adam,
            critic_adam,
            batch_rng: substream(cfg.seed, "batches"),
            noise_rng: substream(cfg.seed, "noise"),
            interp_rng: substream(cfg.seed, "interpolation"),
            mask_rng: substream(cfg.seed, "masks"),
            dropout,
            step: 0,
            context: "gan".into(),
        })
    }

    /// Fresh generator weights from `seed`; optimizer state restarts too.
    pub fn reinitialize_generator(&mut self, seed: u64) -> Result<()> {
        let normalizer = self.gen.normalizer.clone();
        self.gen = GeneratorModel::init(self.gen.cond_dim(), self.gen.resp_dim(), &self.cfg, seed)?;
        self.gen.normalizer = normalizer;
        self.gen_adam = AdamState::new(self.cfg.adam, self.gen.mlp.tensors());
        Ok(())
    }

    pub fn draw_batch(&mut self, train: &Dataset) -> Batch {
        let n = train.len();
        let rows: Vec<usize> = (0..self.cfg.batch_size).map(|_| self.batch_rng.random_range(0..n)).collect();
        Batch { cond: train.conditions.select_rows(&rows), y_r: train.responses.select_rows(&rows) }
    }

    fn draw_masks(&mut self) -> Result<Option<Vec<Option<Tensor>>>> {
        match &self.dropout {
            Some(spec) if spec.p > 0.0 => {
                let mask = make_structured_mask(spec, &self.gen.mlp.hidden_widths(), &mut self.mask_rng)?;
                Ok(Some(mask.layer_tensors()))
            }
            _ => Ok(None),
        }
    }

    fn generate(&mut self, cond: &Tensor) -> Result<Tensor> {
        let noise = self.gen.draw_noise(cond.rows(), &mut self.noise_rng);
        let masks = self.draw_masks()?;
        self.gen.sample_with_noise(cond, &noise, masks.as_deref())
    }

    fn check(&self, v: f64, what: &str) -> Result<f64> {
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Training { step: self.step, context: format!("{}, {what}", self.context) })
        }
    }

    pub fn critic_step(&mut self, train: &Dataset) -> Result<f64> {
        let batch = self.draw_batch(train);
        let y_g = self.generate(&batch.cond)?;
        let y_gp = self.generate(&batch.cond)?;
        let eps: Vec<f64> = (0..batch.cond.rows()).map(|_| self.interp_rng.random::<f64>()).collect();
        let mut g = Graph::new();
        let vars = self.critic.mlp.register(&mut g, true);
        let out = trace_critic_loss(
            &mut g,
            &self.critic,
            &vars,
            &batch.cond,
            &batch.y_r,
            &y_g,
            &y_gp,
            &eps,
            self.cfg.gp_weight,
        )?;
        let loss = self.check(g.value(out.total).item(), "critic loss")?;
        let grads = vars.gradients(&g.backward(out.total)?, &self.critic.mlp);
        adam_step(&mut self.critic.mlp.tensors_mut(), &grads, &mut self.critic_adam)?;
        Ok(loss)
    }

    /// Generator update on `batch`. With `union = Some((y_union, alpha))` and
    /// `alpha > 0` the objective gains `-alpha * mean |D(y_g) - D(y_union)|`,
    /// where `y_union` is a constant paired rowwise with the batch.
    pub fn generator_step_on(&mut self, batch: &Batch, union: Option<(&Tensor, f64)>) -> Result<(f64, Option<f64>)> {
        let rows = batch.cond.rows();
        let noise = self.gen.draw_noise(rows, &mut self.noise_rng);
        let noise_p = self.gen.draw_noise(rows, &mut self.noise_rng);
        let masks = self.draw_masks()?;
        let masks_p = self.draw_masks()?;

        let mut g = Graph::new();
        let gen_vars = self.gen.mlp.register(&mut g, true);
        let critic_vars = self.critic.mlp.register(&mut g, false);
        let c = g.constant(batch.cond.clone());
        let yr = g.constant(batch.y_r.clone());
        let z = g.constant(noise);
        let zp = g.constant(noise_p);
        let yg = self.gen.trace(&mut g, &gen_vars, c, z, masks.as_deref())?;
        let ygp = self.gen.trace(&mut g, &gen_vars, c, zp, masks_p.as_deref())?;
        let base = trace_generator_loss(&mut g, &self.critic, &critic_vars, c, yr, yg, ygp)?;
        let base_value = self.check(g.value(base).item(), "generator loss")?;

        let (root, diversity) = match union {
            Some((y_union, alpha)) if alpha > 0.0 => {
                let yu = g.constant(y_union.clone());
                let div = crate::ensemble::trace_diversity(&mut g, &self.critic, &critic_vars, c, yg, yu)?;
                let div_value = self.check(g.value(div).item(), "diversity term")?;
                let weighted = g.scale(div, -alpha);
                (g.add(base, weighted)?, Some(div_value))
            }
            _ => (base, None),
        };
        let grads = gen_vars.gradients(&g.backward(root)?, &self.gen.mlp);
        adam_step(&mut self.gen.mlp.tensors_mut(), &grads, &mut self.gen_adam)?;
        Ok((base_value, diversity))
    }

    /// `critic_steps` critic updates followed by one plain generator update.
    pub fn train_step(&mut self, train: &Dataset) -> Result<StepRecord> {
        let mut critic_loss = f64::NAN;
        for _ in 0..self.cfg.critic_steps {
            critic_loss = self.critic_step(train)?;
        }
        let batch = self.draw_batch(train);
        let (generator_loss, _) = self.generator_step_on(&batch, None)?;
        let record = StepRecord { step: self.step, critic_loss, generator_loss, alpha: 0.0, diversity: None };
        self.step += 1;
        Ok(record)
    }

    pub fn run(&mut self, train: &Dataset, steps: usize, log: &mut TrainingLog) -> Result<()> {
        for _ in 0..steps {
            let record = self.train_step(train)?;
            if record.step % 500 == 0 {
                log::debug!(
                    "{} step {}: critic {:.5} generator {:.5}",
                    self.context,
                    record.step,
                    record.critic_loss,
                    record.generator_loss
                );
            }
            log.records.push(record);
        }
        Ok(())
    }
}

/// Trains one conditional Cramer GAN on a normalized dataset.
pub fn train_gan(cfg: &GanConfig, train: &Dataset) -> Result<(GeneratorModel, CriticModel, TrainingLog)> {
    let mut trainer = GanTrainer::new(cfg, train, None)?;
    let mut log = TrainingLog::default();
    trainer.run(train, cfg.generator_steps, &mut log)?;
    Ok((trainer.gen, trainer.critic, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gan::energy_distance;
    use crate::ndmath::AdamConfig;
    use crate::rng::{rng_from_seed, standard_normal};
    use crate::Normalizer;

    /// One constant condition column, response ~ N(0, 1) after normalization.
    fn gaussian_target(n: usize, seed: u64) -> Dataset {
        let mut rng = rng_from_seed(seed);
        let cond: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let resp = standard_normal(n, 1, &mut rng).map(|v| 3.0 + 2.0 * v);
        let ds = Dataset::new(Tensor::from_vec(n, 1, cond).unwrap(), resp, vec![0; n], vec!["a".into()]).unwrap();
        Normalizer::fit(&ds).unwrap().apply(&ds).unwrap()
    }

    fn toy_cfg(steps: usize) -> GanConfig {
        GanConfig {
            batch_size: 128,
            generator_steps: steps,
            d_noise: 4,
            // The default penalty weight inflates the generated spread on
            // nets this small.
            gp_weight: 0.1,
            generator_hidden: vec![16, 16],
            critic_hidden: vec![16, 16],
            critic_dim: 8,
            seed: 5,
            ..GanConfig::default()
        }
    }

    #[test]
    fn zero_steps_returns_initialized_models() {
        let ds = gaussian_target(200, 1);
        let cfg = toy_cfg(0);
        let (gen, critic, log) = train_gan(&cfg, &ds).unwrap();
        let fresh = GanTrainer::new(&cfg, &ds, None).unwrap();
        assert_eq!(gen, fresh.gen);
        assert_eq!(critic, fresh.critic);
        assert!(log.records.is_empty());
    }

    #[test]
    fn unnormalized_data_is_rejected() {
        let mut ds = gaussian_target(50, 1);
        ds.normalizer = None;
        assert!(matches!(train_gan(&toy_cfg(1), &ds), Err(Error::Contract(_))));
    }

    #[test]
    fn same_seed_gives_identical_parameters() {
        let ds = gaussian_target(300, 2);
        let a = train_gan(&toy_cfg(15), &ds).unwrap();
        let b = train_gan(&toy_cfg(15), &ds).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
    }

    #[test]
    fn divergence_reports_the_step() {
        let ds = gaussian_target(100, 3);
        let cfg = GanConfig { adam: AdamConfig { lr: f64::INFINITY, ..AdamConfig::default() }, ..toy_cfg(5) };
        match train_gan(&cfg, &ds) {
            Err(Error::Training { step, .. }) => assert!(step <= 1),
            other => panic!("expected a training error, got {other:?}"),
        }
    }

    #[test]
    fn toy_gaussian_is_learned() {
        let ds = gaussian_target(4000, 4);
        let held_out = gaussian_target(4000, 40);
        let cfg = toy_cfg(2000);
        let distance = |gen: &GeneratorModel| {
            let y = gen.sample_with_noise(
                &held_out.conditions,
                &gen.draw_noise(held_out.len(), &mut rng_from_seed(77)),
                None,
            );
            energy_distance(&y.unwrap(), &held_out.responses).unwrap()
        };
        let initial = distance(&GanTrainer::new(&cfg, &ds, None).unwrap().gen);
        let (gen, _, _) = train_gan(&cfg, &ds).unwrap();
        let trained = distance(&gen);
        assert!(trained <= 0.5 * initial, "energy distance {initial} -> {trained}");

        let y = gen.sample_with_noise(&held_out.conditions, &gen.draw_noise(held_out.len(), &mut rng_from_seed(8)), None).unwrap();
        let mean = y.mean();
        let var = y.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / y.len() as f64;
        assert!(mean.abs() < 0.1, "mean {mean}");
        assert!((var - 1.0).abs() < 0.1, "variance {var}");
    }
}
