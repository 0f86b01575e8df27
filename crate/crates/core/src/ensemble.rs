//! Adversarial deep ensembles.
//!
//! Training runs in three phases: `N` independent GANs are trained with the
//! plain objective; their generators are then reinitialized while the critics
//! keep their weights; finally all members train jointly with the generator
//! objective extended by `-alpha * |D(y_g) - D(y_union)|`, where `y_union` is
//! drawn from the pooled ensemble and `alpha` decays linearly to exactly 0.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Normalizer};
use crate::error::{Error, Result};
use crate::fingerprint::Fingerprinter;
use crate::gan::{generator_loss, CriticModel, GanConfig, GanTrainer, GeneratorModel, StepRecord, TrainingLog};
use crate::ndmath::{Graph, MlpParams, MlpVars, Tensor, Var};
use crate::rng::{derive_seed, substream, SimRng};
use crate::sampler::{check_conditions, ConditionalSampler, UncertainGenerator};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversarialSchedule {
    pub alpha_initial: f64,
    pub phase1_steps: usize,
    /// Joint steps over which alpha decays linearly to 0; at least 2.
    pub phase3_steps: usize,
}

impl Default for AdversarialSchedule {
    fn default() -> Self {
        Self { alpha_initial: 10.0, phase1_steps: 10_000, phase3_steps: 10_000 }
    }
}

impl AdversarialSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_initial >= 0.0) || !self.alpha_initial.is_finite() {
            return Err(Error::Config(format!("alpha_initial = {} must be finite and >= 0", self.alpha_initial)));
        }
        if self.phase3_steps < 2 {
            return Err(Error::Config("phase 3 needs at least 2 steps for alpha to reach 0".into()));
        }
        Ok(())
    }

    /// `alpha_initial * (n - 1 - step) / (n - 1)`; exactly 0 at the last step.
    pub fn alpha(&self, step: usize) -> f64 {
        let last = self.phase3_steps - 1;
        if step >= last {
            return 0.0;
        }
        self.alpha_initial * (last - step) as f64 / last as f64
    }
}

/// Rowwise `|D(c, y_g) - D(c, y_union)|`, averaged over the batch.
pub fn trace_diversity(
    g: &mut Graph,
    critic: &CriticModel,
    vars: &MlpVars,
    conditions: Var,
    y_gen: Var,
    y_union: Var,
) -> Result<Var> {
    let d_gen = critic.trace(g, vars, conditions, y_gen)?;
    let d_union = critic.trace(g, vars, conditions, y_union)?;
    let diff = g.sub(d_gen, d_union)?;
    let norms = g.row_norm(diff);
    Ok(g.mean(norms))
}

pub fn diversity_term(critic: &CriticModel, y_gen: &Tensor, y_union: &Tensor, conditions: &Tensor) -> Result<f64> {
    y_gen.check_same(y_union, "diversity_term")?;
    let mut g = Graph::new();
    let vars = critic.mlp.register(&mut g, false);
    let c = g.constant(conditions.clone());
    let yg = g.constant(y_gen.clone());
    let yu = g.constant(y_union.clone());
    let d = trace_diversity(&mut g, critic, &vars, c, yg, yu)?;
    Ok(g.value(d).item())
}

/// `generator_loss - alpha * diversity_term`; for `alpha = 0` this is
/// `generator_loss` itself.
pub fn ensemble_generator_loss(
    critic: &CriticModel,
    y_real: &Tensor,
    y_gen: &Tensor,
    y_gen_prime: &Tensor,
    y_union: &Tensor,
    conditions: &Tensor,
    alpha: f64,
) -> Result<f64> {
    if !(alpha >= 0.0) {
        return Err(Error::Config(format!("alpha = {alpha} must be >= 0")));
    }
    let base = generator_loss(critic, y_real, y_gen, y_gen_prime, conditions)?;
    if alpha == 0.0 {
        y_gen.check_same(y_union, "ensemble_generator_loss")?;
        return Ok(base);
    }
    Ok(base + -alpha * diversity_term(critic, y_gen, y_union, conditions)?)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: u8,
    pub name: String,
    pub steps: usize,
}

/// Provenance of an adversarial-ensemble run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EnsembleLog {
    pub schedule: Option<AdversarialSchedule>,
    pub phases: Vec<PhaseRecord>,
    /// Alpha applied at each phase-3 step.
    pub alpha_trace: Vec<f64>,
    /// Parameter fingerprints per member at the end of phase 1 and right
    /// after phase 2.
    pub critic_fingerprints_phase1: Vec<String>,
    pub critic_fingerprints_phase2: Vec<String>,
    pub generator_fingerprints_phase1: Vec<String>,
    pub generator_fingerprints_phase2: Vec<String>,
    pub member_logs: Vec<TrainingLog>,
}

pub(crate) fn params_fingerprint(mlp: &MlpParams) -> String {
    let mut f = Fingerprinter::new();
    for t in mlp.tensors() {
        f.u64(t.rows() as u64).u64(t.cols() as u64).f64s(t.as_slice());
    }
    f.hex()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    pub generators: Vec<GeneratorModel>,
    /// One per generator, or empty for families assembled from generators only.
    pub critics: Vec<CriticModel>,
    pub log: EnsembleLog,
}

impl Ensemble {
    pub fn new(generators: Vec<GeneratorModel>, critics: Vec<CriticModel>, log: EnsembleLog) -> Result<Self> {
        if generators.len() < 2 {
            return Err(Error::Config(format!("an ensemble needs at least 2 members, got {}", generators.len())));
        }
        if !critics.is_empty() && critics.len() != generators.len() {
            return Err(Error::Config("critic count must match generator count".into()));
        }
        let first = &generators[0];
        for g in &generators[1..] {
            if g.cond_dim() != first.cond_dim() || g.resp_dim() != first.resp_dim() || g.d_noise != first.d_noise {
                return Err(Error::Config("ensemble members disagree on dimensions".into()));
            }
            if g.normalizer != first.normalizer {
                return Err(Error::Config("ensemble members disagree on normalization".into()));
            }
        }
        Ok(Self { generators, critics, log })
    }

    pub fn normalizer(&self) -> Option<&Normalizer> {
        self.generators[0].normalizer.as_ref()
    }

    /// Writes `member_XX.json` files and `schedule.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (i, g) in self.generators.iter().enumerate() {
            let critic = match self.critics.get(i) {
                Some(c) => Some(serde_json::from_str::<serde_json::Value>(&c.to_json()?)?),
                None => None,
            };
            let doc = MemberDocument {
                format: MEMBER_FORMAT.into(),
                version: 1,
                generator: serde_json::from_str(&g.to_json()?)?,
                critic,
            };
            fs::write(dir.join(format!("member_{i:02}.json")), serde_json::to_string_pretty(&doc)?)?;
        }
        fs::write(dir.join("schedule.json"), serde_json::to_string_pretty(&self.log)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::Config(format!("ensemble directory {} does not exist", dir.display())));
        }
        let (mut generators, mut critics) = (Vec::new(), Vec::new());
        for i in 0.. {
            let path = dir.join(format!("member_{i:02}.json"));
            if !path.exists() {
                break;
            }
            let doc: MemberDocument = serde_json::from_str(&fs::read_to_string(&path)?)?;
            if doc.format != MEMBER_FORMAT || doc.version != 1 {
                return Err(Error::Serialization(format!("{} is not an ensemble member", path.display())));
            }
            generators.push(GeneratorModel::from_json(&doc.generator.to_string())?);
            if let Some(c) = doc.critic {
                critics.push(CriticModel::from_json(&c.to_string())?);
            }
        }
        let log_path = dir.join("schedule.json");
        let log = if log_path.exists() {
            serde_json::from_str(&fs::read_to_string(log_path)?)?
        } else {
            EnsembleLog::default()
        };
        Ensemble::new(generators, critics, log)
    }
}

pub const MEMBER_FORMAT: &str = "ganuq-ensemble-member";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MemberDocument {
    format: String,
    version: u32,
    generator: serde_json::Value,
    critic: Option<serde_json::Value>,
}

impl UncertainGenerator for Ensemble {
    fn n_members(&self) -> usize {
        self.generators.len()
    }

    fn cond_dim(&self) -> usize {
        self.generators[0].cond_dim()
    }

    fn resp_dim(&self) -> usize {
        self.generators[0].resp_dim()
    }

    fn sample_member(&self, member: usize, conditions: &Tensor, rng: &mut SimRng) -> Result<Tensor> {
        let gen = self
            .generators
            .get(member)
            .ok_or_else(|| Error::Config(format!("member {member} out of range for {} members", self.generators.len())))?;
        gen.sample(conditions, rng)
    }
}

/// Each row comes from a uniformly chosen member of `pool`.
pub fn sample_union(pool: &[GeneratorModel], conditions: &Tensor, rng: &mut SimRng) -> Result<Tensor> {
    let owner: Vec<usize> = (0..conditions.rows()).map(|_| rng.random_range(0..pool.len())).collect();
    let mut out = Tensor::zeros(conditions.rows(), pool[0].resp_dim());
    for (m, gen) in pool.iter().enumerate() {
        let rows: Vec<usize> = (0..owner.len()).filter(|&r| owner[r] == m).collect();
        if rows.is_empty() {
            continue;
        }
        let y = gen.sample(&conditions.select_rows(&rows), rng)?;
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(r).copy_from_slice(y.row(i));
        }
    }
    Ok(out)
}

/// Stepwise driver for the three training phases.
pub struct EnsembleTrainer<'a> {
    train: &'a Dataset,
    schedule: AdversarialSchedule,
    members: Vec<GanTrainer>,
    union_rng: SimRng,
    seed: u64,
    log: EnsembleLog,
}

impl<'a> EnsembleTrainer<'a> {
    pub fn new(cfg: &GanConfig, schedule: &AdversarialSchedule, n: usize, train: &'a Dataset) -> Result<Self> {
        if n < 2 {
            return Err(Error::Config(format!("an ensemble needs at least 2 members, got {n}")));
        }
        schedule.validate()?;
        let members = (0..n)
            .map(|m| {
                let mut t = GanTrainer::new(&cfg.with_seed(member_seed(cfg.seed, m)), train, None)?;
                t.context = format!("member {m}, phase 1");
                Ok(t)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            train,
            schedule: schedule.clone(),
            members,
            union_rng: substream(cfg.seed, "union"),
            seed: cfg.seed,
            log: EnsembleLog {
                schedule: Some(schedule.clone()),
                member_logs: vec![TrainingLog::default(); n],
                ..EnsembleLog::default()
            },
        })
    }

    pub fn generators(&self) -> Vec<GeneratorModel> {
        self.members.iter().map(|t| t.gen.clone()).collect()
    }

    pub fn critics(&self) -> Vec<CriticModel> {
        self.members.iter().map(|t| t.critic.clone()).collect()
    }

    pub fn log(&self) -> &EnsembleLog {
        &self.log
    }

    /// Independent plain training of every member.
    pub fn train_phase1(&mut self) -> Result<()> {
        let steps = self.schedule.phase1_steps;
        for (m, trainer) in self.members.iter_mut().enumerate() {
            trainer.run(self.train, steps, &mut self.log.member_logs[m])?;
        }
        self.log.critic_fingerprints_phase1 = self.critic_fingerprints();
        self.log.generator_fingerprints_phase1 = self.generator_fingerprints();
        self.log.phases.push(PhaseRecord { phase: 1, name: "independent".into(), steps });
        Ok(())
    }

    /// New random generator weights; critics are left untouched.
    pub fn reinitialize_generators(&mut self) -> Result<()> {
        for (m, trainer) in self.members.iter_mut().enumerate() {
            trainer.reinitialize_generator(derive_seed(member_seed(self.seed, m), "generator-reinit"))?;
        }
        self.log.critic_fingerprints_phase2 = self.critic_fingerprints();
        self.log.generator_fingerprints_phase2 = self.generator_fingerprints();
        self.log.phases.push(PhaseRecord { phase: 2, name: "reinitialize generators".into(), steps: 0 });
        Ok(())
    }

    /// Joint training with the annealed diversity reward.
    pub fn train_phase3(&mut self) -> Result<()> {
        let steps = self.schedule.phase3_steps;
        for (m, trainer) in self.members.iter_mut().enumerate() {
            trainer.context = format!("member {m}, phase 3");
        }
        for i in 0..steps {
            let alpha = self.schedule.alpha(i);
            // Union rows come from the parameters at the start of the step.
            let pool = if alpha > 0.0 { Some(self.generators()) } else { None };
            for (m, trainer) in self.members.iter_mut().enumerate() {
                let mut critic_loss = f64::NAN;
                for _ in 0..trainer.cfg.critic_steps {
                    critic_loss = trainer.critic_step(self.train)?;
                }
                let batch = trainer.draw_batch(self.train);
                let union = match &pool {
                    Some(p) => Some(sample_union(p, &batch.cond, &mut self.union_rng)?),
                    None => None,
                };
                let (generator_loss, diversity) = trainer.generator_step_on(&batch, union.as_ref().map(|u| (u, alpha)))?;
                self.log.member_logs[m].records.push(StepRecord {
                    step: trainer.step,
                    critic_loss,
                    generator_loss,
                    alpha,
                    diversity,
                });
                trainer.step += 1;
            }
            self.log.alpha_trace.push(alpha);
        }
        self.log.phases.push(PhaseRecord { phase: 3, name: "adversarial".into(), steps });
        Ok(())
    }

    pub fn finish(self) -> Result<Ensemble> {
        let generators = self.generators();
        let critics = self.critics();
        Ensemble::new(generators, critics, self.log)
    }

    fn critic_fingerprints(&self) -> Vec<String> {
        self.members.iter().map(|t| params_fingerprint(&t.critic.mlp)).collect()
    }

    fn generator_fingerprints(&self) -> Vec<String> {
        self.members.iter().map(|t| params_fingerprint(&t.gen.mlp)).collect()
    }
}

fn member_seed(seed: u64, m: usize) -> u64 {
    derive_seed(seed, &format!("member-{m}"))
}

pub fn train_adversarial_ensemble(
    cfg: &GanConfig,
    schedule: &AdversarialSchedule,
    n: usize,
    train: &Dataset,
) -> Result<Ensemble> {
    let mut t = EnsembleTrainer::new(cfg, schedule, n, train)?;
    t.train_phase1()?;
    t.reinitialize_generators()?;
    t.train_phase3()?;
    t.finish()
}

/// Per condition row: the mean over member pairs of
/// `sum_j (mean_a - mean_b)^2 + (std_a - std_b)^2`, with member moments taken
/// over `n_noise` draws at that condition. This is the squared 2-Wasserstein
/// distance between Gaussian fits of the members' output marginals.
pub fn inter_member_divergence(
    ug: &dyn UncertainGenerator,
    conditions: &Tensor,
    n_noise: usize,
    rng: &mut SimRng,
) -> Result<Vec<f64>> {
    check_conditions(conditions, ug.cond_dim(), "inter_member_divergence")?;
    if n_noise < 2 {
        return Err(Error::Config("need at least 2 noise draws per condition".into()));
    }
    let k = ug.resp_dim();
    let m = ug.n_members();
    (0..conditions.rows())
        .map(|r| {
            let cond = Tensor::from_vec(1, conditions.cols(), conditions.row(r).to_vec())?.broadcast_rows(n_noise);
            let moments: Vec<Vec<(f64, f64)>> = ug
                .sample_members(&cond, rng)?
                .iter()
                .map(|y| {
                    (0..k)
                        .map(|j| {
                            let col = y.column(j);
                            let mean = col.iter().sum::<f64>() / n_noise as f64;
                            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n_noise - 1) as f64;
                            (mean, var.sqrt())
                        })
                        .collect()
                })
                .collect();
            let mut total = 0.0;
            let mut pairs = 0usize;
            for a in 0..m {
                for b in a + 1..m {
                    total += moments[a]
                        .iter()
                        .zip(&moments[b])
                        .map(|(x, y)| (x.0 - y.0).powi(2) + (x.1 - y.1).powi(2))
                        .sum::<f64>();
                    pairs += 1;
                }
            }
            Ok(total / pairs as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gan::GanConfig;
    use crate::ndmath::AdamConfig;
    use crate::rng::{rng_from_seed, standard_normal};

    fn critic(seed: u64) -> CriticModel {
        let cfg = GanConfig { critic_hidden: vec![6], critic_dim: 4, ..GanConfig::default() };
        CriticModel::init(2, 2, &cfg, seed).unwrap()
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn schedule_is_linear_to_zero() {
        let s = AdversarialSchedule { alpha_initial: 10.0, phase1_steps: 0, phase3_steps: 5 };
        let trace: Vec<f64> = (0..5).map(|i| s.alpha(i)).collect();
        assert_eq!(trace, vec![10.0, 7.5, 5.0, 2.5, 0.0]);
        assert!(AdversarialSchedule { phase3_steps: 1, ..s.clone() }.validate().is_err());
        assert!(AdversarialSchedule { alpha_initial: -1.0, ..s }.validate().is_err());
    }

    #[test]
    fn diversity_matches_row_loop() {
        let d = critic(1);
        let mut rng = rng_from_seed(2);
        let (c, yg, yu) = (standard_normal(6, 2, &mut rng), standard_normal(6, 2, &mut rng), standard_normal(6, 2, &mut rng));
        let got = diversity_term(&d, &yg, &yu, &c).unwrap();
        let eg = d.embed(&c, &yg).unwrap();
        let eu = d.embed(&c, &yu).unwrap();
        let naive: f64 = (0..6)
            .map(|r| norm(&eg.row(r).iter().zip(eu.row(r)).map(|(a, b)| a - b).collect::<Vec<_>>()))
            .sum::<f64>()
            / 6.0;
        assert!((got - naive).abs() < 1e-12);
        assert_eq!(diversity_term(&d, &yg, &yg, &c).unwrap(), 0.0);
    }

    #[test]
    fn zero_critic_has_no_diversity() {
        let mut d = critic(1);
        for t in d.mlp.tensors_mut() {
            t.as_mut_slice().fill(0.0);
        }
        let mut rng = rng_from_seed(2);
        let (c, yg, yu) = (standard_normal(4, 2, &mut rng), standard_normal(4, 2, &mut rng), standard_normal(4, 2, &mut rng));
        assert_eq!(diversity_term(&d, &yg, &yu, &c).unwrap(), 0.0);
    }

    #[test]
    fn loss_reduces_to_plain_and_scales_with_alpha() {
        let d = critic(3);
        let mut rng = rng_from_seed(4);
        let t: Vec<Tensor> = (0..5).map(|_| standard_normal(8, 2, &mut rng)).collect();
        let (c, yr, yg, ygp, yu) = (&t[0], &t[1], &t[2], &t[3], &t[4]);
        let plain = generator_loss(&d, yr, yg, ygp, c).unwrap();
        assert_eq!(ensemble_generator_loss(&d, yr, yg, ygp, yu, c, 0.0).unwrap(), plain);
        let div = diversity_term(&d, yg, yu, c).unwrap();
        assert_eq!(ensemble_generator_loss(&d, yr, yg, ygp, yu, c, 10.0).unwrap(), plain - 10.0 * div);
    }

    fn toy_data(n: usize) -> Dataset {
        let mut rng = rng_from_seed(5);
        let cond = standard_normal(n, 1, &mut rng);
        let resp = standard_normal(n, 2, &mut rng);
        let ds = Dataset::new(cond, resp, vec![0; n], vec!["a".into()]).unwrap();
        Normalizer::fit(&ds).unwrap().apply(&ds).unwrap()
    }

    fn micro_cfg() -> GanConfig {
        GanConfig {
            batch_size: 16,
            critic_steps: 1,
            adam: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
            d_noise: 2,
            generator_hidden: vec![6],
            critic_hidden: vec![6],
            critic_dim: 3,
            seed: 1,
            ..GanConfig::default()
        }
    }

    #[test]
    fn three_phase_micro_run() {
        let ds = toy_data(100);
        let schedule = AdversarialSchedule { alpha_initial: 10.0, phase1_steps: 3, phase3_steps: 4 };
        let ens = train_adversarial_ensemble(&micro_cfg(), &schedule, 2, &ds).unwrap();
        let log = &ens.log;
        assert_eq!(log.phases.iter().map(|p| p.phase).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(log.alpha_trace.first(), Some(&10.0));
        assert_eq!(log.alpha_trace.last(), Some(&0.0));
        assert_eq!(log.critic_fingerprints_phase1, log.critic_fingerprints_phase2);
        for m in 0..2 {
            assert_ne!(log.generator_fingerprints_phase1[m], log.generator_fingerprints_phase2[m]);
            assert_eq!(log.member_logs[m].records.len(), 7);
        }
        assert!(log.member_logs[0].records[3].diversity.is_some());
        assert!(log.member_logs[0].records[6].diversity.is_none());

        let again = train_adversarial_ensemble(&micro_cfg(), &schedule, 2, &ds).unwrap();
        assert_eq!(ens, again);

        let dir = tempfile::tempdir().unwrap();
        ens.save(dir.path()).unwrap();
        assert_eq!(Ensemble::load(dir.path()).unwrap(), ens);
    }

    #[test]
    fn ensemble_invariants() {
        let ds = toy_data(50);
        let gen = GanTrainer::new(&micro_cfg(), &ds, None).unwrap().gen;
        assert!(Ensemble::new(vec![gen.clone()], vec![], EnsembleLog::default()).is_err());
        let mut other = gen.clone();
        other.normalizer = None;
        assert!(Ensemble::new(vec![gen.clone(), other], vec![], EnsembleLog::default()).is_err());
        let ens = Ensemble::new(vec![gen.clone(), gen], vec![], EnsembleLog::default()).unwrap();
        let cond = standard_normal(3, 1, &mut rng_from_seed(1));
        let a = ens.sample_members(&cond, &mut rng_from_seed(2)).unwrap();
        let b = ens.sample_members(&cond, &mut rng_from_seed(2)).unwrap();
        assert_eq!(a, b);
        assert!(train_adversarial_ensemble(&micro_cfg(), &AdversarialSchedule::default(), 1, &ds).is_err());
    }

    #[test]
    fn identical_members_have_small_divergence() {
        let ds = toy_data(50);
        let gen = GanTrainer::new(&micro_cfg(), &ds, None).unwrap().gen;
        let same = Ensemble::new(vec![gen.clone(), gen.clone()], vec![], EnsembleLog::default()).unwrap();
        let mut shifted = gen.clone();
        let last = shifted.mlp.layers.len() - 1;
        shifted.mlp.layers[last].bias = shifted.mlp.layers[last].bias.map(|b| b + 1.0);
        let apart = Ensemble::new(vec![gen, shifted], vec![], EnsembleLog::default()).unwrap();
        let cond = standard_normal(4, 1, &mut rng_from_seed(1));
        let d_same = inter_member_divergence(&same, &cond, 2000, &mut rng_from_seed(3)).unwrap();
        let d_apart = inter_member_divergence(&apart, &cond, 2000, &mut rng_from_seed(3)).unwrap();
        for (s, a) in d_same.iter().zip(&d_apart) {
            assert!(*s < 0.05 && (a - 2.0).abs() < 0.2, "{s} {a}");
        }
    }
}
