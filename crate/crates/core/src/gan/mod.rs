//! Conditional Cramer GAN.
//!
//! The generator maps `(condition, noise)` to a response row; the critic maps
//! `(condition, response)` to an embedding vector. Both work in normalized
//! space.

mod loss;
mod metrics;
mod train;

pub use loss::{
    critic_loss, critic_surrogate_f, generator_loss, interpolate, trace_critic_loss, trace_generator_loss,
    trace_surrogate, CriticLossVars,
};
pub use metrics::{conditional_energy_distance, energy_distance};
pub use train::{train_gan, StepRecord, TrainingLog};
pub(crate) use train::GanTrainer;

use serde::{Deserialize, Serialize};

use crate::data::Normalizer;
use crate::error::{Error, Result};
use crate::ndmath::{Activation, AdamConfig, Graph, MlpDocument, MlpParams, MlpVars, Tensor, Var};
use crate::rng::{standard_normal, SimRng};
use crate::sampler::{check_conditions, ConditionalSampler};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanConfig {
    pub batch_size: usize,
    /// Number of generator updates.
    pub generator_steps: usize,
    /// Critic updates per generator update.
    pub critic_steps: usize,
    pub adam: AdamConfig,
    /// Gradient-penalty weight.
    pub gp_weight: f64,
    pub d_noise: usize,
    pub generator_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    /// Width of the critic embedding.
    pub critic_dim: usize,
    pub leaky_slope: f64,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            batch_size: 512,
            generator_steps: 10_000,
            critic_steps: 3,
            adam: AdamConfig::default(),
            gp_weight: 10.0,
            d_noise: 64,
            generator_hidden: vec![128; 5],
            critic_hidden: vec![128; 5],
            critic_dim: 64,
            leaky_slope: 0.05,
            seed: 0,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.batch_size > 0
            && self.critic_steps > 0
            && self.d_noise > 0
            && self.adam.lr > 0.0
            && !self.generator_hidden.contains(&0)
            && !self.critic_hidden.contains(&0);
        if !positive {
            return Err(Error::Config("GAN sizes, step counts and learning rate must be positive".into()));
        }
        if !(self.gp_weight >= 0.0) {
            return Err(Error::Config("gradient-penalty weight must be non-negative".into()));
        }
        if self.critic_dim < 2 {
            return Err(Error::Config("critic embedding needs at least 2 dimensions".into()));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    fn hidden_activation(&self) -> Activation {
        Activation::LeakyRelu { slope: self.leaky_slope }
    }
}

pub const GENERATOR_FORMAT: &str = "ganuq-generator";
pub const CRITIC_FORMAT: &str = "ganuq-critic";

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorModel {
    /// Input width is `cond_dim + d_noise`; conditions come first.
    pub mlp: MlpParams,
    pub d_noise: usize,
    /// Normalization the generator's inputs and outputs live in.
    pub normalizer: Option<Normalizer>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeneratorDocument {
    format: String,
    version: u32,
    d_noise: usize,
    normalizer: Option<Normalizer>,
    mlp: MlpDocument,
}

impl GeneratorModel {
    pub fn init(cond_dim: usize, resp_dim: usize, cfg: &GanConfig, seed: u64) -> Result<Self> {
        let dims: Vec<usize> = std::iter::once(cond_dim + cfg.d_noise)
            .chain(cfg.generator_hidden.iter().copied())
            .chain(std::iter::once(resp_dim))
            .collect();
        let mlp = MlpParams::init(&dims, cfg.hidden_activation(), Activation::Linear, seed)?;
        Ok(Self { mlp, d_noise: cfg.d_noise, normalizer: None })
    }

    pub fn cond_dim(&self) -> usize {
        self.mlp.input_dim() - self.d_noise
    }

    pub fn resp_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    pub fn draw_noise(&self, rows: usize, rng: &mut SimRng) -> Tensor {
        standard_normal(rows, self.d_noise, rng)
    }

    pub fn sample_with_noise(
        &self,
        conditions: &Tensor,
        noise: &Tensor,
        masks: Option<&[Option<Tensor>]>,
    ) -> Result<Tensor> {
        check_conditions(conditions, self.cond_dim(), "generator sample")?;
        if noise.cols() != self.d_noise || noise.rows() != conditions.rows() {
            return Err(Error::dim(
                "generator noise",
                format!("[{}, {}]", conditions.rows(), self.d_noise),
                format!("{:?}", noise.shape()),
            ));
        }
        self.mlp.forward_masked(&conditions.concat_cols(noise)?, masks)
    }

    pub fn trace(
        &self,
        g: &mut Graph,
        vars: &MlpVars,
        conditions: Var,
        noise: Var,
        masks: Option<&[Option<Tensor>]>,
    ) -> Result<Var> {
        let input = g.concat_cols(conditions, noise)?;
        self.mlp.trace(g, vars, input, masks)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&GeneratorDocument {
            format: GENERATOR_FORMAT.into(),
            version: 1,
            d_noise: self.d_noise,
            normalizer: self.normalizer.clone(),
            mlp: self.mlp.to_document(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: GeneratorDocument = serde_json::from_str(s)?;
        if doc.format != GENERATOR_FORMAT || doc.version != 1 {
            return Err(Error::Serialization(format!("not a generator document: {} v{}", doc.format, doc.version)));
        }
        let mlp = MlpParams::from_document(doc.mlp)?;
        if mlp.input_dim() <= doc.d_noise {
            return Err(Error::Serialization("generator input narrower than its noise".into()));
        }
        Ok(Self { mlp, d_noise: doc.d_noise, normalizer: doc.normalizer })
    }
}

impl ConditionalSampler for GeneratorModel {
    fn cond_dim(&self) -> usize {
        GeneratorModel::cond_dim(self)
    }

    fn resp_dim(&self) -> usize {
        GeneratorModel::resp_dim(self)
    }

    /// Standard-normal noise, `d_noise` wide, appended to each condition row.
    fn sample(&self, conditions: &Tensor, rng: &mut SimRng) -> Result<Tensor> {
        check_conditions(conditions, GeneratorModel::cond_dim(self), "generator sample")?;
        let noise = self.draw_noise(conditions.rows(), rng);
        self.sample_with_noise(conditions, &noise, None)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CriticModel {
    /// Input is `(condition, response)` concatenated; output is the embedding.
    pub mlp: MlpParams,
    pub cond_dim: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CriticDocument {
    format: String,
    version: u32,
    cond_dim: usize,
    mlp: MlpDocument,
}

impl CriticModel {
    pub fn init(cond_dim: usize, resp_dim: usize, cfg: &GanConfig, seed: u64) -> Result<Self> {
        let dims: Vec<usize> = std::iter::once(cond_dim + resp_dim)
            .chain(cfg.critic_hidden.iter().copied())
            .chain(std::iter::once(cfg.critic_dim))
            .collect();
        let mlp = MlpParams::init(&dims, cfg.hidden_activation(), Activation::Linear, seed)?;
        Ok(Self { mlp, cond_dim })
    }

    pub fn resp_dim(&self) -> usize {
        self.mlp.input_dim() - self.cond_dim
    }

    pub fn embedding_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    pub fn embed(&self, conditions: &Tensor, responses: &Tensor) -> Result<Tensor> {
        self.mlp.forward(&conditions.concat_cols(responses)?)
    }

    pub fn trace(&self, g: &mut Graph, vars: &MlpVars, conditions: Var, responses: Var) -> Result<Var> {
        let input = g.concat_cols(conditions, responses)?;
        self.mlp.trace(g, vars, input, None)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&CriticDocument {
            format: CRITIC_FORMAT.into(),
            version: 1,
            cond_dim: self.cond_dim,
            mlp: self.mlp.to_document(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: CriticDocument = serde_json::from_str(s)?;
        if doc.format != CRITIC_FORMAT || doc.version != 1 {
            return Err(Error::Serialization(format!("not a critic document: {} v{}", doc.format, doc.version)));
        }
        Ok(Self { mlp: MlpParams::from_document(doc.mlp)?, cond_dim: doc.cond_dim })
    }
}
