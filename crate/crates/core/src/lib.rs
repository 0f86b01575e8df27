//! Uncertainty estimation for conditional generative adversarial networks.
//!
//! The crate contains everything needed to train and evaluate three
//! uncertainty estimators for a conditional Cramer GAN on tabular data:
//!
//! * [`ensemble`]: adversarial deep ensembles, where generators are rewarded
//!   for diverging from the pooled ensemble while the reward is annealed to
//!   zero;
//! * [`mcdropout`]: structured Monte Carlo dropout, evaluated as a virtual
//!   ensemble over a fixed set of masks;
//! * [`distill`]: variance regressors that compress an ensemble's spread into
//!   a single `sigma_syst(X)` evaluator.
//!
//! [`eval`] implements the selection-efficiency figure of merit and the two
//! experiment protocols (uniform split and extrapolation band scan), and
//! [`data`] provides synthetic datasets whose conditional law is known in
//! closed form. All numerics run on the small reverse-mode autodiff engine in
//! [`ndmath`].
// `!(x >= 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod distill;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod fingerprint;
pub mod gan;
pub mod mcdropout;
pub mod ndmath;
pub mod rng;
pub mod sampler;

pub use data::{Dataset, Normalizer, SyntheticSpec};
pub use distill::{SystUncertainty, VarianceRegressorPair};
pub use ensemble::{AdversarialSchedule, Ensemble};
pub use error::{Error, Result};
pub use eval::{EfficiencyReport, ThresholdSpec};
pub use gan::{CriticModel, GanConfig, GeneratorModel};
pub use mcdropout::{StructuredDropoutSpec, VirtualEnsemble};
pub use ndmath::{Activation, Graph, MlpParams, Tensor, Var};
pub use rng::SimRng;
pub use sampler::{ConditionalSampler, UncertainGenerator};
