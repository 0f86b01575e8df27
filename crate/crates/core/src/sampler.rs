//! Sampling interfaces shared by single generators, ensembles and virtual
//! (dropout) ensembles.

use crate::error::{Error, Result};
use crate::ndmath::Tensor;
use crate::rng::SimRng;

/// A conditional generative model: one response row per condition row.
pub trait ConditionalSampler {
    fn cond_dim(&self) -> usize;
    fn resp_dim(&self) -> usize;
    fn sample(&self, conditions: &Tensor, rng: &mut SimRng) -> Result<Tensor>;
}

/// A family of `M >= 2` conditional samplers behind one condition interface.
pub trait UncertainGenerator {
    fn n_members(&self) -> usize;
    fn cond_dim(&self) -> usize;
    fn resp_dim(&self) -> usize;
    fn sample_member(&self, member: usize, conditions: &Tensor, rng: &mut SimRng) -> Result<Tensor>;

    /// One response batch per member, each with independent noise.
    fn sample_members(&self, conditions: &Tensor, rng: &mut SimRng) -> Result<Vec<Tensor>> {
        (0..self.n_members())
            .map(|m| self.sample_member(m, conditions, rng))
            .collect()
    }
}

/// Borrowed view of a single member as a [`ConditionalSampler`].
pub struct MemberSampler<'a, U: ?Sized> {
    family: &'a U,
    index: usize,
}

impl<'a, U: UncertainGenerator + ?Sized> MemberSampler<'a, U> {
    pub fn new(family: &'a U, index: usize) -> Result<Self> {
        if index >= family.n_members() {
            return Err(Error::Config(format!(
                "member {index} out of range for a family of {}",
                family.n_members()
            )));
        }
        Ok(Self { family, index })
    }
}

impl<U: UncertainGenerator + ?Sized> ConditionalSampler for MemberSampler<'_, U> {
    fn cond_dim(&self) -> usize {
        self.family.cond_dim()
    }

    fn resp_dim(&self) -> usize {
        self.family.resp_dim()
    }

    fn sample(&self, conditions: &Tensor, rng: &mut SimRng) -> Result<Tensor> {
        self.family.sample_member(self.index, conditions, rng)
    }
}

pub(crate) fn check_conditions(conditions: &Tensor, cond_dim: usize, op: &'static str) -> Result<()> {
    if conditions.cols() != cond_dim {
        return Err(Error::dim(op, format!("{cond_dim} condition columns"), conditions.cols()));
    }
    Ok(())
}
