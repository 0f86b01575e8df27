use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::ndmath::Tensor;

/// Per-feature standardization `(x - mean) / scale` for conditions and
/// responses. Scales are population standard deviations of the fitting set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalizer {
    pub cond_mean: Vec<f64>,
    pub cond_scale: Vec<f64>,
    pub resp_mean: Vec<f64>,
    pub resp_scale: Vec<f64>,
}

fn column_stats(t: &Tensor, offset: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = t.rows() as f64;
    let mut means = Vec::with_capacity(t.cols());
    let mut scales = Vec::with_capacity(t.cols());
    for c in 0..t.cols() {
        let col = t.column(c);
        let first = col.first().copied().unwrap_or(0.0);
        if col.iter().all(|&v| v == first) {
            return Err(Error::DegenerateFeature { index: offset + c });
        }
        let mean = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        means.push(mean);
        scales.push(var.sqrt());
    }
    Ok((means, scales))
}

fn affine(t: &Tensor, shift: &[f64], scale: &[f64], forward: bool) -> Result<Tensor> {
    if t.cols() != shift.len() {
        return Err(Error::dim("normalizer", format!("{} columns", shift.len()), t.cols()));
    }
    let mut out = t.clone();
    for r in 0..out.rows() {
        for ((v, m), s) in out.row_mut(r).iter_mut().zip(shift).zip(scale) {
            *v = if forward { (*v - m) / s } else { *v * s + m };
        }
    }
    Ok(out)
}

impl Normalizer {
    /// Fits on all rows of `ds`. Feature indices in errors count conditions
    /// first, then responses.
    pub fn fit(ds: &Dataset) -> Result<Self> {
        if ds.normalizer.is_some() {
            return Err(Error::Config("dataset is already normalized".into()));
        }
        let (cond_mean, cond_scale) = column_stats(&ds.conditions, 0)?;
        let (resp_mean, resp_scale) = column_stats(&ds.responses, ds.cond_dim())?;
        Ok(Self { cond_mean, cond_scale, resp_mean, resp_scale })
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_mean.len()
    }

    pub fn resp_dim(&self) -> usize {
        self.resp_mean.len()
    }

    pub fn normalize_conditions(&self, t: &Tensor) -> Result<Tensor> {
        affine(t, &self.cond_mean, &self.cond_scale, true)
    }

    pub fn denormalize_conditions(&self, t: &Tensor) -> Result<Tensor> {
        affine(t, &self.cond_mean, &self.cond_scale, false)
    }

    pub fn normalize_responses(&self, t: &Tensor) -> Result<Tensor> {
        affine(t, &self.resp_mean, &self.resp_scale, true)
    }

    pub fn denormalize_responses(&self, t: &Tensor) -> Result<Tensor> {
        affine(t, &self.resp_mean, &self.resp_scale, false)
    }

    /// Maps a raw dataset into normalized space and records `self` on it.
    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        if ds.normalizer.is_some() {
            return Err(Error::Config("dataset is already normalized".into()));
        }
        Ok(Dataset {
            conditions: self.normalize_conditions(&ds.conditions)?,
            responses: self.normalize_responses(&ds.responses)?,
            species: ds.species.clone(),
            species_names: ds.species_names.clone(),
            normalizer: Some(self.clone()),
        })
    }

    pub fn invert(&self, ds: &Dataset) -> Result<Dataset> {
        if ds.normalizer.as_ref() != Some(self) {
            return Err(Error::Config("dataset was not normalized with this normalizer".into()));
        }
        Ok(Dataset {
            conditions: self.denormalize_conditions(&ds.conditions)?,
            responses: self.denormalize_responses(&ds.responses)?,
            species: ds.species.clone(),
            species_names: ds.species_names.clone(),
            normalizer: None,
        })
    }
}
