//! Datasets of (condition, response, species) rows, synthetic generation with
//! closed-form conditional laws, CSV ingestion, normalization and the two
//! split protocols.

mod csv_io;
mod normalize;
mod split;
mod synthetic;

pub use csv_io::{load_csv, load_csv_inferred, write_csv, CsvSchema};
pub use normalize::Normalizer;
pub use split::{
    extrapolation_split, sample_band, sample_rows, uniform_split, uniform_split_indices, BandSplit,
};
pub use synthetic::{
    generate_synthetic, ConditionDist, MeanFn, OracleEnsemble, OracleSampler, SigmaFn, SpeciesSpec,
    SyntheticSpec,
};

use crate::error::{Error, Result};
use crate::fingerprint::Fingerprinter;
use crate::ndmath::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `n x c`.
    pub conditions: Tensor,
    /// `n x k`.
    pub responses: Tensor,
    /// Per-row index into `species_names`.
    pub species: Vec<usize>,
    pub species_names: Vec<String>,
    /// Set when `conditions` and `responses` are in normalized space.
    pub normalizer: Option<Normalizer>,
}

impl Dataset {
    pub fn new(
        conditions: Tensor,
        responses: Tensor,
        species: Vec<usize>,
        species_names: Vec<String>,
    ) -> Result<Self> {
        let n = conditions.rows();
        if responses.rows() != n || species.len() != n {
            return Err(Error::dim(
                "Dataset::new",
                format!("{n} rows everywhere"),
                format!("{} responses, {} species labels", responses.rows(), species.len()),
            ));
        }
        if let Some(&bad) = species.iter().find(|&&s| s >= species_names.len()) {
            return Err(Error::Config(format!("species index {bad} outside declared set")));
        }
        if !conditions.is_finite() || !responses.is_finite() {
            return Err(Error::Config("dataset contains non-finite values".into()));
        }
        Ok(Self { conditions, responses, species, species_names, normalizer: None })
    }

    pub fn len(&self) -> usize {
        self.conditions.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cond_dim(&self) -> usize {
        self.conditions.cols()
    }

    pub fn resp_dim(&self) -> usize {
        self.responses.cols()
    }

    pub fn species_index(&self, name: &str) -> Result<usize> {
        self.species_names
            .iter()
            .position(|s| s == name)
            .ok_or_else(|| Error::Config(format!("unknown species `{name}`")))
    }

    pub fn rows_of_species(&self, species: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.species[i] == species).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            conditions: self.conditions.select_rows(indices),
            responses: self.responses.select_rows(indices),
            species: indices.iter().map(|&i| self.species[i]).collect(),
            species_names: self.species_names.clone(),
            normalizer: self.normalizer.clone(),
        }
    }

    pub fn filter_species(&self, name: &str) -> Result<Dataset> {
        let s = self.species_index(name)?;
        Ok(self.subset(&self.rows_of_species(s)))
    }

    /// Content hash over values, labels and normalization state.
    pub fn fingerprint(&self) -> String {
        let mut f = Fingerprinter::new();
        f.u64(self.len() as u64)
            .u64(self.cond_dim() as u64)
            .u64(self.resp_dim() as u64)
            .f64s(self.conditions.as_slice())
            .f64s(self.responses.as_slice());
        for &s in &self.species {
            f.u64(s as u64);
        }
        for name in &self.species_names {
            f.bytes(name.as_bytes());
        }
        if let Some(n) = &self.normalizer {
            f.f64s(&n.cond_mean).f64s(&n.cond_scale).f64s(&n.resp_mean).f64s(&n.resp_scale);
        }
        f.hex()
    }
}
