use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::ndmath::Tensor;

/// Column layout `cond_0..cond_{c-1}, y_0..y_{k-1}, species`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CsvSchema {
    pub cond_dim: usize,
    pub resp_dim: usize,
}

impl CsvSchema {
    pub fn header(&self) -> Vec<String> {
        (0..self.cond_dim)
            .map(|i| format!("cond_{i}"))
            .chain((0..self.resp_dim).map(|j| format!("y_{j}")))
            .chain(std::iter::once("species".to_string()))
            .collect()
    }

    /// Reads the schema off a header row.
    pub fn infer(header: &[&str]) -> Result<Self> {
        let cond_dim = header.iter().take_while(|h| h.starts_with("cond_")).count();
        let resp_dim = header[cond_dim..].iter().take_while(|h| h.starts_with("y_")).count();
        let schema = Self { cond_dim, resp_dim };
        schema.check(header)?;
        Ok(schema)
    }

    fn check(&self, header: &[&str]) -> Result<()> {
        let expected = self.header();
        if header.len() != expected.len() || header.iter().zip(&expected).any(|(a, b)| a != b) {
            let missing: Vec<&String> = expected.iter().filter(|e| !header.contains(&e.as_str())).collect();
            return Err(Error::Ingestion {
                line: 1,
                message: if missing.is_empty() {
                    format!("header {header:?} does not match expected {expected:?}")
                } else {
                    format!("missing column(s) {missing:?}")
                },
            });
        }
        Ok(())
    }
}

/// Reads a dataset. Species labels are indexed in order of first appearance.
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path.as_ref())
        .map_err(|e| Error::Ingestion { line: 0, message: e.to_string() })?;
    let header = reader
        .headers()
        .map_err(|e| Error::Ingestion { line: 1, message: e.to_string() })?
        .clone();
    schema.check(&header.iter().collect::<Vec<_>>())?;

    let width = schema.cond_dim + schema.resp_dim + 1;
    let (mut conds, mut resps, mut species) = (Vec::new(), Vec::new(), Vec::new());
    let mut names: Vec<String> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Ingestion {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != width {
            return Err(Error::Ingestion {
                line,
                message: format!("expected {width} fields, found {}", record.len()),
            });
        }
        for (i, cell) in record.iter().take(width - 1).enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Ingestion {
                line,
                message: format!("column {} is not a number: `{cell}`", i + 1),
            })?;
            if !v.is_finite() {
                return Err(Error::Ingestion {
                    line,
                    message: format!("column {} is not finite: `{cell}`", i + 1),
                });
            }
            if i < schema.cond_dim {
                conds.push(v);
            } else {
                resps.push(v);
            }
        }
        let label = record[width - 1].trim();
        let idx = match names.iter().position(|n| n == label) {
            Some(i) => i,
            None => {
                names.push(label.to_string());
                names.len() - 1
            }
        };
        species.push(idx);
    }
    let n = species.len();
    Dataset::new(
        Tensor::from_vec(n, schema.cond_dim, conds)?,
        Tensor::from_vec(n, schema.resp_dim, resps)?,
        species,
        names,
    )
}

/// Reads a dataset whose layout is taken from its own header row.
pub fn load_csv_inferred(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path.as_ref())
        .map_err(|e| Error::Ingestion { line: 0, message: e.to_string() })?;
    let header = reader.headers().map_err(|e| Error::Ingestion { line: 1, message: e.to_string() })?;
    let schema = CsvSchema::infer(&header.iter().collect::<Vec<_>>())?;
    load_csv(path, &schema)
}

/// Writes a dataset in raw (denormalized) form. Doubles are written in
/// shortest round-trip notation, so reading back is bit exact.
pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let raw;
    let ds = match &ds.normalizer {
        Some(n) => {
            raw = n.invert(ds)?;
            &raw
        }
        None => ds,
    };
    let schema = CsvSchema { cond_dim: ds.cond_dim(), resp_dim: ds.resp_dim() };
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{}", schema.header().join(","))?;
    let mut line = String::new();
    for i in 0..ds.len() {
        line.clear();
        for v in ds.conditions.row(i).iter().chain(ds.responses.row(i)) {
            line.push_str(&format!("{v:?},"));
        }
        line.push_str(&ds.species_names[ds.species[i]]);
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}
