use rand::seq::{index, SliceRandom};

use crate::data::{Dataset, Normalizer};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};

/// Row counts for a uniform split: `fractions` is `[train]` (test gets the
/// remainder) or `[train, test]`.
fn split_counts(n: usize, fractions: &[f64]) -> Result<(usize, usize)> {
    let valid = !fractions.is_empty()
        && fractions.len() <= 2
        && fractions.iter().all(|&f| f > 0.0 && f.is_finite())
        && fractions.iter().sum::<f64>() <= 1.0 + 1e-12;
    if !valid {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must be one or two positive values summing to at most 1"
        )));
    }
    let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
    let n_test = match fractions.get(1) {
        Some(f) => ((f * n as f64).round() as usize).min(n - n_train),
        None => n - n_train,
    };
    if n_train == 0 || n_test == 0 {
        return Err(Error::Config(format!(
            "split of {n} rows by {fractions:?} leaves an empty part ({n_train} train, {n_test} test)"
        )));
    }
    Ok((n_train, n_test))
}

/// Index partition of `0..n` into (train, test), uniform at random.
pub fn uniform_split_indices(n: usize, fractions: &[f64], seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let (n_train, n_test) = split_counts(n, fractions)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from_seed(derive_seed(seed, "uniform-split")));
    let mut train = order[..n_train].to_vec();
    let mut test = order[n_train..n_train + n_test].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn uniform_split(ds: &Dataset, fractions: &[f64], seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, test) = uniform_split_indices(ds.len(), fractions, seed)?;
    Ok((ds.subset(&train), ds.subset(&test)))
}

/// Train region plus equal-count test bands along a projection direction.
#[derive(Clone, Debug)]
pub struct BandSplit {
    pub dataset: Dataset,
    /// Unit vector over the condition features.
    pub direction: Vec<f64>,
    /// Projection of every dataset row.
    pub projections: Vec<f64>,
    /// Train row indices, ordered by projection.
    pub train: Vec<usize>,
    /// Test bands from nearest to farthest, each ordered by projection.
    pub test_bands: Vec<Vec<usize>>,
    /// Lowest projection value of each test band.
    pub boundaries: Vec<f64>,
}

fn equal_count_chunks(indices: &[usize], n_chunks: usize) -> Vec<Vec<usize>> {
    let base = indices.len() / n_chunks;
    let extra = indices.len() % n_chunks;
    let mut out = Vec::with_capacity(n_chunks);
    let mut start = 0;
    for b in 0..n_chunks {
        let size = base + usize::from(b < extra);
        out.push(indices[start..start + size].to_vec());
        start += size;
    }
    out
}

/// Splits rows by their projection onto `direction` in standardized
/// condition space. The lowest `train_fraction` goes to train; the rest is
/// cut into `n_test_bands` bands of equal count (within one row).
///
/// Standardization here uses statistics of the whole dataset, since the
/// split itself decides which rows a model normalizer may later see.
pub fn extrapolation_split(
    ds: &Dataset,
    direction: &[f64],
    train_fraction: f64,
    n_test_bands: usize,
) -> Result<BandSplit> {
    if direction.len() != ds.cond_dim() {
        return Err(Error::Config(format!(
            "direction has {} entries for {} conditions",
            direction.len(),
            ds.cond_dim()
        )));
    }
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Config("projection direction must be non-zero".into()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train_fraction {train_fraction} outside (0, 1)")));
    }
    if n_test_bands == 0 {
        return Err(Error::Config("at least one test band is required".into()));
    }
    let n = ds.len();
    let direction: Vec<f64> = direction.iter().map(|v| v / norm).collect();
    let stats: Vec<(f64, f64)> = (0..ds.cond_dim())
        .map(|c| {
            let col = ds.conditions.column(c);
            let mean = col.iter().sum::<f64>() / n as f64;
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
            (mean, if sd > 0.0 { sd } else { 1.0 })
        })
        .collect();
    let projections: Vec<f64> = (0..n)
        .map(|i| {
            ds.conditions
                .row(i)
                .iter()
                .zip(&stats)
                .zip(&direction)
                .map(|((x, (m, s)), d)| d * (x - m) / s)
                .sum()
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| projections[a].total_cmp(&projections[b]).then(a.cmp(&b)));

    let n_train = (train_fraction * n as f64).round() as usize;
    let n_test = n.saturating_sub(n_train);
    if n_train == 0 || n_test < n_test_bands {
        return Err(Error::Config(format!(
            "{n} rows cannot fill a train part and {n_test_bands} test bands at train_fraction {train_fraction}"
        )));
    }
    let train = order[..n_train].to_vec();
    let test_bands = equal_count_chunks(&order[n_train..], n_test_bands);
    let boundaries = test_bands.iter().map(|b| projections[b[0]]).collect();
    Ok(BandSplit { dataset: ds.clone(), direction, projections, train, test_bands, boundaries })
}

impl BandSplit {
    pub fn n_test_bands(&self) -> usize {
        self.test_bands.len()
    }

    pub fn train_set(&self) -> Dataset {
        self.dataset.subset(&self.train)
    }

    pub fn test_set(&self) -> Dataset {
        let all: Vec<usize> = self.test_bands.iter().flatten().copied().collect();
        self.dataset.subset(&all)
    }

    /// The same partition with the dataset mapped through `normalizer`.
    pub fn normalized(&self, normalizer: &Normalizer) -> Result<BandSplit> {
        Ok(BandSplit { dataset: normalizer.apply(&self.dataset)?, ..self.clone() })
    }

    /// The train part cut into `n` equal-count bands along the projection.
    pub fn train_bands(&self, n: usize) -> Result<Vec<Vec<usize>>> {
        if n == 0 || n > self.train.len() {
            return Err(Error::Config(format!("cannot cut {} train rows into {n} bands", self.train.len())));
        }
        Ok(equal_count_chunks(&self.train, n))
    }
}

/// Uniform subsample without replacement of `rows`, returned in dataset
/// order.
pub fn sample_rows(ds: &Dataset, rows: &[usize], n: usize, seed: u64) -> Result<Dataset> {
    if n > rows.len() {
        return Err(Error::Config(format!("requested {n} rows from a band of {}", rows.len())));
    }
    let mut rng = rng_from_seed(derive_seed(seed, "band-sample"));
    let mut picked: Vec<usize> = index::sample(&mut rng, rows.len(), n).into_iter().map(|i| rows[i]).collect();
    picked.sort_unstable();
    Ok(ds.subset(&picked))
}

pub fn sample_band(split: &BandSplit, band_index: usize, n: usize, seed: u64) -> Result<Dataset> {
    let band = split
        .test_bands
        .get(band_index)
        .ok_or_else(|| Error::Config(format!("no test band {band_index}")))?;
    sample_rows(&split.dataset, band, n, derive_seed(seed, &format!("band-{band_index}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::ndmath::Tensor;

    fn line_dataset(n: usize) -> Dataset {
        let conds: Vec<f64> = (0..n).flat_map(|i| [i as f64, ((i * 7919) % n) as f64]).collect();
        Dataset::new(
            Tensor::from_vec(n, 2, conds).unwrap(),
            Tensor::from_vec(n, 1, (0..n).map(|i| i as f64).collect()).unwrap(),
            vec![0; n],
            vec!["pion".into()],
        )
        .unwrap()
    }

    #[test]
    fn uniform_split_counts_mirror_protocol() {
        let (train, test) = uniform_split_indices(3_000_000, &[2.0 / 3.0, 1.0 / 3.0], 1).unwrap();
        assert_eq!((train.len(), test.len()), (2_000_000, 1_000_000));
    }

    #[test]
    fn whole_dataset_train_is_rejected() {
        assert!(matches!(uniform_split_indices(100, &[1.0], 1), Err(Error::Config(_))));
        assert!(uniform_split_indices(100, &[0.7, 0.5], 1).is_err());
    }

    #[test]
    fn uniform_split_is_seeded_partition() {
        let (a_train, a_test) = uniform_split_indices(1000, &[0.7], 3).unwrap();
        let (b_train, _) = uniform_split_indices(1000, &[0.7], 3).unwrap();
        let (c_train, _) = uniform_split_indices(1000, &[0.7], 4).unwrap();
        assert_eq!(a_train, b_train);
        assert_ne!(a_train, c_train);
        let mut all: Vec<usize> = a_train.iter().chain(&a_test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
    }

    #[test]
    fn extrapolation_counts_mirror_protocol() {
        let n = 947_933 + 523_917;
        let ds = line_dataset(n);
        let split = extrapolation_split(&ds, &[1.0, 1.0], 947_933.0 / n as f64, 10).unwrap();
        assert_eq!(split.train.len(), 947_933);
        assert_eq!(split.test_bands.iter().map(Vec::len).sum::<usize>(), 523_917);
        let band = sample_band(&split, 0, 50_000, 9).unwrap();
        assert_eq!(band.len(), 50_000);
    }

    #[test]
    fn single_band_is_whole_test_part() {
        let ds = line_dataset(200);
        let split = extrapolation_split(&ds, &[1.0, 0.0], 0.5, 1).unwrap();
        assert_eq!(split.test_bands.len(), 1);
        assert_eq!(split.test_bands[0].len(), 100);
    }

    #[test]
    fn bands_are_ordered_and_equal_sized() {
        let ds = line_dataset(200);
        let split = extrapolation_split(&ds, &[1.0, 1.0], 0.5, 5).unwrap();
        // Sort-based oracle: projections of the test rows, sorted, cut in fives.
        let mut test_proj: Vec<f64> = split.test_bands.iter().flatten().map(|&i| split.projections[i]).collect();
        test_proj.sort_by(f64::total_cmp);
        for (b, band) in split.test_bands.iter().enumerate() {
            assert_eq!(band.len(), 20);
            let mut p: Vec<f64> = band.iter().map(|&i| split.projections[i]).collect();
            p.sort_by(f64::total_cmp);
            assert_eq!(p, test_proj[b * 20..(b + 1) * 20].to_vec());
        }
        for w in split.test_bands.windows(2) {
            let hi = w[0].iter().map(|&i| split.projections[i]).fold(f64::MIN, f64::max);
            let lo = w[1].iter().map(|&i| split.projections[i]).fold(f64::MAX, f64::min);
            assert!(hi <= lo);
        }
        let max_train = split.train.iter().map(|&i| split.projections[i]).fold(f64::MIN, f64::max);
        assert!(max_train <= split.boundaries[0]);
    }

    #[test]
    fn too_few_rows_for_bands() {
        let ds = line_dataset(10);
        assert!(extrapolation_split(&ds, &[1.0, 1.0], 0.8, 5).is_err());
        assert!(extrapolation_split(&ds, &[0.0, 0.0], 0.5, 2).is_err());
    }

    #[test]
    fn band_sampling() {
        let ds = generate_synthetic(&SyntheticSpec::default(), 2000).unwrap();
        let split = extrapolation_split(&ds, &[1.0, 1.0, 0.0], 0.6, 4).unwrap();
        let size = split.test_bands[2].len();
        let whole = sample_band(&split, 2, size, 1).unwrap();
        let mut expected = split.test_bands[2].clone();
        expected.sort_unstable();
        assert_eq!(whole, ds.subset(&expected));
        let part = sample_band(&split, 2, size / 2, 1).unwrap();
        assert_eq!(part, sample_band(&split, 2, size / 2, 1).unwrap());
        assert!(sample_band(&split, 2, size + 1, 1).is_err());
        assert!(sample_band(&split, 4, 1, 1).is_err());
    }
}
