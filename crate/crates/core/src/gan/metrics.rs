use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::ndmath::Tensor;
use crate::rng::SimRng;
use crate::sampler::ConditionalSampler;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn mean_within(x: &Tensor) -> f64 {
    let n = x.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            s += dist(x.row(i), x.row(j));
        }
    }
    2.0 * s / (n * (n - 1)) as f64
}

/// Sample energy distance `2 E|X-Y| - E|X-X'| - E|Y-Y'|` between the rows of
/// `x` and `y`. The within-sample terms are U-statistics, so the estimate is
/// unbiased and may be slightly negative for identical laws.
pub fn energy_distance(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.cols() != y.cols() {
        return Err(Error::dim("energy_distance", x.cols(), y.cols()));
    }
    if x.rows() < 2 || y.rows() < 2 {
        return Err(Error::Contract("energy distance needs at least 2 rows per sample".into()));
    }
    let mut cross = 0.0;
    for i in 0..x.rows() {
        for j in 0..y.rows() {
            cross += dist(x.row(i), y.row(j));
        }
    }
    cross /= (x.rows() * y.rows()) as f64;
    Ok(2.0 * cross - mean_within(x) - mean_within(y))
}

/// Energy distance between `sampler` and held-out `data`, computed in
/// `n_bins` equal-count bins of condition column `feature` and averaged.
/// At most `max_rows_per_bin` rows of each bin are used.
pub fn conditional_energy_distance(
    sampler: &dyn ConditionalSampler,
    data: &Dataset,
    n_bins: usize,
    feature: usize,
    max_rows_per_bin: usize,
    rng: &mut SimRng,
) -> Result<f64> {
    if feature >= data.cond_dim() {
        return Err(Error::dim("conditional_energy_distance", format!("feature < {}", data.cond_dim()), feature));
    }
    if n_bins == 0 || data.len() < 2 * n_bins {
        return Err(Error::Config(format!("{} rows cannot fill {n_bins} bins", data.len())));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_by(|&a, &b| data.conditions.get(a, feature).total_cmp(&data.conditions.get(b, feature)));
    let mut total = 0.0;
    for b in 0..n_bins {
        let bin = &order[b * data.len() / n_bins..(b + 1) * data.len() / n_bins];
        let stride = bin.len().div_ceil(max_rows_per_bin.max(2));
        let rows: Vec<usize> = bin.iter().step_by(stride).copied().collect();
        let cond = data.conditions.select_rows(&rows);
        let generated = sampler.sample(&cond, rng)?;
        total += energy_distance(&generated, &data.responses.select_rows(&rows))?;
    }
    Ok(total / n_bins as f64)
}
