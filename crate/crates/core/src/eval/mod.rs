//! Selection-efficiency figure of merit and the experiment drivers.
//!
//! A threshold on one response ("score") is fitted so that a target fraction
//! of signal rows passes `score > t`. The background efficiency of that cut is
//! then compared per bin between real rows and every member of an uncertain
//! generator; the member spread gives a 1-sigma band.

mod experiment;
mod report;

pub use experiment::{
    efficiency_bands, feature_groups, run_scan_experiment, run_uniform_experiment, scan_groups, sigma_syst_bands, BinGroup,
    ScanConfig, UniformConfig, DEFAULT_N_PER_BAND,
};
pub use report::{BinReport, EfficiencyReport};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdSpec {
    /// Species whose rows define the threshold.
    pub signal: String,
    /// Species whose efficiency is reported.
    pub background: String,
    /// Response column used as the score.
    pub score_index: usize,
    pub target_efficiency: f64,
    /// Set once fitted.
    pub threshold: Option<f64>,
}

impl Default for ThresholdSpec {
    fn default() -> Self {
        Self { signal: "kaon".into(), background: "pion".into(), score_index: 0, target_efficiency: 0.9, threshold: None }
    }
}

impl ThresholdSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_efficiency > 0.0 && self.target_efficiency < 1.0) {
            return Err(Error::Config(format!("target efficiency {} outside (0, 1)", self.target_efficiency)));
        }
        Ok(())
    }

    pub fn fitted_threshold(&self) -> Result<f64> {
        self.threshold
            .ok_or_else(|| Error::Contract(format!("threshold for `{}` has not been fitted", self.signal)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdFit {
    pub threshold: f64,
    /// Fraction of the fitting scores strictly above `threshold`.
    pub achieved: f64,
    /// No sample value reaches the target (e.g. all scores equal).
    pub degenerate: bool,
}

/// Largest sample value `t` with `fraction(score > t) >= target`. When no
/// sample value qualifies, `t` is the minimum and the fit is flagged
/// degenerate.
pub fn fit_threshold(scores: &[f64], target: f64) -> Result<ThresholdFit> {
    if scores.is_empty() {
        return Err(Error::Config("cannot fit a threshold on no scores".into()));
    }
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::Config(format!("target efficiency {target} outside (0, 1)")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Config("non-finite score".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut best: Option<ThresholdFit> = None;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let achieved = (n - j - 1) as f64 / n as f64;
        if achieved < target {
            break;
        }
        best = Some(ThresholdFit { threshold: sorted[i], achieved, degenerate: false });
        i = j + 1;
    }
    Ok(best.unwrap_or_else(|| {
        let threshold = sorted[0];
        let above = sorted.iter().filter(|&&s| s > threshold).count();
        ThresholdFit { threshold, achieved: above as f64 / n as f64, degenerate: true }
    }))
}

/// Fraction of `scores` strictly above `t`.
pub fn background_efficiency(scores: &[f64], t: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Config("background efficiency of no rows".into()));
    }
    Ok(scores.iter().filter(|&&s| s > t).count() as f64 / scores.len() as f64)
}

/// Spearman rank correlation with average ranks for ties. `NaN` when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman needs paired samples");
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            out[o] = rank;
        }
        i = j + 1;
    }
    out
}

/// Edges of `n_bins` equal-count bins over `values`. Bin `b` holds values in
/// `[edges[b], edges[b+1])`; the outer edges are infinite.
pub fn equal_count_edges(values: &[f64], n_bins: usize) -> Result<Vec<f64>> {
    if n_bins == 0 || values.len() < n_bins {
        return Err(Error::Config(format!("{} values cannot fill {n_bins} bins", values.len())));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut edges = vec![f64::NEG_INFINITY];
    for b in 1..n_bins {
        edges.push(sorted[b * sorted.len() / n_bins]);
    }
    edges.push(f64::INFINITY);
    Ok(edges)
}

/// Index of the bin containing `v`.
pub fn bin_of(edges: &[f64], v: f64) -> usize {
    edges[1..edges.len() - 1].partition_point(|&e| e <= v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_from_seed, standard_normal};
    use proptest::prelude::*;
    use statrs::distribution::{ContinuousCDF, Normal};

    #[test]
    fn ten_scores() {
        let scores: Vec<f64> = (1..=10).map(f64::from).collect();
        let fit = fit_threshold(&scores, 0.9).unwrap();
        assert_eq!(fit.threshold, 1.0);
        assert_eq!(fit.achieved, 0.9);
        assert!(!fit.degenerate);
    }

    #[test]
    fn normal_quantile() {
        let scores = standard_normal(100_000, 1, &mut rng_from_seed(1)).into_vec();
        let fit = fit_threshold(&scores, 0.9).unwrap();
        assert!((fit.threshold + 1.2816).abs() < 0.02, "{}", fit.threshold);
    }

    #[test]
    fn all_equal_scores_are_degenerate() {
        let fit = fit_threshold(&[2.0; 20], 0.9).unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.achieved, 0.0);
        assert!(fit_threshold(&[], 0.9).is_err());
    }

    #[test]
    fn efficiency_examples() {
        assert_eq!(background_efficiency(&[0.0, 0.0, 5.0, 5.0], 1.0).unwrap(), 0.5);
        assert_eq!(background_efficiency(&[0.0, 0.5], 1.0).unwrap(), 0.0);
        assert!(background_efficiency(&[], 1.0).is_err());
    }

    #[test]
    fn gaussian_closed_form() {
        // Background sits delta below the signal; the cut keeps 90% of signal.
        let delta = 1.0;
        let mut rng = rng_from_seed(2);
        let signal = standard_normal(100_000, 1, &mut rng).into_vec();
        let background: Vec<f64> = standard_normal(100_000, 1, &mut rng).as_slice().iter().map(|v| v - delta).collect();
        let t = fit_threshold(&signal, 0.9).unwrap().threshold;
        let phi = Normal::standard();
        let expected = phi.cdf(phi.inverse_cdf(0.9) - delta);
        assert!((background_efficiency(&background, t).unwrap() - expected).abs() < 0.01);
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        // Ties get average ranks: ranks (1.5, 1.5, 3) against (1, 2, 3).
        let r = spearman(&[1.0, 1.0, 2.0], &[1.0, 2.0, 3.0]);
        assert!((r - 0.8660254037844386).abs() < 1e-12);
    }

    #[test]
    fn equal_count_binning() {
        let values: Vec<f64> = (0..100).map(f64::from).collect();
        let edges = equal_count_edges(&values, 4).unwrap();
        let mut counts = [0; 4];
        for &v in &values {
            counts[bin_of(&edges, v)] += 1;
        }
        assert_eq!(counts, [25; 4]);
        assert_eq!(bin_of(&edges, -1e9), 0);
        assert_eq!(bin_of(&edges, 1e9), 3);
    }

    proptest! {
        #[test]
        fn threshold_contract(scores in prop::collection::vec(-100i32..100, 10..200), target in 0.05f64..0.95) {
            let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
            let fit = fit_threshold(&scores, target).unwrap();
            let frac = |t: f64| scores.iter().filter(|&&s| s > t).count() as f64 / scores.len() as f64;
            if !fit.degenerate {
                prop_assert!(frac(fit.threshold) >= target);
                // No larger sample value satisfies the contract.
                for &s in scores.iter().filter(|&&s| s > fit.threshold) {
                    prop_assert!(frac(s) < target);
                }
            }
        }

        #[test]
        fn raising_target_never_raises_threshold(scores in prop::collection::vec(-50i32..50, 10..100), a in 0.05f64..0.95, b in 0.05f64..0.95) {
            let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(fit_threshold(&scores, hi).unwrap().threshold <= fit_threshold(&scores, lo).unwrap().threshold);
        }

        #[test]
        fn efficiencies_are_fractions(scores in prop::collection::vec(-1e3f64..1e3, 1..100), t in -1e3f64..1e3) {
            let e = background_efficiency(&scores, t).unwrap();
            prop_assert!((0.0..=1.0).contains(&e));
        }
    }
}
