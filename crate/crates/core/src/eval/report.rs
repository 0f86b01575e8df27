use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::ThresholdSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinReport {
    pub index: usize,
    /// Bin label, e.g. the feature range or the band name.
    pub label: String,
    /// Background rows in the bin.
    pub count: usize,
    pub real: f64,
    /// Binomial standard error of `real`; diagnostic only.
    pub real_stderr: f64,
    pub members: Vec<f64>,
    pub center: f64,
    pub half_width: f64,
}

impl BinReport {
    pub fn covered(&self) -> bool {
        (self.real - self.center).abs() <= self.half_width
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub spec: ThresholdSpec,
    /// Condition feature the bins run over, or `None` for band reports.
    pub feature: Option<usize>,
    /// Bin edges in model (normalized) space when binning by feature.
    pub edges: Vec<f64>,
    pub bins: Vec<BinReport>,
    /// Bins without background rows; excluded from coverage.
    pub dropped: Vec<usize>,
    pub coverage: f64,
}

impl EfficiencyReport {
    pub(crate) fn new(spec: ThresholdSpec, feature: Option<usize>, edges: Vec<f64>, bins: Vec<BinReport>, dropped: Vec<usize>) -> Self {
        let mut report = Self { spec, feature, edges, bins, dropped, coverage: 0.0 };
        report.recompute_coverage();
        report
    }

    /// Fraction of reported bins with `|real - center| <= half_width`.
    pub fn recompute_coverage(&mut self) {
        let covered = self.bins.iter().filter(|b| b.covered()).count();
        self.coverage = if self.bins.is_empty() { 0.0 } else { covered as f64 / self.bins.len() as f64 };
    }

    pub fn mean_half_width(&self) -> f64 {
        self.bins.iter().map(|b| b.half_width).sum::<f64>() / self.bins.len().max(1) as f64
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// One row per bin.
    pub fn to_csv(&self) -> String {
        let n_members = self.bins.first().map_or(0, |b| b.members.len());
        let mut out = String::from("index,label,count,real,real_stderr,center,half_width,covered");
        for m in 0..n_members {
            let _ = write!(out, ",member_{m}");
        }
        out.push('\n');
        for b in &self.bins {
            let _ = write!(
                out,
                "{},\"{}\",{},{:?},{:?},{:?},{:?},{}",
                b.index,
                b.label,
                b.count,
                b.real,
                b.real_stderr,
                b.center,
                b.half_width,
                b.covered()
            );
            for m in &b.members {
                let _ = write!(out, ",{m:?}");
            }
            out.push('\n');
        }
        out
    }

    /// Line plot of the real efficiency over the shaded band.
    pub fn to_svg(&self) -> String {
        let (w, h, pad) = (640.0, 400.0, 50.0);
        let n = self.bins.len().max(1) as f64;
        let ymax = self
            .bins
            .iter()
            .map(|b| b.real.max(b.center + b.half_width))
            .fold(0.0f64, f64::max)
            .max(1e-3)
            * 1.1;
        let x = |i: f64| pad + (i + 0.5) * (w - 2.0 * pad) / n;
        let y = |v: f64| h - pad - v.clamp(0.0, ymax) / ymax * (h - 2.0 * pad);
        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
             <text x=\"{pad}\" y=\"25\" font-family=\"sans-serif\" font-size=\"14\">{} efficiency, cut tuned on {} (coverage {:.2})</text>\n",
            self.spec.background, self.spec.signal, self.coverage
        );
        let upper: Vec<String> =
            self.bins.iter().enumerate().map(|(i, b)| format!("{:.2},{:.2}", x(i as f64), y(b.center + b.half_width))).collect();
        let lower: Vec<String> = self
            .bins
            .iter()
            .enumerate()
            .rev()
            .map(|(i, b)| format!("{:.2},{:.2}", x(i as f64), y(b.center - b.half_width)))
            .collect();
        let _ = writeln!(
            svg,
            "<polygon points=\"{} {}\" fill=\"steelblue\" fill-opacity=\"0.3\" stroke=\"none\"/>",
            upper.join(" "),
            lower.join(" ")
        );
        let real: Vec<String> =
            self.bins.iter().enumerate().map(|(i, b)| format!("{:.2},{:.2}", x(i as f64), y(b.real))).collect();
        let _ = writeln!(svg, "<polyline points=\"{}\" fill=\"none\" stroke=\"black\" stroke-width=\"2\"/>", real.join(" "));
        let _ = writeln!(
            svg,
            "<line x1=\"{pad}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"gray\"/>\n<line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{0}\" stroke=\"gray\"/>",
            h - pad,
            w - pad
        );
        let _ = writeln!(svg, "<text x=\"5\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\">{ymax:.3}</text>", pad);
        for (i, b) in self.bins.iter().enumerate() {
            let _ = writeln!(
                svg,
                "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">{}</text>",
                x(i as f64),
                h - pad + 15.0,
                b.index
            );
        }
        svg.push_str("</svg>\n");
        svg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bin(index: usize, real: f64, center: f64, half_width: f64) -> BinReport {
        BinReport {
            index,
            label: format!("b{index}"),
            count: 10,
            real,
            real_stderr: 0.0,
            members: vec![center - half_width, center + half_width],
            center,
            half_width,
        }
    }

    #[test]
    fn coverage_counts_bins_inside_band() {
        let at_center = EfficiencyReport::new(ThresholdSpec::default(), Some(1), vec![], vec![bin(0, 0.2, 0.2, 0.0), bin(1, 0.4, 0.4, 0.1)], vec![]);
        assert_eq!(at_center.coverage, 1.0);
        let half = EfficiencyReport::new(ThresholdSpec::default(), None, vec![], vec![bin(0, 0.2, 0.2, 0.01), bin(1, 0.5, 0.2, 0.1)], vec![]);
        assert_eq!(half.coverage, 0.5);
    }

    #[test]
    fn serializations() {
        let r = EfficiencyReport::new(ThresholdSpec::default(), Some(1), vec![0.0], vec![bin(0, 0.2, 0.25, 0.1)], vec![3]);
        assert_eq!(EfficiencyReport::from_json(&r.to_json().unwrap()).unwrap(), r);
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.starts_with("index,label,count,real"));
        assert!(r.to_svg().contains("<polygon"));
    }
}
