use std::fmt::Write as _;

use super::{EvalError, Trajectory};
use crate::geometry::SimTransform;

/// Metrics of a single run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub ate_rmse: f64,
    pub rpe_trans: Option<f64>,
    pub rpe_rot: Option<f64>,
    pub coverage: f64,
}

/// Metrics averaged over one or more runs, with per-run values retained.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub ate_rmse: f64,
    /// Percent.
    pub rpe_trans: Option<f64>,
    /// Degrees per unit length.
    pub rpe_rot: Option<f64>,
    pub coverage: f64,
    pub runs: Vec<RunMetrics>,
}

impl MetricReport {
    pub fn single(run: RunMetrics) -> Self {
        Self {
            ate_rmse: run.ate_rmse,
            rpe_trans: run.rpe_trans,
            rpe_rot: run.rpe_rot,
            coverage: run.coverage,
            runs: vec![run],
        }
    }

    pub fn run_count(&self) -> usize {
        self.runs.len()
    }

    /// `key: value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.9}"));
        let _ = writeln!(s, "runs: {}", self.runs.len());
        let _ = writeln!(s, "ate_rmse: {:.9}", self.ate_rmse);
        let _ = writeln!(s, "rpe_trans_percent: {}", opt(self.rpe_trans));
        let _ = writeln!(s, "rpe_rot_deg_per_unit: {}", opt(self.rpe_rot));
        let _ = writeln!(s, "coverage: {:.6}", self.coverage);
        for (i, r) in self.runs.iter().enumerate() {
            let _ = writeln!(s, "run{i}.ate_rmse: {:.9}", r.ate_rmse);
            let _ = writeln!(s, "run{i}.rpe_trans_percent: {}", opt(r.rpe_trans));
            let _ = writeln!(s, "run{i}.rpe_rot_deg_per_unit: {}", opt(r.rpe_rot));
            let _ = writeln!(s, "run{i}.coverage: {:.6}", r.coverage);
        }
        s
    }
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Arithmetic mean of each metric over the per-run values of all `reports`.
pub fn aggregate(reports: &[MetricReport]) -> Result<MetricReport, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::EmptyReportList);
    }
    let runs: Vec<RunMetrics> = reports.iter().flat_map(|r| r.runs.iter().cloned()).collect();
    let n = runs.len() as f64;
    Ok(MetricReport {
        ate_rmse: runs.iter().map(|r| r.ate_rmse).sum::<f64>() / n,
        rpe_trans: mean_opt(runs.iter().map(|r| r.rpe_trans)),
        rpe_rot: mean_opt(runs.iter().map(|r| r.rpe_rot)),
        coverage: runs.iter().map(|r| r.coverage).sum::<f64>() / n,
        runs,
    })
}

/// Top-down (x-z plane) SVG of the estimate, the reference and the aligned estimate.
pub fn trajectory_svg(est: &Trajectory, reference: &Trajectory, alignment: Option<&SimTransform>) -> String {
    let est_pts: Vec<(f64, f64)> = est.positions().iter().map(|p| (p.x, p.z)).collect();
    let ref_pts: Vec<(f64, f64)> = reference.positions().iter().map(|p| (p.x, p.z)).collect();
    let aligned: Vec<(f64, f64)> = alignment
        .map(|a| est.positions().iter().map(|p| a.apply(p)).map(|p| (p.x, p.z)).collect())
        .unwrap_or_default();

    let all = est_pts.iter().chain(&ref_pts).chain(&aligned);
    let (mut min_x, mut max_x, mut min_y, mut max_y) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in all {
        min_x = min_x.min(x);
        max_x = max_x.max(x);
        min_y = min_y.min(y);
        max_y = max_y.max(y);
    }
    if min_x > max_x {
        (min_x, max_x, min_y, max_y) = (0.0, 1.0, 0.0, 1.0);
    }
    let size = 800.0;
    let margin = 20.0;
    let span = (max_x - min_x).max(max_y - min_y).max(1e-9);
    let scale = (size - 2.0 * margin) / span;
    let map = |(x, y): (f64, f64)| (margin + (x - min_x) * scale, size - margin - (y - min_y) * scale);
    let polyline = |pts: &[(f64, f64)], color: &str, label: &str| {
        let coords: Vec<String> = pts
            .iter()
            .map(|&p| {
                let (x, y) = map(p);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        format!(
            "  <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"><title>{label}</title></polyline>\n",
            coords.join(" ")
        )
    };
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" viewBox=\"0 0 {size} {size}\">\n"
    );
    s.push_str(&polyline(&ref_pts, "black", "reference"));
    s.push_str(&polyline(&est_pts, "#c0392b", "estimate"));
    if !aligned.is_empty() {
        s.push_str(&polyline(&aligned, "#2980b9", "aligned estimate"));
    }
    s.push_str("</svg>\n");
    s
}
