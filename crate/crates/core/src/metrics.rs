//! Registration error metrics, recall, recall curves and normalized timing.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::pointcloud::{quat_angle, Pose};

/// Default success thresholds.
pub const RECALL_RRE_DEG: f64 = 5.0;
pub const RECALL_RTE_M: f64 = 2.0;

/// Angle of the relative rotation in degrees, in `[0, 180]`.
pub fn rre_deg(pred: &Pose, gt: &Pose) -> f64 {
    quat_angle(pred.q(), gt.q()).to_degrees()
}

pub fn rte_m(pred: &Pose, gt: &Pose) -> f64 {
    let d = [
        pred.t[0] - gt.t[0],
        pred.t[1] - gt.t[1],
        pred.t[2] - gt.t[2],
    ];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub pair_id: String,
    pub rre_deg: f64,
    pub rte_m: f64,
    pub time_ms: f64,
    pub n_points: usize,
}

impl EvalRecord {
    pub fn is_success(&self, rre_thresh_deg: f64, rte_thresh_m: f64) -> bool {
        self.rre_deg < rre_thresh_deg && self.rte_m < rte_thresh_m
    }
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Option<MeanStd> {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Some(MeanStd {
            mean,
            std: var.sqrt(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecallSummary {
    pub rre_thresh_deg: f64,
    pub rte_thresh_m: f64,
    pub total: usize,
    pub successes: usize,
    pub recall: f64,
    /// Statistics over successful pairs (`None` when there are none).
    pub rre_success: Option<MeanStd>,
    pub rte_success: Option<MeanStd>,
    pub rre_all: MeanStd,
    pub rte_all: MeanStd,
}

fn check_thresholds(rre: f64, rte: f64) -> Result<()> {
    if !(rre > 0.0) || !(rte > 0.0) {
        return Err(Error::Invalid(format!(
            "thresholds must be positive, got {rre}° and {rte} m"
        )));
    }
    Ok(())
}

/// Fraction of pairs with `RRE < rre_thresh` and `RTE < rte_thresh`.
pub fn registration_recall(
    records: &[EvalRecord],
    rre_thresh_deg: f64,
    rte_thresh_m: f64,
) -> Result<RecallSummary> {
    if records.is_empty() {
        return Err(Error::Invalid("no evaluation records".into()));
    }
    check_thresholds(rre_thresh_deg, rte_thresh_m)?;
    let ok: Vec<&EvalRecord> = records
        .iter()
        .filter(|r| r.is_success(rre_thresh_deg, rte_thresh_m))
        .collect();
    Ok(RecallSummary {
        rre_thresh_deg,
        rte_thresh_m,
        total: records.len(),
        successes: ok.len(),
        recall: ok.len() as f64 / records.len() as f64,
        rre_success: MeanStd::of(ok.iter().map(|r| r.rre_deg)),
        rte_success: MeanStd::of(ok.iter().map(|r| r.rte_m)),
        rre_all: MeanStd::of(records.iter().map(|r| r.rre_deg)).unwrap(),
        rte_all: MeanStd::of(records.iter().map(|r| r.rte_m)).unwrap(),
    })
}

/// Recall over a grid of thresholds: `recall[i][j]` uses `rre[i]`, `rte[j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RecallCurve {
    pub rre_thresholds: Vec<f64>,
    pub rte_thresholds: Vec<f64>,
    pub recall: Vec<Vec<f64>>,
}

impl RecallCurve {
    /// Plot-ready table: one `rre rte recall` line per grid point.
    pub fn render(&self) -> String {
        let mut out = String::from("# rre_thresh_deg rte_thresh_m recall\n");
        for (i, a) in self.rre_thresholds.iter().enumerate() {
            for (j, b) in self.rte_thresholds.iter().enumerate() {
                let _ = writeln!(out, "{a} {b} {:.6}", self.recall[i][j]);
            }
        }
        out
    }
}

pub fn recall_curve(
    records: &[EvalRecord],
    rre_grid: &[f64],
    rte_grid: &[f64],
) -> Result<RecallCurve> {
    if records.is_empty() {
        return Err(Error::Invalid("no evaluation records".into()));
    }
    for &a in rre_grid {
        for &b in rte_grid {
            check_thresholds(a, b)?;
        }
    }
    let n = records.len() as f64;
    let recall = rre_grid
        .iter()
        .map(|&a| {
            rte_grid
                .iter()
                .map(|&b| records.iter().filter(|r| r.is_success(a, b)).count() as f64 / n)
                .collect()
        })
        .collect();
    Ok(RecallCurve {
        rre_thresholds: rre_grid.to_vec(),
        rte_thresholds: rte_grid.to_vec(),
        recall,
    })
}

/// Default curve grid: 0.5° .. 10° and 0.1 m .. 4 m.
pub fn default_curve_grid() -> (Vec<f64>, Vec<f64>) {
    (
        vec![0.5, 1.0, 2.0, 3.0, 4.0, 5.0, 7.5, 10.0],
        vec![0.1, 0.25, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0],
    )
}

/// Mean over records of milliseconds per thousand input points.
pub fn normalized_time(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Invalid("no evaluation records".into()));
    }
    let mut sum = 0.0;
    for r in records {
        if r.n_points == 0 {
            return Err(Error::Invalid(format!(
                "pair `{}` has zero points; normalized time undefined",
                r.pair_id
            )));
        }
        sum += r.time_ms / (r.n_points as f64 / 1000.0);
    }
    Ok(sum / records.len() as f64)
}

/// Results file: one `pair_id RRE_deg RTE_m time_ms n_points` line per
/// record, followed by `#` summary lines.
pub fn format_results(records: &[EvalRecord], summary: &RecallSummary, nt: f64) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# thresholds RRE_deg {} RTE_m {}",
        summary.rre_thresh_deg, summary.rte_thresh_m
    );
    out.push_str("# pair_id RRE_deg RTE_m time_ms n_points\n");
    for r in records {
        let _ = writeln!(
            out,
            "{} {:.6} {:.6} {:.3} {}",
            r.pair_id, r.rre_deg, r.rte_m, r.time_ms, r.n_points
        );
    }
    let _ = writeln!(
        out,
        "# recall {:.6} ({}/{})",
        summary.recall, summary.successes, summary.total
    );
    let fmt = |m: Option<MeanStd>| match m {
        Some(m) => format!("{:.6} {:.6}", m.mean, m.std),
        None => "nan nan".to_string(),
    };
    let _ = writeln!(
        out,
        "# success RRE_deg avg std {}",
        fmt(summary.rre_success)
    );
    let _ = writeln!(out, "# success RTE_m avg std {}", fmt(summary.rte_success));
    let _ = writeln!(out, "# all RRE_deg avg std {}", fmt(Some(summary.rre_all)));
    let _ = writeln!(out, "# all RTE_m avg std {}", fmt(Some(summary.rte_all)));
    let _ = writeln!(out, "# normalized_time_ms_per_kpt {nt:.6}");
    out
}

/// Reads the record lines of a results file, skipping `#` lines.
pub fn parse_results(text: &str) -> Result<Vec<EvalRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = |msg: String| Error::Parse {
            path: "<results>".into(),
            line: i + 1,
            msg,
        };
        if f.len() != 5 {
            return Err(bad(format!("expected 5 fields, got {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("`{s}`: {e}")));
        out.push(EvalRecord {
            pair_id: f[0].to_string(),
            rre_deg: num(f[1])?,
            rte_m: num(f[2])?,
            time_ms: num(f[3])?,
            n_points: f[4].parse().map_err(|e| bad(format!("`{}`: {e}", f[4])))?,
        });
    }
    Ok(out)
}
