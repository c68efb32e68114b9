//! ROC curve, AUC and the dist figure of merit.
//!
//! `dist` is the Euclidean distance from the no-detection corner
//! `(PFA, PD) = (1, 0)` to the point where the ROC curve meets the
//! anti-diagonal `PFA + PD = 1`, divided by `√2` so a perfect detector scores 1
//! and the chance diagonal 0.5. This construction is an interpretation.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::detect::EnergyMap;
use crate::error::{Error, Result};
use crate::image::BinaryMap;
use crate::io;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RocPoint {
    /// Strict threshold reproducing this point: changed iff `e > tau`.
    pub tau: f64,
    pub pfa: f64,
    pub pd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

/// Sweep the threshold from above the maximum energy down to `-∞`, one point
/// per distinct energy value.
pub fn roc(e: &EnergyMap, d_ref: &BinaryMap) -> Result<RocCurve> {
    if (e.rows(), e.cols()) != (d_ref.rows(), d_ref.cols()) {
        return Err(Error::shape(
            "roc reference map",
            format!("{}x{}", e.rows(), e.cols()),
            format!("{}x{}", d_ref.rows(), d_ref.cols()),
        ));
    }
    let n_changed = d_ref.count_changed();
    let n_unchanged = d_ref.len() - n_changed;
    if n_changed == 0 || n_unchanged == 0 {
        return Err(Error::DegenerateReference);
    }
    let mut order: Vec<(f64, bool)> = e.values().iter().enumerate().map(|(i, &v)| (v, d_ref.is_changed(i))).collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let v = order[i].0;
        points.push(RocPoint {
            tau: v,
            pfa: fp as f64 / n_unchanged as f64,
            pd: tp as f64 / n_changed as f64,
        });
        while i < order.len() && order[i].0 == v {
            if order[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
    }
    points.push(RocPoint {
        tau: f64::NEG_INFINITY,
        pfa: 1.0,
        pd: 1.0,
    });
    Ok(RocCurve { points })
}

/// Trapezoidal area under the curve.
pub fn auc(curve: &RocCurve) -> f64 {
    curve
        .points
        .windows(2)
        .map(|w| (w[1].pfa - w[0].pfa) * (w[1].pd + w[0].pd) / 2.0)
        .sum()
}

/// Normalized distance from `(1, 0)` to the curve's anti-diagonal crossing.
pub fn dist(curve: &RocCurve) -> f64 {
    let s = |p: &RocPoint| p.pfa + p.pd - 1.0;
    for w in curve.points.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let (sa, sb) = (s(a), s(b));
        if sa <= 0.0 && sb >= 0.0 {
            let t = if sb == sa { 0.0 } else { -sa / (sb - sa) };
            let x = a.pfa + t * (b.pfa - a.pfa);
            let y = a.pd + t * (b.pd - a.pd);
            return ((x - 1.0).powi(2) + y * y).sqrt() / std::f64::consts::SQRT_2;
        }
    }
    0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Scores {
    pub auc: f64,
    pub dist: f64,
}

pub fn evaluate(e: &EnergyMap, d_ref: &BinaryMap) -> Result<(RocCurve, Scores)> {
    let curve = roc(e, d_ref)?;
    let scores = Scores {
        auc: auc(&curve),
        dist: dist(&curve),
    };
    Ok((curve, scores))
}

/// `tau,pfa,pd` rows followed by a `# auc=…,dist=…` summary line.
pub fn roc_csv(curve: &RocCurve) -> String {
    let mut s = String::from("tau,pfa,pd\n");
    for p in &curve.points {
        writeln!(s, "{},{},{}", p.tau, p.pfa, p.pd).unwrap();
    }
    writeln!(s, "# auc={},dist={}", auc(curve), dist(curve)).unwrap();
    s
}

pub fn write_roc_csv(path: impl AsRef<Path>, curve: &RocCurve) -> Result<()> {
    io::write_bytes(path.as_ref(), roc_csv(curve).as_bytes())
}
