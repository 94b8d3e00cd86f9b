//! Boundary precision-recall scoring.
//!
//! A predicted frame is binarized at a threshold and compared against a
//! binary ground-truth frame. With tolerance `t` a pixel counts as matched
//! when the other frame has an on-pixel within Chebyshev distance `t`
//! (`t = 0` is exact intersection). Counts are pooled over frames before
//! ratios are formed:
//! `P = sum |B_p n B_g| / sum |B_p|`, `R = sum |B_p n B_g| / sum |B_g|`,
//! `F = 2PR / (P + R)`.

use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

use crate::sim::BoundaryFrame;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction is {ph}x{pw} but ground truth is {gh}x{gw}")]
    ExtentMismatch { ph: usize, pw: usize, gh: usize, gw: usize },
    #[error("no frame pairs to score")]
    Empty,
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Pooled pixel counts; the additive piece of a PR computation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BprCounts {
    pub matched_pred: u64,
    pub pred_total: u64,
    pub matched_gt: u64,
    pub gt_total: u64,
}

impl BprCounts {
    pub fn add(&mut self, other: &BprCounts) {
        self.matched_pred += other.matched_pred;
        self.pred_total += other.pred_total;
        self.matched_gt += other.matched_gt;
        self.gt_total += other.gt_total;
    }

    /// Empty sides score 1 against an empty counterpart and 0 otherwise.
    pub fn precision(&self) -> f64 {
        if self.pred_total == 0 {
            return if self.gt_total == 0 { 1.0 } else { 0.0 };
        }
        self.matched_pred as f64 / self.pred_total as f64
    }

    pub fn recall(&self) -> f64 {
        if self.gt_total == 0 {
            return if self.pred_total == 0 { 1.0 } else { 0.0 };
        }
        self.matched_gt as f64 / self.gt_total as f64
    }

    pub fn f_measure(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PRPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PRCurve {
    pub points: Vec<PRPoint>,
    pub tolerance: usize,
}

fn binarize(frame: &BoundaryFrame, threshold: f64) -> Vec<bool> {
    frame.values.iter().map(|&v| v as f64 >= threshold).collect()
}

/// Chebyshev dilation: pixel on iff any source pixel within distance `t`.
fn dilate(mask: &[bool], h: usize, w: usize, t: usize) -> Vec<bool> {
    if t == 0 {
        return mask.to_vec();
    }
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            for dy in y.saturating_sub(t)..=(y + t).min(h - 1) {
                for dx in x.saturating_sub(t)..=(x + t).min(w - 1) {
                    out[dy * w + dx] = true;
                }
            }
        }
    }
    out
}

/// Counts for one frame pair; prediction binarized at `threshold`, ground
/// truth at 0.5.
pub fn bpr_counts(
    pred: &BoundaryFrame,
    gt: &BoundaryFrame,
    threshold: f64,
    tolerance: usize,
) -> Result<BprCounts> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(EvalError::ExtentMismatch {
            ph: pred.height,
            pw: pred.width,
            gh: gt.height,
            gw: gt.width,
        });
    }
    let (h, w) = (gt.height, gt.width);
    let p = binarize(pred, threshold);
    let g = binarize(gt, 0.5);
    let p_reach = dilate(&p, h, w, tolerance);
    let g_reach = dilate(&g, h, w, tolerance);
    let mut c = BprCounts::default();
    for i in 0..h * w {
        c.pred_total += p[i] as u64;
        c.gt_total += g[i] as u64;
        c.matched_pred += (p[i] && g_reach[i]) as u64;
        c.matched_gt += (g[i] && p_reach[i]) as u64;
    }
    Ok(c)
}

/// Pooled precision/recall of a set of frame pairs at one threshold.
pub fn bpr(
    pairs: &[(&BoundaryFrame, &BoundaryFrame)],
    threshold: f64,
    tolerance: usize,
) -> Result<PRPoint> {
    if pairs.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut total = BprCounts::default();
    for (pred, gt) in pairs {
        total.add(&bpr_counts(pred, gt, threshold, tolerance)?);
    }
    Ok(PRPoint {
        threshold,
        precision: total.precision(),
        recall: total.recall(),
        f: total.f_measure(),
    })
}

/// 51 uniform thresholds 0.00, 0.02, ..., 1.00.
pub fn default_thresholds() -> Vec<f64> {
    (0..=50).map(|i| i as f64 / 50.0).collect()
}

pub fn sweep(
    pairs: &[(&BoundaryFrame, &BoundaryFrame)],
    thresholds: &[f64],
    tolerance: usize,
) -> Result<PRCurve> {
    let points = thresholds
        .iter()
        .map(|&t| bpr(pairs, t, tolerance))
        .collect::<Result<Vec<_>>>()?;
    Ok(PRCurve { points, tolerance })
}

impl PRCurve {
    /// Trapezoidal area under the precision-recall curve. Points are sorted
    /// by recall and the lowest-recall end is extended flat to R = 0 with
    /// its highest precision.
    pub fn auc(&self) -> f64 {
        if self.points.is_empty() {
            return 0.0;
        }
        let mut pts: Vec<(f64, f64)> = self.points.iter().map(|p| (p.recall, p.precision)).collect();
        // anchor the curve at R = 0 with its highest precision; degenerate
        // empty-prediction points (P = R = 0 at extreme thresholds) would
        // otherwise drag the low-recall end to zero
        let p_max = pts.iter().map(|&(_, p)| p).fold(0.0, f64::max);
        pts.push((0.0, p_max));
        pts.sort_by(|a, b| a.partial_cmp(b).expect("finite PR values"));
        // collapse duplicate recalls to their best precision; sorted
        // ascending by (r, p), the last of each run is the max
        pts.dedup_by(|next, prev| prev.0 == next.0 && {
            prev.1 = next.1;
            true
        });
        let mut area = 0.0;
        let mut prev = pts[0];
        for &(r, p) in &pts[1..] {
            area += (r - prev.0) * (p + prev.1) / 2.0;
            prev = (r, p);
        }
        area
    }

    pub fn best_f(&self) -> PRPoint {
        *self
            .points
            .iter()
            .max_by(|a, b| a.f.partial_cmp(&b.f).expect("finite F"))
            .expect("non-empty curve")
    }
}

/// Scores of one prediction horizon, pooled over every sequence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HorizonRow {
    pub horizon: usize,
    pub best_f: f64,
    pub best_threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub auc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HorizonReport {
    pub tolerance: usize,
    pub rows: Vec<HorizonRow>,
}

/// Sweep each horizon's pooled frame pairs and assemble the report.
/// `by_horizon` holds (horizon, pairs).
pub fn horizon_report(
    by_horizon: &[(usize, Vec<(&BoundaryFrame, &BoundaryFrame)>)],
    thresholds: &[f64],
    tolerance: usize,
) -> Result<HorizonReport> {
    let mut rows = Vec::with_capacity(by_horizon.len());
    for (horizon, pairs) in by_horizon {
        let curve = sweep(pairs, thresholds, tolerance)?;
        let best = curve.best_f();
        rows.push(HorizonRow {
            horizon: *horizon,
            best_f: best.f,
            best_threshold: best.threshold,
            precision: best.precision,
            recall: best.recall,
            auc: curve.auc(),
        });
    }
    Ok(HorizonReport { tolerance, rows })
}

impl HorizonReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:>8} {:>8} {:>10} {:>10} {:>8} {:>8}   (tolerance {})\n",
            "horizon", "best-F", "precision", "recall", "thresh", "AUC", self.tolerance
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:>8} {:>8.3} {:>10.3} {:>10.3} {:>8.2} {:>8.3}\n",
                format!("t+{}", r.horizon),
                r.best_f,
                r.precision,
                r.recall,
                r.best_threshold,
                r.auc
            ));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("horizon,best_f,precision,recall,best_threshold,auc\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.horizon, r.best_f, r.precision, r.recall, r.best_threshold, r.auc
            ));
        }
        s
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let io = |e: std::io::Error| EvalError::Io { path: path.display().to_string(), source: e };
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(serde_json::to_string_pretty(self).expect("serializable").as_bytes())
            .map_err(io)
    }
}
