//! Whole-frame prediction: tile a frame into patches, run the model on
//! every cell (one batch), stitch, and roll forward.
//!
//! Recursive rollouts finish every cell of horizon k before starting
//! horizon k+1, so context windows at k+1 read the stitched frame and see
//! across cell borders.

use std::path::Path;

use crate::data::{self, extract_window, make_grid, PatchGrid, PATCH, T_IN};
use crate::graph::Graph;
use crate::models::{Mode, Model, ModelError};
use crate::pgm;
use crate::scalar::Scalar;
use crate::sim::BoundaryFrame;
use crate::tensor::{Tensor, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PredictError {
    #[error("need at least {need} observed frames, got {got}")]
    TooFewFrames { need: usize, got: usize },
    #[error("model expects {expected}, got {got}")]
    ModelMismatch { expected: String, got: String },
    #[error("prediction contains non-finite values at horizon {horizon}")]
    NonFinite { horizon: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Pgm(#[from] pgm::PgmError),
}

pub type Result<T> = std::result::Result<T, PredictError>;

#[derive(Debug, Clone, Copy)]
pub struct RolloutConfig {
    /// Frames to predict.
    pub horizon: usize,
    /// Binarize fed-back frames at this threshold; emitted frames stay soft.
    pub binarize_feedback: Option<f64>,
}

fn check_model<S: Scalar>(model: &Model<S>, frames: &[BoundaryFrame]) -> Result<PatchGrid> {
    let want = if model.spec.context { 3 * PATCH } else { PATCH };
    if model.spec.extent != want {
        return Err(PredictError::ModelMismatch {
            expected: format!("input extent {want} for whole-frame prediction"),
            got: format!("extent {}", model.spec.extent),
        });
    }
    if frames.len() < T_IN {
        return Err(PredictError::TooFewFrames { need: T_IN, got: frames.len() });
    }
    Ok(make_grid(frames[0].height, frames[0].width)?)
}

/// [cells, T, E, E] input tensor over the last T frames of `buffer`.
fn window_batch<S: Scalar>(
    buffer: &[BoundaryFrame],
    grid: &PatchGrid,
    context: bool,
) -> Result<Tensor<S>> {
    let e = if context { 3 * PATCH } else { PATCH };
    let frames = &buffer[buffer.len() - T_IN..];
    let mut data = Vec::with_capacity(grid.cells() * T_IN * e * e);
    for row in 0..grid.rows {
        for col in 0..grid.cols {
            for f in frames {
                data.extend(extract_window(f, row, col, context).iter().map(|&v| S::from_f64(v as f64)));
            }
        }
    }
    Ok(Tensor::from_vec(&[grid.cells(), T_IN, e, e], data)?)
}

/// Stitch channel `k` of a [cells, K, 32, 32] output into a frame.
fn stitch_channel<S: Scalar>(out: &Tensor<S>, grid: &PatchGrid, k: usize) -> Result<BoundaryFrame> {
    let kk = out.shape()[1];
    let per = PATCH * PATCH;
    let patches: Vec<Vec<f32>> = (0..grid.cells())
        .map(|c| {
            let base = (c * kk + k) * per;
            out.data()[base..base + per].iter().map(|&v| Scalar::to_f64(v) as f32).collect()
        })
        .collect();
    Ok(data::stitch(&patches, grid)?)
}

fn check_finite(frame: &BoundaryFrame, horizon: usize) -> Result<()> {
    if frame.values.iter().any(|v| !v.is_finite()) {
        return Err(PredictError::NonFinite { horizon });
    }
    Ok(())
}

/// One forward pass over all cells; returns the stitched frame per output
/// channel.
fn step_frames<S: Scalar>(
    model: &Model<S>,
    buffer: &[BoundaryFrame],
    grid: &PatchGrid,
) -> Result<Vec<BoundaryFrame>> {
    let input = window_batch::<S>(buffer, grid, model.spec.context)?;
    let mut g = Graph::new();
    let x = g.input(input);
    let f = model.forward(&mut g, x)?;
    let out = g.value(f.output);
    (0..model.spec.horizon).map(|k| stitch_channel(out, grid, k)).collect()
}

/// Single-pass prediction of the model's K horizons.
pub fn predict_seq2seq<S: Scalar>(
    model: &Model<S>,
    observed: &[BoundaryFrame],
) -> Result<Vec<BoundaryFrame>> {
    let grid = check_model(model, observed)?;
    let frames = step_frames(model, observed, &grid)?;
    for (k, f) in frames.iter().enumerate() {
        check_finite(f, k + 1)?;
    }
    Ok(frames)
}

/// Feed each prediction back as the newest observation, one frame per step.
pub fn predict_recursive<S: Scalar>(
    model: &Model<S>,
    observed: &[BoundaryFrame],
    cfg: &RolloutConfig,
) -> Result<Vec<BoundaryFrame>> {
    if model.spec.mode != Mode::Recursive {
        return Err(PredictError::ModelMismatch {
            expected: "a recursive-mode model".into(),
            got: "seq2seq".into(),
        });
    }
    let grid = check_model(model, observed)?;
    let mut buffer: Vec<BoundaryFrame> = observed[observed.len() - T_IN..].to_vec();
    let mut emitted = Vec::with_capacity(cfg.horizon);
    for k in 1..=cfg.horizon {
        let frame = step_frames(model, &buffer, &grid)?.pop().expect("K=1");
        check_finite(&frame, k)?;
        let fed = match cfg.binarize_feedback {
            Some(t) => BoundaryFrame {
                height: frame.height,
                width: frame.width,
                values: frame.values.iter().map(|&v| (v as f64 >= t) as u8 as f32).collect(),
            },
            None => frame.clone(),
        };
        buffer.remove(0);
        buffer.push(fed);
        emitted.push(frame);
    }
    Ok(emitted)
}

/// Repeat the newest observed frame at every horizon.
pub fn last_input_baseline(observed: &[BoundaryFrame], horizon: usize) -> Result<Vec<BoundaryFrame>> {
    let last = observed.last().ok_or(PredictError::TooFewFrames { need: 1, got: 0 })?;
    Ok(vec![last.clone(); horizon])
}

/// Blind variant of an input: wall pixels (the frame border) erased, so a
/// model keeps the ball but loses sight of the walls.
pub fn blind_frames(frames: &[BoundaryFrame]) -> Vec<BoundaryFrame> {
    frames
        .iter()
        .map(|f| {
            let mut out = f.clone();
            let (h, w) = (f.height, f.width);
            for x in 0..w {
                out.values[x] = 0.0;
                out.values[(h - 1) * w + x] = 0.0;
            }
            for y in 0..h {
                out.values[y * w] = 0.0;
                out.values[y * w + w - 1] = 0.0;
            }
            out
        })
        .collect()
}

/// Per-pixel maximum over frames: the extrapolation trail image.
pub fn render_trail(frames: &[BoundaryFrame]) -> Result<BoundaryFrame> {
    let first = frames.first().ok_or(PredictError::TooFewFrames { need: 1, got: 0 })?;
    let mut trail = first.clone();
    for f in &frames[1..] {
        if f.height != first.height || f.width != first.width {
            return Err(PredictError::ModelMismatch {
                expected: format!("{}x{} frames", first.height, first.width),
                got: format!("{}x{}", f.height, f.width),
            });
        }
        for (t, &v) in trail.values.iter_mut().zip(&f.values) {
            *t = t.max(v);
        }
    }
    Ok(trail)
}

/// Side-by-side comparison image: ground truth in the red channel,
/// prediction in green (overlap shows yellow).
pub fn write_comparison_ppm(path: &Path, gt: &BoundaryFrame, pred: &BoundaryFrame) -> Result<()> {
    if gt.height != pred.height || gt.width != pred.width {
        return Err(PredictError::ModelMismatch {
            expected: format!("{}x{} prediction", gt.height, gt.width),
            got: format!("{}x{}", pred.height, pred.width),
        });
    }
    let mut rgb = Vec::with_capacity(gt.values.len() * 3);
    for (&g, &p) in gt.values.iter().zip(&pred.values) {
        rgb.push((g.clamp(0.0, 1.0) * 255.0).round() as u8);
        rgb.push((p.clamp(0.0, 1.0) * 255.0).round() as u8);
        rgb.push(0);
    }
    pgm::write_ppm(path, gt.height, gt.width, &rgb)?;
    Ok(())
}
