//! Mini-batch training: samples are (cell, t) windows drawn from an
//! in-memory dataset, optimized with Adam on patch-level MSE.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{self, make_grid, PATCH, T_IN};
use crate::graph::Graph;
use crate::models::{Model, ModelError};
use crate::optim::AdamState;
use crate::scalar::Scalar;
use crate::sim::{Manifest, SimError};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0}")]
    InvalidArgument(String),
    #[error("loss became non-finite in epoch {epoch}")]
    NonFinite { epoch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// One sequence held as binarized u8 frames to keep whole datasets in RAM.
#[derive(Debug, Clone)]
pub struct StoredSequence {
    pub frames: Vec<Vec<u8>>,
    pub height: usize,
    pub width: usize,
    pub id: String,
}

#[derive(Debug, Clone, Default)]
pub struct LoadedDataset {
    pub sequences: Vec<StoredSequence>,
}

impl LoadedDataset {
    /// Read every sequence listed in `dir/manifest.json`.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = Manifest::load(&dir.join("manifest.json"))?;
        Self::load_entries(dir, &manifest)
    }

    pub fn load_entries(dir: &Path, manifest: &Manifest) -> Result<Self> {
        let mut sequences = Vec::with_capacity(manifest.sequences.len());
        for entry in &manifest.sequences {
            let seq = data::load_sequence(&dir.join(&entry.dir))?;
            let frames = seq
                .frames
                .iter()
                .map(|f| f.values.iter().map(|&v| if v >= 0.5 { 1u8 } else { 0 }).collect())
                .collect();
            sequences.push(StoredSequence {
                frames,
                height: seq.height(),
                width: seq.width(),
                id: seq.source_id.clone(),
            });
        }
        Ok(LoadedDataset { sequences })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Training samples drawn per epoch; 0 uses the full index.
    pub samples_per_epoch: usize,
    /// Keep probability for samples whose center patch shows no motion
    /// across the input frames. 1.0 disables the filter.
    pub static_keep: f64,
    /// Feed ground truth into the recurrent decoders during training.
    pub teacher_forcing: bool,
    /// Scheduled sampling: replace the center patch of up to this many of
    /// the newest input frames with the model's own rollout predictions.
    /// 0 trains on ground-truth inputs only.
    pub self_input_depth: usize,
    /// Fraction of sequences (not samples) held out for validation.
    pub val_fraction: f64,
    /// Cap on validation samples per epoch; 0 scores every held-out sample.
    pub val_samples: usize,
    pub seed: u64,
    /// When set, writes loss.csv and a model.bfw checkpoint per epoch.
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 20,
            batch: 32,
            lr: 1e-3,
            samples_per_epoch: 0,
            static_keep: 1.0,
            teacher_forcing: false,
            self_input_depth: 0,
            val_fraction: 0.1,
            val_samples: 0,
            seed: 0,
            out_dir: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub stats: Vec<EpochStats>,
}

/// A (sequence, newest input frame, cell) triple addressing one sample.
#[derive(Debug, Clone, Copy)]
struct SampleRef {
    seq: usize,
    t: usize,
    row: usize,
    col: usize,
}

/// Copy one spatial window out of a stored frame, zero-filled outside.
fn fill_window<S: Scalar>(
    frame: &[u8],
    h: usize,
    w: usize,
    row: usize,
    col: usize,
    context: bool,
    out: &mut [S],
) {
    let extent = if context { 3 * PATCH } else { PATCH };
    let off = if context { PATCH as isize } else { 0 };
    let y0 = (row * PATCH) as isize - off;
    let x0 = (col * PATCH) as isize - off;
    for y in 0..extent {
        let sy = y0 + y as isize;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        for x in 0..extent {
            let sx = x0 + x as isize;
            if sx >= 0 && sx < w as isize {
                out[y * extent + x] = S::from_f64(frame[sy as usize * w + sx as usize] as f64);
            }
        }
    }
}

/// Whether the center patch changes anywhere across the T input frames.
fn has_motion(seq: &StoredSequence, r: SampleRef) -> bool {
    let y0 = r.row * PATCH;
    let x0 = r.col * PATCH;
    let first = &seq.frames[r.t + 1 - T_IN];
    for k in 2..=T_IN {
        let other = &seq.frames[r.t + k - T_IN];
        for y in y0..(y0 + PATCH).min(seq.height) {
            let a = y * seq.width + x0;
            let b = a + PATCH.min(seq.width - x0);
            if first[a..b] != other[a..b] {
                return true;
            }
        }
    }
    false
}

fn build_index(
    dataset: &LoadedDataset,
    seq_ids: &[usize],
    horizon: usize,
    static_keep: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SampleRef>> {
    let mut refs = Vec::new();
    for &si in seq_ids {
        let seq = &dataset.sequences[si];
        let grid = make_grid(seq.height, seq.width)?;
        let mut t = T_IN - 1;
        while t + horizon < seq.frames.len() {
            for row in 0..grid.rows {
                for col in 0..grid.cols {
                    let r = SampleRef { seq: si, t, row, col };
                    if static_keep >= 1.0 || has_motion(seq, r) || rng.gen::<f64>() < static_keep {
                        refs.push(r);
                    }
                }
            }
            t += 1;
        }
    }
    Ok(refs)
}

/// Assemble input [B, T, E, E] and target [B, K, O, O] tensors.
fn build_batch<S: Scalar>(
    dataset: &LoadedDataset,
    refs: &[SampleRef],
    context: bool,
    horizon: usize,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let e = if context { 3 * PATCH } else { PATCH };
    let o = PATCH;
    let b = refs.len();
    let mut input = vec![S::zero(); b * T_IN * e * e];
    let mut target = vec![S::zero(); b * horizon * o * o];
    for (i, r) in refs.iter().enumerate() {
        let seq = &dataset.sequences[r.seq];
        for k in 0..T_IN {
            let frame = &seq.frames[r.t + 1 - T_IN + k];
            let at = (i * T_IN + k) * e * e;
            fill_window(frame, seq.height, seq.width, r.row, r.col, context, &mut input[at..at + e * e]);
        }
        for k in 0..horizon {
            let frame = &seq.frames[r.t + 1 + k];
            let at = (i * horizon + k) * o * o;
            fill_window(frame, seq.height, seq.width, r.row, r.col, false, &mut target[at..at + o * o]);
        }
    }
    Ok((
        Tensor::from_vec(&[b, T_IN, e, e], input)?,
        Tensor::from_vec(&[b, horizon, o, o], target)?,
    ))
}

/// One inference pass; returns each sample's first predicted frame.
fn infer_step<S: Scalar>(model: &Model<S>, input: Tensor<S>) -> Result<Vec<Vec<S>>> {
    let o = model.spec.out_extent();
    let k = model.spec.horizon;
    let b = input.shape()[0];
    let mut g = Graph::new();
    let x = g.input(input);
    let fwd = model.forward_with(&mut g, x, None)?;
    let data = g.value(fwd.output).data().to_vec();
    Ok((0..b).map(|i| data[i * k * o * o..][..o * o].to_vec()).collect())
}

/// Overwrite the center patch of one window frame.
fn paste_center<S: Scalar>(window: &mut [S], context: bool, patch: &[S]) {
    let e = if context { 3 * PATCH } else { PATCH };
    let off = if context { PATCH } else { 0 };
    for y in 0..PATCH {
        let dst = (off + y) * e + off;
        window[dst..dst + PATCH].copy_from_slice(&patch[y * PATCH..(y + 1) * PATCH]);
    }
}

/// Scheduled sampling: per sample, draw a depth j and regenerate the last j
/// input frames' center patches with the model's own recursive predictions,
/// computed without gradients from progressively older windows. Context
/// rings stay ground truth; feedback stays soft, matching rollout.
fn corrupt_batch<S: Scalar>(
    model: &Model<S>,
    dataset: &LoadedDataset,
    refs: &[SampleRef],
    input: &mut Tensor<S>,
    depth: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let context = model.spec.context;
    let e = if context { 3 * PATCH } else { PATCH };
    let depths: Vec<usize> = refs
        .iter()
        .map(|r| rng.gen_range(0..=depth.min(T_IN).min(r.t + 1 - T_IN)))
        .collect();
    let max_d = depths.iter().copied().max().unwrap_or(0);
    if max_d == 0 {
        return Ok(());
    }
    // preds[i] collects generated centers for frame times t-j+1..=t in order.
    let mut preds: Vec<Vec<Vec<S>>> = vec![Vec::new(); refs.len()];
    for d in (1..=max_d).rev() {
        let active: Vec<usize> = (0..refs.len()).filter(|&i| depths[i] >= d).collect();
        if active.is_empty() {
            continue;
        }
        let mut win = vec![S::zero(); active.len() * T_IN * e * e];
        for (a, &i) in active.iter().enumerate() {
            let r = refs[i];
            let seq = &dataset.sequences[r.seq];
            let newest = r.t - d;
            for k in 0..T_IN {
                let u = newest + 1 - T_IN + k;
                let at = (a * T_IN + k) * e * e;
                let slot = &mut win[at..at + e * e];
                fill_window(&seq.frames[u], seq.height, seq.width, r.row, r.col, context, slot);
                if u + depths[i] > r.t {
                    paste_center(slot, context, &preds[i][u + depths[i] - r.t - 1]);
                }
            }
        }
        let batch = Tensor::from_vec(&[active.len(), T_IN, e, e], win)?;
        for (a, out) in active.iter().zip(infer_step(model, batch)?) {
            preds[*a].push(out);
        }
    }
    let data = input.data_mut();
    for (i, r) in refs.iter().enumerate() {
        for (idx, p) in preds[i].iter().enumerate() {
            let u = r.t - depths[i] + 1 + idx;
            let k = u + T_IN - 1 - r.t;
            let at = (i * T_IN + k) * e * e;
            paste_center(&mut data[at..at + e * e], context, p);
        }
    }
    Ok(())
}

fn io_ctx(path: &Path, e: std::io::Error) -> TrainError {
    TrainError::Io { path: path.display().to_string(), source: e }
}

fn run_batch<S: Scalar>(
    model: &mut Model<S>,
    adam: Option<&mut AdamState<S>>,
    input: Tensor<S>,
    target: Tensor<S>,
    teacher_forcing: bool,
) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.input(input);
    let y = g.input(target.clone());
    let teacher = if teacher_forcing { Some(g.input(target)) } else { None };
    let fwd = model.forward_with(&mut g, x, teacher)?;
    let loss = g.mse_loss(fwd.output, y)?;
    let loss_value = g.value(loss).data()[0].to_f64();
    if let Some(adam) = adam {
        g.backward(loss)?;
        let grads: Vec<Option<Vec<S>>> =
            fwd.param_nodes.iter().map(|&id| g.grad(id).map(|s| s.to_vec())).collect();
        let mut tensors: Vec<Tensor<S>> = model.params.iter().map(|(_, t)| t.clone()).collect();
        adam.step(&mut tensors, &grads)?;
        for (slot, t) in model.params.iter_mut().zip(tensors) {
            slot.1 = t;
        }
    }
    Ok(loss_value)
}

fn mean_loss<S: Scalar>(
    model: &mut Model<S>,
    mut adam: Option<&mut AdamState<S>>,
    dataset: &LoadedDataset,
    refs: &[SampleRef],
    opts: &TrainOptions,
    epoch: usize,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<f64> {
    let context = model.spec.context;
    let horizon = model.spec.horizon;
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in refs.chunks(opts.batch) {
        let (mut input, target) = build_batch(dataset, chunk, context, horizon)?;
        if opts.self_input_depth > 0 {
            if let Some(r) = rng.as_deref_mut() {
                corrupt_batch(model, dataset, chunk, &mut input, opts.self_input_depth, r)?;
            }
        }
        let loss = run_batch(model, adam.as_deref_mut(), input, target, opts.teacher_forcing)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFinite { epoch });
        }
        total += loss * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(total / count.max(1) as f64)
}

/// Train `model` in place. Sequences are split train/validation before
/// sample indexing so no sequence contributes to both sides.
pub fn train<S: Scalar>(
    model: &mut Model<S>,
    dataset: &LoadedDataset,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    if opts.epochs == 0 || opts.batch == 0 {
        return Err(TrainError::InvalidArgument("epochs and batch must be positive".into()));
    }
    if !(0.0..1.0).contains(&opts.val_fraction) {
        return Err(TrainError::InvalidArgument("val_fraction must be in [0, 1)".into()));
    }
    let expected = if model.spec.context { 3 * PATCH } else { PATCH };
    if model.spec.extent != expected {
        return Err(TrainError::InvalidArgument(format!(
            "model extent {} does not match the {expected} sample windows",
            model.spec.extent
        )));
    }
    if dataset.sequences.is_empty() {
        return Err(TrainError::InvalidArgument("dataset holds no sequences".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut seq_ids: Vec<usize> = (0..dataset.sequences.len()).collect();
    seq_ids.shuffle(&mut rng);
    let n_val = ((dataset.sequences.len() as f64 * opts.val_fraction).round() as usize)
        .min(dataset.sequences.len() - 1);
    let (val_ids, train_ids) = seq_ids.split_at(n_val);

    let mut train_refs = build_index(dataset, train_ids, model.spec.horizon, opts.static_keep, &mut rng)?;
    let mut val_refs = build_index(dataset, val_ids, model.spec.horizon, 1.0, &mut rng)?;
    if opts.val_samples > 0 && val_refs.len() > opts.val_samples {
        val_refs.shuffle(&mut rng);
        val_refs.truncate(opts.val_samples);
    }
    if train_refs.is_empty() {
        return Err(TrainError::InvalidArgument("no usable training samples".into()));
    }

    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| io_ctx(dir, e))?;
        let path = dir.join("loss.csv");
        std::fs::write(&path, "epoch,train_loss,val_loss,seconds\n").map_err(|e| io_ctx(&path, e))?;
    }

    let sizes: Vec<usize> = model.params.iter().map(|(_, t)| t.numel()).collect();
    let mut adam = AdamState::<S>::new(opts.lr, &sizes);
    let mut report = TrainReport::default();

    for epoch in 1..=opts.epochs {
        let start = Instant::now();
        train_refs.shuffle(&mut rng);
        let take = if opts.samples_per_epoch > 0 {
            opts.samples_per_epoch.min(train_refs.len())
        } else {
            train_refs.len()
        };
        let train_loss =
            mean_loss(model, Some(&mut adam), dataset, &train_refs[..take], opts, epoch, Some(&mut rng))?;
        let val_loss = if val_refs.is_empty() {
            None
        } else {
            // Validation always scores ground-truth inputs.
            Some(mean_loss(model, None, dataset, &val_refs, opts, epoch, None)?)
        };
        let seconds = start.elapsed().as_secs_f64();
        if let Some(dir) = &opts.out_dir {
            let path = dir.join("loss.csv");
            let line = format!(
                "{epoch},{train_loss},{},{seconds:.1}\n",
                val_loss.map(|v| v.to_string()).unwrap_or_default()
            );
            let mut text = std::fs::read_to_string(&path).map_err(|e| io_ctx(&path, e))?;
            text.push_str(&line);
            std::fs::write(&path, text).map_err(|e| io_ctx(&path, e))?;
            model.save(&dir.join("model.bfw"))?;
        }
        report.stats.push(EpochStats { epoch, train_loss, val_loss, seconds });
    }
    Ok(report)
}
