//! Patch pipeline: frame sequences in, (input window, target frames) patch
//! samples out, and the inverse stitch.
//!
//! Patches are 32x32; the context window is the 3x3 patch neighbourhood
//! (96x96). Inputs are the newest frame plus three past frames (T = 4);
//! targets are the K frames after the newest input, over the same spatial
//! extent as the input.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use thiserror::Error;

use crate::pgm;
use crate::sim::{BoundaryFrame, Manifest};

pub const PATCH: usize = 32;
pub const T_IN: usize = 4;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{source_id}: sequence has {len} frames, need at least {min}")]
    TooShort { source_id: String, len: usize, min: usize },
    #[error("{source_id}: frame {index} is {got_h}x{got_w}, expected {h}x{w}")]
    InconsistentExtents { source_id: String, index: usize, h: usize, w: usize, got_h: usize, got_w: usize },
    #[error("{dir}: missing frame index {index} (found {found} frames)")]
    MissingFrame { dir: String, index: usize, found: usize },
    #[error("frame extents {h}x{w} below the {patch} px patch size")]
    ExtentTooSmall { h: usize, w: usize, patch: usize },
    #[error("stitch: expected {expected} cell patches of {len} values, got {got}")]
    BadStitchInput { expected: usize, len: usize, got: String },
    #[error("train/test lists overlap on {0:?}")]
    SplitOverlap(String),
    #[error("split entry {0:?} not present in the manifest")]
    SplitUnknown(String),
    #[error(transparent)]
    Pgm(#[from] pgm::PgmError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Ordered boundary frames sharing one spatial extent.
#[derive(Debug, Clone)]
pub struct FrameSequence {
    pub frames: Vec<BoundaryFrame>,
    pub source_id: String,
}

impl FrameSequence {
    pub fn new(frames: Vec<BoundaryFrame>, source_id: String) -> Result<Self> {
        if frames.len() < T_IN + 1 {
            return Err(DataError::TooShort { source_id, len: frames.len(), min: T_IN + 1 });
        }
        let (h, w) = (frames[0].height, frames[0].width);
        for (i, f) in frames.iter().enumerate() {
            if f.height != h || f.width != w {
                return Err(DataError::InconsistentExtents {
                    source_id: source_id.clone(),
                    index: i,
                    h,
                    w,
                    got_h: f.height,
                    got_w: f.width,
                });
            }
        }
        Ok(FrameSequence { frames, source_id })
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Load `frame_0000.pgm ...` from a sequence directory; 8-bit pixels map to
/// [0,1] by /255 and frames are ordered by filename index.
pub fn load_sequence(dir: &Path) -> Result<FrameSequence> {
    let mut indices: Vec<usize> = Vec::new();
    let entries = std::fs::read_dir(dir)
        .map_err(|e| DataError::Io { path: dir.display().to_string(), source: e })?;
    for entry in entries {
        let entry = entry.map_err(|e| DataError::Io { path: dir.display().to_string(), source: e })?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(num) = name.strip_prefix("frame_").and_then(|s| s.strip_suffix(".pgm")) {
            if let Ok(i) = num.parse::<usize>() {
                indices.push(i);
            }
        }
    }
    indices.sort_unstable();
    for (want, &got) in indices.iter().enumerate() {
        if want != got {
            return Err(DataError::MissingFrame {
                dir: dir.display().to_string(),
                index: want,
                found: indices.len(),
            });
        }
    }
    let frames = indices
        .iter()
        .map(|i| Ok(BoundaryFrame::from_gray(&pgm::read_pgm(&dir.join(format!("frame_{i:04}.pgm")))?)))
        .collect::<Result<Vec<_>>>()?;
    FrameSequence::new(frames, dir.display().to_string())
}

pub fn save_sequence(dir: &Path, seq: &FrameSequence) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| DataError::Io { path: dir.display().to_string(), source: e })?;
    for (i, f) in seq.frames.iter().enumerate() {
        pgm::write_pgm(&dir.join(format!("frame_{i:04}.pgm")), &f.to_gray())?;
    }
    Ok(())
}

/// 32 px patch tiling of a frame; extents that are not multiples of 32 are
/// zero-padded on the right/bottom.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub frame_h: usize,
    pub frame_w: usize,
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn padded_h(&self) -> usize {
        self.rows * PATCH
    }

    pub fn padded_w(&self) -> usize {
        self.cols * PATCH
    }
}

pub fn make_grid(frame_h: usize, frame_w: usize) -> Result<PatchGrid> {
    if frame_h < PATCH || frame_w < PATCH {
        return Err(DataError::ExtentTooSmall { h: frame_h, w: frame_w, patch: PATCH });
    }
    Ok(PatchGrid {
        frame_h,
        frame_w,
        rows: frame_h.div_ceil(PATCH),
        cols: frame_w.div_ceil(PATCH),
    })
}

/// One training pair: T input frames and K target frames over one spatial
/// window (32x32, or 96x96 when `context` was requested).
#[derive(Debug, Clone)]
pub struct PatchSample {
    /// T_IN frames, oldest first, each `extent * extent` values.
    pub input: Vec<Vec<f32>>,
    /// K frames at horizons t+1..t+K over the same extent.
    pub target: Vec<Vec<f32>>,
    pub extent: usize,
    pub row: usize,
    pub col: usize,
    /// Index of the newest input frame within the sequence.
    pub t: usize,
    pub sequence_id: String,
}

/// Copy the spatial window of grid cell (row, col) out of a frame,
/// zero-filling anything outside the frame. `context` widens the window to
/// the 3x3 patch neighbourhood.
pub fn extract_window(frame: &BoundaryFrame, row: usize, col: usize, context: bool) -> Vec<f32> {
    let extent = if context { 3 * PATCH } else { PATCH };
    let off = if context { PATCH as isize } else { 0 };
    let y0 = (row * PATCH) as isize - off;
    let x0 = (col * PATCH) as isize - off;
    let mut out = vec![0.0f32; extent * extent];
    for y in 0..extent {
        let sy = y0 + y as isize;
        if sy < 0 || sy >= frame.height as isize {
            continue;
        }
        for x in 0..extent {
            let sx = x0 + x as isize;
            if sx >= 0 && sx < frame.width as isize {
                out[y * extent + x] = frame.values[sy as usize * frame.width + sx as usize];
            }
        }
    }
    out
}

/// All (cell, t) samples of a sequence: inputs are frames t-3..t, targets
/// t+1..t+K. For stride 1 the count is `cells * max(0, L - 3 - K)`; a
/// sequence too short for any full sample yields none.
pub fn extract_samples(
    seq: &FrameSequence,
    grid: &PatchGrid,
    context: bool,
    horizon_k: usize,
    stride_t: usize,
) -> Vec<PatchSample> {
    let extent = if context { 3 * PATCH } else { PATCH };
    let mut samples = Vec::new();
    let mut t = T_IN - 1;
    while t + horizon_k < seq.len() {
        for row in 0..grid.rows {
            for col in 0..grid.cols {
                let input = (0..T_IN)
                    .map(|i| extract_window(&seq.frames[t + 1 - T_IN + i], row, col, context))
                    .collect();
                let target = (1..=horizon_k)
                    .map(|k| extract_window(&seq.frames[t + k], row, col, context))
                    .collect();
                samples.push(PatchSample {
                    input,
                    target,
                    extent,
                    row,
                    col,
                    t,
                    sequence_id: seq.source_id.clone(),
                });
            }
        }
        t += stride_t;
    }
    samples
}

/// Center 32x32 crop of a 96x96 context window.
pub fn center_crop(window: &[f32], extent: usize) -> Vec<f32> {
    debug_assert_eq!(window.len(), extent * extent);
    if extent == PATCH {
        return window.to_vec();
    }
    let mut out = vec![0.0f32; PATCH * PATCH];
    for y in 0..PATCH {
        let src = (y + PATCH) * extent + PATCH;
        out[y * PATCH..(y + 1) * PATCH].copy_from_slice(&window[src..src + PATCH]);
    }
    out
}

/// Tile one 32x32 patch per grid cell (row-major cell order) back into a
/// frame, cropping the padding.
pub fn stitch(patches: &[Vec<f32>], grid: &PatchGrid) -> Result<BoundaryFrame> {
    if patches.len() != grid.cells() || patches.iter().any(|p| p.len() != PATCH * PATCH) {
        return Err(DataError::BadStitchInput {
            expected: grid.cells(),
            len: PATCH * PATCH,
            got: format!(
                "{} patches with lengths {:?}",
                patches.len(),
                patches.iter().map(Vec::len).take(4).collect::<Vec<_>>()
            ),
        });
    }
    let mut frame = BoundaryFrame::zeros(grid.frame_h, grid.frame_w);
    for row in 0..grid.rows {
        for col in 0..grid.cols {
            let patch = &patches[row * grid.cols + col];
            for y in 0..PATCH {
                let fy = row * PATCH + y;
                if fy >= grid.frame_h {
                    break;
                }
                for x in 0..PATCH {
                    let fx = col * PATCH + x;
                    if fx >= grid.frame_w {
                        break;
                    }
                    frame.values[fy * grid.frame_w + fx] = patch[y * PATCH + x];
                }
            }
        }
    }
    Ok(frame)
}

/// Sequence-level train/test split (never patch-level).
pub enum SplitSpec {
    /// Fraction of sequences assigned to train, shuffled deterministically.
    Ratio(f64),
    /// Explicit directory lists; must be disjoint.
    Explicit { train: Vec<String>, test: Vec<String> },
}

pub fn split_train_test(manifest: &Manifest, spec: &SplitSpec, seed: u64) -> Result<(Manifest, Manifest)> {
    match spec {
        SplitSpec::Ratio(ratio) => {
            let mut order: Vec<usize> = (0..manifest.sequences.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            order.shuffle(&mut rng);
            let n_train = (manifest.sequences.len() as f64 * ratio).round() as usize;
            let mut train = Manifest::default();
            let mut test = Manifest::default();
            for (i, &idx) in order.iter().enumerate() {
                if i < n_train {
                    train.sequences.push(manifest.sequences[idx].clone());
                } else {
                    test.sequences.push(manifest.sequences[idx].clone());
                }
            }
            Ok((train, test))
        }
        SplitSpec::Explicit { train, test } => {
            for d in train {
                if test.contains(d) {
                    return Err(DataError::SplitOverlap(d.clone()));
                }
            }
            let pick = |names: &[String]| -> Result<Manifest> {
                let mut m = Manifest::default();
                for name in names {
                    let entry = manifest
                        .sequences
                        .iter()
                        .find(|e| &e.dir == name)
                        .ok_or_else(|| DataError::SplitUnknown(name.clone()))?;
                    m.sequences.push(entry.clone());
                }
                Ok(m)
            };
            Ok((pick(train)?, pick(test)?))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn frame_with(h: usize, w: usize, f: impl Fn(usize, usize) -> f32) -> BoundaryFrame {
        let mut fr = BoundaryFrame::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                fr.values[y * w + x] = f(y, x);
            }
        }
        fr
    }

    fn const_seq(len: usize, h: usize, w: usize) -> FrameSequence {
        let frames = (0..len).map(|i| frame_with(h, w, |_, _| i as f32 * 0.1)).collect();
        FrameSequence::new(frames, "test".into()).unwrap()
    }

    #[test]
    fn grid_exact_multiple() {
        let g = make_grid(96, 96).unwrap();
        assert_eq!((g.rows, g.cols), (3, 3));
        assert_eq!((g.padded_h(), g.padded_w()), (96, 96));
    }

    #[test]
    fn grid_pads_up() {
        let g = make_grid(100, 70).unwrap();
        assert_eq!((g.rows, g.cols), (4, 3));
        assert_eq!((g.padded_h(), g.padded_w()), (128, 96));
    }

    #[test]
    fn grid_rejects_small_extents() {
        assert!(make_grid(31, 96).is_err());
        assert!(make_grid(96, 10).is_err());
    }

    #[test]
    fn sequence_needs_five_frames() {
        let frames = vec![BoundaryFrame::zeros(32, 32); 4];
        assert!(FrameSequence::new(frames, "x".into()).is_err());
        let frames = vec![BoundaryFrame::zeros(32, 32); 5];
        assert!(FrameSequence::new(frames, "x".into()).is_ok());
    }

    #[test]
    fn sequence_rejects_mixed_extents() {
        let mut frames = vec![BoundaryFrame::zeros(32, 32); 5];
        frames[3] = BoundaryFrame::zeros(32, 64);
        assert!(FrameSequence::new(frames, "x".into()).is_err());
    }

    // count = cells * max(0, L - 3 - K) at stride 1
    #[test]
    fn sample_count_formula() {
        for (len, h, w, k) in [(10, 96, 96, 1), (10, 96, 96, 5), (5, 100, 70, 1), (20, 128, 128, 3)] {
            let seq = const_seq(len, h, w);
            let grid = make_grid(h, w).unwrap();
            let expect = grid.cells() * len.saturating_sub(3 + k);
            assert_eq!(extract_samples(&seq, &grid, false, k, 1).len(), expect, "L={len} K={k}");
        }
    }

    #[test]
    fn too_short_for_horizon_yields_no_samples() {
        let seq = const_seq(10, 96, 96);
        let grid = make_grid(96, 96).unwrap();
        assert!(extract_samples(&seq, &grid, false, 7, 1).is_empty());
    }

    #[test]
    fn temporal_alignment() {
        // frame i is constant i*0.1, so sample frames identify their indices
        let seq = const_seq(12, 96, 96);
        let grid = make_grid(96, 96).unwrap();
        for s in extract_samples(&seq, &grid, false, 2, 1) {
            for (i, f) in s.input.iter().enumerate() {
                assert_eq!(f[0], (s.t + 1 - T_IN + i) as f32 * 0.1);
            }
            for (k, f) in s.target.iter().enumerate() {
                assert_eq!(f[0], (s.t + 1 + k) as f32 * 0.1);
            }
        }
    }

    #[test]
    fn window_matches_frame_region() {
        let frame = frame_with(96, 96, |y, x| (y * 96 + x) as f32);
        let w = extract_window(&frame, 1, 2, false);
        for y in 0..PATCH {
            for x in 0..PATCH {
                assert_eq!(w[y * PATCH + x], ((y + 32) * 96 + (x + 64)) as f32);
            }
        }
    }

    #[test]
    fn context_center_equals_plain_window() {
        let frame = frame_with(100, 70, |y, x| (y * 70 + x) as f32);
        let grid = make_grid(100, 70).unwrap();
        for row in 0..grid.rows {
            for col in 0..grid.cols {
                let plain = extract_window(&frame, row, col, false);
                let ctx = extract_window(&frame, row, col, true);
                assert_eq!(center_crop(&ctx, 3 * PATCH), plain, "cell ({row},{col})");
            }
        }
    }

    #[test]
    fn context_zero_fills_outside_frame() {
        let frame = frame_with(96, 96, |_, _| 1.0);
        let ctx = extract_window(&frame, 0, 0, true);
        // top-left cell: rows/cols 0..32 of the context lie off-frame
        assert_eq!(ctx[0], 0.0);
        assert_eq!(ctx[31 * 96 + 31], 0.0);
        assert_eq!(ctx[32 * 96 + 32], 1.0);
        // bottom-right cell of the padded region past frame edge
        let edge = extract_window(&frame, 2, 2, true);
        assert_eq!(edge[95 * 96 + 95], 0.0);
        assert_eq!(edge[64 * 96 + 64], 0.0); // frame (96,96) is off-frame
        assert_eq!(edge[63 * 96 + 63], 1.0); // frame (95,95), last in-frame pixel
    }

    #[test]
    fn stitch_inverts_extraction() {
        let frame = frame_with(100, 70, |y, x| ((y * 131 + x * 17) % 251) as f32 / 250.0);
        let grid = make_grid(100, 70).unwrap();
        let patches: Vec<Vec<f32>> = (0..grid.rows)
            .flat_map(|r| (0..grid.cols).map(move |c| (r, c)))
            .map(|(r, c)| extract_window(&frame, r, c, false))
            .collect();
        let out = stitch(&patches, &grid).unwrap();
        assert_eq!(out, frame);
    }

    #[test]
    fn stitch_rejects_wrong_cell_count() {
        let grid = make_grid(96, 96).unwrap();
        let patches = vec![vec![0.0; PATCH * PATCH]; grid.cells() - 1];
        assert!(stitch(&patches, &grid).is_err());
        let patches = vec![vec![0.0; PATCH * PATCH - 1]; grid.cells()];
        assert!(stitch(&patches, &grid).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn stitch_round_trip(h in 32usize..130, w in 32usize..130, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut frame = BoundaryFrame::zeros(h, w);
            for v in frame.values.iter_mut() {
                *v = rng.gen::<f32>();
            }
            let grid = make_grid(h, w).unwrap();
            let patches: Vec<Vec<f32>> = (0..grid.rows)
                .flat_map(|r| (0..grid.cols).map(move |c| (r, c)))
                .map(|(r, c)| extract_window(&frame, r, c, false))
                .collect();
            prop_assert_eq!(stitch(&patches, &grid).unwrap(), frame);
        }
    }

    #[test]
    fn sequence_io_round_trip() {
        // pixel values k/255 are exactly representable through the 8-bit file
        let dir = tempfile::tempdir().unwrap();
        let frames: Vec<_> = (0..6)
            .map(|i| frame_with(40, 50, |y, x| ((y + x + i) % 256) as f32 / 255.0))
            .collect();
        let seq = FrameSequence::new(frames, "orig".into()).unwrap();
        save_sequence(dir.path(), &seq).unwrap();
        let back = load_sequence(dir.path()).unwrap();
        assert_eq!(back.len(), seq.len());
        for (a, b) in back.frames.iter().zip(&seq.frames) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn load_detects_missing_frame() {
        let dir = tempfile::tempdir().unwrap();
        let seq = const_seq(6, 40, 40);
        save_sequence(dir.path(), &seq).unwrap();
        std::fs::remove_file(dir.path().join("frame_0002.pgm")).unwrap();
        assert!(matches!(load_sequence(dir.path()), Err(DataError::MissingFrame { index: 2, .. })));
    }

    fn toy_manifest(n: usize) -> Manifest {
        let mut m = Manifest::default();
        for i in 0..n {
            m.sequences.push(crate::sim::ManifestEntry {
                dir: format!("seq_{i:05}"),
                n_balls: 1,
                side: 96,
                length: 50,
                seed: i as u64,
            });
        }
        m
    }

    #[test]
    fn ratio_split_partitions_sequences() {
        let m = toy_manifest(20);
        let (train, test) = split_train_test(&m, &SplitSpec::Ratio(0.75), 7).unwrap();
        assert_eq!(train.sequences.len(), 15);
        assert_eq!(test.sequences.len(), 5);
        let mut all: Vec<_> = train.sequences.iter().chain(&test.sequences).map(|e| e.dir.clone()).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 20);
        // deterministic under the same seed
        let (again, _) = split_train_test(&m, &SplitSpec::Ratio(0.75), 7).unwrap();
        let dirs = |m: &Manifest| m.sequences.iter().map(|e| e.dir.clone()).collect::<Vec<_>>();
        assert_eq!(dirs(&train), dirs(&again));
    }

    #[test]
    fn explicit_split_rejects_overlap_and_unknowns() {
        let m = toy_manifest(4);
        let overlap = SplitSpec::Explicit {
            train: vec!["seq_00000".into(), "seq_00001".into()],
            test: vec!["seq_00001".into()],
        };
        assert!(matches!(split_train_test(&m, &overlap, 0), Err(DataError::SplitOverlap(_))));
        let unknown = SplitSpec::Explicit {
            train: vec!["seq_00000".into()],
            test: vec!["seq_09999".into()],
        };
        assert!(matches!(split_train_test(&m, &unknown, 0), Err(DataError::SplitUnknown(_))));
        let ok = SplitSpec::Explicit {
            train: vec!["seq_00002".into(), "seq_00000".into()],
            test: vec!["seq_00001".into()],
        };
        let (train, test) = split_train_test(&m, &ok, 0).unwrap();
        assert_eq!(train.sequences[0].dir, "seq_00002");
        assert_eq!(test.sequences.len(), 1);
    }
}
