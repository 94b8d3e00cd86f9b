//! The four predictor architectures, built as graph programs over named
//! parameter tensors, plus weight-file save/load.
//!
//! Input is always a [N, T, E, E] stack of T=4 consecutive frames; output is
//! [N, K, O, O] with values in [0,1]. With `context` the input extent E is
//! 96 and the prediction covers only the center 32x32 (O = E/3); otherwise
//! O = E.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

use crate::data::T_IN;
use crate::graph::{gru_step, Act, Graph, GruGates, NodeId};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};

const WEIGHT_MAGIC: &[u8; 4] = b"BFW1";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("weight file {path}: {reason}")]
    BadWeights { path: String, reason: String },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    RnnEd,
    ConvRnnEd,
    FullyConv,
    MultiScale,
}

impl std::str::FromStr for Arch {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rnn_ed" => Ok(Arch::RnnEd),
            "conv_rnn_ed" => Ok(Arch::ConvRnnEd),
            "fully_conv" => Ok(Arch::FullyConv),
            "multi_scale" => Ok(Arch::MultiScale),
            other => Err(ModelError::InvalidSpec(format!("unknown architecture {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Emit all K horizons in one pass.
    Seq2Seq,
    /// Emit one frame per pass; longer horizons come from feeding
    /// predictions back in.
    Recursive,
}

impl std::str::FromStr for Mode {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seq2seq" => Ok(Mode::Seq2Seq),
            "recursive" => Ok(Mode::Recursive),
            other => Err(ModelError::InvalidSpec(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    pub mode: Mode,
    /// Inputs carry the 3x3 patch neighbourhood; prediction covers the
    /// center patch only.
    pub context: bool,
    /// Input spatial extent E.
    pub extent: usize,
    /// Output horizon K (frames predicted per pass).
    pub horizon: usize,
    /// GRU state size; ignored by the purely convolutional architectures.
    pub hidden: usize,
}

impl ModelSpec {
    pub fn new(arch: Arch, mode: Mode, context: bool, extent: usize, horizon: usize) -> Result<Self> {
        let hidden = match arch {
            Arch::RnnEd => 1024,
            Arch::ConvRnnEd => 512,
            _ => 0,
        };
        let spec = ModelSpec { arch, mode, context, extent, horizon, hidden };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_hidden(mut self, hidden: usize) -> Result<Self> {
        self.hidden = hidden;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.extent, 16 | 32 | 96) {
            return Err(ModelError::InvalidSpec(format!(
                "extent must be 16, 32 or 96, got {}",
                self.extent
            )));
        }
        if self.context && self.extent != 96 {
            return Err(ModelError::InvalidSpec(
                "context input requires extent 96 (3x3 patch neighbourhood)".into(),
            ));
        }
        if self.horizon == 0 {
            return Err(ModelError::InvalidSpec("horizon must be >= 1".into()));
        }
        if self.mode == Mode::Recursive && self.horizon != 1 {
            return Err(ModelError::InvalidSpec(format!(
                "recursive mode emits one frame per pass, horizon must be 1 (got {})",
                self.horizon
            )));
        }
        if self.arch == Arch::MultiScale && self.extent % 8 != 0 {
            return Err(ModelError::InvalidSpec(format!(
                "multi_scale needs an extent divisible by 8, got {}",
                self.extent
            )));
        }
        if matches!(self.arch, Arch::RnnEd | Arch::ConvRnnEd) && self.hidden == 0 {
            return Err(ModelError::InvalidSpec("recurrent architectures need hidden > 0".into()));
        }
        Ok(())
    }

    /// Output spatial extent O.
    pub fn out_extent(&self) -> usize {
        if self.context {
            self.extent / 3
        } else {
            self.extent
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model<S: Scalar> {
    pub spec: ModelSpec,
    /// Named tensors in a fixed registration order.
    pub params: Vec<(String, Tensor<S>)>,
}

/// One forward pass: the output node plus the graph nodes of every
/// parameter, aligned with `Model::params`, so callers can read gradients.
pub struct Forward {
    pub output: NodeId,
    pub param_nodes: Vec<NodeId>,
}

fn glorot<S: Scalar>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor<S> {
    Tensor::uniform(shape, (6.0 / (fan_in + fan_out) as f64).sqrt(), rng)
}

struct ParamBuilder<S: Scalar> {
    rng: ChaCha8Rng,
    params: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> ParamBuilder<S> {
    fn conv(&mut self, name: &str, f: usize, c: usize, k: usize) {
        let kernel = glorot(&[f, c, k, k], c * k * k, f * k * k, &mut self.rng);
        self.params.push((format!("{name}.k"), kernel));
        self.params.push((format!("{name}.b"), Tensor::zeros(&[f])));
    }

    fn dense(&mut self, name: &str, d: usize, m: usize) {
        let w = glorot(&[d, m], d, m, &mut self.rng);
        self.params.push((format!("{name}.w"), w));
        self.params.push((format!("{name}.b"), Tensor::zeros(&[m])));
    }

    /// Z-R-C gate triplet of one GRU: input maps W get Glorot init, the
    /// recurrent maps U get +-sqrt(1/H).
    fn gru(&mut self, prefix: &str, input_dim: usize, hidden: usize) {
        for gate in ["z", "r", "c"] {
            let w = glorot(&[input_dim, hidden], input_dim, hidden, &mut self.rng);
            let u = Tensor::uniform(&[hidden, hidden], (1.0 / hidden as f64).sqrt(), &mut self.rng);
            self.params.push((format!("{prefix}.w{gate}"), w));
            self.params.push((format!("{prefix}.u{gate}"), u));
            self.params.push((format!("{prefix}.b{gate}"), Tensor::zeros(&[hidden])));
        }
    }
}

/// Parameter nodes of one forward pass, addressable by name.
struct Bound {
    ids: Vec<NodeId>,
    index: HashMap<String, usize>,
}

impl Bound {
    fn get(&self, name: &str) -> NodeId {
        self.ids[*self.index.get(name).unwrap_or_else(|| panic!("unbound param {name}"))]
    }

    fn gates(&self, prefix: &str) -> GruGates {
        GruGates {
            wz: self.get(&format!("{prefix}.wz")),
            uz: self.get(&format!("{prefix}.uz")),
            bz: self.get(&format!("{prefix}.bz")),
            wr: self.get(&format!("{prefix}.wr")),
            ur: self.get(&format!("{prefix}.ur")),
            br: self.get(&format!("{prefix}.br")),
            wc: self.get(&format!("{prefix}.wc")),
            uc: self.get(&format!("{prefix}.uc")),
            bc: self.get(&format!("{prefix}.bc")),
        }
    }
}

impl<S: Scalar> Model<S> {
    /// Deterministic initialization from a seed.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut b = ParamBuilder::<S> { rng: ChaCha8Rng::seed_from_u64(seed), params: Vec::new() };
        let (e, o, h, k) = (spec.extent, spec.out_extent(), spec.hidden, spec.horizon);
        match spec.arch {
            Arch::RnnEd => {
                b.gru("enc", e * e, h);
                b.gru("dec", o * o, h);
                b.dense("head", h, o * o);
            }
            Arch::ConvRnnEd => {
                b.conv("enc.conv1", 16, 1, 5);
                b.conv("enc.conv2", 32, 16, 3);
                b.gru("enc", 32 * (e / 4) * (e / 4), h);
                b.gru("dec", 32 * (o / 4) * (o / 4), h);
                b.dense("head", h, 32 * (o / 4) * (o / 4));
                b.conv("dec.conv1", 16, 32, 3);
                b.conv("dec.conv2", 1, 16, 3);
            }
            Arch::FullyConv => {
                b.conv("conv1", 32, T_IN, 5);
                b.conv("conv2", 64, 32, 3);
                b.conv("conv3", 128, 64, 3);
                b.conv("conv4", 64, 128, 3);
                b.conv("conv5", 32, 64, 3);
                b.conv("conv6", k, 32, 3);
            }
            Arch::MultiScale => {
                for s in 0..4 {
                    b.conv(&format!("scale{s}.conv1"), 32, T_IN + k, 5);
                    b.conv(&format!("scale{s}.conv2"), 64, 32, 3);
                    b.conv(&format!("scale{s}.conv3"), 64, 64, 3);
                    b.conv(&format!("scale{s}.conv4"), 32, 64, 3);
                    b.conv(&format!("scale{s}.conv5"), k, 32, 3);
                }
            }
        }
        // Boundary targets are sparse; starting the emission layer at 0.5
        // everywhere makes the first optimizer steps slam the output
        // activation into its all-zero corner, where gradients vanish.
        // Biasing it toward the foreground prior avoids the collapse.
        let emission: &[String] = &match spec.arch {
            Arch::RnnEd => vec!["head.b".to_string()],
            Arch::ConvRnnEd => vec!["dec.conv2.b".to_string()],
            Arch::FullyConv => vec!["conv6.b".to_string()],
            Arch::MultiScale => (0..4).map(|s| format!("scale{s}.conv5.b")).collect(),
        };
        for (name, t) in &mut b.params {
            if emission.contains(name) {
                t.data_mut().fill(S::from_f64(-2.0));
            }
        }
        Ok(Model { spec, params: b.params })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    fn bind(&self, g: &mut Graph<S>) -> Bound {
        let mut index = HashMap::new();
        let mut ids = Vec::with_capacity(self.params.len());
        for (i, (name, t)) in self.params.iter().enumerate() {
            index.insert(name.clone(), i);
            ids.push(g.param(t.clone()));
        }
        Bound { ids, index }
    }

    /// Build the forward computation for `input` of shape [N, T, E, E].
    pub fn forward(&self, g: &mut Graph<S>, input: NodeId) -> Result<Forward> {
        self.forward_with(g, input, None)
    }

    /// [`Model::forward`] with optional teacher forcing: when `teacher`
    /// (shape [N, K, O, O]) is given, the recurrent decoders consume ground
    /// truth frames instead of their own emissions. Ignored by the
    /// single-pass convolutional architectures.
    pub fn forward_with(&self, g: &mut Graph<S>, input: NodeId, teacher: Option<NodeId>) -> Result<Forward> {
        let shape = g.value(input).shape().to_vec();
        let (spec, e) = (&self.spec, self.spec.extent);
        if shape.len() != 4 || shape[1] != T_IN || shape[2] != e || shape[3] != e {
            return Err(ModelError::InvalidSpec(format!(
                "forward input must be [N, {T_IN}, {e}, {e}], got {shape:?}"
            )));
        }
        let n = shape[0];
        let bound = self.bind(g);
        let output = match spec.arch {
            Arch::RnnEd => self.fwd_rnn_ed(g, input, n, &bound, teacher)?,
            Arch::ConvRnnEd => self.fwd_conv_rnn_ed(g, input, n, &bound, teacher)?,
            Arch::FullyConv => self.fwd_fully_conv(g, input, &bound)?,
            Arch::MultiScale => self.fwd_multi_scale(g, input, n, &bound)?,
        };
        Ok(Forward { output, param_nodes: bound.ids })
    }

    /// Last input frame as a [N, 1, O, O] node: the first decoder input.
    fn last_frame_cropped(&self, g: &mut Graph<S>, input: NodeId) -> Result<NodeId> {
        let o = self.spec.out_extent();
        let last = g.slice_c(input, T_IN - 1, 1)?;
        Ok(g.crop_center(last, o, o)?)
    }

    fn fwd_rnn_ed(
        &self,
        g: &mut Graph<S>,
        input: NodeId,
        n: usize,
        p: &Bound,
        teacher: Option<NodeId>,
    ) -> Result<NodeId> {
        let (e, o, h, k) = (self.spec.extent, self.spec.out_extent(), self.spec.hidden, self.spec.horizon);
        let (enc, dec) = (p.gates("enc"), p.gates("dec"));
        let mut state = g.input(Tensor::zeros(&[n, h]));
        for t in 0..T_IN {
            let frame = g.slice_c(input, t, 1)?;
            let flat = g.reshape(frame, &[n, e * e])?;
            state = gru_step(g, flat, state, &enc)?;
        }
        let first = self.last_frame_cropped(g, input)?;
        let mut dec_in = g.reshape(first, &[n, o * o])?;
        let mut frames = Vec::with_capacity(k);
        for step in 0..k {
            state = gru_step(g, dec_in, state, &dec)?;
            let logits = g.dense(state, p.get("head.w"), p.get("head.b"))?;
            let y = g.activation(logits, Act::Sigmoid);
            frames.push(g.reshape(y, &[n, 1, o, o])?);
            dec_in = match teacher {
                Some(t) if step + 1 < k => {
                    let gt = g.slice_c(t, step, 1)?;
                    g.reshape(gt, &[n, o * o])?
                }
                _ => y,
            };
        }
        concat_frames(g, &frames)
    }

    fn fwd_conv_rnn_ed(
        &self,
        g: &mut Graph<S>,
        input: NodeId,
        n: usize,
        p: &Bound,
        teacher: Option<NodeId>,
    ) -> Result<NodeId> {
        let (o, h, k) = (self.spec.out_extent(), self.spec.hidden, self.spec.horizon);
        // shared conv encoder, applied per frame at either extent
        let encode = |g: &mut Graph<S>, frame: NodeId, ext: usize| -> Result<NodeId> {
            let c1 = g.conv2d(frame, p.get("enc.conv1.k"), p.get("enc.conv1.b"), 1, 2)?;
            let a1 = g.activation(c1, Act::Relu);
            let p1 = g.max_pool2d(a1, 2)?;
            let c2 = g.conv2d(p1, p.get("enc.conv2.k"), p.get("enc.conv2.b"), 1, 1)?;
            let a2 = g.activation(c2, Act::Relu);
            let p2 = g.max_pool2d(a2, 2)?;
            Ok(g.reshape(p2, &[n, 32 * (ext / 4) * (ext / 4)])?)
        };
        let (enc, dec) = (p.gates("enc"), p.gates("dec"));
        let mut state = g.input(Tensor::zeros(&[n, h]));
        for t in 0..T_IN {
            let frame = g.slice_c(input, t, 1)?;
            let feat = encode(g, frame, self.spec.extent)?;
            state = gru_step(g, feat, state, &enc)?;
        }
        let mut dec_frame = self.last_frame_cropped(g, input)?;
        let mut frames = Vec::with_capacity(k);
        for step in 0..k {
            let feat = encode(g, dec_frame, o)?;
            state = gru_step(g, feat, state, &dec)?;
            let u = g.dense(state, p.get("head.w"), p.get("head.b"))?;
            let grid = g.reshape(u, &[n, 32, o / 4, o / 4])?;
            let u1 = g.upsample_nearest(grid, 2)?;
            let c1 = g.conv2d(u1, p.get("dec.conv1.k"), p.get("dec.conv1.b"), 1, 1)?;
            let a1 = g.activation(c1, Act::Relu);
            let u2 = g.upsample_nearest(a1, 2)?;
            let c2 = g.conv2d(u2, p.get("dec.conv2.k"), p.get("dec.conv2.b"), 1, 1)?;
            let y = g.activation(c2, Act::Sigmoid);
            frames.push(y);
            dec_frame = match teacher {
                Some(t) if step + 1 < k => g.slice_c(t, step, 1)?,
                _ => y,
            };
        }
        concat_frames(g, &frames)
    }

    fn fwd_fully_conv(&self, g: &mut Graph<S>, input: NodeId, p: &Bound) -> Result<NodeId> {
        let conv_relu = |g: &mut Graph<S>, x: NodeId, name: &str| -> Result<NodeId> {
            let c = g.conv2d(x, p.get(&format!("{name}.k")), p.get(&format!("{name}.b")), 1, pad_of(p, name))?;
            Ok(g.activation(c, Act::Relu))
        };
        let c1 = conv_relu(g, input, "conv1")?;
        let p1 = g.max_pool2d(c1, 2)?;
        let c2 = conv_relu(g, p1, "conv2")?;
        let p2 = g.max_pool2d(c2, 2)?;
        let c3 = conv_relu(g, p2, "conv3")?;
        let u1 = g.upsample_nearest(c3, 2)?;
        let c4 = conv_relu(g, u1, "conv4")?;
        let u2 = g.upsample_nearest(c4, 2)?;
        let c5 = conv_relu(g, u2, "conv5")?;
        let c6 = g.conv2d(c5, p.get("conv6.k"), p.get("conv6.b"), 1, 1)?;
        let y = g.activation(c6, Act::Sigmoid);
        self.maybe_crop(g, y)
    }

    fn fwd_multi_scale(&self, g: &mut Graph<S>, input: NodeId, n: usize, p: &Bound) -> Result<NodeId> {
        let (e, k) = (self.spec.extent, self.spec.horizon);
        let mut cand = g.input(Tensor::zeros(&[n, k, e / 8, e / 8]));
        let mut out = cand;
        for s in 0..4 {
            let ext = e >> (3 - s);
            let xin = if ext == e { input } else { g.avg_pool2d(input, e / ext)? };
            let z = g.concat_c(xin, cand)?;
            let mut x = z;
            for (i, pad) in [(1usize, 2usize), (2, 1), (3, 1), (4, 1)] {
                let name = format!("scale{s}.conv{i}");
                let c = g.conv2d(x, p.get(&format!("{name}.k")), p.get(&format!("{name}.b")), 1, pad)?;
                x = g.activation(c, Act::Relu);
            }
            let name = format!("scale{s}.conv5");
            let c = g.conv2d(x, p.get(&format!("{name}.k")), p.get(&format!("{name}.b")), 1, 1)?;
            let t = g.activation(c, Act::Tanh);
            out = g.affine(t, S::from_f64(0.5), S::from_f64(0.5));
            if s < 3 {
                cand = g.upsample_nearest(out, 2)?;
            }
        }
        self.maybe_crop(g, out)
    }

    fn maybe_crop(&self, g: &mut Graph<S>, y: NodeId) -> Result<NodeId> {
        if self.spec.context {
            let o = self.spec.out_extent();
            Ok(g.crop_center(y, o, o)?)
        } else {
            Ok(y)
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |e: std::io::Error| ModelError::Io { path: path.display().to_string(), source: e };
        let json = serde_json::to_vec(&self.spec)
            .map_err(|e| ModelError::Json { path: path.display().to_string(), source: e })?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        f.write_all(&(json.len() as u32).to_le_bytes()).map_err(io)?;
        f.write_all(&json).map_err(io)?;
        f.write_all(WEIGHT_MAGIC).map_err(io)?;
        f.write_all(&(self.params.len() as u32).to_le_bytes()).map_err(io)?;
        for (name, t) in &self.params {
            f.write_all(&(name.len() as u16).to_le_bytes()).map_err(io)?;
            f.write_all(name.as_bytes()).map_err(io)?;
            f.write_all(&[t.shape().len() as u8]).map_err(io)?;
            for &d in t.shape() {
                f.write_all(&(d as u32).to_le_bytes()).map_err(io)?;
            }
            for &v in t.data() {
                f.write_all(&(Scalar::to_f64(v) as f32).to_le_bytes()).map_err(io)?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let io = |e: std::io::Error| ModelError::Io { path: path.display().to_string(), source: e };
        let bad = |reason: &str| ModelError::BadWeights {
            path: path.display().to_string(),
            reason: reason.to_string(),
        };
        let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(io)?);
        let mut u32buf = [0u8; 4];
        f.read_exact(&mut u32buf).map_err(io)?;
        let mut json = vec![0u8; u32::from_le_bytes(u32buf) as usize];
        f.read_exact(&mut json).map_err(io)?;
        let spec: ModelSpec = serde_json::from_slice(&json)
            .map_err(|e| ModelError::Json { path: path.display().to_string(), source: e })?;
        spec.validate()?;
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic).map_err(io)?;
        if &magic != WEIGHT_MAGIC {
            return Err(bad("bad magic, not a weight file"));
        }
        f.read_exact(&mut u32buf).map_err(io)?;
        let count = u32::from_le_bytes(u32buf) as usize;

        // read into a fresh model of the declared spec, so names and shapes
        // are verified against the architecture
        let mut model = Model::<S>::build(spec, 0)?;
        if count != model.params.len() {
            return Err(bad(&format!(
                "tensor count {count} does not match the architecture ({} expected)",
                model.params.len()
            )));
        }
        let mut seen = vec![false; count];
        for _ in 0..count {
            let mut u16buf = [0u8; 2];
            f.read_exact(&mut u16buf).map_err(io)?;
            let mut name = vec![0u8; u16::from_le_bytes(u16buf) as usize];
            f.read_exact(&mut name).map_err(io)?;
            let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
            let mut rank = [0u8; 1];
            f.read_exact(&mut rank).map_err(io)?;
            let mut shape = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                f.read_exact(&mut u32buf).map_err(io)?;
                shape.push(u32::from_le_bytes(u32buf) as usize);
            }
            let idx = model
                .params
                .iter()
                .position(|(n, _)| n == &name)
                .ok_or_else(|| bad(&format!("unexpected tensor {name:?}")))?;
            if seen[idx] {
                return Err(bad(&format!("duplicate tensor {name:?}")));
            }
            seen[idx] = true;
            if model.params[idx].1.shape() != shape.as_slice() {
                return Err(bad(&format!(
                    "tensor {name:?} is {shape:?}, architecture expects {:?}",
                    model.params[idx].1.shape()
                )));
            }
            let numel: usize = shape.iter().product();
            let mut raw = vec![0u8; numel * 4];
            f.read_exact(&mut raw).map_err(io)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| S::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect();
            model.params[idx].1 = Tensor::from_vec(&shape, data)?;
        }
        Ok(model)
    }
}

fn pad_of(_p: &Bound, name: &str) -> usize {
    if name == "conv1" {
        2 // 5x5 kernel
    } else {
        1 // 3x3 kernels
    }
}

fn concat_frames<S: Scalar>(g: &mut Graph<S>, frames: &[NodeId]) -> Result<NodeId> {
    let mut out = frames[0];
    for &f in &frames[1..] {
        out = g.concat_c(out, f)?;
    }
    Ok(out)
}
