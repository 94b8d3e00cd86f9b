//! Reverse-mode automatic differentiation on an eager tape.
//!
//! Operations execute immediately and record themselves on the `Graph`;
//! `backward` walks the tape in reverse topological order (which is simply
//! reverse insertion order, since inputs always precede their consumers).

use crate::scalar::Scalar;
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    Relu,
    Tanh,
    Sigmoid,
}

#[derive(Debug)]
enum Op<S: Scalar> {
    Leaf { param: bool },
    Conv2d { stride: usize, pad: usize },
    MaxPool { argmax: Vec<usize> },
    AvgPool { k: usize },
    Upsample { k: usize },
    /// Spatial window [y0, y0+oh) x [x0, x0+ow) of an NCHW tensor.
    Crop { y0: usize, x0: usize },
    Dense,
    Matmul,
    Activation(Act),
    Add,
    Mul,
    /// y = a * x + b, elementwise with scalar coefficients.
    /// Only `a` matters for the backward pass.
    AffineScalar { a: S },
    Reshape,
    /// Concatenate two NCHW tensors along the channel axis.
    ConcatC,
    /// Take channels [start, start+len) of an NCHW tensor.
    SliceC { start: usize, len: usize },
    MseLoss,
}

struct Node<S: Scalar> {
    op: Op<S>,
    inputs: Vec<NodeId>,
    value: Tensor<S>,
}

/// Single-threaded operation tape. Build one per forward/backward pass.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims4(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(TensorError::InvalidArgument(format!(
            "{what}: expected rank-4 NCHW tensor, got shape {shape:?}"
        )));
    }
    Ok((shape[0], shape[1], shape[2], shape[3]))
}

fn dims2(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    if shape.len() != 2 {
        return Err(TensorError::InvalidArgument(format!(
            "{what}: expected rank-2 tensor, got shape {shape:?}"
        )));
    }
    Ok((shape[0], shape[1]))
}

/// Unfold conv windows of `input[n]` into `col[C*kH*kW, Ho*Wo]` (row-major).
#[allow(clippy::too_many_arguments)]
fn im2col<S: Scalar>(
    input: &[S], c: usize, h: usize, w: usize,
    kh: usize, kw: usize, stride: usize, pad: usize,
    ho: usize, wo: usize, col: &mut [S],
) {
    debug_assert_eq!(col.len(), c * kh * kw * ho * wo);
    let mut row = 0usize;
    for ci in 0..c {
        let plane = &input[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        for v in drow.iter_mut() {
                            *v = S::zero();
                        }
                        continue;
                    }
                    let srow = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            S::zero()
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add of a col buffer back into the input gradient plane.
#[allow(clippy::too_many_arguments)]
fn col2im_add<S: Scalar>(
    col: &[S], c: usize, h: usize, w: usize,
    kh: usize, kw: usize, stride: usize, pad: usize,
    ho: usize, wo: usize, out: &mut [S],
) {
    let mut row = 0usize;
    for ci in 0..c {
        let plane = &mut out[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let srow = &src[oy * wo..(oy + 1) * wo];
                    for (ox, &v) in srow.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<S>, inputs: Vec<NodeId>, value: Tensor<S>) -> NodeId {
        self.nodes.push(Node { op, inputs, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Non-trainable leaf (network input, constant).
    pub fn input(&mut self, value: Tensor<S>) -> NodeId {
        self.push(Op::Leaf { param: false }, vec![], value)
    }

    /// Trainable leaf; `backward` guarantees its gradient is populated.
    pub fn param(&mut self, value: Tensor<S>) -> NodeId {
        self.push(Op::Leaf { param: true }, vec![], value)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&[S]> {
        self.nodes[id.0].value.grad()
    }

    /// 2D cross-correlation with zero padding.
    /// input `[N,C,H,W]`, kernel `[F,C,kH,kW]`, bias `[F]` -> `[N,F,H',W']`.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        if stride < 1 {
            return Err(TensorError::InvalidArgument("conv2d: stride must be >= 1".into()));
        }
        let (n, c, h, w) = dims4(self.value(input).shape(), "conv2d input")?;
        let (f, kc, kh, kw) = dims4(self.value(kernel).shape(), "conv2d kernel")?;
        if kc != c {
            return Err(TensorError::ShapeMismatch {
                context: "conv2d: input channels vs kernel channels".into(),
                lhs: self.value(input).shape().to_vec(),
                rhs: self.value(kernel).shape().to_vec(),
            });
        }
        if self.value(bias).shape() != [f] {
            return Err(TensorError::ShapeMismatch {
                context: "conv2d: bias vs filter count".into(),
                lhs: self.value(bias).shape().to_vec(),
                rhs: vec![f],
            });
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(TensorError::InvalidArgument(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let l = ho * wo;
        let ckk = c * kh * kw;
        let mut out = vec![S::zero(); n * f * l];
        let mut col = vec![S::zero(); ckk * l];
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let b = self.value(bias).data();
        for ni in 0..n {
            im2col(&x[ni * c * h * w..(ni + 1) * c * h * w], c, h, w, kh, kw, stride, pad, ho, wo, &mut col);
            let dst = &mut out[ni * f * l..(ni + 1) * f * l];
            S::gemm(f, ckk, l, S::one(), k, false, &col, false, S::zero(), dst);
            for fi in 0..f {
                let bv = b[fi];
                for v in dst[fi * l..(fi + 1) * l].iter_mut() {
                    *v += bv;
                }
            }
        }
        let value = Tensor::from_vec(&[n, f, ho, wo], out)?;
        Ok(self.push(Op::Conv2d { stride, pad }, vec![input, kernel, bias], value))
    }

    /// Non-overlapping k x k max pooling. H and W must be divisible by k.
    pub fn max_pool2d(&mut self, input: NodeId, k: usize) -> Result<NodeId> {
        let (n, c, h, w) = dims4(self.value(input).shape(), "max_pool2d input")?;
        if k < 1 || h % k != 0 || w % k != 0 {
            return Err(TensorError::InvalidArgument(format!(
                "max_pool2d: extents {h}x{w} not divisible by k={k}"
            )));
        }
        let (ho, wo) = (h / k, w / k);
        let x = self.value(input).data();
        let mut out = vec![S::zero(); n * c * ho * wo];
        let mut argmax = vec![0usize; n * c * ho * wo];
        for nc in 0..n * c {
            let plane = &x[nc * h * w..(nc + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = S::neg_infinity();
                    let mut best_idx = 0usize;
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = (oy * k + dy) * w + ox * k + dx;
                            // strict > keeps the first occurrence on ties
                            if plane[idx] > best {
                                best = plane[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[nc * ho * wo + oy * wo + ox] = best;
                    argmax[nc * ho * wo + oy * wo + ox] = nc * h * w + best_idx;
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, ho, wo], out)?;
        Ok(self.push(Op::MaxPool { argmax }, vec![input], value))
    }

    /// Non-overlapping k x k average pooling.
    pub fn avg_pool2d(&mut self, input: NodeId, k: usize) -> Result<NodeId> {
        let (n, c, h, w) = dims4(self.value(input).shape(), "avg_pool2d input")?;
        if k < 1 || h % k != 0 || w % k != 0 {
            return Err(TensorError::InvalidArgument(format!(
                "avg_pool2d: extents {h}x{w} not divisible by k={k}"
            )));
        }
        let (ho, wo) = (h / k, w / k);
        let inv = S::one() / S::from_f64((k * k) as f64);
        let x = self.value(input).data();
        let mut out = vec![S::zero(); n * c * ho * wo];
        for nc in 0..n * c {
            let plane = &x[nc * h * w..(nc + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = S::zero();
                    for dy in 0..k {
                        for dx in 0..k {
                            s += plane[(oy * k + dy) * w + ox * k + dx];
                        }
                    }
                    out[nc * ho * wo + oy * wo + ox] = s * inv;
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, ho, wo], out)?;
        Ok(self.push(Op::AvgPool { k }, vec![input], value))
    }

    /// Nearest-neighbour upsampling: each pixel becomes a k x k block.
    pub fn upsample_nearest(&mut self, input: NodeId, k: usize) -> Result<NodeId> {
        if k < 1 {
            return Err(TensorError::InvalidArgument("upsample_nearest: k must be >= 1".into()));
        }
        let (n, c, h, w) = dims4(self.value(input).shape(), "upsample_nearest input")?;
        let (ho, wo) = (h * k, w * k);
        let x = self.value(input).data();
        let mut out = vec![S::zero(); n * c * ho * wo];
        for nc in 0..n * c {
            let plane = &x[nc * h * w..(nc + 1) * h * w];
            let dst = &mut out[nc * ho * wo..(nc + 1) * ho * wo];
            for oy in 0..ho {
                let srow = &plane[(oy / k) * w..(oy / k + 1) * w];
                let drow = &mut dst[oy * wo..(oy + 1) * wo];
                for (ox, v) in drow.iter_mut().enumerate() {
                    *v = srow[ox / k];
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, ho, wo], out)?;
        Ok(self.push(Op::Upsample { k }, vec![input], value))
    }

    /// Centered spatial crop of an NCHW tensor to `oh x ow`.
    pub fn crop_center(&mut self, input: NodeId, oh: usize, ow: usize) -> Result<NodeId> {
        let (n, c, h, w) = dims4(self.value(input).shape(), "crop_center input")?;
        if oh > h || ow > w || oh == 0 || ow == 0 {
            return Err(TensorError::InvalidArgument(format!(
                "crop_center: {oh}x{ow} does not fit inside {h}x{w}"
            )));
        }
        let (y0, x0) = ((h - oh) / 2, (w - ow) / 2);
        let x = self.value(input).data();
        let mut out = vec![S::zero(); n * c * oh * ow];
        for nc in 0..n * c {
            for oy in 0..oh {
                let src = nc * h * w + (y0 + oy) * w + x0;
                let dst = nc * oh * ow + oy * ow;
                out[dst..dst + ow].copy_from_slice(&x[src..src + ow]);
            }
        }
        let value = Tensor::from_vec(&[n, c, oh, ow], out)?;
        Ok(self.push(Op::Crop { y0, x0 }, vec![input], value))
    }

    /// Affine map `input[N,D] . weight[D,M] + bias[M]`.
    pub fn dense(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let (n, d) = dims2(self.value(input).shape(), "dense input")?;
        let (dw, m) = dims2(self.value(weight).shape(), "dense weight")?;
        if d != dw {
            return Err(TensorError::ShapeMismatch {
                context: "dense: inner dimensions".into(),
                lhs: self.value(input).shape().to_vec(),
                rhs: self.value(weight).shape().to_vec(),
            });
        }
        if self.value(bias).shape() != [m] {
            return Err(TensorError::ShapeMismatch {
                context: "dense: bias vs output dim".into(),
                lhs: self.value(bias).shape().to_vec(),
                rhs: vec![m],
            });
        }
        let mut out = vec![S::zero(); n * m];
        S::gemm(n, d, m, S::one(), self.value(input).data(), false, self.value(weight).data(), false, S::zero(), &mut out);
        let b = self.value(bias).data();
        for row in out.chunks_mut(m) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += *bv;
            }
        }
        let value = Tensor::from_vec(&[n, m], out)?;
        Ok(self.push(Op::Dense, vec![input, weight, bias], value))
    }

    /// Matrix product `a[N,D] . b[D,M]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, d) = dims2(self.value(a).shape(), "matmul lhs")?;
        let (db, m) = dims2(self.value(b).shape(), "matmul rhs")?;
        if d != db {
            return Err(TensorError::ShapeMismatch {
                context: "matmul: inner dimensions".into(),
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![S::zero(); n * m];
        S::gemm(n, d, m, S::one(), self.value(a).data(), false, self.value(b).data(), false, S::zero(), &mut out);
        let value = Tensor::from_vec(&[n, m], out)?;
        Ok(self.push(Op::Matmul, vec![a, b], value))
    }

    pub fn activation(&mut self, input: NodeId, kind: Act) -> NodeId {
        let x = self.value(input);
        let data = x
            .data()
            .iter()
            .map(|&v| match kind {
                Act::Relu => {
                    if v > S::zero() {
                        v
                    } else {
                        S::zero()
                    }
                }
                Act::Tanh => v.tanh(),
                Act::Sigmoid => S::one() / (S::one() + (-v).exp()),
            })
            .collect();
        let value = Tensor::from_vec(x.shape(), data).expect("same shape");
        self.push(Op::Activation(kind), vec![input], value)
    }

    fn elementwise(&mut self, a: NodeId, b: NodeId, op: Op<S>, context: &str) -> Result<NodeId> {
        self.value(a).same_shape(self.value(b), context)?;
        let mul = matches!(op, Op::Mul);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| if mul { x * y } else { x + y })
            .collect();
        let value = Tensor::from_vec(self.value(a).shape(), data)?;
        Ok(self.push(op, vec![a, b], value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, Op::Add, "add")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, Op::Mul, "mul")
    }

    /// Elementwise `a * x + b` with scalar coefficients.
    pub fn affine(&mut self, input: NodeId, a: S, b: S) -> NodeId {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| a * v + b).collect();
        let value = Tensor::from_vec(x.shape(), data).expect("same shape");
        self.push(Op::AffineScalar { a }, vec![input], value)
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        let x = self.value(input);
        let n: usize = shape.iter().product();
        if n != x.numel() {
            return Err(TensorError::ShapeDataMismatch {
                shape: shape.to_vec(),
                expected: n,
                actual: x.numel(),
            });
        }
        let value = Tensor::from_vec(shape, x.data().to_vec())?;
        Ok(self.push(Op::Reshape, vec![input], value))
    }

    /// Concatenate along the channel axis of NCHW tensors.
    pub fn concat_c(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (na, ca, ha, wa) = dims4(self.value(a).shape(), "concat_c lhs")?;
        let (nb, cb, hb, wb) = dims4(self.value(b).shape(), "concat_c rhs")?;
        if na != nb || ha != hb || wa != wb {
            return Err(TensorError::ShapeMismatch {
                context: "concat_c: N/H/W must agree".into(),
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let hw = ha * wa;
        let mut out = Vec::with_capacity(na * (ca + cb) * hw);
        let xa = self.value(a).data();
        let xb = self.value(b).data();
        for ni in 0..na {
            out.extend_from_slice(&xa[ni * ca * hw..(ni + 1) * ca * hw]);
            out.extend_from_slice(&xb[ni * cb * hw..(ni + 1) * cb * hw]);
        }
        let value = Tensor::from_vec(&[na, ca + cb, ha, wa], out)?;
        Ok(self.push(Op::ConcatC, vec![a, b], value))
    }

    /// Channels `[start, start+len)` of an NCHW tensor.
    pub fn slice_c(&mut self, input: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (n, c, h, w) = dims4(self.value(input).shape(), "slice_c input")?;
        if start + len > c || len == 0 {
            return Err(TensorError::InvalidArgument(format!(
                "slice_c: channels [{start}, {}) out of range for C={c}",
                start + len
            )));
        }
        let hw = h * w;
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * len * hw);
        for ni in 0..n {
            let base = ni * c * hw + start * hw;
            out.extend_from_slice(&x[base..base + len * hw]);
        }
        let value = Tensor::from_vec(&[n, len, h, w], out)?;
        Ok(self.push(Op::SliceC { start, len }, vec![input], value))
    }

    /// Mean over all elements of the squared difference. Returns a scalar node.
    pub fn mse_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        self.value(pred).same_shape(self.value(target), "mse_loss")?;
        let n = self.value(pred).numel();
        let inv = S::one() / S::from_f64(n as f64);
        let mut acc = S::zero();
        for (&p, &t) in self.value(pred).data().iter().zip(self.value(target).data()) {
            let d = p - t;
            acc += d * d;
        }
        let value = Tensor::scalar(acc * inv);
        Ok(self.push(Op::MseLoss, vec![pred, target], value))
    }

    /// Reverse pass from a scalar loss node. Resets all gradients first, then
    /// populates them; repeated calls recompute rather than accumulate.
    /// Every `param` leaf ends up with a gradient (zero if unreachable).
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        // reset-then-populate: accumulation across calls is rejected by design
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        // mark nodes reachable from the loss to skip dead subgraphs
        let mut reachable = vec![false; self.nodes.len()];
        reachable[loss.0] = true;
        for i in (0..=loss.0).rev() {
            if !reachable[i] {
                continue;
            }
            for inp in &self.nodes[i].inputs {
                reachable[inp.0] = true;
            }
        }
        self.nodes[loss.0].value.set_grad(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            if !reachable[i] || self.nodes[i].value.grad().is_none() {
                continue;
            }
            self.propagate(i)?;
        }
        // unreachable parameters still report a (zero) gradient
        for node in &mut self.nodes {
            if matches!(node.op, Op::Leaf { param: true }) && node.value.grad().is_none() {
                let n = node.value.numel();
                node.value.set_grad(vec![S::zero(); n]);
            }
        }
        Ok(())
    }

    fn add_grad(&mut self, id: NodeId, delta: &[S]) {
        let t = &mut self.nodes[id.0].value;
        match t.grad_mut() {
            Some(g) => {
                for (gv, dv) in g.iter_mut().zip(delta) {
                    *gv += *dv;
                }
            }
            None => t.set_grad(delta.to_vec()),
        }
    }

    fn propagate(&mut self, i: usize) -> Result<()> {
        let out_grad = self.nodes[i].value.grad().expect("checked").to_vec();
        let inputs = self.nodes[i].inputs.clone();
        match &self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::Conv2d { stride, pad } => {
                let (stride, pad) = (*stride, *pad);
                let (n, c, h, w) = dims4(self.value(inputs[0]).shape(), "")?;
                let (f, _, kh, kw) = dims4(self.value(inputs[1]).shape(), "")?;
                let out_shape = self.nodes[i].value.shape().to_vec();
                let (ho, wo) = (out_shape[2], out_shape[3]);
                let l = ho * wo;
                let ckk = c * kh * kw;
                let x = self.value(inputs[0]).data().to_vec();
                let k = self.value(inputs[1]).data().to_vec();
                let mut dx = vec![S::zero(); n * c * h * w];
                let mut dk = vec![S::zero(); f * ckk];
                let mut db = vec![S::zero(); f];
                let mut col = vec![S::zero(); ckk * l];
                let mut dcol = vec![S::zero(); ckk * l];
                for ni in 0..n {
                    let dout = &out_grad[ni * f * l..(ni + 1) * f * l];
                    // dK += dOut . col^T  (recompute col rather than caching it)
                    im2col(&x[ni * c * h * w..(ni + 1) * c * h * w], c, h, w, kh, kw, stride, pad, ho, wo, &mut col);
                    S::gemm(f, l, ckk, S::one(), dout, false, &col, true, S::one(), &mut dk);
                    // dCol = K^T . dOut
                    S::gemm(ckk, f, l, S::one(), &k, true, dout, false, S::zero(), &mut dcol);
                    col2im_add(&dcol, c, h, w, kh, kw, stride, pad, ho, wo, &mut dx[ni * c * h * w..(ni + 1) * c * h * w]);
                    for fi in 0..f {
                        for &v in &dout[fi * l..(fi + 1) * l] {
                            db[fi] += v;
                        }
                    }
                }
                self.add_grad(inputs[0], &dx);
                self.add_grad(inputs[1], &dk);
                self.add_grad(inputs[2], &db);
            }
            Op::MaxPool { argmax } => {
                let n_in = self.value(inputs[0]).numel();
                let mut dx = vec![S::zero(); n_in];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += out_grad[o];
                }
                self.add_grad(inputs[0], &dx);
            }
            Op::AvgPool { k } => {
                let k = *k;
                let (n, c, h, w) = dims4(self.value(inputs[0]).shape(), "")?;
                let (ho, wo) = (h / k, w / k);
                let inv = S::one() / S::from_f64((k * k) as f64);
                let mut dx = vec![S::zero(); n * c * h * w];
                for nc in 0..n * c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let g = out_grad[nc * ho * wo + oy * wo + ox] * inv;
                            for dy in 0..k {
                                for dxx in 0..k {
                                    dx[nc * h * w + (oy * k + dy) * w + ox * k + dxx] += g;
                                }
                            }
                        }
                    }
                }
                self.add_grad(inputs[0], &dx);
            }
            Op::Upsample { k } => {
                let k = *k;
                let (n, c, h, w) = dims4(self.value(inputs[0]).shape(), "")?;
                let (ho, wo) = (h * k, w * k);
                let mut dx = vec![S::zero(); n * c * h * w];
                for nc in 0..n * c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            dx[nc * h * w + (oy / k) * w + ox / k] += out_grad[nc * ho * wo + oy * wo + ox];
                        }
                    }
                }
                self.add_grad(inputs[0], &dx);
            }
            Op::Crop { y0, x0 } => {
                let (y0, x0) = (*y0, *x0);
                let (n, c, h, w) = dims4(self.value(inputs[0]).shape(), "")?;
                let os = self.value(NodeId(i)).shape().to_vec();
                let (oh, ow) = (os[2], os[3]);
                let mut dx = vec![S::zero(); n * c * h * w];
                for nc in 0..n * c {
                    for oy in 0..oh {
                        let dst = nc * h * w + (y0 + oy) * w + x0;
                        let src = nc * oh * ow + oy * ow;
                        for k in 0..ow {
                            dx[dst + k] += out_grad[src + k];
                        }
                    }
                }
                self.add_grad(inputs[0], &dx);
            }
            Op::Dense | Op::Matmul => {
                let with_bias = matches!(self.nodes[i].op, Op::Dense);
                let (n, d) = dims2(self.value(inputs[0]).shape(), "")?;
                let (_, m) = dims2(self.value(inputs[1]).shape(), "")?;
                let x = self.value(inputs[0]).data().to_vec();
                let wt = self.value(inputs[1]).data().to_vec();
                // dX = dY . W^T
                let mut dx = vec![S::zero(); n * d];
                S::gemm(n, m, d, S::one(), &out_grad, false, &wt, true, S::zero(), &mut dx);
                // dW = X^T . dY
                let mut dw = vec![S::zero(); d * m];
                S::gemm(d, n, m, S::one(), &x, true, &out_grad, false, S::zero(), &mut dw);
                self.add_grad(inputs[0], &dx);
                self.add_grad(inputs[1], &dw);
                if with_bias {
                    let mut db = vec![S::zero(); m];
                    for row in out_grad.chunks(m) {
                        for (b, &g) in db.iter_mut().zip(row) {
                            *b += g;
                        }
                    }
                    self.add_grad(inputs[2], &db);
                }
            }
            Op::Activation(kind) => {
                let kind = *kind;
                let dx: Vec<S> = match kind {
                    Act::Relu => self
                        .value(inputs[0])
                        .data()
                        .iter()
                        .zip(&out_grad)
                        .map(|(&x, &g)| if x > S::zero() { g } else { S::zero() })
                        .collect(),
                    Act::Tanh => self
                        .nodes[i]
                        .value
                        .data()
                        .iter()
                        .zip(&out_grad)
                        .map(|(&y, &g)| g * (S::one() - y * y))
                        .collect(),
                    Act::Sigmoid => self
                        .nodes[i]
                        .value
                        .data()
                        .iter()
                        .zip(&out_grad)
                        .map(|(&y, &g)| g * y * (S::one() - y))
                        .collect(),
                };
                self.add_grad(inputs[0], &dx);
            }
            Op::Add => {
                self.add_grad(inputs[0], &out_grad);
                self.add_grad(inputs[1], &out_grad);
            }
            Op::Mul => {
                let da: Vec<S> = self.value(inputs[1]).data().iter().zip(&out_grad).map(|(&b, &g)| b * g).collect();
                let db: Vec<S> = self.value(inputs[0]).data().iter().zip(&out_grad).map(|(&a, &g)| a * g).collect();
                self.add_grad(inputs[0], &da);
                self.add_grad(inputs[1], &db);
            }
            Op::AffineScalar { a } => {
                let a = *a;
                let dx: Vec<S> = out_grad.iter().map(|&g| a * g).collect();
                self.add_grad(inputs[0], &dx);
            }
            Op::Reshape => {
                self.add_grad(inputs[0], &out_grad);
            }
            Op::ConcatC => {
                let (n, ca, h, w) = dims4(self.value(inputs[0]).shape(), "")?;
                let (_, cb, _, _) = dims4(self.value(inputs[1]).shape(), "")?;
                let hw = h * w;
                let mut da = vec![S::zero(); n * ca * hw];
                let mut db = vec![S::zero(); n * cb * hw];
                for ni in 0..n {
                    let src = &out_grad[ni * (ca + cb) * hw..(ni + 1) * (ca + cb) * hw];
                    da[ni * ca * hw..(ni + 1) * ca * hw].copy_from_slice(&src[..ca * hw]);
                    db[ni * cb * hw..(ni + 1) * cb * hw].copy_from_slice(&src[ca * hw..]);
                }
                self.add_grad(inputs[0], &da);
                self.add_grad(inputs[1], &db);
            }
            Op::SliceC { start, len } => {
                let (start, len) = (*start, *len);
                let (n, c, h, w) = dims4(self.value(inputs[0]).shape(), "")?;
                let hw = h * w;
                let mut dx = vec![S::zero(); n * c * hw];
                for ni in 0..n {
                    let dst = ni * c * hw + start * hw;
                    dx[dst..dst + len * hw].copy_from_slice(&out_grad[ni * len * hw..(ni + 1) * len * hw]);
                }
                self.add_grad(inputs[0], &dx);
            }
            Op::MseLoss => {
                let n = self.value(inputs[0]).numel();
                let scale = S::from_f64(2.0 / n as f64) * out_grad[0];
                let dp: Vec<S> = self
                    .value(inputs[0])
                    .data()
                    .iter()
                    .zip(self.value(inputs[1]).data())
                    .map(|(&p, &t)| scale * (p - t))
                    .collect();
                let dt: Vec<S> = dp.iter().map(|&v| -v).collect();
                self.add_grad(inputs[0], &dp);
                self.add_grad(inputs[1], &dt);
            }
        }
        Ok(())
    }
}

/// Gate weights for one GRU cell. All fields are graph node ids:
/// `w*` map the input (D x H), `u*` map the hidden state (H x H), `b*` are biases (H).
#[derive(Debug, Clone, Copy)]
pub struct GruGates {
    pub wz: NodeId,
    pub uz: NodeId,
    pub bz: NodeId,
    pub wr: NodeId,
    pub ur: NodeId,
    pub br: NodeId,
    pub wc: NodeId,
    pub uc: NodeId,
    pub bc: NodeId,
}

/// Single GRU step:
/// `z = sigmoid(x Wz + h Uz + bz)`, `r = sigmoid(x Wr + h Ur + br)`,
/// `c = tanh(x Wc + (r .* h) Uc + bc)`, `h' = (1 - z) .* h + z .* c`.
pub fn gru_step<S: Scalar>(
    g: &mut Graph<S>,
    x: NodeId,
    h_prev: NodeId,
    p: &GruGates,
) -> Result<NodeId> {
    let xz = g.dense(x, p.wz, p.bz)?;
    let hz = g.matmul(h_prev, p.uz)?;
    let zs = g.add(xz, hz)?;
    let z = g.activation(zs, Act::Sigmoid);

    let xr = g.dense(x, p.wr, p.br)?;
    let hr = g.matmul(h_prev, p.ur)?;
    let rs = g.add(xr, hr)?;
    let r = g.activation(rs, Act::Sigmoid);

    let rh = g.mul(r, h_prev)?;
    let xc = g.dense(x, p.wc, p.bc)?;
    let hc = g.matmul(rh, p.uc)?;
    let cs = g.add(xc, hc)?;
    let c = g.activation(cs, Act::Tanh);

    let one_minus_z = g.affine(z, -S::one(), S::one());
    let keep = g.mul(one_minus_z, h_prev)?;
    let new = g.mul(z, c)?;
    g.add(keep, new)
}
