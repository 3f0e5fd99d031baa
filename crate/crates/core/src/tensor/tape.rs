//! Reverse-mode gradient tape over dense tensors.
//!
//! Operations append nodes to a [`Tape`]; `backward` walks the record once in
//! reverse and accumulates gradients for every node that (transitively)
//! requires them. A tape is confined to one thread; independent tapes may run
//! concurrently. Internal parallelism (convolution rows) writes disjoint
//! output regions, so results are bit-identical regardless of thread count.
//!
//! Tie-breaking is deterministic everywhere: elementwise and reduction `max`
//! route the gradient to the first operand / lowest index on ties.

use rayon::prelude::*;

use super::{broadcast_shape, zip_broadcast, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Zero-padding policy for [`Tape::conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Pad so the output spatial extents are `ceil(in / stride)`.
    Same,
    /// No padding; the kernel must fit inside the input.
    Valid,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    h_in: usize,
    w_in: usize,
    c_in: usize,
    h_out: usize,
    w_out: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    pad_h: usize,
    pad_w: usize,
}

enum Op<S> {
    Leaf,
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    /// Elementwise max; `first` flags where operand `a` won (ties included).
    Maximum { a: NodeId, b: NodeId, first: Vec<bool> },
    Neg { x: NodeId },
    Scale { x: NodeId, c: S },
    AddScalar { x: NodeId },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    Swish { x: NodeId },
    ShiftedSigmoid { x: NodeId },
    Softplus { x: NodeId },
    Abs { x: NodeId },
    PowConst { x: NodeId, e: S },
    Linear { x: NodeId, w: NodeId, bias: Option<NodeId> },
    Conv2d { x: NodeId, k: NodeId, bias: Option<NodeId>, geom: ConvGeom },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, mean: Vec<S>, inv_std: Vec<S>, frozen: bool },
    ReduceSum { x: NodeId, axis: usize },
    ReduceMean { x: NodeId, axis: usize },
    ReduceMax { x: NodeId, axis: usize, arg: Vec<u32> },
    /// Max over axis 1 of a `[P, N, C]` tensor restricted to the first
    /// `counts[p]` rows; empty pillars produce 0 with no gradient.
    RowMaxMasked { x: NodeId, arg: Vec<i64> },
    Upsample2x { x: NodeId },
    MaxPool2 { x: NodeId, arg: Vec<u32> },
    Concat { inputs: Vec<NodeId>, axis: usize },
    SliceAxis { x: NodeId, axis: usize, start: usize },
    Reshape { x: NodeId },
    Scatter2d { x: NodeId, coords: Vec<(usize, usize)> },
    SumAll { x: NodeId },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires: bool,
}

/// The gradient tape. All differentiable operations live here.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    check_finite: bool,
}

/// Work threshold (multiply-accumulate count) above which convolution
/// forward/backward loops run on rayon.
const PAR_MAC_THRESHOLD: usize = 1 << 22;

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            check_finite: true,
        }
    }

    /// Disable the per-op finiteness scan (the checks stay on by default).
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Gradient of the last `backward` root w.r.t. this node, if any was
    /// accumulated. Nodes that never required a gradient report `None`.
    pub fn grad(&self, id: NodeId) -> Option<&[S]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Insert a tensor that does not participate in differentiation.
    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.push_unchecked(value, Op::Leaf, false)
    }

    /// Insert a differentiable leaf (a parameter or traced input).
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> NodeId {
        self.push_unchecked(value, Op::Leaf, requires_grad)
    }

    fn push_unchecked(&mut self, value: Tensor<S>, op: Op<S>, requires: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<S>, op: Op<S>, requires: bool) -> Result<NodeId> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        Ok(self.push_unchecked(value, op, requires))
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires
    }

    // ── Elementwise binary ──────────────────────────────────────────────

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(S, S) -> S,
    ) -> Result<(Tensor<S>, bool)> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out_shape = broadcast_shape(va.shape(), vb.shape())
            .map_err(|_| Error::shape(name, format!("{:?} vs {:?}", va.shape(), vb.shape())))?;
        let mut out = vec![S::zero(); out_shape.iter().product()];
        if va.shape() == vb.shape() {
            for (o, (&x, &y)) in out.iter_mut().zip(va.data().iter().zip(vb.data())) {
                *o = f(x, y);
            }
        } else {
            let (da, db) = (va.data(), vb.data());
            zip_broadcast(va.shape(), vb.shape(), &out_shape, |o, ia, ib| {
                out[o] = f(da[ia], db[ib]);
            });
        }
        let requires = self.requires(a) || self.requires(b);
        Ok((Tensor::new(out_shape, out)?, requires))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (v, r) = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", v, Op::Add { a, b }, r)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (v, r) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push("sub", v, Op::Sub { a, b }, r)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (v, r) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", v, Op::Mul { a, b }, r)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (v, r) = self.binary("div", a, b, |x, y| x / y)?;
        self.push("div", v, Op::Div { a, b }, r)
    }

    /// Elementwise maximum; gradient goes to the winning operand, ties to `a`.
    pub fn maximum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (v, r) = self.binary("max", a, b, |x, y| if x >= y { x } else { y })?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut first = vec![false; v.numel()];
        let (da, db) = (va.data(), vb.data());
        zip_broadcast(va.shape(), vb.shape(), v.shape(), |o, ia, ib| {
            first[o] = da[ia] >= db[ib];
        });
        self.push("max", v, Op::Maximum { a, b, first }, r)
    }

    // ── Elementwise unary ───────────────────────────────────────────────

    fn unary(
        &mut self,
        name: &'static str,
        x: NodeId,
        op: Op<S>,
        f: impl Fn(S) -> S,
    ) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&e| f(e)).collect())?;
        let r = self.requires(x);
        self.push(name, out, op, r)
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("neg", x, Op::Neg { x }, |e| -e)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let c = S::from_f64(c);
        self.unary("scale", x, Op::Scale { x, c }, |e| e * c)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let c = S::from_f64(c);
        self.unary("add_scalar", x, Op::AddScalar { x }, |e| e + c)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("relu", x, Op::Relu { x }, |e| if e > S::zero() { e } else { S::zero() })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("sigmoid", x, Op::Sigmoid { x }, sigmoid_stable)
    }

    pub fn swish(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("swish", x, Op::Swish { x }, |e| e * sigmoid_stable(e))
    }

    /// `2σ(x) − 1`, mapping into (−1, 1).
    pub fn shifted_sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let two = S::from_f64(2.0);
        self.unary("shifted_sigmoid", x, Op::ShiftedSigmoid { x }, move |e| {
            two * sigmoid_stable(e) - S::one()
        })
    }

    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("softplus", x, Op::Softplus { x }, softplus_stable)
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("abs", x, Op::Abs { x }, |e| e.abs())
    }

    /// `x^e` for a fixed exponent; inputs are expected non-negative when `e`
    /// is not an integer.
    pub fn pow_const(&mut self, x: NodeId, e: f64) -> Result<NodeId> {
        let e = S::from_f64(e);
        self.unary("pow_const", x, Op::PowConst { x, e }, |v| v.powf(e))
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    /// Matrix product over the last axis: `x[..., K] · w[K, M] (+ bias[M])`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        if vw.shape().len() != 2 {
            return Err(Error::shape("linear", format!("weight must be 2-d, got {:?}", vw.shape())));
        }
        let (k, m) = (vw.shape()[0], vw.shape()[1]);
        let xk = *vx.shape().last().expect("non-empty shape");
        if xk != k {
            return Err(Error::shape("linear", format!("x last extent {xk} != weight rows {k}")));
        }
        if let Some(b) = bias {
            let vb = &self.nodes[b.0].value;
            if vb.shape() != [m] {
                return Err(Error::shape("linear", format!("bias {:?} != [{m}]", vb.shape())));
            }
        }
        let rows = vx.numel() / k;
        let mut out_shape = vx.shape().to_vec();
        *out_shape.last_mut().unwrap() = m;
        let mut out = vec![S::zero(); rows * m];
        let xd = vx.data();
        let wd = vw.data();
        if let Some(b) = bias {
            let bd = self.nodes[b.0].value.data();
            for row in out.chunks_exact_mut(m) {
                row.copy_from_slice(bd);
            }
        }
        for r in 0..rows {
            let xrow = &xd[r * k..(r + 1) * k];
            let orow = &mut out[r * m..(r + 1) * m];
            for (ki, &xv) in xrow.iter().enumerate() {
                let wrow = &wd[ki * m..(ki + 1) * m];
                for (o, &wv) in orow.iter_mut().zip(wrow) {
                    *o += xv * wv;
                }
            }
        }
        let requires =
            self.requires(x) || self.requires(w) || bias.map_or(false, |b| self.requires(b));
        let v = Tensor::new(out_shape, out)?;
        self.push("linear", v, Op::Linear { x, w, bias }, requires)
    }

    /// 2-d cross-correlation on `[H, W, Cin]` with kernel `[kh, kw, Cin, Cout]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        k: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: Padding,
    ) -> Result<NodeId> {
        let (vx, vk) = (&self.nodes[x.0].value, &self.nodes[k.0].value);
        if vx.shape().len() != 3 || vk.shape().len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("want [H,W,Cin] and [kh,kw,Cin,Cout], got {:?} and {:?}", vx.shape(), vk.shape()),
            ));
        }
        let (h_in, w_in, c_in) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        let (kh, kw, kc_in, c_out) = (vk.shape()[0], vk.shape()[1], vk.shape()[2], vk.shape()[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid("conv2d", format!("kernel extents must be odd, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be >= 1"));
        }
        if kc_in != c_in {
            return Err(Error::shape("conv2d", format!("kernel Cin {kc_in} != input Cin {c_in}")));
        }
        if let Some(b) = bias {
            if self.nodes[b.0].value.shape() != [c_out] {
                return Err(Error::shape("conv2d", "bias extent != Cout"));
            }
        }
        let geom = match padding {
            Padding::Same => {
                let h_out = h_in.div_ceil(stride);
                let w_out = w_in.div_ceil(stride);
                let pad_h = ((h_out - 1) * stride + kh).saturating_sub(h_in);
                let pad_w = ((w_out - 1) * stride + kw).saturating_sub(w_in);
                ConvGeom {
                    h_in, w_in, c_in, h_out, w_out, c_out, kh, kw, stride,
                    pad_top: pad_h / 2,
                    pad_left: pad_w / 2,
                    pad_h,
                    pad_w,
                }
            }
            Padding::Valid => {
                if h_in < kh || w_in < kw {
                    return Err(Error::invalid(
                        "conv2d",
                        format!("kernel {kh}x{kw} larger than input {h_in}x{w_in} under valid padding"),
                    ));
                }
                ConvGeom {
                    h_in, w_in, c_in,
                    h_out: (h_in - kh) / stride + 1,
                    w_out: (w_in - kw) / stride + 1,
                    c_out, kh, kw, stride,
                    pad_top: 0,
                    pad_left: 0,
                    pad_h: 0,
                    pad_w: 0,
                }
            }
        };
        let padded = pad_input(vx.data(), &geom);
        let bias_data = bias.map(|b| self.nodes[b.0].value.data().to_vec());
        let out = conv_forward(&padded, vk.data(), bias_data.as_deref(), &geom);
        let requires =
            self.requires(x) || self.requires(k) || bias.map_or(false, |b| self.requires(b));
        let v = Tensor::new(vec![geom.h_out, geom.w_out, c_out], out)?;
        self.push("conv2d", v, Op::Conv2d { x, k, bias, geom }, requires)
    }

    /// Per-channel batch normalization over all leading axes of `x[..., C]`.
    ///
    /// With `stats = None` the batch statistics are computed (training mode)
    /// and returned so callers can maintain running averages. With
    /// `stats = Some((mean, var))` the given frozen statistics are applied
    /// (inference mode).
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        stats: Option<(&[S], &[S])>,
    ) -> Result<(NodeId, Vec<S>, Vec<S>)> {
        let vx = &self.nodes[x.0].value;
        let c = *vx.shape().last().expect("non-empty shape");
        let n = vx.numel() / c;
        if self.nodes[gamma.0].value.shape() != [c] || self.nodes[beta.0].value.shape() != [c] {
            return Err(Error::shape("batch_norm", "gamma/beta extent != C"));
        }
        let eps = S::from_f64(eps);
        let frozen = stats.is_some();
        let (mean, var) = match stats {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::shape("batch_norm", "running stats extent != C"));
                }
                (m.to_vec(), v.to_vec())
            }
            None => {
                let mut mean = vec![S::zero(); c];
                let mut var = vec![S::zero(); c];
                for row in vx.data().chunks_exact(c) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                let inv_n = S::one() / S::from_f64(n as f64);
                for m in &mut mean {
                    *m *= inv_n;
                }
                for row in vx.data().chunks_exact(c) {
                    for ((va, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        let d = v - m;
                        *va += d * d;
                    }
                }
                for v in &mut var {
                    *v *= inv_n;
                }
                (mean, var)
            }
        };
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let gd = self.nodes[gamma.0].value.data().to_vec();
        let bd = self.nodes[beta.0].value.data().to_vec();
        let mut out = vec![S::zero(); vx.numel()];
        for (orow, xrow) in out.chunks_exact_mut(c).zip(vx.data().chunks_exact(c)) {
            for ci in 0..c {
                orow[ci] = gd[ci] * (xrow[ci] - mean[ci]) * inv_std[ci] + bd[ci];
            }
        }
        let requires = self.requires(x) || self.requires(gamma) || self.requires(beta);
        let v = Tensor::new(vx.shape().to_vec(), out)?;
        let ret_mean = mean.clone();
        let ret_var = var;
        let id = self.push(
            "batch_norm",
            v,
            Op::BatchNorm { x, gamma, beta, mean, inv_std, frozen },
            requires,
        )?;
        Ok((id, ret_mean, ret_var))
    }

    // ── Reductions ──────────────────────────────────────────────────────

    fn reduce_parts(&self, name: &'static str, x: NodeId, axis: usize) -> Result<(usize, usize, usize, Vec<usize>)> {
        let shape = self.nodes[x.0].value.shape();
        if axis >= shape.len() {
            return Err(Error::invalid(name, format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape[axis] = 1;
        Ok((outer, n, inner, out_shape))
    }

    pub fn reduce_sum(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let (outer, n, inner, out_shape) = self.reduce_parts("reduce_sum", x, axis)?;
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xd[base + i];
                }
            }
        }
        let r = self.requires(x);
        let v = Tensor::new(out_shape, out)?;
        self.push("reduce_sum", v, Op::ReduceSum { x, axis }, r)
    }

    pub fn reduce_mean(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let (outer, n, inner, out_shape) = self.reduce_parts("reduce_mean", x, axis)?;
        let xd = self.nodes[x.0].value.data();
        let inv_n = S::one() / S::from_f64(n as f64);
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let base = (o * n + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xd[base + i];
                }
            }
        }
        for v in &mut out {
            *v *= inv_n;
        }
        let r = self.requires(x);
        let v = Tensor::new(out_shape, out)?;
        self.push("reduce_mean", v, Op::ReduceMean { x, axis }, r)
    }

    /// Max over `axis`; the gradient routes to the first maximal index.
    pub fn reduce_max(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let (outer, n, inner, out_shape) = self.reduce_parts("reduce_max", x, axis)?;
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![S::zero(); outer * inner];
        let mut arg = vec![0u32; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = xd[o * n * inner + i];
                let mut best_j = 0u32;
                for j in 1..n {
                    let v = xd[(o * n + j) * inner + i];
                    if v > best {
                        best = v;
                        best_j = j as u32;
                    }
                }
                out[o * inner + i] = best;
                arg[o * inner + i] = best_j;
            }
        }
        let r = self.requires(x);
        let v = Tensor::new(out_shape, out)?;
        self.push("reduce_max", v, Op::ReduceMax { x, axis, arg }, r)
    }

    /// Per-pillar max over the point axis of `[P, N, C]`, restricted to the
    /// first `counts[p]` rows. Pillars with `counts[p] == 0` yield 0.
    pub fn row_max_masked(&mut self, x: NodeId, counts: &[u32]) -> Result<NodeId> {
        let shape = self.nodes[x.0].value.shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::shape("row_max_masked", format!("want [P,N,C], got {shape:?}")));
        }
        let (p, n, c) = (shape[0], shape[1], shape[2]);
        if counts.len() != p {
            return Err(Error::shape("row_max_masked", "counts length != P"));
        }
        if counts.iter().any(|&cnt| cnt as usize > n) {
            return Err(Error::invalid("row_max_masked", "count exceeds N"));
        }
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![S::zero(); p * c];
        let mut arg = vec![-1i64; p * c];
        for pi in 0..p {
            let cnt = counts[pi] as usize;
            for ci in 0..c {
                if cnt == 0 {
                    continue;
                }
                let mut best = xd[(pi * n) * c + ci];
                let mut best_j = 0usize;
                for j in 1..cnt {
                    let v = xd[(pi * n + j) * c + ci];
                    if v > best {
                        best = v;
                        best_j = j;
                    }
                }
                out[pi * c + ci] = best;
                arg[pi * c + ci] = ((pi * n + best_j) * c + ci) as i64;
            }
        }
        let r = self.requires(x);
        let v = Tensor::new(vec![p, 1, c], out)?;
        self.push("row_max_masked", v, Op::RowMaxMasked { x, arg }, r)
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        let mut acc = S::zero();
        for &v in self.nodes[x.0].value.data() {
            acc += v;
        }
        let r = self.requires(x);
        self.push("sum_all", Tensor::scalar(acc), Op::SumAll { x }, r)
    }

    // ── Spatial resampling ──────────────────────────────────────────────

    /// Nearest-neighbour 2x upsampling of `[H, W, C]`.
    pub fn upsample2x(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.nodes[x.0].value.shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::shape("upsample2x", format!("want [H,W,C], got {shape:?}")));
        }
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![S::zero(); 4 * h * w * c];
        let w2 = 2 * w;
        for y in 0..h {
            for xcol in 0..w {
                let src = &xd[(y * w + xcol) * c..(y * w + xcol + 1) * c];
                for dy in 0..2 {
                    for dx in 0..2 {
                        let dst = ((2 * y + dy) * w2 + 2 * xcol + dx) * c;
                        out[dst..dst + c].copy_from_slice(src);
                    }
                }
            }
        }
        let r = self.requires(x);
        let v = Tensor::new(vec![2 * h, 2 * w, c], out)?;
        self.push("upsample2x", v, Op::Upsample2x { x }, r)
    }

    /// 2x2 max-pool with stride 2 on `[H, W, C]`; extents must be even.
    pub fn maxpool2x2(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.nodes[x.0].value.shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::shape("maxpool2x2", format!("want [H,W,C], got {shape:?}")));
        }
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid("maxpool2x2", format!("odd spatial extents {h}x{w}")));
        }
        let xd = self.nodes[x.0].value.data();
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![S::zero(); ho * wo * c];
        let mut arg = vec![0u32; ho * wo * c];
        for y in 0..ho {
            for xcol in 0..wo {
                for ci in 0..c {
                    let mut best = S::neg_infinity();
                    let mut best_idx = 0u32;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = ((2 * y + dy) * w + 2 * xcol + dx) * c + ci;
                            if xd[idx] > best {
                                best = xd[idx];
                                best_idx = idx as u32;
                            }
                        }
                    }
                    let o = (y * wo + xcol) * c + ci;
                    out[o] = best;
                    arg[o] = best_idx;
                }
            }
        }
        let r = self.requires(x);
        let v = Tensor::new(vec![ho, wo, c], out)?;
        self.push("maxpool2x2", v, Op::MaxPool2 { x, arg }, r)
    }

    // ── Shape plumbing ──────────────────────────────────────────────────

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::invalid("concat", "no inputs"));
        }
        let first = self.nodes[inputs[0].0].value.shape().to_vec();
        if axis >= first.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range")));
        }
        let mut axis_total = 0usize;
        for &id in inputs {
            let s = self.nodes[id.0].value.shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(d, (&a, &b))| d != axis && a != b)
            {
                return Err(Error::shape("concat", format!("{s:?} vs {first:?} off axis {axis}")));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![S::zero(); out_shape.iter().product()];
        let mut offset = 0usize;
        for &id in inputs {
            let s = self.nodes[id.0].value.shape();
            let n = s[axis];
            let xd = self.nodes[id.0].value.data();
            for o in 0..outer {
                let src = o * n * inner;
                let dst = (o * axis_total + offset) * inner;
                out[dst..dst + n * inner].copy_from_slice(&xd[src..src + n * inner]);
            }
            offset += n;
        }
        let r = inputs.iter().any(|&id| self.requires(id));
        let v = Tensor::new(out_shape, out)?;
        self.push("concat", v, Op::Concat { inputs: inputs.to_vec(), axis }, r)
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice_axis(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let shape = self.nodes[x.0].value.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::invalid(
                "slice_axis",
                format!("slice {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let n = shape[axis];
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![S::zero(); outer * len * inner];
        for o in 0..outer {
            let src = (o * n + start) * inner;
            let dst = o * len * inner;
            out[dst..dst + len * inner].copy_from_slice(&xd[src..src + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let r = self.requires(x);
        let v = Tensor::new(out_shape, out)?;
        self.push("slice_axis", v, Op::SliceAxis { x, axis, start }, r)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = &self.nodes[x.0].value;
        let numel: usize = shape.iter().product();
        if numel != v.numel() || shape.iter().any(|&e| e == 0) {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?} changes element count", v.shape()),
            ));
        }
        let out = Tensor::new(shape.to_vec(), v.data().to_vec())?;
        let r = self.requires(x);
        self.push("reshape", out, Op::Reshape { x }, r)
    }

    /// Place pillar feature rows `x[P, C]` at grid cells `coords[p] = (ix, iy)`
    /// of an `[h, w, C]` map; all other cells are zero.
    pub fn scatter2d(&mut self, x: NodeId, coords: &[(usize, usize)], h: usize, w: usize) -> Result<NodeId> {
        let shape = self.nodes[x.0].value.shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("scatter2d", format!("want [P,C], got {shape:?}")));
        }
        let (p, c) = (shape[0], shape[1]);
        if coords.len() != p {
            return Err(Error::shape("scatter2d", "coords length != P"));
        }
        let mut seen = vec![false; h * w];
        let xd = self.nodes[x.0].value.data();
        let mut out = vec![S::zero(); h * w * c];
        for (pi, &(ix, iy)) in coords.iter().enumerate() {
            if ix >= w || iy >= h {
                return Err(Error::invalid("scatter2d", format!("coord ({ix}, {iy}) outside {w}x{h}")));
            }
            if seen[iy * w + ix] {
                return Err(Error::DuplicateCoords(ix, iy));
            }
            seen[iy * w + ix] = true;
            let dst = (iy * w + ix) * c;
            out[dst..dst + c].copy_from_slice(&xd[pi * c..(pi + 1) * c]);
        }
        let r = self.requires(x);
        let v = Tensor::new(vec![h, w, c], out)?;
        self.push("scatter2d", v, Op::Scatter2d { x, coords: coords.to_vec() }, r)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root. Gradients of all reachable nodes
    /// with `requires_grad` become available through [`Tape::grad`];
    /// unreachable ones stay absent (i.e. zero).
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("root must be scalar, got {:?}", self.nodes[root.0].value.shape()),
            ));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![S::one()]);
        for id in (0..=root.0).rev() {
            if self.grads[id].is_none() || !self.nodes[id].requires {
                continue;
            }
            let g = self.grads[id].take().expect("checked above");
            self.backprop_node(id, &g)?;
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, id: usize, g: &[S]) -> Result<()> {
        fn buf<'g, S: Scalar>(
            grads: &'g mut [Option<Vec<S>>],
            nodes: &[Node<S>],
            n: NodeId,
        ) -> &'g mut Vec<S> {
            let numel = nodes[n.0].value.numel();
            grads[n.0].get_or_insert_with(|| vec![S::zero(); numel])
        }
        let Tape { nodes, grads, .. } = self;
        let requires = |n: NodeId| nodes[n.0].requires;
        let value = |n: NodeId| &nodes[n.0].value;
        match &nodes[id].op {
            Op::Leaf => {}
            Op::Add { a, b } | Op::Sub { a, b } => {
                let negate = matches!(nodes[id].op, Op::Sub { .. });
                let (a_shape, b_shape) = (value(*a).shape(), value(*b).shape());
                let out_shape = nodes[id].value.shape();
                if requires(*a) {
                    let ga = buf(grads, nodes, *a);
                    zip_broadcast(a_shape, b_shape, out_shape, |o, ia, _| ga[ia] += g[o]);
                }
                if requires(*b) {
                    let gb = buf(grads, nodes, *b);
                    zip_broadcast(a_shape, b_shape, out_shape, |o, _, ib| {
                        if negate {
                            gb[ib] -= g[o];
                        } else {
                            gb[ib] += g[o];
                        }
                    });
                }
            }
            Op::Mul { a, b } => {
                let (a_shape, b_shape) = (value(*a).shape(), value(*b).shape());
                let out_shape = nodes[id].value.shape();
                if requires(*a) {
                    let vb = value(*b).data();
                    let ga = buf(grads, nodes, *a);
                    zip_broadcast(a_shape, b_shape, out_shape, |o, ia, ib| {
                        ga[ia] += g[o] * vb[ib];
                    });
                }
                if requires(*b) {
                    let va = value(*a).data();
                    let gb = buf(grads, nodes, *b);
                    zip_broadcast(a_shape, b_shape, out_shape, |o, ia, ib| {
                        gb[ib] += g[o] * va[ia];
                    });
                }
            }
            Op::Div { a, b } => {
                let (a_shape, b_shape) = (value(*a).shape(), value(*b).shape());
                let out_shape = nodes[id].value.shape();
                if requires(*a) {
                    let vb = value(*b).data();
                    let ga = buf(grads, nodes, *a);
                    zip_broadcast(a_shape, b_shape, out_shape, |o, ia, ib| {
                        ga[ia] += g[o] / vb[ib];
                    });
                }
                if requires(*b) {
                    let va = value(*a).data();
                    let vb = value(*b).data();
                    let gb = buf(grads, nodes, *b);
                    zip_broadcast(a_shape, b_shape, out_shape, |o, ia, ib| {
                        gb[ib] -= g[o] * va[ia] / (vb[ib] * vb[ib]);
                    });
                }
            }
            Op::Maximum { a, b, first } => {
                let (a_shape, b_shape) = (value(*a).shape(), value(*b).shape());
                let out_shape = nodes[id].value.shape();
                if requires(*a) {
                    let ga = buf(grads, nodes, *a);
                    zip_broadcast(a_shape, b_shape, out_shape, |o, ia, _| {
                        if first[o] {
                            ga[ia] += g[o];
                        }
                    });
                }
                if requires(*b) {
                    let gb = buf(grads, nodes, *b);
                    zip_broadcast(a_shape, b_shape, out_shape, |o, _, ib| {
                        if !first[o] {
                            gb[ib] += g[o];
                        }
                    });
                }
            }
            Op::Neg { x } => {
                if requires(*x) {
                    let gx = buf(grads, nodes, *x);
                    for (gv, &go) in gx.iter_mut().zip(g) {
                        *gv -= go;
                    }
                }
            }
            Op::Scale { x, c } => {
                if requires(*x) {
                    let c = *c;
                    let gx = buf(grads, nodes, *x);
                    for (gv, &go) in gx.iter_mut().zip(g) {
                        *gv += go * c;
                    }
                }
            }
            Op::AddScalar { x } => {
                if requires(*x) {
                    let gx = buf(grads, nodes, *x);
                    for (gv, &go) in gx.iter_mut().zip(g) {
                        *gv += go;
                    }
                }
            }
            Op::Relu { x } => {
                if requires(*x) {
                    let xv = value(*x).data();
                    let gx = buf(grads, nodes, *x);
                    for i in 0..g.len() {
                        if xv[i] > S::zero() {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            Op::Sigmoid { x } => {
                if requires(*x) {
                    let y = nodes[id].value.data();
                    let gx = buf(grads, nodes, *x);
                    for i in 0..g.len() {
                        gx[i] += g[i] * y[i] * (S::one() - y[i]);
                    }
                }
            }
            Op::Swish { x } => {
                if requires(*x) {
                    let xv = value(*x).data();
                    let gx = buf(grads, nodes, *x);
                    for i in 0..g.len() {
                        let s = sigmoid_stable(xv[i]);
                        gx[i] += g[i] * s * (S::one() + xv[i] * (S::one() - s));
                    }
                }
            }
            Op::ShiftedSigmoid { x } => {
                if requires(*x) {
                    let two = S::from_f64(2.0);
                    let xv = value(*x).data();
                    let gx = buf(grads, nodes, *x);
                    for i in 0..g.len() {
                        let s = sigmoid_stable(xv[i]);
                        gx[i] += g[i] * two * s * (S::one() - s);
                    }
                }
            }
            Op::Softplus { x } => {
                if requires(*x) {
                    let xv = value(*x).data();
                    let gx = buf(grads, nodes, *x);
                    for i in 0..g.len() {
                        gx[i] += g[i] * sigmoid_stable(xv[i]);
                    }
                }
            }
            Op::Abs { x } => {
                if requires(*x) {
                    let xv = value(*x).data();
                    let gx = buf(grads, nodes, *x);
                    for i in 0..g.len() {
                        if xv[i] > S::zero() {
                            gx[i] += g[i];
                        } else if xv[i] < S::zero() {
                            gx[i] -= g[i];
                        }
                    }
                }
            }
            Op::PowConst { x, e } => {
                if requires(*x) {
                    let e = *e;
                    let xv = value(*x).data();
                    let gx = buf(grads, nodes, *x);
                    for i in 0..g.len() {
                        gx[i] += g[i] * e * xv[i].powf(e - S::one());
                    }
                }
            }
            Op::Linear { x, w, bias } => {
                let ws = value(*w).shape();
                let (k, m) = (ws[0], ws[1]);
                let rows = value(*x).numel() / k;
                if requires(*x) {
                    let wd = value(*w).data();
                    let gx = buf(grads, nodes, *x);
                    for r in 0..rows {
                        let grow = &g[r * m..(r + 1) * m];
                        let xrow = &mut gx[r * k..(r + 1) * k];
                        for (ki, xv) in xrow.iter_mut().enumerate() {
                            let wrow = &wd[ki * m..(ki + 1) * m];
                            let mut acc = S::zero();
                            for (&wv, &gv) in wrow.iter().zip(grow) {
                                acc += wv * gv;
                            }
                            *xv += acc;
                        }
                    }
                }
                if requires(*w) {
                    let xd = value(*x).data();
                    let gw = buf(grads, nodes, *w);
                    for r in 0..rows {
                        let grow = &g[r * m..(r + 1) * m];
                        let xrow = &xd[r * k..(r + 1) * k];
                        for (ki, &xv) in xrow.iter().enumerate() {
                            let wrow = &mut gw[ki * m..(ki + 1) * m];
                            for (wv, &gv) in wrow.iter_mut().zip(grow) {
                                *wv += xv * gv;
                            }
                        }
                    }
                }
                if let Some(b) = *bias {
                    if requires(b) {
                        let gb = buf(grads, nodes, b);
                        for grow in g.chunks_exact(m) {
                            for (bv, &gv) in gb.iter_mut().zip(grow) {
                                *bv += gv;
                            }
                        }
                    }
                }
            }
            Op::Conv2d { x, k, bias, geom } => {
                let padded = pad_input(value(*x).data(), geom);
                if requires(*k) {
                    let gk = conv_kernel_grad(&padded, g, geom);
                    let dst = buf(grads, nodes, *k);
                    for (d, s) in dst.iter_mut().zip(gk) {
                        *d += s;
                    }
                }
                if requires(*x) {
                    let kd = value(*k).data();
                    let gx_pad = conv_input_grad(kd, g, geom);
                    let wp = geom.w_in + geom.pad_w;
                    let gx = buf(grads, nodes, *x);
                    for y in 0..geom.h_in {
                        let src_row = ((y + geom.pad_top) * wp + geom.pad_left) * geom.c_in;
                        let dst_row = y * geom.w_in * geom.c_in;
                        for t in 0..geom.w_in * geom.c_in {
                            gx[dst_row + t] += gx_pad[src_row + t];
                        }
                    }
                }
                if let Some(b) = *bias {
                    if requires(b) {
                        let gb = buf(grads, nodes, b);
                        for grow in g.chunks_exact(geom.c_out) {
                            for (bv, &gv) in gb.iter_mut().zip(grow) {
                                *bv += gv;
                            }
                        }
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, mean, inv_std, frozen } => {
                let c = mean.len();
                let n = value(*x).numel() / c;
                let inv_n = S::one() / S::from_f64(n as f64);
                let xd = value(*x).data();
                let gd = value(*gamma).data();
                // Per-channel sums of dy and dy * x_hat.
                let mut s1 = vec![S::zero(); c];
                let mut s2 = vec![S::zero(); c];
                for (grow, xrow) in g.chunks_exact(c).zip(xd.chunks_exact(c)) {
                    for ci in 0..c {
                        let xh = (xrow[ci] - mean[ci]) * inv_std[ci];
                        s1[ci] += grow[ci];
                        s2[ci] += grow[ci] * xh;
                    }
                }
                if requires(*x) {
                    let gx = buf(grads, nodes, *x);
                    for (row, (grow, xrow)) in g.chunks_exact(c).zip(xd.chunks_exact(c)).enumerate() {
                        let dst = &mut gx[row * c..(row + 1) * c];
                        for ci in 0..c {
                            let scale = gd[ci] * inv_std[ci];
                            if *frozen {
                                dst[ci] += scale * grow[ci];
                            } else {
                                let xh = (xrow[ci] - mean[ci]) * inv_std[ci];
                                dst[ci] += scale * (grow[ci] - s1[ci] * inv_n - xh * s2[ci] * inv_n);
                            }
                        }
                    }
                }
                if requires(*gamma) {
                    let gg = buf(grads, nodes, *gamma);
                    for ci in 0..c {
                        gg[ci] += s2[ci];
                    }
                }
                if requires(*beta) {
                    let gb = buf(grads, nodes, *beta);
                    for ci in 0..c {
                        gb[ci] += s1[ci];
                    }
                }
            }
            Op::ReduceSum { x, axis } | Op::ReduceMean { x, axis } => {
                if requires(*x) {
                    let shape = value(*x).shape();
                    let outer: usize = shape[..*axis].iter().product();
                    let n = shape[*axis];
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let scale = if matches!(nodes[id].op, Op::ReduceMean { .. }) {
                        S::one() / S::from_f64(n as f64)
                    } else {
                        S::one()
                    };
                    let gx = buf(grads, nodes, *x);
                    for o in 0..outer {
                        for j in 0..n {
                            let base = (o * n + j) * inner;
                            for i in 0..inner {
                                gx[base + i] += g[o * inner + i] * scale;
                            }
                        }
                    }
                }
            }
            Op::ReduceMax { x, axis, arg } => {
                if requires(*x) {
                    let shape = value(*x).shape();
                    let n = shape[*axis];
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let gx = buf(grads, nodes, *x);
                    for (oi, &j) in arg.iter().enumerate() {
                        let (o, i) = (oi / inner, oi % inner);
                        gx[(o * n + j as usize) * inner + i] += g[oi];
                    }
                }
            }
            Op::RowMaxMasked { x, arg } => {
                if requires(*x) {
                    let gx = buf(grads, nodes, *x);
                    for (o, &src) in arg.iter().enumerate() {
                        if src >= 0 {
                            gx[src as usize] += g[o];
                        }
                    }
                }
            }
            Op::Upsample2x { x } => {
                if requires(*x) {
                    let shape = value(*x).shape();
                    let (h, w, c) = (shape[0], shape[1], shape[2]);
                    let w2 = 2 * w;
                    let gx = buf(grads, nodes, *x);
                    for y in 0..h {
                        for xcol in 0..w {
                            let dst = (y * w + xcol) * c;
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let src = ((2 * y + dy) * w2 + 2 * xcol + dx) * c;
                                    for ci in 0..c {
                                        gx[dst + ci] += g[src + ci];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::MaxPool2 { x, arg } => {
                if requires(*x) {
                    let gx = buf(grads, nodes, *x);
                    for (o, &src) in arg.iter().enumerate() {
                        gx[src as usize] += g[o];
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let out_shape = nodes[id].value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let axis_total = out_shape[*axis];
                let mut offset = 0usize;
                for &input in inputs {
                    let n = value(input).shape()[*axis];
                    if requires(input) {
                        let gi = buf(grads, nodes, input);
                        for o in 0..outer {
                            let src = (o * axis_total + offset) * inner;
                            let dst = o * n * inner;
                            for t in 0..n * inner {
                                gi[dst + t] += g[src + t];
                            }
                        }
                    }
                    offset += n;
                }
            }
            Op::SliceAxis { x, axis, start } => {
                if requires(*x) {
                    let in_shape = value(*x).shape();
                    let len = nodes[id].value.shape()[*axis];
                    let outer: usize = in_shape[..*axis].iter().product();
                    let inner: usize = in_shape[*axis + 1..].iter().product();
                    let n = in_shape[*axis];
                    let gx = buf(grads, nodes, *x);
                    for o in 0..outer {
                        let dst = (o * n + start) * inner;
                        let src = o * len * inner;
                        for t in 0..len * inner {
                            gx[dst + t] += g[src + t];
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if requires(*x) {
                    let gx = buf(grads, nodes, *x);
                    for (gv, &go) in gx.iter_mut().zip(g) {
                        *gv += go;
                    }
                }
            }
            Op::Scatter2d { x, coords } => {
                if requires(*x) {
                    let c = value(*x).shape()[1];
                    let w = nodes[id].value.shape()[1];
                    let gx = buf(grads, nodes, *x);
                    for (pi, &(ix, iy)) in coords.iter().enumerate() {
                        let src = (iy * w + ix) * c;
                        for ci in 0..c {
                            gx[pi * c + ci] += g[src + ci];
                        }
                    }
                }
            }
            Op::SumAll { x } => {
                if requires(*x) {
                    let go = g[0];
                    let gx = buf(grads, nodes, *x);
                    for gv in gx.iter_mut() {
                        *gv += go;
                    }
                }
            }
        }
        Ok(())
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
fn sigmoid_stable<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

#[inline]
fn softplus_stable<S: Scalar>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

fn pad_input<S: Scalar>(x: &[S], geom: &ConvGeom) -> Vec<S> {
    if geom.pad_h == 0 && geom.pad_w == 0 {
        return x.to_vec();
    }
    let (hp, wp) = (geom.h_in + geom.pad_h, geom.w_in + geom.pad_w);
    let mut padded = vec![S::zero(); hp * wp * geom.c_in];
    for y in 0..geom.h_in {
        let src = y * geom.w_in * geom.c_in;
        let dst = ((y + geom.pad_top) * wp + geom.pad_left) * geom.c_in;
        padded[dst..dst + geom.w_in * geom.c_in]
            .copy_from_slice(&x[src..src + geom.w_in * geom.c_in]);
    }
    padded
}

fn conv_mac_count(geom: &ConvGeom) -> usize {
    geom.h_out * geom.w_out * geom.kh * geom.kw * geom.c_in * geom.c_out
}

fn conv_forward<S: Scalar>(padded: &[S], kernel: &[S], bias: Option<&[S]>, geom: &ConvGeom) -> Vec<S> {
    let mut out = vec![S::zero(); geom.h_out * geom.w_out * geom.c_out];
    let row_len = geom.w_out * geom.c_out;
    let run_row = |oy: usize, orow: &mut [S]| {
        let wp = geom.w_in + geom.pad_w;
        for ox in 0..geom.w_out {
            let acc = &mut orow[ox * geom.c_out..(ox + 1) * geom.c_out];
            if let Some(b) = bias {
                acc.copy_from_slice(b);
            }
            for ky in 0..geom.kh {
                let iy = oy * geom.stride + ky;
                for kx in 0..geom.kw {
                    let ix = ox * geom.stride + kx;
                    let xrow = &padded[(iy * wp + ix) * geom.c_in..(iy * wp + ix + 1) * geom.c_in];
                    let kbase = (ky * geom.kw + kx) * geom.c_in * geom.c_out;
                    for (ci, &xv) in xrow.iter().enumerate() {
                        let krow = &kernel[kbase + ci * geom.c_out..kbase + (ci + 1) * geom.c_out];
                        for (a, &kv) in acc.iter_mut().zip(krow) {
                            *a += xv * kv;
                        }
                    }
                }
            }
        }
    };
    if conv_mac_count(geom) >= PAR_MAC_THRESHOLD {
        out.par_chunks_exact_mut(row_len)
            .enumerate()
            .for_each(|(oy, orow)| run_row(oy, orow));
    } else {
        for (oy, orow) in out.chunks_exact_mut(row_len).enumerate() {
            run_row(oy, orow);
        }
    }
    out
}

fn conv_kernel_grad<S: Scalar>(padded: &[S], g: &[S], geom: &ConvGeom) -> Vec<S> {
    let tap = geom.c_in * geom.c_out;
    let mut gk = vec![S::zero(); geom.kh * geom.kw * tap];
    let wp = geom.w_in + geom.pad_w;
    let run_tap = |pos: usize, gtap: &mut [S]| {
        let (ky, kx) = (pos / geom.kw, pos % geom.kw);
        for oy in 0..geom.h_out {
            let iy = oy * geom.stride + ky;
            for ox in 0..geom.w_out {
                let ix = ox * geom.stride + kx;
                let xrow = &padded[(iy * wp + ix) * geom.c_in..(iy * wp + ix + 1) * geom.c_in];
                let grow = &g[(oy * geom.w_out + ox) * geom.c_out..(oy * geom.w_out + ox + 1) * geom.c_out];
                for (ci, &xv) in xrow.iter().enumerate() {
                    let dst = &mut gtap[ci * geom.c_out..(ci + 1) * geom.c_out];
                    for (d, &gv) in dst.iter_mut().zip(grow) {
                        *d += xv * gv;
                    }
                }
            }
        }
    };
    if conv_mac_count(geom) >= PAR_MAC_THRESHOLD {
        gk.par_chunks_exact_mut(tap)
            .enumerate()
            .for_each(|(pos, gtap)| run_tap(pos, gtap));
    } else {
        for (pos, gtap) in gk.chunks_exact_mut(tap).enumerate() {
            run_tap(pos, gtap);
        }
    }
    gk
}

fn conv_input_grad<S: Scalar>(kernel: &[S], g: &[S], geom: &ConvGeom) -> Vec<S> {
    let (hp, wp) = (geom.h_in + geom.pad_h, geom.w_in + geom.pad_w);
    let mut gx = vec![S::zero(); hp * wp * geom.c_in];
    let row_len = wp * geom.c_in;
    let run_row = |iy: usize, grow_out: &mut [S]| {
        for ky in 0..geom.kh {
            if iy < ky || (iy - ky) % geom.stride != 0 {
                continue;
            }
            let oy = (iy - ky) / geom.stride;
            if oy >= geom.h_out {
                continue;
            }
            for ix in 0..wp {
                for kx in 0..geom.kw {
                    if ix < kx || (ix - kx) % geom.stride != 0 {
                        continue;
                    }
                    let ox = (ix - kx) / geom.stride;
                    if ox >= geom.w_out {
                        continue;
                    }
                    let grow = &g[(oy * geom.w_out + ox) * geom.c_out..(oy * geom.w_out + ox + 1) * geom.c_out];
                    let kbase = (ky * geom.kw + kx) * geom.c_in * geom.c_out;
                    let dst = &mut grow_out[ix * geom.c_in..(ix + 1) * geom.c_in];
                    for (ci, d) in dst.iter_mut().enumerate() {
                        let krow = &kernel[kbase + ci * geom.c_out..kbase + (ci + 1) * geom.c_out];
                        let mut acc = S::zero();
                        for (&kv, &gv) in krow.iter().zip(grow) {
                            acc += kv * gv;
                        }
                        *d += acc;
                    }
                }
            }
        }
    };
    if conv_mac_count(geom) >= PAR_MAC_THRESHOLD {
        gx.par_chunks_exact_mut(row_len)
            .enumerate()
            .for_each(|(iy, grow_out)| run_row(iy, grow_out));
    } else {
        for (iy, grow_out) in gx.chunks_exact_mut(row_len).enumerate() {
            run_row(iy, grow_out);
        }
    }
    gx
}
