//! Append-only computation tape with reverse-mode gradients.
//!
//! Every operation appends one node holding its output value and enough
//! information to replay its vector-Jacobian product. `backward` walks the
//! nodes in reverse order and accumulates into the gradient buffers of the
//! leaves that require it.

use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{
    bilinear_taps, col2im, conv_output_extent, gemm_nn, gemm_nt, gemm_tn, im2col, ConvGeom,
};
use super::{Real, Tensor};
use crate::error::{invalid, mismatch, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Edges grouped by destination: the sources of destination `d` are
/// `src[offsets[d]..offsets[d + 1]]`, ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeIndex {
    pub n_src: usize,
    pub n_dst: usize,
    pub src: Vec<usize>,
    pub offsets: Vec<usize>,
}

impl EdgeIndex {
    /// Builds the index from `(dst, src)` pairs sorted by `(dst, src)`.
    pub fn from_sorted_pairs(
        n_src: usize,
        n_dst: usize,
        pairs: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let mut offsets = vec![0usize; n_dst + 1];
        let mut src = Vec::new();
        let mut last: Option<(usize, usize)> = None;
        for (d, s) in pairs {
            if d >= n_dst || s >= n_src {
                return Err(invalid(
                    "edge index",
                    format!("edge ({d},{s}) outside {n_dst}x{n_src}"),
                ));
            }
            if let Some(prev) = last {
                if prev >= (d, s) {
                    return Err(invalid(
                        "edge index",
                        "edges must be strictly sorted by (dst, src)",
                    ));
                }
            }
            last = Some((d, s));
            offsets[d + 1] += 1;
            src.push(s);
        }
        for d in 0..n_dst {
            offsets[d + 1] += offsets[d];
        }
        Ok(Self {
            n_src,
            n_dst,
            src,
            offsets,
        })
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    pub fn sources_of(&self, dst: usize) -> &[usize] {
        &self.src[self.offsets[dst]..self.offsets[dst + 1]]
    }

    fn dst_of_each(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        (0..self.n_dst).flat_map(move |d| {
            (self.offsets[d]..self.offsets[d + 1]).map(move |e| (e, d, self.src[e]))
        })
    }
}

/// Per-row scalar function with its gradient: `f(row, aux_row) -> (value, d value / d row)`.
pub type RowFn<T> = fn(&[T], &[T]) -> (T, Vec<T>);

/// Test hook that multiplies the input gradients produced by one kind of
/// operation, used to prove that gradient checks catch broken rules.
#[derive(Clone, Copy, Debug)]
pub struct BackwardFault {
    pub op: &'static str,
    pub factor: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Relu,
    Sigmoid,
    Softplus,
}

enum Op<T> {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        map: Option<Vec<usize>>,
    },
    Scale(Var, T),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Unary(Unary, Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax(Var),
    Resize(Var),
    Crop {
        x: Var,
        top: usize,
        left: usize,
    },
    Paste {
        base: Var,
        patch: Var,
        top: usize,
        left: usize,
    },
    Sum(Var),
    Mean(Var),
    GlobalAvgPool(Var),
    Reshape(Var),
    Permute {
        x: Var,
        map: Vec<usize>,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    EdgeDot {
        q: Var,
        k: Var,
        edges: Arc<EdgeIndex>,
        scale: T,
    },
    SegmentSoftmax {
        x: Var,
        edges: Arc<EdgeIndex>,
    },
    Spmm {
        w: Var,
        v: Var,
        edges: Arc<EdgeIndex>,
    },
    BceLogits {
        x: Var,
        target: Vec<T>,
    },
    RowFn {
        x: Var,
        jac: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary { kind, .. } => match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "mul",
                BinaryKind::Div => "div",
            },
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Unary(u, _) => match u {
                Unary::Relu => "relu",
                Unary::Sigmoid => "sigmoid",
                Unary::Softplus => "softplus",
            },
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Resize(_) => "bilinear_resize",
            Op::Crop { .. } => "crop",
            Op::Paste { .. } => "paste",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Reshape(_) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::GatherRows { .. } => "gather_rows",
            Op::EdgeDot { .. } => "edge_dot",
            Op::SegmentSoftmax { .. } => "segment_softmax",
            Op::Spmm { .. } => "spmm",
            Op::BceLogits { .. } => "bce_logits",
            Op::RowFn { .. } => "row_fn",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    cached: HashMap<usize, Var>,
    fault: Option<BackwardFault>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            cached: HashMap::new(),
            fault: None,
        }
    }

    pub fn with_fault(fault: BackwardFault) -> Self {
        Self {
            fault: Some(fault),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node; handles from before the reset become invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.cached.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf; `None` if it does not require one.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = n.grad.as_mut() {
                g.iter_mut().for_each(|x| *x = T::zero());
            }
        }
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let grad = requires_grad.then(|| vec![T::zero(); value.numel()]);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf registered under `key`; later calls with the same key return the
    /// same node so that shared parameters accumulate into one gradient.
    pub fn cached_leaf(&mut self, key: usize, make: impl FnOnce() -> Tensor<T>) -> Var {
        if let Some(&v) = self.cached.get(&key) {
            return v;
        }
        let v = self.leaf(make(), true);
        self.cached.insert(key, v);
        v
    }

    pub fn cached(&self, key: usize) -> Option<Var> {
        self.cached.get(&key).copied()
    }

    /// Value copy that the tape treats as a constant.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    // ── elementwise ──────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let a_shape = self.shape(a).to_vec();
        let b_shape = self.shape(b).to_vec();
        let map = broadcast_map(&a_shape, &b_shape)
            .ok_or_else(|| mismatch("elementwise", &a_shape, &b_shape))?;
        let (ad, bd) = (self.data(a), self.data(b));
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let out: Vec<T> = match &map {
            None => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            Some(m) => ad.iter().zip(m).map(|(&x, &j)| f(x, bd[j])).collect(),
        };
        let value = Tensor::new(a_shape, out)?;
        Ok(self.push(value, Op::Binary { kind, a, b, map }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = Tensor::from_fn(self.shape(x), |i| self.data(x)[i] * c);
        self.push(value, Op::Scale(x, c), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(Unary::Softplus, x)
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let f: fn(T) -> T = match kind {
            Unary::Relu => |v| v.max(T::zero()),
            Unary::Sigmoid => sigmoid::<T>,
            Unary::Softplus => softplus::<T>,
        };
        let value = Tensor::from_fn(self.shape(x), |i| f(self.data(x)[i]));
        self.push(value, Op::Unary(kind, x), &[x])
    }

    // ── linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_nn(m, k, n, self.data(a), self.data(b), &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// 2-D convolution with zero padding. `x: [B,Cin,H,W]`, `w: [Cout,Cin,kh,kw]`, `b: [Cout]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(mismatch("conv2d", &sx, &sw));
        }
        let (batch, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(invalid(
                "conv2d",
                format!("kernel {kh}x{kw} must have odd extents"),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(mismatch("conv2d bias", self.shape(b), &[cout]));
            }
        }
        let (Some(ho), Some(wo)) = (
            conv_output_extent(h, kh, stride, pad),
            conv_output_extent(wd, kw, stride, pad),
        ) else {
            return Err(invalid(
                "conv2d",
                format!("input {h}x{wd} too small for kernel {kh}x{kw} with pad {pad}"),
            ));
        };
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        };
        let (pl, ol) = (geom.patch_len(), geom.out_len());
        let mut out = vec![T::zero(); batch * cout * ol];
        let mut cols = vec![T::zero(); pl * ol];
        let (xd, wdata) = (self.data(x), self.data(w));
        for bi in 0..batch {
            let img = &xd[bi * cin * h * wd..(bi + 1) * cin * h * wd];
            let dst = &mut out[bi * cout * ol..(bi + 1) * cout * ol];
            if let Some(b) = b {
                for (c, chunk) in dst.chunks_mut(ol).enumerate() {
                    chunk
                        .iter_mut()
                        .for_each(|v| *v = self.nodes[b.0].value.data()[c]);
                }
            }
            if kh == 1 && kw == 1 && stride == 1 && pad == 0 {
                gemm_nn(cout, pl, ol, wdata, img, dst);
            } else {
                im2col(&geom, img, &mut cols);
                gemm_nn(cout, pl, ol, wdata, &cols, dst);
            }
        }
        let value = Tensor::new(vec![batch, cout, ho, wo], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    // ── normalization ────────────────────────────────────────────────

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(invalid(
                "softmax",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xd = self.data(x);
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let m = (0..len).map(|j| xd[at(j)]).fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for j in 0..len {
                    let e = (xd[at(j)] - m).exp();
                    out[at(j)] = e;
                    s += e;
                }
                for j in 0..len {
                    out[at(j)] /= s;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Softmax { x, axis }, &[x]))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let len = *shape.last().expect("rank >= 1");
        let xd = self.data(x);
        let mut out = vec![T::zero(); xd.len()];
        for (row, dst) in xd.chunks(len).zip(out.chunks_mut(len)) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = v - lse;
            }
        }
        let value = Tensor::new(shape, out).expect("same shape");
        self.push(value, Op::LogSoftmax(x), &[x])
    }

    // ── spatial ──────────────────────────────────────────────────────

    /// Bilinear resize of `[B,C,H,W]` with half-pixel centers (align-corners off).
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(invalid(
                "bilinear_resize",
                format!("expected [B,C,H,W], got {shape:?}"),
            ));
        }
        if out_h == 0 || out_w == 0 {
            return Err(invalid("bilinear_resize", "output extents must be >= 1"));
        }
        let (planes, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
        let (ty, tx) = (bilinear_taps(h, out_h), bilinear_taps(w, out_w));
        let xd = self.data(x);
        let mut out = vec![T::zero(); planes * out_h * out_w];
        for p in 0..planes {
            let src = &xd[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let fy = T::of(fy);
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let fx = T::of(fx);
                    let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                    dst[oy * out_w + ox] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
        let value = Tensor::new(vec![shape[0], shape[1], out_h, out_w], out)?;
        Ok(self.push(value, Op::Resize(x), &[x]))
    }

    pub fn crop(&mut self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(invalid(
                "crop",
                format!("expected [B,C,H,W], got {shape:?}"),
            ));
        }
        if h == 0 || w == 0 || top + h > shape[2] || left + w > shape[3] {
            return Err(invalid(
                "crop",
                format!(
                    "rectangle (top={top}, left={left}, h={h}, w={w}) outside {}x{}",
                    shape[2], shape[3]
                ),
            ));
        }
        let (planes, sh, sw) = (shape[0] * shape[1], shape[2], shape[3]);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(planes * h * w);
        for p in 0..planes {
            for y in 0..h {
                let row = (p * sh + top + y) * sw + left;
                out.extend_from_slice(&xd[row..row + w]);
            }
        }
        let value = Tensor::new(vec![shape[0], shape[1], h, w], out)?;
        Ok(self.push(value, Op::Crop { x, top, left }, &[x]))
    }

    /// Copy of `base` with the region at `(top, left)` replaced by `patch`.
    pub fn paste(&mut self, base: Var, patch: Var, top: usize, left: usize) -> Result<Var> {
        let (sb, sp) = (self.shape(base).to_vec(), self.shape(patch).to_vec());
        if sb.len() != 4
            || sp.len() != 4
            || sb[..2] != sp[..2]
            || top + sp[2] > sb[2]
            || left + sp[3] > sb[3]
        {
            return Err(mismatch("paste", &sb, &sp));
        }
        let mut out = self.data(base).to_vec();
        let pd = self.data(patch);
        let (h, w) = (sp[2], sp[3]);
        for p in 0..sb[0] * sb[1] {
            for y in 0..h {
                let row = (p * sb[2] + top + y) * sb[3] + left;
                out[row..row + w].copy_from_slice(&pd[(p * h + y) * w..(p * h + y + 1) * w]);
            }
        }
        let value = Tensor::new(sb, out)?;
        Ok(self.push(
            value,
            Op::Paste {
                base,
                patch,
                top,
                left,
            },
            &[base, patch],
        ))
    }

    // ── reductions and reshaping ─────────────────────────────────────

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s: T = d.iter().copied().sum::<T>() / T::of(d.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// `[B,C,H,W] → [B,C]`
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(invalid(
                "global_avg_pool",
                format!("expected [B,C,H,W], got {shape:?}"),
            ));
        }
        let area = shape[2] * shape[3];
        let inv = T::one() / T::of(area as f64);
        let out: Vec<T> = self
            .data(x)
            .chunks(area)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(vec![shape[0], shape[1]], out)?;
        Ok(self.push(value, Op::GlobalAvgPool(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(invalid(
                "permute",
                format!("{perm:?} is not a permutation of rank {}", shape.len()),
            ));
        }
        let in_strides = strides(&shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let n = self.data(x).len();
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; out_shape.len()];
        for _ in 0..n {
            map.push(idx.iter().zip(perm).map(|(&i, &p)| i * in_strides[p]).sum());
            for ax in (0..idx.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        let xd = self.data(x);
        let out = map.iter().map(|&j| xd[j]).collect();
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::Permute { x, map }, &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.permute(x, &[1, 0])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(invalid(
                "concat",
                format!("axis {axis} out of range for {base:?}"),
            ));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.data(v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(invalid(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            out.extend_from_slice(&xd[from..from + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::Slice { x, axis, start }, &[x]))
    }

    /// Selects rows of `x` viewed as `[N, rest]`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = shape[0];
        let width = self.data(x).len() / n;
        if rows.is_empty() || rows.iter().any(|&r| r >= n) {
            return Err(invalid(
                "gather_rows",
                format!("row indices {rows:?} invalid for {n} rows"),
            ));
        }
        let xd = self.data(x);
        let out = rows
            .iter()
            .flat_map(|&r| xd[r * width..(r + 1) * width].iter().copied())
            .collect();
        let mut out_shape = shape;
        out_shape[0] = rows.len();
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    // ── sparse attention primitives ──────────────────────────────────

    /// `out[e] = scale · q[dst(e)] · k[src(e)]` for every edge.
    pub fn edge_dot(&mut self, q: Var, k: Var, edges: &Arc<EdgeIndex>, scale: T) -> Result<Var> {
        let (sq, sk) = (self.shape(q), self.shape(k));
        if sq.len() != 2
            || sk.len() != 2
            || sq[1] != sk[1]
            || sq[0] != edges.n_dst
            || sk[0] != edges.n_src
        {
            return Err(mismatch("edge_dot", sq, sk));
        }
        if edges.is_empty() {
            return Err(invalid("edge_dot", "empty edge set"));
        }
        let d = sq[1];
        let (qd, kd) = (self.data(q), self.data(k));
        let mut out = vec![T::zero(); edges.len()];
        for (e, dst, src) in edges.dst_of_each() {
            let qr = &qd[dst * d..(dst + 1) * d];
            let kr = &kd[src * d..(src + 1) * d];
            out[e] = qr.iter().zip(kr).map(|(&a, &b)| a * b).sum::<T>() * scale;
        }
        let value = Tensor::new(vec![edges.len()], out)?;
        Ok(self.push(
            value,
            Op::EdgeDot {
                q,
                k,
                edges: Arc::clone(edges),
                scale,
            },
            &[q, k],
        ))
    }

    /// Softmax over the edges entering each destination.
    pub fn segment_softmax(&mut self, x: Var, edges: &Arc<EdgeIndex>) -> Result<Var> {
        if self.shape(x) != [edges.len()] {
            return Err(mismatch("segment_softmax", self.shape(x), &[edges.len()]));
        }
        let xd = self.data(x);
        let mut out = vec![T::zero(); xd.len()];
        for d in 0..edges.n_dst {
            let (lo, hi) = (edges.offsets[d], edges.offsets[d + 1]);
            if lo == hi {
                continue;
            }
            let m = xd[lo..hi].iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for e in lo..hi {
                out[e] = (xd[e] - m).exp();
                s += out[e];
            }
            for o in &mut out[lo..hi] {
                *o /= s;
            }
        }
        let value = Tensor::new(vec![xd.len()], out)?;
        Ok(self.push(
            value,
            Op::SegmentSoftmax {
                x,
                edges: Arc::clone(edges),
            },
            &[x],
        ))
    }

    /// `out[d] = Σ_{e into d} w[e] · v[src(e)]`; destinations without edges get zeros.
    pub fn spmm(&mut self, w: Var, v: Var, edges: &Arc<EdgeIndex>) -> Result<Var> {
        let sv = self.shape(v);
        if self.shape(w) != [edges.len()] || sv.len() != 2 || sv[0] != edges.n_src {
            return Err(mismatch("spmm", self.shape(w), sv));
        }
        let d = sv[1];
        let (wd, vd) = (self.data(w), self.data(v));
        let mut out = vec![T::zero(); edges.n_dst * d];
        for (e, dst, src) in edges.dst_of_each() {
            let row = &mut out[dst * d..(dst + 1) * d];
            for (o, &x) in row.iter_mut().zip(&vd[src * d..(src + 1) * d]) {
                *o += wd[e] * x;
            }
        }
        let value = Tensor::new(vec![edges.n_dst, d], out)?;
        Ok(self.push(
            value,
            Op::Spmm {
                w,
                v,
                edges: Arc::clone(edges),
            },
            &[w, v],
        ))
    }

    // ── losses ───────────────────────────────────────────────────────

    /// Mean binary cross-entropy on logits against soft targets in `[0,1]`.
    pub fn bce_with_logits(&mut self, x: Var, target: &[T]) -> Result<Var> {
        if self.data(x).len() != target.len() {
            return Err(mismatch("bce_with_logits", self.shape(x), &[target.len()]));
        }
        let n = T::of(target.len() as f64);
        let total: T = self
            .data(x)
            .iter()
            .zip(target)
            .map(|(&p, &y)| p.max(T::zero()) - p * y + (T::one() + (-p.abs()).exp()).ln())
            .sum();
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::BceLogits {
                x,
                target: target.to_vec(),
            },
            &[x],
        ))
    }

    /// Applies `f` to each row of `x: [N, W]` with the matching row of `aux`
    /// (`aux.len()` must be a multiple of `N`), producing `[N]`.
    pub fn row_fn(&mut self, x: Var, aux: &[T], f: RowFn<T>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || aux.len() % shape[0] != 0 {
            return Err(invalid(
                "row_fn",
                format!("x {shape:?} with aux of length {}", aux.len()),
            ));
        }
        let (n, w) = (shape[0], shape[1]);
        let aw = aux.len() / n;
        let xd = self.data(x);
        let mut out = Vec::with_capacity(n);
        let mut jac = Vec::with_capacity(n * w);
        for r in 0..n {
            let (v, g) = f(&xd[r * w..(r + 1) * w], &aux[r * aw..(r + 1) * aw]);
            debug_assert_eq!(g.len(), w);
            out.push(v);
            jac.extend(g);
        }
        let value = Tensor::new(vec![n], out)?;
        Ok(self.push(value, Op::RowFn { x, jac }, &[x]))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Accumulates `d loss / d leaf` into every leaf that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NotScalar(shape.to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(up) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(up);
                continue;
            }
            let mut sink = GradSink {
                nodes: &self.nodes,
                grads: &mut grads,
                factor: None,
            };
            if let Some(fault) = self.fault.filter(|f| f.op == node.op.name()) {
                sink.factor = Some(T::of(fault.factor));
            }
            backprop(&self.nodes, idx, &up, &mut sink);
        }
        for (idx, g) in grads.into_iter().enumerate() {
            let node = &mut self.nodes[idx];
            if let (Op::Leaf, Some(g), Some(acc)) = (&node.op, g, node.grad.as_mut()) {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
        }
        Ok(())
    }
}

struct GradSink<'a, T> {
    nodes: &'a [Node<T>],
    grads: &'a mut Vec<Option<Vec<T>>>,
    factor: Option<T>,
}

impl<T: Real> GradSink<'_, T> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient buffer of `v`, or `None` when `v` needs no gradient.
    fn buf(&mut self, v: Var) -> Option<&mut [T]> {
        if !self.wants(v) {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn add_each(&mut self, v: Var, f: impl Fn(usize) -> T) {
        let factor = self.factor;
        if let Some(g) = self.buf(v) {
            for (i, gi) in g.iter_mut().enumerate() {
                *gi += factor.map_or_else(|| f(i), |c| f(i) * c);
            }
        }
    }

    fn add_at(&mut self, v: Var, i: usize, val: T) {
        let factor = self.factor;
        if let Some(g) = self.buf(v) {
            g[i] += factor.map_or(val, |c| val * c);
        }
    }
}

fn backprop<T: Real>(nodes: &[Node<T>], idx: usize, up: &[T], sink: &mut GradSink<'_, T>) {
    let val = |v: Var| nodes[v.0].value.data();
    let out = nodes[idx].value.data();
    match &nodes[idx].op {
        Op::Leaf => {}
        Op::Binary { kind, a, b, map } => {
            let (ad, bd) = (val(*a), val(*b));
            let bi = |i: usize| map.as_ref().map_or(i, |m| m[i]);
            match kind {
                BinaryKind::Add | BinaryKind::Sub => {
                    sink.add_each(*a, |i| up[i]);
                    let sign = if *kind == BinaryKind::Add {
                        T::one()
                    } else {
                        -T::one()
                    };
                    for (i, &u) in up.iter().enumerate() {
                        sink.add_at(*b, bi(i), sign * u);
                    }
                }
                BinaryKind::Mul => {
                    sink.add_each(*a, |i| up[i] * bd[bi(i)]);
                    for (i, &u) in up.iter().enumerate() {
                        sink.add_at(*b, bi(i), u * ad[i]);
                    }
                }
                BinaryKind::Div => {
                    sink.add_each(*a, |i| up[i] / bd[bi(i)]);
                    for (i, &u) in up.iter().enumerate() {
                        let y = bd[bi(i)];
                        sink.add_at(*b, bi(i), -u * ad[i] / (y * y));
                    }
                }
            }
        }
        Op::Scale(x, c) => sink.add_each(*x, |i| up[i] * *c),
        Op::MatMul(a, b) => {
            let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            if sink.wants(*a) {
                let mut ga = vec![T::zero(); m * k];
                gemm_nt(m, n, k, up, val(*b), &mut ga);
                sink.add_each(*a, |i| ga[i]);
            }
            if sink.wants(*b) {
                let mut gb = vec![T::zero(); k * n];
                gemm_tn(k, m, n, val(*a), up, &mut gb);
                sink.add_each(*b, |i| gb[i]);
            }
        }
        Op::Conv2d { x, w, b, geom } => {
            let batch = nodes[x.0].value.shape()[0];
            let cout = nodes[w.0].value.shape()[0];
            let (pl, ol) = (geom.patch_len(), geom.out_len());
            let in_len = geom.cin * geom.h * geom.w;
            let pointwise = geom.kh == 1 && geom.kw == 1 && geom.stride == 1 && geom.pad == 0;
            let (xd, wdata) = (val(*x), val(*w));
            let mut cols = vec![T::zero(); pl * ol];
            let mut gw = vec![T::zero(); cout * pl];
            let mut gx = vec![T::zero(); batch * in_len];
            let mut dcols = vec![T::zero(); pl * ol];
            for bi in 0..batch {
                let ub = &up[bi * cout * ol..(bi + 1) * cout * ol];
                let img = &xd[bi * in_len..(bi + 1) * in_len];
                if sink.wants(*w) {
                    if pointwise {
                        gemm_nt(cout, ol, pl, ub, img, &mut gw);
                    } else {
                        im2col(geom, img, &mut cols);
                        gemm_nt(cout, ol, pl, ub, &cols, &mut gw);
                    }
                }
                if sink.wants(*x) {
                    let gxb = &mut gx[bi * in_len..(bi + 1) * in_len];
                    if pointwise {
                        gemm_tn(pl, cout, ol, wdata, ub, gxb);
                    } else {
                        dcols.iter_mut().for_each(|v| *v = T::zero());
                        gemm_tn(pl, cout, ol, wdata, ub, &mut dcols);
                        col2im(geom, &dcols, gxb);
                    }
                }
            }
            sink.add_each(*w, |i| gw[i]);
            sink.add_each(*x, |i| gx[i]);
            if let Some(b) = b {
                let mut gb = vec![T::zero(); cout];
                for (j, chunk) in up.chunks(ol).enumerate() {
                    gb[j % cout] += chunk.iter().copied().sum::<T>();
                }
                sink.add_each(*b, |i| gb[i]);
            }
        }
        Op::Unary(kind, x) => {
            let xd = val(*x);
            match kind {
                Unary::Relu => {
                    sink.add_each(*x, |i| if xd[i] > T::zero() { up[i] } else { T::zero() })
                }
                Unary::Sigmoid => sink.add_each(*x, |i| up[i] * out[i] * (T::one() - out[i])),
                Unary::Softplus => sink.add_each(*x, |i| up[i] * sigmoid(xd[i])),
            }
        }
        Op::Softmax { x, axis } => {
            let (outer, len, inner) = split_axis(nodes[x.0].value.shape(), *axis);
            let mut g = vec![T::zero(); out.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let dot: T = (0..len).map(|j| up[at(j)] * out[at(j)]).sum();
                    for j in 0..len {
                        g[at(j)] = out[at(j)] * (up[at(j)] - dot);
                    }
                }
            }
            sink.add_each(*x, |i| g[i]);
        }
        Op::LogSoftmax(x) => {
            let len = *nodes[x.0].value.shape().last().expect("rank >= 1");
            let mut g = vec![T::zero(); out.len()];
            for ((gr, ur), yr) in g.chunks_mut(len).zip(up.chunks(len)).zip(out.chunks(len)) {
                let s: T = ur.iter().copied().sum();
                for ((gv, &u), &y) in gr.iter_mut().zip(ur).zip(yr) {
                    *gv = u - y.exp() * s;
                }
            }
            sink.add_each(*x, |i| g[i]);
        }
        Op::Resize(x) => {
            let s = nodes[x.0].value.shape();
            let os = nodes[idx].value.shape();
            let (planes, h, w, oh, ow) = (s[0] * s[1], s[2], s[3], os[2], os[3]);
            let (ty, tx) = (bilinear_taps(h, oh), bilinear_taps(w, ow));
            let mut g = vec![T::zero(); planes * h * w];
            for p in 0..planes {
                let gp = &mut g[p * h * w..(p + 1) * h * w];
                let ub = &up[p * oh * ow..(p + 1) * oh * ow];
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    let fy = T::of(fy);
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let fx = T::of(fx);
                        let u = ub[oy * ow + ox];
                        gp[y0 * w + x0] += u * (T::one() - fy) * (T::one() - fx);
                        gp[y0 * w + x1] += u * (T::one() - fy) * fx;
                        gp[y1 * w + x0] += u * fy * (T::one() - fx);
                        gp[y1 * w + x1] += u * fy * fx;
                    }
                }
            }
            sink.add_each(*x, |i| g[i]);
        }
        Op::Crop { x, top, left } => {
            let s = nodes[x.0].value.shape();
            let os = nodes[idx].value.shape();
            let (h, w) = (os[2], os[3]);
            for p in 0..s[0] * s[1] {
                for y in 0..h {
                    for xx in 0..w {
                        sink.add_at(
                            *x,
                            (p * s[2] + top + y) * s[3] + left + xx,
                            up[(p * h + y) * w + xx],
                        );
                    }
                }
            }
        }
        Op::Paste {
            base,
            patch,
            top,
            left,
        } => {
            let sb = nodes[base.0].value.shape();
            let sp = nodes[patch.0].value.shape();
            let (h, w) = (sp[2], sp[3]);
            let inside = |i: usize| {
                let (y, x) = ((i / sb[3]) % sb[2], i % sb[3]);
                y >= *top && y < top + h && x >= *left && x < left + w
            };
            sink.add_each(*base, |i| if inside(i) { T::zero() } else { up[i] });
            sink.add_each(*patch, |i| {
                let (p, y, x) = (i / (h * w), (i / w) % h, i % w);
                up[(p * sb[2] + top + y) * sb[3] + left + x]
            });
        }
        Op::Sum(x) => sink.add_each(*x, |_| up[0]),
        Op::Mean(x) => {
            let n = T::of(nodes[x.0].value.numel() as f64);
            sink.add_each(*x, |_| up[0] / n);
        }
        Op::GlobalAvgPool(x) => {
            let s = nodes[x.0].value.shape();
            let area = s[2] * s[3];
            let inv = T::one() / T::of(area as f64);
            sink.add_each(*x, |i| up[i / area] * inv);
        }
        Op::Reshape(x) => sink.add_each(*x, |i| up[i]),
        Op::Permute { x, map } => {
            for (o, &j) in map.iter().enumerate() {
                sink.add_at(*x, j, up[o]);
            }
        }
        Op::Concat { xs, axis } => {
            let shape = nodes[idx].value.shape();
            let (outer, total, inner) = split_axis(shape, *axis);
            let mut offset = 0;
            for &v in xs {
                let len = nodes[v.0].value.shape()[*axis];
                if sink.wants(v) {
                    sink.add_each(v, |i| {
                        let (o, rest) = (i / (len * inner), i % (len * inner));
                        up[o * total * inner + offset * inner + rest]
                    });
                }
                offset += len;
            }
            debug_assert!(outer * total * inner == up.len());
        }
        Op::Slice { x, axis, start } => {
            let (_, full, inner) = split_axis(nodes[x.0].value.shape(), *axis);
            let len = nodes[idx].value.shape()[*axis];
            for (i, &u) in up.iter().enumerate() {
                let (o, rest) = (i / (len * inner), i % (len * inner));
                sink.add_at(*x, (o * full + start) * inner + rest, u);
            }
        }
        Op::GatherRows { x, rows } => {
            let width = up.len() / rows.len();
            for (k, &r) in rows.iter().enumerate() {
                for c in 0..width {
                    sink.add_at(*x, r * width + c, up[k * width + c]);
                }
            }
        }
        Op::EdgeDot { q, k, edges, scale } => {
            let d = nodes[q.0].value.shape()[1];
            let (qd, kd) = (val(*q), val(*k));
            for (e, dst, src) in edges.dst_of_each() {
                let u = up[e] * *scale;
                for c in 0..d {
                    sink.add_at(*q, dst * d + c, u * kd[src * d + c]);
                    sink.add_at(*k, src * d + c, u * qd[dst * d + c]);
                }
            }
        }
        Op::SegmentSoftmax { x, edges } => {
            let mut g = vec![T::zero(); out.len()];
            for dst in 0..edges.n_dst {
                let (lo, hi) = (edges.offsets[dst], edges.offsets[dst + 1]);
                let dot: T = (lo..hi).map(|e| up[e] * out[e]).sum();
                for e in lo..hi {
                    g[e] = out[e] * (up[e] - dot);
                }
            }
            sink.add_each(*x, |i| g[i]);
        }
        Op::Spmm { w, v, edges } => {
            let d = nodes[v.0].value.shape()[1];
            let (wd, vd) = (val(*w), val(*v));
            for (e, dst, src) in edges.dst_of_each() {
                let ur = &up[dst * d..(dst + 1) * d];
                let dw: T = ur
                    .iter()
                    .zip(&vd[src * d..(src + 1) * d])
                    .map(|(&a, &b)| a * b)
                    .sum();
                sink.add_at(*w, e, dw);
                for (c, &u) in ur.iter().enumerate() {
                    sink.add_at(*v, src * d + c, wd[e] * u);
                }
            }
        }
        Op::BceLogits { x, target } => {
            let xd = val(*x);
            let n = T::of(target.len() as f64);
            sink.add_each(*x, |i| up[0] * (sigmoid(xd[i]) - target[i]) / n);
        }
        Op::RowFn { x, jac } => {
            let w = nodes[x.0].value.shape()[1];
            sink.add_each(*x, |i| up[i / w] * jac[i]);
        }
    }
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + exp(v))`, returning `v` itself above 30.
pub(crate) fn softplus<T: Real>(v: T) -> T {
    if v > T::of(30.0) {
        v
    } else {
        v.max(T::zero()) + (T::one() + (-v.abs()).exp()).ln()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Index of `b` for each flat index of `a` under trailing-dimension
/// broadcasting; `Some(None)` when shapes are equal, `None` when incompatible.
fn broadcast_map(a: &[usize], b: &[usize]) -> Option<Option<Vec<usize>>> {
    if a == b {
        return Some(None);
    }
    if b.len() > a.len() {
        return None;
    }
    let lead = a.len() - b.len();
    let b_strides = strides(b);
    let mut eff = vec![0usize; a.len()];
    for (i, (&bd, &bs)) in b.iter().zip(&b_strides).enumerate() {
        let ad = a[lead + i];
        if bd == ad {
            eff[lead + i] = bs;
        } else if bd != 1 {
            return None;
        }
    }
    let n: usize = a.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; a.len()];
    let mut cur = 0usize;
    for _ in 0..n {
        map.push(cur);
        for ax in (0..a.len()).rev() {
            idx[ax] += 1;
            cur += eff[ax];
            if idx[ax] < a[ax] {
                break;
            }
            cur -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Some(Some(map))
}
