//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every op records its inputs; [`Graph::backward`] walks the tape in reverse
//! and returns exact gradients for every parameter of the bound
//! [`ModelParams`].

use std::borrow::Cow;
use std::collections::HashMap;

use crate::losses;
use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

use super::params::ModelParams;
use super::SlotError;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    in_h: usize,
    in_w: usize,
    cin: usize,
    out_h: usize,
    out_w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }
}

enum Op<T> {
    Leaf,
    Param(usize),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    Linear { x: Var, w: Var, b: Option<Var>, rows: usize, din: usize, dout: usize },
    MatMul { a: Var, b: Var, ta: bool, tb: bool, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    AddScalar { x: Var },
    Silu { x: Var },
    Sigmoid { x: Var },
    Tanh { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: T },
    Softmax { x: Var },
    NormalizeCols { x: Var, eps: T },
    Select { x: Var, index: usize },
    Reshape { x: Var },
    Column { x: Var, col: usize },
    Resize { x: Var, out_h: usize, out_w: usize },
    WeightedBce { w: Var, mask: Vec<T>, s: T },
    BackgroundNll { w: Var, covered: Vec<T> },
    MaskedMse { pred: Var, target: Tensor<T>, valid: Vec<bool>, frames: usize },
    WeightedSum { terms: Vec<(Var, T)> },
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
}

/// Gradients aligned with the parameters of a [`ModelParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(params: &ModelParams<T>) -> Self {
        Self {
            tensors: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, c: T) {
        for t in &mut self.tensors {
            t.scale(c);
        }
    }

    pub fn global_norm(&self) -> T {
        self.tensors.iter().map(|t| t.sq_norm()).sum::<T>().sqrt()
    }
}

/// Computation tape bound to one parameter set.
pub struct Graph<'a, T: Scalar> {
    params: &'a ModelParams<T>,
    nodes: Vec<Node<'a, T>>,
    param_vars: HashMap<usize, Var>,
}

fn silu_grad<T: Scalar>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    s * (T::one() + x * (T::one() - s))
}

fn bilinear_taps(out: usize, input: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / out as f64;
    (0..out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let patch = g.patch();
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &mut cols[(oy * g.out_w + ox) * patch..(oy * g.out_w + ox + 1) * patch];
            let mut o = 0;
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    let dst = &mut row[o..o + g.cin];
                    if iy >= 0 && ix >= 0 && (iy as usize) < g.in_h && (ix as usize) < g.in_w {
                        let src = (iy as usize * g.in_w + ix as usize) * g.cin;
                        dst.copy_from_slice(&x[src..src + g.cin]);
                    } else {
                        dst.fill(T::zero());
                    }
                    o += g.cin;
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let patch = g.patch();
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &cols[(oy * g.out_w + ox) * patch..(oy * g.out_w + ox + 1) * patch];
            let mut o = 0;
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < g.in_h && (ix as usize) < g.in_w {
                        let dst = (iy as usize * g.in_w + ix as usize) * g.cin;
                        for (d, &s) in dx[dst..dst + g.cin].iter_mut().zip(&row[o..o + g.cin]) {
                            *d += s;
                        }
                    }
                    o += g.cin;
                }
            }
        }
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new(params: &'a ModelParams<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'a ModelParams<T> {
        self.params
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input (receives no gradient).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf bound to the named parameter. Panics on unknown names, which are
    /// programming errors rather than data errors.
    pub fn param(&mut self, name: &str) -> Var {
        let idx = self
            .params
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        if let Some(&v) = self.param_vars.get(&idx) {
            return v;
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(&self.params.tensors()[idx]),
            op: Op::Param(idx),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(idx, v);
        v
    }

    /// 2D convolution on `[B, H, W, Cin]` with weight `[kh, kw, Cin, Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be [B,H,W,C]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [kh,kw,Cin,Cout]");
        assert_eq!(xs[3], ws[2], "conv2d channel mismatch");
        let (kh, kw) = (ws[0], ws[1]);
        let geom = ConvGeom {
            batch: xs[0],
            in_h: xs[1],
            in_w: xs[2],
            cin: xs[3],
            out_h: (xs[1] + 2 * pad - kh) / stride + 1,
            out_w: (xs[2] + 2 * pad - kw) / stride + 1,
            cout: ws[3],
            kh,
            kw,
            stride,
            pad,
        };
        let out_px = geom.out_h * geom.out_w;
        let mut out = vec![T::zero(); geom.batch * out_px * geom.cout];
        let mut cols = vec![T::zero(); out_px * geom.patch()];
        let in_len = geom.in_h * geom.in_w * geom.cin;
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            for bi in 0..geom.batch {
                im2col(&xv[bi * in_len..(bi + 1) * in_len], &geom, &mut cols);
                let o = &mut out[bi * out_px * geom.cout..(bi + 1) * out_px * geom.cout];
                for row in o.chunks_exact_mut(geom.cout) {
                    row.copy_from_slice(bv);
                }
                gemm(out_px, geom.patch(), geom.cout, &cols, false, wv, false, T::one(), o);
            }
        }
        let t = Tensor::from_vec(&[geom.batch, geom.out_h, geom.out_w, geom.cout], out).unwrap();
        self.push(t, Op::Conv2d { x, w, b, geom })
    }

    /// `x·w (+ b)` applied to the last dimension of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let din = *xs.last().expect("linear on scalar");
        assert_eq!(ws, vec![din, ws[1]], "linear weight shape");
        let dout = ws[1];
        let rows = self.value(x).len() / din;
        let mut out = vec![T::zero(); rows * dout];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_exact_mut(dout) {
                row.copy_from_slice(bv);
            }
        }
        gemm(rows, din, dout, self.value(x).data(), false, self.value(w).data(), false, T::one(), &mut out);
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let t = Tensor::from_vec(&shape, out).unwrap();
        self.push(t, Op::Linear { x, w, b, rows, din, dout })
    }

    /// 2D product `op(a)·op(b)`.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        assert_eq!(as_.len(), 2);
        assert_eq!(bs.len(), 2);
        let (m, k) = if ta { (as_[1], as_[0]) } else { (as_[0], as_[1]) };
        let (k2, n) = if tb { (bs[1], bs[0]) } else { (bs[0], bs[1]) };
        assert_eq!(k, k2, "matmul inner dimension");
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a).data(), ta, self.value(b).data(), tb, T::zero(), &mut out);
        let t = Tensor::from_vec(&[m, n], out).unwrap();
        self.push(t, Op::MatMul { a, b, ta, tb, m, k, n })
    }

    /// `a + b`, where `b`'s shape may be a suffix of `a`'s (broadcast over
    /// leading dimensions).
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let inner = bv.len();
        assert!(
            av.shape().ends_with(bv.shape()),
            "add: {:?} does not broadcast onto {:?}",
            bv.shape(),
            av.shape()
        );
        let mut out = av.data().to_vec();
        for chunk in out.chunks_exact_mut(inner.max(1)) {
            for (o, &v) in chunk.iter_mut().zip(bv.data()) {
                *o += v;
            }
        }
        let t = Tensor::from_vec(av.shape(), out).unwrap();
        self.push(t, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "sub shape");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x - y).collect();
        let t = Tensor::from_vec(av.shape(), data).unwrap();
        self.push(t, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "mul shape");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::from_vec(av.shape(), data).unwrap();
        self.push(t, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::Scale { x, c })
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let t = self.value(x).map(|v| v + c);
        self.push(t, Op::AddScalar { x })
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let neg = self.scale(x, -T::one());
        self.add_scalar(neg, T::one())
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v / (T::one() + (-v).exp()));
        self.push(t, Op::Silu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(t, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.tanh());
        self.push(t, Op::Tanh { x })
    }

    /// Layer normalization over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let eps = T::lit(1e-5);
        let xv = self.value(x);
        let d = xv.last_dim();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        assert_eq!(gv.len(), d, "layer norm gain");
        let mut out = vec![T::zero(); xv.len()];
        let inv_d = T::lit(1.0 / d as f64);
        for (row, o) in xv.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let inv_std = T::one() / (var + eps).sqrt();
            for i in 0..d {
                o[i] = (row[i] - mean) * inv_std * gv[i] + bv[i];
            }
        }
        let t = Tensor::from_vec(xv.shape(), out).unwrap();
        self.push(t, Op::LayerNorm { x, gamma, beta, eps })
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut out = xv.data().to_vec();
        for row in out.chunks_exact_mut(d) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let t = Tensor::from_vec(xv.shape(), out).unwrap();
        self.push(t, Op::Softmax { x })
    }

    /// Divides each column of an `[N, K]` matrix by its sum (plus `eps`).
    pub fn normalize_cols(&mut self, x: Var, eps: T) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape().len(), 2);
        let k = xv.shape()[1];
        let mut sums = vec![eps; k];
        for row in xv.data().chunks_exact(k) {
            for (s, &v) in sums.iter_mut().zip(row) {
                *s += v;
            }
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_exact_mut(k) {
            for (v, &s) in row.iter_mut().zip(&sums) {
                *v /= s;
            }
        }
        let t = Tensor::from_vec(xv.shape(), out).unwrap();
        self.push(t, Op::NormalizeCols { x, eps })
    }

    /// Slice `index` along the leading dimension.
    pub fn select(&mut self, x: Var, index: usize) -> Var {
        let t = self.value(x).index0(index);
        self.push(t, Op::Select { x, index })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape).expect("reshape size");
        self.push(t, Op::Reshape { x })
    }

    /// Column `col` of an `[N, K]` matrix as an `[N]` vector.
    pub fn column(&mut self, x: Var, col: usize) -> Var {
        let xv = self.value(x);
        let k = xv.shape()[1];
        let data: Vec<T> = xv.data().chunks_exact(k).map(|r| r[col]).collect();
        let t = Tensor::from_vec(&[data.len()], data).unwrap();
        self.push(t, Op::Column { x, col })
    }

    /// Bilinear resize of `[B, H, W, C]` (half-pixel centres, edge clamp).
    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let xv = self.value(x);
        let s = xv.shape().to_vec();
        let t = resize_forward(xv, out_h, out_w);
        debug_assert_eq!(t.shape(), &[s[0], out_h, out_w, s[3]]);
        self.push(t, Op::Resize { x, out_h, out_w })
    }

    pub fn weighted_bce(&mut self, w: Var, mask: Vec<T>, s: T) -> Var {
        let l = losses::weighted_bce(&mask, self.value(w).data(), s).expect("bce length");
        self.push(Tensor::scalar(l), Op::WeightedBce { w, mask, s })
    }

    pub fn background_nll(&mut self, w: Var, covered: Vec<T>) -> Var {
        let l = losses::background_nll(self.value(w).data(), &covered).expect("bg length");
        self.push(Tensor::scalar(l), Op::BackgroundNll { w, covered })
    }

    /// Mean over frames of the per-frame completion MSE on `[F, H, W, C]`,
    /// restricted to `valid` (`F·H·W` flags). Frames without valid pixels
    /// are skipped; with none at all the loss is zero.
    pub fn masked_mse(&mut self, pred: Var, target: Tensor<T>, valid: Vec<bool>) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "masked mse shape");
        let frames = pv.shape()[0];
        let c = pv.last_dim();
        let px = valid.len() / frames.max(1);
        let mut acc = T::zero();
        let mut used = 0usize;
        for f in 0..frames {
            let vf = &valid[f * px..(f + 1) * px];
            let r = f * px * c..(f + 1) * px * c;
            if let Ok(l) = losses::completion_mse(&pv.data()[r.clone()], &target.data()[r], vf, c) {
                acc += l;
                used += 1;
            }
        }
        let l = if used > 0 { acc / T::lit(used as f64) } else { T::zero() };
        self.push(Tensor::scalar(l), Op::MaskedMse { pred, target, valid, frames })
    }

    /// `Σ cᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: Vec<(Var, T)>) -> Var {
        let v = terms.iter().map(|&(x, c)| c * self.value(x).data()[0]).sum::<T>();
        self.push(Tensor::scalar(v), Op::WeightedSum { terms })
    }

    /// Gradients of the scalar `loss` with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, SlotError> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        let mut out = Gradients::zeros_like(self.params);

        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(p) => out.tensors[*p].add_assign(&gy),
                op => self.backprop_op(op, &node.value, &gy, &mut grads),
            }
        }

        for (t, name) in out.tensors.iter().zip(self.params.names()) {
            if !t.is_finite() {
                return Err(SlotError::NonFiniteGradient(name.clone()));
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if matches!(self.nodes[v.0].op, Op::Leaf) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants_grad(&self, v: Var) -> bool {
        !matches!(self.nodes[v.0].op, Op::Leaf)
    }

    fn backprop_op(&self, op: &Op<T>, y: &Tensor<T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match *op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::Conv2d { x, w, b, geom } => {
                let xv = self.value(x).data();
                let wv = self.value(w).data();
                let out_px = geom.out_h * geom.out_w;
                let in_len = geom.in_h * geom.in_w * geom.cin;
                let mut dw = vec![T::zero(); wv.len()];
                let mut db = vec![T::zero(); geom.cout];
                let need_dx = self.wants_grad(x);
                let mut dx = if need_dx { vec![T::zero(); xv.len()] } else { Vec::new() };
                let mut cols = vec![T::zero(); out_px * geom.patch()];
                for bi in 0..geom.batch {
                    let g = &gy.data()[bi * out_px * geom.cout..(bi + 1) * out_px * geom.cout];
                    for row in g.chunks_exact(geom.cout) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    im2col(&xv[bi * in_len..(bi + 1) * in_len], &geom, &mut cols);
                    gemm(geom.patch(), out_px, geom.cout, &cols, true, g, false, T::one(), &mut dw);
                    if need_dx {
                        gemm(out_px, geom.cout, geom.patch(), g, false, wv, true, T::zero(), &mut cols);
                        col2im(&cols, &geom, &mut dx[bi * in_len..(bi + 1) * in_len]);
                    }
                }
                self.accumulate(grads, w, Tensor::from_vec(self.shape(w), dw).unwrap());
                self.accumulate(grads, b, Tensor::from_vec(self.shape(b), db).unwrap());
                if need_dx {
                    self.accumulate(grads, x, Tensor::from_vec(self.shape(x), dx).unwrap());
                }
            }
            Op::Linear { x, w, b, rows, din, dout } => {
                let xv = self.value(x).data();
                let mut dw = vec![T::zero(); din * dout];
                gemm(din, rows, dout, xv, true, gy.data(), false, T::zero(), &mut dw);
                self.accumulate(grads, w, Tensor::from_vec(self.shape(w), dw).unwrap());
                if let Some(b) = b {
                    let mut db = vec![T::zero(); dout];
                    for row in gy.data().chunks_exact(dout) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, b, Tensor::from_vec(&[dout], db).unwrap());
                }
                if self.wants_grad(x) {
                    let mut dx = vec![T::zero(); rows * din];
                    gemm(rows, dout, din, gy.data(), false, self.value(w).data(), true, T::zero(), &mut dx);
                    self.accumulate(grads, x, Tensor::from_vec(self.shape(x), dx).unwrap());
                }
            }
            Op::MatMul { a, b, ta, tb, m, k, n } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let g = gy.data();
                if self.wants_grad(a) {
                    let mut da = vec![T::zero(); m * k];
                    if !ta {
                        // dA = dC · op(B)ᵀ
                        gemm(m, n, k, g, false, bv, !tb, T::zero(), &mut da);
                    } else {
                        // dA = op(B) · dCᵀ  (k×m)
                        gemm(k, n, m, bv, tb, g, true, T::zero(), &mut da);
                    }
                    self.accumulate(grads, a, Tensor::from_vec(self.shape(a), da).unwrap());
                }
                if self.wants_grad(b) {
                    let mut db = vec![T::zero(); k * n];
                    if !tb {
                        // dB = op(A)ᵀ · dC
                        gemm(k, m, n, av, !ta, g, false, T::zero(), &mut db);
                    } else {
                        // dB = dCᵀ · op(A)  (n×k)
                        gemm(n, m, k, g, true, av, ta, T::zero(), &mut db);
                    }
                    self.accumulate(grads, b, Tensor::from_vec(self.shape(b), db).unwrap());
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, a, gy.clone());
                if self.wants_grad(b) {
                    let bs = self.shape(b).to_vec();
                    let inner = bs.iter().product::<usize>().max(1);
                    let mut db = vec![T::zero(); inner];
                    for chunk in gy.data().chunks_exact(inner) {
                        for (d, &v) in db.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, b, Tensor::from_vec(&bs, db).unwrap());
                }
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, a, gy.clone());
                self.accumulate(grads, b, gy.map(|v| -v));
            }
            Op::Mul { a, b } => {
                let av = self.value(a);
                let bv = self.value(b);
                if self.wants_grad(a) {
                    let d = gy.data().iter().zip(bv.data()).map(|(&g, &v)| g * v).collect();
                    self.accumulate(grads, a, Tensor::from_vec(av.shape(), d).unwrap());
                }
                if self.wants_grad(b) {
                    let d = gy.data().iter().zip(av.data()).map(|(&g, &v)| g * v).collect();
                    self.accumulate(grads, b, Tensor::from_vec(bv.shape(), d).unwrap());
                }
            }
            Op::Scale { x, c } => self.accumulate(grads, x, gy.map(|v| v * c)),
            Op::AddScalar { x } => self.accumulate(grads, x, gy.clone()),
            Op::Silu { x } => {
                let xv = self.value(x);
                let d = gy.data().iter().zip(xv.data()).map(|(&g, &v)| g * silu_grad(v)).collect();
                self.accumulate(grads, x, Tensor::from_vec(xv.shape(), d).unwrap());
            }
            Op::Sigmoid { x } => {
                let d = gy.data().iter().zip(y.data()).map(|(&g, &s)| g * s * (T::one() - s)).collect();
                self.accumulate(grads, x, Tensor::from_vec(y.shape(), d).unwrap());
            }
            Op::Tanh { x } => {
                let d = gy.data().iter().zip(y.data()).map(|(&g, &t)| g * (T::one() - t * t)).collect();
                self.accumulate(grads, x, Tensor::from_vec(y.shape(), d).unwrap());
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = self.value(x);
                let d = xv.last_dim();
                let gv = self.value(gamma).data();
                let inv_d = T::lit(1.0 / d as f64);
                let mut dx = vec![T::zero(); xv.len()];
                let mut dg = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut xhat = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for ((row, g), o) in xv.data().chunks_exact(d).zip(gy.data().chunks_exact(d)).zip(dx.chunks_exact_mut(d)) {
                    let mean = row.iter().copied().sum::<T>() * inv_d;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
                    let inv_std = T::one() / (var + eps).sqrt();
                    let mut mean_dxhat = T::zero();
                    let mut mean_dxhat_xhat = T::zero();
                    for i in 0..d {
                        xhat[i] = (row[i] - mean) * inv_std;
                        dxhat[i] = g[i] * gv[i];
                        dg[i] += g[i] * xhat[i];
                        dbeta[i] += g[i];
                        mean_dxhat += dxhat[i];
                        mean_dxhat_xhat += dxhat[i] * xhat[i];
                    }
                    mean_dxhat *= inv_d;
                    mean_dxhat_xhat *= inv_d;
                    for i in 0..d {
                        o[i] = inv_std * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
                    }
                }
                self.accumulate(grads, gamma, Tensor::from_vec(&[d], dg).unwrap());
                self.accumulate(grads, beta, Tensor::from_vec(&[d], dbeta).unwrap());
                self.accumulate(grads, x, Tensor::from_vec(xv.shape(), dx).unwrap());
            }
            Op::Softmax { x } => {
                let d = y.last_dim();
                let mut dx = vec![T::zero(); y.len()];
                for ((yr, gr), o) in y.data().chunks_exact(d).zip(gy.data().chunks_exact(d)).zip(dx.chunks_exact_mut(d)) {
                    let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                    for i in 0..d {
                        o[i] = yr[i] * (gr[i] - dot);
                    }
                }
                self.accumulate(grads, x, Tensor::from_vec(y.shape(), dx).unwrap());
            }
            Op::NormalizeCols { x, eps } => {
                let xv = self.value(x);
                let k = xv.shape()[1];
                let mut sums = vec![eps; k];
                for row in xv.data().chunks_exact(k) {
                    for (s, &v) in sums.iter_mut().zip(row) {
                        *s += v;
                    }
                }
                // Σ_l g_lj · x_lj / s_j²
                let mut corr = vec![T::zero(); k];
                for (xr, gr) in xv.data().chunks_exact(k).zip(gy.data().chunks_exact(k)) {
                    for j in 0..k {
                        corr[j] += gr[j] * xr[j];
                    }
                }
                for j in 0..k {
                    corr[j] /= sums[j] * sums[j];
                }
                let mut dx = vec![T::zero(); xv.len()];
                for (gr, o) in gy.data().chunks_exact(k).zip(dx.chunks_exact_mut(k)) {
                    for j in 0..k {
                        o[j] = gr[j] / sums[j] - corr[j];
                    }
                }
                self.accumulate(grads, x, Tensor::from_vec(xv.shape(), dx).unwrap());
            }
            Op::Select { x, index } => {
                if self.wants_grad(x) {
                    let xs = self.shape(x);
                    let mut dx = Tensor::zeros(xs);
                    let inner = gy.len();
                    dx.data_mut()[index * inner..(index + 1) * inner].copy_from_slice(gy.data());
                    self.accumulate(grads, x, dx);
                }
            }
            Op::Reshape { x } => {
                let g = gy.clone().reshape(self.shape(x)).unwrap();
                self.accumulate(grads, x, g);
            }
            Op::Column { x, col } => {
                let xs = self.shape(x);
                let k = xs[1];
                let mut dx = Tensor::zeros(xs);
                for (i, &g) in gy.data().iter().enumerate() {
                    dx.data_mut()[i * k + col] = g;
                }
                self.accumulate(grads, x, dx);
            }
            Op::Resize { x, out_h, out_w } => {
                if self.wants_grad(x) {
                    let dx = resize_backward(gy, self.shape(x), out_h, out_w);
                    self.accumulate(grads, x, dx);
                }
            }
            Op::WeightedBce { w, ref mask, s } => {
                let g0 = gy.data()[0];
                let wv = self.value(w);
                let d = losses::weighted_bce_grad(mask, wv.data(), s).into_iter().map(|v| v * g0).collect();
                self.accumulate(grads, w, Tensor::from_vec(wv.shape(), d).unwrap());
            }
            Op::BackgroundNll { w, ref covered } => {
                let g0 = gy.data()[0];
                let wv = self.value(w);
                let d = losses::background_nll_grad(wv.data(), covered).into_iter().map(|v| v * g0).collect();
                self.accumulate(grads, w, Tensor::from_vec(wv.shape(), d).unwrap());
            }
            Op::MaskedMse { pred, ref target, ref valid, frames } => {
                let g0 = gy.data()[0];
                let pv = self.value(pred);
                let c = pv.last_dim();
                let px = valid.len() / frames.max(1);
                let used = (0..frames).filter(|f| valid[f * px..(f + 1) * px].iter().any(|&v| v)).count();
                if used == 0 {
                    return;
                }
                let scale = g0 / T::lit(used as f64);
                let mut d = vec![T::zero(); pv.len()];
                for f in 0..frames {
                    let vf = &valid[f * px..(f + 1) * px];
                    if !vf.iter().any(|&v| v) {
                        continue;
                    }
                    let r = f * px * c..(f + 1) * px * c;
                    let g = losses::completion_mse_grad(&pv.data()[r.clone()], &target.data()[r.clone()], vf, c);
                    for (o, v) in d[r].iter_mut().zip(g) {
                        *o = v * scale;
                    }
                }
                self.accumulate(grads, pred, Tensor::from_vec(pv.shape(), d).unwrap());
            }
            Op::WeightedSum { ref terms } => {
                let g0 = gy.data()[0];
                for &(x, c) in terms {
                    self.accumulate(grads, x, Tensor::full(self.shape(x), g0 * c));
                }
            }
        }
    }
}

/// Bilinear resize of a `[B, H, W, C]` tensor outside any graph.
pub fn resize_forward<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let s = x.shape();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let ty = bilinear_taps(out_h, h);
    let tx = bilinear_taps(out_w, w);
    let xv = x.data();
    let mut out = vec![T::zero(); b * out_h * out_w * c];
    for bi in 0..b {
        let base = bi * h * w * c;
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::lit(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::lit(fx);
                let w00 = (T::one() - fy) * (T::one() - fx);
                let w01 = (T::one() - fy) * fx;
                let w10 = fy * (T::one() - fx);
                let w11 = fy * fx;
                let o = ((bi * out_h + oy) * out_w + ox) * c;
                let p00 = base + (y0 * w + x0) * c;
                let p01 = base + (y0 * w + x1) * c;
                let p10 = base + (y1 * w + x0) * c;
                let p11 = base + (y1 * w + x1) * c;
                for ch in 0..c {
                    out[o + ch] = w00 * xv[p00 + ch] + w01 * xv[p01 + ch] + w10 * xv[p10 + ch] + w11 * xv[p11 + ch];
                }
            }
        }
    }
    Tensor::from_vec(&[b, out_h, out_w, c], out).unwrap()
}

fn resize_backward<T: Scalar>(gy: &Tensor<T>, in_shape: &[usize], out_h: usize, out_w: usize) -> Tensor<T> {
    let (b, h, w, c) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let ty = bilinear_taps(out_h, h);
    let tx = bilinear_taps(out_w, w);
    let g = gy.data();
    let mut dx = vec![T::zero(); b * h * w * c];
    for bi in 0..b {
        let base = bi * h * w * c;
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::lit(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::lit(fx);
                let w00 = (T::one() - fy) * (T::one() - fx);
                let w01 = (T::one() - fy) * fx;
                let w10 = fy * (T::one() - fx);
                let w11 = fy * fx;
                let o = ((bi * out_h + oy) * out_w + ox) * c;
                for ch in 0..c {
                    let gv = g[o + ch];
                    dx[base + (y0 * w + x0) * c + ch] += w00 * gv;
                    dx[base + (y0 * w + x1) * c + ch] += w01 * gv;
                    dx[base + (y1 * w + x0) * c + ch] += w10 * gv;
                    dx[base + (y1 * w + x1) * c + ch] += w11 * gv;
                }
            }
        }
    }
    Tensor::from_vec(in_shape, dx).unwrap()
}
