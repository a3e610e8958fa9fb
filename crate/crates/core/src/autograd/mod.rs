//! Minimal tape-based reverse-mode differentiation over `ndarray`.
//!
//! A [`Tape`] records every operation of one forward pass. Values are stored
//! in standard (row-major) layout; [`Tape::backward`] walks the tape in
//! reverse and returns gradients for every leaf created with
//! [`Tape::param`]. Tapes are cheap to create and are meant to be thrown away
//! after each step.
//!
//! Image-like tensors are channels-last `(batch, height, width, channels)`.

mod conv;
pub mod gradcheck;

use std::collections::HashMap;

use ndarray::{linalg::general_mat_mul, Array2, ArrayD, ArrayView2, Axis, IxDyn, NdFloat, Zip};

pub use conv::{col2im_3x3, im2col_3x3};

/// Scalar types the tape can differentiate.
pub trait Float: NdFloat + Default + std::iter::Sum {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Float for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Float for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Linear(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Silu { x: Var, sig: ArrayD<F> },
    Softmax(Var),
    LayerNorm { x: Var, rstd: ArrayD<F> },
    Conv3x3(Var, Var),
    AvgPool2(Var),
    Upsample2(Var),
    Concat(Var, Var),
    MeanAll(Var),
}

struct Node<F> {
    value: ArrayD<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Gradients of a scalar with respect to the tape's parameters.
pub struct Gradients<F> {
    grads: HashMap<Var, ArrayD<F>>,
}

impl<F: Float> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<F>> {
        self.grads.get(&v)
    }

    pub fn remove(&mut self, v: Var) -> Option<ArrayD<F>> {
        self.grads.remove(&v)
    }
}

/// Records operations for reverse-mode differentiation.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: ArrayD<F>) -> Var {
        self.push_leaf(value, false)
    }

    /// Differentiable leaf; its gradient is returned by [`Tape::backward`].
    pub fn param(&mut self, value: ArrayD<F>) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: ArrayD<F>, needs_grad: bool) -> Var {
        let value = standard(value);
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: ArrayD<F>, op: Op<F>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &ArrayD<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_binary(self.value(a), self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_binary(self.value(a), self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product with numpy-style broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = broadcast_binary(self.value(a), self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let value = self.value(a).mapv(|x| x * s);
        self.push(value, Op::Scale(a, s), &[a])
    }

    /// `x[..., k] @ w[k, n] -> [..., n]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(wv.ndim(), 2, "linear weight must be 2-D");
        let k = *xv.shape().last().expect("linear input must have rank >= 1");
        assert_eq!(k, wv.shape()[0], "linear: inner dimensions differ");
        let n = wv.shape()[1];
        let m = xv.len() / k.max(1);
        let x2 = view2(xv, m, k);
        let w2 = view2(wv, k, n);
        let out = x2.dot(&w2);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = out.into_shape_with_order(IxDyn(&shape)).unwrap();
        self.push(value, Op::Linear(x, w), &[x, w])
    }

    /// Batched matrix product over the leading axis. With `trans_b` the
    /// second operand is `[batch, n, k]` and is transposed per batch.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.ndim(), 3, "bmm expects rank-3 operands");
        assert_eq!(bv.ndim(), 3, "bmm expects rank-3 operands");
        let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        assert_eq!(bv.shape()[0], batch, "bmm: batch sizes differ");
        let n = if trans_b {
            assert_eq!(bv.shape()[2], k, "bmm: inner dimensions differ");
            bv.shape()[1]
        } else {
            assert_eq!(bv.shape()[1], k, "bmm: inner dimensions differ");
            bv.shape()[2]
        };
        let mut out = ArrayD::<F>::zeros(IxDyn(&[batch, m, n]));
        for i in 0..batch {
            let ai = av.index_axis(Axis(0), i).into_dimensionality().unwrap();
            let bi: ArrayView2<F> = bv.index_axis(Axis(0), i).into_dimensionality().unwrap();
            let mut oi = out.index_axis_mut(Axis(0), i).into_dimensionality().unwrap();
            if trans_b {
                general_mat_mul(F::one(), &ai, &bi.t(), F::zero(), &mut oi);
            } else {
                general_mat_mul(F::one(), &ai, &bi, F::zero(), &mut oi);
            }
        }
        self.push(out, Op::Bmm { a, b, trans_b }, &[a, b])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self
            .value(x)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|e| panic!("reshape to {shape:?}: {e}"));
        self.push(value, Op::Reshape(x), &[x])
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Var {
        let value = permute_copy(self.value(x), axes);
        self.push(value, Op::Permute(x, axes.to_vec()), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let sig = self.value(x).mapv(sigmoid);
        let mut value = self.value(x).clone();
        for (v, &s) in value.as_slice_mut().unwrap().iter_mut().zip(sig.as_slice().unwrap()) {
            *v = *v * s;
        }
        self.push(value, Op::Silu { x, sig }, &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        let n = *value.shape().last().expect("softmax needs rank >= 1");
        for row in value.as_slice_mut().unwrap().chunks_exact_mut(n.max(1)) {
            let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
            let mut sum = F::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            let inv = F::one() / sum;
            for v in row.iter_mut() {
                *v = *v * inv;
            }
        }
        self.push(value, Op::Softmax(x), &[x])
    }

    /// Normalization over the last axis without affine terms.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let c = *xv.shape().last().unwrap();
        let rows = xv.len() / c;
        let eps = F::from_f64(eps);
        let n = F::from_f64(c as f64);
        let mut value = xv.clone();
        let mut rstd = ArrayD::<F>::zeros(IxDyn(&[rows]));
        let slice = value.as_slice_mut().unwrap();
        for (r, chunk) in slice.chunks_mut(c).enumerate() {
            let mean = chunk.iter().copied().sum::<F>() / n;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let inv = F::one() / (var + eps).sqrt();
            for v in chunk.iter_mut() {
                *v = (*v - mean) * inv;
            }
            rstd[r] = inv;
        }
        self.push(value, Op::LayerNorm { x, rstd }, &[x])
    }

    /// Same-padded 3x3 convolution. `x` is `[b, h, w, c]`, `w` is `[9c, out]`
    /// with rows ordered `(dy, dx, c)`.
    pub fn conv3x3(&mut self, x: Var, w: Var) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(xv.ndim(), 4, "conv3x3 expects [b, h, w, c]");
        let (b, h, wd, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        assert_eq!(wv.shape()[0], 9 * c, "conv3x3: weight rows must be 9 * channels");
        let out_c = wv.shape()[1];
        let cols = im2col_3x3(xv.as_slice().unwrap(), b, h, wd, c);
        let out = cols.dot(&view2(wv, 9 * c, out_c));
        let value = out.into_shape_with_order(IxDyn(&[b, h, wd, out_c])).unwrap();
        self.push(value, Op::Conv3x3(x, w), &[x, w])
    }

    /// 2x2 average pooling on `[b, h, w, c]`.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (b, h, w, c) = dims4(xv);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims");
        let quarter = F::from_f64(0.25);
        let mut out = ArrayD::<F>::zeros(IxDyn(&[b, h / 2, w / 2, c]));
        let src = xv.as_slice().unwrap();
        let dst = out.as_slice_mut().unwrap();
        for bi in 0..b {
            for y in 0..h / 2 {
                for x in 0..w / 2 {
                    let o = ((bi * (h / 2) + y) * (w / 2) + x) * c;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let s = ((bi * h + 2 * y + dy) * w + 2 * x + dx) * c;
                        for ch in 0..c {
                            dst[o + ch] += src[s + ch] * quarter;
                        }
                    }
                }
            }
        }
        self.push(out, Op::AvgPool2(x), &[x])
    }

    /// Nearest-neighbour 2x upsampling on `[b, h, w, c]`.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (b, h, w, c) = dims4(xv);
        let mut out = ArrayD::<F>::zeros(IxDyn(&[b, 2 * h, 2 * w, c]));
        let src = xv.as_slice().unwrap();
        let dst = out.as_slice_mut().unwrap();
        for bi in 0..b {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    let o = ((bi * 2 * h + y) * 2 * w + x) * c;
                    let s = ((bi * h + y / 2) * w + x / 2) * c;
                    dst[o..o + c].copy_from_slice(&src[s..s + c]);
                }
            }
        }
        self.push(out, Op::Upsample2(x), &[x])
    }

    /// Concatenation along the last axis.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let last = av.ndim() - 1;
        assert_eq!(av.shape()[..last], bv.shape()[..last], "concat: leading dims differ");
        let value = standard(ndarray::concatenate(Axis(last), &[av.view(), bv.view()]).unwrap());
        self.push(value, Op::Concat(a, b), &[a, b])
    }

    /// Mean over all elements, as a rank-0 array.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mean = xv.sum() / F::from_f64(xv.len() as f64);
        let value = ArrayD::from_elem(IxDyn(&[]), mean);
        self.push(value, Op::MeanAll(x), &[x])
    }

    /// Reverse pass from a scalar (any shape is accepted; the seed gradient is
    /// all ones).
    pub fn backward(&self, root: Var) -> Gradients<F> {
        let mut grads: Vec<Option<ArrayD<F>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(ArrayD::from_elem(self.nodes[root.0].value.raw_dim(), F::one()));
        let mut out = HashMap::new();

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    out.insert(Var(idx), g);
                }
                Op::Add(a, b) => {
                    let ga = self.needs(*a).then(|| reduce_to(&g, self.shape(*a)));
                    let gb = self.needs(*b).then(|| reduce_to(&g, self.shape(*b)));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Sub(a, b) => {
                    let ga = self.needs(*a).then(|| reduce_to(&g, self.shape(*a)));
                    let gb = self.needs(*b).then(|| reduce_to(&g.mapv(|v| -v), self.shape(*b)));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Mul(a, b) => {
                    let ga = self.needs(*a).then(|| {
                        reduce_to(&broadcast_binary(&g, self.value(*b), |x, y| x * y), self.shape(*a))
                    });
                    let gb = self.needs(*b).then(|| {
                        reduce_to(&broadcast_binary(&g, self.value(*a), |x, y| x * y), self.shape(*b))
                    });
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    accumulate(&mut grads, *a, Some(g.mapv(|v| v * s)));
                }
                Op::Linear(x, w) => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (k, n) = (wv.shape()[0], wv.shape()[1]);
                    let m = xv.len() / k.max(1);
                    let g2 = view2(&g, m, n);
                    if self.needs(*x) {
                        let gx = g2.dot(&view2(wv, k, n).t());
                        let gx = gx.into_shape_with_order(xv.raw_dim()).unwrap();
                        accumulate(&mut grads, *x, Some(gx));
                    }
                    if self.needs(*w) {
                        let gw = view2(xv, m, k).t().dot(&g2).into_dyn();
                        accumulate(&mut grads, *w, Some(gw));
                    }
                }
                Op::Bmm { a, b, trans_b } => {
                    let (ga, gb) = self.bmm_backward(&g, *a, *b, *trans_b);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Reshape(x) => {
                    let gx = g.into_shape_with_order(self.value(*x).raw_dim()).unwrap();
                    accumulate(&mut grads, *x, Some(gx));
                }
                Op::Permute(x, axes) => {
                    let mut inverse = vec![0; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inverse[a] = i;
                    }
                    let gx = permute_copy(&g, &inverse);
                    accumulate(&mut grads, *x, Some(gx));
                }
                Op::Silu { x, sig } => {
                    let mut gx = g;
                    let xs = self.value(*x).as_slice().unwrap();
                    for ((gv, &xv), &s) in gx.as_slice_mut().unwrap().iter_mut().zip(xs).zip(sig.as_slice().unwrap()) {
                        *gv = *gv * s * (F::one() + xv * (F::one() - s));
                    }
                    accumulate(&mut grads, *x, Some(gx));
                }
                Op::Softmax(x) => {
                    let y = node.value.as_slice().unwrap();
                    let n = (*node.value.shape().last().unwrap()).max(1);
                    let mut gx = g;
                    for (gr, yr) in gx.as_slice_mut().unwrap().chunks_exact_mut(n).zip(y.chunks_exact(n)) {
                        let dot = gr.iter().zip(yr).fold(F::zero(), |s, (&a, &b)| s + a * b);
                        for (gv, &yv) in gr.iter_mut().zip(yr) {
                            *gv = yv * (*gv - dot);
                        }
                    }
                    accumulate(&mut grads, *x, Some(gx));
                }
                Op::LayerNorm { x, rstd } => {
                    let y = node.value.as_slice().unwrap();
                    let c = *node.value.shape().last().unwrap();
                    let n = F::from_f64(c as f64);
                    let mut gx = g;
                    for (r, (gc, yc)) in gx
                        .as_slice_mut()
                        .unwrap()
                        .chunks_mut(c)
                        .zip(y.chunks(c))
                        .enumerate()
                    {
                        let mean_g = gc.iter().copied().sum::<F>() / n;
                        let mean_gy = gc.iter().zip(yc).map(|(&a, &b)| a * b).sum::<F>() / n;
                        let inv = rstd[r];
                        for (gv, &yv) in gc.iter_mut().zip(yc) {
                            *gv = inv * (*gv - mean_g - yv * mean_gy);
                        }
                    }
                    accumulate(&mut grads, *x, Some(gx));
                }
                Op::Conv3x3(x, w) => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (b, h, wd, c) = dims4(xv);
                    let out_c = wv.shape()[1];
                    let rows = b * h * wd;
                    let g2 = view2(&g, rows, out_c);
                    if self.needs(*w) {
                        let cols = im2col_3x3(xv.as_slice().unwrap(), b, h, wd, c);
                        let gw = cols.t().dot(&g2).into_dyn();
                        accumulate(&mut grads, *w, Some(gw));
                    }
                    if self.needs(*x) {
                        let gcols = g2.dot(&view2(wv, 9 * c, out_c).t());
                        let gx = col2im_3x3(gcols.as_slice().unwrap(), b, h, wd, c);
                        accumulate(&mut grads, *x, Some(gx));
                    }
                }
                Op::AvgPool2(x) => {
                    let (b, h, w, c) = dims4(self.value(*x));
                    let quarter = F::from_f64(0.25);
                    let mut gx = ArrayD::<F>::zeros(IxDyn(&[b, h, w, c]));
                    let src = g.as_slice().unwrap();
                    let dst = gx.as_slice_mut().unwrap();
                    for bi in 0..b {
                        for y in 0..h {
                            for xx in 0..w {
                                let o = ((bi * h + y) * w + xx) * c;
                                let s = ((bi * (h / 2) + y / 2) * (w / 2) + xx / 2) * c;
                                for ch in 0..c {
                                    dst[o + ch] = src[s + ch] * quarter;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Some(gx));
                }
                Op::Upsample2(x) => {
                    let (b, h, w, c) = dims4(self.value(*x));
                    let mut gx = ArrayD::<F>::zeros(IxDyn(&[b, h, w, c]));
                    let src = g.as_slice().unwrap();
                    let dst = gx.as_slice_mut().unwrap();
                    for bi in 0..b {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                let s = ((bi * 2 * h + y) * 2 * w + xx) * c;
                                let o = ((bi * h + y / 2) * w + xx / 2) * c;
                                for ch in 0..c {
                                    dst[o + ch] += src[s + ch];
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Some(gx));
                }
                Op::Concat(a, b) => {
                    let last = Axis(g.ndim() - 1);
                    let ca = *self.shape(*a).last().unwrap();
                    let (ga, gb) = g.view().split_at(last, ca);
                    accumulate(&mut grads, *a, Some(standard(ga.to_owned())));
                    accumulate(&mut grads, *b, Some(standard(gb.to_owned())));
                }
                Op::MeanAll(x) => {
                    let xv = self.value(*x);
                    let scale = g.first().copied().unwrap() / F::from_f64(xv.len() as f64);
                    accumulate(&mut grads, *x, Some(ArrayD::from_elem(xv.raw_dim(), scale)));
                }
            }
        }
        Gradients { grads: out }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn bmm_backward(
        &self,
        g: &ArrayD<F>,
        a: Var,
        b: Var,
        trans_b: bool,
    ) -> (Option<ArrayD<F>>, Option<ArrayD<F>>) {
        let av = self.value(a);
        let bv = self.value(b);
        let batch = av.shape()[0];
        let mut ga = self.needs(a).then(|| ArrayD::<F>::zeros(av.raw_dim()));
        let mut gb = self.needs(b).then(|| ArrayD::<F>::zeros(bv.raw_dim()));
        for i in 0..batch {
            let gi: ArrayView2<F> = g.index_axis(Axis(0), i).into_dimensionality().unwrap();
            let ai: ArrayView2<F> = av.index_axis(Axis(0), i).into_dimensionality().unwrap();
            let bi: ArrayView2<F> = bv.index_axis(Axis(0), i).into_dimensionality().unwrap();
            if let Some(ga) = ga.as_mut() {
                let mut t = ga.index_axis_mut(Axis(0), i).into_dimensionality().unwrap();
                if trans_b {
                    general_mat_mul(F::one(), &gi, &bi, F::zero(), &mut t);
                } else {
                    general_mat_mul(F::one(), &gi, &bi.t(), F::zero(), &mut t);
                }
            }
            if let Some(gb) = gb.as_mut() {
                let mut t = gb.index_axis_mut(Axis(0), i).into_dimensionality().unwrap();
                if trans_b {
                    general_mat_mul(F::one(), &gi.t(), &ai, F::zero(), &mut t);
                } else {
                    general_mat_mul(F::one(), &ai.t(), &gi, F::zero(), &mut t);
                }
            }
        }
        (ga, gb)
    }
}

fn sigmoid<F: Float>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn standard<F: Float>(a: ArrayD<F>) -> ArrayD<F> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn view2<F: Float>(a: &ArrayD<F>, rows: usize, cols: usize) -> ArrayView2<'_, F> {
    a.view()
        .into_shape_with_order((rows, cols))
        .expect("tape values are kept in standard layout")
}

fn dims4<F: Float>(a: &ArrayD<F>) -> (usize, usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 4, "expected a [b, h, w, c] tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

fn broadcast_binary<F: Float>(a: &ArrayD<F>, b: &ArrayD<F>, f: impl Fn(F, F) -> F) -> ArrayD<F> {
    if a.shape() == b.shape() {
        let mut out = a.clone();
        for (o, &y) in out.as_slice_mut().unwrap().iter_mut().zip(b.as_slice().unwrap()) {
            *o = f(*o, y);
        }
        return out;
    }
    let shape = broadcast_shape(a.shape(), b.shape());
    if a.shape() == shape.as_slice() {
        if let Some((outer, mid, inner)) = repeat_pattern(&shape, b.shape()) {
            let mut out = a.clone();
            let bs = b.as_slice().unwrap();
            let os = out.as_slice_mut().unwrap();
            for o in 0..outer {
                let brow = &bs[o * inner..(o + 1) * inner];
                for chunk in os[o * mid * inner..(o + 1) * mid * inner].chunks_exact_mut(inner) {
                    for (v, &y) in chunk.iter_mut().zip(brow) {
                        *v = f(*v, y);
                    }
                }
            }
            return out;
        }
    }
    let av = a.broadcast(IxDyn(&shape)).expect("broadcast lhs");
    let bv = b.broadcast(IxDyn(&shape)).expect("broadcast rhs");
    let mut out = ArrayD::<F>::zeros(IxDyn(&shape));
    Zip::from(&mut out).and(&av).and(&bv).for_each(|o, &x, &y| *o = f(x, y));
    out
}

/// When `small` broadcast to `full` amounts to repeating it along one
/// contiguous run of axes, returns the `(outer, mid, inner)` extents of
/// `full` with `mid` the repeated run.
fn repeat_pattern(full: &[usize], small: &[usize]) -> Option<(usize, usize, usize)> {
    let pad = full.len().checked_sub(small.len())?;
    let dims: Vec<usize> = std::iter::repeat_n(1, pad).chain(small.iter().copied()).collect();
    let differs: Vec<usize> = (0..full.len()).filter(|&i| dims[i] != full[i]).collect();
    let (&first, &last) = (differs.first()?, differs.last()?);
    if (first..=last).any(|i| dims[i] != 1) {
        return None;
    }
    let outer = full[..first].iter().product();
    let mid = full[first..=last].iter().product();
    let inner = full[last + 1..].iter().product();
    Some((outer, mid, inner))
}

/// Copies `x` into standard layout with its axes reordered.
fn permute_copy<F: Float>(x: &ArrayD<F>, axes: &[usize]) -> ArrayD<F> {
    let view = x.view().permuted_axes(IxDyn(axes));
    let shape = view.shape().to_vec();
    let strides: Vec<isize> = view.strides().to_vec();
    let src = x.as_slice().expect("tape values are kept in standard layout");
    let nd = shape.len();
    let mut out = Vec::with_capacity(x.len());
    if nd == 0 || x.is_empty() {
        return x.clone();
    }
    let inner = shape[nd - 1];
    let inner_stride = strides[nd - 1];
    let mut idx = vec![0usize; nd - 1];
    let outer: usize = shape[..nd - 1].iter().product();
    for _ in 0..outer {
        let base: isize = idx.iter().zip(&strides).map(|(&i, &s)| i as isize * s).sum();
        if inner_stride == 1 {
            out.extend_from_slice(&src[base as usize..base as usize + inner]);
        } else {
            out.extend((0..inner).map(|j| src[(base + j as isize * inner_stride) as usize]));
        }
        for d in (0..nd - 1).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap()
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| {
            let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
            let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
            match (da, db) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => panic!("shapes {a:?} and {b:?} do not broadcast"),
            }
        })
        .collect()
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to<F: Float>(g: &ArrayD<F>, shape: &[usize]) -> ArrayD<F> {
    if g.shape() == shape {
        return g.clone();
    }
    if let Some((outer, mid, inner)) = repeat_pattern(g.shape(), shape) {
        let gs = g.as_slice().unwrap();
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            let acc = &mut out[o * inner..(o + 1) * inner];
            for chunk in gs[o * mid * inner..(o + 1) * mid * inner].chunks_exact(inner.max(1)) {
                for (a, &v) in acc.iter_mut().zip(chunk) {
                    *a += v;
                }
            }
        }
        return ArrayD::from_shape_vec(IxDyn(shape), out).unwrap();
    }
    let mut out = g.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for (ax, &d) in shape.iter().enumerate() {
        if d == 1 && out.shape()[ax] != 1 {
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    standard(out)
}

fn accumulate<F: Float>(grads: &mut [Option<ArrayD<F>>], v: Var, g: Option<ArrayD<F>>) {
    let Some(g) = g else { return };
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Convenience for building 2-D constants.
pub fn to_dyn<F: Float>(a: Array2<F>) -> ArrayD<F> {
    a.into_dyn()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};
    use proptest::prelude::*;

    fn filled(shape: &[usize], seed: usize) -> ArrayD<f64> {
        let n: usize = shape.iter().product();
        ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|i| ((i * 7 + seed * 3) % 11) as f64 - 5.0).collect()).unwrap()
    }

    proptest! {
        #[test]
        fn broadcast_fast_path_matches_ndarray(dims in prop::collection::vec(1usize..4, 1..5), mask in 0u32..16, drop in 0usize..3) {
            let full = filled(&dims, 1);
            let small_shape: Vec<usize> = dims
                .iter()
                .enumerate()
                .skip(drop.min(dims.len() - 1))
                .map(|(i, &d)| if mask & (1 << i) != 0 { 1 } else { d })
                .collect();
            let small = filled(&small_shape, 2);
            let expect = &full + &small;
            prop_assert_eq!(broadcast_binary(&full, &small, |a, b| a + b), expect.clone());
            prop_assert_eq!(broadcast_binary(&small, &full, |a, b| a + b), expect);
            let reduced = reduce_to(&full, &small_shape);
            let mut oracle = full.clone();
            while oracle.ndim() > small_shape.len() {
                oracle = oracle.sum_axis(Axis(0));
            }
            for (ax, &d) in small_shape.iter().enumerate() {
                if d == 1 && oracle.shape()[ax] != 1 {
                    oracle = oracle.sum_axis(Axis(ax)).insert_axis(Axis(ax));
                }
            }
            prop_assert_eq!(reduced, oracle);
        }

        #[test]
        fn permute_copy_matches_permuted_view(dims in prop::collection::vec(1usize..4, 1..5), seed in 0usize..24) {
            let x = filled(&dims, 3);
            let mut axes: Vec<usize> = (0..dims.len()).collect();
            let mut s = seed;
            for i in (1..axes.len()).rev() {
                axes.swap(i, s % (i + 1));
                s /= i + 1;
            }
            let got = permute_copy(&x, &axes);
            prop_assert!(got.is_standard_layout());
            prop_assert_eq!(got, x.view().permuted_axes(IxDyn(&axes)).to_owned());
        }
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Array::from_shape_vec((2, 3), vec![1., 2., 3., 4., 5., 6.]).unwrap().into_dyn());
        let b = tape.param(array![10., 20., 30.].into_dyn());
        let y = tape.add(x, b);
        let s = tape.mean_all(y);
        let g = tape.backward(s);
        let gb = g.get(b).unwrap();
        for v in gb.iter() {
            assert!((v - 2.0 / 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(array![[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]].into_dyn());
        let y = tape.softmax(x);
        for row in tape.value(y).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        let second = tape.value(y).index_axis(Axis(0), 1).to_owned();
        for v in second.iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(array![1.0, 2.0].into_dyn());
        let p = tape.param(array![3.0, 4.0].into_dyn());
        let y = tape.mul(c, p);
        let s = tape.mean_all(y);
        let g = tape.backward(s);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap().as_slice().unwrap(), &[0.5, 1.0]);
    }

    #[test]
    fn pool_and_upsample_are_adjoint_shapes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Array::from_shape_fn((1, 4, 4, 2), |(_, y, x, c)| (y * 4 + x + c) as f64).into_dyn());
        let p = tape.avg_pool2(x);
        assert_eq!(tape.shape(p), &[1, 2, 2, 2]);
        let u = tape.upsample2(p);
        assert_eq!(tape.shape(u), &[1, 4, 4, 2]);
        let s = tape.mean_all(u);
        let g = tape.backward(s);
        let gx = g.get(x).unwrap();
        for v in gx.iter() {
            assert!((v - 1.0 / 32.0).abs() < 1e-12);
        }
    }
}
