//! Reverse-mode automatic differentiation on dynamic `f64` arrays.
//!
//! A [`Tape`] records the forward computation as a flat list of nodes; each
//! node stores its value and the operation that produced it. [`Tape::backward`]
//! replays the list in reverse, accumulating gradients for every node that
//! (transitively) depends on a differentiable leaf.
//!
//! The engine is deliberately small: only the operations the segmentation
//! model needs exist, every value is a row-major `ArrayD<f64>`, and a tape is
//! built per forward pass and discarded after the gradients are read. Tapes
//! are plain data, so concurrent callers each use their own while sharing
//! read-only parameters.

mod spatial;

use ndarray::{ArrayD, Axis, Ix1, Ix2, Ix3, Ix4, IxDyn};
use std::collections::HashMap;

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorRef(usize);

const LAYER_NORM_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Add(TensorRef, TensorRef),
    Mul(TensorRef, TensorRef),
    Div(TensorRef, TensorRef),
    Scale(TensorRef, f64),
    AddScalar(TensorRef),
    MatMul(TensorRef, TensorRef),
    Reshape(TensorRef),
    Permute(TensorRef, Vec<usize>),
    Concat(TensorRef, TensorRef, usize),
    Softmax(TensorRef),
    Relu(TensorRef),
    Gelu(TensorRef),
    Sigmoid(TensorRef),
    LayerNorm {
        x: TensorRef,
        gamma: TensorRef,
        beta: TensorRef,
    },
    Conv2d {
        input: TensorRef,
        kernel: TensorRef,
        bias: TensorRef,
        stride: usize,
        pad: usize,
    },
    UpsampleBilinear2x(TensorRef),
    PixelShuffle(TensorRef, usize),
    GlobalAvgPool(TensorRef),
    GlobalMaxPool(TensorRef),
    Embedding {
        table: TensorRef,
        ids: Vec<usize>,
    },
    Sum(TensorRef),
    Mean(TensorRef),
    BceWithLogits {
        logits: TensorRef,
        target: ArrayD<f64>,
    },
}

impl Op {
    fn parents(&self) -> Vec<TensorRef> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Concat(a, b, _) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::Softmax(a)
            | Op::Relu(a)
            | Op::Gelu(a)
            | Op::Sigmoid(a)
            | Op::UpsampleBilinear2x(a)
            | Op::PixelShuffle(a, _)
            | Op::GlobalAvgPool(a)
            | Op::GlobalMaxPool(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::LayerNorm { x, gamma, beta } => vec![*x, *gamma, *beta],
            Op::Conv2d {
                input,
                kernel,
                bias,
                ..
            } => vec![*input, *kernel, *bias],
            Op::Embedding { table, .. } => vec![*table],
            Op::BceWithLogits { logits, .. } => vec![*logits],
        }
    }
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], addressable by [`TensorRef`].
pub struct Gradients {
    by_node: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. the given node, if it was reachable.
    pub fn get(&self, r: TensorRef) -> Option<&ArrayD<f64>> {
        self.by_node[r.0].as_ref()
    }
}

/// A single forward recording.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_leaves: HashMap<String, TensorRef>,
    param_order: Vec<(String, TensorRef)>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, r: TensorRef) -> &ArrayD<f64> {
        &self.nodes[r.0].value
    }

    pub fn shape(&self, r: TensorRef) -> &[usize] {
        self.nodes[r.0].value.shape()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> TensorRef {
        debug_assert!(value.is_standard_layout());
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        TensorRef(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: ArrayD<f64>, op: Op) -> TensorRef {
        let needs = op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(value, op, needs)
    }

    /// A leaf that does not participate in differentiation.
    pub fn constant(&mut self, value: ArrayD<f64>) -> TensorRef {
        self.push(standardize(value), Op::Leaf, false)
    }

    /// A differentiable leaf (an input one wants gradients for).
    pub fn var(&mut self, value: ArrayD<f64>) -> TensorRef {
        self.push(standardize(value), Op::Leaf, true)
    }

    /// A differentiable leaf registered under a parameter name.
    ///
    /// Repeated calls with the same name return the same node, so gradients
    /// accumulate correctly when a parameter is used more than once.
    pub fn named_param(&mut self, name: &str, value: ArrayD<f64>) -> TensorRef {
        if let Some(&r) = self.param_leaves.get(name) {
            return r;
        }
        let r = self.push(standardize(value), Op::Leaf, true);
        self.param_leaves.insert(name.to_string(), r);
        self.param_order.push((name.to_string(), r));
        r
    }

    /// Iterate over `(name, node)` pairs for all named parameter leaves.
    pub fn named_params(&self) -> impl Iterator<Item = (&str, TensorRef)> {
        self.param_order.iter().map(|(n, r)| (n.as_str(), *r))
    }

    // ---- elementwise and broadcasting ----

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x + y);
        self.push_op(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x * y);
        self.push_op(value, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        let value = broadcast_zip(self.value(a), self.value(b), |x, y| x / y);
        self.push_op(value, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: TensorRef, factor: f64) -> TensorRef {
        let value = self.value(a).mapv(|x| x * factor);
        self.push_op(value, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: TensorRef, c: f64) -> TensorRef {
        let value = self.value(a).mapv(|x| x + c);
        self.push_op(value, Op::AddScalar(a))
    }

    // ---- linear algebra ----

    /// Matrix product. Accepts `(m,k)x(k,n)` or batched `(b,m,k)x(b,k,n)`.
    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> TensorRef {
        let av = self.value(a);
        let bv = self.value(b);
        let value = match (av.ndim(), bv.ndim()) {
            (2, 2) => {
                let a2 = av.view().into_dimensionality::<Ix2>().unwrap();
                let b2 = bv.view().into_dimensionality::<Ix2>().unwrap();
                assert_eq!(
                    a2.ncols(),
                    b2.nrows(),
                    "matmul inner dims: {:?} x {:?}",
                    a2.dim(),
                    b2.dim()
                );
                a2.dot(&b2).into_dyn()
            }
            (3, 3) => {
                let a3 = av.view().into_dimensionality::<Ix3>().unwrap();
                let b3 = bv.view().into_dimensionality::<Ix3>().unwrap();
                let (ba, m, k) = a3.dim();
                let (bb, k2, n) = b3.dim();
                assert_eq!(ba, bb, "matmul batch dims: {ba} vs {bb}");
                assert_eq!(k, k2, "matmul inner dims: {k} vs {k2}");
                let mut out = ndarray::Array3::<f64>::zeros((ba, m, n));
                for i in 0..ba {
                    let prod = a3.index_axis(Axis(0), i).dot(&b3.index_axis(Axis(0), i));
                    out.index_axis_mut(Axis(0), i).assign(&prod);
                }
                out.into_dyn()
            }
            (da, db) => panic!("matmul supports 2-d or batched 3-d operands, got {da}-d x {db}-d"),
        };
        self.push_op(standardize(value), Op::MatMul(a, b))
    }

    pub fn reshape(&mut self, a: TensorRef, shape: &[usize]) -> TensorRef {
        let value = self
            .value(a)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|_| {
                panic!(
                    "reshape {:?} -> {:?} element count mismatch",
                    self.shape(a),
                    shape
                )
            });
        self.push_op(value, Op::Reshape(a))
    }

    pub fn permute(&mut self, a: TensorRef, axes: &[usize]) -> TensorRef {
        let value = self
            .value(a)
            .view()
            .permuted_axes(IxDyn(axes))
            .to_owned();
        self.push_op(standardize(value), Op::Permute(a, axes.to_vec()))
    }

    pub fn concat(&mut self, a: TensorRef, b: TensorRef, axis: usize) -> TensorRef {
        let value = ndarray::concatenate(Axis(axis), &[self.value(a).view(), self.value(b).view()])
            .expect("concat shape mismatch");
        self.push_op(standardize(value), Op::Concat(a, b, axis))
    }

    // ---- nonlinearities ----

    /// Softmax over the last axis, numerically stabilized.
    pub fn softmax(&mut self, a: TensorRef) -> TensorRef {
        let mut value = self.value(a).clone();
        let last = value.ndim() - 1;
        for mut lane in value.lanes_mut(Axis(last)) {
            let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in lane.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in lane.iter_mut() {
                *v /= sum;
            }
        }
        self.push_op(value, Op::Softmax(a))
    }

    pub fn relu(&mut self, a: TensorRef) -> TensorRef {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push_op(value, Op::Relu(a))
    }

    /// GELU, tanh form: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, a: TensorRef) -> TensorRef {
        let value = self.value(a).mapv(gelu_scalar);
        self.push_op(value, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: TensorRef) -> TensorRef {
        let value = self.value(a).mapv(sigmoid_scalar);
        self.push_op(value, Op::Sigmoid(a))
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: TensorRef, gamma: TensorRef, beta: TensorRef) -> TensorRef {
        let c = *self.shape(x).last().unwrap();
        assert_eq!(self.shape(gamma), [c], "layer_norm gamma shape");
        assert_eq!(self.shape(beta), [c], "layer_norm beta shape");
        let gamma_v = self.value(gamma).clone();
        let beta_v = self.value(beta).clone();
        let mut value = self.value(x).clone();
        let last = value.ndim() - 1;
        for mut lane in value.lanes_mut(Axis(last)) {
            let mean = lane.iter().sum::<f64>() / c as f64;
            let var = lane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (i, v) in lane.iter_mut().enumerate() {
                *v = (*v - mean) * inv_std * gamma_v[[i]] + beta_v[[i]];
            }
        }
        self.push_op(value, Op::LayerNorm { x, gamma, beta })
    }

    // ---- spatial ----

    /// 2-d convolution on an `(H, W, Cin)` feature with an
    /// `(kh, kw, Cin, Cout)` kernel and `(Cout,)` bias.
    pub fn conv2d(
        &mut self,
        input: TensorRef,
        kernel: TensorRef,
        bias: TensorRef,
        stride: usize,
        pad: usize,
    ) -> TensorRef {
        let x = self.value(input).view().into_dimensionality::<Ix3>().unwrap();
        let k = self.value(kernel).view().into_dimensionality::<Ix4>().unwrap();
        let b = self.value(bias).view().into_dimensionality::<Ix1>().unwrap();
        let value = spatial::conv2d_forward(&x, &k, &b, stride, pad);
        self.push_op(
            value.into_dyn(),
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                pad,
            },
        )
    }

    /// Bilinear 2x upsampling of an `(H, W, C)` feature (half-pixel centers,
    /// border-clamped sampling).
    pub fn upsample_bilinear_2x(&mut self, a: TensorRef) -> TensorRef {
        let x = self.value(a).view().into_dimensionality::<Ix3>().unwrap();
        let value = spatial::upsample_bilinear_2x_forward(&x);
        self.push_op(value.into_dyn(), Op::UpsampleBilinear2x(a))
    }

    /// Rearrange `(H, W, C*r^2)` into `(rH, rW, C)`; output channel `c` draws
    /// its `r x r` tile from input channels `c*r^2 ..= c*r^2 + r^2 - 1` in
    /// row-major order.
    pub fn pixel_shuffle(&mut self, a: TensorRef, r: usize) -> TensorRef {
        let x = self.value(a).view().into_dimensionality::<Ix3>().unwrap();
        let value = spatial::pixel_shuffle_forward(&x, r);
        self.push_op(value.into_dyn(), Op::PixelShuffle(a, r))
    }

    /// Per-channel mean over the spatial axes: `(H, W, C)` -> `(C,)`.
    pub fn global_avg_pool(&mut self, a: TensorRef) -> TensorRef {
        let x = self.value(a).view().into_dimensionality::<Ix3>().unwrap();
        let (h, w, c) = x.dim();
        let mut out = ndarray::Array1::<f64>::zeros(c);
        for ci in 0..c {
            let mut s = 0.0;
            for y in 0..h {
                for xx in 0..w {
                    s += x[[y, xx, ci]];
                }
            }
            out[ci] = s / (h * w) as f64;
        }
        self.push_op(out.into_dyn(), Op::GlobalAvgPool(a))
    }

    /// Per-channel max over the spatial axes: `(H, W, C)` -> `(C,)`.
    /// Gradient flows to the first maximum in row-major scan order.
    pub fn global_max_pool(&mut self, a: TensorRef) -> TensorRef {
        let x = self.value(a).view().into_dimensionality::<Ix3>().unwrap();
        let (h, w, c) = x.dim();
        let mut out = ndarray::Array1::<f64>::zeros(c);
        for ci in 0..c {
            let mut best = f64::NEG_INFINITY;
            for y in 0..h {
                for xx in 0..w {
                    if x[[y, xx, ci]] > best {
                        best = x[[y, xx, ci]];
                    }
                }
            }
            out[ci] = best;
        }
        self.push_op(out.into_dyn(), Op::GlobalMaxPool(a))
    }

    /// Row gather from a `(V, C)` table: produces `(len(ids), C)`.
    pub fn embedding(&mut self, table: TensorRef, ids: &[usize]) -> TensorRef {
        let t = self.value(table).view().into_dimensionality::<Ix2>().unwrap();
        let (v, c) = t.dim();
        let mut out = ndarray::Array2::<f64>::zeros((ids.len(), c));
        for (row, &id) in ids.iter().enumerate() {
            assert!(id < v, "embedding id {id} out of range {v}");
            out.row_mut(row).assign(&t.row(id));
        }
        self.push_op(
            out.into_dyn(),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    // ---- reductions and losses ----

    pub fn sum(&mut self, a: TensorRef) -> TensorRef {
        let value = ndarray::arr0(self.value(a).sum()).into_dyn();
        self.push_op(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: TensorRef) -> TensorRef {
        let n = self.value(a).len() as f64;
        let value = ndarray::arr0(self.value(a).sum() / n).into_dyn();
        self.push_op(value, Op::Mean(a))
    }

    /// Elementwise binary cross-entropy on `sigmoid(logits)` against a fixed
    /// binary target, in the numerically stable log-sum-exp form.
    pub fn bce_with_logits(&mut self, logits: TensorRef, target: ArrayD<f64>) -> TensorRef {
        assert_eq!(self.shape(logits), target.shape(), "bce target shape");
        let value = broadcast_zip(self.value(logits), &target, |x, z| {
            x.max(0.0) - x * z + (-x.abs()).exp().ln_1p()
        });
        self.push_op(value, Op::BceWithLogits { logits, target })
    }

    pub fn scalar(&self, r: TensorRef) -> f64 {
        let v = self.value(r);
        assert_eq!(v.len(), 1, "scalar() on non-scalar node");
        *v.iter().next().unwrap()
    }

    // ---- backward ----

    /// Reverse pass from a scalar loss node. Returns per-node gradients.
    pub fn backward(&self, loss: TensorRef) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::ones(self.value(loss).raw_dim()));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { by_node: grads }
    }

    fn accumulate(
        &self,
        grads: &mut [Option<ArrayD<f64>>],
        target: TensorRef,
        contribution: ArrayD<f64>,
    ) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        let reduced = reduce_to_shape(contribution, self.shape(target));
        match &mut grads[target.0] {
            Some(existing) => *existing += &reduced,
            slot @ None => *slot = Some(reduced),
        }
    }

    fn backprop_node(&self, idx: usize, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let da = broadcast_zip(g, self.value(*b), |gv, bv| gv * bv);
                let db = broadcast_zip(g, self.value(*a), |gv, av| gv * av);
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Div(a, b) => {
                let da = broadcast_zip(g, self.value(*b), |gv, bv| gv / bv);
                let num = broadcast_zip(g, self.value(*a), |gv, av| gv * av);
                let db = broadcast_zip(&num, self.value(*b), |nv, bv| -nv / (bv * bv));
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Scale(a, f) => {
                self.accumulate(grads, *a, g.mapv(|v| v * f));
            }
            Op::AddScalar(a) => {
                self.accumulate(grads, *a, g.clone());
            }
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                if av.ndim() == 2 {
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    let a2 = av.view().into_dimensionality::<Ix2>().unwrap();
                    let b2 = bv.view().into_dimensionality::<Ix2>().unwrap();
                    self.accumulate(grads, *a, g2.dot(&b2.t()).into_dyn());
                    self.accumulate(grads, *b, a2.t().dot(&g2).into_dyn());
                } else {
                    let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                    let a3 = av.view().into_dimensionality::<Ix3>().unwrap();
                    let b3 = bv.view().into_dimensionality::<Ix3>().unwrap();
                    let (batch, m, k) = a3.dim();
                    let n = b3.dim().2;
                    let mut da = ndarray::Array3::<f64>::zeros((batch, m, k));
                    let mut db = ndarray::Array3::<f64>::zeros((batch, k, n));
                    for i in 0..batch {
                        let gi = g3.index_axis(Axis(0), i);
                        da.index_axis_mut(Axis(0), i)
                            .assign(&gi.dot(&b3.index_axis(Axis(0), i).t()));
                        db.index_axis_mut(Axis(0), i)
                            .assign(&a3.index_axis(Axis(0), i).t().dot(&gi));
                    }
                    self.accumulate(grads, *a, da.into_dyn());
                    self.accumulate(grads, *b, db.into_dyn());
                }
            }
            Op::Reshape(a) => {
                let back = g
                    .clone()
                    .into_shape_with_order(IxDyn(self.shape(*a)))
                    .unwrap();
                self.accumulate(grads, *a, back);
            }
            Op::Permute(a, axes) => {
                let mut inverse = vec![0usize; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let back = g.view().permuted_axes(IxDyn(&inverse)).to_owned();
                self.accumulate(grads, *a, standardize(back));
            }
            Op::Concat(a, b, axis) => {
                let na = self.shape(*a)[*axis];
                let ga = g.slice_axis(Axis(*axis), ndarray::Slice::from(0..na)).to_owned();
                let gb = g.slice_axis(Axis(*axis), ndarray::Slice::from(na..)).to_owned();
                self.accumulate(grads, *a, standardize(ga));
                self.accumulate(grads, *b, standardize(gb));
            }
            Op::Softmax(a) => {
                let y = &self.nodes[idx].value;
                let mut dx = broadcast_zip(g, y, |gv, yv| gv * yv);
                let last = dx.ndim() - 1;
                // dx = y * (g - sum(g * y)) per lane
                for (mut dlane, ylane) in dx.lanes_mut(Axis(last)).into_iter().zip(y.lanes(Axis(last))) {
                    let dot: f64 = dlane.iter().sum();
                    for (d, yv) in dlane.iter_mut().zip(ylane.iter()) {
                        *d -= dot * yv;
                    }
                }
                self.accumulate(grads, *a, dx);
            }
            Op::Relu(a) => {
                let dx = broadcast_zip(g, self.value(*a), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, *a, dx);
            }
            Op::Gelu(a) => {
                let dx = broadcast_zip(g, self.value(*a), |gv, xv| gv * gelu_derivative(xv));
                self.accumulate(grads, *a, dx);
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[idx].value;
                let dx = broadcast_zip(g, y, |gv, yv| gv * yv * (1.0 - yv));
                self.accumulate(grads, *a, dx);
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (dx, dgamma, dbeta) = self.layer_norm_backward(g, *x, *gamma);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                pad,
            } => {
                let x = self.value(*input).view().into_dimensionality::<Ix3>().unwrap();
                let k = self.value(*kernel).view().into_dimensionality::<Ix4>().unwrap();
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let (dx, dk, db) = spatial::conv2d_backward(&x, &k, &g3, *stride, *pad);
                self.accumulate(grads, *input, dx.into_dyn());
                self.accumulate(grads, *kernel, dk.into_dyn());
                self.accumulate(grads, *bias, db.into_dyn());
            }
            Op::UpsampleBilinear2x(a) => {
                let in_dim = self.value(*a).view().into_dimensionality::<Ix3>().unwrap().dim();
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let dx = spatial::upsample_bilinear_2x_backward(&g3, in_dim);
                self.accumulate(grads, *a, dx.into_dyn());
            }
            Op::PixelShuffle(a, r) => {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let dx = spatial::pixel_shuffle_backward(&g3, *r);
                self.accumulate(grads, *a, dx.into_dyn());
            }
            Op::GlobalAvgPool(a) => {
                let x = self.value(*a).view().into_dimensionality::<Ix3>().unwrap();
                let (h, w, c) = x.dim();
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let scale = 1.0 / (h * w) as f64;
                let dx = ndarray::Array3::from_shape_fn((h, w, c), |(_, _, ci)| g1[ci] * scale);
                self.accumulate(grads, *a, dx.into_dyn());
            }
            Op::GlobalMaxPool(a) => {
                let x = self.value(*a).view().into_dimensionality::<Ix3>().unwrap();
                let (h, w, c) = x.dim();
                let g1 = g.view().into_dimensionality::<Ix1>().unwrap();
                let mut dx = ndarray::Array3::<f64>::zeros((h, w, c));
                for ci in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = (0usize, 0usize);
                    for y in 0..h {
                        for xx in 0..w {
                            if x[[y, xx, ci]] > best {
                                best = x[[y, xx, ci]];
                                at = (y, xx);
                            }
                        }
                    }
                    dx[[at.0, at.1, ci]] = g1[ci];
                }
                self.accumulate(grads, *a, dx.into_dyn());
            }
            Op::Embedding { table, ids } => {
                let t = self.value(*table).view().into_dimensionality::<Ix2>().unwrap();
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dt = ndarray::Array2::<f64>::zeros(t.dim());
                for (row, &id) in ids.iter().enumerate() {
                    let mut target = dt.row_mut(id);
                    target += &g2.row(row);
                }
                self.accumulate(grads, *table, dt.into_dyn());
            }
            Op::Sum(a) => {
                let gv = *g.iter().next().unwrap();
                let dx = ArrayD::from_elem(IxDyn(self.shape(*a)), gv);
                self.accumulate(grads, *a, dx);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                let gv = *g.iter().next().unwrap() / n;
                let dx = ArrayD::from_elem(IxDyn(self.shape(*a)), gv);
                self.accumulate(grads, *a, dx);
            }
            Op::BceWithLogits { logits, target } => {
                let dx = {
                    let x = self.value(*logits);
                    let mut out = x.mapv(sigmoid_scalar);
                    out -= target;
                    out * g
                };
                self.accumulate(grads, *logits, dx);
            }
        }
    }

    fn layer_norm_backward(
        &self,
        g: &ArrayD<f64>,
        x: TensorRef,
        gamma: TensorRef,
    ) -> (ArrayD<f64>, ArrayD<f64>, ArrayD<f64>) {
        let xv = self.value(x);
        let gamma_v = self.value(gamma);
        let c = *xv.shape().last().unwrap();
        let last = xv.ndim() - 1;
        let mut dx = xv.clone();
        let mut dgamma = ArrayD::<f64>::zeros(IxDyn(&[c]));
        let mut dbeta = ArrayD::<f64>::zeros(IxDyn(&[c]));
        for (mut dlane, (xlane, glane)) in dx
            .lanes_mut(Axis(last))
            .into_iter()
            .zip(xv.lanes(Axis(last)).into_iter().zip(g.lanes(Axis(last))))
        {
            let mean = xlane.iter().sum::<f64>() / c as f64;
            let var = xlane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            let xhat: Vec<f64> = xlane.iter().map(|v| (v - mean) * inv_std).collect();
            let dxhat: Vec<f64> = glane
                .iter()
                .enumerate()
                .map(|(i, gv)| gv * gamma_v[[i]])
                .collect();
            let mean_dxhat = dxhat.iter().sum::<f64>() / c as f64;
            let mean_dxhat_xhat = dxhat
                .iter()
                .zip(xhat.iter())
                .map(|(d, h)| d * h)
                .sum::<f64>()
                / c as f64;
            for i in 0..c {
                dlane[i] = (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat) * inv_std;
                dgamma[[i]] += glane[i] * xhat[i];
                dbeta[[i]] += glane[i];
            }
        }
        (dx, dgamma, dbeta)
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) use sigmoid as sigmoid_scalar;

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x.powi(3));
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x.powi(3));
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * c * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Combine two arrays elementwise under numpy-style broadcasting.
fn broadcast_zip<F>(a: &ArrayD<f64>, b: &ArrayD<f64>, f: F) -> ArrayD<f64>
where
    F: Fn(f64, f64) -> f64,
{
    if a.shape() == b.shape() {
        let mut out = a.clone();
        ndarray::Zip::from(&mut out).and(b).for_each(|o, &bv| *o = f(*o, bv));
        return out;
    }
    let shape = broadcast_shape(a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&shape)).unwrap_or_else(|| {
        panic!("cannot broadcast {:?} to {:?}", a.shape(), shape)
    });
    let bv = b.broadcast(IxDyn(&shape)).unwrap_or_else(|| {
        panic!("cannot broadcast {:?} to {:?}", b.shape(), shape)
    });
    let mut out = ArrayD::<f64>::zeros(IxDyn(&shape));
    ndarray::Zip::from(&mut out)
        .and(&av)
        .and(&bv)
        .for_each(|o, &x, &y| *o = f(x, y));
    out
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast {a:?} vs {b:?}"
        );
        out[i] = da.max(db);
    }
    out
}

/// Sum a broadcasted gradient back down to the original operand shape.
fn reduce_to_shape(mut grad: ArrayD<f64>, target: &[usize]) -> ArrayD<f64> {
    while grad.ndim() > target.len() {
        grad = grad.sum_axis(Axis(0));
    }
    for ax in 0..target.len() {
        if target[ax] == 1 && grad.shape()[ax] != 1 {
            let summed = grad.sum_axis(Axis(ax));
            grad = summed.insert_axis(Axis(ax));
        }
    }
    debug_assert_eq!(grad.shape(), target);
    standardize(grad)
}

fn standardize(arr: ArrayD<f64>) -> ArrayD<f64> {
    if arr.is_standard_layout() {
        arr
    } else {
        arr.as_standard_layout().to_owned()
    }
}
