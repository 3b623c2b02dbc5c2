//! Reverse-mode tape.
//!
//! Every primitive appends one node holding its output value and the ids of
//! its inputs, so node order is a topological order. `backward` walks the
//! nodes once in reverse from the loss and adds the resulting gradients into
//! persistent per-leaf accumulators; calling it twice doubles them.

use std::collections::HashMap;

use crate::autodiff::kernels::{self, ConvGeometry};
use crate::autodiff::{Scalar, Tensor};
use crate::error::{config_err, shape_err, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        Var(i)
    }
}

/// Stable identifier of a trainable parameter in a parameter store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeometry },
    Linear { x: Var, w: Var, b: Var, dims: (usize, usize, usize) },
    Relu(Var),
    Sigmoid(Var),
    GlobalAvgPool(Var),
    Softmax { x: Var, temperature: T },
    LogSoftmax { x: Var, temperature: T },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: T },
    Log(Var),
    Clamp { x: Var, lo: T, hi: T },
    Sum(Var),
    Mean(Var),
    Lerp { a: Var, b: Var, weights: Vec<T> },
    Reshape(Var),
    ConcatChannels(Vec<Var>),
    SelectRows { x: Var, index: Vec<usize> },
    WeightedSum { x: Var, weights: Tensor<T> },
    GradReverse { x: Var, scale: T },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of primitive applications for one forward pass.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    accum: HashMap<usize, Vec<T>>,
    params: HashMap<ParamId, Var>,
    detached: Vec<Tensor<T>>,
    frozen: Option<Vec<Tensor<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            accum: HashMap::new(),
            params: HashMap::new(),
            detached: Vec::new(),
            frozen: None,
        }
    }

    /// A tape whose `detach` calls return the given values, in order,
    /// instead of their inputs' values.
    ///
    /// Finite-difference checks use this to hold stop-gradient targets at
    /// their unperturbed values, so the numeric derivative follows only the
    /// differentiable paths.
    pub fn with_frozen_detaches(values: Vec<Tensor<T>>) -> Self {
        Tape {
            frozen: Some(values),
            ..Self::new()
        }
    }

    /// Values produced by `detach`, in call order.
    pub fn detached_values(&self) -> &[Tensor<T>] {
        &self.detached
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    /// Leaf node; gradients accumulate on it when `requires_grad`.
    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.input(value, false)
    }

    /// Records a parameter leaf once per tape; later calls return the same node.
    pub fn param(&mut self, id: ParamId, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.input(value.clone(), true);
        self.params.insert(id, v);
        v
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    /// Accumulated gradient of a leaf, if any has reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.accum
            .get(&v.0)
            .map(|g| Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn param_grad(&self, id: ParamId) -> Option<Tensor<T>> {
        self.param_var(id).and_then(|v| self.grad(v))
    }

    /// Clears all leaf gradient accumulators.
    pub fn zero_grad(&mut self) {
        self.accum.clear();
    }

    /// Same values, no gradient path back to `x`.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = match &self.frozen {
            Some(frozen) if self.detached.len() < frozen.len() => frozen[self.detached.len()].clone(),
            _ => self.value(x).clone(),
        };
        self.detached.push(value.clone());
        self.push(value, Op::Leaf, false)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(x), self.shape(w), self.shape(b), stride, padding)?;
        let out = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let value = Tensor::new(vec![geom.batch, geom.out_channels, geom.out_h, geom.out_w], out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, rg))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let dims = kernels::linear_dims(self.shape(x), self.shape(w), self.shape(b))?;
        let (n, cin, cout) = dims;
        let out = kernels::linear_forward(
            n,
            cin,
            cout,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let value = Tensor::new(vec![n, cout], out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(value, Op::Linear { x, w, b, dims }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        });
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    /// Per-channel spatial mean: `[N,C,H,W] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 || s[2] == 0 || s[3] == 0 {
            return Err(shape_err!("global_avg_pool expects [N,C,H,W] with H,W >= 1, got {:?}", s));
        }
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let inv = T::of_f64(1.0 / plane as f64);
        let data = self.value(x).data();
        let out: Vec<T> = (0..n * c)
            .map(|i| data[i * plane..(i + 1) * plane].iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(vec![n, c], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::GlobalAvgPool(x), rg))
    }

    fn check_rows(&self, x: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(x);
        if s.len() != 2 || s[1] == 0 {
            return Err(shape_err!("{} expects [N,C] logits, got {:?}", what, s));
        }
        Ok((s[0], s[1]))
    }

    /// Row-wise softmax of `x / temperature`.
    pub fn softmax_t(&mut self, x: Var, temperature: T) -> Result<Var> {
        if !(temperature > T::zero()) {
            return Err(config_err!("softmax temperature must be positive, got {}", temperature));
        }
        let (n, c) = self.check_rows(x, "softmax_t")?;
        let data = self.value(x).data();
        let mut out = vec![T::zero(); n * c];
        for i in 0..n {
            softmax_row(&data[i * c..(i + 1) * c], temperature, &mut out[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(vec![n, c], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax { x, temperature }, rg))
    }

    /// Row-wise log-softmax of `x / temperature`.
    pub fn log_softmax_t(&mut self, x: Var, temperature: T) -> Result<Var> {
        if !(temperature > T::zero()) {
            return Err(config_err!("softmax temperature must be positive, got {}", temperature));
        }
        let (n, c) = self.check_rows(x, "log_softmax_t")?;
        let data = self.value(x).data();
        let mut out = vec![T::zero(); n * c];
        for i in 0..n {
            let row = &data[i * c..(i + 1) * c];
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b)) / temperature;
            let lse = row.iter().map(|&v| (v / temperature - m).exp()).sum::<T>().ln() + m;
            for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = v / temperature - lse;
            }
        }
        let value = Tensor::new(vec![n, c], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::LogSoftmax { x, temperature }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("{}: {:?} vs {:?}", what, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.zip_with(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.zip_with(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.zip_with(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        let rg = self.rg(x);
        self.push(value, Op::Affine { x, scale }, rg)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.affine(x, s, T::zero())
    }

    pub fn log(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.ln());
        let rg = self.rg(x);
        self.push(value, Op::Log(x), rg)
    }

    /// Clamps into `[lo, hi]`; gradient passes only inside the range.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let value = self.value(x).map(|v| v.max(lo).min(hi));
        let rg = self.rg(x);
        self.push(value, Op::Clamp { x, lo, hi }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: T = v.data().iter().copied().sum::<T>() / T::of_f64(v.numel() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Sum of several scalars (or same-shape tensors).
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| shape_err!("add_all over an empty list"))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// Row-wise convex combination `w[n]·a[n] + (1 − w[n])·b[n]`.
    ///
    /// Weights of exactly 1 or 0 copy the corresponding input bitwise.
    pub fn lerp_rows(&mut self, a: Var, b: Var, weights: &[T]) -> Result<Var> {
        self.same_shape(a, b, "lerp")?;
        let n = self.value(a).batch();
        if weights.len() != n {
            return Err(shape_err!("lerp: {} weights for batch {}", weights.len(), n));
        }
        let r = self.value(a).row_len();
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * r);
        for (i, &w) in weights.iter().enumerate() {
            let (ra, rb) = (&va[i * r..(i + 1) * r], &vb[i * r..(i + 1) * r]);
            if w == T::one() {
                out.extend_from_slice(ra);
            } else if w == T::zero() {
                out.extend_from_slice(rb);
            } else {
                let wc = T::one() - w;
                out.extend(ra.iter().zip(rb).map(|(&x, &y)| w * x + wc * y));
            }
        }
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            value,
            Op::Lerp {
                a,
                b,
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// `[N,C,H,W] -> [N, C*H*W]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).batch();
        let r = self.value(x).row_len();
        self.reshape(x, &[n, r])
    }

    /// Concatenates `[N,Ci,H,W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| shape_err!("concat of an empty list"))?;
        let s0 = self.shape(first).to_vec();
        if s0.len() != 4 {
            return Err(shape_err!("concat_channels expects [N,C,H,W], got {:?}", s0));
        }
        let mut channels = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3] {
                return Err(shape_err!("concat_channels: {:?} incompatible with {:?}", s, s0));
            }
            channels += s[1];
        }
        let n = s0[0];
        let mut out = Vec::with_capacity(n * channels * s0[2] * s0[3]);
        for i in 0..n {
            for &x in xs {
                out.extend_from_slice(self.value(x).row(i));
            }
        }
        let value = Tensor::new(vec![n, channels, s0[2], s0[3]], out)?;
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(value, Op::ConcatChannels(xs.to_vec()), rg))
    }

    /// Gathers batch rows: `out[r] = x[index[r]]`.
    pub fn select_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let value = self.value(x).select_rows(index)?;
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::SelectRows {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Scalar `Σ x·w` against a constant weight tensor.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        if self.shape(x) != weights.shape() {
            return Err(shape_err!(
                "weighted_sum: {:?} vs weights {:?}",
                self.shape(x),
                weights.shape()
            ));
        }
        let s: T = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a * b)
            .sum();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                x,
                weights: weights.clone(),
            },
            rg,
        ))
    }

    /// Identity forward; multiplies the incoming gradient by `-scale`.
    pub fn grad_reverse(&mut self, x: Var, scale: T) -> Var {
        let value = self.value(x).clone();
        let rg = self.rg(x);
        self.push(value, Op::GradReverse { x, scale }, rg)
    }

    /// Accumulates `∂loss/∂leaf` into every gradient-requiring leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let Tape { nodes, accum, .. } = self;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        let push = |grads: &mut Vec<Option<Vec<T>>>, v: Var, g: Vec<T>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        *a += *b;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        };
        let val = |v: Var| nodes[v.0].value.data();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            match &node.op {
                Op::Leaf => {
                    if node.requires_grad {
                        match accum.get_mut(&i) {
                            Some(acc) => {
                                for (a, b) in acc.iter_mut().zip(&g) {
                                    *a += *b;
                                }
                            }
                            None => {
                                accum.insert(i, g);
                            }
                        }
                    }
                }
                Op::Conv2d { x, w, b, geom } => {
                    let (dx, dw, db) = kernels::conv2d_backward(geom, val(*x), val(*w), &g);
                    push(&mut grads, *x, dx);
                    push(&mut grads, *w, dw);
                    push(&mut grads, *b, db);
                }
                Op::Linear { x, w, b, dims } => {
                    let (n, cin, cout) = *dims;
                    let (dx, dw, db) = kernels::linear_backward(n, cin, cout, val(*x), val(*w), &g);
                    push(&mut grads, *x, dx);
                    push(&mut grads, *w, dw);
                    push(&mut grads, *b, db);
                }
                Op::Relu(x) => {
                    let dx = val(*x)
                        .iter()
                        .zip(&g)
                        .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                        .collect();
                    push(&mut grads, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let dx = node
                        .value
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(&y, &gv)| gv * y * (T::one() - y))
                        .collect();
                    push(&mut grads, *x, dx);
                }
                Op::GlobalAvgPool(x) => {
                    let s = nodes[x.0].value.shape();
                    let plane = s[2] * s[3];
                    let inv = T::of_f64(1.0 / plane as f64);
                    let mut dx = Vec::with_capacity(g.len() * plane);
                    for &gv in &g {
                        dx.extend(std::iter::repeat_n(gv * inv, plane));
                    }
                    push(&mut grads, *x, dx);
                }
                Op::Softmax { x, temperature } => {
                    let c = node.value.shape()[1];
                    let y = node.value.data();
                    let mut dx = vec![T::zero(); y.len()];
                    for ((yr, gr), dr) in y.chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = yv * (gv - dot) / *temperature;
                        }
                    }
                    push(&mut grads, *x, dx);
                }
                Op::LogSoftmax { x, temperature } => {
                    let c = node.value.shape()[1];
                    let y = node.value.data();
                    let mut dx = vec![T::zero(); y.len()];
                    for ((yr, gr), dr) in y.chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)) {
                        let gsum: T = gr.iter().copied().sum();
                        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = (gv - yv.exp() * gsum) / *temperature;
                        }
                    }
                    push(&mut grads, *x, dx);
                }
                Op::Add(a, b) => {
                    push(&mut grads, *a, g.clone());
                    push(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    push(&mut grads, *a, g.clone());
                    push(&mut grads, *b, g.iter().map(|&v| -v).collect());
                }
                Op::Mul(a, b) => {
                    let da = g.iter().zip(val(*b)).map(|(&gv, &bv)| gv * bv).collect();
                    let db = g.iter().zip(val(*a)).map(|(&gv, &av)| gv * av).collect();
                    push(&mut grads, *a, da);
                    push(&mut grads, *b, db);
                }
                Op::Affine { x, scale } => {
                    push(&mut grads, *x, g.iter().map(|&v| v * *scale).collect());
                }
                Op::Log(x) => {
                    let dx = g.iter().zip(val(*x)).map(|(&gv, &xv)| gv / xv).collect();
                    push(&mut grads, *x, dx);
                }
                Op::Clamp { x, lo, hi } => {
                    let dx = g
                        .iter()
                        .zip(val(*x))
                        .map(|(&gv, &xv)| if xv >= *lo && xv <= *hi { gv } else { T::zero() })
                        .collect();
                    push(&mut grads, *x, dx);
                }
                Op::Sum(x) => {
                    let n = nodes[x.0].value.numel();
                    push(&mut grads, *x, vec![g[0]; n]);
                }
                Op::Mean(x) => {
                    let n = nodes[x.0].value.numel();
                    push(&mut grads, *x, vec![g[0] / T::of_f64(n as f64); n]);
                }
                Op::Lerp { a, b, weights } => {
                    let r = g.len() / weights.len();
                    let mut da = Vec::with_capacity(g.len());
                    let mut db = Vec::with_capacity(g.len());
                    for (gr, &w) in g.chunks(r).zip(weights) {
                        let wc = T::one() - w;
                        da.extend(gr.iter().map(|&v| v * w));
                        db.extend(gr.iter().map(|&v| v * wc));
                    }
                    push(&mut grads, *a, da);
                    push(&mut grads, *b, db);
                }
                Op::Reshape(x) => push(&mut grads, *x, g),
                Op::ConcatChannels(xs) => {
                    let n = node.value.shape()[0];
                    let lens: Vec<usize> = xs.iter().map(|x| nodes[x.0].value.row_len()).collect();
                    let total: usize = lens.iter().sum();
                    let mut parts: Vec<Vec<T>> = lens.iter().map(|l| Vec::with_capacity(l * n)).collect();
                    for i in 0..n {
                        let mut off = i * total;
                        for (part, &l) in parts.iter_mut().zip(&lens) {
                            part.extend_from_slice(&g[off..off + l]);
                            off += l;
                        }
                    }
                    for (x, part) in xs.iter().zip(parts) {
                        push(&mut grads, *x, part);
                    }
                }
                Op::SelectRows { x, index } => {
                    let src = &nodes[x.0].value;
                    let r = src.row_len();
                    let mut dx = vec![T::zero(); src.numel()];
                    for (row, &j) in index.iter().enumerate() {
                        for (d, &gv) in dx[j * r..(j + 1) * r].iter_mut().zip(&g[row * r..(row + 1) * r]) {
                            *d += gv;
                        }
                    }
                    push(&mut grads, *x, dx);
                }
                Op::WeightedSum { x, weights } => {
                    push(&mut grads, *x, weights.data().iter().map(|&w| w * g[0]).collect());
                }
                Op::GradReverse { x, scale } => {
                    push(&mut grads, *x, g.iter().map(|&v| -(*scale) * v).collect());
                }
            }
        }
        Ok(())
    }
}

/// Numerically stable softmax of one row of `logits / temperature`.
pub fn softmax_row<T: Scalar>(row: &[T], temperature: T, out: &mut [T]) {
    let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut z = T::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = ((v - m) / temperature).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o = *o / z;
    }
}
