//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Model and loss code is written once against the [`Ops`] trait and runs on
//! either backend:
//!
//! * [`Tape`] records every intermediate value so [`Tape::backward`] can
//!   propagate gradients. Used for training and gradient checks.
//! * [`Eager`] evaluates immediately and drops intermediates as soon as they
//!   go out of scope. Used for inference, where a full-resolution tape would
//!   not fit in memory.

use std::rc::Rc;

use crate::kernels::{self, ConvGeom};
use crate::tensor::{Shape, Tensor};

/// Operations shared by the taped and eager backends.
///
/// Shape errors inside these operations are programming errors and panic.
pub trait Ops {
    type V: Clone;

    /// Introduce a value that does not require gradients.
    fn constant(&mut self, t: Tensor) -> Self::V;
    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor;

    fn conv2d(&mut self, x: &Self::V, w: &Self::V, b: Option<&Self::V>, g: ConvGeom) -> Self::V;
    fn conv_transpose2d(&mut self, x: &Self::V, w: &Self::V, b: Option<&Self::V>, g: ConvGeom) -> Self::V;
    fn deform_conv2d(&mut self, x: &Self::V, offset: &Self::V, w: &Self::V, b: Option<&Self::V>) -> Self::V;
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn relu(&mut self, x: &Self::V) -> Self::V;
    fn sigmoid(&mut self, x: &Self::V) -> Self::V;
    /// `x * gate` with `gate` of shape `(n, c, 1, 1)`.
    fn mul_channel(&mut self, x: &Self::V, gate: &Self::V) -> Self::V;
    /// `x * gate` with `gate` of shape `(n, 1, h, w)`.
    fn mul_pixel(&mut self, x: &Self::V, gate: &Self::V) -> Self::V;
    fn global_avg_pool(&mut self, x: &Self::V) -> Self::V;
    fn concat(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn resize(&mut self, x: &Self::V, h: usize, w: usize) -> Self::V;
    /// Block mean over `factor x factor` tiles.
    fn area_down(&mut self, x: &Self::V, factor: usize) -> Self::V;
    fn max_pool2(&mut self, x: &Self::V) -> Self::V;
    /// Per-channel `(x - shift[c]) * scale[c]`.
    fn affine_channels(&mut self, x: &Self::V, shift: &[f64], scale: &[f64]) -> Self::V;
    /// Scalar `mean(sqrt((a - b)^2 + eps^2) - eps)`, the Charbonnier penalty
    /// above its floor. Evaluated as `r^2 / (sqrt(r^2 + eps^2) + eps)` so it
    /// is exactly zero at `a == b` and keeps precision for small residuals.
    fn charbonnier(&mut self, a: &Self::V, b: &Self::V, eps: f64) -> Self::V;
    /// Scalar `mean(|a - b|)`.
    fn mean_abs_diff(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn scale(&mut self, x: &Self::V, k: f64) -> Self::V;
    /// Product of two scalars.
    fn mul_scalar(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    /// Scalar `1 / max(x, floor)`.
    fn recip_floor(&mut self, x: &Self::V, floor: f64) -> Self::V;
    /// Sum of equally shaped values.
    fn sum(&mut self, xs: &[Self::V]) -> Self::V;
    /// Scalar `sum(x * weights)` against a constant of the same shape.
    fn weighted_sum(&mut self, x: &Self::V, weights: &Tensor) -> Self::V;
}

fn weighted_sum_t(x: &Tensor, w: &Tensor) -> f64 {
    assert_eq!(x.shape(), w.shape(), "weighted_sum shapes");
    x.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

fn relu_t(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

fn sigmoid_t(x: &Tensor) -> Tensor {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

fn mul_channel_t(x: &Tensor, g: &Tensor) -> Tensor {
    let s = x.shape();
    assert_eq!(g.shape(), Shape::new(s.n, s.c, 1, 1), "mul_channel gate");
    let mut y = x.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            let k = g.at(n, c, 0, 0);
            y.plane_mut(n, c).iter_mut().for_each(|v| *v *= k);
        }
    }
    y
}

fn mul_pixel_t(x: &Tensor, g: &Tensor) -> Tensor {
    let s = x.shape();
    assert_eq!(g.shape(), Shape::new(s.n, 1, s.h, s.w), "mul_pixel gate");
    let mut y = x.clone();
    for n in 0..s.n {
        let gp = g.plane(n, 0).to_vec();
        for c in 0..s.c {
            y.plane_mut(n, c).iter_mut().zip(&gp).for_each(|(v, k)| *v *= k);
        }
    }
    y
}

fn affine_t(x: &Tensor, shift: &[f64], scale: &[f64]) -> Tensor {
    let s = x.shape();
    assert!(shift.len() == s.c && scale.len() == s.c, "affine_channels arity");
    let mut y = x.clone();
    for n in 0..s.n {
        for c in 0..s.c {
            y.plane_mut(n, c).iter_mut().for_each(|v| *v = (*v - shift[c]) * scale[c]);
        }
    }
    y
}

fn charbonnier_t(a: &Tensor, b: &Tensor, eps: f64) -> f64 {
    assert_eq!(a.shape(), b.shape(), "charbonnier shapes");
    let e2 = eps * eps;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let r2 = (x - y) * (x - y);
            r2 / ((r2 + e2).sqrt() + eps)
        })
        .sum();
    s / a.len() as f64
}

fn mean_abs_diff_t(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "mean_abs_diff shapes");
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
    s / a.len() as f64
}

fn add_t(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "add shapes");
    let mut y = a.clone();
    y.add_assign(b);
    y
}

fn sub_t(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "sub shapes");
    let mut y = a.clone();
    y.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x -= y);
    y
}

fn scalar_of(t: &Tensor) -> f64 {
    assert_eq!(t.len(), 1, "expected a scalar tensor");
    t.data()[0]
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, g: ConvGeom },
    ConvT { x: Var, w: Var, b: Option<Var>, g: ConvGeom },
    Deform { x: Var, off: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    MulChannel(Var, Var),
    MulPixel(Var, Var),
    Gap(Var),
    Concat(Var, Var),
    Resize(Var),
    AreaDown(Var, usize),
    MaxPool { x: Var, arg: Vec<usize> },
    Affine { x: Var, scale: Vec<f64> },
    Charbonnier { a: Var, b: Var, eps: f64 },
    MeanAbsDiff(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    RecipFloor(Var, f64),
    Sum(Vec<Var>),
    WeightedSum(Var, Tensor),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recording of a computation for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A leaf whose gradient is collected by [`Tape::backward`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        scalar_of(&self.nodes[v.0].value)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
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

    fn rg_any(&self, vs: &[Var]) -> bool {
        vs.iter().any(|&v| self.rg(v))
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradients of the scalar `root` with respect to every node that
    /// requires them. Only leaf gradients are retained.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.val(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.val(root).shape(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
        }
        Grads { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf => {}
            Op::Conv { x, w, b, g: geom } => {
                let r = kernels::conv2d_backward(self.val(*x), self.val(*w), *geom, g, self.rg(*x));
                if let Some(dx) = r.dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, r.dw);
                if let Some(b) = b {
                    self.accumulate(grads, *b, r.db);
                }
            }
            Op::ConvT { x, w, b, g: geom } => {
                let r = kernels::conv_transpose2d_backward(self.val(*x), self.val(*w), *geom, g, self.rg(*x));
                if let Some(dx) = r.dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, r.dw);
                if let Some(b) = b {
                    self.accumulate(grads, *b, r.db);
                }
            }
            Op::Deform { x, off, w, b } => {
                let r = kernels::deform_conv2d_backward(
                    self.val(*x),
                    self.val(*off),
                    self.val(*w),
                    g,
                    self.rg(*x),
                    self.rg(*off),
                );
                if let Some(dx) = r.dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(d) = r.doffset {
                    self.accumulate(grads, *off, d);
                }
                self.accumulate(grads, *w, r.dw);
                if let Some(b) = b {
                    self.accumulate(grads, *b, r.db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Relu(x) => {
                let d = g.zip_map(out, |g, y| if y > 0.0 { g } else { 0.0 }).expect("relu grad shape");
                self.accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = g.zip_map(out, |g, y| g * y * (1.0 - y)).expect("sigmoid grad shape");
                self.accumulate(grads, *x, d);
            }
            Op::MulChannel(x, gate) => {
                let (xv, gv) = (self.val(*x), self.val(*gate));
                if self.rg(*x) {
                    self.accumulate(grads, *x, mul_channel_t(g, gv));
                }
                if self.rg(*gate) {
                    let s = xv.shape();
                    let dg = Tensor::from_fn(gv.shape(), |n, c, _, _| {
                        g.plane(n, c).iter().zip(xv.plane(n, c)).map(|(a, b)| a * b).sum()
                    });
                    debug_assert_eq!(dg.shape().c, s.c);
                    self.accumulate(grads, *gate, dg);
                }
            }
            Op::MulPixel(x, gate) => {
                let (xv, gv) = (self.val(*x), self.val(*gate));
                if self.rg(*x) {
                    self.accumulate(grads, *x, mul_pixel_t(g, gv));
                }
                if self.rg(*gate) {
                    let s = xv.shape();
                    let mut dg = Tensor::zeros(gv.shape());
                    for n in 0..s.n {
                        for c in 0..s.c {
                            let (gp, xp) = (g.plane(n, c), xv.plane(n, c));
                            dg.plane_mut(n, 0)
                                .iter_mut()
                                .zip(gp.iter().zip(xp))
                                .for_each(|(d, (a, b))| *d += a * b);
                        }
                    }
                    self.accumulate(grads, *gate, dg);
                }
            }
            Op::Gap(x) => {
                let s = self.val(*x).shape();
                let norm = 1.0 / s.plane() as f64;
                let d = Tensor::from_fn(s, |n, c, _, _| g.at(n, c, 0, 0) * norm);
                self.accumulate(grads, *x, d);
            }
            Op::Concat(a, b) => {
                let (da, db) = kernels::split_channels(g, self.val(*a).shape().c);
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Resize(x) => {
                let d = kernels::resize_bilinear_backward(self.val(*x).shape(), g);
                self.accumulate(grads, *x, d);
            }
            Op::AreaDown(x, f) => {
                let d = kernels::area_downsample_backward(self.val(*x).shape(), *f, g);
                self.accumulate(grads, *x, d);
            }
            Op::MaxPool { x, arg } => {
                let mut d = Tensor::zeros(self.val(*x).shape());
                for (&i, &gv) in arg.iter().zip(g.data()) {
                    d.data_mut()[i] += gv;
                }
                self.accumulate(grads, *x, d);
            }
            Op::Affine { x, scale } => {
                let zeros = vec![0.0; scale.len()];
                self.accumulate(grads, *x, affine_t(g, &zeros, scale));
            }
            Op::Charbonnier { a, b, eps } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let k = scalar_of(g) / av.len() as f64;
                let e2 = eps * eps;
                let d = av
                    .zip_map(bv, |x, y| k * (x - y) / ((x - y) * (x - y) + e2).sqrt())
                    .expect("charbonnier grad shape");
                if self.rg(*b) {
                    self.accumulate(grads, *b, d.scale(-1.0));
                }
                self.accumulate(grads, *a, d);
            }
            Op::MeanAbsDiff(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let k = scalar_of(g) / av.len() as f64;
                let d = av
                    .zip_map(bv, |x, y| {
                        if x > y {
                            k
                        } else if x < y {
                            -k
                        } else {
                            0.0
                        }
                    })
                    .expect("mean_abs_diff grad shape");
                if self.rg(*b) {
                    self.accumulate(grads, *b, d.scale(-1.0));
                }
                self.accumulate(grads, *a, d);
            }
            Op::Scale(x, k) => self.accumulate(grads, *x, g.scale(*k)),
            Op::MulScalar(a, b) => {
                let gs = scalar_of(g);
                let (av, bv) = (scalar_of(self.val(*a)), scalar_of(self.val(*b)));
                self.accumulate(grads, *a, Tensor::scalar(gs * bv));
                self.accumulate(grads, *b, Tensor::scalar(gs * av));
            }
            Op::RecipFloor(x, floor) => {
                let xv = scalar_of(self.val(*x));
                let d = if xv > *floor { -scalar_of(g) / (xv * xv) } else { 0.0 };
                self.accumulate(grads, *x, Tensor::scalar(d));
            }
            Op::Sum(xs) => {
                for x in xs {
                    self.accumulate(grads, *x, g.clone());
                }
            }
            Op::WeightedSum(x, w) => self.accumulate(grads, *x, w.scale(scalar_of(g))),
        }
    }
}

impl Ops for Tape {
    type V = Var;

    fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        self.val(*v)
    }

    fn conv2d(&mut self, x: &Var, w: &Var, b: Option<&Var>, g: ConvGeom) -> Var {
        let y = kernels::conv2d(self.val(*x), self.val(*w), b.map(|b| self.val(*b)), g);
        let rg = self.rg(*x) || self.rg(*w) || b.is_some_and(|b| self.rg(*b));
        self.push(y, Op::Conv { x: *x, w: *w, b: b.copied(), g }, rg)
    }

    fn conv_transpose2d(&mut self, x: &Var, w: &Var, b: Option<&Var>, g: ConvGeom) -> Var {
        let y = kernels::conv_transpose2d(self.val(*x), self.val(*w), b.map(|b| self.val(*b)), g);
        let rg = self.rg(*x) || self.rg(*w) || b.is_some_and(|b| self.rg(*b));
        self.push(y, Op::ConvT { x: *x, w: *w, b: b.copied(), g }, rg)
    }

    fn deform_conv2d(&mut self, x: &Var, off: &Var, w: &Var, b: Option<&Var>) -> Var {
        let y = kernels::deform_conv2d(self.val(*x), self.val(*off), self.val(*w), b.map(|b| self.val(*b)));
        let rg = self.rg_any(&[*x, *off, *w]) || b.is_some_and(|b| self.rg(*b));
        self.push(
            y,
            Op::Deform {
                x: *x,
                off: *off,
                w: *w,
                b: b.copied(),
            },
            rg,
        )
    }

    fn add(&mut self, a: &Var, b: &Var) -> Var {
        let y = add_t(self.val(*a), self.val(*b));
        let rg = self.rg_any(&[*a, *b]);
        self.push(y, Op::Add(*a, *b), rg)
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Var {
        let y = sub_t(self.val(*a), self.val(*b));
        let rg = self.rg_any(&[*a, *b]);
        self.push(y, Op::Sub(*a, *b), rg)
    }

    fn relu(&mut self, x: &Var) -> Var {
        let y = relu_t(self.val(*x));
        let rg = self.rg(*x);
        self.push(y, Op::Relu(*x), rg)
    }

    fn sigmoid(&mut self, x: &Var) -> Var {
        let y = sigmoid_t(self.val(*x));
        let rg = self.rg(*x);
        self.push(y, Op::Sigmoid(*x), rg)
    }

    fn mul_channel(&mut self, x: &Var, gate: &Var) -> Var {
        let y = mul_channel_t(self.val(*x), self.val(*gate));
        let rg = self.rg_any(&[*x, *gate]);
        self.push(y, Op::MulChannel(*x, *gate), rg)
    }

    fn mul_pixel(&mut self, x: &Var, gate: &Var) -> Var {
        let y = mul_pixel_t(self.val(*x), self.val(*gate));
        let rg = self.rg_any(&[*x, *gate]);
        self.push(y, Op::MulPixel(*x, *gate), rg)
    }

    fn global_avg_pool(&mut self, x: &Var) -> Var {
        let y = kernels::global_avg_pool(self.val(*x));
        let rg = self.rg(*x);
        self.push(y, Op::Gap(*x), rg)
    }

    fn concat(&mut self, a: &Var, b: &Var) -> Var {
        let y = kernels::concat_channels(self.val(*a), self.val(*b));
        let rg = self.rg_any(&[*a, *b]);
        self.push(y, Op::Concat(*a, *b), rg)
    }

    fn resize(&mut self, x: &Var, h: usize, w: usize) -> Var {
        let y = kernels::resize_bilinear(self.val(*x), h, w);
        let rg = self.rg(*x);
        self.push(y, Op::Resize(*x), rg)
    }

    fn area_down(&mut self, x: &Var, factor: usize) -> Var {
        if factor == 1 {
            return *x;
        }
        let y = kernels::area_downsample(self.val(*x), factor);
        let rg = self.rg(*x);
        self.push(y, Op::AreaDown(*x, factor), rg)
    }

    fn max_pool2(&mut self, x: &Var) -> Var {
        let (y, arg) = kernels::max_pool2(self.val(*x));
        let rg = self.rg(*x);
        self.push(y, Op::MaxPool { x: *x, arg }, rg)
    }

    fn affine_channels(&mut self, x: &Var, shift: &[f64], scale: &[f64]) -> Var {
        let y = affine_t(self.val(*x), shift, scale);
        let rg = self.rg(*x);
        self.push(
            y,
            Op::Affine {
                x: *x,
                scale: scale.to_vec(),
            },
            rg,
        )
    }

    fn charbonnier(&mut self, a: &Var, b: &Var, eps: f64) -> Var {
        let y = Tensor::scalar(charbonnier_t(self.val(*a), self.val(*b), eps));
        let rg = self.rg_any(&[*a, *b]);
        self.push(y, Op::Charbonnier { a: *a, b: *b, eps }, rg)
    }

    fn mean_abs_diff(&mut self, a: &Var, b: &Var) -> Var {
        let y = Tensor::scalar(mean_abs_diff_t(self.val(*a), self.val(*b)));
        let rg = self.rg_any(&[*a, *b]);
        self.push(y, Op::MeanAbsDiff(*a, *b), rg)
    }

    fn scale(&mut self, x: &Var, k: f64) -> Var {
        let y = self.val(*x).scale(k);
        let rg = self.rg(*x);
        self.push(y, Op::Scale(*x, k), rg)
    }

    fn mul_scalar(&mut self, a: &Var, b: &Var) -> Var {
        let y = Tensor::scalar(scalar_of(self.val(*a)) * scalar_of(self.val(*b)));
        let rg = self.rg_any(&[*a, *b]);
        self.push(y, Op::MulScalar(*a, *b), rg)
    }

    fn recip_floor(&mut self, x: &Var, floor: f64) -> Var {
        let y = Tensor::scalar(1.0 / scalar_of(self.val(*x)).max(floor));
        let rg = self.rg(*x);
        self.push(y, Op::RecipFloor(*x, floor), rg)
    }

    fn sum(&mut self, xs: &[Var]) -> Var {
        let (first, rest) = xs.split_first().expect("sum of no values");
        let mut y = self.val(*first).clone();
        for x in rest {
            let v = self.val(*x);
            assert_eq!(v.shape(), y.shape(), "sum shapes");
            y.add_assign(v);
        }
        let rg = self.rg_any(xs);
        self.push(y, Op::Sum(xs.to_vec()), rg)
    }

    fn weighted_sum(&mut self, x: &Var, weights: &Tensor) -> Var {
        let y = Tensor::scalar(weighted_sum_t(self.val(*x), weights));
        let rg = self.rg(*x);
        self.push(y, Op::WeightedSum(*x, weights.clone()), rg)
    }
}

/// Immediate-mode backend without gradient bookkeeping.
#[derive(Default)]
pub struct Eager;

impl Ops for Eager {
    type V = Rc<Tensor>;

    fn constant(&mut self, t: Tensor) -> Rc<Tensor> {
        Rc::new(t)
    }

    fn value<'a>(&'a self, v: &'a Rc<Tensor>) -> &'a Tensor {
        v
    }

    fn conv2d(&mut self, x: &Rc<Tensor>, w: &Rc<Tensor>, b: Option<&Rc<Tensor>>, g: ConvGeom) -> Rc<Tensor> {
        Rc::new(kernels::conv2d(x, w, b.map(|b| &**b), g))
    }

    fn conv_transpose2d(&mut self, x: &Rc<Tensor>, w: &Rc<Tensor>, b: Option<&Rc<Tensor>>, g: ConvGeom) -> Rc<Tensor> {
        Rc::new(kernels::conv_transpose2d(x, w, b.map(|b| &**b), g))
    }

    fn deform_conv2d(&mut self, x: &Rc<Tensor>, off: &Rc<Tensor>, w: &Rc<Tensor>, b: Option<&Rc<Tensor>>) -> Rc<Tensor> {
        Rc::new(kernels::deform_conv2d(x, off, w, b.map(|b| &**b)))
    }

    fn add(&mut self, a: &Rc<Tensor>, b: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(add_t(a, b))
    }

    fn sub(&mut self, a: &Rc<Tensor>, b: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(sub_t(a, b))
    }

    fn relu(&mut self, x: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(relu_t(x))
    }

    fn sigmoid(&mut self, x: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(sigmoid_t(x))
    }

    fn mul_channel(&mut self, x: &Rc<Tensor>, gate: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(mul_channel_t(x, gate))
    }

    fn mul_pixel(&mut self, x: &Rc<Tensor>, gate: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(mul_pixel_t(x, gate))
    }

    fn global_avg_pool(&mut self, x: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(kernels::global_avg_pool(x))
    }

    fn concat(&mut self, a: &Rc<Tensor>, b: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(kernels::concat_channels(a, b))
    }

    fn resize(&mut self, x: &Rc<Tensor>, h: usize, w: usize) -> Rc<Tensor> {
        if (x.shape().h, x.shape().w) == (h, w) {
            return x.clone();
        }
        Rc::new(kernels::resize_bilinear(x, h, w))
    }

    fn area_down(&mut self, x: &Rc<Tensor>, factor: usize) -> Rc<Tensor> {
        if factor == 1 {
            return x.clone();
        }
        Rc::new(kernels::area_downsample(x, factor))
    }

    fn max_pool2(&mut self, x: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(kernels::max_pool2(x).0)
    }

    fn affine_channels(&mut self, x: &Rc<Tensor>, shift: &[f64], scale: &[f64]) -> Rc<Tensor> {
        Rc::new(affine_t(x, shift, scale))
    }

    fn charbonnier(&mut self, a: &Rc<Tensor>, b: &Rc<Tensor>, eps: f64) -> Rc<Tensor> {
        Rc::new(Tensor::scalar(charbonnier_t(a, b, eps)))
    }

    fn mean_abs_diff(&mut self, a: &Rc<Tensor>, b: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(Tensor::scalar(mean_abs_diff_t(a, b)))
    }

    fn scale(&mut self, x: &Rc<Tensor>, k: f64) -> Rc<Tensor> {
        Rc::new(x.scale(k))
    }

    fn mul_scalar(&mut self, a: &Rc<Tensor>, b: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::new(Tensor::scalar(scalar_of(a) * scalar_of(b)))
    }

    fn recip_floor(&mut self, x: &Rc<Tensor>, floor: f64) -> Rc<Tensor> {
        Rc::new(Tensor::scalar(1.0 / scalar_of(x).max(floor)))
    }

    fn sum(&mut self, xs: &[Rc<Tensor>]) -> Rc<Tensor> {
        let (first, rest) = xs.split_first().expect("sum of no values");
        let mut y = (**first).clone();
        for x in rest {
            y.add_assign(x);
        }
        Rc::new(y)
    }

    fn weighted_sum(&mut self, x: &Rc<Tensor>, weights: &Tensor) -> Rc<Tensor> {
        Rc::new(Tensor::scalar(weighted_sum_t(x, weights)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::Padding;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference gradient of `f` at `x`.
    fn numeric_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-5;
        let mut g = Tensor::zeros(x.shape());
        let mut xp = x.clone();
        for i in 0..x.len() {
            let orig = xp.data()[i];
            xp.data_mut()[i] = orig + h;
            let fp = f(&xp);
            xp.data_mut()[i] = orig - h;
            let fm = f(&xp);
            xp.data_mut()[i] = orig;
            g.data_mut()[i] = (fp - fm) / (2.0 * h);
        }
        g
    }

    fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
        let num: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let da: f64 = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        let db: f64 = b.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        num / da.max(db).max(1e-300)
    }

    /// Evaluate `sum(proj * op(x))` on a fresh tape, returning it and `d/dx`.
    fn probe(x: &Tensor, proj: &Tensor, op: &dyn Fn(&mut Tape, Var) -> Var) -> (f64, Tensor) {
        let mut t = Tape::new();
        let xv = t.variable(x.clone());
        let y = op(&mut t, xv);
        let s = t.weighted_sum(&y, proj);
        let grads = t.backward(s);
        (t.scalar(s), grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
    }

    fn check_op(shape: Shape, seed: u64, op: &dyn Fn(&mut Tape, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::uniform(shape, -1.0, 1.0, &mut rng);
        let mut t = Tape::new();
        let xv = t.variable(x.clone());
        let y = op(&mut t, xv);
        let ys = t.value(&y).shape();
        let proj = Tensor::uniform(ys, -1.0, 1.0, &mut rng);
        let (_, g) = probe(&x, &proj, op);
        let num = numeric_grad(&x, |x| probe(x, &proj, op).0);
        let e = rel_err(&g, &num);
        assert!(e < 1e-6, "relative error {e}");
    }

    #[test]
    fn elementwise_and_pooling_ops_match_finite_differences() {
        let s = Shape::new(1, 3, 5, 4);
        check_op(s, 1, &|t, x| t.sigmoid(&x));
        check_op(s, 2, &|t, x| t.resize(&x, 7, 3));
        check_op(s, 3, &|t, x| {
            let g = t.global_avg_pool(&x);
            let sg = t.sigmoid(&g);
            t.mul_channel(&x, &sg)
        });
        check_op(s, 4, &|t, x| {
            let w = t.constant(Tensor::full(Shape::new(1, 3, 1, 1), 0.7));
            let g = t.conv2d(&x, &w, None, ConvGeom::new(1, 1, 0, Padding::Zero));
            let sg = t.sigmoid(&g);
            t.mul_pixel(&x, &sg)
        });
        check_op(Shape::new(1, 2, 6, 6), 5, &|t, x| t.max_pool2(&x));
        check_op(s, 6, &|t, x| {
            let y = t.scale(&x, 2.0);
            t.concat(&x, &y)
        });
        check_op(s, 7, &|t, x| t.affine_channels(&x, &[0.1, 0.2, 0.3], &[2.0, 3.0, 4.0]));
        check_op(Shape::new(2, 2, 8, 4), 8, &|t, x| t.area_down(&x, 4));
    }

    #[test]
    fn conv_family_matches_finite_differences() {
        let s = Shape::new(2, 3, 6, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = Tensor::uniform(Shape::new(4, 3, 3, 3), -0.5, 0.5, &mut rng);
        let wt = Tensor::uniform(Shape::new(3, 2, 4, 4), -0.5, 0.5, &mut rng);
        let b = Tensor::uniform(Shape::new(4, 1, 1, 1), -0.5, 0.5, &mut rng);
        let off = Tensor::uniform(Shape::new(2, 18, 6, 6), -1.7, 1.7, &mut rng);
        for geom in [
            ConvGeom::new(3, 1, 1, Padding::Reflect),
            ConvGeom::new(3, 2, 1, Padding::Zero),
            ConvGeom::new(3, 4, 1, Padding::Zero),
        ] {
            let (w, b) = (w.clone(), b.clone());
            check_op(s, 10, &move |t, x| {
                let wv = t.constant(w.clone());
                let bv = t.constant(b.clone());
                t.conv2d(&x, &wv, Some(&bv), geom)
            });
        }
        check_op(s, 11, &|t, x| {
            let wv = t.constant(wt.clone());
            t.conv_transpose2d(&x, &wv, None, ConvGeom::new(4, 2, 1, Padding::Zero))
        });
        let (w2, off2) = (w.clone(), off.clone());
        check_op(s, 12, &move |t, x| {
            let wv = t.constant(w2.clone());
            let ov = t.constant(off2.clone());
            t.deform_conv2d(&x, &ov, &wv, None)
        });
        // gradient with respect to the offsets themselves
        let xin = Tensor::uniform(s, -1.0, 1.0, &mut rng);
        check_op(off.shape(), 13, &move |t, o| {
            let wv = t.constant(w.clone());
            let xv = t.constant(xin.clone());
            t.deform_conv2d(&xv, &o, &wv, None)
        });
    }

    #[test]
    fn weight_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::uniform(Shape::new(2, 3, 5, 5), -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(Shape::new(2, 3, 3, 3), -0.5, 0.5, &mut rng);
        let target = Tensor::uniform(Shape::new(2, 2, 5, 5), -1.0, 1.0, &mut rng);
        let geom = ConvGeom::new(3, 1, 1, Padding::Reflect);
        let f = |w: &Tensor| {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let wv = t.variable(w.clone());
            let y = t.conv2d(&xv, &wv, None, geom);
            let tv = t.constant(target.clone());
            let l = t.charbonnier(&y, &tv, 1e-3);
            let g = t.backward(l);
            (t.scalar(l), g.get(wv).unwrap().clone())
        };
        let (_, g) = f(&w);
        let num = numeric_grad(&w, |w| f(w).0);
        assert!(rel_err(&g, &num) < 1e-6);
    }

    #[test]
    fn scalar_ops_backprop() {
        let mut t = Tape::new();
        let a = t.variable(Tensor::scalar(2.0));
        let b = t.variable(Tensor::scalar(4.0));
        let r = t.recip_floor(&b, 1e-7);
        let m = t.mul_scalar(&a, &r);
        let s = t.sum(&[m, a]);
        let out = t.scale(&s, 3.0);
        let g = t.backward(out);
        assert!((t.scalar(out) - 7.5).abs() < 1e-15);
        // d/da 3(a/b + a) = 3(1/b + 1) = 3.75; d/db = -3a/b^2 = -0.375
        assert!((g.get(a).unwrap().data()[0] - 3.75).abs() < 1e-15);
        assert!((g.get(b).unwrap().data()[0] + 0.375).abs() < 1e-15);
    }

    #[test]
    fn eager_and_tape_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::uniform(Shape::new(1, 3, 8, 8), -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(Shape::new(3, 3, 3, 3), -1.0, 1.0, &mut rng);
        fn run<O: Ops>(o: &mut O, x: &Tensor, w: &Tensor) -> Tensor {
            let xv = o.constant(x.clone());
            let wv = o.constant(w.clone());
            let y = o.conv2d(&xv, &wv, None, ConvGeom::new(3, 1, 1, Padding::Reflect));
            let r = o.relu(&y);
            let up = o.resize(&r, 16, 16);
            o.value(&up).clone()
        }
        assert_eq!(run(&mut Tape::new(), &x, &w), run(&mut Eager, &x, &w));
    }
}
