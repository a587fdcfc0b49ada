//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation as it executes. Values are addressed by
//! [`Var`] handles; [`Tape::backward`] walks the record in reverse and leaves
//! `d loss / d v` for every node that depends on a gradient-requiring leaf.
//! Only the operator set the image networks need is provided.

mod blob;
mod gradcheck;
mod kernels;
mod tensor;

pub use blob::{read_blob, write_blob, NamedTensor};
pub use gradcheck::{gradcheck, GradcheckReport, GRADCHECK_FLOOR};
pub use tensor::{Scalar, Tensor};

use crate::error::{Error, Result};

/// Default epsilon inside instance normalization.
pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    Upsample2x(Var),
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    LeakyRelu(Var, T),
    Relu(Var),
    Tanh(Var),
    Concat(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    L1(Var, Var),
    Mse(Var, Var),
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Ordered record of executed operations.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
    branches: Branches,
}

/// Which side of the kink each element of a piecewise-linear op took.
enum Branches {
    Off,
    Record(Vec<bool>),
    Replay { pattern: Vec<bool>, next: usize, diverged: bool },
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
            grads: Vec::new(),
            backward_done: false,
            branches: Branches::Off,
        }
    }

    /// Tape that remembers the branch taken by every relu, leaky relu and l1 element.
    pub fn recording_branches() -> Self {
        Tape {
            branches: Branches::Record(Vec::new()),
            ..Self::new()
        }
    }

    /// Tape whose piecewise-linear ops follow `pattern` instead of the sign of
    /// their input, so values stay on one linear piece of the function.
    pub fn replaying_branches(pattern: Vec<bool>) -> Self {
        Tape {
            branches: Branches::Replay {
                pattern,
                next: 0,
                diverged: false,
            },
            ..Self::new()
        }
    }

    /// Branches recorded so far, if recording.
    pub fn branch_pattern(&self) -> Option<&[bool]> {
        match &self.branches {
            Branches::Record(p) => Some(p),
            _ => None,
        }
    }

    /// Whether a replayed pattern ran out or was left partly unused.
    pub fn replay_diverged(&self) -> bool {
        match &self.branches {
            Branches::Replay {
                pattern,
                next,
                diverged,
            } => *diverged || *next != pattern.len(),
            _ => false,
        }
    }

    /// Branch for one element whose natural choice is `natural`.
    fn branch(&mut self, natural: bool) -> bool {
        match &mut self.branches {
            Branches::Off => natural,
            Branches::Record(p) => {
                p.push(natural);
                natural
            }
            Branches::Replay {
                pattern,
                next,
                diverged,
            } => match pattern.get(*next) {
                Some(&b) => {
                    *next += 1;
                    b
                }
                None => {
                    *diverged = true;
                    natural
                }
            },
        }
    }

    fn branches_active(&self) -> bool {
        !matches!(self.branches, Branches::Off)
    }

    /// Elementwise piecewise-linear map: `pos` on the non-negative side, `neg` otherwise.
    fn piecewise(&mut self, x: Var, pos: impl Fn(T) -> T, neg: impl Fn(T) -> T, op: Op<T>) -> Var {
        if !self.branches_active() {
            return self.map(x, |v| if v >= T::zero() { pos(v) } else { neg(v) }, op);
        }
        let src = self.value(x).data().to_vec();
        let data = src
            .into_iter()
            .map(|v| if self.branch(v >= T::zero()) { pos(v) } else { neg(v) })
            .collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(out, rg, op)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass; `None` if `v` took no part in it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Drop gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn check_finite(&self, v: Var, what: &str) -> Result<Var> {
        if self.nodes[v.0].value.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite(format!("{what} produced a non-finite value")))
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = kernels::conv2d_forward(self.value(x), self.value(w), self.value(b), stride, pad)?;
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(
            out,
            rg,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
        ))
    }

    /// Nearest-neighbour 2x spatial upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let out = kernels::upsample2x(self.value(x))?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, rg, Op::Upsample2x(x)))
    }

    /// 2x nearest upsample followed by a stride-1, padding-1 convolution.
    pub fn upsample_conv(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let k = self.value(w).shape().get(2).copied().unwrap_or(0);
        if k != 3 {
            return Err(Error::Shape(format!("upsample_conv expects a 3x3 kernel, got {k}")));
        }
        let up = self.upsample2x(x)?;
        self.conv2d(up, w, b, 1, 1)
    }

    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (y, xhat, inv_std) =
            kernels::instance_norm_forward(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            y,
            rg,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let src = self.value(x);
        let out = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&v| f(v)).collect())
            .expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(out, rg, op)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::of(slope);
        self.piecewise(x, |v| v, |v| v * s, Op::LeakyRelu(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.piecewise(x, |v| v, |_| T::zero(), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        self.map(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        self.map(x, |v| v + c, Op::AddScalar(x))
    }

    /// Stack along the channel axis of two `[N,C,H,W]` tensors.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [na, ca, ha, wa] = self.value(a).dims4()?;
        let [nb, cb, hb, wb] = self.value(b).dims4()?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::Shape(format!(
                "concat needs matching N,H,W: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let (pa, pb) = (ca * ha * wa, cb * hb * wb);
        let mut out = Vec::with_capacity(na * (pa + pb));
        for s in 0..na {
            out.extend_from_slice(&self.value(a).data()[s * pa..(s + 1) * pa]);
            out.extend_from_slice(&self.value(b).data()[s * pb..(s + 1) * pb]);
        }
        let t = Tensor::new(vec![na, ca + cb, ha, wa], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(t, rg, Op::Concat(a, b)))
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "elementwise op on {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let out = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
        )?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<T>() / T::of(t.numel() as f64);
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Mean(x))
    }

    fn reduce_pair(&mut self, a: Var, b: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "loss operands {:?} and {:?} differ",
                ta.shape(),
                tb.shape()
            )));
        }
        let n = T::of(ta.numel() as f64);
        let s = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x - y)).sum::<T>() / n;
        let rg = self.any_grad(&[a, b]);
        let v = self.push(Tensor::scalar(s), rg, op);
        self.check_finite(v, "loss")
    }

    /// Mean absolute difference.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        if !self.branches_active() {
            return self.reduce_pair(a, b, |d| d.abs(), Op::L1(a, b));
        }
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return self.reduce_pair(a, b, |d| d.abs(), Op::L1(a, b));
        }
        let diffs: Vec<T> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x - y).collect();
        let n = T::of(diffs.len() as f64);
        let s = diffs
            .into_iter()
            .map(|d| if self.branch(d >= T::zero()) { d } else { -d })
            .sum::<T>()
            / n;
        let rg = self.any_grad(&[a, b]);
        let v = self.push(Tensor::scalar(s), rg, Op::L1(a, b));
        self.check_finite(v, "loss")
    }

    /// Mean squared difference.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.reduce_pair(a, b, |d| d * d, Op::Mse(a, b))
    }

    /// `mse(a, full(a.shape, target))`.
    pub fn mse_to(&mut self, a: Var, target: f64) -> Result<Var> {
        let t = Tensor::full(self.value(a).shape().to_vec(), T::of(target));
        let c = self.constant(t);
        self.mse_loss(a, c)
    }

    /// Populate gradients of `loss` with respect to every node it depends on.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::DetachedGraph);
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::ones(lv.shape().to_vec()));

        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&mut self, i: usize, g: &Tensor<T>) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut pending: Vec<(Var, Tensor<T>)> = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let need = [self.requires_grad(x), self.requires_grad(w), self.requires_grad(b)];
                let grads = kernels::conv2d_backward(self.value(x), self.value(w), g, stride, pad, need)?;
                if let Some(d) = grads.dx {
                    pending.push((x, d));
                }
                if let Some(d) = grads.dw {
                    pending.push((w, d));
                }
                if let Some(d) = grads.db {
                    pending.push((b, d));
                }
            }
            &Op::Upsample2x(x) => {
                if self.requires_grad(x) {
                    pending.push((x, kernels::upsample2x_backward(g, self.value(x).shape())?));
                }
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let grads = kernels::instance_norm_backward(g, self.value(*gamma), xhat, inv_std)?;
                pending.push((*x, grads.dx));
                pending.push((*gamma, grads.dgamma));
                pending.push((*beta, grads.dbeta));
            }
            &Op::LeakyRelu(x, s) => {
                let src = self.value(x).data();
                let d = g.clone().zip_with(src, |gv, xv| if xv >= T::zero() { gv } else { gv * s });
                pending.push((x, d));
            }
            &Op::Relu(x) => {
                let src = self.value(x).data();
                let d = g.clone().zip_with(src, |gv, xv| if xv >= T::zero() { gv } else { T::zero() });
                pending.push((x, d));
            }
            &Op::Tanh(x) => {
                let d = g.clone().zip_with(out.data(), |gv, y| gv * (T::one() - y * y));
                pending.push((x, d));
            }
            &Op::Concat(a, b) => {
                let [n, ca, h, w] = self.value(a).dims4()?;
                let cb = self.value(b).shape()[1];
                let (pa, pb) = (ca * h * w, cb * h * w);
                let mut da = Vec::with_capacity(n * pa);
                let mut db = Vec::with_capacity(n * pb);
                for s in 0..n {
                    let chunk = &g.data()[s * (pa + pb)..(s + 1) * (pa + pb)];
                    da.extend_from_slice(&chunk[..pa]);
                    db.extend_from_slice(&chunk[pa..]);
                }
                pending.push((a, Tensor::new(self.value(a).shape().to_vec(), da)?));
                pending.push((b, Tensor::new(self.value(b).shape().to_vec(), db)?));
            }
            &Op::Add(a, b) => {
                pending.push((a, g.clone()));
                pending.push((b, g.clone()));
            }
            &Op::Sub(a, b) => {
                pending.push((a, g.clone()));
                pending.push((b, g.clone().zip_with(g.data(), |v, _| -v)));
            }
            &Op::Mul(a, b) => {
                pending.push((a, g.clone().zip_with(self.value(b).data(), |gv, bv| gv * bv)));
                pending.push((b, g.clone().zip_with(self.value(a).data(), |gv, av| gv * av)));
            }
            &Op::Scale(x, c) => {
                pending.push((x, g.clone().zip_with(g.data(), |v, _| v * c)));
            }
            &Op::AddScalar(x) => pending.push((x, g.clone())),
            &Op::Sum(x) => {
                let gv = g.data()[0];
                pending.push((x, Tensor::full(self.value(x).shape().to_vec(), gv)));
            }
            &Op::Mean(x) => {
                let t = self.value(x);
                let gv = g.data()[0] / T::of(t.numel() as f64);
                pending.push((x, Tensor::full(t.shape().to_vec(), gv)));
            }
            &Op::L1(a, b) | &Op::Mse(a, b) => {
                let is_l1 = matches!(node.op, Op::L1(..));
                let (ta, tb) = (self.value(a), self.value(b));
                let n = T::of(ta.numel() as f64);
                let gv = g.data()[0];
                let two = T::of(2.0);
                let da: Vec<T> = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(&x, &y)| {
                        let d = x - y;
                        let slope = if is_l1 {
                            if d > T::zero() {
                                T::one()
                            } else if d < T::zero() {
                                -T::one()
                            } else {
                                T::zero()
                            }
                        } else {
                            two * d
                        };
                        gv * slope / n
                    })
                    .collect();
                let da = Tensor::new(ta.shape().to_vec(), da)?;
                let db = da.clone().zip_with(da.data(), |v, _| -v);
                pending.push((a, da));
                pending.push((b, db));
            }
        }
        for (v, d) in pending {
            self.accumulate(v, d);
        }
        Ok(())
    }
}

impl<T: Scalar> Tensor<T> {
    fn zip_with(mut self, other: &[T], f: impl Fn(T, T) -> T) -> Tensor<T> {
        for (a, &b) in self.data_mut().iter_mut().zip(other) {
            *a = f(*a, b);
        }
        self
    }
}
