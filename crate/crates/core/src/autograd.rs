//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles in
//! order. [`Tape::backward`] walks the records from the loss back to the
//! leaves exactly once and accumulates gradients into tracked leaves.
//! Gradients persist on the tape across backward calls, so two backward
//! passes of the same loss double them. A tape is meant to live for one
//! training step.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    PowF(Var, T),
    Exp(Var),
    Log(Var),
    MaxScalar(Var, T),
    MinScalar(Var, T),
    PRelu(Var, Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    },
    AddChannelBias(Var, Var),
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    name: Option<String>,
    grad: Option<Tensor<T>>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Tape::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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
            name: None,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(Error::Contract(format!("variable {} is not on this tape", v.0)));
        }
        Ok(())
    }

    fn tracks(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = self.tracks(inputs);
        self.push(value, op, rg)
    }

    /// Records a leaf. It is differentiated iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad();
        self.push(t.detached(), Op::Leaf, rg)
    }

    /// Records an untracked leaf.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t.detached(), Op::Leaf, false)
    }

    /// Records a named parameter leaf; its gradient can later be retrieved
    /// by name with [`Tape::named_grads`].
    pub fn param(&mut self, name: &str, t: &Tensor<T>) -> Var {
        let v = self.leaf(t.detached_tracking(t.requires_grad()));
        self.nodes[v.0].name = Some(name.to_string());
        v
    }

    /// Most recent parameter leaf recorded under `name`.
    pub fn find_param(&self, name: &str) -> Option<Var> {
        self.nodes
            .iter()
            .rposition(|n| n.name.as_deref() == Some(name))
            .map(Var)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a tracked leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(|n| n.grad.as_ref())
    }

    /// Gradients of every named parameter leaf reached by backward.
    pub fn named_grads(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.nodes
            .iter()
            .filter_map(|n| Some((n.name.as_deref()?, n.grad.as_ref()?)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.record(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose()?;
        Ok(self.record(v, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.record(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.record(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.record(v, Op::Mul(a, b), &[a, b]))
    }

    /// `x[m×n] + v[n]`, broadcasting `v` over rows (bias add).
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let out = self.value(x).add_row_vector(self.value(v))?;
        Ok(self.record(out, Op::AddRow(x, v), &[x, v]))
    }

    /// `x[m×n] * v[n]`, broadcasting `v` over rows.
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let out = self.value(x).mul_row_vector(self.value(v))?;
        Ok(self.record(out, Op::MulRow(x, v), &[x, v]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).scale(c);
        self.record(v, Op::Scale(a, c), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.record(v, Op::AddScalar(a), &[a])
    }

    pub fn powf(&mut self, a: Var, p: T) -> Var {
        let v = self.value(a).map(|x| x.powf(p));
        self.record(v, Op::PowF(a, p), &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(T::exp);
        self.record(v, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(T::ln);
        self.record(v, Op::Log(a), &[a])
    }

    /// Elementwise `max(x, c)`; a tie routes the gradient to `x`.
    pub fn max_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| if x >= c { x } else { c });
        self.record(v, Op::MaxScalar(a, c), &[a])
    }

    /// Elementwise `min(x, c)`; a tie routes the gradient to `c`.
    pub fn min_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| if x < c { x } else { c });
        self.record(v, Op::MinScalar(a, c), &[a])
    }

    /// `max(0, x) + alpha * min(0, x)` with a one-element `alpha`.
    ///
    /// The subgradient at `x = 0` is 1.
    pub fn prelu(&mut self, x: Var, alpha: Var) -> Result<Var> {
        let a = self.value(alpha).item()?;
        let v = self.value(x).map(|z| prelu(z, a));
        Ok(self.record(v, Op::PRelu(x, alpha), &[x, alpha]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.record(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        self.record(v, Op::Mean(a), &[a])
    }

    /// Column sums of a 2-D value.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).sum_rows()?;
        Ok(self.record(v, Op::SumRows(a), &[a]))
    }

    /// Column means of a 2-D value.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a).rows();
        let s = self.sum_rows(a)?;
        Ok(self.scale(s, T::one() / T::from_usize(m.max(1)).unwrap()))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).softmax_rows()?;
        Ok(self.record(v, Op::Softmax(a), &[a]))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).log_softmax_rows()?;
        Ok(self.record(v, Op::LogSoftmax(a), &[a]))
    }

    /// 2-D cross-correlation; see [`Tensor::conv2d`].
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let v = self.value(input).conv2d(self.value(kernel), stride, padding)?;
        Ok(self.record(
            v,
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
            &[input, kernel],
        ))
    }

    /// Adds `b[C]` to every pixel of channel `C` in a `[N, C, H, W]` value.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let bias = self.value(b);
        if xs.len() != 4 || bias.len() != xs[1] {
            return Err(Error::Dimension {
                op: "add_channel_bias",
                left: xs,
                right: bias.shape().to_vec(),
            });
        }
        let plane = xs[2] * xs[3];
        let c = xs[1];
        let mut out = self.value(x).detached();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v + bias.data()[(i / plane) % c];
        }
        Ok(self.record(out, Op::AddChannelBias(x, b), &[x, b]))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.record(v, Op::Reshape(a), &[a]))
    }

    /// Propagates `d loss / d node` from a scalar loss to every tracked leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape().to_vec()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let contributions = self.local_grads(i, &op, &g)?;
            for (input, gi) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => *acc = acc.add(&gi)?,
                    slot @ None => *slot = Some(gi),
                }
            }
            if let Op::Leaf = op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => *acc = acc.add(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, op: &Op<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let out = &self.nodes[i].value;
        let val = |v: Var| &self.nodes[v.0].value;
        let bcast = |v: Var, s: T| Tensor::full(val(v).shape().to_vec(), s);
        Ok(match *op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => vec![
                (a, g.matmul(&val(b).transpose()?)?),
                (b, val(a).transpose()?.matmul(g)?),
            ],
            Op::Transpose(a) => vec![(a, g.transpose()?)],
            Op::Add(a, b) => vec![(a, g.detached()), (b, g.detached())],
            Op::Sub(a, b) => vec![(a, g.detached()), (b, g.scale(-T::one()))],
            Op::Mul(a, b) => vec![(a, g.mul(val(b))?), (b, g.mul(val(a))?)],
            Op::AddRow(x, v) => {
                let gv = g.sum_rows()?.reshape(val(v).shape().to_vec())?;
                vec![(x, g.detached()), (v, gv)]
            }
            Op::MulRow(x, v) => {
                let gx = g.mul_row_vector(val(v))?;
                let gv = g.mul(val(x))?.sum_rows()?.reshape(val(v).shape().to_vec())?;
                vec![(x, gx), (v, gv)]
            }
            Op::Scale(a, c) => vec![(a, g.scale(c))],
            Op::AddScalar(a) => vec![(a, g.detached())],
            Op::PowF(a, p) => {
                let d = val(a).map(|x| p * x.powf(p - T::one()));
                vec![(a, g.mul(&d)?)]
            }
            Op::Exp(a) => vec![(a, g.mul(out)?)],
            Op::Log(a) => vec![(a, g.zip_with(val(a), "log grad", |gi, x| gi / x)?)],
            Op::MaxScalar(a, c) => {
                let d = val(a).map(|x| if x >= c { T::one() } else { T::zero() });
                vec![(a, g.mul(&d)?)]
            }
            Op::MinScalar(a, c) => {
                let d = val(a).map(|x| if x < c { T::one() } else { T::zero() });
                vec![(a, g.mul(&d)?)]
            }
            Op::PRelu(x, alpha) => {
                let a = val(alpha).item()?;
                let gx = g.zip_with(val(x), "prelu grad", |gi, z| if z >= T::zero() { gi } else { gi * a })?;
                let ga = g
                    .zip_with(val(x), "prelu alpha grad", |gi, z| gi * z.min(T::zero()))?
                    .sum();
                vec![(x, gx), (alpha, Tensor::full(val(alpha).shape().to_vec(), ga))]
            }
            Op::Sum(a) => vec![(a, bcast(a, g.item()?))],
            Op::Mean(a) => {
                let n = T::from_usize(val(a).len().max(1)).unwrap();
                vec![(a, bcast(a, g.item()? / n))]
            }
            Op::SumRows(a) => {
                let rows = val(a).rows();
                let mut data = Vec::with_capacity(val(a).len());
                for _ in 0..rows {
                    data.extend_from_slice(g.data());
                }
                vec![(a, Tensor::new(val(a).shape().to_vec(), data)?)]
            }
            Op::Softmax(a) => {
                let n = out.cols();
                let mut d = out.detached();
                for ((drow, yrow), grow) in d
                    .data_mut()
                    .chunks_mut(n)
                    .zip(out.data().chunks(n))
                    .zip(g.data().chunks(n))
                {
                    let dot = yrow.iter().zip(grow).fold(T::zero(), |s, (&y, &gg)| s + y * gg);
                    for ((dv, &y), &gg) in drow.iter_mut().zip(yrow).zip(grow) {
                        *dv = y * (gg - dot);
                    }
                }
                vec![(a, d)]
            }
            Op::LogSoftmax(a) => {
                let n = out.cols();
                let mut d = g.detached();
                for (drow, yrow) in d.data_mut().chunks_mut(n).zip(out.data().chunks(n)) {
                    let gsum = drow.iter().fold(T::zero(), |s, &v| s + v);
                    for (dv, &y) in drow.iter_mut().zip(yrow) {
                        *dv = *dv - y.exp() * gsum;
                    }
                }
                vec![(a, d)]
            }
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            } => vec![
                (
                    input,
                    Tensor::conv2d_grad_input(g, val(input).shape(), val(kernel), stride, padding)?,
                ),
                (
                    kernel,
                    Tensor::conv2d_grad_kernel(g, val(input), val(kernel).shape(), stride, padding)?,
                ),
            ],
            Op::AddChannelBias(x, b) => {
                let xs = val(x).shape();
                let plane = xs[2] * xs[3];
                let c = xs[1];
                let mut gb = vec![T::zero(); c];
                for (k, &gv) in g.data().iter().enumerate() {
                    gb[(k / plane) % c] = gb[(k / plane) % c] + gv;
                }
                vec![(x, g.detached()), (b, Tensor::new(val(b).shape().to_vec(), gb)?)]
            }
            Op::Reshape(a) => vec![(a, g.reshape(val(a).shape().to_vec())?)],
        })
    }
}

/// Scalar PReLU: `max(0, x) + alpha * min(0, x)`.
pub fn prelu<T: Scalar>(x: T, alpha: T) -> T {
    x.max(T::zero()) + alpha * x.min(T::zero())
}

impl<T: Scalar> Tensor<T> {
    fn detached_tracking(&self, on: bool) -> Tensor<T> {
        let mut t = self.detached();
        t.set_requires_grad(on);
        t
    }
}
