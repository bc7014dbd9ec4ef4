//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in execution order, so the node list
//! is already topologically sorted. [`Graph::backward`] walks it once in
//! reverse. Leaf gradients accumulate across calls until
//! [`Graph::clear_grads`].

use crate::error::{Error, Result};
use crate::ops::{self, BnMode, Conv2dSpec};
use crate::tensor::{Dims, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of an operation defined outside this module.
pub trait Backward {
    /// Returns one entry per input; `None` where `needs[i]` is false or the
    /// input receives no gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: Conv2dSpec,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(Vec<f64>, Vec<f64>)>,
        eps: f64,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Matmul(Var, Var),
    Upsample2x(Var),
    ConcatChannels(Vec<Var>),
    SliceChannels {
        x: Var,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn Backward>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Ordered record of operations (the tape).
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        Some(existing) => existing.axpy(1.0, &g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that receives gradients.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn clear_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// A constant copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let t = self.value(a).map(|x| k * x);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, k), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = ops::relu(self.value(a));
        let rg = self.rg(&[a]);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = ops::sigmoid(self.value(a));
        let rg = self.rg(&[a]);
        self.push(t, Op::Sigmoid(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::abs);
        let rg = self.rg(&[a]);
        self.push(t, Op::Abs(a), rg)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let t = ops::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), spec)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        Ok(self.push(t, Op::Conv2d { x, w, b, spec }, rg))
    }

    /// Batch normalization. In training mode the batch statistics are
    /// returned so the caller can update its running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_>,
        eps: f64,
    ) -> Result<(Var, Option<ops::BatchStats>)> {
        let (t, stats) = ops::batch_norm(self.value(x), self.value(gamma).data(), self.value(beta).data(), mode, eps)?;
        let running = match mode {
            BnMode::Train => None,
            BnMode::Eval {
                running_mean,
                running_var,
            } => Some((running_mean.to_vec(), running_var.to_vec())),
        };
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                running,
                eps,
            },
            rg,
        );
        Ok((v, stats))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = ops::softmax_axis(self.value(x), axis)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax { x, axis }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = ops::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Matmul(a, b), rg))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let t = ops::bilinear_upsample_x2(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Upsample2x(x), rg))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let t = Tensor::concat_channels(&vals)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::ConcatChannels(parts.to_vec()), rg))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x).slice_channels(start, len)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SliceChannels { x, start }, rg))
    }

    /// Sum of all elements, as a `1x1x1x1` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(t, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).mean());
        let rg = self.rg(&[x]);
        self.push(t, Op::Mean(x), rg)
    }

    /// Records an externally computed value with its own backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, rule: Box<dyn Backward>) -> Var {
        let rg = self.rg(inputs);
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
            rg,
        )
    }

    /// Propagates `d loss / d node` back to every gradient-requiring leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Usage(format!("backward needs a scalar loss, got dims {}", lv.dims())));
        }
        if !lv.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {}", lv.data()[0])));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.dims()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let val = |v: Var| &self.nodes[v.0].value;
            let needs = |v: Var| self.nodes[v.0].requires_grad;
            let mut out: Vec<(Var, Tensor)> = Vec::new();
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    out.push((*a, g.clone()));
                    out.push((*b, g));
                }
                Op::Sub(a, b) => {
                    out.push((*b, g.map(|v| -v)));
                    out.push((*a, g));
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        out.push((*a, g.zip_map(val(*b), "mul_backward", |x, y| x * y)?));
                    }
                    if needs(*b) {
                        out.push((*b, g.zip_map(val(*a), "mul_backward", |x, y| x * y)?));
                    }
                }
                Op::Scale(a, k) => out.push((*a, g.map(|v| k * v))),
                Op::Relu(a) => out.push((*a, g.zip_map(val(*a), "relu_backward", |d, x| if x > 0.0 { d } else { 0.0 })?)),
                Op::Sigmoid(a) => out.push((*a, g.zip_map(&node.value, "sigmoid_backward", |d, s| d * s * (1.0 - s))?)),
                Op::Abs(a) => out.push((*a, g.zip_map(val(*a), "abs_backward", |d, x| d * sign(x))?)),
                Op::Conv2d { x, w, b, spec } => {
                    let r = ops::conv2d_backward(val(*x), val(*w), b.map(|b| val(b).dims()), *spec, &g, needs(*x), needs(*w))?;
                    if let Some(t) = r.input {
                        out.push((*x, t));
                    }
                    if let Some(t) = r.weight {
                        out.push((*w, t));
                    }
                    if let (Some(bv), Some(t)) = (b, r.bias) {
                        out.push((*bv, t));
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    running,
                    eps,
                } => {
                    let mode = match running {
                        None => BnMode::Train,
                        Some((m, v)) => BnMode::Eval {
                            running_mean: m,
                            running_var: v,
                        },
                    };
                    let (dx, dg, db) = ops::batch_norm_backward(val(*x), val(*gamma).data(), mode, *eps, &g)?;
                    out.push((*x, dx));
                    out.push((*gamma, Tensor::new(val(*gamma).dims(), dg)?));
                    out.push((*beta, Tensor::new(val(*beta).dims(), db)?));
                }
                Op::Softmax { x, axis } => out.push((*x, ops::softmax_backward(&node.value, &g, *axis)?)),
                Op::Matmul(a, b) => {
                    let (da, db) = ops::matmul_backward(val(*a), val(*b), &g)?;
                    out.push((*a, da));
                    out.push((*b, db));
                }
                Op::Upsample2x(x) => out.push((*x, ops::bilinear_upsample_x2_backward(val(*x).dims(), &g)?)),
                Op::ConcatChannels(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let c = val(*p).dims().c;
                        if needs(*p) {
                            out.push((*p, g.slice_channels(start, c)?));
                        }
                        start += c;
                    }
                }
                Op::SliceChannels { x, start } => {
                    let xd = val(*x).dims();
                    let len = g.dims().c;
                    let plane = xd.plane();
                    let mut full = Tensor::zeros(xd);
                    for n in 0..xd.n {
                        let dst = &mut full.image_mut(n)[start * plane..(start + len) * plane];
                        dst.copy_from_slice(g.image(n));
                    }
                    out.push((*x, full));
                }
                Op::Sum(x) => out.push((*x, Tensor::full(val(*x).dims(), g.data()[0]))),
                Op::Mean(x) => {
                    let d: Dims = val(*x).dims();
                    let k = g.data()[0] / d.numel().max(1) as f64;
                    out.push((*x, Tensor::full(d, k)));
                }
                Op::Custom { inputs, rule } => {
                    let ins: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                    let need: Vec<bool> = inputs.iter().map(|&v| needs(v)).collect();
                    let res = rule.backward(&ins, &node.value, &g, &need)?;
                    for (v, t) in inputs.iter().zip(res) {
                        if let Some(t) = t {
                            out.push((*v, t));
                        }
                    }
                }
            }
            for (v, t) in out {
                if self.nodes[v.0].requires_grad {
                    accumulate(&mut grads[v.0], t)?;
                }
            }
        }

        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                let node = &mut self.nodes[i];
                if matches!(node.op, Op::Leaf) && node.requires_grad {
                    accumulate(&mut node.grad, g)?;
                }
            }
        }
        Ok(())
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
