//! Reverse-mode differentiation over a fixed primitive set.
//!
//! One [`Graph`] is built per loss evaluation and discarded after the
//! optimizer step. Nodes are append-only, so insertion order is a valid
//! topological order and the backward sweep visits each node exactly once,
//! in reverse.

use crate::tensor::{self, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Conv2d { input: NodeId, kernel: NodeId },
    Sum(NodeId),
    Mean(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Softplus(NodeId),
    Relu(NodeId),
    Transpose(NodeId),
    Broadcast(NodeId),
    Slice { input: NodeId, ranges: Vec<(usize, usize)> },
    Concat { parts: Vec<NodeId>, axis: usize },
    Dot(NodeId, NodeId),
    StopGrad(NodeId),
    /// Metadata-only view change; not a compute primitive.
    Reshape(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
    trainable: bool,
}

/// Numerically stable softplus; linear regime above 20 keeps gradients finite.
pub fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of a node, or zeros of its shape when no path reached it.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        match self.grads[id.0] {
            Some(ref t) => t.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            trainable: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn is_trainable(&self, id: NodeId) -> bool {
        self.nodes[id.0].trainable
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// Trainable leaf; gradients accumulate here.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        let id = self.push(value, Op::Leaf);
        self.nodes[id.0].trainable = true;
        id
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip(self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip(self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip(self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId) -> Result<NodeId> {
        let v = tensor::conv2d(self.value(input), self.value(kernel))?;
        Ok(self.push(v, Op::Conv2d { input, kernel }))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(v, Op::Mean(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::Domain("sqrt of non-positive input".into()));
        }
        let v = self.value(a).map(f64::sqrt);
        Ok(self.push(v, Op::Sqrt(a)))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).data().iter().any(|&x| x <= 0.0) {
            return Err(Error::Domain("log of non-positive input".into()));
        }
        let v = self.value(a).map(f64::ln);
        Ok(self.push(v, Op::Log(a)))
    }

    pub fn softplus_node(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = tensor::transpose(self.value(a))?;
        Ok(self.push(v, Op::Transpose(a)))
    }

    pub fn broadcast(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = tensor::broadcast_to(self.value(a), shape)?;
        Ok(self.push(v, Op::Broadcast(a)))
    }

    pub fn slice(&mut self, a: NodeId, ranges: &[(usize, usize)]) -> Result<NodeId> {
        let v = tensor::slice(self.value(a), ranges)?;
        Ok(self.push(
            v,
            Op::Slice {
                input: a,
                ranges: ranges.to_vec(),
            },
        ))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = tensor::concat(&tensors, axis)?;
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).dot(self.value(b))?);
        Ok(self.push(v, Op::Dot(a, b)))
    }

    /// Forward identity whose ancestors receive zero gradient.
    pub fn stop_gradient(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).clone();
        self.push(v, Op::StopGrad(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    // ── Composite helpers (no new primitives) ────────────────────────

    /// `a + c` with a scalar constant.
    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let s = self.scalar(c);
        let b = self.broadcast(s, &self.shape(a).to_vec())?;
        self.add(a, b)
    }

    /// `c * a` with a scalar constant.
    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let s = self.scalar(c);
        let b = self.broadcast(s, &self.shape(a).to_vec())?;
        self.mul(a, b)
    }

    /// `1 / a`, via `exp(-log a)`; requires strictly positive `a`.
    pub fn recip(&mut self, a: NodeId) -> Result<NodeId> {
        let l = self.log(a)?;
        let n = self.mul_scalar(l, -1.0)?;
        Ok(self.exp(n))
    }

    /// `sigmoid(a) = exp(-softplus(-a))`.
    pub fn sigmoid_node(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.mul_scalar(a, -1.0)?;
        let sp = self.softplus_node(n);
        let nsp = self.mul_scalar(sp, -1.0)?;
        Ok(self.exp(nsp))
    }

    /// `max(a, c)` elementwise with a constant, via relu.
    pub fn clamp_min(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let shifted = self.add_scalar(a, -c)?;
        let r = self.relu(shifted);
        self.add_scalar(r, c)
    }

    /// `min(a, c)` elementwise with a constant, via relu.
    pub fn clamp_max(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let neg = self.mul_scalar(a, -1.0)?;
        let m = self.clamp_min(neg, -c)?;
        self.mul_scalar(m, -1.0)
    }

    /// Mean squared difference `mean((a - b)^2)`.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar root; returns per-node gradients.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if self.value(root).numel() != 1 {
            return Err(Error::Domain(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    let ga = g.zip(self.value(*b), "mul-bwd", |gv, bv| gv * bv)?;
                    let gb = g.zip(self.value(*a), "mul-bwd", |gv, av| gv * av)?;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMul(a, b) => {
                    let bt = tensor::transpose(self.value(*b))?;
                    let at = tensor::transpose(self.value(*a))?;
                    accumulate(&mut grads, *a, tensor::matmul(&g, &bt)?);
                    accumulate(&mut grads, *b, tensor::matmul(&at, &g)?);
                }
                Op::Conv2d { input, kernel } => {
                    let gi = tensor::conv2d_grad_input(&g, self.value(*kernel), self.shape(*input))?;
                    let gk = tensor::conv2d_grad_kernel(&g, self.value(*input), self.shape(*kernel))?;
                    accumulate(&mut grads, *input, gi);
                    accumulate(&mut grads, *kernel, gk);
                }
                Op::Sum(a) => {
                    accumulate(&mut grads, *a, Tensor::filled(self.shape(*a), g.item()));
                }
                Op::Mean(a) => {
                    let n = self.value(*a).numel() as f64;
                    accumulate(&mut grads, *a, Tensor::filled(self.shape(*a), g.item() / n));
                }
                Op::Square(a) => {
                    let ga = g.zip(self.value(*a), "square-bwd", |gv, av| 2.0 * av * gv)?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sqrt(a) => {
                    let ga = g.zip(&node.value, "sqrt-bwd", |gv, out| gv * 0.5 / out)?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = g.zip(&node.value, "exp-bwd", |gv, out| gv * out)?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Log(a) => {
                    let ga = g.zip(self.value(*a), "log-bwd", |gv, av| gv / av)?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softplus(a) => {
                    let ga = g.zip(self.value(*a), "softplus-bwd", |gv, av| gv * sigmoid(av))?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let ga = g.zip(self.value(*a), "relu-bwd", |gv, av| {
                        if av > 0.0 {
                            gv
                        } else {
                            0.0
                        }
                    })?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, *a, tensor::transpose(&g)?);
                }
                Op::Broadcast(a) => {
                    accumulate(&mut grads, *a, tensor::reduce_to(&g, self.shape(*a)));
                }
                Op::Slice { input, ranges } => {
                    let ga = tensor::slice_adjoint(&g, self.shape(*input), ranges);
                    accumulate(&mut grads, *input, ga);
                }
                Op::Concat { parts, axis } => {
                    let mut start = 0usize;
                    for &p in parts {
                        let extent = self.shape(p)[*axis];
                        let ranges: Vec<(usize, usize)> = g
                            .shape()
                            .iter()
                            .enumerate()
                            .map(|(ax, &e)| {
                                if ax == *axis {
                                    (start, start + extent)
                                } else {
                                    (0, e)
                                }
                            })
                            .collect();
                        let gp = tensor::slice(&g, &ranges)?;
                        accumulate(&mut grads, p, gp);
                        start += extent;
                    }
                }
                Op::Dot(a, b) => {
                    let gv = g.item();
                    accumulate(&mut grads, *a, self.value(*b).map(|x| gv * x));
                    accumulate(&mut grads, *b, self.value(*a).map(|x| gv * x));
                }
                Op::StopGrad(_) => {}
                Op::Reshape(a) => {
                    let ga = g.reshape(self.shape(*a))?;
                    accumulate(&mut grads, *a, ga);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => {
            let summed = existing
                .zip(&g, "grad-accumulate", |a, b| a + b)
                .expect("gradient shapes agree by construction");
            *existing = summed;
        }
        slot @ None => *slot = Some(g),
    }
}

// ── Named trainable parameters ───────────────────────────────────────

/// A named leaf tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            grad,
        }
    }
}

/// The trainable leaves of one model, attached to a fresh graph per loss
/// evaluation.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    pub params: Vec<Parameter>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.push(Parameter::new(name, value));
    }

    /// Create one trainable leaf per parameter, in order.
    pub fn attach(&self, g: &mut Graph) -> Vec<NodeId> {
        self.params.iter().map(|p| g.param(p.value.clone())).collect()
    }

    /// Pull gradients out of a finished backward pass (accumulating).
    pub fn collect(&mut self, grads: &Gradients, ids: &[NodeId]) {
        for (p, &id) in self.params.iter_mut().zip(ids) {
            if let Some(g) = grads.get(id) {
                let summed = p
                    .grad
                    .zip(g, "param-grad", |a, b| a + b)
                    .expect("parameter gradient shape");
                p.grad = summed;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Tensor::zeros(p.value.shape());
        }
    }

    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

// ── Gradient checking ────────────────────────────────────────────────

/// Compare reverse-mode gradients against central finite differences.
///
/// `f` must build a scalar-valued graph from the leaf it is given. Returns
/// the max relative error with denominator `max(|analytic|, |numeric|, 1e-12)`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    if !(step > 0.0 && step <= 1e-3) {
        return Err(Error::Domain(format!("grad_check step {step} outside (0, 1e-3]")));
    }
    let mut g = Graph::new();
    let x = g.param(point.clone());
    let out = f(&mut g, x)?;
    if g.value(out).numel() != 1 {
        return Err(Error::Domain(format!(
            "grad_check wants a scalar-valued function, got shape {:?}",
            g.value(out).shape()
        )));
    }
    let grads = g.backward(out)?;
    let analytic = grads.get_or_zeros(x, point.shape());

    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.param(t.clone());
        let out = f(&mut g, x)?;
        Ok(g.value(out).item())
    };

    let mut max_rel = 0.0f64;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-12);
        max_rel = max_rel.max((a - numeric).abs() / denom);
    }
    Ok(max_rel)
}
