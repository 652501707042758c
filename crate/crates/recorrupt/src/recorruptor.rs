//! The learned recorruptor: a monotone scalar MLP applied pixelwise,
//! normalized to zero mean and unit variance over the batch, then convolved
//! channel-wise with a learnable kernel. Positive weights are enforced by a
//! softplus reparameterization, which makes monotonicity structural.

use crate::autodiff::{Gradients, Graph, NodeId, ParamSet};
use crate::optim::AdamW;
use crate::samplers::RngStream;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Inverse softplus: raw value whose effective weight is `y`.
fn softplus_inv(y: f64) -> f64 {
    (y.exp() - 1.0).ln()
}

#[derive(Debug, Clone)]
pub struct Recorruptor {
    pub depth: usize,
    pub width: usize,
    pub kernel_size: usize,
    /// Scale the output by sqrt(y) for signal-dependent recorruption.
    pub pg_scale: bool,
    /// Raw MLP weights and biases; effective weight = softplus(raw).
    pub mlp: ParamSet,
    /// The spatial kernel, a single [1,1,k,k] parameter.
    pub kernel: ParamSet,
}

/// Node handles of one attached recorruptor.
pub struct RecorruptorNodes {
    pub mlp: Vec<NodeId>,
    pub kernel: NodeId,
}

impl Recorruptor {
    /// `depth` counts weight layers (>= 1); hidden layers use softplus, the
    /// output is linear. First-layer biases spread over the standard-normal
    /// input range so pretraining starts from a spread of knots.
    pub fn new(depth: usize, width: usize, kernel_size: usize, pg_scale: bool, rng: &mut RngStream) -> Self {
        assert!(depth >= 1 && width >= 1, "depth and width must be positive");
        assert!(kernel_size % 2 == 1, "kernel extent must be odd");
        let mut mlp = ParamSet::default();
        let jitter = |rng: &mut RngStream| 0.1 * rng.normal();
        for layer in 0..depth {
            let (rows, cols) = match (layer, depth) {
                (0, 1) => (1, 1),
                (0, _) => (width, 1),
                (l, d) if l == d - 1 => (1, width),
                _ => (width, width),
            };
            let target = 1.0 / cols as f64;
            let w = Tensor::new(
                vec![rows, cols],
                (0..rows * cols)
                    .map(|_| softplus_inv(target) + jitter(rng))
                    .collect(),
            )
            .expect("weight shape");
            let b = if layer == 0 {
                Tensor::new(
                    vec![rows, 1],
                    (0..rows)
                        .map(|i| {
                            if rows == 1 {
                                0.0
                            } else {
                                -2.0 + 4.0 * i as f64 / (rows - 1) as f64
                            }
                        })
                        .collect(),
                )
                .expect("bias shape")
            } else {
                Tensor::zeros(&[rows, 1])
            };
            mlp.push(format!("mlp.w{layer}"), w);
            mlp.push(format!("mlp.b{layer}"), b);
        }
        let mut k = Tensor::zeros(&[1, 1, kernel_size, kernel_size]);
        k.data_mut()[(kernel_size * kernel_size) / 2] = 1.0;
        let mut kernel = ParamSet::default();
        kernel.push("kernel", k);
        Recorruptor {
            depth,
            width,
            kernel_size,
            pg_scale,
            mlp,
            kernel,
        }
    }

    pub fn attach(&self, g: &mut Graph) -> RecorruptorNodes {
        let mlp = self.mlp.attach(g);
        let kernel = self.kernel.attach(g)[0];
        RecorruptorNodes { mlp, kernel }
    }

    /// The scalar monotone map on a flat [1, N] node.
    pub fn mmlp_graph(&self, g: &mut Graph, mlp_ids: &[NodeId], flat: NodeId) -> Result<NodeId> {
        let mut cur = flat;
        for layer in 0..self.depth {
            let w_raw = mlp_ids[2 * layer];
            let b = mlp_ids[2 * layer + 1];
            let w_eff = g.softplus_node(w_raw);
            let z = g.matmul(w_eff, cur)?;
            let bb = g.broadcast(b, &g.shape(z).to_vec())?;
            let z = g.add(z, bb)?;
            cur = if layer + 1 < self.depth {
                g.softplus_node(z)
            } else {
                z
            };
        }
        Ok(cur)
    }

    /// Normalization to zero mean and unit variance over the whole batch.
    fn normalize_graph(&self, g: &mut Graph, t: NodeId) -> Result<NodeId> {
        let shape = g.shape(t).to_vec();
        let m = g.mean(t);
        let mb = g.broadcast(m, &shape)?;
        let centered = g.sub(t, mb)?;
        let sq = g.square(centered);
        let var = g.mean(sq);
        let var_eps = g.add_scalar(var, 1e-12)?;
        let std = g.sqrt(var_eps)?;
        let inv = g.recip(std)?;
        let invb = g.broadcast(inv, &shape)?;
        g.mul(centered, invb)
    }

    /// Full recorruptor on a [n,1,h,w] batch of standard-normal draws:
    /// `h(w') = kernel * N(mMLP(w'))`, optionally scaled by sqrt(y).
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        nodes: &RecorruptorNodes,
        w_input: NodeId,
        y: Option<&Tensor>,
    ) -> Result<NodeId> {
        let shape = g.shape(w_input).to_vec();
        if shape.len() != 4 {
            return Err(Error::Domain(format!(
                "recorruptor input must be [n,1,h,w], got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        let flat = g.reshape(w_input, &[1, numel])?;
        let mapped = self.mmlp_graph(g, &nodes.mlp, flat)?;
        let normalized = self.normalize_graph(g, mapped)?;
        let img = g.reshape(normalized, &shape)?;
        let out = g.conv2d(img, nodes.kernel)?;
        match (self.pg_scale, y) {
            (false, _) => Ok(out),
            (true, None) => Err(Error::Config("pg_scale needs the observation y".into())),
            (true, Some(y)) => {
                let neg = y.data().iter().filter(|&&v| v < 0.0).count();
                if neg > 0 {
                    return Err(Error::Domain(format!(
                        "pg_scale with {neg} negative pixels in y"
                    )));
                }
                let root = g.constant(y.map(f64::sqrt));
                g.mul(out, root)
            }
        }
    }

    /// Plain evaluation with constant leaves.
    pub fn forward(&self, w: &Tensor, y: Option<&Tensor>) -> Result<Tensor> {
        let mut g = Graph::new();
        let nodes = RecorruptorNodes {
            mlp: self.mlp.params.iter().map(|p| g.constant(p.value.clone())).collect(),
            kernel: g.constant(self.kernel.params[0].value.clone()),
        };
        let input = g.constant(w.clone());
        let out = self.forward_graph(&mut g, &nodes, input, y)?;
        Ok(g.value(out).clone())
    }

    /// The scalar map on a grid of points.
    pub fn mmlp_eval(&self, points: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = self.mlp.params.iter().map(|p| g.constant(p.value.clone())).collect();
        let flat = g.constant(Tensor::new(vec![1, points.len()], points.to_vec())?);
        let out = self.mmlp_graph(&mut g, &ids, flat)?;
        Ok(g.value(out).data().to_vec())
    }

    /// Gradient accumulation helper: pull MLP and kernel grads from a
    /// backward pass.
    pub fn collect_grads(&mut self, grads: &Gradients, nodes: &RecorruptorNodes) {
        self.mlp.collect(grads, &nodes.mlp);
        self.kernel.collect(grads, &[nodes.kernel]);
    }

    pub fn zero_grads(&mut self) {
        self.mlp.zero_grads();
        self.kernel.zero_grads();
    }
}

/// Fit the scalar map toward the identity by gradient descent on
/// `E || mMLP(w) - w ||^2`; stops at the step budget or MSE < 1e-3.
/// Returns the final held-out MSE.
pub fn identity_pretrain(h: &mut Recorruptor, n_steps: usize, rng: &mut RngStream) -> Result<f64> {
    let batch = 1024usize;
    let eval_mse = |h: &Recorruptor, rng: &mut RngStream| -> Result<f64> {
        let pts: Vec<f64> = (0..batch).map(|_| rng.normal()).collect();
        let out = h.mmlp_eval(&pts)?;
        Ok(pts
            .iter()
            .zip(&out)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / batch as f64)
    };
    if n_steps == 0 {
        return eval_mse(h, rng);
    }
    let mut opt = AdamW::new(1e-2, 0.0, &h.mlp);
    let mut ema = f64::INFINITY;
    for step in 0..n_steps {
        if step == 3 * n_steps / 4 {
            opt.lr = 2e-3;
        }
        let pts: Vec<f64> = (0..batch).map(|_| rng.normal()).collect();
        let mut g = Graph::new();
        let ids = h.mlp.attach(&mut g);
        let flat = g.constant(Tensor::new(vec![1, batch], pts)?);
        let out = h.mmlp_graph(&mut g, &ids, flat)?;
        let loss = g.mse(out, flat)?;
        let lv = g.value(loss).item();
        ema = if ema.is_finite() { 0.9 * ema + 0.1 * lv } else { lv };
        // Margin under the 1e-3 target so a held-out batch also clears it.
        if ema < 5e-4 {
            break;
        }
        let grads = g.backward(loss)?;
        h.mlp.zero_grads();
        h.mlp.collect(&grads, &ids);
        opt.step(&mut h.mlp)?;
    }
    eval_mse(h, rng)
}
