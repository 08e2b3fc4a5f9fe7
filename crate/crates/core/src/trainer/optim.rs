//! First-order optimizers with per-parameter learning rates.

use serde::{Deserialize, Serialize};

use crate::tensor::Array;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    /// `m ← μ·m + g; θ ← θ − lr·m`. With `μ = 0` this is plain SGD.
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Sgd { momentum: 0.9 }
    }
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state, one slot per parameter in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    /// First moments (momentum buffers for SGD).
    pub m: Vec<Array>,
    /// Second moments; empty for SGD.
    pub v: Vec<Array>,
    /// Number of updates applied.
    pub t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, shapes: &[Array]) -> Self {
        let zeros = || shapes.iter().map(|a| Array::zeros(a.shape())).collect::<Vec<_>>();
        let v = match kind {
            OptimizerKind::Adam { .. } => zeros(),
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        Self {
            kind,
            m: zeros(),
            v,
            t: 0,
        }
    }

    /// Applies one update. `grads[i]` is `None` for parameters the loss did
    /// not reach; their moments still decay.
    pub fn step(&mut self, params: &mut [Array], grads: &[Option<Array>], lrs: &[f64]) {
        self.t += 1;
        let t = self.t as f64;
        for (i, p) in params.iter_mut().enumerate() {
            let lr = lrs[i];
            let g = grads[i].as_ref().map(Array::data);
            let m = self.m[i].data_mut();
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    for j in 0..m.len() {
                        m[j] = momentum * m[j] + g.map_or(0.0, |g| g[j]);
                    }
                    for (x, mj) in p.data_mut().iter_mut().zip(m.iter()) {
                        *x -= lr * mj;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let v = self.v[i].data_mut();
                    let c1 = 1.0 - beta1.powf(t);
                    let c2 = 1.0 - beta2.powf(t);
                    let x = p.data_mut();
                    for j in 0..m.len() {
                        let gj = g.map_or(0.0, |g| g[j]);
                        m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                        x[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Scales gradients in place so that their joint L2 norm is at most
/// `max_norm`. Returns the norm before scaling.
pub fn clip_global_norm(grads: &mut [Option<Array>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}
