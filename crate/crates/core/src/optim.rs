//! Adam with decoupled weight decay and global-norm gradient clipping.

use std::collections::BTreeMap;

use crate::autodiff::Gradients;
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    /// `weight_decay` is applied (decoupled) to rank-2 parameters only.
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter that has a gradient. A zero learning
    /// rate leaves parameters untouched.
    pub fn step(&mut self, params: Vec<(String, &mut Tensor)>, grads: &Gradients, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, p) in params {
            let Some(g) = grads.get(&name) else {
                continue;
            };
            if g.shape() != p.shape() {
                return Err(invalid(format!("gradient shape mismatch for `{name}`")));
            }
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let decay = if p.rank() == 2 { self.weight_decay } else { 0.0 };
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                if lr != 0.0 {
                    let update = (*mi / c1) / ((*vi / c2).sqrt() + self.eps) + decay * *w;
                    *w -= lr * update;
                }
            }
        }
        Ok(())
    }
}

pub fn global_norm(grads: &Gradients) -> f64 {
    grads.values().map(|g| g.sq_norm()).sum::<f64>().sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
