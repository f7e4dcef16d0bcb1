//! AdamW with decoupled weight decay and per-group learning rates.

use std::collections::HashMap;

use crate::graph::Gradients;
use crate::params::{Group, ParamStore};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    group_lr: HashMap<Group, f64>,
    step: u64,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            group_lr: HashMap::new(),
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Overrides the learning rate for one parameter group.
    pub fn set_group_lr(&mut self, group: Group, lr: f64) {
        self.group_lr.insert(group, lr);
    }

    pub fn group_lr(&self, group: Group) -> f64 {
        self.group_lr.get(&group).copied().unwrap_or(self.config.lr)
    }

    /// Multiplies the base rate and every group override by `factor`.
    pub fn scale_lr(&mut self, factor: f64) {
        self.config.lr *= factor;
        for lr in self.group_lr.values_mut() {
            *lr *= factor;
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2): (T, T) = (lit(c.beta1), lit(c.beta2));
        let eps: T = lit(c.eps);
        let ids: Vec<_> = store.param_ids().collect();
        if self.m.len() < ids.len() {
            self.m.resize(ids.len(), None);
            self.v.resize(ids.len(), None);
        }
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let lr = self.group_lr(store.group(id));
            let i = id.index();
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let step_size: T = lit(lr / bc1);
            let inv_bc2: T = lit(1.0 / bc2);
            let decay: T = lit(1.0 - lr * c.weight_decay);
            let w = store.value_mut(id);
            for (((wi, &gi), mi), vi) in w
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                *wi = *wi * decay - step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// Rescales `grads` so that their global norm does not exceed `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut Gradients<T>, max_norm: f64) -> f64 {
    let norm = grads.norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(lit(max_norm / (norm + 1e-6)));
    }
    norm
}
