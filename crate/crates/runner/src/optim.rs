//! AdamW with global-norm gradient clipping.

use std::collections::BTreeMap;

use ndarray::{ArrayD, Zip};

use p2d_core::model::ParamGrads;
use p2d_core::params::ParamStore;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: BTreeMap<String, (ArrayD<f32>, ArrayD<f32>)>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr`. Biases and embeddings (rank-1
    /// tensors) are not decayed.
    pub fn update(&mut self, params: &mut ParamStore<f32>, grads: &ParamGrads<f32>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = (1.0 - self.beta1.powi(t)) as f32;
        let c2 = (1.0 - self.beta2.powi(t)) as f32;
        let (b1, b2, eps) = (self.beta1 as f32, self.beta2 as f32, self.eps as f32);
        let lr = lr as f32;
        let wd = self.weight_decay as f32;
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (ArrayD::zeros(p.raw_dim()), ArrayD::zeros(p.raw_dim())));
            let decay = if p.ndim() > 1 { wd } else { 0.0 };
            Zip::from(&mut *p).and(&mut *m).and(&mut *v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                *p -= lr * (update + decay * *p);
            });
        }
    }
}

pub fn global_norm(grads: &ParamGrads<f32>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut ParamGrads<f32>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let scale = (max_norm / norm) as f32;
        for g in grads.values_mut() {
            g.mapv_inplace(|x| x * scale);
        }
    }
    norm
}
