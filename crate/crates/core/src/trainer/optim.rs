use crate::kernels::Real;
use crate::model::{Parameters, TensorRole};

use super::TrainConfig;

/// Adam with decoupled weight decay. Decay applies to matrices only; the
/// normalization gains are left alone.
pub struct AdamW<T> {
    m: Parameters<T>,
    v: Parameters<T>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &Parameters<T>, cfg: &TrainConfig) -> Self {
        let zeros = Parameters::zeros(params.config).expect("validated config");
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn step(&mut self, params: &mut Parameters<T>, grads: &Parameters<T>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(self.t));
        let c2 = T::of(1.0 - self.beta2.powi(self.t));
        let eps = T::of(self.eps);
        let lr_t = T::of(lr);
        let decay = T::of(lr * self.weight_decay);
        let one = T::one();
        for ((((spec, p), (_, g)), (_, m)), (_, v)) in params
            .named_mut()
            .into_iter()
            .zip(grads.named())
            .zip(self.m.named_mut())
            .zip(self.v.named_mut())
        {
            let decayed = spec.role != TensorRole::Gain;
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                if decayed {
                    p[i] -= decay * p[i];
                }
                p[i] -= lr_t * update;
            }
        }
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut Parameters<T>, max_norm: f64) -> f64 {
    let sq: f64 = grads
        .named()
        .iter()
        .flat_map(|(_, g)| g.iter())
        .map(|x| {
            let x = x.to_f64().unwrap_or(f64::NAN);
            x * x
        })
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::of(max_norm / norm);
        for (_, g) in grads.named_mut() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
