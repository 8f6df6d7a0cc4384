//! AdamW, global-norm clipping and the parameter EMA.

use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub t: u64,
}

impl AdamW {
    pub fn new(params: &[Tensor<f32>], beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect::<Vec<_>>();
        AdamW { beta1, beta2, eps, m: zeros(), v: zeros(), t: 0 }
    }

    /// One update with decoupled weight decay applied where `decay[i]`.
    pub fn step(&mut self, params: &mut [Tensor<f32>], grads: &[Tensor<f32>], decay: &[bool], lr: f64, weight_decay: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..params.len() {
            let wd = if decay[i] { lr * weight_decay } else { 0.0 };
            let (p, g) = (params[i].data_mut(), grads[i].data());
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for j in 0..p.len() {
                let gj = f64::from(g[j]);
                let mj = b1 * f64::from(m[j]) + (1.0 - b1) * gj;
                let vj = b2 * f64::from(v[j]) + (1.0 - b2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let update = lr * (mj / c1) / ((vj / c2).sqrt() + self.eps);
                let pj = f64::from(p[j]);
                p[j] = (pj - wd * pj - update) as f32;
            }
        }
    }
}

pub fn global_norm(grads: &[Tensor<f32>]) -> f64 {
    grads.iter().map(Tensor::sq_norm_f64).sum::<f64>().sqrt()
}

/// Rescales so the global norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Tensor<f32>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = (max_norm / (norm + 1e-12)) as f32;
        for g in grads.iter_mut() {
            g.scale_assign(s);
        }
    }
    norm
}

/// `shadow = d * shadow + (1 - d) * params`.
pub fn ema_update(shadow: &mut [Tensor<f32>], params: &[Tensor<f32>], decay: f64) {
    for (s, p) in shadow.iter_mut().zip(params) {
        for (sv, &pv) in s.data_mut().iter_mut().zip(p.data()) {
            *sv = (decay * f64::from(*sv) + (1.0 - decay) * f64::from(pv)) as f32;
        }
    }
}
