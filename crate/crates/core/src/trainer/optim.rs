use crate::diffmath::Tensor;
use crate::machine::ParamSet;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        let zeros = || {
            params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update. A zero learning rate leaves the
    /// parameters bit-for-bit unchanged.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, p) in params.tensors_mut().iter_mut().enumerate() {
            let g = grads[k].data();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                if lr != 0.0 {
                    *w -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                }
            }
        }
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= k);
        }
    }
    norm
}

/// Exponential moving average of the parameters, seeded with their initial
/// values.
#[derive(Debug, Clone, PartialEq)]
pub struct Ema {
    pub shadow: ParamSet,
    pub decay: f64,
}

impl Ema {
    pub fn new(params: &ParamSet, decay: f64) -> Self {
        Self {
            shadow: params.clone(),
            decay,
        }
    }

    pub fn update(&mut self, params: &ParamSet) {
        let k = 1.0 - self.decay;
        // a + k(b − a) keeps the shadow bit-identical when b == a
        for (s, p) in self.shadow.tensors_mut().iter_mut().zip(params.tensors()) {
            for (a, b) in s.data_mut().iter_mut().zip(p.data()) {
                *a += k * (b - *a);
            }
        }
    }
}
