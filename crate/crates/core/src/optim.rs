//! Adam optimizer keyed by parameter name.

use std::collections::HashMap;

use crate::nn::Param;
use crate::tensor::Scalar;

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Adam::new(0.9, 0.999, 1e-8)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter in `params` from its accumulated gradient.
    pub fn step<T: Scalar>(&mut self, params: Vec<&mut Param<T>>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for p in params {
            let (m, v) = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| (vec![0.0; p.len()], vec![0.0; p.len()]));
            for i in 0..p.value.len() {
                let g = p.grad[i].to_f64().unwrap_or(f64::NAN);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let upd = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                p.value[i] -= T::lit(upd);
            }
        }
    }
}
