//! Adaptive-moment gradient descent with the usual defaults.

use crate::model::autograd::Mat;
use crate::model::params::ParamSet;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

pub struct Adam {
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: u64,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        let m = (0..params.len())
            .map(|i| Mat::zeros(params.tensor(i).raw_dim()))
            .collect();
        let v = (0..params.len())
            .map(|i| Mat::zeros(params.tensor(i).raw_dim()))
            .collect();
        Adam { m, v, t: 0 }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Mat], lr: f64) {
        debug_assert_eq!(grads.len(), params.len());
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for i in 0..grads.len() {
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let g = &grads[i];
            let p = params.tensor_mut(i);
            for ((m, v), (g, p)) in m.iter_mut().zip(v.iter_mut()).zip(g.iter().zip(p.iter_mut()))
            {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + EPS);
            }
        }
    }
}
