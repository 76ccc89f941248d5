//! Adam and AdamW over a [`ParamSet`].

use super::ParamSet;

struct Moments {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Moments {
    fn new(params: &ParamSet) -> Moments {
        Moments {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }
}

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: Moments,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: Moments::new(params),
        }
    }

    pub fn step(&mut self, params: &ParamSet) {
        self.state.t += 1;
        let t = self.state.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (idx, p) in params.iter().enumerate() {
            let mut inner = p.borrow_mut();
            let m = &mut self.state.m[idx];
            let v = &mut self.state.v[idx];
            for i in 0..inner.values.len() {
                let g = inner.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                inner.values[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Multiplicative learning-rate decay applied after each step,
    /// e.g. 0.00023 shrinks the rate by 0.023% per iteration.
    pub lr_decay: f64,
    state: Moments,
}

impl AdamW {
    pub fn new(params: &ParamSet, lr: f64) -> AdamW {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            lr_decay: 0.0,
            state: Moments::new(params),
        }
    }

    pub fn step(&mut self, params: &ParamSet) {
        self.state.t += 1;
        let t = self.state.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (idx, p) in params.iter().enumerate() {
            let mut inner = p.borrow_mut();
            let m = &mut self.state.m[idx];
            let v = &mut self.state.v[idx];
            for i in 0..inner.values.len() {
                let g = inner.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let w = inner.values[i];
                inner.values[i] = w - self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * w);
            }
        }
        self.lr *= 1.0 - self.lr_decay;
    }
}
