//! Optimizers: SGD with momentum, and Adam.

use crate::model::{Grads, ParamStore};
use crate::trainer::OptimizerKind;

pub enum Optimizer {
    Sgd(SgdMomentum),
    Adam(Adam),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &ParamStore, lr: f64, momentum: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd(SgdMomentum::new(params, lr, momentum)),
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(params, lr)),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads) {
        match self {
            Optimizer::Sgd(o) => o.step(params, grads),
            Optimizer::Adam(o) => o.step(params, grads),
        }
    }
}

pub struct SgdMomentum {
    learning_rate: f64,
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(params: &ParamStore, learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: params
                .tensors()
                .iter()
                .map(|t| vec![0.0; t.data.len()])
                .collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads) {
        for (t, (vel, g)) in (0..params.len()).zip(self.velocity.iter_mut().zip(&grads.data)) {
            let data = &mut params.get_mut(t).data;
            for ((w, v), &gi) in data.iter_mut().zip(vel.iter_mut()).zip(g) {
                *v = self.momentum * *v + gi;
                *w -= self.learning_rate * *v;
            }
        }
    }
}

pub struct Adam {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore, learning_rate: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|t| vec![0.0; t.data.len()])
            .collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for t in 0..params.len() {
            let data = &mut params.get_mut(t).data;
            let (m, v) = (&mut self.m[t], &mut self.v[t]);
            for (((w, mi), vi), &gi) in
                data.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(&grads.data[t])
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
