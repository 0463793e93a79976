//! First-order optimizers.

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;

/// Learning rate as a function of the epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Multiplies the base rate by `factor` at every listed epoch.
    Step { milestones: Vec<usize>, factor: f64 },
}

impl LrSchedule {
    pub fn rate(&self, base: f64, epoch: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Step { milestones, factor } => {
                let passed = milestones.iter().filter(|&&m| epoch >= m).count();
                base * factor.powi(passed as i32)
            }
        }
    }
}

pub trait Optimizer {
    fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64);
}

/// Plain stochastic gradient descent.
#[derive(Clone, Debug, Default)]
pub struct Sgd;

impl Optimizer for Sgd {
    fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) {
        for (id, g) in store.ids().collect::<Vec<_>>().into_iter().zip(grads) {
            if lr == 0.0 {
                continue;
            }
            for (p, gv) in store.value_mut(id).data_mut().iter_mut().zip(g.data()) {
                *p -= lr * gv;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (((id, g), m), v) in ids.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let p = store.value_mut(id).data_mut();
            for (((pv, gv), mv), vv) in p.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
