//! First-order optimizers over flat parameter slices.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Schedule {
    Constant,
    /// Cosine annealing from the base rate to zero over `total` steps.
    Cosine {
        total: usize,
    },
}

impl Schedule {
    pub fn rate(self, base: f64, step: usize) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::Cosine { total } if total > 0 => {
                let t = (step.min(total)) as f64 / total as f64;
                base * 0.5 * (1.0 + libm::cos(PI * t))
            }
            Schedule::Cosine { .. } => base,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Hyper {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adamax: Adam with an infinity-norm second moment.
#[derive(Clone, Debug, PartialEq)]
pub struct Adamax {
    pub hyper: Hyper,
    pub schedule: Schedule,
    m: Vec<f64>,
    u: Vec<f64>,
    step: usize,
}

impl Adamax {
    pub fn new(len: usize, hyper: Hyper) -> Self {
        Self {
            hyper,
            schedule: Schedule::Constant,
            m: vec![0.0; len],
            u: vec![0.0; len],
            step: 0,
        }
    }

    pub fn with_schedule(mut self, schedule: Schedule) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One update. Entries where `active` is false keep both their value
    /// and their moments.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], active: Option<&[bool]>) {
        debug_assert_eq!(params.len(), self.m.len());
        debug_assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let Hyper {
            beta1, beta2, eps, ..
        } = self.hyper;
        let lr = self.schedule.rate(self.hyper.lr, self.step - 1);
        let bias = 1.0 - libm::pow(beta1, self.step as f64);
        for i in 0..params.len() {
            if active.is_some_and(|a| !a[i]) {
                continue;
            }
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.u[i] = f64::max(beta2 * self.u[i], libm::fabs(g));
            params[i] -= lr / bias * self.m[i] / (self.u[i] + eps);
        }
    }
}

/// Adam, used for float training.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub hyper: Hyper,
    m: Vec<f64>,
    v: Vec<f64>,
    step: usize,
}

impl Adam {
    pub fn new(len: usize, hyper: Hyper) -> Self {
        Self {
            hyper,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        self.step += 1;
        let Hyper {
            lr,
            beta1,
            beta2,
            eps,
        } = self.hyper;
        let b1 = 1.0 - libm::pow(beta1, self.step as f64);
        let b2 = 1.0 - libm::pow(beta2, self.step as f64);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            params[i] -= lr * (self.m[i] / b1) / (libm::sqrt(self.v[i] / b2) + eps);
        }
    }
}
