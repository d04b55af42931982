use std::collections::BTreeMap;

use super::params::{ParamGroup, ParameterStore};
use super::tensor::Tensor;
use super::TensorError;

pub const ADAM_EPS: f64 = 1e-8;

/// Adaptive-moment optimizer with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64, betas: (f64, f64)) -> Self {
        Self {
            lr,
            betas,
            eps: ADAM_EPS,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor> {
        self.first.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor> {
        self.second.get(name)
    }

    /// Updates every parameter in `groups` from its gradient slot.
    pub fn step(&mut self, store: &mut ParameterStore, groups: &[ParamGroup]) -> Result<(), TensorError> {
        for (name, p) in store.iter() {
            if groups.contains(&p.group) && !p.has_grad {
                return Err(TensorError::MissingGradient(name.clone()));
            }
        }
        self.step += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (name, p) in store.iter_mut() {
            if !groups.contains(&p.group) {
                continue;
            }
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| p.value.zeros_like());
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| p.value.zeros_like());
            let grad = p.grad.data();
            let vals = p.value.data_mut();
            for i in 0..vals.len() {
                let g = grad[i];
                let mi = b1 * m.data()[i] + (1.0 - b1) * g;
                let vi = b2 * v.data()[i] + (1.0 - b2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / c1;
                let vhat = vi / c2;
                vals[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Plain gradient descent: `p <- p - lr * grad` for parameters in `groups`.
pub fn sgd_step(store: &mut ParameterStore, groups: &[ParamGroup], lr: f64) -> Result<(), TensorError> {
    for (name, p) in store.iter_mut() {
        if !groups.contains(&p.group) {
            continue;
        }
        if !p.has_grad {
            return Err(TensorError::MissingGradient(name.clone()));
        }
        let g = p.grad.clone();
        p.value.axpy(-lr, &g);
    }
    Ok(())
}
