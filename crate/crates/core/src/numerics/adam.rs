use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::numerics::params::ParamTable;
use crate::numerics::scalar::Scalar;

/// Moment estimates and hyperparameters of Adam.
#[derive(Clone, Debug)]
pub struct AdamState<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: IndexMap<String, (Vec<S>, Vec<S>)>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update of every tracked parameter; gradients are
    /// cleared afterwards.
    pub fn step(&mut self, params: &mut ParamTable<S>) -> Result<()> {
        for (name, t) in params.iter() {
            if t.requires_grad && t.grad.is_none() {
                return Err(Error::MissingGrad(name.to_string()));
            }
        }
        self.step += 1;
        let (b1, b2) = (S::of(self.beta1), S::of(self.beta2));
        let bc1 = S::of(1.0 - self.beta1.powi(self.step as i32));
        let bc2 = S::of(1.0 - self.beta2.powi(self.step as i32));
        let (lr, eps) = (S::of(self.lr), S::of(self.eps));
        for (name, t) in params.iter_mut() {
            if !t.requires_grad {
                continue;
            }
            let grad = t.grad.take().expect("checked above");
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![S::zero(); grad.len()], vec![S::zero(); grad.len()]));
            if m.len() != grad.len() {
                return Err(Error::Contract(format!("moment shape drift for `{name}`")));
            }
            for (i, x) in t.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = b1 * m[i] + (S::one() - b1) * g;
                v[i] = b2 * v[i] + (S::one() - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *x = *x - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
