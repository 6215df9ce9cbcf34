//! Adam with bias correction, plus global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use super::graph::Grads;
use super::params::ParamSet;
use super::tensor::Real;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update. Parameters without an entry in `grads` are left
    /// untouched; the step counter advances exactly once.
    pub fn step<T: Real>(&self, params: &mut ParamSet<T>, grads: &Grads<T>) -> Result<()> {
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::InvalidArgument(format!("learning rate {}", self.lr)));
        }
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::MissingParameter(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient for `{name}` has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient for `{name}`")));
            }
        }
        params.bump_step();
        let t = params.step() as i32;
        let (b1, b2) = (T::c(self.beta1), T::c(self.beta2));
        let bc1 = T::c(1.0 - self.beta1.powi(t));
        let bc2 = T::c(1.0 - self.beta2.powi(t));
        let lr = T::c(self.lr);
        let eps = T::c(self.eps);
        let one = T::one();
        for (name, g) in grads {
            let (p, m) = params.get_mut(name).expect("checked above");
            let pd = p.data_mut();
            let m1 = m.m1.data_mut();
            let m2 = m.m2.data_mut();
            for j in 0..pd.len() {
                let gj = g.data()[j];
                m1[j] = b1 * m1[j] + (one - b1) * gj;
                m2[j] = b2 * m2[j] + (one - b2) * gj * gj;
                let mhat = m1[j] / bc1;
                let vhat = m2[j] / bc2;
                pd[j] = pd[j] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Global L2 norm of a gradient map.
pub fn global_norm<T: Real>(grads: &Grads<T>) -> f64 {
    grads.values().map(|g| g.sq_norm()).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut Grads<T>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = T::c(max_norm / norm);
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v = *v * s;
            }
        }
    }
    norm
}
