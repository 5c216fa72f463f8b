//! Decoupled-weight-decay Adam used for the local (inner) steps.

use serde::{Deserialize, Serialize};

use super::params::Params;
use super::QuantError;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            weight_decay: 0.01,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerOptimizerState<T> {
    pub first_moment: Params<T>,
    pub second_moment: Params<T>,
    pub step: u64,
    pub config: AdamWConfig,
}

impl<T: Scalar> InnerOptimizerState<T> {
    pub fn new(len: usize, config: AdamWConfig) -> Self {
        Self {
            first_moment: Params::zeros(len),
            second_moment: Params::zeros(len),
            step: 0,
            config,
        }
    }
}

/// One AdamW step in place. Weight decay is applied to the parameters directly
/// (`w *= 1 - lr * wd`) before the bias-corrected adaptive step.
pub fn inner_step_mut<T: Scalar>(
    w: &mut Params<T>,
    g: &Params<T>,
    s: &mut InnerOptimizerState<T>,
) -> Result<(), QuantError> {
    if w.len() != g.len() || w.len() != s.first_moment.len() {
        return Err(QuantError::DimensionMismatch {
            expected: w.len(),
            actual: if w.len() != g.len() {
                g.len()
            } else {
                s.first_moment.len()
            },
        });
    }
    let c = s.config;
    let (lr, b1, b2, wd, eps) = (
        T::lit(c.lr),
        T::lit(c.beta1),
        T::lit(c.beta2),
        T::lit(c.weight_decay),
        T::lit(c.eps),
    );
    s.step += 1;
    let t = i32::try_from(s.step).unwrap_or(i32::MAX);
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);
    let one = T::one();
    let m = s.first_moment.as_mut_slice();
    let v = s.second_moment.as_mut_slice();
    for (i, wi) in w.as_mut_slice().iter_mut().enumerate() {
        let gi = g[i];
        m[i] = b1 * m[i] + (one - b1) * gi;
        v[i] = b2 * v[i] + (one - b2) * gi * gi;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        *wi *= one - lr * wd;
        *wi -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Value-returning form of [`inner_step_mut`].
pub fn inner_step<T: Scalar>(
    w: &Params<T>,
    g: &Params<T>,
    s: &InnerOptimizerState<T>,
) -> Result<(Params<T>, InnerOptimizerState<T>), QuantError> {
    let mut w = w.clone();
    let mut s = s.clone();
    inner_step_mut(&mut w, g, &mut s)?;
    Ok((w, s))
}
