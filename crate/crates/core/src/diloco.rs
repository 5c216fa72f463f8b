//! Pseudo-gradients and the outer optimizer.
//!
//! Each participant reports `delta_i = base - local_i`. The coordinator forms
//!
//! ```text
//! agg  = sum_i w_i * f(staleness_i) * delta_i      (w normalized to sum to 1)
//! buf  = mu * buf + agg
//! base = base - eta * (agg + mu * buf)             (Nesterov lookahead form)
//! ```
//!
//! with `f(s) = 1 / (1 + s)`. With `mu = 0`, `eta = 1`, fresh gradients and
//! normalized weights this is exactly the weighted average of the local parameters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quantcore::{quantize_weights, Params, Ternary};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DilocoError {
    #[error("parameter length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("no weight for node {0}")]
    MissingWeight(String),
    #[error("merge requires at least one pseudo-gradient")]
    NoGradients,
    #[error("weights must be non-negative and finite with a positive sum")]
    InvalidWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoGradient<T> {
    pub delta: Params<T>,
    pub node: String,
    pub inner_steps: u32,
    pub staleness: u32,
    pub local_loss: f64,
}

/// Bookkeeping carried alongside a pseudo-gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMeta {
    pub node: String,
    pub inner_steps: u32,
    pub staleness: u32,
    pub local_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OuterConfig {
    pub lr: f64,
    pub momentum: f64,
}

impl Default for OuterConfig {
    fn default() -> Self {
        Self {
            lr: 0.7,
            momentum: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OuterOptimizerState<T> {
    pub buffer: Params<T>,
    pub config: OuterConfig,
}

impl<T: Scalar> OuterOptimizerState<T> {
    pub fn new(len: usize, config: OuterConfig) -> Self {
        Self {
            buffer: Params::zeros(len),
            config,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionWeight {
    pub node: String,
    pub weight: f64,
}

pub fn pseudo_gradient<T: Scalar>(
    base: &Params<T>,
    local: &Params<T>,
    meta: GradientMeta,
) -> Result<PseudoGradient<T>, DilocoError> {
    if base.len() != local.len() {
        return Err(DilocoError::LengthMismatch {
            expected: base.len(),
            actual: local.len(),
        });
    }
    Ok(PseudoGradient {
        delta: base.sub(local),
        node: meta.node,
        inner_steps: meta.inner_steps,
        staleness: meta.staleness,
        local_loss: meta.local_loss,
    })
}

pub fn staleness_factor(staleness: u32) -> f64 {
    1.0 / (1.0 + f64::from(staleness))
}

/// Normalizes the weights of the participating nodes to sum to one.
pub fn normalize_weights<T>(
    grads: &[PseudoGradient<T>],
    weights: &[ContributionWeight],
) -> Result<Vec<f64>, DilocoError> {
    let by_node: BTreeMap<&str, f64> = weights
        .iter()
        .map(|w| (w.node.as_str(), w.weight))
        .collect();
    let raw = grads
        .iter()
        .map(|g| {
            by_node
                .get(g.node.as_str())
                .copied()
                .ok_or_else(|| DilocoError::MissingWeight(g.node.clone()))
        })
        .collect::<Result<Vec<f64>, _>>()?;
    if raw.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(DilocoError::InvalidWeights);
    }
    let total: f64 = raw.iter().sum();
    if total <= 0.0 {
        return Err(DilocoError::InvalidWeights);
    }
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Uniform weights, or normalized contribution scores when any are positive.
pub fn weights_from_scores(
    participants: &[String],
    scores: &BTreeMap<String, f64>,
) -> Vec<ContributionWeight> {
    let have_scores = participants
        .iter()
        .any(|p| scores.get(p).is_some_and(|s| *s > 0.0));
    participants
        .iter()
        .map(|p| ContributionWeight {
            node: p.clone(),
            weight: if have_scores {
                scores.get(p).copied().unwrap_or(0.0).max(0.0)
            } else {
                1.0
            },
        })
        .collect()
}

/// Weighted, staleness-discounted sum of the deltas.
pub fn aggregate<T: Scalar>(
    grads: &[PseudoGradient<T>],
    weights: &[ContributionWeight],
) -> Result<Params<T>, DilocoError> {
    let first = grads.first().ok_or(DilocoError::NoGradients)?;
    let len = first.delta.len();
    if let Some(bad) = grads.iter().find(|g| g.delta.len() != len) {
        return Err(DilocoError::LengthMismatch {
            expected: len,
            actual: bad.delta.len(),
        });
    }
    let normalized = normalize_weights(grads, weights)?;
    let mut agg = Params::zeros(len);
    for (g, w) in grads.iter().zip(normalized) {
        agg.axpy(T::lit(w * staleness_factor(g.staleness)), &g.delta);
    }
    Ok(agg)
}

pub fn outer_update<T: Scalar>(
    base: &Params<T>,
    grads: &[PseudoGradient<T>],
    weights: &[ContributionWeight],
    state: &OuterOptimizerState<T>,
) -> Result<(Params<T>, OuterOptimizerState<T>), DilocoError> {
    let agg = aggregate(grads, weights)?;
    if agg.len() != base.len() {
        return Err(DilocoError::LengthMismatch {
            expected: base.len(),
            actual: agg.len(),
        });
    }
    if state.buffer.len() != base.len() {
        return Err(DilocoError::LengthMismatch {
            expected: base.len(),
            actual: state.buffer.len(),
        });
    }
    let mu = T::lit(state.config.momentum);
    let eta = T::lit(state.config.lr);
    let mut next_state = state.clone();
    let mut next = base.clone();
    for i in 0..base.len() {
        let buf = mu * state.buffer[i] + agg[i];
        next_state.buffer[i] = buf;
        next[i] -= eta * (agg[i] + mu * buf);
    }
    Ok((next, next_state))
}

pub fn requantize_after_merge<T: Scalar>(theta: &Params<T>) -> Ternary<T> {
    quantize_weights(theta)
}

/// One line of the merge log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeRecord {
    pub round: u64,
    pub participants: Vec<String>,
    pub weights: Vec<f64>,
    pub pre_loss: f64,
    pub post_loss: f64,
    pub merged_hash: String,
    pub ternary_hash: String,
}

impl MergeRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("merge record serializes")
    }
}
