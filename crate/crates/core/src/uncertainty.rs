//! Generation uncertainty and the retrieval trigger.
//!
//! Uncertainty is the normalized negative log-likelihood of a completion,
//! `u = −(1/T) Σ log p(token)`, in nats per token. A query retrieves only
//! when `u` is strictly above the threshold; `u == threshold` answers from
//! parametric knowledge.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generate::GenerationResult;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyScore {
    pub value: f64,
    pub token_count: usize,
}

/// `−mean(logprobs)`. Fails on an empty list.
pub fn uncertainty_from_logprobs(logprobs: &[f64]) -> Result<UncertaintyScore> {
    if logprobs.is_empty() {
        return Err(Error::UndefinedUncertainty);
    }
    let sum: f64 = logprobs.iter().sum();
    let value = -sum / logprobs.len() as f64;
    Ok(UncertaintyScore {
        // −0.0 when every logprob is exactly zero.
        value: value + 0.0,
        token_count: logprobs.len(),
    })
}

pub fn uncertainty(result: &GenerationResult) -> Result<UncertaintyScore> {
    let lps: Vec<f64> = result.logprobs().collect();
    uncertainty_from_logprobs(&lps)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriggerDecision {
    pub retrieve: bool,
    pub u: UncertaintyScore,
    pub threshold: f64,
}

/// Retrieve iff `u.value > threshold`. A threshold of `-inf` forces
/// retrieval; NaN thresholds never trigger.
pub fn decide(u: UncertaintyScore, threshold: f64) -> TriggerDecision {
    TriggerDecision {
        retrieve: u.value > threshold,
        u,
        threshold,
    }
}
