//! Per-continuation uncertainty metrics over aligned token traces.
//!
//! All metrics work in nats (natural log). Given a conditional trace (tokens
//! scored after their story context) and an unconditional trace (same tokens
//! scored without the context):
//!
//! * `nll`  — mean negative log probability per token, conditional.
//! * `ppl`  — `exp(nll)`, the geometric-mean inverse token probability.
//! * `pmi`  — mean of `logP(conditional) - logP(unconditional)`; positive
//!   when context makes the continuation more probable.
//! * `cpmi` — conditional NLL plus a weighted sum of unconditional logprobs,
//!   restricted to positions whose conditional surprisal is at least `tau`.
//!   It isolates how much high-surprisal positions are explained by the
//!   token's own prior predictability.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::TokenTrace;

/// Surprisal threshold (nats) above which a position enters the CPMI
/// correction term.
pub const DEFAULT_TAU: f64 = 2.0;

/// Weight on the CPMI correction term.
pub const DEFAULT_LAMBDA: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("empty trace: metrics require at least one token")]
    EmptyTrace,
    #[error("non-finite log probability {value} at index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("trace length mismatch: conditional has {cond} tokens, unconditional has {uncond}")]
    LengthMismatch { cond: usize, uncond: usize },
    #[error("token mismatch at index {index}: conditional {cond:?} vs unconditional {uncond:?}")]
    TokenMismatch { index: usize, cond: String, uncond: String },
    #[error("tau must be non-negative, got {0}")]
    InvalidTau(f64),
    #[error("lambda must be finite and non-negative, got {0}")]
    InvalidLambda(f64),
}

/// The four uncertainty metrics for one continuation, plus its token count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub nll: f64,
    pub ppl: f64,
    pub pmi: f64,
    pub cpmi: f64,
    pub n_tokens: usize,
}

fn validate_logprobs(logprobs: &[f64]) -> Result<(), MetricsError> {
    if logprobs.is_empty() {
        return Err(MetricsError::EmptyTrace);
    }
    for (i, lp) in logprobs.iter().enumerate() {
        if !lp.is_finite() {
            return Err(MetricsError::NonFinite { index: i, value: *lp });
        }
    }
    Ok(())
}

fn check_aligned(cond: &TokenTrace, uncond: &TokenTrace) -> Result<(), MetricsError> {
    if cond.len() != uncond.len() {
        return Err(MetricsError::LengthMismatch { cond: cond.len(), uncond: uncond.len() });
    }
    for (i, (a, b)) in cond.tokens.iter().zip(&uncond.tokens).enumerate() {
        if a != b {
            return Err(MetricsError::TokenMismatch {
                index: i,
                cond: a.clone(),
                uncond: b.clone(),
            });
        }
    }
    Ok(())
}

/// Mean negative log probability per token.
pub fn mean_token_nll(logprobs: &[f64]) -> Result<f64, MetricsError> {
    validate_logprobs(logprobs)?;
    Ok(logprobs.iter().map(|lp| -lp).sum::<f64>() / logprobs.len() as f64)
}

/// Perplexity, `exp` of the mean token NLL.
pub fn perplexity(nll: f64) -> f64 {
    nll.exp()
}

/// Mean pointwise mutual information between context and continuation:
/// the average of `cond.logprobs[i] - uncond.logprobs[i]`.
pub fn pmi(cond: &TokenTrace, uncond: &TokenTrace) -> Result<f64, MetricsError> {
    check_aligned(cond, uncond)?;
    validate_logprobs(&cond.logprobs)?;
    validate_logprobs(&uncond.logprobs)?;
    let n = cond.len() as f64;
    Ok(cond
        .logprobs
        .iter()
        .zip(&uncond.logprobs)
        .map(|(c, u)| c - u)
        .sum::<f64>()
        / n)
}

/// Conditional PMI: mean conditional NLL plus `lambda / n` times the sum of
/// unconditional logprobs over positions with conditional surprisal >= `tau`.
///
/// Boundary behavior: `tau = +inf` leaves the NLL untouched; `tau = 0` with
/// `lambda = 1` gates every position in and equals `-pmi`.
pub fn cpmi(
    cond: &TokenTrace,
    uncond: &TokenTrace,
    tau: f64,
    lambda: f64,
) -> Result<f64, MetricsError> {
    if tau.is_nan() || tau < 0.0 {
        return Err(MetricsError::InvalidTau(tau));
    }
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(MetricsError::InvalidLambda(lambda));
    }
    check_aligned(cond, uncond)?;
    let nll = mean_token_nll(&cond.logprobs)?;
    validate_logprobs(&uncond.logprobs)?;
    let n = cond.len() as f64;
    let gated: f64 = cond
        .logprobs
        .iter()
        .zip(&uncond.logprobs)
        .filter(|(c, _)| -**c >= tau)
        .map(|(_, u)| *u)
        .sum();
    Ok(nll + lambda / n * gated)
}

/// All four metrics for one aligned (conditional, unconditional) trace pair.
pub fn metric_set(
    cond: &TokenTrace,
    uncond: &TokenTrace,
    tau: f64,
    lambda: f64,
) -> Result<MetricSet, MetricsError> {
    let nll = {
        check_aligned(cond, uncond)?;
        mean_token_nll(&cond.logprobs)?
    };
    Ok(MetricSet {
        nll,
        ppl: perplexity(nll),
        pmi: pmi(cond, uncond)?,
        cpmi: cpmi(cond, uncond, tau, lambda)?,
        n_tokens: cond.len(),
    })
}
