//! Model access: scoring token sequences and sampling continuations.
//!
//! Two implementations share one trait: [`http::HttpBackend`] speaks a
//! completion-style JSON protocol with echo scoring, and [`mock::MockBackend`]
//! is a deterministic, context-independent categorical distribution used for
//! tests and offline runs. Everything downstream works on [`TokenTrace`]
//! values and never cares which backend produced them.

pub mod http;
pub mod mock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Gap, in nats, between the worst returned top-K alternative and the value
/// assigned to a realized token that is absent from the top-K list.
pub const IMPUTE_OFFSET_NATS: f64 = 2.0;

/// Default number of top alternatives requested per token position.
pub const DEFAULT_TOP_K: usize = 20;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("{what} tokenizes to zero tokens")]
    EmptyInput { what: &'static str },
    #[error("empty top-K list: cannot impute a log probability")]
    EmptyTopK,
    #[error("invalid backend configuration: {0}")]
    Config(String),
    #[error("API key environment variable {0} is not set")]
    MissingApiKey(String),
    #[error("transport error talking to {url}: {source}")]
    Transport {
        url: String,
        #[source]
        source: reqwest::Error,
    },
    #[error("HTTP {status} from {url}: {body}")]
    Http {
        status: u16,
        url: String,
        body: String,
    },
    #[error("malformed response from {url}: {reason}")]
    Protocol { url: String, reason: String },
    #[error("request failed after {attempts} attempts; last error: {last}")]
    RetriesExhausted { attempts: u32, last: String },
}

/// Per-token scoring output for one pass over one continuation.
///
/// All four vectors are index-aligned: position `i` describes the `i`-th
/// continuation token. `topk[i]` holds up to K alternatives as
/// `(token, logprob)` pairs; `imputed[i]` is true when `logprobs[i]` was
/// reconstructed from the top-K floor rather than reported by the engine.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTrace {
    pub tokens: Vec<String>,
    pub logprobs: Vec<f64>,
    pub topk: Vec<Vec<(String, f64)>>,
    pub imputed: Vec<bool>,
}

impl TokenTrace {
    /// Builds a trace, enforcing that all per-token vectors line up.
    pub fn new(
        tokens: Vec<String>,
        logprobs: Vec<f64>,
        topk: Vec<Vec<(String, f64)>>,
        imputed: Vec<bool>,
    ) -> Self {
        let n = tokens.len();
        assert!(
            logprobs.len() == n && topk.len() == n && imputed.len() == n,
            "token trace vectors must have equal length"
        );
        TokenTrace { tokens, logprobs, topk, imputed }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Sampling parameters sent to the backend for generation.
///
/// `temperature` and `top_p` are transmitted verbatim; the defaults (1.0 / 1.0)
/// sample from the model's unmodified distribution. `seed` makes generation
/// reproducible where the engine supports it; the pipeline derives one seed
/// per scored pair so request ordering can never change results.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub seed: Option<u64>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig { temperature: 1.0, top_p: 1.0, seed: None }
    }
}

/// Connection settings for an HTTP scoring endpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key. The key itself
    /// is read at request time and never persisted.
    pub api_key_env: Option<String>,
    pub top_k: usize,
    pub max_parallel_requests: usize,
    pub timeout_secs: u64,
    pub scoring_mode: ScoringMode,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            base_url: String::new(),
            model: String::new(),
            api_key_env: None,
            top_k: DEFAULT_TOP_K,
            max_parallel_requests: 4,
            timeout_secs: 120,
            scoring_mode: ScoringMode::Echo,
        }
    }
}

/// How the endpoint scores a known continuation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoringMode {
    /// Send context + continuation as one prompt with `echo` enabled and read
    /// per-token logprobs back, keeping only the continuation's positions.
    Echo,
    /// Send context and continuation as separate fields for engines that
    /// score a supplied completion directly.
    PromptCompletion,
}

/// A sampled continuation plus the trace of its own sampling logprobs.
///
/// The trace doubles as the model's conditional score: each sampled token's
/// logprob is its probability under the model given the context and the
/// previously sampled tokens, so no extra scoring pass is needed.
#[derive(Debug, Clone)]
pub struct Generation {
    pub trace: TokenTrace,
    /// Detokenized continuation text, suitable for re-scoring or display.
    pub text: String,
    /// True when the engine stopped before producing the requested length.
    pub truncated: bool,
}

/// Scoring and sampling interface shared by the HTTP client and the mock.
pub trait Backend: Send + Sync {
    /// Opaque label identifying the scored model, used as a grouping key.
    fn model_id(&self) -> &str;

    /// Token count of `text` under this backend's tokenizer.
    fn count_tokens(&self, text: &str) -> Result<usize, BackendError>;

    /// Per-token logprobs of `continuation` following `context`.
    /// `context` must be non-empty; the trace covers exactly the
    /// continuation's tokens.
    fn score_conditional(&self, context: &str, continuation: &str)
        -> Result<TokenTrace, BackendError>;

    /// Per-token logprobs of `continuation` with no context: position `i`
    /// is conditioned only on the continuation's own prefix.
    fn score_unconditional(&self, continuation: &str) -> Result<TokenTrace, BackendError>;

    /// Samples `n_tokens` tokens following `context`. Early stops are
    /// returned as-is with `truncated` set.
    fn generate(
        &self,
        context: &str,
        n_tokens: usize,
        sampling: &SamplingConfig,
    ) -> Result<Generation, BackendError>;
}

/// Log probability for a realized token given the engine's top-K list.
///
/// If the token appears in the list its reported value is used. Otherwise the
/// token is assigned the worst listed logprob minus [`IMPUTE_OFFSET_NATS`],
/// and the second element of the return is true to flag the imputation.
pub fn impute_logprob(topk: &[(String, f64)], realized: &str) -> Result<(f64, bool), BackendError> {
    if topk.is_empty() {
        return Err(BackendError::EmptyTopK);
    }
    for (tok, lp) in topk {
        if tok == realized {
            return Ok((*lp, false));
        }
    }
    let floor = topk
        .iter()
        .map(|(_, lp)| *lp)
        .fold(f64::INFINITY, f64::min);
    Ok((floor - IMPUTE_OFFSET_NATS, true))
}
