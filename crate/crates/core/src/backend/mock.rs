//! Deterministic in-process backend over a fixed categorical distribution.
//!
//! The mock is context-independent: every token's probability is the same in
//! every position, regardless of what precedes it. That makes expected metric
//! values trivial to compute by hand and forces the context/no-context PMI
//! difference to zero, which the pipeline tests lean on heavily.
//!
//! Tokenization is whitespace splitting. Tokens outside the vocabulary are
//! scored through the same top-K imputation path as the HTTP client, so
//! arbitrary text still scores deterministically.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::{
    impute_logprob, Backend, BackendError, Generation, SamplingConfig, TokenTrace, DEFAULT_TOP_K,
};

/// Number of calls made to each backend entry point.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CallCounts {
    pub conditional: usize,
    pub unconditional: usize,
    pub generate: usize,
    pub count_tokens: usize,
}

impl CallCounts {
    /// Calls that hit the scoring/sampling path (excludes token counting).
    pub fn inference(&self) -> usize {
        self.conditional + self.unconditional + self.generate
    }
}

/// Context-independent categorical distribution with instrumented call counts.
pub struct MockBackend {
    model: String,
    /// Vocabulary in descending probability order (ties broken by token).
    ranked: Vec<(String, f64)>,
    top_k: usize,
    stop_token: Option<String>,
    fallback_seed: AtomicU64,
    n_conditional: AtomicUsize,
    n_unconditional: AtomicUsize,
    n_generate: AtomicUsize,
    n_count: AtomicUsize,
}

impl MockBackend {
    /// Builds a mock over `vocab` token probabilities. The probabilities
    /// must be strictly positive and sum to 1 within 1e-12.
    pub fn new(vocab: &[(&str, f64)]) -> Result<Self, BackendError> {
        if vocab.is_empty() {
            return Err(BackendError::Config("mock vocabulary is empty".into()));
        }
        let mut index = HashMap::new();
        let mut total = 0.0;
        for (tok, p) in vocab {
            if !p.is_finite() || *p <= 0.0 {
                return Err(BackendError::Config(format!(
                    "mock probability for {tok:?} must be positive and finite, got {p}"
                )));
            }
            if index.insert(tok.to_string(), *p).is_some() {
                return Err(BackendError::Config(format!("duplicate mock token {tok:?}")));
            }
            total += p;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(BackendError::Config(format!(
                "mock probabilities must sum to 1 (got {total})"
            )));
        }
        let mut ranked: Vec<(String, f64)> =
            index.into_iter().collect();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        Ok(MockBackend {
            model: "mock".into(),
            ranked,
            top_k: DEFAULT_TOP_K,
            stop_token: None,
            fallback_seed: AtomicU64::new(0),
            n_conditional: AtomicUsize::new(0),
            n_unconditional: AtomicUsize::new(0),
            n_generate: AtomicUsize::new(0),
            n_count: AtomicUsize::new(0),
        })
    }

    /// The canonical four-token distribution: a 0.4, b 0.3, c 0.2, d 0.1.
    pub fn standard() -> Self {
        MockBackend::new(&[("a", 0.4), ("b", 0.3), ("c", 0.2), ("d", 0.1)])
            .expect("standard mock distribution is valid")
    }

    pub fn with_model_id(mut self, model: impl Into<String>) -> Self {
        self.model = model.into();
        self
    }

    /// Limits the reported top-K list (defaults to 20).
    pub fn with_top_k(mut self, k: usize) -> Self {
        self.top_k = k.max(1);
        self
    }

    /// Marks a vocabulary token as an end-of-sequence marker: sampling it
    /// stops generation early, and it is not emitted.
    pub fn with_stop_token(mut self, tok: impl Into<String>) -> Self {
        self.stop_token = Some(tok.into());
        self
    }

    pub fn call_counts(&self) -> CallCounts {
        CallCounts {
            conditional: self.n_conditional.load(Ordering::Relaxed),
            unconditional: self.n_unconditional.load(Ordering::Relaxed),
            generate: self.n_generate.load(Ordering::Relaxed),
            count_tokens: self.n_count.load(Ordering::Relaxed),
        }
    }

    fn topk(&self) -> Vec<(String, f64)> {
        self.ranked
            .iter()
            .take(self.top_k)
            .map(|(t, p)| (t.clone(), p.ln()))
            .collect()
    }

    fn score_text(&self, text: &str, what: &'static str) -> Result<TokenTrace, BackendError> {
        let tokens: Vec<String> = text.split_whitespace().map(str::to_string).collect();
        if tokens.is_empty() {
            return Err(BackendError::EmptyInput { what });
        }
        let topk = self.topk();
        let mut logprobs = Vec::with_capacity(tokens.len());
        let mut imputed = Vec::with_capacity(tokens.len());
        for tok in &tokens {
            // In-vocabulary tokens outside the reported top-K still go
            // through imputation, mirroring what a real client observes.
            let (lp, imp) = match topk.iter().find(|(t, _)| t == tok) {
                Some((_, lp)) => (*lp, false),
                None => impute_logprob(&topk, tok)?,
            };
            logprobs.push(lp);
            imputed.push(imp);
        }
        let n = tokens.len();
        Ok(TokenTrace::new(tokens, logprobs, vec![topk; n], imputed))
    }

    /// Sampling weights after temperature and top-p adjustment, in ranked
    /// order. Reported logprobs always come from the base distribution.
    fn sampling_weights(&self, sampling: &SamplingConfig) -> Result<Vec<f64>, BackendError> {
        let t = sampling.temperature;
        if !t.is_finite() || t < 0.0 {
            return Err(BackendError::Config(format!("temperature must be >= 0, got {t}")));
        }
        let p = sampling.top_p;
        if !(p > 0.0 && p <= 1.0) {
            return Err(BackendError::Config(format!("top_p must be in (0, 1], got {p}")));
        }
        let mut weights: Vec<f64> = if t == 0.0 {
            // Greedy: all mass on the highest-probability token.
            let mut w = vec![0.0; self.ranked.len()];
            w[0] = 1.0;
            w
        } else {
            self.ranked.iter().map(|(_, pr)| pr.powf(1.0 / t)).collect()
        };
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        // Nucleus filter: smallest prefix (in ranked order) reaching top_p.
        let mut cum = 0.0;
        let mut keep = weights.len();
        for (i, w) in weights.iter().enumerate() {
            cum += w;
            if cum >= p - 1e-12 {
                keep = i + 1;
                break;
            }
        }
        let kept: f64 = weights[..keep].iter().sum();
        for (i, w) in weights.iter_mut().enumerate() {
            *w = if i < keep { *w / kept } else { 0.0 };
        }
        Ok(weights)
    }
}

impl Backend for MockBackend {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn count_tokens(&self, text: &str) -> Result<usize, BackendError> {
        self.n_count.fetch_add(1, Ordering::Relaxed);
        Ok(text.split_whitespace().count())
    }

    fn score_conditional(
        &self,
        context: &str,
        continuation: &str,
    ) -> Result<TokenTrace, BackendError> {
        self.n_conditional.fetch_add(1, Ordering::Relaxed);
        if context.split_whitespace().next().is_none() {
            return Err(BackendError::EmptyInput { what: "context" });
        }
        self.score_text(continuation, "continuation")
    }

    fn score_unconditional(&self, continuation: &str) -> Result<TokenTrace, BackendError> {
        self.n_unconditional.fetch_add(1, Ordering::Relaxed);
        self.score_text(continuation, "continuation")
    }

    fn generate(
        &self,
        context: &str,
        n_tokens: usize,
        sampling: &SamplingConfig,
    ) -> Result<Generation, BackendError> {
        self.n_generate.fetch_add(1, Ordering::Relaxed);
        if context.split_whitespace().next().is_none() {
            return Err(BackendError::EmptyInput { what: "context" });
        }
        if n_tokens == 0 {
            return Err(BackendError::Config("generation length must be at least 1".into()));
        }
        let weights = self.sampling_weights(sampling)?;
        let seed = sampling
            .seed
            .unwrap_or_else(|| self.fallback_seed.fetch_add(1, Ordering::Relaxed));
        let mut rng = ChaCha20Rng::seed_from_u64(seed);

        let topk = self.topk();
        let mut tokens = Vec::with_capacity(n_tokens);
        let mut logprobs = Vec::with_capacity(n_tokens);
        let mut truncated = false;
        for _ in 0..n_tokens {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut chosen = self.ranked.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    chosen = i;
                    break;
                }
            }
            let (tok, base_p) = &self.ranked[chosen];
            if self.stop_token.as_deref() == Some(tok.as_str()) {
                truncated = true;
                break;
            }
            tokens.push(tok.clone());
            logprobs.push(base_p.ln());
        }
        let text = tokens.join(" ");
        let n = tokens.len();
        let trace = TokenTrace::new(tokens, logprobs, vec![topk; n], vec![false; n]);
        Ok(Generation { trace, text, truncated })
    }
}
