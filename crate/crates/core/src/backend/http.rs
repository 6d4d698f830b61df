//! Blocking HTTP client for completion-style scoring endpoints.
//!
//! The wire protocol is the OpenAI-compatible `/v1/completions` shape served
//! by common inference engines. Scoring a known continuation uses echo mode:
//! the full text goes out as the prompt with `echo: true` and `max_tokens: 0`,
//! and the per-token logprobs come back with byte offsets, from which the
//! continuation's positions are cut out. Engines that support direct
//! prompt/completion scoring can be driven with
//! [`ScoringMode::PromptCompletion`] instead.
//!
//! The API key is read from the environment variable named in the config at
//! request time and sent as a bearer token; it is never stored or logged.

use std::collections::HashMap;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{
    impute_logprob, Backend, BackendConfig, BackendError, Generation, SamplingConfig, ScoringMode,
    TokenTrace,
};

/// Hard cap on delivery attempts per request (1 initial + 4 retries).
const MAX_ATTEMPTS: u32 = 5;

pub struct HttpBackend {
    cfg: BackendConfig,
    url: String,
    client: reqwest::blocking::Client,
    /// First backoff delay; doubles per retry. Small in tests.
    base_delay: Duration,
}

impl HttpBackend {
    pub fn new(cfg: BackendConfig) -> Result<Self, BackendError> {
        if cfg.base_url.is_empty() {
            return Err(BackendError::Config("backend base URL is empty".into()));
        }
        if cfg.model.is_empty() {
            return Err(BackendError::Config("model name is empty".into()));
        }
        let url = completions_url(&cfg.base_url);
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| BackendError::Config(format!("failed to build HTTP client: {e}")))?;
        Ok(HttpBackend { cfg, url, client, base_delay: Duration::from_millis(500) })
    }

    #[doc(hidden)]
    pub fn with_base_delay(mut self, d: Duration) -> Self {
        self.base_delay = d;
        self
    }

    fn api_key(&self) -> Result<Option<String>, BackendError> {
        match &self.cfg.api_key_env {
            None => Ok(None),
            Some(var) => match std::env::var(var) {
                Ok(v) => Ok(Some(v)),
                Err(_) => Err(BackendError::MissingApiKey(var.clone())),
            },
        }
    }

    fn post(&self, body: &CompletionRequest) -> Result<CompletionResponse, BackendError> {
        let key = self.api_key()?;
        let mut last = String::new();
        for attempt in 1..=MAX_ATTEMPTS {
            if attempt > 1 {
                thread::sleep(self.base_delay * 2u32.pow(attempt - 2));
            }
            let mut req = self.client.post(&self.url).json(body);
            if let Some(k) = &key {
                req = req.bearer_auth(k);
            }
            match req.send() {
                Err(e) => {
                    last = format!("transport: {e}");
                }
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        return resp.json::<CompletionResponse>().map_err(|e| {
                            BackendError::Protocol {
                                url: self.url.clone(),
                                reason: format!("invalid JSON body: {e}"),
                            }
                        });
                    }
                    let body_text = resp.text().unwrap_or_default();
                    if status.is_server_error() {
                        last = format!("HTTP {}: {}", status.as_u16(), truncate(&body_text));
                    } else {
                        // Client errors are not retried.
                        return Err(BackendError::Http {
                            status: status.as_u16(),
                            url: self.url.clone(),
                            body: truncate(&body_text),
                        });
                    }
                }
            }
        }
        Err(BackendError::RetriesExhausted { attempts: MAX_ATTEMPTS, last })
    }

    fn protocol_err(&self, reason: impl Into<String>) -> BackendError {
        BackendError::Protocol { url: self.url.clone(), reason: reason.into() }
    }

    /// Echo-scores `text` and returns the full prompt-token payload.
    fn echo(&self, text: &str) -> Result<LogprobsPayload, BackendError> {
        let req = CompletionRequest {
            model: &self.cfg.model,
            prompt: text,
            max_tokens: 0,
            temperature: 1.0,
            top_p: 1.0,
            seed: None,
            logprobs: self.cfg.top_k,
            echo: true,
            completion: None,
        };
        let resp = self.post(&req)?;
        let choice = resp
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| self.protocol_err("response has no choices"))?;
        choice.logprobs.ok_or_else(|| self.protocol_err("response has no logprobs payload"))
    }

    /// Converts payload positions `[start, end)` into a trace, imputing
    /// positions whose logprob the engine withheld.
    fn trace_from(
        &self,
        payload: &LogprobsPayload,
        start: usize,
        end: usize,
    ) -> Result<TokenTrace, BackendError> {
        if end > payload.tokens.len() || payload.token_logprobs.len() != payload.tokens.len() {
            return Err(self.protocol_err(format!(
                "logprob arrays are inconsistent: {} tokens, {} logprobs",
                payload.tokens.len(),
                payload.token_logprobs.len()
            )));
        }
        let mut tokens = Vec::with_capacity(end - start);
        let mut logprobs = Vec::with_capacity(end - start);
        let mut topk = Vec::with_capacity(end - start);
        let mut imputed = Vec::with_capacity(end - start);
        for i in start..end {
            let tok = payload.tokens[i].clone();
            let alts = payload
                .top_logprobs
                .as_ref()
                .and_then(|tls| tls.get(i))
                .and_then(|m| m.as_ref())
                .map(sorted_alternatives)
                .unwrap_or_default();
            let (lp, imp) = match payload.token_logprobs[i] {
                Some(lp) => {
                    // Trust the engine's value; top-K is informational here.
                    (lp, false)
                }
                None => {
                    if alts.is_empty() {
                        return Err(self.protocol_err(format!(
                            "position {i} has neither a logprob nor alternatives; \
                             configure the engine to prepend a BOS token"
                        )));
                    }
                    impute_logprob(&alts, &tok)?
                }
            };
            tokens.push(tok);
            logprobs.push(lp);
            topk.push(alts);
            imputed.push(imp);
        }
        if tokens.is_empty() {
            return Err(BackendError::EmptyInput { what: "continuation" });
        }
        Ok(TokenTrace::new(tokens, logprobs, topk, imputed))
    }

    /// Echo-mode scoring: keep the tokens overlapping `text[boundary..]`.
    fn score_echo(&self, full: &str, boundary: usize) -> Result<TokenTrace, BackendError> {
        let payload = self.echo(full)?;
        let offsets = payload
            .text_offset
            .as_ref()
            .ok_or_else(|| self.protocol_err("echo scoring requires text_offset"))?;
        if offsets.len() != payload.tokens.len() {
            return Err(self.protocol_err("text_offset length does not match tokens"));
        }
        let start = offsets
            .iter()
            .zip(&payload.tokens)
            .position(|(off, tok)| off + tok.len() > boundary)
            .ok_or(BackendError::EmptyInput { what: "continuation" })?;
        self.trace_from(&payload, start, payload.tokens.len())
    }

    /// Direct prompt/completion scoring for engines that support it.
    fn score_split(&self, prompt: &str, completion: &str) -> Result<TokenTrace, BackendError> {
        let req = CompletionRequest {
            model: &self.cfg.model,
            prompt,
            max_tokens: 0,
            temperature: 1.0,
            top_p: 1.0,
            seed: None,
            logprobs: self.cfg.top_k,
            echo: false,
            completion: Some(completion),
        };
        let resp = self.post(&req)?;
        let choice = resp
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| self.protocol_err("response has no choices"))?;
        let payload =
            choice.logprobs.ok_or_else(|| self.protocol_err("response has no logprobs payload"))?;
        let n = payload.tokens.len();
        self.trace_from(&payload, 0, n)
    }
}

impl Backend for HttpBackend {
    fn model_id(&self) -> &str {
        &self.cfg.model
    }

    fn count_tokens(&self, text: &str) -> Result<usize, BackendError> {
        // An echo pass is the one request every completion endpoint can
        // serve that reveals its own tokenization exactly.
        Ok(self.echo(text)?.tokens.len())
    }

    fn score_conditional(
        &self,
        context: &str,
        continuation: &str,
    ) -> Result<TokenTrace, BackendError> {
        if context.is_empty() {
            return Err(BackendError::EmptyInput { what: "context" });
        }
        if continuation.is_empty() {
            return Err(BackendError::EmptyInput { what: "continuation" });
        }
        match self.cfg.scoring_mode {
            ScoringMode::Echo => {
                let full = format!("{context}{continuation}");
                self.score_echo(&full, context.len())
            }
            ScoringMode::PromptCompletion => self.score_split(context, continuation),
        }
    }

    fn score_unconditional(&self, continuation: &str) -> Result<TokenTrace, BackendError> {
        if continuation.is_empty() {
            return Err(BackendError::EmptyInput { what: "continuation" });
        }
        match self.cfg.scoring_mode {
            ScoringMode::Echo => self.score_echo(continuation, 0),
            ScoringMode::PromptCompletion => self.score_split("", continuation),
        }
    }

    fn generate(
        &self,
        context: &str,
        n_tokens: usize,
        sampling: &SamplingConfig,
    ) -> Result<Generation, BackendError> {
        if context.is_empty() {
            return Err(BackendError::EmptyInput { what: "context" });
        }
        if n_tokens == 0 {
            return Err(BackendError::Config("generation length must be at least 1".into()));
        }
        let req = CompletionRequest {
            model: &self.cfg.model,
            prompt: context,
            max_tokens: n_tokens,
            temperature: sampling.temperature,
            top_p: sampling.top_p,
            seed: sampling.seed,
            logprobs: self.cfg.top_k,
            echo: false,
            completion: None,
        };
        let resp = self.post(&req)?;
        let choice = resp
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| self.protocol_err("response has no choices"))?;
        let text = choice
            .text
            .clone()
            .ok_or_else(|| self.protocol_err("generation response has no text"))?;
        let payload =
            choice.logprobs.ok_or_else(|| self.protocol_err("response has no logprobs payload"))?;
        let n = payload.tokens.len();
        let trace = self.trace_from(&payload, 0, n)?;
        let stopped_early = matches!(choice.finish_reason.as_deref(), Some(r) if r != "length");
        Ok(Generation { truncated: stopped_early || trace.len() < n_tokens, trace, text })
    }
}

/// Normalizes a base URL to a full completions endpoint.
pub fn completions_url(base: &str) -> String {
    let t = base.trim_end_matches('/');
    if t.ends_with("/completions") {
        t.to_string()
    } else if t.ends_with("/v1") {
        format!("{t}/completions")
    } else {
        format!("{t}/v1/completions")
    }
}

fn truncate(s: &str) -> String {
    const LIMIT: usize = 300;
    if s.len() <= LIMIT {
        s.to_string()
    } else {
        let cut = s
            .char_indices()
            .map(|(i, _)| i)
            .take_while(|i| *i <= LIMIT)
            .last()
            .unwrap_or(0);
        format!("{}...", &s[..cut])
    }
}

/// Alternatives sorted best-first, ties broken by token for determinism.
fn sorted_alternatives(m: &HashMap<String, f64>) -> Vec<(String, f64)> {
    let mut v: Vec<(String, f64)> = m.iter().map(|(t, lp)| (t.clone(), *lp)).collect();
    v.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    v
}

#[derive(Debug, Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: usize,
    temperature: f64,
    top_p: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    logprobs: usize,
    echo: bool,
    /// Only set in prompt/completion scoring mode.
    #[serde(skip_serializing_if = "Option::is_none")]
    completion: Option<&'a str>,
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    finish_reason: Option<String>,
    #[serde(default)]
    logprobs: Option<LogprobsPayload>,
}

#[derive(Debug, Deserialize)]
struct LogprobsPayload {
    tokens: Vec<String>,
    token_logprobs: Vec<Option<f64>>,
    #[serde(default)]
    top_logprobs: Option<Vec<Option<HashMap<String, f64>>>>,
    #[serde(default)]
    text_offset: Option<Vec<usize>>,
}
