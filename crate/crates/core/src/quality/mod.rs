//! Passage quality scoring and its relation to uncertainty.
//!
//! A pluggable [`QualityScorer`] assigns one scalar per passage (the context
//! and its continuation concatenated). Passages outside the word-count band
//! are excluded rather than scored, so length never confounds the scorer.
//! [`correlate`] then joins the scores against paired uncertainty records and
//! asks, per model/dataset/role group and per metric: does quality track
//! uncertainty monotonically ([`regress::spearman`]), and is there curvature
//! with an interior peak ([`regress::fit_quadratic`] +
//! [`regress::classify_shape`])?

pub mod regress;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gap::PairedRecord;
use crate::metrics::MetricSet;
use crate::stats;

pub use regress::{
    classify_shape, fit_quadratic, spearman, RegressionResult, ShapeClass, SpearmanResult,
    DEFAULT_ALPHA, DEFAULT_RANGE_LIMIT,
};

/// Passages shorter than this many words are not scored.
pub const MIN_QUALITY_WORDS: usize = 150;

/// Passages longer than this many words are not scored.
pub const MAX_QUALITY_WORDS: usize = 400;

/// Smallest joined group that still gets a correlation.
pub const DEFAULT_MIN_GROUP: usize = 10;

const MAX_ATTEMPTS: usize = 5;

#[derive(Debug, Error)]
pub enum QualityError {
    #[error("paired series have different lengths ({x} vs {y})")]
    MismatchedLengths { x: usize, y: usize },
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("{what} is constant, correlation undefined")]
    ConstantInput { what: &'static str },
    #[error("rank-deficient design: {reason}")]
    RankDeficient { reason: String },
    #[error("non-finite value in input series")]
    NonFinite,
    #[error("quality scorer failed on story {story_id} k={k} role={role}: {reason}")]
    Scorer {
        story_id: String,
        k: usize,
        role: Role,
        reason: String,
    },
    #[error("environment variable {var} is not set (quality scorer API key)")]
    MissingApiKey { var: String },
    #[error("transport error talking to quality scorer: {0}")]
    Transport(#[from] reqwest::Error),
    #[error("quality scorer returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed quality scorer response: {0}")]
    Protocol(String),
    #[error("quality scorer still failing after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: usize, last: String },
}

/// Which side of a pair a passage came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Human,
    Model,
}

impl Role {
    pub const ALL: [Role; 2] = [Role::Human, Role::Model];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Human => "human",
            Role::Model => "model",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "human" => Ok(Role::Human),
            "model" => Ok(Role::Model),
            other => Err(format!("unknown role {other:?}")),
        }
    }
}

/// Uncertainty measures that get correlated with quality. CPMI is reported in
/// the gap tables but not correlated, matching the analysis layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncMetric {
    Nll,
    Ppl,
    Pmi,
}

impl UncMetric {
    pub const ALL: [UncMetric; 3] = [UncMetric::Nll, UncMetric::Ppl, UncMetric::Pmi];

    pub fn as_str(self) -> &'static str {
        match self {
            UncMetric::Nll => "nll",
            UncMetric::Ppl => "ppl",
            UncMetric::Pmi => "pmi",
        }
    }

    /// Sign of the correlation the analysis treats as "expected": quality is
    /// expected to rise with NLL/PPL and fall with PMI.
    pub fn expected_sign(self) -> f64 {
        match self {
            UncMetric::Nll | UncMetric::Ppl => 1.0,
            UncMetric::Pmi => -1.0,
        }
    }

    pub fn value(self, m: &MetricSet) -> f64 {
        match self {
            UncMetric::Nll => m.nll,
            UncMetric::Ppl => m.ppl,
            UncMetric::Pmi => m.pmi,
        }
    }
}

impl fmt::Display for UncMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for UncMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        UncMetric::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown uncertainty metric {s:?}"))
    }
}

/// One scored (or excluded) passage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityScore {
    pub story_id: String,
    pub k: usize,
    pub role: Role,
    /// `None` exactly when `excluded` is true.
    pub score: Option<f64>,
    pub word_count: usize,
    pub excluded: bool,
}

/// Anything that can turn a passage into one scalar.
pub trait QualityScorer: Send + Sync {
    fn scorer_id(&self) -> &str;
    fn score(&self, passage: &str) -> Result<f64, QualityError>;
}

/// Deterministic offline scorer: tanh of (mean word length / 10). Longer
/// words score higher, which is meaningless but stable, order-sensitive, and
/// cheap — exactly what pipeline tests need.
#[derive(Debug, Default, Clone, Copy)]
pub struct MockScorer;

impl QualityScorer for MockScorer {
    fn scorer_id(&self) -> &str {
        "mock-quality"
    }

    fn score(&self, passage: &str) -> Result<f64, QualityError> {
        let mut words = 0usize;
        let mut chars = 0usize;
        for w in passage.split_whitespace() {
            words += 1;
            chars += w.chars().count();
        }
        if words == 0 {
            return Ok(0.0);
        }
        Ok((chars as f64 / words as f64 / 10.0).tanh())
    }
}

/// Configuration for [`HttpScorer`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HttpScorerConfig {
    /// Endpoint receiving `POST {"text": ...}` and answering `{"score": ...}`.
    pub url: String,
    /// Environment variable holding the bearer token, if the service needs
    /// one. The key itself is read per request and never stored.
    pub api_key_env: Option<String>,
    pub timeout_secs: u64,
}

impl Default for HttpScorerConfig {
    fn default() -> Self {
        HttpScorerConfig {
            url: String::new(),
            api_key_env: None,
            timeout_secs: 60,
        }
    }
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct ScoreResponse {
    score: f64,
}

/// HTTP client for an external scoring service.
pub struct HttpScorer {
    cfg: HttpScorerConfig,
    client: reqwest::blocking::Client,
    base_delay: Duration,
}

impl HttpScorer {
    pub fn new(cfg: HttpScorerConfig) -> Result<Self, QualityError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()?;
        Ok(HttpScorer {
            cfg,
            client,
            base_delay: Duration::from_millis(500),
        })
    }

    /// Shrinks the retry backoff; tests only.
    pub fn with_base_delay(mut self, delay: Duration) -> Self {
        self.base_delay = delay;
        self
    }

    fn api_key(&self) -> Result<Option<String>, QualityError> {
        match &self.cfg.api_key_env {
            None => Ok(None),
            Some(var) => match std::env::var(var) {
                Ok(v) => Ok(Some(v)),
                Err(_) => Err(QualityError::MissingApiKey { var: var.clone() }),
            },
        }
    }

    fn post(&self, passage: &str) -> Result<ScoreResponse, QualityError> {
        let mut last = String::new();
        for attempt in 0..MAX_ATTEMPTS {
            if attempt > 0 {
                std::thread::sleep(self.base_delay * (1 << (attempt - 1)) as u32);
            }
            let mut req = self
                .client
                .post(&self.cfg.url)
                .json(&ScoreRequest { text: passage });
            if let Some(key) = self.api_key()? {
                req = req.bearer_auth(key);
            }
            let resp = match req.send() {
                Ok(r) => r,
                Err(e) => {
                    last = e.to_string();
                    continue;
                }
            };
            let status = resp.status();
            if status.is_server_error() {
                last = format!("HTTP {}", status.as_u16());
                continue;
            }
            if !status.is_success() {
                return Err(QualityError::Http {
                    status: status.as_u16(),
                    body: resp.text().unwrap_or_default(),
                });
            }
            let body = resp.text()?;
            return serde_json::from_str(&body)
                .map_err(|e| QualityError::Protocol(format!("{e} in {body:?}")));
        }
        Err(QualityError::RetriesExhausted {
            attempts: MAX_ATTEMPTS,
            last,
        })
    }
}

impl QualityScorer for HttpScorer {
    fn scorer_id(&self) -> &str {
        &self.cfg.url
    }

    fn score(&self, passage: &str) -> Result<f64, QualityError> {
        let resp = self.post(passage)?;
        if !resp.score.is_finite() {
            return Err(QualityError::Protocol(format!(
                "non-finite score {}",
                resp.score
            )));
        }
        Ok(resp.score)
    }
}

/// Whitespace-delimited word count.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Score one passage, applying the word-count band first.
///
/// The passage is the context and continuation concatenated; `continuation`
/// must carry its leading boundary whitespace (the same convention the
/// scoring stage uses), otherwise the junction would fuse two words.
/// Passages outside [`MIN_QUALITY_WORDS`]..=[`MAX_QUALITY_WORDS`] come back
/// excluded with no score and the scorer is never called.
pub fn score_quality(
    scorer: &dyn QualityScorer,
    story_id: &str,
    k: usize,
    role: Role,
    context: &str,
    continuation: &str,
) -> Result<QualityScore, QualityError> {
    let passage = format!("{context}{continuation}");
    let words = word_count(&passage);
    if !(MIN_QUALITY_WORDS..=MAX_QUALITY_WORDS).contains(&words) {
        return Ok(QualityScore {
            story_id: story_id.to_string(),
            k,
            role,
            score: None,
            word_count: words,
            excluded: true,
        });
    }
    let value = scorer
        .score(&passage)
        .map_err(|e| QualityError::Scorer {
            story_id: story_id.to_string(),
            k,
            role,
            reason: e.to_string(),
        })?;
    Ok(QualityScore {
        story_id: story_id.to_string(),
        k,
        role,
        score: Some(value),
        word_count: words,
        excluded: false,
    })
}

/// One correlation group: all passages of one role, for one model on one
/// dataset.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct QualityGroupKey {
    pub model_id: String,
    pub dataset: String,
    pub role: Role,
}

/// Correlation and curvature answer for one group × metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityAnalysis {
    pub key: QualityGroupKey,
    pub metric: UncMetric,
    pub n: usize,
    pub rho: f64,
    pub p: f64,
    pub fit: RegressionResult,
    pub shape: ShapeClass,
}

impl QualityAnalysis {
    /// True when the correlation is significant in the direction the metric
    /// is expected to point. One-sided at `alpha`: the two-sided p is halved
    /// when the observed sign matches the expected one.
    pub fn significant_expected(&self, alpha: f64) -> bool {
        self.rho * self.metric.expected_sign() > 0.0 && self.p / 2.0 < alpha
    }

    /// Significantly positive / negative, same one-sided convention.
    pub fn significant_signed(&self, alpha: f64) -> Option<bool> {
        if self.p / 2.0 < alpha && self.rho != 0.0 {
            Some(self.rho > 0.0)
        } else {
            None
        }
    }
}

/// Group that produced no analysis, and why.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedGroup {
    pub key: QualityGroupKey,
    /// `None` when the whole group was skipped (undersized); otherwise the
    /// single metric whose correlation was undefined.
    pub metric: Option<UncMetric>,
    pub n: usize,
    pub reason: String,
}

/// Knobs for [`correlate`].
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CorrelationOptions {
    pub alpha: f64,
    pub range_limit: f64,
    pub min_n: usize,
}

impl Default for CorrelationOptions {
    fn default() -> Self {
        CorrelationOptions {
            alpha: DEFAULT_ALPHA,
            range_limit: DEFAULT_RANGE_LIMIT,
            min_n: DEFAULT_MIN_GROUP,
        }
    }
}

/// Everything [`correlate`] produces: per-group analyses in deterministic
/// (key, metric) order plus the skip diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationOutcome {
    pub analyses: Vec<QualityAnalysis>,
    pub skipped: Vec<SkippedGroup>,
}

/// Join uncertainty records with quality scores and correlate per group.
///
/// Scores join on (story_id, k, role); excluded scores never join. Each
/// record contributes its human passage and its model passage to separate
/// groups. Groups smaller than `min_n` are skipped whole; a group whose
/// score or metric column is constant is skipped for the affected metric
/// only. Output order is sorted by group key, then metric.
pub fn correlate(
    records: &[PairedRecord],
    scores: &[QualityScore],
    opts: &CorrelationOptions,
) -> CorrelationOutcome {
    let mut by_key: BTreeMap<(&str, usize, Role), f64> = BTreeMap::new();
    for s in scores {
        if let Some(v) = s.score {
            by_key.insert((s.story_id.as_str(), s.k, s.role), v);
        }
    }

    // group → (score, per-metric values), insertion in record order
    let mut groups: BTreeMap<QualityGroupKey, Vec<(f64, [f64; 3])>> = BTreeMap::new();
    for r in records {
        for role in Role::ALL {
            let Some(&score) = by_key.get(&(r.story_id.as_str(), r.k, role)) else {
                continue;
            };
            let side = match role {
                Role::Human => &r.human,
                Role::Model => &r.model,
            };
            let values = [
                UncMetric::Nll.value(side),
                UncMetric::Ppl.value(side),
                UncMetric::Pmi.value(side),
            ];
            groups
                .entry(QualityGroupKey {
                    model_id: r.model_id.clone(),
                    dataset: r.dataset.clone(),
                    role,
                })
                .or_default()
                .push((score, values));
        }
    }

    let mut analyses = Vec::new();
    let mut skipped = Vec::new();
    for (key, obs) in groups {
        if obs.len() < opts.min_n {
            skipped.push(SkippedGroup {
                key,
                metric: None,
                n: obs.len(),
                reason: format!("{} joined observations, need {}", obs.len(), opts.min_n),
            });
            continue;
        }
        let ys: Vec<f64> = obs.iter().map(|(s, _)| *s).collect();
        for (i, metric) in UncMetric::ALL.into_iter().enumerate() {
            let xs: Vec<f64> = obs.iter().map(|(_, v)| v[i]).collect();
            let result = spearman(&xs, &ys).and_then(|sp| {
                let fit = fit_quadratic(&xs, &ys)?;
                Ok((sp, fit))
            });
            match result {
                Ok((sp, fit)) => {
                    let shape = classify_shape(&fit, opts.alpha, opts.range_limit);
                    analyses.push(QualityAnalysis {
                        key: key.clone(),
                        metric,
                        n: obs.len(),
                        rho: sp.rho,
                        p: sp.p,
                        fit,
                        shape,
                    });
                }
                Err(e) => skipped.push(SkippedGroup {
                    key: key.clone(),
                    metric: Some(metric),
                    n: obs.len(),
                    reason: e.to_string(),
                }),
            }
        }
    }
    CorrelationOutcome { analyses, skipped }
}

/// Cross-group summary for one metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRollup {
    pub metric: UncMetric,
    pub n_groups: usize,
    pub mean_rho: f64,
    /// Sample standard deviation of rho across groups; 0 for a single group.
    pub std_rho: f64,
    /// Percent of groups significant in the metric's expected direction.
    pub pct_sig_expected: f64,
    pub pct_sweet_spot: f64,
    /// Mean standardized peak over the groups classified SweetSpot.
    pub mean_z_star: Option<f64>,
    pub mean_delta_r2: f64,
}

/// Summarize analyses per metric across all groups.
pub fn rollup(analyses: &[QualityAnalysis], alpha: f64) -> Vec<MetricRollup> {
    UncMetric::ALL
        .into_iter()
        .filter_map(|metric| {
            let of_metric: Vec<&QualityAnalysis> =
                analyses.iter().filter(|a| a.metric == metric).collect();
            if of_metric.is_empty() {
                return None;
            }
            let n = of_metric.len();
            let rhos: Vec<f64> = of_metric.iter().map(|a| a.rho).collect();
            let sig = of_metric
                .iter()
                .filter(|a| a.significant_expected(alpha))
                .count();
            let peaks: Vec<f64> = of_metric
                .iter()
                .filter(|a| a.shape == ShapeClass::SweetSpot)
                .filter_map(|a| a.fit.z_star)
                .collect();
            Some(MetricRollup {
                metric,
                n_groups: n,
                mean_rho: stats::mean(&rhos),
                std_rho: if n > 1 { stats::sample_std(&rhos) } else { 0.0 },
                pct_sig_expected: 100.0 * sig as f64 / n as f64,
                pct_sweet_spot: 100.0 * peaks.len() as f64 / n as f64,
                mean_z_star: (!peaks.is_empty()).then(|| stats::mean(&peaks)),
                mean_delta_r2: stats::mean(
                    &of_metric.iter().map(|a| a.fit.delta_r2).collect::<Vec<_>>(),
                ),
            })
        })
        .collect()
}

/// Cross-group summary for one dataset × metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRollup {
    pub dataset: String,
    pub metric: UncMetric,
    pub n_groups: usize,
    pub mean_rho: f64,
    /// Percent of groups significantly positive / negative (one-sided).
    pub pct_sig_pos: f64,
    pub pct_sig_neg: f64,
    pub mean_beta1: f64,
    pub mean_beta2: f64,
}

/// Summarize analyses per (dataset, metric), sorted by dataset then metric.
pub fn dataset_rollup(analyses: &[QualityAnalysis], alpha: f64) -> Vec<DatasetRollup> {
    let mut buckets: BTreeMap<(&str, UncMetric), Vec<&QualityAnalysis>> = BTreeMap::new();
    for a in analyses {
        buckets
            .entry((a.key.dataset.as_str(), a.metric))
            .or_default()
            .push(a);
    }
    buckets
        .into_iter()
        .map(|((dataset, metric), group)| {
            let n = group.len();
            let pos = group
                .iter()
                .filter(|a| a.significant_signed(alpha) == Some(true))
                .count();
            let neg = group
                .iter()
                .filter(|a| a.significant_signed(alpha) == Some(false))
                .count();
            DatasetRollup {
                dataset: dataset.to_string(),
                metric,
                n_groups: n,
                mean_rho: stats::mean(&group.iter().map(|a| a.rho).collect::<Vec<_>>()),
                pct_sig_pos: 100.0 * pos as f64 / n as f64,
                pct_sig_neg: 100.0 * neg as f64 / n as f64,
                mean_beta1: stats::mean(&group.iter().map(|a| a.fit.beta1).collect::<Vec<_>>()),
                mean_beta2: stats::mean(&group.iter().map(|a| a.fit.beta2).collect::<Vec<_>>()),
            }
        })
        .collect()
}

/// Count of groups per shape class, for one metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeCounts {
    pub metric: UncMetric,
    pub sweet_spot: usize,
    pub diminishing: usize,
    pub u_shape: usize,
    pub linear: usize,
    pub flat_ns: usize,
}

impl ShapeCounts {
    pub fn total(&self) -> usize {
        self.sweet_spot + self.diminishing + self.u_shape + self.linear + self.flat_ns
    }

    pub fn get(&self, class: ShapeClass) -> usize {
        match class {
            ShapeClass::SweetSpot => self.sweet_spot,
            ShapeClass::Diminishing => self.diminishing,
            ShapeClass::UShape => self.u_shape,
            ShapeClass::Linear => self.linear,
            ShapeClass::FlatNs => self.flat_ns,
        }
    }
}

/// Shape distribution per metric. Every analysis lands in exactly one cell,
/// so each row's total equals that metric's group count.
pub fn shape_distribution(analyses: &[QualityAnalysis]) -> Vec<ShapeCounts> {
    UncMetric::ALL
        .into_iter()
        .filter_map(|metric| {
            let of_metric: Vec<&QualityAnalysis> =
                analyses.iter().filter(|a| a.metric == metric).collect();
            if of_metric.is_empty() {
                return None;
            }
            let count =
                |class: ShapeClass| of_metric.iter().filter(|a| a.shape == class).count();
            Some(ShapeCounts {
                metric,
                sweet_spot: count(ShapeClass::SweetSpot),
                diminishing: count(ShapeClass::Diminishing),
                u_shape: count(ShapeClass::UShape),
                linear: count(ShapeClass::Linear),
                flat_ns: count(ShapeClass::FlatNs),
            })
        })
        .collect()
}
