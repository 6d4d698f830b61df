//! Stage orchestration over JSONL artifacts in one output directory.
//!
//! Each stage reads only its declared inputs and writes its declared
//! outputs, so stages can be rerun independently and a deleted later-stage
//! artifact is reproduced byte-identically from the earlier ones:
//!
//! ```text
//! ingest     corpus files        -> pairs.jsonl, checksums.json
//! score      pairs.jsonl         -> records.jsonl, traces.jsonl
//! quality    pairs + traces      -> scores.jsonl
//! analyze    records.jsonl       -> reports/gap.*, reports/domain.*
//! correlate  records + scores    -> reports/quality_*
//! ```
//!
//! Scoring is the only concurrent stage. Every pair gets a seed derived
//! from (run seed, dataset, story, k) and results are re-ordered to input
//! order before they are written, so the parallelism setting can never
//! change a single output byte. Scoring and quality runs resume: pairs
//! whose keys already appear in the output file are skipped.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{Backend, BackendConfig, BackendError, SamplingConfig};
use crate::corpus::{self, CorpusError, SegmentPair};
use crate::gap::{
    self, aggregate_by_domain, aggregate_median, bucketize, DomainAggregation, GapError,
    GroupBy, PairedRecord,
};
use crate::jsonl::{self, JsonlError};
use crate::quality::{
    self, HttpScorer, HttpScorerConfig, MockScorer, QualityError, QualityScore, QualityScorer,
    Role,
};
use crate::report::{
    self, Diagnostics, DiagnosticsFile, GapDiagnostics, QualityDiagnostics, QualityReport,
    ReportError, RunMetadata,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Gap(#[from] GapError),
    #[error(transparent)]
    Quality(#[from] QualityError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(
        "no group produced a correlation ({skipped} skipped); see reports/diagnostics.json"
    )]
    NoAnalyzableGroups { skipped: usize },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Full configuration for one run. Serializes to a flat key-value document;
/// every numeric default matches the published evaluation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Corpus files; each file becomes one dataset named after its stem.
    pub corpus: Vec<PathBuf>,
    /// Default domain labels for stories that carry none: either empty, one
    /// label for all corpus files, or exactly one label per corpus file.
    pub domain: Vec<String>,
    /// Completion endpoint base URL; ignored when `mock` is set.
    pub backend_url: String,
    pub model: String,
    /// Use the deterministic in-process backend instead of HTTP.
    pub mock: bool,
    /// Name of the environment variable holding the backend API key.
    pub api_key_env: String,
    /// Quality scoring endpoint; empty selects the deterministic mock scorer.
    pub scorer_url: String,
    /// Environment variable holding the scorer API key; empty means none.
    pub scorer_api_key_env: String,
    pub temperature: f64,
    pub top_p: f64,
    pub tau: f64,
    pub lambda: f64,
    pub max_token_filter: usize,
    pub top_k: usize,
    pub seed: u64,
    pub parallelism: usize,
    pub alpha: f64,
    pub range_limit: f64,
    pub min_group: usize,
    pub domain_aggregation: DomainAggregation,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: Vec::new(),
            domain: Vec::new(),
            backend_url: String::new(),
            model: "mock".into(),
            mock: false,
            api_key_env: "UNCGAP_API_KEY".into(),
            scorer_url: String::new(),
            scorer_api_key_env: String::new(),
            temperature: 1.0,
            top_p: 1.0,
            tau: crate::metrics::DEFAULT_TAU,
            lambda: crate::metrics::DEFAULT_LAMBDA,
            max_token_filter: 4096,
            top_k: crate::backend::DEFAULT_TOP_K,
            seed: 0,
            parallelism: 4,
            alpha: quality::DEFAULT_ALPHA,
            range_limit: quality::DEFAULT_RANGE_LIMIT,
            min_group: quality::DEFAULT_MIN_GROUP,
            domain_aggregation: DomainAggregation::MeanOfMedians,
            out: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if !self.mock && self.backend_url.is_empty() {
            return Err(PipelineError::Config(
                "either set backend_url or enable mock".into(),
            ));
        }
        if !self.domain.is_empty()
            && self.domain.len() != 1
            && self.domain.len() != self.corpus.len()
        {
            return Err(PipelineError::Config(format!(
                "{} domain labels for {} corpus files (need 0, 1, or one per file)",
                self.domain.len(),
                self.corpus.len()
            )));
        }
        if self.parallelism == 0 {
            return Err(PipelineError::Config("parallelism must be at least 1".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(PipelineError::Config("temperature must be >= 0".into()));
        }
        if self.top_p.is_nan() || self.top_p <= 0.0 || self.top_p > 1.0 {
            return Err(PipelineError::Config("top_p must be in (0, 1]".into()));
        }
        if self.tau.is_nan() || self.tau < 0.0 {
            return Err(PipelineError::Config("tau must be >= 0".into()));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(PipelineError::Config("lambda must be finite and >= 0".into()));
        }
        if self.alpha.is_nan() || self.alpha <= 0.0 || self.alpha >= 1.0 {
            return Err(PipelineError::Config("alpha must be in (0, 1)".into()));
        }
        Ok(())
    }

    /// Construct the backend this configuration names.
    pub fn backend(&self) -> Result<Box<dyn Backend>, PipelineError> {
        self.validate()?;
        if self.mock {
            let mock = crate::backend::mock::MockBackend::standard()
                .with_model_id(self.model.clone())
                .with_top_k(self.top_k);
            return Ok(Box::new(mock));
        }
        let cfg = BackendConfig {
            base_url: self.backend_url.clone(),
            model: self.model.clone(),
            api_key_env: (!self.api_key_env.is_empty()).then(|| self.api_key_env.clone()),
            top_k: self.top_k,
            max_parallel_requests: self.parallelism,
            ..BackendConfig::default()
        };
        Ok(Box::new(crate::backend::http::HttpBackend::new(cfg)?))
    }

    /// Construct the quality scorer this configuration names.
    pub fn scorer(&self) -> Result<Box<dyn QualityScorer>, PipelineError> {
        if self.scorer_url.is_empty() {
            return Ok(Box::new(MockScorer));
        }
        let scorer = HttpScorer::new(HttpScorerConfig {
            url: self.scorer_url.clone(),
            api_key_env: (!self.scorer_api_key_env.is_empty())
                .then(|| self.scorer_api_key_env.clone()),
            ..HttpScorerConfig::default()
        })?;
        Ok(Box::new(scorer))
    }

    pub fn pairs_path(&self) -> PathBuf {
        self.out.join("pairs.jsonl")
    }

    pub fn records_path(&self) -> PathBuf {
        self.out.join("records.jsonl")
    }

    pub fn traces_path(&self) -> PathBuf {
        self.out.join("traces.jsonl")
    }

    pub fn scores_path(&self) -> PathBuf {
        self.out.join("scores.jsonl")
    }

    pub fn checksums_path(&self) -> PathBuf {
        self.out.join("checksums.json")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.out.join("reports")
    }

    pub fn diagnostics_path(&self) -> PathBuf {
        self.reports_dir().join("diagnostics.json")
    }

    fn domain_for(&self, corpus_index: usize) -> Option<&str> {
        match self.domain.len() {
            0 => None,
            1 => Some(self.domain[0].as_str()),
            _ => Some(self.domain[corpus_index].as_str()),
        }
    }

    fn metadata(&self) -> RunMetadata {
        let corpus_checksums = fs::read_to_string(self.checksums_path())
            .ok()
            .and_then(|text| serde_json::from_str(&text).ok())
            .unwrap_or_default();
        RunMetadata {
            model_id: self.model.clone(),
            temperature: self.temperature,
            top_p: self.top_p,
            tau: self.tau,
            lambda: self.lambda,
            seed: self.seed,
            corpus_checksums,
        }
    }
}

/// Dataset label for a corpus file: its file stem.
pub fn dataset_label(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "corpus".to_string())
}

/// Seed for one pair's generation, derived only from stable identifiers so
/// scheduling order can never influence sampling.
pub fn pair_seed(run_seed: u64, dataset: &str, story_id: &str, k: usize) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(run_seed.to_be_bytes());
    hasher.update([0]);
    hasher.update(dataset.as_bytes());
    hasher.update([0]);
    hasher.update(story_id.as_bytes());
    hasher.update([0]);
    hasher.update((k as u64).to_be_bytes());
    let digest = hasher.finalize();
    u64::from_be_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

fn sha256_file(path: &Path) -> Result<String, PipelineError> {
    let mut file = fs::File::open(path).map_err(io_err(path))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf).map_err(io_err(path))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

/// Which inference pass produced a persisted trace row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pass {
    Conditional,
    Unconditional,
}

/// One persisted token trace: the audit trail behind every record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub story_id: String,
    pub k: usize,
    pub role: Role,
    pub pass: Pass,
    pub tokens: Vec<String>,
    pub logprobs: Vec<f64>,
    pub imputed: Vec<bool>,
    pub truncated: bool,
    pub model: String,
    pub sampling: SamplingConfig,
    /// Generated passage text, present on the model-conditional row only, so
    /// the quality stage can rebuild the model passage without re-sampling.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

/// A pair that could not be processed; the run continues without it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairFailure {
    pub dataset: String,
    pub story_id: String,
    pub k: usize,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct IngestSummary {
    pub stories_loaded: usize,
    pub stories_filtered: usize,
    pub pairs_written: usize,
    pub datasets: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreSummary {
    pub scored: usize,
    /// Pairs skipped because their keys were already in the records file.
    pub resumed: usize,
    pub failed: Vec<PairFailure>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct QualityStageSummary {
    pub scored: usize,
    pub excluded: usize,
    pub resumed: usize,
    pub failed: Vec<PairFailure>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnalyzeSummary {
    pub records: usize,
    pub model_groups: usize,
    pub domain_groups: usize,
    pub excluded_degenerate: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorrelateSummary {
    pub analyses: usize,
    pub skipped: usize,
}

/// Load corpora, filter over-long stories, segment, and write the pair file.
/// Rerunning over the same inputs rewrites an identical file.
pub fn cmd_ingest(cfg: &RunConfig, backend: &dyn Backend) -> Result<IngestSummary, PipelineError> {
    cfg.validate()?;
    if cfg.corpus.is_empty() {
        return Err(PipelineError::Config("no corpus files given".into()));
    }
    fs::create_dir_all(&cfg.out).map_err(io_err(&cfg.out))?;

    let mut summary = IngestSummary::default();
    let mut checksums: BTreeMap<String, String> = BTreeMap::new();
    let mut pairs: Vec<SegmentPair> = Vec::new();
    for (i, path) in cfg.corpus.iter().enumerate() {
        let dataset = dataset_label(path);
        checksums.insert(dataset.clone(), sha256_file(path)?);
        let mut stories = corpus::load_corpus(path)?;
        if let Some(label) = cfg.domain_for(i) {
            for story in &mut stories {
                // story-level labels win; the flag only fills gaps
                if story.domain.is_none() {
                    story.domain = Some(label.to_string());
                }
            }
        }
        summary.stories_loaded += stories.len();
        let outcome = corpus::filter_by_length(stories, cfg.max_token_filter, backend)?;
        summary.stories_filtered += outcome.removed.len();
        for story in &outcome.retained {
            pairs.extend(corpus::build_pairs(story, &dataset, backend)?);
        }
        summary.datasets.push(dataset);
    }
    summary.pairs_written = pairs.len();
    jsonl::write_jsonl(&cfg.pairs_path(), &pairs)?;
    let checksum_text =
        serde_json::to_string_pretty(&checksums).expect("checksum map serializes");
    fs::write(cfg.checksums_path(), checksum_text + "\n").map_err(io_err(&cfg.checksums_path()))?;
    Ok(summary)
}

type ResumeKey = (String, String, usize, String);

fn resume_key(dataset: &str, story_id: &str, k: usize, model: &str) -> ResumeKey {
    (
        dataset.to_string(),
        story_id.to_string(),
        k,
        model.to_string(),
    )
}

fn trace_rows(pair: &SegmentPair, ev: &gap::EvaluatedPair, sampling: &SamplingConfig) -> [TraceRow; 4] {
    let row = |role: Role, pass: Pass, trace: &crate::backend::TokenTrace| TraceRow {
        story_id: pair.story_id.clone(),
        k: pair.k,
        role,
        pass,
        tokens: trace.tokens.clone(),
        logprobs: trace.logprobs.clone(),
        imputed: trace.imputed.clone(),
        truncated: role == Role::Model && ev.traces.truncated,
        model: ev.record.model_id.clone(),
        sampling: sampling.clone(),
        text: None,
    };
    let mut model_cond = row(Role::Model, Pass::Conditional, &ev.traces.model_cond);
    model_cond.text = Some(ev.traces.generated_text.clone());
    [
        row(Role::Human, Pass::Conditional, &ev.traces.human_cond),
        row(Role::Human, Pass::Unconditional, &ev.traces.human_uncond),
        model_cond,
        row(Role::Model, Pass::Unconditional, &ev.traces.model_uncond),
    ]
}

/// Score every pending pair with exactly four backend calls each, append the
/// records and traces in input order, and report per-pair failures without
/// aborting the run.
pub fn cmd_score(cfg: &RunConfig, backend: &dyn Backend) -> Result<ScoreSummary, PipelineError> {
    cfg.validate()?;
    let pairs: Vec<SegmentPair> = jsonl::read_jsonl(&cfg.pairs_path())?;
    if pairs.is_empty() {
        return Err(PipelineError::Config(format!(
            "{} holds no pairs; run ingest first",
            cfg.pairs_path().display()
        )));
    }

    let model = backend.model_id().to_string();
    let done: HashSet<ResumeKey> = if cfg.records_path().exists() {
        jsonl::read_jsonl::<PairedRecord>(&cfg.records_path())?
            .into_iter()
            .map(|r| resume_key(&r.dataset, &r.story_id, r.k, &r.model_id))
            .collect()
    } else {
        HashSet::new()
    };

    let pending: Vec<&SegmentPair> = pairs
        .iter()
        .filter(|p| !done.contains(&resume_key(&p.dataset, &p.story_id, p.k, &model)))
        .collect();
    let resumed = pairs.len() - pending.len();

    // map phase: workers pull indices; slot i belongs to pending[i], so the
    // output order is fixed before any thread runs
    let slots: Vec<Mutex<Option<Result<gap::EvaluatedPair, gap::EvalError>>>> =
        pending.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = cfg.parallelism.min(pending.len().max(1));
    thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= pending.len() {
                    break;
                }
                let pair = pending[i];
                let sampling = SamplingConfig {
                    temperature: cfg.temperature,
                    top_p: cfg.top_p,
                    seed: Some(pair_seed(cfg.seed, &pair.dataset, &pair.story_id, pair.k)),
                };
                let result = gap::evaluate_pair(pair, backend, &sampling, cfg.tau, cfg.lambda);
                *slots[i].lock().expect("slot lock") = Some(result);
            });
        }
    });

    let mut records = Vec::new();
    let mut traces = Vec::new();
    let mut failed = Vec::new();
    for (pair, slot) in pending.iter().zip(slots) {
        let result = slot.into_inner().expect("slot lock").expect("worker filled slot");
        match result {
            Ok(ev) => {
                let sampling = SamplingConfig {
                    temperature: cfg.temperature,
                    top_p: cfg.top_p,
                    seed: Some(pair_seed(cfg.seed, &pair.dataset, &pair.story_id, pair.k)),
                };
                traces.extend(trace_rows(pair, &ev, &sampling));
                records.push(ev.record);
            }
            Err(e) => failed.push(PairFailure {
                dataset: pair.dataset.clone(),
                story_id: pair.story_id.clone(),
                k: pair.k,
                error: e.to_string(),
            }),
        }
    }

    let scored = records.len();
    jsonl::append_jsonl(&cfg.records_path(), &records)?;
    jsonl::append_jsonl(&cfg.traces_path(), &traces)?;
    Ok(ScoreSummary {
        scored,
        resumed,
        failed,
    })
}

/// Score passage quality for both roles of every pair, resuming over an
/// existing scores file.
pub fn cmd_quality(
    cfg: &RunConfig,
    scorer: &dyn QualityScorer,
) -> Result<QualityStageSummary, PipelineError> {
    let pairs: Vec<SegmentPair> = jsonl::read_jsonl(&cfg.pairs_path())?;
    if pairs.is_empty() {
        return Err(PipelineError::Config(format!(
            "{} holds no pairs; run ingest first",
            cfg.pairs_path().display()
        )));
    }
    let traces: Vec<TraceRow> = jsonl::read_jsonl(&cfg.traces_path())?;
    let mut generated: BTreeMap<(String, usize), String> = BTreeMap::new();
    for row in traces {
        if row.role == Role::Model && row.pass == Pass::Conditional {
            if let Some(text) = row.text {
                generated.insert((row.story_id, row.k), text);
            }
        }
    }

    let done: HashSet<(String, usize, Role)> = if cfg.scores_path().exists() {
        jsonl::read_jsonl::<QualityScore>(&cfg.scores_path())?
            .into_iter()
            .map(|s| (s.story_id, s.k, s.role))
            .collect()
    } else {
        HashSet::new()
    };

    let mut summary = QualityStageSummary::default();
    let mut rows: Vec<QualityScore> = Vec::new();
    for pair in &pairs {
        let boundary = if pair.boundary.is_empty() {
            " "
        } else {
            pair.boundary.as_str()
        };
        let mut passages: Vec<(Role, String)> = Vec::new();
        passages.push((Role::Human, format!("{boundary}{}", pair.continuation)));
        if let Some(text) = generated.get(&(pair.story_id.clone(), pair.k)) {
            passages.push((Role::Model, format!("{boundary}{text}")));
        }
        for (role, continuation) in passages {
            if done.contains(&(pair.story_id.clone(), pair.k, role)) {
                summary.resumed += 1;
                continue;
            }
            match quality::score_quality(
                scorer,
                &pair.story_id,
                pair.k,
                role,
                &pair.context,
                &continuation,
            ) {
                Ok(score) => {
                    if score.excluded {
                        summary.excluded += 1;
                    } else {
                        summary.scored += 1;
                    }
                    rows.push(score);
                }
                Err(e) => summary.failed.push(PairFailure {
                    dataset: pair.dataset.clone(),
                    story_id: pair.story_id.clone(),
                    k: pair.k,
                    error: e.to_string(),
                }),
            }
        }
    }
    jsonl::append_jsonl(&cfg.scores_path(), &rows)?;
    Ok(summary)
}

fn merge_diagnostics(
    cfg: &RunConfig,
    update: impl FnOnce(&mut Diagnostics),
) -> Result<(), PipelineError> {
    let path = cfg.diagnostics_path();
    fs::create_dir_all(cfg.reports_dir()).map_err(io_err(&path))?;
    let mut file = report::load_diagnostics(&path)?.unwrap_or(DiagnosticsFile {
        metadata: cfg.metadata(),
        diagnostics: Diagnostics::default(),
    });
    file.metadata = cfg.metadata();
    update(&mut file.diagnostics);
    report::write_diagnostics(&path, &file)?;
    Ok(())
}

/// Aggregate records into the gap and domain tables and write the report
/// files.
pub fn cmd_analyze(cfg: &RunConfig) -> Result<AnalyzeSummary, PipelineError> {
    let records: Vec<PairedRecord> = jsonl::read_jsonl(&cfg.records_path())?;
    let meta = cfg.metadata();
    let reports = cfg.reports_dir();

    let mut main = aggregate_median(&records, GroupBy::MODEL_DATASET)?;
    bucketize(&mut main.summaries);
    report::write_gap_reports(&reports, &main.summaries, &meta)?;

    let mut domain_groups = 0;
    let mut domains: Vec<String> = records
        .iter()
        .filter_map(|r| r.domain.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    if !domains.is_empty() {
        let mut domain = aggregate_by_domain(&records, cfg.domain_aggregation)?;
        bucketize(&mut domain.summaries);
        let mut detail = aggregate_median(&records, GroupBy::MODEL_DOMAIN)?;
        bucketize(&mut detail.summaries);
        domain_groups = domain.summaries.len();
        report::write_domain_reports(&reports, &domain.summaries, &detail.summaries, &meta)?;
    } else {
        domains = Vec::new();
    }

    let mismatch_rate = if records.is_empty() {
        0.0
    } else {
        records.iter().filter(|r| r.length_mismatch).count() as f64 / records.len() as f64
    };
    merge_diagnostics(cfg, |d| {
        d.gap = Some(GapDiagnostics {
            records_total: records.len(),
            records_excluded_degenerate: main.excluded,
            mismatch_rate,
            domains,
        });
    })?;

    Ok(AnalyzeSummary {
        records: records.len(),
        model_groups: main.summaries.len(),
        domain_groups,
        excluded_degenerate: main.excluded,
    })
}

/// Join records with quality scores, correlate per group, and write the
/// quality report files. All-groups-skipped is an error, but the skip
/// diagnostics are written first so the reason is on disk.
pub fn cmd_correlate(cfg: &RunConfig) -> Result<CorrelateSummary, PipelineError> {
    let records: Vec<PairedRecord> = jsonl::read_jsonl(&cfg.records_path())?;
    let scores: Vec<QualityScore> = jsonl::read_jsonl(&cfg.scores_path())?;
    let opts = quality::CorrelationOptions {
        alpha: cfg.alpha,
        range_limit: cfg.range_limit,
        min_n: cfg.min_group,
    };
    let outcome = quality::correlate(&records, &scores, &opts);

    let excluded = scores.iter().filter(|s| s.excluded).count();
    merge_diagnostics(cfg, |d| {
        d.quality = Some(QualityDiagnostics {
            scores_total: scores.len(),
            scores_excluded: excluded,
            groups_analyzed: outcome.analyses.len(),
            groups_skipped: outcome.skipped.clone(),
        });
    })?;

    if outcome.analyses.is_empty() {
        return Err(PipelineError::NoAnalyzableGroups {
            skipped: outcome.skipped.len(),
        });
    }

    let skipped = outcome.skipped.len();
    let n_analyses = outcome.analyses.len();
    let quality_report = QualityReport::from_analyses(outcome.analyses, cfg.alpha);
    report::write_quality_reports(&cfg.reports_dir(), &quality_report, &cfg.metadata())?;
    Ok(CorrelateSummary {
        analyses: n_analyses,
        skipped,
    })
}
