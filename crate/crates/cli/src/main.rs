//! Command-line front end for the uncertainty-gap pipeline.
//!
//! Five stages share one configuration: a flat TOML file named by
//! `--config`, with every key overridable by a flag. The effective
//! configuration is written into the output directory so a run documents
//! itself. Credentials never appear in it: the config holds environment
//! variable names, and keys are read from the environment at request time.
//!
//! Exit codes: 0 success, 1 finished with per-pair failures, 2 bad
//! configuration or unusable input.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use uncgap_core::gap::DomainAggregation;
use uncgap_core::pipeline::{self, PairFailure, RunConfig};

#[derive(Parser, Debug)]
#[command(
    name = "uncgap",
    version,
    about = "Measure the human-model uncertainty gap and its link to passage quality",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load corpora, drop over-long stories, and write segment pairs
    Ingest(StageArgs),
    /// Score every pair (four inference calls each) into records and traces
    Score(StageArgs),
    /// Score passage quality for human and generated continuations
    Quality(StageArgs),
    /// Aggregate records into the gap and domain report tables
    Analyze(StageArgs),
    /// Correlate uncertainty with quality per group and write those tables
    Correlate(StageArgs),
}

impl Command {
    fn args(&self) -> &StageArgs {
        match self {
            Command::Ingest(a)
            | Command::Score(a)
            | Command::Quality(a)
            | Command::Analyze(a)
            | Command::Correlate(a) => a,
        }
    }
}

#[derive(Args, Debug)]
struct StageArgs {
    /// Flat TOML run configuration; any flag below overrides its key
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Corpus file (repeatable); each file becomes a dataset named after
    /// its stem
    #[arg(long, value_name = "FILE")]
    corpus: Vec<PathBuf>,

    /// Domain label for stories that carry none (repeatable: one per
    /// corpus file, or a single label for all)
    #[arg(long, value_name = "LABEL")]
    domain: Vec<String>,

    /// Completion endpoint base URL
    #[arg(long, value_name = "URL")]
    backend_url: Option<String>,

    /// Model identifier sent to the backend and stamped on every record
    #[arg(long, value_name = "NAME")]
    model: Option<String>,

    /// Use the deterministic offline backend instead of HTTP
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    mock: Option<bool>,

    /// Environment variable holding the backend API key
    #[arg(long, value_name = "VAR")]
    api_key_env: Option<String>,

    /// Quality scoring endpoint; unset selects the offline scorer
    #[arg(long, value_name = "URL")]
    scorer_url: Option<String>,

    /// Environment variable holding the scorer API key
    #[arg(long, value_name = "VAR")]
    scorer_api_key_env: Option<String>,

    #[arg(long, value_name = "T")]
    temperature: Option<f64>,

    #[arg(long, value_name = "P")]
    top_p: Option<f64>,

    /// Temperature of the unconditional prior inside the calibrated score
    #[arg(long, value_name = "TAU")]
    tau: Option<f64>,

    /// Weight of the unconditional prior inside the calibrated score
    #[arg(long, value_name = "LAMBDA")]
    lambda: Option<f64>,

    /// Drop stories longer than this many tokens at ingest
    #[arg(long, value_name = "N")]
    max_token_filter: Option<usize>,

    /// Alternatives requested per token position
    #[arg(long, value_name = "K")]
    top_k: Option<usize>,

    /// Run seed; each pair derives its own generation seed from it
    #[arg(long, value_name = "SEED")]
    seed: Option<u64>,

    /// Worker threads for the scoring stage (output is identical at any
    /// setting)
    #[arg(long, value_name = "N")]
    parallelism: Option<usize>,

    /// Significance level for correlation and curvature tests
    #[arg(long, value_name = "ALPHA")]
    alpha: Option<f64>,

    /// How far outside the data (in standard deviations) a fitted peak may
    /// sit and still count as interior
    #[arg(long, value_name = "Z")]
    range_limit: Option<f64>,

    /// Minimum joined points for a group to be analyzed
    #[arg(long, value_name = "N")]
    min_group: Option<usize>,

    /// Domain aggregation: pooled, median_of_medians, or mean_of_medians
    #[arg(long, value_name = "MODE", value_parser = parse_aggregation)]
    domain_aggregation: Option<DomainAggregation>,

    /// Output directory for all artifacts and reports
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

fn parse_aggregation(s: &str) -> Result<DomainAggregation, String> {
    match s {
        "pooled" => Ok(DomainAggregation::Pooled),
        "median_of_medians" => Ok(DomainAggregation::MedianOfMedians),
        "mean_of_medians" => Ok(DomainAggregation::MeanOfMedians),
        other => Err(format!(
            "unknown aggregation {other:?} (expected pooled, median_of_medians, or mean_of_medians)"
        )),
    }
}

fn build_config(args: &StageArgs) -> Result<RunConfig> {
    let mut cfg: RunConfig = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("cannot read config {}", path.display()))?;
            toml::from_str(&text)
                .with_context(|| format!("invalid config {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if !args.corpus.is_empty() {
        cfg.corpus = args.corpus.clone();
    }
    if !args.domain.is_empty() {
        cfg.domain = args.domain.clone();
    }
    if let Some(v) = &args.backend_url {
        cfg.backend_url = v.clone();
    }
    if let Some(v) = &args.model {
        cfg.model = v.clone();
    }
    if let Some(v) = args.mock {
        cfg.mock = v;
    }
    if let Some(v) = &args.api_key_env {
        cfg.api_key_env = v.clone();
    }
    if let Some(v) = &args.scorer_url {
        cfg.scorer_url = v.clone();
    }
    if let Some(v) = &args.scorer_api_key_env {
        cfg.scorer_api_key_env = v.clone();
    }
    if let Some(v) = args.temperature {
        cfg.temperature = v;
    }
    if let Some(v) = args.top_p {
        cfg.top_p = v;
    }
    if let Some(v) = args.tau {
        cfg.tau = v;
    }
    if let Some(v) = args.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = args.max_token_filter {
        cfg.max_token_filter = v;
    }
    if let Some(v) = args.top_k {
        cfg.top_k = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.parallelism {
        cfg.parallelism = v;
    }
    if let Some(v) = args.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = args.range_limit {
        cfg.range_limit = v;
    }
    if let Some(v) = args.min_group {
        cfg.min_group = v;
    }
    if let Some(v) = args.domain_aggregation {
        cfg.domain_aggregation = v;
    }
    if let Some(v) = &args.out {
        cfg.out = v.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Record the configuration the stage actually ran with. Only environment
/// variable names appear here, never key values.
fn write_effective_config(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out)
        .with_context(|| format!("cannot create {}", cfg.out.display()))?;
    let text = toml::to_string_pretty(cfg).context("config serialization failed")?;
    let path = cfg.out.join("config.toml");
    fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn report_failures(stage: &str, failed: &[PairFailure]) -> ExitCode {
    if failed.is_empty() {
        return ExitCode::SUCCESS;
    }
    for f in failed {
        eprintln!("{stage}: {}/{} k={} failed: {}", f.dataset, f.story_id, f.k, f.error);
    }
    eprintln!("{stage}: {} pair(s) failed; rerun to retry just those", failed.len());
    ExitCode::from(1)
}

fn run(cli: &Cli) -> Result<ExitCode> {
    let cfg = build_config(cli.command.args())?;
    write_effective_config(&cfg)?;
    match &cli.command {
        Command::Ingest(_) => {
            let backend = cfg.backend()?;
            let s = pipeline::cmd_ingest(&cfg, backend.as_ref())?;
            println!(
                "ingested {} stories ({} over the length limit), wrote {} pairs from {} dataset(s)",
                s.stories_loaded,
                s.stories_filtered,
                s.pairs_written,
                s.datasets.len()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Score(_) => {
            let backend = cfg.backend()?;
            let s = pipeline::cmd_score(&cfg, backend.as_ref())?;
            println!(
                "scored {} pairs ({} already done, {} failed)",
                s.scored,
                s.resumed,
                s.failed.len()
            );
            Ok(report_failures("score", &s.failed))
        }
        Command::Quality(_) => {
            let scorer = cfg.scorer()?;
            let s = pipeline::cmd_quality(&cfg, scorer.as_ref())?;
            println!(
                "quality-scored {} passages ({} excluded by length, {} already done, {} failed)",
                s.scored,
                s.excluded,
                s.resumed,
                s.failed.len()
            );
            Ok(report_failures("quality", &s.failed))
        }
        Command::Analyze(_) => {
            let s = pipeline::cmd_analyze(&cfg)?;
            println!(
                "analyzed {} records into {} model/dataset group(s) and {} domain group(s) ({} excluded)",
                s.records, s.model_groups, s.domain_groups, s.excluded_degenerate
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Correlate(_) => {
            let s = pipeline::cmd_correlate(&cfg)?;
            println!(
                "correlated {} group-metric series ({} skipped; see reports/diagnostics.json)",
                s.analyses, s.skipped
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}
