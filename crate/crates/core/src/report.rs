//! Deterministic rendering of the result tables.
//!
//! Three report families: the main gap table (one row per model group), the
//! domain comparison (one row per domain, with a per-model detail and a
//! relative-PMI-increase companion), and the quality correlation tables
//! (roll-up, per-dataset detail, per-model matrix with significance stars,
//! shape distribution, and a full per-group CSV).
//!
//! Every emitted file opens with a metadata block naming the model, sampling
//! settings, thresholds, seed, and corpus checksums, so each number is
//! traceable to the run that produced it. Markdown shows two decimals for
//! human reading; CSV carries full double precision, so parsing a CSV back
//! reproduces the in-memory values bit-exactly. Nothing here reads the clock
//! or iterates a hash map, so identical inputs give byte-identical files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gap::{Buckets, GapSummary};
use crate::quality::{
    DatasetRollup, MetricRollup, QualityAnalysis, Role, ShapeCounts, SkippedGroup, UncMetric,
};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("report section {name:?} has no rows; refusing to write an empty table")]
    EmptySection { name: &'static str },
    #[error("unknown report format {name:?} (expected csv or md)")]
    UnknownFormat { name: String },
    #[error("cannot parse {what} from {path}: {reason}")]
    Parse {
        what: &'static str,
        path: String,
        reason: String,
    },
}

/// Output encoding for one table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Markdown,
}

impl FromStr for Format {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(Format::Csv),
            "md" | "markdown" => Ok(Format::Markdown),
            other => Err(ReportError::UnknownFormat {
                name: other.to_string(),
            }),
        }
    }
}

/// Provenance stamped into the header of every report file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub model_id: String,
    pub temperature: f64,
    pub top_p: f64,
    pub tau: f64,
    pub lambda: f64,
    pub seed: u64,
    /// Dataset label → SHA-256 of the corpus file it was loaded from.
    pub corpus_checksums: BTreeMap<String, String>,
}

impl RunMetadata {
    fn lines(&self) -> Vec<String> {
        let mut out = vec![
            format!("model: {}", self.model_id),
            format!("temperature: {}", self.temperature),
            format!("top_p: {}", self.top_p),
            format!("tau: {}", self.tau),
            format!("lambda: {}", self.lambda),
            format!("seed: {}", self.seed),
        ];
        for (dataset, digest) in &self.corpus_checksums {
            out.push(format!("corpus sha256 {dataset}: {digest}"));
        }
        out
    }

    /// `#`-prefixed block for CSV, HTML comment for Markdown.
    pub fn header(&self, format: Format) -> String {
        match format {
            Format::Csv => {
                let mut s = String::new();
                for line in self.lines() {
                    let _ = writeln!(s, "# {line}");
                }
                s
            }
            Format::Markdown => {
                let mut s = String::from("<!--\n");
                for line in self.lines() {
                    let _ = writeln!(s, "{line}");
                }
                s.push_str("-->\n\n");
                s
            }
        }
    }
}

/// Significance markers used in the per-model matrix.
pub fn stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

fn fmt2(v: f64) -> String {
    format!("{v:.2}")
}

/// Shortest representation that parses back to the same bits.
fn fmt_full(v: f64) -> String {
    format!("{v}")
}

fn opt_str(v: &Option<String>) -> String {
    v.clone().unwrap_or_default()
}

fn md_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "| {} |", headers.join(" | "));
    let _ = writeln!(s, "|{}", "---|".repeat(headers.len()));
    for row in rows {
        let _ = writeln!(s, "| {} |", row.join(" | "));
    }
    s
}

fn csv_table(headers: &[&str], rows: &[Vec<String>]) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(headers)?;
    for row in rows {
        w.write_record(row)?;
    }
    let bytes = w.into_inner().map_err(|e| ReportError::Parse {
        what: "csv buffer",
        path: "<memory>".into(),
        reason: e.to_string(),
    })?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

const GAP_COLUMNS: [&str; 14] = [
    "model",
    "dataset",
    "domain",
    "n_pairs",
    "n_excluded",
    "mismatch_rate",
    "nll_ratio",
    "ppl_ratio",
    "pmi_diff",
    "cpmi_diff",
    "nll_bucket",
    "ppl_bucket",
    "pmi_bucket",
    "cpmi_bucket",
];

fn gap_csv_row(s: &GapSummary) -> Vec<String> {
    let bucket = |f: fn(&Buckets) -> u8| {
        s.buckets.as_ref().map(|b| f(b).to_string()).unwrap_or_default()
    };
    vec![
        opt_str(&s.model_id),
        opt_str(&s.dataset),
        opt_str(&s.domain),
        s.n_pairs.to_string(),
        s.n_excluded.to_string(),
        fmt_full(s.mismatch_rate),
        fmt_full(s.nll_ratio),
        fmt_full(s.ppl_ratio),
        fmt_full(s.pmi_diff),
        fmt_full(s.cpmi_diff),
        bucket(|b| b.nll),
        bucket(|b| b.ppl),
        bucket(|b| b.pmi),
        bucket(|b| b.cpmi),
    ]
}

/// Markdown row for one summary. NLL and PPL columns hold human/model
/// ratios; PMI and CPMI columns hold human minus model differences. The PMI
/// cell is bolded when `bold_pmi` (used by the domain table to flag the
/// domain with the largest PMI gap).
fn gap_md_row(s: &GapSummary, bold_pmi: bool) -> Vec<String> {
    let pmi = if bold_pmi {
        format!("**{}**", fmt2(s.pmi_diff))
    } else {
        fmt2(s.pmi_diff)
    };
    let bucket = |f: fn(&Buckets) -> u8| {
        s.buckets.as_ref().map(|b| f(b).to_string()).unwrap_or_default()
    };
    vec![
        opt_str(&s.model_id),
        opt_str(&s.dataset),
        opt_str(&s.domain),
        s.n_pairs.to_string(),
        fmt2(s.nll_ratio),
        fmt2(s.ppl_ratio),
        pmi,
        fmt2(s.cpmi_diff),
        bucket(|b| b.nll),
        bucket(|b| b.ppl),
        bucket(|b| b.pmi),
        bucket(|b| b.cpmi),
    ]
}

const GAP_MD_HEADERS: [&str; 12] = [
    "Model",
    "Dataset",
    "Domain",
    "N",
    "NLL (ratio)",
    "PPL (ratio)",
    "PMI (diff)",
    "CPMI (diff)",
    "NLL q",
    "PPL q",
    "PMI q",
    "CPMI q",
];

/// Render the main gap table (one row per summary, ratio/difference column
/// semantics as in the published layout).
pub fn render_gap_table(summaries: &[GapSummary], format: Format) -> Result<String, ReportError> {
    if summaries.is_empty() {
        return Err(ReportError::EmptySection { name: "gap" });
    }
    match format {
        Format::Csv => csv_table(
            &GAP_COLUMNS,
            &summaries.iter().map(gap_csv_row).collect::<Vec<_>>(),
        ),
        Format::Markdown => Ok(md_table(
            &GAP_MD_HEADERS,
            &summaries
                .iter()
                .map(|s| gap_md_row(s, false))
                .collect::<Vec<_>>(),
        )),
    }
}

/// Render the domain comparison. Same columns as the gap table; in Markdown
/// the domain with the largest |PMI difference| gets its PMI cell bolded.
pub fn render_domain_table(
    summaries: &[GapSummary],
    format: Format,
) -> Result<String, ReportError> {
    if summaries.is_empty() {
        return Err(ReportError::EmptySection { name: "domain" });
    }
    match format {
        Format::Csv => csv_table(
            &GAP_COLUMNS,
            &summaries.iter().map(gap_csv_row).collect::<Vec<_>>(),
        ),
        Format::Markdown => {
            let flagged = summaries
                .iter()
                .enumerate()
                .max_by(|(_, a), (_, b)| a.pmi_diff.abs().total_cmp(&b.pmi_diff.abs()))
                .map(|(i, _)| i);
            Ok(md_table(
                &GAP_MD_HEADERS,
                &summaries
                    .iter()
                    .enumerate()
                    .map(|(i, s)| gap_md_row(s, Some(i) == flagged))
                    .collect::<Vec<_>>(),
            ))
        }
    }
}

/// One row of the relative-PMI-increase companion: how much larger (in
/// percent) a domain's |PMI difference| is than the baseline domain's.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PmiIncreaseRow {
    pub domain: String,
    pub baseline: String,
    pub pmi_diff: f64,
    pub baseline_pmi_diff: f64,
    pub increase_pct: f64,
}

/// Build the companion rows. The baseline is the domain with the smallest
/// |PMI difference|; every other domain gets one row. Needs at least two
/// domains and a nonzero baseline.
pub fn pmi_increase_rows(summaries: &[GapSummary]) -> Result<Vec<PmiIncreaseRow>, ReportError> {
    if summaries.len() < 2 {
        return Err(ReportError::EmptySection {
            name: "domain_pmi_increase",
        });
    }
    let baseline = summaries
        .iter()
        .min_by(|a, b| a.pmi_diff.abs().total_cmp(&b.pmi_diff.abs()))
        .expect("nonempty");
    let base_label = opt_str(&baseline.domain);
    let base_abs = baseline.pmi_diff.abs();
    if base_abs == 0.0 {
        return Err(ReportError::Parse {
            what: "pmi increase baseline",
            path: base_label,
            reason: "baseline |PMI difference| is zero".into(),
        });
    }
    Ok(summaries
        .iter()
        .filter(|s| !std::ptr::eq(*s, baseline))
        .map(|s| PmiIncreaseRow {
            domain: opt_str(&s.domain),
            baseline: base_label.clone(),
            pmi_diff: s.pmi_diff,
            baseline_pmi_diff: baseline.pmi_diff,
            increase_pct: 100.0 * (s.pmi_diff.abs() - base_abs) / base_abs,
        })
        .collect())
}

/// Render the companion table.
pub fn render_pmi_increase(
    rows: &[PmiIncreaseRow],
    format: Format,
) -> Result<String, ReportError> {
    if rows.is_empty() {
        return Err(ReportError::EmptySection {
            name: "domain_pmi_increase",
        });
    }
    let headers = [
        "domain",
        "baseline",
        "pmi_diff",
        "baseline_pmi_diff",
        "increase_pct",
    ];
    match format {
        Format::Csv => csv_table(
            &headers,
            &rows
                .iter()
                .map(|r| {
                    vec![
                        r.domain.clone(),
                        r.baseline.clone(),
                        fmt_full(r.pmi_diff),
                        fmt_full(r.baseline_pmi_diff),
                        fmt_full(r.increase_pct),
                    ]
                })
                .collect::<Vec<_>>(),
        ),
        Format::Markdown => Ok(md_table(
            &["Domain", "Baseline", "PMI (diff)", "Baseline PMI", "Increase %"],
            &rows
                .iter()
                .map(|r| {
                    vec![
                        r.domain.clone(),
                        r.baseline.clone(),
                        fmt2(r.pmi_diff),
                        fmt2(r.baseline_pmi_diff),
                        fmt2(r.increase_pct),
                    ]
                })
                .collect::<Vec<_>>(),
        )),
    }
}

/// Render the quality roll-up: one row per metric across all groups.
pub fn render_quality_rollup(
    rollups: &[MetricRollup],
    format: Format,
) -> Result<String, ReportError> {
    if rollups.is_empty() {
        return Err(ReportError::EmptySection {
            name: "quality_rollup",
        });
    }
    match format {
        Format::Csv => csv_table(
            &[
                "metric",
                "n_groups",
                "mean_rho",
                "std_rho",
                "pct_sig_expected",
                "pct_sweet_spot",
                "mean_z_star",
                "mean_delta_r2",
            ],
            &rollups
                .iter()
                .map(|r| {
                    vec![
                        r.metric.to_string(),
                        r.n_groups.to_string(),
                        fmt_full(r.mean_rho),
                        fmt_full(r.std_rho),
                        fmt_full(r.pct_sig_expected),
                        fmt_full(r.pct_sweet_spot),
                        r.mean_z_star.map(fmt_full).unwrap_or_default(),
                        fmt_full(r.mean_delta_r2),
                    ]
                })
                .collect::<Vec<_>>(),
        ),
        Format::Markdown => Ok(md_table(
            &[
                "Metric",
                "Groups",
                "Mean rho",
                "Sig. expected %",
                "SweetSpot %",
                "Mean z*",
                "Mean dR2",
            ],
            &rollups
                .iter()
                .map(|r| {
                    vec![
                        r.metric.to_string(),
                        r.n_groups.to_string(),
                        format!("{} ± {}", fmt2(r.mean_rho), fmt2(r.std_rho)),
                        fmt2(r.pct_sig_expected),
                        fmt2(r.pct_sweet_spot),
                        r.mean_z_star.map(fmt2).unwrap_or_default(),
                        fmt2(r.mean_delta_r2),
                    ]
                })
                .collect::<Vec<_>>(),
        )),
    }
}

/// Render the per-dataset detail: one row per dataset × metric.
pub fn render_quality_detail(
    rows: &[DatasetRollup],
    format: Format,
) -> Result<String, ReportError> {
    if rows.is_empty() {
        return Err(ReportError::EmptySection {
            name: "quality_detail",
        });
    }
    match format {
        Format::Csv => csv_table(
            &[
                "dataset",
                "metric",
                "n_groups",
                "mean_rho",
                "pct_sig_pos",
                "pct_sig_neg",
                "mean_beta1",
                "mean_beta2",
            ],
            &rows
                .iter()
                .map(|r| {
                    vec![
                        r.dataset.clone(),
                        r.metric.to_string(),
                        r.n_groups.to_string(),
                        fmt_full(r.mean_rho),
                        fmt_full(r.pct_sig_pos),
                        fmt_full(r.pct_sig_neg),
                        fmt_full(r.mean_beta1),
                        fmt_full(r.mean_beta2),
                    ]
                })
                .collect::<Vec<_>>(),
        ),
        Format::Markdown => Ok(md_table(
            &[
                "Dataset",
                "Metric",
                "Groups",
                "Mean rho",
                "Sig.+ %",
                "Sig.- %",
                "Mean b1",
                "Mean b2",
            ],
            &rows
                .iter()
                .map(|r| {
                    vec![
                        r.dataset.clone(),
                        r.metric.to_string(),
                        r.n_groups.to_string(),
                        fmt2(r.mean_rho),
                        fmt2(r.pct_sig_pos),
                        fmt2(r.pct_sig_neg),
                        fmt2(r.mean_beta1),
                        fmt2(r.mean_beta2),
                    ]
                })
                .collect::<Vec<_>>(),
        )),
    }
}

type MatrixKey = (String, String, Role);

fn per_model_matrix(
    analyses: &[QualityAnalysis],
) -> BTreeMap<MatrixKey, [Option<(f64, f64)>; 3]> {
    let mut matrix: BTreeMap<MatrixKey, [Option<(f64, f64)>; 3]> = BTreeMap::new();
    for a in analyses {
        let key = (
            a.key.model_id.clone(),
            a.key.dataset.clone(),
            a.key.role,
        );
        let slot = UncMetric::ALL
            .iter()
            .position(|m| *m == a.metric)
            .expect("metric is one of the three");
        matrix.entry(key).or_default()[slot] = Some((a.rho, a.p));
    }
    matrix
}

/// Render the per-model matrix: one row per (model, dataset, role), one
/// correlation column per metric, significance shown as star markers.
pub fn render_quality_per_model(
    analyses: &[QualityAnalysis],
    format: Format,
) -> Result<String, ReportError> {
    if analyses.is_empty() {
        return Err(ReportError::EmptySection {
            name: "quality_per_model",
        });
    }
    let matrix = per_model_matrix(analyses);
    match format {
        Format::Csv => {
            let headers = [
                "model",
                "dataset",
                "role",
                "rho_nll",
                "stars_nll",
                "rho_ppl",
                "stars_ppl",
                "rho_pmi",
                "stars_pmi",
            ];
            let rows = matrix
                .iter()
                .map(|((model, dataset, role), cells)| {
                    let mut row = vec![model.clone(), dataset.clone(), role.to_string()];
                    for cell in cells {
                        match cell {
                            Some((rho, p)) => {
                                row.push(fmt_full(*rho));
                                row.push(stars(*p).to_string());
                            }
                            None => {
                                row.push(String::new());
                                row.push(String::new());
                            }
                        }
                    }
                    row
                })
                .collect::<Vec<_>>();
            csv_table(&headers, &rows)
        }
        Format::Markdown => {
            let rows = matrix
                .iter()
                .map(|((model, dataset, role), cells)| {
                    let mut row = vec![model.clone(), dataset.clone(), role.to_string()];
                    for cell in cells {
                        row.push(match cell {
                            Some((rho, p)) => format!("{}{}", fmt2(*rho), stars(*p)),
                            None => String::new(),
                        });
                    }
                    row
                })
                .collect::<Vec<_>>();
            Ok(md_table(
                &["Model", "Dataset", "Role", "NLL", "PPL", "PMI"],
                &rows,
            ))
        }
    }
}

/// Render the shape distribution: one row per metric, one column per class,
/// plus the row total (which equals the metric's group count).
pub fn render_quality_shapes(
    shapes: &[ShapeCounts],
    format: Format,
) -> Result<String, ReportError> {
    if shapes.is_empty() {
        return Err(ReportError::EmptySection {
            name: "quality_shapes",
        });
    }
    let headers = [
        "metric",
        "sweet_spot",
        "diminishing",
        "u_shape",
        "linear",
        "flat_ns",
        "total",
    ];
    let rows = shapes
        .iter()
        .map(|s| {
            vec![
                s.metric.to_string(),
                s.sweet_spot.to_string(),
                s.diminishing.to_string(),
                s.u_shape.to_string(),
                s.linear.to_string(),
                s.flat_ns.to_string(),
                s.total().to_string(),
            ]
        })
        .collect::<Vec<_>>();
    match format {
        Format::Csv => csv_table(&headers, &rows),
        Format::Markdown => Ok(md_table(
            &["Metric", "SweetSpot", "Diminishing", "UShape", "Linear", "FlatNS", "Total"],
            &rows,
        )),
    }
}

/// Render the full per-group correlation dump (CSV only): one row per group
/// × metric with the correlation, the complete fit, and the shape class.
pub fn render_quality_groups(analyses: &[QualityAnalysis]) -> Result<String, ReportError> {
    if analyses.is_empty() {
        return Err(ReportError::EmptySection {
            name: "quality_groups",
        });
    }
    let headers = [
        "model", "dataset", "role", "metric", "n", "rho", "p", "beta0", "beta1", "beta2",
        "se1", "se2", "p1", "p2", "r2_lin", "r2_quad", "delta_r2", "z_star", "shape",
    ];
    let rows = analyses
        .iter()
        .map(|a| {
            vec![
                a.key.model_id.clone(),
                a.key.dataset.clone(),
                a.key.role.to_string(),
                a.metric.to_string(),
                a.n.to_string(),
                fmt_full(a.rho),
                fmt_full(a.p),
                fmt_full(a.fit.beta0),
                fmt_full(a.fit.beta1),
                fmt_full(a.fit.beta2),
                fmt_full(a.fit.se1),
                fmt_full(a.fit.se2),
                fmt_full(a.fit.p1),
                fmt_full(a.fit.p2),
                fmt_full(a.fit.r2_lin),
                fmt_full(a.fit.r2_quad),
                fmt_full(a.fit.delta_r2),
                a.fit.z_star.map(fmt_full).unwrap_or_default(),
                a.shape.to_string(),
            ]
        })
        .collect::<Vec<_>>();
    csv_table(&headers, &rows)
}

/// Write header plus table to a writer; the generic emit entry point.
pub fn emit_gap_table(
    summaries: &[GapSummary],
    meta: &RunMetadata,
    format: Format,
    out: &mut dyn Write,
) -> Result<(), ReportError> {
    out.write_all(meta.header(format).as_bytes())?;
    out.write_all(render_gap_table(summaries, format)?.as_bytes())?;
    Ok(())
}

/// Counters and skip lists surfaced alongside the tables.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gap: Option<GapDiagnostics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quality: Option<QualityDiagnostics>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GapDiagnostics {
    pub records_total: usize,
    /// Records dropped from ratio medians for a degenerate denominator.
    pub records_excluded_degenerate: usize,
    /// Fraction of records with a truncated or length-mismatched generation.
    pub mismatch_rate: f64,
    /// Domains present (drives whether the companion table exists).
    pub domains: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QualityDiagnostics {
    pub scores_total: usize,
    pub scores_excluded: usize,
    pub groups_analyzed: usize,
    pub groups_skipped: Vec<SkippedGroup>,
}

/// Diagnostics JSON, with the run metadata embedded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsFile {
    pub metadata: RunMetadata,
    #[serde(flatten)]
    pub diagnostics: Diagnostics,
}

/// Read an existing diagnostics file so a later stage can fill in its half.
pub fn load_diagnostics(path: &Path) -> Result<Option<DiagnosticsFile>, ReportError> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map(Some).map_err(|e| ReportError::Parse {
        what: "diagnostics",
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

pub fn write_diagnostics(path: &Path, file: &DiagnosticsFile) -> Result<(), ReportError> {
    let mut text = serde_json::to_string_pretty(file).expect("diagnostics serialize");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_file(path: &Path, meta: &RunMetadata, format: Format, table: String) -> Result<(), ReportError> {
    let mut content = meta.header(format);
    content.push_str(&table);
    fs::write(path, content)?;
    Ok(())
}

/// Write `gap.csv` and `gap.md` into `dir`.
pub fn write_gap_reports(
    dir: &Path,
    summaries: &[GapSummary],
    meta: &RunMetadata,
) -> Result<(), ReportError> {
    fs::create_dir_all(dir)?;
    write_file(&dir.join("gap.csv"), meta, Format::Csv, render_gap_table(summaries, Format::Csv)?)?;
    write_file(&dir.join("gap.md"), meta, Format::Markdown, render_gap_table(summaries, Format::Markdown)?)?;
    Ok(())
}

/// Write the domain family into `dir`: `domain.{csv,md}` for the main table,
/// `domain_detail.csv` for the per-model × domain detail, and
/// `domain_pmi_increase.csv` for the companion when at least two domains
/// exist. The Markdown file carries all sections.
pub fn write_domain_reports(
    dir: &Path,
    main: &[GapSummary],
    detail: &[GapSummary],
    meta: &RunMetadata,
) -> Result<(), ReportError> {
    fs::create_dir_all(dir)?;
    write_file(&dir.join("domain.csv"), meta, Format::Csv, render_domain_table(main, Format::Csv)?)?;

    let mut md = meta.header(Format::Markdown);
    md.push_str("## Domain gaps\n\n");
    md.push_str(&render_domain_table(main, Format::Markdown)?);

    let increase = if main.len() >= 2 {
        Some(pmi_increase_rows(main)?)
    } else {
        None
    };
    if let Some(rows) = &increase {
        md.push_str("\n## Relative PMI increase\n\n");
        md.push_str(&render_pmi_increase(rows, Format::Markdown)?);
        write_file(
            &dir.join("domain_pmi_increase.csv"),
            meta,
            Format::Csv,
            render_pmi_increase(rows, Format::Csv)?,
        )?;
    }

    if !detail.is_empty() {
        md.push_str("\n## Per-model detail\n\n");
        md.push_str(&render_domain_table(detail, Format::Markdown)?);
        write_file(
            &dir.join("domain_detail.csv"),
            meta,
            Format::Csv,
            render_domain_table(detail, Format::Csv)?,
        )?;
    }

    fs::write(dir.join("domain.md"), md)?;
    Ok(())
}

/// Everything the quality stage hands to the report writer.
#[derive(Clone, Debug, PartialEq)]
pub struct QualityReport {
    pub analyses: Vec<QualityAnalysis>,
    pub rollup: Vec<MetricRollup>,
    pub by_dataset: Vec<DatasetRollup>,
    pub shapes: Vec<ShapeCounts>,
}

impl QualityReport {
    /// Build all summary views from the per-group analyses.
    pub fn from_analyses(analyses: Vec<QualityAnalysis>, alpha: f64) -> Self {
        let rollup = crate::quality::rollup(&analyses, alpha);
        let by_dataset = crate::quality::dataset_rollup(&analyses, alpha);
        let shapes = crate::quality::shape_distribution(&analyses);
        QualityReport {
            analyses,
            rollup,
            by_dataset,
            shapes,
        }
    }
}

/// Write the quality family into `dir`:
/// `quality_{rollup,detail,per_model,shapes}.{csv,md}` plus the machine-only
/// `quality_groups.csv`.
pub fn write_quality_reports(
    dir: &Path,
    report: &QualityReport,
    meta: &RunMetadata,
) -> Result<(), ReportError> {
    fs::create_dir_all(dir)?;
    write_file(&dir.join("quality_rollup.csv"), meta, Format::Csv, render_quality_rollup(&report.rollup, Format::Csv)?)?;
    write_file(&dir.join("quality_rollup.md"), meta, Format::Markdown, render_quality_rollup(&report.rollup, Format::Markdown)?)?;
    write_file(&dir.join("quality_detail.csv"), meta, Format::Csv, render_quality_detail(&report.by_dataset, Format::Csv)?)?;
    write_file(&dir.join("quality_detail.md"), meta, Format::Markdown, render_quality_detail(&report.by_dataset, Format::Markdown)?)?;
    write_file(&dir.join("quality_per_model.csv"), meta, Format::Csv, render_quality_per_model(&report.analyses, Format::Csv)?)?;
    write_file(&dir.join("quality_per_model.md"), meta, Format::Markdown, render_quality_per_model(&report.analyses, Format::Markdown)?)?;
    write_file(&dir.join("quality_shapes.csv"), meta, Format::Csv, render_quality_shapes(&report.shapes, Format::Csv)?)?;
    write_file(&dir.join("quality_shapes.md"), meta, Format::Markdown, render_quality_shapes(&report.shapes, Format::Markdown)?)?;
    write_file(&dir.join("quality_groups.csv"), meta, Format::Csv, render_quality_groups(&report.analyses)?)?;
    Ok(())
}

/// Parse a gap/domain CSV back into summaries. Metadata lines are skipped;
/// full-precision columns reproduce the original values bit-exactly.
pub fn parse_gap_csv(text: &str) -> Result<Vec<GapSummary>, ReportError> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let index = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| ReportError::Parse {
                what: "gap csv",
                path: "<input>".into(),
                reason: format!("missing column {name}"),
            })
    };
    let cols: Vec<usize> = GAP_COLUMNS
        .iter()
        .map(|c| index(c))
        .collect::<Result<_, _>>()?;
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        let field = |i: usize| row.get(cols[i]).unwrap_or("");
        let opt = |i: usize| {
            let v = field(i);
            (!v.is_empty()).then(|| v.to_string())
        };
        let num = |i: usize| -> Result<f64, ReportError> {
            field(i).parse().map_err(|e| ReportError::Parse {
                what: "gap csv",
                path: "<input>".into(),
                reason: format!("bad number in {}: {e}", GAP_COLUMNS[i]),
            })
        };
        let count = |i: usize| -> Result<usize, ReportError> {
            field(i).parse().map_err(|e| ReportError::Parse {
                what: "gap csv",
                path: "<input>".into(),
                reason: format!("bad count in {}: {e}", GAP_COLUMNS[i]),
            })
        };
        let bucket = |i: usize| field(i).parse::<u8>().ok();
        let buckets = match (bucket(10), bucket(11), bucket(12), bucket(13)) {
            (Some(nll), Some(ppl), Some(pmi), Some(cpmi)) => {
                Some(Buckets { nll, ppl, pmi, cpmi })
            }
            _ => None,
        };
        out.push(GapSummary {
            model_id: opt(0),
            dataset: opt(1),
            domain: opt(2),
            n_pairs: count(3)?,
            n_excluded: count(4)?,
            mismatch_rate: num(5)?,
            nll_ratio: num(6)?,
            ppl_ratio: num(7)?,
            pmi_diff: num(8)?,
            cpmi_diff: num(9)?,
            buckets,
        });
    }
    Ok(out)
}

#[cfg(test)]
// round-trip fixtures spell out awkward floats digit for digit
#[allow(clippy::excessive_precision)]
mod tests {
    use super::*;
    use crate::gap::bucketize;
    use crate::quality::{QualityGroupKey, RegressionResult, ShapeClass};

    fn meta() -> RunMetadata {
        RunMetadata {
            model_id: "mock-categorical".into(),
            temperature: 1.0,
            top_p: 1.0,
            tau: 2.0,
            lambda: 1.0,
            seed: 7,
            corpus_checksums: BTreeMap::from([(
                "stories".to_string(),
                "abc123".to_string(),
            )]),
        }
    }

    fn summary(model: &str, dataset: &str, vals: [f64; 4]) -> GapSummary {
        GapSummary {
            model_id: Some(model.to_string()),
            dataset: Some(dataset.to_string()),
            domain: None,
            n_pairs: 40,
            n_excluded: 1,
            mismatch_rate: 0.125,
            nll_ratio: vals[0],
            ppl_ratio: vals[1],
            pmi_diff: vals[2],
            cpmi_diff: vals[3],
            buckets: None,
        }
    }

    fn domain_summary(domain: &str, pmi: f64) -> GapSummary {
        GapSummary {
            model_id: None,
            dataset: None,
            domain: Some(domain.to_string()),
            n_pairs: 100,
            n_excluded: 0,
            mismatch_rate: 0.0,
            nll_ratio: 2.0,
            ppl_ratio: 3.0,
            pmi_diff: pmi,
            cpmi_diff: 0.1,
            buckets: None,
        }
    }

    #[test]
    fn markdown_row_renders_published_fixture_values() {
        let rows = [summary("olmo-2-7b-base", "new-yorker", [2.18, 3.62, -1.70, 0.13])];
        let md = render_gap_table(&rows, Format::Markdown).unwrap();
        assert!(
            md.contains("| 2.18 | 3.62 | -1.70 | 0.13 |"),
            "unexpected rendering:\n{md}"
        );
        assert!(md.contains("NLL (ratio)") && md.contains("PMI (diff)"));
    }

    #[test]
    fn empty_sections_refuse_to_render() {
        assert!(matches!(
            render_gap_table(&[], Format::Csv),
            Err(ReportError::EmptySection { name: "gap" })
        ));
        assert!(matches!(
            render_quality_rollup(&[], Format::Csv),
            Err(ReportError::EmptySection { name: "quality_rollup" })
        ));
        assert!(matches!(
            render_quality_groups(&[]),
            Err(ReportError::EmptySection { name: "quality_groups" })
        ));
    }

    #[test]
    fn unknown_format_is_an_error() {
        assert!(matches!(
            "yaml".parse::<Format>(),
            Err(ReportError::UnknownFormat { .. })
        ));
        assert_eq!("csv".parse::<Format>().unwrap(), Format::Csv);
        assert_eq!("md".parse::<Format>().unwrap(), Format::Markdown);
    }

    #[test]
    fn gap_csv_round_trips_bit_exactly() {
        let mut rows = vec![
            summary("m1", "d1", [1.0 / 3.0, 0.1 + 0.2, -1.7000000000000002, 1e-17]),
            summary("m2", "d1", [2.03, 12.182493960703473, -2.1499999999999999, 0.13]),
            summary("m3", "d2", [1.5, 4.5, -0.5, 0.25]),
            summary("m4", "d2", [1.25, 3.75, -0.25, 0.5]),
            summary("m5", "d2", [1.125, 3.125, -0.125, 0.75]),
        ];
        bucketize(&mut rows);
        let text = format!(
            "{}{}",
            meta().header(Format::Csv),
            render_gap_table(&rows, Format::Csv).unwrap()
        );
        let parsed = parse_gap_csv(&text).unwrap();
        assert_eq!(parsed, rows);
    }

    #[test]
    fn csv_without_buckets_round_trips_none() {
        let rows = vec![summary("m1", "d1", [2.0, 4.0, -1.0, 0.0])];
        let text = render_gap_table(&rows, Format::Csv).unwrap();
        let parsed = parse_gap_csv(&text).unwrap();
        assert_eq!(parsed, rows);
        assert!(parsed[0].buckets.is_none());
    }

    #[test]
    fn star_thresholds_match_the_published_convention() {
        assert_eq!(stars(0.0005), "***");
        assert_eq!(stars(0.005), "**");
        assert_eq!(stars(0.04), "*");
        assert_eq!(stars(0.05), "");
        assert_eq!(stars(0.5), "");
    }

    #[test]
    fn domain_markdown_bolds_the_largest_pmi_gap() {
        let rows = vec![
            domain_summary("essays", -1.71),
            domain_summary("creative", -2.15),
            domain_summary("news", -1.20),
        ];
        let md = render_domain_table(&rows, Format::Markdown).unwrap();
        assert!(md.contains("**-2.15**"), "{md}");
        assert!(!md.contains("**-1.71**"));
        assert_eq!(md.matches("**").count(), 2);
    }

    #[test]
    fn pmi_increase_uses_smallest_gap_as_baseline() {
        let rows = vec![
            domain_summary("essays", -1.71),
            domain_summary("creative", -2.15),
        ];
        let inc = pmi_increase_rows(&rows).unwrap();
        assert_eq!(inc.len(), 1);
        assert_eq!(inc[0].domain, "creative");
        assert_eq!(inc[0].baseline, "essays");
        assert!((inc[0].increase_pct - 25.73099415204678).abs() < 1e-12);
    }

    #[test]
    fn equal_domains_give_a_zero_increase_row() {
        let rows = vec![
            domain_summary("a", -1.5),
            domain_summary("b", 1.5),
        ];
        let inc = pmi_increase_rows(&rows).unwrap();
        assert_eq!(inc.len(), 1);
        assert_eq!(inc[0].increase_pct, 0.0);
        let md = render_pmi_increase(&inc, Format::Markdown).unwrap();
        assert!(md.contains("| 0.00 |"), "{md}");
    }

    fn analysis(model: &str, metric: UncMetric, rho: f64, p: f64) -> QualityAnalysis {
        QualityAnalysis {
            key: QualityGroupKey {
                model_id: model.to_string(),
                dataset: "d1".to_string(),
                role: Role::Human,
            },
            metric,
            n: 25,
            rho,
            p,
            fit: RegressionResult {
                beta0: 0.5,
                beta1: 0.25,
                beta2: -0.125,
                se1: 0.1,
                se2: 0.05,
                p1: 0.02,
                p2: 0.01,
                r2_lin: 0.11,
                r2_quad: 0.31,
                delta_r2: 0.2,
                z_star: Some(1.0),
                n: 25,
                x_mean: 2.0,
                x_std: 0.5,
            },
            shape: ShapeClass::SweetSpot,
        }
    }

    #[test]
    fn per_model_matrix_attaches_stars_to_each_cell() {
        let analyses = vec![
            analysis("m1", UncMetric::Nll, 0.62, 0.0004),
            analysis("m1", UncMetric::Ppl, 0.55, 0.004),
            analysis("m1", UncMetric::Pmi, -0.48, 0.04),
            analysis("m2", UncMetric::Nll, 0.10, 0.6),
        ];
        let md = render_quality_per_model(&analyses, Format::Markdown).unwrap();
        assert!(md.contains("0.62***"), "{md}");
        assert!(md.contains("0.55**"));
        assert!(md.contains("-0.48*"));
        // m2 has NLL only; its PPL and PMI cells are empty
        assert!(md.contains("| m2 | d1 | human | 0.10 |  |  |"), "{md}");

        let csv = render_quality_per_model(&analyses, Format::Csv).unwrap();
        assert!(csv.contains("0.62,***"));
        assert!(csv.contains("m2,d1,human,0.1,,,,,"));
    }

    #[test]
    fn shapes_table_totals_each_row() {
        let shapes = vec![ShapeCounts {
            metric: UncMetric::Nll,
            sweet_spot: 3,
            diminishing: 1,
            u_shape: 0,
            linear: 2,
            flat_ns: 1,
        }];
        let csv = render_quality_shapes(&shapes, Format::Csv).unwrap();
        assert!(csv.contains("nll,3,1,0,2,1,7"), "{csv}");
    }

    #[test]
    fn rollup_markdown_combines_mean_and_spread() {
        let rollups = vec![MetricRollup {
            metric: UncMetric::Pmi,
            n_groups: 8,
            mean_rho: -0.31,
            std_rho: 0.12,
            pct_sig_expected: 75.0,
            pct_sweet_spot: 50.0,
            mean_z_star: Some(0.8),
            mean_delta_r2: 0.09,
        }];
        let md = render_quality_rollup(&rollups, Format::Markdown).unwrap();
        assert!(md.contains("-0.31 ± 0.12"), "{md}");
        let csv = render_quality_rollup(&rollups, Format::Csv).unwrap();
        assert!(csv.contains("pmi,8,-0.31,0.12,75,50,0.8,0.09"), "{csv}");
    }

    #[test]
    fn every_report_file_carries_the_metadata_header() {
        let dir = tempfile::tempdir().unwrap();
        let summaries = vec![summary("m1", "d1", [2.0, 4.0, -1.0, 0.1])];
        write_gap_reports(dir.path(), &summaries, &meta()).unwrap();
        let csv = fs::read_to_string(dir.path().join("gap.csv")).unwrap();
        assert!(csv.starts_with("# model: mock-categorical\n"), "{csv}");
        assert!(csv.contains("# seed: 7"));
        assert!(csv.contains("# corpus sha256 stories: abc123"));
        let md = fs::read_to_string(dir.path().join("gap.md")).unwrap();
        assert!(md.starts_with("<!--\nmodel: mock-categorical\n"), "{md}");
    }

    #[test]
    fn domain_directory_includes_companions_when_possible() {
        let dir = tempfile::tempdir().unwrap();
        let main = vec![
            domain_summary("essays", -1.71),
            domain_summary("creative", -2.15),
        ];
        let mut detail = vec![
            domain_summary("essays", -1.9),
            domain_summary("creative", -2.4),
        ];
        detail[0].model_id = Some("m1".into());
        detail[1].model_id = Some("m1".into());
        write_domain_reports(dir.path(), &main, &detail, &meta()).unwrap();
        let md = fs::read_to_string(dir.path().join("domain.md")).unwrap();
        assert!(md.contains("## Domain gaps"));
        assert!(md.contains("## Relative PMI increase"));
        assert!(md.contains("## Per-model detail"));
        assert!(dir.path().join("domain_pmi_increase.csv").exists());
        assert!(dir.path().join("domain_detail.csv").exists());

        // re-parse the detail CSV bit-exactly
        let text = fs::read_to_string(dir.path().join("domain_detail.csv")).unwrap();
        assert_eq!(parse_gap_csv(&text).unwrap(), detail);
    }

    #[test]
    fn single_domain_skips_the_increase_companion() {
        let dir = tempfile::tempdir().unwrap();
        let main = vec![domain_summary("only", -1.0)];
        write_domain_reports(dir.path(), &main, &[], &meta()).unwrap();
        assert!(!dir.path().join("domain_pmi_increase.csv").exists());
        assert!(!dir.path().join("domain_detail.csv").exists());
        let md = fs::read_to_string(dir.path().join("domain.md")).unwrap();
        assert!(!md.contains("Relative PMI increase"));
    }

    #[test]
    fn quality_directory_contains_all_five_files() {
        let dir = tempfile::tempdir().unwrap();
        let analyses = vec![
            analysis("m1", UncMetric::Nll, 0.6, 0.01),
            analysis("m1", UncMetric::Ppl, 0.5, 0.02),
            analysis("m1", UncMetric::Pmi, -0.4, 0.03),
        ];
        let report = QualityReport::from_analyses(analyses, 0.05);
        write_quality_reports(dir.path(), &report, &meta()).unwrap();
        for name in [
            "quality_rollup.csv",
            "quality_rollup.md",
            "quality_detail.csv",
            "quality_detail.md",
            "quality_per_model.csv",
            "quality_per_model.md",
            "quality_shapes.csv",
            "quality_shapes.md",
            "quality_groups.csv",
        ] {
            assert!(dir.path().join(name).exists(), "{name} missing");
        }
        let groups = fs::read_to_string(dir.path().join("quality_groups.csv")).unwrap();
        assert!(groups.contains("model,dataset,role,metric,n,rho,p,beta0"));
        assert!(groups.contains("sweet_spot"));
    }

    #[test]
    fn rendering_is_reproducible() {
        let rows = vec![
            domain_summary("essays", -1.71),
            domain_summary("creative", -2.15),
        ];
        let a = render_domain_table(&rows, Format::Markdown).unwrap();
        let b = render_domain_table(&rows, Format::Markdown).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn diagnostics_merge_across_stages() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("diagnostics.json");
        assert!(load_diagnostics(&path).unwrap().is_none());

        let mut file = DiagnosticsFile {
            metadata: meta(),
            diagnostics: Diagnostics::default(),
        };
        file.diagnostics.gap = Some(GapDiagnostics {
            records_total: 120,
            records_excluded_degenerate: 2,
            mismatch_rate: 0.05,
            domains: vec!["creative".into(), "essays".into()],
        });
        write_diagnostics(&path, &file).unwrap();

        let mut reread = load_diagnostics(&path).unwrap().unwrap();
        assert_eq!(reread.diagnostics.gap.as_ref().unwrap().records_total, 120);
        reread.diagnostics.quality = Some(QualityDiagnostics {
            scores_total: 80,
            scores_excluded: 5,
            groups_analyzed: 6,
            groups_skipped: vec![],
        });
        write_diagnostics(&path, &reread).unwrap();

        let final_file = load_diagnostics(&path).unwrap().unwrap();
        assert!(final_file.diagnostics.gap.is_some());
        assert_eq!(final_file.diagnostics.quality.as_ref().unwrap().scores_total, 80);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"metadata\""));
    }

    #[test]
    fn emit_gap_table_writes_header_then_table() {
        let mut buf = Vec::new();
        let rows = [summary("m1", "d1", [2.0, 4.0, -1.0, 0.1])];
        emit_gap_table(&rows, &meta(), Format::Csv, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# model:"));
        assert!(text.contains("model,dataset,domain,n_pairs"));
    }
}
