//! Pairing human continuations with length-matched generations and turning
//! the two metric sets into gap values and grouped medians.
//!
//! For each segment pair the same backend scores (1) the human continuation
//! given its context, (2) the human continuation alone, and re-scores
//! (4) a sampled continuation alone; the sampling pass (3) itself provides
//! the model-side conditional trace. That is exactly four backend calls per
//! pair. Ratios (human / model) summarize NLL and PPL; differences
//! (human - model) summarize PMI and CPMI, because PMI is already a
//! log-ratio and its sign carries meaning.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

use crate::backend::{Backend, BackendError, SamplingConfig, TokenTrace};
use crate::corpus::SegmentPair;
use crate::metrics::{metric_set, MetricSet, MetricsError};
use crate::stats;

#[derive(Debug, Error)]
pub enum GapError {
    #[error(
        "degenerate denominator for pair {story_id} k={k}: model {metric} is {value}, \
         ratio undefined"
    )]
    DegenerateDenominator { story_id: String, k: usize, metric: &'static str, value: f64 },
    #[error("no records to aggregate")]
    Empty,
    #[error("functional-domain PMI gap magnitude is zero; relative increase undefined")]
    ZeroBaseline,
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("pair {story_id} k={k}: {source}")]
    Backend {
        story_id: String,
        k: usize,
        #[source]
        source: BackendError,
    },
    #[error("pair {story_id} k={k}: {source}")]
    Metrics {
        story_id: String,
        k: usize,
        #[source]
        source: MetricsError,
    },
    #[error("pair {story_id} k={k}: generation stopped before producing any token")]
    EmptyGeneration { story_id: String, k: usize },
}

/// Human and model metric sets for one segment pair under one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "RecordRow", from = "RecordRow")]
pub struct PairedRecord {
    pub story_id: String,
    pub k: usize,
    pub dataset: String,
    pub domain: Option<String>,
    pub model_id: String,
    pub human: MetricSet,
    pub model: MetricSet,
    /// True when the generation came back shorter than requested.
    pub length_mismatch: bool,
}

/// Flat JSONL layout for [`PairedRecord`].
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RecordRow {
    story_id: String,
    k: usize,
    dataset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    domain: Option<String>,
    model_id: String,
    length_mismatch: bool,
    human_nll: f64,
    human_ppl: f64,
    human_pmi: f64,
    human_cpmi: f64,
    human_n_tokens: usize,
    model_nll: f64,
    model_ppl: f64,
    model_pmi: f64,
    model_cpmi: f64,
    model_n_tokens: usize,
}

impl From<PairedRecord> for RecordRow {
    fn from(r: PairedRecord) -> Self {
        RecordRow {
            story_id: r.story_id,
            k: r.k,
            dataset: r.dataset,
            domain: r.domain,
            model_id: r.model_id,
            length_mismatch: r.length_mismatch,
            human_nll: r.human.nll,
            human_ppl: r.human.ppl,
            human_pmi: r.human.pmi,
            human_cpmi: r.human.cpmi,
            human_n_tokens: r.human.n_tokens,
            model_nll: r.model.nll,
            model_ppl: r.model.ppl,
            model_pmi: r.model.pmi,
            model_cpmi: r.model.cpmi,
            model_n_tokens: r.model.n_tokens,
        }
    }
}

impl From<RecordRow> for PairedRecord {
    fn from(r: RecordRow) -> Self {
        PairedRecord {
            story_id: r.story_id,
            k: r.k,
            dataset: r.dataset,
            domain: r.domain,
            model_id: r.model_id,
            length_mismatch: r.length_mismatch,
            human: MetricSet {
                nll: r.human_nll,
                ppl: r.human_ppl,
                pmi: r.human_pmi,
                cpmi: r.human_cpmi,
                n_tokens: r.human_n_tokens,
            },
            model: MetricSet {
                nll: r.model_nll,
                ppl: r.model_ppl,
                pmi: r.model_pmi,
                cpmi: r.model_cpmi,
                n_tokens: r.model_n_tokens,
            },
        }
    }
}

/// Gap values for one record: how much harder the human continuation was.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapValues {
    /// human NLL / model NLL; > 1 means the human text was less predictable.
    pub nll_ratio: f64,
    /// human PPL / model PPL.
    pub ppl_ratio: f64,
    /// human PMI - model PMI; negative means context helped the human text less.
    pub pmi_diff: f64,
    /// human CPMI - model CPMI.
    pub cpmi_diff: f64,
}

/// Forms the per-record gap values, rejecting degenerate denominators.
pub fn gap_values(record: &PairedRecord) -> Result<GapValues, GapError> {
    if record.model.nll == 0.0 {
        return Err(GapError::DegenerateDenominator {
            story_id: record.story_id.clone(),
            k: record.k,
            metric: "nll",
            value: record.model.nll,
        });
    }
    Ok(GapValues {
        nll_ratio: record.human.nll / record.model.nll,
        ppl_ratio: record.human.ppl / record.model.ppl,
        pmi_diff: record.human.pmi - record.model.pmi,
        cpmi_diff: record.human.cpmi - record.model.cpmi,
    })
}

/// Which key components define a group during aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupBy {
    pub model: bool,
    pub dataset: bool,
    pub domain: bool,
}

impl GroupBy {
    /// Main results layout: one row per model per dataset.
    pub const MODEL_DATASET: GroupBy = GroupBy { model: true, dataset: true, domain: false };
    /// Domain table layout: one row per domain across models.
    pub const DOMAIN: GroupBy = GroupBy { model: false, dataset: false, domain: true };
    /// Per-model domain detail.
    pub const MODEL_DOMAIN: GroupBy = GroupBy { model: true, dataset: false, domain: true };
    /// Fully keyed.
    pub const ALL: GroupBy = GroupBy { model: true, dataset: true, domain: true };
}

/// Median gap values for one group of records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapSummary {
    pub model_id: Option<String>,
    pub dataset: Option<String>,
    pub domain: Option<String>,
    /// Records whose gap values entered the medians.
    pub n_pairs: usize,
    /// Records dropped for degenerate denominators.
    pub n_excluded: usize,
    /// Fraction of records (including excluded ones) with a truncated or
    /// length-mismatched generation.
    pub mismatch_rate: f64,
    pub nll_ratio: f64,
    pub ppl_ratio: f64,
    pub pmi_diff: f64,
    pub cpmi_diff: f64,
    /// Report-relative quintile per metric, filled in by [`bucketize`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub buckets: Option<Buckets>,
}

/// 1 (smallest gap magnitude) through 5 (largest), per metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Buckets {
    pub nll: u8,
    pub ppl: u8,
    pub pmi: u8,
    pub cpmi: u8,
}

/// How a domain-level summary combines records from many models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainAggregation {
    /// One median over every pair in the domain, regardless of model.
    Pooled,
    /// Median of the per-(model, dataset) medians.
    MedianOfMedians,
    /// Mean of the per-(model, dataset) medians. This matches the arithmetic
    /// behind the published domain-level averages, so it is the default.
    MeanOfMedians,
}

#[derive(Debug, Clone)]
pub struct AggregateOutcome {
    pub summaries: Vec<GapSummary>,
    /// Total records dropped for degenerate denominators.
    pub excluded: usize,
}

type Key = (Option<String>, Option<String>, Option<String>);

fn key_of(r: &PairedRecord, by: GroupBy) -> Key {
    (
        by.model.then(|| r.model_id.clone()),
        by.dataset.then(|| r.dataset.clone()),
        // Records without a domain still need a bucket when grouping by it.
        if by.domain { Some(r.domain.clone().unwrap_or_default()) } else { None },
    )
}

/// Median gap values per group. Groups are emitted in lexicographic key
/// order, so output order is independent of input order.
pub fn aggregate_median(records: &[PairedRecord], by: GroupBy) -> Result<AggregateOutcome, GapError> {
    if records.is_empty() {
        return Err(GapError::Empty);
    }
    let mut groups: BTreeMap<Key, Vec<&PairedRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(key_of(r, by)).or_default().push(r);
    }
    let mut summaries = Vec::with_capacity(groups.len());
    let mut excluded_total = 0;
    for ((model_id, dataset, domain), members) in groups {
        let mut nll = Vec::new();
        let mut ppl = Vec::new();
        let mut pmi = Vec::new();
        let mut cpmi = Vec::new();
        let mut excluded = 0usize;
        let mut mismatches = 0usize;
        for r in &members {
            if r.length_mismatch {
                mismatches += 1;
            }
            match gap_values(r) {
                Ok(v) => {
                    nll.push(v.nll_ratio);
                    ppl.push(v.ppl_ratio);
                    pmi.push(v.pmi_diff);
                    cpmi.push(v.cpmi_diff);
                }
                Err(_) => excluded += 1,
            }
        }
        excluded_total += excluded;
        if nll.is_empty() {
            // Every record in the group was degenerate; nothing to summarize.
            continue;
        }
        summaries.push(GapSummary {
            model_id,
            dataset,
            domain,
            n_pairs: nll.len(),
            n_excluded: excluded,
            mismatch_rate: mismatches as f64 / members.len() as f64,
            nll_ratio: stats::median(&nll),
            ppl_ratio: stats::median(&ppl),
            pmi_diff: stats::median(&pmi),
            cpmi_diff: stats::median(&cpmi),
            buckets: None,
        });
    }
    Ok(AggregateOutcome { summaries, excluded: excluded_total })
}

/// Domain-level summaries across models, with a configurable combination of
/// the per-(model, dataset, domain) medians.
pub fn aggregate_by_domain(
    records: &[PairedRecord],
    mode: DomainAggregation,
) -> Result<AggregateOutcome, GapError> {
    if let DomainAggregation::Pooled = mode {
        return aggregate_median(records, GroupBy::DOMAIN);
    }
    let inner = aggregate_median(records, GroupBy::ALL)?;
    let combine = |vals: &[f64]| match mode {
        DomainAggregation::Pooled => unreachable!(),
        DomainAggregation::MedianOfMedians => stats::median(vals),
        DomainAggregation::MeanOfMedians => stats::mean(vals),
    };
    let mut groups: BTreeMap<Option<String>, Vec<&GapSummary>> = BTreeMap::new();
    for s in &inner.summaries {
        groups.entry(s.domain.clone()).or_default().push(s);
    }
    let mut summaries = Vec::with_capacity(groups.len());
    for (domain, members) in groups {
        let take = |f: fn(&GapSummary) -> f64| -> Vec<f64> { members.iter().map(|s| f(s)).collect() };
        let n_pairs: usize = members.iter().map(|s| s.n_pairs).sum();
        let n_excluded: usize = members.iter().map(|s| s.n_excluded).sum();
        let weight: usize = members.iter().map(|s| s.n_pairs + s.n_excluded).sum();
        let mismatch_rate = members
            .iter()
            .map(|s| s.mismatch_rate * (s.n_pairs + s.n_excluded) as f64)
            .sum::<f64>()
            / weight as f64;
        summaries.push(GapSummary {
            model_id: None,
            dataset: None,
            domain,
            n_pairs,
            n_excluded,
            mismatch_rate,
            nll_ratio: combine(&take(|s| s.nll_ratio)),
            ppl_ratio: combine(&take(|s| s.ppl_ratio)),
            pmi_diff: combine(&take(|s| s.pmi_diff)),
            cpmi_diff: combine(&take(|s| s.cpmi_diff)),
            buckets: None,
        });
    }
    Ok(AggregateOutcome { summaries, excluded: inner.excluded })
}

/// Percent increase in PMI gap magnitude of a creative-domain summary over a
/// functional-domain baseline: `100 * (|c| - |f|) / |f|`.
pub fn relative_pmi_increase(creative: &GapSummary, functional: &GapSummary) -> Result<f64, GapError> {
    let c = creative.pmi_diff.abs();
    let f = functional.pmi_diff.abs();
    if f == 0.0 {
        return Err(GapError::ZeroBaseline);
    }
    Ok(100.0 * (c - f) / f)
}

/// Assigns report-relative quintile buckets (1 = smallest gap magnitude,
/// 5 = largest) to every summary, per metric. Ties share a bucket. For the
/// two ratio metrics a larger value is a larger gap; for the two difference
/// metrics a more negative value is a larger gap.
pub fn bucketize(summaries: &mut [GapSummary]) {
    if summaries.is_empty() {
        return;
    }
    let magnitudes: [Vec<f64>; 4] = [
        summaries.iter().map(|s| s.nll_ratio).collect(),
        summaries.iter().map(|s| s.ppl_ratio).collect(),
        summaries.iter().map(|s| -s.pmi_diff).collect(),
        summaries.iter().map(|s| -s.cpmi_diff).collect(),
    ];
    let n = summaries.len();
    let mut assigned = vec![[0u8; 4]; n];
    for (m, values) in magnitudes.iter().enumerate() {
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        for (i, v) in values.iter().enumerate() {
            // Rank of the first element equal to v, so ties share buckets.
            let rank = sorted.partition_point(|x| x < v);
            assigned[i][m] = (rank * 5 / n) as u8 + 1;
        }
    }
    for (s, b) in summaries.iter_mut().zip(assigned) {
        s.buckets = Some(Buckets { nll: b[0], ppl: b[1], pmi: b[2], cpmi: b[3] });
    }
}

/// The four token traces behind one record, for persistence.
#[derive(Debug, Clone)]
pub struct PairTraces {
    pub human_cond: TokenTrace,
    pub human_uncond: TokenTrace,
    pub model_cond: TokenTrace,
    pub model_uncond: TokenTrace,
    pub generated_text: String,
    pub truncated: bool,
}

/// A scored pair: the flattened record plus its raw traces.
#[derive(Debug, Clone)]
pub struct EvaluatedPair {
    pub record: PairedRecord,
    pub traces: PairTraces,
}

/// Scores one segment pair end to end with exactly four backend calls:
/// conditional and unconditional passes over the human continuation, one
/// generation of matching token length, and an unconditional pass over the
/// generated text. The generation's own sampling logprobs serve as the
/// model-side conditional trace.
pub fn evaluate_pair(
    pair: &SegmentPair,
    backend: &dyn Backend,
    sampling: &SamplingConfig,
    tau: f64,
    lambda: f64,
) -> Result<EvaluatedPair, EvalError> {
    let at_backend = |source: BackendError| EvalError::Backend {
        story_id: pair.story_id.clone(),
        k: pair.k,
        source,
    };
    let at_metrics = |source: MetricsError| EvalError::Metrics {
        story_id: pair.story_id.clone(),
        k: pair.k,
        source,
    };

    // The continuation keeps its original boundary whitespace in front so
    // subword tokenizers see it exactly as it appeared in the story.
    let boundary = if pair.boundary.is_empty() { " " } else { pair.boundary.as_str() };
    let continuation = format!("{boundary}{}", pair.continuation);

    let human_cond =
        backend.score_conditional(&pair.context, &continuation).map_err(at_backend)?;
    let human_uncond = backend.score_unconditional(&continuation).map_err(at_backend)?;
    let n = human_cond.len();

    let generation = backend.generate(&pair.context, n, sampling).map_err(at_backend)?;
    if generation.trace.is_empty() {
        return Err(EvalError::EmptyGeneration { story_id: pair.story_id.clone(), k: pair.k });
    }
    let model_uncond = backend.score_unconditional(&generation.text).map_err(at_backend)?;

    let human = metric_set(&human_cond, &human_uncond, tau, lambda).map_err(at_metrics)?;
    let model = metric_set(&generation.trace, &model_uncond, tau, lambda).map_err(at_metrics)?;
    let length_mismatch = generation.truncated || generation.trace.len() != n;

    Ok(EvaluatedPair {
        record: PairedRecord {
            story_id: pair.story_id.clone(),
            k: pair.k,
            dataset: pair.dataset.clone(),
            domain: pair.domain.clone(),
            model_id: backend.model_id().to_string(),
            human,
            model,
            length_mismatch,
        },
        traces: PairTraces {
            human_cond,
            human_uncond,
            model_cond: generation.trace,
            model_uncond,
            generated_text: generation.text,
            truncated: generation.truncated,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::mock::MockBackend;

    fn record(
        model_id: &str,
        dataset: &str,
        domain: Option<&str>,
        human_nll: f64,
        model_nll: f64,
        pmi_pair: (f64, f64),
    ) -> PairedRecord {
        let mk = |nll: f64, pmi: f64| MetricSet {
            nll,
            ppl: nll.exp(),
            pmi,
            cpmi: 0.0,
            n_tokens: 10,
        };
        PairedRecord {
            story_id: format!("s-{}", rand_suffix()),
            k: 2,
            dataset: dataset.into(),
            domain: domain.map(Into::into),
            model_id: model_id.into(),
            human: mk(human_nll, pmi_pair.0),
            model: mk(model_nll, pmi_pair.1),
            length_mismatch: false,
        }
    }

    fn rand_suffix() -> u64 {
        use std::sync::atomic::{AtomicU64, Ordering};
        static NEXT: AtomicU64 = AtomicU64::new(0);
        NEXT.fetch_add(1, Ordering::Relaxed)
    }

    #[test]
    fn gap_values_are_ratios_and_differences() {
        let r = record("m", "d", None, 3.0, 1.5, (0.5, 0.9));
        let v = gap_values(&r).unwrap();
        assert_eq!(v.nll_ratio, 2.0);
        assert!((v.ppl_ratio - (3.0f64.exp() / 1.5f64.exp())).abs() < 1e-12);
        assert!((v.pmi_diff - -0.4).abs() < 1e-12);
        assert_eq!(v.cpmi_diff, 0.0);
    }

    #[test]
    fn zero_model_nll_is_rejected_by_name() {
        let r = record("m", "d", None, 3.0, 0.0, (0.0, 0.0));
        let err = gap_values(&r).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(&r.story_id), "got: {msg}");
        assert!(msg.contains("k=2"), "got: {msg}");
    }

    #[test]
    fn record_roundtrips_through_flat_json() {
        let r = record("m1", "set", Some("news"), 2.5, 1.25, (0.3, 0.7));
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"human_nll\":2.5"), "got: {json}");
        assert!(json.contains("\"model_n_tokens\":10"), "got: {json}");
        let back: PairedRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn median_uses_midpoint_for_even_groups() {
        let rs: Vec<PairedRecord> = [1.0, 2.0, 3.0, 4.0]
            .iter()
            .map(|&h| record("m", "d", None, h, 1.0, (0.0, 0.0)))
            .collect();
        let out = aggregate_median(&rs, GroupBy::MODEL_DATASET).unwrap();
        assert_eq!(out.summaries.len(), 1);
        assert_eq!(out.summaries[0].nll_ratio, 2.5);
        assert_eq!(out.summaries[0].n_pairs, 4);
    }

    #[test]
    fn aggregation_is_permutation_invariant() {
        let mut rs: Vec<PairedRecord> = vec![
            record("m2", "d", Some("news"), 2.0, 1.0, (0.1, 0.2)),
            record("m1", "d", Some("essays"), 3.0, 1.0, (0.5, 0.1)),
            record("m1", "d", Some("news"), 1.0, 2.0, (0.0, 0.4)),
            record("m2", "d", Some("essays"), 5.0, 4.0, (0.2, 0.2)),
        ];
        let a = aggregate_median(&rs, GroupBy::ALL).unwrap();
        rs.reverse();
        let b = aggregate_median(&rs, GroupBy::ALL).unwrap();
        assert_eq!(a.summaries, b.summaries);
        // Keys come out sorted.
        let keys: Vec<_> = a
            .summaries
            .iter()
            .map(|s| (s.model_id.clone(), s.domain.clone()))
            .collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn degenerate_records_are_excluded_and_counted() {
        let rs = vec![
            record("m", "d", None, 2.0, 1.0, (0.0, 0.0)),
            record("m", "d", None, 2.0, 0.0, (0.0, 0.0)),
            record("m", "d", None, 4.0, 1.0, (0.0, 0.0)),
        ];
        let out = aggregate_median(&rs, GroupBy::MODEL_DATASET).unwrap();
        assert_eq!(out.excluded, 1);
        assert_eq!(out.summaries[0].n_pairs, 2);
        assert_eq!(out.summaries[0].n_excluded, 1);
        assert_eq!(out.summaries[0].nll_ratio, 3.0);
    }

    #[test]
    fn mismatch_rate_counts_flagged_records() {
        let mut r1 = record("m", "d", None, 2.0, 1.0, (0.0, 0.0));
        r1.length_mismatch = true;
        let r2 = record("m", "d", None, 2.0, 1.0, (0.0, 0.0));
        let out = aggregate_median(&[r1, r2], GroupBy::MODEL_DATASET).unwrap();
        assert_eq!(out.summaries[0].mismatch_rate, 0.5);
    }

    #[test]
    fn domain_aggregation_modes_differ_as_expected() {
        // Three models, one domain. Per-model medians of nll_ratio: 2, 3, 10.
        let mut rs = Vec::new();
        for (m, h) in [("m1", 2.0), ("m2", 3.0), ("m3", 10.0)] {
            rs.push(record(m, "d", Some("creative"), h, 1.0, (0.0, 0.0)));
        }
        let pooled = aggregate_by_domain(&rs, DomainAggregation::Pooled).unwrap();
        let med = aggregate_by_domain(&rs, DomainAggregation::MedianOfMedians).unwrap();
        let mean = aggregate_by_domain(&rs, DomainAggregation::MeanOfMedians).unwrap();
        assert_eq!(pooled.summaries[0].nll_ratio, 3.0);
        assert_eq!(med.summaries[0].nll_ratio, 3.0);
        assert_eq!(mean.summaries[0].nll_ratio, 5.0);
        assert_eq!(mean.summaries[0].n_pairs, 3);
    }

    #[test]
    fn relative_pmi_increase_matches_hand_arithmetic() {
        let mk = |pmi: f64| GapSummary {
            model_id: None,
            dataset: None,
            domain: None,
            n_pairs: 1,
            n_excluded: 0,
            mismatch_rate: 0.0,
            nll_ratio: 1.0,
            ppl_ratio: 1.0,
            pmi_diff: pmi,
            cpmi_diff: 0.0,
            buckets: None,
        };
        let pct = relative_pmi_increase(&mk(-2.15), &mk(-1.71)).unwrap();
        assert!((pct - 25.730_994_152_046_78).abs() < 1e-12);
        let pct2 = relative_pmi_increase(&mk(-3.03), &mk(-1.99)).unwrap();
        assert!((pct2 - 52.261_306_532_663_32).abs() < 1e-12);
        assert_eq!(relative_pmi_increase(&mk(-1.0), &mk(-1.0)).unwrap(), 0.0);
        assert!(matches!(
            relative_pmi_increase(&mk(-1.0), &mk(0.0)),
            Err(GapError::ZeroBaseline)
        ));
    }

    fn summary_with(nll: f64, pmi: f64) -> GapSummary {
        GapSummary {
            model_id: None,
            dataset: None,
            domain: None,
            n_pairs: 1,
            n_excluded: 0,
            mismatch_rate: 0.0,
            nll_ratio: nll,
            ppl_ratio: nll,
            pmi_diff: pmi,
            cpmi_diff: pmi,
            buckets: None,
        }
    }

    #[test]
    fn five_distinct_values_fill_all_buckets() {
        let mut sums: Vec<GapSummary> =
            [1.0, 2.0, 3.0, 4.0, 5.0].iter().map(|&v| summary_with(v, -v)).collect();
        bucketize(&mut sums);
        let nll: Vec<u8> = sums.iter().map(|s| s.buckets.unwrap().nll).collect();
        assert_eq!(nll, vec![1, 2, 3, 4, 5]);
        // More negative PMI difference = bigger gap = higher bucket.
        let pmi: Vec<u8> = sums.iter().map(|s| s.buckets.unwrap().pmi).collect();
        assert_eq!(pmi, vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn equal_values_share_the_bottom_bucket() {
        let mut sums: Vec<GapSummary> = (0..4).map(|_| summary_with(2.0, -1.0)).collect();
        bucketize(&mut sums);
        assert!(sums.iter().all(|s| s.buckets.unwrap() == Buckets { nll: 1, ppl: 1, pmi: 1, cpmi: 1 }));
    }

    #[test]
    fn ten_values_fall_two_per_bucket() {
        let mut sums: Vec<GapSummary> =
            (1..=10).map(|v| summary_with(v as f64, 0.0)).collect();
        bucketize(&mut sums);
        let nll: Vec<u8> = sums.iter().map(|s| s.buckets.unwrap().nll).collect();
        assert_eq!(nll, vec![1, 1, 2, 2, 3, 3, 4, 4, 5, 5]);
    }

    // -- evaluate_pair ------------------------------------------------------

    fn segment_pair() -> SegmentPair {
        SegmentPair {
            story_id: "story-1".into(),
            k: 2,
            dataset: "demo".into(),
            domain: Some("creative".into()),
            context: "a b c.".into(),
            continuation: "a b".into(),
            boundary: " ".into(),
            context_token_count: 3,
        }
    }

    #[test]
    fn evaluate_pair_makes_exactly_four_backend_calls() {
        let mock = MockBackend::standard();
        let sampling = SamplingConfig { seed: Some(9), ..SamplingConfig::default() };
        evaluate_pair(&segment_pair(), &mock, &sampling, 2.0, 1.0).unwrap();
        let counts = mock.call_counts();
        assert_eq!(counts.conditional, 1);
        assert_eq!(counts.unconditional, 2);
        assert_eq!(counts.generate, 1);
        assert_eq!(counts.inference(), 4);
        assert_eq!(counts.count_tokens, 0);
    }

    #[test]
    fn evaluate_pair_produces_known_mock_values() {
        let mock = MockBackend::standard();
        let sampling = SamplingConfig { seed: Some(9), ..SamplingConfig::default() };
        let out = evaluate_pair(&segment_pair(), &mock, &sampling, 2.0, 1.0).unwrap();
        let r = &out.record;
        // Human continuation "a b": NLL known in closed form.
        assert!((r.human.nll - 1.060_131_768_100_046).abs() < 1e-12);
        assert_eq!(r.human.n_tokens, 2);
        // Context independence forces PMI to zero on both sides.
        assert_eq!(r.human.pmi, 0.0);
        assert_eq!(r.model.pmi, 0.0);
        // Generation was length-matched to the human continuation.
        assert_eq!(r.model.n_tokens, 2);
        assert!(!r.length_mismatch);
        assert_eq!(r.model_id, "mock");
        assert_eq!(out.traces.model_cond.len(), 2);
    }

    #[test]
    fn evaluate_pair_is_deterministic_for_a_fixed_seed() {
        let sampling = SamplingConfig { seed: Some(1234), ..SamplingConfig::default() };
        let a = evaluate_pair(&segment_pair(), &MockBackend::standard(), &sampling, 2.0, 1.0)
            .unwrap();
        let b = evaluate_pair(&segment_pair(), &MockBackend::standard(), &sampling, 2.0, 1.0)
            .unwrap();
        assert_eq!(a.record, b.record);
        assert_eq!(a.traces.generated_text, b.traces.generated_text);
    }

    #[test]
    fn truncated_generation_sets_length_mismatch() {
        let mock = MockBackend::new(&[("a", 0.45), ("b", 0.35), ("END", 0.2)])
            .unwrap()
            .with_stop_token("END");
        let mut pair = segment_pair();
        pair.continuation = "a b a b a b a b a b a b a b a b".into();
        for seed in 0..30 {
            let sampling = SamplingConfig { seed: Some(seed), ..SamplingConfig::default() };
            match evaluate_pair(&pair, &mock, &sampling, 2.0, 1.0) {
                Ok(out) if out.record.length_mismatch => {
                    assert!(out.record.model.n_tokens < out.record.human.n_tokens);
                    return;
                }
                Ok(_) => continue,
                // First sampled token was the stop token.
                Err(EvalError::EmptyGeneration { .. }) => continue,
                Err(e) => panic!("unexpected error: {e}"),
            }
        }
        panic!("no truncated generation across 30 seeds");
    }
}
