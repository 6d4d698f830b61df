//! Batch toolkit for measuring how much more "surprising" human-written story
//! continuations are than model-generated ones, under the same language model.
//!
//! The pipeline runs in stages over JSONL artifacts:
//!
//! 1. [`corpus`] loads stories, filters over-long ones, splits them into
//!    sentences, and builds cumulative (context, continuation) pairs.
//! 2. [`backend`] scores token sequences and samples continuations, either
//!    against a completion-style HTTP endpoint or a deterministic mock.
//! 3. [`metrics`] computes per-continuation NLL, PPL, PMI, and CPMI from
//!    aligned token traces.
//! 4. [`gap`] pairs the human continuation with a length-matched generation,
//!    forms ratio/difference gap values, and aggregates medians per group.
//! 5. [`quality`] scores passages with a pluggable quality scorer and relates
//!    quality to uncertainty via Spearman rank correlation and quadratic fits.
//! 6. [`report`] renders the summary tables as CSV/Markdown plus a
//!    diagnostics JSON, deterministically.
//!
//! [`pipeline`] wires the stages together so that a CLI (or a test) can run
//! everything end to end. All numeric work is `f64`; log probabilities are
//! natural logs throughout.

pub mod backend;
pub mod corpus;
pub mod gap;
pub mod jsonl;
pub mod metrics;
pub mod pipeline;
pub mod quality;
pub mod report;
pub mod stats;
#[cfg(test)]
pub(crate) mod testutil;

pub use backend::{Backend, BackendConfig, Generation, SamplingConfig, TokenTrace};
pub use corpus::{SegmentPair, Story};
pub use gap::{GapSummary, GapValues, PairedRecord};
pub use metrics::MetricSet;
pub use quality::{QualityScore, RegressionResult, ShapeClass};
