//! Corpus loading, length filtering, sentence segmentation, and construction
//! of cumulative (context, continuation) pairs.
//!
//! A corpus is a JSONL file of stories. Each story is split into sentences
//! with a rule-based segmenter that is lossless: the sentences plus the
//! whitespace between them reconstruct the original text byte for byte. For
//! a story with sentences `s1..sm`, the pairs are
//!
//! ```text
//! k = 2:  context = s1,            continuation = s2
//! k = 3:  context = s1 + s2,       continuation = s3
//! ...
//! k = m:  context = s1 + .. + s(m-1), continuation = sm
//! ```
//!
//! so every continuation is scored against all preceding text. `k = 1` is
//! excluded: a continuation needs a non-empty context.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {reason}")]
    Malformed { path: String, line: usize, reason: String },
    #[error("{path} line {line}: missing field {field}")]
    MissingField { path: String, line: usize, field: &'static str },
    #[error("{path} line {line}: duplicate story id {id:?}")]
    DuplicateId { path: String, line: usize, id: String },
    #[error("{path} line {line}: story {id:?} has empty text")]
    EmptyText { path: String, line: usize, id: String },
    #[error("token counting failed for story {id:?}: {source}")]
    TokenCount {
        id: String,
        #[source]
        source: BackendError,
    },
}

/// One corpus entry.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Story {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
}

/// A scoring unit: one continuation sentence with its cumulative context.
///
/// `k` is the 1-based index of the continuation sentence within its story
/// (so `k >= 2` always). `boundary` is the original whitespace between
/// context and continuation; re-joining `context + boundary + continuation`
/// reproduces the story prefix exactly.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SegmentPair {
    pub story_id: String,
    pub k: usize,
    pub dataset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
    pub context: String,
    pub continuation: String,
    pub boundary: String,
    pub context_token_count: usize,
}

/// Parses a story corpus, validating ids and text per line.
pub fn load_corpus(path: &Path) -> Result<Vec<Story>, CorpusError> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| CorpusError::Io { path: display.clone(), source })?;

    #[derive(Deserialize)]
    struct RawStory {
        id: Option<String>,
        text: Option<String>,
        #[serde(default)]
        domain: Option<String>,
        #[serde(default)]
        meta: Option<serde_json::Value>,
    }

    let mut stories = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| CorpusError::Io { path: display.clone(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawStory = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            path: display.clone(),
            line: line_no,
            reason: e.to_string(),
        })?;
        let id = raw.id.filter(|s| !s.is_empty()).ok_or(CorpusError::MissingField {
            path: display.clone(),
            line: line_no,
            field: "id",
        })?;
        let text = raw.text.ok_or(CorpusError::MissingField {
            path: display.clone(),
            line: line_no,
            field: "text",
        })?;
        if text.trim().is_empty() {
            return Err(CorpusError::EmptyText { path: display.clone(), line: line_no, id });
        }
        if !seen.insert(id.clone()) {
            return Err(CorpusError::DuplicateId { path: display.clone(), line: line_no, id });
        }
        stories.push(Story { id, text, domain: raw.domain, meta: raw.meta });
    }
    Ok(stories)
}

/// Result of the story length filter.
#[derive(Debug)]
pub struct LengthFilterOutcome {
    pub retained: Vec<Story>,
    /// Ids of stories dropped for exceeding the token budget.
    pub removed: Vec<String>,
}

/// Drops stories whose token count (under the backend's tokenizer) is
/// strictly greater than `max_tokens`; a story exactly at the limit stays.
/// Applying the filter to its own output changes nothing.
pub fn filter_by_length(
    stories: Vec<Story>,
    max_tokens: usize,
    backend: &dyn Backend,
) -> Result<LengthFilterOutcome, CorpusError> {
    let mut retained = Vec::with_capacity(stories.len());
    let mut removed = Vec::new();
    for story in stories {
        let count = backend
            .count_tokens(&story.text)
            .map_err(|source| CorpusError::TokenCount { id: story.id.clone(), source })?;
        if count > max_tokens {
            removed.push(story.id);
        } else {
            retained.push(story);
        }
    }
    Ok(LengthFilterOutcome { retained, removed })
}

// ---------------------------------------------------------------------------
// Sentence segmentation
// ---------------------------------------------------------------------------

/// Sentence terminators.
const TERMINATORS: [char; 3] = ['.', '!', '?'];

/// Closing quotes/brackets that attach to the finished sentence.
const CLOSERS: [char; 6] = ['"', '\'', '\u{201d}', '\u{2019}', ')', ']'];

/// Opening quotes that may begin a sentence.
const OPENERS: [char; 4] = ['"', '\'', '\u{201c}', '\u{2018}'];

/// Dotted abbreviations that never end a sentence (compared case-insensitively).
const ABBREVIATIONS: [&str; 9] =
    ["mr.", "mrs.", "ms.", "dr.", "st.", "vs.", "e.g.", "i.e.", "etc."];

/// Sentence segmentation of one text, preserving every byte.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmented {
    /// Sentences in order; each contains at least one non-whitespace char.
    pub sentences: Vec<String>,
    /// `separators[i]` is the whitespace between `sentences[i]` and
    /// `sentences[i + 1]`; always `sentences.len() - 1` entries (or empty).
    pub separators: Vec<String>,
    /// Whitespace before the first sentence.
    pub leading: String,
    /// Whitespace after the last sentence.
    pub trailing: String,
}

impl Segmented {
    /// Reassembles the original text byte for byte.
    pub fn reconstruct(&self) -> String {
        let mut out = self.leading.clone();
        for (i, s) in self.sentences.iter().enumerate() {
            if i > 0 {
                out.push_str(&self.separators[i - 1]);
            }
            out.push_str(s);
        }
        out.push_str(&self.trailing);
        out
    }
}

/// Splits `text` into sentences with a rule-based boundary detector.
///
/// A boundary is a run of `.`/`!`/`?` (plus any closing quotes or brackets)
/// followed by whitespace and then an uppercase letter or opening quote.
/// A lone `.` that completes a known abbreviation (Mr., Dr., e.g., ...)
/// never ends a sentence. Text without such a boundary is one sentence.
pub fn segment_sentences(text: &str) -> Segmented {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let n = chars.len();
    let byte_end = |i: usize| if i + 1 < n { chars[i + 1].0 } else { text.len() };

    let mut sentences = Vec::new();
    let mut separators = Vec::new();

    // Leading whitespace.
    let mut start = 0;
    while start < n && chars[start].1.is_whitespace() {
        start += 1;
    }
    let leading = text[..if start < n { chars[start].0 } else { text.len() }].to_string();
    if start == n {
        return Segmented { sentences, separators, leading, trailing: String::new() };
    }

    let mut sent_start = start; // char index of current sentence start
    let mut i = start;
    while i < n {
        if !TERMINATORS.contains(&chars[i].1) {
            i += 1;
            continue;
        }
        // Terminator run, e.g. "?!" or "...".
        let run_start = i;
        let mut run_end = i;
        while run_end + 1 < n && TERMINATORS.contains(&chars[run_end + 1].1) {
            run_end += 1;
        }
        // Closers stay attached to the sentence: `He said "Go."`
        let mut close_end = run_end;
        while close_end + 1 < n && CLOSERS.contains(&chars[close_end + 1].1) {
            close_end += 1;
        }
        // Whitespace after the candidate.
        let ws_start = close_end + 1;
        let mut ws_end = ws_start;
        while ws_end < n && chars[ws_end].1.is_whitespace() {
            ws_end += 1;
        }
        let has_ws = ws_end > ws_start;
        let next_starts_sentence = ws_end < n
            && (chars[ws_end].1.is_uppercase() || OPENERS.contains(&chars[ws_end].1));
        let is_abbrev =
            run_start == run_end && chars[run_start].1 == '.' && ends_abbreviation(&chars, run_start);
        if has_ws && next_starts_sentence && !is_abbrev {
            sentences.push(text[chars[sent_start].0..byte_end(close_end)].to_string());
            separators.push(text[byte_end(close_end)..chars[ws_end].0].to_string());
            sent_start = ws_end;
            i = ws_end;
        } else {
            i = close_end + 1;
        }
    }

    // Remainder: last sentence plus trailing whitespace.
    let mut last_non_ws = None;
    for j in (sent_start..n).rev() {
        if !chars[j].1.is_whitespace() {
            last_non_ws = Some(j);
            break;
        }
    }
    match last_non_ws {
        Some(j) => {
            sentences.push(text[chars[sent_start].0..byte_end(j)].to_string());
            let trailing = text[byte_end(j)..].to_string();
            Segmented { sentences, separators, leading, trailing }
        }
        None => {
            // Only whitespace remains; it belongs to the last separator.
            // Reachable only when no boundary fired after sent_start, which
            // means sent_start marks a real sentence start, so this arm is
            // defensive: fold the tail into trailing.
            let trailing = text[chars[sent_start].0..].to_string();
            Segmented { sentences, separators, leading, trailing }
        }
    }
}

/// True when the `.` at `dot` finishes one of the known abbreviations.
fn ends_abbreviation(chars: &[(usize, char)], dot: usize) -> bool {
    let mut word = vec!['.'];
    let mut j = dot;
    while j > 0 {
        let c = chars[j - 1].1;
        if c.is_alphanumeric() || c == '.' {
            word.push(c);
            j -= 1;
        } else {
            break;
        }
    }
    let token: String = word.into_iter().rev().collect::<String>().to_lowercase();
    ABBREVIATIONS.iter().any(|a| token == *a || token.ends_with(&format!(".{a}")))
}

/// Builds all cumulative pairs for one story. A story with fewer than two
/// sentences yields no pairs. `context_token_count` is measured by the
/// backend's tokenizer over the exact context string.
pub fn build_pairs(
    story: &Story,
    dataset: &str,
    backend: &dyn Backend,
) -> Result<Vec<SegmentPair>, CorpusError> {
    let seg = segment_sentences(&story.text);
    let m = seg.sentences.len();
    if m < 2 {
        return Ok(Vec::new());
    }
    let mut pairs = Vec::with_capacity(m - 1);
    let mut context = String::new();
    for k in 2..=m {
        // Context accumulates sentences 1..k-1 with their real separators.
        if k == 2 {
            context.push_str(&seg.sentences[0]);
        } else {
            context.push_str(&seg.separators[k - 3]);
            context.push_str(&seg.sentences[k - 2]);
        }
        let count = backend
            .count_tokens(&context)
            .map_err(|source| CorpusError::TokenCount { id: story.id.clone(), source })?;
        pairs.push(SegmentPair {
            story_id: story.id.clone(),
            k,
            dataset: dataset.to_string(),
            domain: story.domain.clone(),
            context: context.clone(),
            continuation: seg.sentences[k - 1].clone(),
            boundary: seg.separators[k - 2].clone(),
            context_token_count: count,
        });
    }
    Ok(pairs)
}
