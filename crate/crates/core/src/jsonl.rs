//! Line-delimited JSON helpers used by every pipeline artifact.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("failed to open {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {reason}")]
    Parse { path: String, line: usize, reason: String },
}

/// Reads every record, reporting the 1-based line number of any failure.
/// Blank lines are skipped.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, JsonlError> {
    let display = path.display().to_string();
    let file = File::open(path).map_err(|source| JsonlError::Io { path: display.clone(), source })?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| JsonlError::Io { path: display.clone(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| JsonlError::Parse {
            path: display.clone(),
            line: idx + 1,
            reason: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

/// Writes records as one JSON object per line, replacing any existing file.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), JsonlError> {
    let display = path.display().to_string();
    let file =
        File::create(path).map_err(|source| JsonlError::Io { path: display.clone(), source })?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| JsonlError::Parse {
            path: display.clone(),
            line: 0,
            reason: e.to_string(),
        })?;
        writeln!(w, "{line}").map_err(|source| JsonlError::Io { path: display.clone(), source })?;
    }
    w.flush().map_err(|source| JsonlError::Io { path: display, source })
}

/// Appends records to an existing (or new) JSONL file.
pub fn append_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), JsonlError> {
    let display = path.display().to_string();
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|source| JsonlError::Io { path: display.clone(), source })?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| JsonlError::Parse {
            path: display.clone(),
            line: 0,
            reason: e.to_string(),
        })?;
        writeln!(w, "{line}").map_err(|source| JsonlError::Io { path: display.clone(), source })?;
    }
    w.flush().map_err(|source| JsonlError::Io { path: display, source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    struct Row {
        id: String,
        n: u32,
    }

    #[test]
    fn round_trips_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rows.jsonl");
        let rows = vec![Row { id: "a".into(), n: 1 }, Row { id: "b".into(), n: 2 }];
        write_jsonl(&path, &rows).unwrap();
        append_jsonl(&path, &[Row { id: "c".into(), n: 3 }]).unwrap();
        let back: Vec<Row> = read_jsonl(&path).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[2], Row { id: "c".into(), n: 3 });
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"id\": \"a\", \"n\": 1}\nnot json\n").unwrap();
        let err = read_jsonl::<Row>(&path).unwrap_err();
        assert!(err.to_string().contains("line 2"), "got: {err}");
    }
}
