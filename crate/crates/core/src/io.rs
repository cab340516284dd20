//! JSONL reading and writing shared by the file formats.

use std::io::{BufRead, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl JsonlError {
    pub fn schema(line: usize, message: impl Into<String>) -> Self {
        JsonlError::Schema {
            line,
            message: message.into(),
        }
    }

    /// Offending 1-based line, for schema errors.
    pub fn line(&self) -> Option<usize> {
        match self {
            JsonlError::Schema { line, .. } => Some(*line),
            JsonlError::Io(_) => None,
        }
    }
}

/// Reads one record per non-blank line, paired with its 1-based line number.
pub fn read_jsonl<T: DeserializeOwned, R: BufRead>(reader: R) -> Result<Vec<(usize, T)>, JsonlError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| JsonlError::schema(i + 1, e.to_string()))?;
        out.push((i + 1, value));
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize, W: Write>(mut writer: W, records: &[T]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut writer, r)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}
