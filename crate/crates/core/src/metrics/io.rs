use std::collections::HashSet;
use std::path::Path;

use super::{MetricsError, PredictionRecord};

/// Parses JSONL prediction records, one object per line. Blank lines are
/// ignored; ids must be unique.
pub fn read_predictions_str(text: &str) -> Result<Vec<PredictionRecord>, MetricsError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionRecord = serde_json::from_str(line).map_err(|e| MetricsError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        rec.validate()?;
        if !seen.insert(rec.id.clone()) {
            return Err(MetricsError::DuplicateId(rec.id));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>, MetricsError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_predictions_str(&text)
}

pub fn write_predictions(
    records: &[PredictionRecord],
    path: impl AsRef<Path>,
) -> Result<(), MetricsError> {
    let path = path.as_ref();
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("record serializes"));
        text.push('\n');
    }
    crate::fsutil::write_atomic(path, text.as_bytes()).map_err(|source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    })
}
