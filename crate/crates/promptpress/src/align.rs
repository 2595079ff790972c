//! Export of (instruction, model output) pairs as an alignment dataset.
//!
//! The records feed downstream fine-tuning of a scorer on target-model
//! outputs; this crate only produces the dataset file. Format: one JSON
//! object per line, UTF-8, order preserved.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

/// One instruction paired with the text a target model generated for it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentPair {
    pub instruction: String,
    pub output: String,
}

#[derive(Debug, thiserror::Error)]
pub enum AlignError {
    #[error("no pairs to export")]
    Empty,
    #[error("write failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    BadRecord { line: usize, message: String },
}

/// Writes pairs as newline-delimited JSON. The write is atomic: the file
/// appears complete or not at all.
pub fn export_alignment_dataset(pairs: &[AlignmentPair], path: &Path) -> Result<(), AlignError> {
    if pairs.is_empty() {
        return Err(AlignError::Empty);
    }
    let mut buffer = Vec::new();
    for pair in pairs {
        serde_json::to_writer(&mut buffer, pair).expect("pair serialization cannot fail");
        buffer.push(b'\n');
    }
    let tmp = path.with_extension("tmp");
    {
        let mut file = std::fs::File::create(&tmp)?;
        file.write_all(&buffer)?;
        file.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Parses a newline-delimited JSON file of pairs. Blank lines are skipped.
pub fn read_alignment_pairs(content: &str) -> Result<Vec<AlignmentPair>, AlignError> {
    let mut pairs = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let pair: AlignmentPair =
            serde_json::from_str(line).map_err(|e| AlignError::BadRecord {
                line: idx + 1,
                message: e.to_string(),
            })?;
        pairs.push(pair);
    }
    Ok(pairs)
}
