//! Corpus evaluation harness: compresses every structured-prompt JSON file
//! in a directory and aggregates compression-side metrics.

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::backend::PplBackend;
use crate::pipeline::{compress_document, PipelineConfig, PromptReport, SCHEMA_VERSION};

/// Harness knobs independent of the compression config.
#[derive(Debug, Clone)]
pub struct CorpusOptions {
    /// Number of prompts processed concurrently.
    pub workers: usize,
    /// Cap on the number of files (lexicographically first).
    pub limit: Option<usize>,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        CorpusOptions {
            workers: 1,
            limit: None,
        }
    }
}

/// Outcome for one corpus file: either a compression record or an error
/// message. Failures never abort the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileOutcome {
    pub file: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<PromptReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compressed_text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Corpus-level aggregates. Token totals are exact sums of the per-prompt
/// counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub prompts_ok: usize,
    pub prompts_failed: usize,
    pub total_original_tokens: usize,
    pub total_compressed_tokens: usize,
    pub tokens_saved: usize,
    pub mean_achieved_tau: Option<f64>,
    pub mean_achieved_ratio: Option<f64>,
    pub min_achieved_ratio: Option<f64>,
    pub max_achieved_ratio: Option<f64>,
}

/// Machine-readable corpus report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub schema_version: u32,
    pub target_tau: f64,
    pub target_ratio: f64,
    pub files: Vec<FileOutcome>,
    pub aggregates: Aggregates,
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("cannot read corpus directory {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Compresses every `.json` file in `dir` (lexicographic filename order)
/// and aggregates the results. Unreadable or invalid files are recorded as
/// per-file errors and the run continues.
pub fn run_corpus(
    dir: &Path,
    config: &PipelineConfig,
    options: &CorpusOptions,
    backend: &dyn PplBackend,
) -> Result<CompressionReport, HarnessError> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(|source| HarnessError::Io {
            path: dir.to_path_buf(),
            source,
        })?
        .filter_map(|entry| entry.ok())
        .filter(|entry| entry.path().extension().is_some_and(|ext| ext == "json"))
        .filter_map(|entry| entry.file_name().into_string().ok())
        .collect();
    names.sort();
    if let Some(limit) = options.limit {
        names.truncate(limit);
    }

    let mut outcomes: Vec<Option<FileOutcome>> = Vec::new();
    outcomes.resize_with(names.len(), || None);
    let slots = Mutex::new(&mut outcomes);
    let next_index = std::sync::atomic::AtomicUsize::new(0);
    let workers = options.workers.max(1).min(names.len().max(1));

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let index = next_index.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if index >= names.len() {
                    break;
                }
                let outcome = process_file(dir, &names[index], config, backend);
                slots.lock().expect("harness lock poisoned")[index] = Some(outcome);
            });
        }
    });

    let files: Vec<FileOutcome> = outcomes
        .into_iter()
        .map(|slot| slot.expect("every corpus slot is filled"))
        .collect();

    let aggregates = aggregate(&files);
    Ok(CompressionReport {
        schema_version: SCHEMA_VERSION,
        target_tau: config.plan.tau,
        target_ratio: 1.0 / config.plan.tau,
        files,
        aggregates,
    })
}

fn process_file(
    dir: &Path,
    name: &str,
    config: &PipelineConfig,
    backend: &dyn PplBackend,
) -> FileOutcome {
    let path = dir.join(name);
    let document = match std::fs::read_to_string(&path) {
        Ok(doc) => doc,
        Err(err) => {
            return FileOutcome {
                file: name.to_string(),
                report: None,
                compressed_text: None,
                error: Some(format!("read failed: {err}")),
            }
        }
    };
    match compress_document(&document, config, backend) {
        Ok(outcome) => FileOutcome {
            file: name.to_string(),
            report: Some(outcome.report),
            compressed_text: Some(outcome.compressed.text),
            error: None,
        },
        Err(err) => FileOutcome {
            file: name.to_string(),
            report: None,
            compressed_text: None,
            error: Some(err.to_string()),
        },
    }
}

fn aggregate(files: &[FileOutcome]) -> Aggregates {
    let mut ok = 0;
    let mut failed = 0;
    let mut original = 0usize;
    let mut compressed = 0usize;
    let mut tau_sum = 0.0;
    let mut ratio_sum = 0.0;
    let mut ratio_count = 0usize;
    let mut min_ratio = f64::INFINITY;
    let mut max_ratio = f64::NEG_INFINITY;

    for file in files {
        match &file.report {
            Some(report) => {
                ok += 1;
                original += report.original_tokens;
                compressed += report.compressed_tokens;
                tau_sum += report.achieved_tau;
                if let Some(ratio) = report.achieved_ratio {
                    ratio_sum += ratio;
                    ratio_count += 1;
                    min_ratio = min_ratio.min(ratio);
                    max_ratio = max_ratio.max(ratio);
                }
            }
            None => failed += 1,
        }
    }

    Aggregates {
        prompts_ok: ok,
        prompts_failed: failed,
        total_original_tokens: original,
        total_compressed_tokens: compressed,
        tokens_saved: original - compressed,
        mean_achieved_tau: (ok > 0).then(|| tau_sum / ok as f64),
        mean_achieved_ratio: (ratio_count > 0).then(|| ratio_sum / ratio_count as f64),
        min_achieved_ratio: (ratio_count > 0).then_some(min_ratio),
        max_achieved_ratio: (ratio_count > 0).then_some(max_ratio),
    }
}

/// Renders the human-readable corpus table.
pub fn render_table(report: &CompressionReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<28} {:>9} {:>11} {:>9} {:>8}\n",
        "file", "tokens", "compressed", "tau", "ratio"
    ));
    for file in &report.files {
        match (&file.report, &file.error) {
            (Some(r), _) => {
                let ratio = r
                    .achieved_ratio
                    .map(|x| format!("{x:.2}x"))
                    .unwrap_or_else(|| "-".into());
                out.push_str(&format!(
                    "{:<28} {:>9} {:>11} {:>9.4} {:>8}\n",
                    file.file, r.original_tokens, r.compressed_tokens, r.achieved_tau, ratio
                ));
            }
            (None, Some(err)) => {
                out.push_str(&format!("{:<28} ERROR: {err}\n", file.file));
            }
            (None, None) => {}
        }
    }
    let agg = &report.aggregates;
    out.push_str(&format!(
        "\n{} ok, {} failed | tokens {} -> {} (saved {})\n",
        agg.prompts_ok,
        agg.prompts_failed,
        agg.total_original_tokens,
        agg.total_compressed_tokens,
        agg.tokens_saved
    ));
    if let (Some(mean), Some(min), Some(max)) = (
        agg.mean_achieved_ratio,
        agg.min_achieved_ratio,
        agg.max_achieved_ratio,
    ) {
        out.push_str(&format!(
            "achieved ratio mean {mean:.2}x (min {min:.2}x, max {max:.2}x), target {:.2}x\n",
            report.target_ratio
        ));
    }
    out
}
