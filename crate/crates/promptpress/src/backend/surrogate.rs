//! Deterministic trainable n-gram surrogate language model.
//!
//! The surrogate stands in for a served neural scorer during tests and
//! offline runs. It is an add-delta smoothed n-gram model over a whitespace
//! aware token stream: identical (model, prefix, target) inputs always
//! produce identical scores, and a model trained twice on the same corpus
//! serializes to byte-identical JSON.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BackendError, PplBackend, ScoreRequest, ScoredToken, MAX_NLL};

/// Reserved vocabulary entry that absorbs out-of-vocabulary probability mass.
pub const UNK_TOKEN: &str = "<unk>";

const MODEL_SCHEMA_VERSION: u32 = 1;
const DEFAULT_CONTEXT_LIMIT: usize = 4096;

/// Errors raised while training, loading, or saving a surrogate model.
#[derive(Debug, thiserror::Error)]
pub enum SurrogateError {
    #[error("n-gram order must be at least 1")]
    InvalidOrder,
    #[error("smoothing constant must be positive, got {0}")]
    InvalidSmoothing(f64),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("vocabulary is empty")]
    EmptyVocabulary,
    #[error("model file i/o failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("model file is not valid: {0}")]
    Format(String),
}

/// Splits text into tokens that own their whitespace.
///
/// A token is a run of leading whitespace followed by either a run of
/// alphanumeric/underscore characters or one symbol character. A whitespace
/// run at the end of the text attaches to the last token. Concatenating the
/// tokens reproduces the input exactly.
pub fn tokenize_text(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens: Vec<String> = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let start = i;
        while i < chars.len() && chars[i].is_whitespace() {
            i += 1;
        }
        if i == chars.len() {
            let ws: String = chars[start..].iter().collect();
            match tokens.last_mut() {
                Some(last) => last.push_str(&ws),
                None => tokens.push(ws),
            }
            break;
        }
        if chars[i].is_alphanumeric() || chars[i] == '_' {
            while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
        } else {
            i += 1;
        }
        tokens.push(chars[start..i].iter().collect());
    }
    tokens
}

/// Normalizes a token surface to the form the model counts: surrounding
/// whitespace stripped, with a lone space standing in for pure-whitespace
/// tokens.
fn norm_key(token: &str) -> &str {
    let trimmed = token.trim();
    if trimmed.is_empty() {
        " "
    } else {
        trimmed
    }
}

#[derive(Debug, Clone, Default)]
struct ContextCounts {
    continuations: HashMap<String, u64>,
    total: u64,
}

/// Add-delta smoothed n-gram model.
#[derive(Debug, Clone)]
pub struct SurrogateModel {
    order: usize,
    delta: f64,
    vocab: BTreeSet<String>,
    /// One table per context length 0..order-1.
    tables: Vec<HashMap<Vec<String>, ContextCounts>>,
    context_limit: usize,
}

#[derive(Serialize, Deserialize)]
struct NgramEntry {
    context: Vec<String>,
    counts: Vec<(String, u64)>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    schema_version: u32,
    order: usize,
    delta: f64,
    vocab: Vec<String>,
    ngrams: Vec<NgramEntry>,
}

impl SurrogateModel {
    /// Trains a model of the given order on a text corpus.
    pub fn train(corpus: &str, order: usize, delta: f64) -> Result<Self, SurrogateError> {
        if order == 0 {
            return Err(SurrogateError::InvalidOrder);
        }
        if delta <= 0.0 || !delta.is_finite() {
            return Err(SurrogateError::InvalidSmoothing(delta));
        }
        let tokens = tokenize_text(corpus);
        if tokens.is_empty() {
            return Err(SurrogateError::EmptyCorpus);
        }
        let keys: Vec<String> = tokens.iter().map(|t| norm_key(t).to_string()).collect();

        let mut vocab: BTreeSet<String> = keys.iter().cloned().collect();
        vocab.insert(UNK_TOKEN.to_string());

        let mut tables: Vec<HashMap<Vec<String>, ContextCounts>> = vec![HashMap::new(); order];
        for ctx_len in 0..order {
            for pos in ctx_len..keys.len() {
                let ctx = keys[pos - ctx_len..pos].to_vec();
                let entry = tables[ctx_len].entry(ctx).or_default();
                *entry.continuations.entry(keys[pos].clone()).or_insert(0) += 1;
                entry.total += 1;
            }
        }

        Ok(SurrogateModel {
            order,
            delta,
            vocab,
            tables,
            context_limit: DEFAULT_CONTEXT_LIMIT,
        })
    }

    /// Builds an untrained model with uniform next-token probabilities over
    /// the given vocabulary.
    pub fn uniform(vocab: Vec<String>, order: usize, delta: f64) -> Result<Self, SurrogateError> {
        if order == 0 {
            return Err(SurrogateError::InvalidOrder);
        }
        if delta <= 0.0 || !delta.is_finite() {
            return Err(SurrogateError::InvalidSmoothing(delta));
        }
        let vocab: BTreeSet<String> = vocab.into_iter().collect();
        if vocab.is_empty() {
            return Err(SurrogateError::EmptyVocabulary);
        }
        Ok(SurrogateModel {
            order,
            delta,
            vocab,
            tables: vec![HashMap::new(); order],
            context_limit: DEFAULT_CONTEXT_LIMIT,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn with_context_limit(mut self, limit: usize) -> Self {
        self.context_limit = limit.max(2);
        self
    }

    /// Probability of `key` following `context` (both already normalized).
    /// The context is truncated to the last `order - 1` entries.
    fn key_probability(&self, context: &[String], key: &str) -> f64 {
        let ctx_len = context.len().min(self.order - 1);
        let ctx = &context[context.len() - ctx_len..];
        let (count, total) = match self.tables[ctx_len].get(ctx) {
            Some(entry) => (
                entry.continuations.get(key).copied().unwrap_or(0),
                entry.total,
            ),
            None => (0, 0),
        };
        (count as f64 + self.delta) / (total as f64 + self.delta * self.vocab.len() as f64)
    }

    /// Next-token distribution over the whole vocabulary for a context of
    /// raw token surfaces. Probabilities sum to 1.
    pub fn next_distribution(&self, context: &[String]) -> Vec<(String, f64)> {
        let keys: Vec<String> = context.iter().map(|t| norm_key(t).to_string()).collect();
        self.vocab
            .iter()
            .map(|word| (word.clone(), self.key_probability(&keys, word)))
            .collect()
    }

    /// Serializes the model to deterministic JSON: same model, same bytes.
    pub fn to_json_string(&self) -> String {
        let mut ngrams = Vec::new();
        for table in &self.tables {
            let mut contexts: Vec<&Vec<String>> = table.keys().collect();
            contexts.sort();
            for ctx in contexts {
                let entry = &table[ctx];
                let mut counts: Vec<(String, u64)> = entry
                    .continuations
                    .iter()
                    .map(|(token, count)| (token.clone(), *count))
                    .collect();
                counts.sort();
                ngrams.push(NgramEntry {
                    context: ctx.clone(),
                    counts,
                });
            }
        }
        let file = ModelFile {
            schema_version: MODEL_SCHEMA_VERSION,
            order: self.order,
            delta: self.delta,
            vocab: self.vocab.iter().cloned().collect(),
            ngrams,
        };
        serde_json::to_string_pretty(&file).expect("model serialization cannot fail")
    }

    pub fn from_json_str(json: &str) -> Result<Self, SurrogateError> {
        let file: ModelFile =
            serde_json::from_str(json).map_err(|e| SurrogateError::Format(e.to_string()))?;
        if file.schema_version != MODEL_SCHEMA_VERSION {
            return Err(SurrogateError::Format(format!(
                "unsupported schema_version {}",
                file.schema_version
            )));
        }
        if file.order == 0 {
            return Err(SurrogateError::InvalidOrder);
        }
        if file.delta <= 0.0 || !file.delta.is_finite() {
            return Err(SurrogateError::InvalidSmoothing(file.delta));
        }
        let vocab: BTreeSet<String> = file.vocab.into_iter().collect();
        if vocab.is_empty() {
            return Err(SurrogateError::EmptyVocabulary);
        }
        let mut tables: Vec<HashMap<Vec<String>, ContextCounts>> = vec![HashMap::new(); file.order];
        for entry in file.ngrams {
            if entry.context.len() >= file.order {
                return Err(SurrogateError::Format(format!(
                    "context of length {} exceeds order {}",
                    entry.context.len(),
                    file.order
                )));
            }
            let table = &mut tables[entry.context.len()];
            let slot = table.entry(entry.context).or_default();
            for (token, count) in entry.counts {
                *slot.continuations.entry(token).or_insert(0) += count;
                slot.total += count;
            }
        }
        Ok(SurrogateModel {
            order: file.order,
            delta: file.delta,
            vocab,
            tables,
            context_limit: DEFAULT_CONTEXT_LIMIT,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), SurrogateError> {
        let json = self.to_json_string();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, json.as_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SurrogateError> {
        let json = std::fs::read_to_string(path)?;
        Self::from_json_str(&json)
    }
}

impl PplBackend for SurrogateModel {
    fn tokenize(&self, text: &str) -> Result<Vec<String>, BackendError> {
        Ok(tokenize_text(text))
    }

    fn context_limit(&self) -> usize {
        self.context_limit
    }

    fn window_overlap(&self) -> usize {
        self.order - 1
    }

    fn score(&self, request: &ScoreRequest) -> Result<Vec<ScoredToken>, BackendError> {
        if request.target.is_empty() {
            return Err(BackendError::InvalidRequest(
                "target must contain at least one token".into(),
            ));
        }
        if request.total_len() > self.context_limit {
            return Err(BackendError::Capacity {
                requested: request.total_len(),
                limit: self.context_limit,
            });
        }
        let keys: Vec<String> = request
            .prefix
            .iter()
            .chain(request.target.iter())
            .map(|t| norm_key(t).to_string())
            .collect();
        let mut scored = Vec::with_capacity(request.target.len());
        for (i, token) in request.target.iter().enumerate() {
            let pos = request.prefix.len() + i;
            let probability = self.key_probability(&keys[..pos], &keys[pos]);
            let nll = (-probability.ln()).clamp(0.0, MAX_NLL);
            scored.push(ScoredToken {
                token: token.clone(),
                position: i,
                nll,
            });
        }
        Ok(scored)
    }
}
