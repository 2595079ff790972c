//! promptpress: a coarse-to-fine prompt compressor.
//!
//! Long structured prompts (instruction, demonstrations, question) are
//! reduced to a target fraction of their token length in two stages. A
//! budget controller first drops whole demonstrations (or sentences) ranked
//! by perplexity under a token budget, handing unused budget to the
//! instruction and question. A token-level stage then scores the survivors
//! segment by segment, conditioning each segment on previously retained
//! text, and keeps the highest-surprise tokens per segment.
//!
//! Scoring comes from a pluggable backend: a deterministic trainable n-gram
//! surrogate for offline runs and tests, or an HTTP client for a served
//! language model exposing token log probabilities.

pub mod align;
pub mod backend;
pub mod budget;
pub mod cost;
pub mod harness;
pub mod pipeline;
pub mod prompt;
pub mod token_compress;

pub use backend::{BackendError, PplBackend, ScoreRequest, ScoredToken};
pub use budget::RatePlan;
pub use pipeline::{
    compress_document, compress_prompt, CompressionOutcome, PipelineConfig, PipelineError,
};
pub use prompt::{parse_prompt, split_sentences, StructuredPrompt};
pub use token_compress::{CompressedPrompt, CompressionMode};
