//! Per-token scoring backends.
//!
//! A backend owns a tokenizer and answers one question: given a conditioning
//! prefix and a target token sequence, what is the negative log probability
//! of each target token? All conditioning is explicit in the request prefix;
//! backends hold no hidden scoring state, so they are safe to share across
//! threads.
//!
//! Two implementations ship with the crate: a deterministic trainable n-gram
//! surrogate model ([`surrogate::SurrogateModel`]) and an HTTP client for
//! inference servers that expose token log probabilities
//! ([`http::HttpBackend`]).

pub mod http;
pub mod surrogate;

use serde::{Deserialize, Serialize};

/// Upper bound applied to any negative log probability; stands in for
/// `-ln 0` so downstream score distributions stay finite.
pub const MAX_NLL: f64 = 30.0;

/// A scoring request: score every `target` token conditioned on `prefix`
/// plus the preceding target tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub prefix: Vec<String>,
    pub target: Vec<String>,
}

impl ScoreRequest {
    pub fn new(prefix: Vec<String>, target: Vec<String>) -> Self {
        ScoreRequest { prefix, target }
    }

    pub fn total_len(&self) -> usize {
        self.prefix.len() + self.target.len()
    }
}

/// One scored token: its surface text, position within the request target,
/// and negative log probability in nats (higher = more surprising).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredToken {
    pub token: String,
    pub position: usize,
    pub nll: f64,
}

/// Errors produced by scoring backends.
#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    /// Network or server failure. `retryable` reports whether another
    /// attempt could succeed; the HTTP backend sets it to false once its
    /// retry budget is exhausted.
    #[error("transport error{}: {message}", status.map(|s| format!(" (status {s})")).unwrap_or_default())]
    Transport {
        message: String,
        status: Option<u16>,
        retryable: bool,
    },
    /// The server answered but violated the wire contract.
    #[error("protocol error: {0}")]
    Protocol(String),
    /// Request exceeds the backend context window. Not retryable.
    #[error("context overflow: request needs {requested} tokens, limit is {limit}")]
    Capacity { requested: usize, limit: usize },
    /// The request violates a precondition (empty target, zero-token unit).
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            BackendError::Transport {
                retryable: true,
                ..
            }
        )
    }
}

/// Uniform interface for per-token conditional scoring.
pub trait PplBackend: Send + Sync {
    /// Splits text into tokens. Token strings own their surrounding
    /// whitespace so that concatenating them reproduces the text exactly.
    fn tokenize(&self, text: &str) -> Result<Vec<String>, BackendError>;

    /// Maximum combined prefix + target length [`score`](Self::score) accepts.
    fn context_limit(&self) -> usize;

    /// How many tokens of preceding context each window carries when a long
    /// request is scored in chunks.
    fn window_overlap(&self) -> usize;

    /// Scores every target token conditioned on the prefix plus preceding
    /// target tokens. Errors if the target is empty or the request exceeds
    /// the context limit.
    fn score(&self, request: &ScoreRequest) -> Result<Vec<ScoredToken>, BackendError>;

    /// Joins tokens back into text. Tokens own their whitespace, so this is
    /// plain concatenation for both bundled backends.
    fn detokenize(&self, tokens: &[String]) -> String {
        tokens.concat()
    }

    /// Scores a target of any length by chunking it into windows that fit the
    /// context limit. Each window is conditioned on the last
    /// [`window_overlap`](Self::window_overlap) tokens preceding it (clamped
    /// to what fits), so for an n-gram surrogate with overlap n-1 the result
    /// is identical to an unchunked call.
    fn score_windowed(
        &self,
        prefix: &[String],
        target: &[String],
    ) -> Result<Vec<ScoredToken>, BackendError> {
        if target.is_empty() {
            return Err(BackendError::InvalidRequest(
                "target must contain at least one token".into(),
            ));
        }
        let limit = self.context_limit();
        if prefix.len() + target.len() <= limit {
            return self.score(&ScoreRequest::new(prefix.to_vec(), target.to_vec()));
        }

        let overlap = self.window_overlap().min(limit.saturating_sub(1));
        let window = (limit - overlap).max(1);
        let mut scored = Vec::with_capacity(target.len());
        let mut done = 0;
        while done < target.len() {
            let take = window.min(target.len() - done);
            let ctx_budget = limit - take;
            let carried = overlap.min(ctx_budget);
            let mut ctx: Vec<String> = Vec::with_capacity(carried);
            let before_window = prefix.len() + done;
            let ctx_start = before_window.saturating_sub(carried);
            for pos in ctx_start..before_window {
                if pos < prefix.len() {
                    ctx.push(prefix[pos].clone());
                } else {
                    ctx.push(target[pos - prefix.len()].clone());
                }
            }
            let chunk = target[done..done + take].to_vec();
            let part = self.score(&ScoreRequest::new(ctx, chunk))?;
            for token in part {
                scored.push(ScoredToken {
                    token: token.token,
                    position: done + token.position,
                    nll: token.nll,
                });
            }
            done += take;
        }
        Ok(scored)
    }

    /// Perplexity of a text unit: `exp` of the mean token nll, scored with an
    /// empty prefix. Errors on units that tokenize to zero tokens.
    fn unit_perplexity(&self, text_unit: &str) -> Result<f64, BackendError> {
        let tokens = self.tokenize(text_unit)?;
        if tokens.is_empty() {
            return Err(BackendError::InvalidRequest(
                "unit tokenizes to zero tokens".into(),
            ));
        }
        let scored = self.score_windowed(&[], &tokens)?;
        let mean = scored.iter().map(|t| t.nll).sum::<f64>() / scored.len() as f64;
        Ok(mean.exp())
    }
}
