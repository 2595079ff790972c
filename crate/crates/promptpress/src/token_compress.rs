//! Fine-grained token-level compression.
//!
//! The coarse-compressed prompt is cut into fixed-size segments that never
//! cross component boundaries. Segments are scored in order; in iterative
//! mode each segment is conditioned on the tokens retained from all previous
//! segments, so earlier drop decisions sharpen later probability estimates.
//! Within a segment, a rate-derived threshold keeps the highest-surprise
//! tokens.

use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, PplBackend};
use crate::budget::RatePlan;
use crate::prompt::{Component, TokenizedComponent};

/// How segment scoring is conditioned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompressionMode {
    /// Condition each segment on the retained tokens of all previous
    /// segments.
    Iterative,
    /// Condition each segment on the original (uncompressed) tokens of all
    /// previous segments; a single pass with no feedback.
    SinglePass,
}

/// A contiguous slice of one component's token stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub tokens: Vec<String>,
    pub component: Component,
    /// Global segment order across the whole prompt.
    pub index: usize,
    /// Token span within the component stream, `[start, end)`.
    pub span: (usize, usize),
}

/// Per-segment compression outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentResult {
    pub segment_index: usize,
    pub component: Component,
    /// Rate actually applied to this segment.
    pub rate: f64,
    /// Retention threshold: the nll of the lowest-scoring retained token,
    /// `+inf` when the segment retained nothing.
    pub gamma: f64,
    pub retained: Vec<bool>,
    pub retained_count: usize,
}

/// Per-component token accounting for a compression run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentCounts {
    pub original: usize,
    pub retained: usize,
}

/// Final counts and rates of a compression run. The achieved rate is always
/// recomputed from real token counts rather than assumed equal to the
/// target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionStats {
    pub original_tokens: usize,
    pub compressed_tokens: usize,
    pub achieved_tau: f64,
    /// `1 / achieved_tau`; absent when everything was dropped.
    pub achieved_ratio: Option<f64>,
    pub instruction: ComponentCounts,
    pub demonstrations: ComponentCounts,
    pub question: ComponentCounts,
}

/// The compressed prompt: final text, per-component texts, per-segment
/// masks, and stats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressedPrompt {
    /// Non-empty compressed component texts joined with a newline.
    pub text: String,
    pub instruction_text: String,
    pub demonstrations_text: String,
    pub question_text: String,
    pub segments: Vec<SegmentResult>,
    pub stats: CompressionStats,
}

#[derive(Debug, thiserror::Error)]
pub enum TokenStageError {
    #[error("segment {segment}: backend error: {source}")]
    Backend {
        segment: usize,
        source: BackendError,
    },
    #[error("cannot threshold an empty score list")]
    EmptyScores,
    #[error("non-finite score at position {position}")]
    NonFiniteScore { position: usize },
}

/// Cuts component token streams into segments of at most `size` tokens.
/// Segments never cross component boundaries; only the tail segment of a
/// component may be shorter than `size`.
pub fn segment(components: &[TokenizedComponent], size: usize) -> Vec<Segment> {
    let size = size.max(1);
    let mut segments = Vec::new();
    let mut index = 0;
    for component in components {
        let mut start = 0;
        while start < component.tokens.len() {
            let end = (start + size).min(component.tokens.len());
            segments.push(Segment {
                tokens: component.tokens[start..end].to_vec(),
                component: component.component,
                index,
                span: (start, end),
            });
            index += 1;
            start = end;
        }
    }
    segments
}

/// Compression rate for one segment: instruction and question segments get
/// their planned rate plus the reallocated bonus, demonstration segments get
/// the demonstration rate. Clamped into [0, 1].
pub fn rate_for(component: Component, plan: &RatePlan, tau_dems: f64, delta_tau: f64) -> f64 {
    let raw = match component {
        Component::Instruction => plan.tau_ins + delta_tau,
        Component::Demonstrations => tau_dems,
        Component::Question => plan.tau_que + delta_tau,
    };
    raw.clamp(0.0, 1.0)
}

/// Threshold selection over one segment's scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdResult {
    pub gamma: f64,
    pub retained: Vec<bool>,
    pub retained_count: usize,
}

/// Retains the `round(rate * len)` highest-nll tokens (round half up). Ties
/// at the cut are broken by ascending position, so earlier tokens win.
/// `gamma` is the nll of the lowest-scoring retained token.
pub fn threshold(scores: &[f64], rate: f64) -> Result<ThresholdResult, TokenStageError> {
    if scores.is_empty() {
        return Err(TokenStageError::EmptyScores);
    }
    if let Some(position) = scores.iter().position(|s| !s.is_finite()) {
        return Err(TokenStageError::NonFiniteScore { position });
    }
    let count = ((rate * scores.len() as f64).round() as usize).min(scores.len());

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores checked finite")
            .then(a.cmp(&b))
    });

    let mut retained = vec![false; scores.len()];
    let mut gamma = f64::INFINITY;
    for &position in order.iter().take(count) {
        retained[position] = true;
        gamma = gamma.min(scores[position]);
    }
    Ok(ThresholdResult {
        gamma,
        retained,
        retained_count: count,
    })
}

/// Runs token-level compression over all segments in order.
///
/// In iterative mode segment `j` is scored with the retained tokens of
/// segments `< j` as the conditioning prefix; in single-pass mode the
/// original tokens of segments `< j` are used instead. `original_tokens` is
/// the token length of the uncompressed prompt and is the denominator of
/// the achieved rate.
pub fn compress_segments(
    segments: &[Segment],
    plan: &RatePlan,
    tau_dems: f64,
    delta_tau: f64,
    backend: &dyn PplBackend,
    mode: CompressionMode,
    original_tokens: usize,
) -> Result<CompressedPrompt, TokenStageError> {
    let mut retained_prefix: Vec<String> = Vec::new();
    let mut original_prefix: Vec<String> = Vec::new();
    let mut results = Vec::with_capacity(segments.len());
    let mut instruction_tokens: Vec<String> = Vec::new();
    let mut demonstration_tokens: Vec<String> = Vec::new();
    let mut question_tokens: Vec<String> = Vec::new();
    let mut counts = [ComponentCounts::default(); 3];

    for seg in segments {
        let prefix: &[String] = match mode {
            CompressionMode::Iterative => &retained_prefix,
            CompressionMode::SinglePass => &original_prefix,
        };
        let scored = backend
            .score_windowed(prefix, &seg.tokens)
            .map_err(|source| TokenStageError::Backend {
                segment: seg.index,
                source,
            })?;
        let scores: Vec<f64> = scored.iter().map(|t| t.nll).collect();
        let rate = rate_for(seg.component, plan, tau_dems, delta_tau);
        let selection = threshold(&scores, rate)?;

        let sink = match seg.component {
            Component::Instruction => &mut instruction_tokens,
            Component::Demonstrations => &mut demonstration_tokens,
            Component::Question => &mut question_tokens,
        };
        for (token, keep) in seg.tokens.iter().zip(selection.retained.iter()) {
            if *keep {
                sink.push(token.clone());
                retained_prefix.push(token.clone());
            }
        }
        let slot = match seg.component {
            Component::Instruction => 0,
            Component::Demonstrations => 1,
            Component::Question => 2,
        };
        counts[slot].original += seg.tokens.len();
        counts[slot].retained += selection.retained_count;

        original_prefix.extend(seg.tokens.iter().cloned());
        results.push(SegmentResult {
            segment_index: seg.index,
            component: seg.component,
            rate,
            gamma: selection.gamma,
            retained: selection.retained,
            retained_count: selection.retained_count,
        });
    }

    let instruction_text = backend.detokenize(&instruction_tokens);
    let demonstrations_text = backend.detokenize(&demonstration_tokens);
    let question_text = backend.detokenize(&question_tokens);
    let text = [
        instruction_text.as_str(),
        demonstrations_text.as_str(),
        question_text.as_str(),
    ]
    .iter()
    .filter(|t| !t.is_empty())
    .copied()
    .collect::<Vec<_>>()
    .join("\n");

    let compressed_tokens =
        instruction_tokens.len() + demonstration_tokens.len() + question_tokens.len();
    let achieved_tau = if original_tokens == 0 {
        1.0
    } else {
        compressed_tokens as f64 / original_tokens as f64
    };
    let achieved_ratio = if compressed_tokens == 0 {
        None
    } else {
        Some(original_tokens as f64 / compressed_tokens as f64)
    };

    Ok(CompressedPrompt {
        text,
        instruction_text,
        demonstrations_text,
        question_text,
        segments: results,
        stats: CompressionStats {
            original_tokens,
            compressed_tokens,
            achieved_tau,
            achieved_ratio,
            instruction: counts[0],
            demonstrations: counts[1],
            question: counts[2],
        },
    })
}
