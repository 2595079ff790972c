//! Relative inference-cost model for a compression run.
//!
//! Compressing with a small scorer costs `L` tokens for unit ranking plus
//! `k*L/r` for token scoring plus `L/r` for conditioning on retained text,
//! all at the small model's per-token cost; the target model then reads
//! `L/r` tokens. Normalized by `L * c_llm` this gives
//! `(1 + k/r + 1/r) * (c_small/c_llm) + 1/r`.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum CostError {
    #[error("compression ratio must be >= 1, got {0}")]
    RatioOutOfRange(f64),
    #[error("cost ratio must be non-negative and finite, got {0}")]
    InvalidCostRatio(f64),
    #[error("k must be non-negative and finite, got {0}")]
    InvalidK(f64),
}

/// Relative computation cost of compressing at ratio `r` and then running
/// the target model, normalized to the uncompressed target-model cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub ratio: f64,
    pub k: f64,
    /// Per-token cost of the small scorer relative to the target model.
    pub cost_ratio: f64,
    /// Total cost relative to running the target model uncompressed.
    pub relative_cost: f64,
    /// `1 / relative_cost`: how many times cheaper the compressed run is.
    pub savings_multiple: f64,
}

/// Evaluates the relative cost formula for compression ratio `r >= 1`.
pub fn estimate_cost(ratio: f64, k: f64, cost_ratio: f64) -> Result<CostEstimate, CostError> {
    if ratio < 1.0 || !ratio.is_finite() {
        return Err(CostError::RatioOutOfRange(ratio));
    }
    if cost_ratio < 0.0 || !cost_ratio.is_finite() {
        return Err(CostError::InvalidCostRatio(cost_ratio));
    }
    if k < 0.0 || !k.is_finite() {
        return Err(CostError::InvalidK(k));
    }
    let relative_cost = (1.0 + k / ratio + 1.0 / ratio) * cost_ratio + 1.0 / ratio;
    Ok(CostEstimate {
        ratio,
        k,
        cost_ratio,
        relative_cost,
        savings_multiple: 1.0 / relative_cost,
    })
}
