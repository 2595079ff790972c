//! Coarse-grained budget allocation over demonstrations or sentences.
//!
//! Given an overall target rate and fixed instruction/question rates, this
//! stage derives the demonstration rate, ranks whole units by descending
//! perplexity, selects greedily under a k-scaled token budget, and hands any
//! unused budget back to the instruction and question as a rate bonus.

use serde::{Deserialize, Serialize};

use crate::prompt::ComponentLengths;

/// Target rates for a compression run. All rates are fractions in (0, 1]
/// (retained/original); `k` loosens the coarse-stage budget so the token
/// stage has material left to prune.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatePlan {
    pub tau: f64,
    pub tau_ins: f64,
    pub tau_que: f64,
    pub k: f64,
}

impl RatePlan {
    pub fn new(tau: f64, tau_ins: f64, tau_que: f64, k: f64) -> Result<Self, BudgetError> {
        let plan = RatePlan {
            tau,
            tau_ins,
            tau_que,
            k,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<(), BudgetError> {
        for (name, value) in [
            ("tau", self.tau),
            ("tau_ins", self.tau_ins),
            ("tau_que", self.tau_que),
        ] {
            if !(value > 0.0 && value <= 1.0) {
                return Err(BudgetError::InvalidRate { name, value });
            }
        }
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(BudgetError::InvalidRate {
                name: "k",
                value: self.k,
            });
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BudgetError {
    #[error("rate {name} must be in (0, 1] (k must be positive), got {value}")]
    InvalidRate { name: &'static str, value: f64 },
    #[error("demonstration length is zero; coarse compression does not apply")]
    NoDemonstrations,
    #[error("unit {index} has a non-finite perplexity ({value})")]
    NonFinitePerplexity { index: usize, value: f64 },
    #[error("got {perplexities} perplexities for {units} units")]
    LengthMismatch { units: usize, perplexities: usize },
}

/// The demonstration rate derived from the overall target, with a flag
/// recording whether the raw value was negative and clamped to zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemoRate {
    pub tau_dems: f64,
    pub clamped: bool,
}

/// One selectable unit as seen by the selector: its original position and
/// token count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UnitLen {
    pub index: usize,
    pub tokens: usize,
}

/// A unit picked by the coarse stage: original index plus the rank at which
/// the descending-perplexity scan appended it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectedUnit {
    pub index: usize,
    pub rank: usize,
    pub tokens: usize,
}

/// Result of the greedy selection: chosen units in original order and their
/// cumulative token length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub units: Vec<SelectedUnit>,
    pub selected_tokens: usize,
}

/// Leftover budget reallocated to the instruction and question, with flags
/// for the floored-at-zero case and the no-recipients case.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reallocation {
    pub delta_tau: f64,
    pub overshoot: bool,
    pub no_recipients: bool,
}

/// Derives the demonstration compression rate from the overall target rate
/// and the fixed instruction/question rates:
/// `(tau*L - (tau_ins*L_ins + tau_que*L_que)) / L_dems`, clamped at zero.
pub fn derive_demo_rate(
    plan: &RatePlan,
    lengths: &ComponentLengths,
) -> Result<DemoRate, BudgetError> {
    if lengths.demonstrations == 0 {
        return Err(BudgetError::NoDemonstrations);
    }
    let reserved =
        plan.tau_ins * lengths.instruction as f64 + plan.tau_que * lengths.question as f64;
    let raw = (plan.tau * lengths.total() as f64 - reserved) / lengths.demonstrations as f64;
    if raw < 0.0 {
        Ok(DemoRate {
            tau_dems: 0.0,
            clamped: true,
        })
    } else {
        Ok(DemoRate {
            tau_dems: raw,
            clamped: false,
        })
    }
}

/// Greedy unit selection under the k-scaled budget.
///
/// Units are ranked by descending perplexity (ties broken by ascending
/// original index) and appended one at a time; before each append the loop
/// stops if the accumulated length already exceeds
/// `k * tau_dems * total_tokens`. The check precedes the append, so the
/// budget can be overshot by at most one unit and even a zero budget selects
/// one unit. With `strict` set the loop instead stops before an append would
/// exceed the budget, guaranteeing the selection never overshoots.
///
/// Selected units are returned in original order; `rank` records the
/// append order.
pub fn select_units(
    units: &[UnitLen],
    tau_dems: f64,
    k: f64,
    total_tokens: usize,
    perplexities: &[f64],
    strict: bool,
) -> Result<Selection, BudgetError> {
    if units.len() != perplexities.len() {
        return Err(BudgetError::LengthMismatch {
            units: units.len(),
            perplexities: perplexities.len(),
        });
    }
    for (unit, ppl) in units.iter().zip(perplexities.iter()) {
        if !ppl.is_finite() {
            return Err(BudgetError::NonFinitePerplexity {
                index: unit.index,
                value: *ppl,
            });
        }
    }

    let budget = k * tau_dems * total_tokens as f64;
    let mut order: Vec<usize> = (0..units.len()).collect();
    order.sort_by(|&a, &b| {
        perplexities[b]
            .partial_cmp(&perplexities[a])
            .expect("perplexities checked finite")
            .then(units[a].index.cmp(&units[b].index))
    });

    let mut selected = Vec::new();
    let mut accumulated = 0usize;
    for (rank, &slot) in order.iter().enumerate() {
        let stop = if strict {
            // Stop before the append that would exceed the budget.
            (accumulated + units[slot].tokens) as f64 > budget
        } else {
            accumulated as f64 > budget
        };
        if stop {
            break;
        }
        selected.push(SelectedUnit {
            index: units[slot].index,
            rank,
            tokens: units[slot].tokens,
        });
        accumulated += units[slot].tokens;
    }

    selected.sort_by_key(|u| u.index);
    Ok(Selection {
        units: selected,
        selected_tokens: accumulated,
    })
}

/// Hands unused coarse budget to the instruction and question:
/// `(k * tau_dems * L_dems - selected_tokens) / (L_ins + L_que)`, floored at
/// zero when the selection overshot the budget. With no recipient components
/// the result is zero and flagged.
pub fn reallocate(
    plan: &RatePlan,
    tau_dems: f64,
    lengths: &ComponentLengths,
    selected_tokens: usize,
) -> Reallocation {
    let recipients = lengths.instruction + lengths.question;
    if recipients == 0 {
        return Reallocation {
            delta_tau: 0.0,
            overshoot: false,
            no_recipients: true,
        };
    }
    let budget = plan.k * tau_dems * lengths.demonstrations as f64;
    let raw = (budget - selected_tokens as f64) / recipients as f64;
    if raw < 0.0 {
        Reallocation {
            delta_tau: 0.0,
            overshoot: true,
            no_recipients: false,
        }
    } else {
        Reallocation {
            delta_tau: raw,
            overshoot: false,
            no_recipients: false,
        }
    }
}
