//! End-to-end compression pipeline: parse, coarse budget stage, token stage,
//! report assembly.

use std::collections::HashSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, PplBackend, ScoreRequest, ScoredToken};
use crate::budget::{derive_demo_rate, reallocate, select_units, BudgetError, RatePlan, UnitLen};
use crate::prompt::{
    parse_prompt, split_sentences, Component, ComponentLengths, ParseError, StructuredPrompt,
    TokenizedComponent, UnitKind,
};
use crate::token_compress::{
    compress_segments, segment, CompressedPrompt, CompressionMode, TokenStageError,
};

/// Version stamp written into every machine-readable output.
pub const SCHEMA_VERSION: u32 = 1;

/// Whether the coarse stage selects whole demonstrations or sentences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Demonstration,
    Sentence,
}

/// Every knob of a compression run. Defaults: instruction rate 0.85,
/// question rate 0.9, k = 2, segment size 100, demonstration granularity,
/// iterative mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub plan: RatePlan,
    pub segment_size: usize,
    pub granularity: Granularity,
    pub mode: CompressionMode,
    pub strict_budget: bool,
    /// Drop wall-clock timings from reports so identical runs serialize to
    /// identical bytes.
    pub omit_timings: bool,
}

impl PipelineConfig {
    /// Config targeting an overall rate `tau` (retained/original).
    pub fn with_tau(tau: f64) -> Result<Self, BudgetError> {
        Ok(PipelineConfig {
            plan: RatePlan::new(tau, 0.85, 0.9, 2.0)?,
            segment_size: 100,
            granularity: Granularity::Demonstration,
            mode: CompressionMode::Iterative,
            strict_budget: false,
            omit_timings: false,
        })
    }

    /// Config targeting a compression ratio `r >= 1` (original/retained);
    /// the internal rate is `1/r`.
    pub fn with_ratio(ratio: f64) -> Result<Self, BudgetError> {
        if ratio < 1.0 || !ratio.is_finite() {
            return Err(BudgetError::InvalidRate {
                name: "ratio",
                value: ratio,
            });
        }
        Self::with_tau(1.0 / ratio)
    }
}

/// Stage-tagged pipeline error.
#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("parse: {0}")]
    Parse(#[from] ParseError),
    #[error("budget: {0}")]
    Budget(#[from] BudgetError),
    #[error("token-compression: {0}")]
    TokenStage(TokenStageError),
    #[error("backend: {0}")]
    Backend(#[from] BackendError),
}

impl From<TokenStageError> for PipelineError {
    fn from(err: TokenStageError) -> Self {
        PipelineError::TokenStage(err)
    }
}

impl PipelineError {
    /// True when the root cause is the scoring backend.
    pub fn is_backend(&self) -> bool {
        matches!(
            self,
            PipelineError::Backend(_) | PipelineError::TokenStage(TokenStageError::Backend { .. })
        )
    }
}

/// Coarse-stage outcome recorded in the run report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    /// False when the prompt had no demonstration tokens and the coarse
    /// stage was skipped.
    pub applied: bool,
    pub granularity: Granularity,
    /// Rate derived for demonstrations from the overall target.
    pub tau_dems: f64,
    /// The derived rate was negative and clamped to zero; the targets for
    /// instruction and question are infeasible at this overall rate.
    pub tau_dems_clamped: bool,
    /// Rate actually applied to demonstration segments: the demonstration
    /// token budget spread over the tokens that survived unit selection.
    pub dems_rate_applied: f64,
    pub delta_tau: f64,
    /// Unit selection overshot the token budget, so no leftover was
    /// reallocated.
    pub overshoot: bool,
    /// There was no instruction or question to receive leftover budget.
    pub no_recipients: bool,
    /// Some segment rate hit the 1.0 ceiling.
    pub rate_clamped: bool,
    pub unit_count: usize,
    pub selected_indices: Vec<usize>,
    pub budget_tokens: f64,
    pub used_tokens: usize,
}

impl BudgetReport {
    fn skipped(
        granularity: Granularity,
        delta_tau: f64,
        clamped: bool,
        rate_clamped: bool,
    ) -> Self {
        BudgetReport {
            applied: false,
            granularity,
            tau_dems: 0.0,
            tau_dems_clamped: clamped,
            dems_rate_applied: 0.0,
            delta_tau,
            overshoot: false,
            no_recipients: false,
            rate_clamped,
            unit_count: 0,
            selected_indices: Vec::new(),
            budget_tokens: 0.0,
            used_tokens: 0,
        }
    }

    /// True when any clamp fired during allocation; used by reporting to
    /// mark prompts whose achieved rate cannot track the target.
    pub fn any_clamp(&self) -> bool {
        self.tau_dems_clamped || self.rate_clamped
    }
}

/// Wall-clock stage timings in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub budget_ms: f64,
    pub token_stage_ms: f64,
    pub backend_ms: f64,
    pub total_ms: f64,
}

/// Per-prompt compression report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptReport {
    pub schema_version: u32,
    pub target_tau: f64,
    pub target_ratio: f64,
    pub original_tokens: usize,
    pub compressed_tokens: usize,
    pub achieved_tau: f64,
    pub achieved_ratio: Option<f64>,
    pub lengths: ComponentLengths,
    pub budget: BudgetReport,
    pub mode: CompressionMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timings: Option<StageTimings>,
}

/// A compression run's full outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressionOutcome {
    pub compressed: CompressedPrompt,
    pub report: PromptReport,
}

/// One coarse-selectable unit with its tokens and bookkeeping.
struct CoarseUnit {
    text: String,
    separator: String,
    demo_index: usize,
    token_count: usize,
}

/// Backend wrapper that accumulates time spent inside scoring calls.
struct TimedBackend<'a> {
    inner: &'a dyn PplBackend,
    nanos: AtomicU64,
}

impl<'a> TimedBackend<'a> {
    fn new(inner: &'a dyn PplBackend) -> Self {
        TimedBackend {
            inner,
            nanos: AtomicU64::new(0),
        }
    }

    fn elapsed_ms(&self) -> f64 {
        self.nanos.load(Ordering::Relaxed) as f64 / 1e6
    }
}

impl PplBackend for TimedBackend<'_> {
    fn tokenize(&self, text: &str) -> Result<Vec<String>, BackendError> {
        let start = Instant::now();
        let result = self.inner.tokenize(text);
        self.nanos
            .fetch_add(start.elapsed().as_nanos() as u64, Ordering::Relaxed);
        result
    }

    fn context_limit(&self) -> usize {
        self.inner.context_limit()
    }

    fn window_overlap(&self) -> usize {
        self.inner.window_overlap()
    }

    fn score(&self, request: &ScoreRequest) -> Result<Vec<ScoredToken>, BackendError> {
        let start = Instant::now();
        let result = self.inner.score(request);
        self.nanos
            .fetch_add(start.elapsed().as_nanos() as u64, Ordering::Relaxed);
        result
    }

    fn detokenize(&self, tokens: &[String]) -> String {
        self.inner.detokenize(tokens)
    }
}

/// Parses and compresses a structured-prompt JSON document.
pub fn compress_document(
    document: &str,
    config: &PipelineConfig,
    backend: &dyn PplBackend,
) -> Result<CompressionOutcome, PipelineError> {
    let prompt = parse_prompt(document)?;
    compress_prompt(&prompt, config, backend)
}

/// Compresses a parsed prompt: coarse unit selection under the token budget,
/// then segment-wise token-level compression.
pub fn compress_prompt(
    prompt: &StructuredPrompt,
    config: &PipelineConfig,
    backend: &dyn PplBackend,
) -> Result<CompressionOutcome, PipelineError> {
    config.plan.validate()?;
    let total_start = Instant::now();
    let timed = TimedBackend::new(backend);

    let instruction_text = prompt.instruction.trim_end().to_string();
    let question_text = prompt.question.trim_end().to_string();
    let instruction_tokens = timed.tokenize(&instruction_text)?;
    let question_tokens = timed.tokenize(&question_text)?;

    let units = build_units(prompt, config.granularity, &timed)?;
    let lengths = ComponentLengths {
        instruction: instruction_tokens.len(),
        demonstrations: units.iter().map(|u| u.token_count).sum(),
        question: question_tokens.len(),
    };

    // Coarse stage.
    let budget_start = Instant::now();
    let plan = &config.plan;
    let identity_run = plan.tau >= 1.0;
    let (budget, dems_tokens) = if lengths.demonstrations == 0 {
        let report = no_demo_budget(plan, &lengths, config.granularity, identity_run);
        (report, Vec::new())
    } else {
        let demo_rate = derive_demo_rate(plan, &lengths)?;
        let mut perplexities = Vec::with_capacity(units.len());
        for unit in &units {
            perplexities.push(timed.unit_perplexity(&unit.text)?);
        }
        let unit_lens: Vec<UnitLen> = units
            .iter()
            .enumerate()
            .map(|(index, unit)| UnitLen {
                index,
                tokens: unit.token_count,
            })
            .collect();
        let selection = select_units(
            &unit_lens,
            demo_rate.tau_dems,
            plan.k,
            lengths.demonstrations,
            &perplexities,
            config.strict_budget,
        )?;
        let realloc = reallocate(
            plan,
            demo_rate.tau_dems,
            &lengths,
            selection.selected_tokens,
        );

        // The token stage must spend exactly the demonstration token budget
        // from the rate derivation, so the rate applied to demonstration
        // segments is that budget spread over the selected tokens.
        let dems_token_budget = demo_rate.tau_dems * lengths.demonstrations as f64;
        let raw_dems_rate = if selection.selected_tokens == 0 {
            0.0
        } else {
            dems_token_budget / selection.selected_tokens as f64
        };
        let mut delta_tau = realloc.delta_tau;
        let mut dems_rate = raw_dems_rate;
        if identity_run {
            delta_tau = delta_tau.max(1.0);
            dems_rate = 1.0;
        }
        let rate_clamped =
            dems_rate > 1.0 || plan.tau_ins + delta_tau > 1.0 || plan.tau_que + delta_tau > 1.0;

        let selected: HashSet<usize> = selection.units.iter().map(|u| u.index).collect();
        let assembled = assemble_selected(&units, &selected);
        let dems_tokens = timed.tokenize(&assembled)?;
        debug_assert_eq!(dems_tokens.len(), selection.selected_tokens);

        let report = BudgetReport {
            applied: true,
            granularity: config.granularity,
            tau_dems: demo_rate.tau_dems,
            tau_dems_clamped: demo_rate.clamped,
            dems_rate_applied: dems_rate.clamp(0.0, 1.0),
            delta_tau,
            overshoot: realloc.overshoot,
            no_recipients: realloc.no_recipients,
            rate_clamped,
            unit_count: units.len(),
            selected_indices: selection.units.iter().map(|u| u.index).collect(),
            budget_tokens: plan.k * demo_rate.tau_dems * lengths.demonstrations as f64,
            used_tokens: selection.selected_tokens,
        };
        (report, dems_tokens)
    };
    let budget_ms = budget_start.elapsed().as_secs_f64() * 1e3;

    // Token stage.
    let token_start = Instant::now();
    let components = [
        TokenizedComponent {
            component: Component::Instruction,
            tokens: instruction_tokens,
        },
        TokenizedComponent {
            component: Component::Demonstrations,
            tokens: dems_tokens,
        },
        TokenizedComponent {
            component: Component::Question,
            tokens: question_tokens,
        },
    ];
    let segments = segment(&components, config.segment_size);
    let compressed = compress_segments(
        &segments,
        plan,
        budget.dems_rate_applied,
        budget.delta_tau,
        &timed,
        config.mode,
        lengths.total(),
    )?;
    let token_stage_ms = token_start.elapsed().as_secs_f64() * 1e3;

    let timings = if config.omit_timings {
        None
    } else {
        Some(StageTimings {
            budget_ms,
            token_stage_ms,
            backend_ms: timed.elapsed_ms(),
            total_ms: total_start.elapsed().as_secs_f64() * 1e3,
        })
    };

    let report = PromptReport {
        schema_version: SCHEMA_VERSION,
        target_tau: plan.tau,
        target_ratio: 1.0 / plan.tau,
        original_tokens: compressed.stats.original_tokens,
        compressed_tokens: compressed.stats.compressed_tokens,
        achieved_tau: compressed.stats.achieved_tau,
        achieved_ratio: compressed.stats.achieved_ratio,
        lengths,
        budget,
        mode: config.mode,
        timings,
    };

    Ok(CompressionOutcome { compressed, report })
}

/// Allocation for prompts without demonstrations: any budget beyond the
/// planned instruction/question spend is handed straight to them, floored at
/// zero.
fn no_demo_budget(
    plan: &RatePlan,
    lengths: &ComponentLengths,
    granularity: Granularity,
    identity_run: bool,
) -> BudgetReport {
    let recipients = (lengths.instruction + lengths.question) as f64;
    let mut clamped = false;
    let mut delta_tau = if recipients == 0.0 {
        0.0
    } else {
        let reserved =
            plan.tau_ins * lengths.instruction as f64 + plan.tau_que * lengths.question as f64;
        let surplus = plan.tau * lengths.total() as f64 - reserved;
        if surplus < 0.0 {
            clamped = true;
            0.0
        } else {
            surplus / recipients
        }
    };
    if identity_run {
        delta_tau = delta_tau.max(1.0);
    }
    let rate_clamped = plan.tau_ins + delta_tau > 1.0 || plan.tau_que + delta_tau > 1.0;
    BudgetReport::skipped(granularity, delta_tau, clamped, rate_clamped)
}

/// Builds the coarse-selectable units for the configured granularity,
/// skipping units that carry no tokens.
fn build_units(
    prompt: &StructuredPrompt,
    granularity: Granularity,
    backend: &dyn PplBackend,
) -> Result<Vec<CoarseUnit>, BackendError> {
    let mut units = Vec::new();
    for (demo_index, demo) in prompt.demonstrations.iter().enumerate() {
        let trimmed = demo.trim_end();
        if trimmed.is_empty() {
            continue;
        }
        match granularity {
            Granularity::Demonstration => {
                let tokens = backend.tokenize(trimmed)?;
                units.push(CoarseUnit {
                    text: trimmed.to_string(),
                    separator: String::new(),
                    demo_index,
                    token_count: tokens.len(),
                });
            }
            Granularity::Sentence => {
                for sentence in split_sentences(trimmed) {
                    debug_assert_eq!(sentence.kind, UnitKind::Sentence);
                    let tokens = backend.tokenize(&sentence.text)?;
                    if tokens.is_empty() {
                        continue;
                    }
                    units.push(CoarseUnit {
                        text: sentence.text,
                        separator: sentence.separator,
                        demo_index,
                        token_count: tokens.len(),
                    });
                }
            }
        }
    }
    Ok(units)
}

/// Reassembles the selected units into the demonstrations text: units keep
/// their original order, a kept unit's recorded separator joins it to the
/// next kept unit of the same demonstration, demonstrations are joined with
/// a newline.
fn assemble_selected(units: &[CoarseUnit], selected: &HashSet<usize>) -> String {
    let mut demo_texts: Vec<String> = Vec::new();
    let mut current_demo: Option<usize> = None;
    let mut current = String::new();
    let mut pending_separator: Option<&str> = None;

    for (index, unit) in units.iter().enumerate() {
        if !selected.contains(&index) {
            continue;
        }
        if current_demo != Some(unit.demo_index) {
            if current_demo.is_some() {
                demo_texts.push(std::mem::take(&mut current));
            }
            current_demo = Some(unit.demo_index);
            pending_separator = None;
        }
        if let Some(sep) = pending_separator.take() {
            if sep.is_empty() {
                current.push(' ');
            } else {
                current.push_str(sep);
            }
        }
        current.push_str(&unit.text);
        pending_separator = Some(unit.separator.as_str());
    }
    if current_demo.is_some() {
        demo_texts.push(current);
    }
    let mut assembled = demo_texts.join("\n");
    let trimmed_len = assembled.trim_end().len();
    assembled.truncate(trimmed_len);
    assembled
}
