use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use promptpress::align::{export_alignment_dataset, read_alignment_pairs, AlignError};
use promptpress::backend::http::{HttpBackend, HttpBackendConfig};
use promptpress::backend::surrogate::{SurrogateError, SurrogateModel};
use promptpress::backend::{BackendError, PplBackend};
use promptpress::budget::BudgetError;
use promptpress::cost::estimate_cost;
use promptpress::harness::{render_table, run_corpus, CorpusOptions};
use promptpress::pipeline::{
    compress_document, CompressionOutcome, PipelineConfig, PipelineError, SCHEMA_VERSION,
};
use promptpress::prompt::serialize_prompt;
use promptpress::token_compress::{CompressionMode, TokenStageError};
use promptpress::StructuredPrompt;

const EXIT_USAGE: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_BACKEND: u8 = 3;

#[derive(Parser)]
#[command(
    name = "promptpress",
    version,
    about = "Compress structured LLM prompts to a target ratio using per-token scores from a small language model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compress one structured-prompt JSON document.
    Compress(CompressArgs),
    /// Compress every prompt in a corpus directory and report aggregates.
    Bench(BenchArgs),
    /// Evaluate the relative inference-cost model for a compression ratio.
    Cost(CostArgs),
    /// Train the n-gram surrogate scorer on a text corpus.
    TrainSurrogate(TrainArgs),
    /// Export (instruction, output) pairs as an alignment dataset.
    ExportAlign(ExportArgs),
}

#[derive(Args)]
struct RateArgs {
    /// Target compression ratio (original/compressed), >= 1.
    #[arg(long)]
    ratio: f64,
    /// Retention rate for the instruction component.
    #[arg(long = "ins-rate", default_value_t = 0.85)]
    ins_rate: f64,
    /// Retention rate for the question component.
    #[arg(long = "que-rate", default_value_t = 0.9)]
    que_rate: f64,
    /// Granular control coefficient: loosens the coarse-stage budget.
    #[arg(long, default_value_t = 2.0)]
    k: f64,
    /// Segment size (tokens) for token-level compression.
    #[arg(long = "segment-size", default_value_t = 100)]
    segment_size: usize,
    /// Coarse selection granularity.
    #[arg(long, value_enum, default_value_t = GranularityArg::Demo)]
    granularity: GranularityArg,
    /// Conditioning mode for segment scoring.
    #[arg(long, value_enum, default_value_t = ModeArg::Iterative)]
    mode: ModeArg,
    /// Never let coarse selection exceed its token budget.
    #[arg(long = "strict-budget")]
    strict_budget: bool,
    /// Drop wall-clock timings from reports (byte-reproducible output).
    #[arg(long = "omit-timings")]
    omit_timings: bool,
}

#[derive(Args)]
struct BackendArgs {
    /// Scoring backend: `surrogate:<model-path>` or `http:<url>`.
    #[arg(long, env = "PROMPTPRESS_BACKEND")]
    backend: Option<String>,
    /// HTTP request timeout in milliseconds.
    #[arg(
        long = "http-timeout-ms",
        env = "PROMPTPRESS_HTTP_TIMEOUT_MS",
        default_value_t = 30_000
    )]
    http_timeout_ms: u64,
    /// HTTP retry cap for transient failures.
    #[arg(
        long = "http-retries",
        env = "PROMPTPRESS_HTTP_RETRIES",
        default_value_t = 3
    )]
    http_retries: u32,
}

#[derive(Args)]
struct CompressArgs {
    /// Input document path, or `-` for stdin.
    #[arg(long)]
    input: String,
    /// Treat the input as plain text and wrap it as a question-only prompt.
    #[arg(long)]
    plain: bool,
    /// Compressed text destination, or `-` for stdout.
    #[arg(long, default_value = "-")]
    output: String,
    /// Write the JSON run report here.
    #[arg(long)]
    stats: Option<PathBuf>,
    #[command(flatten)]
    rates: RateArgs,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct BenchArgs {
    /// Directory of structured-prompt `.json` files.
    #[arg(long)]
    dir: PathBuf,
    /// Write the machine-readable corpus report here.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Concurrent prompt workers.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Process only the first N files (lexicographic order).
    #[arg(long)]
    limit: Option<usize>,
    #[command(flatten)]
    rates: RateArgs,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct CostArgs {
    /// Compression ratio, >= 1.
    #[arg(long)]
    ratio: f64,
    #[arg(long, default_value_t = 2.0)]
    k: f64,
    /// Per-token cost of the scorer relative to the target model.
    #[arg(long = "cost-ratio", default_value_t = 0.04)]
    cost_ratio: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Training corpus text file.
    #[arg(long)]
    corpus: PathBuf,
    /// N-gram order, >= 1.
    #[arg(long)]
    order: usize,
    /// Add-delta smoothing constant.
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    /// Model file destination.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    /// Newline-delimited JSON file of {"instruction", "output"} pairs, or `-`.
    #[arg(long)]
    pairs: String,
    /// Destination dataset file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum GranularityArg {
    Demo,
    Sentence,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Iterative,
    Single,
}

/// CLI failure with its exit code.
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn input(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_INPUT,
            message: message.into(),
        }
    }

    fn backend(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_BACKEND,
            message: message.into(),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(err: PipelineError) -> Self {
        let message = err.to_string();
        match &err {
            PipelineError::Parse(_) => CliError::input(message),
            PipelineError::Budget(BudgetError::InvalidRate { .. }) => CliError::usage(message),
            PipelineError::Budget(_) => CliError::input(message),
            PipelineError::Backend(_) => CliError::backend(message),
            PipelineError::TokenStage(TokenStageError::Backend { .. }) => {
                CliError::backend(message)
            }
            PipelineError::TokenStage(_) => CliError::input(message),
        }
    }
}

impl From<SurrogateError> for CliError {
    fn from(err: SurrogateError) -> Self {
        match &err {
            SurrogateError::InvalidOrder | SurrogateError::InvalidSmoothing(_) => {
                CliError::usage(err.to_string())
            }
            _ => CliError::input(err.to_string()),
        }
    }
}

impl From<BackendError> for CliError {
    fn from(err: BackendError) -> Self {
        CliError::backend(err.to_string())
    }
}

impl From<AlignError> for CliError {
    fn from(err: AlignError) -> Self {
        CliError::input(err.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version are not usage errors.
            if err.use_stderr() {
                eprint!("{err}");
                return ExitCode::from(EXIT_USAGE);
            }
            print!("{err}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", err.message);
            ExitCode::from(err.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Compress(args) => run_compress(args),
        Command::Bench(args) => run_bench(args),
        Command::Cost(args) => run_cost(args),
        Command::TrainSurrogate(args) => run_train(args),
        Command::ExportAlign(args) => run_export(args),
    }
}

fn build_config(rates: &RateArgs) -> Result<PipelineConfig, CliError> {
    let mut config =
        PipelineConfig::with_ratio(rates.ratio).map_err(|e| CliError::usage(e.to_string()))?;
    config.plan.tau_ins = rates.ins_rate;
    config.plan.tau_que = rates.que_rate;
    config.plan.k = rates.k;
    config
        .plan
        .validate()
        .map_err(|e| CliError::usage(e.to_string()))?;
    if rates.segment_size == 0 {
        return Err(CliError::usage("segment size must be at least 1"));
    }
    config.segment_size = rates.segment_size;
    config.granularity = match rates.granularity {
        GranularityArg::Demo => promptpress::pipeline::Granularity::Demonstration,
        GranularityArg::Sentence => promptpress::pipeline::Granularity::Sentence,
    };
    config.mode = match rates.mode {
        ModeArg::Iterative => CompressionMode::Iterative,
        ModeArg::Single => CompressionMode::SinglePass,
    };
    config.strict_budget = rates.strict_budget;
    config.omit_timings = rates.omit_timings;
    Ok(config)
}

fn build_backend(args: &BackendArgs) -> Result<Box<dyn PplBackend>, CliError> {
    let spec = args.backend.as_deref().ok_or_else(|| {
        CliError::usage(
            "no backend configured: pass --backend surrogate:<model-path> or \
             --backend http:<url> (or set PROMPTPRESS_BACKEND)",
        )
    })?;
    if let Some(path) = spec.strip_prefix("surrogate:") {
        let model = SurrogateModel::load(Path::new(path))?;
        return Ok(Box::new(model));
    }
    let url = if spec.starts_with("http://") || spec.starts_with("https://") {
        spec.to_string()
    } else if let Some(rest) = spec.strip_prefix("http:") {
        rest.to_string()
    } else {
        return Err(CliError::usage(format!(
            "unrecognized backend spec {spec:?}: expected surrogate:<model-path> or http:<url>"
        )));
    };
    let mut config = HttpBackendConfig::new(url);
    config.timeout = Duration::from_millis(args.http_timeout_ms);
    config.max_retries = args.http_retries;
    Ok(Box::new(HttpBackend::new(config)?))
}

fn read_input(source: &str) -> Result<String, CliError> {
    if source == "-" {
        let mut buffer = String::new();
        std::io::stdin()
            .read_to_string(&mut buffer)
            .map_err(|e| CliError::input(format!("cannot read stdin: {e}")))?;
        Ok(buffer)
    } else {
        std::fs::read_to_string(source)
            .map_err(|e| CliError::input(format!("cannot read {source}: {e}")))
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)
        .and_then(|()| std::fs::rename(&tmp, path))
        .map_err(|e| CliError::input(format!("cannot write {}: {e}", path.display())))
}

fn write_output(target: &str, content: &str) -> Result<(), CliError> {
    if target == "-" {
        let mut stdout = std::io::stdout().lock();
        stdout
            .write_all(content.as_bytes())
            .and_then(|()| stdout.write_all(b"\n"))
            .map_err(|e| CliError::input(format!("cannot write stdout: {e}")))
    } else {
        write_atomic(Path::new(target), format!("{content}\n").as_bytes())
    }
}

fn warn_on_clamps(outcome: &CompressionOutcome) {
    let budget = &outcome.report.budget;
    if budget.tau_dems_clamped {
        if budget.applied {
            eprintln!(
                "warning: instruction/question rates exceed the overall budget; \
                 demonstration rate clamped to 0. Lower --ins-rate/--que-rate or raise --ratio."
            );
        } else {
            eprintln!(
                "warning: the target ratio is not reachable: the instruction/question \
                 rate floors alone exceed the overall budget. Lower --ins-rate/--que-rate."
            );
        }
    }
    if budget.no_recipients {
        eprintln!("warning: leftover budget has no instruction or question to flow to");
    }
}

fn run_compress(args: CompressArgs) -> Result<(), CliError> {
    let config = build_config(&args.rates)?;
    let backend = build_backend(&args.backend)?;
    let raw = read_input(&args.input)?;
    let document = if args.plain {
        serialize_prompt(&StructuredPrompt::from_plain_text(raw))
    } else {
        raw
    };
    let outcome = compress_document(&document, &config, backend.as_ref())?;
    warn_on_clamps(&outcome);
    write_output(&args.output, &outcome.compressed.text)?;
    if let Some(stats_path) = &args.stats {
        let stats = serde_json::json!({
            "report": outcome.report,
            "segments": outcome.compressed.segments,
        });
        let rendered = serde_json::to_string_pretty(&stats).expect("report serializes");
        write_atomic(stats_path, format!("{rendered}\n").as_bytes())?;
    }
    Ok(())
}

fn run_bench(args: BenchArgs) -> Result<(), CliError> {
    let config = build_config(&args.rates)?;
    let backend = build_backend(&args.backend)?;
    let options = CorpusOptions {
        workers: args.workers.max(1),
        limit: args.limit,
    };
    let report = run_corpus(&args.dir, &config, &options, backend.as_ref())
        .map_err(|e| CliError::input(e.to_string()))?;
    print!("{}", render_table(&report));
    if let Some(json_path) = &args.json {
        let rendered = serde_json::to_string_pretty(&report).expect("report serializes");
        write_atomic(json_path, format!("{rendered}\n").as_bytes())?;
    }
    if !report.files.is_empty() && report.aggregates.prompts_ok == 0 {
        return Err(CliError::input("every corpus file failed".to_string()));
    }
    Ok(())
}

fn run_cost(args: CostArgs) -> Result<(), CliError> {
    let estimate = estimate_cost(args.ratio, args.k, args.cost_ratio)
        .map_err(|e| CliError::usage(e.to_string()))?;
    let output = serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "ratio": estimate.ratio,
        "k": estimate.k,
        "cost_ratio": estimate.cost_ratio,
        "relative_cost": estimate.relative_cost,
        "savings_multiple": estimate.savings_multiple,
    });
    println!(
        "{}",
        serde_json::to_string_pretty(&output).expect("estimate serializes")
    );
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<(), CliError> {
    let corpus = std::fs::read_to_string(&args.corpus)
        .map_err(|e| CliError::input(format!("cannot read {}: {e}", args.corpus.display())))?;
    let model = SurrogateModel::train(&corpus, args.order, args.delta)?;
    model.save(&args.out)?;
    eprintln!(
        "trained order-{} model: vocab {} types, written to {}",
        model.order(),
        model.vocab_size(),
        args.out.display()
    );
    Ok(())
}

fn run_export(args: ExportArgs) -> Result<(), CliError> {
    let raw = read_input(&args.pairs)?;
    let pairs = read_alignment_pairs(&raw)?;
    export_alignment_dataset(&pairs, &args.out)?;
    eprintln!("wrote {} pairs to {}", pairs.len(), args.out.display());
    Ok(())
}
