//! The coreference-resolution evaluation pipeline as a single executable:
//! corpus validation, synthetic corpus generation, prompt inspection,
//! experiment runs, re-scoring, table reports, and SFT export.
//!
//! Exit codes: 0 success, 2 usage/config error, 3 backend failure,
//! 4 data integrity error. Errors go to stderr with a stable prefix code
//! (`E_CONFIG`, `E_BACKEND`, `E_DATA`, `E_INTERNAL`).

use clap::{Args, CommandFactory, Parser, Subcommand};
use sitref_core::backends::BackendError;
use sitref_core::corpus::{load_native, units, validate, CorpusError, Domain, UnitFilter};
use sitref_core::promptkit::{
    build_prompt, default_fewshot_bank, AblationConfig, PromptAssets, PromptMode, PromptOptions,
};
use sitref_core::report::{
    counts_table, delta_table, f1_consistent, matrix_table, MatrixCell, RunRef, Table, TableFormat,
};
use sitref_core::runner::{
    rescore, run_experiment, ExperimentConfig, RunSummary, RunnerError, ScoringMode,
};
use sitref_core::serialize::MetadataStyle;
use sitref_core::sftexport::export_sft;
use sitref_core::synth::{generate, write_native, SynthProfile};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "sitref",
    version,
    about = "Evaluation harness for object coreference resolution in situated dialogue",
    max_term_width = 100
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a native corpus file against every store invariant.
    Validate {
        /// Native-format corpus file.
        corpus: PathBuf,
    },
    /// Generate a deterministic synthetic corpus from a profile.
    Synth {
        /// Profile JSON (domain, n_dialogues, fractions, seed, ...).
        #[arg(long)]
        profile: PathBuf,
        /// Output corpus path (native format).
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the exact prompt a unit would receive under a configuration.
    RenderPrompt(RenderPromptArgs),
    /// Run an experiment described by a config file.
    Run(RunArgs),
    /// Recompute metrics from a records file without backend calls.
    Rescore {
        /// Records file (one JSON record per line).
        records: PathBuf,
        /// Count out-of-scene predictions as false positives.
        #[arg(long, conflicts_with = "lenient")]
        strict: bool,
        /// Drop out-of-scene predictions from scoring (default).
        #[arg(long)]
        lenient: bool,
    },
    /// Render comparison tables from run summaries.
    Report(ReportArgs),
    /// Export supervised fine-tuning records (prompt -> marker target).
    ExportSft(ExportSftArgs),
}

#[derive(Args)]
struct RenderPromptArgs {
    /// Native-format corpus file.
    #[arg(long)]
    corpus: PathBuf,
    /// Unit address as `<dialogue_id>:<turn_index>`.
    #[arg(long)]
    unit: String,
    /// zero-shot | few-shot | few-shot-reasoning
    #[arg(long, value_parser = parse_mode)]
    mode: PromptMode,
    /// all-info | no-metadata | no-object-references
    #[arg(long, default_value = "all-info", value_parser = parse_ablation)]
    ablation: AblationConfig,
    /// structured_raw | structured_nl_coords | full_nl
    #[arg(long, default_value = "full_nl", value_parser = parse_style)]
    style: MetadataStyle,
    /// Prompt assets directory (builtin assets when omitted).
    #[arg(long)]
    assets: Option<PathBuf>,
    /// Keep only the last N history turns.
    #[arg(long)]
    max_history_turns: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Override the config's worker count.
    #[arg(long)]
    parallelism: Option<usize>,
    /// Override the config's unit cap.
    #[arg(long)]
    max_units: Option<usize>,
    /// Override the config's prompt mode.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<PromptMode>,
    /// Override the config's ablation.
    #[arg(long, value_parser = parse_ablation)]
    ablation: Option<AblationConfig>,
    /// Override the config's metadata style.
    #[arg(long, value_parser = parse_style)]
    style: Option<MetadataStyle>,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run summary files (summary.json) in order.
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    /// delta | matrix | counts
    #[arg(long)]
    kind: String,
    /// md | csv | txt
    #[arg(long, default_value = "txt", value_parser = parse_format)]
    format: TableFormat,
    /// Comma-separated labels overriding the summaries' run ids.
    #[arg(long)]
    labels: Option<String>,
    /// Also write the table under `<dir>/reports/`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportSftArgs {
    /// Native-format corpus file.
    #[arg(long)]
    corpus: PathBuf,
    /// Restrict to one domain (fashion | furniture).
    #[arg(long, value_parser = parse_domain)]
    domain: Option<Domain>,
    /// structured_raw | structured_nl_coords | full_nl
    #[arg(long, default_value = "full_nl", value_parser = parse_style)]
    style: MetadataStyle,
    /// Output records file.
    #[arg(long)]
    out: PathBuf,
    /// Prompt assets directory (builtin assets when omitted).
    #[arg(long)]
    assets: Option<PathBuf>,
}

fn parse_mode(s: &str) -> Result<PromptMode, String> {
    s.parse()
}
fn parse_ablation(s: &str) -> Result<AblationConfig, String> {
    s.parse()
}
fn parse_style(s: &str) -> Result<MetadataStyle, String> {
    s.parse()
}
fn parse_domain(s: &str) -> Result<Domain, String> {
    s.parse()
}
fn parse_format(s: &str) -> Result<TableFormat, String> {
    s.parse()
}

struct CliError {
    prefix: &'static str,
    message: String,
    code: u8,
}

impl CliError {
    fn config(message: impl Into<String>) -> CliError {
        CliError {
            prefix: "E_CONFIG",
            message: message.into(),
            code: 2,
        }
    }

    fn data(message: impl Into<String>) -> CliError {
        CliError {
            prefix: "E_DATA",
            message: message.into(),
            code: 4,
        }
    }

    fn backend(message: impl Into<String>) -> CliError {
        CliError {
            prefix: "E_BACKEND",
            message: message.into(),
            code: 3,
        }
    }

    fn internal(message: impl Into<String>) -> CliError {
        CliError {
            prefix: "E_INTERNAL",
            message: message.into(),
            code: 1,
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> CliError {
        match &e {
            CorpusError::Io { .. } => CliError::config(e.to_string()),
            _ => CliError::data(e.to_string()),
        }
    }
}

impl From<RunnerError> for CliError {
    fn from(e: RunnerError) -> CliError {
        match &e {
            RunnerError::Config(_) | RunnerError::Prompt(_) => CliError::config(e.to_string()),
            RunnerError::Backend(_) | RunnerError::Interrupted { .. } => {
                CliError::backend(e.to_string())
            }
            RunnerError::Corpus(_) | RunnerError::MalformedRecord { .. } => {
                CliError::data(e.to_string())
            }
            _ => CliError::internal(e.to_string()),
        }
    }
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> CliError {
        CliError::backend(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}: {}", e.prefix, e.message);
            ExitCode::from(e.code)
        }
    }
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Validate { corpus } => cmd_validate(&corpus),
        Command::Synth { profile, out } => cmd_synth(&profile, &out),
        Command::RenderPrompt(args) => cmd_render_prompt(args),
        Command::Run(args) => cmd_run(args),
        Command::Rescore {
            records, strict, ..
        } => cmd_rescore(&records, strict),
        Command::Report(args) => cmd_report(args),
        Command::ExportSft(args) => cmd_export_sft(args),
    }
}

fn cmd_validate(corpus: &Path) -> Result<(), CliError> {
    let store = load_native(corpus)?;
    let report = validate(&store);
    let n_units = units(&store, &UnitFilter::default()).len();
    println!(
        "corpus: {} dialogues, {} scenes, {} units",
        store.dialogues.len(),
        store.scenes.len(),
        n_units
    );
    if report.is_clean() {
        println!("validation: clean");
        Ok(())
    } else {
        for finding in &report.findings {
            println!("finding: {finding}");
        }
        Err(CliError::data(format!(
            "corpus has {} validation findings",
            report.findings.len()
        )))
    }
}

fn cmd_synth(profile_path: &Path, out: &Path) -> Result<(), CliError> {
    let text = std::fs::read_to_string(profile_path)
        .map_err(|e| CliError::config(format!("cannot read {}: {e}", profile_path.display())))?;
    let profile: SynthProfile = serde_json::from_str(&text)
        .map_err(|e| CliError::config(format!("{}: {e}", profile_path.display())))?;
    let store = generate(&profile).map_err(|e| CliError::config(e.to_string()))?;
    write_native(&store, out).map_err(|e| CliError::internal(e.to_string()))?;
    let n_units = units(&store, &UnitFilter::default()).len();
    println!(
        "wrote {}: {} dialogues, {} scenes, {} units (seed {})",
        out.display(),
        store.dialogues.len(),
        store.scenes.len(),
        n_units,
        profile.seed
    );
    Ok(())
}

fn load_assets(dir: &Option<PathBuf>) -> Result<std::borrow::Cow<'static, PromptAssets>, CliError> {
    match dir {
        Some(d) => PromptAssets::load(d)
            .map(std::borrow::Cow::Owned)
            .map_err(|e| CliError::config(e.to_string())),
        None => Ok(std::borrow::Cow::Borrowed(PromptAssets::builtin())),
    }
}

fn cmd_render_prompt(args: RenderPromptArgs) -> Result<(), CliError> {
    let store = load_native(&args.corpus)?;
    let (dialogue_id, turn_index) = args
        .unit
        .rsplit_once(':')
        .and_then(|(d, t)| t.parse::<u32>().ok().map(|t| (d.to_string(), t)))
        .ok_or_else(|| {
            CliError::config(format!(
                "bad unit address `{}` (want <dialogue_id>:<turn_index>)",
                args.unit
            ))
        })?;

    let all = units(&store, &UnitFilter::default());
    let unit = all
        .iter()
        .find(|u| u.dialogue_id == dialogue_id && u.turn_index == turn_index)
        .ok_or_else(|| CliError::data(format!("unit `{}` not found", args.unit)))?;

    let assets = load_assets(&args.assets)?;
    let bank = if args.mode == PromptMode::ZeroShot {
        Vec::new()
    } else {
        default_fewshot_bank(args.style, &assets).map_err(|e| CliError::config(e.to_string()))?
    };
    let options = PromptOptions {
        max_history_turns: args.max_history_turns,
    };
    let bundle = build_prompt(
        unit,
        args.mode,
        args.ablation,
        args.style,
        &bank,
        &assets,
        &options,
    )
    .map_err(|e| CliError::config(e.to_string()))?;

    println!("unit: {}", args.unit);
    println!(
        "configuration: mode={} ablation={} style={}",
        args.mode, args.ablation, args.style
    );
    println!("fingerprint: {}", bundle.fingerprint);
    println!("gold: {:?}", unit.gold.iter().collect::<Vec<_>>());
    println!("--- system ---");
    println!("{}", bundle.system_text);
    println!("--- user ---");
    println!("{}", bundle.user_text);
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<(), CliError> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(dir) = args.output_dir {
        config.output_dir = dir;
    }
    if let Some(p) = args.parallelism {
        config.parallelism = p;
    }
    if let Some(m) = args.max_units {
        config.filter.max_units = Some(m);
    }
    if let Some(m) = args.mode {
        config.mode = m;
    }
    if let Some(a) = args.ablation {
        config.ablation = a;
    }
    if let Some(s) = args.style {
        config.style = s;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }

    println!(
        "effective config: {}",
        serde_json::to_string(&config).expect("config serializes")
    );
    let summary = run_experiment(&config)?;
    print_summary(&summary);
    Ok(())
}

fn print_summary(summary: &RunSummary) {
    let m = &summary.metrics;
    println!("run: {}", summary.run_id);
    println!(
        "units: {} (from cache: {}, out-of-scene id rate: {:.4})",
        summary.n_units, summary.n_from_cache, summary.dropped_id_rate
    );
    println!("precision: {:.2}", m.precision);
    println!("recall: {:.2}", m.recall);
    println!("f1: {:.2}", m.f1);
    println!(
        "avg predicted: {:.4}, avg correct: {:.4}, invalid output rate: {:.4}",
        m.avg_predicted, m.avg_correct, m.invalid_output_rate
    );
    for (domain, report) in &m.per_domain {
        println!(
            "{domain}: precision {:.2}, recall {:.2}, f1 {:.2} ({} units)",
            report.precision, report.recall, report.f1, report.n_units
        );
    }
}

fn cmd_rescore(records: &Path, strict: bool) -> Result<(), CliError> {
    let mode = if strict {
        ScoringMode::Strict
    } else {
        ScoringMode::Lenient
    };
    let outcome = rescore(records, mode)?;
    let m = &outcome.metrics;
    println!("scoring: {}", if strict { "strict" } else { "lenient" });
    println!("precision: {:.2}", m.precision);
    println!("recall: {:.2}", m.recall);
    println!("f1: {:.2}", m.f1);
    println!(
        "units with out-of-scene ids: {} ({} ids total)",
        outcome.units_with_dropped_ids, outcome.dropped_id_count
    );
    Ok(())
}

fn load_run_ref(path: &Path, label: Option<&str>) -> Result<RunRef, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
    let summary: RunSummary = serde_json::from_str(&text)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let label = label
        .map(|l| l.to_string())
        .unwrap_or_else(|| summary.run_id.clone());
    if !f1_consistent(&summary.metrics) {
        eprintln!(
            "warning: {} has inconsistent f1 ({} vs P/R {}/{})",
            path.display(),
            summary.metrics.f1,
            summary.metrics.precision,
            summary.metrics.recall
        );
    }
    Ok(RunRef::new(label, summary.metrics))
}

fn cmd_report(args: ReportArgs) -> Result<(), CliError> {
    let labels: Vec<Option<&str>> = match &args.labels {
        Some(joined) => joined.split(',').map(Some).collect(),
        None => vec![None; args.inputs.len()],
    };
    if labels.len() != args.inputs.len() {
        return Err(CliError::config(format!(
            "{} labels for {} inputs",
            labels.len(),
            args.inputs.len()
        )));
    }
    let mut runs = Vec::new();
    for (path, label) in args.inputs.iter().zip(labels) {
        runs.push(load_run_ref(path, label)?);
    }

    let table: Table = match args.kind.as_str() {
        "delta" => {
            if runs.len() != 2 {
                return Err(CliError::config(
                    "delta reports need exactly 2 inputs (baseline, variant)",
                ));
            }
            delta_table(&runs[0], &runs[1]).map_err(|e| CliError::config(e.to_string()))?
        }
        "matrix" => {
            let mut cells = Vec::new();
            for run in &runs {
                for (domain, report) in &run.summary.per_domain {
                    cells.push(MatrixCell {
                        row: run.label.clone(),
                        col: domain.to_string(),
                        f1: report.f1,
                    });
                }
            }
            matrix_table(&cells).map_err(|e| CliError::config(e.to_string()))?
        }
        "counts" => counts_table(&runs).map_err(|e| CliError::config(e.to_string()))?,
        other => return Err(CliError::config(format!("unknown report kind `{other}`"))),
    };

    let rendered = table.render(args.format);
    print!("{rendered}");
    if let Some(dir) = args.out {
        let reports_dir = dir.join("reports");
        std::fs::create_dir_all(&reports_dir).map_err(|e| {
            CliError::internal(format!("cannot create {}: {e}", reports_dir.display()))
        })?;
        let path = reports_dir.join(format!("{}.{}", args.kind, args.format));
        std::fs::write(&path, &rendered)
            .map_err(|e| CliError::internal(format!("cannot write {}: {e}", path.display())))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_export_sft(args: ExportSftArgs) -> Result<(), CliError> {
    let store = load_native(&args.corpus)?;
    let assets = load_assets(&args.assets)?;
    let count = export_sft(
        &store,
        args.domain,
        args.style,
        PromptMode::ZeroShot,
        &args.out,
        &assets,
    )
    .map_err(|e| CliError::config(e.to_string()))?;
    println!("wrote {} records to {}", count, args.out.display());
    Ok(())
}

/// Full help text for the binary and every subcommand, golden-tested.
#[allow(dead_code)]
fn full_help_text() -> String {
    let mut cmd = Cli::command();
    let mut out = cmd.render_long_help().to_string();
    for sub in cmd.get_subcommands_mut() {
        out.push_str("\n================\n");
        out.push_str(&sub.render_long_help().to_string());
    }
    out
}
