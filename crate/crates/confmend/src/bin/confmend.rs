//! Command-line entry point.
//!
//! Subcommands: `calibrate` (warmup thresholds only), `run` (full
//! benchmark under one policy), `eval` (recompile a report from a session
//! directory's archives), `replay` (re-execute archives and verify them),
//! `export-traces` (per-token confidence series as CSV/TSV), and
//! `compare` (run all three policies side by side).
//!
//! Every error path exits nonzero after printing one JSON line
//! (`{"error": ...}`) to stderr; human-readable tables go to stdout.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};

use confmend::backend::live::LiveBackend;
use confmend::backend::scripted::ScriptedBackend;
use confmend::backend::StreamingBackend;
use confmend::config::{
    load_file, resolve, BackendChoice, FileConfig, Overrides, ResolvedConfig,
};
use confmend::error::Error;
use confmend::eval::{load_dataset, Problem};
use confmend::orchestrator::{run_question, run_warmup, Policy, QuestionRun, SessionConfig};
use confmend::report::{
    compare_table, compile_from_summaries, compile_report, render_text, BenchmarkReport,
    QuestionSummary,
};
use confmend::trace::{ExportFormat, TraceStore};
use confmend::Result;

#[derive(Parser)]
#[command(
    name = "confmend",
    version,
    about = "Confidence-monitored reasoning orchestrator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate warmup traces and print each question's threshold.
    Calibrate(CalibrateArgs),
    /// Run the benchmark under one policy and archive every path.
    Run(RunArgs),
    /// Recompile and print the report for an existing session directory.
    Eval(EvalArgs),
    /// Re-execute archived runs and verify they match the archive.
    Replay(ReplayArgs),
    /// Export archived confidence trajectories as CSV or TSV.
    #[command(name = "export-traces")]
    ExportTraces(ExportArgs),
    /// Run discard, restart, and reflect on the same dataset and compare.
    Compare(RunArgs),
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Intervention policy: discard, restart, or reflect.
    #[arg(long)]
    policy: Option<Policy>,
    /// Token source: `scripted:PATH` or `live`.
    #[arg(long)]
    backend: Option<String>,
    /// Live API base URL (overrides CONFMEND_ENDPOINT).
    #[arg(long)]
    endpoint: Option<String>,
    /// Live model name (overrides CONFMEND_MODEL).
    #[arg(long)]
    model: Option<String>,
    /// Total paths per question (warmup + reasoning).
    #[arg(long)]
    budget: Option<usize>,
    /// Warmup paths per question.
    #[arg(long)]
    warmup: Option<usize>,
    /// Calibration percentile in (0, 100].
    #[arg(long)]
    percentile: Option<f64>,
    /// Sliding-window length for group confidence.
    #[arg(long)]
    window: Option<usize>,
    /// Top-k logprobs averaged into token confidence.
    #[arg(long, value_name = "K")]
    topk: Option<usize>,
    /// Base sampling seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// JSONL problem set.
    #[arg(long)]
    dataset: PathBuf,
    /// Optional directory for calibration.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// JSONL problem set.
    #[arg(long)]
    dataset: PathBuf,
    /// Session output directory (report, manifest, archives).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Session directory produced by `run`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReplayArgs {
    /// Session directory produced by `run`.
    #[arg(long)]
    out: PathBuf,
    /// Archive id to replay; defaults to every archive in the session.
    #[arg(long)]
    archive: Option<String>,
}

#[derive(Args)]
struct ExportArgs {
    /// Session directory produced by `run`.
    #[arg(long)]
    out: PathBuf,
    /// Archive id to export; may be omitted when the session holds
    /// exactly one archive.
    #[arg(long)]
    archive: Option<String>,
    /// Output format: csv or tsv.
    #[arg(long, default_value = "csv")]
    format: String,
    /// Destination file; stdout when omitted.
    #[arg(long)]
    file: Option<PathBuf>,
}

fn main() {
    std::process::exit(real_main());
}

fn real_main() -> i32 {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            emit_error(&e.to_string());
            return 2;
        }
    };
    let outcome = match cli.command {
        Command::Calibrate(args) => cmd_calibrate(args),
        Command::Run(args) => cmd_run(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Replay(args) => cmd_replay(args),
        Command::ExportTraces(args) => cmd_export(args),
        Command::Compare(args) => cmd_compare(args),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            emit_error(&e.to_string());
            1
        }
    }
}

/// Single-line machine-parseable error record on stderr.
fn emit_error(message: &str) {
    let record = serde_json::json!({ "error": message });
    eprintln!("{record}");
}

fn resolve_args(common: &CommonArgs) -> Result<ResolvedConfig> {
    let file = match &common.config {
        Some(path) => load_file(path)?,
        None => FileConfig::default(),
    };
    let overrides = Overrides {
        policy: common.policy,
        budget: common.budget,
        warmup: common.warmup,
        percentile: common.percentile,
        window: common.window,
        top_k: common.topk,
        seed: common.seed,
        backend: common.backend.clone(),
        endpoint: common.endpoint.clone(),
        model: common.model.clone(),
    };
    resolve(&file, &overrides)
}

fn build_backend(choice: &BackendChoice) -> Result<Box<dyn StreamingBackend>> {
    match choice {
        BackendChoice::Scripted(path) => Ok(Box::new(ScriptedBackend::from_path(path)?)),
        BackendChoice::Live(config) => Ok(Box::new(LiveBackend::new(config.clone())?)),
    }
}

fn require_backend(resolved: &ResolvedConfig) -> Result<Box<dyn StreamingBackend>> {
    match &resolved.backend {
        Some(choice) => build_backend(choice),
        None => Err(Error::InvalidConfig(
            "no backend configured; pass --backend scripted:PATH or --backend live".into(),
        )),
    }
}

fn backend_label(choice: &BackendChoice) -> String {
    match choice {
        BackendChoice::Scripted(path) => format!("scripted:{}", path.display()),
        BackendChoice::Live(config) => format!("live:{} ({})", config.base_url, config.model),
    }
}

/// Run every question, honouring the configured parallelism. Results come
/// back in dataset order regardless of scheduling.
fn run_all(
    problems: &[Problem],
    session: &SessionConfig,
    backend: &dyn StreamingBackend,
    parallelism: usize,
) -> Result<Vec<QuestionRun>> {
    if parallelism <= 1 || problems.len() <= 1 {
        return problems
            .iter()
            .map(|p| run_question(p, session, backend))
            .collect();
    }
    let slots: Vec<Mutex<Option<Result<QuestionRun>>>> =
        problems.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..parallelism.min(problems.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= problems.len() {
                    break;
                }
                let result = run_question(&problems[i], session, backend);
                *slots[i].lock().expect("result slot lock") = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| {
            slot.into_inner()
                .expect("result slot lock")
                .expect("every slot is filled before the scope ends")
        })
        .collect()
}

fn write_string(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::storage(path.to_path_buf(), e))
}

fn write_json_pretty(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut body = serde_json::to_string_pretty(value)?;
    body.push('\n');
    write_string(path, &body)
}

/// Execute the dataset under one resolved configuration and persist a full
/// session directory. Shared by `run` and `compare`.
fn execute_session(
    resolved: &ResolvedConfig,
    dataset: &Path,
    out: &Path,
) -> Result<BenchmarkReport> {
    let problems = load_dataset(dataset)?;
    let backend = require_backend(resolved)?;
    std::fs::create_dir_all(out).map_err(|e| Error::storage(out.to_path_buf(), e))?;
    let store = TraceStore::new(out.join("archives"));
    let mut runs = run_all(
        &problems,
        &resolved.session,
        backend.as_ref(),
        resolved.parallelism,
    )?;
    for run in &mut runs {
        let id = store.persist_run(run, &resolved.session)?;
        run.archive_id = Some(id);
    }
    let report = compile_report(&runs, &resolved.session)?;
    write_json_pretty(&out.join("report.json"), &report)?;
    write_string(&out.join("report.txt"), &render_text(&report))?;
    let manifest = serde_json::json!({
        "dataset": dataset.to_string_lossy(),
        "backend": resolved.backend.as_ref().map(backend_label),
        "parallelism": resolved.parallelism,
        "session": resolved.session,
        "archives": runs.iter().map(|r| r.archive_id.clone()).collect::<Vec<_>>(),
    });
    write_json_pretty(&out.join("manifest.json"), &manifest)?;
    Ok(report)
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let resolved = resolve_args(&args.common)?;
    let report = execute_session(&resolved, &args.dataset, &args.out)?;
    print!("{}", render_text(&report));
    println!(
        "Session written to {} ({} archives)",
        args.out.display(),
        report.questions.len()
    );
    Ok(())
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<()> {
    let resolved = resolve_args(&args.common)?;
    let problems = load_dataset(&args.dataset)?;
    let backend = require_backend(&resolved)?;
    let mut rows = Vec::new();
    println!("question\tn_init\tthreshold");
    for problem in &problems {
        let outcome = run_warmup(problem, &resolved.session, backend.as_ref())?;
        for warning in &outcome.warnings {
            tracing::warn!("{}: {warning}", problem.id);
        }
        match &outcome.calibration {
            Some(c) => println!("{}\t{}\t{}", problem.id, c.n_init, c.threshold_s),
            None => println!(
                "{}\t0\tunavailable ({})",
                problem.id,
                outcome.failure.as_deref().unwrap_or("no usable warmup")
            ),
        }
        rows.push(serde_json::json!({
            "question": problem.id,
            "calibration": outcome.calibration,
            "warnings": outcome.warnings,
            "failure": outcome.failure,
        }));
    }
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out).map_err(|e| Error::storage(out.to_path_buf(), e))?;
        write_json_pretty(&out.join("calibration.json"), &rows)?;
        println!("Calibration written to {}", out.join("calibration.json").display());
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let store = TraceStore::new(args.out.join("archives"));
    let ids = session_archive_ids(&args.out, &store)?;
    if ids.is_empty() {
        return Err(Error::ArchiveNotFound(format!(
            "no archives under {}",
            args.out.display()
        )));
    }
    let mut summaries = Vec::new();
    let mut config: Option<SessionConfig> = None;
    for id in &ids {
        let archived = store.load_run(id)?;
        let m = &archived.manifest;
        match &config {
            None => config = Some(m.config.clone()),
            Some(existing) => {
                if existing.policy != m.config.policy
                    || existing.sampling.seed != m.config.sampling.seed
                {
                    return Err(Error::Report(format!(
                        "archive {id} was produced under a different policy or seed than the \
                         rest of the session"
                    )));
                }
            }
        }
        summaries.push(QuestionSummary {
            id: m.question.id.clone(),
            threshold_s: m.calibration.as_ref().map(|c| c.threshold_s),
            n_paths: m.n_paths,
            answered: m.answered,
            vote_answer: m.vote.as_ref().map(|(a, _)| a.clone()),
            vote_count: m.vote.as_ref().map_or(0, |(_, c)| *c),
            correct: m.correct,
            generated_tokens: m.generated_tokens,
            discarded_tokens: m.discarded_tokens,
            prompt_tokens: m.prompt_tokens,
            intervened_paths: m.intervened_paths,
            salvaged_paths: m.salvaged_paths,
            error: m.error.clone(),
            archive_id: Some(id.clone()),
        });
    }
    let config = config.expect("at least one archive");
    let report = compile_from_summaries(summaries, &config)?;
    print!("{}", render_text(&report));
    Ok(())
}

/// Archive ids for a session, preserving run order when the session
/// manifest records it.
fn session_archive_ids(out: &Path, store: &TraceStore) -> Result<Vec<String>> {
    let manifest_path = out.join("manifest.json");
    if manifest_path.is_file() {
        let body = std::fs::read_to_string(&manifest_path)
            .map_err(|e| Error::storage(manifest_path.clone(), e))?;
        let value: serde_json::Value = serde_json::from_str(&body)?;
        if let Some(ids) = value.get("archives").and_then(|v| v.as_array()) {
            let ids: Vec<String> = ids
                .iter()
                .filter_map(|v| v.as_str().map(String::from))
                .collect();
            if !ids.is_empty() {
                return Ok(ids);
            }
        }
    }
    store.list_archives()
}

fn cmd_replay(args: ReplayArgs) -> Result<()> {
    let store = TraceStore::new(args.out.join("archives"));
    let ids = match args.archive {
        Some(id) => vec![id],
        None => session_archive_ids(&args.out, &store)?,
    };
    if ids.is_empty() {
        return Err(Error::ArchiveNotFound(format!(
            "no archives under {}",
            args.out.display()
        )));
    }
    let mut failures = 0usize;
    for id in &ids {
        match store.replay(id) {
            Ok(summary) => println!(
                "replay ok: {} ({} paths, {} tokens verified)",
                summary.archive_id, summary.paths_compared, summary.tokens_compared
            ),
            Err(e) => {
                failures += 1;
                emit_error(&e.to_string());
            }
        }
    }
    if failures > 0 {
        return Err(Error::Report(format!(
            "{failures} of {} archives failed replay verification",
            ids.len()
        )));
    }
    println!("{} archives verified", ids.len());
    Ok(())
}

fn cmd_export(args: ExportArgs) -> Result<()> {
    let store = TraceStore::new(args.out.join("archives"));
    let format: ExportFormat = args.format.parse()?;
    let id = match args.archive {
        Some(id) => id,
        None => {
            let ids = session_archive_ids(&args.out, &store)?;
            match ids.as_slice() {
                [only] => only.clone(),
                [] => {
                    return Err(Error::ArchiveNotFound(format!(
                        "no archives under {}",
                        args.out.display()
                    )));
                }
                many => {
                    return Err(Error::InvalidConfig(format!(
                        "session holds {} archives; pick one with --archive",
                        many.len()
                    )));
                }
            }
        }
    };
    let body = store.export_trajectories(&id, format)?;
    match &args.file {
        Some(path) => {
            write_string(path, &body)?;
            println!("Exported {} to {}", id, path.display());
        }
        None => print!("{body}"),
    }
    Ok(())
}

fn cmd_compare(args: RunArgs) -> Result<()> {
    if args.common.policy.is_some() {
        return Err(Error::InvalidConfig(
            "compare always runs discard, restart, and reflect; drop --policy".into(),
        ));
    }
    let mut reports = Vec::new();
    for policy in Policy::ALL {
        let mut common = args.common.clone();
        common.policy = Some(policy);
        let resolved = resolve_args(&common)?;
        let out = args.out.join(policy.to_string());
        let report = execute_session(&resolved, &args.dataset, &out)?;
        reports.push(report);
    }
    let table = compare_table(&reports);
    std::fs::create_dir_all(&args.out)
        .map_err(|e| Error::storage(args.out.to_path_buf(), e))?;
    write_string(&args.out.join("compare.txt"), &table)?;
    print!("{table}");
    println!("Comparison written to {}", args.out.join("compare.txt").display());
    Ok(())
}

// Keep the derive wiring honest: clap validates the whole command tree.
#[test]
fn cli_definition_is_consistent() {
    use clap::CommandFactory;
    Cli::command().debug_assert();
}
