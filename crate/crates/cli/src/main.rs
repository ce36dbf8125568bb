//! `sonoscan` command-line driver.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error (corpus, index,
//! task files), 3 backend error (LLM or remote embedder).

mod config;

use std::fs;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sonoscan_core::embedding::EmbedError;
use sonoscan_core::eval::{
    eval_execution, eval_retrieval, load_suite, render_execution_table, EvalError, ExecutionRow,
    OutputFormat, SuiteTask, DEFAULT_REPETITIONS,
};
use sonoscan_core::knowledge_base::{load_queries, KbError, RetrievalTarget, QUERIES_FILE};
use sonoscan_core::llm::{BackendSpec, LlmError};
use sonoscan_core::vector_index::IndexError;
use sonoscan_core::{run_task, BodyRegion, ExecutorConfig, KnowledgeBase, ScanTask, TraceStatus};
use sonoscan_server::{AppState, ServiceOptions};

use crate::config::FileConfig;

#[derive(Debug, Parser)]
#[command(
    name = "sonoscan",
    version,
    about = "Retrieval-augmented ultrasound scanning agent"
)]
struct Cli {
    /// Directory holding apis.jsonl, handbook.jsonl and queries.jsonl.
    #[arg(
        long,
        global = true,
        env = "SONOSCAN_CORPUS_DIR",
        default_value = "fixtures/corpus"
    )]
    corpus_dir: PathBuf,

    /// TOML file with [embedder] and [executor] tables.
    #[arg(long, global = true, env = "SONOSCAN_CONFIG")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Vector index maintenance.
    #[command(subcommand)]
    Index(IndexCommand),
    /// Show what UAR and RHR return for an instruction.
    Retrieve(RetrieveArgs),
    /// Execute one scan task and print its trace.
    Run(RunArgs),
    /// Evaluation harness.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Start the HTTP session service.
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
enum IndexCommand {
    /// Embed both corpora and write the indexes to a directory.
    Build {
        #[arg(long, default_value = "index")]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct Ablation {
    /// Disable API retrieval (UAR).
    #[arg(long)]
    no_uar: bool,
    /// Disable handbook retrieval (RHR).
    #[arg(long)]
    no_rhr: bool,
}

#[derive(Debug, Args)]
struct Output {
    #[arg(long, default_value = "table")]
    format: OutputFormat,
    /// Write to this file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RetrieveArgs {
    instruction: String,
    #[arg(long)]
    k_api: Option<usize>,
    #[arg(long)]
    k_handbook: Option<usize>,
    #[command(flatten)]
    output: Output,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Doctor instruction that starts the task.
    #[arg(long)]
    instruction: String,
    /// Target body region.
    #[arg(long)]
    region: BodyRegion,
    /// `scripted:<file-or-dir>` or `remote:<endpoint>`.
    #[arg(long)]
    backend: BackendSpec,
    /// Transcript name when the scripted backend is a directory.
    #[arg(long)]
    task_id: Option<String>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    ablation: Ablation,
    /// Write the JSON trace here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum EvalCommand {
    /// Recall@k for UAR and RHR.
    Retrieval {
        /// Query file; defaults to <corpus-dir>/queries.jsonl.
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,3,10")]
        ks: Vec<usize>,
        #[command(flatten)]
        output: Output,
    },
    /// FS and OV over a task suite.
    Execution(ExecutionArgs),
}

#[derive(Debug, Args)]
struct ExecutionArgs {
    /// Task suite; defaults to <corpus-dir>/tasks.jsonl.
    #[arg(long)]
    tasks: Option<PathBuf>,
    /// Defaults to the scripted transcripts in <corpus-dir>/transcripts.
    #[arg(long)]
    backend: Option<BackendSpec>,
    #[arg(long, default_value_t = DEFAULT_REPETITIONS)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    ablation: Ablation,
    /// Evaluate every ablation condition (LLMs, + UAR, + UAR + RHR).
    #[arg(long, conflicts_with_all = ["no_uar", "no_rhr"])]
    all_conditions: bool,
    /// Label the row as a model comparison instead of an ablation.
    #[arg(long)]
    model_row: bool,
    #[command(flatten)]
    output: Output,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    bind: IpAddr,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Append each session's events to <dir>/<id>.jsonl.
    #[arg(long)]
    trace_dir: Option<PathBuf>,
}

/// Failure carrying its own exit code: invalid argument combinations found
/// after parsing (1) or a run aborted by its backend (3).
#[derive(Debug)]
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            message: message.into(),
        }
    }

    fn backend(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return e.code;
        }
        match cause.downcast_ref::<LlmError>() {
            Some(
                LlmError::InvalidSpec(_)
                | LlmError::UnusableSpec { .. }
                | LlmError::InvalidTranscript { .. }
                | LlmError::Load(_),
            ) => return 2,
            Some(_) => return 3,
            None => {}
        }
        if let Some(EvalError::Backend { .. }) = cause.downcast_ref::<EvalError>() {
            return 3;
        }
        if let Some(EmbedError::Transport(_) | EmbedError::Status { .. }) = embed_error(cause) {
            return 3;
        }
    }
    2
}

/// Finds an embedder failure, including ones nested in transparent
/// knowledge-base, index or evaluation errors.
fn embed_error<'a>(cause: &'a (dyn std::error::Error + 'static)) -> Option<&'a EmbedError> {
    fn from_index(e: &IndexError) -> Option<&EmbedError> {
        match e {
            IndexError::Embed(e) => Some(e),
            _ => None,
        }
    }
    fn from_kb(e: &KbError) -> Option<&EmbedError> {
        match e {
            KbError::Embed(e) => Some(e),
            KbError::Index(e) => from_index(e),
            _ => None,
        }
    }
    if let Some(e) = cause.downcast_ref::<EmbedError>() {
        return Some(e);
    }
    if let Some(e) = cause.downcast_ref::<IndexError>() {
        return from_index(e);
    }
    if let Some(e) = cause.downcast_ref::<KbError>() {
        return from_kb(e);
    }
    match cause.downcast_ref::<EvalError>()? {
        EvalError::Data(e) => from_kb(e),
        EvalError::Index(e) => from_index(e),
        _ => None,
    }
}

fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    match cli.command {
        Command::Index(IndexCommand::Build { out }) => {
            let kb = load_kb(&cli.corpus_dir, &file)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for (name, target) in [
                ("apis.index.jsonl", RetrievalTarget::Api),
                ("handbook.index.jsonl", RetrievalTarget::Handbook),
            ] {
                let path = out.join(name);
                kb.index_for(target).save(&path)?;
                println!(
                    "{} entries -> {}",
                    kb.index_for(target).len(),
                    path.display()
                );
            }
            Ok(())
        }
        Command::Retrieve(args) => {
            let kb = load_kb(&cli.corpus_dir, &file)?;
            let config = file.executor.clone();
            let ctx = kb.retrieve(
                &args.instruction,
                Some(args.k_api.unwrap_or(config.k_api)),
                Some(args.k_handbook.unwrap_or(config.k_handbook)),
            )?;
            let text = match args.output.format {
                OutputFormat::Json => serde_json::to_string_pretty(&ctx)? + "\n",
                OutputFormat::Csv => {
                    let mut s = "module,id,score\n".to_owned();
                    for (a, score) in ctx.apis.iter().zip(&ctx.api_scores) {
                        s += &format!("UAR,{},{score:.6}\n", a.name);
                    }
                    for (p, score) in ctx.procedures.iter().zip(&ctx.procedure_scores) {
                        s += &format!("RHR,{},{score:.6}\n", p.task_id);
                    }
                    s
                }
                OutputFormat::Table => {
                    let mut s = String::new();
                    for (a, score) in ctx.apis.iter().zip(&ctx.api_scores) {
                        s += &format!("UAR  {score:.4}  {}\n", a.name);
                    }
                    for (p, score) in ctx.procedures.iter().zip(&ctx.procedure_scores) {
                        s += &format!("RHR  {score:.4}  {}\n", p.task_id);
                    }
                    s
                }
            };
            emit(&text, args.output.out.as_deref())
        }
        Command::Run(args) => {
            let kb = load_kb(&cli.corpus_dir, &file)?;
            let mut config = file.executor.clone();
            apply_ablation(&mut config, &args.ablation);
            if let Some(n) = args.max_iters {
                config.max_iters = n;
            }
            if args.seed.is_some() {
                config.generation.seed = args.seed;
            }
            config
                .validate()
                .map_err(|e| CliError::usage(e.to_string()))?;
            args.backend.check()?;
            let mut backend = args.backend.open(args.task_id.as_deref())?;
            let task = ScanTask {
                instruction: args.instruction,
                region: args.region,
            };
            let trace = run_task(task, &kb, backend.as_mut(), &config)?;
            eprintln!(
                "status={} turns={} first_step_ok={} overall_ok={}",
                serde_json::to_value(trace.status)?
                    .as_str()
                    .unwrap_or_default(),
                trace.turns.len(),
                trace.first_step_ok,
                trace.overall_ok
            );
            emit(
                &(serde_json::to_string_pretty(&trace)? + "\n"),
                args.out.as_deref(),
            )?;
            if trace.status == TraceStatus::AbortedBackend {
                bail!(CliError::backend(trace.abort_reason.unwrap_or_default()));
            }
            Ok(())
        }
        Command::Eval(EvalCommand::Retrieval {
            queries,
            ks,
            output,
        }) => {
            if ks.is_empty() || ks.contains(&0) {
                bail!(CliError::usage("--ks needs positive values"));
            }
            let kb = load_kb(&cli.corpus_dir, &file)?;
            let path = queries.unwrap_or_else(|| cli.corpus_dir.join(QUERIES_FILE));
            let queries =
                load_queries(&path).with_context(|| format!("loading {}", path.display()))?;
            let table = eval_retrieval(&kb, &queries, &ks)?;
            emit(&table.render(output.format), output.out.as_deref())
        }
        Command::Eval(EvalCommand::Execution(args)) => {
            eval_execution_cmd(&cli.corpus_dir, &file, args)
        }
        Command::Serve(args) => {
            let kb = load_kb(&cli.corpus_dir, &file)?;
            if let Some(dir) = &args.trace_dir {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            let state = AppState::new(
                kb,
                ServiceOptions {
                    trace_dir: args.trace_dir,
                    default_config: file.executor.clone(),
                },
            );
            let runtime = tokio::runtime::Runtime::new()?;
            runtime
                .block_on(sonoscan_server::serve(
                    SocketAddr::new(args.bind, args.port),
                    state,
                ))
                .context("session service failed")
        }
    }
}

fn eval_execution_cmd(corpus_dir: &Path, file: &FileConfig, args: ExecutionArgs) -> Result<()> {
    if args.reps == 0 {
        bail!(CliError::usage("--reps must be at least 1"));
    }
    let kb = load_kb(corpus_dir, file)?;
    let tasks_path = args.tasks.unwrap_or_else(|| corpus_dir.join("tasks.jsonl"));
    let tasks =
        load_suite(&tasks_path).with_context(|| format!("loading {}", tasks_path.display()))?;
    let spec = args
        .backend
        .unwrap_or_else(|| BackendSpec::Scripted(corpus_dir.join("transcripts")));
    spec.check()?;
    let open = |task: &SuiteTask| spec.open(Some(&task.task_id));
    let label = match &spec {
        BackendSpec::Scripted(_) => "scripted".to_owned(),
        BackendSpec::Remote(_) => file.executor.generation.model_name.clone(),
    };

    let conditions: Vec<(bool, bool)> = if args.all_conditions {
        vec![(false, false), (true, false), (true, true)]
    } else {
        vec![(!args.ablation.no_uar, !args.ablation.no_rhr)]
    };
    let mut rows = Vec::new();
    let mut results = Vec::new();
    for (use_uar, use_rhr) in conditions {
        let mut config = file.executor.clone();
        config.use_uar = use_uar;
        config.use_rhr = use_rhr;
        let report = eval_execution(&tasks, &kb, open, &label, &config, args.reps, args.seed)?;
        rows.push(if args.model_row {
            ExecutionRow::model(&report.result)
        } else {
            ExecutionRow::ablation(&report.result)
        });
        results.push(report.result);
    }
    let text = match args.output.format {
        OutputFormat::Json => serde_json::to_string_pretty(&results)? + "\n",
        format => render_execution_table(&rows, format),
    };
    emit(&text, args.output.out.as_deref())
}

fn apply_ablation(config: &mut ExecutorConfig, ablation: &Ablation) {
    if ablation.no_uar {
        config.use_uar = false;
    }
    if ablation.no_rhr {
        config.use_rhr = false;
    }
}

fn load_kb(corpus_dir: &Path, file: &FileConfig) -> Result<KnowledgeBase> {
    let embedder = file.embedder()?;
    KnowledgeBase::load_dir(corpus_dir, embedder)
        .with_context(|| format!("loading corpus from {}", corpus_dir.display()))
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
