//! Retrieval and execution evaluation.
//!
//! Retrieval is scored as Recall@k per retriever (UAR over the API index,
//! RHR over the handbook index). Execution runs every task of a suite for a
//! number of repetitions and reports first-step success (FS) and overall
//! success (OV) percentages.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::EmbedderBackend;
use crate::executor::{run_task, ExecutionTrace, ExecutorConfig, ExecutorError, TraceStatus};
use crate::knowledge_base::{read_jsonl, KbError, KnowledgeBase, RetrievalQuery, RetrievalTarget};
use crate::llm::{LlmBackend, LlmError};
use crate::robot_sim::{BodyRegion, ScanTask};
use crate::vector_index::IndexError;

pub const DEFAULT_KS: [usize; 3] = [1, 3, 10];
pub const DEFAULT_REPETITIONS: usize = 20;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Data(#[from] KbError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("no {0} queries to evaluate")]
    NoQueries(&'static str),
    #[error("task suite is empty")]
    EmptySuite,
    #[error("repetitions must be at least 1")]
    ZeroRepetitions,
    #[error("task {task_id:?}: {message}")]
    InvalidTask { task_id: String, message: String },
    #[error("task {task_id:?} repetition {repetition}: backend failed: {reason}")]
    Backend {
        task_id: String,
        repetition: usize,
        reason: String,
    },
    #[error(transparent)]
    Executor(#[from] ExecutorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Table,
    Json,
    Csv,
}

impl FromStr for OutputFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "table" => Ok(Self::Table),
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            other => Err(format!(
                "unknown format {other:?}; expected table, json or csv"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRow {
    pub module: String,
    pub model: String,
    pub cases: usize,
    pub recall: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTable {
    pub ks: Vec<usize>,
    pub rows: Vec<RetrievalRow>,
}

fn model_label(kb: &KnowledgeBase) -> String {
    let cfg = kb.embedder().config();
    match &cfg.backend {
        EmbedderBackend::Hashing => format!("hashing-d{}", cfg.dimension),
        EmbedderBackend::Remote { model, .. } => model.clone(),
    }
}

/// Recall@k for each k, one row per retriever (UAR, then RHR).
pub fn eval_retrieval(
    kb: &KnowledgeBase,
    queries: &[RetrievalQuery],
    ks: &[usize],
) -> Result<RetrievalTable, EvalError> {
    let mut rows = Vec::new();
    for (module, target) in [
        ("UAR", RetrievalTarget::Api),
        ("RHR", RetrievalTarget::Handbook),
    ] {
        let cases: Vec<_> = queries
            .iter()
            .filter(|q| q.target == target)
            .map(RetrievalQuery::to_case)
            .collect();
        if cases.is_empty() {
            return Err(EvalError::NoQueries(module));
        }
        let index = kb.index_for(target);
        let recall = ks
            .iter()
            .map(|&k| index.recall_at_k(&cases, kb.embedder(), k))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(RetrievalRow {
            module: module.into(),
            model: model_label(kb),
            cases: cases.len(),
            recall,
        });
    }
    Ok(RetrievalTable {
        ks: ks.to_vec(),
        rows,
    })
}

fn render_aligned(header: &[String], rows: &[Vec<String>]) -> String {
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            rows.iter()
                .map(|r| r[c].len())
                .chain(std::iter::once(header[c].len()))
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for row in std::iter::once(header).chain(rows.iter().map(Vec::as_slice)) {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, w)| format!("{cell:<w$}"))
            .collect();
        writeln!(out, "{}", line.join("  ").trim_end()).unwrap();
    }
    out
}

impl RetrievalTable {
    pub fn render(&self, format: OutputFormat) -> String {
        let mut header = vec!["Module".to_owned(), "Model".to_owned()];
        header.extend(self.ks.iter().map(|k| format!("Recall@{k}")));
        match format {
            OutputFormat::Json => {
                serde_json::to_string_pretty(self).expect("table serializes") + "\n"
            }
            OutputFormat::Csv => {
                let mut out = header.join(",") + "\n";
                for row in &self.rows {
                    let values: Vec<String> =
                        row.recall.iter().map(|r| format!("{r:.4}")).collect();
                    writeln!(out, "{},{},{}", row.module, row.model, values.join(",")).unwrap();
                }
                out
            }
            OutputFormat::Table => {
                let rows: Vec<Vec<String>> = self
                    .rows
                    .iter()
                    .map(|row| {
                        let mut cells = vec![row.module.clone(), row.model.clone()];
                        cells.extend(row.recall.iter().map(|r| format!("{r:.2}")));
                        cells
                    })
                    .collect();
                render_aligned(&header, &rows)
            }
        }
    }
}

/// One task of an execution suite.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteTask {
    pub task_id: String,
    pub instruction: String,
    pub region: String,
}

impl SuiteTask {
    pub fn scan_task(&self) -> Result<ScanTask, EvalError> {
        let region: BodyRegion = self
            .region
            .parse()
            .map_err(|message| EvalError::InvalidTask {
                task_id: self.task_id.clone(),
                message,
            })?;
        Ok(ScanTask {
            instruction: self.instruction.clone(),
            region,
        })
    }
}

pub fn load_suite(path: &Path) -> Result<Vec<SuiteTask>, EvalError> {
    let tasks: Vec<SuiteTask> = read_jsonl(path)?;
    if tasks.is_empty() {
        return Err(EvalError::EmptySuite);
    }
    for t in &tasks {
        t.scan_task()?;
    }
    Ok(tasks)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskBreakdown {
    pub task_id: String,
    pub runs: usize,
    pub fs_successes: usize,
    pub ov_successes: usize,
    /// Runs that completed without any failed action, regardless of
    /// whether the scan goal was met.
    pub step_clean_successes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionSuiteResult {
    /// Backend or model name.
    pub label: String,
    /// Ablation condition, e.g. `LLMs + UAR + RHR`.
    pub condition: String,
    pub fs_percent: f64,
    pub ov_percent: f64,
    pub step_clean_percent: f64,
    pub repetitions: usize,
    pub per_task: Vec<TaskBreakdown>,
}

impl ExecutionSuiteResult {
    pub fn from_breakdown(
        label: String,
        condition: String,
        repetitions: usize,
        per_task: Vec<TaskBreakdown>,
    ) -> Self {
        let runs: usize = per_task.iter().map(|t| t.runs).sum();
        let pct = |f: fn(&TaskBreakdown) -> usize| {
            if runs == 0 {
                0.0
            } else {
                100.0 * per_task.iter().map(f).sum::<usize>() as f64 / runs as f64
            }
        };
        Self {
            fs_percent: pct(|t| t.fs_successes),
            ov_percent: pct(|t| t.ov_successes),
            step_clean_percent: pct(|t| t.step_clean_successes),
            label,
            condition,
            repetitions,
            per_task,
        }
    }
}

/// One executed (task, repetition) pair.
#[derive(Debug, Clone)]
pub struct SuiteRun {
    pub task_id: String,
    pub repetition: usize,
    pub trace: ExecutionTrace,
}

#[derive(Debug, Clone)]
pub struct ExecutionReport {
    pub result: ExecutionSuiteResult,
    pub runs: Vec<SuiteRun>,
}

/// Runs every task `repetitions` times. Repetition `r` uses seed
/// `seed + r`. A backend failure anywhere discards all results.
pub fn eval_execution<F>(
    tasks: &[SuiteTask],
    kb: &KnowledgeBase,
    open_backend: F,
    label: &str,
    config: &ExecutorConfig,
    repetitions: usize,
    seed: u64,
) -> Result<ExecutionReport, EvalError>
where
    F: Fn(&SuiteTask) -> Result<Box<dyn LlmBackend>, LlmError> + Sync,
{
    if tasks.is_empty() {
        return Err(EvalError::EmptySuite);
    }
    if repetitions == 0 {
        return Err(EvalError::ZeroRepetitions);
    }
    config.validate()?;
    let scan_tasks = tasks
        .iter()
        .map(SuiteTask::scan_task)
        .collect::<Result<Vec<_>, _>>()?;
    let jobs: Vec<(usize, usize)> = (0..tasks.len())
        .flat_map(|t| (0..repetitions).map(move |r| (t, r)))
        .collect();

    let runs = jobs
        .par_iter()
        .map(|&(t, r)| {
            let task = &tasks[t];
            let backend_err = |reason: String| EvalError::Backend {
                task_id: task.task_id.clone(),
                repetition: r,
                reason,
            };
            let mut backend = open_backend(task).map_err(|e| backend_err(e.to_string()))?;
            let mut run_config = config.clone();
            run_config.generation.seed = Some(seed.wrapping_add(r as u64));
            let trace = run_task(scan_tasks[t].clone(), kb, backend.as_mut(), &run_config)?;
            if trace.status == TraceStatus::AbortedBackend {
                return Err(backend_err(trace.abort_reason.clone().unwrap_or_default()));
            }
            Ok(SuiteRun {
                task_id: task.task_id.clone(),
                repetition: r,
                trace,
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;

    let per_task = tasks
        .iter()
        .map(|task| {
            let mine = runs.iter().filter(|run| run.task_id == task.task_id);
            let mut b = TaskBreakdown {
                task_id: task.task_id.clone(),
                runs: 0,
                fs_successes: 0,
                ov_successes: 0,
                step_clean_successes: 0,
            };
            for run in mine {
                b.runs += 1;
                b.fs_successes += usize::from(run.trace.first_step_ok);
                b.ov_successes += usize::from(run.trace.overall_ok);
                b.step_clean_successes += usize::from(
                    run.trace.status == TraceStatus::Completed && run.trace.all_actions_ok(),
                );
            }
            b
        })
        .collect();

    Ok(ExecutionReport {
        result: ExecutionSuiteResult::from_breakdown(
            label.to_owned(),
            config.condition_label(),
            repetitions,
            per_task,
        ),
        runs,
    })
}

/// A row of the FS/OV table: the row group (`Ablation` or `Models`) and
/// the module label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionRow {
    #[serde(rename = "type")]
    pub row_type: String,
    pub module: String,
    pub fs_percent: f64,
    pub ov_percent: f64,
}

impl ExecutionRow {
    pub fn ablation(result: &ExecutionSuiteResult) -> Self {
        Self {
            row_type: "Ablation".into(),
            module: result.condition.clone(),
            fs_percent: result.fs_percent,
            ov_percent: result.ov_percent,
        }
    }

    pub fn model(result: &ExecutionSuiteResult) -> Self {
        Self {
            row_type: "Models".into(),
            module: result.label.clone(),
            fs_percent: result.fs_percent,
            ov_percent: result.ov_percent,
        }
    }
}

pub fn render_execution_table(rows: &[ExecutionRow], format: OutputFormat) -> String {
    let header: Vec<String> = ["Type", "Module", "FS (%)", "OV (%)"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    match format {
        OutputFormat::Json => serde_json::to_string_pretty(rows).expect("rows serialize") + "\n",
        OutputFormat::Csv => {
            let mut out = "type,module,fs_percent,ov_percent\n".to_owned();
            for r in rows {
                writeln!(
                    out,
                    "{},{},{:.1},{:.1}",
                    r.row_type, r.module, r.fs_percent, r.ov_percent
                )
                .unwrap();
            }
            out
        }
        OutputFormat::Table => {
            let cells: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    vec![
                        r.row_type.clone(),
                        r.module.clone(),
                        format!("{:.0}", r.fs_percent),
                        format!("{:.0}", r.ov_percent),
                    ]
                })
                .collect();
            render_aligned(&header, &cells)
        }
    }
}
