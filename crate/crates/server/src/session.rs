use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sonoscan_core::executor::ExecutorSession;
use sonoscan_core::llm::BackendSpec;
use sonoscan_core::prompt::DoctorInstruction;
use sonoscan_core::robot_sim::reset;
use sonoscan_core::{
    BodyRegion, ExecutionTrace, ExecutorConfig, KnowledgeBase, RobotState, ScanTask, Turn,
};
use tokio::sync::watch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Idle,
    Running,
    AwaitingInstruction,
    Finished,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub after_turn: usize,
    pub digest: String,
    pub state: RobotState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    /// A trace status (`completed`, `timeout`, ...) or `cancelled`.
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abort_reason: Option<String>,
    pub first_step_ok: bool,
    pub overall_ok: bool,
    pub turn_count: usize,
    pub final_state: RobotState,
}

impl SessionSummary {
    fn from_trace(trace: &ExecutionTrace) -> Self {
        let status = serde_json::to_value(trace.status)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default();
        Self {
            status,
            abort_reason: trace.abort_reason.clone(),
            first_step_ok: trace.first_step_ok,
            overall_ok: trace.overall_ok,
            turn_count: trace.turns.len(),
            final_state: trace.final_state.clone(),
        }
    }
}

/// One frame of a session's event stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "snake_case")]
pub enum SessionEvent {
    Turn(Turn),
    State(StateSnapshot),
    Summary(SessionSummary),
}

impl SessionEvent {
    pub fn kind(&self) -> &'static str {
        match self {
            SessionEvent::Turn(_) => "turn",
            SessionEvent::State(_) => "state",
            SessionEvent::Summary(_) => "summary",
        }
    }
}

pub(crate) struct Inner {
    pub status: SessionStatus,
    pub events: Vec<SessionEvent>,
    pub pending: Vec<String>,
    pub accepted_instructions: usize,
    pub instructions: Vec<DoctorInstruction>,
    pub turns: Vec<Turn>,
    pub state: RobotState,
    pub summary: Option<SessionSummary>,
}

pub struct Session {
    pub id: String,
    pub region: BodyRegion,
    pub backend: BackendSpec,
    pub task_id: Option<String>,
    pub config: ExecutorConfig,
    pub turn_delay: Duration,
    inner: Mutex<Inner>,
    notify: watch::Sender<usize>,
    cancel: AtomicBool,
    trace_file: Option<PathBuf>,
}

pub(crate) struct SessionParams {
    pub region: BodyRegion,
    pub backend: BackendSpec,
    pub task_id: Option<String>,
    pub config: ExecutorConfig,
    pub turn_delay: Duration,
    pub trace_dir: Option<PathBuf>,
}

impl Session {
    pub(crate) fn new(id: String, params: SessionParams) -> Self {
        let trace_file = params.trace_dir.map(|dir| dir.join(format!("{id}.jsonl")));
        Self {
            id,
            region: params.region,
            backend: params.backend,
            task_id: params.task_id,
            config: params.config,
            turn_delay: params.turn_delay,
            inner: Mutex::new(Inner {
                status: SessionStatus::Idle,
                events: Vec::new(),
                pending: Vec::new(),
                accepted_instructions: 0,
                instructions: Vec::new(),
                turns: Vec::new(),
                state: reset(),
                summary: None,
            }),
            notify: watch::channel(0).0,
            cancel: AtomicBool::new(false),
            trace_file,
        }
    }

    pub(crate) fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner
            .lock()
            .unwrap_or_else(|poisoned| poisoned.into_inner())
    }

    pub(crate) fn subscribe(&self) -> watch::Receiver<usize> {
        self.notify.subscribe()
    }

    pub(crate) fn cancel(&self) {
        self.cancel.store(true, Ordering::SeqCst);
    }

    fn cancelled(&self) -> bool {
        self.cancel.load(Ordering::SeqCst)
    }

    /// Appends an event, persists it when a trace directory is configured
    /// and wakes subscribers.
    pub(crate) fn push_event(&self, inner: &mut Inner, event: SessionEvent) {
        if let Some(path) = &self.trace_file {
            let line = serde_json::to_string(&event).expect("events serialize");
            let written = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .and_then(|mut f| writeln!(f, "{line}"));
            if let Err(e) = written {
                tracing::warn!(session = %self.id, path = %path.display(), "trace write failed: {e}");
            }
        }
        inner.events.push(event);
        self.notify.send_replace(inner.events.len());
    }

    pub(crate) fn finish(&self, inner: &mut Inner, summary: SessionSummary) {
        inner.status = SessionStatus::Finished;
        inner.summary = Some(summary.clone());
        self.push_event(inner, SessionEvent::Summary(summary));
    }

    pub(crate) fn cancelled_summary(inner: &Inner) -> SessionSummary {
        SessionSummary {
            status: "cancelled".into(),
            abort_reason: None,
            first_step_ok: false,
            overall_ok: false,
            turn_count: inner.turns.len(),
            final_state: inner.state.clone(),
        }
    }

    /// Drives the executor to completion on the calling (blocking) thread.
    pub(crate) fn run_worker(self: Arc<Self>, kb: Arc<KnowledgeBase>, first_instruction: String) {
        let task = ScanTask {
            instruction: first_instruction,
            region: self.region,
        };
        let mut backend = match self.backend.open(self.task_id.as_deref()) {
            Ok(b) => b,
            Err(e) => return self.abort_before_start(format!("backend unavailable: {e}")),
        };
        let mut exec = match ExecutorSession::new(task, &kb, backend.as_mut(), self.config.clone())
        {
            Ok(s) => s,
            Err(e) => return self.abort_before_start(e.to_string()),
        };
        loop {
            {
                let mut inner = self.lock();
                if self.cancelled() {
                    let summary = Self::cancelled_summary(&inner);
                    self.finish(&mut inner, summary);
                    return;
                }
                for text in std::mem::take(&mut inner.pending) {
                    if let Err(e) = exec.inject_instruction(&text) {
                        tracing::warn!(session = %self.id, "instruction dropped: {e}");
                    }
                }
                inner.instructions = exec.instructions().to_vec();
                inner.status = SessionStatus::Running;
            }

            let turn = exec.step().cloned();

            let mut inner = self.lock();
            inner.state = exec.state().clone();
            if let Some(turn) = turn {
                let is_action = turn.action_call().is_some();
                let after_turn = turn.index;
                inner.turns.push(turn.clone());
                self.push_event(&mut inner, SessionEvent::Turn(turn));
                if is_action {
                    let snapshot = StateSnapshot {
                        after_turn,
                        digest: inner.state.digest(),
                        state: inner.state.clone(),
                    };
                    self.push_event(&mut inner, SessionEvent::State(snapshot));
                }
            }
            if exec.is_finished() {
                for text in inner.pending.drain(..) {
                    tracing::warn!(session = %self.id, "instruction arrived after the last turn: {text:?}");
                }
                let trace = exec.trace();
                inner.instructions = trace.instructions.clone();
                self.finish(&mut inner, SessionSummary::from_trace(&trace));
                return;
            }
            inner.status = SessionStatus::AwaitingInstruction;
            drop(inner);
            if !self.turn_delay.is_zero() {
                std::thread::sleep(self.turn_delay);
            }
        }
    }

    fn abort_before_start(&self, reason: String) {
        let mut inner = self.lock();
        let summary = SessionSummary {
            status: "aborted_backend".into(),
            abort_reason: Some(reason),
            first_step_ok: false,
            overall_ok: false,
            turn_count: 0,
            final_state: inner.state.clone(),
        };
        self.finish(&mut inner, summary);
    }
}
