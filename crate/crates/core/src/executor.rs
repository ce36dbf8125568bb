//! The think/act execution loop.
//!
//! Each iteration re-runs retrieval on the newest doctor instruction,
//! assembles a prompt, asks the backend for the next turn, parses it and
//! applies any action to the simulator. The loop stops on a final answer,
//! on abort conditions, or after `max_iters` turns.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::knowledge_base::{KnowledgeBase, RetrievedContext, DEFAULT_K_API, DEFAULT_K_HANDBOOK};
use crate::llm::{parse_turn, GenerationParams, LlmBackend, ParseError, ParsedTurn, TurnPayload};
use crate::prompt::{assemble, DoctorInstruction};
use crate::robot_sim::{self, execute_api, ApiCall, Observation, RobotState, ScanTask, SimError};

pub const DEFAULT_MAX_ITERS: usize = 15;
pub const DEFAULT_MAX_CONSECUTIVE_PARSE_FAILURES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExecutorConfig {
    pub max_iters: usize,
    pub k_api: usize,
    pub k_handbook: usize,
    pub max_consecutive_parse_failures: usize,
    pub generation: GenerationParams,
    /// API retrieval (UAR) enabled.
    pub use_uar: bool,
    /// Handbook retrieval (RHR) enabled.
    pub use_rhr: bool,
}

impl Default for ExecutorConfig {
    fn default() -> Self {
        Self {
            max_iters: DEFAULT_MAX_ITERS,
            k_api: DEFAULT_K_API,
            k_handbook: DEFAULT_K_HANDBOOK,
            max_consecutive_parse_failures: DEFAULT_MAX_CONSECUTIVE_PARSE_FAILURES,
            generation: GenerationParams::default(),
            use_uar: true,
            use_rhr: true,
        }
    }
}

impl ExecutorConfig {
    pub fn validate(&self) -> Result<(), ExecutorError> {
        for (name, value) in [
            ("max_iters", self.max_iters),
            ("k_api", self.k_api),
            ("k_handbook", self.k_handbook),
            (
                "max_consecutive_parse_failures",
                self.max_consecutive_parse_failures,
            ),
            ("max_tokens", self.generation.max_tokens as usize),
        ] {
            if value == 0 {
                return Err(ExecutorError::InvalidConfig(format!(
                    "{name} must be positive"
                )));
            }
        }
        let g = &self.generation;
        if g.temperature.is_nan() || g.temperature < 0.0 {
            return Err(ExecutorError::InvalidConfig(
                "temperature must be >= 0".into(),
            ));
        }
        if !(g.top_p > 0.0 && g.top_p <= 1.0) {
            return Err(ExecutorError::InvalidConfig(
                "top_p must be in (0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Human-readable ablation condition, e.g. `LLMs + UAR + RHR`.
    pub fn condition_label(&self) -> String {
        let mut label = String::from("LLMs");
        if self.use_uar {
            label.push_str(" + UAR");
        }
        if self.use_rhr {
            label.push_str(" + RHR");
        }
        label
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExecutorError {
    #[error("invalid executor config: {0}")]
    InvalidConfig(String),
    #[error("session already finished")]
    SessionFinished,
    #[error("instruction text is empty")]
    EmptyInstruction,
}

/// Names and scores of what retrieval returned for one turn.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSummary {
    pub api_names: Vec<String>,
    pub api_scores: Vec<f64>,
    pub procedure_ids: Vec<String>,
    pub procedure_scores: Vec<f64>,
}

impl From<&RetrievedContext> for RetrievalSummary {
    fn from(ctx: &RetrievedContext) -> Self {
        Self {
            api_names: ctx.api_names(),
            api_scores: ctx.api_scores.clone(),
            procedure_ids: ctx.procedure_ids(),
            procedure_scores: ctx.procedure_scores.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnOutput {
    Parsed(ParsedTurn),
    ParseError(ParseError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    /// 1-based iteration number.
    pub index: usize,
    /// Newest doctor instruction at the time of this turn.
    pub instruction: String,
    pub retrieved: RetrievalSummary,
    pub prompt_digest: String,
    pub prompt_chars: usize,
    pub raw_output: String,
    pub output: TurnOutput,
    pub observation: Option<Observation>,
}

impl Turn {
    pub fn action_call(&self) -> Option<ApiCall> {
        match &self.output {
            TurnOutput::Parsed(ParsedTurn {
                payload: TurnPayload::Action { api_name, args },
                ..
            }) => Some(ApiCall {
                name: api_name.clone(),
                args: args.clone(),
            }),
            _ => None,
        }
    }

    pub fn is_parse_error(&self) -> bool {
        matches!(self.output, TurnOutput::ParseError(_))
    }

    pub fn is_final(&self) -> bool {
        matches!(
            self.output,
            TurnOutput::Parsed(ParsedTurn {
                payload: TurnPayload::Final { .. },
                ..
            })
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceStatus {
    Completed,
    AbortedParse,
    AbortedUnknownApi,
    AbortedBackend,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    pub task: ScanTask,
    pub instructions: Vec<DoctorInstruction>,
    pub turns: Vec<Turn>,
    pub final_state: RobotState,
    pub status: TraceStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abort_reason: Option<String>,
    pub first_step_ok: bool,
    pub overall_ok: bool,
}

impl ExecutionTrace {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("trace serializes")
    }

    /// Replays every successful action against a fresh simulator.
    pub fn replay_ok_actions(&self) -> Result<RobotState, SimError> {
        let calls: Vec<ApiCall> = self
            .turns
            .iter()
            .filter(|t| t.observation.as_ref().is_some_and(|o| o.ok))
            .filter_map(Turn::action_call)
            .collect();
        Ok(robot_sim::replay(&calls)?.0)
    }

    /// True when no action observation reported a failure.
    pub fn all_actions_ok(&self) -> bool {
        self.turns
            .iter()
            .filter(|t| t.action_call().is_some())
            .all(|t| t.observation.as_ref().is_some_and(|o| o.ok))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionAck {
    pub instruction_index: usize,
    pub applies_from_turn: usize,
}

/// One episode: owns the simulator state and borrows the knowledge base
/// and backend.
pub struct ExecutorSession<'a> {
    task: ScanTask,
    kb: &'a KnowledgeBase,
    backend: &'a mut dyn LlmBackend,
    config: ExecutorConfig,
    instructions: Vec<DoctorInstruction>,
    turns: Vec<Turn>,
    state: RobotState,
    status: Option<TraceStatus>,
    abort_reason: Option<String>,
    consecutive_parse_failures: usize,
    safety_violation: bool,
}

impl<'a> ExecutorSession<'a> {
    pub fn new(
        task: ScanTask,
        kb: &'a KnowledgeBase,
        backend: &'a mut dyn LlmBackend,
        config: ExecutorConfig,
    ) -> Result<Self, ExecutorError> {
        config.validate()?;
        if task.instruction.trim().is_empty() {
            return Err(ExecutorError::EmptyInstruction);
        }
        Ok(Self {
            instructions: vec![DoctorInstruction::new(task.instruction.clone(), 0)],
            task,
            kb,
            backend,
            config,
            turns: Vec::new(),
            state: robot_sim::reset(),
            status: None,
            abort_reason: None,
            consecutive_parse_failures: 0,
            safety_violation: false,
        })
    }

    pub fn is_finished(&self) -> bool {
        self.status.is_some()
    }

    pub fn status(&self) -> Option<TraceStatus> {
        self.status
    }

    pub fn state(&self) -> &RobotState {
        &self.state
    }

    pub fn turns(&self) -> &[Turn] {
        &self.turns
    }

    pub fn instructions(&self) -> &[DoctorInstruction] {
        &self.instructions
    }

    /// Queues a new doctor instruction; it becomes the newest instruction
    /// for retrieval and prompt assembly from the next turn on.
    pub fn inject_instruction(&mut self, text: &str) -> Result<InstructionAck, ExecutorError> {
        if self.is_finished() {
            return Err(ExecutorError::SessionFinished);
        }
        if text.trim().is_empty() {
            return Err(ExecutorError::EmptyInstruction);
        }
        let issued_at_turn = self.turns.len();
        self.instructions
            .push(DoctorInstruction::new(text, issued_at_turn));
        Ok(InstructionAck {
            instruction_index: self.instructions.len() - 1,
            applies_from_turn: issued_at_turn + 1,
        })
    }

    fn finish(&mut self, status: TraceStatus, reason: Option<String>) {
        self.status = Some(status);
        self.abort_reason = reason;
    }

    /// Runs one iteration. Returns the recorded turn, or `None` when the
    /// session was already finished or aborted before producing a turn.
    pub fn step(&mut self) -> Option<&Turn> {
        if self.is_finished() {
            return None;
        }
        if self.turns.len() >= self.config.max_iters {
            self.finish(TraceStatus::Timeout, None);
            return None;
        }
        let index = self.turns.len() + 1;
        let instruction = self
            .instructions
            .last()
            .expect("at least one instruction")
            .text
            .clone();
        let context = match self.kb.retrieve(
            &instruction,
            self.config.use_uar.then_some(self.config.k_api),
            self.config.use_rhr.then_some(self.config.k_handbook),
        ) {
            Ok(ctx) => ctx,
            Err(e) => {
                self.finish(
                    TraceStatus::AbortedBackend,
                    Some(format!("retrieval failed: {e}")),
                );
                return None;
            }
        };
        let prompt = assemble(&self.instructions, &context, &self.turns);
        let raw = match self
            .backend
            .generate(&prompt, &self.config.generation, index - 1)
        {
            Ok(raw) => raw,
            Err(e) => {
                self.finish(TraceStatus::AbortedBackend, Some(e.to_string()));
                return None;
            }
        };

        let mut turn = Turn {
            index,
            instruction,
            retrieved: RetrievalSummary::from(&context),
            prompt_digest: prompt.digest(),
            prompt_chars: prompt.rendered_len(),
            raw_output: raw,
            output: TurnOutput::ParseError(ParseError::MissingThought),
            observation: None,
        };

        match parse_turn(&turn.raw_output, self.kb.apis()) {
            Ok(parsed) => {
                self.consecutive_parse_failures = 0;
                let call = match &parsed.payload {
                    TurnPayload::Action { api_name, args } => Some(ApiCall {
                        name: api_name.clone(),
                        args: args.clone(),
                    }),
                    TurnPayload::Final { .. } => None,
                };
                turn.output = TurnOutput::Parsed(parsed);
                match call {
                    None => self.finish(TraceStatus::Completed, None),
                    Some(call) => match execute_api(&self.state, &call) {
                        Ok((next, obs)) => {
                            self.safety_violation |= obs.safety_violation;
                            self.state = next;
                            turn.observation = Some(obs);
                        }
                        Err(e) => {
                            turn.observation = Some(Observation {
                                ok: false,
                                text: e.to_string(),
                                state_digest: self.state.digest(),
                                safety_violation: false,
                            });
                            self.finish(TraceStatus::AbortedUnknownApi, Some(e.to_string()));
                        }
                    },
                }
            }
            Err(err) => {
                turn.observation = Some(Observation {
                    ok: false,
                    text: err.remediation(),
                    state_digest: self.state.digest(),
                    safety_violation: false,
                });
                if matches!(err, ParseError::UnknownApi { .. }) {
                    self.finish(TraceStatus::AbortedUnknownApi, Some(err.to_string()));
                } else {
                    self.consecutive_parse_failures += 1;
                    if self.consecutive_parse_failures >= self.config.max_consecutive_parse_failures
                    {
                        self.finish(
                            TraceStatus::AbortedParse,
                            Some(format!(
                                "{} consecutive unparseable turns; last error: {err}",
                                self.consecutive_parse_failures
                            )),
                        );
                    }
                }
                turn.output = TurnOutput::ParseError(err);
            }
        }
        self.turns.push(turn);
        if !self.is_finished() && self.turns.len() >= self.config.max_iters {
            self.finish(TraceStatus::Timeout, None);
        }
        self.turns.last()
    }

    /// Steps until the session finishes.
    pub fn run(&mut self) {
        while !self.is_finished() {
            self.step();
        }
    }

    /// Snapshot of the trace; `status` must be set, so call after `run`.
    pub fn trace(&self) -> ExecutionTrace {
        let status = self.status.unwrap_or(TraceStatus::Timeout);
        let first_step_ok = self.turns.first().is_some_and(|t| {
            t.action_call().is_some() && t.observation.as_ref().is_some_and(|o| o.ok)
        });
        let mut trace = ExecutionTrace {
            task: self.task.clone(),
            instructions: self.instructions.clone(),
            turns: self.turns.clone(),
            final_state: self.state.clone(),
            status,
            abort_reason: self.abort_reason.clone(),
            first_step_ok,
            overall_ok: false,
        };
        trace.overall_ok = status == TraceStatus::Completed
            && trace.all_actions_ok()
            && robot_sim::task_success(&self.state, &self.task, self.safety_violation);
        trace
    }
}

/// Runs a full episode from a freshly reset simulator.
pub fn run_task(
    task: ScanTask,
    kb: &KnowledgeBase,
    backend: &mut dyn LlmBackend,
    config: &ExecutorConfig,
) -> Result<ExecutionTrace, ExecutorError> {
    let mut session = ExecutorSession::new(task, kb, backend, config.clone())?;
    session.run();
    Ok(session.trace())
}
