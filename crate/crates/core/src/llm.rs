//! Model backends and the think/act output grammar.
//!
//! Model output must follow:
//!
//! ```text
//! Thought: <reasoning, may span lines>
//! Action: <api_name>
//! Action Input: <one JSON object>
//! ```
//!
//! or
//!
//! ```text
//! Thought: <reasoning>
//! Final Answer: <summary to end of text>
//! ```
//!
//! Keys are case-sensitive and must start a line. Text after the Action
//! Input object is rejected unless it is a hallucinated `Observation:`
//! continuation, which is dropped.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::knowledge_base::{read_jsonl, ApiCatalogEntry, KbError, ParamType};
use crate::prompt::AssembledPrompt;

pub const DEFAULT_TEMPERATURE: f64 = 0.7;
pub const DEFAULT_TOP_P: f64 = 0.95;
pub const DEFAULT_MAX_TOKENS: u32 = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    pub model_name: String,
    /// Forwarded to sampling backends that accept a seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            top_p: DEFAULT_TOP_P,
            max_tokens: DEFAULT_MAX_TOKENS,
            model_name: "gpt-4-turbo".into(),
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TurnPayload {
    Action {
        api_name: String,
        args: BTreeMap<String, Value>,
    },
    Final {
        summary: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedTurn {
    pub thought: String,
    pub payload: TurnPayload,
}

impl ParsedTurn {
    pub fn action(thought: &str, api_name: &str, args: Value) -> Self {
        let args = match args {
            Value::Object(map) => map.into_iter().collect(),
            _ => BTreeMap::new(),
        };
        Self {
            thought: thought.into(),
            payload: TurnPayload::Action {
                api_name: api_name.into(),
                args,
            },
        }
    }

    pub fn final_answer(thought: &str, summary: &str) -> Self {
        Self {
            thought: thought.into(),
            payload: TurnPayload::Final {
                summary: summary.into(),
            },
        }
    }

    /// Renders the turn in the output grammar.
    pub fn render(&self) -> String {
        match &self.payload {
            TurnPayload::Action { api_name, args } => format!(
                "Thought: {}\nAction: {}\nAction Input: {}",
                self.thought,
                api_name,
                serde_json::to_string(args).expect("args serialize")
            ),
            TurnPayload::Final { summary } => {
                format!("Thought: {}\nFinal Answer: {}", self.thought, summary)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParseError {
    #[error("missing 'Thought:' line")]
    MissingThought,
    #[error("missing 'Action:' or 'Final Answer:' after the thought")]
    MissingAction,
    #[error("unknown API {name:?}")]
    UnknownApi { name: String },
    #[error("malformed Action Input: {detail}")]
    MalformedArgs { detail: String },
    #[error("parameter {param:?}: {reason}")]
    SchemaViolation { param: String, reason: String },
}

impl ParseError {
    /// Message fed back to the model as the observation for this turn.
    pub fn remediation(&self) -> String {
        match self {
            ParseError::MissingThought => {
                "Format error: start your reply with 'Thought:' followed by your reasoning.".into()
            }
            ParseError::MissingAction => "Format error: after the thought, write either 'Action: <api_name>' with an 'Action Input: {...}' line, or 'Final Answer: <summary>'.".into(),
            ParseError::UnknownApi { name } => format!(
                "Error: there is no API named {name:?}. Use only the APIs listed under AVAILABLE APIS."
            ),
            ParseError::MalformedArgs { detail } => format!(
                "Format error in Action Input ({detail}). Provide a single JSON object on the 'Action Input:' line, e.g. {{\"region\": \"neck\"}}."
            ),
            ParseError::SchemaViolation { param, reason } => format!(
                "Argument error for parameter {param:?}: {reason}. Check the parameter list of the API and call it again."
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Key {
    Thought,
    Action,
    ActionInput,
    FinalAnswer,
    Observation,
}

fn split_key(line: &str) -> Option<(Key, &str)> {
    const KEYS: [(&str, Key); 5] = [
        ("Action Input:", Key::ActionInput),
        ("Action:", Key::Action),
        ("Final Answer:", Key::FinalAnswer),
        ("Thought:", Key::Thought),
        ("Observation:", Key::Observation),
    ];
    let trimmed = line.trim_start();
    KEYS.iter()
        .find_map(|(prefix, key)| trimmed.strip_prefix(prefix).map(|rest| (*key, rest)))
}

/// Parses raw model output against the grammar and the API catalog.
pub fn parse_turn(raw: &str, catalog: &[ApiCatalogEntry]) -> Result<ParsedTurn, ParseError> {
    let lines: Vec<&str> = raw.lines().collect();
    let start = lines
        .iter()
        .position(|l| matches!(split_key(l), Some((Key::Thought, _))))
        .ok_or(ParseError::MissingThought)?;

    let (_, first) = split_key(lines[start]).expect("thought line");
    let mut thought_lines = vec![first];
    let mut cursor = start + 1;
    while cursor < lines.len() && split_key(lines[cursor]).is_none() {
        thought_lines.push(lines[cursor]);
        cursor += 1;
    }
    let thought = thought_lines.join("\n").trim().to_owned();

    let Some((key, rest)) = lines.get(cursor).and_then(|l| split_key(l)) else {
        return Err(ParseError::MissingAction);
    };
    match key {
        Key::FinalAnswer => {
            let mut summary = vec![rest];
            summary.extend(&lines[cursor + 1..]);
            Ok(ParsedTurn {
                thought,
                payload: TurnPayload::Final {
                    summary: summary.join("\n").trim().to_owned(),
                },
            })
        }
        Key::Action => {
            let api_name = rest.trim();
            if api_name.is_empty() {
                return Err(ParseError::MissingAction);
            }
            let api = catalog.iter().find(|a| a.name == api_name).ok_or_else(|| {
                ParseError::UnknownApi {
                    name: api_name.to_owned(),
                }
            })?;
            let input_line = lines[cursor + 1..]
                .iter()
                .position(|l| !l.trim().is_empty())
                .map(|offset| cursor + 1 + offset);
            let input = input_line
                .and_then(|i| match split_key(lines[i]) {
                    Some((Key::ActionInput, rest)) => Some((i, rest)),
                    _ => None,
                })
                .ok_or_else(|| ParseError::MalformedArgs {
                    detail: "expected an 'Action Input:' line after the Action".into(),
                })?;
            let mut json_text = String::from(input.1);
            for line in &lines[input.0 + 1..] {
                json_text.push('\n');
                json_text.push_str(line);
            }
            let args = parse_args(&json_text)?;
            validate_args(api, &args)?;
            Ok(ParsedTurn {
                thought,
                payload: TurnPayload::Action {
                    api_name: api_name.to_owned(),
                    args,
                },
            })
        }
        _ => Err(ParseError::MissingAction),
    }
}

fn parse_args(text: &str) -> Result<BTreeMap<String, Value>, ParseError> {
    let malformed = |detail: String| ParseError::MalformedArgs { detail };
    let mut stream = serde_json::Deserializer::from_str(text).into_iter::<Value>();
    let value = match stream.next() {
        Some(Ok(v)) => v,
        Some(Err(e)) => return Err(malformed(format!("invalid JSON: {e}"))),
        None => return Err(malformed("no JSON object after 'Action Input:'".into())),
    };
    let trailing = text[stream.byte_offset()..].trim();
    if !trailing.is_empty() && !trailing.starts_with("Observation:") {
        return Err(malformed("unexpected text after the JSON object".into()));
    }
    match value {
        Value::Object(map) => Ok(map.into_iter().collect()),
        other => Err(malformed(format!(
            "expected a JSON object, got {}",
            json_kind(&other)
        ))),
    }
}

fn json_kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "a boolean",
        Value::Number(_) => "a number",
        Value::String(_) => "a string",
        Value::Array(_) => "an array",
        Value::Object(_) => "an object",
    }
}

/// Checks arguments against an API's parameter schema.
pub fn validate_args(
    api: &ApiCatalogEntry,
    args: &BTreeMap<String, Value>,
) -> Result<(), ParseError> {
    let violation = |param: &str, reason: String| ParseError::SchemaViolation {
        param: param.to_owned(),
        reason,
    };
    if let Some(extra) = args.keys().find(|k| api.param(k).is_none()) {
        return Err(violation(
            extra,
            format!("{} has no such parameter", api.name),
        ));
    }
    for spec in &api.param_schema {
        let Some(value) = args.get(&spec.param_name) else {
            if spec.required {
                return Err(violation(
                    &spec.param_name,
                    "required parameter is missing".into(),
                ));
            }
            continue;
        };
        match spec.param_type {
            ParamType::String if !value.is_string() => {
                return Err(violation(
                    &spec.param_name,
                    format!("expected a string, got {}", json_kind(value)),
                ));
            }
            ParamType::Number if !value.is_number() => {
                return Err(violation(
                    &spec.param_name,
                    format!("expected a number, got {}", json_kind(value)),
                ));
            }
            ParamType::Enum => {
                let allowed = spec.enum_values.as_deref().unwrap_or_default();
                if !value
                    .as_str()
                    .is_some_and(|s| allowed.iter().any(|a| a == s))
                {
                    return Err(violation(
                        &spec.param_name,
                        format!("must be one of: {}", allowed.join(", ")),
                    ));
                }
            }
            _ => {}
        }
    }
    Ok(())
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("scripted transcript exhausted at turn {turn_index}")]
    TranscriptExhausted { turn_index: usize },
    #[error("model request failed: {0}")]
    Transport(String),
    #[error("model endpoint returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("model response contained no choices")]
    EmptyChoices,
    #[error("malformed model response: {0}")]
    MalformedResponse(String),
    #[error("invalid backend spec {0:?}: expected scripted:<path> or remote:<endpoint>")]
    InvalidSpec(String),
    #[error("backend {spec} is unusable: {reason}")]
    UnusableSpec { spec: String, reason: String },
    #[error("invalid transcript {path}: {reason}")]
    InvalidTranscript { path: String, reason: String },
    #[error(transparent)]
    Load(#[from] KbError),
}

/// A text generator driven one turn at a time.
pub trait LlmBackend: Send {
    fn label(&self) -> String;

    fn generate(
        &mut self,
        prompt: &AssembledPrompt,
        params: &GenerationParams,
        turn_index: usize,
    ) -> Result<String, LlmError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub turn_index: usize,
    pub text: String,
}

/// Replays a fixed transcript; turn `i` yields entry `i`.
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    label: String,
    entries: Vec<String>,
}

impl ScriptedBackend {
    pub fn new(entries: Vec<String>) -> Self {
        Self {
            label: "scripted".into(),
            entries,
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, LlmError> {
        let mut rows: Vec<TranscriptEntry> = read_jsonl(path)?;
        rows.sort_by_key(|r| r.turn_index);
        for (expected, row) in rows.iter().enumerate() {
            if row.turn_index != expected {
                return Err(LlmError::InvalidTranscript {
                    path: path.display().to_string(),
                    reason: format!(
                        "turn indices must be contiguous from 0; found {} where {expected} was expected",
                        row.turn_index
                    ),
                });
            }
        }
        Ok(Self {
            label: format!("scripted:{}", path.display()),
            entries: rows.into_iter().map(|r| r.text).collect(),
        })
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }
}

impl LlmBackend for ScriptedBackend {
    fn label(&self) -> String {
        self.label.clone()
    }

    fn generate(
        &mut self,
        _prompt: &AssembledPrompt,
        _params: &GenerationParams,
        turn_index: usize,
    ) -> Result<String, LlmError> {
        self.entries
            .get(turn_index)
            .cloned()
            .ok_or(LlmError::TranscriptExhausted { turn_index })
    }
}

/// Chat-completions client. The whole rendered prompt is sent as one user
/// message; the first choice's content is returned.
#[derive(Debug, Clone)]
pub struct RemoteBackend {
    endpoint: String,
    api_key: Option<String>,
    retries: u32,
    client: reqwest::blocking::Client,
}

impl RemoteBackend {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.into(),
            api_key,
            retries: 1,
            client,
        })
    }

    pub fn with_retries(mut self, retries: u32) -> Self {
        self.retries = retries;
        self
    }

    fn request_body(prompt: &AssembledPrompt, params: &GenerationParams) -> Value {
        let mut body = json!({
            "model": params.model_name,
            "messages": [{"role": "user", "content": prompt.text()}],
            "temperature": params.temperature,
            "top_p": params.top_p,
            "max_tokens": params.max_tokens,
        });
        if let Some(seed) = params.seed {
            body["seed"] = json!(seed);
        }
        body
    }

    fn attempt(&self, body: &Value) -> Result<String, LlmError> {
        let mut request = self.client.post(&self.endpoint).json(body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request
            .send()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = response.status();
        let text = response
            .text()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(LlmError::Status {
                status: status.as_u16(),
                body: text,
            });
        }
        let parsed: Value =
            serde_json::from_str(&text).map_err(|e| LlmError::MalformedResponse(e.to_string()))?;
        let choices = parsed
            .get("choices")
            .and_then(Value::as_array)
            .ok_or_else(|| LlmError::MalformedResponse("missing choices array".into()))?;
        let first = choices.first().ok_or(LlmError::EmptyChoices)?;
        first
            .pointer("/message/content")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| LlmError::MalformedResponse("choices[0].message.content missing".into()))
    }
}

impl LlmBackend for RemoteBackend {
    fn label(&self) -> String {
        format!("remote:{}", self.endpoint)
    }

    fn generate(
        &mut self,
        prompt: &AssembledPrompt,
        params: &GenerationParams,
        _turn_index: usize,
    ) -> Result<String, LlmError> {
        let body = Self::request_body(prompt, params);
        let mut result = self.attempt(&body);
        for _ in 0..self.retries {
            match &result {
                Err(LlmError::Transport(_)) => {}
                Err(LlmError::Status { status, .. }) if *status >= 500 => {}
                _ => break,
            }
            result = self.attempt(&body);
        }
        result
    }
}

/// `scripted:<path>` or `remote:<endpoint>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BackendSpec {
    /// A transcript file, or a directory holding `<task_id>.jsonl` files.
    Scripted(PathBuf),
    Remote(String),
}

impl FromStr for BackendSpec {
    type Err = LlmError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            Some(("scripted", path)) if !path.is_empty() => {
                Ok(BackendSpec::Scripted(PathBuf::from(path)))
            }
            Some(("remote", endpoint)) if !endpoint.is_empty() => {
                Ok(BackendSpec::Remote(endpoint.to_owned()))
            }
            _ => Err(LlmError::InvalidSpec(s.to_owned())),
        }
    }
}

impl TryFrom<String> for BackendSpec {
    type Error = LlmError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<BackendSpec> for String {
    fn from(spec: BackendSpec) -> Self {
        spec.to_string()
    }
}

impl fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendSpec::Scripted(path) => write!(f, "scripted:{}", path.display()),
            BackendSpec::Remote(endpoint) => write!(f, "remote:{endpoint}"),
        }
    }
}

pub const API_KEY_ENV: &str = "SONOSCAN_LLM_API_KEY";

impl BackendSpec {
    /// Resolves the transcript path for a task; a directory spec maps to
    /// `<dir>/<task_id>.jsonl`.
    pub fn transcript_path(&self, task_id: Option<&str>) -> Option<PathBuf> {
        match self {
            BackendSpec::Scripted(path) if path.is_dir() => {
                task_id.map(|id| path.join(format!("{id}.jsonl")))
            }
            BackendSpec::Scripted(path) => Some(path.clone()),
            BackendSpec::Remote(_) => None,
        }
    }

    /// Checks that the spec points at something usable without opening a
    /// connection.
    pub fn check(&self) -> Result<(), LlmError> {
        match self {
            BackendSpec::Scripted(path) if !path.exists() => Err(LlmError::UnusableSpec {
                spec: self.to_string(),
                reason: "path does not exist".into(),
            }),
            BackendSpec::Remote(endpoint)
                if !(endpoint.starts_with("http://") || endpoint.starts_with("https://")) =>
            {
                Err(LlmError::UnusableSpec {
                    spec: self.to_string(),
                    reason: "endpoint must be http(s)".into(),
                })
            }
            _ => Ok(()),
        }
    }

    pub fn open(&self, task_id: Option<&str>) -> Result<Box<dyn LlmBackend>, LlmError> {
        match self {
            BackendSpec::Scripted(_) => {
                let path = self
                    .transcript_path(task_id)
                    .ok_or_else(|| LlmError::UnusableSpec {
                        spec: self.to_string(),
                        reason: "a directory needs a task id".into(),
                    })?;
                Ok(Box::new(ScriptedBackend::from_file(&path)?))
            }
            BackendSpec::Remote(endpoint) => Ok(Box::new(RemoteBackend::new(
                endpoint.clone(),
                std::env::var(API_KEY_ENV).ok(),
            )?)),
        }
    }
}
