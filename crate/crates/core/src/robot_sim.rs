//! Deterministic ultrasound robot simulator.
//!
//! The robot is a pure state machine: [`execute_api`] maps a state and a
//! call to a new state plus an [`Observation`]. A call whose preconditions
//! fail returns the input state untouched with `ok == false` and a text
//! naming the first violated precondition.
//!
//! Coverage and image quality follow a fixed requirement table: each region
//! has one matching (probe, pattern) pair. A matching scan adds 0.9
//! coverage and captures quality-1.0 images; a mismatched scan adds 0.4 and
//! captures quality-0.5 images.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub const SAFE_FORCE_MIN_N: f64 = 2.0;
pub const SAFE_FORCE_MAX_N: f64 = 15.0;
pub const FORCE_LIMIT_N: f64 = 20.0;
pub const ANGLE_LIMIT_DEG: f64 = 60.0;

const MATCHED_COVERAGE: f64 = 0.9;
const MISMATCHED_COVERAGE: f64 = 0.4;
const MATCHED_QUALITY: f64 = 1.0;
const MISMATCHED_QUALITY: f64 = 0.5;

pub const SUCCESS_COVERAGE: f64 = 0.8;
pub const SUCCESS_QUALITY: f64 = 0.9;

macro_rules! string_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub enum $name {
            $(#[serde(rename = $text)] $variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(format!(
                        "unknown {} {other:?}; expected one of: {}",
                        stringify!($name),
                        [$($text),+].join(", ")
                    )),
                }
            }
        }
    };
}

string_enum!(BodyRegion {
    Neck => "neck",
    AbdomenLiver => "abdomen_liver",
    AbdomenGallbladder => "abdomen_gallbladder",
    AbdomenKidney => "abdomen_kidney",
    ChestCardiac => "chest_cardiac",
    NeckCarotid => "neck_carotid",
});

string_enum!(ProbeType {
    Linear => "linear",
    Convex => "convex",
    PhasedArray => "phased_array",
});

string_enum!(ScanPattern {
    LinearSweep => "linear_sweep",
    FanSweep => "fan_sweep",
    Spiral => "spiral",
});

impl BodyRegion {
    /// The (probe, pattern) pair that images this region properly.
    pub fn requirement(self) -> (ProbeType, ScanPattern) {
        match self {
            BodyRegion::Neck | BodyRegion::NeckCarotid => {
                (ProbeType::Linear, ScanPattern::LinearSweep)
            }
            BodyRegion::AbdomenLiver
            | BodyRegion::AbdomenGallbladder
            | BodyRegion::AbdomenKidney => (ProbeType::Convex, ScanPattern::FanSweep),
            BodyRegion::ChestCardiac => (ProbeType::PhasedArray, ScanPattern::FanSweep),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActiveScan {
    pub region: BodyRegion,
    pub pattern: ScanPattern,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapturedImage {
    pub region: BodyRegion,
    pub angle_deg: f64,
    pub quality: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotState {
    pub probe: Option<ProbeType>,
    pub gel_applied: BTreeSet<BodyRegion>,
    pub probe_at: Option<BodyRegion>,
    pub probe_angle_deg: f64,
    pub contact_force_n: f64,
    pub scanning: Option<ActiveScan>,
    pub images: Vec<CapturedImage>,
    pub coverage: BTreeMap<BodyRegion, f64>,
    pub halted: bool,
}

impl Default for RobotState {
    fn default() -> Self {
        reset()
    }
}

pub fn reset() -> RobotState {
    RobotState {
        probe: None,
        gel_applied: BTreeSet::new(),
        probe_at: None,
        probe_angle_deg: 0.0,
        contact_force_n: 0.0,
        scanning: None,
        images: Vec::new(),
        coverage: BTreeMap::new(),
        halted: false,
    }
}

impl RobotState {
    pub fn coverage_of(&self, region: BodyRegion) -> f64 {
        self.coverage.get(&region).copied().unwrap_or(0.0)
    }

    fn matched(&self, region: BodyRegion, pattern: ScanPattern) -> bool {
        self.probe.map(|p| (p, pattern)) == Some(region.requirement())
    }

    /// Single-line `key=value` summary with a fixed key order.
    pub fn digest(&self) -> String {
        let join = |items: Vec<String>| {
            if items.is_empty() {
                "none".to_owned()
            } else {
                items.join(",")
            }
        };
        let gel = join(self.gel_applied.iter().map(|r| r.to_string()).collect());
        let coverage = join(
            self.coverage
                .iter()
                .map(|(r, c)| format!("{r}:{c:.2}"))
                .collect(),
        );
        let scanning = self
            .scanning
            .map(|s| format!("{}:{}", s.region, s.pattern))
            .unwrap_or_else(|| "none".into());
        format!(
            "probe={} gel={} probe_at={} angle={:.1} force={:.1} scanning={} images={} coverage={} halted={}",
            self.probe.map(ProbeType::as_str).unwrap_or("none"),
            gel,
            self.probe_at.map(BodyRegion::as_str).unwrap_or("none"),
            self.probe_angle_deg,
            self.contact_force_n,
            scanning,
            self.images.len(),
            coverage,
            self.halted,
        )
    }

    /// Checks the structural invariants every reachable state satisfies.
    pub fn check_invariants(&self) -> Result<(), String> {
        if !(0.0..=FORCE_LIMIT_N).contains(&self.contact_force_n) {
            return Err(format!(
                "contact force {} outside [0, 20]",
                self.contact_force_n
            ));
        }
        if !(-ANGLE_LIMIT_DEG..=ANGLE_LIMIT_DEG).contains(&self.probe_angle_deg) {
            return Err(format!(
                "probe angle {} outside [-60, 60]",
                self.probe_angle_deg
            ));
        }
        if let Some((region, c)) = self
            .coverage
            .iter()
            .find(|(_, c)| !(0.0..=1.0).contains(*c))
        {
            return Err(format!("coverage of {region} is {c}"));
        }
        if let Some(img) = self
            .images
            .iter()
            .find(|i| !(0.0..=1.0).contains(&i.quality))
        {
            return Err(format!("image quality {} outside [0, 1]", img.quality));
        }
        if let Some(scan) = self.scanning {
            if self.probe.is_none() {
                return Err("scanning without a probe".into());
            }
            if self.probe_at != Some(scan.region) {
                return Err("scanning a region the probe is not at".into());
            }
            if !self.gel_applied.contains(&scan.region) {
                return Err("scanning without gel".into());
            }
            if !(SAFE_FORCE_MIN_N..=SAFE_FORCE_MAX_N).contains(&self.contact_force_n) {
                return Err("scanning outside the safe force band".into());
            }
            if self.halted {
                return Err("halted while scanning".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiCall {
    pub name: String,
    #[serde(default)]
    pub args: BTreeMap<String, Value>,
}

impl ApiCall {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            args: BTreeMap::new(),
        }
    }

    pub fn arg(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.args.insert(key.to_owned(), value.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub ok: bool,
    pub text: String,
    pub state_digest: String,
    /// Set when the call was rejected for breaching the contact-force
    /// safety band.
    #[serde(default)]
    pub safety_violation: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanTask {
    pub instruction: String,
    pub region: BodyRegion,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("the simulator has no API named {0:?}")]
    UnknownApi(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArgKind {
    Region,
    Probe,
    Pattern,
    Number,
}

/// Call surface of the simulator: API name and its (required) parameters.
pub const API_SURFACE: &[(&str, &[(&str, ArgKind)])] = &[
    ("select_probe", &[("probe_type", ArgKind::Probe)]),
    ("apply_gel", &[("region", ArgKind::Region)]),
    ("move_probe", &[("region", ArgKind::Region)]),
    ("set_contact_force", &[("newtons", ArgKind::Number)]),
    ("adjust_probe_angle", &[("degrees", ArgKind::Number)]),
    ("start_scan", &[("pattern", ArgKind::Pattern)]),
    ("capture_image", &[]),
    ("stop_scan", &[]),
    ("query_state", &[]),
    ("retract_probe", &[]),
    ("emergency_stop", &[]),
    ("resume", &[]),
];

pub fn api_params(name: &str) -> Option<&'static [(&'static str, ArgKind)]> {
    API_SURFACE
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, params)| *params)
}

enum Arg {
    Region(BodyRegion),
    Probe(ProbeType),
    Pattern(ScanPattern),
    Number(f64),
}

fn check_args(call: &ApiCall, params: &[(&str, ArgKind)]) -> Result<Vec<Arg>, String> {
    if let Some(extra) = call
        .args
        .keys()
        .find(|k| !params.iter().any(|(p, _)| p == k))
    {
        return Err(format!("invalid arguments: unexpected parameter {extra:?}"));
    }
    params
        .iter()
        .map(|(name, kind)| {
            let value = call
                .args
                .get(*name)
                .ok_or_else(|| format!("invalid arguments: missing parameter {name:?}"))?;
            let bad = |expected: &str| format!("invalid arguments: {name} must be {expected}");
            match kind {
                ArgKind::Number => value
                    .as_f64()
                    .filter(|v| v.is_finite())
                    .map(Arg::Number)
                    .ok_or_else(|| bad("a number")),
                ArgKind::Region => value
                    .as_str()
                    .and_then(|s| s.parse().ok())
                    .map(Arg::Region)
                    .ok_or_else(|| bad("a body region")),
                ArgKind::Probe => value
                    .as_str()
                    .and_then(|s| s.parse().ok())
                    .map(Arg::Probe)
                    .ok_or_else(|| bad("a probe type")),
                ArgKind::Pattern => value
                    .as_str()
                    .and_then(|s| s.parse().ok())
                    .map(Arg::Pattern)
                    .ok_or_else(|| bad("a scan pattern")),
            }
        })
        .collect()
}

enum Outcome {
    Ok(RobotState, String),
    Refused(String),
    SafetyRefused(String),
}

/// Applies one API call. Unknown API names are an error; every other
/// failure is reported through the observation.
pub fn execute_api(
    state: &RobotState,
    call: &ApiCall,
) -> Result<(RobotState, Observation), SimError> {
    let params = api_params(&call.name).ok_or_else(|| SimError::UnknownApi(call.name.clone()))?;
    let outcome = match check_args(call, params) {
        Ok(args) => apply(state, &call.name, &args),
        Err(msg) => Outcome::Refused(msg),
    };
    let (next, ok, text, safety_violation) = match outcome {
        Outcome::Ok(next, text) => (next, true, text, false),
        Outcome::Refused(text) => (state.clone(), false, text, false),
        Outcome::SafetyRefused(text) => (state.clone(), false, text, true),
    };
    let observation = Observation {
        ok,
        text,
        state_digest: next.digest(),
        safety_violation,
    };
    Ok((next, observation))
}

const HALTED: &str = "robot halted: call resume before moving";

fn apply(state: &RobotState, name: &str, args: &[Arg]) -> Outcome {
    use Outcome::{Ok as Done, Refused};

    let mut next = state.clone();
    let actuation = !matches!(
        name,
        "query_state" | "emergency_stop" | "resume" | "capture_image" | "stop_scan"
    );
    if actuation && state.halted {
        return Refused(HALTED.into());
    }
    match (name, args) {
        ("select_probe", [Arg::Probe(probe)]) => {
            if state.scanning.is_some() {
                return Refused("cannot change probe while scanning".into());
            }
            next.probe = Some(*probe);
            Done(next, format!("{probe} probe mounted"))
        }
        ("apply_gel", [Arg::Region(region)]) => {
            next.gel_applied.insert(*region);
            Done(next, format!("gel applied to {region}"))
        }
        ("move_probe", [Arg::Region(region)]) => {
            if state.probe.is_none() {
                return Refused("no probe selected: call select_probe first".into());
            }
            if state.scanning.is_some() {
                return Refused("cannot move probe while scanning: call stop_scan first".into());
            }
            next.probe_at = Some(*region);
            next.probe_angle_deg = 0.0;
            Done(
                next,
                format!("probe positioned at {region}, angle reset to 0"),
            )
        }
        ("set_contact_force", [Arg::Number(newtons)]) => {
            if state.scanning.is_some() && !(SAFE_FORCE_MIN_N..=SAFE_FORCE_MAX_N).contains(newtons)
            {
                return Outcome::SafetyRefused(format!(
                    "safety band violation: {newtons} N requested while scanning, contact force must stay within [2, 15] N"
                ));
            }
            let applied = newtons.clamp(0.0, FORCE_LIMIT_N);
            next.contact_force_n = applied;
            if applied == *newtons {
                Done(next, format!("contact force set to {applied:.1} N"))
            } else {
                Done(next, format!("contact force clamped to {applied:.1} N"))
            }
        }
        ("adjust_probe_angle", [Arg::Number(degrees)]) => {
            if state.probe_at.is_none() {
                return Refused("probe not positioned: call move_probe first".into());
            }
            let angle = degrees.clamp(-ANGLE_LIMIT_DEG, ANGLE_LIMIT_DEG);
            next.probe_angle_deg = angle;
            Done(next, format!("probe angle set to {angle:.1} degrees"))
        }
        ("start_scan", [Arg::Pattern(pattern)]) => {
            if state.scanning.is_some() {
                return Refused("already scanning: call stop_scan first".into());
            }
            let Some(_) = state.probe else {
                return Refused("no probe selected: call select_probe first".into());
            };
            let Some(region) = state.probe_at else {
                return Refused("probe not positioned: call move_probe first".into());
            };
            if !state.gel_applied.contains(&region) {
                return Refused(format!("no gel on {region}: call apply_gel first"));
            }
            if !(SAFE_FORCE_MIN_N..=SAFE_FORCE_MAX_N).contains(&state.contact_force_n) {
                return Refused(format!(
                    "contact force {:.1} N outside the [2, 15] N scanning band: call set_contact_force first",
                    state.contact_force_n
                ));
            }
            let gain = if state.matched(region, *pattern) {
                MATCHED_COVERAGE
            } else {
                MISMATCHED_COVERAGE
            };
            let covered = (state.coverage_of(region) + gain).min(1.0);
            next.coverage.insert(region, covered);
            next.scanning = Some(ActiveScan {
                region,
                pattern: *pattern,
            });
            Done(
                next,
                format!("{pattern} started on {region}, coverage {covered:.2}"),
            )
        }
        ("capture_image", []) => {
            let Some(scan) = state.scanning else {
                return Refused("not scanning: call start_scan first".into());
            };
            let quality = if state.matched(scan.region, scan.pattern) {
                MATCHED_QUALITY
            } else {
                MISMATCHED_QUALITY
            };
            next.images.push(CapturedImage {
                region: scan.region,
                angle_deg: state.probe_angle_deg,
                quality,
            });
            Done(
                next,
                format!("image captured on {}, quality {quality:.2}", scan.region),
            )
        }
        ("stop_scan", []) => {
            let Some(scan) = state.scanning else {
                return Refused("not scanning: nothing to stop".into());
            };
            next.scanning = None;
            Done(next, format!("scan of {} stopped", scan.region))
        }
        ("query_state", []) => Done(next, state.digest()),
        ("retract_probe", []) => {
            if state.scanning.is_some() {
                return Refused("cannot retract probe while scanning: call stop_scan first".into());
            }
            next.probe_at = None;
            next.probe_angle_deg = 0.0;
            next.contact_force_n = 0.0;
            Done(next, "probe retracted".into())
        }
        ("emergency_stop", []) => {
            next.scanning = None;
            next.contact_force_n = 0.0;
            next.halted = true;
            Done(next, "emergency stop: motion halted, force released".into())
        }
        ("resume", []) => {
            if !state.halted {
                return Refused("robot is not halted".into());
            }
            next.halted = false;
            Done(next, "robot resumed".into())
        }
        _ => unreachable!("argument shapes are fixed by API_SURFACE"),
    }
}

/// Task goal predicate: the target region is covered, imaged at diagnostic
/// quality, the scan has been stopped and no safety violation occurred.
pub fn task_success(state: &RobotState, task: &ScanTask, safety_violation_recorded: bool) -> bool {
    let region = task.region;
    state.coverage_of(region) >= SUCCESS_COVERAGE
        && state
            .images
            .iter()
            .any(|img| img.region == region && img.quality >= SUCCESS_QUALITY)
        && state.scanning.is_none()
        && !safety_violation_recorded
}

/// Replays calls from a fresh state, returning the final state and every
/// observation.
pub fn replay<'a>(
    calls: impl IntoIterator<Item = &'a ApiCall>,
) -> Result<(RobotState, Vec<Observation>), SimError> {
    let mut state = reset();
    let mut observations = Vec::new();
    for call in calls {
        let (next, obs) = execute_api(&state, call)?;
        state = next;
        observations.push(obs);
    }
    Ok((state, observations))
}
