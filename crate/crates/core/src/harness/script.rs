//! Scenario scripts: a TOML document naming the cluster, the jobs to submit,
//! the faults to inject and the properties to check afterwards.
//!
//! Job ids are derived from tenant and request id, so scripts refer to the
//! n-th job with the placeholder `{job0}`, `{job1}`, ... inside fault
//! targets.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::api::job_id_for;
use crate::clock::SimTime;
use crate::cluster::{FaultEvent, FaultKind, FaultTarget};
use crate::platform::PlatformConfig;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("SCRIPT_INVALID at {location}: {message}")]
pub struct ScriptError {
    pub location: String,
    pub message: String,
}

impl ScriptError {
    fn at(location: impl Into<String>, message: impl Into<String>) -> Self {
        ScriptError { location: location.into(), message: message.into() }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Virtual,
    Wallclock,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Virtual => "virtual",
            Mode::Wallclock => "wallclock",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "virtual" => Ok(Mode::Virtual),
            "wallclock" => Ok(Mode::Wallclock),
            other => Err(format!("unknown mode {other:?} (virtual or wallclock)")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobEntry {
    /// Submit time, seconds from scenario start.
    #[serde(default)]
    pub at: f64,
    pub token: String,
    /// Defaults to `req-{index}`.
    #[serde(default)]
    pub request_id: Option<String>,
    /// Inline manifest; either this or `manifest_file`.
    #[serde(default)]
    pub manifest: Option<serde_json::Value>,
    #[serde(default)]
    pub manifest_file: Option<String>,
    /// Manifest text resolved at load time.
    #[serde(skip)]
    pub manifest_text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FaultEntry {
    pub at: f64,
    pub target: String,
    #[serde(flatten)]
    pub kind: FaultKind,
}

/// Faults drawn from the scenario seed: `count` picks of a target and an
/// instant in `[from, to)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomFaults {
    pub count: u32,
    pub targets: Vec<String>,
    pub from: f64,
    pub to: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HaltEntry {
    pub at: f64,
    pub job: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case", deny_unknown_fields)]
pub enum Assertion {
    /// Every acknowledged job ended in a terminal status.
    AllTerminal,
    JobStatus { job: usize, status: String },
    /// Every measured recovery of `component` is `expected` ± `tolerance`.
    Recovery {
        component: String,
        expected: f64,
        #[serde(default = "default_tolerance")]
        tolerance: f64,
        #[serde(default = "one")]
        min_samples: usize,
    },
    /// Iterations redone after each learner crash stay within the job's
    /// checkpoint interval.
    LostWorkBound,
    /// At most one Guardian container alive per job at any instant, and one
    /// completion per finished job.
    SingleGuardian,
    /// Each job's final inventory is empty or the full deployment plan.
    AtomicInventory,
    /// No job holds resources at the end.
    InventoryEmpty,
    /// Retrievable logs contain a line for every iteration a learner logged.
    LogsComplete,
    /// One restart notice per learner restart.
    RestartNotices,
    /// `job` made exactly `count` deployment attempts and recorded FAILED once.
    Attempts { job: usize, count: u32 },
    /// The cluster's own invariant checks never fired.
    NoViolations,
}

fn default_tolerance() -> f64 {
    0.1
}

fn one() -> usize {
    1
}

fn default_name() -> String {
    "scenario".into()
}

fn default_horizon() -> f64 {
    3600.0
}

fn default_settle() -> f64 {
    30.0
}

fn default_retry() -> f64 {
    1.0
}

fn default_max_submits() -> u32 {
    120
}

fn default_probe() -> f64 {
    0.1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioScript {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: Mode,
    /// Hard stop, seconds.
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    /// Quiet time after the last fault before the run may end.
    #[serde(default = "default_settle")]
    pub settle: f64,
    /// Client resubmit interval while the API answers 503.
    #[serde(default = "default_retry")]
    pub submit_retry: f64,
    #[serde(default = "default_max_submits")]
    pub max_submits: u32,
    #[serde(default = "default_probe")]
    pub probe_interval: f64,
    #[serde(default)]
    pub platform: PlatformConfig,
    #[serde(default)]
    pub jobs: Vec<JobEntry>,
    #[serde(default)]
    pub faults: Vec<FaultEntry>,
    #[serde(default)]
    pub random_faults: Vec<RandomFaults>,
    #[serde(default)]
    pub halts: Vec<HaltEntry>,
    #[serde(default)]
    pub assertions: Vec<Assertion>,
}

impl ScenarioScript {
    /// Parses and validates a script. `base` resolves `manifest_file` paths.
    pub fn from_toml(text: &str, base: Option<&Path>) -> Result<Self, ScriptError> {
        let mut script: ScenarioScript = toml::from_str(text).map_err(|e| {
            let location = match e.span() {
                Some(span) => {
                    let line = text[..span.start].matches('\n').count() + 1;
                    format!("line {line}")
                }
                None => "document".into(),
            };
            ScriptError::at(location, e.message().to_string())
        })?;
        for (i, job) in script.jobs.iter_mut().enumerate() {
            let loc = format!("jobs[{i}]");
            job.manifest_text = match (&job.manifest, &job.manifest_file) {
                (Some(m), None) => m.to_string(),
                (None, Some(path)) => {
                    let path = base.map(|b| b.join(path)).unwrap_or_else(|| path.into());
                    std::fs::read_to_string(&path)
                        .map_err(|e| ScriptError::at(&loc, format!("manifest_file {}: {e}", path.display())))?
                }
                _ => return Err(ScriptError::at(loc, "exactly one of manifest and manifest_file")),
            };
        }
        script.validate()?;
        Ok(script)
    }

    pub fn load(path: &Path) -> Result<Self, ScriptError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ScriptError::at(path.display().to_string(), e.to_string()))?;
        Self::from_toml(&text, path.parent())
    }

    /// Checks everything that does not need a running platform.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), ScriptError> {
        if !(self.horizon > 0.0) {
            return Err(ScriptError::at("horizon", "must be positive"));
        }
        if !(self.submit_retry > 0.0) || !(self.probe_interval > 0.0) {
            return Err(ScriptError::at("submit_retry/probe_interval", "must be positive"));
        }
        if self.platform.nodes.is_empty() {
            return Err(ScriptError::at("platform.nodes", "at least one node required"));
        }
        for (i, job) in self.jobs.iter().enumerate() {
            if job.at < 0.0 {
                return Err(ScriptError::at(format!("jobs[{i}].at"), "negative time"));
            }
            if !self.platform.tenants.iter().any(|t| t.token == job.token) {
                // Unknown tokens are legal (they get 401) but almost always a typo.
                tracing::warn!(job = i, "token matches no configured tenant");
            }
        }
        for (i, f) in self.faults.iter().enumerate() {
            let loc = format!("faults[{i}]");
            if f.at < 0.0 {
                return Err(ScriptError::at(loc, "negative time"));
            }
            self.resolve_target(&f.target).map_err(|m| ScriptError::at(format!("{loc}.target"), m))?;
        }
        for (i, r) in self.random_faults.iter().enumerate() {
            let loc = format!("random_faults[{i}]");
            if r.targets.is_empty() || !(r.from < r.to) || r.from < 0.0 {
                return Err(ScriptError::at(loc, "needs targets and 0 <= from < to"));
            }
            for t in &r.targets {
                self.resolve_target(t).map_err(|m| ScriptError::at(format!("{loc}.targets"), m))?;
            }
        }
        for (i, h) in self.halts.iter().enumerate() {
            if h.job >= self.jobs.len() {
                return Err(ScriptError::at(format!("halts[{i}].job"), "no such job"));
            }
        }
        for (i, a) in self.assertions.iter().enumerate() {
            let loc = format!("assertions[{i}]");
            match a {
                Assertion::JobStatus { job, status } => {
                    if *job >= self.jobs.len() {
                        return Err(ScriptError::at(loc, "no such job"));
                    }
                    if crate::job_model::JobStatus::parse(status).is_none() {
                        return Err(ScriptError::at(loc, format!("unknown status {status:?}")));
                    }
                }
                Assertion::Attempts { job, .. } if *job >= self.jobs.len() => {
                    return Err(ScriptError::at(loc, "no such job"));
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn request_id(&self, index: usize) -> String {
        self.jobs[index].request_id.clone().unwrap_or_else(|| format!("req-{index}"))
    }

    /// The id a job will get if accepted.
    pub fn job_id(&self, index: usize) -> String {
        let token = &self.jobs[index].token;
        let tenant = self
            .platform
            .tenants
            .iter()
            .find(|t| &t.token == token)
            .map(|t| t.name.as_str())
            .unwrap_or("");
        job_id_for(tenant, &self.request_id(index))
    }

    fn resolve_target(&self, raw: &str) -> Result<FaultTarget, String> {
        let mut s = raw.to_string();
        for i in 0..self.jobs.len() {
            s = s.replace(&format!("{{job{i}}}"), &self.job_id(i));
        }
        if s.contains('{') {
            return Err(format!("unresolved placeholder in {raw:?}"));
        }
        s.parse()
    }

    /// The full fault schedule: fixed faults plus the seeded draws, in time
    /// order (stable for equal instants).
    pub fn fault_schedule(&self) -> Vec<FaultEvent> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut out: Vec<FaultEvent> = self
            .faults
            .iter()
            .map(|f| FaultEvent {
                at: SimTime::from_secs_f64(f.at),
                target: self.resolve_target(&f.target).expect("validated"),
                kind: f.kind.clone(),
            })
            .collect();
        for r in &self.random_faults {
            let (from, to) = (SimTime::from_secs_f64(r.from).as_millis(), SimTime::from_secs_f64(r.to).as_millis());
            for _ in 0..r.count {
                let at = rng.random_range(from..to);
                let target = &r.targets[rng.random_range(0..r.targets.len())];
                out.push(FaultEvent::crash(SimTime::from_millis(at), self.resolve_target(target).expect("validated")));
            }
        }
        out.sort_by_key(|f| f.at);
        out
    }
}
