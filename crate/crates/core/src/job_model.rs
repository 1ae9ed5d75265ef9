//! Job manifest, lifecycle statuses and the transition table shared by every
//! other component.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::SimTime;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("MANIFEST_INVALID: {0}")]
    ManifestInvalid(String),
    #[error("ILLEGAL_TRANSITION: {from} on {event}")]
    IllegalTransition { from: JobStatus, event: LifecycleEvent },
}

impl ModelError {
    pub fn code(&self) -> &'static str {
        match self {
            ModelError::ManifestInvalid(_) => "MANIFEST_INVALID",
            ModelError::IllegalTransition { .. } => "ILLEGAL_TRANSITION",
        }
    }
}

/// Where a job reads data from or writes results to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreRef {
    pub bucket: String,
    #[serde(default)]
    pub prefix: String,
    pub credential: String,
}

impl StoreRef {
    /// Joins `prefix` and `rest` with a single `/`.
    pub fn key(&self, rest: &str) -> String {
        let prefix = self.prefix.trim_end_matches('/');
        if prefix.is_empty() {
            rest.to_string()
        } else {
            format!("{prefix}/{rest}")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobManifest {
    pub manifest_version: u32,
    pub name: String,
    pub framework: String,
    pub framework_version: String,
    pub learners: u32,
    pub gpus_per_learner: u32,
    pub data_store: StoreRef,
    pub result_store: StoreRef,
    pub checkpoint_interval: u64,
    pub total_iterations: u64,
    pub learning_rate: f64,
    #[serde(default)]
    pub extra_hyperparameters: BTreeMap<String, String>,
}

/// Mirror of [`JobManifest`] with every field optional so that missing fields
/// produce field-level messages rather than serde's generic ones.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    manifest_version: Option<u32>,
    name: Option<String>,
    framework: Option<String>,
    framework_version: Option<String>,
    learners: Option<u32>,
    gpus_per_learner: Option<u32>,
    data_store: Option<StoreRef>,
    result_store: Option<StoreRef>,
    checkpoint_interval: Option<u64>,
    total_iterations: Option<u64>,
    learning_rate: Option<f64>,
    extra_hyperparameters: Option<BTreeMap<String, String>>,
}

fn required<T>(value: Option<T>, field: &str) -> Result<T, ModelError> {
    value.ok_or_else(|| ModelError::ManifestInvalid(format!("{field} required")))
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic())
        && chars.all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

/// Parses and validates a JSON manifest document.
pub fn parse_manifest(text: &str) -> Result<JobManifest, ModelError> {
    let raw: RawManifest =
        serde_json::from_str(text).map_err(|e| ModelError::ManifestInvalid(e.to_string()))?;
    let manifest = JobManifest {
        manifest_version: required(raw.manifest_version, "manifest_version")?,
        name: required(raw.name, "name")?,
        framework: required(raw.framework, "framework")?,
        framework_version: required(raw.framework_version, "framework_version")?,
        learners: required(raw.learners, "learners")?,
        gpus_per_learner: required(raw.gpus_per_learner, "gpus_per_learner")?,
        data_store: required(raw.data_store, "data_store")?,
        result_store: required(raw.result_store, "result_store")?,
        checkpoint_interval: required(raw.checkpoint_interval, "checkpoint_interval")?,
        total_iterations: required(raw.total_iterations, "total_iterations")?,
        learning_rate: required(raw.learning_rate, "learning_rate")?,
        extra_hyperparameters: raw.extra_hyperparameters.unwrap_or_default(),
    };
    manifest.validate()?;
    Ok(manifest)
}

impl JobManifest {
    pub fn validate(&self) -> Result<(), ModelError> {
        let invalid = |msg: &str| Err(ModelError::ManifestInvalid(msg.to_string()));
        if self.manifest_version != MANIFEST_VERSION {
            return invalid("manifest_version must be 1");
        }
        if self.name.trim().is_empty() {
            return invalid("name must be nonempty");
        }
        if !is_identifier(&self.framework) {
            return invalid("framework must be an identifier");
        }
        if self.learners < 1 {
            return invalid("learners ≥ 1");
        }
        if self.total_iterations < 1 {
            return invalid("total_iterations ≥ 1");
        }
        if self.checkpoint_interval < 1 {
            return invalid("checkpoint_interval ≥ 1");
        }
        if self.data_store.bucket.is_empty() {
            return invalid("data_store.bucket must be nonempty");
        }
        if self.result_store.bucket.is_empty() {
            return invalid("result_store.bucket must be nonempty");
        }
        if !self.learning_rate.is_finite() {
            return invalid("learning_rate must be finite");
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("manifest serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobStatus {
    Pending,
    Deploying,
    Downloading,
    Processing,
    Storing,
    Completed,
    Failed,
    Halted,
}

impl JobStatus {
    pub const ALL: [JobStatus; 8] = [
        JobStatus::Pending,
        JobStatus::Deploying,
        JobStatus::Downloading,
        JobStatus::Processing,
        JobStatus::Storing,
        JobStatus::Completed,
        JobStatus::Failed,
        JobStatus::Halted,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, JobStatus::Completed | JobStatus::Failed | JobStatus::Halted)
    }

    /// Position in the non-terminal order, `None` for terminal statuses.
    pub fn phase_rank(self) -> Option<u8> {
        match self {
            JobStatus::Pending => Some(0),
            JobStatus::Deploying => Some(1),
            JobStatus::Downloading => Some(2),
            JobStatus::Processing => Some(3),
            JobStatus::Storing => Some(4),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            JobStatus::Pending => "PENDING",
            JobStatus::Deploying => "DEPLOYING",
            JobStatus::Downloading => "DOWNLOADING",
            JobStatus::Processing => "PROCESSING",
            JobStatus::Storing => "STORING",
            JobStatus::Completed => "COMPLETED",
            JobStatus::Failed => "FAILED",
            JobStatus::Halted => "HALTED",
        }
    }

    pub fn parse(s: &str) -> Option<JobStatus> {
        JobStatus::ALL.into_iter().find(|st| st.as_str() == s)
    }
}

impl fmt::Display for JobStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LifecycleEvent {
    Submitted,
    GuardianCreated,
    DataLoadStarted,
    AllLearnersRunning,
    AllLearnersDone,
    ResultsStored,
    LearnerRestarted,
    DeployRetriesExhausted,
    LearnerFailedTerminal,
    UserHalt,
}

impl LifecycleEvent {
    pub const ALL: [LifecycleEvent; 10] = [
        LifecycleEvent::Submitted,
        LifecycleEvent::GuardianCreated,
        LifecycleEvent::DataLoadStarted,
        LifecycleEvent::AllLearnersRunning,
        LifecycleEvent::AllLearnersDone,
        LifecycleEvent::ResultsStored,
        LifecycleEvent::LearnerRestarted,
        LifecycleEvent::DeployRetriesExhausted,
        LifecycleEvent::LearnerFailedTerminal,
        LifecycleEvent::UserHalt,
    ];

    /// The event whose transition lands on `status`, used when an aggregated
    /// learner status moves the job forward.
    pub fn advancing_to(status: JobStatus) -> Option<LifecycleEvent> {
        match status {
            JobStatus::Deploying => Some(LifecycleEvent::GuardianCreated),
            JobStatus::Downloading => Some(LifecycleEvent::DataLoadStarted),
            JobStatus::Processing => Some(LifecycleEvent::AllLearnersRunning),
            JobStatus::Storing => Some(LifecycleEvent::AllLearnersDone),
            JobStatus::Completed => Some(LifecycleEvent::ResultsStored),
            JobStatus::Failed => Some(LifecycleEvent::LearnerFailedTerminal),
            JobStatus::Halted => Some(LifecycleEvent::UserHalt),
            JobStatus::Pending => None,
        }
    }
}

impl fmt::Display for LifecycleEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("event serializes");
        f.write_str(s.as_str().unwrap_or("?"))
    }
}

/// Transition table of the job lifecycle.
///
/// `SUBMITTED` only creates a job (see [`StatusRecord::initial`]) and is never
/// a legal transition. Forward events may skip phases, never go back.
pub fn next_status(current: JobStatus, event: LifecycleEvent) -> Result<JobStatus, ModelError> {
    use JobStatus::*;
    use LifecycleEvent::*;

    let illegal = Err(ModelError::IllegalTransition { from: current, event });
    if current.is_terminal() {
        return illegal;
    }
    let target = match event {
        Submitted => return illegal,
        GuardianCreated if current == Pending => Deploying,
        GuardianCreated => return illegal,
        DataLoadStarted => Downloading,
        AllLearnersRunning => Processing,
        AllLearnersDone => Storing,
        ResultsStored if current == Storing => Completed,
        ResultsStored => return illegal,
        LearnerRestarted if current == Pending => return illegal,
        LearnerRestarted => current,
        DeployRetriesExhausted if matches!(current, Pending | Deploying) => Failed,
        DeployRetriesExhausted => return illegal,
        LearnerFailedTerminal if current == Pending => return illegal,
        LearnerFailedTerminal => Failed,
        UserHalt => Halted,
    };
    match (current.phase_rank(), target.phase_rank()) {
        (Some(from), Some(to)) if to < from => illegal,
        (Some(from), Some(to)) if to == from && event != LearnerRestarted => illegal,
        _ => Ok(target),
    }
}

/// One entry of a job's append-only status history.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusRecord {
    pub status: JobStatus,
    pub timestamp: SimTime,
    #[serde(default)]
    pub detail: String,
    pub restart_count: u32,
}

impl StatusRecord {
    pub fn initial(at: SimTime) -> Self {
        StatusRecord {
            status: JobStatus::Pending,
            timestamp: at,
            detail: "submitted".to_string(),
            restart_count: 0,
        }
    }

    /// Builds the record that follows `self` on `event`.
    ///
    /// `LEARNER_RESTARTED` keeps the status and bumps `restart_count` by one.
    pub fn next(
        &self,
        event: LifecycleEvent,
        at: SimTime,
        detail: impl Into<String>,
    ) -> Result<StatusRecord, ModelError> {
        let status = next_status(self.status, event)?;
        let restart_count = if event == LifecycleEvent::LearnerRestarted {
            self.restart_count + 1
        } else {
            self.restart_count
        };
        Ok(StatusRecord {
            status,
            timestamp: at.max(self.timestamp),
            detail: detail.into(),
            restart_count,
        })
    }

    pub fn is_restart_notice(&self) -> bool {
        self.detail.starts_with(RESTART_NOTICE_PREFIX)
    }
}

pub const RESTART_NOTICE_PREFIX: &str = "restarted:";

/// Combines per-learner statuses into one job status.
///
/// FAILED dominates, then HALTED; otherwise the slowest learner wins, with a
/// COMPLETED learner counting as STORING (results still to be flushed).
pub fn aggregate_status(per_learner: &[JobStatus]) -> JobStatus {
    if per_learner.contains(&JobStatus::Failed) {
        return JobStatus::Failed;
    }
    if per_learner.contains(&JobStatus::Halted) {
        return JobStatus::Halted;
    }
    per_learner
        .iter()
        .map(|s| match s {
            JobStatus::Completed => JobStatus::Storing,
            other => *other,
        })
        .min_by_key(|s| s.phase_rank())
        .unwrap_or(JobStatus::Pending)
}
