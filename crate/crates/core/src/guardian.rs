//! The per-job Guardian: deploys a job atomically and then watches it.
//!
//! Deployment runs four resource phases (shared volume, helper group, learner
//! replica set, network policy) and then marks the job deployed. Before each
//! phase creates anything, the Guardian writes the phase record
//! `{"attempt":n,"phase":"<phase>","resource_ids":[...]}` to
//! `/jobs/{id}/guardian/phase`, listing every resource the attempt may have
//! created so far. Resource ids are fixed per job, so a restarted Guardian
//! that finds a partial record knows exactly what to destroy. It rolls the
//! attempt back and starts a fresh one, up to `max_attempts`, and then gives
//! up with FAILED.
//!
//! Once deployed, the Guardian folds learner status events from the
//! coordination store into the job's status history. Each attempt records the
//! revision it started at together with the job's status at that moment
//! (`/jobs/{id}/guardian/watch-from`), so a restarted Guardian replays the
//! same events from the same base and appends nothing new. Duplicate appends
//! are absorbed by the metadata store's idempotency key.

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::clock::{secs, SimTime};
use crate::cluster::{
    factory, ClusterError, Env, EnvError, HelperGroupSpec, NetworkPolicy, Payload, PayloadFactory,
    ReplicaSetSpec, Step,
};
use crate::job_model::{aggregate_status, JobStatus, LifecycleEvent, StatusRecord, RESTART_NOTICE_PREFIX};
use crate::kv::{keys, KvError, UnitStatus, Watch, WatchKind};
use crate::metadata::{JobRecord, MetadataError};
use crate::runtime::{self, Controller, JobContext, Learner, LoadData, LogCollector, RuntimeConfig, StoreResults};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuardianConfig {
    pub max_attempts: u32,
    /// How long learners may wait for placement before the attempt fails.
    pub queue_timeout: f64,
    /// Simulated time each deployment step takes.
    pub phase_time: f64,
    pub monitor_interval: f64,
    pub learner_restart_delay: f64,
    pub helper_restart_delay: f64,
}

impl Default for GuardianConfig {
    fn default() -> Self {
        GuardianConfig {
            max_attempts: 3,
            queue_timeout: 60.0,
            phase_time: 0.1,
            monitor_interval: 1.0,
            learner_restart_delay: 15.0,
            helper_restart_delay: 3.5,
        }
    }
}

pub fn guardian_task_id(job_id: &str) -> String {
    format!("guardian-{job_id}")
}

/// The deployment plan: resource ids in phase order, as cluster inventory
/// strings.
pub fn plan(job_id: &str) -> [String; 4] {
    [
        format!("volume:vol-{job_id}"),
        format!("helper-group:helpers-{job_id}"),
        format!("replica-set:learners-{job_id}"),
        format!("network-policy:netpol-{job_id}"),
    ]
}

pub const PHASES: [&str; 4] = ["volume", "helpers", "learners", "network-policy"];
pub const DEPLOYED: &str = "deployed";
pub const ROLLED_BACK: &str = "rolled-back";
pub const TORN_DOWN: &str = "torn-down";

/// Value under `/jobs/{id}/guardian/phase`, serialized with fields in this
/// order, e.g. `{"attempt":1,"phase":"helpers","resource_ids":["volume:vol-j","helper-group:helpers-j"]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub attempt: u32,
    pub phase: String,
    pub resource_ids: Vec<String>,
}

impl PhaseRecord {
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("phase record serializes")
    }

    pub fn from_bytes(b: &[u8]) -> Option<PhaseRecord> {
        serde_json::from_slice(b).ok()
    }
}

/// Value under `/jobs/{id}/guardian/watch-from`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WatchFrom {
    pub revision: u64,
    pub status: JobStatus,
    pub restart_count: u32,
}

/// Folds learner status events into job status records. Pure; used by the
/// Guardian and usable as a replay oracle.
#[derive(Debug, Clone)]
pub struct StatusFold {
    learners: Vec<Option<JobStatus>>,
    restarts: Vec<u32>,
    pub record: StatusRecord,
}

impl StatusFold {
    pub fn new(learners: u32, base: StatusRecord) -> Self {
        StatusFold {
            learners: vec![None; learners as usize],
            restarts: vec![0; learners as usize],
            record: base,
        }
    }

    pub fn aggregate(&self) -> JobStatus {
        let statuses: Vec<JobStatus> =
            self.learners.iter().map(|s| s.unwrap_or(JobStatus::Deploying)).collect();
        aggregate_status(&statuses)
    }

    /// Applies one learner status and returns the records to append.
    pub fn apply(&mut self, index: usize, status: &UnitStatus, at: SimTime) -> Vec<StatusRecord> {
        let mut out = Vec::new();
        if index >= self.learners.len() || self.record.status.is_terminal() {
            return out;
        }
        while self.restarts[index] < status.restart_count {
            self.restarts[index] += 1;
            let detail = format!(
                "{RESTART_NOTICE_PREFIX} learner-{index} restart_count={}",
                self.restarts[index]
            );
            if let Ok(r) = self.record.next(LifecycleEvent::LearnerRestarted, at, detail) {
                self.record = r.clone();
                out.push(r);
            }
        }
        let prev = self.learners[index];
        let newer = match (prev, status.status) {
            (None, s) => Some(s),
            (Some(p), _) if p.is_terminal() => Some(p),
            (Some(_), s) if s.is_terminal() => Some(s),
            (Some(p), s) => Some(if s.phase_rank() > p.phase_rank() { s } else { p }),
        };
        self.learners[index] = newer;
        let agg = self.aggregate();
        let advances = agg != self.record.status
            && (agg.is_terminal() || agg.phase_rank() > self.record.status.phase_rank());
        if advances {
            if let Some(event) = LifecycleEvent::advancing_to(agg) {
                let detail = match agg {
                    JobStatus::Failed => format!("learner-{index} failed (exit {})", status.exit_code.unwrap_or(-1)),
                    _ => String::new(),
                };
                if let Ok(r) = self.record.next(event, at, detail) {
                    self.record = r.clone();
                    out.push(r);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
enum State {
    Boot,
    Begin { attempt: u32 },
    WriteAhead { attempt: u32, phase: usize },
    Create { attempt: u32, phase: usize },
    WaitPlaced { attempt: u32, deadline: SimTime },
    MarkDeployed { attempt: u32 },
    Monitor,
    Rollback { attempt: u32 },
    Terminal { status: JobStatus, event: LifecycleEvent, detail: String },
    Teardown,
}

pub struct Guardian {
    job_id: String,
    config: Arc<GuardianConfig>,
    runtime: RuntimeConfig,
    state: State,
    job: Option<JobRecord>,
    attempt: u32,
    watch: Option<Watch>,
    fold: Option<StatusFold>,
}

enum Fault {
    /// Transient store trouble; retry the same step later.
    Retry,
    Fatal(String),
}

impl From<EnvError> for Fault {
    fn from(e: EnvError) -> Self {
        match e {
            EnvError::Kv(KvError::Unavailable) | EnvError::Meta(MetadataError::Unavailable) => Fault::Retry,
            other => Fault::Fatal(other.to_string()),
        }
    }
}

impl Guardian {
    pub fn new(job_id: impl Into<String>, config: Arc<GuardianConfig>, runtime: RuntimeConfig) -> Self {
        Guardian {
            job_id: job_id.into(),
            config,
            runtime,
            state: State::Boot,
            job: None,
            attempt: 0,
            watch: None,
            fold: None,
        }
    }

    pub fn factory(job_id: &str, config: Arc<GuardianConfig>, runtime: RuntimeConfig) -> PayloadFactory {
        let job_id = job_id.to_string();
        factory(move || Guardian::new(job_id.clone(), config.clone(), runtime.clone()))
    }

    fn job(&self) -> &JobRecord {
        self.job.as_ref().expect("loaded at boot")
    }

    fn ids(&self) -> [String; 4] {
        plan(&self.job_id)
    }

    fn name(&self, prefix: &str) -> String {
        format!("{prefix}-{}", self.job_id)
    }

    fn context(&self) -> Arc<JobContext> {
        let job = self.job();
        Arc::new(JobContext {
            job_id: self.job_id.clone(),
            tenant: job.tenant.clone(),
            manifest: job.manifest.clone(),
            volume: self.name("vol"),
            config: self.runtime.clone(),
        })
    }

    fn put_phase(&self, env: &mut Env<'_>, attempt: u32, phase: &str, ids: &[String]) -> Result<(), Fault> {
        let rec = PhaseRecord { attempt, phase: phase.to_string(), resource_ids: ids.to_vec() };
        env.kv_put(&keys::guardian_phase(&self.job_id), rec.to_bytes())?;
        env.log_event("phase", format!("job={} attempt={attempt} phase={phase}", self.job_id));
        Ok(())
    }

    fn halted(&self, env: &mut Env<'_>) -> Result<bool, Fault> {
        match env.kv_get(&keys::guardian_halt(&self.job_id)) {
            Ok(_) => Ok(true),
            Err(EnvError::Kv(KvError::NotFound(_))) => Ok(false),
            Err(e) => Err(e.into()),
        }
    }

    fn append(&self, env: &mut Env<'_>, rec: &StatusRecord) -> Result<(), Fault> {
        match env.metadata()?.append_status(&self.job_id, rec.clone()) {
            Ok(_) => {
                env.log_event(
                    "status",
                    format!("job={} status={} restart_count={}", self.job_id, rec.status, rec.restart_count),
                );
                Ok(())
            }
            Err(MetadataError::Unavailable) => Err(Fault::Retry),
            // An earlier attempt already got further; nothing to record.
            Err(MetadataError::IllegalTransition { .. }) => Ok(()),
            Err(e) => Err(Fault::Fatal(e.to_string())),
        }
    }

    /// Destroys every plan resource; each destroy is a no-op if absent.
    fn destroy_all(&self, env: &mut Env<'_>) -> Result<(), Fault> {
        let cluster = env.cluster()?;
        cluster.delete_policy(&self.name("netpol"));
        cluster.destroy_unit(&self.name("learners"));
        cluster.destroy_unit(&self.name("helpers"));
        cluster.destroy_volume(&self.name("vol"));
        Ok(())
    }

    fn clear_unit_statuses(&self, env: &mut Env<'_>) -> Result<(), Fault> {
        let mut stale = env.kv_range(&keys::learners_prefix(&self.job_id))?;
        stale.extend(env.kv_range(&format!("/jobs/{}/helpers/", self.job_id))?);
        for entry in stale {
            env.kv_delete(&entry.key)?;
        }
        Ok(())
    }

    fn step_time(&self) -> Step {
        Step::After(secs(self.config.phase_time))
    }

    fn retry(&self) -> Step {
        Step::After(secs(self.config.monitor_interval))
    }

    fn boot(&mut self, env: &mut Env<'_>) -> Result<Step, Fault> {
        let job = match env.metadata()?.get_job(&self.job_id) {
            Ok(j) => j,
            Err(MetadataError::NotFound(_)) => {
                env.log_event("guardian-exit", format!("job={} reason=unknown-job", self.job_id));
                return Ok(Step::Exit(0));
            }
            Err(e) => return Err(EnvError::Meta(e).into()),
        };
        let phase = match env.kv_get(&keys::guardian_phase(&self.job_id)) {
            Ok(e) => PhaseRecord::from_bytes(&e.value),
            Err(EnvError::Kv(KvError::NotFound(_))) => None,
            Err(e) => return Err(e.into()),
        };
        let terminal = job.current_status.is_terminal();
        if job.current_status == JobStatus::Pending {
            let rec = job.last().next(LifecycleEvent::GuardianCreated, env.now(), "guardian started");
            if let Ok(rec) = rec {
                self.job = Some(job.clone());
                self.append(env, &rec)?;
            }
        }
        self.job = Some(job);
        self.attempt = phase.as_ref().map_or(0, |p| p.attempt);
        env.log_event(
            "guardian-boot",
            format!("job={} phase={}", self.job_id, phase.as_ref().map_or("none", |p| p.phase.as_str())),
        );
        self.state = match phase {
            _ if terminal => State::Teardown,
            None => State::Begin { attempt: 1 },
            Some(p) if p.phase == DEPLOYED => State::Monitor,
            Some(p) if p.phase == TORN_DOWN => State::Teardown,
            Some(p) if p.phase == ROLLED_BACK => State::Begin { attempt: p.attempt + 1 },
            Some(p) => State::Rollback { attempt: p.attempt },
        };
        Ok(Step::After(Duration::ZERO))
    }

    fn begin(&mut self, env: &mut Env<'_>, attempt: u32) -> Result<Step, Fault> {
        if attempt > self.config.max_attempts {
            self.state = State::Terminal {
                status: JobStatus::Failed,
                event: LifecycleEvent::DeployRetriesExhausted,
                detail: format!("deployment failed after {} attempts", self.config.max_attempts),
            };
            return Ok(Step::After(Duration::ZERO));
        }
        self.clear_unit_statuses(env)?;
        let job = env.metadata()?.get_job(&self.job_id).map_err(EnvError::Meta)?;
        let from = WatchFrom {
            revision: env.kv_revision()? + 1,
            status: job.current_status,
            restart_count: job.last().restart_count,
        };
        let bytes = serde_json::to_vec(&from).expect("serializes");
        env.kv_put(&keys::guardian_watch_from(&self.job_id), bytes)?;
        self.job = Some(job);
        self.attempt = attempt;
        env.log_event("deploy-attempt", format!("job={} attempt={attempt}", self.job_id));
        self.state = State::WriteAhead { attempt, phase: 0 };
        Ok(self.step_time())
    }

    fn create(&mut self, env: &mut Env<'_>, attempt: u32, phase: usize) -> Result<Step, Fault> {
        let ctx = self.context();
        let job_id = self.job_id.clone();
        let vol = self.name("vol");
        let cfg = self.config.clone();
        let result = match phase {
            0 => env.cluster()?.create_volume(&vol, &job_id),
            1 => {
                let containers: Vec<(String, PayloadFactory)> = vec![
                    (runtime::LOAD_DATA.into(), {
                        let c = ctx.clone();
                        factory(move || LoadData::new(c.clone()))
                    }),
                    (runtime::LOG_COLLECTOR.into(), {
                        let c = ctx.clone();
                        factory(move || LogCollector::new(c.clone()))
                    }),
                    (runtime::STORE_RESULTS.into(), {
                        let c = ctx.clone();
                        factory(move || StoreResults::new(c.clone()))
                    }),
                    (runtime::CONTROLLER.into(), {
                        let c = ctx.clone();
                        factory(move || Controller::new(c.clone()))
                    }),
                ];
                env.cluster()?.create_helper_group(HelperGroupSpec {
                    group_id: self.name("helpers"),
                    containers,
                    restart_delay: secs(cfg.helper_restart_delay),
                    volumes: vec![vol.clone()],
                    owner: job_id.clone(),
                })
            }
            2 => {
                let c = ctx.clone();
                env.cluster()?.create_replica_set(ReplicaSetSpec {
                    set_id: self.name("learners"),
                    replicas: ctx.manifest.learners,
                    gpus_per_replica: ctx.manifest.gpus_per_learner,
                    payload: factory(move || Learner::new(c.clone())),
                    restart_delay: secs(cfg.learner_restart_delay),
                    volumes: vec![vol.clone()],
                    network_policy: Some(self.name("netpol")),
                    owner: job_id.clone(),
                })
            }
            _ => env.cluster()?.apply_policy(NetworkPolicy {
                id: self.name("netpol"),
                owner: job_id.clone(),
                tenant: ctx.tenant.clone(),
                volume: vol.clone(),
            }),
        };
        match result {
            Ok(()) | Err(ClusterError::AlreadyExists(_)) => {}
            Err(e) => {
                env.log_event(
                    "deploy-error",
                    format!("job={job_id} attempt={attempt} phase={} error={e}", PHASES[phase]),
                );
                self.state = State::Rollback { attempt };
                return Ok(self.step_time());
            }
        }
        self.state = match phase {
            2 => State::WaitPlaced { attempt, deadline: env.now() + secs(cfg.queue_timeout) },
            3 => State::MarkDeployed { attempt },
            p => State::WriteAhead { attempt, phase: p + 1 },
        };
        Ok(self.step_time())
    }

    fn wait_placed(&mut self, env: &mut Env<'_>, attempt: u32, deadline: SimTime) -> Result<Step, Fault> {
        let set = self.name("learners");
        let status = env.cluster()?.replica_set_status(&set);
        match status {
            Some(s) if s.placed + s.exited == s.replicas => {
                self.state = State::WriteAhead { attempt, phase: 3 };
                Ok(self.step_time())
            }
            _ if env.now() >= deadline => {
                env.log_event("deploy-error", format!("job={} attempt={attempt} error=queue timeout", self.job_id));
                self.state = State::Rollback { attempt };
                Ok(self.step_time())
            }
            _ => Ok(self.retry()),
        }
    }

    fn start_monitor(&mut self, env: &mut Env<'_>) -> Result<(), Fault> {
        let from = env.kv_get(&keys::guardian_watch_from(&self.job_id))?;
        let from: WatchFrom = serde_json::from_slice(&from.value)
            .map_err(|e| Fault::Fatal(format!("watch-from: {e}")))?;
        let base = StatusRecord {
            status: from.status,
            timestamp: SimTime::ZERO,
            detail: String::new(),
            restart_count: from.restart_count,
        };
        self.watch = Some(env.kv_watch(&keys::learners_prefix(&self.job_id), from.revision)?);
        self.fold = Some(StatusFold::new(self.job().manifest.learners, base));
        Ok(())
    }

    fn monitor(&mut self, env: &mut Env<'_>) -> Result<Step, Fault> {
        if self.watch.is_none() {
            self.start_monitor(env)?;
        }
        let mut watch = self.watch.clone().expect("started");
        let events = env.kv_poll(&mut watch)?;
        for ev in events {
            if ev.kind != WatchKind::Put {
                self.watch.as_mut().expect("started").next_revision = ev.entry.revision + 1;
                continue;
            }
            let (Some(i), Some(status)) =
                (keys::learner_index(&ev.entry.key), UnitStatus::from_bytes(&ev.entry.value))
            else {
                self.watch.as_mut().expect("started").next_revision = ev.entry.revision + 1;
                continue;
            };
            let mut fold = self.fold.clone().expect("started");
            for rec in fold.apply(i as usize, &status, env.now()) {
                self.append(env, &rec)?;
            }
            self.fold = Some(fold);
            self.watch.as_mut().expect("started").next_revision = ev.entry.revision + 1;
        }
        let status = self.fold.as_ref().expect("started").record.status;
        if status == JobStatus::Failed {
            self.state = State::Teardown;
            return Ok(Step::After(Duration::ZERO));
        }
        if status == JobStatus::Storing {
            let key = keys::helper_status(&self.job_id, runtime::STORE_RESULTS);
            let helper = match env.kv_get(&key) {
                Ok(e) => UnitStatus::from_bytes(&e.value),
                Err(EnvError::Kv(KvError::NotFound(_))) => None,
                Err(e) => return Err(e.into()),
            };
            match helper.map(|h| h.status) {
                Some(JobStatus::Completed) => {
                    self.state = State::Terminal {
                        status: JobStatus::Completed,
                        event: LifecycleEvent::ResultsStored,
                        detail: "results stored".into(),
                    };
                    return Ok(Step::After(Duration::ZERO));
                }
                Some(JobStatus::Failed) => {
                    self.state = State::Terminal {
                        status: JobStatus::Failed,
                        event: LifecycleEvent::LearnerFailedTerminal,
                        detail: "store-results failed".into(),
                    };
                    return Ok(Step::After(Duration::ZERO));
                }
                _ => {}
            }
        }
        Ok(self.retry())
    }

    fn terminal(&mut self, env: &mut Env<'_>, status: JobStatus, event: LifecycleEvent, detail: &str) -> Result<Step, Fault> {
        let job = env.metadata()?.get_job(&self.job_id).map_err(EnvError::Meta)?;
        if !job.current_status.is_terminal() {
            let last = job.last();
            let rec = last
                .next(event, env.now(), detail)
                .or_else(|_| {
                    // Retries exhausted after an attempt already got past
                    // DEPLOYING: record the failure all the same.
                    let fallback = LifecycleEvent::advancing_to(status).unwrap_or(event);
                    last.next(fallback, env.now(), detail)
                })
                .map_err(|e| Fault::Fatal(e.to_string()))?;
            self.append(env, &rec)?;
        }
        self.state = State::Teardown;
        Ok(Step::After(Duration::ZERO))
    }

    fn teardown(&mut self, env: &mut Env<'_>) -> Result<Step, Fault> {
        self.destroy_all(env)?;
        let attempt = self.attempt;
        self.put_phase(env, attempt, TORN_DOWN, &[])?;
        env.log_event("teardown", format!("job={}", self.job_id));
        Ok(Step::Exit(0))
    }

    fn run(&mut self, env: &mut Env<'_>) -> Result<Step, Fault> {
        if !matches!(self.state, State::Boot | State::Terminal { .. } | State::Teardown) && self.halted(env)? {
            self.state = State::Terminal {
                status: JobStatus::Halted,
                event: LifecycleEvent::UserHalt,
                detail: "halted by user".into(),
            };
        }
        match self.state.clone() {
            State::Boot => self.boot(env),
            State::Begin { attempt } => self.begin(env, attempt),
            State::WriteAhead { attempt, phase } => {
                let ids = self.ids();
                self.put_phase(env, attempt, PHASES[phase], &ids[..=phase])?;
                self.state = State::Create { attempt, phase };
                Ok(self.step_time())
            }
            State::Create { attempt, phase } => self.create(env, attempt, phase),
            State::WaitPlaced { attempt, deadline } => self.wait_placed(env, attempt, deadline),
            State::MarkDeployed { attempt } => {
                let ids = self.ids();
                self.put_phase(env, attempt, DEPLOYED, &ids)?;
                env.log_event("deployed", format!("job={} attempt={attempt}", self.job_id));
                self.state = State::Monitor;
                Ok(Step::After(Duration::ZERO))
            }
            State::Monitor => self.monitor(env),
            State::Rollback { attempt } => {
                self.destroy_all(env)?;
                self.clear_unit_statuses(env)?;
                self.put_phase(env, attempt, ROLLED_BACK, &[])?;
                env.log_event("rollback", format!("job={} attempt={attempt}", self.job_id));
                self.state = State::Begin { attempt: attempt + 1 };
                Ok(self.step_time())
            }
            State::Terminal { status, event, detail } => self.terminal(env, status, event, &detail),
            State::Teardown => self.teardown(env),
        }
    }
}

impl Payload for Guardian {
    fn step(&mut self, env: &mut Env<'_>) -> Step {
        match self.run(env) {
            Ok(step) => step,
            Err(Fault::Retry) => self.retry(),
            Err(Fault::Fatal(msg)) => {
                env.log_event("guardian-error", format!("job={} error={msg}", self.job_id));
                self.retry()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn us(status: JobStatus, rc: u32) -> UnitStatus {
        UnitStatus { status, timestamp: SimTime::ZERO, restart_count: rc, exit_code: None }
    }

    fn base() -> StatusRecord {
        StatusRecord {
            status: JobStatus::Deploying,
            timestamp: SimTime::ZERO,
            detail: String::new(),
            restart_count: 0,
        }
    }

    #[test]
    fn phase_record_wire_form() {
        let rec = PhaseRecord { attempt: 2, phase: "helpers".into(), resource_ids: plan("j")[..2].to_vec() };
        let text = String::from_utf8(rec.to_bytes()).unwrap();
        assert_eq!(
            text,
            r#"{"attempt":2,"phase":"helpers","resource_ids":["volume:vol-j","helper-group:helpers-j"]}"#
        );
        assert_eq!(PhaseRecord::from_bytes(text.as_bytes()), Some(rec));
    }

    #[test]
    fn fold_happy_path() {
        let mut f = StatusFold::new(2, base());
        let t = SimTime::ZERO;
        let mut seen = Vec::new();
        for (i, s) in [
            (0, JobStatus::Downloading),
            (1, JobStatus::Downloading),
            (0, JobStatus::Processing),
            (1, JobStatus::Processing),
            (0, JobStatus::Completed),
            (1, JobStatus::Completed),
        ] {
            seen.extend(f.apply(i, &us(s, 0), t).into_iter().map(|r| r.status));
        }
        assert_eq!(seen, [JobStatus::Downloading, JobStatus::Processing, JobStatus::Storing]);
    }

    #[test]
    fn fold_restart_notice_keeps_status() {
        let mut f = StatusFold::new(2, base());
        let t = SimTime::ZERO;
        f.apply(0, &us(JobStatus::Processing, 0), t);
        f.apply(1, &us(JobStatus::Processing, 0), t);
        let recs = f.apply(1, &us(JobStatus::Processing, 1), t);
        assert_eq!(recs.len(), 1);
        assert_eq!((recs[0].status, recs[0].restart_count), (JobStatus::Processing, 1));
        assert!(recs[0].is_restart_notice());
        // Same event again is not a new restart.
        assert!(f.apply(1, &us(JobStatus::Processing, 1), t).is_empty());
    }

    #[test]
    fn fold_failure_dominates() {
        let mut f = StatusFold::new(2, base());
        let t = SimTime::ZERO;
        f.apply(0, &us(JobStatus::Completed, 0), t);
        let recs = f.apply(1, &us(JobStatus::Failed, 0), t);
        assert_eq!(recs.last().unwrap().status, JobStatus::Failed);
        assert!(f.apply(0, &us(JobStatus::Processing, 3), t).is_empty());
    }
}
