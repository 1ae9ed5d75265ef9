//! Lifecycle manager: launches exactly one Guardian per job and relays halts.
//!
//! Deploy writes the claim key `/jobs/{id}/guardian/claim` first and creates
//! the Guardian task `guardian-{id}` a moment later. The task id is fixed per
//! job, so a repeated deploy (reconciler retry, restarted LCM) either finds
//! the task already there or creates the one that an earlier crash left out.
//! The LCM keeps no state of its own.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{secs, SimTime};
use crate::cluster::{ClusterError, ServiceKind, TaskSpec};
use crate::guardian::{guardian_task_id, Guardian};
use crate::job_model::{JobStatus, LifecycleEvent};
use crate::kv::{keys, KvError};
use crate::metadata::MetadataError;
use crate::platform::{Platform, Timer};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LcmError {
    #[error("LCM_UNAVAILABLE")]
    Unavailable,
    #[error("NOT_FOUND: {0}")]
    NotFound(String),
    #[error("TERMINAL: job {0} already finished")]
    Terminal(String),
    #[error("STORE_UNAVAILABLE")]
    StoreUnavailable,
    #[error("CLUSTER_UNAVAILABLE: {0}")]
    ClusterUnavailable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeployOutcome {
    /// Claim written; the Guardian task follows after the launch delay.
    Claimed,
    /// A Guardian task already exists for the job.
    AlreadyClaimed,
}

/// Value stored under the claim key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuardianLaunchRecord {
    pub job_id: String,
    pub guardian_task_id: String,
    pub launched_at: SimTime,
}

impl Platform {
    pub(crate) fn lcm_receive_deploy(&mut self, job_id: &str) {
        if !self.service_up(ServiceKind::Lcm) {
            self.cluster.record("message-lost", "service:lcm", format!("deploy job={job_id}"));
            return;
        }
        if let Err(e) = self.lcm_deploy(job_id) {
            self.cluster.record("deploy-error", "service:lcm", format!("job={job_id} error={e}"));
        }
    }

    /// Handles a deploy request for a PENDING or DEPLOYING job.
    pub fn lcm_deploy(&mut self, job_id: &str) -> Result<DeployOutcome, LcmError> {
        if !self.service_up(ServiceKind::Lcm) {
            return Err(LcmError::Unavailable);
        }
        let job = match self.stores.metadata.get_job(job_id) {
            Ok(j) => j,
            Err(MetadataError::NotFound(_)) => return Err(LcmError::NotFound(job_id.into())),
            Err(_) => return Err(LcmError::StoreUnavailable),
        };
        if job.current_status.is_terminal() {
            return Err(LcmError::Terminal(job_id.into()));
        }
        let task_id = guardian_task_id(job_id);
        if self.cluster.unit_exists(&task_id) {
            return Ok(DeployOutcome::AlreadyClaimed);
        }
        let claim_key = keys::guardian_claim(job_id);
        match self.stores.kv.get(&claim_key) {
            Ok(_) => {}
            Err(KvError::NotFound(_)) => {
                let record = GuardianLaunchRecord {
                    job_id: job_id.into(),
                    guardian_task_id: task_id.clone(),
                    launched_at: self.now(),
                };
                let value = serde_json::to_vec(&record).expect("serializes");
                self.stores.kv.put(&claim_key, value).map_err(|_| LcmError::StoreUnavailable)?;
                self.cluster.record("claim", format!("task:{task_id}"), format!("job={job_id}"));
            }
            Err(_) => return Err(LcmError::StoreUnavailable),
        }
        let lcm_epoch = self.services[&ServiceKind::Lcm].epoch;
        let delay = secs(self.config.services.launch_delay);
        self.schedule_in(delay, Timer::Launch { job_id: job_id.into(), lcm_epoch });
        Ok(DeployOutcome::Claimed)
    }

    pub(crate) fn lcm_launch(&mut self, job_id: &str, lcm_epoch: u64) {
        let lcm = self.services[&ServiceKind::Lcm];
        if !lcm.up || lcm.epoch != lcm_epoch {
            self.cluster.record("launch-lost", "service:lcm", format!("job={job_id}"));
            return;
        }
        let task_id = guardian_task_id(job_id);
        let spec = TaskSpec {
            task_id: task_id.clone(),
            payload: Guardian::factory(job_id, self.guardian_config.clone(), self.config.runtime.clone()),
            restart_delay: secs(self.config.services.guardian_restart_delay),
            max_system_restarts: None,
            gpus: 0,
            owner: job_id.to_string(),
        };
        match self.cluster.create_task(spec) {
            Ok(()) | Err(ClusterError::AlreadyExists(_)) => {}
            Err(e) => {
                self.cluster.record("deploy-error", "service:lcm", format!("job={job_id} error={e}"));
                return;
            }
        }
        // The Guardian records DEPLOYING itself as well; whichever write
        // lands second is absorbed as a duplicate.
        if let Ok(job) = self.stores.metadata.get_job(job_id) {
            if job.current_status == JobStatus::Pending {
                if let Ok(rec) = job.last().next(LifecycleEvent::GuardianCreated, self.now(), "guardian launched") {
                    let _ = self.stores.metadata.append_status(job_id, rec);
                }
            }
        }
    }

    /// Writes the halt intent the job's Guardian watches for.
    pub fn lcm_halt(&mut self, job_id: &str) -> Result<(), LcmError> {
        if !self.service_up(ServiceKind::Lcm) {
            return Err(LcmError::Unavailable);
        }
        let job = match self.stores.metadata.get_job(job_id) {
            Ok(j) => j,
            Err(MetadataError::NotFound(_)) => return Err(LcmError::NotFound(job_id.into())),
            Err(_) => return Err(LcmError::StoreUnavailable),
        };
        if job.current_status.is_terminal() {
            return Err(LcmError::Terminal(job_id.into()));
        }
        let stamp = format!("requested_at={}", self.now());
        self.stores.kv.put(&keys::guardian_halt(job_id), stamp).map_err(|_| LcmError::StoreUnavailable)?;
        self.cluster.record("halt", format!("task:{}", guardian_task_id(job_id)), format!("job={job_id}"));
        Ok(())
    }

    /// Liveness probe for the LCM.
    pub fn lcm_ping(&self) -> bool {
        self.service_up(ServiceKind::Lcm)
    }

    /// The API service's reconciler: re-sends deploys for PENDING jobs older
    /// than the reconcile interval that still have no Guardian task.
    pub(crate) fn reconcile(&mut self) {
        if !self.service_up(ServiceKind::Api) {
            return;
        }
        let Ok(pending) = self.stores.metadata.jobs_in_status(JobStatus::Pending) else {
            return;
        };
        let age = secs(self.config.services.reconcile_interval);
        let now = self.now();
        for job in pending {
            if now.since(job.created_at) < age || self.cluster.unit_exists(&guardian_task_id(&job.job_id)) {
                continue;
            }
            self.cluster.record("reconcile", "service:api", format!("job={}", job.job_id));
            let delay = secs(self.config.services.notify_delay);
            self.schedule_in(delay, Timer::Deploy { job_id: job.job_id });
        }
    }
}
