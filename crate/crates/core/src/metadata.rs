//! Durable job-metadata store: the source of truth users read.
//!
//! Every mutation is appended to a checksummed log ([`crate::wal`]) before it
//! is applied in memory, so an acknowledged write survives a crash. A crash
//! drops all in-memory state; [`MetadataStore::restart`] rebuilds it by
//! replaying the log.
//!
//! Log payloads are JSON deltas, one per record:
//!
//! ```text
//! {"op":"put_job","record":{...JobRecord...}}
//! {"op":"append_status","job_id":"...","record":{...StatusRecord...}}
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::SimTime;
use crate::job_model::{JobManifest, JobStatus, StatusRecord};
use crate::wal::Wal;

const TAG: [u8; 4] = *b"META";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetadataError {
    #[error("DUPLICATE_ID: {0}")]
    DuplicateId(String),
    #[error("NOT_FOUND: {0}")]
    NotFound(String),
    #[error("STORE_UNAVAILABLE")]
    Unavailable,
    #[error("ILLEGAL_TRANSITION: {from} -> {to}")]
    IllegalTransition { from: JobStatus, to: JobStatus },
    #[error("timestamp {got} precedes last history entry {last}")]
    OutOfOrder { last: SimTime, got: SimTime },
    #[error("metadata log: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: String,
    pub tenant: String,
    pub request_id: String,
    pub manifest: JobManifest,
    pub current_status: JobStatus,
    pub history: Vec<StatusRecord>,
    pub created_at: SimTime,
}

impl JobRecord {
    pub fn new(
        job_id: impl Into<String>,
        tenant: impl Into<String>,
        request_id: impl Into<String>,
        manifest: JobManifest,
        at: SimTime,
    ) -> Self {
        JobRecord {
            job_id: job_id.into(),
            tenant: tenant.into(),
            request_id: request_id.into(),
            manifest,
            current_status: JobStatus::Pending,
            history: vec![StatusRecord::initial(at)],
            created_at: at,
        }
    }

    pub fn last(&self) -> &StatusRecord {
        self.history.last().expect("history is never empty")
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum Delta {
    PutJob { record: Box<JobRecord> },
    AppendStatus { job_id: String, record: StatusRecord },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Appended {
    New,
    /// A record with the same (status, restart_count) was already present.
    Duplicate,
}

struct Live {
    wal: Wal,
    jobs: BTreeMap<String, JobRecord>,
}

pub struct MetadataStore {
    path: PathBuf,
    sync: bool,
    live: Mutex<Option<Live>>,
}

impl MetadataStore {
    pub fn open(dir: impl AsRef<Path>, sync: bool) -> Result<Self, MetadataError> {
        let store = MetadataStore {
            path: dir.as_ref().join("metadata.log"),
            sync,
            live: Mutex::new(None),
        };
        store.restart()?;
        Ok(store)
    }

    /// Drops all in-memory state; every call fails with `STORE_UNAVAILABLE`
    /// until [`restart`](Self::restart).
    pub fn crash(&self) {
        *self.live.lock() = None;
    }

    pub fn is_up(&self) -> bool {
        self.live.lock().is_some()
    }

    /// Reopens the log and replays it. A no-op when already up.
    pub fn restart(&self) -> Result<(), MetadataError> {
        let mut live = self.live.lock();
        if live.is_some() {
            return Ok(());
        }
        let (wal, replay) =
            Wal::open(&self.path, TAG, self.sync).map_err(|e| MetadataError::Io(e.to_string()))?;
        if replay.truncated_bytes > 0 {
            tracing::warn!(bytes = replay.truncated_bytes, "metadata log had a torn tail");
        }
        let mut jobs = BTreeMap::new();
        for raw in replay.records {
            let delta: Delta =
                serde_json::from_slice(&raw).map_err(|e| MetadataError::Io(e.to_string()))?;
            match delta {
                Delta::PutJob { record } => {
                    jobs.insert(record.job_id.clone(), *record);
                }
                Delta::AppendStatus { job_id, record } => {
                    if let Some(job) = jobs.get_mut(&job_id) {
                        job.current_status = record.status;
                        job.history.push(record);
                    }
                }
            }
        }
        *live = Some(Live { wal, jobs });
        Ok(())
    }

    fn with_live<T>(
        &self,
        f: impl FnOnce(&mut Live) -> Result<T, MetadataError>,
    ) -> Result<T, MetadataError> {
        let mut guard = self.live.lock();
        let live = guard.as_mut().ok_or(MetadataError::Unavailable)?;
        f(live)
    }

    /// Persists a new job. Returns only after the record is in the log.
    pub fn put_job(&self, record: &JobRecord) -> Result<(), MetadataError> {
        self.with_live(|live| {
            if live.jobs.contains_key(&record.job_id) {
                return Err(MetadataError::DuplicateId(record.job_id.clone()));
            }
            let delta = Delta::PutJob { record: Box::new(record.clone()) };
            write(&mut live.wal, &delta)?;
            live.jobs.insert(record.job_id.clone(), record.clone());
            Ok(())
        })
    }

    /// Appends a status record, idempotently by `(status, restart_count)`.
    pub fn append_status(
        &self,
        job_id: &str,
        record: StatusRecord,
    ) -> Result<Appended, MetadataError> {
        self.with_live(|live| {
            let job = live
                .jobs
                .get(job_id)
                .ok_or_else(|| MetadataError::NotFound(job_id.to_string()))?;
            if job
                .history
                .iter()
                .any(|r| r.status == record.status && r.restart_count == record.restart_count)
            {
                return Ok(Appended::Duplicate);
            }
            let last = job.last();
            if !is_forward(last, &record) {
                return Err(MetadataError::IllegalTransition {
                    from: last.status,
                    to: record.status,
                });
            }
            if record.timestamp < last.timestamp {
                return Err(MetadataError::OutOfOrder { last: last.timestamp, got: record.timestamp });
            }
            let delta = Delta::AppendStatus { job_id: job_id.to_string(), record: record.clone() };
            write(&mut live.wal, &delta)?;
            let job = live.jobs.get_mut(job_id).expect("checked above");
            job.current_status = record.status;
            job.history.push(record);
            Ok(Appended::New)
        })
    }

    pub fn get_job(&self, job_id: &str) -> Result<JobRecord, MetadataError> {
        self.with_live(|live| {
            live.jobs
                .get(job_id)
                .cloned()
                .ok_or_else(|| MetadataError::NotFound(job_id.to_string()))
        })
    }

    /// Jobs of one tenant, oldest first.
    pub fn list_jobs(&self, tenant: &str) -> Result<Vec<JobRecord>, MetadataError> {
        self.with_live(|live| {
            let mut jobs: Vec<JobRecord> =
                live.jobs.values().filter(|j| j.tenant == tenant).cloned().collect();
            jobs.sort_by(|a, b| (a.created_at, &a.job_id).cmp(&(b.created_at, &b.job_id)));
            Ok(jobs)
        })
    }

    /// All jobs currently in `status`, oldest first (used by the reconciler).
    pub fn jobs_in_status(&self, status: JobStatus) -> Result<Vec<JobRecord>, MetadataError> {
        self.with_live(|live| {
            let mut jobs: Vec<JobRecord> = live
                .jobs
                .values()
                .filter(|j| j.current_status == status)
                .cloned()
                .collect();
            jobs.sort_by(|a, b| (a.created_at, &a.job_id).cmp(&(b.created_at, &b.job_id)));
            Ok(jobs)
        })
    }

    pub fn job_ids(&self) -> Result<Vec<String>, MetadataError> {
        self.with_live(|live| Ok(live.jobs.keys().cloned().collect()))
    }
}

fn is_forward(last: &StatusRecord, next: &StatusRecord) -> bool {
    if last.status.is_terminal() {
        return false;
    }
    match (last.status.phase_rank(), next.status.phase_rank()) {
        (_, None) => true,
        (Some(from), Some(to)) => {
            to > from || (to == from && from > 0 && next.restart_count > last.restart_count)
        }
        (None, Some(_)) => false,
    }
}

fn write(wal: &mut Wal, delta: &Delta) -> Result<(), MetadataError> {
    let bytes = serde_json::to_vec(delta).expect("delta serializes");
    wal.append(&bytes).map_err(|e| MetadataError::Io(e.to_string()))
}
