//! Crash-durable key-value store with store-global revisions and prefix
//! watches. Controllers and Guardians coordinate exclusively through it.
//!
//! Each write is logged before it becomes visible. Log payloads are binary:
//!
//! ```text
//! op: u8 (1 = put, 2 = delete, 3 = compact) | revision: u64 LE
//!   | key_len: u32 LE | key (utf-8) | value (rest of record; empty for delete/compact)
//! ```
//!
//! Watches are cursors: [`CoordKv::poll`] returns every event under the
//! watched prefix with revision at or after the cursor, then moves the cursor
//! past them. A watcher that crashes resumes by opening a new watch from its
//! last seen revision plus one.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::SimTime;
use crate::job_model::JobStatus;
use crate::wal::Wal;

const TAG: [u8; 4] = *b"KVST";
const OP_PUT: u8 = 1;
const OP_DELETE: u8 = 2;
const OP_COMPACT: u8 = 3;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KvError {
    #[error("NOT_FOUND: {0}")]
    NotFound(String),
    #[error("STORE_UNAVAILABLE")]
    Unavailable,
    #[error("COMPACTED: revision {requested} predates retained history (first {first})")]
    Compacted { requested: u64, first: u64 },
    #[error("watch start {requested} is beyond next revision {next}")]
    FutureRevision { requested: u64, next: u64 },
    #[error("invalid key {0:?}")]
    InvalidKey(String),
    #[error("kv log: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KvEntry {
    pub key: String,
    pub value: Vec<u8>,
    pub revision: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WatchKind {
    Put,
    Delete,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WatchEvent {
    pub kind: WatchKind,
    /// For deletes, `value` is empty and `revision` is the delete's revision.
    pub entry: KvEntry,
}

/// A watch cursor over one key prefix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Watch {
    pub prefix: String,
    /// Revision of the next event this watch will deliver.
    pub next_revision: u64,
}

impl Watch {
    /// Last revision delivered, or `next_revision - 1` if nothing was.
    pub fn last_seen(&self) -> u64 {
        self.next_revision.saturating_sub(1)
    }
}

struct Live {
    wal: Wal,
    revision: u64,
    latest: BTreeMap<String, KvEntry>,
    history: Vec<WatchEvent>,
    first_retained: u64,
}

impl Live {
    fn apply(&mut self, op: u8, revision: u64, key: String, value: Vec<u8>) {
        match op {
            OP_PUT => {
                let entry = KvEntry { key: key.clone(), value, revision };
                self.latest.insert(key, entry.clone());
                self.history.push(WatchEvent { kind: WatchKind::Put, entry });
                self.revision = revision;
            }
            OP_DELETE => {
                self.latest.remove(&key);
                let entry = KvEntry { key, value: Vec::new(), revision };
                self.history.push(WatchEvent { kind: WatchKind::Delete, entry });
                self.revision = revision;
            }
            OP_COMPACT => {
                let cut = self.history.partition_point(|e| e.entry.revision < revision);
                self.history.drain(..cut);
                self.first_retained = self.first_retained.max(revision);
            }
            _ => {}
        }
    }
}

pub struct CoordKv {
    path: PathBuf,
    sync: bool,
    retain: Option<u64>,
    live: Mutex<Option<Live>>,
}

fn encode(op: u8, revision: u64, key: &str, value: &[u8]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(13 + key.len() + value.len());
    buf.push(op);
    buf.extend_from_slice(&revision.to_le_bytes());
    buf.extend_from_slice(&(key.len() as u32).to_le_bytes());
    buf.extend_from_slice(key.as_bytes());
    buf.extend_from_slice(value);
    buf
}

fn decode(raw: &[u8]) -> Option<(u8, u64, String, Vec<u8>)> {
    let op = *raw.first()?;
    let revision = u64::from_le_bytes(raw.get(1..9)?.try_into().ok()?);
    let key_len = u32::from_le_bytes(raw.get(9..13)?.try_into().ok()?) as usize;
    let key = std::str::from_utf8(raw.get(13..13 + key_len)?).ok()?.to_string();
    let value = raw.get(13 + key_len..)?.to_vec();
    Some((op, revision, key, value))
}

pub fn validate_key(key: &str) -> Result<(), KvError> {
    let ok = key.starts_with('/')
        && key.len() > 1
        && !key.ends_with('/')
        && !key.contains("//")
        && !key.chars().any(|c| c.is_whitespace() || c.is_control());
    if ok {
        Ok(())
    } else {
        Err(KvError::InvalidKey(key.to_string()))
    }
}

impl CoordKv {
    /// Opens the store; `retain` bounds how many past revisions watches can
    /// replay (`None` keeps everything).
    pub fn open(dir: impl AsRef<Path>, sync: bool, retain: Option<u64>) -> Result<Self, KvError> {
        let kv = CoordKv {
            path: dir.as_ref().join("kv.log"),
            sync,
            retain,
            live: Mutex::new(None),
        };
        kv.restart()?;
        Ok(kv)
    }

    pub fn crash(&self) {
        *self.live.lock() = None;
    }

    pub fn is_up(&self) -> bool {
        self.live.lock().is_some()
    }

    pub fn restart(&self) -> Result<(), KvError> {
        let mut guard = self.live.lock();
        if guard.is_some() {
            return Ok(());
        }
        let (wal, replay) =
            Wal::open(&self.path, TAG, self.sync).map_err(|e| KvError::Io(e.to_string()))?;
        let mut live = Live {
            wal,
            revision: 0,
            latest: BTreeMap::new(),
            history: Vec::new(),
            first_retained: 1,
        };
        for raw in replay.records {
            let (op, revision, key, value) =
                decode(&raw).ok_or_else(|| KvError::Io("undecodable record".into()))?;
            live.apply(op, revision, key, value);
        }
        *guard = Some(live);
        Ok(())
    }

    fn with_live<T>(&self, f: impl FnOnce(&mut Live) -> Result<T, KvError>) -> Result<T, KvError> {
        let mut guard = self.live.lock();
        let live = guard.as_mut().ok_or(KvError::Unavailable)?;
        f(live)
    }

    fn log_and_apply(&self, live: &mut Live, op: u8, key: &str, value: Vec<u8>) -> Result<u64, KvError> {
        let revision = live.revision + 1;
        live.wal
            .append(&encode(op, revision, key, &value))
            .map_err(|e| KvError::Io(e.to_string()))?;
        live.apply(op, revision, key.to_string(), value);
        if let Some(retain) = self.retain {
            let floor = revision.saturating_sub(retain) + 1;
            if floor > live.first_retained {
                live.wal
                    .append(&encode(OP_COMPACT, floor, "", &[]))
                    .map_err(|e| KvError::Io(e.to_string()))?;
                live.apply(OP_COMPACT, floor, String::new(), Vec::new());
            }
        }
        Ok(revision)
    }

    /// Writes `value` under `key`; durable before the revision is returned.
    pub fn put(&self, key: &str, value: impl Into<Vec<u8>>) -> Result<u64, KvError> {
        validate_key(key)?;
        let value = value.into();
        self.with_live(|live| self.log_and_apply(live, OP_PUT, key, value))
    }

    pub fn get(&self, key: &str) -> Result<KvEntry, KvError> {
        validate_key(key)?;
        self.with_live(|live| {
            live.latest.get(key).cloned().ok_or_else(|| KvError::NotFound(key.to_string()))
        })
    }

    /// Removes `key`. Deleting an absent key writes nothing and returns the
    /// current revision.
    pub fn delete(&self, key: &str) -> Result<u64, KvError> {
        validate_key(key)?;
        self.with_live(|live| {
            if !live.latest.contains_key(key) {
                return Ok(live.revision);
            }
            self.log_and_apply(live, OP_DELETE, key, Vec::new())
        })
    }

    /// Latest entries whose key starts with `prefix`, in key order.
    pub fn range(&self, prefix: &str) -> Result<Vec<KvEntry>, KvError> {
        self.with_live(|live| {
            Ok(live
                .latest
                .range(prefix.to_string()..)
                .take_while(|(k, _)| k.starts_with(prefix))
                .map(|(_, v)| v.clone())
                .collect())
        })
    }

    pub fn current_revision(&self) -> Result<u64, KvError> {
        self.with_live(|live| Ok(live.revision))
    }

    /// Drops history before `revision`; later watches from earlier revisions
    /// fail with `COMPACTED`.
    pub fn compact(&self, revision: u64) -> Result<(), KvError> {
        self.with_live(|live| {
            let revision = revision.min(live.revision + 1);
            if revision <= live.first_retained {
                return Ok(());
            }
            live.wal
                .append(&encode(OP_COMPACT, revision, "", &[]))
                .map_err(|e| KvError::Io(e.to_string()))?;
            live.apply(OP_COMPACT, revision, String::new(), Vec::new());
            Ok(())
        })
    }

    /// Opens a watch over `prefix` starting at `from_revision`.
    pub fn watch(&self, prefix: &str, from_revision: u64) -> Result<Watch, KvError> {
        self.with_live(|live| {
            let from_revision = from_revision.max(1);
            if from_revision > live.revision + 1 {
                return Err(KvError::FutureRevision {
                    requested: from_revision,
                    next: live.revision + 1,
                });
            }
            if from_revision < live.first_retained {
                return Err(KvError::Compacted {
                    requested: from_revision,
                    first: live.first_retained,
                });
            }
            Ok(Watch { prefix: prefix.to_string(), next_revision: from_revision })
        })
    }

    /// Delivers pending events for `watch`, in revision order, and advances it.
    pub fn poll(&self, watch: &mut Watch) -> Result<Vec<WatchEvent>, KvError> {
        self.with_live(|live| {
            if watch.next_revision < live.first_retained {
                return Err(KvError::Compacted {
                    requested: watch.next_revision,
                    first: live.first_retained,
                });
            }
            let start = live.history.partition_point(|e| e.entry.revision < watch.next_revision);
            let events: Vec<WatchEvent> = live.history[start..]
                .iter()
                .filter(|e| e.entry.key.starts_with(&watch.prefix))
                .cloned()
                .collect();
            watch.next_revision = live.revision + 1;
            Ok(events)
        })
    }
}

/// Key schema shared by the controller, the Guardian and the LCM.
pub mod keys {
    pub fn job_prefix(job_id: &str) -> String {
        format!("/jobs/{job_id}/")
    }

    pub fn learners_prefix(job_id: &str) -> String {
        format!("/jobs/{job_id}/learners/")
    }

    pub fn learner_status(job_id: &str, index: u32) -> String {
        format!("/jobs/{job_id}/learners/{index}/status")
    }

    pub fn helper_status(job_id: &str, helper: &str) -> String {
        format!("/jobs/{job_id}/helpers/{helper}/status")
    }

    pub fn guardian_phase(job_id: &str) -> String {
        format!("/jobs/{job_id}/guardian/phase")
    }

    pub fn guardian_claim(job_id: &str) -> String {
        format!("/jobs/{job_id}/guardian/claim")
    }

    pub fn guardian_halt(job_id: &str) -> String {
        format!("/jobs/{job_id}/guardian/halt")
    }

    /// Revision from which the current deployment attempt's learner events
    /// are valid (decimal string).
    pub fn guardian_watch_from(job_id: &str) -> String {
        format!("/jobs/{job_id}/guardian/watch-from")
    }

    /// Parses the learner index out of a learner status key.
    pub fn learner_index(key: &str) -> Option<u32> {
        let rest = key.split("/learners/").nth(1)?;
        let (index, tail) = rest.split_once('/')?;
        (tail == "status").then(|| index.parse().ok()).flatten()
    }
}

/// Value stored under learner and helper status keys.
///
/// Serialized as compact JSON with fields in this order; `exit_code` is
/// omitted when absent, e.g. `{"status":"PROCESSING","timestamp":12000,"restart_count":1}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitStatus {
    pub status: JobStatus,
    pub timestamp: SimTime,
    pub restart_count: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_code: Option<i32>,
}

impl UnitStatus {
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("status serializes")
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<UnitStatus> {
        serde_json::from_slice(bytes).ok()
    }
}
