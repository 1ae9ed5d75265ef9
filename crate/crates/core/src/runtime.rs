//! Payloads that run inside a deployed job: the learner and the four helpers
//! (load-data, log-collector, store-results, controller).
//!
//! Learners and helpers talk only through the job's shared volume:
//!
//! | path                       | written by     | content                                       |
//! |----------------------------|----------------|-----------------------------------------------|
//! | `/status/{learner}`        | learner        | `status=PROCESSING restart_count=1 time=12.000` |
//! | `/exit/{learner}`          | learner        | `code=0 time=40.000`                          |
//! | `/logs/{learner}.log`      | learner        | one line per iteration, append-only           |
//! | `/results/{learner}/model` | learner        | `iterations=10 digest=<hex>`                  |
//! | `/data/{key}`              | load-data      | copy of each data object                      |
//! | `/markers/load-data`       | load-data      | `ok objects=3 time=2.000` or `error=... time=...` |
//! | `/markers/log-collector`   | log-collector  | `drained lines=20 time=41.000`                |
//! | `/markers/store-results`   | store-results  | `ok objects=2 time=42.000`                    |
//!
//! Every file is replaced whole except the logs. Learner ids are `learner-{i}`
//! for replica index `i`.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clock::{secs, SimTime};
use crate::cluster::{Env, EnvError, Payload, Step};
use crate::job_model::{JobManifest, JobStatus};
use crate::kv::{keys, UnitStatus};
use crate::objects::ObjectError;

pub const LOAD_DATA: &str = "load-data";
pub const LOG_COLLECTOR: &str = "log-collector";
pub const STORE_RESULTS: &str = "store-results";
pub const CONTROLLER: &str = "controller";
pub const HELPERS: [&str; 4] = [LOAD_DATA, LOG_COLLECTOR, STORE_RESULTS, CONTROLLER];

/// Exit codes written by learners for their own errors.
pub const EXIT_DATA_ERROR: i32 = 2;
pub const EXIT_DATA_TIMEOUT: i32 = 3;
pub const EXIT_ACCESS_DENIED: i32 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeConfig {
    /// Simulated seconds per training iteration.
    pub iteration_time: f64,
    /// Controller, log-collector and waiting-learner poll period.
    pub poll_interval: f64,
    /// Log lines per flushed chunk (F).
    pub log_flush_lines: u32,
    /// How long a learner waits for the load-data marker.
    pub data_wait_timeout: f64,
    /// Simulated seconds load-data spends per copied object.
    pub data_copy_time: f64,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            iteration_time: 1.0,
            poll_interval: 1.0,
            log_flush_lines: 1,
            data_wait_timeout: 300.0,
            data_copy_time: 1.0,
        }
    }
}

/// Everything a job's payloads know about the job.
#[derive(Debug, Clone)]
pub struct JobContext {
    pub job_id: String,
    pub tenant: String,
    pub manifest: JobManifest,
    pub volume: String,
    pub config: RuntimeConfig,
}

pub fn learner_id(index: u32) -> String {
    format!("learner-{index}")
}

pub fn status_path(learner: &str) -> String {
    format!("/status/{learner}")
}

pub fn exit_path(learner: &str) -> String {
    format!("/exit/{learner}")
}

pub fn log_path(learner: &str) -> String {
    format!("/logs/{learner}.log")
}

pub fn model_path(learner: &str) -> String {
    format!("/results/{learner}/model")
}

pub fn marker_path(helper: &str) -> String {
    format!("/markers/{helper}")
}

/// Object key of a checkpoint, relative to the result prefix.
pub fn checkpoint_key(learner: &str, iteration: u64) -> String {
    format!("checkpoints/{learner}/{iteration}")
}

pub fn log_chunk_key(learner: &str, first_line: u64) -> String {
    format!("logs/{learner}/{first_line:08}")
}

// ---------------------------------------------------------------------------
// Single-line record formats
// ---------------------------------------------------------------------------

fn fields(line: &str) -> BTreeMap<&str, &str> {
    line.split_whitespace().filter_map(|kv| kv.split_once('=')).collect()
}

fn parse_time(s: &str) -> Option<SimTime> {
    let secs: f64 = s.parse().ok()?;
    (secs >= 0.0).then(|| SimTime::from_secs_f64(secs))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StatusFile {
    pub status: JobStatus,
    pub restart_count: u32,
    pub time: SimTime,
}

impl StatusFile {
    pub fn render(&self) -> String {
        format!("status={} restart_count={} time={}", self.status.as_str(), self.restart_count, self.time)
    }

    pub fn parse(text: &str) -> Option<StatusFile> {
        let f = fields(text.trim());
        Some(StatusFile {
            status: JobStatus::parse(f.get("status")?)?,
            restart_count: f.get("restart_count")?.parse().ok()?,
            time: parse_time(f.get("time")?)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExitFile {
    pub code: i32,
    pub time: SimTime,
}

impl ExitFile {
    pub fn render(&self) -> String {
        format!("code={} time={}", self.code, self.time)
    }

    pub fn parse(text: &str) -> Option<ExitFile> {
        let f = fields(text.trim());
        Some(ExitFile { code: f.get("code")?.parse().ok()?, time: parse_time(f.get("time")?)? })
    }
}

/// A helper's completion marker: `ok ...` or `error=<reason> ...`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Marker {
    pub error: Option<String>,
    pub time: SimTime,
}

impl Marker {
    pub fn parse(text: &str) -> Option<Marker> {
        let text = text.trim();
        let f = fields(text);
        let time = parse_time(f.get("time")?)?;
        let error = f.get("error").map(|e| e.to_string());
        if error.is_none() && !text.starts_with("ok") && !text.starts_with("drained") {
            return None;
        }
        Some(Marker { error, time })
    }
}

fn bytes_text(b: Option<Vec<u8>>) -> Option<String> {
    b.map(|b| String::from_utf8_lossy(&b).into_owned())
}

/// The per-iteration digest chain: `sha256(prev || iteration_le || data)`.
pub fn iteration_digest(prev: &[u8; 32], iteration: u64, data_digest: &[u8; 32]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(prev);
    h.update(iteration.to_le_bytes());
    h.update(data_digest);
    h.finalize().into()
}

/// Digest of the loaded data set: file names and contents in path order.
pub fn data_digest<'a>(files: impl IntoIterator<Item = (&'a str, &'a [u8])>) -> [u8; 32] {
    let mut h = Sha256::new();
    for (name, bytes) in files {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    }
    h.finalize().into()
}

/// Checkpoint payload: `iteration=<k> digest=<hex>`.
pub fn render_checkpoint(iteration: u64, digest: &[u8; 32]) -> String {
    format!("iteration={iteration} digest={}", hex::encode(digest))
}

pub fn parse_checkpoint(text: &str) -> Option<(u64, [u8; 32])> {
    let f = fields(text.trim());
    let iteration = f.get("iteration")?.parse().ok()?;
    let digest = hex::decode(f.get("digest")?).ok()?.try_into().ok()?;
    Some((iteration, digest))
}

pub fn log_line(learner: &str, iteration: u64, digest: &[u8; 32]) -> String {
    format!("{learner} iter={iteration} digest={}", &hex::encode(digest)[..16])
}

// ---------------------------------------------------------------------------
// Learner
// ---------------------------------------------------------------------------

enum LearnerPhase {
    Start,
    WaitData { deadline: SimTime },
    Resume,
    Train { iteration: u64, digest: [u8; 32], data: [u8; 32] },
    Finish { digest: [u8; 32] },
}

pub struct Learner {
    ctx: Arc<JobContext>,
    phase: LearnerPhase,
}

impl Learner {
    pub fn new(ctx: Arc<JobContext>) -> Self {
        Learner { ctx, phase: LearnerPhase::Start }
    }

    fn id(env: &Env<'_>) -> String {
        learner_id(env.replica_index().unwrap_or(0))
    }

    fn write_status(&self, env: &mut Env<'_>, status: JobStatus) -> Result<(), EnvError> {
        let file = StatusFile { status, restart_count: env.restart_count(), time: env.now() };
        let path = status_path(&Self::id(env));
        env.vol_write(&self.ctx.volume, &path, file.render())
    }

    /// Writes the exit file and error line, then exits.
    fn fail(&self, env: &mut Env<'_>, code: i32, reason: &str) -> Step {
        let id = Self::id(env);
        let vol = &self.ctx.volume;
        let _ = env.vol_append(vol, &log_path(&id), format!("{id} error: {reason}\n").as_bytes());
        let exit = ExitFile { code, time: env.now() };
        let _ = env.vol_write(vol, &exit_path(&id), exit.render());
        env.log_event("learner-exit", format!("learner={id} code={code} reason={reason}"));
        Step::Exit(code)
    }

    fn poll(&self) -> Step {
        Step::After(secs(self.ctx.config.poll_interval))
    }

    /// Latest checkpoint in the result bucket, if any.
    fn latest_checkpoint(&self, env: &mut Env<'_>, id: &str) -> Result<Option<(u64, [u8; 32])>, EnvError> {
        let store = &self.ctx.manifest.result_store;
        let prefix = store.key(&format!("checkpoints/{id}/"));
        let keys = env.obj_list(&store.bucket, &store.credential, &prefix)?;
        let best = keys
            .iter()
            .filter_map(|k| k.strip_prefix(&prefix)?.parse::<u64>().ok())
            .max();
        let Some(iteration) = best else { return Ok(None) };
        let key = store.key(&checkpoint_key(id, iteration));
        let bytes = env.obj_get(&store.bucket, &store.credential, &key)?;
        Ok(parse_checkpoint(&String::from_utf8_lossy(&bytes)))
    }

    fn step_start(&mut self, env: &mut Env<'_>) -> Step {
        let marker = match env.vol_read(&self.ctx.volume, &marker_path(LOAD_DATA)) {
            Ok(m) => bytes_text(m).and_then(|t| Marker::parse(&t)),
            Err(e) => return self.fail(env, EXIT_DATA_ERROR, &e.to_string()),
        };
        match marker {
            Some(Marker { error: Some(e), .. }) => self.fail(env, EXIT_DATA_ERROR, &format!("load-data {e}")),
            Some(_) => {
                self.phase = LearnerPhase::Resume;
                Step::After(Duration::ZERO)
            }
            None => {
                if self.write_status(env, JobStatus::Downloading).is_err() {
                    return self.poll();
                }
                let deadline = env.now() + secs(self.ctx.config.data_wait_timeout);
                self.phase = LearnerPhase::WaitData { deadline };
                self.poll()
            }
        }
    }

    fn step_resume(&mut self, env: &mut Env<'_>) -> Step {
        let id = Self::id(env);
        let vol = self.ctx.volume.clone();
        let data = {
            let names = match env.vol_list(&vol, "/data/") {
                Ok(n) => n,
                Err(e) => return self.fail(env, EXIT_DATA_ERROR, &e.to_string()),
            };
            let mut files = Vec::new();
            for name in names {
                let bytes = env.vol_read(&vol, &name).ok().flatten().unwrap_or_default();
                files.push((name, bytes));
            }
            data_digest(files.iter().map(|(n, b)| (n.as_str(), b.as_slice())))
        };
        let (iteration, digest) = match self.latest_checkpoint(env, &id) {
            Ok(cp) => cp.unwrap_or((0, [0u8; 32])),
            Err(EnvError::Obj(ObjectError::Unavailable)) => return self.poll(),
            Err(e) => return self.fail(env, EXIT_ACCESS_DENIED, &e.to_string()),
        };
        if self.write_status(env, JobStatus::Processing).is_err() {
            return self.poll();
        }
        env.log_event("resume", format!("learner={id} from={iteration}"));
        self.phase = LearnerPhase::Train { iteration, digest, data };
        Step::After(Duration::ZERO)
    }

    fn step_train(&mut self, env: &mut Env<'_>) -> Step {
        let LearnerPhase::Train { iteration, digest, data } = self.phase else { unreachable!() };
        let m = &self.ctx.manifest;
        if iteration >= m.total_iterations {
            self.phase = LearnerPhase::Finish { digest };
            return Step::After(Duration::ZERO);
        }
        let id = Self::id(env);
        let k = iteration + 1;
        let next = iteration_digest(&digest, k, &data);
        if k % m.checkpoint_interval == 0 || k == m.total_iterations {
            let store = &m.result_store;
            let key = store.key(&checkpoint_key(&id, k));
            match env.obj_put(&store.bucket, &store.credential, &key, render_checkpoint(k, &next).as_bytes()) {
                Ok(_) => {}
                Err(EnvError::Obj(ObjectError::Unavailable)) => return self.poll(),
                Err(e) => return self.fail(env, EXIT_ACCESS_DENIED, &e.to_string()),
            }
        }
        let line = log_line(&id, k, &next) + "\n";
        if env.vol_append(&self.ctx.volume, &log_path(&id), line.as_bytes()).is_err() {
            return self.fail(env, EXIT_DATA_ERROR, "log volume unavailable");
        }
        env.log_event("iteration", format!("learner={id} iter={k}"));
        self.phase = LearnerPhase::Train { iteration: k, digest: next, data };
        Step::After(secs(self.ctx.config.iteration_time))
    }

    fn step_finish(&mut self, env: &mut Env<'_>, digest: [u8; 32]) -> Step {
        let id = Self::id(env);
        let vol = self.ctx.volume.clone();
        let model = format!("iterations={} digest={}", self.ctx.manifest.total_iterations, hex::encode(digest));
        let exit = ExitFile { code: 0, time: env.now() };
        if env.vol_write(&vol, &model_path(&id), model).is_err()
            || env.vol_write(&vol, &exit_path(&id), exit.render()).is_err()
        {
            return self.fail(env, EXIT_DATA_ERROR, "result volume unavailable");
        }
        env.log_event("learner-exit", format!("learner={id} code=0"));
        Step::Exit(0)
    }
}

impl Payload for Learner {
    fn step(&mut self, env: &mut Env<'_>) -> Step {
        if let Some(code) = env.take_injected_failure() {
            return self.fail(env, code, &format!("training failure (exit {code})"));
        }
        match self.phase {
            LearnerPhase::Start => self.step_start(env),
            LearnerPhase::WaitData { deadline } => {
                match env.vol_read(&self.ctx.volume, &marker_path(LOAD_DATA)) {
                    Ok(Some(_)) => {
                        self.phase = LearnerPhase::Start;
                        Step::After(Duration::ZERO)
                    }
                    _ if env.now() >= deadline => self.fail(env, EXIT_DATA_TIMEOUT, "load-data timeout"),
                    _ => self.poll(),
                }
            }
            LearnerPhase::Resume => self.step_resume(env),
            LearnerPhase::Train { .. } => self.step_train(env),
            LearnerPhase::Finish { digest } => self.step_finish(env, digest),
        }
    }
}

// ---------------------------------------------------------------------------
// load-data
// ---------------------------------------------------------------------------

pub struct LoadData {
    ctx: Arc<JobContext>,
    queue: Option<Vec<String>>,
    copied: usize,
}

impl LoadData {
    pub fn new(ctx: Arc<JobContext>) -> Self {
        LoadData { ctx, queue: None, copied: 0 }
    }

    fn marker(&self, env: &mut Env<'_>, body: String) -> Step {
        let text = format!("{body} time={}", env.now());
        match env.vol_write(&self.ctx.volume, &marker_path(LOAD_DATA), text) {
            Ok(()) => Step::Exit(if body.starts_with("ok") { 0 } else { 1 }),
            Err(_) => Step::Exit(1),
        }
    }
}

impl Payload for LoadData {
    fn step(&mut self, env: &mut Env<'_>) -> Step {
        let poll = Step::After(secs(self.ctx.config.poll_interval));
        let store = self.ctx.manifest.data_store.clone();
        let Some(queue) = &mut self.queue else {
            if let Ok(Some(_)) = env.vol_read(&self.ctx.volume, &marker_path(LOAD_DATA)) {
                return Step::Exit(0);
            }
            let prefix = store.key("");
            return match env.obj_list(&store.bucket, &store.credential, &prefix) {
                Ok(mut keys) => {
                    keys.reverse();
                    self.queue = Some(keys);
                    Step::After(Duration::ZERO)
                }
                Err(EnvError::Obj(ObjectError::Unavailable)) => poll,
                Err(e) => self.marker(env, format!("error={}", error_code(&e))),
            };
        };
        let Some(key) = queue.last().cloned() else {
            return self.marker(env, format!("ok objects={}", self.copied));
        };
        match env.obj_get(&store.bucket, &store.credential, &key) {
            Ok(bytes) => {
                let rel = key.strip_prefix(&store.key("")).unwrap_or(&key);
                if env.vol_write(&self.ctx.volume, &format!("/data/{rel}"), bytes).is_err() {
                    return Step::Exit(1);
                }
                self.queue.as_mut().expect("set").pop();
                self.copied += 1;
                Step::After(secs(self.ctx.config.data_copy_time))
            }
            Err(EnvError::Obj(ObjectError::Unavailable)) => poll,
            Err(e) => self.marker(env, format!("error={}", error_code(&e))),
        }
    }
}

fn error_code(e: &EnvError) -> &'static str {
    match e {
        EnvError::Denied(_) | EnvError::Obj(ObjectError::AccessDenied(_)) => "ACCESS_DENIED",
        EnvError::Obj(ObjectError::NotFound(_)) => "NOT_FOUND",
        _ => "IO",
    }
}

// ---------------------------------------------------------------------------
// log-collector
// ---------------------------------------------------------------------------

/// Tails each learner's log on the shared volume and flushes complete lines
/// to `{result_prefix}/logs/{learner}/{first_line:08}` once at least F are
/// pending. After a restart the flushed offsets are rebuilt from the object
/// store, so no line is lost or flushed twice.
pub struct LogCollector {
    ctx: Arc<JobContext>,
    offsets: Option<BTreeMap<String, u64>>,
}

impl LogCollector {
    pub fn new(ctx: Arc<JobContext>) -> Self {
        LogCollector { ctx, offsets: None }
    }

    fn rebuild(&self, env: &mut Env<'_>) -> Result<BTreeMap<String, u64>, EnvError> {
        let store = &self.ctx.manifest.result_store;
        let mut offsets = BTreeMap::new();
        for i in 0..self.ctx.manifest.learners {
            let id = learner_id(i);
            let prefix = store.key(&format!("logs/{id}/"));
            let chunks = env.obj_list(&store.bucket, &store.credential, &prefix)?;
            let mut offset = 0;
            if let Some(last) = chunks.last() {
                let first: u64 = last.strip_prefix(&prefix).and_then(|s| s.parse().ok()).unwrap_or(0);
                let body = env.obj_get(&store.bucket, &store.credential, last)?;
                offset = first + body.iter().filter(|&&b| b == b'\n').count() as u64;
            }
            offsets.insert(id, offset);
        }
        Ok(offsets)
    }

    /// Flushes pending lines; returns whether every learner is exited and
    /// fully flushed.
    fn flush(&mut self, env: &mut Env<'_>) -> Result<bool, EnvError> {
        let store = self.ctx.manifest.result_store.clone();
        let min_lines = self.ctx.config.log_flush_lines.max(1) as usize;
        let vol = self.ctx.volume.clone();
        let offsets = self.offsets.as_mut().expect("initialized");
        let mut drained = true;
        for (id, offset) in offsets.iter_mut() {
            let exited = env.vol_read(&vol, &exit_path(id))?.is_some();
            let text = bytes_text(env.vol_read(&vol, &log_path(id))?).unwrap_or_default();
            let complete: Vec<&str> = text.split_inclusive('\n').filter(|l| l.ends_with('\n')).collect();
            let pending = &complete[(*offset as usize).min(complete.len())..];
            if !pending.is_empty() && (pending.len() >= min_lines || exited) {
                let key = store.key(&log_chunk_key(id, *offset));
                env.obj_put(&store.bucket, &store.credential, &key, pending.concat().as_bytes())?;
                *offset += pending.len() as u64;
            } else if !pending.is_empty() {
                drained = false;
            }
            drained &= exited;
        }
        Ok(drained)
    }
}

impl Payload for LogCollector {
    fn step(&mut self, env: &mut Env<'_>) -> Step {
        let poll = Step::After(secs(self.ctx.config.poll_interval));
        if self.offsets.is_none() {
            match self.rebuild(env) {
                Ok(o) => self.offsets = Some(o),
                Err(_) => return poll,
            }
        }
        match self.flush(env) {
            Ok(true) => {
                let lines: u64 = self.offsets.as_ref().expect("set").values().sum();
                let text = format!("drained lines={lines} time={}", env.now());
                match env.vol_write(&self.ctx.volume, &marker_path(LOG_COLLECTOR), text) {
                    Ok(()) => Step::Exit(0),
                    Err(_) => poll,
                }
            }
            _ => poll,
        }
    }
}

// ---------------------------------------------------------------------------
// store-results
// ---------------------------------------------------------------------------

pub struct StoreResults {
    ctx: Arc<JobContext>,
}

impl StoreResults {
    pub fn new(ctx: Arc<JobContext>) -> Self {
        StoreResults { ctx }
    }

    fn try_store(&self, env: &mut Env<'_>) -> Result<bool, EnvError> {
        let vol = &self.ctx.volume;
        if env.vol_read(vol, &marker_path(STORE_RESULTS))?.is_some() {
            return Ok(true);
        }
        let ids: Vec<String> = (0..self.ctx.manifest.learners).map(learner_id).collect();
        for id in &ids {
            if env.vol_read(vol, &exit_path(id))?.is_none() {
                return Ok(false);
            }
        }
        if env.vol_read(vol, &marker_path(LOG_COLLECTOR))?.is_none() {
            return Ok(false);
        }
        let store = &self.ctx.manifest.result_store;
        let mut stored = 0;
        for id in &ids {
            if let Some(model) = env.vol_read(vol, &model_path(id))? {
                let key = store.key(&format!("results/{id}/model"));
                env.obj_put(&store.bucket, &store.credential, &key, &model)?;
                stored += 1;
            }
        }
        let text = format!("ok objects={stored} time={}", env.now());
        env.vol_write(vol, &marker_path(STORE_RESULTS), text)?;
        Ok(true)
    }
}

impl Payload for StoreResults {
    fn step(&mut self, env: &mut Env<'_>) -> Step {
        match self.try_store(env) {
            Ok(true) => Step::Exit(0),
            _ => Step::After(secs(self.ctx.config.poll_interval)),
        }
    }
}

// ---------------------------------------------------------------------------
// controller
// ---------------------------------------------------------------------------

/// Polls the shared volume and publishes per-learner and per-helper status
/// to the coordination store. Holds no state of its own: each poll compares
/// what the files say with what the store holds and writes the difference,
/// so a restarted controller publishes exactly what a live one would.
pub struct Controller {
    ctx: Arc<JobContext>,
}

impl Controller {
    pub fn new(ctx: Arc<JobContext>) -> Self {
        Controller { ctx }
    }

    /// Status a learner's files imply, if it has written any.
    pub fn learner_status(
        status: Option<StatusFile>,
        exit: Option<ExitFile>,
    ) -> Option<UnitStatus> {
        let restart_count = status.map(|s| s.restart_count).unwrap_or(0);
        if let Some(exit) = exit {
            let status = if exit.code == 0 { JobStatus::Completed } else { JobStatus::Failed };
            let exit_code = (exit.code != 0).then_some(exit.code);
            return Some(UnitStatus { status, timestamp: exit.time, restart_count, exit_code });
        }
        let s = status?;
        Some(UnitStatus { status: s.status, timestamp: s.time, restart_count, exit_code: None })
    }

    fn publish(&self, env: &mut Env<'_>, key: &str, status: UnitStatus) -> Result<(), EnvError> {
        let current = match env.kv_get(key) {
            Ok(e) => UnitStatus::from_bytes(&e.value),
            Err(EnvError::Kv(crate::kv::KvError::NotFound(_))) => None,
            Err(e) => return Err(e),
        };
        if current.as_ref() != Some(&status) {
            env.kv_put(key, status.to_bytes())?;
        }
        Ok(())
    }

    fn poll_once(&self, env: &mut Env<'_>) -> Result<(), EnvError> {
        let vol = &self.ctx.volume;
        let job = &self.ctx.job_id;
        for i in 0..self.ctx.manifest.learners {
            let id = learner_id(i);
            let status = bytes_text(env.vol_read(vol, &status_path(&id))?).and_then(|t| StatusFile::parse(&t));
            let exit = bytes_text(env.vol_read(vol, &exit_path(&id))?).and_then(|t| ExitFile::parse(&t));
            if let Some(s) = Self::learner_status(status, exit) {
                self.publish(env, &keys::learner_status(job, i), s)?;
            }
        }
        for helper in [LOAD_DATA, LOG_COLLECTOR, STORE_RESULTS] {
            let marker = bytes_text(env.vol_read(vol, &marker_path(helper))?).and_then(|t| Marker::parse(&t));
            if let Some(m) = marker {
                let status = if m.error.is_some() { JobStatus::Failed } else { JobStatus::Completed };
                let s = UnitStatus { status, timestamp: m.time, restart_count: 0, exit_code: None };
                self.publish(env, &keys::helper_status(job, helper), s)?;
            }
        }
        Ok(())
    }
}

impl Payload for Controller {
    fn step(&mut self, env: &mut Env<'_>) -> Step {
        // A store outage just delays publication to a later poll.
        let _ = self.poll_once(env);
        Step::After(secs(self.ctx.config.poll_interval))
    }
}
