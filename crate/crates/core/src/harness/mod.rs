//! Scenario runner: boots a platform, drives submissions, faults and halts
//! from a script, then measures what happened from the event log.

mod analysis;
mod report;
mod script;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::Duration;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub use analysis::{
    count_events, guardian_latency, guardian_liveness, learner_restarts, logged_iterations, recoveries, redone_work,
    Recovery, Redo,
};
pub use report::{median, AssertionOutcome, JobOutcome, LostWork, MetricsReport};
pub use script::{Assertion, FaultEntry, HaltEntry, JobEntry, Mode, RandomFaults, ScenarioScript, ScriptError};

use crate::api::{job_log_lines, ApiRequest, Method};
use crate::clock::{secs, SimTime};
use crate::cluster::{ClusterError, FaultEvent, FaultTarget, ServiceKind};
use crate::guardian::plan;
use crate::job_model::{parse_manifest, JobStatus};
use crate::metadata::JobRecord;
use crate::platform::{Platform, PlatformError, Stepped};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Script(#[from] ScriptError),
    #[error("platform: {0}")]
    Platform(#[from] PlatformError),
    #[error("fault schedule: {0}")]
    Fault(#[from] ClusterError),
}

#[derive(Debug, Clone, Copy)]
enum Hook {
    Submit(usize),
    Halt(usize),
    ProbeStart(ServiceKind),
    Probe(ServiceKind),
    Tick,
}

#[derive(Debug, Clone, Default)]
struct Submission {
    attempts: u32,
    status: u16,
    acked: bool,
    gave_up: bool,
}

/// A finished run: the report plus the platform, for callers that want to
/// look deeper.
pub struct ScenarioRun {
    pub report: MetricsReport,
    pub platform: Platform,
    /// Job ids of acknowledged submissions, by script index.
    pub acked: Vec<Option<String>>,
    /// Offset of scenario time zero on the platform clock.
    pub origin: SimTime,
}

impl ScenarioRun {
    pub fn passed(&self) -> bool {
        self.report.passed
    }

    pub fn event_log(&self) -> String {
        self.platform.cluster.log_text()
    }
}

struct Runner<'a> {
    script: &'a ScenarioScript,
    platform: Platform,
    origin: SimTime,
    hooks: Vec<Hook>,
    submissions: Vec<Submission>,
    halts_pending: usize,
    probing: BTreeSet<ServiceKind>,
    quiet_after: SimTime,
}

impl Runner<'_> {
    fn hook(&mut self, at: SimTime, hook: Hook) {
        self.hooks.push(hook);
        self.platform.schedule_hook(at, self.hooks.len() as u64 - 1);
    }

    fn hook_in(&mut self, delay: f64, hook: Hook) {
        let at = self.platform.now() + secs(delay);
        self.hook(at, hook);
    }

    fn fire(&mut self, hook: Hook) {
        match hook {
            Hook::Submit(i) => self.submit(i),
            Hook::Halt(i) => self.halt(i),
            Hook::ProbeStart(service) => {
                if !self.platform.service_up(service) && self.probing.insert(service) {
                    self.hook_in(self.script.probe_interval, Hook::Probe(service));
                }
            }
            Hook::Probe(service) => {
                let ok = match service {
                    ServiceKind::Api => self.platform.handle(&ApiRequest::new(Method::Get, "/healthz")).status == 200,
                    ServiceKind::Lcm => self.platform.lcm_ping(),
                };
                if ok {
                    self.platform.cluster.record("probe-ok", format!("service:{service}"), "");
                    self.probing.remove(&service);
                } else {
                    self.hook_in(self.script.probe_interval, Hook::Probe(service));
                }
            }
            Hook::Tick => self.hook_in(1.0, Hook::Tick),
        }
    }

    fn submit(&mut self, i: usize) {
        let job = &self.script.jobs[i];
        let req = ApiRequest::new(Method::Post, "/v1/jobs")
            .token(job.token.clone())
            .request_id(self.script.request_id(i))
            .body(job.manifest_text.clone());
        let resp = self.platform.handle(&req);
        let sub = &mut self.submissions[i];
        sub.attempts += 1;
        sub.status = resp.status;
        match resp.status {
            201 => sub.acked = true,
            503 if sub.attempts < self.script.max_submits => self.hook_in(self.script.submit_retry, Hook::Submit(i)),
            _ => sub.gave_up = true,
        }
    }

    fn halt(&mut self, i: usize) {
        let sub = &self.submissions[i];
        if !sub.acked {
            if sub.gave_up {
                self.halts_pending -= 1;
            } else {
                self.hook_in(self.script.submit_retry, Hook::Halt(i));
            }
            return;
        }
        let path = format!("/v1/jobs/{}", self.script.job_id(i));
        let req = ApiRequest::new(Method::Delete, path).token(self.script.jobs[i].token.clone());
        match self.platform.handle(&req).status {
            503 => self.hook_in(self.script.submit_retry, Hook::Halt(i)),
            _ => self.halts_pending -= 1,
        }
    }

    /// Every job settled, every halt sent, every fault long past.
    fn done(&self) -> bool {
        if self.halts_pending > 0 || !self.probing.is_empty() || self.platform.now() < self.quiet_after {
            return false;
        }
        self.submissions.iter().enumerate().all(|(i, s)| {
            if s.gave_up {
                return true;
            }
            if !s.acked {
                return false;
            }
            let id = self.script.job_id(i);
            let terminal = matches!(self.platform.stores.metadata.get_job(&id), Ok(j) if j.current_status.is_terminal());
            terminal && self.platform.cluster.live_tasks(&id).is_empty()
        })
    }

    fn run(&mut self) {
        let horizon = self.origin + secs(self.script.horizon);
        let wall = self.script.mode == Mode::Wallclock;
        while let Some(next) = self.platform.next_event_time() {
            if next > horizon {
                break;
            }
            if wall {
                while self.platform.now() < next {
                    std::thread::sleep(next.since(self.platform.now()).min(Duration::from_millis(5)));
                }
            }
            if let Some(Stepped::Hook(h)) = self.platform.step() {
                let hook = self.hooks[h as usize];
                self.fire(hook);
                if matches!(hook, Hook::Tick) && self.done() {
                    break;
                }
            }
        }
    }
}

fn history_line(r: &crate::job_model::StatusRecord, origin: SimTime) -> String {
    let mut s = format!("{}@{} rc={}", r.status, SimTime::from_millis(r.timestamp.as_millis().saturating_sub(origin.as_millis())), r.restart_count);
    if !r.detail.is_empty() {
        s.push(' ');
        s.push_str(&r.detail);
    }
    s
}

/// Runs a script in a fresh store directory `dir`.
pub fn run_scenario(script: &ScenarioScript, dir: &Path) -> Result<ScenarioRun, HarnessError> {
    script.validate()?;
    let platform = match script.mode {
        Mode::Virtual => Platform::virtual_time(dir, script.platform.clone())?,
        Mode::Wallclock => Platform::wall_clock(dir, script.platform.clone())?,
    };
    let origin = platform.now();
    let faults = script.fault_schedule();
    let last_fault = faults.last().map(|f| f.at).unwrap_or(SimTime::ZERO);
    let mut runner = Runner {
        script,
        platform,
        origin,
        hooks: Vec::new(),
        submissions: vec![Submission::default(); script.jobs.len()],
        halts_pending: script.halts.len(),
        probing: BTreeSet::new(),
        quiet_after: origin + last_fault.since(SimTime::ZERO) + secs(script.settle),
    };
    for f in &faults {
        let at = origin + f.at.since(SimTime::ZERO);
        runner.platform.inject_fault(FaultEvent { at, ..f.clone() })?;
        if let FaultTarget::Service(service) = f.target {
            // Scheduled after the fault, so it fires right behind it.
            runner.hook(at, Hook::ProbeStart(service));
        }
    }
    for (i, job) in script.jobs.iter().enumerate() {
        runner.hook(origin + secs(job.at), Hook::Submit(i));
    }
    for h in &script.halts {
        runner.hook(origin + secs(h.at), Hook::Halt(h.job));
    }
    runner.hook(origin, Hook::Tick);
    runner.run();

    let Runner { platform, submissions, .. } = runner;
    let report = build_report(script, &platform, &submissions, origin);
    let acked = submissions
        .iter()
        .enumerate()
        .map(|(i, s)| s.acked.then(|| script.job_id(i)))
        .collect();
    Ok(ScenarioRun { report, platform, acked, origin })
}

fn rel(t: SimTime, origin: SimTime) -> f64 {
    t.since(origin).as_millis() as f64 / 1000.0
}

fn build_report(script: &ScenarioScript, platform: &Platform, subs: &[Submission], origin: SimTime) -> MetricsReport {
    let log = platform.cluster.log();
    let text = platform.cluster.log_text();
    let mut recovery: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut unrestored: BTreeMap<String, u32> = BTreeMap::new();
    for r in recoveries(log) {
        match r.restored_at {
            Some(t) => recovery.entry(r.component).or_default().push(t.since(r.crashed_at).as_millis() as f64 / 1000.0),
            None => *unrestored.entry(r.component).or_default() += 1,
        }
    }
    let index_of: BTreeMap<String, usize> = (0..script.jobs.len()).map(|i| (script.job_id(i), i)).collect();
    let interval_of = |i: usize| parse_manifest(&script.jobs[i].manifest_text).map(|m| m.checkpoint_interval).unwrap_or(0);
    let lost_work: Vec<LostWork> = redone_work(log)
        .into_iter()
        .filter_map(|r| {
            let job = *index_of.get(&r.job_id)?;
            Some(LostWork {
                job,
                learner: r.learner,
                crashed_at: rel(r.crashed_at, origin),
                reached: r.reached,
                redone: r.redone,
                checkpoint_interval: interval_of(job),
            })
        })
        .collect();

    let records: Vec<Option<JobRecord>> = (0..script.jobs.len())
        .map(|i| subs[i].acked.then(|| platform.stores.metadata.get_job(&script.job_id(i)).ok()).flatten())
        .collect();
    let jobs: Vec<JobOutcome> = (0..script.jobs.len())
        .map(|i| {
            let id = script.job_id(i);
            let record = records[i].as_ref();
            let log_lines = record.and_then(|r| job_log_lines(platform, r).ok()).map(|l| l.len()).unwrap_or(0);
            JobOutcome {
                index: i,
                request_id: script.request_id(i),
                job_id: id.clone(),
                acknowledged: subs[i].acked,
                submit_attempts: subs[i].attempts,
                submit_status: subs[i].status,
                final_status: record.map(|r| r.current_status.to_string()),
                deploy_attempts: count_events(log, "deploy-attempt", &id),
                guardian_latency: guardian_latency(log, &id).map(|d| d.as_millis() as f64 / 1000.0),
                log_lines,
                history: record.map(|r| r.history.iter().map(|h| history_line(h, origin)).collect()).unwrap_or_default(),
            }
        })
        .collect();

    let mut report = MetricsReport {
        scenario: script.name.clone(),
        seed: script.seed,
        mode: script.mode.to_string(),
        finished_at: rel(platform.now(), origin),
        events: log.len(),
        event_log_sha256: hex::encode(Sha256::digest(text.as_bytes())),
        passed: true,
        violations: platform.cluster.violations().to_vec(),
        recovery,
        unrestored,
        jobs,
        lost_work,
        assertions: Vec::new(),
    };
    report.assertions = script
        .assertions
        .iter()
        .map(|a| evaluate(a, platform, &report, &records))
        .collect();
    report.passed = report.assertions.iter().all(|a| a.passed);
    report
}

fn outcome(name: String, failures: Vec<String>, ok_detail: String) -> AssertionOutcome {
    if failures.is_empty() {
        AssertionOutcome { name, passed: true, detail: ok_detail }
    } else {
        AssertionOutcome { name, passed: false, detail: failures.join("; ") }
    }
}

fn evaluate(
    a: &Assertion,
    platform: &Platform,
    report: &MetricsReport,
    records: &[Option<JobRecord>],
) -> AssertionOutcome {
    let log = platform.cluster.log();
    let acked: Vec<&JobOutcome> = report.jobs.iter().filter(|j| j.acknowledged).collect();
    match a {
        Assertion::AllTerminal => {
            let failures = acked
                .iter()
                .filter(|j| !j.final_status.as_deref().and_then(JobStatus::parse).is_some_and(JobStatus::is_terminal))
                .map(|j| format!("job {} ended {:?}", j.index, j.final_status))
                .collect();
            outcome("all_terminal".into(), failures, format!("{} acknowledged jobs terminal", acked.len()))
        }
        Assertion::JobStatus { job, status } => {
            let got = report.jobs[*job].final_status.clone();
            let failures = if got.as_deref() == Some(status.as_str()) {
                vec![]
            } else {
                vec![format!("job {job} ended {got:?}")]
            };
            outcome(format!("job_status[{job}]"), failures, status.clone())
        }
        Assertion::Recovery { component, expected, tolerance, min_samples } => {
            let samples = report.recovery.get(component).cloned().unwrap_or_default();
            let mut failures: Vec<String> = samples
                .iter()
                .filter(|s| (*s - expected).abs() > tolerance + 1e-9)
                .map(|s| format!("{s:.3}s"))
                .collect();
            if samples.len() < *min_samples {
                failures.push(format!("{} samples < {min_samples}", samples.len()));
            }
            let detail = format!("{} samples within {expected}±{tolerance}s", samples.len());
            outcome(format!("recovery[{component}]"), failures, detail)
        }
        Assertion::LostWorkBound => {
            let failures = report
                .lost_work
                .iter()
                .filter(|l| l.redone > l.checkpoint_interval)
                .map(|l| format!("job {} {} redid {} > {}", l.job, l.learner, l.redone, l.checkpoint_interval))
                .collect();
            outcome("lost_work_bound".into(), failures, format!("{} learner crashes", report.lost_work.len()))
        }
        Assertion::SingleGuardian => {
            let mut failures = Vec::new();
            for j in &acked {
                let (max_live, completions) = guardian_liveness(log, &j.job_id);
                let finished = j.final_status.as_deref().and_then(JobStatus::parse).is_some_and(JobStatus::is_terminal);
                if max_live > 1 || (finished && completions != 1) || completions > 1 {
                    failures.push(format!("job {}: live {max_live}, completions {completions}", j.index));
                }
            }
            outcome("single_guardian".into(), failures, format!("{} jobs", acked.len()))
        }
        Assertion::AtomicInventory | Assertion::InventoryEmpty => {
            let empty_only = matches!(a, Assertion::InventoryEmpty);
            let mut failures = Vec::new();
            for j in &acked {
                let inv = platform.inventory(&j.job_id);
                let full: BTreeSet<String> = plan(&j.job_id).into_iter().collect();
                if !(inv.is_empty() || (!empty_only && inv == full)) {
                    failures.push(format!("job {}: {:?}", j.index, inv));
                }
            }
            let name = if empty_only { "inventory_empty" } else { "atomic_inventory" };
            outcome(name.into(), failures, format!("{} jobs", acked.len()))
        }
        Assertion::LogsComplete => {
            let mut failures = Vec::new();
            for (i, rec) in records.iter().enumerate() {
                let Some(rec) = rec else { continue };
                let lines: BTreeSet<(String, u64)> = job_log_lines(platform, rec)
                    .unwrap_or_default()
                    .iter()
                    .filter_map(|l| {
                        let mut parts = l.split(' ');
                        let learner = parts.next()?.to_string();
                        let k = parts.next()?.strip_prefix("iter=")?.parse().ok()?;
                        Some((learner, k))
                    })
                    .collect();
                let missing: Vec<_> = logged_iterations(log, &rec.job_id).difference(&lines).cloned().collect();
                if !missing.is_empty() {
                    failures.push(format!("job {i}: {} missing, first {:?}", missing.len(), missing[0]));
                }
            }
            outcome("logs_complete".into(), failures, format!("{} jobs", acked.len()))
        }
        Assertion::RestartNotices => {
            let mut failures = Vec::new();
            for (i, rec) in records.iter().enumerate() {
                let Some(rec) = rec else { continue };
                if rec.current_status == JobStatus::Halted {
                    continue;
                }
                let expected: u32 = learner_restarts(log, &rec.job_id).values().sum();
                let notices = rec.history.iter().filter(|r| r.is_restart_notice()).count() as u32;
                if notices != expected {
                    failures.push(format!("job {i}: {notices} notices for {expected} restarts"));
                }
            }
            outcome("restart_notices".into(), failures, format!("{} jobs", acked.len()))
        }
        Assertion::Attempts { job, count } => {
            let j = &report.jobs[*job];
            let failed = records[*job]
                .as_ref()
                .map(|r| r.history.iter().filter(|h| h.status == JobStatus::Failed).count())
                .unwrap_or(0);
            let mut failures = Vec::new();
            if j.deploy_attempts != *count {
                failures.push(format!("{} attempts", j.deploy_attempts));
            }
            if failed != 1 {
                failures.push(format!("FAILED recorded {failed} times"));
            }
            outcome(format!("attempts[{job}]"), failures, format!("{count} attempts, FAILED once"))
        }
        Assertion::NoViolations => {
            let failures = report.violations.clone();
            outcome("no_violations".into(), failures, format!("{} events checked", report.events))
        }
    }
}
