//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Arguments, if given, select criteria by number or
//! by a substring of the name.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::ops::{Deref, DerefMut};
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;
use trainplane::api::{ApiRequest, Method};
use trainplane::clock::SimTime;
use trainplane::cluster::{factory, Env, LogEntry, Payload, ReplicaSetSpec, Step};
use trainplane::guardian::{plan, WatchFrom};
use trainplane::harness::{
    median, run_scenario, Assertion, FaultEntry, HaltEntry, Mode, RandomFaults, ScenarioRun, ScenarioScript,
};
use trainplane::job_model::JobStatus;
use trainplane::kv::{keys, UnitStatus, WatchKind};
use trainplane::platform::{NodeConfig, Platform};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

/// A run together with the directory holding its stores.
struct Run {
    run: ScenarioRun,
    _dir: TempDir,
}

impl Deref for Run {
    type Target = ScenarioRun;

    fn deref(&self) -> &ScenarioRun {
        &self.run
    }
}

impl DerefMut for Run {
    fn deref_mut(&mut self) -> &mut ScenarioRun {
        &mut self.run
    }
}

fn run(s: &ScenarioScript) -> Run {
    let dir = TempDir::new().expect("tempdir");
    let run = run_scenario(s, dir.path()).unwrap_or_else(|e| panic!("{}: {e}", s.name));
    Run { run, _dir: dir }
}

fn failed_assertions(r: &ScenarioRun) -> Vec<String> {
    r.report
        .assertions
        .iter()
        .filter(|a| !a.passed)
        .map(|a| format!("seed {} {}: {}", r.report.seed, a.name, a.detail))
        .collect()
}

fn verdict(failures: Vec<String>, ok: String) -> Outcome {
    match failures.len() {
        0 => Ok(ok),
        n => Err(format!("{n} failures, first: {}", failures[0])),
    }
}

fn fault(at: f64, target: impl Into<String>) -> FaultEntry {
    FaultEntry { at, target: target.into(), kind: trainplane::cluster::FaultKind::Crash }
}

fn job_lines(r: &mut ScenarioRun, job: usize, token: &str) -> Vec<String> {
    let id = r.acked[job].as_deref().expect("acknowledged");
    let resp = r.platform.handle(&ApiRequest::new(Method::Get, format!("/v1/jobs/{id}/logs")).token(token));
    assert_eq!(resp.status, 200, "{:?}", resp.body);
    resp.body["lines"].as_array().unwrap().iter().map(|l| l.as_str().unwrap().to_string()).collect()
}

// ---------------------------------------------------------------------------
// 1 and 3: control-plane crashes during submission and deployment
// ---------------------------------------------------------------------------

const CONTROL_PLANE_SEEDS: u64 = 1000;

struct ControlPlaneRun {
    acked: usize,
    failures: Vec<String>,
    guardian: Vec<String>,
}

fn control_plane_script(seed: u64) -> ScenarioScript {
    let mut s = script("control-plane-crashes", seed);
    s.settle = 20.0;
    add_job(&mut s, 0.0, ACME, &format!("cp-{seed}-a"), manifest("acme", 1, 3, 1));
    add_job(&mut s, 1.5, GLOBEX, &format!("cp-{seed}-b"), manifest("globex", 1, 3, 1));
    add_job(&mut s, 4.0, ACME, &format!("cp-{seed}-c"), manifest("acme", 2, 3, 1));
    s.random_faults.push(RandomFaults {
        count: 1 + (seed % 4) as u32,
        targets: vec!["service:api".into(), "service:lcm".into(), "store:metadata".into()],
        from: 0.0,
        to: 15.0,
    });
    assert_all(&mut s, [Assertion::AllTerminal, Assertion::InventoryEmpty, Assertion::NoViolations]);
    s
}

fn control_plane_runs() -> &'static [ControlPlaneRun] {
    static RUNS: OnceLock<Vec<ControlPlaneRun>> = OnceLock::new();
    RUNS.get_or_init(|| {
        (0..CONTROL_PLANE_SEEDS)
            .map(|seed| {
                let r = run(&control_plane_script(seed));
                let mut failures = failed_assertions(&r);
                for j in r.report.jobs.iter().filter(|j| j.acknowledged) {
                    if j.final_status.is_none() {
                        failures.push(format!("seed {seed} job {} vanished", j.index));
                    }
                }
                let mut guardian = Vec::new();
                for id in r.acked.iter().flatten() {
                    let (live, completions) = trainplane::harness::guardian_liveness(r.platform.cluster.log(), id);
                    if live > 1 || completions != 1 {
                        guardian.push(format!("seed {seed} {id}: max live {live}, completions {completions}"));
                    }
                }
                ControlPlaneRun { acked: r.acked.iter().flatten().count(), failures, guardian }
            })
            .collect()
    })
}

fn no_lost_jobs() -> Outcome {
    let runs = control_plane_runs();
    let acked: usize = runs.iter().map(|r| r.acked).sum();
    let failures = runs.iter().flat_map(|r| r.failures.clone()).collect();
    verdict(failures, format!("{} schedules, {acked} acknowledged jobs all terminal", runs.len()))
}

fn exactly_once_guardian() -> Outcome {
    let runs = control_plane_runs();
    let jobs: usize = runs.iter().map(|r| r.acked).sum();
    let failures = runs.iter().flat_map(|r| r.guardian.clone()).collect();
    verdict(failures, format!("{jobs} jobs: at most one live Guardian, one completion each"))
}

// ---------------------------------------------------------------------------
// 2: crash and halt at every deployment step boundary
// ---------------------------------------------------------------------------

/// Replays resource creates and destroys from the log and checks the
/// inventory whenever the Guardian claims a consistent point.
fn inventory_violations(log: &[LogEntry], job: &str) -> Vec<String> {
    let full: BTreeSet<String> = plan(job).into_iter().collect();
    let guardian = format!("container:guardian-{job}/main");
    let mut inv = BTreeSet::new();
    let mut out = Vec::new();
    for e in log {
        if full.contains(&e.target) {
            match e.kind.as_str() {
                "create" => {
                    inv.insert(e.target.clone());
                }
                "destroy" => {
                    inv.remove(&e.target);
                }
                _ => {}
            }
        }
        if e.target != guardian {
            continue;
        }
        let settled_empty = e.kind == "teardown" || (e.kind == "phase" && e.detail.ends_with("phase=rolled-back"));
        if e.kind == "deployed" && inv != full {
            out.push(format!("t={} deployed with {inv:?}", e.t));
        }
        if settled_empty && !inv.is_empty() {
            out.push(format!("t={} {} left {inv:?}", e.t, e.kind));
        }
    }
    out
}

fn atomic_provisioning() -> Outcome {
    let base = |name: &str| {
        let mut s = script(name, 0);
        s.settle = 5.0;
        add_job(&mut s, 0.0, ACME, "sweep", manifest("acme", 2, 4, 1));
        assert_all(&mut s, [Assertion::AllTerminal, Assertion::AtomicInventory, Assertion::InventoryEmpty, Assertion::SingleGuardian]);
        s
    };
    let reference = run(&base("sweep-reference"));
    let job = reference.acked[0].clone().ok_or("reference job not acknowledged")?;
    let log = reference.platform.cluster.log();
    let guardian = format!("pod:guardian-{job}");
    let start = log.iter().find(|e| e.kind == "start" && e.target == guardian).ok_or("no guardian")?.t;
    let deployed = log.iter().find(|e| e.kind == "deployed").ok_or("never deployed")?.t;
    let boundaries: BTreeSet<u64> = log
        .iter()
        .filter(|e| e.t >= start && e.t <= deployed && e.target.contains(&job))
        .map(|e| e.t.as_millis())
        .collect();
    let mut cases = 0;
    let mut failures = Vec::new();
    for &b in &boundaries {
        for offset in [0u64, 1, 50] {
            let at = (b + offset) as f64 / 1000.0;
            for action in ["crash", "halt", "crash-halt"] {
                let mut s = base(&format!("sweep-{action}"));
                if action != "halt" {
                    s.faults.push(fault(at, "task:guardian-{job0}"));
                }
                if action != "crash" {
                    let halt_at = if action == "halt" { at } else { at + 0.75 };
                    s.halts.push(HaltEntry { at: halt_at, job: 0 });
                }
                let r = run(&s);
                cases += 1;
                for f in failed_assertions(&r) {
                    failures.push(format!("{action}@{at}: {f}"));
                }
                for v in inventory_violations(r.platform.cluster.log(), &job) {
                    failures.push(format!("{action}@{at}: {v}"));
                }
            }
        }
    }
    verdict(failures, format!("{} boundaries, {cases} crash/halt cases, inventory always empty or full plan", boundaries.len()))
}

// ---------------------------------------------------------------------------
// 4: bounded deployment retries
// ---------------------------------------------------------------------------

fn retry_bound() -> Outcome {
    let mut failures = Vec::new();
    let mut scripts = Vec::new();

    // Learners that can never be placed while another job holds the GPUs.
    let mut starved = script("retry-starved", 0);
    starved.platform.nodes = vec![NodeConfig { id: "node-0".into(), gpus: 2, restart_delay: None }];
    starved.platform.guardian.queue_timeout = 20.0;
    add_job(&mut starved, 0.0, ACME, "blocker", manifest("acme", 2, 150, 10));
    add_job(&mut starved, 5.0, ACME, "starved", manifest("acme", 2, 5, 1));
    assert_all(
        &mut starved,
        [
            Assertion::Attempts { job: 1, count: 3 },
            Assertion::JobStatus { job: 1, status: "FAILED".into() },
            Assertion::JobStatus { job: 0, status: "COMPLETED".into() },
            Assertion::InventoryEmpty,
        ],
    );
    scripts.push(starved);

    // Learners that fit no node at all.
    let mut oversized = script("retry-oversized", 0);
    oversized.platform.nodes = vec![NodeConfig { id: "node-0".into(), gpus: 2, restart_delay: None }];
    add_job(&mut oversized, 0.0, ACME, "oversized", manifest("acme", 3, 5, 1));
    assert_all(
        &mut oversized,
        [
            Assertion::Attempts { job: 0, count: 3 },
            Assertion::JobStatus { job: 0, status: "FAILED".into() },
            Assertion::InventoryEmpty,
        ],
    );
    scripts.push(oversized);

    let mut details = Vec::new();
    for s in &scripts {
        let r = run(s);
        failures.extend(failed_assertions(&r));
        let j = r.report.jobs.iter().rfind(|j| j.final_status.as_deref() == Some("FAILED"));
        if let Some(j) = j {
            details.push(format!("{}: {} attempts", s.name, j.deploy_attempts));
        }
    }
    verdict(failures, details.join(", ") + ", FAILED recorded once")
}

// ---------------------------------------------------------------------------
// 5: lost work bounded by the checkpoint interval
// ---------------------------------------------------------------------------

const LOST_WORK_SEEDS: u64 = 100;
const LOST_WORK_ITERATIONS: u64 = 120;

fn final_results(r: &ScenarioRun, learners: u32, iterations: u64) -> Result<Vec<(String, String)>, String> {
    let objects = &r.platform.stores.objects;
    (0..learners)
        .map(|i| {
            let get = |key: String| {
                objects
                    .get_object("acme-results", "acme-results-key", &key)
                    .map(|b| String::from_utf8(b).unwrap())
                    .map_err(|e| format!("{key}: {e}"))
            };
            Ok((
                get(format!("run/checkpoints/learner-{i}/{iterations}"))?,
                get(format!("run/results/learner-{i}/model"))?,
            ))
        })
        .collect()
}

fn lost_work_bound() -> Outcome {
    let chain = digest_chain(LOST_WORK_ITERATIONS);
    let last = hex::encode(chain[LOST_WORK_ITERATIONS as usize]);
    let expected = (
        format!("iteration={LOST_WORK_ITERATIONS} digest={last}"),
        format!("iterations={LOST_WORK_ITERATIONS} digest={last}"),
    );
    let mut failures = Vec::new();
    let mut crashes = 0;
    let mut worst: BTreeMap<u64, u64> = BTreeMap::new();
    for interval in [1u64, 10, 100] {
        let script_for = |seed: u64| {
            let mut s = script(&format!("lost-work-{interval}"), seed);
            s.settle = 5.0;
            add_job(&mut s, 0.0, ACME, "train", manifest("acme", 2, LOST_WORK_ITERATIONS, interval));
            assert_all(&mut s, [Assertion::LostWorkBound, Assertion::JobStatus { job: 0, status: "COMPLETED".into() }]);
            s
        };
        let reference = run(&script_for(0));
        let clean = final_results(&reference, 2, LOST_WORK_ITERATIONS)?;
        if clean.iter().any(|c| *c != expected) {
            failures.push(format!("interval {interval}: fault-free digest differs from the chain: {:?}", clean[0]));
        }
        for seed in 0..LOST_WORK_SEEDS {
            let mut s = script_for(seed);
            s.random_faults.push(RandomFaults {
                count: 1 + (seed % 3) as u32,
                targets: vec!["pod:learners-{job0}-0".into(), "pod:learners-{job0}-1".into()],
                from: 3.0,
                to: LOST_WORK_ITERATIONS as f64,
            });
            let r = run(&s);
            failures.extend(failed_assertions(&r).into_iter().map(|f| format!("interval {interval} {f}")));
            for l in &r.report.lost_work {
                crashes += 1;
                let w = worst.entry(interval).or_default();
                *w = (*w).max(l.redone);
            }
            match final_results(&r, 2, LOST_WORK_ITERATIONS) {
                Ok(got) if got == clean => {}
                Ok(got) => failures.push(format!("interval {interval} seed {seed}: final state {:?}", got[0])),
                Err(e) => failures.push(format!("interval {interval} seed {seed}: {e}")),
            }
        }
    }
    let worst: Vec<String> = worst.iter().map(|(i, w)| format!("{w}/{i}")).collect();
    verdict(
        failures,
        format!(
            "{} schedules, {crashes} learner crashes, worst redo/interval {}, digests match fault-free",
            3 * LOST_WORK_SEEDS,
            worst.join(" ")
        ),
    )
}

// ---------------------------------------------------------------------------
// 6: logs survive learner crashes
// ---------------------------------------------------------------------------

fn log_durability() -> Outcome {
    let iterations = 40;
    let script_for = |seed: u64| {
        let mut s = script("log-durability", seed);
        s.settle = 5.0;
        add_job(&mut s, 0.0, ACME, "logs", manifest("acme", 2, iterations, 10));
        assert_all(&mut s, [Assertion::LogsComplete, Assertion::JobStatus { job: 0, status: "COMPLETED".into() }]);
        s
    };
    let mut reference = run(&script_for(0));
    // Line text per (learner, iteration), from the fault-free run.
    let clean: BTreeMap<(String, u64), String> = job_lines(&mut reference, 0, ACME)
        .into_iter()
        .map(|l| {
            let mut p = l.split(' ');
            let learner = p.next().unwrap().to_string();
            let k = p.next().unwrap().strip_prefix("iter=").unwrap().parse().unwrap();
            ((learner, k), l)
        })
        .collect();
    if clean.len() != 2 * iterations as usize {
        return Err(format!("fault-free run kept {} of {} lines", clean.len(), 2 * iterations));
    }
    let mut failures = Vec::new();
    let mut verified = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = script_for(seed);
        let crash_at = rng.random_range(4_000..40_000) as f64 / 1000.0;
        s.faults.push(fault(crash_at, format!("pod:learners-{{job0}}-{}", seed % 2)));
        if seed % 3 == 0 {
            s.faults.push(fault(rng.random_range(4_000..40_000) as f64 / 1000.0, "pod:helpers-{job0}"));
        }
        let mut r = run(&s);
        failures.extend(failed_assertions(&r));
        let lines: BTreeSet<String> = job_lines(&mut r, 0, ACME).into_iter().collect();
        let crash = SimTime::from_secs_f64(crash_at);
        let before_crash: Vec<(String, u64)> = r
            .platform
            .cluster
            .log()
            .iter()
            .filter(|e| e.kind == "iteration" && e.t < crash)
            .map(|e| {
                let mut f = e.detail.split(' ');
                let learner = f.next().unwrap().strip_prefix("learner=").unwrap().to_string();
                let k = f.next().unwrap().strip_prefix("iter=").unwrap().parse().unwrap();
                (learner, k)
            })
            .collect();
        for key in before_crash {
            verified += 1;
            if !lines.contains(&clean[&key]) {
                failures.push(format!("seed {seed}: missing {:?}", clean[&key]));
            }
        }
    }
    verdict(failures, format!("100 crash schedules, {verified} pre-crash lines all retrievable"))
}

// ---------------------------------------------------------------------------
// 7: status history equals the fold of learner statuses
// ---------------------------------------------------------------------------

fn rank(s: JobStatus) -> u8 {
    match s {
        JobStatus::Pending => 0,
        JobStatus::Deploying => 1,
        JobStatus::Downloading => 2,
        JobStatus::Processing => 3,
        JobStatus::Storing => 4,
        _ => 5,
    }
}

fn terminal(s: JobStatus) -> bool {
    matches!(s, JobStatus::Completed | JobStatus::Failed | JobStatus::Halted)
}

/// Expected `(status, restart_count)` records for a sequence of learner
/// status writes, starting from `base`.
fn oracle_fold(learners: usize, base: (JobStatus, u32), events: &[(usize, UnitStatus)]) -> Vec<(JobStatus, u32, bool)> {
    let mut latest: Vec<Option<JobStatus>> = vec![None; learners];
    let mut seen = vec![0u32; learners];
    let (mut status, mut rc) = base;
    let mut out = Vec::new();
    for (i, u) in events {
        if terminal(status) {
            break;
        }
        while seen[*i] < u.restart_count {
            seen[*i] += 1;
            rc += 1;
            out.push((status, rc, true));
        }
        latest[*i] = Some(match latest[*i] {
            Some(p) if terminal(p) => p,
            Some(p) if !terminal(u.status) && rank(p) >= rank(u.status) => p,
            _ => u.status,
        });
        let current: Vec<JobStatus> = latest.iter().map(|s| s.unwrap_or(JobStatus::Deploying)).collect();
        let agg = if current.contains(&JobStatus::Failed) {
            JobStatus::Failed
        } else if current.contains(&JobStatus::Halted) {
            JobStatus::Halted
        } else {
            current
                .iter()
                .map(|s| if *s == JobStatus::Completed { JobStatus::Storing } else { *s })
                .min_by_key(|s| rank(*s))
                .unwrap()
        };
        if agg != status && (terminal(agg) || rank(agg) > rank(status)) {
            status = agg;
            out.push((status, rc, false));
        }
    }
    out
}

fn fidelity_violations(r: &ScenarioRun, learners: usize) -> Vec<String> {
    let seed = r.report.seed;
    let Some(job_id) = r.acked[0].as_deref() else { return vec![format!("seed {seed}: not acknowledged")] };
    let kv = &r.platform.stores.kv;
    let from: WatchFrom = match kv.get(&keys::guardian_watch_from(job_id)) {
        Ok(e) => serde_json::from_slice(&e.value).unwrap(),
        // Halted before any deployment attempt: nothing to fold.
        Err(_) => return vec![],
    };
    let mut watch = kv.watch(&keys::learners_prefix(job_id), from.revision).unwrap();
    let events: Vec<(usize, UnitStatus)> = kv
        .poll(&mut watch)
        .unwrap()
        .into_iter()
        .filter(|e| e.kind == WatchKind::Put)
        .filter_map(|e| Some((keys::learner_index(&e.entry.key)? as usize, UnitStatus::from_bytes(&e.entry.value)?)))
        .collect();
    let expected = oracle_fold(learners, (from.status, from.restart_count), &events);
    let job = r.platform.stores.metadata.get_job(job_id).unwrap();
    let Some(base) = job.history.iter().position(|h| h.status == from.status && h.restart_count == from.restart_count)
    else {
        return vec![format!("seed {seed}: base record missing")];
    };
    let mut actual: Vec<(JobStatus, u32, bool)> =
        job.history[base + 1..].iter().map(|h| (h.status, h.restart_count, h.is_restart_notice())).collect();
    let halted = job.current_status == JobStatus::Halted;
    if let Some(&(last, _, _)) = actual.last() {
        let from_fold = expected.iter().any(|e| e.0 == last);
        if (last == JobStatus::Completed || last == JobStatus::Halted) && !from_fold {
            actual.pop();
        }
    }
    let ok = if halted { expected.starts_with(&actual) } else { actual == expected };
    if ok {
        vec![]
    } else {
        vec![format!("seed {seed}: history {actual:?} != fold {expected:?}")]
    }
}

fn status_fidelity() -> Outcome {
    let mut failures = Vec::new();
    let mut notices = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = script("status-fidelity", seed);
        s.settle = 5.0;
        add_job(&mut s, 0.0, ACME, "fold", manifest("acme", 2, 30, 5));
        s.random_faults.push(RandomFaults {
            count: 1 + (seed % 2) as u32,
            targets: vec!["pod:learners-{job0}-0".into(), "pod:learners-{job0}-1".into()],
            from: 2.0,
            to: 35.0,
        });
        if seed % 4 == 0 {
            s.faults.push(fault(rng.random_range(2_000..35_000) as f64 / 1000.0, "task:guardian-{job0}"));
        }
        if seed % 5 == 0 {
            s.halts.push(HaltEntry { at: rng.random_range(5_000..50_000) as f64 / 1000.0, job: 0 });
        }
        assert_all(&mut s, [Assertion::RestartNotices, Assertion::AllTerminal]);
        let r = run(&s);
        failures.extend(failed_assertions(&r));
        failures.extend(fidelity_violations(&r, 2));
        notices += r.report.jobs[0].history.iter().filter(|h| h.contains("restarted:")).count();
    }
    verdict(failures, format!("100 schedules match the fold, {notices} restart notices"))
}

// ---------------------------------------------------------------------------
// 8: recovery times
// ---------------------------------------------------------------------------

fn recovery_times() -> Outcome {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/recovery.toml");
    let base = ScenarioScript::load(&path).map_err(|e| e.to_string())?;
    let mut failures = Vec::new();
    let mut samples: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for seed in 0..21u64 {
        let mut s = base.clone();
        s.seed = seed;
        if seed > 0 {
            // Same components, crashed at seeded instants while the job trains.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let learner = format!("pod:learners-{{job0}}-{}", seed % 2);
            let targets = ["service:api", "service:lcm", "task:guardian-{job0}", "pod:helpers-{job0}", learner.as_str()];
            s.faults = targets
                .iter()
                .map(|t| fault(rng.random_range(10_000..150_000) as f64 / 1000.0, *t))
                .collect();
        }
        let r = run(&s);
        failures.extend(failed_assertions(&r));
        for (c, v) in &r.report.recovery {
            samples.entry(c.clone()).or_default().extend(v);
        }
    }

    let mut wall = script("guardian-latency", 0);
    wall.mode = Mode::Wallclock;
    wall.horizon = 4.0;
    for i in 0..5 {
        add_job(&mut wall, i as f64 * 0.5, ACME, &format!("wall-{i}"), manifest("acme", 1, 2, 1));
    }
    let r = run(&wall);
    let mut latencies: Vec<f64> = r.report.jobs.iter().filter_map(|j| j.guardian_latency).collect();
    latencies.sort_by(f64::total_cmp);
    let wall_median = median(&latencies);
    match wall_median {
        Some(m) if latencies.len() == 5 && m < 3.0 => {}
        _ => failures.push(format!("wall-clock Guardian latencies {latencies:?}")),
    }
    let summary: Vec<String> = samples
        .iter()
        .map(|(c, v)| {
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = v.iter().copied().fold(0.0, f64::max);
            format!("{c} {lo:.3}-{hi:.3}s (n={})", v.len())
        })
        .collect();
    verdict(
        failures,
        format!("{}; wall-clock Guardian median {:.3}s", summary.join(", "), wall_median.unwrap_or(f64::NAN)),
    )
}

// ---------------------------------------------------------------------------
// 9: tenant isolation
// ---------------------------------------------------------------------------

/// Runs inside a job's pod under its network policy and tries to reach
/// another tenant's keys, buckets and volume, plus a few of its own as a
/// control.
struct Prober {
    own_job: String,
    other_job: String,
}

impl Payload for Prober {
    fn step(&mut self, env: &mut Env<'_>) -> Step {
        let other_key = keys::learner_status(&self.other_job, 0);
        let other_prefix = keys::job_prefix(&self.other_job);
        let other_vol = format!("vol-{}", self.other_job);
        let probes: Vec<(&str, bool)> = vec![
            ("kv-get", env.kv_get(&other_key).is_ok()),
            ("kv-put", env.kv_put(&other_key, "x").is_ok()),
            ("kv-delete", env.kv_delete(&other_key).is_ok()),
            ("kv-range", env.kv_range(&other_prefix).is_ok()),
            ("kv-watch", env.kv_watch(&other_prefix, 1).is_ok()),
            ("obj-get", env.obj_get("globex-data", "globex-data-key", "mnist/train-0").is_ok()),
            ("obj-put", env.obj_put("globex-results", "globex-results-key", "stolen", b"x").is_ok()),
            ("obj-list", env.obj_list("globex-data", "globex-data-key", "").is_ok()),
            ("vol-read", env.vol_read(&other_vol, "/logs/learner-0.log").is_ok()),
            ("vol-write", env.vol_write(&other_vol, "/stolen", "x").is_ok()),
            ("vol-list", env.vol_list(&other_vol, "/").is_ok()),
            ("metadata", env.metadata().is_ok()),
            ("cluster", env.cluster().is_ok()),
        ];
        let allowed: Vec<&str> = probes.iter().filter(|(_, ok)| *ok).map(|(n, _)| *n).collect();
        let own = env.kv_get(&keys::job_prefix(&self.own_job)).is_ok() || env.kv_range(&keys::job_prefix(&self.own_job)).is_ok();
        let own_obj = env.obj_list("acme-results", "acme-results-key", "").is_ok();
        env.log_event(
            "probe",
            format!("total={} allowed={} own_kv={own} own_obj={own_obj}", probes.len(), allowed.join(",")),
        );
        Step::Exit(0)
    }
}

fn tenant_isolation() -> Outcome {
    let dir = TempDir::new().unwrap();
    let config = script("isolation", 0).platform;
    let mut p = Platform::virtual_time(dir.path(), config).map_err(|e| e.to_string())?;
    let submit = |p: &mut Platform, token: &str, rid: &str, tenant: &str| {
        let body = manifest(tenant, 1, 100, 10).to_string();
        let resp = p.handle(&ApiRequest::new(Method::Post, "/v1/jobs").token(token).request_id(rid).body(body));
        assert_eq!(resp.status, 201, "{:?}", resp.body);
        resp.body["job_id"].as_str().unwrap().to_string()
    };
    let a = submit(&mut p, ACME, "iso-a", "acme");
    let b = submit(&mut p, GLOBEX, "iso-b", "globex");
    p.run_until(SimTime::from_secs_f64(20.0));

    let mut probes = 0;
    let mut failures = Vec::new();
    let mut expect_denied = |what: String, denied: bool| {
        probes += 1;
        if !denied {
            failures.push(what);
        }
    };

    // API, both directions, plus missing and unknown tokens.
    for (token, tenant, victim) in [(GLOBEX, "globex", &a), (ACME, "acme", &b)] {
        for (method, path) in [
            (Method::Get, format!("/v1/jobs/{victim}")),
            (Method::Get, format!("/v1/jobs/{victim}/logs")),
            (Method::Delete, format!("/v1/jobs/{victim}")),
        ] {
            let resp = p.handle(&ApiRequest::new(method, path.clone()).token(token));
            expect_denied(format!("{tenant} {method:?} {path} -> {}", resp.status), matches!(resp.status, 403 | 404));
        }
        let list = p.handle(&ApiRequest::new(Method::Get, "/v1/jobs").token(token));
        expect_denied(format!("{tenant} list shows {victim}"), list.status == 200 && !list.body.to_string().contains(victim.as_str()));
        // Leaked credentials for the other tenant's buckets.
        let other = if tenant == "acme" { "globex" } else { "acme" };
        let body = manifest(other, 1, 5, 1).to_string();
        let resp = p.handle(&ApiRequest::new(Method::Post, "/v1/jobs").token(token).request_id("steal").body(body));
        expect_denied(format!("{tenant} submit on {other} buckets -> {}", resp.status), resp.status == 403);
        // Reusing the other tenant's request id yields a different job.
        let rid = if tenant == "acme" { "iso-b" } else { "iso-a" };
        let body = manifest(tenant, 1, 5, 1).to_string();
        let resp = p.handle(&ApiRequest::new(Method::Post, "/v1/jobs").token(token).request_id(rid).body(body));
        expect_denied(format!("{tenant} request id collision"), resp.status == 201 && resp.body["job_id"] != victim.as_str());
    }
    for token in [None, Some("tok-nobody")] {
        for (method, path) in [
            (Method::Post, "/v1/jobs".to_string()),
            (Method::Get, "/v1/jobs".to_string()),
            (Method::Get, format!("/v1/jobs/{a}")),
            (Method::Get, format!("/v1/jobs/{a}/logs")),
            (Method::Delete, format!("/v1/jobs/{a}")),
        ] {
            let mut req = ApiRequest::new(method, path.clone()).body(manifest("acme", 1, 5, 1).to_string());
            if let Some(t) = token {
                req = req.token(t);
            }
            let resp = p.handle(&req);
            expect_denied(format!("token {token:?} {method:?} {path} -> {}", resp.status), resp.status == 401);
        }
    }

    // Object store with the wrong tenant's credential.
    let objects = &p.stores.objects;
    for (bucket, cred) in [("globex-data", "acme-data-key"), ("acme-results", "globex-results-key")] {
        expect_denied(format!("get {bucket} with {cred}"), objects.get_object(bucket, cred, "mnist/train-0").is_err());
        expect_denied(format!("put {bucket} with {cred}"), objects.put_object(bucket, cred, "x", b"x").is_err());
        expect_denied(format!("list {bucket} with {cred}"), objects.list_objects(bucket, cred, "").is_err());
        expect_denied(format!("versioned get {bucket} with {cred}"), objects.get_versioned(bucket, cred, "mnist/train-0").is_err());
        expect_denied(format!("authorize {bucket} with {cred}"), objects.authorize(bucket, cred).is_err());
    }

    // From inside job a's pods, even holding globex's credentials.
    let (own, other) = (a.clone(), b.clone());
    p.cluster
        .create_replica_set(ReplicaSetSpec {
            set_id: format!("probe-{a}"),
            replicas: 1,
            gpus_per_replica: 0,
            payload: factory(move || Prober { own_job: own.clone(), other_job: other.clone() }),
            restart_delay: trainplane::clock::secs(1.0),
            volumes: vec![format!("vol-{a}")],
            network_policy: Some(format!("netpol-{a}")),
            owner: a.clone(),
        })
        .map_err(|e| e.to_string())?;
    p.run_until(SimTime::from_secs_f64(22.0));
    let probe = p.cluster.log().iter().find(|e| e.kind == "probe").ok_or("probe never ran")?.detail.clone();
    let field = |k: &str| probe.split(' ').find_map(|f| f.strip_prefix(k)).unwrap_or("").to_string();
    let total: usize = field("total=").parse().unwrap_or(0);
    let allowed = field("allowed=");
    for _ in 0..total {
        expect_denied(format!("in-cluster probe allowed {allowed}"), allowed.is_empty());
    }
    if field("own_kv=") != "true" || field("own_obj=") != "true" {
        failures.push(format!("control probe failed: {probe}"));
    }
    verdict(failures, format!("{probes} cross-tenant probes, 100% denied"))
}

// ---------------------------------------------------------------------------
// 10: determinism
// ---------------------------------------------------------------------------

fn determinism() -> Outcome {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut scripts = vec![ScenarioScript::load(&dir.join("recovery.toml")).map_err(|e| e.to_string())?];
    scripts.push(control_plane_script(7));
    let mut s = script("mixed", 11);
    add_job(&mut s, 0.0, ACME, "m1", manifest("acme", 2, 30, 5));
    add_job(&mut s, 1.0, GLOBEX, "m2", manifest("globex", 2, 30, 5));
    s.random_faults.push(RandomFaults {
        count: 6,
        targets: vec![
            "pod:learners-{job0}-1".into(),
            "pod:helpers-{job1}".into(),
            "task:guardian-{job0}".into(),
            "service:lcm".into(),
            "node:node-1".into(),
            "store:kv".into(),
        ],
        from: 1.0,
        to: 30.0,
    });
    scripts.push(s);
    let mut failures = Vec::new();
    for s in &scripts {
        let (x, y) = (run(s), run(s));
        if x.event_log() != y.event_log() {
            failures.push(format!("{}: event logs differ", s.name));
        }
        if x.report.to_text() != y.report.to_text() {
            failures.push(format!("{}: reports differ", s.name));
        }
    }
    let golden_path = dir.join("recovery.report.toml");
    let golden = std::fs::read_to_string(&golden_path).map_err(|e| format!("{}: {e}", golden_path.display()))?;
    let fresh = run(&scripts[0]).report.to_text();
    if fresh != golden {
        failures.push("recovery report differs from the committed golden report".into());
    }
    verdict(failures, format!("{} scenarios replayed byte-identical, golden report matches", scripts.len()))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("no-lost-jobs", no_lost_jobs),
        ("atomic-provisioning", atomic_provisioning),
        ("exactly-once-guardian", exactly_once_guardian),
        ("retry-bound", retry_bound),
        ("lost-work-bound", lost_work_bound),
        ("log-durability", log_durability),
        ("status-fidelity", status_fidelity),
        ("recovery-times", recovery_times),
        ("tenant-isolation", tenant_isolation),
        ("determinism", determinism),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected = |i: usize, name: &str| {
        filters.is_empty() || filters.iter().any(|f| f == &(i + 1).to_string() || name.contains(f.as_str()))
    };
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !selected(i, name) {
            continue;
        }
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} {name:<22} PASS  {detail} ({secs:.1}s)", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} {name:<22} FAIL  {detail} ({secs:.1}s)", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
