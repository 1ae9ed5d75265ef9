//! Measurements read back from the cluster event log.

use std::collections::{BTreeMap, BTreeSet};

use crate::clock::SimTime;
use crate::cluster::LogEntry;

/// One crash and, if it happened, the instant the target was usable again.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Recovery {
    pub component: String,
    pub target: String,
    pub crashed_at: SimTime,
    pub restored_at: Option<SimTime>,
}

/// Iterations a learner ran a second time after one crash.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Redo {
    pub job_id: String,
    pub learner: String,
    pub crashed_at: SimTime,
    /// Highest iteration logged before the crash.
    pub reached: u64,
    pub redone: u64,
}

fn detail_field<'a>(detail: &'a str, key: &str) -> Option<&'a str> {
    detail.split(' ').find_map(|kv| kv.strip_prefix(key)?.strip_prefix('='))
}

/// Job id from a learner pod name `learners-{job}-{i}`.
fn learner_pod_job(pod: &str) -> Option<(&str, &str)> {
    let rest = pod.strip_prefix("learners-")?;
    let (job, index) = rest.rsplit_once('-')?;
    index.parse::<u32>().ok()?;
    Some((job, index))
}

fn pod_component(pod: &str) -> &'static str {
    if pod.starts_with("guardian-") {
        "guardian"
    } else if pod.starts_with("helpers-") {
        "helper"
    } else if pod.starts_with("learners-") {
        "learner"
    } else {
        "task"
    }
}

/// Pairs every crash with its restoration.
///
/// API and LCM are restored at their first successful probe, stores when
/// they reopen, nodes when they rejoin, Guardian and helper pods when their
/// container starts again, learners at their first iteration after the
/// crash. A crash that is hit again before restoring stays unrestored.
type Restored = Box<dyn Fn(&LogEntry) -> bool>;

pub fn recoveries(log: &[LogEntry]) -> Vec<Recovery> {
    let mut out = Vec::new();
    for (i, e) in log.iter().enumerate() {
        let (component, restored): (String, Restored) = match (e.kind.as_str(), e.target.split_once(':')) {
            ("crash", Some(("service", s))) => {
                let target = e.target.clone();
                (s.to_string(), Box::new(move |x: &LogEntry| x.kind == "probe-ok" && x.target == target))
            }
            ("crash", Some(("store", s))) => {
                let target = e.target.clone();
                (format!("store-{s}"), Box::new(move |x: &LogEntry| x.kind == "restart" && x.target == target))
            }
            ("node-crash", Some(("node", _))) => {
                let target = e.target.clone();
                ("node".into(), Box::new(move |x: &LogEntry| x.kind == "node-up" && x.target == target))
            }
            ("crash", Some(("pod", pod))) => {
                let component = pod_component(pod);
                if component == "learner" {
                    let prefix = format!("container:{pod}/");
                    (component.into(), Box::new(move |x: &LogEntry| x.kind == "iteration" && x.target.starts_with(&prefix)))
                } else {
                    let target = e.target.clone();
                    (component.into(), Box::new(move |x: &LogEntry| x.kind == "start" && x.target == target))
                }
            }
            ("crash", Some(("container", rest))) => {
                let Some((pod, name)) = rest.split_once('/') else { continue };
                let component = pod_component(pod);
                if component == "learner" {
                    let target = e.target.clone();
                    (component.into(), Box::new(move |x: &LogEntry| x.kind == "iteration" && x.target == target))
                } else {
                    let target = format!("pod:{pod}");
                    let detail = format!("container={name} ");
                    (
                        component.into(),
                        Box::new(move |x: &LogEntry| x.kind == "start" && x.target == target && x.detail.starts_with(&detail)),
                    )
                }
            }
            _ => continue,
        };
        let mut restored_at = None;
        for x in &log[i + 1..] {
            if restored(x) {
                restored_at = Some(x.t);
                break;
            }
            if (x.kind == "crash" || x.kind == "node-crash") && overlaps(&x.target, &e.target) {
                break;
            }
        }
        out.push(Recovery { component, target: e.target.clone(), crashed_at: e.t, restored_at });
    }
    out
}

/// Same target, or a pod and one of its containers.
fn overlaps(a: &str, b: &str) -> bool {
    let pod = |t: &str| -> Option<String> {
        match t.split_once(':')? {
            ("pod", p) => Some(p.to_string()),
            ("container", c) => Some(c.split_once('/')?.0.to_string()),
            _ => None,
        }
    };
    if a == b {
        return true;
    }
    let pod_level = a.starts_with("pod:") || b.starts_with("pod:");
    pod_level && pod(a).is_some() && pod(a) == pod(b)
}

/// For each learner crash, counts the iterations logged again that had
/// already been logged before it.
pub fn redone_work(log: &[LogEntry]) -> Vec<Redo> {
    let mut out = Vec::new();
    for (i, e) in log.iter().enumerate() {
        if e.kind != "crash" {
            continue;
        }
        let pod = match e.target.split_once(':') {
            Some(("pod", p)) => p,
            Some(("container", c)) => c.split_once('/').map(|(p, _)| p).unwrap_or(c),
            _ => continue,
        };
        let Some((job, index)) = learner_pod_job(pod) else { continue };
        let prefix = format!("container:{pod}/");
        let iter_of = |x: &LogEntry| -> Option<u64> {
            (x.kind == "iteration" && x.target.starts_with(&prefix))
                .then(|| detail_field(&x.detail, "iter")?.parse().ok())
                .flatten()
        };
        let reached = log[..i].iter().filter_map(iter_of).max().unwrap_or(0);
        let mut redone = 0;
        for x in &log[i + 1..] {
            if x.kind == "crash" && overlaps(&x.target, &e.target) {
                break;
            }
            if let Some(k) = iter_of(x) {
                if k <= reached {
                    redone += 1;
                } else {
                    break;
                }
            }
        }
        out.push(Redo {
            job_id: job.to_string(),
            learner: format!("learner-{index}"),
            crashed_at: e.t,
            reached,
            redone,
        });
    }
    out
}

/// Highest number of simultaneously running Guardian containers for a job,
/// and how many times its task completed.
pub fn guardian_liveness(log: &[LogEntry], job_id: &str) -> (u32, u32) {
    let pod = format!("pod:guardian-{job_id}");
    let container = format!("container:guardian-{job_id}/main");
    let task = format!("task:guardian-{job_id}");
    let (mut live, mut max, mut completions) = (0u32, 0u32, 0u32);
    for e in log {
        match e.kind.as_str() {
            "start" if e.target == pod => {
                live += 1;
                max = max.max(live);
            }
            "crash" if e.target == pod || e.target == container => live = 0,
            "exit" if e.target == pod => live = live.saturating_sub(1),
            "complete" if e.target == task => completions += 1,
            _ => {}
        }
    }
    (max, completions)
}

pub fn count_events(log: &[LogEntry], kind: &str, job_id: &str) -> u32 {
    log.iter()
        .filter(|e| e.kind == kind && detail_field(&e.detail, "job") == Some(job_id))
        .count() as u32
}

/// Submit to first Guardian container start.
pub fn guardian_latency(log: &[LogEntry], job_id: &str) -> Option<std::time::Duration> {
    let submitted = log
        .iter()
        .find(|e| e.kind == "submit" && detail_field(&e.detail, "job") == Some(job_id))?
        .t;
    let pod = format!("pod:guardian-{job_id}");
    let started = log.iter().find(|e| e.kind == "start" && e.target == pod)?.t;
    Some(started.since(submitted))
}

/// `(learner, iteration)` pairs the job's learners logged.
pub fn logged_iterations(log: &[LogEntry], job_id: &str) -> BTreeSet<(String, u64)> {
    let prefix = format!("container:learners-{job_id}-");
    log.iter()
        .filter(|e| e.kind == "iteration" && e.target.starts_with(&prefix))
        .filter_map(|e| {
            let learner = detail_field(&e.detail, "learner")?.to_string();
            let k = detail_field(&e.detail, "iter")?.parse().ok()?;
            Some((learner, k))
        })
        .collect()
}

/// Restart count each learner pod reached after the job's last successful
/// deployment.
pub fn learner_restarts(log: &[LogEntry], job_id: &str) -> BTreeMap<String, u32> {
    let last_deploy = log
        .iter()
        .rposition(|e| e.kind == "deploy-attempt" && detail_field(&e.detail, "job") == Some(job_id))
        .unwrap_or(0);
    let prefix = format!("pod:learners-{job_id}-");
    let mut out = BTreeMap::new();
    for e in &log[last_deploy..] {
        if e.kind == "start" && e.target.starts_with(&prefix) {
            let restarts: u32 = detail_field(&e.detail, "restarts").and_then(|r| r.parse().ok()).unwrap_or(0);
            let slot = out.entry(e.target["pod:".len()..].to_string()).or_insert(0);
            *slot = (*slot).max(restarts);
        }
    }
    out
}
