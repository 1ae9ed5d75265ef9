use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobOutcome {
    pub index: usize,
    pub request_id: String,
    pub job_id: String,
    /// The API answered 201.
    pub acknowledged: bool,
    pub submit_attempts: u32,
    /// Last HTTP status seen for the submit.
    pub submit_status: u16,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_status: Option<String>,
    pub deploy_attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guardian_latency: Option<f64>,
    pub log_lines: usize,
    /// `STATUS@time rc=n [detail]` per history record.
    pub history: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LostWork {
    pub job: usize,
    pub learner: String,
    pub crashed_at: f64,
    pub reached: u64,
    pub redone: u64,
    pub checkpoint_interval: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssertionOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Everything a scenario run measured. In virtual mode the rendered text is
/// a pure function of the script.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: String,
    pub seed: u64,
    pub mode: String,
    pub finished_at: f64,
    pub events: usize,
    pub event_log_sha256: String,
    pub passed: bool,
    pub violations: Vec<String>,
    /// Seconds from crash to restoration, per component, in crash order.
    pub recovery: BTreeMap<String, Vec<f64>>,
    /// Crashes with no restoration before the run ended, per component.
    pub unrestored: BTreeMap<String, u32>,
    pub jobs: Vec<JobOutcome>,
    pub lost_work: Vec<LostWork>,
    pub assertions: Vec<AssertionOutcome>,
}

impl MetricsReport {
    /// Structured form (TOML).
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }

    pub fn from_text(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "scenario {} (seed {}, {}): {} events, finished at {:.3}s",
            self.scenario, self.seed, self.mode, self.events, self.finished_at
        );
        let _ = writeln!(s, "\n{:<16} {:>7} {:>9} {:>9} {:>9} {:>10}", "component", "crashes", "min", "median", "max", "unrestored");
        let mut components: Vec<&String> = self.recovery.keys().chain(self.unrestored.keys()).collect();
        components.sort();
        components.dedup();
        for c in components {
            let samples = self.recovery.get(c).cloned().unwrap_or_default();
            let unrestored = self.unrestored.get(c).copied().unwrap_or(0);
            let cell = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
            let mut sorted = samples.clone();
            sorted.sort_by(f64::total_cmp);
            let _ = writeln!(
                s,
                "{:<16} {:>7} {:>9} {:>9} {:>9} {:>10}",
                c,
                samples.len() as u32 + unrestored,
                cell(sorted.first().copied()),
                cell(median(&sorted)),
                cell(sorted.last().copied()),
                unrestored
            );
        }
        let _ = writeln!(s, "\n{:<4} {:<22} {:<10} {:>8} {:>9} {:>6} {:>6}", "job", "id", "status", "attempts", "guardian", "redone", "lines");
        for j in &self.jobs {
            let redone: u64 = self.lost_work.iter().filter(|l| l.job == j.index).map(|l| l.redone).sum();
            let status = match (&j.final_status, j.acknowledged) {
                (Some(st), _) => st.clone(),
                (None, true) => "?".into(),
                (None, false) => format!("http {}", j.submit_status),
            };
            let latency = j.guardian_latency.map(|l| format!("{l:.3}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                s,
                "{:<4} {:<22} {:<10} {:>8} {:>9} {:>6} {:>6}",
                j.index, j.job_id, status, j.deploy_attempts, latency, redone, j.log_lines
            );
        }
        if !self.assertions.is_empty() {
            let _ = writeln!(s);
            for a in &self.assertions {
                let _ = writeln!(s, "{} {}: {}", if a.passed { "PASS" } else { "FAIL" }, a.name, a.detail);
            }
        }
        for v in &self.violations {
            let _ = writeln!(s, "VIOLATION {v}");
        }
        s
    }
}

pub fn median(sorted: &[f64]) -> Option<f64> {
    match sorted.len() {
        0 => None,
        n if n % 2 == 1 => Some(sorted[n / 2]),
        n => Some((sorted[n / 2 - 1] + sorted[n / 2]) / 2.0),
    }
}
