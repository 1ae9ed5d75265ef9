use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::clock::SimTime;
use crate::stores::StoreKind;

/// Control-plane services that run outside the cluster's pods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ServiceKind {
    Api,
    Lcm,
}

impl fmt::Display for ServiceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ServiceKind::Api => "api",
            ServiceKind::Lcm => "lcm",
        })
    }
}

impl FromStr for ServiceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "api" => Ok(ServiceKind::Api),
            "lcm" => Ok(ServiceKind::Lcm),
            other => Err(format!("unknown service {other:?}")),
        }
    }
}

/// What a fault hits. Written as `node:<id>`, `task:<id>`, `pod:<name>`,
/// `container:<pod>/<name>`, `store:<metadata|kv|object>` or `service:<api|lcm>`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum FaultTarget {
    Node(String),
    Task(String),
    Pod(String),
    Container { pod: String, container: String },
    Store(StoreKind),
    Service(ServiceKind),
}

impl fmt::Display for FaultTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FaultTarget::Node(id) => write!(f, "node:{id}"),
            FaultTarget::Task(id) => write!(f, "task:{id}"),
            FaultTarget::Pod(name) => write!(f, "pod:{name}"),
            FaultTarget::Container { pod, container } => write!(f, "container:{pod}/{container}"),
            FaultTarget::Store(s) => write!(f, "store:{s}"),
            FaultTarget::Service(s) => write!(f, "service:{s}"),
        }
    }
}

impl FromStr for FaultTarget {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, rest) = s.split_once(':').ok_or_else(|| format!("bad fault target {s:?}"))?;
        if rest.is_empty() {
            return Err(format!("bad fault target {s:?}"));
        }
        match kind {
            "node" => Ok(FaultTarget::Node(rest.to_string())),
            "task" => Ok(FaultTarget::Task(rest.to_string())),
            "pod" | "replica" => Ok(FaultTarget::Pod(rest.to_string())),
            "container" => {
                let (pod, container) =
                    rest.split_once('/').ok_or_else(|| format!("bad container target {s:?}"))?;
                Ok(FaultTarget::Container { pod: pod.to_string(), container: container.to_string() })
            }
            "store" => Ok(FaultTarget::Store(rest.parse()?)),
            "service" => Ok(FaultTarget::Service(rest.parse()?)),
            other => Err(format!("unknown fault target kind {other:?}")),
        }
    }
}

impl TryFrom<String> for FaultTarget {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<FaultTarget> for String {
    fn from(t: FaultTarget) -> String {
        t.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FaultKind {
    /// Kill the target; it comes back after its configured restart delay.
    Crash,
    /// Kill the target and keep it down for `window` seconds.
    Outage { window: f64 },
    /// Make the target's payload fail on its next step with `exit_code`
    /// (a simulated training error rather than a crash).
    Fail { exit_code: i32 },
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FaultKind::Crash => f.write_str("crash"),
            FaultKind::Outage { window } => write!(f, "outage({window})"),
            FaultKind::Fail { exit_code } => write!(f, "fail({exit_code})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultEvent {
    pub at: SimTime,
    pub target: FaultTarget,
    #[serde(flatten)]
    pub kind: FaultKind,
}

impl FaultEvent {
    pub fn crash(at: SimTime, target: FaultTarget) -> Self {
        FaultEvent { at, target, kind: FaultKind::Crash }
    }
}
