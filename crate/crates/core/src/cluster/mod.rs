//! Simulated cluster substrate.
//!
//! Nodes with GPU capacity host pods. A pod holds one or more containers, each
//! running a [`Payload`]: a state machine advanced one [`Step`] at a time by a
//! single event loop. A crash drops the payload's in-memory state; a restarted
//! container gets a fresh payload from its factory, so payloads only remember
//! what they wrote to volumes or stores.
//!
//! Three unit kinds are supported:
//!
//! * run-to-completion tasks: re-executed after crashes or failed exits until
//!   one execution exits 0, which is recorded exactly once;
//! * replica sets: `n` pods named `{set_id}-{i}` that keep their identity and
//!   volume mounts across restarts and are not restarted after they exit;
//! * helper groups: one pod with several named containers.
//!
//! Placement is first-fit over nodes in ascending index order; pods that do
//! not fit wait in arrival order. Every state change is appended to the event
//! log, one `t=<time> kind=<kind> target=<target> detail=<detail>` line each.
//! In virtual mode event order depends only on the schedule, so two runs with
//! the same inputs produce byte-identical logs.

mod env;
mod fault;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::clock::{fmt_secs, secs, Clock, SimTime};
use crate::stores::Stores;

pub use env::{Env, EnvError};
pub use fault::{FaultEvent, FaultKind, FaultTarget, ServiceKind};

pub trait Payload: Send {
    fn step(&mut self, env: &mut Env<'_>) -> Step;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    /// Run the next step after this much time.
    After(Duration),
    /// The container is done with this exit code.
    Exit(i32),
}

pub type PayloadFactory = Arc<dyn Fn() -> Box<dyn Payload> + Send + Sync>;

/// Wraps a constructor closure as a [`PayloadFactory`].
pub fn factory<P, F>(make: F) -> PayloadFactory
where
    P: Payload + 'static,
    F: Fn() -> P + Send + Sync + 'static,
{
    Arc::new(move || Box::new(make()) as Box<dyn Payload>)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClusterError {
    #[error("already exists: {0}")]
    AlreadyExists(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("UNSCHEDULABLE: {0}")]
    Unschedulable(String),
    #[error("UNKNOWN_TARGET: {0}")]
    UnknownTarget(String),
    #[error("NO_LIVE_NODE")]
    NoLiveNode,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeSpec {
    pub id: String,
    pub gpu_capacity: u32,
    pub restart_delay: Duration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeState {
    Up,
    Crashed,
}

struct Node {
    spec: NodeSpec,
    state: NodeState,
    used: u32,
    epoch: u64,
}

#[derive(Clone)]
pub struct TaskSpec {
    pub task_id: String,
    pub payload: PayloadFactory,
    pub restart_delay: Duration,
    /// `None` retries forever.
    pub max_system_restarts: Option<u32>,
    pub gpus: u32,
    pub owner: String,
}

#[derive(Clone)]
pub struct ReplicaSetSpec {
    pub set_id: String,
    pub replicas: u32,
    pub gpus_per_replica: u32,
    pub payload: PayloadFactory,
    pub restart_delay: Duration,
    pub volumes: Vec<String>,
    /// Containers start only once this policy exists; it then governs what
    /// the payload may reach.
    pub network_policy: Option<String>,
    pub owner: String,
}

#[derive(Clone)]
pub struct HelperGroupSpec {
    pub group_id: String,
    pub containers: Vec<(String, PayloadFactory)>,
    pub restart_delay: Duration,
    pub volumes: Vec<String>,
    pub owner: String,
}

/// Restricts isolated payloads to their own volume, their tenant's buckets
/// and coordination keys under their own job prefix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkPolicy {
    pub id: String,
    pub owner: String,
    pub tenant: String,
    pub volume: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SharedVolume {
    pub id: String,
    pub owner: String,
    pub files: BTreeMap<String, Vec<u8>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskState {
    Pending,
    Running,
    Restarting,
    Completed,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskStatus {
    pub state: TaskState,
    pub executions: u32,
    pub completions: u32,
    pub restarts: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplicaSetStatus {
    pub replicas: u32,
    /// Pods currently holding a node.
    pub placed: u32,
    /// Pods whose containers all exited.
    pub exited: u32,
}

enum UnitKind {
    Task {
        max_restarts: Option<u32>,
        completions: u32,
        executions: u32,
        failed: bool,
    },
    ReplicaSet,
    HelperGroup,
}

struct Unit {
    owner: String,
    kind: UnitKind,
    pods: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PodState {
    Pending,
    Running { node: usize },
    Restarting,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ContainerState {
    Waiting,
    Running,
    Exited(i32),
}

struct Container {
    name: String,
    factory: PayloadFactory,
    state: ContainerState,
    payload: Option<Box<dyn Payload>>,
    incarnation: u64,
    injected_failure: Option<i32>,
}

struct Pod {
    unit: String,
    replica_index: Option<u32>,
    gpus: u32,
    restart_delay: Duration,
    volumes: Vec<String>,
    network_policy: Option<String>,
    state: PodState,
    containers: Vec<Container>,
    restarts: u32,
    incarnation: u64,
}

enum Event {
    Step { pod: String, container: usize, incarnation: u64 },
    PodRestart { pod: String, incarnation: u64 },
    ContainerRestart { pod: String, container: usize, incarnation: u64 },
    NodeRestart { node: usize, epoch: u64 },
    Fault(FaultEvent),
    External(u64),
}

struct Scheduled {
    at: SimTime,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

/// One line of the cluster event log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub t: SimTime,
    pub kind: String,
    pub target: String,
    pub detail: String,
}

impl fmt::Display for LogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t={} kind={} target={} detail={}", self.t, self.kind, self.target, self.detail)
    }
}

/// What [`Cluster::process_next`] handled.
#[derive(Debug, Clone, PartialEq)]
pub enum Processed {
    Internal,
    /// A fault aimed at a store or service; the caller applies it.
    ExternalFault(FaultEvent),
    /// A timer registered with [`Cluster::schedule_external`].
    Timer(u64),
}

pub struct Cluster {
    clock: Box<dyn Clock>,
    queue: BinaryHeap<Reverse<Scheduled>>,
    seq: u64,
    next_incarnation: u64,
    nodes: Vec<Node>,
    pods: BTreeMap<String, Pod>,
    pending: VecDeque<String>,
    units: BTreeMap<String, Unit>,
    volumes: BTreeMap<String, SharedVolume>,
    policies: BTreeMap<String, NetworkPolicy>,
    log: Vec<LogEntry>,
    violations: Vec<String>,
}

impl Cluster {
    pub fn new(clock: Box<dyn Clock>, nodes: Vec<NodeSpec>) -> Self {
        let nodes = nodes
            .into_iter()
            .map(|spec| Node { spec, state: NodeState::Up, used: 0, epoch: 0 })
            .collect();
        Cluster {
            clock,
            queue: BinaryHeap::new(),
            seq: 0,
            next_incarnation: 0,
            nodes,
            pods: BTreeMap::new(),
            pending: VecDeque::new(),
            units: BTreeMap::new(),
            volumes: BTreeMap::new(),
            policies: BTreeMap::new(),
            log: Vec::new(),
            violations: Vec::new(),
        }
    }

    pub fn now(&self) -> SimTime {
        self.clock.now()
    }

    pub fn is_virtual(&self) -> bool {
        self.clock.is_virtual()
    }

    fn schedule(&mut self, at: SimTime, event: Event) {
        self.seq += 1;
        self.queue.push(Reverse(Scheduled { at, seq: self.seq, event }));
    }

    fn schedule_in(&mut self, delay: Duration, event: Event) {
        let at = self.now() + delay;
        self.schedule(at, event);
    }

    /// Registers a caller-owned timer; it comes back as [`Processed::Timer`].
    pub fn schedule_external(&mut self, at: SimTime, token: u64) {
        self.schedule(at, Event::External(token));
    }

    fn incarnation(&mut self) -> u64 {
        self.next_incarnation += 1;
        self.next_incarnation
    }

    pub fn record(&mut self, kind: &str, target: impl Into<String>, detail: impl Into<String>) {
        let entry = LogEntry {
            t: self.now(),
            kind: kind.to_string(),
            target: target.into(),
            detail: detail.into(),
        };
        self.log.push(entry);
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn log_text(&self) -> String {
        let mut out = String::new();
        for e in &self.log {
            out.push_str(&e.to_string());
            out.push('\n');
        }
        out
    }

    /// Capacity violations observed so far (should always be empty).
    pub fn violations(&self) -> &[String] {
        &self.violations
    }

    // ---------------------------------------------------------------------
    // Event loop
    // ---------------------------------------------------------------------

    pub fn next_event_time(&self) -> Option<SimTime> {
        self.queue.peek().map(|Reverse(s)| s.at)
    }

    /// Processes the earliest pending event, if any.
    pub fn process_next(&mut self, stores: &Stores) -> Option<Processed> {
        let Reverse(Scheduled { at, event, .. }) = self.queue.pop()?;
        self.clock.advance_to(at);
        let processed = match event {
            Event::Step { pod, container, incarnation } => {
                self.run_step(stores, &pod, container, incarnation);
                Processed::Internal
            }
            Event::PodRestart { pod, incarnation } => {
                self.restart_pod(&pod, incarnation);
                Processed::Internal
            }
            Event::ContainerRestart { pod, container, incarnation } => {
                self.restart_container(&pod, container, incarnation);
                Processed::Internal
            }
            Event::NodeRestart { node, epoch } => {
                self.restart_node(node, epoch);
                Processed::Internal
            }
            Event::Fault(f) => match self.fire_fault(f) {
                Some(external) => Processed::ExternalFault(external),
                None => Processed::Internal,
            },
            Event::External(token) => Processed::Timer(token),
        };
        self.check_capacity();
        Some(processed)
    }

    /// Processes every event scheduled at or before `to`, then moves the
    /// clock to `to`. Returns the store/service faults that fired.
    pub fn advance_clock(&mut self, to: SimTime, stores: &Stores) -> Vec<FaultEvent> {
        let mut fired = Vec::new();
        while self.next_event_time().is_some_and(|t| t <= to) {
            if let Some(Processed::ExternalFault(f)) = self.process_next(stores) {
                fired.push(f);
            }
        }
        self.clock.advance_to(to);
        fired
    }

    fn check_capacity(&mut self) {
        for (i, node) in self.nodes.iter().enumerate() {
            let placed: u32 = self
                .pods
                .values()
                .filter(|p| p.state == PodState::Running { node: i })
                .map(|p| p.gpus)
                .sum();
            if placed != node.used || node.used > node.spec.gpu_capacity {
                let msg = format!(
                    "t={} node {} used={} placed={} capacity={}",
                    self.clock.now(),
                    node.spec.id,
                    node.used,
                    placed,
                    node.spec.gpu_capacity
                );
                self.violations.push(msg);
            }
        }
    }

    // ---------------------------------------------------------------------
    // Unit creation and destruction
    // ---------------------------------------------------------------------

    fn ensure_live_node(&self) -> Result<(), ClusterError> {
        if self.nodes.iter().any(|n| n.state == NodeState::Up) {
            Ok(())
        } else {
            Err(ClusterError::NoLiveNode)
        }
    }

    fn check_schedulable(&self, what: &str, per_pod: u32, count: u32) -> Result<(), ClusterError> {
        // Would the unit fit first-fit into the cluster if it were empty?
        let mut free: Vec<u32> = self.nodes.iter().map(|n| n.spec.gpu_capacity).collect();
        for _ in 0..count {
            match free.iter_mut().find(|f| **f >= per_pod) {
                Some(f) => *f -= per_pod,
                None => {
                    let total: u32 = self.nodes.iter().map(|n| n.spec.gpu_capacity).sum();
                    return Err(ClusterError::Unschedulable(format!(
                        "{what} needs {count}×{per_pod} GPUs, cluster has {total}"
                    )));
                }
            }
        }
        Ok(())
    }

    fn unit_taken(&self, id: &str) -> Result<(), ClusterError> {
        if self.units.contains_key(id) || self.pods.contains_key(id) {
            Err(ClusterError::AlreadyExists(id.to_string()))
        } else {
            Ok(())
        }
    }

    fn add_pod(&mut self, name: String, pod: Pod) {
        self.pods.insert(name.clone(), pod);
        self.pending.push_back(name);
    }

    fn new_container(name: &str, factory: PayloadFactory) -> Container {
        Container {
            name: name.to_string(),
            factory,
            state: ContainerState::Waiting,
            payload: None,
            incarnation: 0,
            injected_failure: None,
        }
    }

    pub fn create_task(&mut self, spec: TaskSpec) -> Result<(), ClusterError> {
        self.unit_taken(&spec.task_id)?;
        self.ensure_live_node()?;
        self.check_schedulable(&spec.task_id, spec.gpus, 1)?;
        let id = spec.task_id.clone();
        self.units.insert(
            id.clone(),
            Unit {
                owner: spec.owner.clone(),
                kind: UnitKind::Task {
                    max_restarts: spec.max_system_restarts,
                    completions: 0,
                    executions: 0,
                    failed: false,
                },
                pods: vec![id.clone()],
            },
        );
        let pod = Pod {
            unit: id.clone(),
            replica_index: None,
            gpus: spec.gpus,
            restart_delay: spec.restart_delay,
            volumes: Vec::new(),
            network_policy: None,
            state: PodState::Pending,
            containers: vec![Self::new_container("main", spec.payload)],
            restarts: 0,
            incarnation: 0,
        };
        self.record("create", format!("task:{id}"), format!("owner={}", spec.owner));
        self.add_pod(id, pod);
        self.try_place();
        Ok(())
    }

    pub fn create_replica_set(&mut self, spec: ReplicaSetSpec) -> Result<(), ClusterError> {
        self.unit_taken(&spec.set_id)?;
        self.ensure_live_node()?;
        self.check_schedulable(&spec.set_id, spec.gpus_per_replica, spec.replicas)?;
        for v in &spec.volumes {
            if !self.volumes.contains_key(v) {
                return Err(ClusterError::NotFound(format!("volume {v}")));
            }
        }
        let names: Vec<String> = (0..spec.replicas).map(|i| format!("{}-{i}", spec.set_id)).collect();
        self.units.insert(
            spec.set_id.clone(),
            Unit { owner: spec.owner.clone(), kind: UnitKind::ReplicaSet, pods: names.clone() },
        );
        self.record(
            "create",
            format!("replica-set:{}", spec.set_id),
            format!("replicas={} gpus_per_replica={}", spec.replicas, spec.gpus_per_replica),
        );
        for (i, name) in names.into_iter().enumerate() {
            let pod = Pod {
                unit: spec.set_id.clone(),
                replica_index: Some(i as u32),
                gpus: spec.gpus_per_replica,
                restart_delay: spec.restart_delay,
                volumes: spec.volumes.clone(),
                network_policy: spec.network_policy.clone(),
                state: PodState::Pending,
                containers: vec![Self::new_container("main", spec.payload.clone())],
                restarts: 0,
                incarnation: 0,
            };
            self.add_pod(name, pod);
        }
        self.try_place();
        Ok(())
    }

    pub fn create_helper_group(&mut self, spec: HelperGroupSpec) -> Result<(), ClusterError> {
        self.unit_taken(&spec.group_id)?;
        self.ensure_live_node()?;
        for v in &spec.volumes {
            if !self.volumes.contains_key(v) {
                return Err(ClusterError::NotFound(format!("volume {v}")));
            }
        }
        let id = spec.group_id.clone();
        self.units.insert(
            id.clone(),
            Unit { owner: spec.owner.clone(), kind: UnitKind::HelperGroup, pods: vec![id.clone()] },
        );
        let names: Vec<&str> = spec.containers.iter().map(|(n, _)| n.as_str()).collect();
        self.record("create", format!("helper-group:{id}"), format!("containers={}", names.join(",")));
        let pod = Pod {
            unit: id.clone(),
            replica_index: None,
            gpus: 0,
            restart_delay: spec.restart_delay,
            volumes: spec.volumes,
            network_policy: None,
            state: PodState::Pending,
            containers: spec
                .containers
                .into_iter()
                .map(|(name, f)| Self::new_container(&name, f))
                .collect(),
            restarts: 0,
            incarnation: 0,
        };
        self.add_pod(id, pod);
        self.try_place();
        Ok(())
    }

    pub fn create_volume(&mut self, id: &str, owner: &str) -> Result<(), ClusterError> {
        if self.volumes.contains_key(id) {
            return Err(ClusterError::AlreadyExists(id.to_string()));
        }
        self.volumes.insert(
            id.to_string(),
            SharedVolume { id: id.to_string(), owner: owner.to_string(), files: BTreeMap::new() },
        );
        self.record("create", format!("volume:{id}"), format!("owner={owner}"));
        Ok(())
    }

    /// Deletes a volume and its contents. Returns whether it existed.
    pub fn destroy_volume(&mut self, id: &str) -> bool {
        let existed = self.volumes.remove(id).is_some();
        if existed {
            self.record("destroy", format!("volume:{id}"), "");
        }
        existed
    }

    pub fn apply_policy(&mut self, policy: NetworkPolicy) -> Result<(), ClusterError> {
        if self.policies.contains_key(&policy.id) {
            return Err(ClusterError::AlreadyExists(policy.id));
        }
        let id = policy.id.clone();
        self.record("create", format!("network-policy:{id}"), format!("tenant={}", policy.tenant));
        self.policies.insert(id.clone(), policy);
        // Start containers that were held back waiting for this policy.
        let waiting: Vec<(String, usize)> = self
            .pods
            .iter()
            .filter(|(_, p)| {
                p.network_policy.as_deref() == Some(id.as_str())
                    && matches!(p.state, PodState::Running { .. })
            })
            .flat_map(|(name, p)| {
                p.containers
                    .iter()
                    .enumerate()
                    .filter(|(_, c)| c.state == ContainerState::Waiting)
                    .map(move |(i, _)| (name.clone(), i))
            })
            .collect();
        for (pod, ci) in waiting {
            self.start_container(&pod, ci);
        }
        Ok(())
    }

    pub fn delete_policy(&mut self, id: &str) -> bool {
        let existed = self.policies.remove(id).is_some();
        if existed {
            self.record("destroy", format!("network-policy:{id}"), "");
        }
        existed
    }

    /// Removes a replica set or helper group and all its pods. Returns whether
    /// it existed.
    pub fn destroy_unit(&mut self, id: &str) -> bool {
        let Some(unit) = self.units.get(id) else { return false };
        if matches!(unit.kind, UnitKind::Task { .. }) {
            return false;
        }
        let unit = self.units.remove(id).expect("checked");
        let kind = match unit.kind {
            UnitKind::ReplicaSet => "replica-set",
            _ => "helper-group",
        };
        for name in &unit.pods {
            if let Some(pod) = self.pods.remove(name) {
                if let PodState::Running { node } = pod.state {
                    self.nodes[node].used -= pod.gpus;
                }
            }
        }
        self.pending.retain(|p| !unit.pods.contains(p));
        self.record("destroy", format!("{kind}:{id}"), "");
        self.try_place();
        true
    }

    // ---------------------------------------------------------------------
    // Placement and container lifecycle
    // ---------------------------------------------------------------------

    fn try_place(&mut self) {
        let mut still_pending = VecDeque::new();
        while let Some(name) = self.pending.pop_front() {
            let Some(pod) = self.pods.get(&name) else { continue };
            if pod.state != PodState::Pending {
                continue;
            }
            let gpus = pod.gpus;
            let slot = self.nodes.iter().position(|n| {
                n.state == NodeState::Up && n.spec.gpu_capacity - n.used >= gpus
            });
            match slot {
                Some(node) => {
                    self.nodes[node].used += gpus;
                    let pod = self.pods.get_mut(&name).expect("exists");
                    pod.state = PodState::Running { node };
                    let node_id = self.nodes[node].spec.id.clone();
                    self.record("place", format!("pod:{name}"), format!("node={node_id} gpus={gpus}"));
                    let count = self.pods[&name].containers.len();
                    for ci in 0..count {
                        self.start_container(&name, ci);
                    }
                }
                None => still_pending.push_back(name),
            }
        }
        self.pending = still_pending;
    }

    fn start_container(&mut self, pod_name: &str, ci: usize) {
        let inc = self.incarnation();
        let Some(pod) = self.pods.get(pod_name) else { return };
        if !matches!(pod.state, PodState::Running { .. }) {
            return;
        }
        if let Some(policy) = &pod.network_policy {
            if !self.policies.contains_key(policy) {
                return;
            }
        }
        let pod = self.pods.get_mut(pod_name).expect("exists");
        let restarts = pod.restarts;
        let unit = pod.unit.clone();
        let c = &mut pod.containers[ci];
        if c.state != ContainerState::Waiting {
            return;
        }
        c.state = ContainerState::Running;
        c.payload = Some((c.factory)());
        c.incarnation = inc;
        let name = c.name.clone();
        if let Some(Unit { kind: UnitKind::Task { executions, .. }, .. }) = self.units.get_mut(&unit) {
            *executions += 1;
        }
        self.record("start", format!("pod:{pod_name}"), format!("container={name} restarts={restarts}"));
        self.schedule_in(
            Duration::ZERO,
            Event::Step { pod: pod_name.to_string(), container: ci, incarnation: inc },
        );
    }

    fn run_step(&mut self, stores: &Stores, pod_name: &str, ci: usize, inc: u64) {
        let Some(pod) = self.pods.get_mut(pod_name) else { return };
        let Some(c) = pod.containers.get_mut(ci) else { return };
        if c.incarnation != inc || c.state != ContainerState::Running {
            return;
        }
        let Some(mut payload) = c.payload.take() else { return };
        let (outcome, extra) = {
            let mut env = Env::new(self, stores, pod_name.to_string(), ci);
            let outcome = payload.step(&mut env);
            (outcome, env.extra_delay())
        };
        let still_current = self
            .pods
            .get(pod_name)
            .and_then(|p| p.containers.get(ci))
            .is_some_and(|c| c.incarnation == inc && c.state == ContainerState::Running);
        if !still_current {
            return;
        }
        match outcome {
            Step::After(delay) => {
                self.pods.get_mut(pod_name).expect("checked").containers[ci].payload = Some(payload);
                self.schedule_in(
                    delay + extra,
                    Event::Step { pod: pod_name.to_string(), container: ci, incarnation: inc },
                );
            }
            Step::Exit(code) => self.container_exited(pod_name, ci, code),
        }
    }

    fn container_exited(&mut self, pod_name: &str, ci: usize, code: i32) {
        let pod = self.pods.get_mut(pod_name).expect("caller checked");
        let c = &mut pod.containers[ci];
        c.state = ContainerState::Exited(code);
        c.payload = None;
        c.injected_failure = None;
        let container = c.name.clone();
        let unit_id = pod.unit.clone();
        let restart_delay = pod.restart_delay;
        self.record("exit", format!("pod:{pod_name}"), format!("container={container} code={code}"));

        let unit = self.units.get_mut(&unit_id).expect("pod has unit");
        match &mut unit.kind {
            UnitKind::Task { completions, max_restarts, failed, .. } => {
                if code == 0 {
                    *completions += 1;
                    self.finish_pod(pod_name);
                    self.record("complete", format!("task:{unit_id}"), "");
                } else {
                    let pod = self.pods.get_mut(pod_name).expect("exists");
                    pod.restarts += 1;
                    if max_restarts.is_some_and(|m| pod.restarts > m) {
                        *failed = true;
                        self.finish_pod(pod_name);
                        self.record("task-failed", format!("task:{unit_id}"), format!("code={code}"));
                    } else {
                        let inc = self.incarnation();
                        let pod = self.pods.get_mut(pod_name).expect("exists");
                        pod.containers[ci].state = ContainerState::Waiting;
                        pod.containers[ci].incarnation = inc;
                        self.schedule_in(
                            restart_delay,
                            Event::ContainerRestart { pod: pod_name.to_string(), container: ci, incarnation: inc },
                        );
                    }
                }
            }
            UnitKind::ReplicaSet | UnitKind::HelperGroup => {
                let all_exited = self.pods[pod_name]
                    .containers
                    .iter()
                    .all(|c| matches!(c.state, ContainerState::Exited(_)));
                if all_exited {
                    self.finish_pod(pod_name);
                }
            }
        }
    }

    fn finish_pod(&mut self, pod_name: &str) {
        let pod = self.pods.get_mut(pod_name).expect("exists");
        if let PodState::Running { node } = pod.state {
            self.nodes[node].used -= pod.gpus;
        }
        pod.state = PodState::Done;
        self.try_place();
    }

    fn crash_pod(&mut self, pod_name: &str, down_for: Option<Duration>) {
        let Some(pod) = self.pods.get(pod_name) else {
            self.record("fault-noop", format!("pod:{pod_name}"), "no such pod");
            return;
        };
        let PodState::Running { node } = pod.state else {
            self.record("fault-noop", format!("pod:{pod_name}"), "not running");
            return;
        };
        let inc = self.incarnation();
        let pod = self.pods.get_mut(pod_name).expect("exists");
        self.nodes[node].used -= pod.gpus;
        pod.state = PodState::Restarting;
        pod.restarts += 1;
        pod.incarnation = inc;
        for c in &mut pod.containers {
            c.state = ContainerState::Waiting;
            c.payload = None;
            c.injected_failure = None;
            c.incarnation = 0;
        }
        let delay = down_for.unwrap_or(pod.restart_delay);
        let restarts = pod.restarts;
        self.record(
            "crash",
            format!("pod:{pod_name}"),
            format!("restart_in={} restarts={restarts}", fmt_secs(delay)),
        );
        self.schedule_in(delay, Event::PodRestart { pod: pod_name.to_string(), incarnation: inc });
        self.try_place();
    }

    fn restart_pod(&mut self, pod_name: &str, inc: u64) {
        let Some(pod) = self.pods.get_mut(pod_name) else { return };
        if pod.incarnation != inc || pod.state != PodState::Restarting {
            return;
        }
        pod.state = PodState::Pending;
        self.pending.push_back(pod_name.to_string());
        self.record("restart", format!("pod:{pod_name}"), "");
        self.try_place();
    }

    fn crash_container(&mut self, pod_name: &str, container: &str, down_for: Option<Duration>) {
        let Some(pod) = self.pods.get(pod_name) else {
            self.record("fault-noop", format!("container:{pod_name}/{container}"), "no such pod");
            return;
        };
        let Some(ci) = pod.containers.iter().position(|c| c.name == container) else {
            self.record("fault-noop", format!("container:{pod_name}/{container}"), "no such container");
            return;
        };
        if pod.containers[ci].state != ContainerState::Running {
            self.record("fault-noop", format!("container:{pod_name}/{container}"), "not running");
            return;
        }
        let inc = self.incarnation();
        let pod = self.pods.get_mut(pod_name).expect("exists");
        pod.restarts += 1;
        let delay = down_for.unwrap_or(pod.restart_delay);
        let c = &mut pod.containers[ci];
        c.state = ContainerState::Waiting;
        c.payload = None;
        c.injected_failure = None;
        c.incarnation = inc;
        self.record(
            "crash",
            format!("container:{pod_name}/{container}"),
            format!("restart_in={}", fmt_secs(delay)),
        );
        self.schedule_in(
            delay,
            Event::ContainerRestart { pod: pod_name.to_string(), container: ci, incarnation: inc },
        );
    }

    fn restart_container(&mut self, pod_name: &str, ci: usize, inc: u64) {
        let Some(pod) = self.pods.get(pod_name) else { return };
        let c = &pod.containers[ci];
        if c.incarnation != inc || c.state != ContainerState::Waiting {
            return;
        }
        let name = c.name.clone();
        self.record("restart", format!("container:{pod_name}/{name}"), "");
        self.start_container(pod_name, ci);
    }

    fn crash_node(&mut self, index: usize, down_for: Option<Duration>) {
        let node = &mut self.nodes[index];
        let id = node.spec.id.clone();
        if node.state == NodeState::Crashed {
            self.record("fault-noop", format!("node:{id}"), "already crashed");
            return;
        }
        node.state = NodeState::Crashed;
        node.epoch += 1;
        let epoch = node.epoch;
        let delay = down_for.unwrap_or(node.spec.restart_delay);
        self.record("node-crash", format!("node:{id}"), format!("restart_in={}", fmt_secs(delay)));
        let victims: Vec<String> = self
            .pods
            .iter()
            .filter(|(_, p)| p.state == PodState::Running { node: index })
            .map(|(n, _)| n.clone())
            .collect();
        for pod in victims {
            self.crash_pod(&pod, None);
        }
        self.schedule_in(delay, Event::NodeRestart { node: index, epoch });
    }

    fn restart_node(&mut self, index: usize, epoch: u64) {
        let node = &mut self.nodes[index];
        if node.epoch != epoch || node.state == NodeState::Up {
            return;
        }
        node.state = NodeState::Up;
        let id = node.spec.id.clone();
        self.record("node-up", format!("node:{id}"), "");
        self.try_place();
    }

    // ---------------------------------------------------------------------
    // Faults
    // ---------------------------------------------------------------------

    /// Schedules a fault. Nodes must exist now; pods and containers are
    /// resolved when the fault fires (a missing one is logged as a no-op).
    pub fn inject_fault(&mut self, fault: FaultEvent) -> Result<(), ClusterError> {
        if let FaultTarget::Node(id) = &fault.target {
            if !self.nodes.iter().any(|n| &n.spec.id == id) {
                return Err(ClusterError::UnknownTarget(fault.target.to_string()));
            }
        }
        let at = fault.at.max(self.now());
        self.schedule(at, Event::Fault(fault));
        Ok(())
    }

    fn fire_fault(&mut self, fault: FaultEvent) -> Option<FaultEvent> {
        self.record("fault", fault.target.to_string(), fault.kind.to_string());
        let window = match fault.kind {
            FaultKind::Outage { window } => Some(secs(window)),
            _ => None,
        };
        match (&fault.target, &fault.kind) {
            (FaultTarget::Store(_) | FaultTarget::Service(_), _) => return Some(fault),
            (FaultTarget::Node(id), FaultKind::Fail { .. }) => {
                self.record("fault-noop", format!("node:{id}"), "fail applies to payloads");
            }
            (FaultTarget::Node(id), _) => {
                if let Some(i) = self.nodes.iter().position(|n| &n.spec.id == id) {
                    self.crash_node(i, window);
                }
            }
            (FaultTarget::Task(name) | FaultTarget::Pod(name), FaultKind::Fail { exit_code }) => {
                let code = *exit_code;
                if let Some(pod) = self.pods.get_mut(name) {
                    for c in pod.containers.iter_mut().filter(|c| c.state == ContainerState::Running) {
                        c.injected_failure = Some(code);
                    }
                }
            }
            (FaultTarget::Task(name) | FaultTarget::Pod(name), _) => {
                let name = name.clone();
                self.crash_pod(&name, window);
            }
            (FaultTarget::Container { pod, container }, FaultKind::Fail { exit_code }) => {
                let code = *exit_code;
                if let Some(c) = self
                    .pods
                    .get_mut(pod)
                    .and_then(|p| p.containers.iter_mut().find(|c| &c.name == container))
                {
                    c.injected_failure = Some(code);
                }
            }
            (FaultTarget::Container { pod, container }, _) => {
                let (pod, container) = (pod.clone(), container.clone());
                self.crash_container(&pod, &container, window);
            }
        }
        None
    }

    // ---------------------------------------------------------------------
    // Queries
    // ---------------------------------------------------------------------

    pub fn task_status(&self, task_id: &str) -> Option<TaskStatus> {
        let unit = self.units.get(task_id)?;
        let UnitKind::Task { completions, executions, failed, .. } = unit.kind else { return None };
        let pod = self.pods.get(task_id)?;
        let state = match pod.state {
            _ if completions > 0 => TaskState::Completed,
            _ if failed => TaskState::Failed,
            PodState::Pending => TaskState::Pending,
            PodState::Running { .. } => TaskState::Running,
            PodState::Restarting => TaskState::Restarting,
            PodState::Done => TaskState::Completed,
        };
        Some(TaskStatus { state, executions, completions, restarts: pod.restarts })
    }

    pub fn replica_set_status(&self, set_id: &str) -> Option<ReplicaSetStatus> {
        let unit = self.units.get(set_id)?;
        if !matches!(unit.kind, UnitKind::ReplicaSet) {
            return None;
        }
        let mut status = ReplicaSetStatus { replicas: unit.pods.len() as u32, placed: 0, exited: 0 };
        for p in unit.pods.iter().filter_map(|n| self.pods.get(n)) {
            match p.state {
                PodState::Running { .. } => status.placed += 1,
                PodState::Done => status.exited += 1,
                _ => {}
            }
        }
        Some(status)
    }

    pub fn unit_exists(&self, id: &str) -> bool {
        self.units.contains_key(id)
    }

    pub fn volume(&self, id: &str) -> Option<&SharedVolume> {
        self.volumes.get(id)
    }

    pub fn volume_mut(&mut self, id: &str) -> Option<&mut SharedVolume> {
        self.volumes.get_mut(id)
    }

    pub fn policy(&self, id: &str) -> Option<&NetworkPolicy> {
        self.policies.get(id)
    }

    /// Node hosting `pod`, if it is placed.
    pub fn pod_node(&self, pod: &str) -> Option<&str> {
        match self.pods.get(pod)?.state {
            PodState::Running { node } => Some(&self.nodes[node].spec.id),
            _ => None,
        }
    }

    pub fn pod_restarts(&self, pod: &str) -> Option<u32> {
        self.pods.get(pod).map(|p| p.restarts)
    }

    pub fn node_state(&self, id: &str) -> Option<NodeState> {
        self.nodes.iter().find(|n| n.spec.id == id).map(|n| n.state)
    }

    pub fn node_usage(&self, id: &str) -> Option<(u32, u32)> {
        self.nodes.iter().find(|n| n.spec.id == id).map(|n| (n.used, n.spec.gpu_capacity))
    }

    /// Resources (volumes, replica sets, helper groups, policies) owned by
    /// `owner`, as `kind:id` strings. Tasks are not included.
    pub fn inventory(&self, owner: &str) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for v in self.volumes.values().filter(|v| v.owner == owner) {
            out.insert(format!("volume:{}", v.id));
        }
        for (id, u) in self.units.iter().filter(|(_, u)| u.owner == owner) {
            match u.kind {
                UnitKind::ReplicaSet => out.insert(format!("replica-set:{id}")),
                UnitKind::HelperGroup => out.insert(format!("helper-group:{id}")),
                UnitKind::Task { .. } => false,
            };
        }
        for p in self.policies.values().filter(|p| p.owner == owner) {
            out.insert(format!("network-policy:{}", p.id));
        }
        out
    }

    /// Tasks owned by `owner` that have not completed or failed.
    pub fn live_tasks(&self, owner: &str) -> Vec<String> {
        self.units
            .iter()
            .filter(|(_, u)| u.owner == owner)
            .filter(|(_, u)| {
                matches!(u.kind, UnitKind::Task { completions: 0, failed: false, .. })
            })
            .map(|(id, _)| id.clone())
            .collect()
    }
}

#[cfg(test)]
mod tests;
