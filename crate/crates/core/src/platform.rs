//! The whole control plane in one process: stores, the simulated cluster,
//! the API service and the lifecycle manager, driven by the cluster's event
//! loop.
//!
//! The API service and the LCM are not pods. They are modeled as services
//! that can be crashed and restarted (after 4 and 5 seconds by default) and
//! that talk through timed messages: an API-to-LCM notification arrives 0.1 s
//! after it was sent and is lost if the LCM is down when it arrives. The
//! API's reconciler re-sends whatever got lost.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{fmt_secs, secs, Clock, SimTime, VirtualClock, WallClock};
use crate::cluster::{Cluster, ClusterError, FaultEvent, FaultKind, FaultTarget, NodeSpec, ServiceKind};
use crate::guardian::GuardianConfig;
use crate::objects::{ObjectError, ReadThrottle};
use crate::runtime::RuntimeConfig;
use crate::stores::{OpenError, StoreKind, StoreOptions, Stores};

#[derive(Debug, Error)]
pub enum PlatformError {
    #[error(transparent)]
    Open(#[from] OpenError),
    #[error(transparent)]
    Object(#[from] ObjectError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error("config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub id: String,
    pub gpus: u32,
    /// Seconds; defaults to the learner restart delay.
    #[serde(default)]
    pub restart_delay: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BucketConfig {
    pub name: String,
    pub credential: String,
    /// Objects to seed the bucket with, key → UTF-8 content.
    #[serde(default)]
    pub objects: BTreeMap<String, String>,
    /// Simulated read latency in seconds per object.
    #[serde(default)]
    pub read_latency: f64,
    /// Simulated read bandwidth, bytes per second; 0 means unlimited.
    #[serde(default)]
    pub read_bandwidth: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TenantConfig {
    pub name: String,
    /// Bearer token identifying the tenant.
    pub token: String,
    #[serde(default)]
    pub buckets: Vec<BucketConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub api_restart_delay: f64,
    pub lcm_restart_delay: f64,
    pub store_restart_delay: f64,
    pub guardian_restart_delay: f64,
    /// API-to-LCM message latency.
    pub notify_delay: f64,
    /// Time from the LCM's claim write to the Guardian task's creation.
    pub launch_delay: f64,
    /// Reconciler period R; PENDING jobs older than R without a Guardian are
    /// re-sent to the LCM.
    pub reconcile_interval: f64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            api_restart_delay: 4.0,
            lcm_restart_delay: 5.0,
            store_restart_delay: 2.0,
            guardian_restart_delay: 1.5,
            notify_delay: 0.1,
            launch_delay: 0.5,
            reconcile_interval: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlatformConfig {
    pub nodes: Vec<NodeConfig>,
    pub tenants: Vec<TenantConfig>,
    pub services: ServiceConfig,
    pub guardian: GuardianConfig,
    pub runtime: RuntimeConfig,
    /// fsync store writes.
    pub sync: bool,
    /// KV revisions retained for watches; absent keeps all.
    pub kv_retain: Option<u64>,
}

impl Default for PlatformConfig {
    fn default() -> Self {
        PlatformConfig {
            nodes: vec![
                NodeConfig { id: "node-0".into(), gpus: 4, restart_delay: None },
                NodeConfig { id: "node-1".into(), gpus: 4, restart_delay: None },
            ],
            tenants: Vec::new(),
            services: ServiceConfig::default(),
            guardian: GuardianConfig::default(),
            runtime: RuntimeConfig::default(),
            sync: false,
            kv_retain: None,
        }
    }
}

impl PlatformConfig {
    pub fn from_toml(text: &str) -> Result<Self, PlatformError> {
        toml::from_str(text).map_err(|e| PlatformError::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum Timer {
    /// An API-to-LCM deploy message arriving.
    Deploy { job_id: String },
    /// The LCM creating a Guardian task after its claim write.
    Launch { job_id: String, lcm_epoch: u64 },
    Reconcile,
    ServiceRestart { service: ServiceKind, epoch: u64 },
    StoreRestart { store: StoreKind, epoch: u64 },
    /// Caller-owned timer, handed back from [`Platform::step`].
    Hook(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ServiceState {
    pub up: bool,
    pub epoch: u64,
}

/// What one [`Platform::step`] did.
#[derive(Debug, Clone, PartialEq)]
pub enum Stepped {
    Internal,
    Hook(u64),
}

pub struct Platform {
    pub cluster: Cluster,
    pub stores: Stores,
    pub(crate) config: PlatformConfig,
    pub(crate) guardian_config: Arc<GuardianConfig>,
    pub(crate) tokens: BTreeMap<String, String>,
    pub(crate) services: BTreeMap<ServiceKind, ServiceState>,
    store_epochs: BTreeMap<StoreKind, u64>,
    timers: BTreeMap<u64, Timer>,
    next_token: u64,
    pub(crate) request_seq: u64,
    /// Requests served per tenant (metering; logged, never enforced).
    pub(crate) metering: BTreeMap<String, u64>,
}

impl Platform {
    /// Opens stores under `dir`, seeds tenant buckets and starts the
    /// reconciler. A second open of the same directory recovers state.
    pub fn open(dir: impl AsRef<Path>, config: PlatformConfig, clock: Box<dyn Clock>) -> Result<Self, PlatformError> {
        if config.nodes.is_empty() {
            return Err(PlatformError::Config("at least one node required".into()));
        }
        let stores = Stores::open(dir, StoreOptions { sync: config.sync, kv_retain: config.kv_retain })?;
        let learner_delay = config.guardian.learner_restart_delay;
        let nodes = config
            .nodes
            .iter()
            .map(|n| NodeSpec {
                id: n.id.clone(),
                gpu_capacity: n.gpus,
                restart_delay: secs(n.restart_delay.unwrap_or(learner_delay)),
            })
            .collect();
        let cluster = Cluster::new(clock, nodes);
        let mut tokens = BTreeMap::new();
        for t in &config.tenants {
            tokens.insert(t.token.clone(), t.name.clone());
            for b in &t.buckets {
                match stores.objects.create_bucket(&b.name, &t.name, &b.credential) {
                    Ok(()) | Err(ObjectError::BucketExists(_)) => {}
                    Err(e) => return Err(e.into()),
                }
                for (key, body) in &b.objects {
                    stores.objects.put_object(&b.name, &b.credential, key, body.as_bytes())?;
                }
                if b.read_latency > 0.0 || b.read_bandwidth > 0 {
                    let throttle = ReadThrottle {
                        latency: secs(b.read_latency),
                        bytes_per_sec: (b.read_bandwidth > 0).then_some(b.read_bandwidth),
                    };
                    stores.objects.set_read_throttle(&b.name, throttle)?;
                }
            }
        }
        let services = [ServiceKind::Api, ServiceKind::Lcm]
            .into_iter()
            .map(|s| (s, ServiceState { up: true, epoch: 0 }))
            .collect();
        let store_epochs = StoreKind::ALL.into_iter().map(|s| (s, 0)).collect();
        let guardian_config = Arc::new(config.guardian.clone());
        let mut platform = Platform {
            cluster,
            stores,
            config,
            guardian_config,
            tokens,
            services,
            store_epochs,
            timers: BTreeMap::new(),
            next_token: 0,
            request_seq: 0,
            metering: BTreeMap::new(),
        };
        let first = platform.now() + secs(platform.config.services.reconcile_interval);
        platform.schedule(first, Timer::Reconcile);
        Ok(platform)
    }

    pub fn virtual_time(dir: impl AsRef<Path>, config: PlatformConfig) -> Result<Self, PlatformError> {
        Self::open(dir, config, Box::new(VirtualClock::new()))
    }

    pub fn wall_clock(dir: impl AsRef<Path>, config: PlatformConfig) -> Result<Self, PlatformError> {
        Self::open(dir, config, Box::new(WallClock))
    }

    pub fn config(&self) -> &PlatformConfig {
        &self.config
    }

    pub fn now(&self) -> SimTime {
        self.cluster.now()
    }

    pub(crate) fn schedule(&mut self, at: SimTime, timer: Timer) {
        self.next_token += 1;
        self.timers.insert(self.next_token, timer);
        self.cluster.schedule_external(at, self.next_token);
    }

    pub(crate) fn schedule_in(&mut self, delay: Duration, timer: Timer) {
        let at = self.now() + delay;
        self.schedule(at, timer);
    }

    /// Registers a caller timer; [`Platform::step`] returns
    /// `Stepped::Hook(token)` when it fires.
    pub fn schedule_hook(&mut self, at: SimTime, token: u64) {
        self.schedule(at, Timer::Hook(token));
    }

    pub fn next_event_time(&self) -> Option<SimTime> {
        self.cluster.next_event_time()
    }

    /// Processes the next event. `None` when nothing is scheduled.
    pub fn step(&mut self) -> Option<Stepped> {
        let processed = self.cluster.process_next(&self.stores)?;
        use crate::cluster::Processed;
        Some(match processed {
            Processed::Internal => Stepped::Internal,
            Processed::ExternalFault(f) => {
                self.apply_fault(f);
                Stepped::Internal
            }
            Processed::Timer(token) => match self.timers.remove(&token) {
                Some(Timer::Hook(h)) => Stepped::Hook(h),
                Some(timer) => {
                    self.fire(timer);
                    Stepped::Internal
                }
                None => Stepped::Internal,
            },
        })
    }

    /// Runs every event up to and including `to`, returning fired hooks.
    pub fn run_until(&mut self, to: SimTime) -> Vec<u64> {
        let mut hooks = Vec::new();
        while self.next_event_time().is_some_and(|t| t <= to) {
            if let Some(Stepped::Hook(h)) = self.step() {
                hooks.push(h);
            }
        }
        hooks
    }

    fn fire(&mut self, timer: Timer) {
        match timer {
            Timer::Deploy { job_id } => self.lcm_receive_deploy(&job_id),
            Timer::Launch { job_id, lcm_epoch } => self.lcm_launch(&job_id, lcm_epoch),
            Timer::Reconcile => {
                self.reconcile();
                let interval = secs(self.config.services.reconcile_interval);
                self.schedule_in(interval, Timer::Reconcile);
            }
            Timer::ServiceRestart { service, epoch } => {
                let state = self.services.get_mut(&service).expect("known service");
                if state.epoch == epoch && !state.up {
                    state.up = true;
                    self.cluster.record("restart", format!("service:{service}"), "");
                }
            }
            Timer::StoreRestart { store, epoch } => {
                if self.store_epochs[&store] != epoch {
                    return;
                }
                match self.stores.restart(store) {
                    Ok(()) => self.cluster.record("restart", format!("store:{store}"), ""),
                    Err(e) => {
                        self.cluster.record("restart-failed", format!("store:{store}"), e.to_string());
                        let delay = secs(self.config.services.store_restart_delay);
                        self.schedule_in(delay, Timer::StoreRestart { store, epoch });
                    }
                }
            }
            Timer::Hook(_) => unreachable!("handled by step"),
        }
    }

    /// Schedules a fault. Service and store faults are applied by the
    /// platform when they fire; everything else by the cluster.
    pub fn inject_fault(&mut self, fault: FaultEvent) -> Result<(), ClusterError> {
        self.cluster.inject_fault(fault)
    }

    fn apply_fault(&mut self, fault: FaultEvent) {
        let window = match fault.kind {
            FaultKind::Outage { window } => Some(secs(window)),
            FaultKind::Crash => None,
            FaultKind::Fail { .. } => {
                self.cluster.record("fault-noop", fault.target.to_string(), "fail applies to payloads");
                return;
            }
        };
        match fault.target {
            FaultTarget::Service(service) => self.crash_service(service, window),
            FaultTarget::Store(store) => self.crash_store(store, window),
            _ => unreachable!("cluster handles its own targets"),
        }
    }

    pub fn service_up(&self, service: ServiceKind) -> bool {
        self.services[&service].up
    }

    pub fn crash_service(&mut self, service: ServiceKind, down_for: Option<Duration>) {
        let target = format!("service:{service}");
        let state = self.services.get_mut(&service).expect("known service");
        if !state.up {
            self.cluster.record("fault-noop", target, "already down");
            return;
        }
        state.up = false;
        state.epoch += 1;
        let epoch = state.epoch;
        let delay = down_for.unwrap_or_else(|| {
            secs(match service {
                ServiceKind::Api => self.config.services.api_restart_delay,
                ServiceKind::Lcm => self.config.services.lcm_restart_delay,
            })
        });
        self.cluster.record("crash", target, format!("restart_in={}", fmt_secs(delay)));
        self.schedule_in(delay, Timer::ServiceRestart { service, epoch });
    }

    pub fn crash_store(&mut self, store: StoreKind, down_for: Option<Duration>) {
        let target = format!("store:{store}");
        if !self.stores.is_up(store) {
            self.cluster.record("fault-noop", target, "already down");
            return;
        }
        self.stores.crash(store);
        let epoch = self.store_epochs[&store] + 1;
        self.store_epochs.insert(store, epoch);
        let delay = down_for.unwrap_or(secs(self.config.services.store_restart_delay));
        self.cluster.record("crash", target, format!("restart_in={}", fmt_secs(delay)));
        self.schedule_in(delay, Timer::StoreRestart { store, epoch });
    }

    /// Resources a job currently holds in the cluster.
    pub fn inventory(&self, job_id: &str) -> std::collections::BTreeSet<String> {
        self.cluster.inventory(job_id)
    }
}
