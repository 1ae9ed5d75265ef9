use std::sync::atomic::{AtomicU32, Ordering};

use tempfile::TempDir;

use super::*;
use crate::clock::VirtualClock;
use crate::stores::StoreOptions;

fn setup(nodes: &[(u32, f64)]) -> (TempDir, Stores, Cluster) {
    let dir = TempDir::new().unwrap();
    let stores = Stores::open(dir.path(), StoreOptions::default()).unwrap();
    let specs = nodes
        .iter()
        .enumerate()
        .map(|(i, &(gpus, delay))| NodeSpec {
            id: format!("n{i}"),
            gpu_capacity: gpus,
            restart_delay: secs(delay),
        })
        .collect();
    let cluster = Cluster::new(Box::new(VirtualClock::default()), specs);
    (dir, stores, cluster)
}

/// Counts steps through a shared counter and exits after `steps` steps.
struct Counting {
    left: u32,
    steps: Arc<AtomicU32>,
}

impl Payload for Counting {
    fn step(&mut self, env: &mut Env<'_>) -> Step {
        if let Some(code) = env.take_injected_failure() {
            return Step::Exit(code);
        }
        self.steps.fetch_add(1, Ordering::SeqCst);
        if self.left == 0 {
            return Step::Exit(0);
        }
        self.left -= 1;
        Step::After(secs(1.0))
    }
}

fn counting(steps: u32) -> (PayloadFactory, Arc<AtomicU32>) {
    let counter = Arc::new(AtomicU32::new(0));
    let c = counter.clone();
    (factory(move || Counting { left: steps, steps: c.clone() }), counter)
}

fn task(id: &str, payload: PayloadFactory) -> TaskSpec {
    TaskSpec {
        task_id: id.into(),
        payload,
        restart_delay: secs(1.5),
        max_system_restarts: None,
        gpus: 0,
        owner: "j1".into(),
    }
}

fn run_until(cluster: &mut Cluster, stores: &Stores, t: f64) {
    cluster.advance_clock(SimTime::from_secs_f64(t), stores);
}

#[test]
fn immediate_task_completes_once() {
    let (_d, stores, mut cluster) = setup(&[(4, 15.0)]);
    let (f, _) = counting(0);
    cluster.create_task(task("t", f)).unwrap();
    run_until(&mut cluster, &stores, 100.0);
    let st = cluster.task_status("t").unwrap();
    assert_eq!((st.state, st.completions, st.executions), (TaskState::Completed, 1, 1));
}

#[test]
fn crashed_task_reexecutes_and_completes_once() {
    let (_d, stores, mut cluster) = setup(&[(4, 15.0)]);
    let (f, _) = counting(10);
    cluster.create_task(task("t", f)).unwrap();
    for at in [2.0, 5.0, 9.0] {
        let target = FaultTarget::Task("t".into());
        cluster.inject_fault(FaultEvent::crash(SimTime::from_secs_f64(at), target)).unwrap();
    }
    run_until(&mut cluster, &stores, 200.0);
    let st = cluster.task_status("t").unwrap();
    assert_eq!(st.completions, 1);
    assert_eq!(st.executions, 4);
    assert_eq!(st.restarts, 3);
}

#[test]
fn crash_restarts_after_delay() {
    let (_d, stores, mut cluster) = setup(&[(4, 15.0)]);
    let (f, _) = counting(100);
    cluster.create_task(task("t", f)).unwrap();
    cluster
        .inject_fault(FaultEvent::crash(SimTime::from_secs_f64(3.0), FaultTarget::Task("t".into())))
        .unwrap();
    run_until(&mut cluster, &stores, 10.0);
    let starts: Vec<SimTime> = cluster.log().iter().filter(|e| e.kind == "start").map(|e| e.t).collect();
    assert_eq!(starts, vec![SimTime::from_millis(0), SimTime::from_millis(4500)]);
}

#[test]
fn failed_exit_is_retried_until_limit() {
    let (_d, stores, mut cluster) = setup(&[(4, 15.0)]);
    let (f, _) = counting(100);
    let mut spec = task("t", f);
    spec.max_system_restarts = Some(1);
    cluster.create_task(spec).unwrap();
    for at in [1.0, 10.0] {
        let fault = FaultEvent {
            at: SimTime::from_secs_f64(at),
            target: FaultTarget::Task("t".into()),
            kind: FaultKind::Fail { exit_code: 3 },
        };
        cluster.inject_fault(fault).unwrap();
    }
    run_until(&mut cluster, &stores, 50.0);
    let st = cluster.task_status("t").unwrap();
    assert_eq!((st.state, st.executions, st.completions), (TaskState::Failed, 2, 0));
}

#[test]
fn first_fit_leaves_second_replica_pending() {
    let (_d, stores, mut cluster) = setup(&[(4, 15.0)]);
    let (f, _) = counting(5);
    cluster
        .create_replica_set(ReplicaSetSpec {
            set_id: "rs".into(),
            replicas: 2,
            gpus_per_replica: 3,
            payload: f,
            restart_delay: secs(15.0),
            volumes: vec![],
            network_policy: None,
            owner: "j1".into(),
        })
        .unwrap_err();
    // 2×3 exceeds the 4-GPU cluster outright; with two nodes it fits.
    let (_d, stores2, mut cluster) = setup(&[(4, 15.0), (4, 15.0)]);
    drop(stores);
    let (f, _) = counting(5);
    let (g, _) = counting(5);
    cluster
        .create_replica_set(ReplicaSetSpec {
            set_id: "big".into(),
            replicas: 1,
            gpus_per_replica: 3,
            payload: g,
            restart_delay: secs(15.0),
            volumes: vec![],
            network_policy: None,
            owner: "j0".into(),
        })
        .unwrap();
    cluster
        .create_replica_set(ReplicaSetSpec {
            set_id: "rs".into(),
            replicas: 2,
            gpus_per_replica: 3,
            payload: f,
            restart_delay: secs(15.0),
            volumes: vec![],
            network_policy: None,
            owner: "j1".into(),
        })
        .unwrap();
    assert_eq!(cluster.pod_node("big-0"), Some("n0"));
    assert_eq!(cluster.pod_node("rs-0"), Some("n1"));
    assert_eq!(cluster.pod_node("rs-1"), None);
    // Once the first set's replica exits, rs-1 takes its place.
    run_until(&mut cluster, &stores2, 6.0);
    assert_eq!(cluster.pod_node("rs-1"), Some("n0"));
    assert!(cluster.violations().is_empty());
}

#[test]
fn single_node_first_fit_pending_until_capacity() {
    let (_d, stores, mut cluster) = setup(&[(4, 15.0), (2, 15.0)]);
    let (f, _) = counting(5);
    cluster
        .create_replica_set(ReplicaSetSpec {
            set_id: "rs".into(),
            replicas: 2,
            gpus_per_replica: 3,
            payload: f,
            restart_delay: secs(15.0),
            volumes: vec![],
            network_policy: None,
            owner: "j1".into(),
        })
        .unwrap_err();
    let (f, _) = counting(5);
    cluster
        .create_replica_set(ReplicaSetSpec {
            set_id: "rs".into(),
            replicas: 2,
            gpus_per_replica: 2,
            payload: f,
            restart_delay: secs(15.0),
            volumes: vec![],
            network_policy: None,
            owner: "j1".into(),
        })
        .unwrap();
    assert_eq!(cluster.pod_node("rs-0"), Some("n0"));
    assert_eq!(cluster.pod_node("rs-1"), Some("n0"));
    run_until(&mut cluster, &stores, 100.0);
    assert_eq!(cluster.replica_set_status("rs").unwrap().exited, 2);
}

#[test]
fn zero_gpu_replica_is_placed() {
    let (_d, _stores, mut cluster) = setup(&[(0, 15.0)]);
    let (f, _) = counting(5);
    cluster
        .create_replica_set(ReplicaSetSpec {
            set_id: "rs".into(),
            replicas: 1,
            gpus_per_replica: 0,
            payload: f,
            restart_delay: secs(15.0),
            volumes: vec![],
            network_policy: None,
            owner: "j1".into(),
        })
        .unwrap();
    assert_eq!(cluster.pod_node("rs-0"), Some("n0"));
}

struct VolumeWriter {
    volume: String,
}

impl Payload for VolumeWriter {
    fn step(&mut self, env: &mut Env<'_>) -> Step {
        let name = env.pod_name().to_string();
        env.vol_append(&self.volume, &format!("/seen/{name}"), b"x").unwrap();
        Step::After(secs(100.0))
    }
}

#[test]
fn replica_restarts_with_same_identity_and_volume() {
    let (_d, stores, mut cluster) = setup(&[(4, 15.0)]);
    cluster.create_volume("vol", "j1").unwrap();
    cluster
        .create_replica_set(ReplicaSetSpec {
            set_id: "rs".into(),
            replicas: 2,
            gpus_per_replica: 1,
            payload: factory(|| VolumeWriter { volume: "vol".into() }),
            restart_delay: secs(15.0),
            volumes: vec!["vol".into()],
            network_policy: None,
            owner: "j1".into(),
        })
        .unwrap();
    cluster
        .inject_fault(FaultEvent::crash(SimTime::from_secs_f64(5.0), FaultTarget::Pod("rs-1".into())))
        .unwrap();
    run_until(&mut cluster, &stores, 30.0);
    let files = &cluster.volume("vol").unwrap().files;
    assert_eq!(files["/seen/rs-0"], b"x");
    assert_eq!(files["/seen/rs-1"], b"xx");
    assert_eq!(cluster.pod_restarts("rs-1"), Some(1));
}

#[test]
fn node_crash_and_recovery_times() {
    let (_d, stores, mut cluster) = setup(&[(4, 15.0)]);
    let (f, _) = counting(100);
    cluster.create_task(task("t", f)).unwrap();
    cluster
        .inject_fault(FaultEvent::crash(SimTime::from_secs_f64(10.0), FaultTarget::Node("n0".into())))
        .unwrap();
    cluster
        .inject_fault(FaultEvent::crash(SimTime::from_secs_f64(12.0), FaultTarget::Node("n0".into())))
        .unwrap();
    run_until(&mut cluster, &stores, 24.9);
    assert_eq!(cluster.node_state("n0"), Some(NodeState::Crashed));
    run_until(&mut cluster, &stores, 25.0);
    assert_eq!(cluster.node_state("n0"), Some(NodeState::Up));
    let noop = cluster.log().iter().find(|e| e.kind == "fault-noop").unwrap();
    assert_eq!(noop.t, SimTime::from_secs_f64(12.0));
    assert!(cluster.pod_node("t").is_some());
}

#[test]
fn unknown_node_is_rejected() {
    let (_d, _s, mut cluster) = setup(&[(4, 15.0)]);
    let err = cluster
        .inject_fault(FaultEvent::crash(SimTime::ZERO, FaultTarget::Node("n9".into())))
        .unwrap_err();
    assert!(matches!(err, ClusterError::UnknownTarget(_)));
}

fn traced_run() -> String {
    let (_d, stores, mut cluster) = setup(&[(2, 15.0), (2, 15.0)]);
    cluster.create_volume("vol", "j1").unwrap();
    for i in 0..3 {
        let (f, _) = counting(7 + i);
        cluster.create_task(task(&format!("t{i}"), f)).unwrap();
    }
    cluster
        .create_replica_set(ReplicaSetSpec {
            set_id: "rs".into(),
            replicas: 3,
            gpus_per_replica: 1,
            payload: factory(|| VolumeWriter { volume: "vol".into() }),
            restart_delay: secs(15.0),
            volumes: vec!["vol".into()],
            network_policy: None,
            owner: "j1".into(),
        })
        .unwrap();
    cluster
        .inject_fault(FaultEvent::crash(SimTime::from_secs_f64(3.0), FaultTarget::Node("n0".into())))
        .unwrap();
    cluster
        .inject_fault(FaultEvent::crash(SimTime::from_secs_f64(4.0), FaultTarget::Task("t2".into())))
        .unwrap();
    run_until(&mut cluster, &stores, 60.0);
    cluster.log_text()
}

#[test]
fn identical_runs_produce_identical_logs() {
    let a = traced_run();
    assert!(a.contains("kind=node-crash target=node:n0"));
    assert_eq!(a, traced_run());
}

#[test]
fn policy_gates_container_start_and_access() {
    struct Prober;
    impl Payload for Prober {
        fn step(&mut self, env: &mut Env<'_>) -> Step {
            let own = env.kv_put("/jobs/j1/x", "1").is_ok();
            let other = env.kv_put("/jobs/j2/x", "1").is_ok();
            let meta = env.metadata().is_ok();
            env.log_event("probe", format!("own={own} other={other} meta={meta}"));
            Step::Exit(0)
        }
    }
    let (_d, stores, mut cluster) = setup(&[(4, 15.0)]);
    cluster.create_volume("vol", "j1").unwrap();
    cluster
        .create_replica_set(ReplicaSetSpec {
            set_id: "rs".into(),
            replicas: 1,
            gpus_per_replica: 1,
            payload: factory(|| Prober),
            restart_delay: secs(15.0),
            volumes: vec!["vol".into()],
            network_policy: Some("np".into()),
            owner: "j1".into(),
        })
        .unwrap();
    run_until(&mut cluster, &stores, 5.0);
    assert!(!cluster.log().iter().any(|e| e.kind == "start"));
    cluster
        .apply_policy(NetworkPolicy { id: "np".into(), owner: "j1".into(), tenant: "a".into(), volume: "vol".into() })
        .unwrap();
    run_until(&mut cluster, &stores, 6.0);
    let probe = cluster.log().iter().find(|e| e.kind == "probe").unwrap();
    assert_eq!(probe.detail, "own=true other=false meta=false");
}

#[test]
fn destroy_and_inventory() {
    let (_d, _s, mut cluster) = setup(&[(4, 15.0)]);
    cluster.create_volume("vol-j1", "j1").unwrap();
    let (f, _) = counting(5);
    cluster
        .create_helper_group(HelperGroupSpec {
            group_id: "helpers-j1".into(),
            containers: vec![("a".into(), f.clone()), ("b".into(), f)],
            restart_delay: secs(3.5),
            volumes: vec!["vol-j1".into()],
            owner: "j1".into(),
        })
        .unwrap();
    let inv: Vec<String> = cluster.inventory("j1").into_iter().collect();
    assert_eq!(inv, ["helper-group:helpers-j1", "volume:vol-j1"]);
    assert!(cluster.destroy_unit("helpers-j1"));
    assert!(!cluster.destroy_unit("helpers-j1"));
    assert!(cluster.destroy_volume("vol-j1"));
    assert!(cluster.inventory("j1").is_empty());
}
