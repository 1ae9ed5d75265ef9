use std::collections::BTreeMap;

use tempfile::TempDir;
use trainplane::api::{ApiRequest, Method};
use trainplane::clock::SimTime;
use trainplane::job_model::JobStatus;
use trainplane::platform::{BucketConfig, Platform, PlatformConfig, TenantConfig};

fn config() -> PlatformConfig {
    let bucket = |name: &str, objects: &[(&str, &str)]| BucketConfig {
        name: name.into(),
        credential: format!("{name}-cred"),
        objects: objects.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect::<BTreeMap<_, _>>(),
        read_latency: 0.0,
        read_bandwidth: 0,
    };
    PlatformConfig {
        tenants: vec![
            TenantConfig {
                name: "acme".into(),
                token: "tok-acme".into(),
                buckets: vec![bucket("acme-data", &[("mnist/a", "1"), ("mnist/b", "2")]), bucket("acme-results", &[])],
            },
            TenantConfig { name: "globex".into(), token: "tok-globex".into(), buckets: vec![bucket("globex-data", &[])] },
        ],
        ..PlatformConfig::default()
    }
}

fn manifest(learners: u32, iterations: u64, interval: u64) -> String {
    serde_json::json!({
        "manifest_version": 1,
        "name": "mnist",
        "framework": "tf",
        "framework_version": "1.5",
        "learners": learners,
        "gpus_per_learner": 1,
        "data_store": {"bucket": "acme-data", "prefix": "mnist", "credential": "acme-data-cred"},
        "result_store": {"bucket": "acme-results", "prefix": "run", "credential": "acme-results-cred"},
        "checkpoint_interval": interval,
        "total_iterations": iterations,
        "learning_rate": 0.1,
        "extra_hyperparameters": {}
    })
    .to_string()
}

#[test]
fn job_runs_to_completion() {
    let dir = TempDir::new().unwrap();
    let mut p = Platform::virtual_time(dir.path(), config()).unwrap();
    let resp = p.handle(
        &ApiRequest::new(Method::Post, "/v1/jobs").token("tok-acme").request_id("r1").body(manifest(2, 10, 3)),
    );
    assert_eq!(resp.status, 201, "{:?}", resp.body);
    let job_id = resp.body["job_id"].as_str().unwrap().to_string();
    p.run_until(SimTime::from_secs_f64(120.0));
    let job = p.stores.metadata.get_job(&job_id).unwrap();
    let statuses: Vec<JobStatus> = job.history.iter().map(|r| r.status).collect();
    assert_eq!(
        statuses,
        [
            JobStatus::Pending,
            JobStatus::Deploying,
            JobStatus::Downloading,
            JobStatus::Processing,
            JobStatus::Storing,
            JobStatus::Completed
        ],
        "{}",
        p.cluster.log_text()
    );
    if std::env::var("DUMP").is_ok() { println!("{}", p.cluster.log_text()); }
    assert!(p.inventory(&job_id).is_empty());
    let logs = p.handle(&ApiRequest::new(Method::Get, format!("/v1/jobs/{job_id}/logs")).token("tok-acme"));
    assert_eq!(logs.body["total"], 20);
}
