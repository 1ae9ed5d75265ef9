#![allow(dead_code)]

use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use trainplane::harness::{Assertion, JobEntry, ScenarioScript};

pub const ACME: &str = "tok-acme";
pub const GLOBEX: &str = "tok-globex";

pub const DATA: [(&str, &str); 2] = [("mnist/train-0", "0 1 2 3"), ("mnist/train-1", "4 5 6 7")];

const BASE: &str = r#"
[[platform.nodes]]
id = "node-0"
gpus = 4

[[platform.nodes]]
id = "node-1"
gpus = 4

[[platform.tenants]]
name = "acme"
token = "tok-acme"

[[platform.tenants.buckets]]
name = "acme-data"
credential = "acme-data-key"
objects = { "mnist/train-0" = "0 1 2 3", "mnist/train-1" = "4 5 6 7" }

[[platform.tenants.buckets]]
name = "acme-results"
credential = "acme-results-key"

[[platform.tenants]]
name = "globex"
token = "tok-globex"

[[platform.tenants.buckets]]
name = "globex-data"
credential = "globex-data-key"
objects = { "mnist/train-0" = "0 1 2 3", "mnist/train-1" = "4 5 6 7" }

[[platform.tenants.buckets]]
name = "globex-results"
credential = "globex-results-key"
"#;

pub fn script(name: &str, seed: u64) -> ScenarioScript {
    let mut s = ScenarioScript::from_toml(BASE, None).expect("base script");
    s.name = name.into();
    s.seed = seed;
    s
}

/// A manifest for `tenant` ("acme" or "globex") reading the seeded data set.
pub fn manifest(tenant: &str, learners: u32, iterations: u64, interval: u64) -> Value {
    json!({
        "manifest_version": 1,
        "name": "mnist",
        "framework": "tf",
        "framework_version": "1.5",
        "learners": learners,
        "gpus_per_learner": 1,
        "data_store": {"bucket": format!("{tenant}-data"), "prefix": "mnist", "credential": format!("{tenant}-data-key")},
        "result_store": {"bucket": format!("{tenant}-results"), "prefix": "run", "credential": format!("{tenant}-results-key")},
        "checkpoint_interval": interval,
        "total_iterations": iterations,
        "learning_rate": 0.1,
        "extra_hyperparameters": {}
    })
}

pub fn add_job(s: &mut ScenarioScript, at: f64, token: &str, request_id: &str, manifest: Value) -> usize {
    s.jobs.push(JobEntry {
        at,
        token: token.into(),
        request_id: Some(request_id.into()),
        manifest_text: manifest.to_string(),
        manifest: Some(manifest),
        manifest_file: None,
    });
    s.jobs.len() - 1
}

pub fn assert_all(s: &mut ScenarioScript, checks: impl IntoIterator<Item = Assertion>) {
    s.assertions.extend(checks);
}

/// Expected learner digests, computed straight from the definition: the
/// data digest hashes `/data/<name>` paths and contents (each length
/// prefixed, little endian) in path order, and iteration `k` hashes the
/// previous digest, `k` and the data digest.
pub fn digest_chain(iterations: u64) -> Vec<[u8; 32]> {
    let mut files: Vec<(String, &str)> =
        DATA.iter().map(|(k, v)| (format!("/data/{}", k.strip_prefix("mnist/").unwrap()), *v)).collect();
    files.sort();
    let mut h = Sha256::new();
    for (name, body) in &files {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((body.len() as u64).to_le_bytes());
        h.update(body.as_bytes());
    }
    let data: [u8; 32] = h.finalize().into();
    let mut out = vec![[0u8; 32]];
    for k in 1..=iterations {
        let mut h = Sha256::new();
        h.update(out[(k - 1) as usize]);
        h.update(k.to_le_bytes());
        h.update(data);
        out.push(h.finalize().into());
    }
    out
}
