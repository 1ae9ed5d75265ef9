use std::io::{BufRead, BufReader};
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use assert_cmd::cargo::CommandCargoExt;

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn cli() -> Command {
    let mut c = Command::cargo_bin("trainplane").unwrap();
    c.current_dir(root()).env_remove("TRAINPLANE_ADDR").env_remove("TRAINPLANE_TOKEN");
    c
}

struct Serve {
    child: Child,
    addr: String,
    _stdout: BufReader<std::process::ChildStdout>,
    _dir: tempfile::TempDir,
}

impl Drop for Serve {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn serve() -> Serve {
    let dir = tempfile::tempdir().unwrap();
    let mut child = cli()
        .args(["serve", "--config", "config/platform.toml", "--listen", "127.0.0.1:0", "--internal", "127.0.0.1:0"])
        .arg("--data-dir")
        .arg(dir.path().join("data"))
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    let mut reader = BufReader::new(child.stdout.take().unwrap());
    reader.read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("api ").expect("api address line").to_string();
    Serve { child, addr, _stdout: reader, _dir: dir }
}

fn client(s: &Serve, token: &str, args: &[&str]) -> std::process::Output {
    cli().arg("--addr").arg(&s.addr).args(["--token", token]).args(args).output().unwrap()
}

fn stdout(o: &std::process::Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn submit_status_logs_halt_over_http() {
    let s = serve();
    let out = client(&s, "tok-acme", &["--request-id", "cli-1", "submit", "config/mnist.json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let created: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let id = created["job_id"].as_str().unwrap().to_string();
    assert_eq!(created["request_id"], "cli-1");

    let status: serde_json::Value = serde_json::from_slice(&client(&s, "tok-acme", &["status", &id]).stdout).unwrap();
    let known = ["PENDING", "DEPLOYING", "DOWNLOADING", "PROCESSING"];
    assert!(known.contains(&status["status"].as_str().unwrap()), "{status}");

    let deadline = Instant::now() + Duration::from_secs(20);
    loop {
        let logs = stdout(&client(&s, "tok-acme", &["logs", &id]));
        if logs.contains("iter=1 ") {
            break;
        }
        assert!(Instant::now() < deadline, "no log lines: {logs}");
        std::thread::sleep(Duration::from_millis(200));
    }
    assert!(stdout(&client(&s, "tok-acme", &["list"])).contains(&id));

    let halted = client(&s, "tok-acme", &["halt", &id]);
    assert!(halted.status.success());
    assert!(stdout(&halted).contains("requested"));
}

#[test]
fn http_errors_carry_code_and_request_id() {
    let s = serve();
    let missing = client(&s, "tok-acme", &["--request-id", "probe-7", "logs", "job-unknown"]);
    assert!(!missing.status.success());
    let err = String::from_utf8_lossy(&missing.stderr);
    assert!(err.contains("HTTP 404") && err.contains("request_id=probe-7"), "{err}");

    let bad = client(&s, "tok-nobody", &["list"]);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("HTTP 401"));
}

#[test]
fn unreachable_server_is_reported() {
    let out = cli().args(["--addr", "http://127.0.0.1:1", "list"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("cannot reach"));
}

#[test]
fn scenario_reproduces_golden_report() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.toml");
    let out = cli().args(["scenario", "scenarios/recovery.toml", "--report"]).arg(&report).output().unwrap();
    assert!(out.status.success(), "{}", stdout(&out));
    assert!(stdout(&out).contains("PASS recovery[learner]"));
    let golden = std::fs::read_to_string(root().join("scenarios/recovery.report.toml")).unwrap();
    assert_eq!(std::fs::read_to_string(report).unwrap(), golden);
}

#[test]
fn failing_assertion_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("s.toml");
    let text = std::fs::read_to_string(root().join("scenarios/recovery.toml")).unwrap();
    // The job completes, so expecting FAILED must fail.
    let text = text + "\n[[assertions]]\ncheck = \"job_status\"\njob = 0\nstatus = \"FAILED\"\n";
    std::fs::write(&script, text).unwrap();
    let out = cli().arg("scenario").arg(&script).output().unwrap();
    assert!(!out.status.success());
    assert!(stdout(&out).contains("FAIL job_status[0]"));
}

#[test]
fn invalid_script_names_location() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("bad.toml");
    std::fs::write(&script, "seed = 1\nhorizon = \"soon\"\n").unwrap();
    let out = cli().arg("scenario").arg(&script).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("SCRIPT_INVALID at line 2"), "{err}");
}
