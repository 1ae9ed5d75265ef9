//! `trainplane`: thin client over the job API, plus `serve` (the whole
//! platform in one process) and `scenario` (seeded fault runs).

use std::io::Write as _;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use reqwest::blocking::{Client, RequestBuilder};
use serde_json::Value;
use trainplane::api::http::{Server, REQUEST_ID_HEADER};
use trainplane::harness::{run_scenario, Mode, ScenarioScript};
use trainplane::platform::{Platform, PlatformConfig};

#[derive(Parser)]
#[command(name = "trainplane", version, about = "Run and manage training jobs on a simulated cluster")]
struct Cli {
    /// API base URL.
    #[arg(long, env = "TRAINPLANE_ADDR", default_value = "http://127.0.0.1:8080", global = true)]
    addr: String,
    /// Tenant bearer token.
    #[arg(long, env = "TRAINPLANE_TOKEN", global = true)]
    token: Option<String>,
    /// Request id sent with the call; the server generates one if absent.
    #[arg(long, global = true)]
    request_id: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Submit the job described by a manifest file.
    Submit { manifest: PathBuf },
    /// Show a job's status and history.
    Status { job_id: String },
    /// Print a job's log lines.
    Logs {
        job_id: String,
        /// First line to print (0-based).
        #[arg(long)]
        from: Option<usize>,
        /// Stop before this line.
        #[arg(long)]
        to: Option<usize>,
    },
    /// Ask a job to stop.
    Halt { job_id: String },
    /// List the tenant's jobs.
    List,
    /// Run a scenario script and report.
    Scenario {
        script: PathBuf,
        /// Platform config overriding the script's `platform` table.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        mode: Option<Mode>,
        /// Write the structured report here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Store directory; a temporary one by default.
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Boot the platform and serve the API until interrupted.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: SocketAddr,
        #[arg(long, default_value = "127.0.0.1:8081")]
        internal: SocketAddr,
        #[arg(long, default_value = "trainplane-data")]
        data_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, String> {
    let api = ApiClient { base: cli.addr.trim_end_matches('/').to_string(), token: cli.token, request_id: cli.request_id };
    match cli.command {
        Command::Submit { manifest } => {
            let body = std::fs::read_to_string(&manifest).map_err(|e| format!("{}: {e}", manifest.display()))?;
            print_json(&api.send(api.request(reqwest::Method::POST, "/v1/jobs").body(body))?);
        }
        Command::Status { job_id } => print_json(&api.send(api.request(reqwest::Method::GET, &format!("/v1/jobs/{job_id}")))?),
        Command::Logs { job_id, from, to } => {
            let mut req = api.request(reqwest::Method::GET, &format!("/v1/jobs/{job_id}/logs"));
            if let Some(f) = from {
                req = req.query(&[("from", f)]);
            }
            if let Some(t) = to {
                req = req.query(&[("to", t)]);
            }
            let body = api.send(req)?;
            let mut out = std::io::stdout().lock();
            for line in body["lines"].as_array().into_iter().flatten() {
                let _ = writeln!(out, "{}", line.as_str().unwrap_or_default());
            }
        }
        Command::Halt { job_id } => print_json(&api.send(api.request(reqwest::Method::DELETE, &format!("/v1/jobs/{job_id}")))?),
        Command::List => print_json(&api.send(api.request(reqwest::Method::GET, "/v1/jobs"))?),
        Command::Scenario { script, config, seed, mode, report, data_dir } => {
            return scenario(script, config, seed, mode, report, data_dir);
        }
        Command::Serve { config, listen, internal, data_dir } => {
            let text = std::fs::read_to_string(&config).map_err(|e| format!("{}: {e}", config.display()))?;
            let config = PlatformConfig::from_toml(&text).map_err(|e| e.to_string())?;
            let platform = Platform::wall_clock(&data_dir, config).map_err(|e| e.to_string())?;
            let server = Server::start(platform, listen, internal).map_err(|e| format!("bind: {e}"))?;
            let mut out = std::io::stdout().lock();
            let _ = writeln!(out, "api http://{}", server.api_addr);
            let _ = writeln!(out, "internal http://{}", server.internal_addr);
            let _ = out.flush();
            drop(out);
            server.wait();
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn scenario(
    path: PathBuf,
    config: Option<PathBuf>,
    seed: Option<u64>,
    mode: Option<Mode>,
    report: Option<PathBuf>,
    data_dir: Option<PathBuf>,
) -> Result<ExitCode, String> {
    let mut script = ScenarioScript::load(&path).map_err(|e| e.to_string())?;
    if let Some(c) = config {
        let text = std::fs::read_to_string(&c).map_err(|e| format!("{}: {e}", c.display()))?;
        script.platform = PlatformConfig::from_toml(&text).map_err(|e| e.to_string())?;
        script.validate().map_err(|e| e.to_string())?;
    }
    if let Some(s) = seed {
        script.seed = s;
    }
    if let Some(m) = mode {
        script.mode = m;
    }
    let tmp;
    let dir = match data_dir {
        Some(d) => d,
        None => {
            tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
            tmp.path().to_path_buf()
        }
    };
    let run = run_scenario(&script, &dir).map_err(|e| e.to_string())?;
    let _ = write!(std::io::stdout().lock(), "{}", run.report.to_table());
    if let Some(p) = report {
        std::fs::write(&p, run.report.to_text()).map_err(|e| format!("{}: {e}", p.display()))?;
    }
    Ok(if run.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

struct ApiClient {
    base: String,
    token: Option<String>,
    request_id: Option<String>,
}

impl ApiClient {
    fn request(&self, method: reqwest::Method, path: &str) -> RequestBuilder {
        let mut req = Client::new().request(method, format!("{}{path}", self.base));
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        if let Some(id) = &self.request_id {
            req = req.header(REQUEST_ID_HEADER, id);
        }
        req
    }

    /// Sends and decodes the JSON body; non-2xx answers become errors
    /// carrying the status, code and request id.
    fn send(&self, req: RequestBuilder) -> Result<Value, String> {
        let resp = req.send().map_err(|e| format!("cannot reach {}: {e}", self.base))?;
        let status = resp.status();
        let header_rid = resp.headers().get(REQUEST_ID_HEADER).and_then(|v| v.to_str().ok()).map(str::to_string);
        let body: Value = resp.json().unwrap_or(Value::Null);
        if status.is_success() {
            return Ok(body);
        }
        let field = |k: &str| body.get(k).and_then(Value::as_str).filter(|s| !s.is_empty()).map(str::to_string);
        let rid = field("request_id").or(header_rid).unwrap_or_else(|| "-".into());
        Err(format!(
            "HTTP {} {}: {} (request_id={rid})",
            status.as_u16(),
            field("code").unwrap_or_else(|| "UNKNOWN".into()),
            field("message").unwrap_or_default()
        ))
    }
}

fn print_json(v: &Value) {
    let _ = writeln!(std::io::stdout().lock(), "{}", serde_json::to_string_pretty(v).unwrap_or_default());
}
