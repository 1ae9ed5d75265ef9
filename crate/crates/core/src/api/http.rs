//! HTTP/JSON transport for the API, plus the LCM's internal endpoints on a
//! separate port. The platform runs on its own thread in wall-clock mode;
//! handlers hand requests to it over a channel.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::mpsc;
use std::thread::JoinHandle;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{HeaderMap, Method as HttpMethod, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;
use tokio::sync::oneshot;

use super::{ApiRequest, ApiResponse, Method};
use crate::lcm::{DeployOutcome, LcmError};
use crate::platform::Platform;

pub const REQUEST_ID_HEADER: &str = "x-request-id";

enum Command {
    Api(ApiRequest, oneshot::Sender<ApiResponse>),
    Deploy(String, oneshot::Sender<Result<DeployOutcome, LcmError>>),
    Halt(String, oneshot::Sender<Result<(), LcmError>>),
    Inspect(Box<dyn FnOnce(&Platform) + Send>),
    Shutdown,
}

type Tx = mpsc::Sender<Command>;

/// Runs the platform's event loop against the wall clock, serving commands
/// between events.
fn drive(mut platform: Platform, rx: mpsc::Receiver<Command>) {
    loop {
        while platform.next_event_time().is_some_and(|t| t <= platform.now()) {
            platform.step();
        }
        let wait = platform
            .next_event_time()
            .map(|t| t.since(platform.now()))
            .unwrap_or(Duration::from_millis(50))
            .min(Duration::from_millis(50));
        match rx.recv_timeout(wait) {
            Ok(Command::Api(req, reply)) => {
                let _ = reply.send(platform.handle(&req));
            }
            Ok(Command::Deploy(job, reply)) => {
                let _ = reply.send(platform.lcm_deploy(&job));
            }
            Ok(Command::Halt(job, reply)) => {
                let _ = reply.send(platform.lcm_halt(&job));
            }
            Ok(Command::Inspect(f)) => f(&platform),
            Ok(Command::Shutdown) | Err(mpsc::RecvTimeoutError::Disconnected) => return,
            Err(mpsc::RecvTimeoutError::Timeout) => {}
        }
    }
}

fn to_http(resp: ApiResponse) -> Response {
    let status = StatusCode::from_u16(resp.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    (status, Json(resp.body)).into_response()
}

fn unavailable() -> Response {
    let body = json!({"code": "SERVICE_UNAVAILABLE", "message": "platform stopped", "request_id": ""});
    (StatusCode::SERVICE_UNAVAILABLE, Json(body)).into_response()
}

async fn api_any(State(tx): State<Tx>, method: HttpMethod, uri: Uri, headers: HeaderMap, body: Bytes) -> Response {
    let method = match method {
        HttpMethod::GET => Method::Get,
        HttpMethod::POST => Method::Post,
        HttpMethod::DELETE => Method::Delete,
        _ => {
            let body = json!({"code": "METHOD_NOT_ALLOWED", "message": method.to_string(), "request_id": ""});
            return (StatusCode::METHOD_NOT_ALLOWED, Json(body)).into_response();
        }
    };
    let query: BTreeMap<String, String> = uri
        .query()
        .unwrap_or("")
        .split('&')
        .filter_map(|kv| kv.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    let header = |name: &str| headers.get(name).and_then(|v| v.to_str().ok()).map(str::to_string);
    let token = header("authorization").map(|v| v.strip_prefix("Bearer ").unwrap_or(&v).to_string());
    let req = ApiRequest {
        method,
        path: uri.path().to_string(),
        query,
        token,
        request_id: header(REQUEST_ID_HEADER),
        body: String::from_utf8_lossy(&body).into_owned(),
    };
    let (reply, rx) = oneshot::channel();
    if tx.send(Command::Api(req, reply)).is_err() {
        return unavailable();
    }
    match rx.await {
        Ok(resp) => to_http(resp),
        Err(_) => unavailable(),
    }
}

fn lcm_reply<T: serde::Serialize>(result: Result<T, LcmError>, ok: StatusCode) -> Response {
    match result {
        Ok(v) => (ok, Json(json!({"result": v}))).into_response(),
        Err(e) => {
            let status = match e {
                LcmError::NotFound(_) => StatusCode::NOT_FOUND,
                LcmError::Terminal(_) => StatusCode::CONFLICT,
                _ => StatusCode::SERVICE_UNAVAILABLE,
            };
            let code = e.to_string().split(':').next().unwrap_or("ERROR").to_string();
            (status, Json(json!({"code": code, "message": e.to_string(), "request_id": ""}))).into_response()
        }
    }
}

async fn lcm_deploy(State(tx): State<Tx>, Path(job): Path<String>) -> Response {
    let (reply, rx) = oneshot::channel();
    if tx.send(Command::Deploy(job, reply)).is_err() {
        return unavailable();
    }
    match rx.await {
        Ok(r) => lcm_reply(r.map(|o| format!("{o:?}")), StatusCode::ACCEPTED),
        Err(_) => unavailable(),
    }
}

async fn lcm_halt(State(tx): State<Tx>, Path(job): Path<String>) -> Response {
    let (reply, rx) = oneshot::channel();
    if tx.send(Command::Halt(job, reply)).is_err() {
        return unavailable();
    }
    match rx.await {
        Ok(r) => lcm_reply(r.map(|_| "halt requested"), StatusCode::ACCEPTED),
        Err(_) => unavailable(),
    }
}

async fn lcm_health(State(tx): State<Tx>) -> Response {
    let (reply, rx) = oneshot::channel();
    let probe = Box::new(move |p: &Platform| {
        let _ = reply.send(p.lcm_ping());
    });
    if tx.send(Command::Inspect(probe)).is_err() {
        return unavailable();
    }
    match rx.await {
        Ok(true) => (StatusCode::OK, Json(json!({"status": "ok"}))).into_response(),
        _ => unavailable(),
    }
}

fn api_router(tx: mpsc::Sender<Command>) -> Router {
    Router::new().fallback(api_any).with_state(tx)
}

fn internal_router(tx: mpsc::Sender<Command>) -> Router {
    Router::new()
        .route("/internal/deploy/{job_id}", post(lcm_deploy))
        .route("/internal/halt/{job_id}", post(lcm_halt))
        .route("/internal/health", get(lcm_health))
        .with_state(tx)
}

/// A running server: the platform thread plus the HTTP listeners.
pub struct Server {
    pub api_addr: SocketAddr,
    pub internal_addr: SocketAddr,
    tx: Tx,
    runtime: Option<tokio::runtime::Runtime>,
    driver: Option<JoinHandle<()>>,
}

impl Server {
    /// Binds both listeners (port 0 picks a free port) and starts serving.
    pub fn start(platform: Platform, api_addr: SocketAddr, internal_addr: SocketAddr) -> std::io::Result<Server> {
        let (tx, rx) = mpsc::channel();
        let driver = std::thread::Builder::new()
            .name("platform".into())
            .spawn(move || drive(platform, rx))?;
        let runtime = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
        let (api, internal) = runtime.block_on(async {
            let api = tokio::net::TcpListener::bind(api_addr).await?;
            let internal = tokio::net::TcpListener::bind(internal_addr).await?;
            Ok::<_, std::io::Error>((api, internal))
        })?;
        let api_addr = api.local_addr()?;
        let internal_addr = internal.local_addr()?;
        let (a, i) = (api_router(tx.clone()), internal_router(tx.clone()));
        runtime.spawn(async move {
            if let Err(e) = axum::serve(api, a).await {
                tracing::error!("api listener stopped: {e}");
            }
        });
        runtime.spawn(async move {
            if let Err(e) = axum::serve(internal, i).await {
                tracing::error!("internal listener stopped: {e}");
            }
        });
        tracing::info!(%api_addr, %internal_addr, "serving");
        Ok(Server { api_addr, internal_addr, tx, runtime: Some(runtime), driver: Some(driver) })
    }

    /// Runs `f` on the platform thread and returns its result.
    pub fn inspect<T: Send + 'static>(&self, f: impl FnOnce(&Platform) -> T + Send + 'static) -> Option<T> {
        let (reply, rx) = std::sync::mpsc::channel();
        let job = Box::new(move |p: &Platform| {
            let _ = reply.send(f(p));
        });
        self.tx.send(Command::Inspect(job)).ok()?;
        rx.recv().ok()
    }

    /// Blocks until the platform thread exits.
    pub fn wait(mut self) {
        if let Some(d) = self.driver.take() {
            let _ = d.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        let _ = self.tx.send(Command::Shutdown);
        if let Some(d) = self.driver.take() {
            let _ = d.join();
        }
        if let Some(rt) = self.runtime.take() {
            rt.shutdown_background();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.stop();
    }
}
