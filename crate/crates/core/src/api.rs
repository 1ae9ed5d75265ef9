//! The user-facing API, independent of transport.
//!
//! | method | path                              | result                          |
//! |--------|-----------------------------------|---------------------------------|
//! | POST   | `/v1/jobs`                        | 201 `{job_id, status}`          |
//! | GET    | `/v1/jobs`                        | 200 `{jobs: [summary]}`         |
//! | GET    | `/v1/jobs/{id}`                   | 200 job with full history       |
//! | GET    | `/v1/jobs/{id}/logs?from=&to=`    | 200 `{job_id, lines, total}`    |
//! | DELETE | `/v1/jobs/{id}`                   | 202 halt requested              |
//! | GET    | `/healthz`                        | 200 when the service is up      |
//!
//! Errors carry `{code, message, request_id}`. Tenants authenticate with a
//! bearer token. Submissions are idempotent per (tenant, request id): the job
//! id is derived from both, so a retried submit finds the record it created.

pub mod http;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::clock::SimTime;
use crate::cluster::ServiceKind;
use crate::job_model::{parse_manifest, JobStatus, StatusRecord};
use crate::lcm::LcmError;
use crate::metadata::{JobRecord, MetadataError};
use crate::objects::ObjectError;
use crate::platform::{Platform, Timer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Get,
    Post,
    Delete,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiRequest {
    pub method: Method,
    /// Path without query string.
    pub path: String,
    pub query: BTreeMap<String, String>,
    /// Bearer token, without the `Bearer ` prefix.
    pub token: Option<String>,
    pub request_id: Option<String>,
    pub body: String,
}

impl ApiRequest {
    pub fn new(method: Method, path: impl Into<String>) -> Self {
        ApiRequest {
            method,
            path: path.into(),
            query: BTreeMap::new(),
            token: None,
            request_id: None,
            body: String::new(),
        }
    }

    pub fn token(mut self, token: impl Into<String>) -> Self {
        self.token = Some(token.into());
        self
    }

    pub fn request_id(mut self, id: impl Into<String>) -> Self {
        self.request_id = Some(id.into());
        self
    }

    pub fn body(mut self, body: impl Into<String>) -> Self {
        self.body = body.into();
        self
    }

    pub fn query(mut self, key: &str, value: impl ToString) -> Self {
        self.query.insert(key.to_string(), value.to_string());
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApiResponse {
    pub status: u16,
    pub body: Value,
}

impl ApiResponse {
    fn ok(status: u16, body: Value) -> Self {
        ApiResponse { status, body }
    }

    fn error(status: u16, code: &str, message: impl Into<String>, request_id: &str) -> Self {
        ApiResponse {
            status,
            body: json!({"code": code, "message": message.into(), "request_id": request_id}),
        }
    }

    pub fn code(&self) -> Option<&str> {
        self.body.get("code").and_then(Value::as_str)
    }

    /// True when the service itself did not answer (crashed or down).
    pub fn is_unreachable(&self) -> bool {
        self.status == 503 && self.code() == Some(SERVICE_UNAVAILABLE)
    }
}

pub const SERVICE_UNAVAILABLE: &str = "SERVICE_UNAVAILABLE";

/// Job id for a (tenant, request id) pair.
pub fn job_id_for(tenant: &str, request_id: &str) -> String {
    let mut h = Sha256::new();
    h.update(tenant.as_bytes());
    h.update([0u8]);
    h.update(request_id.as_bytes());
    let digest = h.finalize();
    format!("job-{}", &hex::encode(digest)[..16])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSummary {
    pub job_id: String,
    pub name: String,
    pub status: JobStatus,
    pub created_at: SimTime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobView {
    pub job_id: String,
    pub tenant: String,
    pub name: String,
    pub status: JobStatus,
    pub created_at: SimTime,
    pub history: Vec<StatusRecord>,
}

impl From<&JobRecord> for JobView {
    fn from(r: &JobRecord) -> Self {
        JobView {
            job_id: r.job_id.clone(),
            tenant: r.tenant.clone(),
            name: r.manifest.name.clone(),
            status: r.current_status,
            created_at: r.created_at,
            history: r.history.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogsView {
    pub job_id: String,
    pub from: usize,
    pub total: usize,
    pub lines: Vec<String>,
}

type Reply = Result<ApiResponse, ApiResponse>;

impl Platform {
    /// Serves one API request.
    pub fn handle(&mut self, req: &ApiRequest) -> ApiResponse {
        let request_id = match &req.request_id {
            Some(id) => id.clone(),
            None => {
                self.request_seq += 1;
                format!("req-{}", self.request_seq)
            }
        };
        if !self.service_up(ServiceKind::Api) {
            return ApiResponse::error(503, SERVICE_UNAVAILABLE, "api service is down", &request_id);
        }
        if req.method == Method::Get && req.path == "/healthz" {
            return ApiResponse::ok(200, json!({"status": "ok"}));
        }
        let resp = self.route(req, &request_id).unwrap_or_else(|e| e);
        if req.method != Method::Get {
            let tenant = req.token.as_ref().and_then(|t| self.tokens.get(t)).cloned().unwrap_or_default();
            self.cluster.record(
                "api-request",
                "service:api",
                format!(
                    "request_id={request_id} tenant={tenant} method={:?} path={} status={}",
                    req.method, req.path, resp.status
                ),
            );
        }
        resp
    }

    fn route(&mut self, req: &ApiRequest, rid: &str) -> Reply {
        let tenant = req
            .token
            .as_ref()
            .and_then(|t| self.tokens.get(t))
            .cloned()
            .ok_or_else(|| ApiResponse::error(401, "UNAUTHENTICATED", "missing or unknown bearer token", rid))?;
        *self.metering.entry(tenant.clone()).or_default() += 1;
        let segments: Vec<&str> = req.path.trim_matches('/').split('/').collect();
        match (req.method, segments.as_slice()) {
            (Method::Post, ["v1", "jobs"]) => self.submit(&tenant, rid, &req.body),
            (Method::Get, ["v1", "jobs"]) => self.list(&tenant, rid),
            (Method::Get, ["v1", "jobs", id]) => self.status(&tenant, rid, id),
            (Method::Get, ["v1", "jobs", id, "logs"]) => self.logs(&tenant, rid, id, &req.query),
            (Method::Delete, ["v1", "jobs", id]) => self.halt(&tenant, rid, id),
            _ => Err(ApiResponse::error(404, "NOT_FOUND", format!("no route for {}", req.path), rid)),
        }
    }

    fn submit(&mut self, tenant: &str, rid: &str, body: &str) -> Reply {
        let manifest = parse_manifest(body).map_err(|e| ApiResponse::error(400, e.code(), e.to_string(), rid))?;
        for store in [&manifest.data_store, &manifest.result_store] {
            let owner = self.stores.objects.bucket_tenant(&store.bucket).map_err(|e| obj_error(e, rid))?;
            if owner.as_deref() != Some(tenant) {
                return Err(ApiResponse::error(
                    403,
                    "ACCESS_DENIED",
                    format!("bucket {} is not accessible", store.bucket),
                    rid,
                ));
            }
            self.stores.objects.authorize(&store.bucket, &store.credential).map_err(|e| obj_error(e, rid))?;
        }
        let job_id = job_id_for(tenant, rid);
        let created = ApiResponse::ok(201, json!({"job_id": job_id, "request_id": rid}));
        match self.stores.metadata.get_job(&job_id) {
            Ok(_) => return Ok(created),
            Err(MetadataError::NotFound(_)) => {}
            Err(e) => return Err(meta_error(e, rid)),
        }
        let record = JobRecord::new(&job_id, tenant, rid, manifest, self.now());
        match self.stores.metadata.put_job(&record) {
            Ok(()) | Err(MetadataError::DuplicateId(_)) => {}
            Err(e) => return Err(meta_error(e, rid)),
        }
        self.cluster.record("submit", "service:api", format!("job={job_id} tenant={tenant}"));
        let delay = crate::clock::secs(self.config.services.notify_delay);
        self.schedule_in(delay, Timer::Deploy { job_id });
        Ok(created)
    }

    fn list(&mut self, tenant: &str, rid: &str) -> Reply {
        let jobs = self.stores.metadata.list_jobs(tenant).map_err(|e| meta_error(e, rid))?;
        let jobs: Vec<JobSummary> = jobs
            .iter()
            .map(|r| JobSummary {
                job_id: r.job_id.clone(),
                name: r.manifest.name.clone(),
                status: r.current_status,
                created_at: r.created_at,
            })
            .collect();
        Ok(ApiResponse::ok(200, json!({ "jobs": jobs })))
    }

    fn owned_job(&self, tenant: &str, rid: &str, id: &str) -> Result<JobRecord, ApiResponse> {
        let job = self.stores.metadata.get_job(id).map_err(|e| meta_error(e, rid))?;
        if job.tenant != tenant {
            return Err(ApiResponse::error(403, "FORBIDDEN", format!("job {id} belongs to another tenant"), rid));
        }
        Ok(job)
    }

    fn status(&mut self, tenant: &str, rid: &str, id: &str) -> Reply {
        let job = self.owned_job(tenant, rid, id)?;
        Ok(ApiResponse::ok(200, serde_json::to_value(JobView::from(&job)).expect("serializes")))
    }

    fn logs(&mut self, tenant: &str, rid: &str, id: &str, query: &BTreeMap<String, String>) -> Reply {
        let job = self.owned_job(tenant, rid, id)?;
        let bound = |name: &str| -> Result<Option<usize>, ApiResponse> {
            query
                .get(name)
                .map(|v| v.parse::<usize>())
                .transpose()
                .map_err(|_| ApiResponse::error(400, "BAD_REQUEST", format!("{name} must be a line number"), rid))
        };
        let from = bound("from")?.unwrap_or(0);
        let to = bound("to")?;
        let lines = job_log_lines(self, &job).map_err(|e| obj_error(e, rid))?;
        let total = lines.len();
        let end = to.unwrap_or(total).min(total);
        let slice = if from < end { lines[from..end].to_vec() } else { Vec::new() };
        let view = LogsView { job_id: id.to_string(), from, total, lines: slice };
        Ok(ApiResponse::ok(200, serde_json::to_value(view).expect("serializes")))
    }

    fn halt(&mut self, tenant: &str, rid: &str, id: &str) -> Reply {
        let job = self.owned_job(tenant, rid, id)?;
        if job.current_status.is_terminal() {
            return Err(ApiResponse::error(
                409,
                "TERMINAL",
                format!("job {id} is already {}", job.current_status),
                rid,
            ));
        }
        match self.lcm_halt(id) {
            Ok(()) => Ok(ApiResponse::ok(202, json!({"job_id": id, "halt": "requested", "request_id": rid}))),
            Err(LcmError::Terminal(_)) => Err(ApiResponse::error(409, "TERMINAL", format!("job {id} already finished"), rid)),
            Err(LcmError::NotFound(_)) => Err(ApiResponse::error(404, "NOT_FOUND", format!("job {id}"), rid)),
            Err(e) => Err(ApiResponse::error(503, "LCM_UNAVAILABLE", e.to_string(), rid)),
        }
    }
}

/// Every log line flushed to the job's result bucket, learner by learner
/// in line order.
pub fn job_log_lines(platform: &Platform, job: &JobRecord) -> Result<Vec<String>, ObjectError> {
    let store = &job.manifest.result_store;
    let objects = &platform.stores.objects;
    let mut lines = Vec::new();
    for key in objects.list_objects(&store.bucket, &store.credential, &store.key("logs/"))? {
        let body = objects.get_object(&store.bucket, &store.credential, &key)?;
        lines.extend(String::from_utf8_lossy(&body).lines().map(str::to_string));
    }
    Ok(lines)
}

fn meta_error(e: MetadataError, rid: &str) -> ApiResponse {
    match e {
        MetadataError::NotFound(id) => ApiResponse::error(404, "NOT_FOUND", format!("job {id}"), rid),
        MetadataError::Unavailable => ApiResponse::error(503, "STORE_UNAVAILABLE", "metadata store unavailable", rid),
        other => ApiResponse::error(500, "INTERNAL", other.to_string(), rid),
    }
}

fn obj_error(e: ObjectError, rid: &str) -> ApiResponse {
    match e {
        ObjectError::AccessDenied(m) => ApiResponse::error(403, "ACCESS_DENIED", m, rid),
        ObjectError::NotFound(m) => ApiResponse::error(403, "ACCESS_DENIED", format!("{m} is not accessible"), rid),
        ObjectError::Unavailable => ApiResponse::error(503, "STORE_UNAVAILABLE", "object store unavailable", rid),
        other => ApiResponse::error(500, "INTERNAL", other.to_string(), rid),
    }
}
