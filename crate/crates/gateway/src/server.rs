use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use obfusgate_core::Error;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::task::JoinHandle;

use crate::services::{body_hash, JobError, JobResult, Services};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JobKind {
    ObfuscateEntities,
    ObfuscateText,
    Infer,
    Attack,
    Optimize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JobStatus {
    Running,
    Succeeded,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: String,
    pub kind: JobKind,
    pub config_hash: String,
    pub status: JobStatus,
    /// Where the result can be fetched.
    pub result_locator: String,
    pub result: Option<Value>,
    pub error: Option<String>,
}

pub struct AppState {
    services: Arc<Services>,
    jobs: Mutex<BTreeMap<String, JobRecord>>,
    next_id: AtomicU64,
    background: Mutex<Vec<JoinHandle<()>>>,
}

impl AppState {
    pub fn new(services: Arc<Services>) -> Arc<Self> {
        Arc::new(Self {
            services,
            jobs: Mutex::new(BTreeMap::new()),
            next_id: AtomicU64::new(1),
            background: Mutex::new(Vec::new()),
        })
    }

    fn open_job(&self, kind: JobKind) -> JobRecord {
        let id = format!("job-{:06}", self.next_id.fetch_add(1, Ordering::SeqCst));
        let record = JobRecord {
            result_locator: format!("/v1/jobs/{id}"),
            id: id.clone(),
            kind,
            config_hash: self.services.config_hash().to_string(),
            status: JobStatus::Running,
            result: None,
            error: None,
        };
        self.jobs.lock().unwrap().insert(id, record.clone());
        record
    }

    fn close_job(&self, id: &str, outcome: &Result<Value, JobError>) {
        if let Some(record) = self.jobs.lock().unwrap().get_mut(id) {
            match outcome {
                Ok(v) => {
                    record.status = JobStatus::Succeeded;
                    record.result = Some(v.clone());
                }
                Err(e) => {
                    record.status = JobStatus::Failed;
                    record.error = Some(e.to_string());
                }
            }
        }
    }

    pub fn job(&self, id: &str) -> Option<JobRecord> {
        self.jobs.lock().unwrap().get(id).cloned()
    }

    /// Waits for every background job started so far.
    pub async fn drain(&self) {
        let handles: Vec<JoinHandle<()>> = std::mem::take(&mut *self.background.lock().unwrap());
        for h in handles {
            let _ = h.await;
        }
    }
}

pub struct ApiError(JobError);

impl From<JobError> for ApiError {
    fn from(e: JobError) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let message = self.0.to_string();
        let (status, body) = match self.0 {
            JobError::NotFound(_) => (StatusCode::NOT_FOUND, json!({ "error": message })),
            JobError::BadRequest(_) => (StatusCode::BAD_REQUEST, json!({ "error": message })),
            JobError::Core(Error::UnknownEntities(ids)) => {
                (StatusCode::UNPROCESSABLE_ENTITY, json!({ "error": message, "missing_ids": ids }))
            }
            JobError::Core(
                Error::InvalidConfig(_)
                | Error::DuplicateId(_)
                | Error::EmptyInput(_)
                | Error::LengthMismatch { .. }
                | Error::DatasetTooSmall { .. }
                | Error::NonNumeric(_)
                | Error::Json(_),
            ) => (StatusCode::BAD_REQUEST, json!({ "error": message })),
            JobError::Core(Error::Provider(_) | Error::EmptyCompletion { .. } | Error::IndistinctSeeds { .. }) => {
                (StatusCode::BAD_GATEWAY, json!({ "error": message }))
            }
            JobError::Core(_) => (StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": message })),
        };
        (status, Json(body)).into_response()
    }
}

#[derive(Debug, Default, Deserialize)]
pub struct JobQuery {
    /// Return 202 immediately and run the job in the background.
    #[serde(default, rename = "async")]
    run_async: bool,
}

type Work<Req, Res> = fn(&Services, &Req) -> JobResult<Res>;

async fn submit<Req, Res>(
    state: Arc<AppState>,
    kind: JobKind,
    query: JobQuery,
    body: Bytes,
    work: Work<Req, Res>,
) -> Result<Response, ApiError>
where
    Req: DeserializeOwned + Send + 'static,
    Res: Serialize + Send + 'static,
{
    let raw = std::str::from_utf8(&body).map_err(|e| JobError::BadRequest(e.to_string()))?;
    let req: Req = serde_json::from_str(raw).map_err(|e| JobError::BadRequest(format!("request body: {e}")))?;
    let record = state.open_job(kind);
    log::info!("{} {:?} body={}", record.id, kind, body_hash(raw));

    let worker_state = state.clone();
    let id = record.id.clone();
    let task = tokio::task::spawn_blocking(move || {
        let outcome = work(&worker_state.services, &req)
            .and_then(|r| serde_json::to_value(r).map_err(|e| JobError::Core(e.into())));
        worker_state.close_job(&id, &outcome);
        outcome
    });

    if query.run_async {
        let watcher = tokio::spawn(async move {
            let _ = task.await;
        });
        state.background.lock().unwrap().push(watcher);
        return Ok((StatusCode::ACCEPTED, Json(record)).into_response());
    }
    let outcome = task.await.map_err(|e| JobError::BadRequest(format!("job panicked: {e}")))?;
    let value = outcome?;
    Ok(Json(json!({ "job_id": record.id, "config_hash": record.config_hash, "result": value })).into_response())
}

macro_rules! job_route {
    ($name:ident, $kind:expr, $method:ident) => {
        async fn $name(
            State(state): State<Arc<AppState>>,
            Query(query): Query<JobQuery>,
            body: Bytes,
        ) -> Result<Response, ApiError> {
            submit(state, $kind, query, body, Services::$method).await
        }
    };
}

job_route!(obfuscate_entities, JobKind::ObfuscateEntities, obfuscate_entities);
job_route!(obfuscate_text, JobKind::ObfuscateText, obfuscate_text);
job_route!(infer, JobKind::Infer, infer);
job_route!(attack, JobKind::Attack, attack);
job_route!(optimize, JobKind::Optimize, optimize);

async fn job(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<JobRecord>, ApiError> {
    state.job(&id).map(Json).ok_or_else(|| JobError::NotFound(format!("job {id:?}")).into())
}

async fn entity(
    State(state): State<Arc<AppState>>,
    Path((task, id)): Path<(String, String)>,
) -> Result<Response, ApiError> {
    let services = state.services.clone();
    let view = tokio::task::spawn_blocking(move || services.entity(&task, &id))
        .await
        .map_err(|e| JobError::BadRequest(format!("lookup panicked: {e}")))??;
    Ok(Json(view).into_response())
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({ "status": "ok", "config_hash": state.services.config_hash() }))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(health))
        .route("/v1/obfuscate/entities", post(obfuscate_entities))
        .route("/v1/obfuscate/text", post(obfuscate_text))
        .route("/v1/infer", post(infer))
        .route("/v1/attack", post(attack))
        .route("/v1/optimize", post(optimize))
        .route("/v1/jobs/{id}", get(job))
        .route("/v1/entities/{task}/{id}", get(entity))
        .with_state(state)
}

/// Serves until ctrl-c or SIGTERM, then finishes in-flight requests and
/// background jobs before returning.
pub async fn serve(services: Arc<Services>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    let state = AppState::new(services);
    axum::serve(listener, router(state.clone())).with_graceful_shutdown(shutdown_signal()).await?;
    log::info!("draining background jobs");
    state.drain().await;
    Ok(())
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
}
