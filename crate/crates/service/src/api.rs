//! HTTP routes.
//!
//! | method | path                                       | result              |
//! |--------|--------------------------------------------|---------------------|
//! | POST   | `/sessions`                                | `{session_id}`      |
//! | POST   | `/sessions/load`                           | session from bundle |
//! | GET    | `/sessions/{id}`                           | session summary     |
//! | POST   | `/sessions/{id}/log`                       | parse report        |
//! | POST   | `/sessions/{id}/simulate`                  | parse report        |
//! | POST   | `/sessions/{id}/train`                     | job handle          |
//! | POST   | `/sessions/{id}/iterate`                   | job handle          |
//! | GET    | `/sessions/{id}/tree`                      | canonical tree      |
//! | GET    | `/sessions/{id}/tree/node/{node}/samples`  | node digest         |
//! | GET    | `/sessions/{id}/metrics`                   | metrics history     |
//! | GET    | `/sessions/{id}/iterations`                | iteration records   |
//! | GET    | `/sessions/{id}/snapshots`                 | snapshot list       |
//! | POST   | `/sessions/{id}/restore`                   | session summary     |
//! | POST   | `/sessions/{id}/persist`                   | bundle location     |
//! | GET    | `/sessions/{id}/export`                    | export document     |
//! | GET    | `/jobs/{job_id}`                           | job handle          |

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use fairloop_core::bundle::{load_bundle, save_bundle};
use fairloop_core::distillation::{NodeId, TreeParams};
use fairloop_core::event_log::{parse_xes, EventLog, ParseReport};
use fairloop_core::fairness_loop::{
    bootstrap_with_progress, run_iteration_with_progress, validate_config, validate_iteration, LoopConfig,
};
use fairloop_core::neural::TrainConfig;
use fairloop_core::simulator::{builtin_cancer_screening, simulate, ProcessModel, SimConfig};
use fairloop_core::surgery::EditAction;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{ApiError, Classify};
use crate::jobs::{JobHandle, JobKind};
use crate::sessions::{lock, Service, Session, SessionStatus, SessionView, Snapshot};
use crate::views::{log_report, node_digest, with_overrides, ExportDocument, IterationView, TreeView};

pub const DEFAULT_SAMPLE_LIMIT: usize = 10;
pub const MAX_SAMPLE_LIMIT: usize = 1000;

type ApiResult<T> = Result<T, ApiError>;

pub fn router(service: Arc<Service>) -> Router {
    let limit = service.config.max_upload_bytes;
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/load", post(load_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/log", post(upload_log))
        .route("/sessions/{id}/simulate", post(simulate_log))
        .route("/sessions/{id}/train", post(train))
        .route("/sessions/{id}/iterate", post(iterate))
        .route("/sessions/{id}/tree", get(get_tree))
        .route("/sessions/{id}/tree/node/{node_id}/samples", get(node_samples))
        .route("/sessions/{id}/metrics", get(get_metrics))
        .route("/sessions/{id}/iterations", get(get_iterations))
        .route("/sessions/{id}/snapshots", get(get_snapshots))
        .route("/sessions/{id}/restore", post(restore))
        .route("/sessions/{id}/persist", post(persist))
        .route("/sessions/{id}/export", get(export))
        .route("/jobs/{job_id}", get(get_job))
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "unknown_route", "no such endpoint") })
        .layer(DefaultBodyLimit::max(limit))
        .with_state(service)
}

/// Parses a JSON body; an empty body reads as `{}`.
fn parse_body<T: DeserializeOwned>(bytes: &[u8]) -> ApiResult<T> {
    let bytes = if bytes.iter().all(u8::is_ascii_whitespace) {
        b"{}"
    } else {
        bytes
    };
    serde_json::from_slice(bytes).map_err(|e| ApiError::invalid("invalid_request", e.to_string()))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(e.to_string()))
}

async fn create_session(State(svc): State<Arc<Service>>) -> impl IntoResponse {
    let id = svc.create_session();
    (StatusCode::CREATED, Json(json!({ "session_id": id })))
}

async fn get_session(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> ApiResult<Json<SessionView>> {
    let session = svc.session(&id)?;
    let view = lock(&session).view();
    Ok(Json(view))
}

fn set_log(session: &mut Session, log: EventLog, report: ParseReport) {
    session.log = Some(Arc::new(log));
    session.log_report = Some(report);
}

async fn xes_bytes(req: Request) -> ApiResult<Bytes> {
    let multipart = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));
    if !multipart {
        return Bytes::from_request(req, &())
            .await
            .map_err(|e| ApiError::invalid("invalid_request", e.body_text()));
    }
    let mut form = Multipart::from_request(req, &())
        .await
        .map_err(|e| ApiError::invalid("invalid_request", e.body_text()))?;
    match form.next_field().await {
        Ok(Some(field)) => field
            .bytes()
            .await
            .map_err(|e| ApiError::invalid("invalid_request", e.body_text())),
        Ok(None) => Err(ApiError::invalid("invalid_request", "multipart form has no file field")),
        Err(e) => Err(ApiError::invalid("invalid_request", e.body_text())),
    }
}

async fn upload_log(
    State(svc): State<Arc<Service>>,
    Path(id): Path<String>,
    req: Request,
) -> ApiResult<Json<ParseReport>> {
    let session = svc.session(&id)?;
    lock(&session).ensure_idle()?;
    let bytes = xes_bytes(req).await?;
    let (log, report) = blocking(move || parse_xes(&bytes))
        .await?
        .map_err(|e| ApiError::engine(&e))?;
    let mut s = lock(&session);
    s.ensure_idle()?;
    set_log(&mut s, log, report.clone());
    Ok(Json(report))
}

#[derive(Debug, Deserialize)]
#[serde(default)]
struct SimulateRequest {
    /// Process model; the built-in screening process when absent.
    model: Option<ProcessModel>,
    refuse_female: f64,
    refuse_male: f64,
    num_cases: usize,
    seed: u64,
}

impl Default for SimulateRequest {
    fn default() -> Self {
        let sim = SimConfig::default();
        SimulateRequest {
            model: None,
            refuse_female: 0.5,
            refuse_male: 0.0,
            num_cases: sim.num_cases,
            seed: sim.seed,
        }
    }
}

#[derive(Debug, Serialize)]
struct SimulateResponse {
    job_id: String,
    #[serde(flatten)]
    report: ParseReport,
}

async fn simulate_log(
    State(svc): State<Arc<Service>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<SimulateResponse>> {
    let req: SimulateRequest = parse_body(&body)?;
    let model = match req.model {
        Some(m) => m,
        None => builtin_cancer_screening(req.refuse_female, req.refuse_male).map_err(|e| ApiError::engine(&e))?,
    };
    model.validate().map_err(|e| ApiError::engine(&e))?;
    let config = SimConfig {
        num_cases: req.num_cases,
        seed: req.seed,
    };
    let session = svc.session(&id)?;
    let job = svc.start_job(&mut lock(&session), JobKind::Simulate, SessionStatus::Idle)?;
    let handle = svc.run_job(
        session,
        job.job_id.clone(),
        move |_| simulate(&model, &config).map_err(|e| e.body()),
        |s, log| {
            let report = log_report(&log);
            let value = serde_json::to_value(&report).expect("report serializes");
            set_log(s, log, report);
            value
        },
    );
    handle.await.map_err(|e| ApiError::internal(e.to_string()))?;
    let job = svc.job(&job.job_id)?;
    match (job.result, job.error) {
        (Some(result), _) => Ok(Json(SimulateResponse {
            job_id: job.job_id,
            report: serde_json::from_value(result).map_err(|e| ApiError::internal(e.to_string()))?,
        })),
        (None, Some(error)) => Err(ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            body: error,
        }),
        (None, None) => Err(ApiError::internal("simulation job did not finish")),
    }
}

fn accepted(job: JobHandle) -> Response {
    (StatusCode::ACCEPTED, Json(job)).into_response()
}

async fn train(State(svc): State<Arc<Service>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let patch: Value = parse_body(&body)?;
    let config: LoopConfig = with_overrides(&svc.config.defaults, Some(patch))
        .map_err(|e| ApiError::invalid("invalid_config", e.to_string()))?;
    let session = svc.session(&id)?;
    let log = {
        let s = lock(&session);
        s.ensure_idle()?;
        s.log
            .clone()
            .ok_or_else(|| ApiError::conflict("no_log", format!("session {id} has no event log")))?
    };
    let (log, config) = {
        let (log, config) = (log.clone(), config.clone());
        blocking(move || validate_config(&log, &config).map(|_| (log, config)))
            .await?
            .map_err(|e| ApiError::engine(&e))?
    };
    let job = svc.start_job(&mut lock(&session), JobKind::Train, SessionStatus::Training)?;
    let used_log = log.clone();
    svc.run_job(
        session,
        job.job_id.clone(),
        move |progress| bootstrap_with_progress(&log, &config, progress).map_err(|e| e.body()),
        move |s, state| {
            let result = json!({
                "iteration": state.iteration,
                "train_loss": state.train_loss.last(),
                "tree_nodes": state.tree.node_count(),
                "metrics": state.metrics_history.last(),
            });
            s.commit(Snapshot {
                state: Arc::new(state),
                log: Some(used_log),
            });
            result
        },
    );
    Ok(accepted(job))
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct IterateRequest {
    edits: Vec<EditAction>,
    /// Fields overriding the session's fine-tuning configuration.
    finetune: Option<Value>,
    /// Fields overriding the session's tree parameters.
    tree: Option<Value>,
}

async fn iterate(State(svc): State<Arc<Service>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let req: IterateRequest = parse_body(&body)?;
    let session = svc.session(&id)?;
    let (current, state) = {
        let s = lock(&session);
        s.ensure_idle()?;
        let state = s.state()?;
        (s.current.clone().expect("trained"), state)
    };
    let invalid = |e: serde_json::Error| ApiError::invalid("invalid_config", e.to_string());
    let finetune: TrainConfig = with_overrides(&state.config.finetune, req.finetune).map_err(invalid)?;
    let params: TreeParams = with_overrides(&state.config.tree, req.tree).map_err(invalid)?;
    let edits = req.edits;
    let (state, edits, finetune) =
        blocking(move || validate_iteration(&state, &edits, &finetune, &params).map(|_| (state, edits, finetune)))
            .await?
            .map_err(|e| ApiError::engine(&e))?;
    let job = svc.start_job(&mut lock(&session), JobKind::Iterate, SessionStatus::FineTuning)?;
    svc.run_job(
        session,
        job.job_id.clone(),
        move |progress| {
            run_iteration_with_progress(&state, &edits, &finetune, &params, progress)
                .map(|o| o.state)
                .map_err(|e| e.body())
        },
        move |s, state| {
            let record = state.iterations.last().map(IterationView::from);
            let result = json!({
                "iteration": state.iteration,
                "record": record,
                "metrics": state.metrics_history.last(),
            });
            s.commit(Snapshot {
                state: Arc::new(state),
                log: current.log,
            });
            result
        },
    );
    Ok(accepted(job))
}

fn current_state(svc: &Service, id: &str) -> ApiResult<Arc<fairloop_core::fairness_loop::LoopState>> {
    let session = svc.session(id)?;
    let state = lock(&session).state()?;
    Ok(state)
}

async fn get_tree(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> ApiResult<Json<TreeView>> {
    let state = current_state(&svc, &id)?;
    Ok(Json(TreeView::of(&state)))
}

#[derive(Debug, Deserialize)]
struct LimitQuery {
    limit: Option<usize>,
}

async fn node_samples(
    State(svc): State<Arc<Service>>,
    Path((id, node_id)): Path<(String, String)>,
    Query(q): Query<LimitQuery>,
) -> ApiResult<Response> {
    let state = current_state(&svc, &id)?;
    let node_id: NodeId = node_id.parse().map_err(|_| ApiError::not_found("node", &node_id))?;
    let limit = q.limit.unwrap_or(DEFAULT_SAMPLE_LIMIT).min(MAX_SAMPLE_LIMIT);
    let digest = blocking(move || node_digest(&state, node_id, limit))
        .await?
        .map_err(|_| ApiError::not_found("node", node_id))?;
    Ok(Json(digest).into_response())
}

async fn get_metrics(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> ApiResult<Response> {
    let session = svc.session(&id)?;
    let history = lock(&session)
        .current
        .as_ref()
        .map(|c| c.state.metrics_history.clone())
        .unwrap_or_default();
    Ok(Json(history).into_response())
}

async fn get_iterations(
    State(svc): State<Arc<Service>>,
    Path(id): Path<String>,
) -> ApiResult<Json<Vec<IterationView>>> {
    let state = current_state(&svc, &id)?;
    Ok(Json(state.iterations.iter().map(IterationView::from).collect()))
}

async fn get_snapshots(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> ApiResult<Response> {
    let session = svc.session(&id)?;
    let snapshots = lock(&session).view().snapshots;
    Ok(Json(snapshots).into_response())
}

#[derive(Debug, Deserialize)]
struct RestoreRequest {
    iteration: usize,
}

/// Makes the latest snapshot of the requested iteration current again.
async fn restore(State(svc): State<Arc<Service>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<SessionView>> {
    let req: RestoreRequest = parse_body(&body)?;
    let session = svc.session(&id)?;
    let mut s = lock(&session);
    s.ensure_idle()?;
    let snapshot = s
        .snapshots
        .iter()
        .rev()
        .find(|snap| snap.state.iteration == req.iteration)
        .cloned()
        .ok_or_else(|| ApiError::not_found("snapshot", req.iteration))?;
    s.current = Some(snapshot);
    s.status = SessionStatus::Idle;
    Ok(Json(s.view()))
}

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct PersistRequest {
    name: Option<String>,
}

fn bundle_dir(svc: &Service, name: &str) -> ApiResult<PathBuf> {
    let valid = !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
    if !valid {
        return Err(ApiError::invalid(
            "invalid_bundle_name",
            "bundle names use letters, digits, '-' and '_' only",
        ));
    }
    Ok(svc.config.bundle_root.join(name))
}

async fn persist(State(svc): State<Arc<Service>>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let req: PersistRequest = parse_body(&body)?;
    let name = req.name.unwrap_or_else(|| id.clone());
    let dir = bundle_dir(&svc, &name)?;
    let session = svc.session(&id)?;
    let current = {
        let s = lock(&session);
        s.state()?;
        s.current.clone().expect("trained")
    };
    let target = dir.clone();
    blocking(move || save_bundle(&target, &current.state, current.log.as_deref()))
        .await?
        .map_err(|e| ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            body: e.body(),
        })?;
    Ok(Json(json!({ "name": name, "path": dir })).into_response())
}

#[derive(Debug, Deserialize)]
struct LoadRequest {
    name: String,
}

async fn load_session(State(svc): State<Arc<Service>>, body: Bytes) -> ApiResult<Response> {
    let req: LoadRequest = parse_body(&body)?;
    let dir = bundle_dir(&svc, &req.name)?;
    if !dir.is_dir() {
        return Err(ApiError::not_found("bundle", &req.name));
    }
    let (state, log) = blocking(move || load_bundle(&dir))
        .await?
        .map_err(|e| ApiError::engine(&e))?;
    let id = svc.insert_session(|id| {
        let mut s = Session::new(id);
        let log = log.map(Arc::new);
        s.log_report = log.as_deref().map(log_report);
        s.log = log.clone();
        s.commit(Snapshot {
            state: Arc::new(state),
            log,
        });
        s
    });
    let session = svc.session(&id)?;
    let view = lock(&session).view();
    Ok((StatusCode::CREATED, Json(view)).into_response())
}

async fn export(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> ApiResult<Response> {
    let state = current_state(&svc, &id)?;
    let doc = ExportDocument::of(&state);
    let mut response = Json(doc).into_response();
    let disposition = format!(
        "attachment; filename=\"fairloop-{id}-iteration-{}.json\"",
        state.iteration
    );
    if let Ok(value) = disposition.parse() {
        response.headers_mut().insert(header::CONTENT_DISPOSITION, value);
    }
    Ok(response)
}

async fn get_job(State(svc): State<Arc<Service>>, Path(job_id): Path<String>) -> ApiResult<Json<JobHandle>> {
    Ok(Json(svc.job(&job_id)?))
}
