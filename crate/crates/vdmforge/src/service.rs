//! Local job service: REST endpoints, a FIFO job queue, server-sent progress
//! events and the authoring UI's static files.

use std::collections::BTreeMap;
use std::convert::Infallible;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use futures::Stream;
use serde::{Deserialize, Serialize};
use tokio::sync::{mpsc, watch};
use tower_http::services::ServeDir;
use vdmforge_core::mesh::build_grid_mesh;
use vdmforge_core::optimizer::IterationRecord;
use vdmforge_core::vdm::{VdmImage, VdmScale};
use vdmforge_core::NormalRender;

use crate::config::{Issue, RunConfig, SCHEMA};
use crate::png_io;
use crate::run::{run_generate_with, RunError, RunMonitor, RunStatus};

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Job outputs go to `data_dir/jobs/<id>`, uploads to `data_dir/uploads`.
    pub data_dir: PathBuf,
    pub ui_dir: Option<PathBuf>,
    pub max_concurrent_jobs: usize,
    /// Minimum spacing between stream events.
    pub stream_interval: Duration,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            data_dir: data_dir.into(),
            ui_dir: None,
            max_concurrent_jobs: 1,
            stream_interval: Duration::from_millis(500),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
    Cancelled,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed | JobState::Cancelled)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobProgress {
    pub iteration: usize,
    pub max_iterations: usize,
    pub loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: u64,
    pub state: JobState,
    pub config: RunConfig,
    pub progress: JobProgress,
    pub artifacts: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub submitted_ms: u64,
    pub started_ms: Option<u64>,
    pub finished_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreviewImage {
    pub width: usize,
    pub height: usize,
    pub png_base64: String,
}

/// One stream event; the latest value wins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamUpdate {
    pub state: JobState,
    pub iteration: usize,
    pub max_iterations: usize,
    pub loss: Option<f64>,
    pub render: Option<PreviewImage>,
}

struct Job {
    record: JobRecord,
    cancel: Arc<AtomicBool>,
    updates: watch::Sender<StreamUpdate>,
}

pub struct AppState {
    cfg: ServiceConfig,
    jobs: Mutex<BTreeMap<u64, Job>>,
    next_id: AtomicU64,
    next_upload: AtomicU64,
    queue: mpsc::UnboundedSender<u64>,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

type ApiError = (StatusCode, Json<serde_json::Value>);

fn api_error(status: StatusCode, message: impl Into<String>) -> ApiError {
    (status, Json(serde_json::json!({ "error": message.into() })))
}

fn not_found(id: u64) -> ApiError {
    api_error(StatusCode::NOT_FOUND, format!("no job {id}"))
}

fn invalid(issues: &[Issue]) -> ApiError {
    (StatusCode::UNPROCESSABLE_ENTITY, Json(serde_json::json!({ "error": "invalid config", "issues": issues })))
}

impl AppState {
    fn with_job<T>(&self, id: u64, f: impl FnOnce(&mut Job) -> T) -> Option<T> {
        self.jobs.lock().unwrap().get_mut(&id).map(f)
    }

    /// Pushes the job's current state; the last render is kept when `render`
    /// is `None`.
    fn publish(&self, id: u64, render: Option<PreviewImage>) {
        self.with_job(id, |job| {
            let render = render.or_else(|| job.updates.borrow().render.clone());
            let r = &job.record;
            job.updates.send_replace(StreamUpdate {
                state: r.state,
                iteration: r.progress.iteration,
                max_iterations: r.progress.max_iterations,
                loss: r.progress.loss,
                render,
            });
        });
    }
}

/// Starts the worker pool and returns the router.
pub fn router(cfg: ServiceConfig) -> Router {
    let (tx, rx) = mpsc::unbounded_channel();
    let workers = cfg.max_concurrent_jobs.max(1);
    let ui = cfg.ui_dir.clone();
    let state = Arc::new(AppState {
        cfg,
        jobs: Mutex::new(BTreeMap::new()),
        next_id: AtomicU64::new(1),
        next_upload: AtomicU64::new(1),
        queue: tx,
    });
    let rx = Arc::new(tokio::sync::Mutex::new(rx));
    for _ in 0..workers {
        tokio::spawn(worker(state.clone(), rx.clone()));
    }

    let app = Router::new()
        .route("/jobs", post(submit_job).get(list_jobs))
        .route("/jobs/{id}", get(get_job).delete(cancel_job))
        .route("/jobs/{id}/artifacts/{name}", get(get_artifact))
        .route("/jobs/{id}/stream", get(stream_job))
        .route("/preview", post(preview))
        .route("/uploads", post(upload))
        .route("/schema", get(schema))
        .with_state(state);
    match ui {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app,
    }
}

pub async fn serve(addr: &str, cfg: ServiceConfig) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(cfg)).await
}

async fn worker(state: Arc<AppState>, rx: Arc<tokio::sync::Mutex<mpsc::UnboundedReceiver<u64>>>) {
    loop {
        let Some(id) = rx.lock().await.recv().await else { return };
        let claimed = state.with_job(id, |job| {
            if job.record.state != JobState::Queued {
                return None;
            }
            job.record.state = JobState::Running;
            job.record.started_ms = Some(now_ms());
            Some((job.record.config.clone(), job.cancel.clone()))
        });
        let Some(Some((config, cancel))) = claimed else { continue };
        state.publish(id, None);

        let st = state.clone();
        let result = tokio::task::spawn_blocking(move || {
            let mut monitor = JobMonitor { state: st, id, cancel, last_preview: None };
            run_generate_with(&config, &mut monitor)
        })
        .await;

        state.with_job(id, |job| {
            let r = &mut job.record;
            r.finished_ms = Some(now_ms());
            match result {
                Ok(Ok(summary)) => {
                    r.state = match summary.metrics.status {
                        RunStatus::Cancelled => JobState::Cancelled,
                        _ => JobState::Done,
                    };
                    r.artifacts = summary.artifacts;
                }
                Ok(Err(RunError::Optimize { message, summary })) => {
                    r.state = JobState::Failed;
                    r.error = Some(message);
                    r.artifacts = summary.artifacts;
                }
                Ok(Err(e)) => {
                    r.state = JobState::Failed;
                    r.error = Some(e.to_string());
                }
                Err(join) => {
                    r.state = JobState::Failed;
                    r.error = Some(format!("worker panicked: {join}"));
                }
            }
            log::info!("job {id} finished: {:?}", r.state);
        });
        state.publish(id, None);
    }
}

struct JobMonitor {
    state: Arc<AppState>,
    id: u64,
    cancel: Arc<AtomicBool>,
    last_preview: Option<Instant>,
}

fn preview_png(render: &NormalRender) -> Option<PreviewImage> {
    let factor = render.width.max(render.height).div_ceil(64);
    let (w, h, img) = render.downsampled(factor);
    let rgb: Vec<u8> = img.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let png = png_io::encode_rgb8(w, h, &rgb).ok()?;
    Some(PreviewImage { width: w, height: h, png_base64: base64::engine::general_purpose::STANDARD.encode(png) })
}

impl RunMonitor for JobMonitor {
    fn cancelled(&self) -> bool {
        self.cancel.load(Ordering::Relaxed)
    }

    fn progress(&mut self, record: &IterationRecord, max_iterations: usize, render: Option<&NormalRender>) {
        self.state.with_job(self.id, |job| {
            job.record.progress =
                JobProgress { iteration: record.iteration + 1, max_iterations, loss: Some(record.loss) };
        });
        let due = self.last_preview.is_none_or(|t| t.elapsed() >= self.state.cfg.stream_interval);
        let last = record.iteration + 1 == max_iterations;
        let image = if due || last { render.and_then(preview_png) } else { None };
        if image.is_some() {
            self.last_preview = Some(Instant::now());
        }
        self.state.publish(self.id, image);
    }
}

#[derive(Serialize)]
struct Submitted {
    id: u64,
    state: JobState,
}

async fn submit_job(State(state): State<Arc<AppState>>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let mut value: serde_json::Value = serde_json::from_slice(&body)
        .map_err(|e| api_error(StatusCode::BAD_REQUEST, format!("malformed JSON: {e}")))?;
    let id = state.next_id.fetch_add(1, Ordering::Relaxed);
    let out = state.cfg.data_dir.join("jobs").join(id.to_string());
    if let Some(obj) = value.as_object_mut() {
        // outputs always live under the service's data directory
        obj.insert("output_dir".into(), serde_json::Value::String(out.to_string_lossy().into_owned()));
    }
    let mut config: RunConfig = serde_json::from_value(value)
        .map_err(|e| invalid(&[Issue { field: "body".into(), message: e.to_string() }]))?;
    config.resolve_paths(&state.cfg.data_dir.join("uploads"));
    config.apply_env();
    config.validate().map_err(|issues| invalid(&issues))?;

    let max_iterations = config.optim_config().max_iterations;
    let record = JobRecord {
        id,
        state: JobState::Queued,
        config,
        progress: JobProgress { iteration: 0, max_iterations, loss: None },
        artifacts: Vec::new(),
        error: None,
        submitted_ms: now_ms(),
        started_ms: None,
        finished_ms: None,
    };
    let (updates, _) = watch::channel(StreamUpdate {
        state: JobState::Queued,
        iteration: 0,
        max_iterations,
        loss: None,
        render: None,
    });
    state.jobs.lock().unwrap().insert(id, Job { record, cancel: Arc::new(AtomicBool::new(false)), updates });
    state.queue.send(id).map_err(|_| api_error(StatusCode::SERVICE_UNAVAILABLE, "job queue is closed"))?;
    log::info!("job {id} queued");
    Ok((StatusCode::ACCEPTED, Json(Submitted { id, state: JobState::Queued })))
}

async fn list_jobs(State(state): State<Arc<AppState>>) -> Json<Vec<JobRecord>> {
    Json(state.jobs.lock().unwrap().values().map(|j| j.record.clone()).collect())
}

async fn get_job(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<u64>) -> Result<Json<JobRecord>, ApiError> {
    state.with_job(id, |j| Json(j.record.clone())).ok_or_else(|| not_found(id))
}

async fn cancel_job(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<u64>,
) -> Result<(StatusCode, Json<JobRecord>), ApiError> {
    let out = state
        .with_job(id, |job| {
            let r = &mut job.record;
            match r.state {
                JobState::Queued => {
                    r.state = JobState::Cancelled;
                    r.finished_ms = Some(now_ms());
                    Ok((StatusCode::OK, Json(r.clone())))
                }
                JobState::Running => {
                    job.cancel.store(true, Ordering::Relaxed);
                    Ok((StatusCode::ACCEPTED, Json(r.clone())))
                }
                s => Err(api_error(StatusCode::CONFLICT, format!("job {id} already {s:?}").to_lowercase())),
            }
        })
        .ok_or_else(|| not_found(id))??;
    state.publish(id, None);
    Ok(out)
}

fn content_type(name: &str) -> &'static str {
    match Path::new(name).extension().and_then(|e| e.to_str()) {
        Some("json") => "application/json",
        Some("jsonl") => "application/x-ndjson",
        Some("obj") => "model/obj",
        Some("exr") => "image/x-exr",
        Some("png") => "image/png",
        _ => "application/octet-stream",
    }
}

async fn get_artifact(
    State(state): State<Arc<AppState>>,
    UrlPath((id, name)): UrlPath<(u64, String)>,
) -> Result<Response, ApiError> {
    let path = state
        .with_job(id, |job| job.record.artifacts.contains(&name).then(|| job.record.config.output_dir.join(&name)))
        .ok_or_else(|| not_found(id))?
        .ok_or_else(|| api_error(StatusCode::NOT_FOUND, format!("job {id} has no artifact '{name}'")))?;
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| api_error(StatusCode::INTERNAL_SERVER_ERROR, format!("{}: {e}", path.display())))?;
    Ok(([(header::CONTENT_TYPE, content_type(&name))], bytes).into_response())
}

async fn stream_job(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<u64>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let rx = state.with_job(id, |job| job.updates.subscribe()).ok_or_else(|| not_found(id))?;
    let interval = state.cfg.stream_interval;
    // first event is the current snapshot; afterwards at most one per interval
    let stream = futures::stream::unfold((rx, true, false), move |(mut rx, first, done)| async move {
        if done {
            return None;
        }
        if !first {
            tokio::time::sleep(interval).await;
            if rx.changed().await.is_err() {
                return None;
            }
        }
        let update = rx.borrow_and_update().clone();
        let terminal = update.state.is_terminal();
        let event = Event::default().event("progress").json_data(&update).unwrap_or_default();
        Some((Ok(event), (rx, false, terminal)))
    });
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

/// `data` holds XYZ samples; `z` alone is accepted for heightfield painting.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreviewRequest {
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub data: Option<Vec<f32>>,
    #[serde(default)]
    pub z: Option<Vec<f32>>,
    #[serde(default)]
    pub plane_side: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PreviewResponse {
    pub width: usize,
    pub height: usize,
    /// Vertex positions, xyz interleaved, row-major.
    pub positions: Vec<f32>,
    pub normals: Vec<f32>,
}

pub fn preview_mesh(req: &PreviewRequest) -> Result<PreviewResponse, String> {
    let vdm = match (&req.data, &req.z) {
        (Some(d), None) => VdmImage::new(req.width, req.height, d.clone()),
        (None, Some(z)) => VdmImage::from_heights(req.width, req.height, z),
        _ => return Err("exactly one of 'data' or 'z' is required".into()),
    }
    .map_err(|e| e.to_string())?;
    let scale = VdmScale::new(req.plane_side.unwrap_or(1.0)).map_err(|e| e.to_string())?;
    let mesh = build_grid_mesh(&vdm, &scale);
    let normals = mesh.vertex_normals().map_err(|e| e.to_string())?;
    let flat = |v: &[vdmforge_core::Vec3]| v.iter().flat_map(|p| [p.x as f32, p.y as f32, p.z as f32]).collect();
    Ok(PreviewResponse {
        width: req.width,
        height: req.height,
        positions: flat(mesh.vertices()),
        normals: flat(&normals),
    })
}

async fn preview(body: Bytes) -> Result<Json<PreviewResponse>, ApiError> {
    let req: PreviewRequest = serde_json::from_slice(&body)
        .map_err(|e| api_error(StatusCode::BAD_REQUEST, format!("malformed request: {e}")))?;
    preview_mesh(&req).map(Json).map_err(|e| api_error(StatusCode::UNPROCESSABLE_ENTITY, e))
}

#[derive(Deserialize)]
struct UploadQuery {
    #[serde(default)]
    kind: Option<String>,
}

#[derive(Serialize)]
struct Uploaded {
    /// Usable as a relative path in a submitted config.
    name: String,
    path: String,
}

/// Stores a PNG or EXR layer and returns the server path to reference from
/// a run config.
async fn upload(
    State(state): State<Arc<AppState>>,
    Query(q): Query<UploadQuery>,
    body: Bytes,
) -> Result<(StatusCode, Json<Uploaded>), ApiError> {
    let ext = if body.starts_with(b"\x89PNG\r\n\x1a\n") {
        "png"
    } else if body.starts_with(&[0x76, 0x2f, 0x31, 0x01]) {
        "exr"
    } else {
        return Err(api_error(StatusCode::UNSUPPORTED_MEDIA_TYPE, "expected a PNG or EXR file"));
    };
    let dir = state.cfg.data_dir.join("uploads");
    let n = state.next_upload.fetch_add(1, Ordering::Relaxed);
    let stem: String = q.kind.unwrap_or_else(|| "layer".into()).chars().filter(|c| c.is_ascii_alphanumeric()).collect();
    let name = format!("{n}-{stem}.{ext}");
    let path = dir.join(&name);
    let io = |e: std::io::Error| api_error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string());
    tokio::fs::create_dir_all(&dir).await.map_err(io)?;
    tokio::fs::write(&path, &body).await.map_err(io)?;
    Ok((StatusCode::CREATED, Json(Uploaded { name, path: path.to_string_lossy().into_owned() })))
}

async fn schema() -> impl IntoResponse {
    ([(header::CONTENT_TYPE, "application/schema+json")], SCHEMA)
}
