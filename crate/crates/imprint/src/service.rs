//! HTTP service exposing optimization sessions.
//!
//! | Route | |
//! |---|---|
//! | `POST /sessions` | create from a job object (returns 201 and the id) |
//! | `GET /sessions` | list |
//! | `GET /sessions/{id}` | state and frame summaries |
//! | `GET /sessions/{id}/frames` | server-sent events: `frame` per step, then `end` |
//! | `POST /sessions/{id}/stop` | stop and wait for the final decision |
//! | `POST /sessions/{id}/accept` | accept a frame (`{"frame_index": n}`, default best) |
//! | `GET /sessions/{id}/adapter?frame_index=n` | safetensors checkpoint |
//! | `GET /sessions/{id}/images/{i}`, `/thumbnails/{i}`, `/subject` | PNG |
//!
//! Sessions run on a fixed pool of worker threads in arrival order. Every
//! frame is on disk before it is announced, so a restarted service serves
//! the same streams from the session directories.

use std::collections::BTreeMap;
use std::convert::Infallible;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{mpsc, Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use futures::stream::{self, Stream};
use imprint_core::engine::{StopDecision, StopReason};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::watch;

use crate::job::{resolve, JobKind, JobSpec};
use crate::models::ModelCache;
use crate::session::{self, FrameRecord, SessionOptions, Status, Summary};
use crate::{io, Error, Result};

pub const ROOT_ENV: &str = "IMPRINT_SESSION_ROOT";
pub const BIND_ENV: &str = "IMPRINT_BIND";
pub const WORKERS_ENV: &str = "IMPRINT_WORKERS";
pub const DEFAULT_BIND: &str = "127.0.0.1:8750";

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    /// One directory per session lives here.
    pub root: PathBuf,
    /// Relative job paths resolve against this.
    pub workdir: PathBuf,
    pub workers: usize,
    pub cache: ModelCache,
}

struct Inner {
    status: Status,
    frames: Vec<(FrameRecord, String)>,
    summary: Option<Summary>,
}

struct Session {
    id: String,
    dir: PathBuf,
    spec: JobSpec,
    stop: AtomicBool,
    inner: Mutex<Inner>,
    version: watch::Sender<u64>,
}

impl Session {
    fn new(id: String, dir: PathBuf, spec: JobSpec, inner: Inner) -> Self {
        Self { id, dir, spec, stop: AtomicBool::new(false), inner: Mutex::new(inner), version: watch::channel(0).0 }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().expect("session lock")
    }

    fn bump(&self) {
        self.version.send_modify(|v| *v += 1);
    }

    fn push_frame(&self, rec: &FrameRecord, line: &str) {
        self.lock().frames.push((rec.clone(), line.to_string()));
        self.bump();
    }

    fn finish(&self, summary: Summary) {
        {
            let mut g = self.lock();
            g.status = summary.status;
            g.summary = Some(summary);
        }
        self.bump();
    }

    fn status(&self) -> Status {
        self.lock().status
    }
}

/// Sessions, their queue and the worker pool.
pub struct Service {
    config: ServiceConfig,
    sessions: RwLock<BTreeMap<String, Arc<Session>>>,
    queue: Mutex<mpsc::Sender<Arc<Session>>>,
    next_id: AtomicU64,
}

fn parse_id(name: &str) -> Option<u64> {
    name.strip_prefix('s')?.parse().ok()
}

impl Service {
    /// Loads sessions found under the root, marks unfinished ones failed and
    /// starts the workers.
    pub fn start(config: ServiceConfig) -> Result<Arc<Self>> {
        std::fs::create_dir_all(&config.root).map_err(|e| Error::io(&config.root, e))?;
        let mut sessions = BTreeMap::new();
        let mut max_id = 0;
        let mut entries: Vec<_> = std::fs::read_dir(&config.root)
            .map_err(|e| Error::io(&config.root, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.join(session::JOB_FILE).is_file())
            .collect();
        entries.sort();
        for dir in entries {
            let Some(id) = dir.file_name().and_then(|n| n.to_str()).map(str::to_string) else { continue };
            let Some(n) = parse_id(&id) else { continue };
            max_id = max_id.max(n);
            let spec = session::read_job(&dir)?;
            let frames = session::read_frames(&dir)?;
            let summary = match session::read_summary(&dir)? {
                Some(s) if s.status.is_terminal() => s,
                _ => {
                    let s = Summary::failed(&spec, frames.len(), "service restarted before the session finished".into());
                    session::write_summary(&dir, &s)?;
                    s
                }
            };
            let inner = Inner { status: summary.status, frames, summary: Some(summary) };
            sessions.insert(id.clone(), Arc::new(Session::new(id, dir, spec, inner)));
        }

        let (tx, rx) = mpsc::channel::<Arc<Session>>();
        let rx = Arc::new(Mutex::new(rx));
        for _ in 0..config.workers.max(1) {
            let rx = rx.clone();
            let workdir = config.workdir.clone();
            let cache = config.cache.clone();
            std::thread::spawn(move || loop {
                let next = rx.lock().expect("queue lock").recv();
                match next {
                    Ok(s) => work(&s, &workdir, &cache),
                    Err(_) => break,
                }
            });
        }
        Ok(Arc::new(Self {
            config,
            sessions: RwLock::new(sessions),
            queue: Mutex::new(tx),
            next_id: AtomicU64::new(max_id + 1),
        }))
    }

    fn get(&self, id: &str) -> Option<Arc<Session>> {
        self.sessions.read().expect("registry lock").get(id).cloned()
    }

    /// Validates, persists and queues a job. `body` is a job object plus an
    /// optional `uploads` object of base64 PNGs (`subject`, `input`, `mask`).
    pub fn create(&self, mut body: Value) -> Result<String> {
        let obj = body.as_object_mut().ok_or_else(|| Error::Job { field: ".".into(), message: "expected a JSON object".into() })?;
        let uploads = obj.remove("uploads");
        let kind: JobKind = match obj.get("kind") {
            Some(k) => serde_json::from_value(k.clone()).map_err(|e| Error::Job { field: "kind".into(), message: e.to_string() })?,
            None => JobKind::Generate,
        };
        let id = format!("s{:06}", self.next_id.fetch_add(1, Ordering::Relaxed));
        let dir = self.config.root.join(&id);
        let mut files = Vec::new();
        if let Some(up) = uploads {
            let up = up.as_object().ok_or_else(|| Error::Job { field: "uploads".into(), message: "expected an object".into() })?;
            for (key, v) in up {
                if !matches!(key.as_str(), "subject" | "input" | "mask") {
                    return Err(Error::Job { field: format!("uploads.{key}"), message: "unknown upload".into() });
                }
                let field = format!("uploads.{key}");
                let text = v.as_str().ok_or_else(|| Error::Job { field: field.clone(), message: "expected base64 text".into() })?;
                let bytes = base64::engine::general_purpose::STANDARD
                    .decode(text)
                    .map_err(|e| Error::Job { field: field.clone(), message: e.to_string() })?;
                let path = dir.join(format!("upload_{key}.png"));
                io::decode_image(&bytes, &path).map_err(|e| Error::Job { field, message: e.to_string() })?;
                obj.insert(key.clone(), Value::String(path.display().to_string()));
                files.push((path, bytes));
            }
        }
        let spec = resolve(kind, &[body])?;
        for (path, bytes) in files {
            io::write_bytes(&path, &bytes)?;
        }
        let job = serde_json::to_string_pretty(&spec).expect("job specs serialize");
        io::write_bytes(&dir.join(session::JOB_FILE), job.as_bytes())?;
        let inner = Inner { status: Status::Pending, frames: Vec::new(), summary: None };
        let s = Arc::new(Session::new(id.clone(), dir, spec, inner));
        self.sessions.write().expect("registry lock").insert(id.clone(), s.clone());
        self.queue.lock().expect("queue lock").send(s).map_err(|_| Error::Runtime("worker pool is gone".into()))?;
        Ok(id)
    }
}

fn work(s: &Session, workdir: &Path, cache: &ModelCache) {
    {
        let mut g = s.lock();
        if g.status != Status::Pending {
            return;
        }
        g.status = Status::Running;
    }
    s.bump();
    let notify: session::Notify<'_> = Box::new(|rec, line| s.push_frame(rec, line));
    let opts = SessionOptions { workdir, cache, stop: &s.stop, notify: Some(notify) };
    let summary = match session::run_session(&s.spec, &s.dir, opts) {
        Ok(sum) => sum,
        Err(e) => session::read_summary(&s.dir)
            .ok()
            .flatten()
            .unwrap_or_else(|| Summary::failed(&s.spec, s.lock().frames.len(), e.to_string())),
    };
    s.finish(summary);
}

#[derive(Serialize)]
struct FrameSummary<'a> {
    index: usize,
    loss_total: f64,
    loss_components: &'a BTreeMap<String, f64>,
    thumbnail: String,
    image: String,
}

fn view(s: &Session) -> Value {
    let g = s.lock();
    let frames: Vec<FrameSummary<'_>> = g
        .frames
        .iter()
        .map(|(r, _)| FrameSummary {
            index: r.step_index,
            loss_total: r.loss_total,
            loss_components: &r.loss_components,
            thumbnail: format!("/sessions/{}/thumbnails/{}", s.id, r.step_index),
            image: format!("/sessions/{}/images/{}", s.id, r.step_index),
        })
        .collect();
    let sum = g.summary.as_ref();
    json!({
        "session_id": s.id,
        "status": g.status,
        "job": s.spec,
        "config_hash": s.spec.config_hash(),
        "frames": frames,
        "best_index": sum.and_then(|x| x.best_index),
        "decision": sum.and_then(|x| x.decision.clone()),
        "accepted_index": sum.and_then(|x| x.accepted_index),
        "error": sum.and_then(|x| x.error.clone()),
        "warnings": sum.map(|x| x.warnings.clone()).unwrap_or_default(),
    })
}

/// Terminal stream payload; depends only on persisted fields.
fn end_payload(g: &Inner) -> String {
    let sum = g.summary.as_ref();
    json!({
        "decision": sum.and_then(|x| x.decision.clone()),
        "best_index": sum.and_then(|x| x.best_index),
        "frames": g.frames.len(),
        "error": sum.and_then(|x| x.error.clone()),
    })
    .to_string()
}

struct ApiError(StatusCode, Value);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

fn not_found(id: &str) -> ApiError {
    ApiError(StatusCode::NOT_FOUND, json!({"error": format!("no session `{id}`")}))
}

fn api(status: StatusCode, message: impl ToString) -> ApiError {
    ApiError(status, json!({"error": message.to_string()}))
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match &e {
            Error::Job { field, message } => {
                ApiError(StatusCode::UNPROCESSABLE_ENTITY, json!({"error": e.to_string(), "field": field, "message": message}))
            }
            e if e.is_user_error() => api(StatusCode::UNPROCESSABLE_ENTITY, e),
            e => api(StatusCode::INTERNAL_SERVER_ERROR, e),
        }
    }
}

type Svc = State<Arc<Service>>;

async fn create(State(svc): Svc, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    let v: Value = serde_json::from_slice(&body).map_err(|e| api(StatusCode::BAD_REQUEST, format!("malformed JSON: {e}")))?;
    let svc2 = svc.clone();
    let id = tokio::task::spawn_blocking(move || svc2.create(v)).await.map_err(|e| api(StatusCode::INTERNAL_SERVER_ERROR, e))??;
    Ok((StatusCode::CREATED, Json(json!({"session_id": id, "status": Status::Pending}))))
}

async fn list(State(svc): Svc) -> Json<Value> {
    let all: Vec<Value> = svc
        .sessions
        .read()
        .expect("registry lock")
        .values()
        .map(|s| {
            let g = s.lock();
            json!({"session_id": s.id, "status": g.status, "frames": g.frames.len()})
        })
        .collect();
    Json(Value::Array(all))
}

async fn show(State(svc): Svc, UrlPath(id): UrlPath<String>) -> Result<Json<Value>, ApiError> {
    let s = svc.get(&id).ok_or_else(|| not_found(&id))?;
    Ok(Json(view(&s)))
}

async fn frames(
    State(svc): Svc,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
) -> Result<Sse<impl Stream<Item = std::result::Result<Event, Infallible>>>, ApiError> {
    let s = svc.get(&id).ok_or_else(|| not_found(&id))?;
    let start = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse::<usize>().ok())
        .map_or(0, |i| i + 1);
    let rx = s.version.subscribe();
    let events = stream::unfold(Some((s, rx, start)), |state| async move {
        let (s, mut rx, next) = state?;
        loop {
            rx.borrow_and_update();
            {
                let g = s.lock();
                if let Some((_, line)) = g.frames.get(next) {
                    let ev = Event::default().event("frame").id(next.to_string()).data(line.clone());
                    drop(g);
                    return Some((Ok(ev), Some((s, rx, next + 1))));
                }
                if g.status.is_terminal() {
                    let ev = Event::default().event("end").data(end_payload(&g));
                    return Some((Ok(ev), None));
                }
            }
            if rx.changed().await.is_err() {
                return None;
            }
        }
    });
    Ok(Sse::new(events).keep_alive(KeepAlive::default()))
}

async fn stop(State(svc): Svc, UrlPath(id): UrlPath<String>) -> Result<Json<Value>, ApiError> {
    let s = svc.get(&id).ok_or_else(|| not_found(&id))?;
    s.stop.store(true, Ordering::Release);
    let not_started = {
        let mut g = s.lock();
        if g.status == Status::Pending {
            g.status = Status::StoppedByUser;
            let decision = StopDecision {
                reason: StopReason::UserStop,
                stop_index: 0,
                message: Some("stopped before the first step".into()),
            };
            let mut sum = Summary::failed(&s.spec, 0, String::new());
            sum.status = Status::StoppedByUser;
            sum.error = None;
            sum.decision = Some(decision);
            Some(sum)
        } else {
            None
        }
    };
    if let Some(sum) = not_started {
        session::write_summary(&s.dir, &sum)?;
        s.finish(sum);
    }
    let mut rx = s.version.subscribe();
    let _ = rx.wait_for(|_| s.status().is_terminal()).await;
    let g = s.lock();
    Ok(Json(json!({
        "session_id": s.id,
        "status": g.status,
        "decision": g.summary.as_ref().and_then(|x| x.decision.clone()),
        "frames": g.frames.len(),
    })))
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct AcceptBody {
    frame_index: Option<usize>,
}

async fn accept(State(svc): Svc, UrlPath(id): UrlPath<String>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let s = svc.get(&id).ok_or_else(|| not_found(&id))?;
    let req: AcceptBody = if body.is_empty() {
        AcceptBody::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| api(StatusCode::UNPROCESSABLE_ENTITY, e))?
    };
    let sum = {
        let mut g = s.lock();
        if !g.status.is_terminal() {
            return Err(api(StatusCode::CONFLICT, format!("session is {:?}; stop it or let it finish first", g.status)));
        }
        let n = g.frames.len();
        let mut sum = g.summary.clone().ok_or_else(|| api(StatusCode::CONFLICT, "session has no summary"))?;
        let index = req.frame_index.or(sum.best_index).ok_or_else(|| api(StatusCode::CONFLICT, "session has no frames"))?;
        if index >= n {
            return Err(api(StatusCode::BAD_REQUEST, format!("frame_index {index} out of range (0..{n})")));
        }
        sum.status = Status::Accepted;
        sum.accepted_index = Some(index);
        g.status = Status::Accepted;
        g.summary = Some(sum.clone());
        sum
    };
    session::write_summary(&s.dir, &sum)?;
    s.bump();
    Ok(Json(view(&s)))
}

#[derive(Deserialize)]
struct AdapterQuery {
    frame_index: Option<usize>,
}

async fn adapter(State(svc): Svc, UrlPath(id): UrlPath<String>, Query(q): Query<AdapterQuery>) -> Result<Response, ApiError> {
    let s = svc.get(&id).ok_or_else(|| not_found(&id))?;
    let (index, n) = {
        let g = s.lock();
        let n = g.frames.len();
        let best = g.summary.as_ref().and_then(|x| x.best_index);
        let index = q.frame_index.or(best).or(n.checked_sub(1)).ok_or_else(|| api(StatusCode::CONFLICT, "session has no frames yet"))?;
        (index, n)
    };
    if index >= n {
        return Err(api(StatusCode::BAD_REQUEST, format!("frame_index {index} out of range (0..{n})")));
    }
    let path = s.dir.join(session::adapter_path(index));
    let bytes = tokio::fs::read(&path).await.map_err(|e| ApiError::from(Error::io(&path, e)))?;
    let disposition = format!("attachment; filename=\"{}-step{index:04}.safetensors\"", s.id);
    Ok(([(header::CONTENT_TYPE, "application/octet-stream".to_string()), (header::CONTENT_DISPOSITION, disposition)], bytes).into_response())
}

async fn png(path: PathBuf) -> Result<Response, ApiError> {
    match tokio::fs::read(&path).await {
        Ok(b) => Ok(([(header::CONTENT_TYPE, "image/png")], b).into_response()),
        Err(_) => Err(api(StatusCode::NOT_FOUND, "no such image")),
    }
}

async fn frame_image(State(svc): Svc, UrlPath((id, i)): UrlPath<(String, usize)>) -> Result<Response, ApiError> {
    let s = svc.get(&id).ok_or_else(|| not_found(&id))?;
    png(s.dir.join(session::frame_path(i))).await
}

async fn thumbnail(State(svc): Svc, UrlPath((id, i)): UrlPath<(String, usize)>) -> Result<Response, ApiError> {
    let s = svc.get(&id).ok_or_else(|| not_found(&id))?;
    png(s.dir.join(session::thumbnail_path(i))).await
}

async fn subject(State(svc): Svc, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let s = svc.get(&id).ok_or_else(|| not_found(&id))?;
    png(s.dir.join("subject.png")).await
}

pub fn router(svc: Arc<Service>) -> Router {
    Router::new()
        .route("/sessions", post(create).get(list))
        .route("/sessions/{id}", get(show))
        .route("/sessions/{id}/frames", get(frames))
        .route("/sessions/{id}/stop", post(stop))
        .route("/sessions/{id}/accept", post(accept))
        .route("/sessions/{id}/adapter", get(adapter))
        .route("/sessions/{id}/images/{i}", get(frame_image))
        .route("/sessions/{id}/thumbnails/{i}", get(thumbnail))
        .route("/sessions/{id}/subject", get(subject))
        .with_state(svc)
}

/// Serves until Ctrl-C.
pub async fn serve(config: ServiceConfig, bind: &str) -> Result<()> {
    let svc = Service::start(config)?;
    let listener = tokio::net::TcpListener::bind(bind).await.map_err(|e| Error::Runtime(format!("bind {bind}: {e}")))?;
    tracing::info!("listening on {}", listener.local_addr().map(|a| a.to_string()).unwrap_or_default());
    axum::serve(listener, router(svc))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Error::Runtime(e.to_string()))
}
