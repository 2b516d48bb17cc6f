//! HTTP+JSON service for refinement sessions and one-shot refinement.
//!
//! Sessions live in memory and are appended to a JSONL log as full
//! snapshots, so a restarted server picks them up again. Requests on one
//! session are serialized; the loaded checkpoint is an immutable snapshot
//! that can be swapped while requests are in flight.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex as StdMutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Mutex;

use crate::corpus::render_prompt;
use crate::error::{Error, Result};
use crate::sampler::{generate, select_and_continue, start_session, RefinementSession, SamplingConfig, SessionStatus};
use crate::trainer::Checkpoint;

/// A loaded checkpoint and its content hash.
pub struct Snapshot {
    pub checkpoint: Checkpoint,
    pub hash: String,
}

impl Snapshot {
    pub fn new(checkpoint: Checkpoint) -> Result<Self> {
        let hash = checkpoint.hash()?;
        Ok(Self { checkpoint, hash })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredSession {
    session: RefinementSession,
    created_at_ms: u64,
    updated_at_ms: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct LogEntry {
    at_ms: u64,
    #[serde(flatten)]
    stored: StoredSession,
}

#[derive(Debug, Clone)]
pub struct GatewayOptions {
    /// Defaults merged under each session's `config`.
    pub sampling: SamplingConfig,
    pub thumbnails: bool,
    pub thumbnail_size: usize,
    pub session_log: Option<PathBuf>,
}

impl Default for GatewayOptions {
    fn default() -> Self {
        Self {
            sampling: SamplingConfig::default(),
            thumbnails: true,
            thumbnail_size: 32,
            session_log: None,
        }
    }
}

type SessionCell = Arc<Mutex<StoredSession>>;

pub struct AppState {
    snapshot: RwLock<Option<Arc<Snapshot>>>,
    sessions: StdMutex<HashMap<String, SessionCell>>,
    log: Option<StdMutex<File>>,
    options: GatewayOptions,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

/// Latest snapshot per session id from an append-only log.
pub fn read_session_log(path: &Path) -> Result<Vec<RefinementSession>> {
    Ok(load_log(path)?.into_values().map(|s| s.session).collect())
}

fn load_log(path: &Path) -> Result<HashMap<String, StoredSession>> {
    let mut out = HashMap::new();
    if !path.exists() {
        return Ok(out);
    }
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: LogEntry = serde_json::from_str(&line).map_err(|e| Error::Jsonl {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.insert(entry.stored.session.id.clone(), entry.stored);
    }
    Ok(out)
}

impl AppState {
    /// Restores sessions from `options.session_log` when the file exists.
    pub fn new(checkpoint: Option<Checkpoint>, options: GatewayOptions) -> Result<Arc<Self>> {
        options.sampling.validate()?;
        let snapshot = checkpoint.map(Snapshot::new).transpose()?.map(Arc::new);
        let (sessions, log) = match &options.session_log {
            Some(path) => {
                let restored = load_log(path)?;
                let file = OpenOptions::new().create(true).append(true).open(path)?;
                let sessions = restored.into_iter().map(|(k, v)| (k, Arc::new(Mutex::new(v)))).collect();
                (sessions, Some(StdMutex::new(file)))
            }
            None => (HashMap::new(), None),
        };
        Ok(Arc::new(Self {
            snapshot: RwLock::new(snapshot),
            sessions: StdMutex::new(sessions),
            log,
            options,
        }))
    }

    /// Publishes a new checkpoint; requests already running keep the old one.
    pub fn swap_checkpoint(&self, checkpoint: Checkpoint) -> Result<()> {
        let snap = Arc::new(Snapshot::new(checkpoint)?);
        *self.snapshot.write().unwrap() = Some(snap);
        Ok(())
    }

    pub fn snapshot(&self) -> Option<Arc<Snapshot>> {
        self.snapshot.read().unwrap().clone()
    }

    pub async fn session(&self, id: &str) -> Option<RefinementSession> {
        let cell = self.sessions.lock().unwrap().get(id).cloned()?;
        let s = cell.lock().await.session.clone();
        Some(s)
    }

    fn append_log(&self, stored: &StoredSession) -> Result<()> {
        if let Some(log) = &self.log {
            let entry = LogEntry {
                at_ms: stored.updated_at_ms,
                stored: stored.clone(),
            };
            let mut line = serde_json::to_string(&entry)?;
            line.push('\n');
            let mut f = log.lock().unwrap();
            f.write_all(line.as_bytes())?;
            f.flush()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CandidateView {
    pub index: usize,
    pub text: String,
    pub new_tokens: usize,
    pub finished: bool,
    /// `data:image/png;base64,...` toy render of the candidate text.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub thumbnail: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RoundView {
    pub prefix: String,
    pub selected: Option<usize>,
    pub candidates: Vec<CandidateView>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SessionResource {
    pub id: String,
    pub status: SessionStatus,
    pub coarse_prompt: String,
    pub config: SamplingConfig,
    pub rounds: Vec<RoundView>,
    pub thumbnails_note: String,
    pub created_at_ms: u64,
    pub updated_at_ms: u64,
}

const THUMBNAIL_NOTE: &str = "thumbnails are illustrative toy-world renders of the candidate text, not diffusion outputs";

fn thumbnail(text: &str, seed: u64, size: usize) -> String {
    let png = render_prompt(text, seed, size, size).to_png_bytes();
    format!("data:image/png;base64,{}", base64::engine::general_purpose::STANDARD.encode(png))
}

fn resource(stored: &StoredSession, opts: &GatewayOptions) -> SessionResource {
    let s = &stored.session;
    SessionResource {
        id: s.id.clone(),
        status: s.status(),
        coarse_prompt: s.root_prompt.clone(),
        config: s.config.clone(),
        rounds: s
            .rounds
            .iter()
            .map(|r| RoundView {
                prefix: r.prefix.clone(),
                selected: r.selected,
                candidates: r
                    .candidates
                    .iter()
                    .enumerate()
                    .map(|(i, c)| CandidateView {
                        index: i,
                        text: c.text.clone(),
                        new_tokens: c.new_tokens,
                        finished: c.finished,
                        thumbnail: opts.thumbnails.then(|| thumbnail(&c.text, c.seed, opts.thumbnail_size)),
                    })
                    .collect(),
            })
            .collect(),
        thumbnails_note: THUMBNAIL_NOTE.into(),
        created_at_ms: stored.created_at_ms,
        updated_at_ms: stored.updated_at_ms,
    }
}

/// JSON error body with a status code.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config(_) | Error::GenerationLength { .. } => StatusCode::BAD_REQUEST,
            Error::SessionState(_) | Error::SessionComplete => StatusCode::CONFLICT,
            Error::CandidateIndex { .. } => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

fn loaded(state: &AppState) -> ApiResult<Arc<Snapshot>> {
    state
        .snapshot()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no checkpoint loaded"))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(ApiError::from)
}

#[derive(Debug, Deserialize)]
pub struct CreateSession {
    pub coarse_prompt: String,
    /// Partial sampling config laid over the server defaults.
    #[serde(default)]
    pub config: Option<Value>,
}

/// Server defaults overlaid with the request's keys. Without an explicit
/// seed each session gets a fresh random one, which is recorded in its config.
fn merge_config(defaults: &SamplingConfig, overrides: Option<Value>) -> ApiResult<SamplingConfig> {
    let mut base = serde_json::to_value(defaults).expect("config serializes");
    let mut has_seed = false;
    if let Some(v) = overrides {
        let Value::Object(map) = v else {
            return Err(ApiError::new(StatusCode::BAD_REQUEST, "config must be an object"));
        };
        has_seed = map.contains_key("seed");
        for (k, v) in map {
            base[k] = v;
        }
    }
    let mut cfg: SamplingConfig =
        serde_json::from_value(base).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    if !has_seed {
        cfg.seed = rand::random();
    }
    cfg.validate()?;
    Ok(cfg)
}

async fn create_session(State(state): State<Arc<AppState>>, Json(req): Json<CreateSession>) -> ApiResult<(StatusCode, Json<SessionResource>)> {
    if req.coarse_prompt.trim().is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "coarse_prompt is empty"));
    }
    let snap = loaded(&state)?;
    let cfg = merge_config(&state.options.sampling, req.config)?;
    let id = uuid::Uuid::new_v4().to_string();
    let prompt = req.coarse_prompt;
    let session = blocking(move || {
        let ck = &snap.checkpoint;
        start_session(&ck.model, &ck.vocab, id, &prompt, &cfg)
    })
    .await?;
    let now = now_ms();
    let stored = StoredSession {
        session,
        created_at_ms: now,
        updated_at_ms: now,
    };
    state.append_log(&stored)?;
    let body = resource(&stored, &state.options);
    state
        .sessions
        .lock()
        .unwrap()
        .insert(stored.session.id.clone(), Arc::new(Mutex::new(stored)));
    Ok((StatusCode::CREATED, Json(body)))
}

fn cell(state: &AppState, id: &str) -> ApiResult<SessionCell> {
    state
        .sessions
        .lock()
        .unwrap()
        .get(id)
        .cloned()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no session `{id}`")))
}

async fn get_session(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<SessionResource>> {
    let cell = cell(&state, &id)?;
    let stored = cell.lock().await;
    Ok(Json(resource(&stored, &state.options)))
}

#[derive(Debug, Deserialize)]
pub struct SelectRequest {
    pub candidate_index: usize,
}

async fn select_candidate(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<SelectRequest>,
) -> ApiResult<Json<SessionResource>> {
    let cell = cell(&state, &id)?;
    let mut stored = cell.lock().await;
    let snap = loaded(&state)?;
    let mut session = stored.session.clone();
    let session = blocking(move || {
        let ck = &snap.checkpoint;
        select_and_continue(&ck.model, &ck.vocab, &mut session, req.candidate_index)?;
        Ok(session)
    })
    .await?;
    stored.session = session;
    stored.updated_at_ms = now_ms().max(stored.created_at_ms);
    state.append_log(&stored)?;
    Ok(Json(resource(&stored, &state.options)))
}

#[derive(Debug, Deserialize)]
pub struct RefineRequest {
    pub coarse_prompt: String,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: usize,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_max_tokens() -> usize {
    SamplingConfig::default().max_tokens
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RefineResponse {
    pub fine_prompt: String,
    pub new_tokens: usize,
    pub seed: u64,
}

async fn refine(State(state): State<Arc<AppState>>, Json(req): Json<RefineRequest>) -> ApiResult<Json<RefineResponse>> {
    if req.coarse_prompt.trim().is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "coarse_prompt is empty"));
    }
    let snap = loaded(&state)?;
    let cfg = SamplingConfig {
        max_tokens: req.max_tokens,
        seed: req.seed.unwrap_or_else(rand::random),
        ..state.options.sampling.clone()
    };
    cfg.validate()?;
    let seed = cfg.seed;
    let g = blocking(move || {
        let ck = &snap.checkpoint;
        generate(&ck.model, &ck.vocab, &req.coarse_prompt, &cfg)
    })
    .await?;
    Ok(Json(RefineResponse {
        fine_prompt: g.fine_prompt,
        new_tokens: g.tokens.len(),
        seed,
    }))
}

async fn healthz(State(state): State<Arc<AppState>>) -> Json<Value> {
    match state.snapshot() {
        Some(s) => Json(json!({ "status": "ok", "checkpoint_hash": s.hash })),
        None => Json(json!({ "status": "degraded", "checkpoint_hash": null })),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/select", post(select_candidate))
        .route("/refine", post(refine))
        .route("/healthz", get(healthz))
        .with_state(state)
}

/// Serves until ctrl-c.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
