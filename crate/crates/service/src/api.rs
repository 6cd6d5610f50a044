//! HTTP routes over elicitation sessions. Every numeric value in a response
//! comes straight from the library; this layer only moves data.

use std::collections::HashMap;
use std::future::Future;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use prior_loom::elicitation::{SessionConfig, SessionState};
use prior_loom::embedding::Layout;
use prior_loom::metric::read_feedback_jsonl;
use serde::{Deserialize, Serialize};

use crate::registry::{DatasetInfo, DatasetRegistry};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(120);
pub const JSONL: &str = "application/x-ndjson";

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Holds registered matrices and session snapshots.
    pub data_dir: PathBuf,
    pub request_timeout: Duration,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self {
            data_dir: data_dir.into(),
            request_timeout: DEFAULT_TIMEOUT,
        }
    }
}

#[derive(Debug)]
pub struct SessionSlot {
    pub id: String,
    pub created_at_ms: u64,
    pub dataset: String,
    /// Mutations take the write half, so requests on one session are applied
    /// one at a time while reads may overlap.
    pub state: Arc<tokio::sync::RwLock<SessionState>>,
}

#[derive(Debug)]
pub struct AppState {
    pub config: ServiceConfig,
    datasets: RwLock<DatasetRegistry>,
    sessions: RwLock<HashMap<String, Arc<SessionSlot>>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(config: ServiceConfig, datasets: DatasetRegistry) -> Self {
        Self {
            config,
            datasets: RwLock::new(datasets),
            sessions: RwLock::new(HashMap::new()),
            next_id: AtomicU64::new(0),
        }
    }

    /// Registers every matrix file found in the data directory.
    pub fn open(config: ServiceConfig) -> std::io::Result<Self> {
        let datasets = DatasetRegistry::scan(&config.data_dir)?;
        Ok(Self::new(config, datasets))
    }

    pub fn datasets_len(&self) -> usize {
        self.datasets.read().expect("dataset registry poisoned").list().len()
    }

    pub fn session(&self, id: &str) -> Result<Arc<SessionSlot>, ApiError> {
        self.sessions
            .read()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("unknown session {id:?}")))
    }

    fn dataset(&self, name: &str) -> Result<Arc<prior_loom::corpus::FeatureMatrix>, ApiError> {
        self.datasets
            .read()
            .expect("dataset registry poisoned")
            .get(name)
            .ok_or_else(|| ApiError::NotFound(format!("unknown dataset {name:?}")))
    }

    fn fresh_id(&self) -> String {
        format!("s{:016x}", self.next_id.fetch_add(1, Ordering::Relaxed))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/datasets", get(list_datasets).post(register_dataset))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/layout", get(get_layout))
        .route("/sessions/{id}/feedback", post(post_feedback))
        .route("/sessions/{id}/refresh", post(post_refresh))
        .route("/sessions/{id}/metrics", get(get_metrics))
        .route("/sessions/{id}/snapshot", post(post_snapshot))
        .with_state(state)
}

#[derive(Debug)]
pub enum ApiError {
    NotFound(String),
    BadRequest(String),
    Timeout,
    Internal(String),
}

impl From<prior_loom::Error> for ApiError {
    fn from(e: prior_loom::Error) -> Self {
        use prior_loom::Error as E;
        match e {
            E::InvalidArgument(_)
            | E::EmptyFeedback
            | E::Json(_)
            | E::DimensionMismatch { .. }
            | E::MalformedRecord { .. }
            | E::DegenerateFeatures(_)
            | E::Config(_) => ApiError::BadRequest(e.to_string()),
            other => ApiError::Internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, message) = match self {
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, m),
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, m),
            ApiError::Timeout => (StatusCode::GATEWAY_TIMEOUT, "request timed out".to_owned()),
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, m),
        };
        (status, Json(serde_json::json!({ "error": message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn with_timeout<T>(state: &AppState, work: impl Future<Output = ApiResult<T>>) -> ApiResult<T> {
    tokio::time::timeout(state.config.request_timeout, work)
        .await
        .unwrap_or(Err(ApiError::Timeout))
}

async fn blocking<T: Send + 'static>(work: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(work)
        .await
        .unwrap_or_else(|e| Err(ApiError::Internal(format!("worker failed: {e}"))))
}

fn parse_json<T: for<'de> Deserialize<'de>>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(format!("malformed body: {e}")))
}

fn jsonl_response(text: String) -> Response {
    ([(header::CONTENT_TYPE, JSONL)], text).into_response()
}

/// One layout point, the same record the layout jsonl files hold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutPoint {
    pub index: usize,
    pub name: String,
    pub x: f64,
    pub y: f64,
}

pub fn layout_points(layout: &Layout, names: &[String]) -> Vec<LayoutPoint> {
    (0..layout.len())
        .map(|i| {
            let [x, y] = layout.point(i);
            LayoutPoint {
                index: i,
                name: names.get(i).cloned().unwrap_or_default(),
                x,
                y,
            }
        })
        .collect()
}

async fn list_datasets(State(state): State<Arc<AppState>>) -> Json<Vec<DatasetInfo>> {
    Json(state.datasets.read().expect("dataset registry poisoned").list())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegisterDataset {
    pub name: String,
    /// Relative paths resolve against the data directory.
    pub path: PathBuf,
}

async fn register_dataset(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<DatasetInfo>> {
    let request: RegisterDataset = parse_json(&body)?;
    let path = if request.path.is_relative() {
        state.config.data_dir.join(&request.path)
    } else {
        request.path.clone()
    };
    let matrix_path = path.clone();
    let loaded = blocking(move || {
        prior_loom::corpus::FeatureMatrix::load(&matrix_path).map_err(|e| ApiError::BadRequest(e.to_string()))
    });
    let matrix = with_timeout(&state, loaded).await?;
    let info = state
        .datasets
        .write()
        .expect("dataset registry poisoned")
        .insert(&request.name, &path, matrix)?;
    Ok(Json(info))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateSession {
    pub dataset: String,
    #[serde(default)]
    pub config: SessionConfig,
    /// When false the session opens on the plain projection without layout
    /// optimization.
    #[serde(default = "default_true")]
    pub optimize_layout: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub id: String,
    pub created_at_ms: u64,
    pub dataset: String,
    pub round: u32,
    pub layout: Vec<LayoutPoint>,
}

async fn create_session(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<SessionCreated>> {
    let request: CreateSession = parse_json(&body)?;
    let matrix = state.dataset(&request.dataset)?;
    let config = request.config;
    let optimize = request.optimize_layout;
    let session = with_timeout(
        &state,
        blocking(move || {
            let train = (*matrix).clone();
            let started = if optimize {
                SessionState::start(train, config)
            } else {
                SessionState::start_headless(train, config)
            };
            started.map_err(ApiError::from)
        }),
    )
    .await?;
    let created_at_ms = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64);
    let response = SessionCreated {
        id: state.fresh_id(),
        created_at_ms,
        dataset: request.dataset.clone(),
        round: session.round(),
        layout: layout_points(session.layout(), session.dataset().feature_names()),
    };
    let slot = SessionSlot {
        id: response.id.clone(),
        created_at_ms,
        dataset: request.dataset,
        state: Arc::new(tokio::sync::RwLock::new(session)),
    };
    state
        .sessions
        .write()
        .expect("session map poisoned")
        .insert(slot.id.clone(), Arc::new(slot));
    Ok(Json(response))
}

async fn get_layout(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let slot = state.session(&id)?;
    let session = slot.state.read().await;
    Ok(jsonl_response(
        session.layout().to_jsonl(session.dataset().feature_names()),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundReply {
    pub round: u32,
}

async fn post_feedback(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<RoundReply>> {
    let slot = state.session(&id)?;
    let text = std::str::from_utf8(&body).map_err(|_| ApiError::BadRequest("body is not utf-8".into()))?;
    let batch = read_feedback_jsonl(text)?;
    let lock = Arc::clone(&slot.state);
    let round = with_timeout(&state, async move {
        let mut session = lock.write_owned().await;
        blocking(move || session.submit_feedback(&batch).map_err(ApiError::from)).await
    })
    .await?;
    Ok(Json(RoundReply { round }))
}

async fn post_refresh(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let slot = state.session(&id)?;
    let lock = Arc::clone(&slot.state);
    let text = with_timeout(&state, async move {
        let mut session = lock.write_owned().await;
        blocking(move || {
            session.refresh_visualization()?;
            Ok(session.layout().to_jsonl(session.dataset().feature_names()))
        })
        .await
    })
    .await?;
    Ok(jsonl_response(text))
}

#[derive(Debug, Clone, Default, Deserialize)]
pub struct MetricsQuery {
    pub test_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub id: String,
    pub dataset: String,
    pub round: u32,
    pub feedback_count: usize,
    pub layout_iteration: u32,
    pub layout_current: bool,
    /// `None` while the layout is an unoptimized projection.
    pub layout_cost: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_mse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel_bandwidth: Option<f64>,
}

async fn get_metrics(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(query): Query<MetricsQuery>,
) -> ApiResult<Json<MetricsSummary>> {
    let slot = state.session(&id)?;
    let test = query.test_ref.as_deref().map(|r| state.dataset(r)).transpose()?;
    let lock = Arc::clone(&slot.state);
    let (id, dataset, test_ref) = (slot.id.clone(), slot.dataset.clone(), query.test_ref);
    let summary = with_timeout(&state, async move {
        let session = lock.read_owned().await;
        blocking(move || {
            let fitted = test.map(|t| session.finalize_and_fit(&t)).transpose()?;
            Ok(MetricsSummary {
                id,
                dataset,
                round: session.round(),
                feedback_count: session.metric().feedback_log().len(),
                layout_iteration: session.layout().iteration,
                layout_current: session.layout_is_current(),
                layout_cost: session.layout_cost(),
                test_ref,
                test_mse: fitted.as_ref().map(|f| f.test_mse),
                kernel_bandwidth: fitted.as_ref().map(|f| f.kernel_bandwidth()),
            })
        })
        .await
    })
    .await?;
    Ok(Json(summary))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotReply {
    pub path: PathBuf,
    pub round: u32,
}

async fn post_snapshot(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<SnapshotReply>> {
    let slot = state.session(&id)?;
    let dir = state.config.data_dir.join("sessions").join(&slot.id);
    let lock = Arc::clone(&slot.state);
    let reply = with_timeout(&state, async move {
        let session = lock.read_owned().await;
        blocking(move || {
            session.export_snapshot(&dir, None)?;
            Ok(SnapshotReply {
                path: dir,
                round: session.round(),
            })
        })
        .await
    })
    .await?;
    Ok(Json(reply))
}
