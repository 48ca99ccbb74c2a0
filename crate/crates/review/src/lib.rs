//! Review service: serves segmentation overlays to reviewers, stores their
//! grades and summarizes validity and inter-observer agreement.
//!
//! Endpoints (all JSON unless noted):
//!
//! | method | path | |
//! |---|---|---|
//! | GET | `/health` | liveness |
//! | GET | `/score-grid` | allowed scores |
//! | POST | `/sessions` | create a session |
//! | GET | `/sessions/{id}/slices?offset&limit` | paged slice list, per-reviewer order |
//! | GET | `/sessions/{id}/overlays/{patient}/{slice}` | overlay PNG |
//! | PUT | `/sessions/{id}/grades` | submit or replace a grade |
//! | GET | `/sessions/{id}/grades` | current grades |
//! | GET | `/sessions/{id}/history` | every submission |
//! | GET | `/sessions/{id}/summary?threshold` | review summary |
//!
//! Reviewer identity comes from the `X-Reviewer-Id` header.

pub mod store;
pub mod summary;

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use store::{discover_overlays, ReviewStore, SliceEntry};
pub use summary::{summarize, Grade, ReviewSummary, ReviewerStats, ScoreGrid, SummaryResponse, DEFAULT_VALIDITY_THRESHOLD};

pub const REVIEWER_HEADER: &str = "x-reviewer-id";
const DEFAULT_PAGE: usize = 50;
const MAX_PAGE: usize = 500;

#[derive(Debug, thiserror::Error)]
pub enum ReviewError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("overlays missing for {}", .0.join(", "))]
    MissingOverlays(Vec<String>),
    #[error("storage error: {0}")]
    Storage(#[from] rusqlite::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    missing: Vec<String>,
}

impl IntoResponse for ReviewError {
    fn into_response(self) -> Response {
        let status = match &self {
            ReviewError::NotFound(_) => StatusCode::NOT_FOUND,
            ReviewError::Validation(_) | ReviewError::MissingOverlays(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ReviewError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ReviewError::Storage(_) | ReviewError::Io { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let missing = match &self {
            ReviewError::MissingOverlays(m) => m.clone(),
            _ => Vec::new(),
        };
        let body = ErrorBody {
            error: self.to_string(),
            missing,
        };
        (status, Json(body)).into_response()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub grid: ScoreGrid,
    pub default_threshold: f64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            grid: ScoreGrid::default(),
            default_threshold: DEFAULT_VALIDITY_THRESHOLD,
        }
    }
}

pub struct AppState {
    store: Mutex<ReviewStore>,
    config: ServiceConfig,
}

impl AppState {
    pub fn open(db_path: &Path, config: ServiceConfig) -> Result<Arc<AppState>, ReviewError> {
        if !config.grid.is_valid() {
            return Err(ReviewError::Validation(format!("invalid score grid {:?}", config.grid)));
        }
        Ok(Arc::new(AppState {
            store: Mutex::new(ReviewStore::open(db_path)?),
            config,
        }))
    }

    fn store(&self) -> std::sync::MutexGuard<'_, ReviewStore> {
        // A panic while holding the lock cannot leave SQLite half-written,
        // so a poisoned lock is still usable.
        self.store.lock().unwrap_or_else(|e| e.into_inner())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateSession {
    pub patients: Vec<String>,
    /// Directory holding `<patient_id>/overlay_###.png`.
    pub overlay_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: i64,
    pub slices: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SliceView {
    pub position: usize,
    pub patient_id: String,
    pub slice_index: u32,
    pub overlay_url: String,
    /// This reviewer's current score, if any.
    pub score: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlicePage {
    pub session_id: i64,
    pub reviewer_id: Option<String>,
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
    pub items: Vec<SliceView>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradeSubmission {
    pub patient_id: String,
    pub slice_index: u32,
    pub score: f64,
}

#[derive(Debug, Deserialize)]
struct PageQuery {
    offset: Option<usize>,
    limit: Option<usize>,
}

#[derive(Debug, Deserialize)]
struct SummaryQuery {
    threshold: Option<f64>,
}

fn now_ms() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as i64)
        .unwrap_or(0)
}

fn fnv1a(text: &str) -> u64 {
    text.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Blinded slice order for one reviewer: a permutation of `0..n` fixed by
/// the session seed and the reviewer id.
pub fn reviewer_order(n: usize, seed: u64, reviewer_id: &str) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(reviewer_id));
    order.shuffle(&mut rng);
    order
}

fn reviewer(headers: &HeaderMap) -> Result<Option<String>, ReviewError> {
    match headers.get(REVIEWER_HEADER) {
        None => Ok(None),
        Some(v) => {
            let id = v
                .to_str()
                .map_err(|_| ReviewError::BadRequest("reviewer id must be ASCII".into()))?
                .trim();
            if id.is_empty() {
                return Err(ReviewError::BadRequest("empty reviewer id".into()));
            }
            Ok(Some(id.to_string()))
        }
    }
}

fn require_session(state: &AppState, session: i64) -> Result<u64, ReviewError> {
    state
        .store()
        .session_seed(session)?
        .ok_or_else(|| ReviewError::NotFound(format!("no session {session}")))
}

/// Creates a session over every overlay of the listed patients.
pub fn create_session(state: &AppState, spec: &CreateSession) -> Result<SessionCreated, ReviewError> {
    if spec.patients.is_empty() {
        return Err(ReviewError::Validation("a session needs at least one patient".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    let mut slices = Vec::new();
    let mut missing = Vec::new();
    for patient in &spec.patients {
        if !seen.insert(patient.as_str()) {
            return Err(ReviewError::Validation(format!("patient {patient} listed twice")));
        }
        let found = discover_overlays(&spec.overlay_dir, patient);
        if found.is_empty() {
            missing.push(patient.clone());
        }
        slices.extend(found.into_iter().map(|(slice_index, overlay_path)| SliceEntry {
            patient_id: patient.clone(),
            slice_index,
            overlay_path,
        }));
    }
    if !missing.is_empty() {
        return Err(ReviewError::MissingOverlays(missing));
    }
    let session_id = state.store().create_session(spec.seed, &slices, now_ms())?;
    Ok(SessionCreated {
        session_id,
        slices: slices.len(),
    })
}

/// Validates and stores one grade.
pub fn submit_grade(
    state: &AppState,
    session: i64,
    reviewer_id: &str,
    submission: &GradeSubmission,
) -> Result<Grade, ReviewError> {
    if !state.config.grid.contains(submission.score) {
        return Err(ReviewError::Validation(format!(
            "score {} is not on the grid {}..={} step {}",
            submission.score, state.config.grid.min, state.config.grid.max, state.config.grid.step
        )));
    }
    require_session(state, session)?;
    let mut store = state.store();
    if store
        .overlay_path(session, &submission.patient_id, submission.slice_index)?
        .is_none()
    {
        return Err(ReviewError::NotFound(format!(
            "session {session} has no slice {} of {}",
            submission.slice_index, submission.patient_id
        )));
    }
    let grade = Grade {
        reviewer_id: reviewer_id.to_string(),
        patient_id: submission.patient_id.clone(),
        slice_index: submission.slice_index,
        score: submission.score,
        timestamp_ms: now_ms(),
    };
    store.upsert_grade(session, &grade)?;
    Ok(grade)
}

pub fn session_summary(state: &AppState, session: i64, threshold: Option<f64>) -> Result<SummaryResponse, ReviewError> {
    let threshold = threshold.unwrap_or(state.config.default_threshold);
    if !threshold.is_finite() {
        return Err(ReviewError::BadRequest("threshold must be finite".into()));
    }
    require_session(state, session)?;
    let grades = state.store().grades(session)?;
    let summary = summarize(&grades, threshold);
    Ok(SummaryResponse {
        empty: summary.is_none(),
        summary,
    })
}

async fn health() -> &'static str {
    "ok"
}

async fn score_grid(State(state): State<Arc<AppState>>) -> Json<ScoreGrid> {
    Json(state.config.grid)
}

async fn post_session(
    State(state): State<Arc<AppState>>,
    Json(spec): Json<CreateSession>,
) -> Result<(StatusCode, Json<SessionCreated>), ReviewError> {
    Ok((StatusCode::CREATED, Json(create_session(&state, &spec)?)))
}

async fn list_slices(
    State(state): State<Arc<AppState>>,
    UrlPath(session): UrlPath<i64>,
    Query(page): Query<PageQuery>,
    headers: HeaderMap,
) -> Result<Json<SlicePage>, ReviewError> {
    let reviewer_id = reviewer(&headers)?;
    let seed = require_session(&state, session)?;
    let (slices, grades) = {
        let store = state.store();
        (store.slices(session)?, store.grades(session)?)
    };
    let order = match &reviewer_id {
        Some(r) => reviewer_order(slices.len(), seed, r),
        None => (0..slices.len()).collect(),
    };
    let offset = page.offset.unwrap_or(0);
    let limit = page.limit.unwrap_or(DEFAULT_PAGE).clamp(1, MAX_PAGE);
    let items = order
        .iter()
        .enumerate()
        .skip(offset)
        .take(limit)
        .map(|(position, &k)| {
            let s = &slices[k];
            let score = reviewer_id.as_ref().and_then(|r| {
                grades
                    .iter()
                    .find(|g| &g.reviewer_id == r && g.patient_id == s.patient_id && g.slice_index == s.slice_index)
                    .map(|g| g.score)
            });
            SliceView {
                position,
                patient_id: s.patient_id.clone(),
                slice_index: s.slice_index,
                overlay_url: format!("/sessions/{session}/overlays/{}/{}", s.patient_id, s.slice_index),
                score,
            }
        })
        .collect();
    Ok(Json(SlicePage {
        session_id: session,
        reviewer_id,
        total: slices.len(),
        offset,
        limit,
        items,
    }))
}

async fn get_overlay(
    State(state): State<Arc<AppState>>,
    UrlPath((session, patient, slice)): UrlPath<(i64, String, u32)>,
) -> Result<Response, ReviewError> {
    let path = state
        .store()
        .overlay_path(session, &patient, slice)?
        .ok_or_else(|| ReviewError::NotFound(format!("no overlay for {patient} slice {slice} in session {session}")))?;
    let bytes = std::fs::read(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => ReviewError::NotFound(format!("{} is gone", path.display())),
        _ => ReviewError::Io { path: path.clone(), source: e },
    })?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn put_grade(
    State(state): State<Arc<AppState>>,
    UrlPath(session): UrlPath<i64>,
    headers: HeaderMap,
    Json(submission): Json<GradeSubmission>,
) -> Result<Json<Grade>, ReviewError> {
    let reviewer_id =
        reviewer(&headers)?.ok_or_else(|| ReviewError::BadRequest("missing X-Reviewer-Id header".into()))?;
    Ok(Json(submit_grade(&state, session, &reviewer_id, &submission)?))
}

async fn list_grades(
    State(state): State<Arc<AppState>>,
    UrlPath(session): UrlPath<i64>,
) -> Result<Json<Vec<Grade>>, ReviewError> {
    require_session(&state, session)?;
    Ok(Json(state.store().grades(session)?))
}

async fn list_history(
    State(state): State<Arc<AppState>>,
    UrlPath(session): UrlPath<i64>,
) -> Result<Json<Vec<Grade>>, ReviewError> {
    require_session(&state, session)?;
    Ok(Json(state.store().history(session)?))
}

async fn get_summary(
    State(state): State<Arc<AppState>>,
    UrlPath(session): UrlPath<i64>,
    Query(q): Query<SummaryQuery>,
) -> Result<Json<SummaryResponse>, ReviewError> {
    Ok(Json(session_summary(&state, session, q.threshold)?))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/score-grid", get(score_grid))
        .route("/sessions", post(post_session))
        .route("/sessions/{id}/slices", get(list_slices))
        .route("/sessions/{id}/overlays/{patient}/{slice}", get(get_overlay))
        .route("/sessions/{id}/grades", put(put_grade).get(list_grades))
        .route("/sessions/{id}/history", get(list_history))
        .route("/sessions/{id}/summary", get(get_summary))
        .with_state(state)
}

/// Serves until Ctrl-C.
pub async fn serve(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
