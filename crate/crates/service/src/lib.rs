//! HTTP+JSON front for a [`Basestation`].
//!
//! | method | path            | body / query              | response                       |
//! |--------|-----------------|---------------------------|--------------------------------|
//! | GET    | `/graph`        | `?since=<revision>`       | `GraphView` JSON               |
//! | GET    | `/map`          | `?voxel=<leaf>`           | ASCII PLY                      |
//! | POST   | `/loop_closure` | `{"from": .., "to": ..}`  | `ManualClosureReport` JSON     |
//! | POST   | `/ingest`       | binary robot payload      | `IntegrationReport` JSON       |
//! | GET    | `/metrics`      |                           | `BasestationMetrics` JSON      |
//!
//! Node ids are strings such as `robot1/42` or `artifact/3`. Errors come back
//! as `{"error": "..."}` with a 4xx/5xx status.

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use lamp_core::basestation::{Basestation, BasestationConfig, BasestationError};
use lamp_core::pointcloud::ply;
use lamp_core::posegraph::NodeId;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::{Arc, Mutex};

/// Largest accepted ingest body.
pub const MAX_PAYLOAD_BYTES: usize = 256 * 1024 * 1024;

/// Service configuration file (YAML).
///
/// ```yaml
/// listen: 127.0.0.1:8080
/// basestation:
///   inter_robot_closures: true
///   loop_radius: 10.0              # m, candidate search radius
///   fitness_threshold: 0.18        # accept inter-robot closures at or below
///   intra_robot_fitness_threshold: 5.0
///   max_candidates_per_key: 1
///   max_rotation_change: 0.2618    # rad
///   icm: true
///   inter_robot_thresholds: { rotation: 0.005, translation: 0.05 }
///   intra_robot_thresholds: { rotation: 0.05, translation: 0.1 }
///   map_leaf: 0.1                  # m, voxel leaf of the exported map
///   persist_dir: /var/lib/lamp     # optional
///   persist_every: 50              # revisions between snapshots
///   matching: { max_correspondence: 2.0, max_iterations: 64 }
///   optimizer: { max_iterations: 50, relative_tolerance: 1.0e-6 }
/// ```
///
/// Every field is optional; omitted ones take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub listen: String,
    pub basestation: BasestationConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { listen: "127.0.0.1:8080".to_string(), basestation: BasestationConfig::default() }
    }
}

impl ServiceConfig {
    pub fn from_yaml(text: &str) -> Result<Self, serde_yaml::Error> {
        serde_yaml::from_str(text)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(Self::from_yaml(&text)?)
    }
}

pub type Shared = Arc<Mutex<Basestation>>;

pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

impl From<BasestationError> for ApiError {
    fn from(e: BasestationError) -> Self {
        let status = match &e {
            BasestationError::CorruptPayload(_) => StatusCode::BAD_REQUEST,
            BasestationError::ConflictingRevision { .. } => StatusCode::CONFLICT,
            BasestationError::UnknownNode(_) => StatusCode::NOT_FOUND,
            BasestationError::RegistrationFailed(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

/// Runs `f` on the base station off the async executor; registration and
/// optimization are CPU-bound.
async fn with_base<T: Send + 'static>(state: Shared, f: impl FnOnce(&mut Basestation) -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(move || {
        let mut base = state.lock().unwrap_or_else(|e| e.into_inner());
        f(&mut base)
    })
    .await
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

#[derive(Deserialize)]
struct GraphQuery {
    #[serde(default)]
    since: u64,
}

#[derive(Deserialize)]
struct MapQuery {
    voxel: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LoopClosureRequest {
    pub from: NodeId,
    pub to: NodeId,
}

async fn graph(State(state): State<Shared>, Query(q): Query<GraphQuery>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(with_base(state, move |b| Ok(b.graph_view(q.since))).await?))
}

async fn map(State(state): State<Shared>, Query(q): Query<MapQuery>) -> Result<impl IntoResponse, ApiError> {
    if let Some(leaf) = q.voxel {
        if !(leaf > 0.0 && leaf.is_finite()) {
            return Err(ApiError(StatusCode::BAD_REQUEST, format!("voxel must be positive, got {leaf}")));
        }
    }
    let cloud = with_base(state, move |b| Ok(b.export_map(q.voxel))).await?;
    Ok(([(header::CONTENT_TYPE, "application/x-ply")], ply::to_ply_string(&cloud)))
}

async fn loop_closure(State(state): State<Shared>, Json(req): Json<LoopClosureRequest>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(with_base(state, move |b| Ok(b.manual_loop_closure(req.from, req.to)?)).await?))
}

async fn ingest(State(state): State<Shared>, body: Bytes) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(with_base(state, move |b| Ok(b.ingest(&body)?)).await?))
}

async fn metrics(State(state): State<Shared>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(with_base(state, |b| Ok(b.metrics())).await?))
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/graph", get(graph))
        .route("/map", get(map))
        .route("/loop_closure", post(loop_closure))
        .route("/ingest", post(ingest))
        .route("/metrics", get(metrics))
        .layer(DefaultBodyLimit::max(MAX_PAYLOAD_BYTES))
        .with_state(state)
}
