// SPDX-License-Identifier: MIT OR Apache-2.0

//! JSON-over-HTTP front end for a loaded [`ModelBundle`].
//!
//! `POST /predict` runs the backbone once and caches the concept maps in a
//! session; explanation, region queries and edits on that session only
//! re-run pooling and the head. Every JSON response carries `bundle_hash`
//! and every response the `x-bundle-hash` header.

mod session;

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use spatial_cbm::bundle::ModelBundle;
use spatial_cbm::explain::{
    concept_heatmap, explain_anything, explain_maps, heatmap_png_bytes, intervene, sankey_edges, what_if, EditRecord,
    RoiMask,
};
use spatial_cbm::head::Prediction;
use spatial_cbm::Error;

pub use session::{Session, SessionLookup, SessionStore};

pub const BUNDLE_HASH_HEADER: &str = "x-bundle-hash";

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub session_ttl: Duration,
    pub max_sessions: usize,
    pub default_k: usize,
    pub max_body_bytes: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            session_ttl: Duration::from_secs(30 * 60),
            max_sessions: 256,
            default_k: 5,
            max_body_bytes: 32 << 20,
        }
    }
}

pub struct AppState {
    bundle: Option<Arc<ModelBundle>>,
    sessions: SessionStore,
    cfg: ServiceConfig,
}

impl AppState {
    /// `bundle` is `None` while a model is unavailable; model routes then
    /// answer 503.
    pub fn new(bundle: Option<ModelBundle>, cfg: ServiceConfig) -> Arc<Self> {
        Arc::new(Self {
            bundle: bundle.map(Arc::new),
            sessions: SessionStore::new(cfg.session_ttl, cfg.max_sessions),
            cfg,
        })
    }

    pub fn sessions(&self) -> &SessionStore {
        &self.sessions
    }

    fn hash(&self) -> &str {
        self.bundle.as_ref().map_or("", |b| b.hash())
    }
}

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    bundle_hash: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>, state: &AppState) -> Self {
        Self { status, message: message.into(), bundle_hash: state.hash().to_string() }
    }

    fn from_core(e: Error, state: &AppState) -> Self {
        let status = match &e {
            Error::Range(_) | Error::EmptyRoi | Error::Geometry(_) | Error::InvalidInput(_) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            Error::Image(_) | Error::Data(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string(), state)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = Json(json!({ "error": self.message, "bundle_hash": self.bundle_hash }));
        with_hash((self.status, body).into_response(), &self.bundle_hash)
    }
}

fn with_hash(mut r: Response, hash: &str) -> Response {
    if let Ok(v) = HeaderValue::from_str(hash) {
        r.headers_mut().insert(BUNDLE_HASH_HEADER, v);
    }
    r
}

type ApiResult = Result<Response, ApiError>;

fn ok_json(state: &AppState, mut body: Value) -> ApiResult {
    body["bundle_hash"] = Value::String(state.hash().to_string());
    Ok(with_hash(Json(body).into_response(), state.hash()))
}

fn bundle(state: &AppState) -> Result<Arc<ModelBundle>, ApiError> {
    state
        .bundle
        .clone()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "model bundle not loaded", state))
}

fn session(state: &AppState, id: &str) -> Result<Arc<tokio::sync::Mutex<Session>>, ApiError> {
    match state.sessions.get(id) {
        SessionLookup::Live(s) => Ok(s),
        SessionLookup::Expired => Err(ApiError::new(StatusCode::GONE, format!("session {id} expired"), state)),
        SessionLookup::Unknown => Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown session {id}"), state)),
    }
}

// ---------------------------------------------------------------------------
// Request bodies
// ---------------------------------------------------------------------------

/// A region given either as an image-resolution PNG or as grid cells.
#[derive(Debug, Clone, Default, Deserialize, Serialize)]
pub struct MaskInput {
    #[serde(default)]
    pub png_b64: Option<String>,
    /// `(row, col)` grid cells.
    #[serde(default)]
    pub cells: Option<Vec<(usize, usize)>>,
}

impl MaskInput {
    fn to_mask(&self, grid: (usize, usize), state: &AppState) -> Result<RoiMask, ApiError> {
        let bad = |m: String| ApiError::new(StatusCode::BAD_REQUEST, m, state);
        let mask = match (&self.png_b64, &self.cells) {
            (Some(b64), None) => {
                let bytes = base64::engine::general_purpose::STANDARD
                    .decode(b64.trim())
                    .map_err(|e| bad(format!("mask is not valid base64: {e}")))?;
                RoiMask::from_png_bytes(&bytes, grid.0, grid.1).map_err(|e| match e {
                    Error::Image(e) => bad(format!("mask is not a PNG: {e}")),
                    e => ApiError::from_core(e, state),
                })?
            }
            (None, Some(cells)) => RoiMask::from_cells(grid.0, grid.1, cells).map_err(|e| ApiError::from_core(e, state))?,
            _ => return Err(bad("give exactly one of `png_b64` or `cells`".into())),
        };
        if mask.is_empty() && mask.source.as_ref().is_none_or(|s| s.mask.iter().all(|&v| v == 0)) {
            return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "mask selects no pixels", state));
        }
        Ok(mask)
    }
}

#[derive(Debug, Default, Deserialize)]
pub struct PredictQuery {
    #[serde(default)]
    pub image_id: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
pub struct ExplainBody {
    #[serde(default)]
    pub k: Option<usize>,
}

#[derive(Debug, Deserialize)]
pub struct RoiBody {
    pub mask: MaskInput,
    #[serde(default)]
    pub k: Option<usize>,
    /// Divide aggregates by each concept's activation std.
    #[serde(default)]
    pub normalize: bool,
}

#[derive(Debug, Deserialize)]
pub struct EditBody {
    pub concept: usize,
    pub mask: MaskInput,
    pub beta: f64,
}

// ---------------------------------------------------------------------------
// Handlers
// ---------------------------------------------------------------------------

fn prediction_json(p: &Prediction, b: &ModelBundle) -> Value {
    json!({
        "y_hat": p.y_hat,
        "class": b.catalog.classes.get(p.y_hat),
        "logits": p.logits,
    })
}

async fn healthz(State(state): State<Arc<AppState>>) -> ApiResult {
    bundle(&state)?;
    ok_json(&state, json!({ "status": "ok", "sessions": state.sessions.len() }))
}

async fn concepts(State(state): State<Arc<AppState>>) -> ApiResult {
    let b = bundle(&state)?;
    ok_json(
        &state,
        json!({
            "concepts": b.catalog.concepts,
            "classes": b.catalog.classes,
            "catalog_hash": b.catalog.content_hash,
            "source": b.catalog.source,
        }),
    )
}

async fn class_rules(State(state): State<Arc<AppState>>, Path(l): Path<usize>) -> ApiResult {
    let b = bundle(&state)?;
    if l >= b.catalog.num_classes() {
        return Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown class {l}"), &state));
    }
    let edges = sankey_edges(&b.head, &b.catalog, l).map_err(|e| ApiError::from_core(e, &state))?;
    ok_json(&state, json!({ "class": l, "class_name": b.catalog.classes[l], "edges": edges }))
}

async fn predict(
    State(state): State<Arc<AppState>>,
    Query(q): Query<PredictQuery>,
    body: axum::body::Bytes,
) -> ApiResult {
    let b = bundle(&state)?;
    if body.is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "empty image upload", &state));
    }
    let img = image::load_from_memory(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("malformed image: {e}"), &state))?
        .to_rgb8();
    let dims = img.dimensions();
    let model = b.clone();
    let pass = tokio::task::spawn_blocking(move || model.forward(&img))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string(), &state))?
        .map_err(|e| ApiError::from_core(e, &state))?;
    let id = state.sessions.insert(q.image_id.clone().unwrap_or_default(), pass.maps, pass.prediction.clone(), dims);
    let mut body = prediction_json(&pass.prediction, &b);
    body["session_id"] = json!(id);
    body["image_id"] = json!(q.image_id.unwrap_or_else(|| id.clone()));
    ok_json(&state, body)
}

fn heatmap_url(session: &str, m: usize) -> String {
    format!("/sessions/{session}/heatmaps/{m}")
}

async fn explain(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Option<Json<ExplainBody>>,
) -> ApiResult {
    let b = bundle(&state)?;
    let s = session(&state, &id)?;
    let s = s.lock().await;
    let k = body.and_then(|Json(x)| x.k).unwrap_or(state.cfg.default_k);
    let maps = intervene(&s.maps, &s.edits).map_err(|e| ApiError::from_core(e, &state))?;
    let e = explain_maps(&s.image_id, &maps, &b.head, &b.catalog, k)
        .map_err(|e| ApiError::from_core(e, &state))?
        .with_heatmap_refs(|m| heatmap_url(&id, m));
    ok_json(&state, json!({ "session_id": id, "edits": s.edits.len(), "explanation": e }))
}

async fn roi(State(state): State<Arc<AppState>>, Path(id): Path<String>, Json(body): Json<RoiBody>) -> ApiResult {
    let b = bundle(&state)?;
    let s = session(&state, &id)?;
    let s = s.lock().await;
    let mask = body.mask.to_mask(b.grid(), &state)?;
    let maps = intervene(&s.maps, &s.edits).map_err(|e| ApiError::from_core(e, &state))?;
    let std = body.normalize.then_some(b.head.stats.std.as_slice());
    let k = body.k.unwrap_or(state.cfg.default_k);
    let r = explain_anything(&maps, &mask, k, Some(&b.catalog), std).map_err(|e| ApiError::from_core(e, &state))?;
    ok_json(
        &state,
        json!({
            "session_id": id,
            "mask_cells": mask.cell_count(),
            "mask_source": mask.source.as_ref().map(|s| &s.downsampling),
            "roi": r,
        }),
    )
}

async fn add_edit(State(state): State<Arc<AppState>>, Path(id): Path<String>, Json(body): Json<EditBody>) -> ApiResult {
    let b = bundle(&state)?;
    let s = session(&state, &id)?;
    let mut s = s.lock().await;
    if body.concept >= b.catalog.len() {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("concept index {} outside 0..{}", body.concept, b.catalog.len()),
            &state,
        ));
    }
    if !body.beta.is_finite() {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "beta must be finite", &state));
    }
    let mask = body.mask.to_mask(b.grid(), &state)?;
    if mask.is_empty() {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "mask covers no grid cell", &state));
    }
    let before = intervene(&s.maps, &s.edits).map_err(|e| ApiError::from_core(e, &state))?;
    let edit = EditRecord::new(body.concept, mask, body.beta, id.clone());
    let w = what_if(&s.image_id, &before, std::slice::from_ref(&edit), &b.head, &b.catalog, state.cfg.default_k)
        .map_err(|e| ApiError::from_core(e, &state))?;
    s.edits.push(edit);
    let explanation = w.explanation.clone().with_heatmap_refs(|m| heatmap_url(&id, m));
    ok_json(
        &state,
        json!({
            "session_id": id,
            "edits": s.edits.len(),
            "old_y_hat": w.old_y_hat,
            "new_y_hat": w.new_y_hat,
            "old_logits": w.old_logits,
            "new_logits": w.new_logits,
            "logit_deltas": w.logit_deltas,
            "original_logits": s.original.logits,
            "explanation": explanation,
        }),
    )
}

async fn revert_edit(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult {
    let b = bundle(&state)?;
    let s = session(&state, &id)?;
    let mut s = s.lock().await;
    let Some(removed) = s.edits.pop() else {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "session has no edits to revert", &state));
    };
    let maps = intervene(&s.maps, &s.edits).map_err(|e| ApiError::from_core(e, &state))?;
    let p = b.head.predict_maps(&maps).map_err(|e| ApiError::from_core(e, &state))?;
    let mut body = prediction_json(&p, &b);
    body["session_id"] = json!(id);
    body["edits"] = json!(s.edits.len());
    body["reverted"] = json!({ "concept": removed.concept, "beta": removed.beta, "timestamp": removed.timestamp });
    ok_json(&state, body)
}

async fn heatmap(State(state): State<Arc<AppState>>, Path((id, m)): Path<(String, usize)>) -> ApiResult {
    let b = bundle(&state)?;
    let s = session(&state, &id)?;
    let s = s.lock().await;
    if m >= b.catalog.len() {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("concept index {m} outside 0..{}", b.catalog.len()),
            &state,
        ));
    }
    let maps = intervene(&s.maps, &s.edits).map_err(|e| ApiError::from_core(e, &state))?;
    let (w, h) = s.image_dims;
    let hm = concept_heatmap(&maps, m, h as usize, w as usize).map_err(|e| ApiError::from_core(e, &state))?;
    let (png, side) = heatmap_png_bytes(&hm).map_err(|e| ApiError::from_core(e, &state))?;
    let mut r = ([(header::CONTENT_TYPE, "image/png")], png).into_response();
    for (k, v) in [("x-heatmap-min", side.min), ("x-heatmap-max", side.max)] {
        if let Ok(v) = HeaderValue::from_str(&v.to_string()) {
            r.headers_mut().insert(k, v);
        }
    }
    Ok(with_hash(r, state.hash()))
}

async fn fallback(State(state): State<Arc<AppState>>) -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "no such route", &state)
}

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.cfg.max_body_bytes;
    Router::new()
        .route("/healthz", get(healthz))
        .route("/concepts", get(concepts))
        .route("/classes/{l}/rules", get(class_rules))
        .route("/predict", post(predict))
        .route("/sessions/{id}/explain", post(explain))
        .route("/sessions/{id}/roi", post(roi))
        .route("/sessions/{id}/edits", post(add_edit))
        .route("/sessions/{id}/edits/last", delete(revert_edit))
        .route("/sessions/{id}/heatmaps/{m}", get(heatmap))
        .fallback(fallback)
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

/// Serves until Ctrl-C.
pub async fn serve(bundle: ModelBundle, addr: SocketAddr, cfg: ServiceConfig) -> std::io::Result<()> {
    let state = AppState::new(Some(bundle), cfg);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, hash = state.hash(), "serving");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
