//! Local HTTP service for interactive painting and detailization.
//!
//! One document per server. Every mutation bumps the revision; requests
//! that name a stale revision are refused without touching the document.

mod doc;

pub use doc::{DocJson, EditBatch, EditOp, EditRequest, Session};

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tower_http::cors::{AllowOrigin, CorsLayer};
use tower_http::services::ServeDir;

use crate::error::{Error, Result};
use crate::mesh::{marching_cubes, MeshPayload, DEFAULT_ISO};
use crate::trainer::{style_as_coarse, Checkpoint};
use crate::voxgrid::{upsample_labels_nearest, voxb_to_bytes, VoxbFile};

pub const UNDO_LIMIT: usize = 64;

/// An HTTP error with a JSON body `{"error": ...}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }

    fn bad_request(m: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, m)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::InvalidArgument(_) | Error::Shape(_) | Error::Format(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

type ApiResult<T> = std::result::Result<Json<T>, ApiError>;

struct Loaded {
    ckpt: Checkpoint,
    session: Mutex<Session>,
    /// Serializes inference on the shared model.
    infer: Mutex<()>,
    thumbnails: OnceLock<Vec<MeshPayload>>,
}

/// Shared handler state; cheap to clone.
#[derive(Clone)]
pub struct AppState {
    loaded: Option<Arc<Loaded>>,
}

impl AppState {
    pub fn new(ckpt: Option<Checkpoint>) -> Result<Self> {
        let loaded = match ckpt {
            Some(ckpt) => {
                let session = Session::new(ckpt.model.k(), ckpt.model.n_styles(), ckpt.library.part_vocab().len(), UNDO_LIMIT)?;
                Some(Arc::new(Loaded {
                    ckpt,
                    session: Mutex::new(session),
                    infer: Mutex::new(()),
                    thumbnails: OnceLock::new(),
                }))
            }
            None => None,
        };
        Ok(Self { loaded })
    }

    fn model(&self) -> std::result::Result<&Arc<Loaded>, ApiError> {
        self.loaded
            .as_ref()
            .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no model loaded"))
    }
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> std::result::Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed request: {e}")))
}

/// The `/api/v1` routes, plus an optional static file fallback.
pub fn router(state: AppState, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/styles", get(styles))
        .route("/doc", get(get_doc).put(put_doc))
        .route("/edit", post(edit))
        .route("/detailize", post(detailize))
        .route("/undo", post(undo))
        .route("/redo", post(redo))
        .with_state(state);
    let cors = CorsLayer::new()
        .allow_origin(AllowOrigin::predicate(|origin: &HeaderValue, _| {
            let o = origin.as_bytes();
            o.starts_with(b"http://localhost") || o.starts_with(b"http://127.0.0.1")
        }))
        .allow_methods([Method::GET, Method::PUT, Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    let app = Router::new().nest("/api/v1", api).layer(cors);
    match static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app,
    }
}

/// Serves on `addr` until the process ends.
pub async fn serve(state: AppState, addr: SocketAddr, static_dir: Option<PathBuf>) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| Error::io(addr.to_string(), e))?;
    log::info!("listening on http://{addr}/api/v1");
    axum::serve(listener, router(state, static_dir)).await.map_err(|e| Error::io(addr.to_string(), e))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ModelInfo {
    pub k: u32,
    #[serde(rename = "K")]
    pub big_k: u32,
    #[serde(rename = "N")]
    pub n: usize,
    pub checkpoint: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model: Option<ModelInfo>,
}

async fn health(State(s): State<AppState>) -> Json<Health> {
    Json(match &s.loaded {
        Some(l) => Health {
            status: "ok".into(),
            model: Some(ModelInfo {
                k: l.ckpt.model.k(),
                big_k: l.ckpt.model.big_k(),
                n: l.ckpt.model.n_styles(),
                checkpoint: l.ckpt.id(),
            }),
        },
        None => Health { status: "no_model".into(), model: None },
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StyleEntry {
    pub id: u16,
    pub name: String,
    pub thumbnail: MeshPayload,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct StylesResponse {
    pub styles: Vec<StyleEntry>,
    pub part_vocab: Vec<String>,
    pub thumbnail_level: u32,
}

fn thumbnail_level(ckpt: &Checkpoint) -> u32 {
    (ckpt.model.k() + 2).min(ckpt.model.big_k())
}

fn thumbnails(l: &Loaded) -> Result<Vec<MeshPayload>> {
    let level = thumbnail_level(&l.ckpt);
    let _guard = lock(&l.infer);
    (1..=l.ckpt.library.len() as u16)
        .map(|s| {
            let c = style_as_coarse(&l.ckpt.library, s, l.ckpt.model.k())?;
            let out = l.ckpt.detailize(&c, level)?;
            Ok(marching_cubes(&out, DEFAULT_ISO)?.payload())
        })
        .collect()
}

async fn styles(State(s): State<AppState>) -> ApiResult<StylesResponse> {
    let l = s.model()?.clone();
    let thumbs = match l.thumbnails.get() {
        Some(t) => t.clone(),
        None => {
            let l2 = l.clone();
            let t = tokio::task::spawn_blocking(move || thumbnails(&l2))
                .await
                .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
            l.thumbnails.get_or_init(|| t).clone()
        }
    };
    let styles = l
        .ckpt
        .library
        .shapes()
        .iter()
        .zip(thumbs)
        .enumerate()
        .map(|(i, (shape, thumbnail))| StyleEntry { id: i as u16 + 1, name: shape.name.clone(), thumbnail })
        .collect();
    Ok(Json(StylesResponse {
        styles,
        part_vocab: l.ckpt.library.part_vocab().to_vec(),
        thumbnail_level: thumbnail_level(&l.ckpt),
    }))
}

async fn get_doc(State(s): State<AppState>) -> ApiResult<DocJson> {
    let l = s.model()?;
    let session = lock(&l.session);
    Ok(Json(session.doc_json()))
}

async fn put_doc(State(s): State<AppState>, body: Bytes) -> ApiResult<RevisionResponse> {
    let l = s.model()?;
    let doc: DocJson = parse(&body)?;
    let mut session = lock(&l.session);
    let revision = session.replace(&doc)?;
    Ok(Json(RevisionResponse { revision }))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RevisionResponse {
    pub revision: u64,
}

async fn edit(State(s): State<AppState>, body: Bytes) -> ApiResult<RevisionResponse> {
    let l = s.model()?;
    let req: EditRequest = parse(&body)?;
    let mut session = lock(&l.session);
    let revision = session.apply(&req)?;
    Ok(Json(RevisionResponse { revision }))
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RevisionRequest {
    pub revision: Option<u64>,
}

fn optional_body<T: DeserializeOwned + Default>(body: &Bytes) -> std::result::Result<T, ApiError> {
    if body.iter().all(|b| b.is_ascii_whitespace()) {
        Ok(T::default())
    } else {
        parse(body)
    }
}

async fn undo(State(s): State<AppState>, body: Bytes) -> ApiResult<RevisionResponse> {
    let l = s.model()?;
    let req: RevisionRequest = optional_body(&body)?;
    let mut session = lock(&l.session);
    Ok(Json(RevisionResponse { revision: session.undo(req.revision)? }))
}

async fn redo(State(s): State<AppState>, body: Bytes) -> ApiResult<RevisionResponse> {
    let l = s.model()?;
    let req: RevisionRequest = optional_body(&body)?;
    let mut session = lock(&l.session);
    Ok(Json(RevisionResponse { revision: session.redo(req.revision)? }))
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetailizeRequest {
    /// Output level; the finest one when absent.
    pub level: Option<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DetailizeResponse {
    pub revision: u64,
    pub level: u32,
    /// VOXB with the output occupancy and the upsampled labels.
    pub voxb: String,
    pub mesh: MeshPayload,
    pub timing_ms: f64,
}

async fn detailize(State(s): State<AppState>, body: Bytes) -> ApiResult<DetailizeResponse> {
    let l = s.model()?.clone();
    let req: DetailizeRequest = optional_body(&body)?;
    let (k, big_k) = (l.ckpt.model.k(), l.ckpt.model.big_k());
    let level = req.level.unwrap_or(big_k);
    if !(k + 1..=big_k).contains(&level) {
        return Err(ApiError::bad_request(format!("level {level} outside {}..={big_k}", k + 1)));
    }
    let (revision, doc) = {
        let session = lock(&l.session);
        (session.revision(), session.doc().clone())
    };
    let res = tokio::task::spawn_blocking(move || -> Result<DetailizeResponse> {
        let _guard = lock(&l.infer);
        let started = Instant::now();
        let out = l.ckpt.detailize(&doc, level)?;
        let mut mesh = marching_cubes(&out, DEFAULT_ISO)?;
        if doc.occupied_count() > 0 {
            mesh.assign_regions(&doc, level)?;
        }
        let factor = 1usize << (level - k);
        let file = VoxbFile {
            part: Some(upsample_labels_nearest(doc.labels().part(), k, factor)?),
            style: Some(upsample_labels_nearest(doc.labels().style(), k, factor)?),
            occ: out,
        };
        let voxb = base64::engine::general_purpose::STANDARD.encode(voxb_to_bytes(&file));
        Ok(DetailizeResponse {
            revision,
            level,
            voxb,
            mesh: mesh.payload(),
            timing_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(res))
}

#[cfg(test)]
mod tests;
