//! Read-only HTTP API over a completed evaluation directory.
//!
//! | route                                        | body                               |
//! |----------------------------------------------|------------------------------------|
//! | `GET /api/patches`                           | `[{id, lon, lat, split, accuracy}]` |
//! | `GET /api/curve`                             | `[{rank, id, accuracy}]`           |
//! | `GET /api/meta`                              | bounds, palette, classes, layers   |
//! | `GET /api/patches/{id}/image.png`            | RGB composite                      |
//! | `GET /api/patches/{id}/mask.png`, `pred.png` | class colors                       |
//! | `GET /api/patches/{id}/prob/{class}.png`     | grayscale probabilities            |
//! | `GET /api/patches/{id}/activations/{layer}.png` | activation grid                 |

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use glacier_core::analysis::{accuracy_curve, records_from_jsonl, CurvePoint, EvalRecord, CLASS_CHANNELS};
use serde::Serialize;
use tower_http::services::ServeDir;

use crate::stages::{read_json, EvalMeta, META_FILE, PATCH_DIR, RECORDS_FILE};

/// Immutable state shared by all requests.
#[derive(Debug)]
pub struct ServeState {
    pub root: PathBuf,
    pub records: Vec<EvalRecord>,
    pub curve: Vec<CurvePoint>,
    pub meta: EvalMeta,
    index: HashMap<String, usize>,
}

impl ServeState {
    pub fn load(root: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(root.join(RECORDS_FILE))
            .with_context(|| format!("reading {}", root.join(RECORDS_FILE).display()))?;
        let records = records_from_jsonl(&text).context("parsing records")?;
        let curve = accuracy_curve(&records)?;
        let meta: EvalMeta = read_json(&root.join(META_FILE))?;
        let index = records.iter().enumerate().map(|(i, r)| (r.id.clone(), i)).collect();
        Ok(Self { root: root.to_path_buf(), records, curve, meta, index })
    }

    pub fn record(&self, id: &str) -> Option<&EvalRecord> {
        self.index.get(id).map(|&i| &self.records[i])
    }

    /// On-disk file of an artifact, if the artifact name is one the API serves.
    fn artifact_path(&self, id: &str, artifact: &str) -> Option<PathBuf> {
        self.record(id)?;
        let allowed = match artifact.split_once('/') {
            None => matches!(artifact, "image.png" | "mask.png" | "pred.png"),
            Some(("prob", file)) => file.strip_suffix(".png").is_some_and(|c| CLASS_CHANNELS.contains(&c)),
            Some(("activations", file)) => {
                file.strip_suffix(".png").is_some_and(|l| self.meta.layers.iter().any(|x| x == l))
            }
            Some(_) => false,
        };
        allowed.then(|| self.root.join(PATCH_DIR).join(id).join(artifact))
    }
}

#[derive(Serialize)]
struct PatchSummary<'a> {
    id: &'a str,
    lon: f64,
    lat: f64,
    split: &'a str,
    accuracy: f64,
}

type Shared = Arc<ServeState>;

async fn patches(State(state): State<Shared>) -> Response {
    let body: Vec<PatchSummary> = state
        .records
        .iter()
        .map(|r| PatchSummary { id: &r.id, lon: r.lon, lat: r.lat, split: &r.split, accuracy: r.accuracy })
        .collect();
    Json(body).into_response()
}

async fn curve(State(state): State<Shared>) -> Response {
    Json(&state.curve).into_response()
}

async fn meta(State(state): State<Shared>) -> Response {
    Json(&state.meta).into_response()
}

async fn artifact(State(state): State<Shared>, UrlPath((id, rest)): UrlPath<(String, String)>) -> Response {
    let Some(path) = state.artifact_path(&id, &rest) else {
        return (StatusCode::NOT_FOUND, "not found").into_response();
    };
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, "image/png")], bytes).into_response(),
        Err(e) => {
            log::warn!("{}: {e}", path.display());
            (StatusCode::NOT_FOUND, "artifact missing").into_response()
        }
    }
}

/// The API routes, plus the panel bundle under `/` when `static_dir` is set.
pub fn router(state: ServeState, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/patches", get(patches))
        .route("/api/curve", get(curve))
        .route("/api/meta", get(meta))
        .route("/api/patches/{id}/{*artifact}", get(artifact))
        .with_state(Arc::new(state));
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

pub async fn serve(state: ServeState, addr: SocketAddr, static_dir: Option<&Path>) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
    log::info!("serving {} records on http://{}", state.records.len(), listener.local_addr()?);
    axum::serve(listener, router(state, static_dir)).await?;
    Ok(())
}
