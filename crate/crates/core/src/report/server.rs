//! Local JSON API over an inspection bundle. Endpoint reference: `docs/api.md`.

use std::net::SocketAddr;
use std::path::{Component, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::{Body, Bytes};
use axum::extract::{Path as UrlPath, RawQuery, State};
use axum::http::{header, Method, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{ensure_thumbnail, exclusion_list, InspectionBundle, UserState, DEFAULT_FLAG};
use crate::error::Error;
use crate::pca::RankedSample;

pub const API_VERSION: u32 = 1;
pub const API_PREFIX: &str = "/api/v1";
const DEFAULT_PAGE: usize = 50;
const MAX_PAGE: usize = 1000;
const MAX_LABEL_LEN: usize = 200;

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub addr: SocketAddr,
    /// Served at `/` when set (the curator console build).
    pub static_dir: Option<PathBuf>,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self {
            addr: SocketAddr::from(([127, 0, 0, 1], 8765)),
            static_dir: None,
        }
    }
}

pub struct AppState {
    pub bundle: InspectionBundle,
    user: RwLock<UserState>,
    /// Serializes every persisted write.
    writer: Mutex<()>,
    static_dir: Option<PathBuf>,
}

impl AppState {
    pub fn new(bundle: InspectionBundle, static_dir: Option<PathBuf>) -> crate::Result<Self> {
        let user = UserState::load(&bundle.run)?;
        for id in user.flags.keys() {
            if bundle.row_of(id).is_none() {
                log::warn!("flag file names sample {id}, which is not in the bundle");
            }
        }
        Ok(Self {
            bundle,
            user: RwLock::new(user),
            writer: Mutex::new(()),
            static_dir,
        })
    }

    pub fn user(&self) -> UserState {
        self.user.read().expect("user state lock").clone()
    }

    /// Applies `change` to a copy, persists it, then publishes it.
    fn update<T>(&self, change: impl FnOnce(&mut UserState) -> T, persist: fn(&UserState, &crate::pipeline::RunDir) -> crate::Result<()>) -> Result<(T, UserState), ApiError> {
        let _guard = self.writer.lock().expect("writer lock");
        let mut next = self.user();
        let out = change(&mut next);
        persist(&next, &self.bundle.run)?;
        *self.user.write().expect("user state lock") = next.clone();
        Ok((out, next))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            kind,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::Config(_) | Error::Shape(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.kind(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": { "kind": self.kind, "message": self.message } });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T = Json<Value>> = Result<T, ApiError>;

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid JSON body: {e}")))
}

fn query_param(query: &Option<String>, key: &str) -> Option<String> {
    query.as_deref()?.split('&').find_map(|pair| {
        let (k, v) = pair.split_once('=').unwrap_or((pair, ""));
        (k == key).then(|| v.to_string())
    })
}

fn query_usize(query: &Option<String>, key: &str, default: usize) -> ApiResult<usize> {
    match query_param(query, key) {
        None => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| ApiError::bad_request(format!("query parameter {key} must be a non-negative integer"))),
    }
}

fn component_index(st: &AppState, raw: &str) -> ApiResult<usize> {
    let idx: usize = raw
        .parse()
        .map_err(|_| ApiError::bad_request(format!("component index `{raw}` is not an integer")))?;
    if idx >= st.bundle.pca.k() {
        return Err(ApiError::not_found(format!(
            "component {idx} does not exist (0-based, {} components)",
            st.bundle.pca.k()
        )));
    }
    Ok(idx)
}

/// Percent-encodes everything but unreserved characters and `/`.
fn encode_path(id: &str) -> String {
    let mut out = String::with_capacity(id.len());
    for b in id.bytes() {
        match b {
            b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'-' | b'.' | b'_' | b'~' | b'/' => out.push(b as char),
            _ => out.push_str(&format!("%{b:02X}")),
        }
    }
    out
}

fn thumb_url(id: &str) -> String {
    format!("{API_PREFIX}/thumbs/{}", encode_path(id))
}

#[derive(Serialize)]
struct SampleView {
    rank: usize,
    sample_id: String,
    value: f64,
    flags: Vec<String>,
    thumbnail_url: String,
}

fn views(items: &[RankedSample], first_rank: usize, user: &UserState) -> Vec<SampleView> {
    items
        .iter()
        .enumerate()
        .map(|(i, s)| SampleView {
            rank: first_rank + i,
            sample_id: s.sample_id.clone(),
            value: s.value,
            flags: user.flags_of(&s.sample_id),
            thumbnail_url: thumb_url(&s.sample_id),
        })
        .collect()
}

async fn summary(State(st): State<Arc<AppState>>) -> Json<Value> {
    let b = &st.bundle;
    let user = st.user();
    Json(json!({
        "api_version": API_VERSION,
        "bundle_hash": b.hash,
        "corpus_root": b.manifest.root,
        "records": b.manifest.records.len(),
        "samples": b.projection.rows(),
        "excluded": b.manifest.count_flag(crate::data::Flag::Excluded),
        "multi_channel": b.manifest.count_flag(crate::data::Flag::MultiChannel),
        "near_black": b.manifest.count_flag(crate::data::Flag::NearBlack),
        "user_flagged": user.flags.len(),
        "components": b.pca.k(),
        "latent_dim": b.pca.dim(),
        "fit_scope": b.summary.fit_scope,
        "fitted_samples": b.summary.fitted_samples,
        "total_variance": b.summary.total_variance,
    }))
}

async fn components(State(st): State<Arc<AppState>>) -> Json<Value> {
    let user = st.user();
    let list: Vec<Value> = st
        .bundle
        .reports
        .iter()
        .map(|r| {
            let i = r.component_index;
            json!({
                "index": i,
                "number": i + 1,
                "explained_variance": r.explained_variance,
                "variance_share": st.bundle.variance_share(i),
                "label": user.labels.get(&i),
                "degenerate": r.degenerate,
            })
        })
        .collect();
    Json(json!({ "components": list }))
}

async fn component(State(st): State<Arc<AppState>>, UrlPath(raw): UrlPath<String>, RawQuery(q): RawQuery) -> ApiResult {
    let idx = component_index(&st, &raw)?;
    let full = &st.bundle.reports[idx];
    let m = query_usize(&q, "m", full.extremes_per_side())?;
    let r = if m == full.extremes_per_side() {
        full.clone()
    } else {
        crate::pca::component_report(&st.bundle.pca, &st.bundle.projection, idx, m)?
    };
    let user = st.user();
    let n = r.sorted.len();
    Ok(Json(json!({
        "index": idx,
        "number": idx + 1,
        "explained_variance": r.explained_variance,
        "variance_share": st.bundle.variance_share(idx),
        "label": user.labels.get(&idx),
        "degenerate": r.degenerate,
        "warnings": r.warnings,
        "total": n,
        "value_min": r.sorted.first().map(|s| s.value),
        "value_max": r.sorted.last().map(|s| s.value),
        "low_extremes": views(&r.low_extremes, 0, &user),
        "high_extremes": views(&r.high_extremes, n - r.high_extremes.len(), &user),
    })))
}

async fn component_samples(State(st): State<Arc<AppState>>, UrlPath(raw): UrlPath<String>, RawQuery(q): RawQuery) -> ApiResult {
    let idx = component_index(&st, &raw)?;
    let offset = query_usize(&q, "offset", 0)?;
    let limit = query_usize(&q, "limit", DEFAULT_PAGE)?;
    if limit == 0 || limit > MAX_PAGE {
        return Err(ApiError::bad_request(format!("limit must be in 1..={MAX_PAGE}")));
    }
    let sorted = &st.bundle.reports[idx].sorted;
    let start = offset.min(sorted.len());
    let end = (start + limit).min(sorted.len());
    let user = st.user();
    Ok(Json(json!({
        "index": idx,
        "offset": start,
        "limit": limit,
        "total": sorted.len(),
        "items": views(&sorted[start..end], start, &user),
    })))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelRequest {
    label: Option<String>,
}

async fn set_label(State(st): State<Arc<AppState>>, UrlPath(raw): UrlPath<String>, body: Bytes) -> ApiResult {
    let idx = component_index(&st, &raw)?;
    let req: LabelRequest = parse_body(&body)?;
    let label = req.label.map(|l| l.trim().to_string()).filter(|l| !l.is_empty());
    if label.as_ref().is_some_and(|l| l.chars().count() > MAX_LABEL_LEN) {
        return Err(ApiError::bad_request(format!("labels are limited to {MAX_LABEL_LEN} characters")));
    }
    let (_, user) = st.update(
        |u| match &label {
            Some(l) => {
                u.labels.insert(idx, l.clone());
            }
            None => {
                u.labels.remove(&idx);
            }
        },
        UserState::save_labels,
    )?;
    Ok(Json(json!({ "index": idx, "label": user.labels.get(&idx) })))
}

async fn sample(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult {
    let b = &st.bundle;
    let row = b.row_of(&id).ok_or_else(|| ApiError::not_found(format!("sample {id} is not in the bundle")))?;
    let record = b.manifest.record_for_sample(&id).expect("bundle ids resolve");
    let ranks: Vec<usize> = b
        .reports
        .iter()
        .map(|r| r.sorted.iter().position(|s| s.sample_id == id).expect("every sample is ranked"))
        .collect();
    Ok(Json(json!({
        "sample_id": id,
        "record": record,
        "flags": st.user().flags_of(&id),
        "values": b.projection.row(row),
        "ranks": ranks,
        "thumbnail_url": thumb_url(&id),
    })))
}

async fn thumb(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    if st.bundle.row_of(&id).is_none() {
        return Err(ApiError::not_found(format!("sample {id} is not in the bundle")));
    }
    let st2 = st.clone();
    let bytes = tokio::task::spawn_blocking(move || ensure_thumbnail(&st2.bundle.run, &st2.bundle.manifest, &id))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn flags(State(st): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({ "flags": st.user().flags }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FlagRequest {
    sample_id: String,
    #[serde(default)]
    flag: Option<String>,
    set: bool,
}

fn valid_flag(name: &str) -> bool {
    !name.is_empty() && name.len() <= 64 && name.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

async fn set_flag(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult {
    let req: FlagRequest = parse_body(&body)?;
    let flag = req.flag.unwrap_or_else(|| DEFAULT_FLAG.to_string());
    if !valid_flag(&flag) {
        return Err(ApiError::bad_request("flag names are 1-64 characters of [A-Za-z0-9_-]"));
    }
    if st.bundle.row_of(&req.sample_id).is_none() {
        return Err(ApiError::not_found(format!("sample {} is not in the bundle", req.sample_id)));
    }
    let (changed, user) = st.update(|u| u.set_flag(&req.sample_id, &flag, req.set), UserState::save_flags)?;
    Ok(Json(json!({
        "sample_id": req.sample_id,
        "flags": user.flags_of(&req.sample_id),
        "changed": changed,
    })))
}

fn exclusion_bytes(st: &AppState) -> Vec<u8> {
    exclusion_list(&st.user(), &st.bundle.hash).to_json()
}

fn json_bytes(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], bytes).into_response()
}

async fn exclusions(State(st): State<Arc<AppState>>) -> Response {
    json_bytes(exclusion_bytes(&st))
}

/// Writes `exclusions.json` in the run directory and returns the exact file bytes.
async fn export(State(st): State<Arc<AppState>>) -> Result<Response, ApiError> {
    let _guard = st.writer.lock().expect("writer lock");
    let bytes = exclusion_bytes(&st);
    crate::io_util::write_atomic(&st.bundle.run.exclusions(), &bytes)?;
    Ok(json_bytes(bytes))
}

fn content_type(path: &std::path::Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).unwrap_or("") {
        "html" => "text/html; charset=utf-8",
        "js" | "mjs" => "text/javascript",
        "css" => "text/css",
        "json" => "application/json",
        "png" => "image/png",
        "svg" => "image/svg+xml",
        "ico" => "image/x-icon",
        "woff2" => "font/woff2",
        _ => "application/octet-stream",
    }
}

async fn fallback(State(st): State<Arc<AppState>>, method: Method, uri: Uri) -> Response {
    let path = uri.path();
    if method == Method::GET && !path.starts_with("/api/") {
        if let Some(dir) = &st.static_dir {
            let rel = path.trim_start_matches('/');
            let rel = if rel.is_empty() { "index.html" } else { rel };
            let rel = std::path::Path::new(rel);
            if rel.components().all(|c| matches!(c, Component::Normal(_))) {
                let file = dir.join(rel);
                if let Ok(bytes) = tokio::fs::read(&file).await {
                    return ([(header::CONTENT_TYPE, content_type(&file))], Body::from(bytes)).into_response();
                }
            }
        }
    }
    ApiError::not_found(format!("no route for {method} {path}")).into_response()
}

async fn method_not_allowed(method: Method, uri: Uri) -> Response {
    ApiError::new(
        StatusCode::METHOD_NOT_ALLOWED,
        "method_not_allowed",
        format!("{method} is not supported on {}", uri.path()),
    )
    .into_response()
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/v1/summary", get(summary))
        .route("/api/v1/components", get(components))
        .route("/api/v1/components/{index}", get(component))
        .route("/api/v1/components/{index}/samples", get(component_samples))
        .route("/api/v1/components/{index}/label", put(set_label))
        .route("/api/v1/samples/{*id}", get(sample))
        .route("/api/v1/thumbs/{*id}", get(thumb))
        .route("/api/v1/flags", get(flags).post(set_flag))
        .route("/api/v1/exclusions", get(exclusions))
        .route("/api/v1/export", post(export))
        .fallback(fallback)
        .method_not_allowed_fallback(method_not_allowed)
        .with_state(state)
}

/// Serves until Ctrl-C. Fails immediately if the address is taken.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> crate::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::io(addr.to_string(), e))?;
    let local = listener.local_addr().map_err(|e| Error::io(addr.to_string(), e))?;
    log::info!("serving {} on http://{local}", state.bundle.run.root.display());
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Error::io(local.to_string(), e))
}
