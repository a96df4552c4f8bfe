//! HTTP front end: completion inference plus read access to a benchmark
//! directory and write access to its source masks.
//!
//! Images travel as base64 PNG inside JSON. Asset downloads are the one
//! exception and return the raw file bytes. Errors are
//! `{"error": code, "detail": text}`.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::{Mutex, Semaphore};

use refcomplete::benchmark::{read_manifest, Manifest, MANIFEST};
use refcomplete::diffusion::{sample_completion, SamplerConfig};
use refcomplete::model::checkpoint;
use refcomplete::{Mask, Model, PartLabel, Raster, ReferencePart};

pub const DEFAULT_PORT: u16 = 8080;
pub const DEFAULT_QUEUE_DEPTH: usize = 4;
pub const MAX_STEPS: usize = 250;
pub const MAX_GUIDANCE: f32 = 30.0;

/// Startup settings, normally read from `REFCOMPLETE_*` variables.
#[derive(Clone, Debug, PartialEq)]
pub struct ServiceConfig {
    pub checkpoint: Option<PathBuf>,
    pub benchmark_dir: Option<PathBuf>,
    pub port: u16,
    pub queue_depth: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig { checkpoint: None, benchmark_dir: None, port: DEFAULT_PORT, queue_depth: DEFAULT_QUEUE_DEPTH }
    }
}

impl ServiceConfig {
    /// Reads `REFCOMPLETE_CHECKPOINT`, `REFCOMPLETE_BENCHMARK_DIR`,
    /// `REFCOMPLETE_PORT` and `REFCOMPLETE_QUEUE_DEPTH`.
    pub fn from_env() -> Result<Self, StartupError> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn from_lookup(lookup: impl Fn(&str) -> Option<String>) -> Result<Self, StartupError> {
        let parse = |key: &str, default: usize| -> Result<usize, StartupError> {
            match lookup(key) {
                None => Ok(default),
                Some(v) => v.trim().parse().map_err(|_| StartupError::Config(format!("{key}={v:?} is not a non-negative integer"))),
            }
        };
        let port = parse("REFCOMPLETE_PORT", DEFAULT_PORT as usize)?;
        let port = u16::try_from(port).map_err(|_| StartupError::Config(format!("REFCOMPLETE_PORT={port} is out of range")))?;
        Ok(ServiceConfig {
            checkpoint: lookup("REFCOMPLETE_CHECKPOINT").filter(|s| !s.is_empty()).map(PathBuf::from),
            benchmark_dir: lookup("REFCOMPLETE_BENCHMARK_DIR").filter(|s| !s.is_empty()).map(PathBuf::from),
            port,
            queue_depth: parse("REFCOMPLETE_QUEUE_DEPTH", DEFAULT_QUEUE_DEPTH)?,
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StartupError {
    #[error("service configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] refcomplete::Error),
    #[error("binding {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
}

impl StartupError {
    pub fn is_io(&self) -> bool {
        match self {
            StartupError::Core(e) => e.is_io(),
            StartupError::Bind { .. } => true,
            StartupError::Config(_) => false,
        }
    }
}

struct Benchmark {
    root: PathBuf,
    manifest: Manifest,
    // One lock per group serializes mask writes.
    locks: HashMap<String, Mutex<()>>,
}

/// Shared state behind the router.
#[derive(Clone)]
pub struct AppState {
    model: Option<Arc<Model>>,
    benchmark: Option<Arc<Benchmark>>,
    queue: Arc<Semaphore>,
    workers: Arc<Semaphore>,
}

impl AppState {
    /// `queue_depth` bounds requests that are running or waiting for a worker.
    pub fn new(model: Option<Model>, benchmark_dir: Option<&Path>, queue_depth: usize) -> Result<Self, StartupError> {
        let benchmark = match benchmark_dir {
            Some(root) => {
                let manifest = read_manifest(&root.join(MANIFEST))?;
                let locks = manifest.groups.iter().map(|g| (g.group_id.clone(), Mutex::new(()))).collect();
                Some(Arc::new(Benchmark { root: root.to_path_buf(), manifest, locks }))
            }
            None => None,
        };
        let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
        Ok(AppState {
            model: model.map(Arc::new),
            benchmark,
            queue: Arc::new(Semaphore::new(queue_depth)),
            workers: Arc::new(Semaphore::new(workers)),
        })
    }

    pub fn from_config(config: &ServiceConfig) -> Result<Self, StartupError> {
        let model = config.checkpoint.as_deref().map(checkpoint::load).transpose()?;
        Self::new(model, config.benchmark_dir.as_deref(), config.queue_depth)
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/complete", post(complete))
        .route("/v1/benchmark/groups", get(list_groups))
        .route("/v1/benchmark/groups/{id}", get(group_detail))
        .route("/v1/benchmark/groups/{id}/mask", put(put_mask))
        .route("/v1/benchmark/groups/{id}/assets/{*name}", get(asset))
        .with_state(state)
}

/// Binds `0.0.0.0:port` and serves until the process is stopped.
pub async fn serve(config: ServiceConfig) -> Result<(), StartupError> {
    let state = AppState::from_config(&config)?;
    let addr = SocketAddr::from(([0, 0, 0, 0], config.port));
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|source| StartupError::Bind { addr, source })?;
    log::info!("listening on {addr}");
    axum::serve(listener, router(state)).await.map_err(|source| StartupError::Bind { addr, source })
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    detail: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, detail: impl Into<String>) -> Self {
        ApiError { status, code, detail: detail.into() }
    }

    fn bad_request(code: &'static str, detail: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, detail)
    }

    fn unprocessable(code: &'static str, detail: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, code, detail)
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.code, "detail": self.detail }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct CompletionRequest {
    pub source: String,
    pub mask: String,
    #[serde(default)]
    pub references: Vec<ReferencePayload>,
    #[serde(default)]
    pub prompt: Option<String>,
    pub seed: u64,
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub guidance: Option<f32>,
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ReferencePayload {
    pub label: String,
    pub image: String,
    pub mask: String,
}

#[derive(Debug, Deserialize, Serialize)]
pub struct CompletionResponse {
    pub image: String,
    pub duration_ms: u64,
    pub seed: u64,
    pub steps: usize,
    pub guidance: f32,
}

fn parse_json<T: serde::de::DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request("malformed_request", e.to_string()))
}

fn decode_b64(field: &str, text: &str) -> ApiResult<Vec<u8>> {
    // Browsers hand out data URLs; accept them as-is.
    let text = text.split_once(";base64,").map_or(text, |(_, b)| b);
    B64.decode(text.trim()).map_err(|e| ApiError::bad_request("malformed_request", format!("{field}: invalid base64: {e}")))
}

fn decode_image(field: &str, text: &str) -> ApiResult<Raster> {
    Raster::decode_png(&decode_b64(field, text)?).map_err(|e| ApiError::bad_request("malformed_request", format!("{field}: {e}")))
}

fn decode_mask(field: &str, text: &str) -> ApiResult<Mask> {
    Mask::decode_png(&decode_b64(field, text)?).map_err(|e| ApiError::bad_request("malformed_request", format!("{field}: {e}")))
}

struct Job {
    source: Raster,
    mask: Mask,
    references: Vec<ReferencePart>,
    prompt: Option<String>,
    seed: u64,
    sampler: SamplerConfig,
}

fn parse_completion(body: &[u8]) -> ApiResult<Job> {
    let req: CompletionRequest = parse_json(body)?;
    let source = decode_image("source", &req.source)?;
    let mask = decode_mask("mask", &req.mask)?;
    let mut references = Vec::with_capacity(req.references.len());
    for (i, r) in req.references.iter().enumerate() {
        let label: PartLabel = r.label.parse().map_err(|e| ApiError::bad_request("malformed_request", format!("references[{i}].label: {e}")))?;
        references.push(ReferencePart {
            label,
            image: decode_image(&format!("references[{i}].image"), &r.image)?,
            mask: decode_mask(&format!("references[{i}].mask"), &r.mask)?,
            caption: String::new(),
        });
    }
    let defaults = SamplerConfig::default();
    let steps = req.steps.unwrap_or(defaults.steps);
    let guidance = req.guidance.unwrap_or(defaults.guidance_scale);
    if !(1..=MAX_STEPS).contains(&steps) {
        return Err(ApiError::unprocessable("steps_out_of_range", format!("steps must be in [1, {MAX_STEPS}], got {steps}")));
    }
    if !(0.0..=MAX_GUIDANCE).contains(&guidance) {
        return Err(ApiError::unprocessable("guidance_out_of_range", format!("guidance must be in [0, {MAX_GUIDANCE}], got {guidance}")));
    }
    if mask.is_empty() {
        return Err(ApiError::unprocessable("empty_mask", "the mask selects no pixels"));
    }
    if mask.height() != source.height() || mask.width() != source.width() {
        return Err(ApiError::unprocessable(
            "size_mismatch",
            format!("mask is {}x{}, source is {}x{}", mask.width(), mask.height(), source.width(), source.height()),
        ));
    }
    for (i, r) in references.iter().enumerate() {
        r.validate().map_err(|e| ApiError::unprocessable("invalid_reference", format!("references[{i}]: {e}")))?;
    }
    Ok(Job { source, mask, references, prompt: req.prompt.filter(|p| !p.trim().is_empty()), seed: req.seed, sampler: SamplerConfig { steps, guidance_scale: guidance, ..defaults } })
}

fn run_job(model: &Model, job: &Job) -> refcomplete::Result<Raster> {
    let cache = model.encode_conditions(&job.references, job.prompt.as_deref())?;
    sample_completion(model, &cache, &job.source, &job.mask, &job.sampler, job.seed)
}

async fn complete(State(state): State<AppState>, body: Bytes) -> ApiResult<Json<CompletionResponse>> {
    let job = parse_completion(&body)?;
    let model = state.model.clone().ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no_model", "the service was started without a checkpoint"))?;
    let _slot = state
        .queue
        .clone()
        .try_acquire_owned()
        .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "queue_full", "too many completion requests in flight; retry later"))?;
    let _worker = state.workers.clone().acquire_owned().await.map_err(ApiError::internal)?;
    let started = Instant::now();
    let job = Arc::new(job);
    let result = {
        let job = job.clone();
        tokio::task::spawn_blocking(move || run_job(&model, &job)).await.map_err(ApiError::internal)?
    };
    let image = result.map_err(|e| ApiError::unprocessable("invalid_request", e.to_string()))?;
    Ok(Json(CompletionResponse {
        image: B64.encode(image.encode_png()),
        duration_ms: started.elapsed().as_millis() as u64,
        seed: job.seed,
        steps: job.sampler.steps,
        guidance: job.sampler.guidance_scale,
    }))
}

fn benchmark(state: &AppState) -> ApiResult<&Benchmark> {
    state.benchmark.as_deref().ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "no_benchmark", "the service was started without a benchmark directory"))
}

fn group<'a>(bench: &'a Benchmark, id: &str) -> ApiResult<&'a refcomplete::benchmark::GroupEntry> {
    bench.manifest.group(id).ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_group", format!("no group {id:?}")))
}

async fn list_groups(State(state): State<AppState>) -> ApiResult<Json<serde_json::Value>> {
    let bench = benchmark(&state)?;
    let groups: Vec<_> = bench
        .manifest
        .groups
        .iter()
        .map(|g| json!({ "group_id": g.group_id, "prompt": g.prompt, "references": g.references.iter().map(|r| r.label).collect::<Vec<_>>() }))
        .collect();
    Ok(Json(json!({ "count": groups.len(), "groups": groups })))
}

async fn group_detail(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<serde_json::Value>> {
    let g = group(benchmark(&state)?, &id)?;
    let assets: serde_json::Map<_, _> =
        g.assets().into_iter().map(|(name, _)| (name.clone(), json!(format!("/v1/benchmark/groups/{id}/assets/{name}")))).collect();
    Ok(Json(json!({
        "group_id": g.group_id,
        "prompt": g.prompt,
        "references": g.references.iter().map(|r| json!({ "label": r.label, "caption": r.caption })).collect::<Vec<_>>(),
        "assets": assets,
    })))
}

async fn asset(State(state): State<AppState>, UrlPath((id, name)): UrlPath<(String, String)>) -> ApiResult<Response> {
    let bench = benchmark(&state)?;
    let g = group(bench, &id)?;
    let rel = g.asset(&name).ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_asset", format!("group {id} has no asset {name:?}")))?;
    let path = bench.root.join(rel);
    // Reads wait for an in-progress mask write so they never see a half state.
    let _guard = bench.locks[&g.group_id].lock().await;
    let bytes = tokio::fs::read(&path).await.map_err(|e| ApiError::internal(format!("{}: {e}", path.display())))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskPayload {
    mask: String,
}

async fn put_mask(State(state): State<AppState>, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult<Json<serde_json::Value>> {
    let bench = benchmark(&state)?;
    let g = group(bench, &id)?;
    let payload: MaskPayload = parse_json(&body)?;
    let bytes = decode_b64("mask", &payload.mask)?;
    let mask = Mask::decode_png(&bytes).map_err(|e| ApiError::bad_request("malformed_request", format!("mask: {e}")))?;
    let source_path = bench.root.join(&g.source);
    let (w, h) = image::image_dimensions(&source_path).map_err(|e| ApiError::internal(format!("{}: {e}", source_path.display())))?;
    if (mask.width(), mask.height()) != (w as usize, h as usize) {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "dimension_mismatch",
            format!("mask is {}x{}, group images are {w}x{h}", mask.width(), mask.height()),
        ));
    }
    let target = bench.root.join(&g.mask);
    let _guard = bench.locks[&g.group_id].lock().await;
    let stored = bytes.clone();
    let written = tokio::task::spawn_blocking(move || replace_atomically(&target, &stored)).await.map_err(ApiError::internal)?;
    written.map_err(|e| ApiError::internal(format!("storing mask: {e}")))?;
    let mut out = json!({ "group_id": g.group_id, "stored": true, "bytes": bytes.len() });
    if mask.is_empty() {
        out["warning"] = json!("empty_mask");
    }
    Ok(Json(out))
}

/// Writes a sibling temporary file and renames it over `target`.
fn replace_atomically(target: &Path, bytes: &[u8]) -> std::io::Result<()> {
    use std::io::Write;
    let dir = target.parent().unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(target).map_err(|e| e.error)?;
    Ok(())
}
