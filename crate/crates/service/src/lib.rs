//! HTTP facade over a loaded index: search, per-class stats, original images
//! and object crops, relevance judgments and cumulative true-positive curves.
//! All routes live under `/v1`.

pub mod api;
mod error;
mod metrics;

use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path as UrlPath, Query as UrlQuery, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use lru::LruCache;

use objseek_core::encoder::Encoder;
use objseek_core::eval::{cumulative_tp_curve, Journal, Judgment, QueryLog, QueryRecord};
use objseek_core::index::FORMAT_VERSION;
use objseek_core::{pipeline, run_query, ClassLabel, ImageId, Index, Query, QueryOutcome};

pub use api::{SearchHit, SearchRequest};
pub use error::ApiError;
pub use metrics::Metrics;

/// Largest accepted `n` for `/curves`.
pub const MAX_CURVE_LEN: usize = 100_000;

#[derive(Clone, Debug)]
pub struct ServiceOptions {
    /// Directory of `{image_id}.json` annotations; crops are unavailable
    /// without it.
    pub annotations_dir: Option<PathBuf>,
    pub journal_path: PathBuf,
    pub bearer_token: Option<String>,
    pub crop_cache_entries: usize,
}

impl ServiceOptions {
    pub fn new(journal_path: impl Into<PathBuf>) -> Self {
        Self {
            annotations_dir: None,
            journal_path: journal_path.into(),
            bearer_token: None,
            crop_cache_entries: 256,
        }
    }
}

struct Judgments {
    journal: Journal,
    queries: QueryLog,
}

type CropKey = (ImageId, u32);

/// Shared, read-only index snapshot plus the serialized judgment writer.
pub struct AppState {
    index: Index,
    encoder: Option<Arc<dyn Encoder>>,
    annotations_dir: Option<PathBuf>,
    bearer_token: Option<String>,
    judgments: Mutex<Judgments>,
    crops: Mutex<LruCache<CropKey, Bytes>>,
    metrics: Metrics,
}

impl AppState {
    /// `encoder` is `None` when no text encoder is reachable; searches then
    /// answer 503.
    pub fn new(index: Index, encoder: Option<Arc<dyn Encoder>>, options: ServiceOptions) -> objseek_core::Result<Self> {
        let journal = Journal::open(&options.journal_path)?;
        let queries = QueryLog::open(&QueryLog::beside(&options.journal_path))?;
        let cap = NonZeroUsize::new(options.crop_cache_entries).unwrap_or(NonZeroUsize::MIN);
        Ok(Self {
            index,
            encoder,
            annotations_dir: options.annotations_dir,
            bearer_token: options.bearer_token,
            judgments: Mutex::new(Judgments { journal, queries }),
            crops: Mutex::new(LruCache::new(cap)),
            metrics: Metrics::default(),
        })
    }

    pub fn index(&self) -> &Index {
        &self.index
    }

    pub fn metrics(&self) -> &Metrics {
        &self.metrics
    }

    fn encoder(&self) -> Result<Arc<dyn Encoder>, ApiError> {
        self.encoder
            .clone()
            .ok_or_else(|| ApiError::Unavailable("no text encoder is available".into()))
    }

    fn judgments(&self) -> std::sync::MutexGuard<'_, Judgments> {
        self.judgments.lock().unwrap_or_else(|p| p.into_inner())
    }
}

pub type SharedState = Arc<AppState>;

/// Builds the `/v1` API. When `static_dir` is given, its files are served
/// at the root for everything outside `/v1`.
pub fn router(state: SharedState, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/classes", get(classes))
        .route("/search", post(search))
        .route("/images/{id}", get(image))
        .route("/images/{id}/objects/{j}", get(object_crop))
        .route("/judgments", post(judge))
        .route("/curves", get(curves))
        .route("/metrics", get(metrics))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token))
        .route("/healthz", get(healthz))
        .with_state(state);
    let app = Router::new().nest("/v1", api);
    match static_dir {
        Some(dir) => app.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => app,
    }
}

/// Serves `app` until ctrl-c.
pub async fn serve(listener: tokio::net::TcpListener, app: Router) -> std::io::Result<()> {
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn require_token(State(state): State<SharedState>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.bearer_token {
        let presented = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(token.as_str()) {
            return ApiError::Unauthorized.into_response();
        }
    }
    next.run(req).await
}

async fn healthz(State(state): State<SharedState>) -> Json<api::Health> {
    Json(api::Health {
        status: if state.encoder.is_some() { "ok" } else { "degraded" }.into(),
        index_version: FORMAT_VERSION,
        encoder_id: state.index.encoder().encoder_id.clone(),
    })
}

async fn classes(State(state): State<SharedState>) -> Json<api::ClassesResponse> {
    Json(state.index.stats())
}

fn run(state: &AppState, encoder: &dyn Encoder, record: &QueryRecord, k: usize) -> Result<QueryOutcome, ApiError> {
    let class = ClassLabel::new(record.class.as_str())?;
    let query = Query::new(class, record.text.as_str())?;
    Ok(run_query(&state.index, encoder, &query, k, record.mode)?)
}

async fn search(State(state): State<SharedState>, body: Result<Json<SearchRequest>, JsonRejection>) -> Response {
    let started = Instant::now();
    let outcome = search_inner(&state, body).await;
    state.metrics.observe_search(started.elapsed(), outcome.is_ok());
    match outcome {
        Ok(resp) => resp,
        Err(e) => e.into_response(),
    }
}

async fn search_inner(state: &SharedState, body: Result<Json<SearchRequest>, JsonRejection>) -> Result<Response, ApiError> {
    let Json(req) = body.map_err(|e| ApiError::BadRequest(e.body_text()))?;
    let record = QueryRecord::new(req.class, req.text, req.mode);
    let encoder = state.encoder()?;
    let (outcome, record) = {
        let state = state.clone();
        tokio::task::spawn_blocking(move || run(&state, encoder.as_ref(), &record, req.k).map(|o| (o, record))).await??
    };
    let hits = SearchHit::from_results(&state.index, &outcome.results);
    let query_id = record.query_id.clone();
    if req.k > 0 {
        state.judgments().queries.record(record)?;
    }
    let body = serde_json::to_vec(&hits).map_err(|e| ApiError::Internal(e.to_string()))?;
    let headers = [
        (header::CONTENT_TYPE, HeaderValue::from_static("application/json")),
        (header::HeaderName::from_static("x-query-id"), header_value(&query_id)?),
        (
            header::HeaderName::from_static("x-exhausted"),
            HeaderValue::from_static(if outcome.exhausted { "true" } else { "false" }),
        ),
    ];
    Ok((headers, body).into_response())
}

fn header_value(s: &str) -> Result<HeaderValue, ApiError> {
    HeaderValue::from_str(s).map_err(|e| ApiError::Internal(e.to_string()))
}

fn content_type(path: &str) -> &'static str {
    let ext = Path::new(path)
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    match ext.as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("bmp") => "image/bmp",
        _ => "application/octet-stream",
    }
}

async fn image(State(state): State<SharedState>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let view = state
        .index
        .image(&ImageId::new(&id))
        .ok_or_else(|| ApiError::NotFound(format!("unknown image `{id}`")))?;
    let uri = view.source_uri().to_owned();
    let bytes = tokio::fs::read(&uri)
        .await
        .map_err(|e| ApiError::NotFound(format!("source of `{id}` is not readable: {e}")))?;
    Ok(([(header::CONTENT_TYPE, content_type(&uri))], bytes).into_response())
}

async fn object_crop(
    State(state): State<SharedState>,
    UrlPath((id, j)): UrlPath<(String, u32)>,
) -> Result<Response, ApiError> {
    let image_id = ImageId::new(&id);
    let view = state
        .index
        .image(&image_id)
        .ok_or_else(|| ApiError::NotFound(format!("unknown image `{id}`")))?;
    if view.object(j).is_none() {
        return Err(ApiError::NotFound(format!("image `{id}` has no object {j}")));
    }
    let key = (image_id.clone(), j);
    let cached = state.crops.lock().unwrap_or_else(|p| p.into_inner()).get(&key).cloned();
    let png = match cached {
        Some(png) => png,
        None => {
            let dir = state
                .annotations_dir
                .clone()
                .ok_or_else(|| ApiError::NotFound("crops need an annotations directory".into()))?;
            let source = PathBuf::from(view.source_uri());
            let ann = pipeline::annotation_path(&dir, &image_id);
            let png = tokio::task::spawn_blocking(move || -> objseek_core::Result<Vec<u8>> {
                let crop = pipeline::object_crop(&source, &ann, j)?;
                pipeline::encode_png(&crop.crop)
            })
            .await?
            .map_err(|e| match e {
                objseek_core::Error::Io { .. } => ApiError::NotFound(e.to_string()),
                other => ApiError::Core(other),
            })?;
            let png = Bytes::from(png);
            state
                .crops
                .lock()
                .unwrap_or_else(|p| p.into_inner())
                .put(key, png.clone());
            png
        }
    };
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn judge(
    State(state): State<SharedState>,
    body: Result<Json<api::JudgmentRequest>, JsonRejection>,
) -> Result<(StatusCode, Json<Judgment>), ApiError> {
    let Json(req) = body.map_err(|e| ApiError::BadRequest(e.body_text()))?;
    if state.index.image(&req.image_id).is_none() {
        return Err(ApiError::NotFound(format!("unknown image `{}`", req.image_id)));
    }
    let ts = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true);
    let judge = req.judge.unwrap_or_else(|| "anonymous".into());
    let j = Judgment::new(req.query_id, req.image_id, req.verdict, judge, ts);
    state.judgments().journal.append(j.clone())?;
    state.metrics.observe_judgment();
    Ok((StatusCode::CREATED, Json(j)))
}

async fn curves(
    State(state): State<SharedState>,
    params: Result<UrlQuery<api::CurveParams>, QueryRejection>,
) -> Result<Json<Vec<u32>>, ApiError> {
    let UrlQuery(params) = params.map_err(|e| ApiError::BadRequest(e.body_text()))?;
    if params.n > MAX_CURVE_LEN {
        return Err(ApiError::BadRequest(format!("n must be at most {MAX_CURVE_LEN}")));
    }
    let record = state
        .judgments()
        .queries
        .get(&params.query_id)
        .cloned()
        .ok_or_else(|| ApiError::NotFound(format!("unknown query `{}`", params.query_id)))?;
    let encoder = state.encoder()?;
    let n = params.n;
    let ranked = {
        let state = state.clone();
        tokio::task::spawn_blocking(move || run(&state, encoder.as_ref(), &record, n)).await??
    };
    let ids: Vec<ImageId> = ranked.results.into_iter().map(|r| r.image_id).collect();
    let curve = cumulative_tp_curve(&ids, state.judgments().journal.judgments(), &params.query_id, n);
    Ok(Json(curve))
}

async fn metrics(State(state): State<SharedState>) -> impl IntoResponse {
    (
        [(header::CONTENT_TYPE, "text/plain; version=0.0.4")],
        state.metrics.render(&state.index),
    )
}
