//! HTTP trace service.
//!
//! Artifacts are loaded once and shared read-only. Hyperparameter overrides
//! arrive with each request and never change the loaded pipeline. The only
//! mutable state is the last translation per session id (`?session=`, default
//! `default`), kept so neighbor drill-down can refer back to it.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use knnbox::corpus::ParallelCorpus;
use knnbox::fingerprint::to_hex;
use knnbox::pipeline::Pipeline;
use knnbox::trace::{StepTrace, TraceBuilder};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::cors::{AllowOrigin, CorsLayer};

pub const DEFAULT_SESSION: &str = "default";

pub struct AppState {
    pipeline: Pipeline,
    corpus: Option<ParallelCorpus>,
    /// Verbose traces of the last translation per session.
    sessions: Mutex<HashMap<String, Vec<StepTrace>>>,
}

impl AppState {
    pub fn new(pipeline: Pipeline, corpus: Option<ParallelCorpus>) -> Self {
        Self {
            pipeline,
            corpus,
            sessions: Mutex::new(HashMap::new()),
        }
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
    }
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    pub lambda: Option<f64>,
    pub temperature: Option<f64>,
    pub k: Option<usize>,
    pub variant: Option<String>,
    pub beam: Option<usize>,
    pub max_len: Option<usize>,
    /// Include full distributions, query vectors and keys.
    pub verbose: Option<bool>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranslateRequest {
    pub text: String,
    #[serde(default)]
    pub overrides: Overrides,
}

#[derive(Debug, Deserialize)]
pub struct SessionParams {
    pub session: Option<String>,
    #[serde(default)]
    pub verbose: bool,
}

impl SessionParams {
    fn id(&self) -> String {
        self.session.clone().unwrap_or_else(|| DEFAULT_SESSION.to_string())
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl From<knnbox::Error> for ApiError {
    fn from(e: knnbox::Error) -> Self {
        let status = if e.is_config() {
            StatusCode::BAD_REQUEST
        } else {
            StatusCode::INTERNAL_SERVER_ERROR
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

/// Applies request overrides to a copy of the loaded pipeline.
pub fn apply_overrides(base: &Pipeline, o: &Overrides) -> Result<Pipeline, knnbox::Error> {
    let mut cfg = base.combiner_config().clone();
    if let Some(v) = o.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = o.temperature {
        cfg.temperature = v;
    }
    if let Some(v) = o.k {
        cfg.k = v;
    }
    if let Some(v) = &o.variant {
        cfg.variant = v.clone();
    }
    let p = base.with_combiner(cfg)?;
    if o.beam.is_none() && o.max_len.is_none() {
        return Ok(p);
    }
    p.with_decoding(o.beam.unwrap_or(base.beam()), o.max_len.unwrap_or(base.max_len()))
}

fn strip_verbose(mut t: StepTrace) -> StepTrace {
    t.query = None;
    for d in [&mut t.p_nmt, &mut t.p_final] {
        d.full = None;
    }
    if let Some(d) = t.p_knn.as_mut() {
        d.full = None;
    }
    for n in &mut t.neighbors {
        n.key = None;
    }
    t
}

async fn translate(
    State(state): State<Arc<AppState>>,
    Query(params): Query<SessionParams>,
    body: Bytes,
) -> Result<Json<Value>, ApiError> {
    let req: TranslateRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("invalid request body: {e}")))?;
    let ids = state.pipeline.vocab().encode(&req.text);
    if ids.is_empty() {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "input text is empty"));
    }
    let pipeline = apply_overrides(&state.pipeline, &req.overrides)?;
    let verbose = req.overrides.verbose.unwrap_or(false);
    let session = params.id();
    let worker = Arc::clone(&state);
    let (body, traces) = tokio::task::spawn_blocking(move || -> Result<(Value, Vec<StepTrace>), ApiError> {
        let g = pipeline.generate(&ids)?;
        let traces = TraceBuilder::new(pipeline.vocab())
            .with_corpus(worker.corpus.as_ref())
            .verbose(true)
            .generation(&g);
        let shown: Vec<StepTrace> = if verbose {
            traces.clone()
        } else {
            traces.iter().cloned().map(strip_verbose).collect()
        };
        let body = json!({
            "source_tokens": ids,
            "tokens": g.tokens,
            "words": g.tokens.iter().map(|&t| pipeline.vocab().token(t).unwrap_or("<unk>")).collect::<Vec<_>>(),
            "text": pipeline.vocab().decode(g.content()),
            "finished": g.finished,
            "score": g.score,
            "config": {
                "combiner": pipeline.combiner().map(|_| pipeline.combiner_config()),
                "beam": pipeline.beam(),
                "max_len": pipeline.max_len(),
            },
            "traces": shown,
        });
        Ok((body, traces))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}")))??;
    let mut body = body;
    body["session"] = Value::String(session.clone());
    state.sessions.lock().expect("session lock").insert(session, traces);
    Ok(Json(body))
}

async fn config(State(state): State<Arc<AppState>>) -> Json<Value> {
    let p = &state.pipeline;
    let model = p.model();
    Json(json!({
        "model": {
            "vocab_size": model.vocab_size(),
            "dim": model.dim(),
            "window": model.window(),
            "fingerprint": to_hex(model.fingerprint()),
        },
        "combiner": p.combiner().map(|_| p.combiner_config()),
        "retriever": p.retrieval().map(|r| r.retriever().name()),
        "pca": p.retrieval().and_then(|r| r.pca()).map(|t| json!({
            "dim_in": t.dim_in(),
            "dim_out": t.dim_out(),
            "fingerprint": to_hex(t.fingerprint()),
        })),
        "metanet": p.metanet().map(|n| json!({ "k": n.k(), "hidden": n.hidden() })),
        "beam": p.beam(),
        "max_len": p.max_len(),
        "datastore": p.datastore_stats(),
        "corpus": state.corpus.as_ref().map(|c| c.name.clone()),
    }))
}

async fn neighbor(
    State(state): State<Arc<AppState>>,
    Path((step, rank)): Path<(usize, usize)>,
    Query(params): Query<SessionParams>,
) -> Result<Json<Value>, ApiError> {
    let sessions = state.sessions.lock().expect("session lock");
    let traces = sessions
        .get(&params.id())
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "no translation in this session yet"))?;
    let trace = traces
        .get(step)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("step {step} out of range ({} steps)", traces.len())))?;
    let mut detail = trace
        .neighbors
        .get(rank)
        .cloned()
        .ok_or_else(|| {
            ApiError::new(
                StatusCode::NOT_FOUND,
                format!("rank {rank} out of range ({} neighbors)", trace.neighbors.len()),
            )
        })?;
    if !params.verbose {
        detail.key = None;
    }
    Ok(Json(json!({ "step": step, "token": trace.token, "neighbor": detail })))
}

fn local_origin(origin: &HeaderValue) -> bool {
    let Ok(s) = origin.to_str() else { return false };
    let rest = s
        .strip_prefix("http://")
        .or_else(|| s.strip_prefix("https://"))
        .unwrap_or("");
    let host = match rest.find(']') {
        Some(end) if rest.starts_with('[') => &rest[..=end],
        _ => rest.split(':').next().unwrap_or(""),
    };
    matches!(host, "localhost" | "127.0.0.1" | "[::1]")
}

pub fn router(state: Arc<AppState>) -> Router {
    let cors = CorsLayer::new()
        .allow_origin(AllowOrigin::predicate(|origin, _| local_origin(origin)))
        .allow_methods([axum::http::Method::GET, axum::http::Method::POST])
        .allow_headers([axum::http::header::CONTENT_TYPE]);
    Router::new()
        .route("/api/translate", post(translate))
        .route("/api/config", get(config))
        .route("/api/neighbor/{step}/{rank}", get(neighbor))
        .layer(cors)
        .with_state(state)
}
