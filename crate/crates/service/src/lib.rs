//! HTTP API over the assistant pipeline.
//!
//! | Method | Path              | Body / result                          |
//! |--------|-------------------|----------------------------------------|
//! | POST   | `/v1/query`       | [`QueryRequest`] → [`QueryResponse`]   |
//! | POST   | `/v1/feedback`    | [`FeedbackRequest`] → [`FeedbackAck`]  |
//! | GET    | `/v1/ood-intents` | OOD records, most frequent first       |
//! | GET    | `/v1/health`      | per-stage load status                  |
//! | GET    | `/v1/config`      | active config without filesystem paths |
//!
//! Errors are `{"error": ..}` with 400 for bad input, 404 for unknown or
//! forgotten query ids and 502 when a pipeline stage fails (the body then
//! also names the `stage` and carries the partial `result`).

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Request, State};
use axum::http::StatusCode;
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use naa_core::pipeline::{
    answer_query, record_feedback, Components, FeedbackRecord, FeedbackStore, Health, OODIntentRecord, OodStore,
    PipelineConfig, PipelineError, PipelineResult, QueryRegistry, Route, Verdict, SCHEMA_VERSION,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use uuid::Uuid;

/// JSON Schema every 200 body of `POST /v1/query` satisfies.
pub const QUERY_RESPONSE_SCHEMA: &str = include_str!("../schema/query_response.v1.json");

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryRequest {
    pub query_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentSummary {
    pub label: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextCard {
    pub passage_id: String,
    pub text: String,
    pub retriever_score: f32,
    pub reranker_score: Option<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub schema_version: u32,
    pub query_id: Uuid,
    pub route: Route,
    pub intent: Option<IntentSummary>,
    pub contexts: Vec<ContextCard>,
    pub draft_response: Option<String>,
    pub ood_keywords: Option<Vec<String>>,
    pub latency_ms: std::collections::BTreeMap<String, f64>,
}

impl QueryResponse {
    /// `None` when the result has no route, which only happens on failure.
    pub fn from_result(r: &PipelineResult) -> Option<Self> {
        Some(Self {
            schema_version: SCHEMA_VERSION,
            query_id: r.query_id,
            route: r.route?,
            intent: r.intent.as_ref().map(|p| IntentSummary {
                label: p.top_label.clone(),
                confidence: p.confidence,
            }),
            contexts: r
                .contexts
                .iter()
                .map(|c| ContextCard {
                    passage_id: c.passage.passage_id.clone(),
                    text: c.passage.context_text(),
                    retriever_score: c.retriever_score,
                    reranker_score: c.reranker_score,
                })
                .collect(),
            draft_response: r.draft_response.as_ref().map(|d| d.text.clone()),
            ood_keywords: r.ood_keywords.as_ref().map(|k| k.iter().map(|k| k.text.clone()).collect()),
            latency_ms: r.latency_ms.clone(),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeedbackRequest {
    pub query_id: Uuid,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edited_text: Option<String>,
    #[serde(default)]
    pub agent_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackAck {
    pub feedback_id: Uuid,
}

/// Shared by every request. Models are read-only; the stores serialize
/// their own writes.
pub struct ServiceState {
    pub config: PipelineConfig,
    pub components: Components,
    pub ood: OodStore,
    pub feedback: FeedbackStore,
    pub queries: QueryRegistry,
    requests: AtomicU64,
}

impl ServiceState {
    pub fn new(config: PipelineConfig, components: Components, ood: OodStore, feedback: FeedbackStore) -> Self {
        let queries = QueryRegistry::new(config.stores.query_horizon);
        Self {
            config,
            components,
            ood,
            feedback,
            queries,
            requests: AtomicU64::new(0),
        }
    }

    /// Loads the components and opens the configured stores.
    pub fn from_config(config: PipelineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let components = Components::load(&config);
        let ood = OodStore::open(config.stores.ood_path.as_deref())?;
        let feedback = FeedbackStore::open(config.stores.feedback_path.as_deref())?;
        Ok(Self::new(config, components, ood, feedback))
    }

    pub fn request_count(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: serde_json::Value,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            body: serde_json::json!({ "error": message.into() }),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("malformed body: {e}")))
}

async fn handle_query(State(state): State<Arc<ServiceState>>, body: Bytes) -> Result<Json<QueryResponse>, ApiError> {
    let req: QueryRequest = parse(&body)?;
    if req.query_text.trim().is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "query_text is empty"));
    }
    let st = state.clone();
    let result = tokio::task::spawn_blocking(move || answer_query(&req.query_text, &st.components, &st.config, &st.ood))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(|e| match e {
            PipelineError::EmptyQuery => ApiError::new(StatusCode::BAD_REQUEST, e.to_string()),
            other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
        })?;
    state.queries.register(&result);
    match (&result.error, QueryResponse::from_result(&result)) {
        (None, Some(resp)) => Ok(Json(resp)),
        (err, _) => {
            let (stage, message) = match err {
                Some(e) => (e.stage.to_string(), e.message.clone()),
                None => ("unknown".to_string(), "no route decided".to_string()),
            };
            Err(ApiError {
                status: StatusCode::BAD_GATEWAY,
                body: serde_json::json!({
                    "error": format!("{stage} stage failed: {message}"),
                    "stage": stage,
                    "result": result,
                }),
            })
        }
    }
}

async fn handle_feedback(State(state): State<Arc<ServiceState>>, body: Bytes) -> Result<Json<FeedbackAck>, ApiError> {
    let req: FeedbackRequest = parse(&body)?;
    let record = FeedbackRecord::new(req.query_id, req.verdict, req.edited_text, req.agent_id);
    let st = state.clone();
    let id = tokio::task::spawn_blocking(move || record_feedback(record, &st.queries, &st.feedback))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(|e| match e {
            PipelineError::UnknownQuery(_) => ApiError::new(StatusCode::NOT_FOUND, e.to_string()),
            PipelineError::Validation(_) => ApiError::new(StatusCode::BAD_REQUEST, e.to_string()),
            other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
        })?;
    Ok(Json(FeedbackAck { feedback_id: id }))
}

async fn handle_ood_list(State(state): State<Arc<ServiceState>>) -> Json<Vec<OODIntentRecord>> {
    Json(state.ood.records())
}

async fn handle_health(State(state): State<Arc<ServiceState>>) -> Json<Health> {
    Json(state.components.health(&state.config))
}

async fn handle_config(State(state): State<Arc<ServiceState>>) -> Json<PipelineConfig> {
    Json(state.config.redacted())
}

/// One structured log line per request.
async fn log_request(State(state): State<Arc<ServiceState>>, req: Request, next: Next) -> Response {
    let n = state.requests.fetch_add(1, Ordering::Relaxed) + 1;
    let method = req.method().to_string();
    let path = req.uri().path().to_string();
    let t = Instant::now();
    let resp = next.run(req).await;
    tracing::info!(
        target: "naa_service::access",
        request = n,
        method = %method,
        path = %path,
        status = resp.status().as_u16(),
        latency_ms = t.elapsed().as_secs_f64() * 1e3,
    );
    resp
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/v1/query", post(handle_query))
        .route("/v1/feedback", post(handle_feedback))
        .route("/v1/ood-intents", get(handle_ood_list))
        .route("/v1/health", get(handle_health))
        .route("/v1/config", get(handle_config))
        .layer(middleware::from_fn_with_state(state.clone(), log_request))
        .with_state(state)
}

/// Serves until ctrl-c.
pub async fn serve(state: Arc<ServiceState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
