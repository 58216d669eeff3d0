//! HTTP front end: `POST /route`, `POST /answer` and `GET /healthz`.
//!
//! All state is built once at startup and shared read-only between requests.
//! Router and backend calls may block (remote generation, embedding), so each
//! request runs them on the blocking thread pool.

use std::collections::HashMap;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Json;
use eiarag_core::clock::Clock;
use eiarag_core::config::{build_environment, build_router, Config};
use eiarag_core::dataset::{QueryRecord, QuerySet};
use eiarag_core::qa::{answer_query, Backends, QaConfig};
use eiarag_core::routers::{route, Router, RoutingDecision};
use eiarag_core::wire::{AnswerRequest, AnswerResponse, ErrorResponse, HealthResponse, RouteRequest, RouteResponse};
use eiarag_core::{Error, Result};
use tokio::net::TcpListener;

pub const SERVICE_NAME: &str = "eiarag-service";

pub struct ServiceState {
    router: Box<dyn Router>,
    backends: Backends,
    qa: QaConfig,
    clock: Arc<dyn Clock>,
    /// Known questions, so routers that need metadata (entity frequency,
    /// relation, annotations) can see it.
    known: HashMap<String, QueryRecord>,
}

impl ServiceState {
    pub fn new(router: Box<dyn Router>, backends: Backends, qa: QaConfig, clock: Arc<dyn Clock>) -> Self {
        Self {
            router,
            backends,
            qa,
            clock,
            known: HashMap::new(),
        }
    }

    pub fn with_queries(mut self, queries: &QuerySet) -> Self {
        self.known = queries.iter().map(|q| (key(&q.question), q.clone())).collect();
        self
    }

    /// Builds every backend and the configured router. A missing model file
    /// for the embedding policy is a fatal configuration error.
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let env = build_environment(cfg)?;
        let clock = cfg.clock();
        let router = build_router(cfg.routing.policy, cfg, &env.backends, clock.clone())?;
        let train = eiarag_core::dataset::load_query_set(cfg.artifacts().train()).ok();
        let state = Self::new(router, env.backends, cfg.qa_config(train.as_ref()), clock);
        Ok(match env.queries {
            Some(q) => state.with_queries(&q),
            None => state,
        })
    }

    pub fn policy(&self) -> &str {
        self.router.policy()
    }

    fn record(&self, question: &str) -> QueryRecord {
        self.known.get(&key(question)).cloned().unwrap_or_else(|| {
            let mut h: u64 = 0xcbf2_9ce4_8422_2325;
            for b in question.bytes() {
                h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
            }
            QueryRecord::new(format!("adhoc-{h:016x}"), question, Vec::new())
        })
    }

    pub fn route(&self, question: &str) -> Result<RoutingDecision> {
        route(self.router.as_ref(), &self.record(question), self.clock.as_ref())
    }

    pub fn answer(&self, question: &str) -> Result<AnswerResponse> {
        let query = self.record(question);
        let decision = route(self.router.as_ref(), &query, self.clock.as_ref())?;
        let outcome = answer_query(&query, decision.retrieve, &self.backends, &self.qa)?;
        Ok(AnswerResponse {
            answer: outcome.completion,
            retrieved: decision.retrieve,
            passages: outcome.passages,
            policy: decision.policy,
        })
    }
}

fn key(question: &str) -> String {
    question.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

pub struct ApiError {
    status: StatusCode,
    body: ErrorResponse,
}

impl ApiError {
    fn new(status: StatusCode, kind: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorResponse {
                error: message.into(),
                kind: kind.to_string(),
            },
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let mut root = &e;
        while let Error::Query { source, .. } = root {
            root = source;
        }
        let status = match root {
            Error::Validation(_) | Error::Parse { .. } | Error::Format(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Error::Transport { .. } => StatusCode::BAD_GATEWAY,
            Error::Timeout { .. } => StatusCode::GATEWAY_TIMEOUT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, root.kind(), e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::new(r.status(), "request", r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type Shared = Arc<ServiceState>;

fn question_of(q: &str) -> Result<String, ApiError> {
    if q.trim().is_empty() {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            "request",
            "question must not be empty",
        ));
    }
    Ok(q.to_string())
}

async fn blocking<T: Send + 'static>(
    state: Shared,
    f: impl FnOnce(&ServiceState) -> Result<T> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(move || f(&state))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(ApiError::from)
}

async fn route_handler(
    State(state): State<Shared>,
    body: Result<Json<RouteRequest>, JsonRejection>,
) -> Result<Json<RouteResponse>, ApiError> {
    let question = question_of(&body?.0.question)?;
    let d = blocking(state, move |s| s.route(&question)).await?;
    Ok(Json(RouteResponse {
        retrieve: d.retrieve,
        score: d.score,
        policy: d.policy,
        decision_ms: d.decision_latency.as_secs_f64() * 1e3,
    }))
}

async fn answer_handler(
    State(state): State<Shared>,
    body: Result<Json<AnswerRequest>, JsonRejection>,
) -> Result<Json<AnswerResponse>, ApiError> {
    let question = question_of(&body?.0.question)?;
    Ok(Json(blocking(state, move |s| s.answer(&question)).await?))
}

async fn health_handler(State(state): State<Shared>) -> Json<HealthResponse> {
    Json(HealthResponse {
        status: "ok".into(),
        name: SERVICE_NAME.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        policy: state.policy().to_string(),
    })
}

pub fn app(state: Arc<ServiceState>) -> axum::Router {
    axum::Router::new()
        .route("/route", post(route_handler))
        .route("/answer", post(answer_handler))
        .route("/healthz", get(health_handler))
        .with_state(state)
}

/// Serves on an already bound listener until the future is dropped.
pub async fn serve_on(listener: TcpListener, state: Arc<ServiceState>) -> Result<()> {
    let addr = listener.local_addr().map_err(|e| Error::io("listener", e))?;
    tracing::info!(%addr, policy = state.policy(), "serving");
    axum::serve(listener, app(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Error::io(addr.to_string(), e))
}

pub async fn serve(cfg: &Config) -> Result<()> {
    let cfg_owned = cfg.clone();
    let state = tokio::task::spawn_blocking(move || ServiceState::from_config(&cfg_owned))
        .await
        .map_err(|e| Error::Config(e.to_string()))??;
    let listener = TcpListener::bind(&cfg.service.bind)
        .await
        .map_err(|e| Error::io(&cfg.service.bind, e))?;
    serve_on(listener, Arc::new(state)).await
}
