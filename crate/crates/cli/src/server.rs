//! HTTP service over an atomically swappable snapshot.

use std::sync::{Arc, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Request, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use serde_json::json;
use tokio::sync::Semaphore;
use tower_http::cors::{AllowOrigin, CorsLayer};
use tracing::{info, warn};

use crate::config::ServiceConfig;
use crate::providers::Providers;
use crate::snapshot::{ApiError, Defaults, Health, PatientMatchRequest, Snapshot, SpaceMatchRequest};

pub struct AppState {
    snapshot: RwLock<Option<Arc<Snapshot>>>,
    config: ServiceConfig,
    defaults: Defaults,
    providers: Providers,
    token: Option<String>,
    permits: Semaphore,
}

impl AppState {
    pub fn new(config: ServiceConfig, providers: Providers, snapshot: Option<Snapshot>, token: Option<String>) -> Self {
        Self {
            snapshot: RwLock::new(snapshot.map(Arc::new)),
            defaults: Defaults::from(&config),
            permits: Semaphore::new(config.max_concurrency),
            config,
            providers,
            token,
        }
    }

    pub fn current(&self) -> Option<Arc<Snapshot>> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    pub fn swap(&self, next: Snapshot) {
        *self.snapshot.write().expect("snapshot lock") = Some(Arc::new(next));
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(json!({ "error": self.message() }))).into_response()
    }
}

/// Runs blocking match work on the blocking pool, bounded by the worker permits.
async fn run_blocking<T, F>(state: &AppState, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(Arc<Snapshot>) -> Result<T, ApiError> + Send + 'static,
{
    let snapshot = state.current().ok_or(ApiError::NotLoaded)?;
    let _permit = state
        .permits
        .acquire()
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?;
    tokio::task::spawn_blocking(move || f(snapshot))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
}

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    payload.map(|Json(v)| v).map_err(|e| ApiError::BadRequest(e.body_text()))
}

async fn match_patient(
    State(state): State<Arc<AppState>>,
    payload: Result<Json<PatientMatchRequest>, JsonRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let req = body(payload)?;
    let defaults = state.defaults;
    let resp = run_blocking(&state, move |s| s.match_patient(&req, &defaults)).await?;
    Ok(Json(resp))
}

async fn match_space(
    State(state): State<Arc<AppState>>,
    payload: Result<Json<SpaceMatchRequest>, JsonRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let req = body(payload)?;
    let defaults = state.defaults;
    let resp = run_blocking(&state, move |s| s.match_space(&req, &defaults)).await?;
    Ok(Json(resp))
}

#[derive(Serialize)]
struct TrialView<'a> {
    #[serde(flatten)]
    trial: &'a trialmatch::TrialRecord,
    spaces: Vec<&'a trialmatch::TrialSpace>,
}

async fn get_trial(State(state): State<Arc<AppState>>, Path(nct): Path<String>) -> Result<Response, ApiError> {
    let s = state.current().ok_or(ApiError::NotLoaded)?;
    let trial = s.trial(&nct).ok_or_else(|| ApiError::NotFound(format!("unknown trial {nct}")))?;
    Ok(Json(TrialView {
        trial,
        spaces: s.spaces_of(&nct),
    })
    .into_response())
}

async fn get_space(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let s = state.current().ok_or(ApiError::NotLoaded)?;
    let space = s.space(&id).ok_or_else(|| ApiError::NotFound(format!("unknown space {id}")))?;
    Ok(Json(space).into_response())
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Health> {
    Json(match state.current() {
        Some(s) => s.health(),
        None => Health {
            status: "ok".to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            index_loaded: false,
            patients: 0,
            summaries: 0,
            trials: 0,
            spaces: 0,
            loaded_at: None,
        },
    })
}

/// Rebuilds the snapshot from the configured paths and swaps it in. Requests
/// already running keep the snapshot they started with.
async fn reload(State(state): State<Arc<AppState>>) -> Result<Json<Health>, ApiError> {
    let st = state.clone();
    let next = tokio::task::spawn_blocking(move || {
        Snapshot::load(&st.config, st.providers.embedder.clone(), st.providers.checker.clone())
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))?
    .map_err(|e| ApiError::Internal(format!("{e:#}")))?;
    let h = next.health();
    state.swap(next);
    info!("snapshot reloaded");
    Ok(Json(h))
}

async fn require_token(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    if let Some(expected) = &state.token {
        let ok = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == expected);
        if !ok {
            return ApiError::Unauthorized.into_response();
        }
    }
    next.run(req).await
}

fn cors(origin: Option<&str>) -> Option<CorsLayer> {
    let origin = origin?;
    let allow = if origin == "*" {
        AllowOrigin::any()
    } else {
        match HeaderValue::from_str(origin) {
            Ok(v) => AllowOrigin::exact(v),
            Err(_) => {
                warn!(origin, "invalid CORS origin ignored");
                return None;
            }
        }
    };
    Some(
        CorsLayer::new()
            .allow_origin(allow)
            .allow_methods([Method::GET, Method::POST])
            .allow_headers([header::CONTENT_TYPE, header::AUTHORIZATION]),
    )
}

pub fn router(state: Arc<AppState>) -> Router {
    let protected = Router::new()
        .route("/v1/match/patient", post(match_patient))
        .route("/v1/match/space", post(match_space))
        .route("/v1/trials/{nct}", get(get_trial))
        .route("/v1/spaces/{space_id}", get(get_space))
        .route("/v1/admin/reload", post(reload))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    let app = Router::new()
        .route("/v1/health", get(health))
        .merge(protected)
        .with_state(state.clone());
    match cors(state.config.cors_origin.as_deref()) {
        Some(layer) => app.layer(layer),
        None => app,
    }
}

/// Resolves the bearer token when the configuration requires one.
pub fn auth_token(config: &ServiceConfig) -> anyhow::Result<Option<String>> {
    if !config.require_auth {
        return Ok(None);
    }
    match std::env::var(&config.auth_token_env) {
        Ok(t) if !t.is_empty() => Ok(Some(t)),
        _ => anyhow::bail!("require_auth is set but {} is empty", config.auth_token_env),
    }
}

pub async fn serve(state: Arc<AppState>) -> anyhow::Result<()> {
    let addr = state.config.listen.clone();
    let listener = tokio::net::TcpListener::bind(&addr).await?;
    info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
