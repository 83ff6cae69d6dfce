//! HTTP/JSON northbound API of the domain manager.
//!
//! Routes: `POST /deployments`, `GET /deployments`, `GET|DELETE
//! /deployments/{id}`, `GET /catalog`, `GET /metrics`, `GET /health`,
//! `GET /domains/{name}`. Every route except health needs
//! `Authorization: Bearer <token>`.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::Duration;

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use camino_core::edge::Topology;
use camino_core::manager::{Engine, EngineConfig, EngineError, Phase, Role};
use camino_core::mesh::TrustedDomainTable;
use camino_core::monitoring::parse_alert_rules;
use serde::Deserialize;
use serde_json::{json, Value};
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

fn default_tick_millis() -> u64 {
    100
}

fn default_listen() -> String {
    "127.0.0.1:8080".to_string()
}

/// Server configuration file. Relative paths are resolved against the
/// directory holding the file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    pub domain_name: String,
    /// Bearer token to role.
    pub tokens: BTreeMap<String, Role>,
    #[serde(default)]
    pub trusted_domains: TrustedDomainTable,
    #[serde(default)]
    pub gateway_address: String,
    pub topology: PathBuf,
    #[serde(default)]
    pub blueprints: Option<PathBuf>,
    /// On-disk store; in-memory when absent.
    #[serde(default)]
    pub store_root: Option<PathBuf>,
    /// Wall-clock milliseconds per simulation tick; 0 stops the clock.
    #[serde(default = "default_tick_millis")]
    pub tick_millis: u64,
    #[serde(default)]
    pub readiness_sequencing: bool,
    #[serde(default)]
    pub alert_rules: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("config {path}: {reason}")]
    Config { path: String, reason: String },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl ServerConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ServerError> {
        let path = path.as_ref();
        let err = |reason: String| ServerError::Config { path: path.display().to_string(), reason };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let mut config: ServerConfig = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut config.topology);
        config.blueprints.as_mut().map(resolve);
        config.store_root.as_mut().map(resolve);
        config.alert_rules.as_mut().map(resolve);
        Ok(config)
    }

    pub fn engine_config(&self) -> Result<EngineConfig, ServerError> {
        let topology = Topology::load(&self.topology).map_err(|e| ServerError::Config {
            path: self.topology.display().to_string(),
            reason: e.to_string(),
        })?;
        let mut config = EngineConfig::new(&self.domain_name, topology);
        config.trusted_domains = self.trusted_domains.clone();
        config.gateway_address = self.gateway_address.clone();
        config.readiness_sequencing = self.readiness_sequencing;
        if let Some(path) = &self.alert_rules {
            let text = std::fs::read_to_string(path)?;
            config.alert_rules = parse_alert_rules(&text).map_err(|e| ServerError::Config {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?;
        }
        Ok(config)
    }

    pub fn build_engine(&self) -> Result<Engine, ServerError> {
        let config = self.engine_config()?;
        let engine = match &self.store_root {
            Some(root) => Engine::open(config, root, self.blueprints.as_deref())?,
            None => match &self.blueprints {
                Some(dir) => Engine::with_blueprints(config, dir)?,
                None => Engine::new(config, camino_core::store::PackageStore::in_memory())?,
            },
        };
        Ok(engine)
    }
}

#[derive(Clone)]
pub struct AppState {
    engine: Arc<RwLock<Engine>>,
    tokens: Arc<BTreeMap<String, Role>>,
}

impl AppState {
    pub fn new(engine: Engine, tokens: BTreeMap<String, Role>) -> Self {
        Self { engine: Arc::new(RwLock::new(engine)), tokens: Arc::new(tokens) }
    }

    /// Direct engine access for embedding and tests.
    pub fn engine(&self) -> &Arc<RwLock<Engine>> {
        &self.engine
    }
}

struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: u16, message: impl Into<String>) -> Self {
        let status = StatusCode::from_u16(status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        Self { status, body: json!({"status": status.as_u16(), "error": message.into()}) }
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let mut err = ApiError::new(e.status(), e.to_string());
        if let EngineError::Rejected(record) = &e {
            err.body["record"] = json!(record);
            err.body["decision"] = json!(record.decision);
        }
        if let EngineError::Conflict(ids) = &e {
            err.body["dependents"] = json!(ids);
        }
        err
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;

fn authenticate(state: &AppState, headers: &HeaderMap) -> Result<Role, ApiError> {
    let token = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(str::trim);
    token
        .and_then(|t| state.tokens.get(t).copied())
        .ok_or_else(|| ApiError::new(401, "missing or invalid bearer token"))
}

fn require_admin(state: &AppState, headers: &HeaderMap) -> Result<(), ApiError> {
    match authenticate(state, headers)? {
        Role::Admin => Ok(()),
        Role::External => Err(ApiError::new(403, "operation requires an admin token")),
    }
}

fn engine_read(state: &AppState) -> std::sync::RwLockReadGuard<'_, Engine> {
    state.engine.read().unwrap_or_else(|e| e.into_inner())
}

fn engine_write(state: &AppState) -> std::sync::RwLockWriteGuard<'_, Engine> {
    state.engine.write().unwrap_or_else(|e| e.into_inner())
}

async fn submit(State(state): State<AppState>, headers: HeaderMap, body: String) -> ApiResult {
    require_admin(&state, &headers)?;
    let record = engine_write(&state).submit(&body)?;
    tracing::info!(deployment = %record.deployment_id, phase = %record.phase, "deployment accepted");
    Ok((StatusCode::ACCEPTED, Json(record)).into_response())
}

async fn list(State(state): State<AppState>, headers: HeaderMap) -> ApiResult {
    require_admin(&state, &headers)?;
    let engine = engine_read(&state);
    let summary: Vec<Value> = engine
        .records()
        .map(|r| json!({"deployment_id": r.deployment_id, "phase": r.phase}))
        .collect();
    Ok(Json(summary).into_response())
}

async fn status(State(state): State<AppState>, headers: HeaderMap, UrlPath(id): UrlPath<String>) -> ApiResult {
    require_admin(&state, &headers)?;
    let engine = engine_read(&state);
    let record = engine.record(&id).ok_or(EngineError::UnknownDeployment(id))?;
    Ok(Json(record).into_response())
}

async fn terminate(State(state): State<AppState>, headers: HeaderMap, UrlPath(id): UrlPath<String>) -> ApiResult {
    require_admin(&state, &headers)?;
    let record = engine_write(&state).terminate(&id)?;
    let code = if record.phase == Phase::Terminating { StatusCode::ACCEPTED } else { StatusCode::OK };
    Ok((code, Json(record)).into_response())
}

async fn catalog(State(state): State<AppState>, headers: HeaderMap) -> ApiResult {
    let role = authenticate(&state, &headers)?;
    Ok(Json(engine_read(&state).catalog(role)).into_response())
}

#[derive(Debug, Deserialize)]
struct MetricsParams {
    query: String,
    from: Option<u64>,
    to: Option<u64>,
}

async fn metrics(
    State(state): State<AppState>,
    headers: HeaderMap,
    params: Result<Query<MetricsParams>, axum::extract::rejection::QueryRejection>,
) -> ApiResult {
    let role = authenticate(&state, &headers)?;
    let Query(params) = params.map_err(|e| ApiError::new(400, e.body_text()))?;
    let results = engine_read(&state).metrics(&params.query, params.from, params.to, role)?;
    Ok(Json(results).into_response())
}

async fn health(State(state): State<AppState>) -> Response {
    let health = engine_read(&state).health();
    let code = if health.status == "ok" { StatusCode::OK } else { StatusCode::SERVICE_UNAVAILABLE };
    (code, Json(health)).into_response()
}

async fn resolve(State(state): State<AppState>, headers: HeaderMap, UrlPath(name): UrlPath<String>) -> ApiResult {
    authenticate(&state, &headers)?;
    let fqdn = engine_read(&state).resolve(&name)?;
    Ok(Json(json!({"domain": name, "fqdn": fqdn})).into_response())
}

async fn fallback() -> ApiError {
    ApiError::new(404, "no such route")
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/deployments", get(list).post(submit))
        .route("/deployments/{id}", get(status).delete(terminate))
        .route("/catalog", get(catalog))
        .route("/metrics", get(metrics))
        .route("/health", get(health))
        .route("/domains/{name}", get(resolve))
        .fallback(fallback)
        .with_state(state)
}

/// A server bound to a socket with its simulation clock running.
pub struct RunningServer {
    pub addr: SocketAddr,
    pub state: AppState,
    server: JoinHandle<()>,
    ticker: Option<JoinHandle<()>>,
}

impl RunningServer {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn shutdown(self) {
        self.server.abort();
        if let Some(t) = self.ticker {
            t.abort();
        }
    }
}

/// Binds `listen` and serves in the background of the current runtime.
pub async fn start(state: AppState, listen: &str, tick_millis: u64) -> Result<RunningServer, ServerError> {
    let listener = TcpListener::bind(listen).await?;
    let addr = listener.local_addr()?;
    let app = router(state.clone());
    let server = tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, app).await {
            tracing::error!(error = %e, "server stopped");
        }
    });
    let ticker = (tick_millis > 0).then(|| {
        let engine = state.engine.clone();
        tokio::spawn(async move {
            let mut interval = tokio::time::interval(Duration::from_millis(tick_millis));
            interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
            loop {
                interval.tick().await;
                engine.write().unwrap_or_else(|e| e.into_inner()).step();
            }
        })
    });
    tracing::info!(%addr, "domain manager listening");
    Ok(RunningServer { addr, state, server, ticker })
}

/// Builds the engine from `config` and serves until the task is cancelled.
pub async fn serve(config: ServerConfig) -> Result<(), ServerError> {
    let engine = config.build_engine()?;
    let state = AppState::new(engine, config.tokens.clone());
    let running = start(state, &config.listen, config.tick_millis).await?;
    let _ = running.server.await;
    Ok(())
}
