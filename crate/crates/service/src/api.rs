//! JSON-over-HTTP session service.
//!
//! Each live session sits behind its own async mutex so its transitions are
//! serialized; reads are served from the last persisted snapshot.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use fracsls::bcm::{export_slices, OptimaTriple, Slice};
use fracsls::bo::{session_id, BestEstimate, Session, SessionConfig, SessionRunner, Step};
use fracsls::gp::Label;
use fracsls::store::StudyStore;
use fracsls::Error;
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;

use crate::study::{
    build_aggregate, candidate, load_aggregate_model, posterior_slice, response_curves, session_posterior, Candidate,
    PoolCache, ResponseCurves, StudyConfig,
};

const MAX_SLICE_RESOLUTION: usize = 256;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError { status, message: message.into() }
    }

    fn not_found(what: &str) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, format!("{what} not found"))
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InvalidArgument(_) | Error::Parse(_) | Error::Json(_) => StatusCode::BAD_REQUEST,
            Error::SessionState { .. } | Error::FeedbackConflict { .. } => StatusCode::CONFLICT,
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => StatusCode::NOT_FOUND,
            Error::FlatPosterior { .. } | Error::EmptyFeasibleSet => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl From<tokio::task::JoinError> for ApiError {
    fn from(e: tokio::task::JoinError) -> Self {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

pub struct AppState {
    store: StudyStore,
    config: StudyConfig,
    pools: PoolCache,
    live: Mutex<HashMap<String, Arc<Mutex<SessionRunner>>>>,
    snapshots: RwLock<HashMap<String, Arc<Session>>>,
}

impl AppState {
    pub fn new(store: StudyStore, config: StudyConfig) -> Arc<Self> {
        Arc::new(AppState {
            store,
            config,
            pools: PoolCache::default(),
            live: Mutex::new(HashMap::new()),
            snapshots: RwLock::new(HashMap::new()),
        })
    }

    pub fn store(&self) -> &StudyStore {
        &self.store
    }

    fn publish(&self, session: &Session) {
        self.snapshots
            .write()
            .expect("snapshot map poisoned")
            .insert(session.id.clone(), Arc::new(session.clone()));
    }

    fn snapshot(&self, id: &str) -> ApiResult<Arc<Session>> {
        if let Some(s) = self.snapshots.read().expect("snapshot map poisoned").get(id) {
            return Ok(s.clone());
        }
        if !self.store.has_session(id) {
            return Err(ApiError::not_found("session"));
        }
        let s = self.store.load_session(id)?;
        self.publish(&s);
        Ok(Arc::new(s))
    }

    /// Live runner for a session, resumed from disk when needed.
    async fn runner(self: &Arc<Self>, id: &str) -> ApiResult<Arc<Mutex<SessionRunner>>> {
        let mut live = self.live.lock().await;
        if let Some(r) = live.get(id) {
            return Ok(r.clone());
        }
        if !self.store.has_session(id) {
            return Err(ApiError::not_found("session"));
        }
        let state = self.clone();
        let id_owned = id.to_string();
        let runner = tokio::task::spawn_blocking(move || -> fracsls::Result<SessionRunner> {
            let session = state.store.load_session(&id_owned)?;
            let pool = state.pools.get(&session.config)?;
            SessionRunner::resume(session, pool)
        })
        .await??;
        let r = Arc::new(Mutex::new(runner));
        live.insert(id.to_string(), r.clone());
        Ok(r)
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/feedback", post(submit_feedback))
        .route("/sessions/{id}/posterior", get(session_posterior_slice))
        .route("/aggregates", post(create_aggregate))
        .route("/aggregates/{id}/slices", get(aggregate_slices))
        .route("/reference/responses", get(reference_responses))
        .with_state(state)
}

#[derive(Debug, Deserialize)]
pub struct CreateSession {
    #[serde(default)]
    pub config: Option<SessionConfig>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub id: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct Created {
    pub id: String,
    pub first_candidate: Candidate,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum FeedbackReply {
    AwaitingFeedback { next_candidate: Candidate },
    Complete { x_max: BestEstimate },
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    Json(req): Json<CreateSession>,
) -> ApiResult<(StatusCode, Json<Created>)> {
    let config = req.config.unwrap_or(state.config.session);
    let id = req.id.unwrap_or_else(|| session_id(req.seed));
    let mut live = state.live.lock().await;
    if live.contains_key(&id) || state.store.has_session(&id) {
        // a retried create with the same settings is answered with the current state
        let existing = state.snapshot(&id)?;
        if existing.config != config || existing.seed != req.seed {
            return Err(ApiError::new(StatusCode::CONFLICT, format!("session {id} exists with other settings")));
        }
        let trial = existing.trials.first().ok_or_else(|| ApiError::not_found("first trial"))?;
        let first = candidate(trial, &state.config.oracle, state.config.curve_stride);
        return Ok((StatusCode::OK, Json(Created { id, first_candidate: first })));
    }
    let st = state.clone();
    let sid = id.clone();
    let runner = tokio::task::spawn_blocking(move || -> fracsls::Result<SessionRunner> {
        let pool = st.pools.get(&config)?;
        let runner = SessionRunner::start(sid, config, req.seed, pool)?;
        st.store.save_session(runner.session())?;
        Ok(runner)
    })
    .await??;
    state.publish(runner.session());
    let first = candidate(&runner.session().trials[0], &state.config.oracle, state.config.curve_stride);
    live.insert(id.clone(), Arc::new(Mutex::new(runner)));
    Ok((StatusCode::CREATED, Json(Created { id, first_candidate: first })))
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Session>> {
    Ok(Json(state.snapshot(&id)?.as_ref().clone()))
}

#[derive(Debug, Deserialize)]
pub struct Feedback {
    pub trial_index: usize,
    pub label: Label,
}

async fn submit_feedback(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(fb): Json<Feedback>,
) -> ApiResult<Json<FeedbackReply>> {
    let runner = state.runner(&id).await?;
    let mut guard = runner.lock_owned().await;
    let st = state.clone();
    let (step, guard) = tokio::task::spawn_blocking(move || -> fracsls::Result<_> {
        let before = guard.session().clone();
        let step = guard.submit(fb.trial_index, fb.label)?;
        if *guard.session() != before {
            st.store.save_session(guard.session())?;
            if let Step::Complete { .. } = step {
                st.store.save_posterior(&guard.session().id, guard.posterior())?;
            }
        }
        Ok((step, guard))
    })
    .await??;
    state.publish(guard.session());
    Ok(Json(match step {
        Step::Next { trial } => FeedbackReply::AwaitingFeedback {
            next_candidate: candidate(&trial, &state.config.oracle, state.config.curve_stride),
        },
        Step::Complete { x_max } => FeedbackReply::Complete { x_max },
    }))
}

#[derive(Debug, Deserialize)]
pub struct SliceQuery {
    pub alpha: f64,
    #[serde(default)]
    pub res: Option<usize>,
}

fn resolution(state: &AppState, res: Option<usize>) -> ApiResult<usize> {
    let r = res.unwrap_or(state.config.slice_resolution);
    if !(2..=MAX_SLICE_RESOLUTION).contains(&r) {
        return Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            format!("res must be in 2..={MAX_SLICE_RESOLUTION}"),
        ));
    }
    Ok(r)
}

async fn session_posterior_slice(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<SliceQuery>,
) -> ApiResult<Json<Slice>> {
    let res = resolution(&state, q.res)?;
    let session = state.snapshot(&id)?;
    let slice = tokio::task::spawn_blocking(move || {
        posterior_slice(session_posterior(&session)?, session.config.search_space, q.alpha, res)
    })
    .await??;
    Ok(Json(slice))
}

#[derive(Debug, Deserialize)]
pub struct CreateAggregate {
    pub session_ids: Vec<String>,
    #[serde(default)]
    pub id: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct AggregateCreated {
    pub id: String,
    pub optima_triple: OptimaTriple,
}

async fn create_aggregate(
    State(state): State<Arc<AppState>>,
    Json(req): Json<CreateAggregate>,
) -> ApiResult<(StatusCode, Json<AggregateCreated>)> {
    let st = state.clone();
    let bundle = tokio::task::spawn_blocking(move || {
        build_aggregate(&st.store, &req.session_ids, req.id, st.config.grid_density)
    })
    .await??;
    let optima = bundle.optima.ok_or_else(|| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "no optima"))?;
    Ok((StatusCode::CREATED, Json(AggregateCreated { id: bundle.id, optima_triple: optima })))
}

async fn aggregate_slices(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<SliceQuery>,
) -> ApiResult<Json<Slice>> {
    let res = resolution(&state, q.res)?;
    let st = state.clone();
    let slice = tokio::task::spawn_blocking(move || -> fracsls::Result<Slice> {
        let (_, model) = load_aggregate_model(&st.store, &id)?;
        Ok(export_slices(&model, &[q.alpha], res)?.remove(0))
    })
    .await??;
    Ok(Json(slice))
}

async fn reference_responses(State(state): State<Arc<AppState>>) -> ApiResult<Json<ResponseCurves>> {
    let oracle = state.config.oracle;
    Ok(Json(response_curves(&oracle.ground_truth, &oracle, state.config.curve_stride)?))
}

/// Bind and serve until the process is stopped.
pub async fn serve(state: Arc<AppState>, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}
