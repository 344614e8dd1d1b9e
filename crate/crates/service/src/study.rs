//! Study-level plumbing shared by the HTTP service and the CLI.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use fracsls::bcm::{
    export_slices, select_optima_on, AggregateModel, FeasibilityGrid, Slice, DEFAULT_GRID_DENSITY,
};
use fracsls::bo::{CandidatePool, SearchSpace, Session, SessionConfig, SessionStatus, Trial};
use fracsls::gp::{laplace_fit, GpPosterior};
use fracsls::oracle::OracleConfig;
use fracsls::store::{AggregateBundle, StudyStore};
use fracsls::{Error, ModelParams, Result};
use serde::{Deserialize, Serialize};

/// Everything a study run can be configured with; every field has a default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub session: SessionConfig,
    pub oracle: OracleConfig,
    pub grid_density: usize,
    pub slice_resolution: usize,
    pub validation_trials: usize,
    /// Decimation of response curves sent to clients.
    pub curve_stride: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            session: SessionConfig::default(),
            oracle: OracleConfig::default(),
            grid_density: DEFAULT_GRID_DENSITY,
            slice_resolution: 64,
            validation_trials: fracsls::validation::DEFAULT_VALIDATION_TRIALS,
            curve_stride: 10,
        }
    }
}

impl StudyConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        fracsls::store::read_json(path)
    }
}

/// Candidate pools keyed by the settings that determine them.
#[derive(Debug, Default)]
pub struct PoolCache {
    pools: Mutex<HashMap<String, Arc<CandidatePool>>>,
}

impl PoolCache {
    pub fn get(&self, config: &SessionConfig) -> Result<Arc<CandidatePool>> {
        let key = serde_json::to_string(&(
            config.search_space,
            config.acquisition.candidate_count,
            config.acquisition.candidate_seed,
        ))?;
        if let Some(p) = self.pools.lock().expect("pool cache poisoned").get(&key) {
            return Ok(p.clone());
        }
        let pool = Arc::new(CandidatePool::for_config(config)?);
        self.pools
            .lock()
            .expect("pool cache poisoned")
            .entry(key)
            .or_insert(pool.clone());
        Ok(pool)
    }
}

/// Decimated force and displacement traces of one parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseCurves {
    pub sample_time: f64,
    /// N, for the displacement step.
    pub relaxation: Vec<f64>,
    /// mm, under the force profile.
    pub creep: Vec<f64>,
    /// N
    pub force_profile: Vec<f64>,
}

pub fn response_curves(params: &ModelParams, oracle: &OracleConfig, stride: usize) -> Result<ResponseCurves> {
    let stride = stride.max(1);
    let protocol = &oracle.protocol;
    let r = protocol.simulate(params)?;
    Ok(ResponseCurves {
        sample_time: protocol.sample_time * stride as f64,
        relaxation: r.relaxation.decimate(stride).values,
        creep: r.creep.decimate(stride).values,
        force_profile: protocol.force_profile()?.decimate(stride).values,
    })
}

/// A trial as offered to a participant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub trial_index: usize,
    pub x_norm: Vec<f64>,
    pub params: ModelParams,
    /// `None` when the curves cannot be simulated (unstable creep).
    pub response_curves: Option<ResponseCurves>,
}

pub fn candidate(trial: &Trial, oracle: &OracleConfig, stride: usize) -> Candidate {
    Candidate {
        trial_index: trial.index,
        x_norm: trial.x_norm.clone(),
        params: trial.params_physical,
        response_curves: response_curves(&trial.params_physical, oracle, stride).ok(),
    }
}

/// Posterior refit from a session's labelled trials.
pub fn session_posterior(session: &Session) -> Result<GpPosterior> {
    laplace_fit(&session.dataset(), &session.config.gp)
}

/// Short stable hash for derived ids.
fn fnv1a(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

pub fn aggregate_id(session_ids: &[String]) -> String {
    format!("agg-{:016x}", fnv1a(&session_ids.join(",")))
}

/// Fit member posteriors for completed sessions, select the optima and
/// persist the bundle.
pub fn build_aggregate(
    store: &StudyStore,
    session_ids: &[String],
    id: Option<String>,
    grid_density: usize,
) -> Result<AggregateBundle> {
    if session_ids.is_empty() {
        return Err(Error::InvalidArgument("aggregate needs at least one session".into()));
    }
    let sessions: Vec<Session> = session_ids.iter().map(|s| store.load_session(s)).collect::<Result<_>>()?;
    let first = &sessions[0].config;
    for s in &sessions {
        if s.status != SessionStatus::Complete {
            return Err(Error::InvalidArgument(format!("session {} is not complete", s.id)));
        }
        if s.config.search_space != first.search_space || s.config.gp != first.gp {
            return Err(Error::InvalidArgument("sessions use different search spaces or GP settings".into()));
        }
    }
    let mut members = Vec::with_capacity(sessions.len());
    let mut files = Vec::with_capacity(sessions.len());
    for s in &sessions {
        let post = session_posterior(s)?;
        store.save_posterior(&s.id, &post)?;
        files.push(format!("posteriors/{}.json", s.id));
        members.push(post);
    }
    let model = AggregateModel::new(members, first.search_space)?;
    let grid = FeasibilityGrid::build(&first.search_space, grid_density)?;
    let optima = select_optima_on(&model, &grid)?;
    let bundle = AggregateBundle {
        id: id.unwrap_or_else(|| aggregate_id(session_ids)),
        session_ids: session_ids.to_vec(),
        member_posteriors: files,
        search_space: first.search_space,
        gp: first.gp,
        optima: Some(optima),
    };
    store.save_aggregate(&bundle)?;
    Ok(bundle)
}

pub fn load_aggregate_model(store: &StudyStore, id: &str) -> Result<(AggregateBundle, AggregateModel)> {
    let bundle = store.load_aggregate(id)?;
    let model = AggregateModel::new(store.load_members(&bundle)?, bundle.search_space)?;
    Ok((bundle, model))
}

pub fn posterior_slice(posterior: GpPosterior, space: SearchSpace, alpha: f64, resolution: usize) -> Result<Slice> {
    let model = AggregateModel::new(vec![posterior], space)?;
    Ok(export_slices(&model, &[alpha], resolution)?.remove(0))
}
