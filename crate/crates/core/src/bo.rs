//! Human-in-the-loop Bayesian optimization over the rendering parameters.
//!
//! The search runs in the normalized `(k1, b1, alpha)` cube; `k0` is pinned
//! by the effective-stiffness constraint and non-passive points are masked.
//! A session seeds itself with a Latin hypercube, then proposes the UCB
//! maximizer over a fixed quasi-random candidate pool after every label.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{halton, lhs_init};
use crate::error::{Error, Result};
use crate::fom::{ModelParams, StiffnessConstraint};
use crate::gp::{laplace_fit, GpConfig, GpPosterior, Label, OrdinalDataset};
use crate::passivity::{PassivityChecker, PassivityConfig};
use crate::sysid::{lerp, unlerp, ParamBounds};

/// Number of free dimensions: `k1`, `b1`, `alpha`.
pub const DIMS: usize = 3;

/// Normalized, passivity-masked search space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    /// Free-parameter ranges; the `k0` range acts as a feasibility filter on
    /// the constrained `k0`.
    pub bounds: ParamBounds,
    pub stiffness: StiffnessConstraint,
    pub passivity: PassivityConfig,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            bounds: ParamBounds::default(),
            stiffness: StiffnessConstraint::default(),
            passivity: PassivityConfig::default(),
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        self.bounds.validate()?;
        self.passivity.validate()?;
        if !(self.stiffness.omega_eff > 0.0 && self.stiffness.target_keff.is_finite()) {
            return Err(Error::invalid("bad effective-stiffness constraint"));
        }
        Ok(())
    }

    /// Physical parameters at a normalized point, with `k0` from the
    /// stiffness constraint.
    pub fn to_params(&self, u: &[f64]) -> ModelParams {
        let k1 = lerp(self.bounds.k1, u[0]);
        let b1 = lerp(self.bounds.b1, u[1]);
        let alpha = lerp(self.bounds.alpha, u[2]);
        ModelParams::new(self.stiffness.solve_k0(k1, b1, alpha), k1, b1, alpha)
    }

    pub fn normalize(&self, p: &ModelParams) -> [f64; DIMS] {
        [
            unlerp(self.bounds.k1, p.k1),
            unlerp(self.bounds.b1, p.b1),
            unlerp(self.bounds.alpha, p.alpha),
        ]
    }

    pub fn checker(&self) -> Result<Feasibility> {
        self.validate()?;
        Ok(Feasibility {
            space: *self,
            passivity: PassivityChecker::new(self.passivity)?,
        })
    }
}

/// Feasibility test for normalized points of one search space.
#[derive(Debug, Clone)]
pub struct Feasibility {
    space: SearchSpace,
    passivity: PassivityChecker,
}

impl Feasibility {
    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn passivity(&self) -> &PassivityChecker {
        &self.passivity
    }

    /// Constraints other than passivity, which is the expensive part.
    pub fn cheap_ok(&self, p: &ModelParams) -> bool {
        let (lo, hi) = self.space.bounds.k0;
        p.k0.is_finite() && p.k0 >= lo && p.k0 <= hi && self.space.stiffness.damping_ok(p)
    }

    pub fn is_feasible(&self, u: &[f64]) -> bool {
        if u.len() != DIMS || !u.iter().all(|v| (0.0..=1.0).contains(v)) {
            return false;
        }
        let p = self.space.to_params(u);
        self.cheap_ok(&p) && self.passivity.margin(&p).map(|m| m >= 0.0).unwrap_or(false)
    }
}

/// Acquisition and session-length settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionConfig {
    /// UCB exploration weight.
    pub lambda: f64,
    pub n_space_filling: usize,
    pub n_total: usize,
    pub candidate_count: usize,
    /// Seed of the candidate pool; sessions sharing it share the pool.
    pub candidate_seed: u64,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        AcquisitionConfig {
            lambda: 0.7,
            n_space_filling: 5,
            n_total: 25,
            candidate_count: 4096,
            candidate_seed: 0,
        }
    }
}

impl AcquisitionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("lambda must be non-negative"));
        }
        if self.n_total == 0 {
            return Err(Error::invalid("n_total must be at least 1"));
        }
        if self.candidate_count == 0 {
            return Err(Error::invalid("candidate_count must be at least 1"));
        }
        Ok(())
    }
}

pub fn ucb_score(mean: f64, std: f64, lambda: f64) -> f64 {
    mean + lambda * std
}

/// Everything that determines a session's behaviour besides its seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct SessionConfig {
    pub search_space: SearchSpace,
    pub gp: GpConfig,
    pub acquisition: AcquisitionConfig,
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        self.search_space.validate()?;
        self.gp.validate()?;
        self.acquisition.validate()
    }
}

/// Fixed feasible candidate set used for acquisition and `x_max`.
#[derive(Debug, Clone)]
pub struct CandidatePool {
    space: SearchSpace,
    seed: u64,
    points: Vec<Vec<f64>>,
}

impl CandidatePool {
    /// First `count` feasible points of a shifted Halton sequence.
    pub fn build(space: &SearchSpace, count: usize, seed: u64) -> Result<Self> {
        let feas = space.checker()?;
        let mut raw = count.max(1) * 2;
        loop {
            let pts = halton(raw, DIMS, seed);
            let points: Vec<Vec<f64>> = pts
                .into_par_iter()
                .filter(|u| feas.is_feasible(u))
                .collect::<Vec<_>>()
                .into_iter()
                .take(count)
                .collect();
            if points.len() == count || raw >= count * 32 {
                if points.is_empty() {
                    return Err(Error::EmptyFeasibleSet);
                }
                return Ok(CandidatePool { space: *space, seed, points });
            }
            raw *= 4;
        }
    }

    pub fn for_config(config: &SessionConfig) -> Result<Self> {
        Self::build(&config.search_space, config.acquisition.candidate_count, config.acquisition.candidate_seed)
    }

    pub fn matches(&self, config: &SessionConfig) -> bool {
        self.space == config.search_space
            && self.seed == config.acquisition.candidate_seed
            && self.points.len() <= config.acquisition.candidate_count
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// One rendered parameter set and its label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub x_norm: Vec<f64>,
    pub params_physical: ModelParams,
    pub label: Option<Label>,
    /// UCB of the point under the posterior it was proposed from.
    pub ucb_at_proposal: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Proposing,
    AwaitingFeedback,
    Complete,
}

/// Point of largest posterior mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestEstimate {
    pub x_norm: Vec<f64>,
    pub params: ModelParams,
    pub mean: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub seed: u64,
    pub config: SessionConfig,
    pub trials: Vec<Trial>,
    pub status: SessionStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_max: Option<BestEstimate>,
}

/// Default id of a session, derived from its seed so replays match byte for byte.
pub fn session_id(seed: u64) -> String {
    format!("sess-{seed}")
}

impl Session {
    pub fn pending(&self) -> Option<&Trial> {
        match self.status {
            SessionStatus::AwaitingFeedback => self.trials.last(),
            _ => None,
        }
    }

    pub fn labelled(&self) -> impl Iterator<Item = (&Trial, Label)> {
        self.trials.iter().filter_map(|t| t.label.map(|l| (t, l)))
    }

    pub fn dataset(&self) -> OrdinalDataset {
        let (points, labels) = self.labelled().map(|(t, l)| (t.x_norm.clone(), l)).unzip();
        OrdinalDataset { points, labels }
    }

    /// Labels in trial order, enough to replay the session.
    pub fn transcript(&self) -> Vec<Label> {
        self.labelled().map(|(_, l)| l).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Parameter NRMSE of every trial to the final best estimate.
    pub fn convergence_trace(&self) -> Option<Vec<f64>> {
        let best = self.x_max.as_ref()?;
        let b = &self.config.search_space.bounds;
        Some(self.trials.iter().map(|t| b.param_nrmse(&t.params_physical, &best.params)).collect())
    }
}

/// Lexicographic order of normalized points; breaks score ties.
fn lex_less(a: &[f64], b: &[f64]) -> bool {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Less => return true,
            std::cmp::Ordering::Greater => return false,
            std::cmp::Ordering::Equal => {}
        }
    }
    false
}

/// Argmax of `score` over the pool and the already sampled points; exact
/// ties go to the lexicographically smallest point.
fn argmax<'a, F>(pool: &'a CandidatePool, sampled: &'a [Vec<f64>], score: F) -> Result<(&'a [f64], f64)>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let better = |a: (&'a [f64], f64), b: (&'a [f64], f64)| {
        if b.1 > a.1 || (b.1 == a.1 && lex_less(b.0, a.0)) {
            b
        } else {
            a
        }
    };
    pool.points
        .par_iter()
        .chain(sampled.par_iter())
        .map(|p| (p.as_slice(), score(p)))
        .filter(|(_, s)| !s.is_nan())
        .reduce_with(better)
        .ok_or(Error::EmptyFeasibleSet)
}

/// UCB maximizer over the candidate set.
pub fn propose_next(session: &Session, posterior: &GpPosterior, pool: &CandidatePool) -> Result<(Vec<f64>, f64)> {
    if session.status != SessionStatus::Proposing {
        return Err(Error::SessionState { expected: "proposing" });
    }
    let lambda = session.config.acquisition.lambda;
    let sampled: Vec<Vec<f64>> = session.trials.iter().map(|t| t.x_norm.clone()).collect();
    let (x, s) = argmax(pool, &sampled, |q| {
        let (m, v) = posterior.predict(q);
        ucb_score(m, v.sqrt(), lambda)
    })?;
    Ok((x.to_vec(), s))
}

/// Feasible candidate with the largest posterior mean.
pub fn best_estimate(space: &SearchSpace, posterior: &GpPosterior, pool: &CandidatePool, sampled: &[Vec<f64>]) -> Result<BestEstimate> {
    let (x, mean) = argmax(pool, sampled, |q| posterior.predict(q).0)?;
    Ok(BestEstimate {
        x_norm: x.to_vec(),
        params: space.to_params(x),
        mean,
        variance: posterior.predict(x).1,
    })
}

/// What a feedback submission produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Step {
    Next { trial: Trial },
    Complete { x_max: BestEstimate },
}

/// Live session: the persisted [`Session`] plus its posterior and pool.
#[derive(Debug, Clone)]
pub struct SessionRunner {
    session: Session,
    posterior: GpPosterior,
    pool: Arc<CandidatePool>,
    lhs: Vec<Vec<f64>>,
}

fn lhs_points(config: &SessionConfig, seed: u64, feas: &Feasibility) -> Result<Vec<Vec<f64>>> {
    let n = config.acquisition.n_space_filling.min(config.acquisition.n_total);
    if n == 0 {
        return Ok(Vec::new());
    }
    lhs_init(n, DIMS, seed, |u| feas.is_feasible(u))
}

impl SessionRunner {
    /// Start a session and propose its first trial.
    pub fn start(id: impl Into<String>, config: SessionConfig, seed: u64, pool: Arc<CandidatePool>) -> Result<Self> {
        config.validate()?;
        if !pool.matches(&config) {
            return Err(Error::invalid("candidate pool was built for a different configuration"));
        }
        let feas = config.search_space.checker()?;
        let lhs = lhs_points(&config, seed, &feas)?;
        let posterior = GpPosterior::prior(&config.gp)?;
        let mut runner = SessionRunner {
            session: Session {
                id: id.into(),
                seed,
                config,
                trials: Vec::new(),
                status: SessionStatus::Proposing,
                x_max: None,
            },
            posterior,
            pool,
            lhs,
        };
        runner.advance()?;
        Ok(runner)
    }

    /// Rebuild the runtime state of a persisted session.
    pub fn resume(session: Session, pool: Arc<CandidatePool>) -> Result<Self> {
        session.config.validate()?;
        if !pool.matches(&session.config) {
            return Err(Error::invalid("candidate pool was built for a different configuration"));
        }
        let feas = session.config.search_space.checker()?;
        let lhs = lhs_points(&session.config, session.seed, &feas)?;
        let posterior = laplace_fit(&session.dataset(), &session.config.gp)?;
        let mut runner = SessionRunner { session, posterior, pool, lhs };
        if runner.session.status == SessionStatus::Proposing {
            runner.advance()?;
        }
        Ok(runner)
    }

    pub fn session(&self) -> &Session {
        &self.session
    }

    pub fn into_session(self) -> Session {
        self.session
    }

    pub fn posterior(&self) -> &GpPosterior {
        &self.posterior
    }

    pub fn pool(&self) -> &Arc<CandidatePool> {
        &self.pool
    }

    pub fn pending(&self) -> Option<&Trial> {
        self.session.pending()
    }

    /// Current step as seen by a client: the pending trial or the result.
    pub fn current_step(&self) -> Result<Step> {
        match (self.session.status, self.session.pending(), &self.session.x_max) {
            (SessionStatus::AwaitingFeedback, Some(t), _) => Ok(Step::Next { trial: t.clone() }),
            (SessionStatus::Complete, _, Some(x)) => Ok(Step::Complete { x_max: x.clone() }),
            _ => Err(Error::SessionState { expected: "awaiting_feedback" }),
        }
    }

    /// Record a label. Re-submitting an already recorded label is a no-op
    /// that returns the current step.
    pub fn submit(&mut self, trial_index: usize, label: Label) -> Result<Step> {
        let trial = self
            .session
            .trials
            .get(trial_index)
            .ok_or_else(|| Error::invalid(format!("no trial {trial_index}")))?;
        match trial.label {
            Some(recorded) if recorded == label => return self.current_step(),
            Some(_) => return Err(Error::FeedbackConflict { trial_index }),
            None => {}
        }
        if self.session.status != SessionStatus::AwaitingFeedback {
            return Err(Error::SessionState { expected: "awaiting_feedback" });
        }
        self.session.trials[trial_index].label = Some(label);
        self.session.status = SessionStatus::Proposing;
        self.posterior = laplace_fit(&self.session.dataset(), &self.session.config.gp)?;
        self.advance()?;
        self.current_step()
    }

    /// From `Proposing`: log the next trial, or finish the session.
    fn advance(&mut self) -> Result<()> {
        let i = self.session.trials.len();
        let acq = self.session.config.acquisition;
        if i >= acq.n_total {
            let sampled: Vec<Vec<f64>> = self.session.trials.iter().map(|t| t.x_norm.clone()).collect();
            self.session.x_max =
                Some(best_estimate(&self.session.config.search_space, &self.posterior, &self.pool, &sampled)?);
            self.session.status = SessionStatus::Complete;
            return Ok(());
        }
        let (x, ucb) = if i < self.lhs.len() {
            let x = self.lhs[i].clone();
            let (m, v) = self.posterior.predict(&x);
            (x, ucb_score(m, v.sqrt(), acq.lambda))
        } else {
            propose_next(&self.session, &self.posterior, &self.pool)?
        };
        let params = self.session.config.search_space.to_params(&x);
        self.session.trials.push(Trial {
            index: i,
            x_norm: x,
            params_physical: params,
            label: None,
            ucb_at_proposal: ucb,
        });
        self.session.status = SessionStatus::AwaitingFeedback;
        Ok(())
    }
}

/// Anything that can judge a rendered parameter set.
pub trait FeedbackSource {
    fn feedback(&mut self, trial_index: usize, params: &ModelParams) -> std::result::Result<Label, String>;
}

impl<F> FeedbackSource for F
where
    F: FnMut(usize, &ModelParams) -> std::result::Result<Label, String>,
{
    fn feedback(&mut self, trial_index: usize, params: &ModelParams) -> std::result::Result<Label, String> {
        self(trial_index, params)
    }
}

/// Replays a recorded label sequence.
#[derive(Debug, Clone)]
pub struct TranscriptOracle {
    labels: Vec<Label>,
}

impl TranscriptOracle {
    pub fn new(labels: Vec<Label>) -> Self {
        TranscriptOracle { labels }
    }
}

impl FeedbackSource for TranscriptOracle {
    fn feedback(&mut self, trial_index: usize, _: &ModelParams) -> std::result::Result<Label, String> {
        self.labels
            .get(trial_index)
            .copied()
            .ok_or_else(|| format!("transcript has no label for trial {trial_index}"))
    }
}

#[derive(Debug, Clone)]
pub struct SessionOutcome {
    pub session: Session,
    pub posterior: GpPosterior,
    pub x_max: ModelParams,
}

/// Run a whole session against a feedback source, calling `persist` after
/// every state change.
pub fn run_session_with(
    config: &SessionConfig,
    pool: Arc<CandidatePool>,
    source: &mut dyn FeedbackSource,
    seed: u64,
    persist: &mut dyn FnMut(&Session) -> Result<()>,
) -> Result<SessionOutcome> {
    let mut runner = SessionRunner::start(session_id(seed), *config, seed, pool)?;
    persist(runner.session())?;
    while let Some(trial) = runner.pending().cloned() {
        let label = match source.feedback(trial.index, &trial.params_physical) {
            Ok(l) => l,
            Err(message) => {
                return Err(Error::Oracle {
                    trial_index: trial.index,
                    message,
                    partial: Box::new(runner.into_session()),
                })
            }
        };
        runner.submit(trial.index, label)?;
        persist(runner.session())?;
    }
    let x_max = runner
        .session()
        .x_max
        .as_ref()
        .map(|b| b.params)
        .ok_or(Error::SessionState { expected: "complete" })?;
    Ok(SessionOutcome {
        posterior: runner.posterior.clone(),
        session: runner.into_session(),
        x_max,
    })
}

/// [`run_session_with`] building its own candidate pool and persisting nothing.
pub fn run_session(config: &SessionConfig, source: &mut dyn FeedbackSource, seed: u64) -> Result<SessionOutcome> {
    let pool = Arc::new(CandidatePool::for_config(config)?);
    run_session_with(config, pool, source, seed, &mut |_| Ok(()))
}
