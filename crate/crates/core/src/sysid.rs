//! Identification of [`ModelParams`] from creep-with-recovery and stress
//! relaxation records by minimising NRMSE.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::lhs_init;
use crate::error::{Error, Result};
use crate::fom::{
    simulate_creep, simulate_relaxation, DiscreteImpedance, ModelParams, TestProtocol,
    DEFAULT_SAMPLE_TIME, DEFAULT_WINDOW,
};
use crate::optim::{nelder_mead, NelderMeadOptions};
use crate::series::{SignalRole, TimeSeries};

/// RMSE between two aligned series divided by the range of `reference`.
pub fn nrmse(reference: &TimeSeries, test: &TimeSeries) -> Result<f64> {
    if reference.len() != test.len() {
        return Err(Error::invalid(format!(
            "series lengths differ ({} vs {})",
            reference.len(),
            test.len()
        )));
    }
    if (reference.sample_time - test.sample_time).abs() > 1e-12 * reference.sample_time {
        return Err(Error::invalid("series sample times differ"));
    }
    if reference.is_empty() {
        return Err(Error::invalid("empty series"));
    }
    let range = reference.range();
    if range <= 0.0 {
        return Err(Error::ZeroRange);
    }
    Ok(rmse(&reference.values, &test.values) / range)
}

fn rmse(a: &[f64], b: &[f64]) -> f64 {
    let ss: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (ss / a.len() as f64).sqrt()
}

/// Per-parameter search intervals; fitting happens in the `[0,1]^4` box they span.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamBounds {
    pub k0: (f64, f64),
    pub k1: (f64, f64),
    pub b1: (f64, f64),
    pub alpha: (f64, f64),
}

impl Default for ParamBounds {
    fn default() -> Self {
        ParamBounds {
            k0: (-15.7, 0.44),
            k1: (1.0, 32.0),
            b1: (0.001, 32.0),
            alpha: (0.01, 0.99),
        }
    }
}

// exact at both ends of the interval
pub(crate) fn lerp((lo, hi): (f64, f64), u: f64) -> f64 {
    lo * (1.0 - u) + hi * u
}

pub(crate) fn unlerp((lo, hi): (f64, f64), v: f64) -> f64 {
    (v - lo) / (hi - lo)
}

impl ParamBounds {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [("k0", self.k0), ("k1", self.k1), ("b1", self.b1), ("alpha", self.alpha)] {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::invalid(format!("bad bounds for {name}")));
            }
        }
        if self.k1.0 <= 0.0 || self.b1.0 < 0.0 || self.alpha.0 < 0.0 || self.alpha.1 > 1.0 {
            return Err(Error::invalid("bounds leave the valid parameter domain"));
        }
        Ok(())
    }

    pub fn denormalize(&self, u: &[f64]) -> ModelParams {
        ModelParams::new(
            lerp(self.k0, u[0]),
            lerp(self.k1, u[1]),
            lerp(self.b1, u[2]),
            lerp(self.alpha, u[3]),
        )
    }

    pub fn normalize(&self, p: &ModelParams) -> [f64; 4] {
        [
            unlerp(self.k0, p.k0),
            unlerp(self.k1, p.k1),
            unlerp(self.b1, p.b1),
            unlerp(self.alpha, p.alpha),
        ]
    }

    /// Root-mean-square of the range-normalized parameter differences.
    pub fn param_nrmse(&self, a: &ModelParams, b: &ModelParams) -> f64 {
        let (na, nb) = (self.normalize(a), self.normalize(b));
        let ss: f64 = na.iter().zip(&nb).map(|(x, y)| (x - y) * (x - y)).sum();
        (ss / 4.0).sqrt()
    }

    /// Euclidean distance in the normalized box.
    pub fn param_distance(&self, a: &ModelParams, b: &ModelParams) -> f64 {
        let (na, nb) = (self.normalize(a), self.normalize(b));
        na.iter().zip(&nb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxationData {
    /// mm
    pub step_displacement: f64,
    pub force: TimeSeries,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreepData {
    pub force_profile: TimeSeries,
    pub displacement: TimeSeries,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentificationProblem {
    pub relaxation: Option<RelaxationData>,
    pub creep: Option<CreepData>,
    pub window: usize,
    pub sample_time: f64,
    pub bounds: ParamBounds,
}

impl IdentificationProblem {
    pub fn validate(&self) -> Result<()> {
        if self.relaxation.is_none() && self.creep.is_none() {
            return Err(Error::invalid("identification needs at least one dataset"));
        }
        self.bounds.validate()?;
        let same_t = |ts: &TimeSeries| (ts.sample_time - self.sample_time).abs() <= 1e-12 * self.sample_time;
        if let Some(r) = &self.relaxation {
            r.force.validate()?;
            if r.force.role != SignalRole::Force || !same_t(&r.force) || r.force.len() < 2 {
                return Err(Error::invalid("relaxation data must be a force series at the problem sample time"));
            }
        }
        if let Some(c) = &self.creep {
            c.force_profile.validate()?;
            c.displacement.validate()?;
            if c.force_profile.len() != c.displacement.len()
                || c.displacement.role != SignalRole::Displacement
                || !same_t(&c.displacement)
                || !same_t(&c.force_profile)
            {
                return Err(Error::invalid("creep data must pair a force profile with an equally long displacement series"));
            }
        }
        Ok(())
    }

    /// Noiseless records of `truth` under `protocol`.
    pub fn synthetic(truth: &ModelParams, protocol: &TestProtocol) -> Result<Self> {
        let responses = protocol.simulate(truth)?;
        Ok(IdentificationProblem {
            relaxation: Some(RelaxationData {
                step_displacement: protocol.step_displacement,
                force: responses.relaxation,
            }),
            creep: Some(CreepData {
                force_profile: protocol.force_profile()?,
                displacement: responses.creep,
            }),
            window: protocol.window,
            sample_time: protocol.sample_time,
            bounds: ParamBounds::default(),
        })
    }

    /// Response NRMSE of `params` against the recorded data, `(creep, relaxation)`.
    pub fn response_errors(&self, params: &ModelParams) -> Result<(Option<f64>, Option<f64>)> {
        let filter = DiscreteImpedance::new(*params, self.sample_time, self.window)?;
        let relax = match &self.relaxation {
            Some(r) => {
                let duration = (r.force.len() - 1) as f64 * self.sample_time;
                let sim = simulate_relaxation(&filter, r.step_displacement, duration)?;
                Some(rmse(&r.force.values, &sim.values) / nonzero_range(&r.force)?)
            }
            None => None,
        };
        let creep = match &self.creep {
            Some(c) => {
                let sim = simulate_creep(&filter, &c.force_profile)?;
                Some(rmse(&c.displacement.values, &sim.values) / nonzero_range(&c.displacement)?)
            }
            None => None,
        };
        Ok((creep, relax))
    }

    /// Unweighted mean of the available NRMSE terms.
    pub fn objective(&self, params: &ModelParams) -> Result<f64> {
        let (c, r) = self.response_errors(params)?;
        let terms: Vec<f64> = c.into_iter().chain(r).collect();
        Ok(terms.iter().sum::<f64>() / terms.len() as f64)
    }

    fn penalized_objective(&self, params: &ModelParams) -> f64 {
        match self.objective(params) {
            Ok(v) => v,
            // grade infeasible points so the simplex can walk back out
            Err(Error::NonInvertibleStiffness { stiffness }) => 1e3 * (1.0 - stiffness),
            Err(_) => 1e6,
        }
    }
}

fn nonzero_range(ts: &TimeSeries) -> Result<f64> {
    let r = ts.range();
    if r <= 0.0 {
        Err(Error::ZeroRange)
    } else {
        Ok(r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub restarts: usize,
    pub max_iterations: usize,
    pub tolerance: f64,
    /// Simplex restarts from the incumbent after the multi-start phase.
    pub polish_rounds: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            restarts: 16,
            max_iterations: 500,
            tolerance: 1e-8,
            polish_rounds: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub params: ModelParams,
    pub creep_nrmse: Option<f64>,
    pub relaxation_nrmse: Option<f64>,
    pub objective: f64,
    /// Best objective among the restart initializations.
    pub best_initial_objective: f64,
    pub window: usize,
    pub sample_time: f64,
    pub seed: u64,
}

pub fn fit_params(problem: &IdentificationProblem, seed: u64) -> Result<FitReport> {
    fit_params_with(problem, seed, &FitOptions::default())
}

/// Multi-start bounded Nelder–Mead in the normalized parameter box, seeded
/// from a Latin hypercube.
pub fn fit_params_with(problem: &IdentificationProblem, seed: u64, opts: &FitOptions) -> Result<FitReport> {
    problem.validate()?;
    let starts = lhs_init(opts.restarts.max(1), 4, seed, |_| true)?;
    let nm = NelderMeadOptions {
        max_iterations: opts.max_iterations,
        tolerance: opts.tolerance,
        ..Default::default()
    };
    let bounds = problem.bounds;
    let objective = |u: &[f64]| problem.penalized_objective(&bounds.denormalize(u));

    let runs: Vec<(f64, Vec<f64>, f64)> = starts
        .par_iter()
        .map(|x0| {
            let initial = objective(x0);
            let r = nelder_mead(objective, x0, &nm);
            (initial, r.x, r.value)
        })
        .collect();

    let best_initial = runs.iter().map(|r| r.0).fold(f64::INFINITY, f64::min);
    let (_, best_x, best_value) = runs
        .into_iter()
        .min_by(|a, b| a.2.total_cmp(&b.2))
        .expect("at least one restart");
    if !(best_value < best_initial) {
        return Err(Error::NoImprovement);
    }

    // fresh simplices around the incumbent; the objective valley is long
    // and narrow so a single run stalls well before the floor
    let (mut best_x, mut best_value) = (best_x, best_value);
    let mut step = 0.02;
    for _ in 0..opts.polish_rounds {
        let polish = NelderMeadOptions {
            max_iterations: opts.max_iterations * 2,
            tolerance: 1e-15,
            initial_step: step,
        };
        let r = nelder_mead(objective, &best_x, &polish);
        if r.value < best_value {
            let gain = best_value - r.value;
            best_x = r.x;
            best_value = r.value;
            if gain < 1e-3 * best_value {
                step *= 0.5;
            }
        } else {
            step *= 0.5;
        }
        if step < 1e-7 || best_value < 1e-12 {
            break;
        }
    }
    let params = bounds.denormalize(&best_x);
    let (creep_nrmse, relaxation_nrmse) = problem.response_errors(&params)?;
    Ok(FitReport {
        params,
        creep_nrmse,
        relaxation_nrmse,
        objective: best_value,
        best_initial_objective: best_initial,
        window: problem.window,
        sample_time: problem.sample_time,
        seed,
    })
}

impl Default for IdentificationProblem {
    fn default() -> Self {
        IdentificationProblem {
            relaxation: None,
            creep: None,
            window: DEFAULT_WINDOW,
            sample_time: DEFAULT_SAMPLE_TIME,
            bounds: ParamBounds::default(),
        }
    }
}
