//! Simulated participant: labels a rendering by how far its creep and
//! stress-relaxation responses are from a ground-truth material.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bo::FeedbackSource;
use crate::error::{Error, Result};
use crate::fom::{ModelParams, Responses, TestProtocol};
use crate::gp::Label;
use crate::sysid::nrmse;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub ground_truth: ModelParams,
    pub creep_weight: f64,
    pub relaxation_weight: f64,
    /// Distances below this are "close".
    pub d_close: f64,
    /// Distances above this are "different".
    pub d_different: f64,
    /// Standard deviation of the additive sensory noise on the distance.
    pub noise: f64,
    pub seed: u64,
    #[serde(default)]
    pub protocol: TestProtocol,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            ground_truth: ModelParams::identified(),
            creep_weight: 0.5,
            relaxation_weight: 0.5,
            d_close: 0.05,
            d_different: 0.15,
            noise: 0.02,
            seed: 0,
            protocol: TestProtocol::default(),
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        self.ground_truth.validate()?;
        if !(self.creep_weight >= 0.0 && self.relaxation_weight >= 0.0 && self.creep_weight + self.relaxation_weight > 0.0) {
            return Err(Error::invalid("response weights must be non-negative and not both zero"));
        }
        if !(self.d_close < self.d_different) || !self.d_close.is_finite() || !self.d_different.is_finite() {
            return Err(Error::invalid("d_close must be below d_different"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid("noise must be finite and non-negative"));
        }
        Ok(())
    }

    /// Category for a distance and a standard-normal draw.
    pub fn categorize(&self, distance: f64, eps: f64) -> Label {
        let d = distance + self.noise * eps;
        if d < self.d_close {
            Label::Close
        } else if d > self.d_different {
            Label::Different
        } else {
            Label::Similar
        }
    }

    /// Standard-normal noise draw for one query.
    pub fn noise_draw(&self, query_index: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(query_index);
        StandardNormal.sample(&mut rng)
    }
}

fn weighted_distance(reference: &Responses, candidate: &Responses, config: &OracleConfig) -> Result<f64> {
    let creep = nrmse(&reference.creep, &candidate.creep)?;
    let relax = nrmse(&reference.relaxation, &candidate.relaxation)?;
    let (wc, wr) = (config.creep_weight, config.relaxation_weight);
    Ok((wc * creep + wr * relax) / (wc + wr))
}

/// Weighted response NRMSE between a candidate and the ground truth.
pub fn perceptual_distance(candidate: &ModelParams, config: &OracleConfig) -> Result<f64> {
    config.validate()?;
    let reference = config.protocol.simulate(&config.ground_truth)?;
    weighted_distance(&reference, &config.protocol.simulate(candidate)?, config)
}

/// Noisy category for the `query_index`-th judgment. A candidate whose
/// responses cannot be simulated counts as infinitely far.
pub fn respond(candidate: &ModelParams, config: &OracleConfig, query_index: u64) -> Label {
    let d = perceptual_distance(candidate, config).unwrap_or(f64::INFINITY);
    config.categorize(d, config.noise_draw(query_index))
}

/// Oracle with the reference responses simulated once.
#[derive(Debug, Clone)]
pub struct SimulatedParticipant {
    config: OracleConfig,
    reference: Responses,
    queries: u64,
}

impl SimulatedParticipant {
    pub fn new(config: OracleConfig) -> Result<Self> {
        config.validate()?;
        let reference = config.protocol.simulate(&config.ground_truth)?;
        Ok(SimulatedParticipant { config, reference, queries: 0 })
    }

    pub fn config(&self) -> &OracleConfig {
        &self.config
    }

    pub fn reference(&self) -> &Responses {
        &self.reference
    }

    pub fn distance(&self, candidate: &ModelParams) -> Result<f64> {
        weighted_distance(&self.reference, &self.config.protocol.simulate(candidate)?, &self.config)
    }

    /// Distance, or infinity when the candidate cannot be simulated.
    pub fn distance_or_inf(&self, candidate: &ModelParams) -> f64 {
        self.distance(candidate).unwrap_or(f64::INFINITY)
    }

    pub fn respond_at(&self, candidate: &ModelParams, query_index: u64) -> Label {
        self.config.categorize(self.distance_or_inf(candidate), self.config.noise_draw(query_index))
    }

    /// Next judgment in sequence.
    pub fn respond(&mut self, candidate: &ModelParams) -> Label {
        let label = self.respond_at(candidate, self.queries);
        self.queries += 1;
        label
    }
}

impl FeedbackSource for SimulatedParticipant {
    fn feedback(&mut self, _trial_index: usize, params: &ModelParams) -> std::result::Result<Label, String> {
        Ok(self.respond(params))
    }
}
