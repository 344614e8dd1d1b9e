//! Simulated validation session: participants compare the best, mid and
//! worst renderings in balanced pairs, labelling each and picking the more
//! realistic one.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bcm::OptimaTriple;
use crate::error::{Error, Result};
use crate::gp::Label;
use crate::oracle::{OracleConfig, SimulatedParticipant};

pub const DEFAULT_VALIDATION_TRIALS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderingSet {
    Best,
    Mid,
    Worst,
}

impl RenderingSet {
    pub const ALL: [RenderingSet; 3] = [RenderingSet::Best, RenderingSet::Mid, RenderingSet::Worst];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// One forced-choice presentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationTrial {
    pub index: usize,
    pub pair: [RenderingSet; 2],
    pub labels: [Label; 2],
    pub preferred: RenderingSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantLog {
    pub seed: u64,
    pub trials: Vec<ValidationTrial>,
    /// Most to least realistic by pairwise wins.
    pub ranking: [RenderingSet; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    /// Rows best/mid/worst, columns close/similar/different.
    pub classification: [[usize; 3]; 3],
    /// Rows best/mid/worst as ranked by the aggregate model, columns the
    /// participant's rank 1, 2, 3. Rows sum to the number of participants.
    pub ordering: [[usize; 3]; 3],
    pub participants: Vec<ParticipantLog>,
}

/// Column of a label in the classification matrix.
fn label_column(label: Label) -> usize {
    match label {
        Label::Close => 0,
        Label::Similar => 1,
        Label::Different => 2,
    }
}

impl ValidationReport {
    pub fn presentations(&self) -> [usize; 3] {
        self.classification.map(|row| row.iter().sum())
    }

    /// Share of presentations labelled close/similar/different for
    /// best/mid/worst respectively.
    pub fn classification_diagonal(&self) -> f64 {
        let total: usize = self.presentations().iter().sum();
        let diag: usize = (0..3).map(|i| self.classification[i][i]).sum();
        if total == 0 {
            0.0
        } else {
            diag as f64 / total as f64
        }
    }

    /// Share of participants ranking best > mid > worst.
    pub fn ordering_agreement(&self) -> f64 {
        if self.participants.is_empty() {
            return 0.0;
        }
        let ok = self
            .participants
            .iter()
            .filter(|p| p.ranking == RenderingSet::ALL)
            .count();
        ok as f64 / self.participants.len() as f64
    }
}

/// Balanced pair order: every unordered pair `trials / 3` times, shuffled.
pub fn pair_schedule(trials: usize, seed: u64) -> Result<Vec<[RenderingSet; 2]>> {
    if trials == 0 || trials % 3 != 0 {
        return Err(Error::invalid("validation trials must be a positive multiple of 3"));
    }
    use RenderingSet::*;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut schedule: Vec<[RenderingSet; 2]> = (0..trials / 3)
        .flat_map(|_| [[Best, Mid], [Best, Worst], [Mid, Worst]])
        .collect();
    schedule.shuffle(&mut rng);
    for pair in &mut schedule {
        pair.shuffle(&mut rng);
    }
    Ok(schedule)
}

pub fn run_validation(
    optima: &OptimaTriple,
    participants: &[OracleConfig],
    trials_per_participant: usize,
) -> Result<ValidationReport> {
    let mut report = ValidationReport {
        classification: [[0; 3]; 3],
        ordering: [[0; 3]; 3],
        participants: Vec::with_capacity(participants.len()),
    };
    let sets = optima.sets();
    for config in participants {
        let schedule = pair_schedule(trials_per_participant, config.seed)?;
        let sim = SimulatedParticipant::new(*config)?;
        let distances = sets.map(|s| sim.distance_or_inf(&s.params_physical));
        let mut wins = [0usize; 3];
        let mut percept_sum = [0.0f64; 3];
        let mut query = 0u64;
        let mut trials = Vec::with_capacity(schedule.len());
        for (index, pair) in schedule.into_iter().enumerate() {
            let mut percepts = [0.0; 2];
            let mut labels = [Label::Similar; 2];
            for (k, set) in pair.iter().enumerate() {
                let eps = config.noise_draw(query);
                query += 1;
                let d = distances[set.index()];
                percepts[k] = d + config.noise * eps;
                labels[k] = config.categorize(d, eps);
                report.classification[set.index()][label_column(labels[k])] += 1;
                percept_sum[set.index()] += percepts[k];
            }
            let preferred = if percepts[1] < percepts[0] { pair[1] } else { pair[0] };
            wins[preferred.index()] += 1;
            trials.push(ValidationTrial { index, pair, labels, preferred });
        }
        let mut ranking = RenderingSet::ALL;
        ranking.sort_by(|a, b| {
            wins[b.index()]
                .cmp(&wins[a.index()])
                .then(percept_sum[a.index()].total_cmp(&percept_sum[b.index()]))
        });
        for (rank, set) in ranking.iter().enumerate() {
            report.ordering[set.index()][rank] += 1;
        }
        report.participants.push(ParticipantLog { seed: config.seed, trials, ranking });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bcm::Optimum;
    use crate::fom::ModelParams;

    fn optimum(p: ModelParams, score: f64) -> Optimum {
        Optimum { params_physical: p, x_norm: vec![0.0; 3], score, variance: 0.1 }
    }

    /// Triple whose distances to the identified set fall in the three bands.
    fn triple() -> OptimaTriple {
        let truth = ModelParams::identified();
        let mut mid = truth;
        mid.k1 *= 1.04;
        OptimaTriple {
            best: optimum(truth, 1.0),
            mid: optimum(mid, 0.0),
            worst: optimum(ModelParams::new(0.3, 30.0, 0.5, 0.9), -1.0),
            mid_gap: 0.0,
        }
    }

    #[test]
    fn schedule_is_balanced() {
        let s = pair_schedule(12, 3).unwrap();
        assert_eq!(s.len(), 12);
        let mut shown = [0; 3];
        let mut pairs = std::collections::HashMap::new();
        for p in &s {
            assert_ne!(p[0], p[1]);
            shown[p[0].index()] += 1;
            shown[p[1].index()] += 1;
            let mut key = *p;
            key.sort();
            *pairs.entry(key).or_insert(0) += 1;
        }
        assert_eq!(shown, [8, 8, 8]);
        assert!(pairs.values().all(|&c| c == 4));
        assert!(pair_schedule(10, 0).is_err());
    }

    #[test]
    fn noiseless_aligned_participants_are_diagonal() {
        let t = triple();
        let sim = SimulatedParticipant::new(OracleConfig::default()).unwrap();
        let d: Vec<f64> = t.sets().iter().map(|s| sim.distance_or_inf(&s.params_physical)).collect();
        assert!(d[0] < 0.05 && d[1] > 0.05 && d[1] < 0.15 && d[2] > 0.15, "{d:?}");
        let parts: Vec<OracleConfig> = (0..4).map(|seed| OracleConfig { noise: 0.0, seed, ..Default::default() }).collect();
        let r = run_validation(&t, &parts, 12).unwrap();
        assert_eq!(r.presentations(), [32, 32, 32]);
        assert_eq!(r.classification, [[32, 0, 0], [0, 32, 0], [0, 0, 32]]);
        assert_eq!(r.ordering, [[4, 0, 0], [0, 4, 0], [0, 0, 4]]);
        assert_eq!(r.classification_diagonal(), 1.0);
        assert_eq!(r.ordering_agreement(), 1.0);
    }

    #[test]
    fn single_participant_sees_each_set_eight_times() {
        let r = run_validation(&triple(), &[OracleConfig::default()], 12).unwrap();
        assert_eq!(r.presentations(), [8, 8, 8]);
        assert_eq!(r.participants[0].trials.len(), 12);
        for row in r.ordering {
            assert_eq!(row.iter().sum::<usize>(), 1);
        }
    }

    #[test]
    fn inverted_thresholds_are_rejected() {
        let bad = OracleConfig { d_close: 0.3, d_different: 0.1, ..Default::default() };
        assert!(run_validation(&triple(), &[bad], 12).is_err());
    }
}
