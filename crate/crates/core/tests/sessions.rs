mod common;

use std::sync::Arc;

use fracsls::bo::{run_session_with, CandidatePool, SessionConfig, TranscriptOracle};
use fracsls::design::halton;
use fracsls::fom::TestProtocol;
use fracsls::oracle::{OracleConfig, SimulatedParticipant};
use fracsls::sysid::{fit_params, IdentificationProblem, ParamBounds};
use rayon::prelude::*;

fn pool(config: &SessionConfig) -> Arc<CandidatePool> {
    Arc::new(CandidatePool::for_config(config).unwrap())
}

#[test]
fn sessions_replay_and_stay_feasible() {
    let config = SessionConfig::default();
    let pool = pool(&config);
    let checker = config.search_space.checker().unwrap();
    for seed in [0, 7] {
        let mut oracle = SimulatedParticipant::new(OracleConfig { seed, ..Default::default() }).unwrap();
        let out = run_session_with(&config, pool.clone(), &mut oracle, seed, &mut |_| Ok(())).unwrap();
        let s = &out.session;
        assert_eq!(s.trials.len(), 25);
        for t in &s.trials {
            assert!(checker.is_feasible(&t.x_norm));
        }
        let best = s.x_max.as_ref().unwrap();
        for t in &s.trials {
            assert!(best.mean >= out.posterior.predict(&t.x_norm).0);
        }
        let mut replay = TranscriptOracle::new(s.transcript());
        let again = run_session_with(&config, pool.clone(), &mut replay, seed, &mut |_| Ok(())).unwrap();
        assert_eq!(again.session.to_json().unwrap(), s.to_json().unwrap());
    }
}

#[test]
fn trials_settle_toward_the_final_best() {
    let config = SessionConfig::default();
    let pool = pool(&config);
    let traces: Vec<Vec<f64>> = (0..20u64)
        .into_par_iter()
        .map(|seed| {
            let mut oracle = SimulatedParticipant::new(OracleConfig { noise: 0.0, seed, ..Default::default() }).unwrap();
            let out = run_session_with(&config, pool.clone(), &mut oracle, seed, &mut |_| Ok(())).unwrap();
            out.session.convergence_trace().unwrap()
        })
        .collect();
    let at = |k: usize| common::median(&traces.iter().map(|t| t[k - 1]).collect::<Vec<_>>());
    assert!(at(25) <= at(5), "trial 25 {} vs trial 5 {}", at(25), at(5));
}

/// Noiseless identification over random generators that simulate cleanly.
fn identifiability(count: usize) -> (usize, usize, Vec<String>) {
    let bounds = ParamBounds::default();
    let protocol = TestProtocol::default();
    let mut generators = Vec::new();
    for u in halton(20 * count, 4, 100) {
        if generators.len() == count {
            break;
        }
        let p = bounds.denormalize(&u);
        if let Ok(problem) = IdentificationProblem::synthetic(&p, &protocol) {
            if problem.objective(&p).is_ok() {
                generators.push((p, problem));
            }
        }
    }
    let mut exact = 0;
    let mut fallback = 0;
    let mut misses = Vec::new();
    for (i, (truth, problem)) in generators.iter().enumerate() {
        let fit = fit_params(problem, i as u64).unwrap();
        let e = bounds.param_nrmse(&fit.params, truth);
        if e <= 0.01 {
            exact += 1;
        } else if fit.objective <= 0.005 {
            fallback += 1;
        } else {
            misses.push(format!("{truth:?}: param {e:.4}, response {:.5}", fit.objective));
        }
    }
    (exact, fallback, misses)
}

#[test]
fn random_generators_are_recovered() {
    let (exact, fallback, misses) = identifiability(6);
    assert!(misses.is_empty(), "{misses:?}");
    assert!(exact + fallback == 6);
}

#[test]
#[ignore = "about twenty minutes; run with --ignored"]
fn random_generators_are_recovered_at_scale() {
    let (exact, fallback, misses) = identifiability(100);
    println!("exact {exact}/100, response-only {fallback}, misses {}", misses.len());
    assert!(exact >= 90 && misses.is_empty(), "{misses:?}");
}
