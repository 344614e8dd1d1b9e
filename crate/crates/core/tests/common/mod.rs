#![allow(dead_code)]

use std::sync::Arc;

use fracsls::bo::{run_session_with, CandidatePool, SessionConfig};
use fracsls::gp::{laplace_fit, ordinal_class_prob, GpPosterior, Label};
use fracsls::oracle::{OracleConfig, SimulatedParticipant};
use fracsls::ModelParams;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::function::gamma::ln_gamma;

/// `c_i = (-1)^i binom(alpha, i)` from Gamma functions, for `0 < alpha < 1`.
pub fn gl_gamma(alpha: f64, i: usize) -> f64 {
    if i == 0 {
        return 1.0;
    }
    let i = i as f64;
    -alpha * (ln_gamma(i - alpha) - ln_gamma(1.0 - alpha) - ln_gamma(i + 1.0)).exp()
}

/// Integer-order SLS force after a displacement step `x0`.
pub fn sls_relaxation(p: &ModelParams, x0: f64, t: f64) -> f64 {
    (p.k0 + p.k1 * (-p.k1 * t / p.b1).exp()) * x0
}

/// Integer-order SLS displacement under a constant force `f0`, for `k0 > 0`.
pub fn sls_creep(p: &ModelParams, f0: f64, t: f64) -> f64 {
    let tau = p.b1 * (p.k0 + p.k1) / (p.k0 * p.k1);
    f0 / p.k0 * (1.0 - p.k1 / (p.k0 + p.k1) * (-t / tau).exp())
}

fn log_lik(f: &[f64], labels: &[Label], post: &GpPosterior) -> f64 {
    f.iter().zip(labels).map(|(&fi, &l)| ordinal_class_prob(fi, l, post.config()).ln()).sum()
}

/// Laplace quantities rebuilt without the Newton solver: the mode by
/// nested grid search of the log posterior, the curvature by finite
/// differences, and the predictive from explicit inverses.
pub struct BruteLaplace {
    pub mode: Vec<f64>,
    pub w: Vec<f64>,
    k_inv: DMatrix<f64>,
    kw_inv: DMatrix<f64>,
}

impl BruteLaplace {
    pub fn new(post: &GpPosterior) -> Self {
        let n = post.dataset().len();
        assert!((1..=2).contains(&n));
        let labels = post.dataset().labels.clone();
        let k = post.kernel_matrix().clone();
        let k_inv = k.clone().try_inverse().unwrap();
        let psi = |f: &[f64]| {
            let v = DVector::from_column_slice(f);
            log_lik(f, &labels, post) - 0.5 * v.dot(&(&k_inv * &v))
        };
        let mut center = vec![0.0; n];
        let mut half = 5.0;
        let steps = 40;
        while half > 1e-9 {
            let h = half / steps as f64;
            let mut best = (f64::NEG_INFINITY, center.clone());
            let grid: Vec<f64> = (-steps..=steps).map(|j| j as f64 * h).collect();
            let mut visit = |f: Vec<f64>| {
                let v = psi(&f);
                if v > best.0 {
                    best = (v, f);
                }
            };
            if n == 1 {
                for &a in &grid {
                    visit(vec![center[0] + a]);
                }
            } else {
                for &a in &grid {
                    for &b in &grid {
                        visit(vec![center[0] + a, center[1] + b]);
                    }
                }
            }
            center = best.1;
            half = 4.0 * h;
        }
        let h = 1e-4;
        let w: Vec<f64> = center
            .iter()
            .zip(&labels)
            .map(|(&f, &l)| {
                let lp = |x: f64| ordinal_class_prob(x, l, post.config()).ln();
                -(lp(f + h) - 2.0 * lp(f) + lp(f - h)) / (h * h)
            })
            .collect();
        let w_inv = DMatrix::from_diagonal(&DVector::from_iterator(n, w.iter().map(|x| 1.0 / x)));
        let kw_inv = (k + w_inv).try_inverse().unwrap();
        BruteLaplace { mode: center, w, k_inv, kw_inv }
    }

    pub fn predict(&self, post: &GpPosterior, query: &[f64]) -> (f64, f64) {
        let ks = DVector::from_iterator(
            self.mode.len(),
            post.dataset().points.iter().map(|p| post.config().kernel(query, p)),
        );
        let f = DVector::from_column_slice(&self.mode);
        let mean = ks.dot(&(&self.k_inv * f));
        let var = 1.0 - ks.dot(&(&self.kw_inv * &ks));
        (mean, var)
    }
}

/// Exact posterior predictive moments by grid quadrature over the latent
/// values at the data (n ≤ 2). Not the Laplace answer; reported for scale.
pub fn exact_predictive(post: &GpPosterior, query: &[f64]) -> (f64, f64) {
    let n = post.dataset().len();
    let labels = &post.dataset().labels;
    let k = post.kernel_matrix().clone();
    let k_inv = k.clone().try_inverse().unwrap();
    let h = 0.01;
    let span = 700;
    let nodes: Vec<f64> = (-span..=span).map(|j| j as f64 * h).collect();
    let mut z = 0.0;
    let mut m1 = DVector::<f64>::zeros(n);
    let mut m2 = DMatrix::<f64>::zeros(n, n);
    let mut visit = |f: &[f64]| {
        let v = DVector::from_column_slice(f);
        let w = (log_lik(f, labels, post) - 0.5 * v.dot(&(&k_inv * &v))).exp();
        z += w;
        m1 += &v * w;
        m2 += &v * v.transpose() * w;
    };
    if n == 1 {
        for &a in &nodes {
            visit(&[a]);
        }
    } else {
        for &a in &nodes {
            for &b in &nodes {
                visit(&[a, b]);
            }
        }
    }
    let mean_f = m1 / z;
    let cov = m2 / z - &mean_f * mean_f.transpose();
    let ks = DVector::from_iterator(n, post.dataset().points.iter().map(|p| post.config().kernel(query, p)));
    let a = &k_inv * &ks;
    (a.dot(&mean_f), 1.0 - ks.dot(&a) + a.dot(&(&cov * &a)))
}

/// Member settings drawn for one simulated population.
pub fn population_oracles(battery: u64, members: usize) -> Vec<OracleConfig> {
    let mut rng = ChaCha8Rng::seed_from_u64(battery);
    (0..members as u64)
        .map(|m| {
            let scale: f64 = rng.random_range(0.8..1.2);
            let base = OracleConfig::default();
            OracleConfig {
                d_close: base.d_close * scale,
                d_different: base.d_different * scale,
                noise: rng.random_range(0.01..0.04),
                seed: battery * members as u64 + m,
                ..base
            }
        })
        .collect()
}

pub struct PopulationRun {
    pub individual_best: Vec<ModelParams>,
    pub full: Vec<GpPosterior>,
    pub truncated: Vec<GpPosterior>,
    pub closes: usize,
}

/// One tuning session per oracle; `truncate` also refits each member on its
/// first trials only.
pub fn run_population(
    config: &SessionConfig,
    pool: &Arc<CandidatePool>,
    oracles: &[OracleConfig],
    truncate: usize,
) -> PopulationRun {
    let outs: Vec<_> = oracles
        .par_iter()
        .map(|oc| {
            let mut participant = SimulatedParticipant::new(*oc).unwrap();
            let out = run_session_with(config, pool.clone(), &mut participant, oc.seed, &mut |_| Ok(())).unwrap();
            let mut d = out.session.dataset();
            d.points.truncate(truncate);
            d.labels.truncate(truncate);
            let short = laplace_fit(&d, &config.gp).unwrap();
            let closes = out.session.transcript().iter().filter(|l| **l == Label::Close).count();
            (out.x_max, out.posterior, short, closes)
        })
        .collect();
    let mut run = PopulationRun { individual_best: vec![], full: vec![], truncated: vec![], closes: 0 };
    for (best, full, short, closes) in outs {
        run.individual_best.push(best);
        run.full.push(full);
        run.truncated.push(short);
        run.closes += closes;
    }
    run
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
