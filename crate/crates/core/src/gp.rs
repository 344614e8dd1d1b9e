//! Gaussian-process model of a latent realism score learned from
//! three-level ordinal labels.
//!
//! The latent `f` has a zero-mean GP prior with kernel
//! `k(x, x') = exp(-theta |x - x'|^2)`. A label `o_j` is observed with
//! probability `Phi((t_j - f)/c) - Phi((t_{j-1} - f)/c)`, and the posterior is
//! replaced by its Laplace approximation around the mode.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use libm::erfc;

use crate::error::{Error, Result};

/// Ordinal feedback, ordered from least to most realistic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Different = 1,
    Similar = 2,
    Close = 3,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Different, Label::Similar, Label::Close];

    /// Zero-based cell index.
    pub fn index(self) -> usize {
        self as usize - 1
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Label::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Different => "different",
            Label::Similar => "similar",
            Label::Close => "close",
        }
    }
}

impl std::str::FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "different" | "1" => Ok(Label::Different),
            "similar" | "2" => Ok(Label::Similar),
            "close" | "3" => Ok(Label::Close),
            other => Err(Error::Parse(format!("unknown label `{other}`"))),
        }
    }
}

/// Fixed GP and likelihood hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpConfig {
    /// Inverse squared lengthscale `theta` of the RBF kernel.
    pub kernel_theta: f64,
    /// Probit noise `c_o` of the ordinal likelihood.
    pub ordinal_noise: f64,
    /// Interior thresholds `t_1 < t_2`; `t_0 = -inf` and `t_3 = +inf` are implied.
    pub thresholds: [f64; 2],
    pub jitter: f64,
}

impl Default for GpConfig {
    fn default() -> Self {
        GpConfig {
            kernel_theta: 30.0,
            ordinal_noise: 0.5,
            thresholds: [-0.5, 0.5],
            jitter: 1e-8,
        }
    }
}

impl GpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kernel_theta > 0.0 && self.kernel_theta.is_finite()) {
            return Err(Error::invalid("kernel_theta must be positive"));
        }
        if !(self.ordinal_noise > 0.0 && self.ordinal_noise.is_finite()) {
            return Err(Error::invalid("ordinal_noise must be positive"));
        }
        if !(self.thresholds[0] < self.thresholds[1]) {
            return Err(Error::invalid("thresholds must be strictly increasing"));
        }
        if !(self.jitter > 0.0) {
            return Err(Error::invalid("jitter must be positive"));
        }
        Ok(())
    }

    pub fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        (-self.kernel_theta * d2).exp()
    }

    /// `(t_{j-1}, t_j)` for a label.
    fn cell(&self, label: Label) -> (f64, f64) {
        match label {
            Label::Different => (f64::NEG_INFINITY, self.thresholds[0]),
            Label::Similar => (self.thresholds[0], self.thresholds[1]),
            Label::Close => (self.thresholds[1], f64::INFINITY),
        }
    }
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

fn std_normal_pdf(z: f64) -> f64 {
    if z.is_infinite() {
        0.0
    } else {
        FRAC_1_SQRT_2PI * (-0.5 * z * z).exp()
    }
}

/// `P(label | f)`.
pub fn ordinal_class_prob(latent: f64, label: Label, config: &GpConfig) -> f64 {
    cell_mass(latent, label, config)
}

fn cell_mass(f: f64, label: Label, config: &GpConfig) -> f64 {
    let (lo, hi) = config.cell(label);
    let c = config.ordinal_noise;
    let (z_lo, z_hi) = ((lo - f) / c, (hi - f) / c);
    if z_lo > 0.0 {
        // both bounds in the upper tail: difference of survival functions
        std_normal_cdf(-z_lo) - std_normal_cdf(-z_hi)
    } else {
        std_normal_cdf(z_hi) - std_normal_cdf(z_lo)
    }
}

/// Log-likelihood of one label with first derivative and negated second
/// derivative in `f`.
#[derive(Debug, Clone, Copy)]
struct CellTerms {
    log_p: f64,
    grad: f64,
    neg_hess: f64,
}

/// `phi(z) / Phi(z)` and `ln Phi(z)` for a one-sided cell, with the
/// asymptotic series far in the lower tail.
fn lower_tail(z: f64) -> (f64, f64) {
    if z > -20.0 {
        let p = std_normal_cdf(z);
        (std_normal_pdf(z) / p, p.ln())
    } else {
        let z2 = z * z;
        let series = 1.0 - 1.0 / z2 + 3.0 / (z2 * z2) - 15.0 / (z2 * z2 * z2);
        let ln_pdf = -0.5 * z2 - 0.5 * (2.0 * std::f64::consts::PI).ln();
        (-z / series, ln_pdf - (-z).ln() + series.ln())
    }
}

fn cell_terms(f: f64, label: Label, config: &GpConfig) -> CellTerms {
    let (lo, hi) = config.cell(label);
    let c = config.ordinal_noise;
    let (z_lo, z_hi) = ((lo - f) / c, (hi - f) / c);
    // r = phi(z) / Z for each bound
    let (log_p, r_lo, r_hi) = match label {
        Label::Different => {
            let (r, lp) = lower_tail(z_hi);
            (lp, 0.0, r)
        }
        Label::Close => {
            // Z = Phi(-z_lo); phi is even
            let (r, lp) = lower_tail(-z_lo);
            (lp, r, 0.0)
        }
        Label::Similar => {
            let z = cell_mass(f, label, config);
            if z > 1e-300 {
                (z.ln(), std_normal_pdf(z_lo) / z, std_normal_pdf(z_hi) / z)
            } else if z_hi < 0.0 {
                // far above the cell: dominated by the upper bound's lower tail
                let (r, lp) = lower_tail(z_hi);
                (lp, 0.0, r)
            } else {
                let (r, lp) = lower_tail(-z_lo);
                (lp, r, 0.0)
            }
        }
    };
    let term = |z: f64, r: f64| if r == 0.0 { 0.0 } else { z * r };
    let diff = r_hi - r_lo;
    CellTerms {
        log_p,
        grad: -diff / c,
        neg_hess: (term(z_hi, r_hi) - term(z_lo, r_lo)) / (c * c) + (diff / c) * (diff / c),
    }
}

/// Labelled points in the normalized parameter box.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OrdinalDataset {
    pub points: Vec<Vec<f64>>,
    pub labels: Vec<Label>,
}

impl OrdinalDataset {
    pub fn new(points: Vec<Vec<f64>>, labels: Vec<Label>) -> Result<Self> {
        let d = OrdinalDataset { points, labels };
        d.validate()?;
        Ok(d)
    }

    pub fn push(&mut self, point: Vec<f64>, label: Label) {
        self.points.push(point);
        self.labels.push(label);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() != self.labels.len() {
            return Err(Error::invalid("points and labels differ in length"));
        }
        if let Some(first) = self.points.first() {
            let d = first.len();
            for p in &self.points {
                if p.len() != d {
                    return Err(Error::invalid("points differ in dimension"));
                }
                if !p.iter().all(|&v| (-1e-12..=1.0 + 1e-12).contains(&v)) {
                    return Err(Error::invalid("points must lie in the unit box"));
                }
            }
        }
        Ok(())
    }
}

pub const MAX_NEWTON_ITERATIONS: usize = 100;
pub const NEWTON_TOLERANCE: f64 = 1e-8;
const MAX_JITTER: f64 = 1e-4;

/// Laplace-approximated posterior over the latent realism score.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(into = "PosteriorRecord", try_from = "PosteriorRecord")]
pub struct GpPosterior {
    config: GpConfig,
    dataset: OrdinalDataset,
    mode: Vec<f64>,
    neg_hessian: Vec<f64>,
    kernel_matrix: DMatrix<f64>,
    /// Jitter actually added to the kernel diagonal.
    jitter: f64,
    /// `grad log p(D | f)` at the mode, equal to `K^-1 f_hat` there.
    weights: Vec<f64>,
    sqrt_w: Vec<f64>,
    /// Row-major lower Cholesky factor of `I + W^1/2 K W^1/2`.
    chol_b: Vec<f64>,
    iterations: usize,
}

/// On-disk form of a posterior; the kernel matrix is rebuilt on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorRecord {
    pub config: GpConfig,
    pub points: Vec<Vec<f64>>,
    pub labels: Vec<Label>,
    pub mode: Vec<f64>,
    pub w_diag: Vec<f64>,
}

impl From<GpPosterior> for PosteriorRecord {
    fn from(p: GpPosterior) -> Self {
        PosteriorRecord {
            config: p.config,
            points: p.dataset.points,
            labels: p.dataset.labels,
            mode: p.mode,
            w_diag: p.neg_hessian,
        }
    }
}

impl TryFrom<PosteriorRecord> for GpPosterior {
    type Error = Error;

    fn try_from(r: PosteriorRecord) -> Result<Self> {
        r.config.validate()?;
        let dataset = OrdinalDataset::new(r.points, r.labels)?;
        let n = dataset.len();
        if r.mode.len() != n || r.w_diag.len() != n {
            return Err(Error::invalid("posterior record sizes are inconsistent"));
        }
        if r.w_diag.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
            return Err(Error::invalid("negative Hessian must be non-negative"));
        }
        let (kernel_matrix, jitter) = kernel_matrix(&dataset.points, &r.config)?;
        let weights = r
            .mode
            .iter()
            .zip(&dataset.labels)
            .map(|(&f, &l)| cell_terms(f, l, &r.config).grad)
            .collect();
        Ok(GpPosterior::assemble(r.config, dataset, r.mode, r.w_diag, kernel_matrix, jitter, weights, 0))
    }
}

/// `K + jitter I`, escalating the jitter tenfold until a Cholesky
/// factorization succeeds.
fn kernel_matrix(points: &[Vec<f64>], config: &GpConfig) -> Result<(DMatrix<f64>, f64)> {
    let n = points.len();
    let base = DMatrix::from_fn(n, n, |i, j| config.kernel(&points[i], &points[j]));
    let mut jitter = config.jitter;
    loop {
        let mut k = base.clone();
        for i in 0..n {
            k[(i, i)] += jitter;
        }
        if k.clone().cholesky().is_some() {
            return Ok((k, jitter));
        }
        if jitter >= MAX_JITTER {
            return Err(Error::NonPsdKernel { jitter });
        }
        jitter = (jitter * 10.0).min(MAX_JITTER);
    }
}

fn log_likelihood(f: &[f64], labels: &[Label], config: &GpConfig) -> f64 {
    f.iter().zip(labels).map(|(&fi, &l)| cell_terms(fi, l, config).log_p).sum()
}

/// Newton iterations for the posterior mode, parameterized by
/// `a = K^-1 f` so that no explicit kernel inverse is needed.
pub fn laplace_fit(dataset: &OrdinalDataset, config: &GpConfig) -> Result<GpPosterior> {
    config.validate()?;
    dataset.validate()?;
    let n = dataset.len();
    let (k, jitter) = kernel_matrix(&dataset.points, config)?;
    let labels = &dataset.labels;

    let mut a = DVector::<f64>::zeros(n);
    let mut f = DVector::<f64>::zeros(n);
    let objective = |a: &DVector<f64>, f: &DVector<f64>| log_likelihood(f.as_slice(), labels, config) - 0.5 * a.dot(f);
    let mut psi = objective(&a, &f);
    let mut iterations = 0;
    loop {
        let terms: Vec<CellTerms> = f.iter().zip(labels).map(|(&fi, &l)| cell_terms(fi, l, config)).collect();
        let grad = DVector::from_iterator(n, terms.iter().map(|t| t.grad));
        let gap = (&grad - &a).amax();
        if gap <= NEWTON_TOLERANCE {
            break;
        }
        if iterations >= MAX_NEWTON_ITERATIONS {
            return Err(Error::NotConverged { iterations, gradient: gap });
        }
        iterations += 1;

        let w = DVector::from_iterator(n, terms.iter().map(|t| t.neg_hess));
        let sw = w.map(f64::sqrt);
        let b_mat = DMatrix::identity(n, n) + DMatrix::from_fn(n, n, |i, j| sw[i] * k[(i, j)] * sw[j]);
        let chol = b_mat.cholesky().ok_or(Error::NonPsdKernel { jitter })?;
        let b = w.component_mul(&f) + &grad;
        let kb = &k * &b;
        let c = chol.solve(&sw.component_mul(&kb));
        let a_full = &b - sw.component_mul(&c);
        let delta = &a_full - &a;

        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let a_try = &a + &delta * step;
            let f_try = &k * &a_try;
            let psi_try = objective(&a_try, &f_try);
            if psi_try >= psi - 1e-12 * psi.abs().max(1.0) {
                a = a_try;
                f = f_try;
                psi = psi_try;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            return Err(Error::NotConverged { iterations, gradient: gap });
        }
    }

    let mode: Vec<f64> = f.iter().copied().collect();
    let terms: Vec<CellTerms> = mode.iter().zip(labels).map(|(&fi, &l)| cell_terms(fi, l, config)).collect();
    let w = terms.iter().map(|t| t.neg_hess).collect();
    let weights = terms.iter().map(|t| t.grad).collect();
    Ok(GpPosterior::assemble(*config, dataset.clone(), mode, w, k, jitter, weights, iterations))
}

impl GpPosterior {
    #[allow(clippy::too_many_arguments)]
    fn assemble(
        config: GpConfig,
        dataset: OrdinalDataset,
        mode: Vec<f64>,
        neg_hessian: Vec<f64>,
        kernel_matrix: DMatrix<f64>,
        jitter: f64,
        weights: Vec<f64>,
        iterations: usize,
    ) -> Self {
        let n = mode.len();
        let sqrt_w: Vec<f64> = neg_hessian.iter().map(|w| w.sqrt()).collect();
        let b = DMatrix::identity(n, n) + DMatrix::from_fn(n, n, |i, j| sqrt_w[i] * kernel_matrix[(i, j)] * sqrt_w[j]);
        // B >= I, so the factorization cannot fail
        let l = b.cholesky().expect("I + W^1/2 K W^1/2 is positive definite").l();
        let mut chol_b = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                chol_b[i * n + j] = l[(i, j)];
            }
        }
        GpPosterior {
            config,
            dataset,
            mode,
            neg_hessian,
            kernel_matrix,
            jitter,
            weights,
            sqrt_w,
            chol_b,
            iterations,
        }
    }

    /// Posterior with no data: the prior.
    pub fn prior(config: &GpConfig) -> Result<Self> {
        laplace_fit(&OrdinalDataset::default(), config)
    }

    pub fn config(&self) -> &GpConfig {
        &self.config
    }

    pub fn dataset(&self) -> &OrdinalDataset {
        &self.dataset
    }

    pub fn mode(&self) -> &[f64] {
        &self.mode
    }

    pub fn neg_hessian(&self) -> &[f64] {
        &self.neg_hessian
    }

    pub fn kernel_matrix(&self) -> &DMatrix<f64> {
        &self.kernel_matrix
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// Prior variance at any query, `k(x, x)`.
    pub fn prior_variance(&self) -> f64 {
        1.0
    }

    /// Posterior mean and variance of the latent score at `query`.
    pub fn predict(&self, query: &[f64]) -> (f64, f64) {
        let n = self.mode.len();
        let mut v = Vec::with_capacity(n);
        let mut mean = 0.0;
        for (i, p) in self.dataset.points.iter().enumerate() {
            let k = self.config.kernel(query, p);
            mean += k * self.weights[i];
            // forward substitution L v = W^1/2 k_*
            let row = &self.chol_b[i * n..i * n + i];
            let s: f64 = row.iter().zip(&v).map(|(l, vj)| l * vj).sum();
            v.push((self.sqrt_w[i] * k - s) / self.chol_b[i * n + i]);
        }
        let var = self.prior_variance() - v.iter().map(|x| x * x).sum::<f64>();
        (mean, var.max(0.0))
    }

    /// Log posterior `log p(D | f) - f^T K^-1 f / 2` up to a constant.
    pub fn log_posterior(&self, f: &[f64]) -> Result<f64> {
        let fk = DVector::from_column_slice(f);
        let chol = self
            .kernel_matrix
            .clone()
            .cholesky()
            .ok_or(Error::NonPsdKernel { jitter: self.jitter })?;
        let quad = fk.dot(&chol.solve(&fk));
        Ok(log_likelihood(f, &self.dataset.labels, &self.config) - 0.5 * quad)
    }
}

/// `(mean, variance)` of the latent score at `query`.
pub fn predict_latent(posterior: &GpPosterior, query: &[f64]) -> (f64, f64) {
    posterior.predict(query)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn class_probabilities_at_zero() {
        let c = GpConfig::default();
        assert_relative_eq!(ordinal_class_prob(0.0, Label::Similar, &c), 0.682_689_492_137_085_9, epsilon = 1e-12);
        assert_relative_eq!(ordinal_class_prob(0.0, Label::Close, &c), 0.158_655_253_931_457_05, epsilon = 1e-12);
        assert_relative_eq!(
            ordinal_class_prob(0.0, Label::Close, &c),
            ordinal_class_prob(0.0, Label::Different, &c),
            epsilon = 1e-15
        );
        assert_relative_eq!(ordinal_class_prob(50.0, Label::Close, &c), 1.0);
        assert!(ordinal_class_prob(50.0, Label::Different, &c) < 1e-100);
    }

    #[test]
    fn cell_derivatives_match_finite_differences() {
        let c = GpConfig::default();
        for &f in &[-3.0, -0.7, -0.1, 0.0, 0.4, 1.3, 4.0] {
            for l in Label::ALL {
                let t = cell_terms(f, l, &c);
                let h = 1e-5;
                let lp = |x: f64| cell_mass(x, l, &c).ln();
                let g = (lp(f + h) - lp(f - h)) / (2.0 * h);
                let hess = (lp(f + h) - 2.0 * lp(f) + lp(f - h)) / (h * h);
                assert_relative_eq!(t.log_p, lp(f), max_relative = 1e-12);
                assert!((t.grad - g).abs() < 1e-6, "{l:?} {f}: {} vs {g}", t.grad);
                assert!((t.neg_hess + hess).abs() < 1e-3, "{l:?} {f}: {} vs {}", t.neg_hess, -hess);
                assert!(t.neg_hess > 0.0);
            }
        }
    }

    #[test]
    fn tail_terms_stay_finite() {
        let c = GpConfig::default();
        for &f in &[-40.0, -15.0, 15.0, 40.0] {
            for l in Label::ALL {
                let t = cell_terms(f, l, &c);
                assert!(t.log_p.is_finite() && t.grad.is_finite() && t.neg_hess.is_finite(), "{l:?} {f}");
                assert!(t.neg_hess >= 0.0, "{l:?} {f}: {t:?}");
            }
        }
    }

    #[test]
    fn empty_dataset_is_prior() {
        let post = GpPosterior::prior(&GpConfig::default()).unwrap();
        assert!(post.mode().is_empty());
        assert_eq!(post.predict(&[0.3, 0.2, 0.9]), (0.0, 1.0));
    }

    #[test]
    fn single_similar_observation_has_zero_mode() {
        let d = OrdinalDataset::new(vec![vec![0.5, 0.5, 0.5]], vec![Label::Similar]).unwrap();
        let post = laplace_fit(&d, &GpConfig::default()).unwrap();
        assert!(post.mode()[0].abs() < 1e-12);
    }

    #[test]
    fn close_and_different_push_the_mode() {
        let cfg = GpConfig::default();
        let close = laplace_fit(&OrdinalDataset::new(vec![vec![0.2]], vec![Label::Close]).unwrap(), &cfg).unwrap();
        let diff = laplace_fit(&OrdinalDataset::new(vec![vec![0.2]], vec![Label::Different]).unwrap(), &cfg).unwrap();
        assert!(close.mode()[0] > 0.0);
        assert_relative_eq!(close.mode()[0], -diff.mode()[0], epsilon = 1e-9);
    }

    #[test]
    fn duplicates_sharpen_the_mode() {
        let cfg = GpConfig::default();
        let mut last = 0.0;
        for reps in 1..6 {
            let d = OrdinalDataset::new(vec![vec![0.4, 0.6]; reps], vec![Label::Close; reps]).unwrap();
            let post = laplace_fit(&d, &cfg).unwrap();
            let m = post.predict(&[0.4, 0.6]).0;
            assert!(m > last, "reps {reps}: {m} <= {last}");
            last = m;
        }
    }

    #[test]
    fn far_queries_revert_to_prior() {
        let d = OrdinalDataset::new(vec![vec![0.0, 0.0], vec![0.05, 0.0]], vec![Label::Close, Label::Different]).unwrap();
        let post = laplace_fit(&d, &GpConfig::default()).unwrap();
        let (m, v) = post.predict(&[1.0, 1.0]);
        assert!(m.abs() < 1e-6 && (v - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_invalid_inputs() {
        assert!(OrdinalDataset::new(vec![vec![0.5]], vec![]).is_err());
        assert!(OrdinalDataset::new(vec![vec![1.5]], vec![Label::Close]).is_err());
        let bad = GpConfig { thresholds: [0.5, -0.5], ..Default::default() };
        assert!(laplace_fit(&OrdinalDataset::default(), &bad).is_err());
        let bad = GpConfig { ordinal_noise: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn record_round_trip_predicts_identically() {
        let d = OrdinalDataset::new(
            vec![vec![0.1, 0.2, 0.3], vec![0.5, 0.5, 0.5], vec![0.52, 0.48, 0.5], vec![0.9, 0.1, 0.4]],
            vec![Label::Close, Label::Different, Label::Similar, Label::Different],
        )
        .unwrap();
        let post = laplace_fit(&d, &GpConfig::default()).unwrap();
        let json = serde_json::to_string(&post).unwrap();
        let back: GpPosterior = serde_json::from_str(&json).unwrap();
        for q in [[0.1, 0.2, 0.3], [0.4, 0.4, 0.4], [0.0, 1.0, 0.5]] {
            assert_eq!(post.predict(&q), back.predict(&q));
        }
        assert_eq!(back.kernel_matrix(), post.kernel_matrix());
    }

    #[test]
    fn label_parsing() {
        assert_eq!("Close".parse::<Label>().unwrap(), Label::Close);
        assert_eq!("2".parse::<Label>().unwrap(), Label::Similar);
        assert!("maybe".parse::<Label>().is_err());
        assert_eq!(serde_json::to_string(&Label::Different).unwrap(), "\"different\"");
    }
}
