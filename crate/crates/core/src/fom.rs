//! Fractional-order standard linear solid.
//!
//! A spring `k0` in parallel with a series branch made of a spring `k1` and a
//! fractional element `b1 * D^alpha`. The continuous impedance is
//!
//! ```text
//! H(s) = k0 + k1 * b1 * s^alpha / (k1 + b1 * s^alpha)
//! ```
//!
//! and the sampled realisation replaces `s^alpha` by a Grünwald–Letnikov sum
//! truncated to the `window` most recent samples.

use std::f64::consts::FRAC_PI_2;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::{SignalRole, TimeSeries};

/// Real-time rendering rate of the haptic loop (1 kHz).
pub const DEFAULT_SAMPLE_TIME: f64 = 1e-3;
/// Short-memory window used for rendering and identification.
pub const DEFAULT_WINDOW: usize = 101;
/// Force/displacement magnitude treated as numerical divergence.
pub const DEFAULT_OVERFLOW_BOUND: f64 = 1e6;

/// Physical parameters. Stiffnesses in N/mm, `b1` in N·s^alpha/mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub k0: f64,
    pub k1: f64,
    pub b1: f64,
    pub alpha: f64,
}

impl ModelParams {
    pub const fn new(k0: f64, k1: f64, b1: f64, alpha: f64) -> Self {
        ModelParams { k0, k1, b1, alpha }
    }

    /// Parameters identified from creep and relaxation tests on the
    /// physical reference material.
    pub const fn identified() -> Self {
        ModelParams::new(-2.89, 5.70, 5.89, 0.203)
    }

    /// Population-level optimum reported by the human-subject aggregate.
    pub const fn reported_population_best() -> Self {
        ModelParams::new(-3.18, 5.58, 7.88, 0.176)
    }

    pub fn validate(&self) -> Result<()> {
        let ModelParams { k0, k1, b1, alpha } = *self;
        if ![k0, k1, b1, alpha].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("model parameters must be finite"));
        }
        if k1 <= 0.0 {
            return Err(Error::invalid(format!("k1 must be positive, got {k1}")));
        }
        if b1 < 0.0 {
            return Err(Error::invalid(format!("b1 must be non-negative, got {b1}")));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::invalid(format!("alpha must lie in [0, 1], got {alpha}")));
        }
        Ok(())
    }
}

/// Grünwald–Letnikov weights `c_i = (-1)^i binom(alpha, i)` for `i = 0..=window`.
pub fn gl_coeffs(alpha: f64, window: usize) -> Result<Vec<f64>> {
    if !alpha.is_finite() {
        return Err(Error::invalid("alpha must be finite"));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let mut c = Vec::with_capacity(window + 1);
    c.push(1.0);
    for i in 1..=window {
        let prev = c[i - 1];
        c.push((i as f64 - alpha - 1.0) / i as f64 * prev);
    }
    Ok(c)
}

/// Continuous impedance `H(j omega)` using the principal branch of `(j omega)^alpha`.
pub fn freq_response(params: &ModelParams, omega: f64) -> Complex64 {
    params.k0 + branch_response(params.k1, params.b1, params.alpha, omega)
}

/// Series-branch contribution `k1 b1 s^alpha / (k1 + b1 s^alpha)` at `s = j omega`.
fn branch_response(k1: f64, b1: f64, alpha: f64, omega: f64) -> Complex64 {
    let s_alpha = if alpha == 0.0 {
        Complex64::new(1.0, 0.0)
    } else if omega == 0.0 {
        Complex64::new(0.0, 0.0)
    } else {
        Complex64::from_polar(omega.powf(alpha), alpha * FRAC_PI_2)
    };
    let bs = b1 * s_alpha;
    k1 * bs / (k1 + bs)
}

/// Low-frequency effective-stiffness match that removes `k0` as a free
/// parameter: `Re H(j omega_eff) = target_keff`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StiffnessConstraint {
    /// rad/s
    pub omega_eff: f64,
    /// N/mm
    pub target_keff: f64,
    /// Optional `[lo, hi]` bound on `Im H(j omega_eff) / omega_eff` (N·s/mm).
    #[serde(default)]
    pub damping_range: Option<(f64, f64)>,
}

/// Frequency at which the identified and population-best parameter sets have
/// the same real stiffness.
pub const DEFAULT_OMEGA_EFF: f64 = 4.5457;
/// Real stiffness shared by both reported parameter sets at [`DEFAULT_OMEGA_EFF`].
pub const DEFAULT_TARGET_KEFF: f64 = 0.4522;

impl Default for StiffnessConstraint {
    fn default() -> Self {
        StiffnessConstraint {
            omega_eff: DEFAULT_OMEGA_EFF,
            target_keff: DEFAULT_TARGET_KEFF,
            damping_range: None,
        }
    }
}

impl StiffnessConstraint {
    pub fn solve_k0(&self, k1: f64, b1: f64, alpha: f64) -> f64 {
        solve_k0(k1, b1, alpha, self.target_keff, self.omega_eff)
    }

    pub fn effective_stiffness(&self, params: &ModelParams) -> f64 {
        freq_response(params, self.omega_eff).re
    }

    pub fn effective_damping(&self, params: &ModelParams) -> f64 {
        freq_response(params, self.omega_eff).im / self.omega_eff
    }

    pub fn damping_ok(&self, params: &ModelParams) -> bool {
        match self.damping_range {
            None => true,
            Some((lo, hi)) => {
                let d = self.effective_damping(params);
                d >= lo && d <= hi
            }
        }
    }
}

/// `k0` such that `Re H(j omega_eff) = target_keff`.
pub fn solve_k0(k1: f64, b1: f64, alpha: f64, target_keff: f64, omega_eff: f64) -> f64 {
    target_keff - branch_response(k1, b1, alpha, omega_eff).re
}

/// Sampled impedance `H(z) = sum(num_i z^-i) / sum(den_i z^-i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteImpedance {
    pub params: ModelParams,
    pub sample_time: f64,
    pub window: usize,
    pub gl_coeffs: Vec<f64>,
    pub num: Vec<f64>,
    pub den: Vec<f64>,
    pub overflow_bound: f64,
}

/// Branch-node history, zero before `t = 0`.
///
/// The last `window` values are kept twice in a `2 * window` buffer so the
/// memory sum is always one contiguous dot product.
#[derive(Debug, Clone)]
pub struct FilterState {
    buf: Vec<f64>,
    head: usize,
    /// `den[window], ..., den[1]`, aligned with the chronological history.
    den_rev: Vec<f64>,
}

impl FilterState {
    fn at_rest(den: &[f64]) -> Self {
        let n = den.len() - 1;
        FilterState {
            buf: vec![0.0; 2 * n],
            head: 0,
            den_rev: den[1..].iter().rev().copied().collect(),
        }
    }

    fn memory_term(&self) -> f64 {
        let n = self.den_rev.len();
        dot(&self.den_rev, &self.buf[self.head..self.head + n])
    }

    fn push(&mut self, y: f64) {
        let n = self.den_rev.len();
        if n == 0 {
            return;
        }
        self.buf[self.head] = y;
        self.buf[self.head + n] = y;
        self.head = (self.head + 1) % n;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

impl DiscreteImpedance {
    pub fn new(params: ModelParams, sample_time: f64, window: usize) -> Result<Self> {
        params.validate()?;
        if !(sample_time > 0.0 && sample_time.is_finite()) {
            return Err(Error::invalid("sample_time must be positive"));
        }
        let c = gl_coeffs(params.alpha, window)?;
        let g = params.b1 / sample_time.powf(params.alpha);
        let den: Vec<f64> = c
            .iter()
            .enumerate()
            .map(|(i, &ci)| if i == 0 { params.k1 } else { 0.0 } + g * ci)
            .collect();
        let num = c
            .iter()
            .zip(&den)
            .map(|(&ci, &di)| params.k0 * di + params.k1 * g * ci)
            .collect();
        Ok(DiscreteImpedance {
            params,
            sample_time,
            window,
            gl_coeffs: c,
            num,
            den,
            overflow_bound: DEFAULT_OVERFLOW_BOUND,
        })
    }

    pub fn with_overflow_bound(mut self, bound: f64) -> Self {
        self.overflow_bound = bound;
        self
    }

    /// Gain applied to a displacement change within one sample, `num[0] / den[0]`.
    pub fn instantaneous_stiffness(&self) -> f64 {
        self.num[0] / self.den[0]
    }

    /// `H(e^{j omega T})`.
    pub fn eval_z(&self, omega: f64) -> Complex64 {
        let z_inv = Complex64::from_polar(1.0, -omega * self.sample_time);
        let (n, d) = horner(&self.num, &self.den, z_inv);
        n / d
    }

    pub fn state(&self) -> FilterState {
        FilterState::at_rest(&self.den)
    }

    /// Advance one sample with prescribed displacement; returns force.
    pub fn step_displacement(&self, state: &mut FilterState, x: f64) -> f64 {
        let p = &self.params;
        let y = (p.k1 * x - state.memory_term()) / self.den[0];
        state.push(y);
        p.k0 * x + p.k1 * (x - y)
    }

    /// Advance one sample with prescribed force; returns displacement.
    pub fn step_force(&self, state: &mut FilterState, force: f64) -> Result<f64> {
        let a = self.instantaneous_stiffness();
        if a <= 0.0 || !a.is_finite() {
            return Err(Error::NonInvertibleStiffness { stiffness: a });
        }
        let p = &self.params;
        let m = state.memory_term();
        let x = (force - p.k1 * m / self.den[0]) / a;
        let y = (p.k1 * x - m) / self.den[0];
        state.push(y);
        Ok(x)
    }
}

fn horner(num: &[f64], den: &[f64], z_inv: Complex64) -> (Complex64, Complex64) {
    let mut n = Complex64::new(0.0, 0.0);
    let mut d = Complex64::new(0.0, 0.0);
    for (&a, &b) in num.iter().zip(den).rev() {
        n = n * z_inv + a;
        d = d * z_inv + b;
    }
    (n, d)
}

/// Number of samples covering `[0, duration]` inclusive.
pub fn sample_count(duration: f64, sample_time: f64) -> usize {
    (duration / sample_time).round() as usize + 1
}

/// Force response to a displacement step applied at `t = 0` from rest.
pub fn simulate_relaxation(
    filter: &DiscreteImpedance,
    step_displacement: f64,
    duration: f64,
) -> Result<TimeSeries> {
    if !(duration > 0.0) {
        return Err(Error::invalid("duration must be positive"));
    }
    let n = sample_count(duration, filter.sample_time);
    let mut state = filter.state();
    let mut force = Vec::with_capacity(n);
    for k in 0..n {
        let f = filter.step_displacement(&mut state, step_displacement);
        if !(f.abs() <= filter.overflow_bound) {
            return Err(Error::Diverged { sample: k, value: f });
        }
        force.push(f);
    }
    TimeSeries::new(filter.sample_time, SignalRole::Force, force)
}

/// Displacement response to a prescribed force profile starting from rest.
pub fn simulate_creep(filter: &DiscreteImpedance, force_profile: &TimeSeries) -> Result<TimeSeries> {
    force_profile.validate()?;
    if force_profile.role != SignalRole::Force {
        return Err(Error::invalid("creep input must be a force series"));
    }
    if (force_profile.sample_time - filter.sample_time).abs() > 1e-12 * filter.sample_time {
        return Err(Error::invalid("force profile and filter sample times differ"));
    }
    let mut state = filter.state();
    let mut disp = Vec::with_capacity(force_profile.len());
    for (k, &f) in force_profile.values.iter().enumerate() {
        let x = filter.step_force(&mut state, f)?;
        if !(x.abs() <= filter.overflow_bound) {
            return Err(Error::Diverged { sample: k, value: x });
        }
        disp.push(x);
    }
    let mut out = TimeSeries::new(filter.sample_time, SignalRole::Displacement, disp)?;
    out.start_time = force_profile.start_time;
    Ok(out)
}

/// Creep-with-recovery loading: `hold_force` for `hold_duration`, then
/// `recovery_force` through `hold_duration + recovery_duration` (inclusive).
pub fn creep_recovery_profile(
    hold_force: f64,
    recovery_force: f64,
    hold_duration: f64,
    recovery_duration: f64,
    sample_time: f64,
) -> Result<TimeSeries> {
    let n_hold = (hold_duration / sample_time).round() as usize;
    let n_total = sample_count(hold_duration + recovery_duration, sample_time);
    let values = (0..n_total)
        .map(|k| if k < n_hold { hold_force } else { recovery_force })
        .collect();
    TimeSeries::new(sample_time, SignalRole::Force, values)
}

/// The two characterization tests used for identification and for the
/// simulated participant's response comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestProtocol {
    /// mm
    pub step_displacement: f64,
    /// s
    pub relaxation_duration: f64,
    /// N
    pub hold_force: f64,
    /// N
    pub recovery_force: f64,
    /// s
    pub hold_duration: f64,
    /// s
    pub recovery_duration: f64,
    pub sample_time: f64,
    pub window: usize,
}

impl Default for TestProtocol {
    fn default() -> Self {
        TestProtocol {
            step_displacement: 5.0,
            relaxation_duration: 3.0,
            hold_force: 3.0,
            recovery_force: 0.5,
            hold_duration: 3.0,
            recovery_duration: 3.0,
            sample_time: DEFAULT_SAMPLE_TIME,
            window: DEFAULT_WINDOW,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Responses {
    pub relaxation: TimeSeries,
    pub creep: TimeSeries,
}

impl TestProtocol {
    pub fn force_profile(&self) -> Result<TimeSeries> {
        creep_recovery_profile(
            self.hold_force,
            self.recovery_force,
            self.hold_duration,
            self.recovery_duration,
            self.sample_time,
        )
    }

    pub fn simulate(&self, params: &ModelParams) -> Result<Responses> {
        let filter = DiscreteImpedance::new(*params, self.sample_time, self.window)?;
        Ok(Responses {
            relaxation: simulate_relaxation(&filter, self.step_displacement, self.relaxation_duration)?,
            creep: simulate_creep(&filter, &self.force_profile()?)?,
        })
    }
}
