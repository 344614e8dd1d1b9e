//! Sampled-data passivity of a rendered impedance.
//!
//! A virtual environment `H(z)` rendered through a device with physical
//! damping `b` at sampling time `T` is passive when, for all `0 < omega <= pi/T`,
//!
//! ```text
//! b >= T / (2 (1 - cos(omega T))) * Re[(1 - e^{-j omega T}) H(e^{j omega T})]
//! ```
//!
//! For a pure spring `K` this reduces to the virtual-wall bound `b >= K T / 2`.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fom::{gl_coeffs, ModelParams, DEFAULT_SAMPLE_TIME, DEFAULT_WINDOW};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PassivityConfig {
    /// Physical damping of the haptic device, N·s/mm.
    pub device_damping: f64,
    pub freq_grid_points: usize,
    pub sample_time: f64,
    /// Short-memory window of the rendered filter.
    #[serde(default = "default_window")]
    pub window: usize,
}

fn default_window() -> usize {
    DEFAULT_WINDOW
}

impl Default for PassivityConfig {
    fn default() -> Self {
        PassivityConfig {
            device_damping: 0.01,
            freq_grid_points: 1024,
            sample_time: DEFAULT_SAMPLE_TIME,
            window: DEFAULT_WINDOW,
        }
    }
}

impl PassivityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.device_damping >= 0.0 && self.device_damping.is_finite()) {
            return Err(Error::invalid("device_damping must be non-negative"));
        }
        if self.freq_grid_points < 64 {
            return Err(Error::invalid("freq_grid_points must be at least 64"));
        }
        if !(self.sample_time > 0.0 && self.sample_time.is_finite()) {
            return Err(Error::invalid("sample_time must be positive"));
        }
        Ok(())
    }
}

/// Precomputed frequency grid for repeated margin evaluations.
#[derive(Debug, Clone)]
pub struct PassivityChecker {
    config: PassivityConfig,
    /// `e^{-j omega T}` per grid point.
    z_inv: Vec<Complex64>,
    /// `(1 - e^{-j omega T}) * T / (2 (1 - cos omega T))` per grid point.
    weight: Vec<Complex64>,
}

impl PassivityChecker {
    pub fn new(config: PassivityConfig) -> Result<Self> {
        config.validate()?;
        let t = config.sample_time;
        let n = config.freq_grid_points;
        let hi = PI / t;
        let lo = hi / 1000.0;
        let ratio = hi / lo;
        let mut z_inv = Vec::with_capacity(n);
        let mut weight = Vec::with_capacity(n);
        for i in 1..=n {
            let omega = lo * ratio.powf(i as f64 / n as f64);
            let theta = omega * t;
            let half = (0.5 * theta).sin();
            let one_minus_cos = 2.0 * half * half;
            let one_minus_z = Complex64::new(one_minus_cos, theta.sin());
            z_inv.push(Complex64::from_polar(1.0, -theta));
            weight.push(one_minus_z * (t / (2.0 * one_minus_cos)));
        }
        Ok(PassivityChecker { config, z_inv, weight })
    }

    pub fn config(&self) -> &PassivityConfig {
        &self.config
    }

    pub fn frequencies(&self) -> Vec<f64> {
        self.z_inv
            .iter()
            .map(|z| -z.arg() / self.config.sample_time)
            .collect()
    }

    /// `sum_i c_i z^-i` over the grid for one fractional order.
    pub fn gl_response(&self, alpha: f64) -> Result<Vec<Complex64>> {
        let c = gl_coeffs(alpha, self.config.window)?;
        Ok(self
            .z_inv
            .iter()
            .map(|&z| c.iter().rev().fold(Complex64::new(0.0, 0.0), |acc, &ci| acc * z + ci))
            .collect())
    }

    /// Margin using a precomputed [`gl_response`](Self::gl_response) for `params.alpha`.
    pub fn margin_with(&self, params: &ModelParams, gl: &[Complex64]) -> f64 {
        let g = params.b1 / self.config.sample_time.powf(params.alpha);
        let worst = gl
            .iter()
            .zip(&self.weight)
            .map(|(&s, &w)| {
                let gs = g * s;
                let h = params.k0 + params.k1 * gs / (params.k1 + gs);
                (w * h).re
            })
            .fold(f64::NEG_INFINITY, f64::max);
        self.config.device_damping - worst
    }

    pub fn margin(&self, params: &ModelParams) -> Result<f64> {
        params.validate()?;
        let gl = self.gl_response(params.alpha)?;
        Ok(self.margin_with(params, &gl))
    }

    pub fn is_passive(&self, params: &ModelParams) -> Result<bool> {
        Ok(self.margin(params)? >= 0.0)
    }
}

/// `b` minus the largest required damping over the frequency grid; the
/// parameters are feasible iff the margin is non-negative.
pub fn passivity_margin(params: &ModelParams, config: &PassivityConfig) -> Result<f64> {
    PassivityChecker::new(*config)?.margin(params)
}
