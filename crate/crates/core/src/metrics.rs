//! SINR, rates and the penalized objective used by the morphing block.

use nalgebra::{DMatrix, DVector};

use crate::channel::{build_stack, cascade, PhaseStack, Precoder, C64};
use crate::error::Result;
use crate::geometry::Layout;
use crate::scenario::UserGeometry;

#[derive(Clone, Debug, PartialEq)]
pub struct RateReport {
    /// `j[(k, i)] = |g_k^T w_i|²` in watts.
    pub j: DMatrix<f64>,
    pub sinr: Vec<f64>,
    pub rates: Vec<f64>,
    pub r_sum: f64,
}

impl RateReport {
    /// QoS violations `max(0, R_k^th − R_k)`.
    pub fn violations(&self, thresholds: &[f64]) -> Vec<f64> {
        self.rates
            .iter()
            .zip(thresholds)
            .map(|(r, t)| (t - r).max(0.0))
            .collect()
    }

    pub fn max_violation(&self, thresholds: &[f64]) -> f64 {
        self.violations(thresholds).into_iter().fold(0.0, f64::max)
    }

    /// Slack variables `max(0, R_k − R_k^th)`.
    pub fn slack(&self, thresholds: &[f64]) -> Vec<f64> {
        self.rates
            .iter()
            .zip(thresholds)
            .map(|(r, t)| (r - t).max(0.0))
            .collect()
    }
}

/// Complex gains `s[(k, i)] = g_k^T w_i`.
pub fn stream_gains(g: &[DVector<C64>], w: &Precoder) -> DMatrix<C64> {
    let k = g.len();
    DMatrix::from_fn(k, w.num_streams(), |r, c| {
        g[r].iter().zip(w.0.column(c).iter()).map(|(a, b)| a * b).sum()
    })
}

pub fn rates_from_gains(s: &DMatrix<C64>, noise: &[f64]) -> RateReport {
    let j = s.map(|v| v.norm_sqr());
    rates_from_powers(j, noise)
}

pub fn rates_from_powers(j: DMatrix<f64>, noise: &[f64]) -> RateReport {
    let k = j.nrows();
    let mut sinr = Vec::with_capacity(k);
    let mut rates = Vec::with_capacity(k);
    for u in 0..k {
        let total: f64 = j.row(u).iter().sum();
        let desired = j[(u, u)];
        let gamma = desired / (total - desired + noise[u]);
        sinr.push(gamma);
        rates.push(gamma.ln_1p() / std::f64::consts::LN_2);
    }
    let r_sum = rates.iter().sum();
    RateReport { j, sinr, rates, r_sum }
}

pub fn sinr_and_rates(g: &[DVector<C64>], w: &Precoder, noise: &[f64]) -> RateReport {
    rates_from_gains(&stream_gains(g, w), noise)
}

/// Rebuilds the channel at morphing state `y` and evaluates all rates.
pub fn evaluate(
    layout: &Layout,
    y: &[f64],
    geometry: &UserGeometry,
    phases: &PhaseStack,
    w: &Precoder,
    noise: &[f64],
) -> Result<RateReport> {
    let stack = build_stack(layout, y, geometry)?;
    let g = cascade(&stack, phases)?;
    Ok(sinr_and_rates(&g, w, noise))
}

/// Squared QoS residual penalty `(1/2ω) Σ (R_k^th − R_k + μ_k)²`.
pub fn penalty(report: &RateReport, thresholds: &[f64], mu: &[f64], omega: f64) -> f64 {
    let sq: f64 = report
        .rates
        .iter()
        .zip(thresholds)
        .zip(mu)
        .map(|((r, t), m)| (t - r + m).powi(2))
        .sum();
    sq / (2.0 * omega)
}

pub fn augmented_objective(report: &RateReport, thresholds: &[f64], mu: &[f64], omega: f64) -> f64 {
    report.r_sum - penalty(report, thresholds, mu, omega)
}
