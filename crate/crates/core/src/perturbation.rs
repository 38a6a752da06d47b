//! First-order flexibility gains for a single-antenna, single-user link.
//!
//! Around the rigid configuration the received power is expanded to first
//! order in the displacements. Per-atom morphing can align every term of
//! the expansion (gain `ỹ‖∇P_r‖₁`); whole-layer shifts only align the
//! per-layer sums (gain `ỹ Σ_ℓ |Σ_n ∂P_r/∂y[ℓ,n]|`). Distance constraints are
//! not enforced here.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::channel::{cis_cycles, PhaseStack, Precoder, QuantSet, C64};
use crate::error::{Error, Result};
use crate::geometry::Layout;
use crate::gradients::GradWorkspace;
use crate::metrics::evaluate;
use crate::scenario::{ScenarioConfig, UserGeometry};

/// `sign` with `sign(0) = +1`.
fn sign(v: f64) -> f64 {
    if v < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Turns `base` into the single-antenna, single-user setting with
/// `num_layers` layers.
pub fn siso_config(base: &ScenarioConfig, num_layers: usize) -> ScenarioConfig {
    let mut cfg = base.clone();
    cfg.system.num_tx_antennas = 1;
    cfg.system.num_users = 1;
    cfg.system.num_layers = num_layers;
    cfg.geometry.nominal_gaps = None;
    cfg
}

/// Uniformly random continuous responses, reproducible from `(seed, stream)`.
pub fn random_phases(num_atoms: usize, num_layers: usize, quant: QuantSet, seed: u64, stream: u64) -> PhaseStack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut phases = PhaseStack::ones(num_atoms, num_layers, quant);
    for l in 0..num_layers {
        for n in 0..num_atoms {
            phases.set_value(l, n, cis_cycles(rng.random::<f64>()));
        }
    }
    phases
}

/// A fixed single-user link whose received power is probed.
pub struct SisoLink<'a> {
    layout: &'a Layout,
    geometry: &'a UserGeometry,
    phases: &'a PhaseStack,
    precoder: Precoder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbReport {
    pub morph_range: f64,
    /// Received power of the rigid configuration, in watts.
    pub p0: f64,
    /// Gradient of the received power at the rigid configuration, W/m.
    pub grad: Vec<f64>,
    pub g_sfim: f64,
    pub g_dsim: f64,
    pub y_sfim: Vec<f64>,
    pub y_dsim: Vec<f64>,
    /// `P_r(y) − P_r(0)` at the chosen displacements.
    pub actual_sfim: f64,
    pub actual_dsim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidationRow {
    pub morph_range: f64,
    pub predicted_sfim: f64,
    pub actual_sfim: f64,
    pub rel_err_sfim: f64,
    pub predicted_dsim: f64,
    pub actual_dsim: f64,
    pub rel_err_dsim: f64,
}

fn rel_err(predicted: f64, actual: f64) -> f64 {
    if predicted == actual {
        0.0
    } else {
        (predicted - actual).abs() / actual.abs()
    }
}

impl<'a> SisoLink<'a> {
    pub fn new(layout: &'a Layout, geometry: &'a UserGeometry, phases: &'a PhaseStack, power: f64) -> Result<Self> {
        if layout.num_antennas() != 1 || geometry.num_users() != 1 {
            return Err(Error::Contract(format!(
                "flexibility gains need one antenna and one user (got M = {}, K = {})",
                layout.num_antennas(),
                geometry.num_users()
            )));
        }
        Ok(SisoLink {
            layout,
            geometry,
            phases,
            precoder: Precoder(DMatrix::from_element(1, 1, C64::new(power.sqrt(), 0.0))),
        })
    }

    pub fn received_power(&self, y: &[f64]) -> Result<f64> {
        // With unit noise the stream power is the received power.
        let rep = evaluate(self.layout, y, self.geometry, self.phases, &self.precoder, &[1.0])?;
        Ok(rep.j[(0, 0)])
    }

    pub fn gradient(&self, y: &[f64]) -> Result<Vec<f64>> {
        let ws = GradWorkspace::new(self.layout, y, self.geometry, self.phases, &self.precoder)?;
        Ok(ws.grad_j(0, 0))
    }

    /// Predicted gains and the displacements that achieve them.
    pub fn perturb_gains(&self, morph_range: f64) -> Result<PerturbReport> {
        let dim = self.layout.num_atoms() * self.layout.num_layers();
        let zero = vec![0.0; dim];
        let p0 = self.received_power(&zero)?;
        let grad = self.gradient(&zero)?;
        let (g_sfim, g_dsim, y_sfim, y_dsim) = gains_from_gradient(&grad, self.layout.num_atoms(), morph_range);
        let actual_sfim = self.received_power(&y_sfim)? - p0;
        let actual_dsim = self.received_power(&y_dsim)? - p0;
        Ok(PerturbReport {
            morph_range,
            p0,
            grad,
            g_sfim,
            g_dsim,
            y_sfim,
            y_dsim,
            actual_sfim,
            actual_dsim,
        })
    }

    /// Predicted versus actual gain for each morphing range in `ranges`.
    pub fn first_order_validate(&self, report: &PerturbReport, ranges: &[f64]) -> Result<Vec<ValidationRow>> {
        let na = self.layout.num_atoms();
        ranges
            .iter()
            .map(|&r| {
                let (predicted_sfim, predicted_dsim, y_sfim, y_dsim) = gains_from_gradient(&report.grad, na, r);
                debug_assert!(y_sfim.iter().chain(&y_dsim).all(|v| v.abs() <= r));
                let actual_sfim = self.received_power(&y_sfim)? - report.p0;
                let actual_dsim = self.received_power(&y_dsim)? - report.p0;
                Ok(ValidationRow {
                    morph_range: r,
                    predicted_sfim,
                    actual_sfim,
                    rel_err_sfim: rel_err(predicted_sfim, actual_sfim),
                    predicted_dsim,
                    actual_dsim,
                    rel_err_dsim: rel_err(predicted_dsim, actual_dsim),
                })
            })
            .collect()
    }
}

/// Sign selections and predicted gains from a gradient laid out layer-major
/// with `num_atoms` entries per layer.
pub fn gains_from_gradient(grad: &[f64], num_atoms: usize, morph_range: f64) -> (f64, f64, Vec<f64>, Vec<f64>) {
    let y_sfim: Vec<f64> = grad.iter().map(|&g| morph_range * sign(g)).collect();
    let g_sfim = morph_range * grad.iter().map(|g| g.abs()).sum::<f64>();
    let mut y_dsim = Vec::with_capacity(grad.len());
    let mut g_dsim = 0.0;
    for layer in grad.chunks(num_atoms) {
        let total: f64 = layer.iter().sum();
        g_dsim += total.abs();
        y_dsim.extend(std::iter::repeat_n(morph_range * sign(total), layer.len()));
    }
    (g_sfim, morph_range * g_dsim, y_sfim, y_dsim)
}
