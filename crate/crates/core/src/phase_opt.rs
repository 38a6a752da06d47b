//! Per-layer meta-atom response updates.
//!
//! With every other layer fixed, the stream gains are linear in the
//! responses of layer `l`: `s_ki = Σ_n g̃_kn φ_n w̃_in`, where `g̃_k` is the
//! user channel propagated back to layer `l` and `w̃_i` the precoded field
//! arriving at layer `l` before its responses are applied.
//!
//! Quantized responses are chosen by cyclic coordinate descent on the true
//! rates. Each candidate is a rank-one change of `s`, so a full pass costs
//! `O(N · U · K²)`. Continuous responses start from the same descent and
//! are then refined with surrogate solves over the unit disks, normalized
//! back onto the circle.

use nalgebra::{DMatrix, DVector};

use crate::bf_opt::acceptable;
use crate::channel::{backward_step, ChannelStack, PhaseStack, Precoder, QuantSet, C64};
use crate::error::{Error, Result};
use crate::metrics::{rates_from_gains, RateReport};
use crate::sca::{BarrierOptions, SetKind, Surrogate};

/// Effective channels around one layer.
#[derive(Clone, Debug)]
pub struct LayerSurrogate {
    pub layer: usize,
    /// `g_eff[(n, k)]`: user `k`'s channel seen from atom `n`.
    pub g_eff: DMatrix<C64>,
    /// `w_eff[(n, i)]`: field of stream `i` arriving at atom `n`.
    pub w_eff: DMatrix<C64>,
}

impl LayerSurrogate {
    pub fn num_atoms(&self) -> usize {
        self.g_eff.nrows()
    }

    pub fn num_users(&self) -> usize {
        self.g_eff.ncols()
    }

    /// Stream gains for the given layer responses.
    pub fn gains(&self, phi: &[C64]) -> DMatrix<C64> {
        let nk = self.num_users();
        let ni = self.w_eff.ncols();
        DMatrix::from_fn(nk, ni, |k, i| {
            (0..self.num_atoms())
                .map(|n| self.g_eff[(n, k)] * phi[n] * self.w_eff[(n, i)])
                .sum()
        })
    }

    /// Coefficient vectors `a_ki[n] = g̃_kn w̃_in` of the linear gains.
    pub fn forms(&self) -> Vec<Vec<DVector<C64>>> {
        let na = self.num_atoms();
        (0..self.num_users())
            .map(|k| {
                (0..self.w_eff.ncols())
                    .map(|i| DVector::from_fn(na, |n, _| self.g_eff[(n, k)] * self.w_eff[(n, i)]))
                    .collect()
            })
            .collect()
    }
}

pub fn build_layer_surrogate(
    stack: &ChannelStack,
    phases: &PhaseStack,
    w: &Precoder,
    layer: usize,
) -> Result<LayerSurrogate> {
    let nl = stack.num_layers();
    if layer >= nl {
        return Err(Error::IndexOutOfRange {
            what: "layer",
            index: layer,
            limit: nl,
        });
    }
    let na = phases.num_atoms;
    let nk = stack.num_users();
    let mut g_eff = DMatrix::zeros(na, nk);
    for k in 0..nk {
        let mut z = stack.h[k].clone();
        for l in (layer + 1..nl).rev() {
            z = backward_step(&stack.omega[l], phases.layer(l), &z);
        }
        g_eff.set_column(k, &z);
    }
    let mut x = w.0.clone();
    for l in 0..layer {
        x = &stack.omega[l] * x;
        for (n, mut row) in x.row_iter_mut().enumerate() {
            row *= phases.get(l, n);
        }
    }
    let w_eff = &stack.omega[layer] * x;
    Ok(LayerSurrogate { layer, g_eff, w_eff })
}

fn feasible(report: &RateReport, thresholds: &[f64]) -> bool {
    report.rates.iter().zip(thresholds).all(|(r, t)| r >= t)
}

/// Result of a discrete layer update.
#[derive(Clone, Debug)]
pub struct DiscreteOutcome {
    pub codes: Vec<usize>,
    pub report: RateReport,
    pub passes: usize,
}

/// Cyclic coordinate descent over `candidates` for each atom, starting
/// from `start`. Returns the chosen candidate index per atom.
fn coordinate_descent(
    sur: &LayerSurrogate,
    candidates: &[Vec<C64>],
    start: &[usize],
    thresholds: &[f64],
    noise: &[f64],
    max_passes: usize,
) -> (Vec<usize>, RateReport, usize) {
    let na = sur.num_atoms();
    let nk = sur.num_users();
    let ni = sur.w_eff.ncols();
    let mut choice = start.to_vec();
    let mut phi: Vec<C64> = (0..na).map(|n| candidates[n][choice[n]]).collect();
    let mut passes = 0;
    while passes < max_passes {
        passes += 1;
        let mut changed = false;
        // Fresh gains each pass keep incremental updates from drifting.
        let mut s = sur.gains(&phi);
        for n in 0..na {
            let coupling = DMatrix::from_fn(nk, ni, |k, i| sur.g_eff[(n, k)] * sur.w_eff[(n, i)]);
            let current = choice[n];
            let mut best: Option<(usize, f64)> = None;
            for (u, &q) in candidates[n].iter().enumerate() {
                let delta = q - phi[n];
                let trial = if u == current {
                    s.clone()
                } else {
                    &s + &coupling * delta
                };
                let rep = rates_from_gains(&trial, noise);
                if !feasible(&rep, thresholds) {
                    continue;
                }
                if best.is_none_or(|(_, v)| rep.r_sum > v) {
                    best = Some((u, rep.r_sum));
                }
            }
            let Some((u, _)) = best else { continue };
            if u != current {
                s += &coupling * (candidates[n][u] - phi[n]);
                phi[n] = candidates[n][u];
                choice[n] = u;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    (choice, rates_from_gains(&sur.gains(&phi), noise), passes)
}

/// Discrete update of one layer over the quantization set.
pub fn optimize_layer_discrete(
    sur: &LayerSurrogate,
    start_codes: &[usize],
    quant: &QuantSet,
    thresholds: &[f64],
    noise: &[f64],
    max_passes: usize,
) -> DiscreteOutcome {
    let candidates = vec![quant.levels.clone(); sur.num_atoms()];
    let (codes, report, passes) = coordinate_descent(sur, &candidates, start_codes, thresholds, noise, max_passes);
    DiscreteOutcome { codes, report, passes }
}

#[derive(Clone, Debug)]
pub struct ContinuousOutcome {
    pub phi: Vec<C64>,
    pub report: RateReport,
    pub rounds_accepted: usize,
}

/// Continuous update of one layer: coordinate descent over the
/// quantization set plus the current value, then surrogate rounds.
#[allow(clippy::too_many_arguments)]
pub fn optimize_layer_continuous(
    sur: &LayerSurrogate,
    start: &[C64],
    quant: &QuantSet,
    thresholds: &[f64],
    noise: &[f64],
    max_passes: usize,
    rounds: usize,
    opts: &BarrierOptions,
) -> ContinuousOutcome {
    let na = sur.num_atoms();
    let mut candidates = Vec::with_capacity(na);
    let mut start_idx = Vec::with_capacity(na);
    for &value in start.iter().take(na) {
        match quant.levels.iter().position(|q| *q == value) {
            Some(u) => {
                candidates.push(quant.levels.clone());
                start_idx.push(u);
            }
            None => {
                let mut c = quant.levels.clone();
                c.push(value);
                start_idx.push(c.len() - 1);
                candidates.push(c);
            }
        }
    }
    let (choice, mut report, _) = coordinate_descent(sur, &candidates, &start_idx, thresholds, noise, max_passes);
    let mut phi: Vec<C64> = choice.iter().enumerate().map(|(n, &u)| candidates[n][u]).collect();

    let forms = sur.forms();
    let mut accepted = 0;
    for _ in 0..rounds {
        let v0 = DVector::from_column_slice(&phi);
        let problem = Surrogate::new(&forms, noise, Some(thresholds), &v0, SetKind::UnitDisks);
        let out = problem.solve(&v0, opts);
        let cand: Vec<C64> = out
            .v
            .iter()
            .zip(&phi)
            .map(|(v, old)| {
                let r = v.norm();
                if r > 0.0 && r.is_finite() {
                    v / r
                } else {
                    *old
                }
            })
            .collect();
        let rep = rates_from_gains(&sur.gains(&cand), noise);
        if !acceptable(&report, &rep, thresholds) || rep.r_sum <= report.r_sum {
            break;
        }
        phi = cand;
        report = rep;
        accepted += 1;
    }
    ContinuousOutcome {
        phi,
        report,
        rounds_accepted: accepted,
    }
}
