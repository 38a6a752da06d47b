//! Transmit precoder update by successive convex approximation.

use nalgebra::{DMatrix, DVector};

use crate::channel::{Precoder, C64};
use crate::metrics::{sinr_and_rates, RateReport};
use crate::sca::{BarrierOptions, SetKind, Surrogate};
use crate::scenario::BeamformerParams;

#[derive(Clone, Debug)]
pub struct BfRound {
    pub w: Precoder,
    pub report: RateReport,
    /// The round kept `W_prev` because the solver failed or the candidate
    /// would have lowered the sum rate or worsened a QoS violation.
    pub stalled: bool,
    pub kkt_residual: f64,
}

#[derive(Clone, Debug)]
pub struct BfResult {
    pub w: Precoder,
    pub report: RateReport,
    /// Sum rate before the first round and after each round.
    pub trace: Vec<f64>,
    pub rounds: usize,
    pub stalled: bool,
}

/// Whether `cand` may replace `prev`: no sum-rate loss and no user pushed
/// further below its threshold.
pub(crate) fn acceptable(prev: &RateReport, cand: &RateReport, thresholds: &[f64]) -> bool {
    if !(cand.r_sum >= prev.r_sum) {
        return false;
    }
    cand.rates
        .iter()
        .zip(&prev.rates)
        .zip(thresholds)
        .all(|((c, p), t)| *c >= t.min(*p))
}

/// One surrogate solve around `w_prev`.
pub fn bf_sca_round(
    w_prev: &Precoder,
    g: &[DVector<C64>],
    noise: &[f64],
    thresholds: &[f64],
    p_max: f64,
    opts: &BarrierOptions,
) -> BfRound {
    let m = w_prev.num_antennas();
    let nk = w_prev.num_streams();
    let root_p = p_max.sqrt();
    // Decision vector: vec(W) / sqrt(P), so the power budget is the unit ball.
    let v0 = DVector::from_iterator(m * nk, w_prev.0.iter().map(|v| v / root_p));
    let forms: Vec<Vec<DVector<C64>>> = (0..nk)
        .map(|k| {
            (0..nk)
                .map(|i| {
                    let mut a = DVector::zeros(m * nk);
                    a.rows_mut(i * m, m).copy_from(&(&g[k] * C64::new(root_p, 0.0)));
                    a
                })
                .collect()
        })
        .collect();
    let prev_report = sinr_and_rates(g, w_prev, noise);
    let sur = Surrogate::new(&forms, noise, Some(thresholds), &v0, SetKind::Ball);
    let out = sur.solve(&v0, opts);
    let cand = Precoder(DMatrix::from_iterator(m, nk, out.v.iter().map(|v| v * root_p)));
    let report = sinr_and_rates(g, &cand, noise);
    if out.v.iter().all(|v| v.re.is_finite() && v.im.is_finite()) && acceptable(&prev_report, &report, thresholds) {
        BfRound {
            w: cand,
            report,
            stalled: false,
            kkt_residual: out.kkt_residual,
        }
    } else {
        BfRound {
            w: w_prev.clone(),
            report: prev_report,
            stalled: true,
            kkt_residual: out.kkt_residual,
        }
    }
}

/// Repeats [`bf_sca_round`] until the sum rate moves by at most the
/// tolerance or the round budget is spent.
pub fn run_bf_opt(
    w0: &Precoder,
    g: &[DVector<C64>],
    noise: &[f64],
    thresholds: &[f64],
    p_max: f64,
    params: &BeamformerParams,
) -> BfResult {
    let opts = BarrierOptions {
        gap: params.barrier_gap,
        growth: params.barrier_growth,
        ..BarrierOptions::default()
    };
    let mut w = w0.clone();
    let mut report = sinr_and_rates(g, &w, noise);
    let mut trace = vec![report.r_sum];
    let mut stalled = false;
    let mut rounds = 0;
    while rounds < params.max_rounds {
        let round = bf_sca_round(&w, g, noise, thresholds, p_max, &opts);
        rounds += 1;
        let delta = round.report.r_sum - report.r_sum;
        stalled |= round.stalled;
        w = round.w;
        report = round.report;
        trace.push(report.r_sum);
        if round.stalled || delta.abs() <= params.tolerance {
            break;
        }
    }
    BfResult {
        w,
        report,
        trace,
        rounds,
        stalled,
    }
}

/// Matched-filter precoder `sqrt(P) g*/‖g‖` for a single user.
pub fn matched_filter(g: &DVector<C64>, p_max: f64) -> Precoder {
    let scale = p_max.sqrt() / g.norm();
    Precoder(DMatrix::from_iterator(g.len(), 1, g.iter().map(|v| v.conj() * scale)))
}
