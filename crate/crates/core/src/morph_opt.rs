//! Penalized projected-gradient ascent on the morphing vector.
//!
//! Each step moves along the gradient of the augmented objective (restricted
//! to the displacements the architecture can realize and scaled by its
//! largest entry), projects the candidate back onto the feasible set, and
//! halves the step until the augmented objective increases sufficiently and
//! the sum rate does not drop. A step that lands on a QoS violation makes
//! the penalty stiffer and the step is retried.

use log::warn;

use crate::channel::{PhaseStack, Precoder};
use crate::error::Result;
use crate::geometry::{project_for_mode, Architecture, ConstraintSystem, Layout};
use crate::gradients::{grad_aug, GradWorkspace};
use crate::metrics::{augmented_objective, evaluate, RateReport};
use crate::scenario::{MorphParams, UserGeometry};

/// Everything the morphing block reads but never changes.
pub struct MorphContext<'a> {
    pub layout: &'a Layout,
    pub constraints: &'a ConstraintSystem,
    pub geometry: &'a UserGeometry,
    pub phases: &'a PhaseStack,
    pub precoder: &'a Precoder,
    pub noise: &'a [f64],
    pub thresholds: &'a [f64],
    pub mode: Architecture,
    pub params: &'a MorphParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MorphOptState {
    pub y: Vec<f64>,
    pub mu: Vec<f64>,
    pub omega: f64,
    pub steps_taken: usize,
    pub penalty_retries: usize,
}

impl MorphOptState {
    pub fn new(y: Vec<f64>, num_users: usize, params: &MorphParams) -> Self {
        MorphOptState {
            y,
            mu: vec![0.0; num_users],
            omega: params.omega_init,
            steps_taken: 0,
            penalty_retries: 0,
        }
    }
}

/// One row of the per-step trace.
#[derive(Clone, Debug, PartialEq)]
pub struct MorphTrace {
    pub r_sum: f64,
    pub r_aug: f64,
    pub omega: f64,
    pub max_violation: f64,
    /// Largest per-atom displacement of the accepted step, in meters.
    pub step: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum StepOutcome {
    Accepted(MorphTrace),
    /// No ascent step found (zero gradient or line search exhausted).
    Stalled,
    /// Every retry violated QoS even at the stiffest penalty.
    QosExhausted,
}

/// Slack update `μ_k = max(0, R_k − R_k^th)`.
pub fn update_slack(report: &RateReport, thresholds: &[f64]) -> Vec<f64> {
    report.slack(thresholds)
}

/// Stiffens the penalty when any QoS violation exceeds the tolerance.
/// Returns `false` when the weight is already at its floor.
pub fn penalty_schedule(
    state: &mut MorphOptState,
    report: &RateReport,
    thresholds: &[f64],
    params: &MorphParams,
) -> bool {
    if report.max_violation(thresholds) <= params.tol_qos {
        return true;
    }
    if state.omega <= params.omega_floor {
        warn!(
            "penalty weight at its floor ({:e}) with QoS violation {:e}",
            state.omega,
            report.max_violation(thresholds)
        );
        return false;
    }
    state.omega = (state.omega * params.kappa).max(params.omega_floor);
    true
}

/// Backtracking line search from `state.y`. Returns the accepted point and
/// its report, or `None`.
fn line_search(
    ctx: &MorphContext<'_>,
    state: &MorphOptState,
    base: &RateReport,
) -> Result<Option<(Vec<f64>, RateReport, f64)>> {
    let ws = GradWorkspace::new(ctx.layout, &state.y, ctx.geometry, ctx.phases, ctx.precoder)?;
    let mut direction = grad_aug(&ws, base, ctx.thresholds, &state.mu, state.omega, ctx.noise);
    ctx.mode.project_direction(&mut direction, ctx.layout.num_atoms());
    let scale = direction.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(scale > 0.0) || !scale.is_finite() {
        return Ok(None);
    }
    direction.iter_mut().for_each(|v| *v /= scale);

    let lambda = ctx.layout.lambda;
    let base_aug = augmented_objective(base, ctx.thresholds, &state.mu, state.omega);
    let mut step = ctx.params.step_init;
    for _ in 0..=ctx.params.max_halvings {
        let raw: Vec<f64> = state.y.iter().zip(&direction).map(|(y, d)| y + step * d).collect();
        let cand = project_for_mode(&raw, ctx.constraints, ctx.mode)?.y;
        let moved: f64 = cand.iter().zip(&state.y).map(|(a, b)| ((a - b) / lambda).powi(2)).sum();
        if moved > 0.0 {
            let rep = evaluate(ctx.layout, &cand, ctx.geometry, ctx.phases, ctx.precoder, ctx.noise)?;
            let aug = augmented_objective(&rep, ctx.thresholds, &state.mu, state.omega);
            if aug >= base_aug + ctx.params.armijo * moved && rep.r_sum >= base.r_sum {
                let largest = cand
                    .iter()
                    .zip(&state.y)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                return Ok(Some((cand, rep, largest)));
            }
        }
        step *= ctx.params.step_shrink;
    }
    Ok(None)
}

/// One morphing step with penalty retries.
pub fn morph_step(ctx: &MorphContext<'_>, state: &mut MorphOptState) -> Result<StepOutcome> {
    if ctx.mode == Architecture::Rsim {
        state.y.iter_mut().for_each(|v| *v = 0.0);
        return Ok(StepOutcome::Stalled);
    }
    let base = evaluate(ctx.layout, &state.y, ctx.geometry, ctx.phases, ctx.precoder, ctx.noise)?;
    let base_violation = base.max_violation(ctx.thresholds);
    for _ in 0..=ctx.params.max_retries {
        state.mu = update_slack(&base, ctx.thresholds);
        let Some((cand, rep, largest)) = line_search(ctx, state, &base)? else {
            return Ok(StepOutcome::Stalled);
        };
        let violation = rep.max_violation(ctx.thresholds);
        if violation <= ctx.params.tol_qos.max(base_violation) {
            state.y = cand;
            state.mu = update_slack(&rep, ctx.thresholds);
            state.steps_taken += 1;
            return Ok(StepOutcome::Accepted(MorphTrace {
                r_sum: rep.r_sum,
                r_aug: augmented_objective(&rep, ctx.thresholds, &state.mu, state.omega),
                omega: state.omega,
                max_violation: violation,
                step: largest,
            }));
        }
        state.penalty_retries += 1;
        if !penalty_schedule(state, &rep, ctx.thresholds, ctx.params) {
            return Ok(StepOutcome::QosExhausted);
        }
    }
    warn!(
        "morphing step still violates QoS after {} retries; keeping the previous iterate",
        ctx.params.max_retries
    );
    Ok(StepOutcome::QosExhausted)
}

/// Runs morphing steps until one stalls, the sum-rate gain of a step drops
/// below `tolerance`, or `max_steps` is reached.
pub fn run_morph(
    ctx: &MorphContext<'_>,
    state: &mut MorphOptState,
    max_steps: usize,
    tolerance: f64,
) -> Result<Vec<MorphTrace>> {
    let mut trace = Vec::new();
    let mut last = evaluate(ctx.layout, &state.y, ctx.geometry, ctx.phases, ctx.precoder, ctx.noise)?.r_sum;
    for _ in 0..max_steps {
        match morph_step(ctx, state)? {
            StepOutcome::Accepted(row) => {
                let gain = row.r_sum - last;
                last = row.r_sum;
                trace.push(row);
                if gain <= tolerance {
                    break;
                }
            }
            StepOutcome::Stalled | StepOutcome::QosExhausted => break,
        }
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{build_stack, cascade, QuantSet};
    use crate::geometry::build_constraints;
    use crate::metrics::sinr_and_rates;
    use crate::scenario::{sample_scenario, zero_forcing, ScenarioConfig};

    struct Fixture {
        layout: Layout,
        cs: ConstraintSystem,
        geo: UserGeometry,
        phases: PhaseStack,
        w: Precoder,
        noise: Vec<f64>,
        params: MorphParams,
    }

    fn fixture(seed: u64) -> Fixture {
        let mut cfg = ScenarioConfig::default();
        cfg.system.num_tx_antennas = 3;
        cfg.system.num_layers = 3;
        cfg.system.atoms_per_layer = 9;
        cfg.system.atoms_per_row = 3;
        cfg.system.num_users = 2;
        let layout = Layout::new(&cfg).unwrap();
        let cs = build_constraints(&layout);
        let geo = sample_scenario(&cfg, seed);
        let codes = (0..27).map(|i| (i * 3 + seed as usize) % 4).collect();
        let phases = PhaseStack::from_codes(9, 3, codes, QuantSet::new(2)).unwrap();
        let g = cascade(&build_stack(&layout, &vec![0.0; 27], &geo).unwrap(), &phases).unwrap();
        let w = zero_forcing(&g, cfg.system.power_budget).unwrap();
        Fixture {
            layout,
            cs,
            geo,
            phases,
            w,
            noise: cfg.noise_vars(),
            params: cfg.solver.morph.clone(),
        }
    }

    fn ctx<'a>(f: &'a Fixture, thr: &'a [f64], mode: Architecture) -> MorphContext<'a> {
        MorphContext {
            layout: &f.layout,
            constraints: &f.cs,
            geometry: &f.geo,
            phases: &f.phases,
            precoder: &f.w,
            noise: &f.noise,
            thresholds: thr,
            mode,
            params: &f.params,
        }
    }

    #[test]
    fn slack_update_max_form() {
        let r = crate::metrics::rates_from_powers(nalgebra::DMatrix::from_element(1, 1, 7.0), &[1.0]);
        assert_eq!(update_slack(&r, &[2.0]), vec![1.0]);
        let r = crate::metrics::rates_from_powers(nalgebra::DMatrix::from_element(1, 1, 1.0), &[1.0]);
        assert_eq!(update_slack(&r, &[2.0]), vec![0.0]);
    }

    #[test]
    fn penalty_schedule_steps() {
        let params = MorphParams::default();
        let r = crate::metrics::rates_from_powers(nalgebra::DMatrix::from_element(1, 1, 1.0), &[1.0]);
        let mut s = MorphOptState::new(vec![], 1, &params);
        assert!(penalty_schedule(&mut s, &r, &[0.5], &params));
        assert_eq!(s.omega, 1.0);
        assert!(penalty_schedule(&mut s, &r, &[2.0], &params));
        assert_eq!(s.omega, 0.5);
        s.omega = params.omega_floor;
        assert!(!penalty_schedule(&mut s, &r, &[2.0], &params));
        assert_eq!(s.omega, params.omega_floor);
    }

    #[test]
    fn rsim_stays_rigid() {
        let f = fixture(1);
        let thr = [0.0, 0.0];
        let c = ctx(&f, &thr, Architecture::Rsim);
        let mut s = MorphOptState::new(vec![1e-4; 27], 2, &f.params);
        assert_eq!(morph_step(&c, &mut s).unwrap(), StepOutcome::Stalled);
        assert!(s.y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sum_rate_monotone_and_feasible() {
        for mode in [Architecture::Sfim, Architecture::Dsim, Architecture::Hsim] {
            let f = fixture(5);
            let thr = [0.0, 0.0];
            let c = ctx(&f, &thr, mode);
            let mut s = MorphOptState::new(vec![0.0; 27], 2, &f.params);
            let start = evaluate(&f.layout, &s.y, &f.geo, &f.phases, &f.w, &f.noise)
                .unwrap()
                .r_sum;
            let trace = run_morph(&c, &mut s, 8, 0.0).unwrap();
            let mut prev = start;
            for row in &trace {
                assert!(row.r_sum >= prev - 1e-8);
                prev = row.r_sum;
            }
            assert!(!trace.is_empty(), "{mode}: no step accepted");
            assert!(f.cs.max_violation(&s.y) <= 1e-10);
            let mut pattern = crate::geometry::MorphState {
                y: s.y.clone(),
                num_atoms: 9,
                num_layers: 3,
                mode,
            };
            assert_eq!(pattern.mode_violation(), 0.0);
            pattern.project_mode();
            assert_eq!(pattern.y, s.y);
        }
    }

    #[test]
    fn qos_preserved_under_penalty() {
        let f = fixture(9);
        let g = cascade(&build_stack(&f.layout, &vec![0.0; 27], &f.geo).unwrap(), &f.phases).unwrap();
        let r0 = sinr_and_rates(&g, &f.w, &f.noise);
        let thr: Vec<f64> = r0.rates.iter().map(|r| r - 1e-3).collect();
        let c = ctx(&f, &thr, Architecture::Sfim);
        let mut s = MorphOptState::new(vec![0.0; 27], 2, &f.params);
        run_morph(&c, &mut s, 5, 0.0).unwrap();
        let r = evaluate(&f.layout, &s.y, &f.geo, &f.phases, &f.w, &f.noise).unwrap();
        assert!(r.max_violation(&thr) <= f.params.tol_qos);
    }
}
