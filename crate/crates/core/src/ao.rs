//! Alternating optimization driver.
//!
//! One outer iteration visits the morphing vector, the precoder and then
//! every layer of meta-atom responses in order. A block result is kept only
//! if the sum rate does not drop and the worst QoS violation does not grow
//! beyond the morphing tolerance, so the recorded trace never decreases.

use std::time::Instant;

use log::{debug, info};

use crate::bf_opt::run_bf_opt;
use crate::channel::{build_stack, cascade, ChannelStack, PhaseStack, Precoder};
use crate::error::Result;
use crate::geometry::{build_constraints, Architecture, ConstraintSystem, Layout, MorphState};
use crate::metrics::{augmented_objective, evaluate, sinr_and_rates, RateReport};
use crate::morph_opt::{run_morph, MorphContext, MorphOptState};
use crate::phase_opt::{build_layer_surrogate, optimize_layer_continuous, optimize_layer_discrete};
use crate::sca::BarrierOptions;
use crate::scenario::{init_state, InitialState, PhaseMode, ScenarioConfig, UserGeometry};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    Converged,
    MaxIterations,
}

/// State after an outer iteration (iteration 0 is the starting point).
#[derive(Clone, Debug, PartialEq)]
pub struct AoIterate {
    pub iteration: usize,
    pub r_sum: f64,
    pub r_aug: f64,
    pub rates: Vec<f64>,
    pub max_violation: f64,
    pub omega: f64,
    pub morph_steps: usize,
    pub rejected_blocks: usize,
    /// Milliseconds since the start of the run.
    pub wall_ms: f64,
}

#[derive(Clone, Debug)]
pub struct AoOutcome {
    pub morph: MorphState,
    pub phases: PhaseStack,
    pub precoder: Precoder,
    pub thresholds: Vec<f64>,
    pub report: RateReport,
    pub trace: Vec<AoIterate>,
    pub termination: Termination,
}

impl AoOutcome {
    pub fn iterations(&self) -> usize {
        self.trace.len().saturating_sub(1)
    }
}

struct Current {
    y: Vec<f64>,
    phases: PhaseStack,
    w: Precoder,
    report: RateReport,
}

fn keeps(prev: &RateReport, cand: &RateReport, thresholds: &[f64], tol: f64) -> bool {
    cand.r_sum >= prev.r_sum && cand.max_violation(thresholds) <= tol.max(prev.max_violation(thresholds))
}

/// Runs the optimizer from the standard starting point for `mode`.
pub fn run_ao(cfg: &ScenarioConfig, geometry: &UserGeometry, mode: Architecture) -> Result<AoOutcome> {
    cfg.validate()?;
    let layout = Layout::new(cfg)?;
    let constraints = build_constraints(&layout);
    let init = init_state(cfg, &layout, geometry, mode)?;
    run_ao_from(cfg, &layout, &constraints, geometry, mode, init)
}

/// Runs the optimizer from a caller-supplied starting point.
pub fn run_ao_from(
    cfg: &ScenarioConfig,
    layout: &Layout,
    constraints: &ConstraintSystem,
    geometry: &UserGeometry,
    mode: Architecture,
    init: InitialState,
) -> Result<AoOutcome> {
    let noise = cfg.noise_vars();
    let thresholds = init.thresholds.clone();
    let solver = &cfg.solver;
    let p_max = cfg.system.power_budget;
    let phase_opts = BarrierOptions {
        gap: solver.phase.barrier_gap,
        ..BarrierOptions::default()
    };
    let tol_qos = solver.morph.tol_qos;
    let clock = Instant::now();

    let report = evaluate(layout, &init.morph.y, geometry, &init.phases, &init.precoder, &noise)?;
    let mut cur = Current {
        y: init.morph.y.clone(),
        phases: init.phases,
        w: init.precoder,
        report,
    };
    let mut morph_state = MorphOptState::new(cur.y.clone(), thresholds.len(), &solver.morph);
    let row = |iteration, report: &RateReport, state: &MorphOptState, morph_steps, rejected_blocks| AoIterate {
        iteration,
        r_sum: report.r_sum,
        r_aug: augmented_objective(report, &thresholds, &state.mu, state.omega),
        rates: report.rates.clone(),
        max_violation: report.max_violation(&thresholds),
        omega: state.omega,
        morph_steps,
        rejected_blocks,
        wall_ms: clock.elapsed().as_secs_f64() * 1e3,
    };
    let mut trace = vec![row(0, &cur.report, &morph_state, 0, 0)];
    let mut termination = Termination::MaxIterations;
    let mut stack: ChannelStack = build_stack(layout, &cur.y, geometry)?;

    for iteration in 1..=solver.ao.max_outer {
        let start_rate = cur.report.r_sum;
        let mut rejected = 0;
        let mut morph_steps = 0;

        if mode != Architecture::Rsim {
            morph_state.y = cur.y.clone();
            let ctx = MorphContext {
                layout,
                constraints,
                geometry,
                phases: &cur.phases,
                precoder: &cur.w,
                noise: &noise,
                thresholds: &thresholds,
                mode,
                params: &solver.morph,
            };
            let steps = run_morph(
                &ctx,
                &mut morph_state,
                solver.morph.max_steps,
                solver.morph.step_tolerance,
            )?;
            morph_steps = steps.len();
            if morph_steps > 0 {
                let rep = evaluate(layout, &morph_state.y, geometry, &cur.phases, &cur.w, &noise)?;
                if keeps(&cur.report, &rep, &thresholds, tol_qos) {
                    cur.y = morph_state.y.clone();
                    cur.report = rep;
                    stack = build_stack(layout, &cur.y, geometry)?;
                } else {
                    rejected += 1;
                }
            }
        }

        let g = cascade(&stack, &cur.phases)?;
        let bf = run_bf_opt(&cur.w, &g, &noise, &thresholds, p_max, &solver.beamformer);
        let rep = sinr_and_rates(&g, &bf.w, &noise);
        if keeps(&cur.report, &rep, &thresholds, tol_qos) {
            cur.w = bf.w;
            cur.report = rep;
        } else {
            rejected += 1;
        }

        for layer in 0..layout.num_layers() {
            let sur = build_layer_surrogate(&stack, &cur.phases, &cur.w, layer)?;
            let mut next = cur.phases.clone();
            match solver.phase.mode {
                PhaseMode::Discrete => {
                    let na = next.num_atoms;
                    let start: Vec<usize> = match cur.phases.codes() {
                        Some(c) => c[layer * na..(layer + 1) * na].to_vec(),
                        None => cur.phases.layer(layer).iter().map(|v| next.quant.nearest(*v)).collect(),
                    };
                    let out = optimize_layer_discrete(
                        &sur,
                        &start,
                        &cur.phases.quant,
                        &thresholds,
                        &noise,
                        solver.phase.max_passes,
                    );
                    for (n, code) in out.codes.into_iter().enumerate() {
                        next.set_code(layer, n, code);
                    }
                }
                PhaseMode::Continuous => {
                    let out = optimize_layer_continuous(
                        &sur,
                        cur.phases.layer(layer),
                        &cur.phases.quant,
                        &thresholds,
                        &noise,
                        solver.phase.max_passes,
                        solver.phase.continuous_rounds,
                        &phase_opts,
                    );
                    for (n, v) in out.phi.into_iter().enumerate() {
                        next.set_value(layer, n, v);
                    }
                }
            }
            let rep = sinr_and_rates(&cascade(&stack, &next)?, &cur.w, &noise);
            if keeps(&cur.report, &rep, &thresholds, tol_qos) {
                cur.phases = next;
                cur.report = rep;
            } else {
                rejected += 1;
            }
        }

        let entry = row(iteration, &cur.report, &morph_state, morph_steps, rejected);
        debug!(
            "{mode} iteration {iteration}: R_sum {:.6} ({morph_steps} morph steps)",
            entry.r_sum
        );
        trace.push(entry);
        if (cur.report.r_sum - start_rate).abs() <= solver.ao.tolerance {
            termination = Termination::Converged;
            break;
        }
    }
    info!(
        "{mode}: R_sum {:.4} after {} iterations ({termination:?})",
        cur.report.r_sum,
        trace.len() - 1
    );
    let mut morph = MorphState::zeros(layout.num_atoms(), layout.num_layers(), mode);
    morph.y = cur.y;
    Ok(AoOutcome {
        morph,
        phases: cur.phases,
        precoder: cur.w,
        thresholds,
        report: cur.report,
        trace,
        termination,
    })
}
