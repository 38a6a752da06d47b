//! Oracle suites: each compares a production code path against an
//! independent reference on a batch of seeded instances.

use std::fmt;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bf_opt::run_bf_opt;
use crate::channel::{build_stack, cascade, Precoder, C64};
use crate::error::Result;
use crate::geometry::{project_feasible, Architecture, ConstraintSystem, Layout};
use crate::gradients::{fd_oracle, grad_aug, relative_error, GradWorkspace};
use crate::metrics::{augmented_objective, evaluate};
use crate::oracle::{constraint_rows, exhaustive_layer_search, matched_filter_rate, qp_projection_oracle};
use crate::perturbation::{random_phases, siso_config, SisoLink};
use crate::phase_opt::{build_layer_surrogate, optimize_layer_discrete};
use crate::scenario::{init_state, sample_scenario, BeamformerParams, ScenarioConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub cases: usize,
    pub failures: usize,
    /// Largest error seen across cases (the quantity compared to `tolerance`).
    pub worst: f64,
    pub tolerance: f64,
}

impl SuiteReport {
    fn new(name: &'static str, tolerance: f64) -> Self {
        SuiteReport {
            name,
            cases: 0,
            failures: 0,
            worst: 0.0,
            tolerance,
        }
    }

    fn record(&mut self, err: f64) {
        self.cases += 1;
        // NaN counts as a failure.
        if !(err <= self.tolerance) {
            self.failures += 1;
        }
        if err.is_nan() || err > self.worst {
            self.worst = err;
        }
    }

    pub fn passed(&self) -> bool {
        self.cases > 0 && self.failures == 0
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: {}/{} cases within {:e} (worst {:.3e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.cases - self.failures,
            self.cases,
            self.tolerance,
            self.worst
        )
    }
}

fn small_config(m: usize, l: usize, n: usize, nx: usize, k: usize) -> ScenarioConfig {
    let mut cfg = ScenarioConfig::default();
    cfg.system.num_tx_antennas = m;
    cfg.system.num_layers = l;
    cfg.system.atoms_per_layer = n;
    cfg.system.atoms_per_row = nx;
    cfg.system.num_users = k;
    cfg
}

fn random_precoder(rng: &mut ChaCha8Rng, m: usize, k: usize, power: f64) -> Precoder {
    let w = DMatrix::from_fn(m, k, |_, _| {
        C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
    });
    let scale = (power / w.norm_squared()).sqrt();
    Precoder(w * C64::new(scale, 0.0))
}

/// Analytic morphing gradients of the sum rate and of the penalized
/// objective against central differences with step `1e-6 λ`.
pub fn gradient_suite(seeds: u64) -> Result<[SuiteReport; 2]> {
    let cfg = small_config(2, 3, 4, 2, 2);
    let layout = Layout::new(&cfg)?;
    let lambda = layout.lambda;
    let noise = cfg.noise_vars();
    let h = 1e-6 * lambda;
    let mut sum_rep = SuiteReport::new("gradient of sum rate vs finite differences", 1e-4);
    let mut aug_rep = SuiteReport::new("gradient of penalized objective vs finite differences", 1e-4);
    for seed in 0..seeds {
        let geo = sample_scenario(&cfg, seed);
        let phases = random_phases(4, 3, cfg.quant_set(), seed, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        let y: Vec<f64> = (0..12).map(|_| rng.random_range(-0.1..0.1) * lambda).collect();
        let w = random_precoder(&mut rng, 2, 2, cfg.system.power_budget);
        let ws = GradWorkspace::new(&layout, &y, &geo, &phases, &w)?;
        let report = evaluate(&layout, &y, &geo, &phases, &w, &noise)?;
        let rate = |yy: &[f64]| {
            evaluate(&layout, yy, &geo, &phases, &w, &noise)
                .map(|r| r.r_sum)
                .unwrap_or(f64::NAN)
        };

        let fd = fd_oracle(rate, &y, h);
        let floor = 1e-6 * fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        sum_rep.record(relative_error(&ws.grad_sum_rate(&noise), &fd, floor));

        // One user above and one below its threshold keeps the penalty active.
        let thresholds = [report.rates[0] + 0.2, (report.rates[1] - 0.1).max(0.0)];
        let mu = [0.0, 0.05];
        let omega = 0.5;
        let aug = |yy: &[f64]| {
            evaluate(&layout, yy, &geo, &phases, &w, &noise)
                .map(|r| augmented_objective(&r, &thresholds, &mu, omega))
                .unwrap_or(f64::NAN)
        };
        let fd = fd_oracle(aug, &y, h);
        let floor = 1e-6 * fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        aug_rep.record(relative_error(
            &grad_aug(&ws, &report, &thresholds, &mu, omega, &noise),
            &fd,
            floor,
        ));
    }
    Ok([sum_rep, aug_rep])
}

/// Random chain constraint system of 6 to 12 coordinates.
fn random_constraints(rng: &mut ChaCha8Rng) -> ConstraintSystem {
    let layers = rng.random_range(2..=4usize);
    let atoms = rng.random_range(6usize.div_ceil(layers)..=12 / layers);
    let bound = rng.random_range(0.5..1.5);
    let zeta = (0..layers * atoms)
        .map(|_| rng.random_range(-1.2..0.6) * bound)
        .collect();
    ConstraintSystem::new(atoms, layers, zeta, bound).expect("sized by construction")
}

/// Feasible-set projection against exhaustive active-set enumeration, plus
/// feasibility and idempotence of the projection.
pub fn projection_suite(instances: usize, seed: u64) -> Result<[SuiteReport; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vs_oracle = SuiteReport::new("projection vs active-set enumeration", 1e-6);
    let mut feasible = SuiteReport::new("projection feasibility", 1e-9);
    let mut idempotent = SuiteReport::new("projection idempotence", 1e-9);
    let mut attempts = 0;
    while vs_oracle.cases < instances {
        attempts += 1;
        assert!(
            attempts < 100 * instances,
            "instance generator keeps producing empty sets"
        );
        let cs = random_constraints(&mut rng);
        let point: Vec<f64> = (0..cs.dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (a, b) = constraint_rows(&cs);
        let reference = qp_projection_oracle(&point, &a, &b);
        let ours = project_feasible(&point, &cs);
        match (reference, ours) {
            (None, Err(_)) => continue,
            (Some(r), Ok(p)) => {
                let err = r.iter().zip(&p.y).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                vs_oracle.record(err);
                feasible.record(cs.max_violation(&p.y));
                let again = project_feasible(&p.y, &cs)?;
                idempotent.record(again.y.iter().zip(&p.y).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
            }
            // Disagreement on feasibility.
            _ => vs_oracle.record(f64::INFINITY),
        }
    }
    Ok([vs_oracle, feasible, idempotent])
}

/// Single-user precoder optimization against the matched-filter rate.
pub fn mrt_suite(seeds: u64) -> Result<SuiteReport> {
    let mut cfg = ScenarioConfig::default();
    cfg.system.num_users = 1;
    let layout = Layout::new(&cfg)?;
    let noise = cfg.noise_vars();
    let p = cfg.system.power_budget;
    let m = cfg.system.num_tx_antennas;
    let mut rep = SuiteReport::new("single-user precoder vs matched-filter rate", 1e-3);
    for seed in 0..seeds {
        let geo = sample_scenario(&cfg, seed);
        let phases = random_phases(layout.num_atoms(), layout.num_layers(), cfg.quant_set(), seed, 3);
        let g = cascade(
            &build_stack(&layout, &vec![0.0; layout.num_atoms() * layout.num_layers()], &geo)?,
            &phases,
        )?;
        let start = Precoder(DMatrix::from_element(m, 1, C64::new((p / m as f64).sqrt(), 0.0)));
        let out = run_bf_opt(&start, &g, &noise, &[0.0], p, &BeamformerParams::default());
        let optimum = matched_filter_rate(&g[0], p, noise[0]);
        let mut gap = optimum - out.report.r_sum;
        if out.w.power() > p * (1.0 + 1e-9) {
            gap = f64::INFINITY;
        }
        rep.record(gap.abs());
    }
    Ok(rep)
}

/// Discrete coordinate descent on one layer against exhaustive search over
/// all code vectors (N = 4 atoms, 2 levels, one layer, two users, no QoS
/// thresholds).
pub fn discrete_suite(seeds: u64) -> Result<SuiteReport> {
    let mut cfg = small_config(2, 1, 4, 2, 2);
    cfg.system.quant_bits = 1;
    let layout = Layout::new(&cfg)?;
    let noise = cfg.noise_vars();
    let mut rep = SuiteReport::new("discrete coordinate descent vs exhaustive search", 1e-9);
    for seed in 0..seeds {
        let geo = sample_scenario(&cfg, seed);
        let init = init_state(&cfg, &layout, &geo, Architecture::Rsim)?;
        let stack = build_stack(&layout, &init.morph.y, &geo)?;
        let sur = build_layer_surrogate(&stack, &init.phases, &init.precoder, 0)?;
        let quant = &init.phases.quant;
        let start = init.phases.codes().expect("initial responses are quantized").to_vec();
        let thresholds = [0.0; 2];
        let cd = optimize_layer_discrete(&sur, &start, quant, &thresholds, &noise, cfg.solver.phase.max_passes);
        let err = match exhaustive_layer_search(&sur, quant, &thresholds, &noise) {
            Some((_, best)) => (best.r_sum - cd.report.r_sum).abs(),
            None => f64::INFINITY,
        };
        rep.record(err);
    }
    Ok(rep)
}

/// Flexibility-gain checks on single-antenna, single-user links with
/// random responses: dominance of per-atom over per-layer morphing,
/// first-order accuracy at `0.05 λ`, and exact linearity of the prediction.
pub fn perturbation_suite(seeds: u64) -> Result<[SuiteReport; 3]> {
    let cfg = siso_config(&ScenarioConfig::default(), 4);
    let layout = Layout::new(&cfg)?;
    let lambda = layout.lambda;
    let mut dominance = SuiteReport::new("per-layer gain never exceeds per-atom gain", 0.0);
    let mut first_order = SuiteReport::new("first-order gain prediction at 0.05 wavelength", 0.1);
    let mut linear = SuiteReport::new("predicted gain linear in morphing range", 0.0);
    for seed in 0..seeds {
        let geo = sample_scenario(&cfg, seed);
        let phases = random_phases(layout.num_atoms(), layout.num_layers(), cfg.quant_set(), seed, 4);
        let link = SisoLink::new(&layout, &geo, &phases, cfg.system.power_budget)?;
        let rep = link.perturb_gains(0.05 * lambda)?;
        dominance.record((rep.g_dsim - rep.g_sfim).max(0.0));
        let rows = link.first_order_validate(&rep, &[0.05 * lambda])?;
        first_order.record(rows[0].rel_err_sfim);
        let half = link.perturb_gains(0.025 * lambda)?;
        linear.record(
            (2.0 * half.g_sfim - rep.g_sfim)
                .abs()
                .max((2.0 * half.g_dsim - rep.g_dsim).abs()),
        );
    }
    Ok([dominance, first_order, linear])
}

/// Every suite at its default size.
pub fn run_all() -> Result<Vec<SuiteReport>> {
    let mut out = Vec::new();
    out.extend(gradient_suite(10)?);
    out.extend(projection_suite(50, 7)?);
    out.push(mrt_suite(10)?);
    out.push(discrete_suite(10)?);
    out.extend(perturbation_suite(100)?);
    Ok(out)
}
