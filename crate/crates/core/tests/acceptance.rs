//! Acceptance suite. Runs every criterion at its stated tolerance and
//! prints one PASS/FAIL line each; exits non-zero if any criterion fails.
//!
//! Built with `harness = false`: the criteria share expensive Monte-Carlo
//! runs, so they are evaluated in one process in a fixed order.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use flexsim::ao::run_ao;
use flexsim::geometry::{build_constraints, Architecture, Layout};
use flexsim::harness::{
    run_convergence, run_perturbation_sweep, run_sweep_with, Execution, SweepResult, SweepSpec, SweepVar,
};
use flexsim::perturbation::siso_config;
use flexsim::scenario::{sample_scenario_stream, PhaseMode, ScenarioConfig};
use flexsim::validate::{self, SuiteReport};

const REALIZATIONS: usize = 20;

struct Line {
    id: &'static str,
    pass: bool,
    detail: String,
}

fn suites(id: &'static str, budget: Duration, run: impl FnOnce() -> flexsim::Result<Vec<SuiteReport>>) -> Line {
    let clock = Instant::now();
    let (pass, mut detail) = match run() {
        Ok(reports) => (
            reports.iter().all(SuiteReport::passed),
            reports.iter().map(|r| r.to_string()).collect::<Vec<_>>().join("; "),
        ),
        Err(e) => (false, format!("error: {e}")),
    };
    let elapsed = clock.elapsed();
    detail.push_str(&format!(
        "; {:.1}s (budget {}s)",
        elapsed.as_secs_f64(),
        budget.as_secs()
    ));
    Line {
        id,
        pass: pass && elapsed <= budget,
        detail,
    }
}

fn monotonicity() -> Line {
    let clock = Instant::now();
    let budget = Duration::from_secs(15 * 60);
    let mut runs = 0;
    let mut bad = Vec::new();
    for phase in [PhaseMode::Continuous, PhaseMode::Discrete] {
        let mut cfg = ScenarioConfig::default();
        cfg.solver.phase.mode = phase;
        let layout = Layout::new(&cfg).expect("default layout");
        let cs = build_constraints(&layout);
        for seed in 0..5u64 {
            let geo = sample_scenario_stream(&cfg, cfg.rng_seed, seed);
            for mode in Architecture::ALL {
                runs += 1;
                let out = match run_ao(&cfg, &geo, mode) {
                    Ok(o) => o,
                    Err(e) => {
                        bad.push(format!("{mode}/{phase}/{seed}: {e}"));
                        continue;
                    }
                };
                let drops = out.trace.windows(2).any(|p| p[1].r_sum < p[0].r_sum - 1e-8);
                let ok = !drops
                    && out.report.max_violation(&out.thresholds) <= cfg.solver.morph.tol_qos
                    && out.precoder.power() <= cfg.system.power_budget * (1.0 + 1e-9)
                    && out.phases.modulus_violation() <= 1e-12
                    && cs.max_violation(&out.morph.y) <= 1e-9
                    && out.morph.mode_violation() <= 1e-15
                    && (phase == PhaseMode::Continuous || out.phases.in_quant_set());
                if !ok {
                    bad.push(format!("{mode}/{phase}/{seed}"));
                }
            }
        }
    }
    let elapsed = clock.elapsed();
    Line {
        id: "criterion 5 AO monotonicity and feasibility",
        pass: bad.is_empty() && elapsed <= budget,
        detail: format!(
            "{}/{runs} runs clean{}; {:.1}s (budget {}s)",
            runs - bad.len(),
            if bad.is_empty() {
                String::new()
            } else {
                format!(" (failed: {})", bad.join(", "))
            },
            elapsed.as_secs_f64(),
            budget.as_secs()
        ),
    }
}

fn sweep(var: SweepVar, values: &[f64], modes: &[Architecture], phase_mode: PhaseMode) -> SweepResult {
    let spec = SweepSpec {
        var,
        values: values.to_vec(),
        modes: modes.to_vec(),
        phase_mode,
        num_realizations: REALIZATIONS,
        base: ScenarioConfig::default(),
        timing: false,
    };
    run_sweep_with(&spec, Execution::Parallel).expect("valid sweep")
}

fn mean(res: &SweepResult, value: f64, mode: Architecture) -> f64 {
    match res.rates(value, mode).len() {
        REALIZATIONS => res.mean(value, mode).expect("non-empty"),
        _ => f64::NAN,
    }
}

fn trends(lines: &mut Vec<Line>, info: &mut Vec<String>) {
    use Architecture::*;
    let clock = Instant::now();
    let budget = Duration::from_secs(45 * 60);
    let base = ScenarioConfig::default();
    let bits = base.system.quant_bits as f64;
    let layers = base.system.num_layers as f64;

    let disc = sweep(
        SweepVar::QuantBits,
        &[1.0, 2.0, 3.0, 4.0],
        &[Dsim, Sfim],
        PhaseMode::Discrete,
    );
    let rigid = sweep(SweepVar::QuantBits, &[bits], &[Rsim, Hsim], PhaseMode::Discrete);
    let cont = sweep(SweepVar::QuantBits, &[bits], &[Dsim, Sfim], PhaseMode::Continuous);
    let deep = sweep(SweepVar::NumLayers, &[layers + 2.0], &[Rsim, Sfim], PhaseMode::Discrete);
    let shallow = sweep(SweepVar::NumLayers, &[layers - 2.0], &[Rsim, Sfim], PhaseMode::Discrete);
    let elapsed = clock.elapsed();
    let timing = format!("; sweeps {:.1}s (budget {}s)", elapsed.as_secs_f64(), budget.as_secs());
    let in_budget = elapsed <= budget;

    let at_default = |m| match m {
        Rsim | Hsim => mean(&rigid, bits, m),
        _ => mean(&disc, bits, m),
    };
    let [r, h, d, s] = [Rsim, Hsim, Dsim, Sfim].map(at_default);
    lines.push(Line {
        id: "criterion 7a mean sum-rate ordering SFIM >= DSIM >= HSIM >= RSIM",
        pass: s >= d && d >= h && h >= r && in_budget,
        detail: format!("SFIM {s:.4}, DSIM {d:.4}, HSIM {h:.4}, RSIM {r:.4}{timing}"),
    });

    let rsim_gain = mean(&deep, layers + 2.0, Rsim) - r;
    let sfim_gain = mean(&deep, layers + 2.0, Sfim) - s;
    lines.push(Line {
        id: "criterion 7b RSIM layer saturation",
        pass: rsim_gain < 0.5 * sfim_gain && in_budget,
        detail: format!(
            "L {layers}->{}: RSIM gain {rsim_gain:.4}, SFIM gain {sfim_gain:.4} (need RSIM < 0.5 x SFIM){timing}",
            layers + 2.0
        ),
    });

    let ratio = |m| mean(&disc, 4.0, m) / mean(&cont, bits, m);
    let (rs, rd) = (ratio(Sfim), ratio(Dsim));
    lines.push(Line {
        id: "criterion 7c 4-bit discrete reaches 85% of continuous",
        pass: rs >= 0.85 && rd >= 0.85 && in_budget,
        detail: format!("SFIM {:.1}%, DSIM {:.1}%{timing}", 100.0 * rs, 100.0 * rd),
    });

    let series = |m| [1.0, 2.0, 3.0, 4.0].map(|b| mean(&disc, b, m));
    let monotone = |v: &[f64; 4]| v.windows(2).all(|w| w[1] >= w[0]);
    let (ss, sd) = (series(Sfim), series(Dsim));
    lines.push(Line {
        id: "criterion 7d sum rate non-decreasing in quantization bits 1->4",
        pass: monotone(&ss) && monotone(&sd) && in_budget,
        detail: format!("SFIM {ss:.4?}, DSIM {sd:.4?}{timing}"),
    });

    let per_depth = [
        (
            layers - 2.0,
            mean(&shallow, layers - 2.0, Sfim),
            mean(&shallow, layers - 2.0, Rsim),
        ),
        (layers, s, r),
        (
            layers + 2.0,
            mean(&deep, layers + 2.0, Sfim),
            mean(&deep, layers + 2.0, Rsim),
        ),
    ];
    lines.push(Line {
        id: "layer sweep: SFIM mean above RSIM for L >= 4",
        pass: per_depth.iter().all(|(_, sf, rs)| sf > rs) && in_budget,
        detail: per_depth
            .iter()
            .map(|(l, sf, rs)| format!("L {l}: SFIM {sf:.4} vs RSIM {rs:.4}"))
            .collect::<Vec<_>>()
            .join(", "),
    });

    info.push(format!("SFIM - RSIM mean gap at L = {layers}: {:.3} bit/s/Hz", s - r));
    info.push(format!(
        "gain from L = {layers} to {}: RSIM {:.1}%, SFIM {:.1}%",
        layers + 2.0,
        100.0 * rsim_gain / r,
        100.0 * sfim_gain / s
    ));
    info.push(format!(
        "4-bit discrete over continuous: SFIM {:.1}%, DSIM {:.1}%",
        100.0 * rs,
        100.0 * rd
    ));
    info.push(format!(
        "continuous means: SFIM {:.4}, DSIM {:.4}",
        mean(&cont, bits, Sfim),
        mean(&cont, bits, Dsim)
    ));
}

fn perturbation_table() -> Line {
    let cfg = siso_config(&ScenarioConfig::default(), 4);
    let ranges = [0.01, 0.02, 0.05];
    match run_perturbation_sweep(&cfg, &ranges, 100, Execution::Parallel) {
        Ok(rows) => {
            let good = rows.iter().filter(|r| r.actual_gain >= 0.9 * r.predicted_gain).count();
            let bad = rows.len() - good;
            let worst = rows
                .iter()
                .map(|r| r.actual_gain / r.predicted_gain)
                .fold(f64::INFINITY, f64::min);
            Line {
                id: "perturbation table: actual >= 0.9 x predicted for range <= 0.05 wavelength",
                pass: bad == 0,
                detail: format!(
                    "{}/{} rows (lowest actual/predicted {worst:.3})",
                    rows.len() - bad,
                    rows.len()
                ),
            }
        }
        Err(e) => Line {
            id: "perturbation table: actual >= 0.9 x predicted for range <= 0.05 wavelength",
            pass: false,
            detail: format!("error: {e}"),
        },
    }
}

/// Iterations used by each trace of one realization (observed only).
fn plateaus(info: &mut Vec<String>) {
    let cfg = ScenarioConfig::default();
    let phases = [PhaseMode::Discrete, PhaseMode::Continuous];
    match run_convergence(&cfg, &Architecture::ALL, &phases, 0, Execution::Parallel) {
        Ok(rows) => {
            for phase in phases {
                let counts: Vec<String> = Architecture::ALL
                    .iter()
                    .map(|m| {
                        let n = rows
                            .iter()
                            .filter(|r| r.mode == m.to_string() && r.phase_mode == phase.to_string())
                            .count();
                        format!("{m} {}", n.saturating_sub(1))
                    })
                    .collect();
                info.push(format!("iterations to converge, {phase}: {}", counts.join(", ")));
            }
        }
        Err(e) => info.push(format!("convergence traces failed: {e}")),
    }
}

fn main() -> ExitCode {
    // `cargo test` passes harness flags such as `--nocapture`; filter
    // arguments are not supported, so a name filter simply skips the suite.
    if std::env::args().skip(1).any(|a| !a.starts_with('-')) {
        return ExitCode::SUCCESS;
    }
    let mut lines = vec![
        suites("criterion 1 gradient correctness", Duration::from_secs(60), || {
            Ok(validate::gradient_suite(10)?.to_vec())
        }),
        suites("criterion 2 projection correctness", Duration::from_secs(60), || {
            Ok(validate::projection_suite(50, 7)?.to_vec())
        }),
        suites(
            "criterion 3 single-user precoder oracle",
            Duration::from_secs(120),
            || Ok(vec![validate::mrt_suite(10)?]),
        ),
        suites(
            "criterion 4 discrete coordinate descent oracle",
            Duration::from_secs(120),
            || Ok(vec![validate::discrete_suite(10)?]),
        ),
        monotonicity(),
        suites("criterion 6 perturbation suite", Duration::from_secs(120), || {
            Ok(validate::perturbation_suite(100)?.to_vec())
        }),
    ];
    lines.push(perturbation_table());
    let mut info = Vec::new();
    trends(&mut lines, &mut info);
    plateaus(&mut info);

    let mut all = true;
    for l in &lines {
        all &= l.pass;
        println!("{} {}: {}", if l.pass { "PASS" } else { "FAIL" }, l.id, l.detail);
    }
    for i in &info {
        println!("INFO (measured, not asserted): {i}");
    }
    println!(
        "acceptance: {}/{} checks passed",
        lines.iter().filter(|l| l.pass).count(),
        lines.len()
    );
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
