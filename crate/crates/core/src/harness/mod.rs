//! Monte-Carlo sweeps, convergence traces and flexibility-gain tables,
//! written as versioned CSV.
//!
//! Realization `r` always uses the user geometry drawn from stream `r` of
//! the base seed, so every mode and every swept value sees the same
//! channels.

mod exec;

use std::io::Write;

use log::warn;
use serde::Serialize;

pub use exec::{ordered_map, Execution};

use crate::ao::run_ao;
use crate::error::{Error, Result};
use crate::geometry::{Architecture, Layout};
use crate::perturbation::{random_phases, SisoLink};
use crate::scenario::{dbm_to_watt, sample_scenario_stream, PhaseMode, ScenarioConfig};

pub const CSV_VERSION: &str = "flexsim-csv v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SweepVar {
    /// Values in wavelengths.
    MorphRange,
    /// Total stack thickness is held at the base value.
    NumLayers,
    /// Must be perfect squares; the grid stays square.
    AtomsPerLayer,
    PowerBudgetDbm,
    QuantBits,
    /// Fixed number of outer iterations (no early stop).
    Iterations,
}

impl SweepVar {
    pub const ALL: [SweepVar; 6] = [
        SweepVar::MorphRange,
        SweepVar::NumLayers,
        SweepVar::AtomsPerLayer,
        SweepVar::PowerBudgetDbm,
        SweepVar::QuantBits,
        SweepVar::Iterations,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepVar::MorphRange => "morph_range",
            SweepVar::NumLayers => "num_layers",
            SweepVar::AtomsPerLayer => "atoms_per_layer",
            SweepVar::PowerBudgetDbm => "power_budget_dbm",
            SweepVar::QuantBits => "quant_bits",
            SweepVar::Iterations => "iterations",
        }
    }
}

impl std::fmt::Display for SweepVar {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for SweepVar {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SweepVar::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown sweep variable '{s}'")))
    }
}

fn as_count(var: SweepVar, value: f64) -> Result<usize> {
    if value >= 0.0 && value.fract() == 0.0 && value <= u32::MAX as f64 {
        Ok(value as usize)
    } else {
        Err(Error::InvalidConfig(format!(
            "{var} needs a non-negative integer, got {value}"
        )))
    }
}

/// Copy of `base` with the swept variable set to `value`.
pub fn apply_sweep_value(base: &ScenarioConfig, var: SweepVar, value: f64) -> Result<ScenarioConfig> {
    let mut cfg = base.clone();
    match var {
        SweepVar::MorphRange => cfg.geometry.morph_range = value * base.wavelength(),
        SweepVar::NumLayers => {
            let layers = as_count(var, value)?;
            let thickness: f64 = base.nominal_gaps().iter().sum();
            cfg.system.num_layers = layers;
            cfg.geometry.nominal_gaps = None;
            cfg.geometry.nominal_gap = thickness / layers.max(1) as f64;
        }
        SweepVar::AtomsPerLayer => {
            let atoms = as_count(var, value)?;
            let side = (atoms as f64).sqrt().round() as usize;
            if side * side != atoms {
                return Err(Error::InvalidConfig(format!(
                    "atoms_per_layer {atoms} is not a perfect square"
                )));
            }
            cfg.system.atoms_per_layer = atoms;
            cfg.system.atoms_per_row = side;
        }
        SweepVar::PowerBudgetDbm => cfg.system.power_budget = dbm_to_watt(value),
        SweepVar::QuantBits => cfg.system.quant_bits = as_count(var, value)? as u32,
        SweepVar::Iterations => {
            cfg.solver.ao.max_outer = as_count(var, value)?;
            cfg.solver.ao.tolerance = -1.0;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Clone, Debug)]
pub struct SweepSpec {
    pub var: SweepVar,
    pub values: Vec<f64>,
    pub modes: Vec<Architecture>,
    pub phase_mode: PhaseMode,
    pub num_realizations: usize,
    pub base: ScenarioConfig,
    /// Record wall-clock times (otherwise written as 0 so output is
    /// byte-reproducible).
    pub timing: bool,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::InvalidConfig("sweep needs at least one value".into()));
        }
        if self
            .values
            .iter()
            .enumerate()
            .any(|(i, v)| self.values[..i].contains(v))
        {
            return Err(Error::InvalidConfig("sweep values must be distinct".into()));
        }
        if self.modes.is_empty() {
            return Err(Error::InvalidConfig("sweep needs at least one mode".into()));
        }
        if self.num_realizations == 0 {
            return Err(Error::InvalidConfig("sweep needs at least one realization".into()));
        }
        self.base.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub sweep_var: String,
    pub value: f64,
    pub mode: String,
    pub phase_mode: String,
    /// Realization index, or `mean` on summary rows.
    pub realization: String,
    pub r_sum: Option<f64>,
    pub r_sum_std: Option<f64>,
    pub iterations: Option<usize>,
    pub wall_ms: f64,
    pub status: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub var: SweepVar,
    /// Data rows in (value, mode, realization) order, then summary rows.
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    fn data(&self, value: f64, mode: Architecture) -> impl Iterator<Item = &SweepRow> {
        let name = mode.to_string();
        self.rows
            .iter()
            .filter(move |r| r.value == value && r.mode == name && r.realization != "mean")
    }

    /// Final sum rates of the successful runs, by realization.
    pub fn rates(&self, value: f64, mode: Architecture) -> Vec<(usize, f64)> {
        self.data(value, mode)
            .filter_map(|r| Some((r.realization.parse().ok()?, r.r_sum?)))
            .collect()
    }

    pub fn mean(&self, value: f64, mode: Architecture) -> Option<f64> {
        let rates = self.rates(value, mode);
        (!rates.is_empty()).then(|| rates.iter().map(|(_, r)| r).sum::<f64>() / rates.len() as f64)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_versioned(out, "sweep", &self.rows)
    }
}

fn write_versioned<W: Write, T: Serialize>(mut out: W, kind: &str, rows: &[T]) -> Result<()> {
    writeln!(out, "# {CSV_VERSION} {kind}")?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    // Header written explicitly so empty tables still carry it.
    let header = headers_of(kind);
    w.write_record(header)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

fn headers_of(kind: &str) -> &'static [&'static str] {
    match kind {
        "sweep" => &[
            "sweep_var",
            "value",
            "mode",
            "phase_mode",
            "realization",
            "r_sum",
            "r_sum_std",
            "iterations",
            "wall_ms",
            "status",
        ],
        "convergence" => &["mode", "phase_mode", "iteration", "r_sum"],
        "morph" => &["mode", "phase_mode", "layer", "atom", "row", "col", "y_lambda"],
        "perturbation" => &[
            "realization",
            "morph_range_lambda",
            "predicted_gain",
            "actual_gain",
            "rel_err",
            "g_sfim",
            "g_dsim",
            "actual_gain_dsim",
        ],
        _ => unreachable!("unknown table kind"),
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

pub fn run_sweep(spec: &SweepSpec) -> Result<SweepResult> {
    run_sweep_with(spec, Execution::Parallel)
}

pub fn run_sweep_with(spec: &SweepSpec, exec: Execution) -> Result<SweepResult> {
    spec.validate()?;
    let mut base = spec.base.clone();
    base.solver.phase.mode = spec.phase_mode;
    let configs = spec
        .values
        .iter()
        .map(|&v| apply_sweep_value(&base, spec.var, v))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, Architecture, usize)> = (0..spec.values.len())
        .flat_map(|vi| {
            spec.modes
                .iter()
                .flat_map(move |&m| (0..spec.num_realizations).map(move |r| (vi, m, r)))
        })
        .collect();
    let rows = ordered_map(&jobs, exec, |&(vi, mode, r)| {
        let cfg = &configs[vi];
        let geometry = sample_scenario_stream(cfg, cfg.rng_seed, r as u64);
        let clock = std::time::Instant::now();
        let outcome = run_ao(cfg, &geometry, mode);
        let wall_ms = if spec.timing {
            clock.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        };
        let mut row = SweepRow {
            sweep_var: spec.var.to_string(),
            value: spec.values[vi],
            mode: mode.to_string(),
            phase_mode: spec.phase_mode.to_string(),
            realization: r.to_string(),
            r_sum: None,
            r_sum_std: None,
            iterations: None,
            wall_ms,
            status: "ok".into(),
        };
        match outcome {
            Ok(out) => {
                row.r_sum = Some(out.report.r_sum);
                row.iterations = Some(out.iterations());
            }
            Err(e) => {
                warn!("{} = {}, {mode}, realization {r}: {e}", spec.var, spec.values[vi]);
                row.status = format!("error: {e}");
            }
        }
        row
    });

    let mut summary = Vec::new();
    for &value in &spec.values {
        for &mode in &spec.modes {
            let group: Vec<&SweepRow> = rows
                .iter()
                .filter(|r| r.value == value && r.mode == mode.to_string())
                .collect();
            let ok: Vec<f64> = group.iter().filter_map(|r| r.r_sum).collect();
            let (mean, std) = match ok.is_empty() {
                true => (None, None),
                false => {
                    let (m, s) = mean_std(&ok);
                    (Some(m), Some(s))
                }
            };
            summary.push(SweepRow {
                sweep_var: spec.var.to_string(),
                value,
                mode: mode.to_string(),
                phase_mode: spec.phase_mode.to_string(),
                realization: "mean".into(),
                r_sum: mean,
                r_sum_std: std,
                iterations: None,
                wall_ms: group.iter().map(|r| r.wall_ms).sum(),
                status: format!("ok {}/{}", ok.len(), group.len()),
            });
        }
    }
    let mut all = rows;
    all.extend(summary);
    Ok(SweepResult {
        var: spec.var,
        rows: all,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub mode: String,
    pub phase_mode: String,
    pub iteration: usize,
    pub r_sum: f64,
}

/// Per-iteration sum-rate traces of one realization for each mode and
/// phase mode. Requesting zero iterations yields an empty table.
pub fn run_convergence(
    cfg: &ScenarioConfig,
    modes: &[Architecture],
    phase_modes: &[PhaseMode],
    realization: u64,
    exec: Execution,
) -> Result<Vec<ConvergenceRow>> {
    Ok(run_convergence_with_morph(cfg, modes, phase_modes, realization, exec)?.0)
}

/// Final displacement of one meta-atom after a convergence run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MorphRow {
    pub mode: String,
    pub phase_mode: String,
    pub layer: usize,
    pub atom: usize,
    pub row: usize,
    pub col: usize,
    pub y_lambda: f64,
}

/// Like [`run_convergence`], also returning the optimized morphing of
/// every run.
pub fn run_convergence_with_morph(
    cfg: &ScenarioConfig,
    modes: &[Architecture],
    phase_modes: &[PhaseMode],
    realization: u64,
    exec: Execution,
) -> Result<(Vec<ConvergenceRow>, Vec<MorphRow>)> {
    cfg.validate()?;
    if cfg.solver.ao.max_outer == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    let lambda = cfg.wavelength();
    let per_row = cfg.system.atoms_per_row;
    let geometry = sample_scenario_stream(cfg, cfg.rng_seed, realization);
    let jobs: Vec<(PhaseMode, Architecture)> = phase_modes
        .iter()
        .flat_map(|&p| modes.iter().map(move |&m| (p, m)))
        .collect();
    let outcomes = ordered_map(&jobs, exec, |&(phase, mode)| {
        let mut c = cfg.clone();
        c.solver.phase.mode = phase;
        run_ao(&c, &geometry, mode)
    });
    let mut traces = Vec::new();
    let mut morph = Vec::new();
    for (&(phase, mode), out) in jobs.iter().zip(outcomes) {
        let out = out?;
        traces.extend(out.trace.iter().map(|row| ConvergenceRow {
            mode: mode.to_string(),
            phase_mode: phase.to_string(),
            iteration: row.iteration,
            r_sum: row.r_sum,
        }));
        let na = out.morph.num_atoms;
        morph.extend(out.morph.y.iter().enumerate().map(|(i, &y)| MorphRow {
            mode: mode.to_string(),
            phase_mode: phase.to_string(),
            layer: i / na,
            atom: i % na,
            row: (i % na) / per_row,
            col: (i % na) % per_row,
            y_lambda: y / lambda,
        }));
    }
    Ok((traces, morph))
}

pub fn write_convergence_csv<W: Write>(rows: &[ConvergenceRow], out: W) -> Result<()> {
    write_versioned(out, "convergence", rows)
}

pub fn write_morph_csv<W: Write>(rows: &[MorphRow], out: W) -> Result<()> {
    write_versioned(out, "morph", rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PerturbRow {
    pub realization: usize,
    pub morph_range_lambda: f64,
    /// First-order received-power gain, in watts.
    pub predicted_gain: f64,
    pub actual_gain: f64,
    pub rel_err: f64,
    pub g_sfim: f64,
    pub g_dsim: f64,
    pub actual_gain_dsim: f64,
}

/// Flexibility gains on single-antenna, single-user links with random
/// responses. `ranges` are in wavelengths.
pub fn run_perturbation_sweep(
    cfg_siso: &ScenarioConfig,
    ranges: &[f64],
    num_realizations: usize,
    exec: Execution,
) -> Result<Vec<PerturbRow>> {
    cfg_siso.validate()?;
    let layout = Layout::new(cfg_siso)?;
    let lambda = layout.lambda;
    let meters: Vec<f64> = ranges.iter().map(|r| r * lambda).collect();
    let realizations: Vec<usize> = (0..num_realizations).collect();
    let tables = ordered_map(&realizations, exec, |&r| -> Result<Vec<PerturbRow>> {
        let geometry = sample_scenario_stream(cfg_siso, cfg_siso.rng_seed, r as u64);
        let phases = random_phases(
            layout.num_atoms(),
            layout.num_layers(),
            cfg_siso.quant_set(),
            cfg_siso.rng_seed,
            r as u64,
        );
        let link = SisoLink::new(&layout, &geometry, &phases, cfg_siso.system.power_budget)?;
        let report = link.perturb_gains(0.0)?;
        let rows = link.first_order_validate(&report, &meters)?;
        Ok(rows
            .into_iter()
            .zip(ranges)
            .map(|(row, &lam)| PerturbRow {
                realization: r,
                morph_range_lambda: lam,
                predicted_gain: row.predicted_sfim,
                actual_gain: row.actual_sfim,
                rel_err: row.rel_err_sfim,
                g_sfim: row.predicted_sfim,
                g_dsim: row.predicted_dsim,
                actual_gain_dsim: row.actual_dsim,
            })
            .collect())
    });
    let mut out = Vec::new();
    for t in tables {
        out.extend(t?);
    }
    Ok(out)
}

pub fn write_perturbation_csv<W: Write>(rows: &[PerturbRow], out: W) -> Result<()> {
    write_versioned(out, "perturbation", rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perturbation::siso_config;

    fn tiny() -> ScenarioConfig {
        let mut cfg = ScenarioConfig::default();
        cfg.system.num_tx_antennas = 2;
        cfg.system.num_layers = 2;
        cfg.system.atoms_per_layer = 4;
        cfg.system.atoms_per_row = 2;
        cfg.system.num_users = 2;
        cfg.solver.ao.max_outer = 3;
        cfg
    }

    fn spec(values: Vec<f64>, modes: Vec<Architecture>, realizations: usize) -> SweepSpec {
        SweepSpec {
            var: SweepVar::MorphRange,
            values,
            modes,
            phase_mode: PhaseMode::Discrete,
            num_realizations: realizations,
            base: tiny(),
            timing: false,
        }
    }

    #[test]
    fn one_of_each_gives_two_rows() {
        let res = run_sweep(&spec(vec![0.5], vec![Architecture::Sfim], 1)).unwrap();
        assert_eq!(res.rows.len(), 2);
        assert_eq!(res.rows[1].realization, "mean");
        assert_eq!(res.rows[1].r_sum, res.rows[0].r_sum);
        assert_eq!(res.rows[1].r_sum_std, Some(0.0));
    }

    #[test]
    fn csv_bytes_reproducible() {
        let s = spec(vec![0.25, 0.5], vec![Architecture::Rsim, Architecture::Dsim], 2);
        let mut a = Vec::new();
        let mut b = Vec::new();
        run_sweep(&s).unwrap().write_csv(&mut a).unwrap();
        run_sweep_with(&s, Execution::Sequential)
            .unwrap()
            .write_csv(&mut b)
            .unwrap();
        assert_eq!(a, b);
        let text = String::from_utf8(a).unwrap();
        assert!(text.starts_with("# flexsim-csv v1 sweep\nsweep_var,value,mode,"));
        assert_eq!(text.lines().count(), 2 + 8 + 4);
        assert!(!text.contains('\r'));
    }

    #[test]
    fn paired_realizations_share_geometry() {
        let res = run_sweep(&spec(vec![0.0], vec![Architecture::Rsim, Architecture::Sfim], 2)).unwrap();
        // With no morphing range every mode reduces to the rigid stack.
        assert_eq!(res.rates(0.0, Architecture::Rsim), res.rates(0.0, Architecture::Sfim));
    }

    #[test]
    fn sweep_values_applied() {
        let base = ScenarioConfig::default();
        let l4 = apply_sweep_value(&base, SweepVar::NumLayers, 4.0).unwrap();
        let total: f64 = l4.nominal_gaps().iter().sum();
        assert!((total - 36.0 * base.wavelength()).abs() < 1e-12);
        assert_eq!(l4.nominal_gaps().len(), 4);
        let n16 = apply_sweep_value(&base, SweepVar::AtomsPerLayer, 16.0).unwrap();
        assert_eq!(n16.system.atoms_per_row, 4);
        assert!(apply_sweep_value(&base, SweepVar::AtomsPerLayer, 20.0).is_err());
        assert!(apply_sweep_value(&base, SweepVar::NumLayers, 2.5).is_err());
        let p = apply_sweep_value(&base, SweepVar::PowerBudgetDbm, 30.0).unwrap();
        assert!((p.system.power_budget - 1.0).abs() < 1e-12);
        assert_eq!("quant_bits".parse::<SweepVar>().unwrap(), SweepVar::QuantBits);
        assert!("bogus".parse::<SweepVar>().is_err());
    }

    #[test]
    fn fixed_iteration_count() {
        let mut s = spec(vec![2.0], vec![Architecture::Hsim], 1);
        s.var = SweepVar::Iterations;
        let res = run_sweep(&s).unwrap();
        assert_eq!(res.rows[0].iterations, Some(2));
    }

    #[test]
    fn failed_runs_are_recorded() {
        let mut s = spec(vec![0.5], vec![Architecture::Rsim], 1);
        // More users than antennas: zero-forcing start is impossible.
        s.base.system.num_users = 3;
        let res = run_sweep(&s).unwrap();
        assert!(res.rows[0].status.starts_with("error"));
        assert_eq!(res.rows[0].r_sum, None);
        assert_eq!(res.rows[1].status, "ok 0/1");
    }

    #[test]
    fn convergence_traces() {
        let rows = run_convergence(
            &tiny(),
            &[Architecture::Rsim, Architecture::Sfim],
            &[PhaseMode::Discrete],
            0,
            Execution::Parallel,
        )
        .unwrap();
        assert_eq!(rows[0].iteration, 0);
        for pair in rows.windows(2) {
            if pair[0].mode == pair[1].mode {
                assert!(pair[1].r_sum >= pair[0].r_sum - 1e-8);
            }
        }
        let (_, morph) = run_convergence_with_morph(
            &tiny(),
            &[Architecture::Dsim],
            &[PhaseMode::Discrete],
            0,
            Execution::Sequential,
        )
        .unwrap();
        assert_eq!(morph.len(), 2 * 4);
        assert_eq!(
            (morph[5].layer, morph[5].atom, morph[5].row, morph[5].col),
            (1, 1, 0, 1)
        );
        assert!(morph[..4].iter().all(|r| r.y_lambda == morph[0].y_lambda));
        let mut zero = tiny();
        zero.solver.ao.max_outer = 0;
        let rows = run_convergence(
            &zero,
            &[Architecture::Rsim],
            &[PhaseMode::Discrete],
            0,
            Execution::Sequential,
        )
        .unwrap();
        assert!(rows.is_empty());
        let mut buf = Vec::new();
        write_convergence_csv(&rows, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "# flexsim-csv v1 convergence\nmode,phase_mode,iteration,r_sum\n"
        );
    }

    #[test]
    fn perturbation_rows() {
        let mut base = ScenarioConfig::default();
        base.system.atoms_per_layer = 4;
        base.system.atoms_per_row = 2;
        let cfg = siso_config(&base, 2);
        let rows = run_perturbation_sweep(&cfg, &[0.01, 0.02], 3, Execution::Parallel).unwrap();
        assert_eq!(rows.len(), 6);
        for pair in rows.chunks(2) {
            assert!(pair[0].g_dsim <= pair[0].g_sfim);
            assert_eq!(pair[1].predicted_gain, 2.0 * pair[0].predicted_gain);
        }
    }
}
