//! Command-line front end: sweeps, convergence traces, flexibility-gain
//! tables and the oracle suites.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use flexsim::channel::{build_stack, dump_omega};
use flexsim::geometry::{Architecture, Layout};
use flexsim::harness::{
    run_convergence_with_morph, run_perturbation_sweep, run_sweep_with, write_convergence_csv, write_morph_csv,
    write_perturbation_csv, Execution, SweepSpec, SweepVar,
};
use flexsim::perturbation::siso_config;
use flexsim::scenario::{dbm_to_watt, sample_scenario_stream, PhaseMode, ScenarioConfig};
use flexsim::validate;
use flexsim::Result;

#[derive(Parser)]
#[command(
    name = "flexsim",
    version,
    about = "Flexible stacked metasurface downlink experiments"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML scenario file; flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed for user geometry and random responses.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output CSV path (stdout if omitted).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run jobs on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    /// Print the effective configuration as TOML to stderr.
    #[arg(long, global = true)]
    dump_config: bool,

    #[arg(long, global = true)]
    antennas: Option<usize>,
    #[arg(long, global = true)]
    layers: Option<usize>,
    #[arg(long, global = true)]
    atoms: Option<usize>,
    #[arg(long, global = true)]
    atoms_per_row: Option<usize>,
    #[arg(long, global = true)]
    users: Option<usize>,
    /// Carrier frequency in Hz.
    #[arg(long, global = true)]
    carrier_freq: Option<f64>,
    #[arg(long, global = true)]
    power_dbm: Option<f64>,
    #[arg(long, global = true)]
    noise_dbm: Option<f64>,
    #[arg(long, global = true)]
    quant_bits: Option<u32>,
    /// Morphing range in wavelengths.
    #[arg(long, global = true)]
    morph_range: Option<f64>,
    /// `discrete` or `continuous`.
    #[arg(long, global = true)]
    phase_mode: Option<PhaseMode>,
    #[arg(long, global = true)]
    max_outer: Option<usize>,
    /// Any other field by dotted path, e.g. `--set solver.morph.kappa=0.5`.
    #[arg(long = "set", global = true, value_name = "PATH=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Monte-Carlo sum-rate sweep over one parameter.
    Sweep {
        /// morph_range | num_layers | atoms_per_layer | power_budget_dbm | quant_bits | iterations
        #[arg(long)]
        var: SweepVar,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "RSIM,HSIM,DSIM,SFIM")]
        modes: Vec<Architecture>,
        #[arg(long, default_value_t = 20)]
        realizations: usize,
        /// Record wall-clock times instead of zeros.
        #[arg(long)]
        timing: bool,
    },
    /// Per-iteration sum rate of one realization.
    Converge {
        #[arg(long, value_delimiter = ',', default_value = "RSIM,HSIM,DSIM,SFIM")]
        modes: Vec<Architecture>,
        #[arg(long, value_delimiter = ',', default_value = "discrete,continuous")]
        phase_modes: Vec<PhaseMode>,
        #[arg(long, default_value_t = 0)]
        realization: u64,
        /// Also write the optimized displacement of every meta-atom here.
        #[arg(long)]
        morph_out: Option<PathBuf>,
        /// Also write the unmorphed diffraction matrices here.
        #[arg(long)]
        dump_omega: Option<PathBuf>,
    },
    /// First-order flexibility gains on single-user links.
    Perturb {
        /// Morphing ranges in wavelengths.
        #[arg(long, value_delimiter = ',', default_value = "0.01,0.02,0.05,0.1")]
        ranges: Vec<f64>,
        #[arg(long, default_value_t = 100)]
        realizations: usize,
    },
    /// Run the oracle suites and print one line per check.
    Validate,
}

fn build_config(c: &Common) -> Result<ScenarioConfig> {
    let mut cfg = match &c.config {
        Some(path) => ScenarioConfig::from_file(path)?,
        None => ScenarioConfig::default(),
    };
    if let Some(v) = c.seed {
        cfg.rng_seed = v;
    }
    let s = &mut cfg.system;
    if let Some(v) = c.antennas {
        s.num_tx_antennas = v;
    }
    if let Some(v) = c.layers {
        s.num_layers = v;
    }
    if let Some(v) = c.atoms {
        s.atoms_per_layer = v;
        // Square grid unless the row length is given.
        let side = (v as f64).sqrt().round() as usize;
        if side * side == v {
            s.atoms_per_row = side;
        }
    }
    if let Some(v) = c.atoms_per_row {
        s.atoms_per_row = v;
    }
    if let Some(v) = c.users {
        s.num_users = v;
    }
    if let Some(v) = c.power_dbm {
        s.power_budget = dbm_to_watt(v);
    }
    if let Some(v) = c.noise_dbm {
        s.noise_var = dbm_to_watt(v);
    }
    if let Some(v) = c.quant_bits {
        s.quant_bits = v;
    }
    if let Some(v) = c.carrier_freq {
        s.carrier_freq = v;
    }
    if let Some(v) = c.morph_range {
        cfg.geometry.morph_range = v * cfg.wavelength();
    }
    if let Some(v) = c.phase_mode {
        cfg.solver.phase.mode = v;
    }
    if let Some(v) = c.max_outer {
        cfg.solver.ao.max_outer = v;
    }
    for item in &c.overrides {
        let (path, value) = item
            .split_once('=')
            .ok_or_else(|| flexsim::Error::InvalidConfig(format!("--set expects PATH=VALUE, got `{item}`")))?;
        cfg.set_field(path.trim(), value.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn run(cli: Cli) -> Result<bool> {
    let cfg = build_config(&cli.common)?;
    if cli.common.dump_config {
        eprintln!("{}", cfg.to_toml_string());
    }
    let exec = if cli.common.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    match cli.command {
        Command::Sweep {
            var,
            values,
            modes,
            realizations,
            timing,
        } => {
            let spec = SweepSpec {
                var,
                values,
                modes,
                phase_mode: cfg.solver.phase.mode,
                num_realizations: realizations,
                base: cfg,
                timing,
            };
            let result = run_sweep_with(&spec, exec)?;
            result.write_csv(output(&cli.common.out)?)?;
        }
        Command::Converge {
            modes,
            phase_modes,
            realization,
            morph_out,
            dump_omega: omega_out,
        } => {
            if let Some(path) = omega_out {
                let layout = Layout::new(&cfg)?;
                let geometry = sample_scenario_stream(&cfg, cfg.rng_seed, realization);
                let zero = vec![0.0; layout.num_atoms() * layout.num_layers()];
                dump_omega(
                    &build_stack(&layout, &zero, &geometry)?,
                    BufWriter::new(File::create(path)?),
                )?;
            }
            let (rows, morph) = run_convergence_with_morph(&cfg, &modes, &phase_modes, realization, exec)?;
            write_convergence_csv(&rows, output(&cli.common.out)?)?;
            if let Some(path) = morph_out {
                write_morph_csv(&morph, BufWriter::new(File::create(path)?))?;
            }
        }
        Command::Perturb { ranges, realizations } => {
            let siso = siso_config(&cfg, cfg.system.num_layers);
            let rows = run_perturbation_sweep(&siso, &ranges, realizations, exec)?;
            write_perturbation_csv(&rows, output(&cli.common.out)?)?;
        }
        Command::Validate => {
            let reports = validate::run_all()?;
            let mut all = true;
            for r in &reports {
                println!("{r}");
                all &= r.passed();
            }
            return Ok(all);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
