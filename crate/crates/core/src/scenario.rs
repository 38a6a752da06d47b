//! Scenario configuration, random user/scatterer drops and the initial
//! operating point of the alternating optimizer.
//!
//! Every physical quantity is stored in SI units (meters, watts, hertz).
//! Decibel conversions only happen at the command-line boundary through
//! [`dbm_to_watt`].

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{build_stack, cascade, PhaseStack, Precoder, QuantSet};
use crate::error::{Error, Result};
use crate::geometry::{Architecture, Layout, MorphState};
use crate::metrics::sinr_and_rates;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Converts a power level from dBm to watts.
pub fn dbm_to_watt(p_dbm: f64) -> f64 {
    10f64.powf(p_dbm / 10.0) * 1e-3
}

pub fn watt_to_dbm(p_watt: f64) -> f64 {
    10.0 * (p_watt / 1e-3).log10()
}

/// How the meta-atom responses are optimized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseMode {
    /// Unit-modulus responses anywhere on the circle.
    Continuous,
    /// Responses restricted to the quantized set.
    Discrete,
}

impl fmt::Display for PhaseMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PhaseMode::Continuous => "continuous",
            PhaseMode::Discrete => "discrete",
        })
    }
}

impl FromStr for PhaseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "continuous" | "cont" => Ok(PhaseMode::Continuous),
            "discrete" | "disc" => Ok(PhaseMode::Discrete),
            other => Err(Error::InvalidConfig(format!("unknown phase mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    pub num_tx_antennas: usize,
    pub num_layers: usize,
    pub atoms_per_layer: usize,
    /// Number of meta-atoms along x; must divide `atoms_per_layer`.
    pub atoms_per_row: usize,
    pub num_users: usize,
    pub carrier_freq: f64,
    /// Total transmit power budget in watts.
    pub power_budget: f64,
    /// Receiver noise variance in watts, shared by all users.
    pub noise_var: f64,
    /// QoS thresholds are `log2(1 + factor * SINR)` at the initial point.
    pub rate_threshold_factor: f64,
    pub quant_bits: u32,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            num_tx_antennas: 6,
            num_layers: 6,
            atoms_per_layer: 36,
            atoms_per_row: 6,
            num_users: 4,
            carrier_freq: 28e9,
            power_budget: dbm_to_watt(25.0),
            noise_var: dbm_to_watt(-104.0),
            rate_threshold_factor: 0.95,
            quant_bits: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub antenna_area: f64,
    pub atom_area: f64,
    pub antenna_spacing: f64,
    pub atom_spacing_x: f64,
    pub atom_spacing_z: f64,
    /// Nominal axial gap used for every layer unless `nominal_gaps` is set.
    pub nominal_gap: f64,
    /// Optional per-layer nominal gaps (length must equal the layer count).
    pub nominal_gaps: Option<Vec<f64>>,
    pub morph_range: f64,
    pub min_distance: f64,
    /// x coordinate of the reference (top-left) meta-atom.
    pub grid_offset_x: f64,
    /// z coordinate of the reference (top-left) meta-atom.
    pub grid_offset_z: f64,
}

impl GeometryConfig {
    pub fn for_wavelength(lambda: f64) -> Self {
        GeometryConfig {
            antenna_area: lambda * lambda / 4.0,
            atom_area: lambda * lambda / 4.0,
            antenna_spacing: lambda / 2.0,
            atom_spacing_x: lambda / 2.0,
            atom_spacing_z: lambda / 2.0,
            nominal_gap: 6.0 * lambda,
            nominal_gaps: None,
            morph_range: lambda / 2.0,
            min_distance: 0.62 * (lambda * lambda / 4.0).sqrt(),
            grid_offset_x: 0.0,
            grid_offset_z: 0.0,
        }
    }
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig::for_wavelength(SPEED_OF_LIGHT / SystemConfig::default().carrier_freq)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PropagationConfig {
    /// Paths per user including the line-of-sight path.
    pub num_paths: usize,
    pub user_distance: [f64; 2],
    pub user_angle: [f64; 2],
    pub scatterer_distance: [f64; 2],
    pub scatterer_angle: [f64; 2],
    /// Extra power loss of every non-line-of-sight path, in dB.
    pub nlos_penalty_db: f64,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        PropagationConfig {
            num_paths: 5,
            user_distance: [95.0, 105.0],
            user_angle: [-PI / 4.0, PI / 4.0],
            scatterer_distance: [55.0, 105.0],
            scatterer_angle: [-PI / 2.0, -PI / 4.0],
            nlos_penalty_db: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MorphParams {
    /// Largest per-atom displacement tried by the line search, in meters.
    pub step_init: f64,
    pub step_shrink: f64,
    pub max_halvings: u32,
    /// Sufficient-increase constant of the line search.
    pub armijo: f64,
    pub omega_init: f64,
    pub kappa: f64,
    pub omega_floor: f64,
    pub tol_qos: f64,
    pub max_retries: u32,
    /// Gradient steps per outer iteration.
    pub max_steps: usize,
    /// A step that gains less sum rate than this ends the morphing block.
    pub step_tolerance: f64,
}

impl Default for MorphParams {
    fn default() -> Self {
        let lambda = SPEED_OF_LIGHT / SystemConfig::default().carrier_freq;
        MorphParams {
            step_init: 1e-4 * lambda,
            step_shrink: 0.5,
            max_halvings: 60,
            armijo: 1e-4,
            omega_init: 1.0,
            kappa: 0.5,
            omega_floor: 1e-6,
            tol_qos: 1e-6,
            max_retries: 20,
            max_steps: 10,
            step_tolerance: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeamformerParams {
    pub max_rounds: usize,
    pub tolerance: f64,
    pub barrier_gap: f64,
    pub barrier_growth: f64,
}

impl Default for BeamformerParams {
    fn default() -> Self {
        BeamformerParams {
            max_rounds: 20,
            tolerance: 1e-4,
            barrier_gap: 1e-8,
            barrier_growth: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseParams {
    pub mode: PhaseMode,
    pub max_passes: usize,
    /// Surrogate rounds per layer visit in continuous mode.
    pub continuous_rounds: usize,
    pub barrier_gap: f64,
}

impl Default for PhaseParams {
    fn default() -> Self {
        PhaseParams {
            mode: PhaseMode::Discrete,
            max_passes: 10,
            continuous_rounds: 1,
            barrier_gap: 1e-7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AoParams {
    pub tolerance: f64,
    pub max_outer: usize,
}

impl Default for AoParams {
    fn default() -> Self {
        AoParams {
            tolerance: 1e-3,
            max_outer: 100,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub morph: MorphParams,
    pub beamformer: BeamformerParams,
    pub phase: PhaseParams,
    pub ao: AoParams,
}

/// Every physical and algorithmic parameter of one scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub rng_seed: u64,
    pub system: SystemConfig,
    pub geometry: GeometryConfig,
    pub propagation: PropagationConfig,
    pub solver: SolverConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            rng_seed: 1,
            system: SystemConfig::default(),
            geometry: GeometryConfig::default(),
            propagation: PropagationConfig::default(),
            solver: SolverConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config is always serializable")
    }

    /// Overrides one field by dotted path, e.g. `system.num_users` or
    /// `solver.phase.mode`. `value` is read as a TOML value, falling back to
    /// a bare string.
    pub fn set_field(&mut self, path: &str, value: &str) -> Result<()> {
        let mut root = toml::Table::try_from(&*self).expect("config is always serializable");
        let parsed = format!("v = {value}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        let keys: Vec<&str> = path.split('.').collect();
        let (last, parents) = keys.split_last().expect("split yields at least one item");
        let mut table = &mut root;
        for key in parents {
            table = table
                .get_mut(*key)
                .and_then(toml::Value::as_table_mut)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown config section `{key}` in `{path}`")))?;
        }
        table.insert(last.to_string(), parsed);
        let cfg: ScenarioConfig = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::InvalidConfig(format!("{path}: {}", e.message())))?;
        *self = cfg;
        Ok(())
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.system.carrier_freq
    }

    pub fn num_rows(&self) -> usize {
        self.system.atoms_per_layer / self.system.atoms_per_row
    }

    pub fn nominal_gaps(&self) -> Vec<f64> {
        match &self.geometry.nominal_gaps {
            Some(gaps) => gaps.clone(),
            None => vec![self.geometry.nominal_gap; self.system.num_layers],
        }
    }

    pub fn noise_vars(&self) -> Vec<f64> {
        vec![self.system.noise_var; self.system.num_users]
    }

    pub fn quant_set(&self) -> QuantSet {
        QuantSet::new(self.system.quant_bits)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.system;
        let g = &self.geometry;
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if s.num_tx_antennas == 0 || s.num_layers == 0 || s.atoms_per_layer == 0 || s.num_users == 0 {
            return bad("antenna, layer, atom and user counts must be positive".into());
        }
        if s.atoms_per_row == 0 || !s.atoms_per_layer.is_multiple_of(s.atoms_per_row) {
            return bad(format!(
                "atoms_per_row ({}) must divide atoms_per_layer ({})",
                s.atoms_per_row, s.atoms_per_layer
            ));
        }
        if !(s.carrier_freq > 0.0) {
            return bad("carrier frequency must be positive".into());
        }
        if !(s.power_budget > 0.0) || !(s.noise_var > 0.0) {
            return bad("power budget and noise variance must be positive".into());
        }
        if !(g.min_distance > 0.0) || !(g.morph_range >= 0.0) {
            return bad("min_distance must be positive and morph_range non-negative".into());
        }
        if let Some(gaps) = &g.nominal_gaps {
            if gaps.len() != s.num_layers {
                return bad(format!(
                    "nominal_gaps has {} entries for {} layers",
                    gaps.len(),
                    s.num_layers
                ));
            }
        }
        if self.nominal_gaps().iter().any(|&gap| !(gap > 0.0)) {
            return bad("nominal gaps must be positive".into());
        }
        if s.quant_bits == 0 || s.quant_bits > 16 {
            return bad("quant_bits must lie in 1..=16".into());
        }
        if self.propagation.num_paths == 0 {
            return bad("at least the line-of-sight path is required".into());
        }
        if !(s.rate_threshold_factor >= 0.0 && s.rate_threshold_factor < 1.0) {
            return bad("rate_threshold_factor must lie in [0, 1)".into());
        }
        let m = &self.solver.morph;
        if !(m.kappa > 0.0 && m.kappa < 1.0) || !(m.omega_init > 0.0) || !(m.omega_floor > 0.0) {
            return bad("penalty schedule needs 0 < kappa < 1 and positive weights".into());
        }
        Ok(())
    }
}

/// One propagation path between the final layer and a user.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathParams {
    pub gain: Complex64,
    pub azimuth: f64,
    pub elevation: f64,
    pub distance: f64,
}

/// Multipath parameters per user; `paths[k][0]` is the line-of-sight path.
#[derive(Clone, Debug, PartialEq)]
pub struct UserGeometry {
    pub paths: Vec<Vec<PathParams>>,
}

impl UserGeometry {
    pub fn num_users(&self) -> usize {
        self.paths.len()
    }
}

fn free_space_gain(lambda: f64, distance: f64) -> f64 {
    let amp = lambda / (4.0 * PI * distance);
    amp * amp
}

/// Draws user and scatterer positions and path gains.
pub fn sample_scenario(cfg: &ScenarioConfig, seed: u64) -> UserGeometry {
    sample_scenario_stream(cfg, seed, 0)
}

/// Like [`sample_scenario`], on an independent ChaCha stream so that
/// realization `r` of a sweep never depends on how many realizations ran
/// before it.
pub fn sample_scenario_stream(cfg: &ScenarioConfig, seed: u64, stream: u64) -> UserGeometry {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let p = &cfg.propagation;
    let lambda = cfg.wavelength();
    let nlos_scale = 10f64.powf(-p.nlos_penalty_db / 10.0);
    let uniform = |rng: &mut ChaCha8Rng, range: [f64; 2]| {
        if range[1] > range[0] {
            rng.random_range(range[0]..range[1])
        } else {
            range[0]
        }
    };
    let paths = (0..cfg.system.num_users)
        .map(|_| {
            (0..p.num_paths)
                .map(|i| {
                    if i == 0 {
                        let distance = uniform(&mut rng, p.user_distance);
                        let azimuth = uniform(&mut rng, p.user_angle);
                        let elevation = uniform(&mut rng, p.user_angle);
                        PathParams {
                            gain: Complex64::new(free_space_gain(lambda, distance).sqrt(), 0.0),
                            azimuth,
                            elevation,
                            distance,
                        }
                    } else {
                        let distance = uniform(&mut rng, p.scatterer_distance);
                        let azimuth = uniform(&mut rng, p.scatterer_angle);
                        let elevation = uniform(&mut rng, p.scatterer_angle);
                        let chi = rng.random_range(0.0..2.0 * PI);
                        let amp = (free_space_gain(lambda, distance) * nlos_scale).sqrt();
                        PathParams {
                            gain: Complex64::from_polar(amp, chi),
                            azimuth,
                            elevation,
                            distance,
                        }
                    }
                })
                .collect()
        })
        .collect();
    UserGeometry { paths }
}

/// Feasible starting point of the alternating optimizer.
#[derive(Clone, Debug)]
pub struct InitialState {
    pub morph: MorphState,
    pub phases: PhaseStack,
    pub precoder: Precoder,
    /// Per-user QoS rate thresholds in bits/s/Hz.
    pub thresholds: Vec<f64>,
}

/// Zero-forcing precoder with equal per-user power and `‖W‖_F² = P`.
///
/// `g` holds one cascaded channel per user (length M each).
pub fn zero_forcing(g: &[nalgebra::DVector<Complex64>], power: f64) -> Result<Precoder> {
    let k = g.len();
    let m = g.first().map_or(0, |v| v.len());
    if k == 0 || m < k {
        return Err(Error::DegenerateScenario(format!(
            "zero-forcing needs at least as many antennas ({m}) as users ({k})"
        )));
    }
    let gmat = DMatrix::from_fn(k, m, |r, c| g[r][c]);
    let gram = &gmat * gmat.adjoint();
    let inv = gram
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::DegenerateScenario("cascaded channel Gram matrix is singular".into()))?;
    let mut w = gmat.adjoint() * inv;
    let per_user = power / k as f64;
    for mut col in w.column_iter_mut() {
        let norm = col.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::DegenerateScenario("zero-forcing column vanished".into()));
        }
        col *= Complex64::new(per_user.sqrt() / norm, 0.0);
    }
    Ok(Precoder(w))
}

/// Builds the all-zero morphing, all-ones responses, zero-forcing precoder
/// and the QoS thresholds derived from it.
pub fn init_state(
    cfg: &ScenarioConfig,
    layout: &Layout,
    geometry: &UserGeometry,
    mode: Architecture,
) -> Result<InitialState> {
    let morph = MorphState::zeros(layout.num_atoms(), layout.num_layers(), mode);
    let phases = PhaseStack::ones(layout.num_atoms(), layout.num_layers(), cfg.quant_set());
    let stack = build_stack(layout, &morph.y, geometry)?;
    let g = cascade(&stack, &phases)?;
    let precoder = zero_forcing(&g, cfg.system.power_budget)?;
    let report = sinr_and_rates(&g, &precoder, &cfg.noise_vars());
    let factor = cfg.system.rate_threshold_factor;
    let thresholds = report.sinr.iter().map(|&gamma| (1.0 + factor * gamma).log2()).collect();
    Ok(InitialState {
        morph,
        phases,
        precoder,
        thresholds,
    })
}
