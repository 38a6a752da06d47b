//! Antenna and meta-atom coordinates, morphing state, and the linear
//! constraint system that keeps adjacent layers apart.
//!
//! Layers are indexed `0..L` and atoms `0..N` internally; the stacked
//! morphing vector is laid out layer-major, `y[l * N + n]`.

mod projection;

pub use projection::{project_chain, project_feasible, project_for_mode, Projection};

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::ScenarioConfig;

/// Which meta-atoms are allowed to move.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Architecture {
    /// Rigid stack, no morphing at all.
    Rsim,
    /// Only the first and the final layer morph.
    Hsim,
    /// Whole layers translate; all atoms of a layer share one displacement.
    Dsim,
    /// Every meta-atom morphs independently.
    Sfim,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [
        Architecture::Rsim,
        Architecture::Hsim,
        Architecture::Dsim,
        Architecture::Sfim,
    ];

    /// Whether layer `l` (0-based) of an `num_layers` stack may move.
    pub fn layer_is_free(self, l: usize, num_layers: usize) -> bool {
        match self {
            Architecture::Rsim => false,
            Architecture::Hsim => l == 0 || l + 1 == num_layers,
            Architecture::Dsim | Architecture::Sfim => true,
        }
    }

    /// Orthogonal projection of a direction onto the subspace of
    /// displacements this architecture can realize.
    pub fn project_direction(self, v: &mut [f64], num_atoms: usize) {
        let num_layers = v.len() / num_atoms;
        for (l, layer) in v.chunks_mut(num_atoms).enumerate() {
            if !self.layer_is_free(l, num_layers) {
                layer.fill(0.0);
            } else if self == Architecture::Dsim {
                let mean = layer.iter().sum::<f64>() / num_atoms as f64;
                layer.fill(mean);
            }
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Rsim => "RSIM",
            Architecture::Hsim => "HSIM",
            Architecture::Dsim => "DSIM",
            Architecture::Sfim => "SFIM",
        })
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "RSIM" => Ok(Architecture::Rsim),
            "HSIM" => Ok(Architecture::Hsim),
            "DSIM" => Ok(Architecture::Dsim),
            "SFIM" => Ok(Architecture::Sfim),
            other => Err(Error::InvalidConfig(format!("unknown architecture `{other}`"))),
        }
    }
}

/// Stacked axial displacements of every meta-atom, in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct MorphState {
    pub y: Vec<f64>,
    pub num_atoms: usize,
    pub num_layers: usize,
    pub mode: Architecture,
}

impl MorphState {
    pub fn zeros(num_atoms: usize, num_layers: usize, mode: Architecture) -> Self {
        MorphState {
            y: vec![0.0; num_atoms * num_layers],
            num_atoms,
            num_layers,
            mode,
        }
    }

    #[inline]
    pub fn index(&self, l: usize, n: usize) -> usize {
        l * self.num_atoms + n
    }

    pub fn get(&self, l: usize, n: usize) -> f64 {
        self.y[self.index(l, n)]
    }

    pub fn layer(&self, l: usize) -> &[f64] {
        &self.y[l * self.num_atoms..(l + 1) * self.num_atoms]
    }

    /// Applies the architecture's equality pattern in place: per-layer
    /// averaging for DSIM, zeroed rigid layers for HSIM and RSIM.
    pub fn project_mode(&mut self) {
        self.mode.project_direction(&mut self.y, self.num_atoms);
    }

    /// Largest deviation from the architecture's equality pattern.
    pub fn mode_violation(&self) -> f64 {
        let mut projected = self.y.clone();
        self.mode.project_direction(&mut projected, self.num_atoms);
        self.y
            .iter()
            .zip(&projected)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Fixed geometry of the transmitter and the rigid-equivalent stack.
#[derive(Clone, Debug)]
pub struct Layout {
    pub lambda: f64,
    pub antenna_area: f64,
    pub atom_area: f64,
    pub atoms_per_row: usize,
    pub atom_x: Vec<f64>,
    pub atom_z: Vec<f64>,
    pub antenna_x: f64,
    pub antenna_z: Vec<f64>,
    /// Nominal axial gap in front of each layer.
    pub gaps: Vec<f64>,
    /// In-plane squared offsets between atom `n` of layer 1 and antenna `m` (N×M).
    pub rho_first: DMatrix<f64>,
    /// In-plane squared offsets between atoms `n` and `m` of adjacent layers (N×N).
    pub rho: DMatrix<f64>,
    /// In-plane offsets of each atom from the reference atom, used by the
    /// steering vector.
    pub steer_dx: Vec<f64>,
    pub steer_dz: Vec<f64>,
    pub morph_range: f64,
    pub min_distance: f64,
}

impl Layout {
    pub fn new(cfg: &ScenarioConfig) -> Result<Self> {
        cfg.validate()?;
        let s = &cfg.system;
        let g = &cfg.geometry;
        let n = s.atoms_per_layer;
        let nx = s.atoms_per_row;
        let steer_dx: Vec<f64> = (0..n).map(|u| g.atom_spacing_x * (u % nx) as f64).collect();
        let steer_dz: Vec<f64> = (0..n).map(|u| g.atom_spacing_z * (u / nx) as f64).collect();
        let atom_x: Vec<f64> = steer_dx.iter().map(|dx| g.grid_offset_x + dx).collect();
        let atom_z: Vec<f64> = steer_dz.iter().map(|dz| g.grid_offset_z + dz).collect();
        let antenna_x = 0.0;
        let antenna_z: Vec<f64> = (0..s.num_tx_antennas).map(|m| g.antenna_spacing * m as f64).collect();
        let rho_first = DMatrix::from_fn(n, s.num_tx_antennas, |a, m| {
            (atom_x[a] - antenna_x).powi(2) + (atom_z[a] - antenna_z[m]).powi(2)
        });
        let rho = DMatrix::from_fn(n, n, |a, b| {
            (atom_x[a] - atom_x[b]).powi(2) + (atom_z[a] - atom_z[b]).powi(2)
        });
        Ok(Layout {
            lambda: cfg.wavelength(),
            antenna_area: g.antenna_area,
            atom_area: g.atom_area,
            atoms_per_row: nx,
            atom_x,
            atom_z,
            antenna_x,
            antenna_z,
            gaps: cfg.nominal_gaps(),
            rho_first,
            rho,
            steer_dx,
            steer_dz,
            morph_range: g.morph_range,
            min_distance: g.min_distance,
        })
    }

    pub fn num_atoms(&self) -> usize {
        self.atom_x.len()
    }

    pub fn num_layers(&self) -> usize {
        self.gaps.len()
    }

    pub fn num_antennas(&self) -> usize {
        self.antenna_z.len()
    }

    fn check_atom(&self, l: usize, n: usize) -> Result<()> {
        if l >= self.num_layers() {
            return Err(Error::IndexOutOfRange {
                what: "layer",
                index: l,
                limit: self.num_layers(),
            });
        }
        if n >= self.num_atoms() {
            return Err(Error::IndexOutOfRange {
                what: "atom",
                index: n,
                limit: self.num_atoms(),
            });
        }
        Ok(())
    }

    /// Global coordinates `(x, y, z)` of atom `n` on layer `l`; the
    /// transmit array sits in the plane `y = 0`.
    pub fn atom_coords(&self, l: usize, n: usize, y: &[f64]) -> Result<[f64; 3]> {
        self.check_atom(l, n)?;
        let depth: f64 = self.gaps[..=l].iter().sum();
        Ok([self.atom_x[n], depth + y[l * self.num_atoms() + n], self.atom_z[n]])
    }

    pub fn antenna_coords(&self, m: usize) -> Result<[f64; 3]> {
        if m >= self.num_antennas() {
            return Err(Error::IndexOutOfRange {
                what: "antenna",
                index: m,
                limit: self.num_antennas(),
            });
        }
        Ok([self.antenna_x, 0.0, self.antenna_z[m]])
    }

    /// Morphed axial gap between atom `n` of layer `l` and source `m`
    /// (an antenna when `l == 0`, else atom `m` of layer `l - 1`).
    #[inline]
    pub fn axial_gap(&self, l: usize, n: usize, m: usize, y: &[f64]) -> f64 {
        let na = self.num_atoms();
        if l == 0 {
            self.gaps[0] + y[n]
        } else {
            self.gaps[l] + y[l * na + n] - y[(l - 1) * na + m]
        }
    }

    #[inline]
    pub fn in_plane_sq(&self, l: usize, n: usize, m: usize) -> f64 {
        if l == 0 {
            self.rho_first[(n, m)]
        } else {
            self.rho[(n, m)]
        }
    }

    /// Distance and obliquity cosine between atom `n` of layer `l` and its
    /// source `m`, both following the morphed geometry.
    pub fn distance_and_cos(&self, l: usize, n: usize, m: usize, y: &[f64]) -> Result<(f64, f64)> {
        self.check_atom(l, n)?;
        let limit = if l == 0 { self.num_antennas() } else { self.num_atoms() };
        if m >= limit {
            return Err(Error::IndexOutOfRange {
                what: "source",
                index: m,
                limit,
            });
        }
        let gap = self.axial_gap(l, n, m, y);
        let d = (self.in_plane_sq(l, n, m) + gap * gap).sqrt();
        Ok((d, gap / d))
    }
}

/// Linear constraints `lower <= y <= upper` and `Δ y >= ζ` on the stacked
/// morphing vector.
///
/// Row `(0, n)` of `Δ` is the identity on `y[0, n]`; row `(l, n)` for
/// `l >= 1` is `y[l, n] - y[l-1, n]`. The system therefore splits into one
/// independent chain per atom index.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintSystem {
    pub num_atoms: usize,
    pub num_layers: usize,
    pub zeta: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ConstraintSystem {
    /// Box `[-bound, bound]` on every coordinate.
    pub fn new(num_atoms: usize, num_layers: usize, zeta: Vec<f64>, bound: f64) -> Result<Self> {
        let dim = num_atoms * num_layers;
        if zeta.len() != dim {
            return Err(Error::DimensionMismatch(format!(
                "zeta has {} entries, expected {dim}",
                zeta.len()
            )));
        }
        Ok(ConstraintSystem {
            num_atoms,
            num_layers,
            zeta,
            lower: vec![-bound; dim],
            upper: vec![bound; dim],
        })
    }

    pub fn dim(&self) -> usize {
        self.num_atoms * self.num_layers
    }

    /// Pins the bounds of every rigid layer of `mode` to zero.
    pub fn with_mode(&self, mode: Architecture) -> Self {
        let mut out = self.clone();
        for l in 0..self.num_layers {
            if !mode.layer_is_free(l, self.num_layers) {
                for n in 0..self.num_atoms {
                    let i = l * self.num_atoms + n;
                    out.lower[i] = 0.0;
                    out.upper[i] = 0.0;
                }
            }
        }
        out
    }

    /// `Δ y`, evaluated without forming the matrix.
    pub fn apply_delta(&self, y: &[f64]) -> Vec<f64> {
        let na = self.num_atoms;
        (0..self.dim())
            .map(|i| if i < na { y[i] } else { y[i] - y[i - na] })
            .collect()
    }

    /// Dense `Δ` (entries in {-1, 0, 1}).
    pub fn delta_dense(&self) -> DMatrix<f64> {
        let na = self.num_atoms;
        let dim = self.dim();
        DMatrix::from_fn(dim, dim, |r, c| {
            if r == c {
                1.0
            } else if r >= na && c == r - na {
                -1.0
            } else {
                0.0
            }
        })
    }

    /// Largest violation of any bound or difference constraint (0 if feasible).
    pub fn max_violation(&self, y: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for ((v, lo), hi) in y.iter().zip(&self.lower).zip(&self.upper) {
            worst = worst.max(lo - v).max(v - hi);
        }
        for (d, z) in self.apply_delta(y).iter().zip(&self.zeta) {
            worst = worst.max(z - d);
        }
        worst
    }
}

/// Minimum-distance constraints for the rigid-equivalent geometry.
pub fn build_constraints(layout: &Layout) -> ConstraintSystem {
    let na = layout.num_atoms();
    let nl = layout.num_layers();
    let eps2 = layout.min_distance * layout.min_distance;
    let mut zeta = Vec::with_capacity(na * nl);
    for n in 0..na {
        let closest = layout.rho_first.row(n).min();
        zeta.push((eps2 - closest).max(0.0).sqrt() - layout.gaps[0]);
    }
    for l in 1..nl {
        for n in 0..na {
            zeta.push((eps2 - layout.rho[(n, n)]).max(0.0).sqrt() - layout.gaps[l]);
        }
    }
    ConstraintSystem::new(na, nl, zeta, layout.morph_range).expect("zeta sized by construction")
}
