//! Inter-layer diffraction matrices, user channels and the cascaded
//! channel seen by the transmit array.
//!
//! `omega[l]` maps the field on layer `l - 1` (the antennas for `l == 0`)
//! to layer `l`: entry `(n, m)` couples source `m` to atom `n`.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::geometry::Layout;
use crate::scenario::{PathParams, UserGeometry};

pub type C64 = Complex64;

const J: C64 = C64::new(0.0, 1.0);

/// `e^{j 2π t}` with `t` reduced to `[0, 1)` first, so large path lengths
/// keep full phase precision.
#[inline]
pub fn cis_cycles(t: f64) -> C64 {
    let frac = t - t.floor();
    C64::from_polar(1.0, 2.0 * PI * frac)
}

/// Quantized response set `{ e^{j 2π u / U} }`, `U = 2^bits`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantSet {
    pub bits: u32,
    pub levels: Vec<C64>,
}

impl QuantSet {
    pub fn new(bits: u32) -> Self {
        let size = 1usize << bits;
        let levels = (0..size).map(|u| cis_cycles(u as f64 / size as f64)).collect();
        QuantSet { bits, levels }
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Index of the closest level (ties to the lowest index).
    pub fn nearest(&self, value: C64) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (u, q) in self.levels.iter().enumerate() {
            let d = (q - value).norm_sqr();
            if d < best_d {
                best_d = d;
                best = u;
            }
        }
        best
    }
}

/// Unit-modulus responses of every meta-atom, stacked layer-major.
///
/// In quantized operation the level index of every atom is kept in `codes`
/// and the value is always read back from the set, so membership is exact.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseStack {
    pub num_atoms: usize,
    pub num_layers: usize,
    values: Vec<C64>,
    codes: Option<Vec<usize>>,
    pub quant: QuantSet,
}

impl PhaseStack {
    pub fn ones(num_atoms: usize, num_layers: usize, quant: QuantSet) -> Self {
        let dim = num_atoms * num_layers;
        PhaseStack {
            num_atoms,
            num_layers,
            values: vec![quant.levels[0]; dim],
            codes: Some(vec![0; dim]),
            quant,
        }
    }

    pub fn from_codes(num_atoms: usize, num_layers: usize, codes: Vec<usize>, quant: QuantSet) -> Result<Self> {
        if codes.len() != num_atoms * num_layers {
            return Err(Error::DimensionMismatch("phase code vector length".into()));
        }
        if let Some(&bad) = codes.iter().find(|&&u| u >= quant.len()) {
            return Err(Error::IndexOutOfRange {
                what: "quantization level",
                index: bad,
                limit: quant.len(),
            });
        }
        let values = codes.iter().map(|&u| quant.levels[u]).collect();
        Ok(PhaseStack {
            num_atoms,
            num_layers,
            values,
            codes: Some(codes),
            quant,
        })
    }

    pub fn values(&self) -> &[C64] {
        &self.values
    }

    pub fn layer(&self, l: usize) -> &[C64] {
        &self.values[l * self.num_atoms..(l + 1) * self.num_atoms]
    }

    pub fn codes(&self) -> Option<&[usize]> {
        self.codes.as_deref()
    }

    pub fn is_quantized(&self) -> bool {
        self.codes.is_some()
    }

    pub fn get(&self, l: usize, n: usize) -> C64 {
        self.values[l * self.num_atoms + n]
    }

    /// Sets a quantized level. Only valid while the stack is quantized.
    pub fn set_code(&mut self, l: usize, n: usize, code: usize) {
        let i = l * self.num_atoms + n;
        let codes = self.codes.as_mut().expect("set_code on a continuous phase stack");
        codes[i] = code;
        self.values[i] = self.quant.levels[code];
    }

    /// Sets an arbitrary response; the value is normalized onto the unit
    /// circle and the stack leaves quantized operation.
    pub fn set_value(&mut self, l: usize, n: usize, value: C64) {
        let i = l * self.num_atoms + n;
        let r = value.norm();
        self.values[i] = if r > 0.0 { value / r } else { C64::new(1.0, 0.0) };
        self.codes = None;
    }

    /// Largest `| |φ| − 1 |` over all atoms.
    pub fn modulus_violation(&self) -> f64 {
        self.values.iter().map(|v| (v.norm() - 1.0).abs()).fold(0.0, f64::max)
    }

    /// Whether every value is bit-identical to its quantization level.
    pub fn in_quant_set(&self) -> bool {
        match &self.codes {
            Some(codes) => codes.iter().zip(&self.values).all(|(&u, v)| *v == self.quant.levels[u]),
            None => self.values.iter().all(|v| self.quant.levels.iter().any(|q| q == v)),
        }
    }
}

/// Transmit precoder, one column per user stream (M×K).
#[derive(Clone, Debug, PartialEq)]
pub struct Precoder(pub DMatrix<C64>);

impl Precoder {
    pub fn power(&self) -> f64 {
        self.0.iter().map(|v| v.norm_sqr()).sum()
    }

    pub fn num_antennas(&self) -> usize {
        self.0.nrows()
    }

    pub fn num_streams(&self) -> usize {
        self.0.ncols()
    }
}

/// Materialized channel model for one morphing state.
#[derive(Clone, Debug)]
pub struct ChannelStack {
    pub omega: Vec<DMatrix<C64>>,
    pub h: Vec<DVector<C64>>,
}

impl ChannelStack {
    pub fn num_layers(&self) -> usize {
        self.omega.len()
    }

    pub fn num_users(&self) -> usize {
        self.h.len()
    }
}

/// One diffraction coefficient and its derivative with respect to the
/// axial gap `gap`, for in-plane squared offset `rho`.
#[inline]
pub fn rs_coefficient(area: f64, gap: f64, rho: f64, lambda: f64) -> (C64, C64) {
    let d2 = rho + gap * gap;
    let d = d2.sqrt();
    let p = area * gap / d2;
    let q = C64::new(1.0 / (2.0 * PI * d), -1.0 / lambda);
    let r = cis_cycles(d / lambda);
    let dp = area * (rho - gap * gap) / (d2 * d2);
    let dq = C64::new(-gap / (2.0 * PI * d2 * d), 0.0);
    let dr = J * (2.0 * PI * gap / (lambda * d)) * r;
    let value = p * q * r;
    let deriv = dp * q * r + p * dq * r + p * q * dr;
    (value, deriv)
}

fn omega_impl(layout: &Layout, l: usize, y: &[f64], with_derivative: bool) -> (DMatrix<C64>, Option<DMatrix<C64>>) {
    let na = layout.num_atoms();
    let sources = if l == 0 { layout.num_antennas() } else { na };
    let area = if l == 0 { layout.antenna_area } else { layout.atom_area };
    let mut omega = DMatrix::zeros(na, sources);
    let mut deriv = with_derivative.then(|| DMatrix::zeros(na, sources));
    for m in 0..sources {
        for n in 0..na {
            let gap = layout.axial_gap(l, n, m, y);
            let rho = layout.in_plane_sq(l, n, m);
            debug_assert!(rho + gap * gap > 0.0, "coincident atoms");
            let (v, dv) = rs_coefficient(area, gap, rho, layout.lambda);
            omega[(n, m)] = v;
            if let Some(dm) = deriv.as_mut() {
                dm[(n, m)] = dv;
            }
        }
    }
    (omega, deriv)
}

/// Diffraction matrix into layer `l` (N×M for `l == 0`, else N×N).
pub fn build_omega(layout: &Layout, l: usize, y: &[f64]) -> DMatrix<C64> {
    omega_impl(layout, l, y, false).0
}

/// Diffraction matrix together with the entrywise derivative with respect
/// to the axial gap of each entry.
pub fn build_omega_with_derivative(layout: &Layout, l: usize, y: &[f64]) -> (DMatrix<C64>, DMatrix<C64>) {
    let (o, d) = omega_impl(layout, l, y, true);
    (o, d.expect("derivative requested"))
}

/// Steering vector of one departure direction from the final layer.
pub fn steering(layout: &Layout, path: &PathParams, y_last: &[f64]) -> DVector<C64> {
    let (st, ct) = path.azimuth.sin_cos();
    let (sp, cp) = path.elevation.sin_cos();
    let lambda = layout.lambda;
    DVector::from_fn(layout.num_atoms(), |u, _| {
        let psi = layout.steer_dx[u] * ct * sp + layout.steer_dz[u] * cp;
        cis_cycles((psi + y_last[u] * st * sp) / lambda)
    })
}

/// Multipath channel from the final layer to one user.
pub fn build_user_channel(layout: &Layout, paths: &[PathParams], y: &[f64]) -> DVector<C64> {
    let y_last = last_layer(layout, y);
    let mut h = DVector::zeros(layout.num_atoms());
    for path in paths {
        h += steering(layout, path, y_last) * path.gain;
    }
    h
}

/// Derivative of the user channel with respect to each final-layer
/// displacement (atom `n` only affects entry `n`).
pub fn user_channel_derivative(layout: &Layout, paths: &[PathParams], y: &[f64]) -> DVector<C64> {
    let y_last = last_layer(layout, y);
    let k = 2.0 * PI / layout.lambda;
    let mut dh = DVector::zeros(layout.num_atoms());
    for path in paths {
        let factor = path.azimuth.sin() * path.elevation.sin();
        if factor == 0.0 {
            continue;
        }
        dh += steering(layout, path, y_last) * (J * k * factor * path.gain);
    }
    dh
}

fn last_layer<'a>(layout: &Layout, y: &'a [f64]) -> &'a [f64] {
    let na = layout.num_atoms();
    let nl = layout.num_layers();
    &y[(nl - 1) * na..nl * na]
}

pub fn build_stack(layout: &Layout, y: &[f64], geometry: &UserGeometry) -> Result<ChannelStack> {
    let dim = layout.num_atoms() * layout.num_layers();
    if y.len() != dim {
        return Err(Error::DimensionMismatch(format!(
            "morphing vector has {} entries, layout needs {dim}",
            y.len()
        )));
    }
    let omega = (0..layout.num_layers()).map(|l| build_omega(layout, l, y)).collect();
    let h = geometry
        .paths
        .iter()
        .map(|paths| build_user_channel(layout, paths, y))
        .collect();
    Ok(ChannelStack { omega, h })
}

fn check_dims(stack: &ChannelStack, phases: &PhaseStack) -> Result<()> {
    if stack.num_layers() != phases.num_layers {
        return Err(Error::DimensionMismatch(format!(
            "{} channel layers vs {} phase layers",
            stack.num_layers(),
            phases.num_layers
        )));
    }
    if stack.omega.iter().any(|o| o.nrows() != phases.num_atoms) {
        return Err(Error::DimensionMismatch(
            "atom count differs between channel and phases".into(),
        ));
    }
    Ok(())
}

/// `z ↦ Ω^T (φ ⊙ z)`, one backward step through layer `l`.
pub fn backward_step(omega: &DMatrix<C64>, phi: &[C64], z: &DVector<C64>) -> DVector<C64> {
    let scaled = DVector::from_fn(z.len(), |n, _| phi[n] * z[n]);
    omega.tr_mul(&scaled)
}

/// `x ↦ φ ⊙ (Ω x)`, one forward step through layer `l`.
pub fn forward_step(omega: &DMatrix<C64>, phi: &[C64], x: &DVector<C64>) -> DVector<C64> {
    let mut out = omega * x;
    for (v, p) in out.iter_mut().zip(phi) {
        *v *= p;
    }
    out
}

/// Cascaded channel `g_k` (length M) of every user, evaluated right to left.
pub fn cascade(stack: &ChannelStack, phases: &PhaseStack) -> Result<Vec<DVector<C64>>> {
    check_dims(stack, phases)?;
    Ok(stack
        .h
        .iter()
        .map(|h| {
            let mut z = h.clone();
            for l in (0..stack.num_layers()).rev() {
                z = backward_step(&stack.omega[l], phases.layer(l), &z);
            }
            z
        })
        .collect())
}

/// Field on the final layer for each precoder column, evaluated left to
/// right; `h_k^T` applied to column `i` gives `g_k^T w_i`.
pub fn forward_fields(stack: &ChannelStack, phases: &PhaseStack, w: &Precoder) -> Result<DMatrix<C64>> {
    check_dims(stack, phases)?;
    let mut x = w.0.clone();
    for l in 0..stack.num_layers() {
        x = &stack.omega[l] * x;
        for (n, mut row) in x.row_iter_mut().enumerate() {
            row *= phases.get(l, n);
        }
    }
    Ok(x)
}

/// Writes every `Ω` entry as `layer,row,col,re,im` text rows (1-based indices).
pub fn dump_omega<W: Write>(stack: &ChannelStack, mut out: W) -> Result<()> {
    writeln!(out, "layer,row,col,re,im")?;
    for (l, omega) in stack.omega.iter().enumerate() {
        for m in 0..omega.ncols() {
            for n in 0..omega.nrows() {
                let v = omega[(n, m)];
                writeln!(out, "{},{},{},{:e},{:e}", l + 1, n + 1, m + 1, v.re, v.im)?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{sample_scenario, ScenarioConfig};
    use approx::assert_relative_eq;

    fn small_cfg() -> ScenarioConfig {
        let mut cfg = ScenarioConfig::default();
        cfg.system.num_tx_antennas = 2;
        cfg.system.num_layers = 3;
        cfg.system.atoms_per_layer = 4;
        cfg.system.atoms_per_row = 2;
        cfg.system.num_users = 2;
        cfg
    }

    #[test]
    fn broadside_coefficient() {
        let lambda = 299_792_458.0 / 28e9;
        let (v, _) = rs_coefficient(lambda * lambda / 4.0, 6.0 * lambda, 0.0, lambda);
        assert_relative_eq!(v.re, 1.0 / (288.0 * PI), max_relative = 1e-9);
        assert_relative_eq!(v.im, -1.0 / 24.0, max_relative = 1e-9);
        assert_relative_eq!(v.re, 1.105e-3, max_relative = 1e-3);
    }

    #[test]
    fn coefficient_derivative_matches_difference() {
        let lambda = 0.0107;
        for &(gap, rho) in &[(0.064, 0.0), (0.05, 1e-4), (0.07, 4e-4)] {
            let h = 1e-9;
            let (_, dv) = rs_coefficient(2e-5, gap, rho, lambda);
            let (p, _) = rs_coefficient(2e-5, gap + h, rho, lambda);
            let (m, _) = rs_coefficient(2e-5, gap - h, rho, lambda);
            let fd = (p - m) / (2.0 * h);
            assert!((fd - dv).norm() <= 1e-5 * dv.norm(), "{fd} vs {dv}");
        }
    }

    #[test]
    fn q_modulus_and_monotone_decay() {
        let lambda = 0.0107;
        let gap = 6.0 * lambda;
        let mut prev = f64::INFINITY;
        for i in 0..20 {
            let rho = (i as f64 * 0.25 * lambda).powi(2);
            let (v, _) = rs_coefficient(1.0, gap, rho, lambda);
            let d = (rho + gap * gap).sqrt();
            let q_abs = ((1.0 / (2.0 * PI * d)).powi(2) + 1.0 / (lambda * lambda)).sqrt();
            assert_relative_eq!(v.norm(), gap / (d * d) * q_abs, max_relative = 1e-12);
            assert!(v.norm() < prev);
            prev = v.norm();
        }
    }

    #[test]
    fn common_shift_keeps_inner_omega() {
        let layout = Layout::new(&small_cfg()).unwrap();
        let mut y = vec![0.0; 12];
        let base = build_omega(&layout, 2, &y);
        for v in &mut y[4..12] {
            *v = 7e-4;
        }
        let shifted = build_omega(&layout, 2, &y);
        assert!((base - shifted).norm() <= 1e-15);
    }

    #[test]
    fn quant_set_contains_one() {
        for bits in 1..=4 {
            let q = QuantSet::new(bits);
            assert_eq!(q.levels[0], C64::new(1.0, 0.0));
            assert_eq!(q.len(), 1 << bits);
            assert!(q.levels.iter().all(|v| (v.norm() - 1.0).abs() < 1e-15));
        }
        assert_eq!(QuantSet::new(2).nearest(C64::new(0.1, 0.9)), 1);
    }

    #[test]
    fn phase_stack_modes() {
        let mut p = PhaseStack::ones(2, 2, QuantSet::new(2));
        assert!(p.in_quant_set());
        p.set_code(1, 0, 3);
        assert_eq!(p.codes().unwrap(), &[0, 0, 3, 0]);
        assert!(p.in_quant_set());
        p.set_value(0, 1, C64::from_polar(2.0, 0.3));
        assert!(!p.is_quantized());
        assert_relative_eq!(p.get(0, 1).arg(), 0.3, epsilon = 1e-15);
        assert!(p.modulus_violation() < 1e-15);
    }

    #[test]
    fn los_only_channel_norm() {
        let mut cfg = small_cfg();
        cfg.propagation.num_paths = 1;
        let layout = Layout::new(&cfg).unwrap();
        let geo = sample_scenario(&cfg, 3);
        let y = vec![0.0; 12];
        for paths in &geo.paths {
            let h = build_user_channel(&layout, paths, &y);
            assert_relative_eq!(h.norm(), paths[0].gain.norm() * 2.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn zero_azimuth_ignores_morphing() {
        let layout = Layout::new(&small_cfg()).unwrap();
        let path = PathParams {
            gain: C64::new(1e-3, 0.0),
            azimuth: 0.0,
            elevation: 0.4,
            distance: 100.0,
        };
        let mut y = vec![0.0; 12];
        let a0 = build_user_channel(&layout, &[path], &y);
        y[8..].copy_from_slice(&[1e-3, -2e-3, 5e-4, 3e-3]);
        let a1 = build_user_channel(&layout, &[path], &y);
        assert_eq!(a0, a1);
        assert!(user_channel_derivative(&layout, &[path], &y).norm() == 0.0);
        assert_eq!(a0[0], C64::new(1e-3, 0.0));
    }

    #[test]
    fn cascade_orders_agree() {
        let cfg = small_cfg();
        let layout = Layout::new(&cfg).unwrap();
        let geo = sample_scenario(&cfg, 11);
        let y: Vec<f64> = (0..12).map(|i| 1e-4 * (i as f64 - 6.0)).collect();
        let stack = build_stack(&layout, &y, &geo).unwrap();
        let codes = (0..12).map(|i| (i * 5) % 4).collect();
        let phases = PhaseStack::from_codes(4, 3, codes, QuantSet::new(2)).unwrap();
        let g = cascade(&stack, &phases).unwrap();
        let w = Precoder(DMatrix::from_fn(2, 2, |r, c| C64::new(r as f64 + 0.5, c as f64 - 0.3)));
        let fields = forward_fields(&stack, &phases, &w).unwrap();
        for (h, gk) in stack.h.iter().zip(&g) {
            for i in 0..2 {
                let left = h.transpose() * fields.column(i);
                let right = gk.transpose() * w.0.column(i);
                assert!((left[(0, 0)] - right[(0, 0)]).norm() <= 1e-12 * right[(0, 0)].norm());
            }
        }
    }

    #[test]
    fn single_atom_phase_rotates_cascade() {
        let mut cfg = small_cfg();
        cfg.system.atoms_per_layer = 1;
        cfg.system.atoms_per_row = 1;
        let layout = Layout::new(&cfg).unwrap();
        let geo = sample_scenario(&cfg, 2);
        let stack = build_stack(&layout, &[0.0; 3], &geo).unwrap();
        let mut phases = PhaseStack::ones(1, 3, QuantSet::new(2));
        let g0 = cascade(&stack, &phases).unwrap();
        let beta = C64::from_polar(1.0, 0.7);
        phases.set_value(1, 0, beta);
        let g1 = cascade(&stack, &phases).unwrap();
        for (a, b) in g0.iter().zip(&g1) {
            assert!((a * beta - b).norm() <= 1e-15 * a.norm());
        }
    }

    #[test]
    fn dimension_mismatch_detected() {
        let cfg = small_cfg();
        let layout = Layout::new(&cfg).unwrap();
        let geo = sample_scenario(&cfg, 1);
        let stack = build_stack(&layout, &[0.0; 12], &geo).unwrap();
        let phases = PhaseStack::ones(4, 2, QuantSet::new(1));
        assert!(cascade(&stack, &phases).is_err());
        assert!(build_stack(&layout, &[0.0; 5], &geo).is_err());
    }
}
