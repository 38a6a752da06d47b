//! Analytic gradients of the stream gains, rates and penalized objective
//! with respect to the stacked morphing vector.
//!
//! Displacing atom `n` of layer `l` changes row `n` of `omega[l]` (its own
//! incoming couplings), column `n` of `omega[l + 1]` (its outgoing
//! couplings) and, on the final layer, entry `n` of every user channel.
//! Forward fields and backward adjoints are computed once and shared by all
//! coordinates.

use nalgebra::{DMatrix, DVector};

use crate::channel::{
    backward_step, build_omega_with_derivative, build_user_channel, user_channel_derivative, PhaseStack, Precoder, C64,
};
use crate::error::{Error, Result};
use crate::geometry::Layout;
use crate::metrics::RateReport;
use crate::scenario::UserGeometry;

/// Per-evaluation scratch for the morphing gradient.
#[derive(Clone, Debug)]
pub struct GradWorkspace {
    pub num_atoms: usize,
    pub num_layers: usize,
    pub num_users: usize,
    /// `forward[l]` is the N×K field leaving layer `l`.
    pub forward: Vec<DMatrix<C64>>,
    /// `backward[l]` is the N×K adjoint arriving at layer `l`, so that
    /// `s[(k, i)] = backward[l].column(k)ᵀ forward[l].column(i)` for every `l`.
    pub backward: Vec<DMatrix<C64>>,
    /// Stream gains `g_kᵀ w_i`.
    pub s: DMatrix<C64>,
    /// `ds[k * K + i][l * N + n] = ∂s_ki / ∂y[l, n]`.
    ds: Vec<Vec<C64>>,
}

impl GradWorkspace {
    pub fn new(layout: &Layout, y: &[f64], geometry: &UserGeometry, phases: &PhaseStack, w: &Precoder) -> Result<Self> {
        let na = layout.num_atoms();
        let nl = layout.num_layers();
        let nk = geometry.num_users();
        if y.len() != na * nl || phases.num_atoms != na || phases.num_layers != nl {
            return Err(Error::DimensionMismatch(
                "gradient inputs disagree with the layout".into(),
            ));
        }
        if w.num_streams() != nk || w.num_antennas() != layout.num_antennas() {
            return Err(Error::DimensionMismatch(
                "precoder shape disagrees with the scenario".into(),
            ));
        }

        let mut omega = Vec::with_capacity(nl);
        let mut domega = Vec::with_capacity(nl);
        for l in 0..nl {
            let (o, d) = build_omega_with_derivative(layout, l, y);
            omega.push(o);
            domega.push(d);
        }
        let h: Vec<DVector<C64>> = geometry
            .paths
            .iter()
            .map(|p| build_user_channel(layout, p, y))
            .collect();
        let dh: Vec<DVector<C64>> = geometry
            .paths
            .iter()
            .map(|p| user_channel_derivative(layout, p, y))
            .collect();

        let mut forward: Vec<DMatrix<C64>> = Vec::with_capacity(nl);
        for l in 0..nl {
            let input = if l == 0 { &w.0 } else { &forward[l - 1] };
            let mut x = &omega[l] * input;
            for (n, mut row) in x.row_iter_mut().enumerate() {
                row *= phases.get(l, n);
            }
            forward.push(x);
        }

        let mut backward = vec![DMatrix::zeros(na, nk); nl];
        backward[nl - 1] = DMatrix::from_fn(na, nk, |n, k| h[k][n]);
        for l in (1..nl).rev() {
            let mut next = DMatrix::zeros(na, nk);
            for k in 0..nk {
                let col = backward_step(&omega[l], phases.layer(l), &backward[l].column(k).into_owned());
                next.set_column(k, &col);
            }
            backward[l - 1] = next;
        }

        let s = backward[nl - 1].transpose() * &forward[nl - 1];

        let mut ds = vec![vec![C64::new(0.0, 0.0); na * nl]; nk * nk];
        for l in 0..nl {
            let input = if l == 0 { &w.0 } else { &forward[l - 1] };
            // Incoming row term: φ_n · b_kn · (D_l x_i)_n.
            let dx = &domega[l] * input;
            // Outgoing column term through layer l + 1: C[n, k] f_in.
            let outgoing = (l + 1 < nl).then(|| {
                let mut scaled = backward[l + 1].clone();
                for (n, mut row) in scaled.row_iter_mut().enumerate() {
                    row *= phases.get(l + 1, n);
                }
                -(domega[l + 1].transpose() * scaled)
            });
            for n in 0..na {
                let idx = l * na + n;
                let phi = phases.get(l, n);
                for k in 0..nk {
                    let b = backward[l][(n, k)] * phi;
                    let c = match &outgoing {
                        Some(c) => c[(n, k)],
                        None => dh[k][n],
                    };
                    for i in 0..nk {
                        ds[k * nk + i][idx] = b * dx[(n, i)] + c * forward[l][(n, i)];
                    }
                }
            }
        }

        Ok(GradWorkspace {
            num_atoms: na,
            num_layers: nl,
            num_users: nk,
            forward,
            backward,
            s,
            ds,
        })
    }

    pub fn dim(&self) -> usize {
        self.num_atoms * self.num_layers
    }

    /// `∂s_ki / ∂y` for every coordinate.
    pub fn grad_s(&self, k: usize, i: usize) -> &[C64] {
        &self.ds[k * self.num_users + i]
    }

    /// Gradient of `J_ki = |s_ki|²` in watts per meter.
    pub fn grad_j(&self, k: usize, i: usize) -> Vec<f64> {
        let s = self.s[(k, i)].conj();
        self.grad_s(k, i).iter().map(|d| 2.0 * (s * d).re).collect()
    }

    /// Gradient of every per-user rate, in bits/s/Hz per meter.
    pub fn grad_rates(&self, noise: &[f64]) -> Vec<Vec<f64>> {
        let nk = self.num_users;
        let j = self.s.map(|v| v.norm_sqr());
        (0..nk)
            .map(|k| {
                let total: f64 = j.row(k).iter().sum::<f64>() + noise[k];
                let interference = total - j[(k, k)];
                let mut g = vec![0.0; self.dim()];
                for i in 0..nk {
                    let gj = self.grad_j(k, i);
                    let weight = if i == k {
                        1.0 / total
                    } else {
                        1.0 / total - 1.0 / interference
                    };
                    for (acc, v) in g.iter_mut().zip(&gj) {
                        *acc += weight * v;
                    }
                }
                g.iter_mut().for_each(|v| *v /= std::f64::consts::LN_2);
                g
            })
            .collect()
    }

    pub fn grad_sum_rate(&self, noise: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for g in self.grad_rates(noise) {
            for (acc, v) in out.iter_mut().zip(&g) {
                *acc += v;
            }
        }
        out
    }

    /// Largest relative mismatch between `backward[l]ᵀ forward[l]` and the
    /// final-layer gains over all split points.
    pub fn recomposition_error(&self) -> f64 {
        let scale = self
            .s
            .iter()
            .map(|v| v.norm())
            .fold(0.0, f64::max)
            .max(f64::MIN_POSITIVE);
        (0..self.num_layers)
            .map(|l| {
                let s = self.backward[l].transpose() * &self.forward[l];
                (s - &self.s).iter().map(|v| v.norm()).fold(0.0, f64::max) / scale
            })
            .fold(0.0, f64::max)
    }
}

/// Gradient of the penalized objective
/// `R_sum − (1/2ω) Σ (R_k^th − R_k + μ_k)²`.
pub fn grad_aug(
    ws: &GradWorkspace,
    report: &RateReport,
    thresholds: &[f64],
    mu: &[f64],
    omega: f64,
    noise: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0; ws.dim()];
    for (k, g) in ws.grad_rates(noise).into_iter().enumerate() {
        let weight = 1.0 + (thresholds[k] - report.rates[k] + mu[k]) / omega;
        for (acc, v) in out.iter_mut().zip(&g) {
            *acc += weight * v;
        }
    }
    out
}

/// Central finite differences of `f` around `y0` with step `h`.
pub fn fd_oracle<F: FnMut(&[f64]) -> f64>(mut f: F, y0: &[f64], h: f64) -> Vec<f64> {
    let mut y = y0.to_vec();
    (0..y0.len())
        .map(|i| {
            y[i] = y0[i] + h;
            let plus = f(&y);
            y[i] = y0[i] - h;
            let minus = f(&y);
            y[i] = y0[i];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Relative ∞-norm error between an analytic and a finite-difference
/// gradient, ignoring coordinates where both magnitudes fall below `floor`.
pub fn relative_error(analytic: &[f64], fd: &[f64], floor: f64) -> f64 {
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (a, f) in analytic.iter().zip(fd) {
        if a.abs() < floor && f.abs() < floor {
            continue;
        }
        num = num.max((a - f).abs());
        den = den.max(f.abs());
    }
    if den == 0.0 {
        num
    } else {
        num / den
    }
}
