//! Log-barrier interior-point solver for the concave rate surrogates shared
//! by the precoder and meta-atom response blocks.
//!
//! Every stream gain is linear in the complex decision vector,
//! `s_ki(v) = a_kiᵀ v`. Around a linearization point `v0` the rate of user
//! `k` is minorized by
//!
//! ```text
//! ln(1 + Σ_i ℓ_ki(v)) − ln S_k − (Σ_{i≠k} |s_ki(v)|² + σ_k² − S_k) / S_k
//! ```
//!
//! (in nats, gains normalized by `σ_k`), where `ℓ_ki` is the affine
//! underestimator of `|s_ki|²` at `v0` and `S_k` the interference-plus-noise
//! power at `v0`. The bound is tight at `v0`. The optional QoS constraint
//! `ℓ_kk(v) ≥ (2^{R_k^th} − 1)(Σ_{i≠k} |s_ki(v)|² + σ_k²)` is convex and
//! implies the true rate constraint. The decision vector is confined either
//! to the unit ball or to per-entry unit disks.
//!
//! The epigraph slacks of the underestimators and quadratic terms are tight
//! at any optimum, so they are eliminated and the problem is solved
//! directly in the `2n` real coordinates `z = [Re v; Im v]`.

use nalgebra::{DMatrix, DVector};

use crate::channel::C64;

/// Feasible set of the decision vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SetKind {
    /// `‖v‖² ≤ 1`.
    Ball,
    /// `|v_n|² ≤ 1` for every entry.
    UnitDisks,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BarrierOptions {
    /// Stop once the duality measure `m / t` falls below this value.
    pub gap: f64,
    pub growth: f64,
    pub max_newton: usize,
}

impl Default for BarrierOptions {
    fn default() -> Self {
        BarrierOptions {
            gap: 1e-8,
            growth: 10.0,
            max_newton: 80,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SolveOutcome {
    pub v: DVector<C64>,
    /// Surrogate value at the solution, in bits/s/Hz.
    pub surrogate: f64,
    /// Scaled Lagrangian stationarity plus complementarity gap.
    pub kkt_residual: f64,
    /// Whether the QoS constraints were enforced (false if they could not
    /// be made strictly feasible, or were vacuous).
    pub qos_enforced: bool,
    pub converged: bool,
}

/// One user's real-coordinate data.
struct UserTerms {
    /// Gradient of `1 + Σ_i ℓ_ki` (constant since `ℓ_ki` is affine).
    alpha_sum: DVector<f64>,
    /// `1 − Σ_i |s0_ki|²`, the constant part of `1 + Σ_i ℓ_ki`.
    base_sum: f64,
    /// `Σ_{i≠k} (γγᵀ + δδᵀ)`: interference quadratic form.
    interference: DMatrix<f64>,
    /// Interference-plus-noise at the linearization point (normalized).
    s_den: f64,
    alpha_kk: DVector<f64>,
    s0_kk_sq: f64,
    /// `2^{R^th} − 1`, or `None` if the QoS constraint is vacuous.
    qos: Option<f64>,
}

/// Concave surrogate problem in real coordinates.
pub struct Surrogate {
    n: usize,
    users: Vec<UserTerms>,
    set: SetKind,
}

type Eval = (f64, DVector<f64>, DMatrix<f64>);

fn real_forms(a: &DVector<C64>, scale: f64) -> (DVector<f64>, DVector<f64>) {
    let n = a.len();
    let mut gamma = DVector::zeros(2 * n);
    let mut delta = DVector::zeros(2 * n);
    for (j, c) in a.iter().enumerate() {
        let c = c * scale;
        gamma[j] = c.re;
        gamma[n + j] = -c.im;
        delta[j] = c.im;
        delta[n + j] = c.re;
    }
    (gamma, delta)
}

pub fn to_real(v: &DVector<C64>) -> DVector<f64> {
    let n = v.len();
    DVector::from_fn(2 * n, |j, _| if j < n { v[j].re } else { v[j - n].im })
}

pub fn to_complex(z: &DVector<f64>) -> DVector<C64> {
    let n = z.len() / 2;
    DVector::from_fn(n, |j, _| C64::new(z[j], z[n + j]))
}

impl Surrogate {
    /// `forms[k][i]` holds `a_ki`; `thresholds` (bits/s/Hz) enable the QoS
    /// constraint for users with a positive threshold.
    pub fn new(
        forms: &[Vec<DVector<C64>>],
        noise: &[f64],
        thresholds: Option<&[f64]>,
        v0: &DVector<C64>,
        set: SetKind,
    ) -> Self {
        let n = v0.len();
        let nk = forms.len();
        let z0 = to_real(v0);
        let users = (0..nk)
            .map(|k| {
                let scale = 1.0 / noise[k].sqrt();
                let mut alpha_sum = DVector::zeros(2 * n);
                let mut base_sum = 1.0;
                let mut interference = DMatrix::zeros(2 * n, 2 * n);
                let mut s_den = 1.0;
                let mut alpha_kk = DVector::zeros(2 * n);
                let mut s0_kk_sq = 0.0;
                for (i, a) in forms[k].iter().enumerate() {
                    let (gamma, delta) = real_forms(a, scale);
                    let re = gamma.dot(&z0);
                    let im = delta.dot(&z0);
                    let sq = re * re + im * im;
                    let alpha = (&gamma * re + &delta * im) * 2.0;
                    alpha_sum += &alpha;
                    base_sum -= sq;
                    if i == k {
                        alpha_kk = alpha;
                        s0_kk_sq = sq;
                    } else {
                        interference.ger(1.0, &gamma, &gamma, 1.0);
                        interference.ger(1.0, &delta, &delta, 1.0);
                        s_den += sq;
                    }
                }
                let qos = thresholds.map(|t| t[k]).filter(|&t| t > 0.0).map(|t| t.exp2() - 1.0);
                UserTerms {
                    alpha_sum,
                    base_sum,
                    interference,
                    s_den,
                    alpha_kk,
                    s0_kk_sq,
                    qos,
                }
            })
            .collect();
        Surrogate { n, users, set }
    }

    pub fn has_qos(&self) -> bool {
        self.users.iter().any(|u| u.qos.is_some())
    }

    /// Surrogate objective in nats, or `None` outside the log domain.
    fn objective(&self, z: &DVector<f64>) -> Option<f64> {
        let mut total = 0.0;
        for u in &self.users {
            let arg = u.base_sum + u.alpha_sum.dot(z);
            if !(arg > 0.0) {
                return None;
            }
            let quad = z.dot(&(&u.interference * z));
            total += arg.ln() - u.s_den.ln() - (quad + 1.0 - u.s_den) / u.s_den;
        }
        Some(total)
    }

    /// Surrogate objective in bits/s/Hz.
    pub fn value(&self, v: &DVector<C64>) -> Option<f64> {
        self.objective(&to_real(v)).map(|f| f / std::f64::consts::LN_2)
    }

    fn qos_slack(u: &UserTerms, c: f64, z: &DVector<f64>) -> f64 {
        u.alpha_kk.dot(z) - u.s0_kk_sq - c * (z.dot(&(&u.interference * z)) + 1.0)
    }

    fn set_slacks(&self, z: &DVector<f64>) -> Vec<f64> {
        match self.set {
            SetKind::Ball => vec![1.0 - z.norm_squared()],
            SetKind::UnitDisks => (0..self.n)
                .map(|j| 1.0 - z[j] * z[j] - z[self.n + j] * z[self.n + j])
                .collect(),
        }
    }

    fn num_set(&self) -> usize {
        match self.set {
            SetKind::Ball => 1,
            SetKind::UnitDisks => self.n,
        }
    }

    /// Adds `−Σ ln(g_set)` and its derivatives.
    fn add_set_barrier(
        &self,
        z: &DVector<f64>,
        val: &mut f64,
        derivs: Option<(&mut DVector<f64>, &mut DMatrix<f64>)>,
    ) -> bool {
        match self.set {
            SetKind::Ball => {
                let g = 1.0 - z.norm_squared();
                if !(g > 0.0) {
                    return false;
                }
                *val -= g.ln();
                let Some((grad, hess)) = derivs else { return true };
                let dim = z.len();
                let mut top = grad.rows_mut(0, dim);
                top += z * (2.0 / g);
                let mut block = hess.view_mut((0, 0), (dim, dim));
                for j in 0..dim {
                    block[(j, j)] += 2.0 / g;
                }
                block.ger(4.0 / (g * g), z, z, 1.0);
            }
            SetKind::UnitDisks => {
                let n = self.n;
                let mut derivs = derivs;
                for j in 0..n {
                    let (a, b) = (z[j], z[n + j]);
                    let g = 1.0 - a * a - b * b;
                    if !(g > 0.0) {
                        return false;
                    }
                    *val -= g.ln();
                    let Some((grad, hess)) = derivs.as_mut() else { continue };
                    grad[j] += 2.0 * a / g;
                    grad[n + j] += 2.0 * b / g;
                    let g2 = g * g;
                    hess[(j, j)] += 2.0 / g + 4.0 * a * a / g2;
                    hess[(n + j, n + j)] += 2.0 / g + 4.0 * b * b / g2;
                    hess[(j, n + j)] += 4.0 * a * b / g2;
                    hess[(n + j, j)] += 4.0 * a * b / g2;
                }
            }
        }
        true
    }

    /// Barrier function of the main problem (to be minimized), or `None`
    /// outside the domain. Derivatives are empty unless `derivs` is set.
    fn main_barrier(&self, z: &DVector<f64>, t: f64, qos: bool, derivs: bool) -> Option<Eval> {
        let dim = if derivs { 2 * self.n } else { 0 };
        let mut val = 0.0;
        let mut grad = DVector::zeros(dim);
        let mut hess = DMatrix::zeros(dim, dim);
        for u in &self.users {
            let arg = u.base_sum + u.alpha_sum.dot(z);
            if !(arg > 0.0) {
                return None;
            }
            let ez = &u.interference * z;
            let quad = z.dot(&ez);
            let f = arg.ln() - u.s_den.ln() - (quad + 1.0 - u.s_den) / u.s_den;
            val -= t * f;
            let mut weight = 2.0 * t / u.s_den;
            if derivs {
                grad.axpy(-t / arg, &u.alpha_sum, 1.0);
                grad.axpy(weight, &ez, 1.0);
                hess.ger(t / (arg * arg), &u.alpha_sum, &u.alpha_sum, 1.0);
            }
            if qos {
                if let Some(c) = u.qos {
                    let g = u.alpha_kk.dot(z) - u.s0_kk_sq - c * (quad + 1.0);
                    if !(g > 0.0) {
                        return None;
                    }
                    val -= g.ln();
                    if derivs {
                        let dg = &u.alpha_kk - &ez * (2.0 * c);
                        grad.axpy(-1.0 / g, &dg, 1.0);
                        hess.ger(1.0 / (g * g), &dg, &dg, 1.0);
                        weight += 2.0 * c / g;
                    }
                }
            }
            if derivs {
                hess.zip_apply(&u.interference, |h, e| *h += weight * e);
            }
        }
        let set_derivs = if derivs { Some((&mut grad, &mut hess)) } else { None };
        if !self.add_set_barrier(z, &mut val, set_derivs) {
            return None;
        }
        Some((val, grad, hess))
    }

    /// Phase-I barrier over `(z, s)`: maximize `s` with `qos_k(z) ≥ s`.
    fn phase1_barrier(&self, x: &DVector<f64>, t: f64, derivs: bool) -> Option<Eval> {
        let dim = 2 * self.n;
        let z = x.rows(0, dim).into_owned();
        let s = x[dim];
        let mut val = -t * s;
        let full = if derivs { dim + 1 } else { 0 };
        let mut grad = DVector::zeros(full);
        let mut hess = DMatrix::zeros(full, full);
        if derivs {
            grad[dim] = -t;
        }
        for u in &self.users {
            let Some(c) = u.qos else { continue };
            let g = Self::qos_slack(u, c, &z) - s;
            if !(g > 0.0) {
                return None;
            }
            if !derivs {
                val -= g.ln();
                continue;
            }
            let ez = &u.interference * &z;
            let mut dg = DVector::zeros(dim + 1);
            dg.rows_mut(0, dim).copy_from(&(&u.alpha_kk - &ez * (2.0 * c)));
            dg[dim] = -1.0;
            val -= g.ln();
            grad -= &dg / g;
            hess.ger(1.0 / (g * g), &dg, &dg, 1.0);
            let mut block = hess.view_mut((0, 0), (dim, dim));
            block += &u.interference * (2.0 * c / g);
        }
        let set_derivs = if derivs { Some((&mut grad, &mut hess)) } else { None };
        if !self.add_set_barrier(&z, &mut val, set_derivs) {
            return None;
        }
        Some((val, grad, hess))
    }

    fn constraint_count(&self, qos: bool) -> usize {
        let q = if qos {
            self.users.iter().filter(|u| u.qos.is_some()).count()
        } else {
            0
        };
        q + self.num_set()
    }

    /// Finds a point strictly satisfying every QoS constraint, starting
    /// from `z0` (which must be strictly inside the set).
    fn phase1(&self, z0: &DVector<f64>, opts: &BarrierOptions) -> Option<DVector<f64>> {
        let dim = 2 * self.n;
        let worst = self
            .users
            .iter()
            .filter_map(|u| u.qos.map(|c| Self::qos_slack(u, c, z0)))
            .fold(f64::INFINITY, f64::min);
        let mut x = DVector::zeros(dim + 1);
        x.rows_mut(0, dim).copy_from(z0);
        x[dim] = worst - 1.0 - worst.abs();
        let m = self.constraint_count(true) as f64;
        let mut t = 1.0;
        loop {
            let (next, _) = newton_center(|p, d| self.phase1_barrier(p, t, d), x, opts.max_newton);
            x = next;
            let z = x.rows(0, dim).into_owned();
            let min_slack = self
                .users
                .iter()
                .filter_map(|u| u.qos.map(|c| Self::qos_slack(u, c, &z)))
                .fold(f64::INFINITY, f64::min);
            if min_slack > 0.0 {
                return Some(z);
            }
            if m / t <= opts.gap {
                return None;
            }
            t *= opts.growth;
        }
    }

    /// Maximizes the surrogate from `v0`, which must lie in the set (it is
    /// pulled slightly inward when on the boundary).
    pub fn solve(&self, v0: &DVector<C64>, opts: &BarrierOptions) -> SolveOutcome {
        let mut z = to_real(v0);
        if self.set_slacks(&z).iter().any(|&g| g <= 1e-12) {
            z *= 0.999;
        }
        let mut qos = self.has_qos();
        if qos {
            let strictly = self.users.iter().all(|u| match u.qos {
                Some(c) => Self::qos_slack(u, c, &z) > 0.0,
                None => true,
            });
            if !strictly {
                match self.phase1(&z, opts) {
                    Some(feasible) => z = feasible,
                    None => qos = false,
                }
            }
        }
        if self.objective(&z).is_none() {
            // Outside the log domain of the surrogate; nothing to improve on.
            return SolveOutcome {
                v: v0.clone(),
                surrogate: f64::NEG_INFINITY,
                kkt_residual: f64::INFINITY,
                qos_enforced: qos,
                converged: false,
            };
        }
        let m = self.constraint_count(qos) as f64;
        let mut t = 1.0;
        let mut converged = true;
        let mut last_grad_norm;
        loop {
            let (next, ok) = newton_center(|p, d| self.main_barrier(p, t, qos, d), z, opts.max_newton);
            z = next;
            converged &= ok;
            last_grad_norm = self
                .main_barrier(&z, t, qos, true)
                .map_or(f64::INFINITY, |(_, g, _)| g.amax());
            if m / t <= opts.gap {
                break;
            }
            t *= opts.growth;
        }
        let surrogate = self.objective(&z).unwrap_or(f64::NEG_INFINITY) / std::f64::consts::LN_2;
        SolveOutcome {
            v: to_complex(&z),
            surrogate,
            kkt_residual: last_grad_norm / t + m / t,
            qos_enforced: qos,
            converged,
        }
    }
}

/// Damped Newton minimization of a self-concordant barrier. Returns the
/// final point and whether the Newton decrement reached its tolerance.
fn newton_center<F>(f: F, mut x: DVector<f64>, max_iter: usize) -> (DVector<f64>, bool)
where
    F: Fn(&DVector<f64>, bool) -> Option<Eval>,
{
    let Some((mut val, mut grad, mut hess)) = f(&x, true) else {
        return (x, false);
    };
    for _ in 0..max_iter {
        let dim = x.len();
        let step = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&(-&grad)),
            None => {
                let shift = 1e-10 * hess.diagonal().amax().max(1.0);
                let reg = &hess + DMatrix::identity(dim, dim) * shift;
                match reg.cholesky() {
                    Some(ch) => ch.solve(&(-&grad)),
                    None => return (x, false),
                }
            }
        };
        let decrement = -grad.dot(&step);
        // Below this the change in value is lost in rounding of `val`.
        let floor = 1e-10_f64.max(64.0 * f64::EPSILON * val.abs());
        if !(decrement > floor) {
            return (x, true);
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = &x + &step * alpha;
            if let Some((v, _, _)) = f(&cand, false) {
                if v <= val - 0.25 * alpha * decrement {
                    accepted = Some(cand);
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some(cand) = accepted else {
            return (x, decrement <= 1e3 * floor);
        };
        let Some(next) = f(&cand, true) else {
            return (x, false);
        };
        x = cand;
        (val, grad, hess) = next;
    }
    (x, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dotu(a: &DVector<C64>, v: &DVector<C64>) -> C64 {
        a.iter().zip(v.iter()).map(|(x, y)| x * y).sum()
    }

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn real_complex_round_trip() {
        let v = DVector::from_vec(vec![c(1.0, -2.0), c(0.5, 0.25)]);
        assert_eq!(to_complex(&to_real(&v)), v);
    }

    #[test]
    fn surrogate_is_tight_at_linearization_point() {
        let forms = vec![
            vec![
                DVector::from_vec(vec![c(1.0, 0.2), c(-0.3, 0.5)]),
                DVector::from_vec(vec![c(0.1, 0.0), c(0.2, -0.1)]),
            ],
            vec![
                DVector::from_vec(vec![c(0.0, 0.4), c(0.3, 0.3)]),
                DVector::from_vec(vec![c(-0.7, 0.1), c(0.9, 0.0)]),
            ],
        ];
        let noise = [0.05, 0.08];
        let v0 = DVector::from_vec(vec![c(0.3, -0.1), c(0.2, 0.4)]);
        let sur = Surrogate::new(&forms, &noise, None, &v0, SetKind::Ball);
        let mut true_rate = 0.0;
        for k in 0..2 {
            let s: Vec<C64> = forms[k].iter().map(|a| dotu(a, &v0)).collect();
            let total: f64 = s.iter().map(|v| v.norm_sqr()).sum::<f64>() + noise[k];
            let interf = total - s[k].norm_sqr();
            true_rate += (total / interf).log2();
        }
        assert!((sur.value(&v0).unwrap() - true_rate).abs() < 1e-12);
    }

    #[test]
    fn single_user_ball_reaches_matched_filter() {
        let a = DVector::from_vec(vec![c(0.8, -0.1), c(0.2, 0.6), c(-0.4, 0.3)]);
        let forms = vec![vec![a.clone()]];
        let noise = [0.01];
        let mut v = DVector::from_vec(vec![c(0.5, 0.0), c(0.0, 0.0), c(0.0, 0.0)]);
        for _ in 0..30 {
            let sur = Surrogate::new(&forms, &noise, None, &v, SetKind::Ball);
            v = sur.solve(&v, &BarrierOptions::default()).v;
        }
        let s = dotu(&a, &v);
        let optimum = (1.0 + a.norm_squared() / noise[0]).log2();
        let achieved = (1.0 + s.norm_sqr() / noise[0]).log2();
        assert!(optimum - achieved < 1e-6, "{optimum} vs {achieved}");
    }

    #[test]
    fn phase1_restores_qos() {
        // Two users sharing a ball-constrained vector; start with user 1 starved.
        let forms = vec![
            vec![
                DVector::from_vec(vec![c(1.0, 0.0), c(0.0, 0.0)]),
                DVector::from_vec(vec![c(0.0, 0.0), c(0.1, 0.0)]),
            ],
            vec![
                DVector::from_vec(vec![c(0.1, 0.0), c(0.0, 0.0)]),
                DVector::from_vec(vec![c(0.0, 0.0), c(1.0, 0.0)]),
            ],
        ];
        let noise = [0.01, 0.01];
        let v0 = DVector::from_vec(vec![c(0.9, 0.0), c(0.05, 0.0)]);
        let thresholds = [1.0, 1.0];
        let sur = Surrogate::new(&forms, &noise, Some(&thresholds), &v0, SetKind::Ball);
        let out = sur.solve(&v0, &BarrierOptions::default());
        assert!(out.qos_enforced);
        for k in 0..2 {
            let s: Vec<C64> = forms[k].iter().map(|a| dotu(a, &out.v)).collect();
            let interf = s
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != k)
                .map(|(_, v)| v.norm_sqr())
                .sum::<f64>();
            let rate = (1.0 + s[k].norm_sqr() / (interf + noise[k])).log2();
            assert!(rate >= 1.0 - 1e-9, "user {k} rate {rate}");
        }
    }

    #[test]
    fn unit_disks_respected() {
        let forms = vec![vec![DVector::from_vec(vec![c(1.0, 1.0), c(-0.5, 2.0)])]];
        let v0 = DVector::from_vec(vec![c(1.0, 0.0), c(1.0, 0.0)]);
        let sur = Surrogate::new(&forms, &[0.1], None, &v0, SetKind::UnitDisks);
        let out = sur.solve(&v0, &BarrierOptions::default());
        assert!(out.v.iter().all(|x| x.norm() <= 1.0));
        assert!(out.converged);
    }
}
