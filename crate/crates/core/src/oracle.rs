//! Independent reference solvers used to check the optimized code paths.
//!
//! Everything here is deliberately naive: exhaustive enumeration or closed
//! forms, with no shared logic beyond the rate formulas.

use nalgebra::{DMatrix, DVector};

use crate::channel::{QuantSet, C64};
use crate::geometry::ConstraintSystem;
use crate::metrics::{rates_from_gains, RateReport};
use crate::phase_opt::LayerSurrogate;

/// Dense constraint rows `A y >= b` equivalent to `cs`.
pub fn constraint_rows(cs: &ConstraintSystem) -> (DMatrix<f64>, DVector<f64>) {
    let dim = cs.dim();
    let na = cs.num_atoms;
    let mut rows: Vec<(Vec<(usize, f64)>, f64)> = Vec::with_capacity(3 * dim);
    for i in 0..dim {
        rows.push((vec![(i, 1.0)], cs.lower[i]));
        rows.push((vec![(i, -1.0)], -cs.upper[i]));
        if i < na {
            rows.push((vec![(i, 1.0)], cs.zeta[i]));
        } else {
            rows.push((vec![(i, 1.0), (i - na, -1.0)], cs.zeta[i]));
        }
    }
    let mut a = DMatrix::zeros(rows.len(), dim);
    let mut b = DVector::zeros(rows.len());
    for (r, (entries, rhs)) in rows.into_iter().enumerate() {
        for (c, v) in entries {
            a[(r, c)] = v;
        }
        b[r] = rhs;
    }
    (a, b)
}

/// Groups variables that share a constraint row.
fn components(a: &DMatrix<f64>) -> Vec<Vec<usize>> {
    let n = a.ncols();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        p[x] = r;
        r
    }
    for row in a.row_iter() {
        let vars: Vec<usize> = (0..n).filter(|&c| row[c] != 0.0).collect();
        for w in vars.windows(2) {
            let (x, y) = (find(&mut parent, w[0]), find(&mut parent, w[1]));
            parent[x] = y;
        }
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut root_of = vec![usize::MAX; n];
    for v in 0..n {
        let r = find(&mut parent, v);
        if root_of[r] == usize::MAX {
            root_of[r] = groups.len();
            groups.push(Vec::new());
        }
        groups[root_of[r]].push(v);
    }
    groups
}

/// Projection of `a` onto a face `{A_S y = b_S}`, or `None` if the rows are
/// dependent.
fn face_projection(point: &DVector<f64>, rows: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    if rows.nrows() == 0 {
        return Some(point.clone());
    }
    let gram = rows * rows.transpose();
    let svd = gram.clone().svd(false, false);
    let smax = svd.singular_values.max();
    if svd.singular_values.min() <= 1e-12 * smax.max(1.0) {
        return None;
    }
    let nu = gram.lu().solve(&(rhs - rows * point))?;
    Some(point + rows.transpose() * nu)
}

/// Euclidean projection onto `{y : A y >= b}` by enumerating every set of
/// active rows within each connected component and keeping the closest
/// feasible face projection. Exponential in the component size, so only
/// for small instances. Returns `None` when the set is empty.
pub fn qp_projection_oracle(point: &[f64], a: &DMatrix<f64>, b: &DVector<f64>) -> Option<Vec<f64>> {
    let mut out = point.to_vec();
    for vars in components(a) {
        let rows: Vec<usize> = (0..a.nrows())
            .filter(|&r| vars.iter().any(|&c| a[(r, c)] != 0.0))
            .collect();
        assert!(rows.len() < 25, "component too large for enumeration");
        let sub_a = DMatrix::from_fn(rows.len(), vars.len(), |r, c| a[(rows[r], vars[c])]);
        let sub_b = DVector::from_iterator(rows.len(), rows.iter().map(|&r| b[r]));
        let p = DVector::from_iterator(vars.len(), vars.iter().map(|&c| point[c]));
        let mut best: Option<(f64, DVector<f64>)> = None;
        for mask in 0u32..(1 << rows.len()) {
            if mask.count_ones() as usize > vars.len() {
                continue;
            }
            let active: Vec<usize> = (0..rows.len()).filter(|r| mask & (1 << r) != 0).collect();
            let face_a = DMatrix::from_fn(active.len(), vars.len(), |r, c| sub_a[(active[r], c)]);
            let face_b = DVector::from_iterator(active.len(), active.iter().map(|&r| sub_b[r]));
            let Some(y) = face_projection(&p, &face_a, &face_b) else {
                continue;
            };
            let slack = &sub_a * &y - &sub_b;
            if slack.min() < -1e-10 {
                continue;
            }
            let dist = (&y - &p).norm_squared();
            if best.as_ref().is_none_or(|(d, _)| dist < *d) {
                best = Some((dist, y));
            }
        }
        let (_, y) = best?;
        for (i, &c) in vars.iter().enumerate() {
            out[c] = y[i];
        }
    }
    Some(out)
}

/// Best QoS-feasible assignment of one layer over all `U^N` code vectors.
/// Ties keep the lexicographically smallest code vector.
pub fn exhaustive_layer_search(
    sur: &LayerSurrogate,
    quant: &QuantSet,
    thresholds: &[f64],
    noise: &[f64],
) -> Option<(Vec<usize>, RateReport)> {
    let na = sur.num_atoms();
    let u = quant.len();
    let total = u.checked_pow(na as u32).expect("search space too large");
    let mut best: Option<(Vec<usize>, RateReport)> = None;
    let mut codes = vec![0usize; na];
    for index in 0..total {
        let mut rest = index;
        for c in codes.iter_mut().rev() {
            *c = rest % u;
            rest /= u;
        }
        let phi: Vec<C64> = codes.iter().map(|&c| quant.levels[c]).collect();
        let rep = rates_from_gains(&sur.gains(&phi), noise);
        if rep.rates.iter().zip(thresholds).any(|(r, t)| r < t) {
            continue;
        }
        if best.as_ref().is_none_or(|(_, b)| rep.r_sum > b.r_sum) {
            best = Some((codes.clone(), rep));
        }
    }
    best
}

/// Single-user capacity `log2(1 + P‖g‖²/σ²)` reached by matched filtering.
pub fn matched_filter_rate(g: &DVector<C64>, power: f64, noise: f64) -> f64 {
    (1.0 + power * g.norm_squared() / noise).log2()
}
