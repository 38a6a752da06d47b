//! Euclidean projection onto `{lower <= y <= upper, Δ y >= ζ}`.
//!
//! The difference rows of `Δ` only couple `y[l, n]` with `y[l-1, n]`, so
//! the projection decomposes into one small chain problem per atom index.
//! Each chain is solved exactly by a primal active-set method started at
//! the least feasible element.

use nalgebra::{DMatrix, DVector};

use super::{Architecture, ConstraintSystem};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub y: Vec<f64>,
    /// Worst of stationarity, primal infeasibility, dual infeasibility and
    /// complementarity at the returned point.
    pub kkt_residual: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Kind {
    Equality,
    Inequality,
}

#[derive(Clone, Debug)]
struct Row {
    coef: Vec<(usize, f64)>,
    rhs: f64,
    kind: Kind,
}

impl Row {
    fn dot(&self, v: &[f64]) -> f64 {
        self.coef.iter().map(|&(i, c)| c * v[i]).sum()
    }
}

fn chain_rows(lo: &[f64], hi: &[f64], zeta: &[f64]) -> Vec<Row> {
    let len = lo.len();
    let mut rows = Vec::with_capacity(3 * len);
    for l in 0..len {
        let lower = if l == 0 { lo[0].max(zeta[0]) } else { lo[l] };
        if lower >= hi[l] {
            rows.push(Row {
                coef: vec![(l, 1.0)],
                rhs: hi[l],
                kind: Kind::Equality,
            });
        } else {
            rows.push(Row {
                coef: vec![(l, 1.0)],
                rhs: lower,
                kind: Kind::Inequality,
            });
            rows.push(Row {
                coef: vec![(l, -1.0)],
                rhs: -hi[l],
                kind: Kind::Inequality,
            });
        }
        if l > 0 {
            rows.push(Row {
                coef: vec![(l, 1.0), (l - 1, -1.0)],
                rhs: zeta[l],
                kind: Kind::Inequality,
            });
        }
    }
    rows
}

/// Solves `min ½‖y − a‖²` subject to the working-set rows held with
/// equality. Returns the minimizer and the multipliers of the rows.
fn equality_qp(a: &[f64], rows: &[Row], work: &[usize]) -> Option<(Vec<f64>, Vec<f64>)> {
    let len = a.len();
    if work.is_empty() {
        return Some((a.to_vec(), Vec::new()));
    }
    let c = DMatrix::from_fn(work.len(), len, |r, col| {
        rows[work[r]]
            .coef
            .iter()
            .find(|&&(i, _)| i == col)
            .map_or(0.0, |&(_, v)| v)
    });
    let av = DVector::from_column_slice(a);
    let rhs = DVector::from_fn(work.len(), |r, _| rows[work[r]].rhs) - &c * &av;
    let gram = &c * c.transpose();
    let lambda = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => gram.lu().solve(&rhs)?,
    };
    let y = av + c.transpose() * &lambda;
    Some((y.as_slice().to_vec(), lambda.as_slice().to_vec()))
}

/// Projects `a` onto one chain: `lo <= y <= hi`, `y[0] >= zeta[0]`,
/// `y[l] - y[l-1] >= zeta[l]`.
pub fn project_chain(a: &[f64], lo: &[f64], hi: &[f64], zeta: &[f64]) -> Result<Projection> {
    let len = a.len();
    if lo.len() != len || hi.len() != len || zeta.len() != len {
        return Err(Error::DimensionMismatch("chain inputs differ in length".into()));
    }
    // Least element of the feasible lattice; the set is empty iff it
    // overshoots an upper bound.
    let mut y = vec![0.0; len];
    for l in 0..len {
        let floor = if l == 0 {
            lo[0].max(zeta[0])
        } else {
            lo[l].max(y[l - 1] + zeta[l])
        };
        if floor > hi[l] {
            return Err(Error::InfeasibleConstraints(format!(
                "chain position {l} needs at least {floor:.6e} but its upper bound is {:.6e}",
                hi[l]
            )));
        }
        y[l] = floor;
    }

    let rows = chain_rows(lo, hi, zeta);
    let mut work: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].kind == Kind::Equality).collect();
    let mut lambda = Vec::new();
    let max_iter = 50 * (rows.len() + len) + 50;
    for _ in 0..max_iter {
        let (target, mult) = equality_qp(a, &rows, &work)
            .ok_or_else(|| Error::Contract("singular working set in chain projection".into()))?;
        let p: Vec<f64> = target.iter().zip(&y).map(|(t, v)| t - v).collect();
        let pnorm = p.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = 1.0 + a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if pnorm <= 1e-15 * scale {
            // Stationary on the working set: drop the most negative
            // inequality multiplier or stop.
            let drop = work
                .iter()
                .zip(&mult)
                .filter(|(&i, _)| rows[i].kind == Kind::Inequality)
                .min_by(|x, y| x.1.total_cmp(y.1))
                .filter(|(_, &m)| m < -1e-14 * scale)
                .map(|(&i, _)| i);
            match drop {
                Some(i) => {
                    work.retain(|&w| w != i);
                    continue;
                }
                None => {
                    y = target;
                    lambda = mult;
                    break;
                }
            }
        }
        let mut alpha = 1.0;
        let mut blocking = None;
        for (i, row) in rows.iter().enumerate() {
            if work.contains(&i) {
                continue;
            }
            let cp = row.dot(&p);
            if cp < -1e-12 * pnorm {
                let step = ((row.rhs - row.dot(&y)) / cp).max(0.0);
                if step < alpha {
                    alpha = step;
                    blocking = Some(i);
                }
            }
        }
        for (v, dv) in y.iter_mut().zip(&p) {
            *v += alpha * dv;
        }
        if let Some(i) = blocking {
            work.push(i);
        }
    }

    // Snap working-set rows that pin a single coordinate so bounds hold to
    // the last bit.
    for &i in &work {
        if let [(j, c)] = rows[i].coef[..] {
            y[j] = rows[i].rhs / c;
        }
    }

    let mut residual = 0.0f64;
    let mut stationarity = y.iter().zip(a).map(|(v, t)| v - t).collect::<Vec<_>>();
    for (&i, &m) in work.iter().zip(&lambda) {
        for &(j, c) in &rows[i].coef {
            stationarity[j] -= c * m;
        }
        if rows[i].kind == Kind::Inequality {
            residual = residual.max(-m);
            residual = residual.max((m * (rows[i].dot(&y) - rows[i].rhs)).abs());
        }
    }
    residual = residual.max(stationarity.iter().fold(0.0, |m, v| m.max(v.abs())));
    for row in &rows {
        let slack = row.dot(&y) - row.rhs;
        residual = residual.max(match row.kind {
            Kind::Equality => slack.abs(),
            Kind::Inequality => -slack,
        });
    }
    Ok(Projection {
        y,
        kkt_residual: residual,
    })
}

/// Exact projection onto the full constraint set (no architecture pattern).
pub fn project_feasible(raw: &[f64], cs: &ConstraintSystem) -> Result<Projection> {
    if raw.len() != cs.dim() {
        return Err(Error::DimensionMismatch(format!(
            "morphing vector has {} entries, constraint system {}",
            raw.len(),
            cs.dim()
        )));
    }
    let na = cs.num_atoms;
    let nl = cs.num_layers;
    let mut y = vec![0.0; cs.dim()];
    let mut residual = 0.0f64;
    let gather = |v: &[f64], n: usize| (0..nl).map(|l| v[l * na + n]).collect::<Vec<_>>();
    for n in 0..na {
        let chain = project_chain(
            &gather(raw, n),
            &gather(&cs.lower, n),
            &gather(&cs.upper, n),
            &gather(&cs.zeta, n),
        )?;
        residual = residual.max(chain.kkt_residual);
        for (l, v) in chain.y.into_iter().enumerate() {
            y[l * na + n] = v;
        }
    }
    Ok(Projection {
        y,
        kkt_residual: residual,
    })
}

/// Projection followed by the architecture's equality pattern.
///
/// Rigid layers are pinned to zero inside the convex problem. DSIM first
/// projects onto the full set, then averages each layer, and re-projects the
/// layer means onto the layer-level chain only when averaging broke a
/// difference constraint.
pub fn project_for_mode(raw: &[f64], cs: &ConstraintSystem, mode: Architecture) -> Result<Projection> {
    match mode {
        Architecture::Sfim => project_feasible(raw, cs),
        Architecture::Rsim | Architecture::Hsim => project_feasible(raw, &cs.with_mode(mode)),
        Architecture::Dsim => {
            let first = project_feasible(raw, cs)?;
            let na = cs.num_atoms;
            let nl = cs.num_layers;
            let means: Vec<f64> = first
                .y
                .chunks(na)
                .map(|layer| layer.iter().sum::<f64>() / na as f64)
                .collect();
            let expand = |per_layer: &[f64]| {
                per_layer
                    .iter()
                    .flat_map(|&v| std::iter::repeat_n(v, na))
                    .collect::<Vec<f64>>()
            };
            let averaged = expand(&means);
            if cs.max_violation(&averaged) <= 0.0 {
                return Ok(Projection {
                    y: averaged,
                    kkt_residual: first.kkt_residual,
                });
            }
            let layer_max = |v: &[f64]| -> Vec<f64> {
                v.chunks(na)
                    .map(|layer| layer.iter().copied().fold(f64::NEG_INFINITY, f64::max))
                    .collect()
            };
            let layer_min = |v: &[f64]| -> Vec<f64> {
                v.chunks(na)
                    .map(|layer| layer.iter().copied().fold(f64::INFINITY, f64::min))
                    .collect()
            };
            debug_assert_eq!(means.len(), nl);
            let chain = project_chain(
                &means,
                &layer_max(&cs.lower),
                &layer_min(&cs.upper),
                &layer_max(&cs.zeta),
            )?;
            Ok(Projection {
                y: expand(&chain.y),
                kkt_residual: first.kkt_residual.max(chain.kkt_residual),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn system(na: usize, nl: usize, zeta: Vec<f64>, bound: f64) -> ConstraintSystem {
        ConstraintSystem::new(na, nl, zeta, bound).unwrap()
    }

    #[test]
    fn interior_point_unchanged() {
        let cs = system(2, 2, vec![-5.0; 4], 1.0);
        let raw = [0.1, -0.2, 0.3, 0.05];
        let p = project_feasible(&raw, &cs).unwrap();
        assert_eq!(p.y, raw.to_vec());
        assert!(p.kkt_residual <= 1e-15);
    }

    #[test]
    fn box_clip() {
        let cs = system(2, 2, vec![-5.0; 4], 1.0);
        let p = project_feasible(&[1.0 + 1e-3, 0.0, 0.0, 0.0], &cs).unwrap();
        assert_eq!(p.y, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn active_difference_splits_evenly() {
        // y1 - y0 >= 0 with target (1, -1): the projection meets in the middle.
        let p = project_chain(&[1.0, -1.0], &[-5.0; 2], &[5.0; 2], &[-10.0, 0.0]).unwrap();
        assert!((p.y[0]).abs() < 1e-15 && (p.y[1]).abs() < 1e-15);
        assert!(p.kkt_residual < 1e-14);
    }

    #[test]
    fn infeasible_system_reported() {
        // Three unit steps cannot fit in a box of half-width 1.
        let err = project_chain(&[0.0; 3], &[-1.0; 3], &[1.0; 3], &[-1.0, 1.0, 1.5]).unwrap_err();
        assert!(matches!(err, Error::InfeasibleConstraints(_)));
    }

    #[test]
    fn pinned_layers_for_hsim() {
        let cs = system(1, 3, vec![-5.0; 3], 1.0);
        let p = project_for_mode(&[0.5, 0.7, -0.4], &cs, Architecture::Hsim).unwrap();
        assert_eq!(p.y, vec![0.5, 0.0, -0.4]);
        let p = project_for_mode(&[0.5, 0.7, -0.4], &cs, Architecture::Rsim).unwrap();
        assert_eq!(p.y, vec![0.0; 3]);
    }

    #[test]
    fn dsim_repairs_after_averaging() {
        // Atom 1 has a stricter gap requirement than atom 0; the mean of a
        // feasible pair can violate it.
        let zeta = vec![-1.0, -1.0, 0.0, 0.5];
        let cs = system(2, 2, zeta, 1.0);
        let raw = [0.6, -0.2, 0.6, 0.3];
        let p = project_for_mode(&raw, &cs, Architecture::Dsim).unwrap();
        assert_eq!(p.y[0], p.y[1]);
        assert_eq!(p.y[2], p.y[3]);
        assert!(cs.max_violation(&p.y) <= 1e-12);
    }

    prop_compose! {
        fn chain_instance()(len in 1usize..7)
            (a in prop::collection::vec(-3.0f64..3.0, len),
             zeta in prop::collection::vec(-1.5f64..0.4, len))
            -> (Vec<f64>, Vec<f64>) { (a, zeta) }
    }

    proptest! {
        #[test]
        fn projection_is_feasible_and_idempotent((a, zeta) in chain_instance()) {
            let len = a.len();
            let lo = vec![-1.0; len];
            let hi = vec![1.0; len];
            let Ok(p) = project_chain(&a, &lo, &hi, &zeta) else { return Ok(()); };
            prop_assert!(p.kkt_residual <= 1e-9);
            let cs = system(1, len, zeta.clone(), 1.0);
            prop_assert!(cs.max_violation(&p.y) <= 1e-12);
            let again = project_chain(&p.y, &lo, &hi, &zeta).unwrap();
            for (u, v) in again.y.iter().zip(&p.y) {
                prop_assert!((u - v).abs() <= 1e-9);
            }
        }

        #[test]
        fn projection_is_non_expansive(
            (a, zeta) in chain_instance(),
            shift in prop::collection::vec(-1.0f64..1.0, 6),
        ) {
            let len = a.len();
            let b: Vec<f64> = a.iter().zip(&shift).map(|(x, s)| x + s).collect();
            let lo = vec![-1.0; len];
            let hi = vec![1.0; len];
            let (Ok(pa), Ok(pb)) = (project_chain(&a, &lo, &hi, &zeta), project_chain(&b, &lo, &hi, &zeta)) else {
                return Ok(());
            };
            let dist = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            prop_assert!(dist(&pa.y, &pb.y) <= dist(&a, &b) + 1e-9);
        }
    }
}
