//! Dense primal active-set method used to finish ADMM runs.
//!
//! Started from an approximate solution, it walks to an exact vertex (or
//! face, for quadratic objectives) with ratio tests and multiplier sign
//! checks. Bounds are relaxed just enough for the start point to be
//! feasible; the caller re-solves on the final working set with the true
//! bounds and certifies the result.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::{Active, ConvexProblem};

pub(super) struct Finish {
    pub z: DVector<f64>,
    /// Working rows with the bound each one is held at.
    pub working: Vec<(usize, Active)>,
}

fn rows_of(a: &DMatrix<f64>, rows: &[(usize, Active)]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), a.ncols(), |r, j| a[(rows[r].0, j)])
}

/// Orthonormal basis of the null space of `aw`, whose `k` rows are assumed
/// linearly independent.
fn null_space(aw: &DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let k = aw.nrows();
    if k == 0 {
        return DMatrix::identity(n, n);
    }
    if k >= n {
        return DMatrix::zeros(n, 0);
    }
    // The eigensolver can fail to converge on these Gram matrices; the SVD
    // of the same matrix gives the same basis and is more reliable.
    let svd = aw.tr_mul(aw).svd(true, false);
    let u = svd.u.as_ref().expect("requested U");
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]));
    DMatrix::from_fn(n, n - k, |i, c| u[(i, order[c])])
}

/// Minimizer of `p'Pp/2 + g'p` over the null space `zb`. Returns the step and
/// whether it is a ray along directions without curvature.
fn direction(p: &DMatrix<f64>, g: &DVector<f64>, zb: &DMatrix<f64>) -> (DVector<f64>, bool) {
    let n = g.len();
    if zb.ncols() == 0 {
        return (DVector::zeros(n), false);
    }
    let gz = zb.tr_mul(g);
    let h = zb.tr_mul(&(p * zb));
    let eig = SymmetricEigen::new(h);
    let mu_max = eig.eigenvalues.amax();
    let mu_tol = 1e-10 * mu_max.max(1.0);
    let coeff = eig.eigenvectors.tr_mul(&gz);
    let g_tol = 1e-11 * (1.0 + g.amax());
    let flat: Vec<usize> = (0..coeff.len()).filter(|&j| eig.eigenvalues[j] <= mu_tol).collect();
    let flat_norm = flat.iter().fold(0.0_f64, |m, &j| m.max(coeff[j].abs()));
    let mut u = DVector::zeros(coeff.len());
    let ray = flat_norm > g_tol;
    for j in 0..coeff.len() {
        let curved = eig.eigenvalues[j] > mu_tol;
        let c = match (ray, curved) {
            (true, false) => -coeff[j],
            (false, true) => -coeff[j] / eig.eigenvalues[j],
            _ => 0.0,
        };
        u += eig.eigenvectors.column(j) * c;
    }
    (zb * u, ray)
}

/// Steepest-descent ray for a linear objective: `g` projected onto the null
/// space of the working rows, with the least-squares multipliers
/// `A_W' y ~ -g`.
fn lp_direction(aw: &DMatrix<f64>, g: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
    if aw.nrows() == 0 {
        return Some((-g, DVector::zeros(0)));
    }
    let gram = aw * aw.transpose();
    let rhs = -(aw * g);
    let y = match gram.clone().cholesky() {
        Some(c) => c.solve(&rhs),
        None => gram.lu().solve(&rhs)?,
    };
    let step = -(g + aw.tr_mul(&y));
    Some((step, y))
}

/// Multipliers of the working rows from `A_W' y = -g`.
fn multipliers(aw: &DMatrix<f64>, g: &DVector<f64>) -> Option<DVector<f64>> {
    let gram = aw * aw.transpose();
    let rhs = -(aw * g);
    gram.lu().solve(&rhs)
}

/// Greedy selection of linearly independent rows.
fn independent(a: &DMatrix<f64>, candidates: &[(usize, Active)]) -> Vec<(usize, Active)> {
    let n = a.ncols();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut out = Vec::new();
    for &(i, side) in candidates {
        let row = a.row(i).transpose();
        let norm = row.norm();
        if norm == 0.0 {
            continue;
        }
        let mut r = row.clone_owned();
        for b in &basis {
            let c = b.dot(&r);
            r -= b * c;
        }
        if r.norm() > 1e-9 * norm && basis.len() < n {
            basis.push(&r / r.norm());
            out.push((i, side));
        }
    }
    out
}

pub(super) fn finish(problem: &ConvexProblem, z0: &DVector<f64>, max_steps: usize) -> Option<Finish> {
    let (n, m) = (problem.n_vars(), problem.n_constraints());
    let a = problem.a();
    let p = problem.p();

    // Equality rows are held throughout; move the start onto them first.
    let eq: Vec<(usize, Active)> = (0..m)
        .filter(|&i| problem.l[i] == problem.u[i])
        .map(|i| (i, Active::Lower))
        .collect();
    let mut working = independent(a, &eq);
    let mut z = z0.clone();
    if !working.is_empty() {
        let aw = rows_of(a, &working);
        let target = DVector::from_fn(working.len(), |r, _| problem.l[working[r].0]);
        let gap = target - &aw * &z;
        let corr = (&aw * aw.transpose()).lu().solve(&gap)?;
        z += aw.tr_mul(&corr);
    }
    let az = a * &z;
    let lo = DVector::from_fn(m, |i, _| problem.l[i].min(az[i]));
    let hi = DVector::from_fn(m, |i, _| problem.u[i].max(az[i]));
    let is_eq = |i: usize| problem.l[i] == problem.u[i];

    let lp = p.iter().all(|v| *v == 0.0);
    let mut stalls = 0usize;
    for _ in 0..max_steps {
        let g = p * &z + &problem.q;
        let aw = rows_of(a, &working);
        let (step, ray, lp_y) = if lp {
            let (step, y) = lp_direction(&aw, &g)?;
            let ray = step.amax() > 1e-11 * (1.0 + g.amax());
            (if ray { step } else { DVector::zeros(n) }, ray, Some(y))
        } else {
            let (step, ray) = direction(p, &g, &null_space(&aw, n));
            (step, ray, None)
        };
        if step.iter().any(|v| !v.is_finite()) {
            return None;
        }
        if step.amax() <= 1e-14 * (1.0 + z.amax()) {
            if working.is_empty() {
                return Some(Finish { z, working });
            }
            let y = match lp_y {
                Some(y) => y,
                None => multipliers(&aw, &g)?,
            };
            let y_tol = 1e-12 * (1.0 + y.amax());
            let wrong = |r: usize| -> f64 {
                let (i, side) = working[r];
                if is_eq(i) {
                    return 0.0;
                }
                match side {
                    Active::Lower => y[r],
                    Active::Upper => -y[r],
                }
            };
            let leaving = if stalls > n {
                // Bland's rule against cycling at degenerate vertices.
                (0..working.len())
                    .filter(|&r| wrong(r) > y_tol)
                    .min_by_key(|&r| working[r].0)
            } else {
                (0..working.len())
                    .filter(|&r| wrong(r) > y_tol)
                    .max_by(|&r, &s| wrong(r).total_cmp(&wrong(s)))
            };
            match leaving {
                None => return Some(Finish { z, working }),
                Some(r) => {
                    working.remove(r);
                    continue;
                }
            }
        }

        let ap = a * &step;
        let az = a * &z;
        let step_norm = step.norm();
        let mut alpha = if ray { f64::INFINITY } else { 1.0 };
        let mut block: Option<(usize, Active)> = None;
        for i in 0..m {
            if working.iter().any(|&(w, _)| w == i) {
                continue;
            }
            let eps = 1e-9 * a.row(i).norm() * step_norm;
            let (t, side) = if ap[i] > eps && hi[i].is_finite() {
                ((hi[i] - az[i]) / ap[i], Active::Upper)
            } else if ap[i] < -eps && lo[i].is_finite() {
                ((lo[i] - az[i]) / ap[i], Active::Lower)
            } else {
                continue;
            };
            let t = t.max(0.0);
            if t < alpha {
                alpha = t;
                block = Some((i, side));
            }
        }
        if alpha.is_infinite() {
            return None;
        }
        z += &step * alpha;
        if let Some(b) = block {
            working.push(b);
        }
        if alpha == 0.0 {
            stalls += 1;
        } else {
            stalls = 0;
        }
    }
    None
}
