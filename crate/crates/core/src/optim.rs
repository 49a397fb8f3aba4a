//! Dense operator-splitting solver for convex QPs and LPs.
//!
//! Problems take the two-sided form
//!
//! ```text
//!     minimize    1/2 z'Pz + q'z
//!     subject to  l <= Az <= u
//! ```
//!
//! with `P` symmetric positive semidefinite (`P = 0` gives an LP) and
//! one-sided rows encoded through infinite bounds. The iteration is ADMM
//! with over-relaxation, Ruiz equilibration and residual-balancing updates
//! of the penalty parameter. Once the residuals meet the tolerances the
//! solver guesses the active set and re-solves the reduced KKT system
//! (polishing), which turns the moderately accurate ADMM iterate into a
//! near-exact vertex for LPs.
//!
//! Multipliers follow the convention `Pz + q + A'y = 0`, so `y_i < 0` marks
//! an active lower bound and `y_i > 0` an active upper bound.

use std::fmt::Write as _;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

mod active_set;

/// A convex QP in two-sided form. Construct with [`ConvexProblem::new`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexProblem {
    p: DMatrix<f64>,
    q: DVector<f64>,
    a: DMatrix<f64>,
    l: DVector<f64>,
    u: DVector<f64>,
}

impl ConvexProblem {
    pub fn new(p: DMatrix<f64>, q: DVector<f64>, a: DMatrix<f64>, l: DVector<f64>, u: DVector<f64>) -> Result<Self> {
        let n = q.len();
        let m = l.len();
        if p.nrows() != n || p.ncols() != n {
            return Err(Error::Problem(format!(
                "P is {}x{}, expected {n}x{n}",
                p.nrows(),
                p.ncols()
            )));
        }
        if a.ncols() != n || a.nrows() != m || u.len() != m {
            return Err(Error::Problem(format!(
                "A is {}x{}, l has {}, u has {}; expected A {m}x{n}",
                a.nrows(),
                a.ncols(),
                m,
                u.len()
            )));
        }
        if p.iter().chain(q.iter()).chain(a.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Problem("P, q and A must be finite".into()));
        }
        for i in 0..m {
            if l[i].is_nan() || u[i].is_nan() || l[i] > u[i] || l[i] == f64::INFINITY || u[i] == f64::NEG_INFINITY {
                return Err(Error::Problem(format!(
                    "row {i}: bounds [{}, {}] are not a valid interval",
                    l[i], u[i]
                )));
            }
        }
        let scale = p.amax().max(1.0);
        if (&p - p.transpose()).amax() > 1e-10 * scale {
            return Err(Error::Problem("P is not symmetric".into()));
        }
        if n > 0 && p.amax() > 0.0 {
            let min_eig = p.clone().symmetric_eigenvalues().min();
            if min_eig < -1e-9 * scale {
                return Err(Error::Problem(format!(
                    "P is not positive semidefinite (eigenvalue {min_eig:.3e})"
                )));
            }
        }
        Ok(Self { p, q, a, l, u })
    }

    /// An LP: `P = 0`.
    pub fn linear(q: DVector<f64>, a: DMatrix<f64>, l: DVector<f64>, u: DVector<f64>) -> Result<Self> {
        let n = q.len();
        Self::new(DMatrix::zeros(n, n), q, a, l, u)
    }

    pub fn n_vars(&self) -> usize {
        self.q.len()
    }

    pub fn n_constraints(&self) -> usize {
        self.l.len()
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn q(&self) -> &DVector<f64> {
        &self.q
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.l
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.u
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.p * z)) + self.q.dot(z)
    }

    /// Copy of the problem with constraint row `row` removed.
    pub fn without_constraint(&self, row: usize) -> Result<Self> {
        if row >= self.n_constraints() {
            return Err(Error::Problem(format!("no constraint row {row}")));
        }
        Ok(Self {
            p: self.p.clone(),
            q: self.q.clone(),
            a: self.a.clone().remove_row(row),
            l: self.l.clone().remove_row(row),
            u: self.u.clone().remove_row(row),
        })
    }

    /// Plain-text dump: `n m`, then the rows of P, q, the rows of A, l and u.
    pub fn to_dump(&self) -> String {
        let mut out = String::new();
        let (n, m) = (self.n_vars(), self.n_constraints());
        writeln!(out, "{n} {m}").unwrap();
        let line = |out: &mut String, vals: &mut dyn Iterator<Item = f64>| {
            let cells: Vec<String> = vals.map(|v| format!("{v:e}")).collect();
            writeln!(out, "{}", cells.join(" ")).unwrap();
        };
        for i in 0..n {
            line(&mut out, &mut self.p.row(i).iter().copied());
        }
        line(&mut out, &mut self.q.iter().copied());
        for i in 0..m {
            line(&mut out, &mut self.a.row(i).iter().copied());
        }
        line(&mut out, &mut self.l.iter().copied());
        line(&mut out, &mut self.u.iter().copied());
        out
    }

    pub fn from_dump(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let mut next_row = |what: &str, len: usize| -> Result<Vec<f64>> {
            let line = lines
                .next()
                .ok_or_else(|| Error::Problem(format!("dump ends before {what}")))?;
            let vals = line
                .split_whitespace()
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|_| Error::Problem(format!("bad number {s:?} in {what}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            if vals.len() != len {
                return Err(Error::Problem(format!(
                    "{what}: expected {len} values, found {}",
                    vals.len()
                )));
            }
            Ok(vals)
        };
        let dims = next_row("dimensions", 2)?;
        let (n, m) = (dims[0] as usize, dims[1] as usize);
        let mut p = DMatrix::zeros(n, n);
        for i in 0..n {
            let row = next_row("P", n)?;
            for (j, v) in row.into_iter().enumerate() {
                p[(i, j)] = v;
            }
        }
        let q = DVector::from_vec(next_row("q", n)?);
        let mut a = DMatrix::zeros(m, n);
        for i in 0..m {
            let row = next_row("A", n)?;
            for (j, v) in row.into_iter().enumerate() {
                a[(i, j)] = v;
            }
        }
        let l = DVector::from_vec(next_row("l", m)?);
        let u = DVector::from_vec(next_row("u", m)?);
        Self::new(p, q, a, l, u)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    MaxIters,
    /// A primal infeasibility certificate was found.
    Infeasible,
    /// A dual infeasibility certificate was found: the objective is unbounded below.
    Unbounded,
}

/// Solver parameters. The defaults are fixed so runs are reproducible.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverSettings {
    pub tol_abs: f64,
    pub tol_rel: f64,
    pub max_iters: usize,
    /// Initial penalty parameter.
    pub rho: f64,
    pub sigma: f64,
    /// Over-relaxation factor in (0, 2).
    pub alpha: f64,
    pub adaptive_rho: bool,
    pub adaptive_rho_interval: usize,
    pub scaling_iters: usize,
    pub polish: bool,
    pub tol_infeasible: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tol_abs: 1e-7,
            tol_rel: 1e-7,
            max_iters: 20_000,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            adaptive_rho: true,
            adaptive_rho_interval: 25,
            scaling_iters: 10,
            polish: true,
            tol_infeasible: 1e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    /// Primal variables.
    pub z: DVector<f64>,
    /// Constraint multipliers.
    pub y: DVector<f64>,
    pub objective: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    /// Whether the returned point comes from the active-set polish.
    pub polished: bool,
    pub primal_residual: f64,
    pub dual_residual: f64,
}

/// KKT residuals recomputed from a problem and a candidate solution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktResiduals {
    /// `||Az - proj_[l,u](Az)||_inf`
    pub primal: f64,
    /// `||Pz + q + A'y||_inf`
    pub dual: f64,
    /// Largest `|y_i|` times the distance of `(Az)_i` to the bound `y_i` points at;
    /// multipliers pointing at an infinite bound count with their full magnitude.
    pub complementarity: f64,
    pub primal_scale: f64,
    pub dual_scale: f64,
    pub multiplier_norm: f64,
}

impl KktResiduals {
    /// Whether every residual is within `factor` times the solver's scaled tolerance.
    pub fn certified(&self, tol_abs: f64, tol_rel: f64, factor: f64) -> bool {
        let eps_prim = tol_abs + tol_rel * self.primal_scale;
        let eps_dual = tol_abs + tol_rel * self.dual_scale;
        let eps_comp = tol_abs + self.multiplier_norm * eps_prim;
        self.primal <= factor * eps_prim && self.dual <= factor * eps_dual && self.complementarity <= factor * eps_comp
    }
}

/// Recomputes the KKT residuals of `(z, y)` for `problem`, independent of solver state.
pub fn kkt_residuals(problem: &ConvexProblem, z: &DVector<f64>, y: &DVector<f64>) -> Result<KktResiduals> {
    if z.len() != problem.n_vars() {
        return Err(Error::Dimension {
            context: "primal vector",
            expected: problem.n_vars(),
            actual: z.len(),
        });
    }
    if y.len() != problem.n_constraints() {
        return Err(Error::Dimension {
            context: "dual vector",
            expected: problem.n_constraints(),
            actual: y.len(),
        });
    }
    let az = problem.a() * z;
    let mut primal = 0.0_f64;
    let mut proj_norm = 0.0_f64;
    let mut comp = 0.0_f64;
    for i in 0..az.len() {
        let (lo, hi) = (problem.l[i], problem.u[i]);
        let proj = az[i].clamp(lo, hi);
        primal = primal.max((az[i] - proj).abs());
        proj_norm = proj_norm.max(proj.abs());
        let yi = y[i];
        let c = if yi > 0.0 {
            if hi.is_finite() {
                yi * (hi - az[i]).abs()
            } else {
                yi
            }
        } else if yi < 0.0 {
            if lo.is_finite() {
                -yi * (az[i] - lo).abs()
            } else {
                -yi
            }
        } else {
            0.0
        };
        comp = comp.max(c);
    }
    let pz = problem.p() * z;
    let aty = problem.a().tr_mul(y);
    let dual = (&pz + problem.q() + &aty).amax();
    Ok(KktResiduals {
        primal,
        dual,
        complementarity: comp,
        primal_scale: az.amax().max(proj_norm),
        dual_scale: pz.amax().max(aty.amax()).max(problem.q().amax()),
        multiplier_norm: y.amax(),
    })
}

impl Solution {
    pub fn kkt(&self, problem: &ConvexProblem) -> KktResiduals {
        kkt_residuals(problem, &self.z, &self.y).expect("solution dimensions match its problem")
    }
}

/// Equilibrated copy of a problem. Original quantities are recovered as
/// `z = D z_s`, `y = E y_s / c`, `(Az) = E^-1 (A_s z_s)`.
struct Scaled {
    p: DMatrix<f64>,
    q: DVector<f64>,
    a: DMatrix<f64>,
    l: DVector<f64>,
    u: DVector<f64>,
    d: DVector<f64>,
    e: DVector<f64>,
    c: f64,
}

fn limit_scaling(v: f64) -> f64 {
    if v < 1e-4 {
        1.0
    } else {
        v.min(1e4)
    }
}

fn equilibrate(problem: &ConvexProblem, iters: usize) -> Scaled {
    let (n, m) = (problem.n_vars(), problem.n_constraints());
    let mut s = Scaled {
        p: problem.p.clone(),
        q: problem.q.clone(),
        a: problem.a.clone(),
        l: problem.l.clone(),
        u: problem.u.clone(),
        d: DVector::from_element(n, 1.0),
        e: DVector::from_element(m, 1.0),
        c: 1.0,
    };
    for _ in 0..iters {
        let dt: DVector<f64> = DVector::from_fn(n, |j, _| {
            let norm = s.p.column(j).amax().max(s.a.column(j).amax());
            1.0 / limit_scaling(norm).sqrt()
        });
        let et: DVector<f64> = DVector::from_fn(m, |i, _| 1.0 / limit_scaling(s.a.row(i).amax()).sqrt());
        for j in 0..n {
            for i in 0..n {
                s.p[(i, j)] *= dt[i] * dt[j];
            }
            for i in 0..m {
                s.a[(i, j)] *= et[i] * dt[j];
            }
            s.q[j] *= dt[j];
            s.d[j] *= dt[j];
        }
        for i in 0..m {
            // infinite bounds stay infinite
            s.l[i] *= et[i];
            s.u[i] *= et[i];
            s.e[i] *= et[i];
        }
        let mean_col = if n > 0 {
            (0..n).map(|j| s.p.column(j).amax()).sum::<f64>() / n as f64
        } else {
            0.0
        };
        let ct = 1.0 / limit_scaling(mean_col.max(s.q.amax()));
        s.p *= ct;
        s.q *= ct;
        s.c *= ct;
    }
    s
}

const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const RHO_EQ_FACTOR: f64 = 1e3;
const POLISH_INTERVAL: usize = 100;
/// The active-set walk runs at iterations `FINISH_START * 2^j`.
const FINISH_START: usize = 200;
const FINISH_STEPS_PER_ROW: usize = 10;

fn rho_vector(rho: f64, l: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(l.len(), |i, _| {
        if l[i] == f64::NEG_INFINITY && u[i] == f64::INFINITY {
            RHO_MIN
        } else if l[i] == u[i] {
            RHO_EQ_FACTOR * rho
        } else {
            rho
        }
    })
}

fn factor(s: &Scaled, sigma: f64, rho: &DVector<f64>) -> Cholesky<f64, Dyn> {
    let n = s.q.len();
    let mut k = s.p.clone();
    for i in 0..n {
        k[(i, i)] += sigma;
    }
    let weighted = DMatrix::from_fn(s.a.nrows(), n, |i, j| rho[i] * s.a[(i, j)]);
    k += s.a.tr_mul(&weighted);
    Cholesky::new(k).expect("P + sigma I + A' diag(rho) A is positive definite")
}

/// Solves `problem` from a cold start.
pub fn solve(problem: &ConvexProblem, settings: &SolverSettings) -> Solution {
    let (n, m) = (problem.n_vars(), problem.n_constraints());
    let s = equilibrate(problem, settings.scaling_iters);
    let d_inv = s.d.map(|v| 1.0 / v);
    let e_inv = s.e.map(|v| 1.0 / v);
    let c_inv = 1.0 / s.c;

    let mut rho = settings.rho.clamp(RHO_MIN, RHO_MAX);
    let mut rho_vec = rho_vector(rho, &s.l, &s.u);
    let mut chol = factor(&s, settings.sigma, &rho_vec);

    let mut x = DVector::<f64>::zeros(n);
    let mut z = DVector::<f64>::zeros(m);
    let mut y = DVector::<f64>::zeros(m);

    let mut status = SolveStatus::MaxIters;
    let mut iterations = settings.max_iters;
    let mut prim_res = f64::INFINITY;
    let mut dual_res = f64::INFINITY;

    for k in 1..=settings.max_iters {
        let rhs = &x * settings.sigma - &s.q + s.a.tr_mul(&(rho_vec.component_mul(&z) - &y));
        let x_tilde = chol.solve(&rhs);
        let z_tilde = &s.a * &x_tilde;
        let x_new = &x_tilde * settings.alpha + &x * (1.0 - settings.alpha);
        let z_relaxed = &z_tilde * settings.alpha + &z * (1.0 - settings.alpha);
        let z_new = DVector::from_fn(m, |i, _| (z_relaxed[i] + y[i] / rho_vec[i]).clamp(s.l[i], s.u[i]));
        let y_new = &y + rho_vec.component_mul(&(&z_relaxed - &z_new));

        let delta_x = &x_new - &x;
        let delta_y = &y_new - &y;
        x = x_new;
        z = z_new;
        y = y_new;

        // Residuals in original units.
        let ax = &s.a * &x;
        let px = &s.p * &x;
        let aty = s.a.tr_mul(&y);
        prim_res = (&ax - &z).component_mul(&e_inv).amax();
        let ax_norm = ax.component_mul(&e_inv).amax();
        let z_norm = z.component_mul(&e_inv).amax();
        dual_res = (&px + &s.q + &aty).component_mul(&d_inv).amax() * c_inv;
        let px_norm = px.component_mul(&d_inv).amax() * c_inv;
        let aty_norm = aty.component_mul(&d_inv).amax() * c_inv;
        let q_norm = s.q.component_mul(&d_inv).amax() * c_inv;
        let eps_prim = settings.tol_abs + settings.tol_rel * ax_norm.max(z_norm);
        let eps_dual = settings.tol_abs + settings.tol_rel * px_norm.max(aty_norm).max(q_norm);

        if prim_res <= eps_prim && dual_res <= eps_dual {
            status = SolveStatus::Optimal;
            iterations = k;
            break;
        }
        if primal_infeasible(&s, &delta_y, &d_inv, settings.tol_infeasible) {
            status = SolveStatus::Infeasible;
            iterations = k;
            break;
        }
        if dual_infeasible(&s, &delta_x, &e_inv, settings.tol_infeasible) {
            status = SolveStatus::Unbounded;
            iterations = k;
            break;
        }

        // Degenerate LPs can stall ADMM long after the active set has settled;
        // a certified polish ends the run there.
        if settings.polish && k % POLISH_INTERVAL == 0 {
            let probe = Solution {
                objective: 0.0,
                z: x.component_mul(&s.d),
                y: y.component_mul(&s.e) * c_inv,
                status: SolveStatus::Optimal,
                iterations: k,
                polished: false,
                primal_residual: prim_res,
                dual_residual: dual_res,
            };
            let finish = k >= FINISH_START && (k / FINISH_START).is_power_of_two() && k % FINISH_START == 0;
            if let Some(polished) = polish(problem, &probe, settings, finish) {
                return polished;
            }
        }

        if settings.adaptive_rho && settings.adaptive_rho_interval > 0 && k % settings.adaptive_rho_interval == 0 {
            let prim_rel = prim_res / ax_norm.max(z_norm).max(1e-30);
            let dual_rel = dual_res / px_norm.max(aty_norm).max(q_norm).max(1e-30);
            let proposal = (rho * (prim_rel / dual_rel.max(1e-30)).sqrt()).clamp(RHO_MIN, RHO_MAX);
            if proposal > 5.0 * rho || proposal < 0.2 * rho {
                rho = proposal;
                rho_vec = rho_vector(rho, &s.l, &s.u);
                chol = factor(&s, settings.sigma, &rho_vec);
            }
        }
    }

    let z_orig = x.component_mul(&s.d);
    let y_orig = y.component_mul(&s.e) * c_inv;
    let mut solution = Solution {
        objective: problem.objective(&z_orig),
        z: z_orig,
        y: y_orig,
        status,
        iterations,
        polished: false,
        primal_residual: prim_res,
        dual_residual: dual_res,
    };
    if status == SolveStatus::Optimal && settings.polish {
        if let Some(polished) = polish(problem, &solution, settings, true) {
            solution = polished;
        }
    }
    solution
}

fn primal_infeasible(s: &Scaled, delta_y: &DVector<f64>, d_inv: &DVector<f64>, eps: f64) -> bool {
    // Certificate in scaled space on the unscaled-direction: E dy_s is proportional to dy.
    let dy = delta_y.component_mul(&s.e);
    let norm = dy.amax();
    if norm < 1e-30 {
        return false;
    }
    // A' dy in original units is D^-1 A_s' dy_s.
    let at_dy = s.a.tr_mul(delta_y).component_mul(d_inv);
    if at_dy.amax() > eps * norm {
        return false;
    }
    let mut support = 0.0;
    for i in 0..dy.len() {
        if dy[i] > 0.0 {
            if s.u[i].is_infinite() {
                return false;
            }
            support += s.u[i] / s.e[i] * dy[i];
        } else if dy[i] < 0.0 {
            if s.l[i].is_infinite() {
                return false;
            }
            support += s.l[i] / s.e[i] * dy[i];
        }
    }
    support < -eps * norm
}

fn dual_infeasible(s: &Scaled, delta_x: &DVector<f64>, e_inv: &DVector<f64>, eps: f64) -> bool {
    let dx = delta_x.component_mul(&s.d);
    let norm = dx.amax();
    if norm < 1e-30 {
        return false;
    }
    let c_inv = 1.0 / s.c;
    // P dx in original units is D^-1 P_s dx_s / c; q'dx is q_s'dx_s / c.
    let d_inv = s.d.map(|v| 1.0 / v);
    let p_dx = (&s.p * delta_x).component_mul(&d_inv) * c_inv;
    if p_dx.amax() > eps * norm {
        return false;
    }
    if s.q.dot(delta_x) * c_inv >= -eps * norm {
        return false;
    }
    let a_dx = (&s.a * delta_x).component_mul(e_inv);
    (0..a_dx.len()).all(|i| {
        let v = a_dx[i];
        match (s.l[i].is_finite(), s.u[i].is_finite()) {
            (true, true) => v.abs() <= eps * norm,
            (true, false) => v >= -eps * norm,
            (false, true) => v <= eps * norm,
            (false, false) => true,
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Active {
    Lower,
    Upper,
}

/// Tries to turn an approximate solution into a certified one: first by
/// re-solving on the active set its multipliers indicate, then, when
/// `finish` is set, by an active-set walk from its primal point.
fn polish(problem: &ConvexProblem, sol: &Solution, settings: &SolverSettings, finish: bool) -> Option<Solution> {
    let m = problem.n_constraints();
    let az = problem.a() * &sol.z;
    let guess: Vec<Option<Active>> = (0..m)
        .map(|i| {
            let (lo, hi) = (problem.l[i], problem.u[i]);
            if lo == hi || (lo.is_finite() && az[i] - lo < -sol.y[i]) {
                Some(Active::Lower)
            } else if hi.is_finite() && hi - az[i] < sol.y[i] {
                Some(Active::Upper)
            } else {
                None
            }
        })
        .collect();
    if let Some(done) = certify_active(problem, &guess, &sol.z, sol.iterations, settings) {
        return Some(done);
    }
    if !finish {
        return None;
    }
    let walked = active_set::finish(problem, &sol.z, FINISH_STEPS_PER_ROW * (problem.n_vars() + m))?;
    let mut active = vec![None; m];
    for (i, side) in walked.working {
        active[i] = Some(side);
    }
    for (i, a) in active.iter_mut().enumerate() {
        if problem.l[i] == problem.u[i] {
            *a = Some(Active::Lower);
        }
    }
    certify_active(problem, &active, &walked.z, sol.iterations, settings)
}

fn certify_active(
    problem: &ConvexProblem,
    active: &[Option<Active>],
    z0: &DVector<f64>,
    iterations: usize,
    settings: &SolverSettings,
) -> Option<Solution> {
    let (z, mut y) = solve_active(problem, active, z0)?;
    // A multiplier of the wrong sign means the active-set guess was wrong.
    for (i, a) in active.iter().enumerate() {
        let ok = problem.l[i] == problem.u[i]
            || match a {
                Some(Active::Lower) => y[i] <= 0.0,
                Some(Active::Upper) => y[i] >= 0.0,
                None => true,
            };
        if !ok {
            y[i] = 0.0;
        }
    }
    let kkt_res = kkt_residuals(problem, &z, &y).ok()?;
    if !kkt_res.certified(settings.tol_abs, settings.tol_rel, 1.0) {
        return None;
    }
    Some(Solution {
        objective: problem.objective(&z),
        z,
        y,
        status: SolveStatus::Optimal,
        iterations,
        polished: true,
        primal_residual: kkt_res.primal,
        dual_residual: kkt_res.dual,
    })
}

/// Solves the KKT system with the marked rows held at their bounds. A small
/// proximal term towards `z0` resolves non-unique optima to the point
/// nearest the iterate; iterative refinement then removes its bias.
fn solve_active(
    problem: &ConvexProblem,
    active: &[Option<Active>],
    z0: &DVector<f64>,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let (n, m) = (problem.n_vars(), problem.n_constraints());
    let rows: Vec<(usize, Active)> = active
        .iter()
        .enumerate()
        .filter_map(|(i, a)| a.map(|side| (i, side)))
        .collect();
    let k = rows.len();
    let dim = n + k;
    let delta = 1e-7;
    let mut kkt = DMatrix::<f64>::zeros(dim, dim);
    kkt.view_mut((0, 0), (n, n)).copy_from(problem.p());
    for (r, &(i, _)) in rows.iter().enumerate() {
        for j in 0..n {
            kkt[(n + r, j)] = problem.a[(i, j)];
            kkt[(j, n + r)] = problem.a[(i, j)];
        }
    }
    let exact = kkt.clone();
    for i in 0..n {
        kkt[(i, i)] += delta;
    }
    for r in 0..k {
        kkt[(n + r, n + r)] -= delta;
    }
    let lu = kkt.lu();
    let mut rhs = DVector::<f64>::zeros(dim);
    for j in 0..n {
        rhs[j] = -problem.q[j];
    }
    for (r, &(i, side)) in rows.iter().enumerate() {
        rhs[n + r] = match side {
            Active::Lower => problem.l[i],
            Active::Upper => problem.u[i],
        };
    }
    let mut first = rhs.clone();
    for j in 0..n {
        first[j] += delta * z0[j];
    }
    let mut sol_vec = lu.solve(&first)?;
    for _ in 0..10 {
        let resid = &rhs - &exact * &sol_vec;
        if resid.amax() < 1e-14 * (1.0 + rhs.amax()) {
            break;
        }
        sol_vec += lu.solve(&resid)?;
    }
    if sol_vec.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let z = sol_vec.rows(0, n).into_owned();
    let mut y = DVector::<f64>::zeros(m);
    for (r, &(i, _)) in rows.iter().enumerate() {
        y[i] = sol_vec[n + r];
    }
    Some((z, y))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    #[test]
    fn scalar_qp_with_lower_bound() {
        // min z^2 s.t. z >= 1
        let prob = ConvexProblem::new(
            DMatrix::from_element(1, 1, 2.0),
            dv(&[0.0]),
            DMatrix::from_element(1, 1, 1.0),
            dv(&[1.0]),
            dv(&[f64::INFINITY]),
        )
        .unwrap();
        let sol = solve(&prob, &SolverSettings::default());
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.z[0] - 1.0).abs() < 1e-8);
        assert!((sol.objective - 1.0).abs() < 1e-8);
        assert!((sol.y[0] + 2.0).abs() < 1e-6);
        assert!(sol.kkt(&prob).certified(1e-7, 1e-7, 10.0));
    }

    #[test]
    fn hand_constructed_pair_has_zero_residuals() {
        let prob = ConvexProblem::new(
            DMatrix::from_element(1, 1, 2.0),
            dv(&[0.0]),
            DMatrix::from_element(1, 1, 1.0),
            dv(&[1.0]),
            dv(&[f64::INFINITY]),
        )
        .unwrap();
        let r = kkt_residuals(&prob, &dv(&[1.0]), &dv(&[-2.0])).unwrap();
        assert!(r.primal <= 1e-12 && r.dual <= 1e-12 && r.complementarity <= 1e-12);

        let off = kkt_residuals(&prob, &dv(&[1.1]), &dv(&[-2.0])).unwrap();
        assert!(off.primal > 1e-3 || off.dual > 1e-3);
        let off = kkt_residuals(&prob, &dv(&[0.9]), &dv(&[-2.0])).unwrap();
        assert!(off.primal > 1e-3 || off.dual > 1e-3);
    }

    #[test]
    fn l1_epigraph_concentrates_on_largest_coefficient() {
        // vars (z1, z2, s1, s2): min s1 + s2, s >= |z|, 2 z1 + z2 = r
        let r = 3.0;
        let inf = f64::INFINITY;
        let a = DMatrix::from_row_slice(
            6,
            4,
            &[
                -1.0, 0.0, 1.0, 0.0, //
                1.0, 0.0, 1.0, 0.0, //
                0.0, -1.0, 0.0, 1.0, //
                0.0, 1.0, 0.0, 1.0, //
                2.0, 1.0, 0.0, 0.0, //
                2.0, 1.0, 0.0, 0.0,
            ],
        );
        let l = dv(&[0.0, 0.0, 0.0, 0.0, r, -inf]);
        let u = dv(&[inf, inf, inf, inf, inf, r]);
        let prob = ConvexProblem::linear(dv(&[0.0, 0.0, 1.0, 1.0]), a, l, u).unwrap();
        let sol = solve(&prob, &SolverSettings::default());
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.z[0] - r / 2.0).abs() < 1e-6, "{}", sol.z);
        assert!(sol.z[1].abs() < 1e-6);
        assert!((sol.objective - r / 2.0).abs() < 1e-6);
    }

    #[test]
    fn detects_primal_infeasibility() {
        // z >= 1 and z <= -1
        let inf = f64::INFINITY;
        let prob = ConvexProblem::linear(
            dv(&[1.0]),
            DMatrix::from_row_slice(2, 1, &[1.0, 1.0]),
            dv(&[1.0, -inf]),
            dv(&[inf, -1.0]),
        )
        .unwrap();
        let sol = solve(&prob, &SolverSettings::default());
        assert_eq!(sol.status, SolveStatus::Infeasible);
    }

    #[test]
    fn detects_unbounded_lp() {
        // min -z s.t. z >= 0
        let prob = ConvexProblem::linear(
            dv(&[-1.0]),
            DMatrix::from_element(1, 1, 1.0),
            dv(&[0.0]),
            dv(&[f64::INFINITY]),
        )
        .unwrap();
        let sol = solve(&prob, &SolverSettings::default());
        assert_eq!(sol.status, SolveStatus::Unbounded);
    }

    #[test]
    fn max_iters_is_reported() {
        let prob = ConvexProblem::new(
            DMatrix::identity(2, 2),
            dv(&[1.0, -3.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            dv(&[1.0]),
            dv(&[1.0]),
        )
        .unwrap();
        let settings = SolverSettings {
            max_iters: 1,
            ..Default::default()
        };
        let sol = solve(&prob, &settings);
        assert_eq!(sol.status, SolveStatus::MaxIters);
        assert_eq!(sol.iterations, 1);
    }

    #[test]
    fn equality_constrained_qp() {
        // min 1/2 |z|^2 + (1, -3)'z s.t. z1 + z2 = 1 -> z = (-1.5, 2.5)
        let prob = ConvexProblem::new(
            DMatrix::identity(2, 2),
            dv(&[1.0, -3.0]),
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            dv(&[1.0]),
            dv(&[1.0]),
        )
        .unwrap();
        let sol = solve(&prob, &SolverSettings::default());
        assert_eq!(sol.status, SolveStatus::Optimal);
        assert!((sol.z[0] + 1.5).abs() < 1e-8 && (sol.z[1] - 2.5).abs() < 1e-8);
    }

    #[test]
    fn rejects_malformed_problems() {
        let bad_p = ConvexProblem::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]),
            dv(&[0.0, 0.0]),
            DMatrix::zeros(0, 2),
            dv(&[]),
            dv(&[]),
        );
        assert!(bad_p.is_err());
        let indefinite = ConvexProblem::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]),
            dv(&[0.0, 0.0]),
            DMatrix::zeros(0, 2),
            dv(&[]),
            dv(&[]),
        );
        assert!(indefinite.is_err());
        let crossed = ConvexProblem::linear(dv(&[1.0]), DMatrix::from_element(1, 1, 1.0), dv(&[2.0]), dv(&[1.0]));
        assert!(crossed.is_err());
        let shape = ConvexProblem::linear(dv(&[1.0]), DMatrix::from_element(2, 1, 1.0), dv(&[0.0]), dv(&[1.0]));
        assert!(shape.is_err());
    }

    #[test]
    fn dump_round_trip() {
        let inf = f64::INFINITY;
        let prob = ConvexProblem::new(
            DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
            dv(&[1.0, -0.25]),
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.1, -3.0]),
            dv(&[-inf, 0.0]),
            dv(&[4.0, inf]),
        )
        .unwrap();
        let back = ConvexProblem::from_dump(&prob.to_dump()).unwrap();
        assert_eq!(back, prob);
    }

    #[test]
    fn solve_is_deterministic() {
        let prob = ConvexProblem::new(
            DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
            dv(&[1.0, -0.25]),
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.1, -3.0]),
            dv(&[f64::NEG_INFINITY, 0.0]),
            dv(&[4.0, f64::INFINITY]),
        )
        .unwrap();
        let s = SolverSettings::default();
        assert_eq!(solve(&prob, &s), solve(&prob, &s));
    }
}
