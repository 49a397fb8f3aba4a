//! Ensemble-consistent counterfactual explanations.
//!
//! Every model contributes one fidelity constraint on a shared change vector
//! `delta`. Each constraint is affine in `delta`:
//!
//! ```text
//!     a_i(delta) = offset_i + g_i' delta
//! ```
//!
//! and the relaxed program is
//!
//! ```text
//!     minimize    complexity(delta) + lambda * sum_i xi_i
//!     subject to  dist(a_i(delta)) <= tol_i + xi_i      (regression)
//!                 a_i(delta) >= margin - xi_i            (classification)
//!                 xi >= 0
//! ```
//!
//! The hard-constrained program is the `lambda -> infinity` limit. A single
//! model gives the classic closest counterfactual, so the per-model baseline
//! and the ensemble explanation share one code path.
//!
//! For regression ensembles the constraint reads the residual of a virtual
//! sensor after the sensor readings are corrected by `delta`. With
//! [`Anchor::History`] every row of the model's input window and the alarm
//! row get their own correction; otherwise one correction is shared by the
//! model input and the observation (see [`Snapshot`]).

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::netgen::{ReadingsPanel, SensorKind};
use crate::optim::{self, ConvexProblem, KktResiduals, SolveStatus, SolverSettings};
use crate::sensors::{window_mean_all, Ensemble, LinearModel};

/// Threshold on the largest slack below which an explanation counts as
/// feasible without relaxation.
pub const SLACK_FEASIBILITY_TOL: f64 = 1e-6;

/// Allowed excess of a re-evaluated constraint over its tolerance.
pub const CERTIFICATE_TOL: f64 = 1e-6;

/// Strict margin for classification constraints.
pub const CLASSIFICATION_MARGIN: f64 = 1e-6;

const MAX_CUT_ROUNDS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Complexity {
    /// `sum_j |delta_j|`
    L1,
    /// `sum_j delta_j^2`
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dist {
    Abs,
    Squared,
}

impl Dist {
    pub fn apply(self, a: f64) -> f64 {
        match self {
            Dist::Abs => a.abs(),
            Dist::Squared => a * a,
        }
    }
}

/// What the virtual sensors read when a constraint is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Anchor {
    /// Models read the mean of the window preceding the alarm step, the same
    /// input the detector used; the correction shifts that window and the
    /// current reading alike. Zero change is feasible exactly when the
    /// detector is silent.
    Window,
    /// Models read the alarm-step row itself.
    Snapshot,
    /// Each row of the window and the alarm-step row are corrected
    /// separately, so a fault that differs from step to step can be undone
    /// where it occurred.
    History,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Tolerance {
    Uniform(f64),
    PerConstraint(Vec<f64>),
}

impl Tolerance {
    fn resolve(&self, m: usize) -> Result<Vec<f64>> {
        let tols = match self {
            Tolerance::Uniform(d) => vec![*d; m],
            Tolerance::PerConstraint(v) => {
                if v.len() != m {
                    return Err(Error::Dimension {
                        context: "per-constraint tolerances",
                        expected: m,
                        actual: v.len(),
                    });
                }
                v.clone()
            }
        };
        if tols.iter().any(|d| !(*d >= 0.0 && d.is_finite())) {
            return Err(Error::Config("tolerances must be finite and non-negative".into()));
        }
        Ok(tols)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CfConfig {
    pub lambda: f64,
    pub complexity: Complexity,
    pub dist: Dist,
    pub tolerance: Tolerance,
    pub solver: SolverSettings,
}

impl Default for CfConfig {
    fn default() -> Self {
        Self {
            lambda: 1e3,
            complexity: Complexity::L1,
            dist: Dist::Abs,
            tolerance: Tolerance::Uniform(0.0),
            solver: SolverSettings::default(),
        }
    }
}

impl CfConfig {
    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.tolerance = Tolerance::Uniform(tol);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if let Tolerance::Uniform(d) = self.tolerance {
            if !(d >= 0.0 && d.is_finite()) {
                return Err(Error::Config(format!("tolerance must be non-negative, got {d}")));
            }
        }
        Ok(())
    }
}

/// The point being explained.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    /// Alarm step, when taken from a panel.
    pub t: Option<usize>,
    /// Observed readings; the counterfactual is `observed + delta`.
    pub observed: Vec<f64>,
    /// What the virtual sensors read before correction.
    pub model_input: Vec<f64>,
    /// Input rows corrected one by one, oldest first; `model_input` is their
    /// mean. Empty when one correction serves input and observation.
    pub window_rows: Vec<Vec<f64>>,
}

impl Snapshot {
    /// A bare point: models read the point itself.
    pub fn point(x: Vec<f64>) -> Self {
        Self {
            t: None,
            model_input: x.clone(),
            observed: x,
            window_rows: Vec::new(),
        }
    }

    /// Corrections per channel: one block per window row, then the observation.
    pub fn blocks(&self) -> usize {
        self.window_rows.len() + 1
    }

    /// Length of the change vector.
    pub fn n_changes(&self) -> usize {
        if self.window_rows.is_empty() {
            self.len()
        } else {
            self.blocks() * self.len()
        }
    }

    pub fn len(&self) -> usize {
        self.observed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observed.is_empty()
    }
}

/// Reads the panel at alarm step `t`.
pub fn snapshot_at_alarm(panel: &ReadingsPanel, ensemble: &Ensemble, t: usize, anchor: Anchor) -> Result<Snapshot> {
    ensemble.check_layout(panel.kinds())?;
    if t < ensemble.window() || t >= panel.n_steps() {
        return Err(Error::TimeIndex {
            t,
            reason: format!("alarm step must lie in [{}, {})", ensemble.window(), panel.n_steps()),
        });
    }
    let observed = panel.row(t).to_vec();
    let window_rows = match anchor {
        Anchor::History => (t - ensemble.window()..t).map(|s| panel.row(s).to_vec()).collect(),
        Anchor::Window | Anchor::Snapshot => Vec::new(),
    };
    let model_input = match anchor {
        Anchor::Window | Anchor::History => window_mean_all(panel, t, ensemble.window())?,
        Anchor::Snapshot => observed.clone(),
    };
    Ok(Snapshot {
        t: Some(t),
        observed,
        model_input,
        window_rows,
    })
}

/// Residual of `model` at `snapshot` corrected by `delta`, minus `target`.
pub fn model_residual(model: &LinearModel, snapshot: &Snapshot, delta: &[f64], target: f64) -> Result<f64> {
    check_width(model, snapshot)?;
    let n = model.n_sensors();
    if delta.len() != snapshot.n_changes() {
        return Err(Error::Dimension {
            context: "change vector",
            expected: snapshot.n_changes(),
            actual: delta.len(),
        });
    }
    let h = snapshot.window_rows.len();
    let shifted: Vec<f64> = if h == 0 {
        snapshot.model_input.iter().zip(delta).map(|(x, d)| x + d).collect()
    } else {
        (0..n)
            .map(|j| snapshot.model_input[j] + (0..h).map(|b| delta[b * n + j]).sum::<f64>() / h as f64)
            .collect()
    };
    let obs = delta.len() - n;
    let pred = model.predict_full(&shifted)?;
    Ok(pred - (snapshot.observed[model.target] + delta[obs + model.target]) - target)
}

fn check_width(model: &LinearModel, snapshot: &Snapshot) -> Result<()> {
    let n = model.n_sensors();
    let bad =
        snapshot.len() != n || snapshot.model_input.len() != n || snapshot.window_rows.iter().any(|r| r.len() != n);
    if bad {
        return Err(Error::Dimension {
            context: "snapshot width",
            expected: n,
            actual: snapshot.len(),
        });
    }
    Ok(())
}

/// Linear classifier `sign(weights . x + bias)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearClassifier {
    pub fn score(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ConstraintForm {
    /// `dist(a) <= tol + xi`
    Fidelity(Dist),
    /// `a >= margin - xi`
    Margin,
}

/// `a(delta) = offset + gradient . delta`
#[derive(Debug, Clone, PartialEq)]
struct AffineConstraint {
    offset: f64,
    gradient: Vec<f64>,
    tol: f64,
}

impl AffineConstraint {
    fn eval(&self, delta: &[f64]) -> f64 {
        self.offset + self.gradient.iter().zip(delta).map(|(g, d)| g * d).sum::<f64>()
    }
}

fn regression_constraint(model: &LinearModel, snapshot: &Snapshot, target: f64, tol: f64) -> Result<AffineConstraint> {
    check_width(model, snapshot)?;
    let n = model.n_sensors();
    let offset = model_residual(model, snapshot, &vec![0.0; snapshot.n_changes()], target)?;
    let h = snapshot.window_rows.len();
    let gradient = if h == 0 {
        (0..n).map(|j| model.weight_for_channel(j).unwrap_or(-1.0)).collect()
    } else {
        let mut g = vec![0.0; snapshot.n_changes()];
        for b in 0..h {
            for j in 0..n {
                g[b * n + j] = model.weight_for_channel(j).unwrap_or(0.0) / h as f64;
            }
        }
        g[h * n + model.target] = -1.0;
        g
    };
    Ok(AffineConstraint { offset, gradient, tol })
}

/// Variable layout `[delta (d) | epigraph s (d, L1 only) | xi (m)]`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Layout {
    d: usize,
    m: usize,
    l1: bool,
}

impl Layout {
    fn xi(&self, i: usize) -> usize {
        self.d * if self.l1 { 2 } else { 1 } + i
    }

    fn n_vars(&self) -> usize {
        self.xi(self.m)
    }
}

/// A counterfactual program in solver form.
#[derive(Debug, Clone)]
pub struct CfProgram {
    problem: ConvexProblem,
    layout: Layout,
    constraints: Vec<AffineConstraint>,
    form: ConstraintForm,
    lambda: f64,
    complexity: Complexity,
}

impl CfProgram {
    pub fn problem(&self) -> &ConvexProblem {
        &self.problem
    }

    pub fn n_changes(&self) -> usize {
        self.layout.d
    }

    pub fn n_constraints(&self) -> usize {
        self.layout.m
    }

    fn build(
        d: usize,
        constraints: Vec<AffineConstraint>,
        form: ConstraintForm,
        lambda: f64,
        complexity: Complexity,
    ) -> Result<Self> {
        let layout = Layout {
            d,
            m: constraints.len(),
            l1: complexity == Complexity::L1,
        };
        let n = layout.n_vars();
        let mut p = DMatrix::zeros(n, n);
        let mut q = DVector::zeros(n);
        match complexity {
            Complexity::L1 => {
                for j in 0..d {
                    q[d + j] = 1.0;
                }
            }
            Complexity::L2 => {
                for j in 0..d {
                    p[(j, j)] = 2.0;
                }
            }
        }
        for i in 0..layout.m {
            q[layout.xi(i)] = lambda;
        }

        let inf = f64::INFINITY;
        let mut rows: Vec<(Vec<f64>, f64, f64)> = Vec::new();
        if layout.l1 {
            for j in 0..d {
                // s_j - delta_j >= 0 and s_j + delta_j >= 0
                let mut lo = vec![0.0; n];
                lo[j] = -1.0;
                lo[d + j] = 1.0;
                rows.push((lo, 0.0, inf));
                let mut hi = vec![0.0; n];
                hi[j] = 1.0;
                hi[d + j] = 1.0;
                rows.push((hi, 0.0, inf));
            }
        }
        for i in 0..layout.m {
            let mut row = vec![0.0; n];
            row[layout.xi(i)] = 1.0;
            rows.push((row, 0.0, inf));
        }
        for (i, c) in constraints.iter().enumerate() {
            match form {
                ConstraintForm::Fidelity(Dist::Abs) => {
                    // offset + g.delta - xi <= tol
                    let mut upper = vec![0.0; n];
                    upper[..d].copy_from_slice(&c.gradient);
                    upper[layout.xi(i)] = -1.0;
                    rows.push((upper, -inf, c.tol - c.offset));
                    // offset + g.delta + xi >= -tol
                    let mut lower = vec![0.0; n];
                    lower[..d].copy_from_slice(&c.gradient);
                    lower[layout.xi(i)] = 1.0;
                    rows.push((lower, -c.tol - c.offset, inf));
                }
                ConstraintForm::Fidelity(Dist::Squared) => {
                    // Outer linearization of a^2 <= tol + xi; refined by cuts.
                    let root = c.tol.sqrt();
                    let mut points = vec![root, -root];
                    if c.offset.abs() > root {
                        points.push(c.offset);
                    }
                    if root == 0.0 {
                        points.dedup();
                    }
                    for a0 in points {
                        rows.push(square_cut(&layout, i, c, a0));
                    }
                }
                ConstraintForm::Margin => {
                    // offset + g.delta + xi >= margin
                    let mut row = vec![0.0; n];
                    row[..d].copy_from_slice(&c.gradient);
                    row[layout.xi(i)] = 1.0;
                    rows.push((row, CLASSIFICATION_MARGIN - c.offset, inf));
                }
            }
        }
        let problem = assemble(p, q, rows)?;
        Ok(Self {
            problem,
            layout,
            constraints,
            form,
            lambda,
            complexity,
        })
    }

    fn add_rows(&mut self, extra: Vec<(Vec<f64>, f64, f64)>) -> Result<()> {
        let pr = &self.problem;
        let mut rows: Vec<(Vec<f64>, f64, f64)> = (0..pr.n_constraints())
            .map(|i| (pr.a().row(i).iter().copied().collect(), pr.lower()[i], pr.upper()[i]))
            .collect();
        rows.extend(extra);
        self.problem = assemble(pr.p().clone(), pr.q().clone(), rows)?;
        Ok(())
    }

    fn complexity_of(&self, delta: &[f64]) -> f64 {
        match self.complexity {
            Complexity::L1 => delta.iter().map(|d| d.abs()).sum(),
            Complexity::L2 => delta.iter().map(|d| d * d).sum(),
        }
    }

    /// Excess of each constraint over its tolerance at `delta` with slacks ignored.
    fn excess(&self, delta: &[f64]) -> Vec<f64> {
        self.constraints
            .iter()
            .map(|c| {
                let a = c.eval(delta);
                match self.form {
                    ConstraintForm::Fidelity(dist) => dist.apply(a) - c.tol,
                    ConstraintForm::Margin => CLASSIFICATION_MARGIN - a,
                }
            })
            .collect()
    }
}

/// Tangent cut of `a^2 <= tol + xi` at `a0`: `2 a0 g.delta - xi <= tol + a0^2 - 2 a0 offset`.
fn square_cut(layout: &Layout, i: usize, c: &AffineConstraint, a0: f64) -> (Vec<f64>, f64, f64) {
    let mut row = vec![0.0; layout.n_vars()];
    for (r, g) in row.iter_mut().zip(&c.gradient) {
        *r = 2.0 * a0 * g;
    }
    row[layout.xi(i)] = -1.0;
    (row, f64::NEG_INFINITY, c.tol + a0 * a0 - 2.0 * a0 * c.offset)
}

fn assemble(p: DMatrix<f64>, q: DVector<f64>, rows: Vec<(Vec<f64>, f64, f64)>) -> Result<ConvexProblem> {
    let n = q.len();
    let m = rows.len();
    let mut a = DMatrix::zeros(m, n);
    let mut l = DVector::zeros(m);
    let mut u = DVector::zeros(m);
    for (i, (row, lo, hi)) in rows.into_iter().enumerate() {
        for (j, v) in row.into_iter().enumerate() {
            a[(i, j)] = v;
        }
        l[i] = lo;
        u[i] = hi;
    }
    ConvexProblem::new(p, q, a, l, u)
}

/// A solved counterfactual.
#[derive(Debug, Clone, PartialEq)]
pub struct Counterfactual {
    /// Proposed change, one block of channels per corrected row; the last
    /// block is `x_cf - x_orig`.
    pub delta: Vec<f64>,
    pub x_cf: Vec<f64>,
    /// One slack per constraint, in model order.
    pub slacks: Vec<f64>,
    /// `complexity(delta) + lambda * sum(slacks)`
    pub objective: f64,
    pub feasible_without_slack: bool,
    /// Largest excess of a constraint over its tolerance at `delta`, slacks ignored.
    pub max_excess: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    /// KKT residuals of the final solve, recomputed from the solution.
    pub kkt: KktResiduals,
    /// Whether `kkt` is within ten times the solver tolerance.
    pub certified: bool,
}

impl Counterfactual {
    pub fn n_channels(&self) -> usize {
        self.x_cf.len()
    }

    /// Change of the observed row, `x_cf - x_orig`.
    pub fn observation_change(&self) -> &[f64] {
        &self.delta[self.delta.len() - self.n_channels()..]
    }

    /// Total absolute change per channel over all corrected rows.
    pub fn attribution(&self) -> Vec<f64> {
        let n = self.n_channels();
        let mut out = vec![0.0; n];
        for (i, d) in self.delta.iter().enumerate() {
            out[i % n] += d.abs();
        }
        out
    }

    /// Writes `label,kind,delta,attribution,normalized_attribution,slack` rows,
    /// where `delta` is the change of the observed row. `slack_by_channel`
    /// maps each channel to the slack of the model targeting it, if any.
    pub fn write_fingerprint_csv<W: Write>(
        &self,
        labels: &[String],
        kinds: &[SensorKind],
        slack_by_channel: &[Option<f64>],
        out: W,
    ) -> Result<()> {
        let attribution = self.attribution();
        let normalized = crate::localize::normalize_explanation(&attribution);
        let delta = self.observation_change();
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Io {
            path: None,
            source: std::io::Error::other(e),
        };
        w.write_record([
            "label",
            "kind",
            "delta",
            "attribution",
            "normalized_attribution",
            "slack",
        ])
        .map_err(io)?;
        for j in 0..delta.len() {
            w.write_record([
                labels[j].clone(),
                kinds[j].to_string(),
                delta[j].to_string(),
                attribution[j].to_string(),
                normalized[j].to_string(),
                slack_by_channel[j].map_or_else(String::new, |s| s.to_string()),
            ])
            .map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Slack of each model indexed by its target channel.
pub fn slacks_by_channel(ensemble: &Ensemble, cf: &Counterfactual) -> Vec<Option<f64>> {
    let mut out = vec![None; ensemble.n_sensors()];
    for (m, s) in ensemble.models().iter().zip(&cf.slacks) {
        out[m.target] = Some(*s);
    }
    out
}

/// The origin with a matching dual when no change is needed. Every cost term
/// is non-negative and vanishes there; the dual prices each slack at `lambda`
/// and splits each unit of L1 cost between the two epigraph rows.
fn zero_solution(program: &CfProgram) -> Option<(DVector<f64>, DVector<f64>)> {
    let Layout { d, m, l1 } = program.layout;
    if program.excess(&vec![0.0; d]).iter().any(|e| *e > 0.0) {
        return None;
    }
    let z = DVector::zeros(program.problem.n_vars());
    let mut y = DVector::zeros(program.problem.n_constraints());
    let first_slack_row = if l1 { 2 * d } else { 0 };
    if l1 {
        for r in 0..2 * d {
            y[r] = -0.5;
        }
    }
    for i in 0..m {
        y[first_slack_row + i] = -program.lambda;
    }
    Some((z, y))
}

fn solve_program(mut program: CfProgram, observed: &[f64], settings: &SolverSettings) -> Result<Counterfactual> {
    let d = program.layout.d;
    if let Some((z, y)) = zero_solution(&program) {
        let kkt = optim::kkt_residuals(&program.problem, &z, &y)?;
        if kkt.certified(settings.tol_abs, settings.tol_rel, 1.0) {
            return Ok(Counterfactual {
                delta: vec![0.0; d],
                x_cf: observed.to_vec(),
                slacks: vec![0.0; program.layout.m],
                objective: 0.0,
                feasible_without_slack: true,
                max_excess: program
                    .excess(&vec![0.0; d])
                    .into_iter()
                    .fold(f64::NEG_INFINITY, f64::max),
                status: SolveStatus::Optimal,
                iterations: 0,
                certified: kkt.certified(settings.tol_abs, settings.tol_rel, 10.0),
                kkt,
            });
        }
    }
    let mut rounds = 0;
    let (solution, delta, slacks) = loop {
        let sol = optim::solve(&program.problem, settings);
        if sol.status != SolveStatus::Optimal {
            return Err(Error::Solver {
                status: sol.status,
                iterations: sol.iterations,
                primal: sol.primal_residual,
                dual: sol.dual_residual,
            });
        }
        let delta: Vec<f64> = sol.z.rows(0, d).iter().copied().collect();
        let slacks: Vec<f64> = (0..program.layout.m).map(|i| sol.z[program.layout.xi(i)]).collect();
        let ConstraintForm::Fidelity(Dist::Squared) = program.form else {
            break (sol, delta, slacks);
        };
        // Add a tangent cut wherever the quadratic constraint is still violated.
        let mut cuts = Vec::new();
        for (i, c) in program.constraints.iter().enumerate() {
            let a = c.eval(&delta);
            let violation = a * a - c.tol - slacks[i];
            if violation > settings.tol_abs.max(1e-9) * (1.0 + c.tol + a * a) {
                cuts.push(square_cut(&program.layout, i, c, a));
            }
        }
        rounds += 1;
        if cuts.is_empty() || rounds >= MAX_CUT_ROUNDS {
            break (sol, delta, slacks);
        }
        program.add_rows(cuts)?;
    };

    let kkt = solution.kkt(&program.problem);
    let certified = kkt.certified(settings.tol_abs, settings.tol_rel, 10.0);
    let excess = program.excess(&delta);
    let max_excess = excess.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let max_slack = slacks.iter().copied().fold(0.0_f64, f64::max);
    let feasible_without_slack = max_slack <= SLACK_FEASIBILITY_TOL;
    if feasible_without_slack {
        if let Some((index, e)) = excess
            .iter()
            .enumerate()
            .find(|(_, e)| **e > CERTIFICATE_TOL + max_slack)
        {
            return Err(Error::Certificate { index, excess: *e });
        }
    }
    let objective = program.complexity_of(&delta) + program.lambda * slacks.iter().sum::<f64>();
    let obs = delta.len() - observed.len();
    Ok(Counterfactual {
        x_cf: observed.iter().zip(&delta[obs..]).map(|(x, d)| x + d).collect(),
        delta,
        slacks,
        objective,
        feasible_without_slack,
        max_excess,
        status: solution.status,
        iterations: solution.iterations,
        kkt,
        certified,
    })
}

/// Builds the relaxed regression program for `models` at `snapshot` with
/// prediction-error targets `targets` (one per model).
pub fn build_regression_cf(
    models: &[LinearModel],
    snapshot: &Snapshot,
    targets: &[f64],
    cfg: &CfConfig,
) -> Result<CfProgram> {
    cfg.validate()?;
    if models.is_empty() {
        return Err(Error::Empty("models"));
    }
    if targets.len() != models.len() {
        return Err(Error::Dimension {
            context: "counterfactual targets",
            expected: models.len(),
            actual: targets.len(),
        });
    }
    let tols = cfg.tolerance.resolve(models.len())?;
    let constraints = models
        .iter()
        .zip(targets)
        .zip(&tols)
        .map(|((m, &y), &tol)| regression_constraint(m, snapshot, y, tol))
        .collect::<Result<Vec<_>>>()?;
    CfProgram::build(
        snapshot.n_changes(),
        constraints,
        ConstraintForm::Fidelity(cfg.dist),
        cfg.lambda,
        cfg.complexity,
    )
}

/// One explanation for every model of `ensemble`, with residual targets zero.
pub fn ensemble_counterfactual(ensemble: &Ensemble, snapshot: &Snapshot, cfg: &CfConfig) -> Result<Counterfactual> {
    let targets = vec![0.0; ensemble.len()];
    ensemble_counterfactual_with_targets(ensemble, snapshot, &targets, cfg)
}

pub fn ensemble_counterfactual_with_targets(
    ensemble: &Ensemble,
    snapshot: &Snapshot,
    targets: &[f64],
    cfg: &CfConfig,
) -> Result<Counterfactual> {
    let program = build_regression_cf(ensemble.models(), snapshot, targets, cfg)?;
    solve_program(program, &snapshot.observed, &cfg.solver)
}

/// Closest counterfactual for a single model, the per-model baseline.
///
/// A per-constraint `cfg.tolerance` must have exactly one entry.
pub fn independent_counterfactual(
    model: &LinearModel,
    snapshot: &Snapshot,
    target: f64,
    cfg: &CfConfig,
) -> Result<Counterfactual> {
    let program = build_regression_cf(std::slice::from_ref(model), snapshot, &[target], cfg)?;
    solve_program(program, &snapshot.observed, &cfg.solver)
}

/// Per-model baselines for every model of `ensemble`, each using that model's tolerance.
pub fn independent_counterfactuals(
    ensemble: &Ensemble,
    snapshot: &Snapshot,
    cfg: &CfConfig,
) -> Result<Vec<Counterfactual>> {
    let tols = cfg.tolerance.resolve(ensemble.len())?;
    ensemble
        .models()
        .iter()
        .zip(tols)
        .map(|(m, tol)| {
            let single = CfConfig {
                tolerance: Tolerance::Uniform(tol),
                ..cfg.clone()
            };
            independent_counterfactual(m, snapshot, 0.0, &single)
        })
        .collect()
}

/// One explanation under which each classifier outputs its target label.
pub fn classification_ensemble_cf(
    classifiers: &[LinearClassifier],
    x_orig: &[f64],
    targets: &[i8],
    cfg: &CfConfig,
) -> Result<Counterfactual> {
    cfg.validate()?;
    if classifiers.is_empty() {
        return Err(Error::Empty("classifiers"));
    }
    if targets.len() != classifiers.len() {
        return Err(Error::Dimension {
            context: "classification targets",
            expected: classifiers.len(),
            actual: targets.len(),
        });
    }
    let d = x_orig.len();
    let constraints = classifiers
        .iter()
        .zip(targets)
        .map(|(c, &y)| {
            if c.weights.len() != d {
                return Err(Error::Dimension {
                    context: "classifier width",
                    expected: d,
                    actual: c.weights.len(),
                });
            }
            let y = match y {
                1 => 1.0,
                -1 => -1.0,
                other => return Err(Error::Config(format!("class targets must be +1 or -1, got {other}"))),
            };
            Ok(AffineConstraint {
                offset: y * c.score(x_orig),
                gradient: c.weights.iter().map(|w| y * w).collect(),
                tol: 0.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let program = CfProgram::build(d, constraints, ConstraintForm::Margin, cfg.lambda, cfg.complexity)?;
    solve_program(program, x_orig, &cfg.solver)
}

/// Re-evaluates every model on the corrected readings, independent of the
/// solver. Returns `dist(residual) - tol` per model.
pub fn recheck(ensemble: &Ensemble, snapshot: &Snapshot, cf: &Counterfactual, cfg: &CfConfig) -> Result<Vec<f64>> {
    let tols = cfg.tolerance.resolve(ensemble.len())?;
    let n = snapshot.len();
    if cf.delta.len() != snapshot.n_changes() || cf.x_cf.len() != n {
        return Err(Error::Dimension {
            context: "counterfactual width",
            expected: snapshot.n_changes(),
            actual: cf.delta.len(),
        });
    }
    let input: Vec<f64> = if snapshot.window_rows.is_empty() {
        snapshot.model_input.iter().zip(&cf.delta).map(|(x, d)| x + d).collect()
    } else {
        let corrected: Vec<Vec<f64>> = snapshot
            .window_rows
            .iter()
            .enumerate()
            .map(|(b, row)| {
                row.iter()
                    .zip(&cf.delta[b * n..(b + 1) * n])
                    .map(|(x, d)| x + d)
                    .collect()
            })
            .collect();
        (0..n)
            .map(|j| corrected.iter().map(|r| r[j]).sum::<f64>() / corrected.len() as f64)
            .collect()
    };
    ensemble
        .models()
        .iter()
        .zip(tols)
        .map(|(m, tol)| Ok(cfg.dist.apply(m.predict_full(&input)? - cf.x_cf[m.target]) - tol))
        .collect()
}
