//! Instance generators, brute-force oracles and property checks shared by the
//! integration tests and the acceptance run.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ensemble_cf::detector;
use ensemble_cf::explain::{self, CfConfig, Complexity, Snapshot, Tolerance};
use ensemble_cf::localize;
use ensemble_cf::netgen::{self, FaultKind, FaultSpec, ReadingsPanel, ScenarioConfig, SensorKind};
use ensemble_cf::optim::{ConvexProblem, SolverSettings};
use ensemble_cf::sensors::{Ensemble, LinearModel};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A bounded, feasible LP with `n <= 8` variables and `n <= m <= 8` rows.
/// The first `n` rows are two-sided, which bounds the feasible set; the rest
/// are a mix of equalities and one-sided rows. All rows hold at a random point.
pub fn random_lp(seed: u64) -> ConvexProblem {
    let mut r = rng(seed);
    let n = r.random_range(1..=8);
    let m = r.random_range(n..=8);
    let a = DMatrix::from_fn(m, n, |_, _| r.random_range(-2.0..2.0));
    let x0 = DVector::from_fn(n, |_, _| r.random_range(-1.0..1.0));
    let ax = &a * &x0;
    let q = DVector::from_fn(n, |_, _| r.random_range(-1.0..1.0));
    let mut l = DVector::zeros(m);
    let mut u = DVector::zeros(m);
    for i in 0..m {
        let below = r.random_range(0.1..2.0);
        let above = r.random_range(0.1..2.0);
        let kind = if i < n { 0 } else { r.random_range(0..4) };
        (l[i], u[i]) = match kind {
            0 => (ax[i] - below, ax[i] + above),
            1 => (ax[i], ax[i]),
            2 => (f64::NEG_INFINITY, ax[i] + above),
            _ => (ax[i] - below, f64::INFINITY),
        };
    }
    ConvexProblem::linear(q, a, l, u).unwrap()
}

fn combinations(m: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(k);
    fn go(start: usize, m: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..m {
            cur.push(i);
            go(i + 1, m, k, cur, out);
            cur.pop();
        }
    }
    go(0, m, k, &mut cur, &mut out);
    out
}

/// Minimum of `q'x` over every basic feasible solution: each choice of `n`
/// rows and of a finite bound per row gives a square system; solutions that
/// satisfy all rows are vertices.
pub fn vertex_enumeration(problem: &ConvexProblem) -> Option<f64> {
    let (n, m) = (problem.n_vars(), problem.n_constraints());
    let a = problem.a();
    let (l, u) = (problem.lower(), problem.upper());
    let mut best: Option<f64> = None;
    for rows in combinations(m, n) {
        let sub = DMatrix::from_fn(n, n, |i, j| a[(rows[i], j)]);
        let lu = sub.clone().lu();
        if lu.determinant().abs() < 1e-10 {
            continue;
        }
        for sides in 0..(1u32 << n) {
            let rhs: Option<Vec<f64>> = rows
                .iter()
                .enumerate()
                .map(|(k, &i)| {
                    let b = if sides >> k & 1 == 0 { l[i] } else { u[i] };
                    b.is_finite().then_some(b)
                })
                .collect();
            let Some(rhs) = rhs else { continue };
            // Equality rows would repeat the same vertex under both sides.
            if rows
                .iter()
                .enumerate()
                .any(|(k, &i)| sides >> k & 1 == 1 && l[i] == u[i])
            {
                continue;
            }
            let Some(x) = lu.solve(&DVector::from_vec(rhs)) else {
                continue;
            };
            let ax = a * &x;
            let feasible = (0..m).all(|i| {
                let slack = 1e-8 * (1.0 + ax[i].abs());
                ax[i] >= l[i] - slack && ax[i] <= u[i] + slack
            });
            if feasible {
                let obj = problem.q().dot(&x);
                best = Some(best.map_or(obj, |b: f64| b.min(obj)));
            }
        }
    }
    best
}

/// A strictly convex separable QP over a box (some sides infinite), with its
/// analytic optimum `clip(-q_i / p_i, l_i, u_i)`.
pub fn random_box_qp(seed: u64) -> (ConvexProblem, DVector<f64>) {
    let mut r = rng(seed);
    let n = r.random_range(1..=8);
    let p: DVector<f64> = DVector::from_fn(n, |_, _| r.random_range(0.2..5.0));
    let q: DVector<f64> = DVector::from_fn(n, |_, _| r.random_range(-5.0..5.0));
    let mut l: DVector<f64> = DVector::zeros(n);
    let mut u: DVector<f64> = DVector::zeros(n);
    for i in 0..n {
        let lo = r.random_range(-3.0..1.0);
        let hi = lo + r.random_range(0.0..3.0);
        l[i] = if r.random_bool(0.2) { f64::NEG_INFINITY } else { lo };
        u[i] = if r.random_bool(0.2) { f64::INFINITY } else { hi };
    }
    let expected = DVector::from_fn(n, |i, _| (-q[i] / p[i]).clamp(l[i], u[i]));
    let problem = ConvexProblem::new(DMatrix::from_diagonal(&p), q, DMatrix::identity(n, n), l, u).unwrap();
    (problem, expected)
}

/// A random model over `n` channels with window 1.
pub fn random_model(r: &mut ChaCha8Rng, target: usize, n: usize) -> LinearModel {
    let weights = (0..n - 1).map(|_| r.random_range(-2.0..2.0)).collect();
    LinearModel::new(target, 1, r.random_range(-1.0..1.0), weights).unwrap()
}

/// A random ensemble of `k` models over `n` channels and a point that
/// generally violates several of them.
pub fn random_regression_instance(seed: u64, k: usize, n: usize) -> (Ensemble, Snapshot) {
    let mut r = rng(seed);
    let models = (0..k).map(|t| random_model(&mut r, t, n)).collect();
    let x = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
    (Ensemble::new(models, n).unwrap(), Snapshot::point(x))
}

pub fn solver() -> SolverSettings {
    SolverSettings::default()
}

pub fn cf_config(lambda: f64, complexity: Complexity, tol: f64) -> CfConfig {
    CfConfig {
        lambda,
        complexity,
        tolerance: Tolerance::Uniform(tol),
        ..CfConfig::default()
    }
}

// ---- property checks ----

#[derive(Debug, Clone)]
pub struct FaultCase {
    pub config: ScenarioConfig,
    pub fault: FaultSpec,
    pub fault_seed: u64,
}

fn fault_kind() -> impl Strategy<Value = FaultKind> {
    prop_oneof![
        (-5.0..5.0f64).prop_map(|offset| FaultKind::ConstantOffset { offset }),
        (0.0..3.0f64).prop_map(|std| FaultKind::GaussianNoise { std }),
        Just(FaultKind::PowerFailure),
        (-0.5..0.5f64).prop_map(|factor| FaultKind::ProportionalOffset { factor }),
        (-0.2..0.2f64, -10.0..60.0f64).prop_map(|(rate, cap)| FaultKind::Drift { rate, cap }),
    ]
}

pub fn fault_case() -> impl Strategy<Value = FaultCase> {
    (
        2usize..6,
        0usize..3,
        30usize..120,
        any::<u64>(),
        any::<u64>(),
        fault_kind(),
    )
        .prop_flat_map(|(n_pressure, n_flow, n_steps, seed, fault_seed, kind)| {
            (0..n_pressure, 0..n_steps).prop_map(move |(sensor, onset)| FaultCase {
                config: ScenarioConfig {
                    n_pressure,
                    n_flow,
                    n_steps,
                    train_end: n_steps / 2,
                    seed,
                    ..ScenarioConfig::default()
                },
                fault: FaultSpec { kind, sensor, onset },
                fault_seed,
            })
        })
}

pub fn check_fault_locality(case: &FaultCase) -> Result<(), TestCaseError> {
    let clean = netgen::generate_clean(&case.config).map_err(fail)?;
    let faulty = netgen::inject_fault(&clean, &case.fault, case.fault_seed).map_err(fail)?;
    for t in 0..clean.n_steps() {
        for k in 0..clean.n_sensors() {
            let same = clean.value(t, k).to_bits() == faulty.value(t, k).to_bits();
            if t < case.fault.onset || k != case.fault.sensor {
                prop_assert!(same, "({t}, {k}) changed outside the fault");
            }
        }
    }
    Ok(())
}

/// A small fitted network shared by the alarm properties.
pub struct AlarmFixture {
    pub clean: ReadingsPanel,
    pub ensemble: Ensemble,
}

pub fn alarm_fixture() -> &'static AlarmFixture {
    static FIXTURE: std::sync::OnceLock<AlarmFixture> = std::sync::OnceLock::new();
    FIXTURE.get_or_init(|| {
        let config = ScenarioConfig {
            n_pressure: 5,
            n_flow: 1,
            n_steps: 300,
            train_end: 150,
            seed: 11,
            ..ScenarioConfig::default()
        };
        let clean = netgen::generate_clean(&config).unwrap();
        let ensemble = Ensemble::fit(&clean, 3, 3..150).unwrap();
        AlarmFixture { clean, ensemble }
    })
}

#[derive(Debug, Clone)]
pub struct AlarmCase {
    pub fault: FaultSpec,
    pub fault_seed: u64,
    pub low: f64,
    pub high: f64,
}

pub fn alarm_case() -> impl Strategy<Value = AlarmCase> {
    (
        fault_kind(),
        0usize..5,
        150usize..300,
        any::<u64>(),
        0.0..0.5f64,
        0.0..1.0f64,
    )
        .prop_map(|(kind, sensor, onset, fault_seed, low, extra)| AlarmCase {
            fault: FaultSpec { kind, sensor, onset },
            fault_seed,
            low,
            high: low + extra,
        })
}

pub fn check_alarm_monotonicity(case: &AlarmCase) -> Result<(), TestCaseError> {
    let fx = alarm_fixture();
    let panel = netgen::inject_fault(&fx.clean, &case.fault, case.fault_seed).map_err(fail)?;
    let loose = detector::detect(&fx.ensemble, &panel, case.low).map_err(fail)?;
    let strict = detector::detect(&fx.ensemble, &panel, case.high).map_err(fail)?;
    prop_assert!(loose.is_consistent() && strict.is_consistent());
    for t in strict.alarm_steps() {
        prop_assert!(loose.alarm(t), "raising the threshold added an alarm at {t}");
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SlackCase {
    pub seed: u64,
    pub n: usize,
    pub k: usize,
    pub lambda: f64,
    pub ratio: f64,
    pub tol: f64,
    pub l2: bool,
}

pub fn slack_case() -> impl Strategy<Value = SlackCase> {
    (
        any::<u64>(),
        2usize..6,
        0.05..50.0f64,
        1.5..20.0f64,
        0.0..0.2f64,
        any::<bool>(),
    )
        .prop_flat_map(|(seed, n, lambda, ratio, tol, l2)| {
            (1..=n).prop_map(move |k| SlackCase {
                seed,
                n,
                k,
                lambda,
                ratio,
                tol,
                l2,
            })
        })
}

pub fn check_slack_monotonicity(case: &SlackCase) -> Result<(), TestCaseError> {
    let (ensemble, snapshot) = random_regression_instance(case.seed, case.k, case.n);
    let complexity = if case.l2 { Complexity::L2 } else { Complexity::L1 };
    let total = |lambda: f64| -> Result<f64, TestCaseError> {
        let cf = explain::ensemble_counterfactual(&ensemble, &snapshot, &cf_config(lambda, complexity, case.tol))
            .map_err(fail)?;
        prop_assert!(cf.certified, "uncertified solve at lambda {lambda}");
        Ok(cf.slacks.iter().sum())
    };
    let low = total(case.lambda)?;
    let high = total(case.lambda * case.ratio)?;
    prop_assert!(high <= low + 1e-8, "sum of slacks grew from {low} to {high}");
    Ok(())
}

pub fn delta_vector() -> impl Strategy<Value = (Vec<f64>, f64)> {
    let entry = prop_oneof![
        4 => -1e3..1e3f64,
        1 => Just(0.0),
        1 => -1e-6..1e-6f64,
    ];
    (prop::collection::vec(entry, 1..16), 1e-6..1e6f64)
}

pub fn check_argmax_invariance(delta: &[f64], scale: f64) -> Result<(), TestCaseError> {
    let kinds: Vec<SensorKind> = (0..delta.len())
        .map(|i| {
            if i % 5 == 4 {
                SensorKind::Flow
            } else {
                SensorKind::Pressure
            }
        })
        .collect();
    for k in [None, Some(kinds.as_slice())] {
        let base = localize::predict_faulty_sensor(delta, k).map_err(fail)?;
        let normalized = localize::normalize_explanation(delta);
        prop_assert_eq!(localize::predict_faulty_sensor(&normalized, k).map_err(fail)?, base);
        // Rounding can merge two entries only when they are already within
        // a few ulps of each other; such ties are outside this check.
        let mut mags: Vec<f64> = delta.iter().map(|d| d.abs()).filter(|m| *m > 0.0).collect();
        mags.sort_by(f64::total_cmp);
        let separated = mags.windows(2).all(|w| w[0] == w[1] || w[1] - w[0] > 1e-12 * w[1]);
        if separated {
            let scaled: Vec<f64> = delta.iter().map(|d| d * scale).collect();
            prop_assert_eq!(localize::predict_faulty_sensor(&scaled, k).map_err(fail)?, base);
        }
    }
    Ok(())
}

pub fn panel_strategy() -> impl Strategy<Value = ReadingsPanel> {
    (1usize..6, 1usize..20).prop_flat_map(|(n, steps)| {
        let value = prop_oneof![
            4 => -1e6..1e6f64,
            1 => Just(0.0),
            1 => Just(-0.0),
            1 => -1e-300..1e-300f64,
            1 => any::<f64>().prop_filter("finite", |v| v.is_finite()),
        ];
        (
            prop::collection::vec(prop::collection::vec(value, n), steps),
            prop::collection::vec(any::<bool>(), n),
        )
            .prop_map(|(rows, flow)| {
                let kinds: Vec<SensorKind> = flow
                    .iter()
                    .map(|f| if *f { SensorKind::Flow } else { SensorKind::Pressure })
                    .collect();
                let labels = (0..kinds.len()).map(|i| format!("s{i}")).collect();
                ReadingsPanel::from_rows(rows, kinds, labels).unwrap()
            })
    })
}

pub fn check_csv_round_trip(panel: &ReadingsPanel) -> Result<(), TestCaseError> {
    let mut buf = Vec::new();
    panel.write_csv(&mut buf).map_err(fail)?;
    let back = ReadingsPanel::load_csv(buf.as_slice()).map_err(fail)?;
    prop_assert_eq!(back.kinds(), panel.kinds());
    prop_assert_eq!(back.labels(), panel.labels());
    prop_assert_eq!(back.n_steps(), panel.n_steps());
    for t in 0..panel.n_steps() {
        for k in 0..panel.n_sensors() {
            prop_assert_eq!(back.value(t, k).to_bits(), panel.value(t, k).to_bits());
        }
    }
    Ok(())
}

pub fn fail(e: impl std::fmt::Display) -> TestCaseError {
    TestCaseError::fail(e.to_string())
}
