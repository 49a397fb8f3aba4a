//! Batch evaluation: networks per seed, a grid of injected faults, detection
//! and localization for every scenario.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::detector::{self, AlarmStream, DetectionReport, DetectionSummary};
use crate::error::{Error, Result};
use crate::explain::{self, Anchor, CfConfig, Counterfactual, Tolerance};
use crate::localize::{self, LocalizationReport, ScenarioLocalization};
use crate::netgen::{generate_clean, FaultKind, FaultSpec, ReadingsPanel, Scenario, ScenarioConfig};
use crate::sensors::{Ensemble, DEFAULT_WINDOW};

/// A fault kind with its magnitude but without panel-dependent parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FaultTemplate {
    ConstantOffset(f64),
    GaussianNoise(f64),
    PowerFailure,
    ProportionalOffset(f64),
    /// Drift rate; the cap is the clean reading at onset plus the grid headroom.
    Drift(f64),
}

impl FaultTemplate {
    pub fn name(&self) -> &'static str {
        self.resolve_with_cap(0.0).name()
    }

    pub fn magnitude(&self) -> f64 {
        self.resolve_with_cap(0.0).magnitude()
    }

    fn resolve_with_cap(&self, cap: f64) -> FaultKind {
        match *self {
            FaultTemplate::ConstantOffset(offset) => FaultKind::ConstantOffset { offset },
            FaultTemplate::GaussianNoise(std) => FaultKind::GaussianNoise { std },
            FaultTemplate::PowerFailure => FaultKind::PowerFailure,
            FaultTemplate::ProportionalOffset(factor) => FaultKind::ProportionalOffset { factor },
            FaultTemplate::Drift(rate) => FaultKind::Drift { rate, cap },
        }
    }

    /// Inverse of `name` and `magnitude`.
    pub fn from_name(name: &str, magnitude: f64) -> Result<Self> {
        Ok(match name {
            "constant_offset" => FaultTemplate::ConstantOffset(magnitude),
            "gaussian_noise" => FaultTemplate::GaussianNoise(magnitude),
            "power_failure" => FaultTemplate::PowerFailure,
            "proportional_offset" => FaultTemplate::ProportionalOffset(magnitude),
            "drift" => FaultTemplate::Drift(magnitude),
            other => return Err(Error::Fault(format!("unknown fault kind {other:?}"))),
        })
    }

    pub fn resolve(&self, clean: &ReadingsPanel, sensor: usize, onset: usize, drift_headroom: f64) -> FaultKind {
        let cap = match self {
            FaultTemplate::Drift(_) => clean.value(onset, sensor) + drift_headroom,
            _ => 0.0,
        };
        self.resolve_with_cap(cap)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaultGrid {
    pub constant_offset: Vec<f64>,
    pub gaussian_noise: Vec<f64>,
    pub proportional_offset: Vec<f64>,
    pub drift_rate: Vec<f64>,
    /// Power failures have no magnitude; this many are drawn per seed.
    pub power_failure_replicates: usize,
    pub drift_headroom: f64,
}

impl Default for FaultGrid {
    fn default() -> Self {
        Self {
            constant_offset: vec![0.5, 1.0, 2.0],
            gaussian_noise: vec![0.5, 1.0, 2.0],
            proportional_offset: vec![0.01, 0.02, 0.04],
            drift_rate: vec![0.02, 0.05, 0.1],
            power_failure_replicates: 3,
            drift_headroom: 5.0,
        }
    }
}

impl FaultGrid {
    pub fn templates(&self) -> Vec<FaultTemplate> {
        let mut out = Vec::new();
        out.extend(self.constant_offset.iter().map(|&c| FaultTemplate::ConstantOffset(c)));
        out.extend(self.gaussian_noise.iter().map(|&s| FaultTemplate::GaussianNoise(s)));
        out.extend(std::iter::repeat_n(
            FaultTemplate::PowerFailure,
            self.power_failure_replicates,
        ));
        out.extend(
            self.proportional_offset
                .iter()
                .map(|&a| FaultTemplate::ProportionalOffset(a)),
        );
        out.extend(self.drift_rate.iter().map(|&r| FaultTemplate::Drift(r)));
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.templates().is_empty() {
            return Err(Error::Config("fault grid is empty".into()));
        }
        let all = self
            .constant_offset
            .iter()
            .chain(&self.gaussian_noise)
            .chain(&self.proportional_offset)
            .chain(&self.drift_rate);
        if all.clone().any(|v| !v.is_finite()) || !self.drift_headroom.is_finite() {
            return Err(Error::Config("fault magnitudes must be finite".into()));
        }
        if self.gaussian_noise.iter().any(|s| *s < 0.0) {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSettings {
    /// Network shape; `seed` is replaced by each entry of `seeds`.
    pub network: ScenarioConfig,
    pub seeds: Vec<u64>,
    pub grid: FaultGrid,
    pub window: usize,
    pub margin: f64,
    pub cf: CfConfig,
    pub anchor: Anchor,
    /// Alarm steps explained per scenario.
    pub alarm_steps: usize,
    /// Onsets are drawn from `[train_end + onset_gap, train_end + onset_gap + onset_span)`.
    pub onset_gap: usize,
    pub onset_span: usize,
    /// Also compute the per-model baseline.
    pub baseline: bool,
    /// Skip flow channels when picking the faulty sensor.
    pub exclude_flow: bool,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        Self {
            network: ScenarioConfig::default(),
            seeds: vec![1, 2, 3],
            grid: FaultGrid::default(),
            window: DEFAULT_WINDOW,
            margin: detector::DEFAULT_MARGIN,
            cf: CfConfig::default(),
            anchor: Anchor::History,
            alarm_steps: localize::DEFAULT_ALARM_STEPS,
            onset_gap: 50,
            onset_span: 300,
            baseline: true,
            exclude_flow: true,
        }
    }
}

impl ExperimentSettings {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.grid.validate()?;
        self.cf.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mut uniq = self.seeds.clone();
        uniq.sort_unstable();
        uniq.dedup();
        if uniq.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if self.window == 0 || self.alarm_steps == 0 || self.onset_span == 0 {
            return Err(Error::Config(
                "window, alarm_steps and onset_span must be positive".into(),
            ));
        }
        if self.network.train_end < self.window + detector::MIN_CALIBRATION_STEPS {
            return Err(Error::Config("training prefix too short for calibration".into()));
        }
        let last_onset = self.network.train_end + self.onset_gap + self.onset_span;
        if self.onset_gap == 0 || last_onset > self.network.n_steps {
            return Err(Error::Config(format!(
                "onset window [{}, {last_onset}) must start after train_end and end within {} steps",
                self.network.train_end + self.onset_gap,
                self.network.n_steps
            )));
        }
        Ok(())
    }

    pub fn network_config(&self, seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            seed,
            ..self.network.clone()
        }
    }

    fn calibration_range(&self) -> std::ops::Range<usize> {
        self.window..self.network.train_end
    }
}

/// A fault scenario before its panel is built.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedScenario {
    pub id: String,
    pub seed: u64,
    pub template: FaultTemplate,
    pub sensor: usize,
    pub onset: usize,
    /// Seed of the fault's own randomness (Gaussian noise).
    pub fault_seed: u64,
}

/// Every scenario of the grid, in a fixed order. Sensor and onset are drawn
/// from a stream keyed by the seed and the scenario's position.
pub fn plan_scenarios(settings: &ExperimentSettings) -> Result<Vec<PlannedScenario>> {
    settings.validate()?;
    let pressure: Vec<usize> = settings
        .network
        .sensor_kinds()
        .iter()
        .enumerate()
        .filter(|(_, k)| **k == crate::netgen::SensorKind::Pressure)
        .map(|(i, _)| i)
        .collect();
    let templates = settings.grid.templates();
    let mut out = Vec::new();
    for &seed in &settings.seeds {
        let mut counts = std::collections::BTreeMap::new();
        for (idx, template) in templates.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(1 + idx as u64);
            let sensor = pressure[rng.random_range(0..pressure.len())];
            let first = settings.network.train_end + settings.onset_gap;
            let onset = rng.random_range(first..first + settings.onset_span);
            let fault_seed = rng.random();
            let n = counts.entry(template.name()).or_insert(0usize);
            out.push(PlannedScenario {
                id: format!("s{seed}_{}_{n}", template.name()),
                seed,
                template: *template,
                sensor,
                onset,
                fault_seed,
            });
            *n += 1;
        }
    }
    Ok(out)
}

pub const PLAN_CSV_HEADER: [&str; 7] = [
    "scenario",
    "seed",
    "fault_kind",
    "magnitude",
    "sensor",
    "onset",
    "fault_seed",
];

pub fn write_plan_csv<W: Write>(plan: &[PlannedScenario], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(PLAN_CSV_HEADER).map_err(csv_error)?;
    for p in plan {
        w.write_record([
            p.id.clone(),
            p.seed.to_string(),
            p.template.name().to_string(),
            p.template.magnitude().to_string(),
            p.sensor.to_string(),
            p.onset.to_string(),
            p.fault_seed.to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_plan_csv<R: std::io::Read>(input: R) -> Result<Vec<PlannedScenario>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(csv_error)?.clone();
    if header.iter().ne(PLAN_CSV_HEADER) {
        return Err(Error::Parse {
            line: 1,
            column: 1,
            message: format!("unexpected plan header {header:?}"),
        });
    }
    let field = |rec: &csv::StringRecord, i: usize| rec.get(i).unwrap_or_default().to_string();
    let bad = |line: usize, i: usize, e: &dyn std::fmt::Display| Error::Parse {
        line,
        column: i + 1,
        message: format!("{}: {e}", PLAN_CSV_HEADER[i]),
    };
    let num = |rec: &csv::StringRecord, i: usize, line: usize| -> Result<f64> {
        field(rec, i).parse::<f64>().map_err(|e| bad(line, i, &e))
    };
    let int = |rec: &csv::StringRecord, i: usize, line: usize| -> Result<u64> {
        field(rec, i).parse::<u64>().map_err(|e| bad(line, i, &e))
    };
    let mut out = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_error)?;
        let line = k + 2;
        if rec.len() != PLAN_CSV_HEADER.len() {
            return Err(bad(
                line,
                rec.len().min(PLAN_CSV_HEADER.len() - 1),
                &"wrong number of fields",
            ));
        }
        out.push(PlannedScenario {
            id: field(&rec, 0),
            seed: int(&rec, 1, line)?,
            template: FaultTemplate::from_name(&field(&rec, 2), num(&rec, 3, line)?)?,
            sensor: int(&rec, 4, line)? as usize,
            onset: int(&rec, 5, line)? as usize,
            fault_seed: int(&rec, 6, line)?,
        });
    }
    Ok(out)
}

/// Clean data, fitted ensemble and calibrated threshold for one seed.
#[derive(Debug, Clone)]
pub struct Network {
    pub config: ScenarioConfig,
    pub clean: ReadingsPanel,
    pub ensemble: Ensemble,
    pub threshold: f64,
}

impl Network {
    pub fn build(settings: &ExperimentSettings, seed: u64) -> Result<Self> {
        let config = settings.network_config(seed);
        let clean = generate_clean(&config)?;
        Self::from_clean(settings, config, clean)
    }

    pub fn from_clean(settings: &ExperimentSettings, config: ScenarioConfig, clean: ReadingsPanel) -> Result<Self> {
        let range = settings.calibration_range();
        let ensemble = Ensemble::fit(&clean, settings.window, range.clone())?;
        let threshold = detector::calibrate_threshold(&ensemble, &clean, range, settings.margin)?;
        Ok(Self {
            config,
            clean,
            ensemble,
            threshold,
        })
    }

    pub fn scenario(&self, planned: &PlannedScenario, settings: &ExperimentSettings) -> Result<Scenario> {
        let kind = planned
            .template
            .resolve(&self.clean, planned.sensor, planned.onset, settings.grid.drift_headroom);
        let fault = FaultSpec {
            kind,
            sensor: planned.sensor,
            onset: planned.onset,
        };
        Scenario::from_clean(&self.config, self.clean.clone(), fault, planned.fault_seed)
    }

    /// Alarms raised on the clean panel after the training prefix.
    pub fn held_out_false_alarms(&self) -> Result<usize> {
        let alarms = detector::detect(&self.ensemble, &self.clean, self.threshold)?;
        Ok(alarms.alarm_steps().filter(|t| *t >= self.config.train_end).count())
    }
}

/// Explanations computed at one alarm step.
#[derive(Debug, Clone)]
pub struct StepExplanation {
    pub t: usize,
    pub ensemble: Counterfactual,
    pub ensemble_prediction: Option<usize>,
    /// One per model, empty when the baseline is disabled.
    pub baseline: Vec<Counterfactual>,
    pub baseline_prediction: Option<usize>,
}

impl StepExplanation {
    pub fn counterfactuals(&self) -> impl Iterator<Item = &Counterfactual> {
        std::iter::once(&self.ensemble).chain(&self.baseline)
    }
}

/// Ensemble explanation, and optionally the per-model baseline, at alarm step `t`.
pub fn explain_step(
    network: &Network,
    panel: &ReadingsPanel,
    t: usize,
    settings: &ExperimentSettings,
) -> Result<StepExplanation> {
    let cfg = step_config(network, settings);
    let snapshot = explain::snapshot_at_alarm(panel, &network.ensemble, t, settings.anchor)?;
    let kinds = settings.exclude_flow.then_some(panel.kinds());
    let ensemble = explain::ensemble_counterfactual(&network.ensemble, &snapshot, &cfg)?;
    let ensemble_prediction = localize::predict_faulty_sensor(&ensemble.attribution(), kinds)?;
    let (baseline, baseline_prediction) = if settings.baseline {
        let per_model = explain::independent_counterfactuals(&network.ensemble, &snapshot, &cfg)?;
        let deltas: Vec<Vec<f64>> = per_model.iter().map(|c| c.attribution()).collect();
        let pred = localize::aggregate_baseline(&deltas, kinds)?;
        (per_model, pred)
    } else {
        (Vec::new(), None)
    };
    Ok(StepExplanation {
        t,
        ensemble,
        ensemble_prediction,
        baseline,
        baseline_prediction,
    })
}

/// The settings' explainer config with tolerances defaulting to the network threshold.
pub fn step_config(network: &Network, settings: &ExperimentSettings) -> CfConfig {
    let mut cfg = settings.cf.clone();
    if cfg.tolerance == Tolerance::Uniform(0.0) {
        cfg.tolerance = Tolerance::Uniform(network.threshold);
    }
    cfg
}

#[derive(Debug, Clone)]
pub struct ScenarioOutcome {
    pub planned: PlannedScenario,
    pub fault: FaultSpec,
    pub threshold: f64,
    pub detection: DetectionReport,
    pub alarms: AlarmStream,
    pub steps: Vec<StepExplanation>,
    pub localization: ScenarioLocalization,
}

impl ScenarioOutcome {
    pub fn counterfactuals(&self) -> impl Iterator<Item = &Counterfactual> {
        self.steps.iter().flat_map(StepExplanation::counterfactuals)
    }
}

/// Detects and localizes one planned scenario. Localization explains the
/// first `alarm_steps` alarms raised after the training prefix.
pub fn run_scenario(
    network: &Network,
    planned: &PlannedScenario,
    settings: &ExperimentSettings,
) -> Result<ScenarioOutcome> {
    let scenario = network.scenario(planned, settings)?;
    evaluate_panel(network, planned, scenario.fault, &scenario.faulty, settings)
}

/// Alarm stream and detection metrics of `faulty` under the network's detector.
pub fn detect_panel(
    network: &Network,
    fault: &FaultSpec,
    faulty: &ReadingsPanel,
) -> Result<(AlarmStream, DetectionReport)> {
    let alarms = detector::detect(&network.ensemble, faulty, network.threshold)?;
    let detection = detector::detection_metrics(&alarms, fault.onset)?;
    Ok((alarms, detection))
}

/// Alarm steps that get explained: the first `alarm_steps` alarms after the
/// training prefix.
pub fn explained_steps(network: &Network, alarms: &AlarmStream, settings: &ExperimentSettings) -> Vec<usize> {
    alarms
        .alarm_steps()
        .filter(|t| *t >= network.config.train_end)
        .take(settings.alarm_steps)
        .collect()
}

/// Detection, explanations and localization for an already built faulty panel.
pub fn evaluate_panel(
    network: &Network,
    planned: &PlannedScenario,
    fault: FaultSpec,
    faulty: &ReadingsPanel,
    settings: &ExperimentSettings,
) -> Result<ScenarioOutcome> {
    let (alarms, detection) = detect_panel(network, &fault, faulty)?;
    let steps = explained_steps(network, &alarms, settings)
        .into_iter()
        .map(|t| explain_step(network, faulty, t, settings))
        .collect::<Result<Vec<_>>>()?;
    let (ensemble, baseline) = if steps.is_empty() {
        (None, None)
    } else {
        let ens: Vec<Option<usize>> = steps.iter().map(|s| s.ensemble_prediction).collect();
        let base: Vec<Option<usize>> = steps.iter().map(|s| s.baseline_prediction).collect();
        (
            localize::aggregate_alarm_sequence(&ens, settings.alarm_steps)?,
            if settings.baseline {
                localize::aggregate_baseline_sequence(&base, settings.alarm_steps)?
            } else {
                None
            },
        )
    };
    let localization = ScenarioLocalization {
        scenario: planned.id.clone(),
        fault_kind: planned.template.name().to_string(),
        magnitude: planned.template.magnitude(),
        true_sensor: planned.sensor,
        ensemble,
        baseline,
    };
    Ok(ScenarioOutcome {
        planned: planned.clone(),
        fault,
        threshold: network.threshold,
        detection,
        alarms,
        steps,
        localization,
    })
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub networks: Vec<Network>,
    pub scenarios: Vec<ScenarioOutcome>,
}

/// Builds one network per seed and runs every planned scenario, in parallel
/// on the current rayon pool. Results are in plan order.
pub fn run_grid(settings: &ExperimentSettings) -> Result<GridOutcome> {
    let plan = plan_scenarios(settings)?;
    let networks = settings
        .seeds
        .par_iter()
        .map(|&seed| Network::build(settings, seed))
        .collect::<Result<Vec<_>>>()?;
    let scenarios = plan
        .par_iter()
        .map(|p| {
            let i = settings.seeds.iter().position(|s| *s == p.seed).expect("planned seed");
            run_scenario(&networks[i], p, settings)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GridOutcome { networks, scenarios })
}

pub const DETECTION_CSV_HEADER: [&str; 6] = ["scenario", "fault_kind", "magnitude", "sensor", "onset", "threshold"];

impl GridOutcome {
    pub fn detection_summary(&self) -> Result<DetectionSummary> {
        DetectionSummary::from_reports(&self.scenarios.iter().map(|s| s.detection).collect::<Vec<_>>())
    }

    pub fn localization_report(&self) -> Result<LocalizationReport> {
        LocalizationReport::from_rows(self.scenarios.iter().map(|s| s.localization.clone()).collect())
    }

    pub fn write_detection_csv<W: Write>(&self, out: W) -> Result<()> {
        write_detection_csv(&self.scenarios, out)
    }
}

/// One line of the detection table.
#[derive(Debug, Clone, Copy)]
pub struct DetectionRow<'a> {
    pub planned: &'a PlannedScenario,
    pub fault: &'a FaultSpec,
    pub threshold: f64,
    pub report: &'a DetectionReport,
}

impl ScenarioOutcome {
    pub fn detection_row(&self) -> DetectionRow<'_> {
        DetectionRow {
            planned: &self.planned,
            fault: &self.fault,
            threshold: self.threshold,
            report: &self.detection,
        }
    }
}

pub fn write_detection_csv<W: Write>(scenarios: &[ScenarioOutcome], out: W) -> Result<()> {
    write_detection_rows(scenarios.iter().map(|s| s.detection_row()), out)
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io {
        path: None,
        source: std::io::Error::other(e),
    }
}

/// One row per scenario: identity, fault parameters and step-level rates.
pub fn write_detection_rows<'a, W: Write>(rows: impl IntoIterator<Item = DetectionRow<'a>>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = csv_error;
    let header: Vec<&str> = DETECTION_CSV_HEADER
        .iter()
        .chain(DetectionReport::CSV_HEADER.iter())
        .copied()
        .collect();
    w.write_record(&header).map_err(io)?;
    for s in rows {
        let mut rec = vec![
            s.planned.id.clone(),
            s.planned.template.name().to_string(),
            s.planned.template.magnitude().to_string(),
            s.fault.sensor.to_string(),
            s.fault.onset.to_string(),
            s.threshold.to_string(),
        ];
        rec.extend(s.report.csv_fields());
        w.write_record(&rec).map_err(io)?;
    }
    w.flush()?;
    Ok(())
}
