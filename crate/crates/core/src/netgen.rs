//! Synthetic sensor-network panels, fault injection and CSV I/O.
//!
//! Clean panels follow a latent-factor model: every channel is an affine
//! image of a low-dimensional latent signal (diurnal sinusoids plus a slow
//! random walk) with additive Gaussian noise. Any channel is therefore
//! linearly predictable from the others, which is the one property the
//! virtual sensors rely on.

use std::f64::consts::PI;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};

/// Period of the diurnal latent cycle, in time steps.
pub const DIURNAL_PERIOD: f64 = 96.0;

/// Standard deviation of one random-walk increment of the slow latent factor.
pub const WALK_STEP_STD: f64 = 0.002;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SensorKind {
    Pressure,
    Flow,
}

impl SensorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SensorKind::Pressure => "pressure",
            SensorKind::Flow => "flow",
        }
    }
}

impl fmt::Display for SensorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SensorKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pressure" => Ok(SensorKind::Pressure),
            "flow" => Ok(SensorKind::Flow),
            other => Err(format!("unknown sensor kind {other:?}")),
        }
    }
}

/// Shape and noise parameters of a synthetic network.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub n_pressure: usize,
    pub n_flow: usize,
    pub n_steps: usize,
    /// First time index that is no longer part of the fault-free training prefix.
    pub train_end: usize,
    pub latent_dim: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_pressure: 12,
            n_flow: 2,
            n_steps: 2000,
            train_end: 700,
            latent_dim: 3,
            noise_std: 0.01,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_pressure < 2 {
            return Err(Error::Config(format!(
                "n_pressure must be at least 2, got {}",
                self.n_pressure
            )));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be at least 1".into()));
        }
        if self.train_end >= self.n_steps {
            return Err(Error::Config(format!(
                "train_end ({}) must be smaller than n_steps ({})",
                self.train_end, self.n_steps
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!(
                "noise_std must be a finite non-negative number, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }

    pub fn n_sensors(&self) -> usize {
        self.n_pressure + self.n_flow
    }

    pub fn sensor_kinds(&self) -> Vec<SensorKind> {
        let mut kinds = vec![SensorKind::Pressure; self.n_pressure];
        kinds.extend(std::iter::repeat_n(SensorKind::Flow, self.n_flow));
        kinds
    }

    pub fn sensor_labels(&self) -> Vec<String> {
        (0..self.n_pressure)
            .map(|i| format!("p{i:02}"))
            .chain((0..self.n_flow).map(|i| format!("f{i:02}")))
            .collect()
    }
}

/// Time-indexed matrix of sensor readings, one row per step.
#[derive(Debug, Clone, PartialEq)]
pub struct ReadingsPanel {
    values: Vec<f64>,
    n_steps: usize,
    kinds: Vec<SensorKind>,
    labels: Vec<String>,
}

impl ReadingsPanel {
    /// Builds a panel from row-major values.
    pub fn from_rows(rows: Vec<Vec<f64>>, kinds: Vec<SensorKind>, labels: Vec<String>) -> Result<Self> {
        let n_sensors = kinds.len();
        if labels.len() != n_sensors {
            return Err(Error::Dimension {
                context: "panel labels",
                expected: n_sensors,
                actual: labels.len(),
            });
        }
        let n_steps = rows.len();
        let mut values = Vec::with_capacity(n_steps * n_sensors);
        for row in rows {
            if row.len() != n_sensors {
                return Err(Error::Dimension {
                    context: "panel row",
                    expected: n_sensors,
                    actual: row.len(),
                });
            }
            if let Some(bad) = row.iter().find(|v| !v.is_finite()) {
                return Err(Error::Config(format!("panel entries must be finite, found {bad}")));
            }
            values.extend(row);
        }
        Ok(Self {
            values,
            n_steps,
            kinds,
            labels,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_sensors(&self) -> usize {
        self.kinds.len()
    }

    pub fn kinds(&self) -> &[SensorKind] {
        &self.kinds
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let n = self.n_sensors();
        &self.values[t * n..(t + 1) * n]
    }

    pub fn value(&self, t: usize, sensor: usize) -> f64 {
        self.values[t * self.n_sensors() + sensor]
    }

    pub fn column(&self, sensor: usize) -> Vec<f64> {
        (0..self.n_steps).map(|t| self.value(t, sensor)).collect()
    }

    pub fn pressure_channels(&self) -> Vec<usize> {
        self.kinds
            .iter()
            .enumerate()
            .filter(|(_, k)| **k == SensorKind::Pressure)
            .map(|(i, _)| i)
            .collect()
    }

    fn set(&mut self, t: usize, sensor: usize, v: f64) {
        let n = self.n_sensors();
        self.values[t * n + sensor] = v;
    }

    #[cfg(test)]
    pub(crate) fn set_for_test(&mut self, t: usize, sensor: usize, v: f64) {
        self.set(t, sensor, v);
    }

    /// Writes the panel as CSV with a `label:kind` header.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        let header: Vec<String> = self
            .labels
            .iter()
            .zip(&self.kinds)
            .map(|(l, k)| format!("{l}:{k}"))
            .collect();
        out.write_record(&header).map_err(csv_io)?;
        for t in 0..self.n_steps {
            // `{}` on f64 prints the shortest decimal that round-trips exactly.
            out.write_record(self.row(t).iter().map(|v| v.to_string()))
                .map_err(csv_io)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|source| Error::Io {
            path: Some(path.to_path_buf()),
            source,
        })?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    /// Parses a panel written by [`ReadingsPanel::write_csv`] (or by hand).
    pub fn load_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut records = rdr.records();

        let header = match records.next() {
            Some(rec) => rec.map_err(|e| csv_parse(1, e))?,
            None => {
                return Err(Error::Parse {
                    line: 1,
                    column: 1,
                    message: "missing header row".into(),
                })
            }
        };
        let mut labels = Vec::with_capacity(header.len());
        let mut kinds = Vec::with_capacity(header.len());
        for (j, cell) in header.iter().enumerate() {
            let (label, kind) = cell.rsplit_once(':').ok_or_else(|| Error::Parse {
                line: 1,
                column: j + 1,
                message: format!("header cell {cell:?} is not of the form label:kind"),
            })?;
            if label.is_empty() {
                return Err(Error::Parse {
                    line: 1,
                    column: j + 1,
                    message: "empty channel label".into(),
                });
            }
            let kind = kind.parse::<SensorKind>().map_err(|message| Error::Parse {
                line: 1,
                column: j + 1,
                message,
            })?;
            labels.push(label.to_string());
            kinds.push(kind);
        }
        if labels.is_empty() {
            return Err(Error::Parse {
                line: 1,
                column: 1,
                message: "header has no columns".into(),
            });
        }

        let n = labels.len();
        let mut values = Vec::new();
        let mut n_steps = 0;
        for (idx, rec) in records.enumerate() {
            let line = idx + 2;
            let rec = rec.map_err(|e| csv_parse(line, e))?;
            if rec.len() != n {
                return Err(Error::Parse {
                    line,
                    column: rec.len().min(n) + 1,
                    message: format!("row has {} cells, header has {n}", rec.len()),
                });
            }
            for (j, cell) in rec.iter().enumerate() {
                if cell.is_empty() {
                    return Err(Error::Parse {
                        line,
                        column: j + 1,
                        message: format!("missing value for channel {}", labels[j]),
                    });
                }
                let v: f64 = cell.parse().map_err(|_| Error::Parse {
                    line,
                    column: j + 1,
                    message: format!("non-numeric cell {cell:?} for channel {}", labels[j]),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        line,
                        column: j + 1,
                        message: format!("non-finite value {cell:?}"),
                    });
                }
                values.push(v);
            }
            n_steps += 1;
        }
        Ok(Self {
            values,
            n_steps,
            kinds,
            labels,
        })
    }

    pub fn load_csv_file(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|source| Error::Io {
            path: Some(path.to_path_buf()),
            source,
        })?;
        Self::load_csv(std::io::BufReader::new(file))
    }
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io {
        path: None,
        source: std::io::Error::other(e),
    }
}

fn csv_parse(line: usize, e: csv::Error) -> Error {
    Error::Parse {
        line,
        column: 1,
        message: e.to_string(),
    }
}

/// Generates a fault-free panel. Deterministic in `config` (including its seed).
pub fn generate_clean(config: &ScenarioConfig) -> Result<ReadingsPanel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.n_sensors();
    let k = config.latent_dim;

    let mixing = draw_mixing(&mut rng, n, k);
    let offsets: Vec<f64> = config
        .sensor_kinds()
        .iter()
        .map(|kind| match kind {
            SensorKind::Pressure => rng.random_range(40.0..60.0),
            SensorKind::Flow => rng.random_range(10.0..30.0),
        })
        .collect();
    let phases: Vec<f64> = (0..k.div_ceil(2)).map(|_| rng.random_range(0.0..2.0 * PI)).collect();

    let layout = latent_layout(k);
    let mut walk = 0.0_f64;
    let noise = Normal::new(0.0, config.noise_std).expect("noise_std validated");
    let omega = 2.0 * PI / DIURNAL_PERIOD;

    let mut rows = Vec::with_capacity(config.n_steps);
    let mut latent = vec![0.0; k];
    for t in 0..config.n_steps {
        let step: f64 = rng.sample(StandardNormal);
        walk += WALK_STEP_STD * step;
        let tf = t as f64;
        for (slot, comp) in latent.iter_mut().zip(&layout) {
            *slot = match *comp {
                Latent::Sin { harmonic, phase } => (harmonic as f64 * omega * tf + phases[phase]).sin(),
                Latent::Cos { harmonic, phase } => (harmonic as f64 * omega * tf + phases[phase]).cos(),
                Latent::Walk => walk,
                Latent::SinWithWalk => (omega * tf + phases[0]).sin() + walk,
            };
        }
        let row: Vec<f64> = (0..n)
            .map(|i| {
                let signal: f64 = (0..k).map(|j| mixing[(i, j)] * latent[j]).sum();
                offsets[i] + signal + noise.sample(&mut rng)
            })
            .collect();
        rows.push(row);
    }
    ReadingsPanel::from_rows(rows, config.sensor_kinds(), config.sensor_labels())
}

#[derive(Debug, Clone, Copy)]
enum Latent {
    Sin { harmonic: usize, phase: usize },
    Cos { harmonic: usize, phase: usize },
    Walk,
    SinWithWalk,
}

/// Sin/cos pairs of increasing harmonics; an odd leftover slot carries the
/// random walk. A single latent factor carries both.
fn latent_layout(k: usize) -> Vec<Latent> {
    if k == 1 {
        return vec![Latent::SinWithWalk];
    }
    let mut layout = Vec::with_capacity(k);
    for pair in 0..k / 2 {
        layout.push(Latent::Sin {
            harmonic: pair + 1,
            phase: pair,
        });
        layout.push(Latent::Cos {
            harmonic: pair + 1,
            phase: pair,
        });
    }
    if k % 2 == 1 {
        layout.push(Latent::Walk);
    }
    layout
}

fn draw_mixing(rng: &mut ChaCha8Rng, n: usize, k: usize) -> DMatrix<f64> {
    loop {
        let m = DMatrix::from_fn(n, k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let sv = m.clone().singular_values();
        let max = sv.max();
        let min = sv.min();
        if min > 0.05 * max {
            return m;
        }
    }
}

/// One of the five sensor fault archetypes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FaultKind {
    ConstantOffset {
        offset: f64,
    },
    GaussianNoise {
        std: f64,
    },
    PowerFailure,
    ProportionalOffset {
        factor: f64,
    },
    /// Reading grows by `rate` per step after onset, never exceeding `cap`.
    Drift {
        rate: f64,
        cap: f64,
    },
}

impl FaultKind {
    pub fn name(&self) -> &'static str {
        match self {
            FaultKind::ConstantOffset { .. } => "constant_offset",
            FaultKind::GaussianNoise { .. } => "gaussian_noise",
            FaultKind::PowerFailure => "power_failure",
            FaultKind::ProportionalOffset { .. } => "proportional_offset",
            FaultKind::Drift { .. } => "drift",
        }
    }

    /// The scalar magnitude parameter (0 for power failures).
    pub fn magnitude(&self) -> f64 {
        match *self {
            FaultKind::ConstantOffset { offset } => offset,
            FaultKind::GaussianNoise { std } => std,
            FaultKind::PowerFailure => 0.0,
            FaultKind::ProportionalOffset { factor } => factor,
            FaultKind::Drift { rate, .. } => rate,
        }
    }

    fn validate(&self) -> Result<()> {
        let finite = match *self {
            FaultKind::ConstantOffset { offset } => offset.is_finite(),
            FaultKind::GaussianNoise { std } => std.is_finite() && std >= 0.0,
            FaultKind::PowerFailure => true,
            FaultKind::ProportionalOffset { factor } => factor.is_finite(),
            FaultKind::Drift { rate, cap } => rate.is_finite() && !cap.is_nan(),
        };
        if finite {
            Ok(())
        } else {
            Err(Error::Fault(format!("invalid parameters for {self:?}")))
        }
    }
}

/// A single injected sensor fault.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaultSpec {
    pub kind: FaultKind,
    pub sensor: usize,
    pub onset: usize,
}

/// Applies `fault` to a copy of `clean`. Only the faulty channel changes, and
/// only from `onset` on. `seed` drives the Gaussian-noise fault.
pub fn inject_fault(clean: &ReadingsPanel, fault: &FaultSpec, seed: u64) -> Result<ReadingsPanel> {
    fault.kind.validate()?;
    if fault.onset >= clean.n_steps() {
        return Err(Error::Fault(format!(
            "onset {} outside panel of {} steps",
            fault.onset,
            clean.n_steps()
        )));
    }
    match clean.kinds().get(fault.sensor) {
        Some(SensorKind::Pressure) => {}
        Some(SensorKind::Flow) => {
            return Err(Error::Fault(format!(
                "sensor {} is a flow channel; faults are injected on pressure channels only",
                fault.sensor
            )))
        }
        None => {
            return Err(Error::Fault(format!(
                "sensor index {} out of range ({} channels)",
                fault.sensor,
                clean.n_sensors()
            )))
        }
    }

    let mut faulty = clean.clone();
    let k = fault.sensor;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in fault.onset..clean.n_steps() {
        let v = clean.value(t, k);
        let faulted = match fault.kind {
            FaultKind::ConstantOffset { offset } => v + offset,
            FaultKind::GaussianNoise { std } => {
                let z: f64 = rng.sample(StandardNormal);
                v + std * z
            }
            FaultKind::PowerFailure => 0.0,
            FaultKind::ProportionalOffset { factor } => (1.0 + factor) * v,
            FaultKind::Drift { rate, cap } => (v + rate * (t - fault.onset) as f64).min(cap),
        };
        faulty.set(t, k, faulted);
    }
    Ok(faulty)
}

/// A clean panel together with its faulty counterpart.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub clean: ReadingsPanel,
    pub faulty: ReadingsPanel,
    pub fault: FaultSpec,
    pub config: ScenarioConfig,
}

impl Scenario {
    pub fn build(config: &ScenarioConfig, fault: FaultSpec, fault_seed: u64) -> Result<Self> {
        let clean = generate_clean(config)?;
        Self::from_clean(config, clean, fault, fault_seed)
    }

    pub fn from_clean(
        config: &ScenarioConfig,
        clean: ReadingsPanel,
        fault: FaultSpec,
        fault_seed: u64,
    ) -> Result<Self> {
        if fault.onset <= config.train_end {
            return Err(Error::Fault(format!(
                "onset {} must come after the training prefix (train_end = {})",
                fault.onset, config.train_end
            )));
        }
        let faulty = inject_fault(&clean, &fault, fault_seed)?;
        Ok(Self {
            clean,
            faulty,
            fault,
            config: config.clone(),
        })
    }
}
