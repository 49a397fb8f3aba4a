//! Windowed linear virtual sensors.
//!
//! A virtual sensor predicts one pressure channel at step `t` from the mean
//! of all other channels over the `T` preceding steps.

use std::fmt::Write as _;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::netgen::{ReadingsPanel, SensorKind};

/// Default averaging window.
pub const DEFAULT_WINDOW: usize = 3;

/// Mean of the `window` rows preceding `t`, with channel `exclude` removed.
pub fn window_average(panel: &ReadingsPanel, t: usize, window: usize, exclude: usize) -> Result<Vec<f64>> {
    let full = window_mean_all(panel, t, window)?;
    if exclude >= full.len() {
        return Err(Error::Dimension {
            context: "excluded channel",
            expected: full.len(),
            actual: exclude,
        });
    }
    Ok(drop_channel(&full, exclude))
}

/// Mean of the `window` rows preceding `t` over every channel.
pub fn window_mean_all(panel: &ReadingsPanel, t: usize, window: usize) -> Result<Vec<f64>> {
    if window == 0 {
        return Err(Error::Config("window must be at least 1".into()));
    }
    if t < window {
        return Err(Error::TimeIndex {
            t,
            reason: format!("needs at least {window} preceding steps"),
        });
    }
    if t > panel.n_steps() {
        return Err(Error::TimeIndex {
            t,
            reason: format!("panel has {} steps", panel.n_steps()),
        });
    }
    let n = panel.n_sensors();
    let mut acc = vec![0.0; n];
    for s in t - window..t {
        for (a, v) in acc.iter_mut().zip(panel.row(s)) {
            *a += v;
        }
    }
    let inv = 1.0 / window as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    Ok(acc)
}

pub(crate) fn drop_channel(values: &[f64], exclude: usize) -> Vec<f64> {
    values
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != exclude)
        .map(|(_, v)| *v)
        .collect()
}

/// Affine predictor for one target channel.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub target: usize,
    pub window: usize,
    pub bias: f64,
    /// One weight per non-target channel, in channel order.
    pub weights: Vec<f64>,
}

impl LinearModel {
    pub fn new(target: usize, window: usize, bias: f64, weights: Vec<f64>) -> Result<Self> {
        if target > weights.len() {
            return Err(Error::Dimension {
                context: "model target",
                expected: weights.len() + 1,
                actual: target,
            });
        }
        if !bias.is_finite() || weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Config("model coefficients must be finite".into()));
        }
        Ok(Self {
            target,
            window,
            bias,
            weights,
        })
    }

    pub fn n_sensors(&self) -> usize {
        self.weights.len() + 1
    }

    /// Channel index that weight `j` multiplies.
    pub fn input_channel(&self, j: usize) -> usize {
        if j < self.target {
            j
        } else {
            j + 1
        }
    }

    /// Weight applied to channel `channel`, or `None` for the target itself.
    pub fn weight_for_channel(&self, channel: usize) -> Option<f64> {
        use std::cmp::Ordering::*;
        match channel.cmp(&self.target) {
            Less => Some(self.weights[channel]),
            Equal => None,
            Greater => Some(self.weights[channel - 1]),
        }
    }

    pub fn predict(&self, input: &[f64]) -> Result<f64> {
        if input.len() != self.weights.len() {
            return Err(Error::Dimension {
                context: "model input",
                expected: self.weights.len(),
                actual: input.len(),
            });
        }
        Ok(dot(&self.weights, input) + self.bias)
    }

    /// Prediction from a full-length vector; the target channel is skipped.
    pub fn predict_full(&self, values: &[f64]) -> Result<f64> {
        if values.len() != self.n_sensors() {
            return Err(Error::Dimension {
                context: "model input (all channels)",
                expected: self.n_sensors(),
                actual: values.len(),
            });
        }
        let acc: f64 = self
            .weights
            .iter()
            .enumerate()
            .map(|(j, w)| w * values[self.input_channel(j)])
            .sum();
        Ok(acc + self.bias)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Least-squares fit of the virtual sensor for `target` over steps `range`.
///
/// Inputs and target are centred so the intercept is recovered separately;
/// the weights come from an SVD solve, which yields the minimum-norm solution
/// when the centred design is rank deficient.
pub fn fit_virtual_sensor(
    panel: &ReadingsPanel,
    target: usize,
    window: usize,
    range: Range<usize>,
) -> Result<LinearModel> {
    let n = panel.n_sensors();
    if target >= n {
        return Err(Error::Dimension {
            context: "fit target",
            expected: n,
            actual: target,
        });
    }
    if range.start < window {
        return Err(Error::TimeIndex {
            t: range.start,
            reason: format!("training range must start at or after the window ({window})"),
        });
    }
    if range.end > panel.n_steps() {
        return Err(Error::TimeIndex {
            t: range.end,
            reason: format!("training range ends past the panel ({} steps)", panel.n_steps()),
        });
    }
    let rows = range.len();
    if rows <= n + 1 {
        return Err(Error::Underdetermined { rows, cols: n });
    }

    let p = n - 1;
    let mut x = DMatrix::<f64>::zeros(rows, p);
    let mut y = DVector::<f64>::zeros(rows);
    for (r, t) in range.clone().enumerate() {
        let input = window_average(panel, t, window, target)?;
        for (c, v) in input.into_iter().enumerate() {
            x[(r, c)] = v;
        }
        y[r] = panel.value(t, target);
    }
    let x_mean: Vec<f64> = (0..p).map(|c| x.column(c).mean()).collect();
    let y_mean = y.mean();
    for (c, mean) in x_mean.iter().enumerate() {
        x.column_mut(c).add_scalar_mut(-mean);
    }
    y.add_scalar_mut(-y_mean);

    let svd = x.svd(true, true);
    let cutoff = svd.singular_values.max() * f64::EPSILON * rows.max(p) as f64;
    let w = svd
        .solve(&y, cutoff)
        .map_err(|e| Error::Config(format!("least-squares solve failed: {e}")))?;
    let weights: Vec<f64> = w.iter().copied().collect();
    let bias = y_mean - dot(&weights, &x_mean);
    LinearModel::new(target, window, bias, weights)
}

/// One virtual sensor per pressure channel, sharing a window length.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    models: Vec<LinearModel>,
    n_sensors: usize,
    window: usize,
}

impl Ensemble {
    pub fn new(models: Vec<LinearModel>, n_sensors: usize) -> Result<Self> {
        let first = models.first().ok_or(Error::Empty("ensemble models"))?;
        let window = first.window;
        for m in &models {
            if m.n_sensors() != n_sensors {
                return Err(Error::Dimension {
                    context: "ensemble model width",
                    expected: n_sensors,
                    actual: m.n_sensors(),
                });
            }
            if m.window != window {
                return Err(Error::Config(format!(
                    "all models must share one window (found {} and {})",
                    window, m.window
                )));
            }
        }
        let mut targets: Vec<usize> = models.iter().map(|m| m.target).collect();
        targets.sort_unstable();
        if targets.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("ensemble has two models for the same target".into()));
        }
        Ok(Self {
            models,
            n_sensors,
            window,
        })
    }

    /// Fits one model per pressure channel of `panel` on `range`.
    pub fn fit(panel: &ReadingsPanel, window: usize, range: Range<usize>) -> Result<Self> {
        let targets = panel.pressure_channels();
        let models = targets
            .par_iter()
            .map(|&t| fit_virtual_sensor(panel, t, window, range.clone()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(models, panel.n_sensors())
    }

    pub fn models(&self) -> &[LinearModel] {
        &self.models
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn n_sensors(&self) -> usize {
        self.n_sensors
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Checks that the ensemble covers exactly the pressure channels of `kinds`.
    pub fn check_layout(&self, kinds: &[SensorKind]) -> Result<()> {
        if kinds.len() != self.n_sensors {
            return Err(Error::Dimension {
                context: "panel width vs ensemble",
                expected: self.n_sensors,
                actual: kinds.len(),
            });
        }
        let mut targets: Vec<usize> = self.models.iter().map(|m| m.target).collect();
        targets.sort_unstable();
        let pressure: Vec<usize> = kinds
            .iter()
            .enumerate()
            .filter(|(_, k)| **k == SensorKind::Pressure)
            .map(|(i, _)| i)
            .collect();
        if targets != pressure {
            return Err(Error::Config(
                "ensemble targets do not match the panel's pressure channels".into(),
            ));
        }
        Ok(())
    }

    /// Serializes as one line per model: `target window bias w_1 ... w_{n-1}`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for m in &self.models {
            write!(out, "{} {} {:.16e}", m.target, m.window, m.bias).unwrap();
            for w in &m.weights {
                write!(out, " {w:.16e}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut models = Vec::new();
        let mut width = None;
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() < 4 {
                return Err(Error::ModelFormat {
                    line: line_no,
                    message: format!("expected at least 4 fields, found {}", fields.len()),
                });
            }
            let parse_usize = |s: &str, what: &str| {
                s.parse::<usize>().map_err(|_| Error::ModelFormat {
                    line: line_no,
                    message: format!("invalid {what} {s:?}"),
                })
            };
            let parse_f64 = |s: &str| {
                s.parse::<f64>().map_err(|_| Error::ModelFormat {
                    line: line_no,
                    message: format!("invalid number {s:?}"),
                })
            };
            let target = parse_usize(fields[0], "target")?;
            let window = parse_usize(fields[1], "window")?;
            let bias = parse_f64(fields[2])?;
            let weights = fields[3..].iter().map(|s| parse_f64(s)).collect::<Result<Vec<_>>>()?;
            let n = weights.len() + 1;
            if *width.get_or_insert(n) != n {
                return Err(Error::ModelFormat {
                    line: line_no,
                    message: "models disagree on the number of channels".into(),
                });
            }
            let model = LinearModel::new(target, window, bias, weights).map_err(|e| Error::ModelFormat {
                line: line_no,
                message: e.to_string(),
            })?;
            models.push(model);
        }
        let n = width.ok_or(Error::Empty("model file"))?;
        Self::new(models, n)
    }
}
