//! Faulty-sensor localization from counterfactual changes.

use std::io::Write;

use crate::detector::MeanVar;
use crate::error::{Error, Result};
use crate::netgen::SensorKind;

/// Default number of alarm steps aggregated per scenario.
pub const DEFAULT_ALARM_STEPS: usize = 20;

const ZERO_GUARD: f64 = 1e-12;

/// `delta / max |delta_i|`, or `delta` unchanged when it is (numerically) zero.
pub fn normalize_explanation(delta: &[f64]) -> Vec<f64> {
    let scale = delta.iter().fold(0.0_f64, |m, d| m.max(d.abs()));
    if scale > ZERO_GUARD {
        delta.iter().map(|d| d / scale).collect()
    } else {
        delta.to_vec()
    }
}

/// Index of the largest `|delta_i|` among eligible channels, smallest index on ties.
///
/// With `kinds` given, flow channels are skipped. Returns `None` when every
/// eligible entry is zero.
pub fn predict_faulty_sensor(delta: &[f64], kinds: Option<&[SensorKind]>) -> Result<Option<usize>> {
    if let Some(k) = kinds {
        if k.len() != delta.len() {
            return Err(Error::Dimension {
                context: "sensor kinds",
                expected: delta.len(),
                actual: k.len(),
            });
        }
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, d) in delta.iter().enumerate() {
        if kinds.is_some_and(|k| k[i] == SensorKind::Flow) {
            continue;
        }
        let mag = d.abs();
        if mag > 0.0 && best.is_none_or(|(_, b)| mag > b) {
            best = Some((i, mag));
        }
    }
    Ok(best.map(|(i, _)| i))
}

/// Most frequent value, smallest on ties.
fn mode(values: impl IntoIterator<Item = usize>) -> Option<usize> {
    let mut sorted: Vec<usize> = values.into_iter().collect();
    sorted.sort_unstable();
    let mut best: Option<(usize, usize)> = None;
    for run in sorted.chunk_by(|a, b| a == b) {
        if best.is_none_or(|(_, n)| run.len() > n) {
            best = Some((run[0], run.len()));
        }
    }
    best.map(|(v, _)| v)
}

/// Modal sensor over the first `k` alarm-step predictions. Steps without a
/// prediction take part in the count of `k` but cast no vote; if none votes
/// the result is `None`.
pub fn aggregate_alarm_sequence(predictions: &[Option<usize>], k: usize) -> Result<Option<usize>> {
    if predictions.is_empty() {
        return Err(Error::Empty("alarm-step predictions"));
    }
    if k == 0 {
        return Err(Error::Config("alarm-step count must be positive".into()));
    }
    Ok(mode(predictions.iter().take(k).flatten().copied()))
}

/// Mode across models of each model's own largest change.
pub fn aggregate_baseline(per_model_deltas: &[Vec<f64>], kinds: Option<&[SensorKind]>) -> Result<Option<usize>> {
    if per_model_deltas.is_empty() {
        return Err(Error::Empty("per-model counterfactuals"));
    }
    let estimates = per_model_deltas
        .iter()
        .map(|d| predict_faulty_sensor(d, kinds))
        .collect::<Result<Vec<_>>>()?;
    Ok(mode(estimates.into_iter().flatten()))
}

/// Baseline decision over a sequence of alarm steps: the mode of the
/// per-step modes.
pub fn aggregate_baseline_sequence(per_step: &[Option<usize>], k: usize) -> Result<Option<usize>> {
    aggregate_alarm_sequence(per_step, k)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioLocalization {
    pub scenario: String,
    pub fault_kind: String,
    pub magnitude: f64,
    pub true_sensor: usize,
    pub ensemble: Option<usize>,
    pub baseline: Option<usize>,
}

impl ScenarioLocalization {
    pub fn ensemble_correct(&self) -> bool {
        self.ensemble == Some(self.true_sensor)
    }

    pub fn baseline_correct(&self) -> bool {
        self.baseline == Some(self.true_sensor)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationReport {
    pub rows: Vec<ScenarioLocalization>,
    pub ensemble_accuracy: MeanVar,
    pub baseline_accuracy: MeanVar,
}

pub const LOCALIZATION_CSV_HEADER: [&str; 8] = [
    "scenario",
    "fault_kind",
    "magnitude",
    "true_sensor",
    "ensemble_prediction",
    "baseline_prediction",
    "ensemble_correct",
    "baseline_correct",
];

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

fn opt_field(v: Option<usize>) -> String {
    v.map_or_else(|| "none".to_string(), |i| i.to_string())
}

fn parse_opt(s: &str, line: usize, column: usize) -> Result<Option<usize>> {
    if s == "none" {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| Error::Parse {
        line,
        column,
        message: format!("expected a sensor index or 'none', got {s:?}"),
    })
}

impl LocalizationReport {
    pub fn from_rows(rows: Vec<ScenarioLocalization>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("scenarios"));
        }
        let ens: Vec<f64> = rows.iter().map(|r| indicator(r.ensemble_correct())).collect();
        let base: Vec<f64> = rows.iter().map(|r| indicator(r.baseline_correct())).collect();
        Ok(Self {
            ensemble_accuracy: MeanVar::of(&ens).ok_or(Error::Empty("scenarios"))?,
            baseline_accuracy: MeanVar::of(&base).ok_or(Error::Empty("scenarios"))?,
            rows,
        })
    }

    pub fn gap(&self) -> f64 {
        self.ensemble_accuracy.mean - self.baseline_accuracy.mean
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Io {
            path: None,
            source: std::io::Error::other(e),
        };
        w.write_record(LOCALIZATION_CSV_HEADER).map_err(io)?;
        for r in &self.rows {
            w.write_record([
                r.scenario.clone(),
                r.fault_kind.clone(),
                r.magnitude.to_string(),
                r.true_sensor.to_string(),
                opt_field(r.ensemble),
                opt_field(r.baseline),
                u8::from(r.ensemble_correct()).to_string(),
                u8::from(r.baseline_correct()).to_string(),
            ])
            .map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Rebuilds a report from its CSV, recomputing the flags and checking
    /// them against the stored ones.
    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
        let parse_err = |line: usize, column: usize, message: String| Error::Parse { line, column, message };
        let mut rows = Vec::new();
        for (idx, rec) in rd.records().enumerate() {
            let line = idx + 2;
            let rec = rec.map_err(|e| parse_err(line, 1, e.to_string()))?;
            if rec.len() != LOCALIZATION_CSV_HEADER.len() {
                return Err(parse_err(
                    line,
                    1,
                    format!("expected {} fields", LOCALIZATION_CSV_HEADER.len()),
                ));
            }
            let num = |c: usize| -> Result<f64> {
                rec[c]
                    .parse()
                    .map_err(|_| parse_err(line, c + 1, format!("bad number {:?}", &rec[c])))
            };
            let row = ScenarioLocalization {
                scenario: rec[0].to_string(),
                fault_kind: rec[1].to_string(),
                magnitude: num(2)?,
                true_sensor: rec[3]
                    .parse()
                    .map_err(|_| parse_err(line, 4, format!("bad sensor index {:?}", &rec[3])))?,
                ensemble: parse_opt(&rec[4], line, 5)?,
                baseline: parse_opt(&rec[5], line, 6)?,
            };
            for (c, flag) in [(6, row.ensemble_correct()), (7, row.baseline_correct())] {
                if rec[c] != *u8::from(flag).to_string() {
                    return Err(parse_err(line, c + 1, "stored flag disagrees with predictions".into()));
                }
            }
            rows.push(row);
        }
        Self::from_rows(rows)
    }

    pub fn write_markdown<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "| method | accuracy | variance |")?;
        writeln!(out, "|---|---|---|")?;
        writeln!(
            out,
            "| ensemble-consistent | {:.4} | {:.4} |",
            self.ensemble_accuracy.mean, self.ensemble_accuracy.variance
        )?;
        writeln!(
            out,
            "| independent baseline | {:.4} | {:.4} |",
            self.baseline_accuracy.mean, self.baseline_accuracy.variance
        )?;
        writeln!(out)?;
        writeln!(out, "scenarios: {}", self.rows.len())?;
        writeln!(out, "gap: {:.4}", self.gap())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_explanation(&[0.0, -2.0, 1.0]), vec![0.0, -1.0, 0.5]);
        assert_eq!(normalize_explanation(&[0.0, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn argmax_examples() {
        assert_eq!(predict_faulty_sensor(&[0.1, -3.0, 0.2], None).unwrap(), Some(1));
        assert_eq!(predict_faulty_sensor(&[1.0, 1.0], None).unwrap(), Some(0));
        assert_eq!(predict_faulty_sensor(&[0.0, 0.0], None).unwrap(), None);
        let kinds = [SensorKind::Pressure, SensorKind::Flow];
        assert_eq!(predict_faulty_sensor(&[0.1, 5.0], Some(&kinds)).unwrap(), Some(0));
        assert_eq!(predict_faulty_sensor(&[0.0, 5.0], Some(&kinds)).unwrap(), None);
        assert!(predict_faulty_sensor(&[0.0], Some(&kinds)).is_err());
    }

    #[test]
    fn sequence_examples() {
        assert_eq!(aggregate_alarm_sequence(&[Some(3); 5], 20).unwrap(), Some(3));
        assert_eq!(
            aggregate_alarm_sequence(&[Some(2), Some(2), Some(1)], 20).unwrap(),
            Some(2)
        );
        assert_eq!(aggregate_alarm_sequence(&[Some(2), Some(1)], 20).unwrap(), Some(1));
        // only the first k steps vote
        assert_eq!(
            aggregate_alarm_sequence(&[Some(4), Some(1), Some(1)], 1).unwrap(),
            Some(4)
        );
        assert_eq!(aggregate_alarm_sequence(&[None, None], 20).unwrap(), None);
        assert!(matches!(aggregate_alarm_sequence(&[], 20), Err(Error::Empty(_))));
    }

    #[test]
    fn baseline_examples() {
        let d = |i: usize| {
            let mut v = vec![0.0; 4];
            v[i] = 1.0;
            v
        };
        assert_eq!(aggregate_baseline(&[d(2), d(2), d(2)], None).unwrap(), Some(2));
        assert_eq!(aggregate_baseline(&[d(0), d(0), d(1), d(3)], None).unwrap(), Some(0));
        assert!(aggregate_baseline(&[], None).is_err());
    }

    fn row(truth: usize, ens: Option<usize>, base: Option<usize>) -> ScenarioLocalization {
        ScenarioLocalization {
            scenario: format!("s{truth}"),
            fault_kind: "drift".into(),
            magnitude: 0.05,
            true_sensor: truth,
            ensemble: ens,
            baseline: base,
        }
    }

    #[test]
    fn report_accuracy() {
        let all = LocalizationReport::from_rows(vec![row(1, Some(1), Some(1)); 3]).unwrap();
        assert_eq!(all.ensemble_accuracy.mean, 1.0);
        assert_eq!(all.ensemble_accuracy.variance, 0.0);
        let half = LocalizationReport::from_rows(vec![
            row(0, Some(0), None),
            row(1, Some(1), Some(0)),
            row(2, Some(0), Some(2)),
            row(3, None, Some(0)),
        ])
        .unwrap();
        assert_eq!(half.ensemble_accuracy.mean, 0.5);
        assert_eq!(half.ensemble_accuracy.variance, 0.25);
        assert_eq!(half.baseline_accuracy.mean, 0.25);
        assert!(LocalizationReport::from_rows(vec![]).is_err());
    }

    #[test]
    fn report_csv_round_trip() {
        let report = LocalizationReport::from_rows(vec![row(0, Some(0), None), row(5, Some(4), Some(5))]).unwrap();
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let back = LocalizationReport::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, report);

        let text = String::from_utf8(buf).unwrap().replace(",4,5,0,1", ",4,5,1,1");
        assert!(matches!(
            LocalizationReport::read_csv(text.as_bytes()),
            Err(Error::Parse { line: 3, column: 7, .. })
        ));
    }

    proptest! {
        #[test]
        fn normalization_keeps_argmax(delta in prop::collection::vec(-1e3f64..1e3, 1..20)) {
            prop_assert_eq!(
                predict_faulty_sensor(&normalize_explanation(&delta), None).unwrap(),
                predict_faulty_sensor(&delta, None).unwrap()
            );
        }

        #[test]
        fn sequence_mode_is_permutation_invariant(
            mut preds in prop::collection::vec(prop::option::of(0usize..6), 1..30),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let k = preds.len();
            let before = aggregate_alarm_sequence(&preds, k).unwrap();
            preds.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(aggregate_alarm_sequence(&preds, k).unwrap(), before);
        }
    }
}
