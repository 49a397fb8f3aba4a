//! Run configuration file (TOML). Every key is optional; unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use ensemble_cf::detector;
use ensemble_cf::experiment::{ExperimentSettings, FaultGrid};
use ensemble_cf::explain::{Anchor, CfConfig, Complexity, Dist, Tolerance};
use ensemble_cf::netgen::ScenarioConfig;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Where artifacts go; relative paths resolve against the working directory.
    pub output_dir: Option<PathBuf>,
    pub network: NetworkSection,
    pub grid: GridSection,
    pub detector: DetectorSection,
    pub explain: ExplainSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSection {
    pub n_pressure: usize,
    pub n_flow: usize,
    pub n_steps: usize,
    pub train_end: usize,
    pub latent_dim: usize,
    pub noise_std: f64,
}

impl Default for NetworkSection {
    fn default() -> Self {
        let d = ScenarioConfig::default();
        Self {
            n_pressure: d.n_pressure,
            n_flow: d.n_flow,
            n_steps: d.n_steps,
            train_end: d.train_end,
            latent_dim: d.latent_dim,
            noise_std: d.noise_std,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub seeds: Vec<u64>,
    pub constant_offset: Vec<f64>,
    pub gaussian_noise: Vec<f64>,
    pub proportional_offset: Vec<f64>,
    pub drift_rate: Vec<f64>,
    pub power_failure_replicates: usize,
    pub drift_headroom: f64,
    pub onset_gap: usize,
    pub onset_span: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        let s = ExperimentSettings::default();
        Self {
            seeds: s.seeds,
            constant_offset: s.grid.constant_offset,
            gaussian_noise: s.grid.gaussian_noise,
            proportional_offset: s.grid.proportional_offset,
            drift_rate: s.grid.drift_rate,
            power_failure_replicates: s.grid.power_failure_replicates,
            drift_headroom: s.grid.drift_headroom,
            onset_gap: s.onset_gap,
            onset_span: s.onset_span,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorSection {
    pub window: usize,
    pub margin: f64,
}

impl Default for DetectorSection {
    fn default() -> Self {
        Self {
            window: ensemble_cf::sensors::DEFAULT_WINDOW,
            margin: detector::DEFAULT_MARGIN,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComplexityKey {
    L1,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistKey {
    Abs,
    Squared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorKey {
    History,
    Window,
    Snapshot,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainSection {
    pub lambda: f64,
    pub complexity: ComplexityKey,
    pub dist: DistKey,
    pub anchor: AnchorKey,
    /// Fidelity tolerance; defaults to each network's calibrated threshold.
    pub tolerance: Option<f64>,
    pub alarm_steps: usize,
    pub baseline: bool,
    pub exclude_flow: bool,
}

impl Default for ExplainSection {
    fn default() -> Self {
        let s = ExperimentSettings::default();
        Self {
            lambda: s.cf.lambda,
            complexity: ComplexityKey::L1,
            dist: DistKey::Abs,
            anchor: AnchorKey::History,
            tolerance: None,
            alarm_steps: s.alarm_steps,
            baseline: s.baseline,
            exclude_flow: s.exclude_flow,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.settings()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn settings(&self) -> Result<ExperimentSettings> {
        let n = &self.network;
        let g = &self.grid;
        let e = &self.explain;
        let tolerance = match e.tolerance {
            // Zero means "use the calibrated threshold" downstream.
            None => Tolerance::Uniform(0.0),
            Some(t) if t > 0.0 => Tolerance::Uniform(t),
            Some(t) => bail!("explain.tolerance must be positive, got {t}"),
        };
        let settings = ExperimentSettings {
            network: ScenarioConfig {
                n_pressure: n.n_pressure,
                n_flow: n.n_flow,
                n_steps: n.n_steps,
                train_end: n.train_end,
                latent_dim: n.latent_dim,
                noise_std: n.noise_std,
                seed: 0,
            },
            seeds: g.seeds.clone(),
            grid: FaultGrid {
                constant_offset: g.constant_offset.clone(),
                gaussian_noise: g.gaussian_noise.clone(),
                proportional_offset: g.proportional_offset.clone(),
                drift_rate: g.drift_rate.clone(),
                power_failure_replicates: g.power_failure_replicates,
                drift_headroom: g.drift_headroom,
            },
            window: self.detector.window,
            margin: self.detector.margin,
            cf: CfConfig {
                lambda: e.lambda,
                complexity: match e.complexity {
                    ComplexityKey::L1 => Complexity::L1,
                    ComplexityKey::L2 => Complexity::L2,
                },
                dist: match e.dist {
                    DistKey::Abs => Dist::Abs,
                    DistKey::Squared => Dist::Squared,
                },
                tolerance,
                ..CfConfig::default()
            },
            anchor: match e.anchor {
                AnchorKey::History => Anchor::History,
                AnchorKey::Window => Anchor::Window,
                AnchorKey::Snapshot => Anchor::Snapshot,
            },
            alarm_steps: e.alarm_steps,
            onset_gap: g.onset_gap,
            onset_span: g.onset_span,
            baseline: e.baseline,
            exclude_flow: e.exclude_flow,
        };
        if !(settings.margin >= 1.0 && settings.margin.is_finite()) {
            bail!("detector.margin must be at least 1, got {}", settings.margin);
        }
        settings.validate()?;
        Ok(settings)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg.settings().unwrap(), ExperimentSettings::default());
    }

    #[test]
    fn sections_override_defaults() {
        let cfg = RunConfig::parse(
            r#"
output_dir = "runs/a"
[grid]
seeds = [7]
[explain]
complexity = "l2"
anchor = "window"
"#,
        )
        .unwrap();
        let s = cfg.settings().unwrap();
        assert_eq!(s.seeds, vec![7]);
        assert_eq!(s.cf.complexity, Complexity::L2);
        assert_eq!(s.anchor, Anchor::Window);
        assert_eq!(cfg.output_dir, Some(PathBuf::from("runs/a")));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("[grid]\nseed = [1]\n").is_err());
        assert!(RunConfig::parse("outputdir = \"x\"\n").is_err());
        assert!(RunConfig::parse("[solver]\n").is_err());
        assert!(RunConfig::parse("[explain]\nanchor = \"moving\"\n").is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::parse("[detector]\nmargin = 0.5\n").is_err());
        assert!(RunConfig::parse("[grid]\nseeds = []\n").is_err());
        assert!(RunConfig::parse("[explain]\ntolerance = -1.0\n").is_err());
    }
}
