//! Subcommands. Every artifact lives under the output directory:
//!
//! ```text
//! seed_<s>/clean.csv          fault-free panel
//! seed_<s>/plan.csv           planned scenarios of that seed
//! seed_<s>/scenarios/<id>.csv faulty panels
//! seed_<s>/models.txt         fitted virtual sensors
//! seed_<s>/threshold.txt      calibrated alarm threshold
//! detection.csv, detection.md
//! localization.csv, localization.md
//! explain/<id>_t<t>.{csv,svg}, explain/<id>_t<t>_baseline.{csv,svg}
//! ```

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;

use ensemble_cf::detector::DetectionSummary;
use ensemble_cf::experiment::{self, DetectionRow, ExperimentSettings, Network, PlannedScenario, ScenarioOutcome};
use ensemble_cf::explain;
use ensemble_cf::localize::{self, LocalizationReport};
use ensemble_cf::netgen::{generate_clean, FaultSpec, ReadingsPanel, Scenario};
use ensemble_cf::sensors::Ensemble;

use crate::plot;

pub struct RunContext {
    pub settings: ExperimentSettings,
    pub out: PathBuf,
}

impl RunContext {
    fn seed_dir(&self, seed: u64) -> PathBuf {
        self.out.join(format!("seed_{seed}"))
    }

    fn scenario_path(&self, planned: &PlannedScenario) -> PathBuf {
        self.seed_dir(planned.seed)
            .join("scenarios")
            .join(format!("{}.csv", planned.id))
    }

    fn plans(&self) -> Result<Vec<PlannedScenario>> {
        let mut all = Vec::new();
        for &seed in &self.settings.seeds {
            let path = self.seed_dir(seed).join("plan.csv");
            let file = open(&path, "run `simulate` first")?;
            all.extend(experiment::read_plan_csv(file).with_context(|| format!("reading {}", path.display()))?);
        }
        Ok(all)
    }

    fn clean(&self, seed: u64) -> Result<ReadingsPanel> {
        let path = self.seed_dir(seed).join("clean.csv");
        open(&path, "run `simulate` first")?;
        ReadingsPanel::load_csv_file(&path).with_context(|| format!("reading {}", path.display()))
    }

    fn network(&self, seed: u64) -> Result<Network> {
        let dir = self.seed_dir(seed);
        let models = read(&dir.join("models.txt"), "run `train` first")?;
        let ensemble =
            Ensemble::from_text(&models).with_context(|| format!("parsing {}", dir.join("models.txt").display()))?;
        let threshold_path = dir.join("threshold.txt");
        let threshold: f64 = read(&threshold_path, "run `train` first")?
            .trim()
            .parse()
            .with_context(|| format!("parsing {}", threshold_path.display()))?;
        let clean = self.clean(seed)?;
        ensemble.check_layout(clean.kinds())?;
        Ok(Network {
            config: self.settings.network_config(seed),
            clean,
            ensemble,
            threshold,
        })
    }

    fn networks(&self) -> Result<Vec<Network>> {
        self.settings.seeds.par_iter().map(|&s| self.network(s)).collect()
    }

    fn faulty(&self, network: &Network, planned: &PlannedScenario) -> Result<(FaultSpec, ReadingsPanel)> {
        let fault = FaultSpec {
            kind: planned.template.resolve(
                &network.clean,
                planned.sensor,
                planned.onset,
                self.settings.grid.drift_headroom,
            ),
            sensor: planned.sensor,
            onset: planned.onset,
        };
        let path = self.scenario_path(planned);
        open(&path, "run `simulate` first")?;
        let panel = ReadingsPanel::load_csv_file(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok((fault, panel))
    }
}

fn open(path: &Path, hint: &str) -> Result<fs::File> {
    fs::File::open(path).with_context(|| format!("cannot open {} ({hint})", path.display()))
}

fn read(path: &Path, hint: &str) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {} ({hint})", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn network_for(networks: &[Network], seed: u64) -> &Network {
    networks
        .iter()
        .find(|n| n.config.seed == seed)
        .expect("one network per seed")
}

pub fn simulate(ctx: &RunContext) -> Result<()> {
    let plan = experiment::plan_scenarios(&ctx.settings)?;
    ctx.settings.seeds.par_iter().try_for_each(|&seed| -> Result<()> {
        let config = ctx.settings.network_config(seed);
        let clean = generate_clean(&config)?;
        let dir = ctx.seed_dir(seed);
        fs::create_dir_all(dir.join("scenarios")).with_context(|| format!("creating {}", dir.display()))?;
        clean.write_csv_file(&dir.join("clean.csv"))?;
        let mine: Vec<PlannedScenario> = plan.iter().filter(|p| p.seed == seed).cloned().collect();
        experiment::write_plan_csv(&mine, create(&dir.join("plan.csv"))?)?;
        mine.par_iter().try_for_each(|p| -> Result<()> {
            let fault = FaultSpec {
                kind: p
                    .template
                    .resolve(&clean, p.sensor, p.onset, ctx.settings.grid.drift_headroom),
                sensor: p.sensor,
                onset: p.onset,
            };
            let scenario = Scenario::from_clean(&config, clean.clone(), fault, p.fault_seed)?;
            scenario.faulty.write_csv_file(&ctx.scenario_path(p))?;
            Ok(())
        })?;
        Ok(())
    })?;
    println!(
        "simulated {} scenarios over {} seed(s) in {}",
        plan.len(),
        ctx.settings.seeds.len(),
        ctx.out.display()
    );
    Ok(())
}

pub fn train(ctx: &RunContext) -> Result<()> {
    let trained = ctx
        .settings
        .seeds
        .par_iter()
        .map(|&seed| -> Result<(u64, f64, usize, usize)> {
            let clean = ctx.clean(seed)?;
            let network = Network::from_clean(&ctx.settings, ctx.settings.network_config(seed), clean)?;
            let dir = ctx.seed_dir(seed);
            fs::write(dir.join("models.txt"), network.ensemble.to_text())?;
            fs::write(dir.join("threshold.txt"), format!("{}\n", network.threshold))?;
            Ok((
                seed,
                network.threshold,
                network.ensemble.len(),
                network.held_out_false_alarms()?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    for (seed, threshold, models, fa) in trained {
        println!("seed {seed}: {models} virtual sensors, threshold {threshold:.6}, held-out false alarms {fa}");
    }
    Ok(())
}

pub fn detect(ctx: &RunContext) -> Result<()> {
    let networks = ctx.networks()?;
    let plan = ctx.plans()?;
    let results = plan
        .par_iter()
        .map(|p| -> Result<(FaultSpec, ensemble_cf::detector::DetectionReport)> {
            let network = network_for(&networks, p.seed);
            let (fault, panel) = ctx.faulty(network, p)?;
            let (_, report) = experiment::detect_panel(network, &fault, &panel)?;
            Ok((fault, report))
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = plan.iter().zip(&results).map(|(p, (fault, report))| DetectionRow {
        planned: p,
        fault,
        threshold: network_for(&networks, p.seed).threshold,
        report,
    });
    experiment::write_detection_rows(rows, create(&ctx.out.join("detection.csv"))?)?;
    let reports: Vec<_> = results.iter().map(|(_, r)| *r).collect();
    let summary = DetectionSummary::from_reports(&reports)?;
    let mut md = create(&ctx.out.join("detection.md"))?;
    summary.write_markdown(&mut md)?;
    println!(
        "{} scenarios, detected {:.1}%, median delay {}",
        reports.len(),
        100.0 * summary.success_rate,
        summary.median_delay.map_or("none".to_string(), |d| d.to_string())
    );
    Ok(())
}

pub fn explain(ctx: &RunContext, scenario: &str, step: Option<usize>, baseline: bool) -> Result<()> {
    let plan = ctx.plans()?;
    let planned = plan.iter().find(|p| p.id == scenario).ok_or_else(|| {
        anyhow!(
            "no scenario {scenario:?} in the plan of seed(s) {:?}",
            ctx.settings.seeds
        )
    })?;
    let network = ctx.network(planned.seed)?;
    let (fault, panel) = ctx.faulty(&network, planned)?;
    let t = match step {
        Some(t) => t,
        None => {
            let (alarms, _) = experiment::detect_panel(&network, &fault, &panel)?;
            experiment::explained_steps(&network, &alarms, &ctx.settings)
                .first()
                .copied()
                .ok_or_else(|| anyhow!("scenario {scenario} raises no alarm after the training prefix; pass --step"))?
        }
    };
    let settings = ExperimentSettings {
        baseline,
        ..ctx.settings.clone()
    };
    let step_out = experiment::explain_step(&network, &panel, t, &settings)?;
    let labels = panel.labels().to_vec();
    let stem = ctx.out.join("explain").join(format!("{scenario}_t{t}"));
    let cf = &step_out.ensemble;
    cf.write_fingerprint_csv(
        &labels,
        panel.kinds(),
        &explain::slacks_by_channel(&network.ensemble, cf),
        create(&stem.with_extension("csv"))?,
    )?;
    let normalized = localize::normalize_explanation(&cf.attribution());
    let title = format!("{scenario} t={t}: ensemble-consistent explanation");
    fs::write(
        stem.with_extension("svg"),
        plot::fingerprint_svg(&title, &labels, &normalized, step_out.ensemble_prediction),
    )?;
    println!(
        "{scenario} t={t}: predicted sensor {}, true sensor {}",
        step_out
            .ensemble_prediction
            .map_or("none".to_string(), |s| labels[s].clone()),
        labels[planned.sensor]
    );
    if baseline {
        let kinds = settings.exclude_flow.then_some(panel.kinds());
        let base_stem = ctx.out.join("explain").join(format!("{scenario}_t{t}_baseline"));
        let mut w = csv::Writer::from_writer(create(&base_stem.with_extension("csv"))?);
        let mut header = vec!["model_target".to_string(), "predicted".to_string()];
        header.extend(labels.iter().cloned());
        w.write_record(&header)?;
        let mut rows = Vec::new();
        for (m, c) in network.ensemble.models().iter().zip(&step_out.baseline) {
            let values = localize::normalize_explanation(&c.attribution());
            let pred = localize::predict_faulty_sensor(&c.attribution(), kinds)?;
            let mut rec = vec![
                labels[m.target].clone(),
                pred.map_or(String::new(), |s| labels[s].clone()),
            ];
            rec.extend(values.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
            rows.push((format!("model for {}", labels[m.target]), values, pred));
        }
        w.flush()?;
        let title = format!("{scenario} t={t}: per-model explanations");
        fs::write(
            base_stem.with_extension("svg"),
            plot::small_multiples_svg(&title, &labels, &rows),
        )?;
        println!(
            "baseline modal prediction: {}",
            step_out
                .baseline_prediction
                .map_or("none".to_string(), |s| labels[s].clone())
        );
    }
    Ok(())
}

pub fn evaluate(ctx: &RunContext) -> Result<()> {
    let networks = ctx.networks()?;
    let plan = ctx.plans()?;
    if plan.is_empty() {
        bail!("the plan is empty");
    }
    let outcomes = plan
        .par_iter()
        .map(|p| -> Result<ScenarioOutcome> {
            let network = network_for(&networks, p.seed);
            let (fault, panel) = ctx.faulty(network, p)?;
            Ok(experiment::evaluate_panel(network, p, fault, &panel, &ctx.settings)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = LocalizationReport::from_rows(outcomes.iter().map(|o| o.localization.clone()).collect())?;
    report.write_csv(create(&ctx.out.join("localization.csv"))?)?;
    let mut md = create(&ctx.out.join("localization.md"))?;
    report.write_markdown(&mut md)?;
    println!(
        "{} scenarios: ensemble accuracy {:.4}, baseline accuracy {:.4}, gap {:.4}",
        report.rows.len(),
        report.ensemble_accuracy.mean,
        report.baseline_accuracy.mean,
        report.gap()
    );
    Ok(())
}
