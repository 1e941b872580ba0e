//! Experiment harness: the γ-sweep, the time-invariance violation study,
//! predictive checks, and the command-line front end.
//!
//! Every job is a pure function of the configuration and its `(γ, seed)` pair, so
//! reports are byte-identical across reruns. Stage timings are the only
//! nondeterministic output and go to a separate `timings.csv`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checks::{predictive_p_values, PCheckReport};
use crate::error::{Error, Result};
use crate::outcome::{evaluate_mse, fit_outcome, FeatureSpec, OutcomeKind, Scenario};
use crate::seqgplvm::{self, FittedModel, ModelConfig, SubstitutePosterior};
use crate::simulator::{oracle_path, simulate_dataset, Oracle, SimConfig, Simulation};
use crate::trajectories::{load_dataset, save_dataset, split_dataset, Dataset, Format, Partition};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PCheckConfig {
    pub n_reps: usize,
    pub n_z_samples: usize,
    /// Validation patients drawn from the test partition.
    pub n_patients: usize,
}

impl Default for PCheckConfig {
    fn default() -> Self {
        PCheckConfig {
            n_reps: 50,
            n_z_samples: 100,
            n_patients: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Simulator settings. In sweeps `gamma_a` and `gamma_y` are replaced by each
    /// grid value and `seed` by the job seed.
    pub sim: SimConfig,
    pub model: ModelConfig,
    pub gamma_grid: Vec<f64>,
    pub scenarios: Vec<Scenario>,
    pub n_seeds: usize,
    /// Job `i` uses seed `seed + i` for simulation, split, and model fitting.
    pub seed: u64,
    pub outcome_kind: OutcomeKind,
    pub ridge_lambda: f64,
    pub history_window: usize,
    pub train_frac: f64,
    pub output_dir: Option<PathBuf>,
    pub pcheck: PCheckConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            sim: SimConfig::default(),
            model: ModelConfig::desk(),
            gamma_grid: vec![0.0, 0.2, 0.4, 0.6, 0.8],
            scenarios: vec![Scenario::Confounded, Scenario::Oracle, Scenario::Deconfounded],
            n_seeds: 5,
            seed: 0,
            outcome_kind: OutcomeKind::Ridge,
            ridge_lambda: 1e-3,
            history_window: 3,
            train_frac: 0.8,
            output_dir: None,
            pcheck: PCheckConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&s)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.gamma_grid.is_empty() {
            return Err(Error::Config("gamma_grid is empty".into()));
        }
        if let Some(g) = self.gamma_grid.iter().find(|g| !(0.0..=1.0).contains(*g)) {
            return Err(Error::Config(format!("gamma {g} outside [0,1]")));
        }
        if self.n_seeds < 1 {
            return Err(Error::Config("n_seeds must be at least 1".into()));
        }
        if self.scenarios.is_empty() {
            return Err(Error::Config("no scenarios selected".into()));
        }
        let mut seen = self.scenarios.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.scenarios.len() {
            return Err(Error::Config("duplicate scenario".into()));
        }
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return Err(Error::Config(format!("train_frac {} outside (0,1)", self.train_frac)));
        }
        if self.pcheck.n_reps < 2 || self.pcheck.n_z_samples < 1 || self.pcheck.n_patients < 1 {
            return Err(Error::Config(
                "pcheck needs n_reps >= 2, n_z_samples >= 1, n_patients >= 1".into(),
            ));
        }
        self.sim.validate()?;
        self.model.validate()?;
        FeatureSpec::for_scenario(Scenario::Confounded, self.history_window).validate()
    }

    fn job_seeds(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.n_seeds as u64).map(move |i| self.seed + i)
    }

    fn sim_for(&self, gamma: f64, seed: u64, drop: Option<usize>) -> SimConfig {
        SimConfig {
            seed,
            drop_covariate: drop,
            ..self.sim.clone().with_gamma(gamma)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub gamma: f64,
    pub scenario: Scenario,
    pub seed: u64,
    pub mse: f64,
    pub mse_factual_only: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub gamma: f64,
    pub scenario: Scenario,
    pub n: usize,
    pub mean_mse: f64,
    pub std_mse: f64,
    pub mean_mse_factual_only: f64,
    pub std_mse_factual_only: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub gamma: f64,
    pub seed: u64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<ReportRow>,
    pub pcheck: Option<PCheckReport>,
    pub timings: Vec<StageTiming>,
}

/// Sample mean and standard deviation (n-1 denominator; 0 for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = v.iter().map(|x| (x - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

impl ExperimentReport {
    fn sort(&mut self) {
        self.rows.sort_by(|a, b| {
            a.gamma
                .total_cmp(&b.gamma)
                .then(a.scenario.cmp(&b.scenario))
                .then(a.seed.cmp(&b.seed))
        });
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut groups: Vec<((f64, Scenario), Vec<&ReportRow>)> = Vec::new();
        for row in &self.rows {
            match groups.iter_mut().find(|(k, _)| k.0 == row.gamma && k.1 == row.scenario) {
                Some((_, rows)) => rows.push(row),
                None => groups.push(((row.gamma, row.scenario), vec![row])),
            }
        }
        groups
            .into_iter()
            .map(|((gamma, scenario), rows)| {
                let mse: Vec<f64> = rows.iter().map(|r| r.mse).collect();
                let fac: Vec<f64> = rows.iter().map(|r| r.mse_factual_only).collect();
                let (mean_mse, std_mse) = mean_std(&mse);
                let (mean_f, std_f) = mean_std(&fac);
                SummaryRow {
                    gamma,
                    scenario,
                    n: rows.len(),
                    mean_mse,
                    std_mse,
                    mean_mse_factual_only: mean_f,
                    std_mse_factual_only: std_f,
                }
            })
            .collect()
    }

    /// Mean MSE over seeds for one cell of the grid.
    pub fn mean_mse(&self, gamma: f64, scenario: Scenario) -> Option<f64> {
        self.summary()
            .into_iter()
            .find(|s| s.gamma == gamma && s.scenario == scenario)
            .map(|s| s.mean_mse)
    }

    pub fn report_csv(&self) -> String {
        let mut out = String::from("gamma,scenario,seed,mse,mse_factual_only\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.gamma,
                r.scenario.tag(),
                r.seed,
                r.mse,
                r.mse_factual_only
            );
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from(
            "gamma,scenario,n,mean_mse,std_mse,mean_mse_factual_only,std_mse_factual_only\n",
        );
        for s in self.summary() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                s.gamma,
                s.scenario.tag(),
                s.n,
                s.mean_mse,
                s.std_mse,
                s.mean_mse_factual_only,
                s.std_mse_factual_only
            );
        }
        out
    }

    fn timings_csv(&self) -> String {
        let mut out = String::from("stage,gamma,seed,seconds\n");
        for t in &self.timings {
            let _ = writeln!(out, "{},{},{},{:.3}", t.stage, t.gamma, t.seed, t.seconds);
        }
        out
    }

    /// Mean MSE against γ, one polyline per scenario.
    pub fn plot_svg(&self) -> String {
        let summary = self.summary();
        let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
        for s in &summary {
            let tag = s.scenario.tag().to_string();
            match series.iter_mut().find(|(name, _)| *name == tag) {
                Some((_, pts)) => pts.push((s.gamma, s.mean_mse)),
                None => series.push((tag, vec![(s.gamma, s.mean_mse)])),
            }
        }
        svg_polylines("gamma", "MSE", &series, None)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            ("report.csv", self.report_csv()),
            ("summary.csv", self.summary_csv()),
            ("mse.svg", self.plot_svg()),
            ("timings.csv", self.timings_csv()),
        ];
        for (name, body) in files {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Minimal SVG line chart. `reference` draws a dashed horizontal line at that y.
pub fn svg_polylines(
    x_label: &str,
    y_label: &str,
    series: &[(String, Vec<(f64, f64)>)],
    reference: Option<f64>,
) -> String {
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if let Some(r) = reference {
        y0 = y0.min(r);
        y1 = y1.max(r);
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5 * y0.abs().max(1e-3);
        y1 += 0.5 * y1.abs().max(1e-3);
    }
    let sx = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);

    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    );
    let _ = writeln!(
        s,
        "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n<line x1=\"{pad}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n<line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{b}\" stroke=\"black\"/>",
        b = h - pad,
        r = w - pad
    );
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">{x_label} [{x0:.3}, {x1:.3}]</text>",
        w / 2.0,
        h - 15.0
    );
    let _ = writeln!(
        s,
        "<text x=\"15\" y=\"{}\" font-size=\"12\" transform=\"rotate(-90 15 {})\" text-anchor=\"middle\">{y_label} [{y0:.4}, {y1:.4}]</text>",
        h / 2.0,
        h / 2.0
    );
    if let Some(r) = reference {
        let y = sy(r);
        let _ = writeln!(
            s,
            "<line x1=\"{pad}\" y1=\"{y:.2}\" x2=\"{}\" y2=\"{y:.2}\" stroke=\"red\" stroke-dasharray=\"6 4\"/>",
            w - pad
        );
    }
    for (i, (name, p)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = p.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
            coords.join(" ")
        );
        for c in &coords {
            let (cx, cy) = c.split_once(',').expect("formatted pair");
            let _ = writeln!(s, "<circle cx=\"{cx}\" cy=\"{cy}\" r=\"3\" fill=\"{color}\"/>");
        }
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{name}</text>",
            w - pad - 120.0,
            pad + 15.0 * i as f64
        );
    }
    s.push_str("</svg>\n");
    s
}

fn model_file(gamma: f64, seed: u64, drop: Option<usize>) -> String {
    match drop {
        None => format!("gamma{gamma}_seed{seed}.json"),
        Some(j) => format!("gamma{gamma}_seed{seed}_drop{j}.json"),
    }
}

struct Clock<'a> {
    timings: &'a mut Vec<StageTiming>,
    gamma: f64,
    seed: u64,
}

impl Clock<'_> {
    fn time<T>(&mut self, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f().map_err(|e| e.in_stage(stage))?;
        self.timings.push(StageTiming {
            stage: stage.to_string(),
            gamma: self.gamma,
            seed: self.seed,
            seconds: start.elapsed().as_secs_f64(),
        });
        Ok(out)
    }
}

/// Fits the SeqGPLVM on the train partition and returns substitutes for every
/// patient. Training patients keep their stored posterior.
fn substitutes_for(
    cfg: &ExperimentConfig,
    d: &Dataset,
    seed: u64,
    checkpoint: Option<PathBuf>,
    clock: &mut Clock,
) -> Result<BTreeMap<String, SubstitutePosterior>> {
    let train = d.subset(Partition::Train);
    let mcfg = ModelConfig {
        seed,
        ..cfg.model.clone()
    };
    let model = clock.time("fit", || seqgplvm::fit(&train, &mcfg))?;
    if let Some(path) = checkpoint {
        clock.time("checkpoint", || model.save(&path))?;
    }
    clock.time("infer", || {
        let pred = model.predictor()?;
        d.trajectories
            .iter()
            .map(|t| {
                let post = match model.stored_posterior(&t.id) {
                    Some(p) => p,
                    None => seqgplvm::infer_with(&model, &pred, t)?,
                };
                Ok((t.id.clone(), post))
            })
            .collect()
    })
}

fn score(
    cfg: &ExperimentConfig,
    d: &Dataset,
    oracle: &Oracle,
    scenario: Scenario,
    subs: Option<&BTreeMap<String, SubstitutePosterior>>,
    clock: &mut Clock,
) -> Result<ReportRow> {
    let train = d.subset(Partition::Train);
    let test = d.subset(Partition::Test);
    let spec = FeatureSpec::for_scenario(scenario, cfg.history_window);
    let m = clock.time("outcome", || {
        fit_outcome(&train, &spec, scenario, cfg.outcome_kind, cfg.ridge_lambda, subs)
    })?;
    let r = clock.time("evaluate", || evaluate_mse(&m, &test, oracle, subs))?;
    Ok(ReportRow {
        gamma: clock.gamma,
        scenario,
        seed: clock.seed,
        mse: r.mse,
        mse_factual_only: r.mse_factual,
    })
}

fn simulate_split(cfg: &ExperimentConfig, sim: &SimConfig, clock: &mut Clock) -> Result<Simulation> {
    clock.time("simulate", || {
        let s = simulate_dataset(sim)?;
        Ok(Simulation {
            dataset: split_dataset(&s.dataset, cfg.train_frac, sim.seed)?,
            oracle: s.oracle,
        })
    })
}

fn models_dir(cfg: &ExperimentConfig) -> Result<Option<PathBuf>> {
    match &cfg.output_dir {
        None => Ok(None),
        Some(dir) => {
            let m = dir.join("models");
            fs::create_dir_all(&m).map_err(|e| Error::io(&m, e))?;
            Ok(Some(m))
        }
    }
}

/// One `(γ, seed)` job of the sweep.
fn sweep_job(
    cfg: &ExperimentConfig,
    gamma: f64,
    seed: u64,
    models: Option<&Path>,
    timings: &mut Vec<StageTiming>,
) -> Result<Vec<ReportRow>> {
    let mut clock = Clock { timings, gamma, seed };
    let sim = simulate_split(cfg, &cfg.sim_for(gamma, seed, None), &mut clock)?;
    let subs = if cfg.scenarios.iter().any(|s| s.needs_substitute()) {
        let ckpt = models.map(|m| m.join(model_file(gamma, seed, None)));
        Some(substitutes_for(cfg, &sim.dataset, seed, ckpt, &mut clock)?)
    } else {
        None
    };
    let mut rows = Vec::new();
    for &sc in &cfg.scenarios {
        if sc == Scenario::TimeInvViolated {
            return Err(Error::Config(
                "time_inv_violated belongs to the violation study, not the sweep".into(),
            ));
        }
        rows.push(score(cfg, &sim.dataset, &sim.oracle, sc, subs.as_ref(), &mut clock)?);
    }
    Ok(rows)
}

/// Runs every `(γ, seed)` job and writes the report files when `output_dir` is set.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let models = models_dir(cfg)?;
    let mut report = ExperimentReport::default();
    for &gamma in &cfg.gamma_grid {
        for seed in cfg.job_seeds() {
            let rows = sweep_job(cfg, gamma, seed, models.as_deref(), &mut report.timings)?;
            report.rows.extend(rows);
        }
    }
    report.sort();
    if let Some(dir) = &cfg.output_dir {
        report.write(dir)?;
    }
    Ok(report)
}

/// The violation study. Each job simulates one draw and scores the selected
/// baselines on the full covariates and `time_inv_violated` on the same draw with
/// `cfg.sim.drop_covariate` removed from the data.
pub fn run_violation(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let drop = cfg
        .sim
        .drop_covariate
        .ok_or_else(|| Error::Config("violation study needs sim.drop_covariate".into()))?;
    let models = models_dir(cfg)?;
    let mut report = ExperimentReport::default();
    let mut scenarios = cfg.scenarios.clone();
    if !scenarios.contains(&Scenario::TimeInvViolated) {
        scenarios.push(Scenario::TimeInvViolated);
    }
    for &gamma in &cfg.gamma_grid {
        for seed in cfg.job_seeds() {
            let mut clock = Clock {
                timings: &mut report.timings,
                gamma,
                seed,
            };
            let full = simulate_split(cfg, &cfg.sim_for(gamma, seed, None), &mut clock)?;
            let baselines: Vec<Scenario> = scenarios
                .iter()
                .copied()
                .filter(|s| *s != Scenario::TimeInvViolated)
                .collect();
            let subs = if baselines.iter().any(|s| s.needs_substitute()) {
                let ckpt = models.as_ref().map(|m| m.join(model_file(gamma, seed, None)));
                Some(substitutes_for(cfg, &full.dataset, seed, ckpt, &mut clock)?)
            } else {
                None
            };
            for sc in baselines {
                let row = score(cfg, &full.dataset, &full.oracle, sc, subs.as_ref(), &mut clock)?;
                report.rows.push(row);
            }

            let reduced = simulate_split(cfg, &cfg.sim_for(gamma, seed, Some(drop)), &mut clock)?;
            let ckpt = models.as_ref().map(|m| m.join(model_file(gamma, seed, Some(drop))));
            let subs = substitutes_for(cfg, &reduced.dataset, seed, ckpt, &mut clock)?;
            let row = score(
                cfg,
                &reduced.dataset,
                &reduced.oracle,
                Scenario::TimeInvViolated,
                Some(&subs),
                &mut clock,
            )?;
            report.rows.push(row);
        }
    }
    report.sort();
    if let Some(dir) = &cfg.output_dir {
        report.write(dir)?;
    }
    Ok(report)
}

/// Predictive checks for the model of the first grid value and `cfg.seed`.
///
/// The model is read from `model_path`, or else from the sweep checkpoint under
/// `output_dir/models/`. Validation patients are the first `pcheck.n_patients`
/// test-partition ids of the same simulated draw.
pub fn run_pchecks(cfg: &ExperimentConfig, model_path: Option<&Path>) -> Result<PCheckReport> {
    cfg.validate()?;
    let gamma = cfg.gamma_grid[0];
    let seed = cfg.seed;
    let path = match (model_path, &cfg.output_dir) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(dir)) => dir.join("models").join(model_file(gamma, seed, None)),
        (None, None) => {
            return Err(Error::Config("no model path and no output_dir to find a checkpoint".into()))
        }
    };
    if !path.exists() {
        return Err(Error::Config(format!(
            "missing checkpoint {}; run `sweep` first or pass --model",
            path.display()
        )));
    }
    let model = FittedModel::load(&path).map_err(|e| e.in_stage("load"))?;
    let mut timings = Vec::new();
    let mut clock = Clock {
        timings: &mut timings,
        gamma,
        seed,
    };
    let sim = simulate_split(cfg, &cfg.sim_for(gamma, seed, None), &mut clock)?;
    let train_hash = seqgplvm::dataset_hash(&sim.dataset.subset(Partition::Train));
    if train_hash != model.training_meta.dataset_hash {
        return Err(Error::Config(format!(
            "checkpoint {} was fitted on different data than gamma={gamma}, seed={seed}",
            path.display()
        )));
    }
    let validation = validation_subset(&sim.dataset, cfg.pcheck.n_patients);
    let report = clock.time("pcheck", || {
        predictive_p_values(&model, &validation, cfg.pcheck.n_reps, cfg.pcheck.n_z_samples, seed)
    })?;
    if let Some(dir) = &cfg.output_dir {
        write_pcheck(&report, dir)?;
    }
    Ok(report)
}

/// First `n` ids (in sorted order) of the held-out partition.
pub fn validation_subset(d: &Dataset, n: usize) -> Dataset {
    let mut held = d.subset(Partition::Validation);
    if held.is_empty() {
        held = d.subset(Partition::Test);
    }
    held.trajectories.sort_by(|a, b| a.id.cmp(&b.id));
    held.trajectories.truncate(n);
    let keep: std::collections::BTreeSet<&str> =
        held.trajectories.iter().map(|t| t.id.as_str()).collect();
    held.split.retain(|id, _| keep.contains(id.as_str()));
    held
}

pub fn write_pcheck(report: &PCheckReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    report.save(&dir.join("pcheck.csv"))?;
    let pts: Vec<(f64, f64)> = report
        .p_values
        .iter()
        .enumerate()
        .map(|(t, p)| (t as f64, *p))
        .collect();
    let svg = svg_polylines("t", "mean p-value", &[("p-value".into(), pts)], Some(0.5));
    let path = dir.join("pcheck.svg");
    fs::write(&path, svg).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------- CLI

#[derive(Debug, Parser)]
#[command(
    name = "seqdeconf",
    about = "Sequential deconfounding experiments",
    after_long_help = schema_help()
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON experiment configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of simulated patients.
    #[arg(long)]
    n: Option<usize>,
    /// 5000 patients with 20 to 30 steps.
    #[arg(long)]
    paper_scale: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a dataset; writes the data file, its split sidecar, and the oracle sidecar.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        gamma: Option<f64>,
        /// 0-based covariate column to drop from the emitted data.
        #[arg(long)]
        drop_covariate: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the SeqGPLVM on the train partition of a dataset.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path (default: `<data>.model.json`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        max_iters: Option<usize>,
    },
    /// Predictive checks over time.
    Pcheck {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to check. Without it, the sweep checkpoint under `--out/models` is used.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Dataset whose held-out partition is checked. Without it, the draw is regenerated.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        n_reps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep γ and seeds over the selected scenarios.
    Sweep(SweepArgs),
    /// Time-invariance violation study.
    Violation {
        #[command(flatten)]
        sweep: SweepArgs,
        /// 0-based covariate column to drop.
        #[arg(long)]
        drop_covariate: Option<usize>,
    },
    /// Fit one outcome model on a saved dataset and score it with the oracle sidecar.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "confounded")]
        scenario: String,
        /// SeqGPLVM checkpoint, required for `deconfounded`.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        outcome_kind: Option<String>,
    },
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated γ values.
    #[arg(long, value_delimiter = ',')]
    gamma_grid: Option<Vec<f64>>,
    /// Comma-separated scenario tags.
    #[arg(long, value_delimiter = ',')]
    scenarios: Option<Vec<String>>,
    #[arg(long)]
    n_seeds: Option<usize>,
    #[arg(long)]
    outcome_kind: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn schema_help() -> String {
    let cfg = serde_json::to_string_pretty(&ExperimentConfig::default()).expect("serializes");
    format!(
        "Configuration schema (JSON, every field optional, defaults shown):\n{cfg}\n\n\
         Scenarios: confounded, oracle, deconfounded, time_inv_violated.\n\
         Outcome kinds: ridge, msm_ipw.\n\
         Exit codes: 0 success, 1 usage or configuration error, 2 runtime error."
    )
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other),
        }
    }
}

fn base_config(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) if !p.exists() => {
            return Err(Failure::Usage(format!("config file {} not found", p.display())))
        }
        Some(p) => ExperimentConfig::load(p).map_err(|e| Failure::Usage(e.to_string()))?,
        None => ExperimentConfig::default(),
    };
    if common.paper_scale {
        let seed = cfg.sim.seed;
        cfg.sim = SimConfig {
            gamma_a: cfg.sim.gamma_a,
            gamma_y: cfg.sim.gamma_y,
            seed,
            ..SimConfig::paper_scale()
        };
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.sim.seed = s;
    }
    if let Some(n) = common.n {
        cfg.sim.n_patients = n;
    }
    Ok(cfg)
}

fn apply_sweep(args: &SweepArgs) -> Result<ExperimentConfig, Failure> {
    let mut cfg = base_config(&args.common)?;
    if let Some(g) = &args.gamma_grid {
        cfg.gamma_grid = g.clone();
    }
    if let Some(s) = &args.scenarios {
        cfg.scenarios = s.iter().map(|t| t.parse()).collect::<Result<_>>()?;
    }
    if let Some(n) = args.n_seeds {
        cfg.n_seeds = n;
    }
    if let Some(k) = &args.outcome_kind {
        cfg.outcome_kind = k.parse()?;
    }
    if let Some(o) = &args.out {
        cfg.output_dir = Some(o.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_with_split(path: &Path) -> Result<Dataset> {
    let format = Format::from_path(path)
        .ok_or_else(|| Error::Config(format!("{}: expected a .csv or .json file", path.display())))?;
    load_dataset(path, format)
}

fn print_report(report: &ExperimentReport) {
    print!("{}", report.summary_csv());
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate {
            common,
            gamma,
            drop_covariate,
            out,
        } => {
            let mut cfg = base_config(&common)?;
            if let Some(g) = gamma {
                cfg.sim = cfg.sim.with_gamma(g);
            }
            cfg.sim.drop_covariate = drop_covariate.or(cfg.sim.drop_covariate);
            cfg.sim.validate()?;
            let format = Format::from_path(&out)
                .ok_or_else(|| Failure::Usage(format!("{}: expected .csv or .json", out.display())))?;
            let sim = simulate_dataset(&cfg.sim)?;
            let d = split_dataset(&sim.dataset, cfg.train_frac, cfg.sim.seed)?;
            save_dataset(&d, &out, format)?;
            sim.oracle.save(&oracle_path(&out))?;
            println!(
                "wrote {} trajectories to {} ({} train)",
                d.len(),
                out.display(),
                d.partition_size(Partition::Train)
            );
        }
        Command::Fit {
            common,
            data,
            out,
            max_iters,
        } => {
            let mut cfg = base_config(&common)?;
            if let Some(m) = max_iters {
                cfg.model.max_iters = m;
            }
            cfg.model.seed = cfg.seed;
            cfg.model.validate()?;
            let d = load_with_split(&data)?;
            let train = d.subset(Partition::Train);
            let model = seqgplvm::fit(&train, &cfg.model).map_err(|e| e.in_stage("fit"))?;
            let out = out.unwrap_or_else(|| data.with_extension("model.json"));
            model.save(&out)?;
            let meta = &model.training_meta;
            println!(
                "elbo {:.4} -> {:.4} after {} iterations (converged: {}); wrote {}",
                meta.initial_elbo,
                meta.final_elbo,
                meta.iterations,
                meta.converged,
                out.display()
            );
        }
        Command::Pcheck {
            common,
            model,
            data,
            gamma,
            n_reps,
            out,
        } => {
            let mut cfg = base_config(&common)?;
            if let Some(g) = gamma {
                cfg.gamma_grid = vec![g];
            }
            if let Some(m) = n_reps {
                cfg.pcheck.n_reps = m;
            }
            if let Some(o) = out {
                cfg.output_dir = Some(o);
            }
            cfg.validate()?;
            let report = match data {
                Some(path) => {
                    let model_path = model.ok_or_else(|| {
                        Failure::Usage("--data needs --model".into())
                    })?;
                    if !model_path.exists() {
                        return Err(Failure::Usage(format!(
                            "missing checkpoint {}",
                            model_path.display()
                        )));
                    }
                    let m = FittedModel::load(&model_path)?;
                    let d = load_with_split(&path)?;
                    let v = validation_subset(&d, cfg.pcheck.n_patients);
                    let r = predictive_p_values(
                        &m,
                        &v,
                        cfg.pcheck.n_reps,
                        cfg.pcheck.n_z_samples,
                        cfg.seed,
                    )?;
                    if let Some(dir) = &cfg.output_dir {
                        write_pcheck(&r, dir)?;
                    }
                    r
                }
                None => run_pchecks(&cfg, model.as_deref())?,
            };
            print!("{}", report.to_csv());
        }
        Command::Sweep(args) => {
            let cfg = apply_sweep(&args)?;
            print_report(&run_sweep(&cfg)?);
        }
        Command::Violation {
            sweep,
            drop_covariate,
        } => {
            let mut cfg = apply_sweep(&sweep)?;
            cfg.sim.drop_covariate = drop_covariate.or(cfg.sim.drop_covariate).or(Some(0));
            print_report(&run_violation(&cfg)?);
        }
        Command::Eval {
            common,
            data,
            scenario,
            model,
            outcome_kind,
        } => {
            let mut cfg = base_config(&common)?;
            if let Some(k) = outcome_kind {
                cfg.outcome_kind = k.parse()?;
            }
            let scenario: Scenario = scenario.parse()?;
            let d = load_with_split(&data)?;
            let oracle = Oracle::load(&oracle_path(&data)).map_err(|e| e.in_stage("oracle"))?;
            let subs = match (scenario.needs_substitute(), model) {
                (false, _) => None,
                (true, None) => {
                    return Err(Failure::Usage(format!("{} needs --model", scenario.tag())))
                }
                (true, Some(p)) => {
                    let m = FittedModel::load(&p)?;
                    let pred = m.predictor()?;
                    let mut subs = BTreeMap::new();
                    for t in &d.trajectories {
                        let post = match m.stored_posterior(&t.id) {
                            Some(p) => p,
                            None => seqgplvm::infer_with(&m, &pred, t)?,
                        };
                        subs.insert(t.id.clone(), post);
                    }
                    Some(subs)
                }
            };
            let spec = FeatureSpec::for_scenario(scenario, cfg.history_window);
            let train = d.subset(Partition::Train);
            let test = d.subset(Partition::Test);
            let m = fit_outcome(&train, &spec, scenario, cfg.outcome_kind, cfg.ridge_lambda, subs.as_ref())
                .map_err(|e| e.in_stage("outcome"))?;
            let r = evaluate_mse(&m, &test, &oracle, subs.as_ref())
                .map_err(|e| e.in_stage("evaluate"))?;
            println!("scenario,mse,mse_factual_only,n_rows");
            println!("{},{},{},{}", scenario.tag(), r.mse, r.mse_factual, r.n_rows);
        }
    }
    Ok(())
}

/// Runs the command line `argv` (including the program name) and returns the
/// process exit code.
pub fn cli_main<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_small_cases() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn config_rejects_bad_grid() {
        let cfg = ExperimentConfig {
            gamma_grid: vec![1.5],
            ..ExperimentConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let cfg = ExperimentConfig {
            n_seeds: 0,
            ..ExperimentConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn svg_has_reference_line() {
        let s = svg_polylines("t", "p", &[("p".into(), vec![(0.0, 0.4), (1.0, 0.6)])], Some(0.5));
        assert!(s.contains("stroke-dasharray"));
        assert_eq!(s.matches("<polyline").count(), 1);
    }
}
