use std::path::Path;

use seqdeconf::experiments::{
    cli_main, mean_std, run_pchecks, run_sweep, run_violation, ExperimentConfig, PCheckConfig,
};
use seqdeconf::outcome::Scenario;
use seqdeconf::seqgplvm::ModelConfig;
use seqdeconf::simulator::SimConfig;
use seqdeconf::Error;

fn tiny(out: Option<&Path>) -> ExperimentConfig {
    ExperimentConfig {
        sim: SimConfig {
            n_patients: 60,
            t_min: 8,
            t_max: 8,
            ..SimConfig::default()
        },
        model: ModelConfig {
            max_iters: 10,
            n_inducing: 8,
            ..ModelConfig::desk()
        },
        gamma_grid: vec![0.0, 0.6],
        n_seeds: 2,
        output_dir: out.map(Path::to_path_buf),
        pcheck: PCheckConfig {
            n_reps: 5,
            n_z_samples: 5,
            n_patients: 6,
        },
        ..ExperimentConfig::default()
    }
}

fn parse_report(text: &str) -> Vec<(f64, String, u64, f64, f64)> {
    text.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (
                f[0].parse().unwrap(),
                f[1].to_string(),
                f[2].parse().unwrap(),
                f[3].parse().unwrap(),
                f[4].parse().unwrap(),
            )
        })
        .collect()
}

#[test]
fn sweep_covers_grid_and_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run_sweep(&tiny(Some(a.path()))).unwrap();
    run_sweep(&tiny(Some(b.path()))).unwrap();
    assert_eq!(ra.rows.len(), 2 * 3 * 2);
    for f in ["report.csv", "summary.csv", "mse.svg"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        assert_eq!(x, std::fs::read(b.path().join(f)).unwrap(), "{f} differs");
    }
    for g in [0.0, 0.6] {
        for s in [0, 1] {
            assert!(a.path().join(format!("models/gamma{g}_seed{s}.json")).exists());
        }
    }
    assert!(a.path().join("timings.csv").exists());

    // Summary statistics are recomputable from the raw rows.
    let rows = parse_report(&std::fs::read_to_string(a.path().join("report.csv")).unwrap());
    for s in ra.summary() {
        let mse: Vec<f64> = rows
            .iter()
            .filter(|r| r.0 == s.gamma && r.1 == s.scenario.tag())
            .map(|r| r.3)
            .collect();
        let (m, sd) = mean_std(&mse);
        assert!((m - s.mean_mse).abs() <= 1e-12 * m.abs());
        assert!((sd - s.std_mse).abs() <= 1e-12 * m.abs());
    }
}

#[test]
fn sweep_without_substitutes_skips_fitting() {
    let cfg = ExperimentConfig {
        gamma_grid: vec![0.0],
        scenarios: vec![Scenario::Confounded, Scenario::Oracle],
        ..tiny(None)
    };
    let r = run_sweep(&cfg).unwrap();
    assert_eq!(r.rows.len(), 4);
    assert!(r.timings.iter().all(|t| t.stage != "fit"));
}

#[test]
fn two_scenarios_give_two_rows_per_seed() {
    let cfg = ExperimentConfig {
        gamma_grid: vec![0.0],
        scenarios: vec![Scenario::Confounded, Scenario::Deconfounded],
        n_seeds: 3,
        ..tiny(None)
    };
    let r = run_sweep(&cfg).unwrap();
    assert_eq!(r.rows.len(), 6);
    assert!(r.rows.iter().all(|row| row.mse.is_finite() && row.mse_factual_only.is_finite()));
}

#[test]
fn violated_scenario_is_rejected_in_sweeps() {
    let cfg = ExperimentConfig {
        scenarios: vec![Scenario::TimeInvViolated],
        ..tiny(None)
    };
    let err = run_sweep(&cfg).unwrap_err();
    assert!(err.to_string().contains("violation"), "{err}");
}

#[test]
fn violation_study_rows_and_errors() {
    let mut cfg = ExperimentConfig {
        gamma_grid: vec![0.6],
        scenarios: vec![Scenario::Confounded, Scenario::Deconfounded],
        ..tiny(None)
    };
    assert!(matches!(run_violation(&cfg), Err(Error::Config(_))));
    cfg.sim.drop_covariate = Some(3);
    assert!(matches!(run_violation(&cfg), Err(Error::Config(_))));
    cfg.sim.drop_covariate = Some(0);
    let r = run_violation(&cfg).unwrap();
    assert_eq!(r.rows.len(), 3 * 2);
    assert_eq!(
        r.rows.iter().filter(|x| x.scenario == Scenario::TimeInvViolated).count(),
        2
    );
}

#[test]
fn pchecks_need_a_checkpoint_and_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        gamma_grid: vec![0.6],
        n_seeds: 1,
        ..tiny(Some(dir.path()))
    };
    let err = run_pchecks(&cfg, None).unwrap_err();
    assert!(err.to_string().contains("missing checkpoint"), "{err}");
    run_sweep(&cfg).unwrap();
    let a = run_pchecks(&cfg, None).unwrap();
    let first = std::fs::read(dir.path().join("pcheck.csv")).unwrap();
    let b = run_pchecks(&cfg, None).unwrap();
    assert_eq!(a, b);
    assert_eq!(first, std::fs::read(dir.path().join("pcheck.csv")).unwrap());
    assert_eq!(a.p_values.len(), 8);
    assert!(a.counts.iter().all(|&c| c == 6));
    let svg = std::fs::read_to_string(dir.path().join("pcheck.svg")).unwrap();
    assert!(svg.contains("stroke=\"red\""));

    // A checkpoint from another draw is refused.
    let other = ExperimentConfig {
        seed: 1,
        ..cfg.clone()
    };
    let ckpt = dir.path().join("models/gamma0.6_seed0.json");
    assert!(run_pchecks(&other, Some(&ckpt)).is_err());
}

fn cli(args: &[&str]) -> i32 {
    let mut argv = vec!["seqdeconf"];
    argv.extend_from_slice(args);
    cli_main(argv)
}

#[test]
fn cli_exit_codes() {
    assert_eq!(cli(&["--help"]), 0);
    assert_eq!(cli(&["sweep", "--no-such-flag"]), 1);
    assert_eq!(cli(&["frobnicate"]), 1);
    assert_eq!(cli(&["sweep", "--config", "/nonexistent/cfg.json"]), 1);
    assert_eq!(cli(&["sweep", "--gamma-grid", "2.0"]), 1);
    assert_eq!(cli(&["fit", "--data", "/nonexistent/d.csv"]), 2);
}

#[test]
fn cli_simulate_fit_eval_pcheck() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    let d = data.to_str().unwrap();
    assert_eq!(cli(&["simulate", "--gamma", "0.6", "--n", "40", "--out", d]), 0);
    assert!(dir.path().join("d.oracle.json").exists());
    assert!(dir.path().join("d.split.json").exists());
    assert_eq!(cli(&["fit", "--data", d, "--max-iters", "5"]), 0);
    let model = dir.path().join("d.model.json");
    assert!(model.exists());
    let m = model.to_str().unwrap();
    assert_eq!(cli(&["eval", "--data", d, "--scenario", "deconfounded", "--model", m]), 0);
    assert_eq!(cli(&["eval", "--data", d, "--scenario", "deconfounded"]), 1);
    assert_eq!(cli(&["eval", "--data", d, "--scenario", "oracle", "--outcome-kind", "msm_ipw"]), 0);
    let out = dir.path().join("pc");
    let o = out.to_str().unwrap();
    assert_eq!(cli(&["pcheck", "--data", d, "--model", m, "--n-reps", "4", "--out", o]), 0);
    assert!(out.join("pcheck.csv").exists() && out.join("pcheck.json").exists());
}

#[test]
fn cli_sweep_with_config_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"gamma_grid":[0.6],"n_seeds":1,"scenarios":["confounded","oracle"],"sim":{"n_patients":50,"t_min":5,"t_max":5}}"#,
    )
    .unwrap();
    let out = dir.path().join("results");
    let code = cli(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "7",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0);
    let report = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(report.contains("0.6,confounded,7,"));
    assert_eq!(report.lines().count(), 3);

    std::fs::write(&cfg, r#"{"gamma_grid":[0.6],"bogus_field":1}"#).unwrap();
    assert_eq!(cli(&["sweep", "--config", cfg.to_str().unwrap()]), 1);
}
