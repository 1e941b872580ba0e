use proptest::prelude::*;
use seqdeconf::outcome::{
    build_features, evaluate_mse, evaluate_with, fit_outcome, ipw_weights, predict_response,
    weighted_ridge, FeatureSpec, OutcomeKind, OutcomeModel, Scenario,
};
use seqdeconf::rng;
use seqdeconf::simulator::{simulate_dataset, SimConfig, Simulation};
use seqdeconf::trajectories::{split_dataset, Dataset, Partition};

fn sim(gamma: f64, n: usize, seed: u64) -> (Simulation, Dataset, Dataset) {
    let s = simulate_dataset(&SimConfig {
        n_patients: n,
        seed,
        ..SimConfig::default().with_gamma(gamma)
    })
    .unwrap();
    let d = split_dataset(&s.dataset, 0.8, seed).unwrap();
    let (train, test) = (d.subset(Partition::Train), d.subset(Partition::Test));
    (s, train, test)
}

fn ridge(d: &Dataset, sc: Scenario, lambda: f64) -> OutcomeModel {
    let spec = FeatureSpec::for_scenario(sc, 3);
    fit_outcome(d, &spec, sc, OutcomeKind::Ridge, lambda, None).unwrap()
}

#[test]
fn huge_penalty_predicts_the_training_mean() {
    let (_, train, _) = sim(0.6, 200, 1);
    let m = ridge(&train, Scenario::Confounded, 1e12);
    let ys: Vec<f64> = train.trajectories.iter().flat_map(|t| t.y.clone()).collect();
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    assert!((m.weights[0] - mean).abs() < 1e-8);
    assert!(m.weights[1..].iter().all(|w| w.abs() < 1e-8));
    let t = &train.trajectories[0];
    assert!((predict_response(&m, t, 4, 1, None).unwrap() - mean).abs() < 1e-7);
}

#[test]
fn normal_equations_hold() {
    let (_, train, _) = sim(0.6, 200, 2);
    let spec = FeatureSpec::for_scenario(Scenario::Oracle, 3);
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for t in &train.trajectories {
        for s in 0..t.len() {
            rows.push(build_features(t, s, t.a[s], &spec, None).unwrap());
            y.push(t.y[s]);
        }
    }
    let lambda = 1e-3;
    let w = weighted_ridge(&rows, &y, None, lambda).unwrap();
    let p = w.len();
    // (XᵀX + λ D) w = Xᵀy with the bias left unpenalized.
    let mut lhs = vec![0.0; p];
    let mut rhs = vec![0.0; p];
    for (row, yi) in rows.iter().zip(&y) {
        let fit: f64 = row.iter().zip(&w).map(|(a, b)| a * b).sum();
        for j in 0..p {
            lhs[j] += row[j] * fit;
            rhs[j] += row[j] * yi;
        }
    }
    for j in 1..p {
        lhs[j] += lambda * w[j];
    }
    let res: f64 = lhs.iter().zip(&rhs).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(res <= 1e-8 * norm, "residual {res} vs {norm}");
}

#[test]
fn treatment_contrast_is_the_treatment_coefficient() {
    let (_, train, _) = sim(0.4, 100, 3);
    let m = ridge(&train, Scenario::Confounded, 1e-3);
    let col = m.feature_spec.treatment_column(train.covariate_dim());
    for t in train.trajectories.iter().take(5) {
        for s in [0, 7, t.len() - 1] {
            let diff = predict_response(&m, t, s, 1, None).unwrap()
                - predict_response(&m, t, s, 0, None).unwrap();
            assert!((diff - m.weights[col]).abs() < 1e-12);
        }
    }
}

#[test]
fn factual_prediction_is_the_fitted_value() {
    let (_, train, _) = sim(0.4, 50, 4);
    let m = ridge(&train, Scenario::Confounded, 1e-3);
    let t = &train.trajectories[2];
    let f = build_features(t, 5, t.a[5], &m.feature_spec, None).unwrap();
    let fitted: f64 = f.iter().zip(&m.weights).map(|(a, b)| a * b).sum();
    assert_eq!(predict_response(&m, t, 5, t.a[5], None).unwrap(), fitted);
}

#[test]
fn counterfactual_error_is_small_without_confounding() {
    let (s, train, test) = sim(0.0, 1000, 5);
    let m = ridge(&train, Scenario::Confounded, 1e-3);
    let r = evaluate_mse(&m, &test, &s.oracle, None).unwrap();
    assert!(r.mse < 0.05, "{r:?}");
    assert_eq!(r.n_rows, 2 * test.trajectories.iter().map(|t| t.len()).sum::<usize>());
}

#[test]
fn u_is_irrelevant_without_confounding() {
    let (mut a, mut b) = (0.0, 0.0);
    for seed in 0..3 {
        let (s, train, test) = sim(0.0, 1000, 10 + seed);
        a += evaluate_mse(&ridge(&train, Scenario::Confounded, 1e-3), &test, &s.oracle, None)
            .unwrap()
            .mse;
        b += evaluate_mse(&ridge(&train, Scenario::Oracle, 1e-3), &test, &s.oracle, None)
            .unwrap()
            .mse;
    }
    assert!((a - b).abs() <= 0.05 * a, "confounded {a} vs oracle {b}");
}

#[test]
fn oracle_features_help_under_confounding() {
    let (s, train, test) = sim(0.6, 1000, 6);
    let conf = evaluate_mse(&ridge(&train, Scenario::Confounded, 1e-3), &test, &s.oracle, None)
        .unwrap()
        .mse;
    let orc = evaluate_mse(&ridge(&train, Scenario::Oracle, 1e-3), &test, &s.oracle, None)
        .unwrap()
        .mse;
    assert!(orc < 0.5 * conf, "oracle {orc} vs confounded {conf}");
}

#[test]
fn stabilized_weights_average_near_one() {
    let (_, train, _) = sim(0.6, 1000, 7);
    let spec = FeatureSpec::for_scenario(Scenario::Confounded, 3);
    let m = fit_outcome(&train, &spec, Scenario::Confounded, OutcomeKind::MsmIpw, 1e-3, None)
        .unwrap();
    let w = ipw_weights(&m, &train, None).unwrap();
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    assert!((0.8..=1.2).contains(&mean), "mean weight {mean}");
    let (lo, hi) = m.propensity.as_ref().unwrap().clip;
    assert!(w.iter().all(|v| (lo..=hi).contains(v)));
}

#[test]
fn evaluation_reference_predictors() {
    let (s, _, test) = sim(0.6, 60, 8);
    let perfect = evaluate_with(&test, &s.oracle, |traj, t, a| {
        let mut h = traj.a[..=t].to_vec();
        h[t] = a;
        s.oracle.potential_outcome(&traj.id, &h)
    })
    .unwrap();
    assert_eq!(perfect.mse, 0.0);
    assert_eq!(perfect.mse_factual, 0.0);

    let zero = evaluate_with(&test, &s.oracle, |_, _, _| Ok(0.0)).unwrap();
    let mut sq = Vec::new();
    for traj in &test.trajectories {
        for t in 0..traj.len() {
            for a in [0u8, 1] {
                let mut h = traj.a[..=t].to_vec();
                h[t] = a;
                sq.push(s.oracle.potential_outcome(&traj.id, &h).unwrap().powi(2));
            }
        }
    }
    let expect = sq.iter().sum::<f64>() / sq.len() as f64;
    assert!((zero.mse - expect).abs() <= 1e-12 * expect);
}

#[test]
fn deconfounded_without_substitutes_is_an_error() {
    let (_, train, _) = sim(0.6, 20, 9);
    let spec = FeatureSpec::for_scenario(Scenario::Deconfounded, 3);
    let r = fit_outcome(&train, &spec, Scenario::Deconfounded, OutcomeKind::Ridge, 1e-3, None);
    assert!(r.is_err());
}

#[test]
fn outcome_model_json_round_trip() {
    let (_, train, _) = sim(0.6, 50, 9);
    let spec = FeatureSpec::for_scenario(Scenario::Oracle, 2);
    let m = fit_outcome(&train, &spec, Scenario::Oracle, OutcomeKind::MsmIpw, 1e-2, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("o.json");
    m.save(&path).unwrap();
    assert_eq!(OutcomeModel::load(&path).unwrap(), m);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn feature_width_matches_spec(h in 1usize..5, hist: bool, sc in 0usize..3, t in 0usize..20) {
        let scenario = Scenario::ALL[sc];
        let s = simulate_dataset(&SimConfig { n_patients: 1, ..SimConfig::default() }).unwrap();
        let traj = &s.dataset.trajectories[0];
        let mut spec = FeatureSpec::for_scenario(scenario, h);
        spec.include_treatment_history = hist;
        let z = [0.2];
        let zh = if scenario.needs_substitute() { Some(&z[..]) } else { None };
        let f = build_features(traj, t, 1, &spec, zh).unwrap();
        prop_assert_eq!(f.len(), spec.width(traj.covariate_dim(), 1));
        prop_assert_eq!(f[spec.treatment_column(traj.covariate_dim())], 1.0);
        prop_assert_eq!(f[0], 1.0);
    }

    #[test]
    fn ridge_recovers_noiseless_maps(seed in 0u64..500) {
        let mut r = rng::stream(seed, 3);
        let p = 4;
        let w: Vec<f64> = (0..p).map(|_| rand::Rng::gen_range(&mut r, -2.0..2.0)).collect();
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|_| {
                let mut row = vec![1.0];
                row.extend((1..p).map(|_| rand::Rng::gen_range(&mut r, -1.0..1.0)));
                row
            })
            .collect();
        let y: Vec<f64> = rows.iter().map(|x| x.iter().zip(&w).map(|(a, b)| a * b).sum()).collect();
        let got = weighted_ridge(&rows, &y, None, 1e-8).unwrap();
        for (a, b) in got.iter().zip(&w) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }
}
