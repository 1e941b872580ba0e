use proptest::prelude::*;
use seqdeconf::simulator::{
    covariate_path, markov_check, propensities, simulate_dataset, Oracle, SimConfig,
};

fn corr(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let c: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    c / (va * vb).sqrt()
}

#[test]
fn treatment_rates_match_propensities_per_bin() {
    let cfg = SimConfig::default();
    let sim = simulate_dataset(&cfg).unwrap();
    // Bin every step by its propensity and compare the empirical treatment rate
    // with the mean propensity in the bin.
    let bins = 10;
    let mut sum_p = vec![0.0; bins];
    let mut sum_var = vec![0.0; bins];
    let mut hits = vec![0.0; bins];
    let mut n = vec![0usize; bins];
    for (id, po) in &sim.oracle.patients {
        let traj = sim.dataset.get(id).unwrap();
        for (p, &a) in propensities(po, &cfg).iter().zip(&traj.a) {
            let b = ((p * bins as f64) as usize).min(bins - 1);
            sum_p[b] += p;
            sum_var[b] += p * (1.0 - p);
            hits[b] += f64::from(a);
            n[b] += 1;
        }
    }
    for b in 0..bins {
        if n[b] < 50 {
            continue;
        }
        let se = sum_var[b].sqrt();
        assert!(
            (hits[b] - sum_p[b]).abs() <= 3.0 * se.max(1.0),
            "bin {b}: {} treated vs {} expected (se {se})",
            hits[b],
            sum_p[b]
        );
    }
}

#[test]
fn no_confounding_decorrelates_u_and_outcome() {
    let sim = simulate_dataset(&SimConfig::default().with_gamma(0.0)).unwrap();
    let (mut u, mut y) = (Vec::new(), Vec::new());
    for t in &sim.dataset.trajectories {
        for &v in &t.y {
            u.push(t.u_true.unwrap());
            y.push(v);
        }
    }
    let r = corr(&u, &y);
    // 2000 patients; clustering inflates the usual 1/sqrt(n) scale.
    assert!(r.abs() < 0.1, "corr(u, y) = {r}");
}

#[test]
fn confounding_correlates_u_with_treatment() {
    let sim = simulate_dataset(&SimConfig::default().with_gamma(0.6)).unwrap();
    let u: Vec<f64> = sim.dataset.trajectories.iter().map(|t| t.u_true.unwrap()).collect();
    let rate: Vec<f64> = sim
        .dataset
        .trajectories
        .iter()
        .map(|t| t.a.iter().map(|&a| f64::from(a)).sum::<f64>() / t.len() as f64)
        .collect();
    assert!(corr(&u, &rate) > 0.2);
}

#[test]
fn markov_check_passes_on_simulator_output() {
    let sim = simulate_dataset(&SimConfig::default()).unwrap();
    let p = markov_check(&sim.dataset, 3).unwrap();
    assert!(p > 0.01, "p = {p}");
}

#[test]
fn oracle_sidecar_round_trips() {
    let sim = simulate_dataset(&SimConfig {
        n_patients: 20,
        ..SimConfig::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("o.json");
    sim.oracle.save(&path).unwrap();
    let back = Oracle::load(&path).unwrap();
    assert_eq!(back, sim.oracle);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn factual_replay_is_exact(
        seed in 0u64..10_000,
        gamma in 0.0f64..=1.0,
        k in 2usize..5,
        p in 1usize..4,
        drop in prop::option::of(0usize..2),
    ) {
        let cfg = SimConfig {
            n_patients: 5,
            t_min: 2,
            t_max: 8,
            k,
            p,
            seed,
            drop_covariate: drop,
            ..SimConfig::default().with_gamma(gamma)
        };
        let sim = simulate_dataset(&cfg).unwrap();
        for t in &sim.dataset.trajectories {
            let po = sim.oracle.patient(&t.id).unwrap();
            let xs = covariate_path(po, &t.a);
            for s in 0..t.len() {
                let full = &xs[s + 1];
                let kept: Vec<f64> = full
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| Some(*j) != drop)
                    .map(|(_, v)| *v)
                    .collect();
                prop_assert_eq!(&kept, &t.x[s]);
                let y = sim.oracle.potential_outcome(&t.id, &t.a[..=s]).unwrap();
                prop_assert_eq!(y.to_bits(), t.y[s].to_bits());
            }
        }
    }

    #[test]
    fn potential_outcome_ignores_future_treatments(seed in 0u64..10_000, flip in 0usize..20) {
        let sim = simulate_dataset(&SimConfig { n_patients: 1, seed, ..SimConfig::default() }).unwrap();
        let t = &sim.dataset.trajectories[0];
        let cut = flip.min(t.len() - 1);
        let mut alt = t.a.clone();
        for a in alt.iter_mut().skip(cut + 1) {
            *a = 1 - *a;
        }
        for s in 0..=cut {
            let y0 = sim.oracle.potential_outcome(&t.id, &t.a[..=s]).unwrap();
            let y1 = sim.oracle.potential_outcome(&t.id, &alt[..=s]).unwrap();
            prop_assert_eq!(y0, y1);
        }
    }
}
