#![allow(dead_code)]

use rand::Rng;
use seqdeconf::rng;
use seqdeconf::seqgplvm::{initialize, FittedModel, ModelConfig};
use seqdeconf::trajectories::{Dataset, Trajectory};

/// Random tiny dataset with `n` patients of length `t` and `k` covariates.
pub fn tiny_dataset(seed: u64, n: usize, t: usize, k: usize) -> Dataset {
    let mut r = rng::stream(seed, 99);
    let trajectories = (0..n)
        .map(|i| Trajectory {
            id: format!("t{i}"),
            x: (0..t)
                .map(|_| (0..k).map(|_| r.gen_range(-1.0..1.0)).collect())
                .collect(),
            a: (0..t).map(|_| r.gen_range(0..2u8)).collect(),
            y: vec![0.0; t],
            u_true: None,
        })
        .collect();
    Dataset::new(trajectories).unwrap()
}

/// Model with every free parameter randomized away from its initialization.
pub fn randomized_model(d: &Dataset, seed: u64, latent_dim: usize, n_inducing: usize) -> FittedModel {
    let cfg = ModelConfig {
        latent_dim,
        n_inducing,
        n_mc_z: 4,
        n_quad: 20,
        jitter: 1e-4,
        seed,
        ..ModelConfig::default()
    };
    let mut m = initialize(d, &cfg).unwrap();
    let mut r = rng::stream(seed, 7);
    let mut p = m.free_params();
    for v in p.iter_mut() {
        *v += r.gen_range(-0.4..0.4);
    }
    m.set_free_params(&p);
    m
}
