//! Predictive model checks over time.
//!
//! For each held-out patient the fitted model replicates the treatment sequence
//! `n_reps` times. At every step the test statistic
//! `T(a_t) = E_Z[log p(a_t | x_t, a_{t-1}, Z)]` of each replicate is compared with
//! that of the observed treatment, and the p-value is the fraction of replicates
//! with a strictly smaller statistic. `E_Z` is a Monte Carlo average over draws
//! from the patient's substitute posterior. With [`ZSampling::Fresh`] every
//! evaluation gets its own draws, so the Monte Carlo noise breaks ties between
//! equal treatments at random. With [`ZSampling::Shared`] one set of draws per
//! patient is reused and equal sequences tie exactly, which the strict `<` counts
//! as non-exceedances.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::seqgplvm::{infer_with, sample_with, FittedModel, Predictor, SubstitutePosterior};
use crate::trajectories::{Dataset, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZSampling {
    #[default]
    Fresh,
    Shared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PCheckReport {
    /// Mean p-value over patients at each step (0-based).
    pub p_values: Vec<f64>,
    /// Patients contributing at each step.
    pub counts: Vec<usize>,
    pub n_reps: usize,
    pub n_z_samples: usize,
    pub z_sampling: ZSampling,
    pub n_patients: usize,
    pub seed: u64,
}

impl PCheckReport {
    /// Fraction of steps whose mean p-value lies in `[lo, hi]`.
    pub fn fraction_within(&self, lo: f64, hi: f64) -> f64 {
        let inside = self.p_values.iter().filter(|p| (lo..=hi).contains(*p)).count();
        inside as f64 / self.p_values.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,mean_p,n_patients\n");
        for (t, (p, n)) in self.p_values.iter().zip(&self.counts).enumerate() {
            out.push_str(&format!("{t},{p},{n}\n"));
        }
        out
    }

    /// Writes `path` as CSV and a `.json` sidecar with the run configuration.
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))?;
        let side = path.with_extension("json");
        let s = serde_json::to_string_pretty(self).map_err(|e| Error::Schema(e.to_string()))?;
        fs::write(&side, s).map_err(|e| Error::io(side, e))
    }
}

/// Mean of the per-sample log emission over `z_samples`.
pub fn test_statistic(
    pred: &Predictor,
    a_t: u8,
    x_t: &[f64],
    a_prev: f64,
    z_samples: &[Vec<f64>],
) -> Result<f64> {
    if z_samples.is_empty() {
        return Err(Error::InsufficientData("test statistic needs z samples".into()));
    }
    let total: f64 = z_samples
        .iter()
        .map(|z| pred.log_emission(a_t, x_t, a_prev, z))
        .sum();
    Ok(total / z_samples.len() as f64)
}

fn draws(post: &SubstitutePosterior, n: usize, r: &mut rng::Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| post.sample(r)).collect()
}

/// Source of the `z` draws behind each statistic for one patient.
struct ZSource<'a> {
    post: &'a SubstitutePosterior,
    n: usize,
    shared: Option<Vec<Vec<f64>>>,
}

impl<'a> ZSource<'a> {
    fn new(post: &'a SubstitutePosterior, n: usize, mode: ZSampling, r: &mut rng::Rng) -> Self {
        let shared = match mode {
            ZSampling::Fresh => None,
            ZSampling::Shared => Some(draws(post, n, r)),
        };
        ZSource { post, n, shared }
    }

    fn statistic(&self, pred: &Predictor, a: u8, x: &[f64], prev: f64, r: &mut rng::Rng) -> f64 {
        let fresh;
        let z = match &self.shared {
            Some(z) => z,
            None => {
                fresh = draws(self.post, self.n, r);
                &fresh
            }
        };
        test_statistic(pred, a, x, prev, z).expect("at least one z draw")
    }
}

fn statistic_path(
    pred: &Predictor,
    zs: &ZSource,
    traj: &Trajectory,
    a: &[u8],
    r: &mut rng::Rng,
) -> Vec<f64> {
    (0..a.len())
        .map(|t| {
            let prev = if t == 0 { 0.0 } else { f64::from(a[t - 1]) };
            zs.statistic(pred, a[t], &traj.x[t], prev, r)
        })
        .collect()
}

/// Per-step fraction of replicates whose statistic is strictly below the observed one.
pub fn step_p_values(observed: &[f64], replicates: &[Vec<f64>]) -> Vec<f64> {
    let m = replicates.len() as f64;
    (0..observed.len())
        .map(|t| {
            let below = replicates.iter().filter(|r| r[t] < observed[t]).count();
            below as f64 / m
        })
        .collect()
}

fn posterior(model: &FittedModel, pred: &Predictor, traj: &Trajectory) -> Result<SubstitutePosterior> {
    match model.stored_posterior(&traj.id) {
        Some(p) => Ok(p),
        None => infer_with(model, pred, traj),
    }
}

/// Per-step p-values for one patient against the given replicates.
pub fn patient_p_values(
    model: &FittedModel,
    traj: &Trajectory,
    replicates: &[Vec<u8>],
    n_z_samples: usize,
    z_sampling: ZSampling,
    seed: u64,
) -> Result<Vec<f64>> {
    if replicates.is_empty() || n_z_samples < 1 {
        return Err(Error::Config("need replicates and n_z_samples >= 1".into()));
    }
    if let Some(r) = replicates.iter().find(|r| r.len() != traj.len()) {
        return Err(Error::Dimension(format!(
            "replicate of length {} for trajectory `{}` of length {}",
            r.len(),
            traj.id,
            traj.len()
        )));
    }
    let pred = model.predictor()?;
    let post = posterior(model, &pred, traj)?;
    let mut r = rng::keyed(seed, "pcheck-stat", &traj.id);
    Ok(compare(&pred, &post, traj, replicates, n_z_samples, z_sampling, &mut r))
}

fn compare(
    pred: &Predictor,
    post: &SubstitutePosterior,
    traj: &Trajectory,
    replicates: &[Vec<u8>],
    n_z: usize,
    mode: ZSampling,
    r: &mut rng::Rng,
) -> Vec<f64> {
    let zs = ZSource::new(post, n_z, mode, r);
    let observed = statistic_path(pred, &zs, traj, &traj.a, r);
    let reps: Vec<Vec<f64>> = replicates
        .iter()
        .map(|a| statistic_path(pred, &zs, traj, a, r))
        .collect();
    step_p_values(&observed, &reps)
}

/// Per-step mean predictive p-values over the validation patients.
///
/// Patients are processed in id order with streams keyed by `(seed, id)`, so the
/// report does not depend on the order of `validation`. Steps beyond a patient's
/// horizon are excluded from that step's mean.
pub fn predictive_p_values(
    model: &FittedModel,
    validation: &Dataset,
    n_reps: usize,
    n_z_samples: usize,
    seed: u64,
) -> Result<PCheckReport> {
    predictive_p_values_with(model, validation, n_reps, n_z_samples, ZSampling::Fresh, seed)
}

pub fn predictive_p_values_with(
    model: &FittedModel,
    validation: &Dataset,
    n_reps: usize,
    n_z_samples: usize,
    z_sampling: ZSampling,
    seed: u64,
) -> Result<PCheckReport> {
    if validation.is_empty() {
        return Err(Error::InsufficientData("empty validation set".into()));
    }
    if n_reps < 2 || n_z_samples < 1 {
        return Err(Error::Config("need n_reps >= 2 and n_z_samples >= 1".into()));
    }
    let pred = model.predictor()?;
    let mut order: Vec<&Trajectory> = validation.trajectories.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));
    let horizon = order.iter().map(|t| t.len()).max().unwrap_or(0);
    let mut sums = vec![0.0; horizon];
    let mut counts = vec![0usize; horizon];
    for traj in order {
        let post = posterior(model, &pred, traj)?;
        let mut r = rng::keyed(seed, "pcheck", &traj.id);
        let reps = sample_with(&pred, &post, traj, n_reps, &mut r);
        let p = compare(&pred, &post, traj, &reps, n_z_samples, z_sampling, &mut r);
        for (t, p) in p.iter().enumerate() {
            sums[t] += p;
            counts[t] += 1;
        }
    }
    Ok(PCheckReport {
        p_values: sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect(),
        counts,
        n_reps,
        n_z_samples,
        z_sampling,
        n_patients: validation.len(),
        seed,
    })
}

/// Per-patient p-values of a parametric bootstrap.
///
/// Each patient's observed sequence is replaced by a draw from the fitted model,
/// and the whole-sequence statistic `Σ_t T(a_t)` of that draw is ranked among
/// `n_reps` further draws. Since all draws are exchangeable, the p-values are
/// uniform on `{0, 1/M, ..., 1}` when the machinery is correct.
pub fn bootstrap_p_values(
    model: &FittedModel,
    d: &Dataset,
    n_reps: usize,
    n_z_samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let pred = model.predictor()?;
    let mut out = Vec::with_capacity(d.len());
    let mut order: Vec<&Trajectory> = d.trajectories.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));
    for traj in order {
        let post = posterior(model, &pred, traj)?;
        let mut r = rng::keyed(seed, "bootstrap", &traj.id);
        let seqs = sample_with(&pred, &post, traj, n_reps + 1, &mut r);
        let zs = ZSource::new(&post, n_z_samples, ZSampling::Fresh, &mut r);
        let totals: Vec<f64> = seqs
            .iter()
            .map(|a| statistic_path(&pred, &zs, traj, a, &mut r).iter().sum())
            .collect();
        let below = totals[1..].iter().filter(|&&s| s < totals[0]).count();
        out.push(below as f64 / n_reps as f64);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn within_band_fraction() {
        let r = PCheckReport {
            p_values: vec![0.1, 0.4, 0.5, 0.7],
            counts: vec![1; 4],
            n_reps: 2,
            n_z_samples: 1,
            z_sampling: ZSampling::Fresh,
            n_patients: 1,
            seed: 0,
        };
        assert_eq!(r.fraction_within(0.35, 0.65), 0.5);
        assert!(r.to_csv().starts_with("t,mean_p,n_patients\n0,0.1,1\n"));
    }

    #[test]
    fn ties_are_not_exceedances() {
        let obs = vec![-0.3, -0.1];
        let reps = vec![obs.clone(), obs.clone(), vec![-0.5, -0.1]];
        assert_eq!(step_p_values(&obs, &reps), vec![1.0 / 3.0, 0.0]);
    }
}
