//! Confounded longitudinal treatment simulator with exact counterfactuals.
//!
//! Each patient carries autoregressive covariate weights, treatment weights, and a
//! time-invariant hidden confounder `u` that drives both treatment assignment and
//! outcomes. All noise draws are kept in the oracle so potential outcomes under
//! alternative treatment histories reuse the same noise realization.
//!
//! Conventions: timesteps run `s = 1..=T`, `A_0 = 0`, and covariate history before
//! `X_0` is zero.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::math::sigmoid;
use crate::rng;
use crate::trajectories::{Dataset, Partition, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n_patients: usize,
    pub t_min: usize,
    pub t_max: usize,
    /// Covariate dimension.
    pub k: usize,
    /// Autoregressive order.
    pub p: usize,
    pub gamma_a: f64,
    pub gamma_y: f64,
    /// Treatment assignment sharpness.
    pub lambda: f64,
    pub seed: u64,
    /// 0-based covariate column removed from the emitted data. It still drives the dynamics.
    pub drop_covariate: Option<usize>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_patients: 2000,
            t_min: 20,
            t_max: 20,
            k: 3,
            p: 3,
            gamma_a: 0.6,
            gamma_y: 0.6,
            lambda: 15.0,
            seed: 0,
            drop_covariate: None,
        }
    }
}

impl SimConfig {
    /// 5000 patients with 20 to 30 steps each.
    pub fn paper_scale() -> Self {
        SimConfig {
            n_patients: 5000,
            t_min: 20,
            t_max: 30,
            ..SimConfig::default()
        }
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma_a = gamma;
        self.gamma_y = gamma;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.gamma_a) || !unit.contains(&self.gamma_y) {
            return Err(Error::Config(format!(
                "gamma_a={} and gamma_y={} must lie in [0,1]",
                self.gamma_a, self.gamma_y
            )));
        }
        if self.t_min < 2 || self.t_min > self.t_max {
            return Err(Error::Config(format!(
                "need 2 <= t_min <= t_max, got [{}, {}]",
                self.t_min, self.t_max
            )));
        }
        if self.p < 1 || self.k < 1 {
            return Err(Error::Config("p and k must be at least 1".into()));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.n_patients < 1 {
            return Err(Error::Config("n_patients must be at least 1".into()));
        }
        if let Some(j) = self.drop_covariate {
            if j >= self.k || self.k < 2 {
                return Err(Error::Config(format!(
                    "drop_covariate {j} out of range for k={} (at least one covariate must remain)",
                    self.k
                )));
            }
        }
        Ok(())
    }

    /// Stable digest of the configuration, recorded in dataset metadata.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", rng::hash_str(&json))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientParams {
    /// `alpha[i][j]`: weight of lag `i+1` on covariate `j`.
    pub alpha: Vec<Vec<f64>>,
    /// `omega[i]`: weight of the treatment at lag `i+1`.
    pub omega: Vec<f64>,
    pub u: f64,
}

/// Everything needed to replay one patient under any treatment history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientOracle {
    pub params: PatientParams,
    pub x0: Vec<f64>,
    /// `eta[s-1]` is the noise of step `s`, for `s = 1..=T+1`.
    pub eta: Vec<f64>,
    /// Factual treatments `A_1..A_T`.
    pub a: Vec<u8>,
}

impl PatientOracle {
    pub fn horizon(&self) -> usize {
        self.a.len()
    }
}

/// Hidden simulation state for a dataset, keyed by patient id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Oracle {
    pub cfg: SimConfig,
    pub patients: BTreeMap<String, PatientOracle>,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub dataset: Dataset,
    pub oracle: Oracle,
}

/// Covariate state `X_s` from the history `X_0..X_{s-1}` and treatments `A_1..A_{s-1}`.
fn next_state(params: &PatientParams, xs: &[Vec<f64>], a: &[u8], s: usize, eta: f64) -> Vec<f64> {
    let p = params.omega.len();
    let k = xs[0].len();
    (0..k)
        .map(|j| {
            let mut acc = 0.0;
            for i in 1..=p {
                let x_lag = if s >= i { xs[s - i][j] } else { 0.0 };
                let a_lag = if s > i { f64::from(a[s - i - 1]) } else { 0.0 };
                acc += params.alpha[i - 1][j] * x_lag + params.omega[i - 1] * a_lag;
            }
            acc / p as f64 + eta
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Full covariate path `X_0..X_{n+1}` under treatments `a = A_1..A_n`.
pub fn covariate_path(oracle: &PatientOracle, a: &[u8]) -> Vec<Vec<f64>> {
    let mut xs = Vec::with_capacity(a.len() + 2);
    xs.push(oracle.x0.clone());
    for s in 1..=a.len() + 1 {
        let next = next_state(&oracle.params, &xs, a, s, oracle.eta[s - 1]);
        xs.push(next);
    }
    xs
}

/// Outcome `Y_{t+1}` under the treatment history `a_hist = A_1..A_t`.
///
/// For the factual history this reproduces the recorded `y[t-1]` bit for bit.
pub fn potential_outcome(oracle: &PatientOracle, cfg: &SimConfig, a_hist: &[u8]) -> Result<f64> {
    if a_hist.is_empty() || a_hist.len() > oracle.horizon() {
        return Err(Error::Dimension(format!(
            "treatment history of length {} outside 1..={}",
            a_hist.len(),
            oracle.horizon()
        )));
    }
    if a_hist.iter().any(|&a| a > 1) {
        return Err(Error::Dimension("treatments must be 0 or 1".into()));
    }
    let xs = covariate_path(oracle, a_hist);
    let last = &xs[a_hist.len() + 1];
    Ok(cfg.gamma_y * oracle.params.u + (1.0 - cfg.gamma_y) * mean(last))
}

/// Treatment propensity `sigmoid(lambda * pi_s)` for `s = 1..=T` along the factual path.
pub fn propensities(oracle: &PatientOracle, cfg: &SimConfig) -> Vec<f64> {
    let xs = covariate_path(oracle, &oracle.a);
    (1..=oracle.horizon())
        .map(|s| {
            let a_prev = if s > 1 { f64::from(oracle.a[s - 2]) } else { 0.0 };
            let pi = cfg.gamma_a * oracle.params.u + (1.0 - cfg.gamma_a) * (mean(&xs[s]) + a_prev);
            sigmoid(cfg.lambda * pi)
        })
        .collect()
}

fn simulate_patient(cfg: &SimConfig, index: usize) -> (Trajectory, PatientOracle) {
    let mut rng = rng::stream(cfg.seed, index as u64);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let normal = |sd: f64, rng: &mut rng::Rng| sd * std_normal.sample(rng);

    let horizon = rng.gen_range(cfg.t_min..=cfg.t_max);
    let p = cfg.p;
    let alpha: Vec<Vec<f64>> = (0..p)
        .map(|_| (0..cfg.k).map(|_| normal(0.5, &mut rng)).collect())
        .collect();
    let omega: Vec<f64> = (1..=p)
        .map(|i| 1.0 - i as f64 / p as f64 + normal(1.0 / p as f64, &mut rng))
        .collect();
    let u = normal(0.1, &mut rng);
    let x0: Vec<f64> = (0..cfg.k).map(|_| normal(0.1, &mut rng)).collect();
    let params = PatientParams { alpha, omega, u };

    let mut xs = vec![x0.clone()];
    let mut a: Vec<u8> = Vec::with_capacity(horizon);
    let mut eta = Vec::with_capacity(horizon + 1);
    for s in 1..=horizon {
        let e = normal(0.01, &mut rng);
        eta.push(e);
        let x_s = next_state(&params, &xs, &a, s, e);
        let a_prev = a.last().copied().map_or(0.0, f64::from);
        let pi = cfg.gamma_a * u + (1.0 - cfg.gamma_a) * (mean(&x_s) + a_prev);
        let draw: f64 = rng.gen();
        a.push(u8::from(draw < sigmoid(cfg.lambda * pi)));
        xs.push(x_s);
    }
    let e = normal(0.01, &mut rng);
    eta.push(e);
    let x_last = next_state(&params, &xs, &a, horizon + 1, e);
    xs.push(x_last);

    let outcome = |s: usize| cfg.gamma_y * u + (1.0 - cfg.gamma_y) * mean(&xs[s]);
    let emit = |x: &Vec<f64>| -> Vec<f64> {
        x.iter()
            .enumerate()
            .filter(|(j, _)| Some(*j) != cfg.drop_covariate)
            .map(|(_, v)| *v)
            .collect()
    };
    let id = format!("p{index:06}");
    let traj = Trajectory {
        id,
        x: (1..=horizon).map(|s| emit(&xs[s])).collect(),
        a: a.clone(),
        y: (1..=horizon).map(|s| outcome(s + 1)).collect(),
        u_true: Some(u),
    };
    let oracle = PatientOracle { params, x0, eta, a };
    (traj, oracle)
}

/// Simulates `cfg.n_patients` patients. Patient `i` uses its own stream `(seed, i)`.
pub fn simulate_dataset(cfg: &SimConfig) -> Result<Simulation> {
    cfg.validate()?;
    let mut trajectories = Vec::with_capacity(cfg.n_patients);
    let mut patients = BTreeMap::new();
    for i in 0..cfg.n_patients {
        let (traj, po) = simulate_patient(cfg, i);
        patients.insert(traj.id.clone(), po);
        trajectories.push(traj);
    }
    let split = trajectories
        .iter()
        .map(|t| (t.id.clone(), Partition::Train))
        .collect();
    let mut meta = BTreeMap::new();
    meta.insert("simulator_config".into(), cfg.digest());
    meta.insert("seed".into(), cfg.seed.to_string());
    meta.insert("train_frac".into(), "1".into());
    let dataset = Dataset {
        trajectories,
        split,
        meta,
    };
    Ok(Simulation {
        dataset,
        oracle: Oracle {
            cfg: cfg.clone(),
            patients,
        },
    })
}

impl Oracle {
    pub fn patient(&self, id: &str) -> Result<&PatientOracle> {
        self.patients
            .get(id)
            .ok_or_else(|| Error::invariant(id, "no oracle record for this patient"))
    }

    pub fn potential_outcome(&self, id: &str, a_hist: &[u8]) -> Result<f64> {
        potential_outcome(self.patient(id)?, &self.cfg, a_hist)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string(self).map_err(|e| Error::Schema(e.to_string()))?;
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Oracle> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&s).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
    }
}

/// Path of the oracle sidecar for a data file: `d.csv` -> `d.oracle.json`.
pub fn oracle_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("oracle.json")
}

/// Stratified chi-square test of `A_t` independent of `A_{t-2}` given `A_{t-1}`,
/// the binned covariate mean at `t`, and the binned hidden confounder.
///
/// Strata are formed from `A_{t-1}` and `n_bins` quantile bins of each continuous
/// variable. The per-stratum 2x2 tables of `(A_{t-2}, A_t)` are pooled with the
/// Cochran–Mantel–Haenszel statistic, which is chi-square with one degree of
/// freedom under conditional independence. Strata with a degenerate margin carry
/// no information and are skipped.
pub fn markov_check(d: &Dataset, n_bins: usize) -> Result<f64> {
    if n_bins < 1 {
        return Err(Error::Config("n_bins must be at least 1".into()));
    }
    if !d.has_u_true() {
        return Err(Error::InsufficientData("markov check needs u_true".into()));
    }
    struct Row {
        a_prev: u8,
        a_prev2: u8,
        a: u8,
        xbar: f64,
        u: f64,
    }
    let mut rows = Vec::new();
    for t in &d.trajectories {
        let u = t.u_true.expect("checked above");
        for s in 2..t.len() {
            rows.push(Row {
                a_prev: t.a[s - 1],
                a_prev2: t.a[s - 2],
                a: t.a[s],
                xbar: mean(&t.x[s]),
                u,
            });
        }
    }
    if rows.is_empty() {
        return Err(Error::InsufficientData("no timesteps with two lags".into()));
    }
    let edges = |vals: Vec<f64>| -> Vec<f64> {
        let mut v = vals;
        v.sort_by(f64::total_cmp);
        (1..n_bins)
            .map(|b| v[(b * v.len() / n_bins).min(v.len() - 1)])
            .collect()
    };
    let x_edges = edges(rows.iter().map(|r| r.xbar).collect());
    let u_edges = edges(rows.iter().map(|r| r.u).collect());
    let bin = |edges: &[f64], v: f64| edges.iter().filter(|&&e| v >= e).count();

    let mut tables: BTreeMap<(u8, usize, usize), [[f64; 2]; 2]> = BTreeMap::new();
    for r in &rows {
        let key = (r.a_prev, bin(&x_edges, r.xbar), bin(&u_edges, r.u));
        tables.entry(key).or_insert([[0.0; 2]; 2])[r.a_prev2 as usize][r.a as usize] += 1.0;
    }

    let (mut dev, mut var) = (0.0, 0.0);
    let mut informative = 0.0;
    let mut largest: Option<((u8, usize, usize), f64)> = None;
    for (key, tab) in &tables {
        let n: f64 = tab.iter().flatten().sum();
        if largest.map_or(true, |(_, m)| n > m) {
            largest = Some((*key, n));
        }
        let r = [tab[0][0] + tab[0][1], tab[1][0] + tab[1][1]];
        let c = [tab[0][0] + tab[1][0], tab[0][1] + tab[1][1]];
        if n < 2.0 || r.contains(&0.0) || c.contains(&0.0) {
            continue;
        }
        dev += tab[1][1] - r[1] * c[1] / n;
        var += r[0] * r[1] * c[0] * c[1] / (n * n * (n - 1.0));
        informative += n;
    }
    if informative < 5.0 || var <= 0.0 {
        let ((a, xb, ub), n) = largest.expect("at least one stratum");
        return Err(Error::InsufficientData(format!(
            "{informative} rows in informative strata; largest stratum (a_prev={a}, xbar_bin={xb}, u_bin={ub}) has {n} rows"
        )));
    }
    let chi = ChiSquared::new(1.0).expect("positive df");
    Ok(1.0 - chi.cdf(dev * dev / var))
}
