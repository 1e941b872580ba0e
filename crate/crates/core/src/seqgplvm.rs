//! Sequential GP latent-variable model over binary treatment sequences.
//!
//! Each treatment is emitted through a Bernoulli likelihood from a GP evaluated at
//! the joint input `(z, x_t, a_{t-1})`, where `z` is a per-patient, time-invariant
//! latent substitute confounder. Inference is variational:
//!
//! * inducing variables `u = L_K v` are whitened, with `q(v) = N(m, S)`, `S = L Lᵀ`
//!   and `p(v) = N(0, I)`;
//! * `q(z_n) = N(μ_n, diag(exp(logvar_n)))` per training patient;
//! * the Bernoulli expectation under the sparse-GP marginal `q(f_t)` uses
//!   Gauss–Hermite quadrature, and the expectation under `q(z)` uses antithetic
//!   reparameterized samples whose noise is fixed by an integer key.
//!
//! The objective is
//!
//! ```text
//! Σ_n Σ_t E[log p(a_t | f_t)] − KL(q(v)‖p(v)) − Σ_n KL(q(z_n)‖p(z)) − s²
//! ```
//!
//! where the last term is the log Gamma(1,1) density of the kernel variance.
//! All gradients are analytic.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kernel::{eval_flat, gram_flat, KernelParams};
use crate::math::{sigmoid, GaussHermite};
use crate::optim::Adam;
use crate::rng;
use crate::trajectories::{Dataset, Trajectory};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub n_inducing: usize,
    pub prior_z_sigma2: f64,
    pub n_mc_z: usize,
    pub n_quad: usize,
    pub max_iters: usize,
    pub learning_rate: f64,
    /// Relative change of the 25-iteration mean ELBO below which fitting stops.
    pub tol: f64,
    pub jitter: f64,
    /// Iteration cap for per-patient posterior refinement of held-out trajectories.
    pub infer_iters: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_dim: 1,
            n_inducing: 50,
            prior_z_sigma2: 1.0,
            n_mc_z: 8,
            n_quad: 20,
            max_iters: 1000,
            learning_rate: 0.02,
            tol: 1e-5,
            jitter: 1e-6,
            infer_iters: 400,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Cheaper settings for desk-scale sweeps: 20 inducing points, 2 antithetic
    /// samples, 150 Adam steps at rate 0.05.
    pub fn desk() -> Self {
        ModelConfig {
            n_inducing: 20,
            n_mc_z: 2,
            max_iters: 150,
            learning_rate: 0.05,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ints = [
            ("latent_dim", self.latent_dim),
            ("n_inducing", self.n_inducing),
            ("n_mc_z", self.n_mc_z),
            ("n_quad", self.n_quad),
            ("max_iters", self.max_iters),
            ("infer_iters", self.infer_iters),
        ];
        if let Some((name, _)) = ints.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        let reals = [
            ("prior_z_sigma2", self.prior_z_sigma2),
            ("learning_rate", self.learning_rate),
            ("tol", self.tol),
        ];
        if let Some((name, v)) = reals.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config(format!("{name} must be positive, got {v}")));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::Config("jitter must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalState {
    /// `n_inducing` points of width `latent_dim + k + 1`.
    pub inducing_inputs: Vec<Vec<f64>>,
    pub qu_mean: Vec<f64>,
    /// Lower-triangular factor of the whitened `q(v)` covariance, row-major.
    pub qu_cov_chol: Vec<Vec<f64>>,
    pub qz_ids: Vec<String>,
    pub qz_mean: Vec<Vec<f64>>,
    pub qz_logvar: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub final_elbo: f64,
    pub initial_elbo: f64,
    pub iterations: usize,
    pub converged: bool,
    pub dataset_hash: String,
    pub elbo_trace: Vec<f64>,
    /// Trailing 25-iteration moving average of `elbo_trace`.
    pub elbo_trace_smoothed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub kernel: KernelParams,
    pub vs: VariationalState,
    pub cfg: ModelConfig,
    pub training_meta: TrainingMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubstitutePosterior {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// False when held-out refinement hit its iteration cap before settling.
    #[serde(default = "yes")]
    pub converged: bool,
}

fn yes() -> bool {
    true
}

impl SubstitutePosterior {
    pub fn sample(&self, rng: &mut rng::Rng) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.var)
            .map(|(m, v)| {
                let e: f64 = StandardNormal.sample(rng);
                m + v.sqrt() * e
            })
            .collect()
    }
}

/// Per-patient data laid out for the objective.
#[derive(Debug, Clone)]
struct PatientData {
    /// `T × k`, row-major.
    x: Vec<f64>,
    a: Vec<u8>,
}

impl PatientData {
    fn from_traj(t: &Trajectory) -> PatientData {
        PatientData {
            x: t.x.iter().flatten().copied().collect(),
            a: t.a.clone(),
        }
    }

    fn len(&self) -> usize {
        self.a.len()
    }

    /// Noise stream derived from the trajectory content, so that training and
    /// held-out inference see the same latent noise for the same history.
    fn stream(&self) -> u64 {
        let mut key = Sha256::new();
        key.update(&self.a);
        for v in &self.x {
            key.update(v.to_le_bytes());
        }
        u64::from_le_bytes(key.finalize()[..8].try_into().expect("8 bytes"))
    }
}

/// Antithetic standard-normal draws, `n_mc × q`, for one patient.
fn antithetic_noise(key: u64, stream: u64, n_mc: usize, q: usize) -> Vec<f64> {
    let mut rng = rng::stream(key, stream);
    let mut out = vec![0.0; n_mc * q];
    let mut s = 0;
    while s < n_mc {
        let draw: Vec<f64> = (0..q).map(|_| StandardNormal.sample(&mut rng)).collect();
        out[s * q..(s + 1) * q].copy_from_slice(&draw);
        if s + 1 < n_mc {
            for (dst, v) in out[(s + 1) * q..(s + 2) * q].iter_mut().zip(&draw) {
                *dst = -v;
            }
        }
        s += 2;
    }
    out
}

/// Flat free-parameter layout shared by the optimizer and gradient checks.
///
/// Order: `[log s², log lengthscales] [inducing inputs] [m] [L lower triangle,
/// diagonal as log] [qz means] [qz log-variances]`.
#[derive(Debug, Clone, Copy)]
struct Layout {
    d: usize,
    m: usize,
    q: usize,
    n: usize,
}

impl Layout {
    fn of(model: &FittedModel) -> Layout {
        Layout {
            d: model.kernel.input_dim(),
            m: model.vs.inducing_inputs.len(),
            q: model.kernel.latent_dim(),
            n: model.vs.qz_ids.len(),
        }
    }
    fn kernel(&self) -> usize {
        0
    }
    fn inducing(&self) -> usize {
        1 + self.d
    }
    fn qu_mean(&self) -> usize {
        self.inducing() + self.m * self.d
    }
    fn qu_chol(&self) -> usize {
        self.qu_mean() + self.m
    }
    fn qz_mean(&self) -> usize {
        self.qu_chol() + self.m * (self.m + 1) / 2
    }
    fn qz_logvar(&self) -> usize {
        self.qz_mean() + self.n * self.q
    }
    fn len(&self) -> usize {
        self.qz_logvar() + self.n * self.q
    }
}

/// Frozen global quantities needed to evaluate the predictive at any joint input.
#[derive(Debug, Clone)]
pub struct Predictor {
    variance: f64,
    precisions: Vec<f64>,
    /// `m × d`, row-major.
    inducing: Vec<f64>,
    d: usize,
    q: usize,
    lk: DMatrix<f64>,
    qu_mean: DVector<f64>,
    qu_chol: DMatrix<f64>,
    gh: GaussHermite,
}

/// Gradient accumulators for the global parameters.
struct GlobalAcc {
    log_kernel: Vec<f64>,
    inducing: Vec<f64>,
    qu_mean: DVector<f64>,
    qu_chol: DMatrix<f64>,
    lk: DMatrix<f64>,
}

impl GlobalAcc {
    fn zeros(m: usize, d: usize) -> GlobalAcc {
        GlobalAcc {
            log_kernel: vec![0.0; 1 + d],
            inducing: vec![0.0; m * d],
            qu_mean: DVector::zeros(m),
            qu_chol: DMatrix::zeros(m, m),
            lk: DMatrix::zeros(m, m),
        }
    }
}

impl Predictor {
    pub fn new(model: &FittedModel) -> Result<Predictor> {
        let d = model.kernel.input_dim();
        let precisions = model.kernel.precisions();
        let kmm = gram_flat(
            &model.vs.inducing_inputs,
            model.kernel.variance,
            &precisions,
            model.cfg.jitter,
        );
        let lk = kmm
            .cholesky()
            .ok_or_else(|| Error::Cholesky("inducing covariance K_mm".into()))?
            .l();
        let m = model.vs.inducing_inputs.len();
        let qu_chol = DMatrix::from_fn(m, m, |i, j| {
            if j <= i {
                model.vs.qu_cov_chol[i][j]
            } else {
                0.0
            }
        });
        Ok(Predictor {
            variance: model.kernel.variance,
            precisions,
            inducing: model.vs.inducing_inputs.iter().flatten().copied().collect(),
            d,
            q: model.kernel.latent_dim(),
            lk,
            qu_mean: DVector::from_column_slice(&model.vs.qu_mean),
            qu_chol,
            gh: GaussHermite::new(model.cfg.n_quad),
        })
    }

    fn n_inducing(&self) -> usize {
        self.qu_mean.len()
    }

    fn covariate_dim(&self) -> usize {
        self.d - self.q - 1
    }

    /// Mean and variance of `q(f)` at a flat joint input.
    pub fn predict_flat(&self, w: &[f64]) -> (f64, f64) {
        let m = self.n_inducing();
        let kn = DVector::from_fn(m, |j, _| {
            eval_flat(
                self.variance,
                &self.precisions,
                &self.inducing[j * self.d..(j + 1) * self.d],
                w,
            )
        });
        let a = self
            .lk
            .solve_lower_triangular(&kn)
            .expect("cholesky factor has positive diagonal");
        let mean = a.dot(&self.qu_mean);
        let b = self.qu_chol.tr_mul(&a);
        let var = (self.variance - a.norm_squared() + b.norm_squared()).max(1e-12);
        (mean, var)
    }

    pub fn predict(&self, z: &[f64], x: &[f64], a_prev: f64) -> (f64, f64) {
        self.predict_flat(&joint(z, x, a_prev))
    }

    /// `E_{q(f)}[log Bernoulli(a | sigmoid(f))]` at `(z, x, a_prev)`.
    pub fn log_emission(&self, a: u8, x: &[f64], a_prev: f64, z: &[f64]) -> f64 {
        let (mean, var) = self.predict(z, x, a_prev);
        self.gh.bernoulli_loglik(sign(a), mean, var).0
    }

    /// `E_{q(f)}[sigmoid(f)]`, the predictive probability of treatment.
    pub fn treat_prob(&self, x: &[f64], a_prev: f64, z: &[f64]) -> f64 {
        let (mean, var) = self.predict(z, x, a_prev);
        self.gh.expect(mean, var, sigmoid)
    }

    /// Expected log-likelihood of one patient summed over steps and averaged over the
    /// reparameterized latent samples, together with its partials with respect to
    /// the patient's `q(z)` mean and log-variance. When `acc` is given, global
    /// partials are accumulated into it.
    fn patient_term(
        &self,
        pd: &PatientData,
        eps: &[f64],
        mu_z: &[f64],
        logvar_z: &[f64],
        acc: Option<&mut GlobalAcc>,
        want_grad: bool,
    ) -> (f64, Vec<f64>, Vec<f64>) {
        let (q, d, k) = (self.q, self.d, self.covariate_dim());
        let m = self.n_inducing();
        let n_mc = eps.len() / q;
        let steps = pd.len();
        let npts = n_mc * steps;
        let sd_z: Vec<f64> = logvar_z.iter().map(|lv| (0.5 * lv).exp()).collect();
        let weight = 1.0 / n_mc as f64;

        // Joint inputs, one row per (sample, step).
        let mut w = vec![0.0; npts * d];
        for s in 0..n_mc {
            for t in 0..steps {
                let row = &mut w[(s * steps + t) * d..(s * steps + t + 1) * d];
                for j in 0..q {
                    row[j] = mu_z[j] + sd_z[j] * eps[s * q + j];
                }
                row[q..q + k].copy_from_slice(&pd.x[t * k..(t + 1) * k]);
                row[q + k] = if t == 0 { 0.0 } else { f64::from(pd.a[t - 1]) };
            }
        }
        let kmn = DMatrix::from_fn(m, npts, |j, n| {
            eval_flat(
                self.variance,
                &self.precisions,
                &self.inducing[j * d..(j + 1) * d],
                &w[n * d..(n + 1) * d],
            )
        });
        let a = self
            .lk
            .solve_lower_triangular(&kmn)
            .expect("cholesky factor has positive diagonal");
        let mu = a.tr_mul(&self.qu_mean);
        let b = self.qu_chol.tr_mul(&a);

        let mut value = 0.0;
        let mut d_mu = DVector::zeros(npts);
        let mut d_var = DVector::zeros(npts);
        for n in 0..npts {
            let var = self.variance - a.column(n).norm_squared() + b.column(n).norm_squared();
            let at = pd.a[n % steps];
            let (e, dm, dv) = self.gh.bernoulli_loglik(sign(at), mu[n], var.max(1e-12));
            value += weight * e;
            d_mu[n] = weight * dm;
            d_var[n] = weight * dv;
        }
        if !want_grad {
            return (value, Vec::new(), Vec::new());
        }

        // Partial with respect to each column of A = L_K⁻¹ K_mn.
        let lb = &self.qu_chol * &b;
        let mut ga = DMatrix::zeros(m, npts);
        for n in 0..npts {
            let two_dv = 2.0 * d_var[n];
            for j in 0..m {
                ga[(j, n)] = self.qu_mean[j] * d_mu[n] + two_dv * (lb[(j, n)] - a[(j, n)]);
            }
        }
        // Partial with respect to K_mn.
        let c = self
            .lk
            .tr_solve_lower_triangular(&ga)
            .expect("cholesky factor has positive diagonal");

        let mut g_mu = vec![0.0; q];
        let mut g_lv = vec![0.0; q];
        let mut g_w_z = vec![0.0; npts * q];
        let mut acc = acc;
        for n in 0..npts {
            let wn = &w[n * d..(n + 1) * d];
            for j in 0..m {
                let g = c[(j, n)];
                if g == 0.0 {
                    continue;
                }
                let kv = kmn[(j, n)];
                let gk = g * kv;
                let zj = &self.inducing[j * d..(j + 1) * d];
                for dd in 0..q {
                    g_w_z[n * q + dd] -= gk * (wn[dd] - zj[dd]) * self.precisions[dd];
                }
                if let Some(acc) = acc.as_deref_mut() {
                    acc.log_kernel[0] += gk;
                    for dd in 0..d {
                        let delta = zj[dd] - wn[dd];
                        let p = self.precisions[dd];
                        acc.log_kernel[1 + dd] += gk * delta * delta * p;
                        acc.inducing[j * d + dd] -= gk * delta * p;
                    }
                }
            }
        }
        for s in 0..n_mc {
            for t in 0..steps {
                let n = s * steps + t;
                for j in 0..q {
                    let g = g_w_z[n * q + j];
                    g_mu[j] += g;
                    g_lv[j] += g * 0.5 * sd_z[j] * eps[s * q + j];
                }
            }
        }
        if let Some(acc) = acc {
            acc.log_kernel[0] += d_var.sum() * self.variance;
            acc.qu_mean += &a * &d_mu;
            let mut a_scaled = a.clone();
            for n in 0..npts {
                a_scaled.column_mut(n).scale_mut(2.0 * d_var[n]);
            }
            acc.qu_chol.gemm(1.0, &a_scaled, &b.transpose(), 1.0);
            acc.lk.gemm(-1.0, &c, &a.transpose(), 1.0);
        }
        (value, g_mu, g_lv)
    }
}

fn sign(a: u8) -> f64 {
    if a == 1 {
        1.0
    } else {
        -1.0
    }
}

fn joint(z: &[f64], x: &[f64], a_prev: f64) -> Vec<f64> {
    let mut v = Vec::with_capacity(z.len() + x.len() + 1);
    v.extend_from_slice(z);
    v.extend_from_slice(x);
    v.push(a_prev);
    v
}

/// KL(N(mu, diag(exp(lv))) ‖ N(0, prior I)) and its partials.
fn kl_z(mu: &[f64], lv: &[f64], prior: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let mut kl = 0.0;
    let mut g_mu = Vec::with_capacity(mu.len());
    let mut g_lv = Vec::with_capacity(mu.len());
    for (&m, &l) in mu.iter().zip(lv) {
        let v = l.exp();
        kl += 0.5 * ((v + m * m) / prior - 1.0 - l + prior.ln());
        g_mu.push(m / prior);
        g_lv.push(0.5 * (v / prior - 1.0));
    }
    (kl, g_mu, g_lv)
}

/// Gradient of a scalar with respect to a symmetric matrix `K`, given its gradient
/// with respect to the lower Cholesky factor `L` of `K`.
fn cholesky_backward(l: &DMatrix<f64>, g_l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut phi = l.tr_mul(&g_l.lower_triangle());
    for i in 0..n {
        for j in (i + 1)..n {
            phi[(i, j)] = 0.0;
        }
        phi[(i, i)] *= 0.5;
    }
    let left = l
        .tr_solve_lower_triangular(&phi)
        .expect("cholesky factor has positive diagonal");
    let full = l
        .tr_solve_lower_triangular(&left.transpose())
        .expect("cholesky factor has positive diagonal")
        .transpose();
    (&full + full.transpose()) * 0.5
}

impl FittedModel {
    pub fn latent_dim(&self) -> usize {
        self.kernel.latent_dim()
    }

    pub fn covariate_dim(&self) -> usize {
        self.kernel.covariate_dim()
    }

    pub fn predictor(&self) -> Result<Predictor> {
        Predictor::new(self)
    }

    /// Stored `q(z)` of a training patient.
    pub fn stored_posterior(&self, id: &str) -> Option<SubstitutePosterior> {
        let i = self.vs.qz_ids.iter().position(|x| x == id)?;
        Some(SubstitutePosterior {
            mean: self.vs.qz_mean[i].clone(),
            var: self.vs.qz_logvar[i].iter().map(|l| l.exp()).collect(),
            converged: true,
        })
    }

    pub fn n_free_params(&self) -> usize {
        Layout::of(self).len()
    }

    pub fn free_params(&self) -> Vec<f64> {
        let lay = Layout::of(self);
        let mut v = Vec::with_capacity(lay.len());
        v.extend(self.kernel.to_log_vec());
        v.extend(self.vs.inducing_inputs.iter().flatten());
        v.extend(&self.vs.qu_mean);
        for i in 0..lay.m {
            for j in 0..=i {
                let l = self.vs.qu_cov_chol[i][j];
                v.push(if i == j { l.ln() } else { l });
            }
        }
        v.extend(self.vs.qz_mean.iter().flatten());
        v.extend(self.vs.qz_logvar.iter().flatten());
        v
    }

    pub fn set_free_params(&mut self, v: &[f64]) {
        let lay = Layout::of(self);
        assert_eq!(v.len(), lay.len(), "free parameter vector length");
        self.kernel.set_log_vec(&v[lay.kernel()..lay.inducing()]);
        for (j, row) in self.vs.inducing_inputs.iter_mut().enumerate() {
            let off = lay.inducing() + j * lay.d;
            row.copy_from_slice(&v[off..off + lay.d]);
        }
        self.vs
            .qu_mean
            .copy_from_slice(&v[lay.qu_mean()..lay.qu_chol()]);
        let mut off = lay.qu_chol();
        for i in 0..lay.m {
            for j in 0..=i {
                self.vs.qu_cov_chol[i][j] = if i == j { v[off].exp() } else { v[off] };
                off += 1;
            }
        }
        for n in 0..lay.n {
            let mo = lay.qz_mean() + n * lay.q;
            let lo = lay.qz_logvar() + n * lay.q;
            self.vs.qz_mean[n].copy_from_slice(&v[mo..mo + lay.q]);
            self.vs.qz_logvar[n].copy_from_slice(&v[lo..lo + lay.q]);
        }
    }

    fn prepare(&self, d: &Dataset) -> Result<Vec<PatientData>> {
        if d.covariate_dim() != self.covariate_dim() {
            return Err(Error::Dimension(format!(
                "dataset has {} covariates, model expects {}",
                d.covariate_dim(),
                self.covariate_dim()
            )));
        }
        self.vs
            .qz_ids
            .iter()
            .map(|id| {
                d.get(id)
                    .map(PatientData::from_traj)
                    .ok_or_else(|| Error::invariant(id, "training patient missing from dataset"))
            })
            .collect()
    }

    /// Objective and gradient for prepared data and fixed noise.
    fn objective(
        &self,
        data: &[PatientData],
        noise: &[Vec<f64>],
        want_grad: bool,
    ) -> Result<(f64, Vec<f64>)> {
        let lay = Layout::of(self);
        let pred = self.predictor()?;
        let mut acc = GlobalAcc::zeros(lay.m, lay.d);
        let mut grad = if want_grad { vec![0.0; lay.len()] } else { Vec::new() };
        let prior = self.cfg.prior_z_sigma2;

        let mut value = 0.0;
        for (n, pd) in data.iter().enumerate() {
            let (mu, lv) = (&self.vs.qz_mean[n], &self.vs.qz_logvar[n]);
            let (ell, g_mu, g_lv) = pred.patient_term(
                pd,
                &noise[n],
                mu,
                lv,
                if want_grad { Some(&mut acc) } else { None },
                want_grad,
            );
            let (kl, k_mu, k_lv) = kl_z(mu, lv, prior);
            value += ell - kl;
            if want_grad {
                for j in 0..lay.q {
                    grad[lay.qz_mean() + n * lay.q + j] = g_mu[j] - k_mu[j];
                    grad[lay.qz_logvar() + n * lay.q + j] = g_lv[j] - k_lv[j];
                }
            }
        }

        // KL(q(v) ‖ N(0, I)).
        let l = &pred.qu_chol;
        let mvec = &pred.qu_mean;
        let logdet: f64 = (0..lay.m).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0;
        let kl_u = 0.5 * (l.norm_squared() + mvec.norm_squared() - lay.m as f64 - logdet);
        value -= kl_u;
        // Gamma(1,1) log-density on the kernel variance.
        value -= self.kernel.variance;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("ELBO evaluated to {value}")));
        }
        if !want_grad {
            return Ok((value, grad));
        }

        // Inducing covariance contributions through its Cholesky factor.
        let g_kmm = cholesky_backward(&pred.lk, &acc.lk);
        let zin = &pred.inducing;
        for i in 0..lay.m {
            acc.log_kernel[0] += g_kmm[(i, i)] * self.kernel.variance;
            for j in 0..lay.m {
                if i == j {
                    continue;
                }
                let kv = eval_flat(
                    pred.variance,
                    &pred.precisions,
                    &zin[i * lay.d..(i + 1) * lay.d],
                    &zin[j * lay.d..(j + 1) * lay.d],
                );
                let gk = g_kmm[(i, j)] * kv;
                acc.log_kernel[0] += gk;
                for dd in 0..lay.d {
                    let delta = zin[i * lay.d + dd] - zin[j * lay.d + dd];
                    let p = pred.precisions[dd];
                    acc.log_kernel[1 + dd] += gk * delta * delta * p;
                    // K_ij and K_ji both move with Z_i.
                    acc.inducing[i * lay.d + dd] -= 2.0 * gk * delta * p;
                }
            }
        }
        acc.log_kernel[0] -= self.kernel.variance;
        acc.qu_mean -= mvec;
        acc.qu_chol -= l;

        grad[lay.kernel()..lay.inducing()].copy_from_slice(&acc.log_kernel);
        grad[lay.inducing()..lay.qu_mean()].copy_from_slice(&acc.inducing);
        grad[lay.qu_mean()..lay.qu_chol()].copy_from_slice(acc.qu_mean.as_slice());
        let mut off = lay.qu_chol();
        for i in 0..lay.m {
            for j in 0..=i {
                grad[off] = if i == j {
                    // d/dlog L_ii, with the −log L_ii term of the KL.
                    (acc.qu_chol[(i, i)] + 1.0 / l[(i, i)]) * l[(i, i)]
                } else {
                    acc.qu_chol[(i, j)]
                };
                off += 1;
            }
        }
        Ok((value, grad))
    }

    fn noise(&self, rng_key: u64, data: &[PatientData]) -> Vec<Vec<f64>> {
        data.iter()
            .map(|pd| antithetic_noise(rng_key, pd.stream(), self.cfg.n_mc_z, self.latent_dim()))
            .collect()
    }
}

/// Evidence lower bound on the training set and its gradient in
/// [`FittedModel::free_params`] order. `rng_key` fixes the latent Monte Carlo noise.
pub fn elbo(model: &FittedModel, d: &Dataset, rng_key: u64) -> Result<(f64, Vec<f64>)> {
    let data = model.prepare(d)?;
    let noise = model.noise(rng_key, &data);
    model.objective(&data, &noise, true)
}

pub fn elbo_value(model: &FittedModel, d: &Dataset, rng_key: u64) -> Result<f64> {
    let data = model.prepare(d)?;
    let noise = model.noise(rng_key, &data);
    Ok(model.objective(&data, &noise, false)?.0)
}

/// Digest of the treatment and covariate content of a dataset.
pub fn dataset_hash(d: &Dataset) -> String {
    let mut h = Sha256::new();
    for t in &d.trajectories {
        h.update(t.id.as_bytes());
        h.update(&t.a);
        for v in t.x.iter().flatten() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Lloyd's k-means with centers seeded from distinct random points.
fn kmeans(points: &[Vec<f64>], k: usize, iters: usize, rng: &mut rng::Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centers: Vec<Vec<f64>> = rand::seq::index::sample(rng, n, k.min(n))
        .into_iter()
        .map(|i| points[i].clone())
        .collect();
    while centers.len() < k {
        // Fewer points than centers: perturb copies.
        let base = centers[centers.len() % n.max(1)].clone();
        centers.push(base.iter().map(|v| v + 1e-3 * rng.gen_range(-1.0..1.0)).collect());
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut assign = vec![0usize; n];
    for _ in 0..iters {
        for (i, p) in points.iter().enumerate() {
            assign[i] = (0..k)
                .min_by(|&a, &b| dist(p, &centers[a]).total_cmp(&dist(p, &centers[b])))
                .expect("k >= 1");
        }
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, p) in points.iter().enumerate() {
            counts[assign[i]] += 1;
            for (s, v) in sums[assign[i]].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    centers
}

/// Initial model for a training set: unit kernel variance, covariate lengthscales at
/// the per-dimension standard deviation, inducing inputs by k-means over `(x, a_prev)`
/// with latent coordinates drawn from the prior, `q(v)` equal to its prior, and every
/// `q(z)` at `N(0, I)`.
pub fn initialize(d: &Dataset, cfg: &ModelConfig) -> Result<FittedModel> {
    cfg.validate()?;
    d.validate()?;
    let k = d.covariate_dim();
    let q = cfg.latent_dim;
    let mut rng = rng::stream(cfg.seed, rng::hash_str("init"));

    let mut pts: Vec<Vec<f64>> = Vec::new();
    for t in &d.trajectories {
        for s in 0..t.len() {
            let mut p = t.x[s].clone();
            p.push(f64::from(t.a_prev(s)));
            pts.push(p);
        }
    }
    let mut std = vec![0.0; k];
    for j in 0..k {
        let mean = pts.iter().map(|p| p[j]).sum::<f64>() / pts.len() as f64;
        let var = pts.iter().map(|p| (p[j] - mean).powi(2)).sum::<f64>() / pts.len() as f64;
        std[j] = var.sqrt().max(1e-3);
    }
    let sub: Vec<Vec<f64>> = if pts.len() > 5000 {
        rand::seq::index::sample(&mut rng, pts.len(), 5000)
            .into_iter()
            .map(|i| pts[i].clone())
            .collect()
    } else {
        pts
    };
    let scaled: Vec<Vec<f64>> = sub
        .iter()
        .map(|p| {
            let mut s: Vec<f64> = p[..k].iter().zip(&std).map(|(v, s)| v / s).collect();
            s.push(p[k]);
            s
        })
        .collect();
    let centers = kmeans(&scaled, cfg.n_inducing, 25, &mut rng);
    let prior_sd = cfg.prior_z_sigma2.sqrt();
    let inducing_inputs: Vec<Vec<f64>> = centers
        .iter()
        .map(|c| {
            let mut row: Vec<f64> = (0..q)
                .map(|_| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    prior_sd * e
                })
                .collect();
            row.extend(c[..k].iter().zip(&std).map(|(v, s)| v * s));
            row.push(c[k]);
            row
        })
        .collect();

    let m = cfg.n_inducing;
    let kernel = KernelParams::new(1.0, vec![1.0; q], std, vec![1.0])?;
    let vs = VariationalState {
        inducing_inputs,
        qu_mean: vec![0.0; m],
        qu_cov_chol: (0..m)
            .map(|i| (0..m).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect(),
        qz_ids: d.trajectories.iter().map(|t| t.id.clone()).collect(),
        qz_mean: vec![vec![0.0; q]; d.len()],
        qz_logvar: vec![vec![0.0; q]; d.len()],
    };
    Ok(FittedModel {
        kernel,
        vs,
        cfg: cfg.clone(),
        training_meta: TrainingMeta {
            dataset_hash: dataset_hash(d),
            ..TrainingMeta::default()
        },
    })
}

const WINDOW: usize = 25;

fn moving_average(trace: &[f64]) -> Vec<f64> {
    (0..trace.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(WINDOW);
            trace[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// Fits the model to every trajectory in `d` by Adam ascent on the ELBO.
///
/// The latent noise is fixed for the whole run, so the objective is deterministic.
/// Stops after `max_iters` or once the mean ELBO of the last 25 iterations differs
/// from that of the 25 before by less than `tol` relative.
pub fn fit(d: &Dataset, cfg: &ModelConfig) -> Result<FittedModel> {
    let mut model = initialize(d, cfg)?;
    fit_from(&mut model, d)?;
    Ok(model)
}

/// Continues optimizing `model` on `d`.
pub fn fit_from(model: &mut FittedModel, d: &Dataset) -> Result<()> {
    let data = model.prepare(d)?;
    let noise = model.noise(model.cfg.seed, &data);
    let mut params = model.free_params();
    let mut adam = Adam::new(params.len(), model.cfg.learning_rate);
    let mut trace = Vec::with_capacity(model.cfg.max_iters);
    let mut converged = false;

    for iter in 0..model.cfg.max_iters {
        let (value, grad) = match model.objective(&data, &noise, true) {
            Ok(r) => r,
            Err(e) => {
                let norm = params.iter().map(|v| v * v).sum::<f64>().sqrt();
                return Err(Error::NonFinite(format!(
                    "iteration {iter}: {e} (parameter norm {norm:.3e})"
                )));
            }
        };
        if grad.iter().any(|g| !g.is_finite()) {
            let norm = params.iter().map(|v| v * v).sum::<f64>().sqrt();
            return Err(Error::NonFinite(format!(
                "iteration {iter}: non-finite gradient (parameter norm {norm:.3e})"
            )));
        }
        trace.push(value);
        if trace.len() >= 2 * WINDOW {
            let n = trace.len();
            let recent = trace[n - WINDOW..].iter().sum::<f64>() / WINDOW as f64;
            let before = trace[n - 2 * WINDOW..n - WINDOW].iter().sum::<f64>() / WINDOW as f64;
            if (recent - before).abs() < model.cfg.tol * recent.abs().max(1.0) {
                converged = true;
                break;
            }
        }
        adam.ascend(&mut params, &grad);
        model.set_free_params(&params);
    }
    let final_elbo = model.objective(&data, &noise, false)?.0;
    model.training_meta = TrainingMeta {
        final_elbo,
        initial_elbo: trace.first().copied().unwrap_or(final_elbo),
        iterations: trace.len(),
        converged,
        dataset_hash: dataset_hash(d),
        elbo_trace_smoothed: moving_average(&trace),
        elbo_trace: trace,
    };
    Ok(())
}

/// Local objective of one trajectory's `q(z)` with everything else frozen.
fn local_objective(
    pred: &Predictor,
    pd: &PatientData,
    eps: &[f64],
    mu: &[f64],
    lv: &[f64],
    prior: f64,
) -> (f64, Vec<f64>) {
    let (ell, g_mu, g_lv) = pred.patient_term(pd, eps, mu, lv, None, true);
    let (kl, k_mu, k_lv) = kl_z(mu, lv, prior);
    let grad = g_mu
        .iter()
        .zip(&k_mu)
        .map(|(a, b)| a - b)
        .chain(g_lv.iter().zip(&k_lv).map(|(a, b)| a - b))
        .collect();
    (ell - kl, grad)
}

/// Posterior over the substitute confounder for one trajectory.
///
/// Training patients return their stored `q(z)`. Other trajectories get a fresh
/// `q(z)` optimized against the frozen model, with noise keyed by the model seed and
/// the trajectory content so that identical histories give identical posteriors.
pub fn infer_substitute(model: &FittedModel, traj: &Trajectory) -> Result<SubstitutePosterior> {
    if let Some(p) = model.stored_posterior(&traj.id) {
        return Ok(p);
    }
    let pred = model.predictor()?;
    infer_with(model, &pred, traj)
}

pub(crate) fn infer_with(
    model: &FittedModel,
    pred: &Predictor,
    traj: &Trajectory,
) -> Result<SubstitutePosterior> {
    if traj.is_empty() || traj.covariate_dim() != model.covariate_dim() {
        return Err(Error::Dimension(format!(
            "trajectory `{}` has {} covariates over {} steps; model expects {} covariates",
            traj.id,
            traj.covariate_dim(),
            traj.len(),
            model.covariate_dim()
        )));
    }
    let q = model.latent_dim();
    let pd = PatientData::from_traj(traj);
    let eps = antithetic_noise(model.cfg.seed, pd.stream(), model.cfg.n_mc_z, q);
    let prior = model.cfg.prior_z_sigma2;

    let mut params = vec![0.0; 2 * q];
    let mut adam = Adam::new(2 * q, 0.05);
    let mut best = (f64::NEG_INFINITY, params.clone());
    let mut converged = false;
    for _ in 0..model.cfg.infer_iters {
        let (value, grad) = local_objective(pred, &pd, &eps, &params[..q], &params[q..], prior);
        if value > best.0 {
            best = (value, params.clone());
        }
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm < 1e-6 * (1.0 + pd.len() as f64) {
            converged = true;
            break;
        }
        adam.ascend(&mut params, &grad);
    }
    let (value, _) = local_objective(pred, &pd, &eps, &params[..q], &params[q..], prior);
    if value > best.0 {
        best = (value, params);
    }
    let p = best.1;
    Ok(SubstitutePosterior {
        mean: p[..q].to_vec(),
        var: p[q..].iter().map(|l| l.exp()).collect(),
        converged,
    })
}

/// `E_{q(f)}[log Bernoulli(a_t | sigmoid(f))]` at `(z, x_t, a_prev)`.
pub fn log_emission(model: &FittedModel, a_t: u8, x_t: &[f64], a_prev: f64, z: &[f64]) -> Result<f64> {
    if a_t > 1 {
        return Err(Error::Dimension(format!("treatment {a_t} not in {{0,1}}")));
    }
    Ok(model.predictor()?.log_emission(a_t, x_t, a_prev, z))
}

/// Replicated treatment sequences from the fitted model.
///
/// Each replicate draws `z ~ q(z | traj)` and rolls forward, drawing `f_t` from the
/// predictive at `(z, x_t, a_{t-1})` with the replicate's own previous treatment and
/// then `a_t ~ Bernoulli(sigmoid(f_t))`.
pub fn sample_treatments(
    model: &FittedModel,
    traj: &Trajectory,
    n_reps: usize,
    seed: u64,
) -> Result<Vec<Vec<u8>>> {
    let pred = model.predictor()?;
    let post = match model.stored_posterior(&traj.id) {
        Some(p) => p,
        None => infer_with(model, &pred, traj)?,
    };
    let mut rng = rng::keyed(seed, "replicate", &traj.id);
    Ok(sample_with(&pred, &post, traj, n_reps, &mut rng))
}

pub(crate) fn sample_with(
    pred: &Predictor,
    post: &SubstitutePosterior,
    traj: &Trajectory,
    n_reps: usize,
    rng: &mut rng::Rng,
) -> Vec<Vec<u8>> {
    (0..n_reps)
        .map(|_| {
            let z = post.sample(rng);
            let mut reps = Vec::with_capacity(traj.len());
            let mut prev = 0u8;
            for x in &traj.x {
                let (mean, var) = pred.predict(&z, x, f64::from(prev));
                let e: f64 = StandardNormal.sample(rng);
                let f = mean + var.sqrt() * e;
                let u: f64 = rng.gen();
                let a = u8::from(u < sigmoid(f));
                reps.push(a);
                prev = a;
            }
            reps
        })
        .collect()
}

/// Distance between substitute posterior means under the observed and an
/// alternative treatment history.
pub fn substitute_invariance(model: &FittedModel, traj: &Trajectory, alt_a: &[u8]) -> Result<f64> {
    if alt_a.len() != traj.len() {
        return Err(Error::Dimension(format!(
            "alternative history has {} steps, trajectory has {}",
            alt_a.len(),
            traj.len()
        )));
    }
    let pred = model.predictor()?;
    // Both sides are refined from scratch so they are directly comparable.
    let mut observed = traj.clone();
    observed.id = format!("{}#observed", traj.id);
    let mut alt = traj.clone();
    alt.id = format!("{}#alternative", traj.id);
    alt.a = alt_a.to_vec();
    let p0 = infer_with(model, &pred, &observed)?;
    let p1 = infer_with(model, &pred, &alt)?;
    Ok(p0
        .mean
        .iter()
        .zip(&p1.mean)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    cfg: ModelConfig,
    kernel: KernelParams,
    inducing_inputs: Vec<Vec<f64>>,
    qu_mean: Vec<f64>,
    qu_cov_chol: Vec<Vec<f64>>,
    qz: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    training_meta: TrainingMeta,
}

impl FittedModel {
    /// Checks internal dimension consistency.
    pub fn validate(&self) -> Result<()> {
        self.cfg.validate()?;
        self.kernel.validate()?;
        let q = self.cfg.latent_dim;
        if self.kernel.latent_dim() != q {
            return Err(Error::Schema(format!(
                "latent_dim {q} in config but kernel has {} latent lengthscales",
                self.kernel.latent_dim()
            )));
        }
        let d = self.kernel.input_dim();
        let m = self.vs.inducing_inputs.len();
        if m == 0 || self.vs.inducing_inputs.iter().any(|r| r.len() != d) {
            return Err(Error::Schema(format!("inducing inputs must be nonempty rows of width {d}")));
        }
        if self.vs.qu_mean.len() != m
            || self.vs.qu_cov_chol.len() != m
            || self.vs.qu_cov_chol.iter().any(|r| r.len() != m)
        {
            return Err(Error::Schema(format!("q(u) shapes disagree with {m} inducing points")));
        }
        if (0..m).any(|i| !(self.vs.qu_cov_chol[i][i] > 0.0)) {
            return Err(Error::Schema("q(u) Cholesky factor needs a positive diagonal".into()));
        }
        let n = self.vs.qz_ids.len();
        if self.vs.qz_mean.len() != n
            || self.vs.qz_logvar.len() != n
            || self.vs.qz_mean.iter().chain(&self.vs.qz_logvar).any(|r| r.len() != q)
        {
            return Err(Error::Schema(format!(
                "q(z) entries must have latent_dim {q} components"
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            cfg: self.cfg.clone(),
            kernel: self.kernel.clone(),
            inducing_inputs: self.vs.inducing_inputs.clone(),
            qu_mean: self.vs.qu_mean.clone(),
            qu_cov_chol: self.vs.qu_cov_chol.clone(),
            qz: self
                .vs
                .qz_ids
                .iter()
                .enumerate()
                .map(|(i, id)| {
                    (
                        id.clone(),
                        (self.vs.qz_mean[i].clone(), self.vs.qz_logvar[i].clone()),
                    )
                })
                .collect(),
            training_meta: self.training_meta.clone(),
        };
        let s = serde_json::to_string(&ck).map_err(|e| Error::Schema(e.to_string()))?;
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint. Patient order in `q(z)` follows sorted ids.
    pub fn load(path: &Path) -> Result<FittedModel> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&s)
            .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        let mut vs = VariationalState {
            inducing_inputs: ck.inducing_inputs,
            qu_mean: ck.qu_mean,
            qu_cov_chol: ck.qu_cov_chol,
            qz_ids: Vec::new(),
            qz_mean: Vec::new(),
            qz_logvar: Vec::new(),
        };
        for (id, (mean, logvar)) in ck.qz {
            vs.qz_ids.push(id);
            vs.qz_mean.push(mean);
            vs.qz_logvar.push(logvar);
        }
        let model = FittedModel {
            kernel: ck.kernel,
            vs,
            cfg: ck.cfg,
            training_meta: ck.training_meta,
        };
        model.validate()?;
        Ok(model)
    }
}

pub fn save_model(model: &FittedModel, path: &Path) -> Result<()> {
    model.save(path)
}

pub fn load_model(path: &Path) -> Result<FittedModel> {
    FittedModel::load(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn antithetic_pairs_cancel() {
        let e = antithetic_noise(3, 7, 6, 2);
        for s in (0..6).step_by(2) {
            assert_eq!(e[s * 2], -e[(s + 1) * 2]);
            assert_eq!(e[s * 2 + 1], -e[(s + 1) * 2 + 1]);
        }
        assert_eq!(antithetic_noise(3, 7, 5, 1).len(), 5);
    }

    #[test]
    fn kl_z_vanishes_at_prior_and_is_positive_elsewhere() {
        assert_eq!(kl_z(&[0.0], &[0.0], 1.0).0, 0.0);
        assert!(kl_z(&[0.0], &[2f64.ln()], 2.0).0.abs() < 1e-15);
        assert!(kl_z(&[0.3], &[0.0], 1.0).0 > 0.0);
        assert!(kl_z(&[0.0], &[-1.0], 1.0).0 > 0.0);
    }

    #[test]
    fn cholesky_backward_matches_differences() {
        // F(K) = Σ W ∘ chol(K) for a fixed lower-triangular W.
        let k = DMatrix::from_row_slice(3, 3, &[4.0, 1.2, 0.4, 1.2, 3.0, -0.5, 0.4, -0.5, 2.0]);
        let w = DMatrix::from_row_slice(3, 3, &[0.7, 0.0, 0.0, -1.1, 0.3, 0.0, 0.5, 2.0, -0.9]);
        let f = |k: &DMatrix<f64>| k.clone().cholesky().unwrap().l().component_mul(&w).sum();
        let l = k.clone().cholesky().unwrap().l();
        let g = cholesky_backward(&l, &w);
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..=i {
                let mut kp = k.clone();
                let mut km = k.clone();
                kp[(i, j)] += h;
                km[(i, j)] -= h;
                if i != j {
                    kp[(j, i)] += h;
                    km[(j, i)] -= h;
                }
                let fd = (f(&kp) - f(&km)) / (2.0 * h);
                let an = if i == j { g[(i, i)] } else { g[(i, j)] + g[(j, i)] };
                assert!((fd - an).abs() < 1e-7, "({i},{j}): {fd} vs {an}");
            }
        }
    }

    #[test]
    fn moving_average_window() {
        let t: Vec<f64> = (0..30).map(f64::from).collect();
        let s = moving_average(&t);
        assert_eq!(s[0], 0.0);
        assert_eq!(s[1], 0.5);
        assert_eq!(s[29], (5..30).map(f64::from).sum::<f64>() / 25.0);
    }
}
