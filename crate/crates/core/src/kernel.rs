//! Treatment-adjusted ARD squared-exponential kernel on the joint space of
//! substitute confounder, current covariates, and previous treatment.
//!
//! ```text
//! k(u, v) = s² exp(-½ [Σ ((z−z')/l_z)² + Σ ((x−x')/l_x)² + Σ ((a−a')/l_a)²])
//! ```
//!
//! Joint inputs are laid out flat as `[z.., x.., a_prev]`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub variance: f64,
    pub len_z: Vec<f64>,
    pub len_x: Vec<f64>,
    pub len_a: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointInput {
    pub z: Vec<f64>,
    pub x: Vec<f64>,
    pub a_prev: f64,
}

impl JointInput {
    pub fn new(z: &[f64], x: &[f64], a_prev: f64) -> JointInput {
        JointInput {
            z: z.to_vec(),
            x: x.to_vec(),
            a_prev,
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.z.len() + self.x.len() + 1);
        v.extend_from_slice(&self.z);
        v.extend_from_slice(&self.x);
        v.push(self.a_prev);
        v
    }
}

/// Partials of `k(u, v)` with respect to the log-hyperparameters and the latent
/// coordinates of `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelGrad {
    pub d_log_variance: f64,
    /// Ordered as `[len_z.., len_x.., len_a..]`.
    pub d_log_lengthscales: Vec<f64>,
    pub d_z: Vec<f64>,
}

impl KernelParams {
    pub fn new(variance: f64, len_z: Vec<f64>, len_x: Vec<f64>, len_a: Vec<f64>) -> Result<Self> {
        let p = KernelParams {
            variance,
            len_z,
            len_x,
            len_a,
        };
        p.validate()?;
        Ok(p)
    }

    /// Unit variance and unit lengthscales.
    pub fn unit(latent_dim: usize, covariate_dim: usize) -> Self {
        KernelParams {
            variance: 1.0,
            len_z: vec![1.0; latent_dim],
            len_x: vec![1.0; covariate_dim],
            len_a: vec![1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.variance) || !self.lengthscales().all(ok) {
            return Err(Error::Config(
                "kernel variance and lengthscales must be finite and positive".into(),
            ));
        }
        if self.len_a.len() != 1 {
            return Err(Error::Config("exactly one previous-treatment lengthscale".into()));
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.len_z.len()
    }

    pub fn covariate_dim(&self) -> usize {
        self.len_x.len()
    }

    /// Width of a flat joint input.
    pub fn input_dim(&self) -> usize {
        self.len_z.len() + self.len_x.len() + self.len_a.len()
    }

    pub fn lengthscales(&self) -> impl Iterator<Item = f64> + '_ {
        self.len_z
            .iter()
            .chain(&self.len_x)
            .chain(&self.len_a)
            .copied()
    }

    /// Inverse squared lengthscales in flat-input order.
    pub fn precisions(&self) -> Vec<f64> {
        self.lengthscales().map(|l| 1.0 / (l * l)).collect()
    }

    /// `[log variance, log lengthscales..]`.
    pub fn to_log_vec(&self) -> Vec<f64> {
        std::iter::once(self.variance.ln())
            .chain(self.lengthscales().map(f64::ln))
            .collect()
    }

    pub fn set_log_vec(&mut self, v: &[f64]) {
        let (q, k) = (self.len_z.len(), self.len_x.len());
        self.variance = v[0].exp();
        for (dst, src) in self.len_z.iter_mut().zip(&v[1..1 + q]) {
            *dst = src.exp();
        }
        for (dst, src) in self.len_x.iter_mut().zip(&v[1 + q..1 + q + k]) {
            *dst = src.exp();
        }
        for (dst, src) in self.len_a.iter_mut().zip(&v[1 + q + k..]) {
            *dst = src.exp();
        }
    }

    fn check_input(&self, u: &JointInput) -> Result<()> {
        if u.z.len() != self.len_z.len() || u.x.len() != self.len_x.len() {
            return Err(Error::Dimension(format!(
                "joint input has |z|={}, |x|={}; kernel expects {} and {}",
                u.z.len(),
                u.x.len(),
                self.len_z.len(),
                self.len_x.len()
            )));
        }
        if !(u.z.iter().chain(&u.x).all(|v| v.is_finite()) && u.a_prev.is_finite()) {
            return Err(Error::NonFinite("kernel input".into()));
        }
        Ok(())
    }
}

/// Kernel value on flat inputs given precomputed precisions.
#[inline]
pub(crate) fn eval_flat(variance: f64, precisions: &[f64], u: &[f64], v: &[f64]) -> f64 {
    let mut r2 = 0.0;
    for ((a, b), w) in u.iter().zip(v).zip(precisions) {
        let d = a - b;
        r2 += d * d * w;
    }
    variance * (-0.5 * r2).exp()
}

pub fn ktreat(u: &JointInput, v: &JointInput, p: &KernelParams) -> Result<f64> {
    p.check_input(u)?;
    p.check_input(v)?;
    Ok(eval_flat(p.variance, &p.precisions(), &u.to_flat(), &v.to_flat()))
}

/// Gram matrix with `jitter` added to the diagonal.
pub fn gram(inputs: &[JointInput], p: &KernelParams, jitter: f64) -> Result<DMatrix<f64>> {
    for u in inputs {
        p.check_input(u)?;
    }
    let flat: Vec<Vec<f64>> = inputs.iter().map(JointInput::to_flat).collect();
    Ok(gram_flat(&flat, p.variance, &p.precisions(), jitter))
}

pub(crate) fn gram_flat(
    inputs: &[Vec<f64>],
    variance: f64,
    precisions: &[f64],
    jitter: f64,
) -> DMatrix<f64> {
    let n = inputs.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = variance + jitter;
        for j in 0..i {
            let v = eval_flat(variance, precisions, &inputs[i], &inputs[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

pub fn ktreat_grad(u: &JointInput, v: &JointInput, p: &KernelParams) -> Result<KernelGrad> {
    let k = ktreat(u, v, p)?;
    let (uf, vf) = (u.to_flat(), v.to_flat());
    let prec = p.precisions();
    let q = p.latent_dim();
    let d_log_lengthscales = uf
        .iter()
        .zip(&vf)
        .zip(&prec)
        .map(|((a, b), w)| k * (a - b) * (a - b) * w)
        .collect();
    let d_z = (0..q).map(|j| -k * (uf[j] - vf[j]) * prec[j]).collect();
    Ok(KernelGrad {
        d_log_variance: k,
        d_log_lengthscales,
        d_z,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn params() -> KernelParams {
        KernelParams::new(1.7, vec![0.8], vec![0.5, 1.3, 2.0], vec![0.9]).unwrap()
    }

    fn random_input(rng: &mut impl Rng) -> JointInput {
        JointInput {
            z: vec![rng.gen_range(-2.0..2.0)],
            x: (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            a_prev: f64::from(rng.gen_range(0..2u8)),
        }
    }

    #[test]
    fn identical_inputs_give_variance() {
        let p = params();
        let u = JointInput::new(&[0.3], &[1.0, -2.0, 0.5], 1.0);
        assert_eq!(ktreat(&u, &u, &p).unwrap(), 1.7);
    }

    #[test]
    fn huge_lengthscales_flatten_the_kernel() {
        let p = KernelParams::new(2.5, vec![1e12], vec![1e12; 3], vec![1e12]).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let (u, v) = (random_input(&mut rng), random_input(&mut rng));
            let k = ktreat(&u, &v, &p).unwrap();
            assert!((k - 2.5).abs() <= 1e-9 * 2.5);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = params();
        let u = JointInput::new(&[0.3], &[1.0, -2.0], 1.0);
        assert!(ktreat(&u, &u, &p).is_err());
        let nan = JointInput::new(&[f64::NAN], &[1.0, -2.0, 0.0], 1.0);
        assert!(ktreat(&nan, &nan, &p).is_err());
        assert!(KernelParams::new(0.0, vec![1.0], vec![1.0], vec![1.0]).is_err());
    }

    #[test]
    fn gram_of_one_input() {
        let p = params();
        let g = gram(&[JointInput::new(&[0.0], &[0.0; 3], 0.0)], &p, 1e-3).unwrap();
        assert_eq!(g.shape(), (1, 1));
        assert_eq!(g[(0, 0)], 1.7 + 1e-3);
    }

    #[test]
    fn gram_matches_pairwise_kernel() {
        let p = params();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let inputs: Vec<JointInput> = (0..5).map(|_| random_input(&mut rng)).collect();
        let g = gram(&inputs, &p, 0.0).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(g[(i, j)], ktreat(&inputs[i], &inputs[j], &p).unwrap());
            }
        }
    }

    #[test]
    fn cholesky_of_large_gram_with_default_jitter() {
        let p = params();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let inputs: Vec<JointInput> = (0..200).map(|_| random_input(&mut rng)).collect();
        let g = gram(&inputs, &p, 1e-6).unwrap();
        assert!(g.cholesky().is_some());
    }

    #[test]
    fn gradient_special_cases() {
        let p = params();
        let u = JointInput::new(&[0.4], &[0.1, 0.2, 0.3], 1.0);
        let g = ktreat_grad(&u, &u, &p).unwrap();
        assert_eq!(g.d_log_variance, p.variance);
        let v = JointInput::new(&[0.4], &[0.5, -0.2, 0.0], 0.0);
        assert_eq!(ktreat_grad(&u, &v, &p).unwrap().d_z, vec![0.0]);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let h = 1e-5;
        for _ in 0..20 {
            let p = KernelParams::new(
                rng.gen_range(0.5..2.0),
                vec![rng.gen_range(0.5..2.0)],
                (0..3).map(|_| rng.gen_range(0.5..2.0)).collect(),
                vec![rng.gen_range(0.5..2.0)],
            )
            .unwrap();
            let (u, v) = (random_input(&mut rng), random_input(&mut rng));
            let g = ktreat_grad(&u, &v, &p).unwrap();
            let base = p.to_log_vec();
            let mut analytic = vec![g.d_log_variance];
            analytic.extend(&g.d_log_lengthscales);
            for (i, an) in analytic.iter().enumerate() {
                let eval = |delta: f64| {
                    let mut q = p.clone();
                    let mut lv = base.clone();
                    lv[i] += delta;
                    q.set_log_vec(&lv);
                    ktreat(&u, &v, &q).unwrap()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                assert!((an - fd).abs() <= 1e-4 * fd.abs().max(1e-8), "param {i}: {an} vs {fd}");
            }
            let mut up = u.clone();
            up.z[0] += h;
            let mut dn = u.clone();
            dn.z[0] -= h;
            let fd = (ktreat(&up, &v, &p).unwrap() - ktreat(&dn, &v, &p).unwrap()) / (2.0 * h);
            assert!((g.d_z[0] - fd).abs() <= 1e-4 * fd.abs().max(1e-8));
        }
    }

    fn arb_input() -> impl Strategy<Value = JointInput> {
        (-3.0..3.0f64, prop::collection::vec(-3.0..3.0f64, 3), 0..2u8)
            .prop_map(|(z, x, a)| JointInput::new(&[z], &x, f64::from(a)))
    }

    proptest! {
        #[test]
        fn symmetric_bounded_and_stationary(u in arb_input(), v in arb_input(), shift in -5.0..5.0f64) {
            let p = params();
            let kuv = ktreat(&u, &v, &p).unwrap();
            prop_assert_eq!(kuv, ktreat(&v, &u, &p).unwrap());
            prop_assert!(kuv > 0.0 && kuv <= p.variance);
            let mv = |w: &JointInput| JointInput {
                z: w.z.iter().map(|c| c + shift).collect(),
                x: w.x.iter().map(|c| c + shift).collect(),
                a_prev: w.a_prev + shift,
            };
            let shifted = ktreat(&mv(&u), &mv(&v), &p).unwrap();
            prop_assert!((shifted - kuv).abs() <= 1e-12 * p.variance);
        }
    }
}
