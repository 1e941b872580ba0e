//! Scalar helpers and Gauss–Hermite quadrature.

use nalgebra::{DMatrix, SymmetricEigen};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))` without overflow in either tail.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Physicists' Gauss–Hermite rule: `∫ e^{-t²} g(t) dt ≈ Σ w_i g(t_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    /// Golub–Welsch: nodes are eigenvalues of the symmetric Jacobi matrix with
    /// off-diagonal `sqrt(i/2)`, weights are `sqrt(pi)` times the squared first
    /// eigenvector components.
    pub fn new(n: usize) -> GaussHermite {
        assert!(n >= 1, "quadrature needs at least one node");
        let mut jac = DMatrix::<f64>::zeros(n, n);
        for i in 1..n {
            let b = (i as f64 / 2.0).sqrt();
            jac[(i, i - 1)] = b;
            jac[(i - 1, i)] = b;
        }
        let eig = SymmetricEigen::new(jac);
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let v0 = eig.eigenvectors[(0, i)];
                (eig.eigenvalues[i], std::f64::consts::PI.sqrt() * v0 * v0)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        // Symmetrize: the rule is exact under t -> -t.
        for i in 0..n / 2 {
            let j = n - 1 - i;
            let t = 0.5 * (pairs[j].0 - pairs[i].0);
            let w = 0.5 * (pairs[i].1 + pairs[j].1);
            pairs[i] = (-t, w);
            pairs[j] = (t, w);
        }
        if n % 2 == 1 {
            pairs[n / 2].0 = 0.0;
        }
        GaussHermite {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1).collect(),
        }
    }

    /// `E[g(f)]` for `f ~ N(mean, var)`.
    pub fn expect(&self, mean: f64, var: f64, g: impl Fn(f64) -> f64) -> f64 {
        let sd = var.max(0.0).sqrt();
        let scale = std::f64::consts::SQRT_2 * sd;
        let total: f64 = self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(t, w)| w * g(mean + scale * t))
            .sum();
        total / std::f64::consts::PI.sqrt()
    }

    /// `E[log sigmoid(s f)]` for `f ~ N(mean, var)` and `s = ±1`, with its partials
    /// with respect to `mean` and `var`.
    pub fn bernoulli_loglik(&self, sign: f64, mean: f64, var: f64) -> (f64, f64, f64) {
        let var = var.max(1e-300);
        let sd = var.sqrt();
        let inv_sqrt_pi = 1.0 / std::f64::consts::PI.sqrt();
        let (mut val, mut d_mean, mut d_sd) = (0.0, 0.0, 0.0);
        for (t, w) in self.nodes.iter().zip(&self.weights) {
            let arg = sign * (mean + std::f64::consts::SQRT_2 * sd * t);
            // d/dx log sigmoid(x) = sigmoid(-x)
            let slope = sign * sigmoid(-arg);
            val += w * log_sigmoid(arg);
            d_mean += w * slope;
            d_sd += w * slope * std::f64::consts::SQRT_2 * t;
        }
        (
            val * inv_sqrt_pi,
            d_mean * inv_sqrt_pi,
            d_sd * inv_sqrt_pi / (2.0 * sd),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_tails() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(800.0) == 1.0 && sigmoid(-800.0) >= 0.0);
        assert!((log_sigmoid(0.0) - 0.5f64.ln()).abs() < 1e-15);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-12);
        assert!(log_sigmoid(800.0) <= 0.0);
    }

    #[test]
    fn hermite_integrates_polynomial_moments() {
        for n in [1usize, 2, 5, 20, 21] {
            let gh = GaussHermite::new(n);
            assert!((gh.weights.iter().sum::<f64>() - std::f64::consts::PI.sqrt()).abs() < 1e-12);
            // E[f^2] = mu^2 + s^2, exact for n >= 2
            if n >= 2 {
                let m2 = gh.expect(0.3, 2.0, |f| f * f);
                assert!((m2 - (0.09 + 2.0)).abs() < 1e-10, "n={n}: {m2}");
            }
            // E[f^4] = 3 s^4 for zero mean, exact for n >= 3
            if n >= 3 {
                let m4 = gh.expect(0.0, 0.5, |f| f.powi(4));
                assert!((m4 - 0.75).abs() < 1e-10, "n={n}: {m4}");
            }
        }
    }

    #[test]
    fn bernoulli_partials_match_differences() {
        let gh = GaussHermite::new(20);
        for &(s, m, v) in &[(1.0, 0.3, 0.7), (-1.0, -1.2, 2.5), (1.0, 4.0, 0.01)] {
            let (_, dm, dv) = gh.bernoulli_loglik(s, m, v);
            let h = 1e-6;
            let fd_m = (gh.bernoulli_loglik(s, m + h, v).0 - gh.bernoulli_loglik(s, m - h, v).0) / (2.0 * h);
            let fd_v = (gh.bernoulli_loglik(s, m, v + h).0 - gh.bernoulli_loglik(s, m, v - h).0) / (2.0 * h);
            assert!((dm - fd_m).abs() < 1e-7, "{dm} {fd_m}");
            assert!((dv - fd_v).abs() < 1e-7, "{dv} {fd_v}");
        }
    }
}
