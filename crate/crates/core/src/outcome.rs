//! One-step-ahead outcome models: pooled ridge regression and an
//! inverse-probability-weighted marginal structural regression.
//!
//! A row for step `t` uses the bias, a window of recent covariates, the treatments
//! preceding `a_t`, the treatment `a_t` itself, and an optional per-patient
//! confounder feature (the true `u` for the oracle, the substitute posterior mean
//! for deconfounded runs).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::sigmoid;
use crate::optim::Adam;
use crate::seqgplvm::SubstitutePosterior;
use crate::simulator::Oracle;
use crate::trajectories::{Dataset, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Confounded,
    Oracle,
    Deconfounded,
    TimeInvViolated,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::Confounded,
        Scenario::Oracle,
        Scenario::Deconfounded,
        Scenario::TimeInvViolated,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Scenario::Confounded => "confounded",
            Scenario::Oracle => "oracle",
            Scenario::Deconfounded => "deconfounded",
            Scenario::TimeInvViolated => "time_inv_violated",
        }
    }

    pub fn extra(self) -> Extra {
        match self {
            Scenario::Confounded => Extra::None,
            Scenario::Oracle => Extra::UTrue,
            Scenario::Deconfounded | Scenario::TimeInvViolated => Extra::ZHat,
        }
    }

    pub fn needs_substitute(self) -> bool {
        self.extra() == Extra::ZHat
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Scenario> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown scenario `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extra {
    None,
    UTrue,
    ZHat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub history_window: usize,
    /// Include the `history_window` treatments that precede `a_t`.
    pub include_treatment_history: bool,
    pub extra: Extra,
}

impl FeatureSpec {
    pub fn for_scenario(scenario: Scenario, history_window: usize) -> FeatureSpec {
        FeatureSpec {
            history_window,
            include_treatment_history: true,
            extra: scenario.extra(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.history_window < 1 {
            return Err(Error::Config("history_window must be at least 1".into()));
        }
        Ok(())
    }

    /// Number of features for `k` covariates and a latent of width `q`.
    pub fn width(&self, k: usize, q: usize) -> usize {
        let h = self.history_window;
        let hist = if self.include_treatment_history { h } else { 0 };
        let extra = match self.extra {
            Extra::None => 0,
            Extra::UTrue => 1,
            Extra::ZHat => q,
        };
        1 + h * k + hist + 1 + extra
    }

    /// Column of `a_t` in the feature vector.
    pub fn treatment_column(&self, k: usize) -> usize {
        let h = self.history_window;
        1 + h * k + if self.include_treatment_history { h } else { 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    Ridge,
    MsmIpw,
}

impl std::str::FromStr for OutcomeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<OutcomeKind> {
        match s {
            "ridge" => Ok(OutcomeKind::Ridge),
            "msm_ipw" => Ok(OutcomeKind::MsmIpw),
            _ => Err(Error::Config(format!("unknown outcome kind `{s}`"))),
        }
    }
}

/// Logistic coefficients of the stabilized-weight numerator `p(a_t | a_{t-1})` and
/// denominator `p(a_t | a_{t-1}, x_t, extra)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Propensity {
    pub numerator: Vec<f64>,
    pub denominator: Vec<f64>,
    /// Truncation bounds applied to the cumulative weights.
    pub clip: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModel {
    pub kind: OutcomeKind,
    pub scenario: Scenario,
    pub weights: Vec<f64>,
    pub feature_spec: FeatureSpec,
    pub ridge_lambda: f64,
    pub propensity: Option<Propensity>,
}

impl OutcomeModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).map_err(|e| Error::Schema(e.to_string()))?;
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<OutcomeModel> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&s).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
    }
}

fn extra_values(
    traj: &Trajectory,
    spec: &FeatureSpec,
    z_hat: Option<&[f64]>,
) -> Result<Vec<f64>> {
    match spec.extra {
        Extra::None => Ok(Vec::new()),
        Extra::UTrue => traj
            .u_true
            .map(|u| vec![u])
            .ok_or_else(|| Error::invariant(&traj.id, "oracle features need u_true")),
        Extra::ZHat => z_hat
            .map(<[f64]>::to_vec)
            .ok_or_else(|| Error::invariant(&traj.id, "deconfounded features need a substitute")),
    }
}

/// Feature vector for step `t` (0-based) with the treatment at `t` set to `a_t`.
///
/// Covariates and treatments before the first step are zero.
pub fn build_features(
    traj: &Trajectory,
    t: usize,
    a_t: u8,
    spec: &FeatureSpec,
    z_hat: Option<&[f64]>,
) -> Result<Vec<f64>> {
    if t >= traj.len() {
        return Err(Error::Dimension(format!(
            "step {t} beyond trajectory `{}` of length {}",
            traj.id,
            traj.len()
        )));
    }
    let h = spec.history_window;
    let k = traj.covariate_dim();
    let extra = extra_values(traj, spec, z_hat)?;
    let mut f = Vec::with_capacity(spec.width(k, extra.len()));
    f.push(1.0);
    for lag in (0..h).rev() {
        match t.checked_sub(lag) {
            Some(s) => f.extend_from_slice(&traj.x[s]),
            None => f.extend(std::iter::repeat(0.0).take(k)),
        }
    }
    if spec.include_treatment_history {
        for lag in (1..=h).rev() {
            f.push(t.checked_sub(lag).map_or(0.0, |s| f64::from(traj.a[s])));
        }
    }
    f.push(f64::from(a_t));
    f.extend(extra);
    Ok(f)
}

fn z_hat_for<'a>(
    spec: &FeatureSpec,
    substitutes: Option<&'a BTreeMap<String, SubstitutePosterior>>,
    id: &str,
) -> Result<Option<&'a [f64]>> {
    if spec.extra != Extra::ZHat {
        return Ok(None);
    }
    let subs = substitutes
        .ok_or_else(|| Error::Config("deconfounded scenario requires substitutes".into()))?;
    subs.get(id)
        .map(|p| Some(p.mean.as_slice()))
        .ok_or_else(|| Error::invariant(id, "no substitute posterior"))
}

/// Solves `(XᵀWX + λ P) β = XᵀWy` where `P` penalizes every column but the bias.
pub fn weighted_ridge(
    rows: &[Vec<f64>],
    y: &[f64],
    w: Option<&[f64]>,
    lambda: f64,
) -> Result<Vec<f64>> {
    let p = rows.first().map_or(0, Vec::len);
    let mut xtx = DMatrix::<f64>::zeros(p, p);
    let mut xty = DVector::<f64>::zeros(p);
    for (i, r) in rows.iter().enumerate() {
        let wi = w.map_or(1.0, |w| w[i]);
        for a in 0..p {
            let ra = wi * r[a];
            xty[a] += ra * y[i];
            for b in 0..=a {
                xtx[(a, b)] += ra * r[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            xtx[(b, a)] = xtx[(a, b)];
        }
        if a > 0 {
            xtx[(a, a)] += lambda;
        }
    }
    let chol = xtx.clone().cholesky().ok_or_else(|| {
        Error::Singular(format!(
            "normal equations are not positive definite; ridge_lambda={lambda} is too small"
        ))
    })?;
    let mut beta = chol.solve(&xty);
    // One step of iterative refinement.
    let resid = &xty - &xtx * &beta;
    beta += chol.solve(&resid);
    Ok(beta.iter().copied().collect())
}

fn logistic_fit(rows: &[Vec<f64>], labels: &[u8]) -> Vec<f64> {
    let p = rows[0].len();
    let n = rows.len() as f64;
    let mut beta = vec![0.0; p];
    let mut opt = Adam::new(p, 0.05);
    let l2 = 1e-4;
    for _ in 0..1500 {
        let mut grad = vec![0.0; p];
        for (r, &y) in rows.iter().zip(labels) {
            let eta: f64 = r.iter().zip(&beta).map(|(a, b)| a * b).sum();
            let resid = sigmoid(eta) - f64::from(y);
            for (g, v) in grad.iter_mut().zip(r) {
                *g += resid * v / n;
            }
        }
        for (g, b) in grad.iter_mut().zip(&beta) {
            *g += l2 * b;
        }
        opt.descend(&mut beta, &grad);
    }
    beta
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn propensity_rows(
    traj: &Trajectory,
    t: usize,
    extra: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let prev = f64::from(traj.a_prev(t));
    let num = vec![1.0, prev];
    let mut den = vec![1.0, prev];
    den.extend_from_slice(&traj.x[t]);
    den.extend_from_slice(extra);
    (num, den)
}

fn prob_of(beta: &[f64], row: &[f64], a: u8) -> f64 {
    let p = sigmoid(row.iter().zip(beta).map(|(x, b)| x * b).sum());
    if a == 1 {
        p
    } else {
        1.0 - p
    }
}

/// Untruncated stabilized weights per training row, in dataset order.
fn stabilized_weights(
    d: &Dataset,
    prop: &Propensity,
    spec: &FeatureSpec,
    substitutes: Option<&BTreeMap<String, SubstitutePosterior>>,
) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for traj in &d.trajectories {
        let extra = extra_values(traj, spec, z_hat_for(spec, substitutes, &traj.id)?)?;
        let mut cum = 1.0;
        for t in 0..traj.len() {
            let (num, den) = propensity_rows(traj, t, &extra);
            let a = traj.a[t];
            cum *= prob_of(&prop.numerator, &num, a) / prob_of(&prop.denominator, &den, a).max(1e-12);
            out.push(cum);
        }
    }
    Ok(out)
}

/// Stabilized IPW weights after percentile truncation, one per (patient, step) row.
pub fn ipw_weights(
    m: &OutcomeModel,
    d: &Dataset,
    substitutes: Option<&BTreeMap<String, SubstitutePosterior>>,
) -> Result<Vec<f64>> {
    let prop = m
        .propensity
        .as_ref()
        .ok_or_else(|| Error::Config("model has no propensity component".into()))?;
    let raw = stabilized_weights(d, prop, &m.feature_spec, substitutes)?;
    Ok(raw.iter().map(|w| w.clamp(prop.clip.0, prop.clip.1)).collect())
}

pub fn fit_outcome(
    d: &Dataset,
    spec: &FeatureSpec,
    scenario: Scenario,
    kind: OutcomeKind,
    ridge_lambda: f64,
    substitutes: Option<&BTreeMap<String, SubstitutePosterior>>,
) -> Result<OutcomeModel> {
    spec.validate()?;
    if spec.extra != scenario.extra() {
        return Err(Error::Config(format!(
            "feature spec extra {:?} does not match scenario {}",
            spec.extra,
            scenario.tag()
        )));
    }
    if !(ridge_lambda >= 0.0 && ridge_lambda.is_finite()) {
        return Err(Error::Config("ridge_lambda must be finite and non-negative".into()));
    }
    if d.is_empty() {
        return Err(Error::InsufficientData("no training trajectories".into()));
    }
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for traj in &d.trajectories {
        let z = z_hat_for(spec, substitutes, &traj.id)?;
        for t in 0..traj.len() {
            rows.push(build_features(traj, t, traj.a[t], spec, z)?);
            y.push(traj.y[t]);
        }
    }

    let propensity = match kind {
        OutcomeKind::Ridge => None,
        OutcomeKind::MsmIpw => {
            let mut num_rows = Vec::new();
            let mut den_rows = Vec::new();
            let mut labels = Vec::new();
            for traj in &d.trajectories {
                let extra = extra_values(traj, spec, z_hat_for(spec, substitutes, &traj.id)?)?;
                for t in 0..traj.len() {
                    let (num, den) = propensity_rows(traj, t, &extra);
                    num_rows.push(num);
                    den_rows.push(den);
                    labels.push(traj.a[t]);
                }
            }
            let mut prop = Propensity {
                numerator: logistic_fit(&num_rows, &labels),
                denominator: logistic_fit(&den_rows, &labels),
                clip: (0.0, f64::INFINITY),
            };
            let mut raw = stabilized_weights(d, &prop, spec, substitutes)?;
            raw.sort_by(f64::total_cmp);
            prop.clip = (percentile(&raw, 0.01), percentile(&raw, 0.99));
            Some(prop)
        }
    };
    let mut model = OutcomeModel {
        kind,
        scenario,
        weights: Vec::new(),
        feature_spec: spec.clone(),
        ridge_lambda,
        propensity,
    };
    let w = match kind {
        OutcomeKind::Ridge => None,
        OutcomeKind::MsmIpw => Some(ipw_weights(&model, d, substitutes)?),
    };
    model.weights = weighted_ridge(&rows, &y, w.as_deref(), ridge_lambda)?;
    if model.weights.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("non-finite regression weights".into()));
    }
    Ok(model)
}

/// Predicted outcome after setting the treatment at step `t` to `a_t`.
pub fn predict_response(
    m: &OutcomeModel,
    traj: &Trajectory,
    t: usize,
    a_t: u8,
    z_hat: Option<&[f64]>,
) -> Result<f64> {
    let f = build_features(traj, t, a_t, &m.feature_spec, z_hat)?;
    if f.len() != m.weights.len() {
        return Err(Error::Dimension(format!(
            "{} features for a model with {} weights",
            f.len(),
            m.weights.len()
        )));
    }
    Ok(f.iter().zip(&m.weights).map(|(a, b)| a * b).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MseReport {
    /// Over both treatment arms at every test step.
    pub mse: f64,
    /// Over the factual arm only.
    pub mse_factual: f64,
    pub n_rows: usize,
}

fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        v.iter().sum()
    } else {
        let (a, b) = v.split_at(v.len() / 2);
        pairwise_sum(a) + pairwise_sum(b)
    }
}

/// Squared error against simulator potential outcomes under both arms.
pub fn evaluate_mse(
    m: &OutcomeModel,
    test: &Dataset,
    oracle: &Oracle,
    substitutes: Option<&BTreeMap<String, SubstitutePosterior>>,
) -> Result<MseReport> {
    evaluate_with(test, oracle, |traj, t, a| {
        let z = z_hat_for(&m.feature_spec, substitutes, &traj.id)?;
        predict_response(m, traj, t, a, z)
    })
}

/// Squared error of an arbitrary predictor `(trajectory, step, treatment) -> outcome`.
pub fn evaluate_with<F>(test: &Dataset, oracle: &Oracle, mut predict: F) -> Result<MseReport>
where
    F: FnMut(&Trajectory, usize, u8) -> Result<f64>,
{
    let mut both = Vec::new();
    let mut factual = Vec::new();
    for traj in &test.trajectories {
        let po = oracle.patient(&traj.id)?;
        if po.horizon() != traj.len() {
            return Err(Error::invariant(&traj.id, "oracle horizon differs from trajectory"));
        }
        let mut hist = Vec::with_capacity(traj.len());
        for t in 0..traj.len() {
            hist.push(traj.a[t]);
            for a in [0u8, 1] {
                *hist.last_mut().expect("pushed") = a;
                let truth = oracle.potential_outcome(&traj.id, &hist)?;
                let err = (predict(traj, t, a)? - truth).powi(2);
                both.push(err);
                if a == traj.a[t] {
                    factual.push(err);
                }
            }
            *hist.last_mut().expect("pushed") = traj.a[t];
        }
    }
    if both.is_empty() {
        return Err(Error::InsufficientData("empty test set".into()));
    }
    Ok(MseReport {
        mse: pairwise_sum(&both) / both.len() as f64,
        mse_factual: pairwise_sum(&factual) / factual.len() as f64,
        n_rows: both.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj() -> Trajectory {
        Trajectory {
            id: "p".into(),
            x: vec![vec![0.1, 0.2], vec![0.3, 0.4], vec![0.5, 0.6]],
            a: vec![1, 0, 1],
            y: vec![0.0, 0.1, 0.2],
            u_true: Some(0.07),
        }
    }

    #[test]
    fn minimal_confounded_features() {
        let spec = FeatureSpec {
            history_window: 1,
            include_treatment_history: false,
            extra: Extra::None,
        };
        let f = build_features(&traj(), 2, 1, &spec, None).unwrap();
        assert_eq!(f, vec![1.0, 0.5, 0.6, 1.0]);
        assert_eq!(spec.treatment_column(2), 3);
    }

    #[test]
    fn oracle_appends_u() {
        let c = FeatureSpec::for_scenario(Scenario::Confounded, 3);
        let o = FeatureSpec::for_scenario(Scenario::Oracle, 3);
        let fc = build_features(&traj(), 1, 0, &c, None).unwrap();
        let mut fo = build_features(&traj(), 1, 0, &o, None).unwrap();
        assert_eq!(fo.pop(), Some(0.07));
        assert_eq!(fc, fo);
    }

    #[test]
    fn zero_padding_at_first_step() {
        let spec = FeatureSpec::for_scenario(Scenario::Deconfounded, 3);
        let f = build_features(&traj(), 0, 1, &spec, Some(&[-0.4])).unwrap();
        let manual = vec![
            1.0, // bias
            0.0, 0.0, 0.0, 0.0, 0.1, 0.2, // x_{-2}, x_{-1}, x_0
            0.0, 0.0, 0.0, // three preceding treatments
            1.0,  // a_0
            -0.4, // z_hat
        ];
        assert_eq!(f, manual);
        assert_eq!(f.len(), spec.width(2, 1));
    }

    #[test]
    fn missing_extras_are_errors() {
        let spec = FeatureSpec::for_scenario(Scenario::Deconfounded, 2);
        assert!(build_features(&traj(), 1, 1, &spec, None).is_err());
        let mut t = traj();
        t.u_true = None;
        let spec = FeatureSpec::for_scenario(Scenario::Oracle, 2);
        assert!(build_features(&t, 1, 1, &spec, None).is_err());
    }

    #[test]
    fn scenario_tags_round_trip() {
        for s in Scenario::ALL {
            assert_eq!(s.tag().parse::<Scenario>().unwrap(), s);
        }
        assert!("nope".parse::<Scenario>().is_err());
    }

    #[test]
    fn ridge_recovers_exact_linear_map() {
        let truth = [0.3, -1.2, 0.8, 2.0];
        let mut rng = crate::rng::stream(5, 0);
        use rand::Rng;
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|_| {
                let mut r = vec![1.0];
                r.extend((0..3).map(|_| rng.gen_range(-1.0..1.0)));
                r
            })
            .collect();
        let y: Vec<f64> = rows
            .iter()
            .map(|r| r.iter().zip(&truth).map(|(a, b)| a * b).sum())
            .collect();
        let w = weighted_ridge(&rows, &y, None, 1e-8).unwrap();
        for (a, b) in w.iter().zip(&truth) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn ridge_singular_without_penalty() {
        let rows = vec![vec![1.0, 2.0, 2.0], vec![1.0, 1.0, 1.0], vec![1.0, 0.0, 0.0]];
        let err = weighted_ridge(&rows, &[1.0, 2.0, 3.0], None, 0.0).unwrap_err();
        assert!(err.to_string().contains("ridge_lambda"));
    }
}
