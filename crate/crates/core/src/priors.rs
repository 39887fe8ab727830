//! Label distributions and the λ-parameterized family of target priors.
//!
//! A λ-vector reweights a training prior into `p^λ(y) ∝ p(y)^λ_y`: λ = 1 keeps
//! the long tail, λ = 0 is uniform and λ = -1 inverts the tail. The paired
//! `τ = 1 - λ` is the per-class logit-adjustment strength used by the loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::log_sum_exp;

/// Additive smoothing applied to empirical class counts.
pub const COUNT_SMOOTHING: f64 = 1e-12;

const SUM_TOLERANCE: f64 = 1e-12;

/// A strictly positive probability vector over `C` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LabelDistribution(Vec<f64>);

impl LabelDistribution {
    /// Validates that `probs` is nonempty, strictly positive, finite and sums to one.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("probs", "empty distribution"));
        }
        if let Some((i, p)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !(p.is_finite() && **p > 0.0))
        {
            return Err(Error::invalid(
                "probs",
                format!("entry {i} = {p} is not strictly positive and finite"),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::invalid(
                "probs",
                format!("entries sum to {sum}, expected 1"),
            ));
        }
        Ok(LabelDistribution(probs))
    }

    /// Normalizes positive weights.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total.is_finite() && total > 0.0) {
            return Err(Error::invalid("weights", "total weight must be positive"));
        }
        Self::new(weights.iter().map(|w| w / total).collect())
    }

    /// Normalizes log-weights with a max-subtraction stabilizer.
    pub fn from_log_weights(log_w: &[f64]) -> Result<Self> {
        if log_w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericRange("log-weight is not finite".to_string()));
        }
        let lse = log_sum_exp(log_w);
        let probs: Vec<f64> = log_w.iter().map(|v| (v - lse).exp()).collect();
        if probs.iter().any(|p| *p <= 0.0) {
            return Err(Error::NumericRange(
                "class probability underflows to zero".to_string(),
            ));
        }
        // renormalize so the sum is exact to within rounding
        let s: f64 = probs.iter().sum();
        Self::new(probs.into_iter().map(|p| p / s).collect())
    }

    /// Empirical prior from class counts with `COUNT_SMOOTHING` added to every class.
    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        let w: Vec<f64> = counts.iter().map(|&n| n as f64 + COUNT_SMOOTHING).collect();
        Self::from_weights(&w)
    }

    pub fn uniform(classes: usize) -> Result<Self> {
        if classes == 0 {
            return Err(Error::invalid("classes", "must be at least 1"));
        }
        Ok(LabelDistribution(vec![1.0 / classes as f64; classes]))
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn log_probs(&self) -> Vec<f64> {
        self.0.iter().map(|p| p.ln()).collect()
    }

    /// Same distribution with the class order flipped.
    pub fn reversed(&self) -> Self {
        let mut v = self.0.clone();
        v.reverse();
        LabelDistribution(v)
    }
}

impl TryFrom<Vec<f64>> for LabelDistribution {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        LabelDistribution::new(v)
    }
}

impl From<LabelDistribution> for Vec<f64> {
    fn from(d: LabelDistribution) -> Self {
        d.0
    }
}

/// Per-class exponents λ. `tau()` gives the matching adjustment strengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LambdaVector(Vec<f64>);

impl LambdaVector {
    pub fn new(lambda: Vec<f64>) -> Result<Self> {
        if lambda.is_empty() {
            return Err(Error::invalid("lambda", "empty vector"));
        }
        if lambda.iter().any(|l| !l.is_finite()) {
            return Err(Error::invalid("lambda", "entries must be finite"));
        }
        Ok(LambdaVector(lambda))
    }

    pub fn constant(classes: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; classes])
    }

    pub fn from_tau(tau: &[f64]) -> Result<Self> {
        Self::new(tau.iter().map(|t| 1.0 - t).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn tau(&self) -> Vec<f64> {
        self.0.iter().map(|l| 1.0 - l).collect()
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Adds `delta` to every entry.
    pub fn shifted(&self, delta: f64) -> Self {
        LambdaVector(self.0.iter().map(|l| l + delta).collect())
    }
}

impl TryFrom<Vec<f64>> for LambdaVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        LambdaVector::new(v)
    }
}

impl From<LambdaVector> for Vec<f64> {
    fn from(l: LambdaVector) -> Self {
        l.0
    }
}

/// The multiset of expert λ-vectors and their componentwise mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    experts: Vec<LambdaVector>,
    lambda_bar: Vec<f64>,
}

impl EnsembleSpec {
    pub fn experts(&self) -> &[LambdaVector] {
        &self.experts
    }

    pub fn lambda_bar(&self) -> &[f64] {
        &self.lambda_bar
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.lambda_bar.len()
    }

    /// Shifts every expert by `delta`, which shifts λ̄ by the same amount.
    pub fn shifted(&self, delta: f64) -> Self {
        make_ensemble_spec(self.experts.iter().map(|e| e.shifted(delta)).collect())
            .expect("shifting preserves validity")
    }
}

/// Imbalance profile `p_i ∝ rho^(-i/(C-1))`, so `p_0 / p_{C-1} = rho`.
pub fn lt_exponential_prior(classes: usize, rho: f64) -> Result<LabelDistribution> {
    if classes == 0 {
        return Err(Error::invalid("classes", "must be at least 1"));
    }
    if !(rho.is_finite() && rho >= 1.0) {
        return Err(Error::invalid("rho", format!("{rho} must be >= 1")));
    }
    if classes == 1 {
        return LabelDistribution::new(vec![1.0]);
    }
    let denom = (classes - 1) as f64;
    let log_w: Vec<f64> = (0..classes)
        .map(|i| -(i as f64) / denom * rho.ln())
        .collect();
    LabelDistribution::from_log_weights(&log_w)
}

/// Ranked power-law profile `p_i ∝ (i+1)^(-1/alpha)`.
pub fn pareto_prior(classes: usize, alpha: f64) -> Result<LabelDistribution> {
    if classes == 0 {
        return Err(Error::invalid("classes", "must be at least 1"));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::invalid("alpha", format!("{alpha} must be > 0")));
    }
    let log_w: Vec<f64> = (0..classes)
        .map(|i| -((i + 1) as f64).ln() / alpha)
        .collect();
    LabelDistribution::from_log_weights(&log_w)
}

/// `p^λ(y) = p(y)^λ_y / Σ_j p(j)^λ_j`, evaluated in log space.
pub fn lambda_prior(p_train: &LabelDistribution, lam: &LambdaVector) -> Result<LabelDistribution> {
    check_dims(p_train.num_classes(), lam.dim(), "lambda")?;
    let log_w: Vec<f64> = p_train
        .probs()
        .iter()
        .zip(lam.values())
        .map(|(p, l)| l * p.ln())
        .collect();
    LabelDistribution::from_log_weights(&log_w)
}

/// Pairwise margins `Δ[y][j] = τ_j log p_j - τ_y log p_y`.
pub fn margin_matrix(p_train: &LabelDistribution, tau: &[f64]) -> Result<Vec<Vec<f64>>> {
    check_dims(p_train.num_classes(), tau.len(), "tau")?;
    let bias: Vec<f64> = p_train
        .probs()
        .iter()
        .zip(tau)
        .map(|(p, t)| t * p.ln())
        .collect();
    Ok(bias
        .iter()
        .map(|by| bias.iter().map(|bj| bj - by).collect())
        .collect())
}

/// Per-class log-ratio `log(p_test / p_train)`: the additive bias that moves a
/// calibrated training posterior onto `p_test`.
pub fn target_lambda_bar(
    p_train: &LabelDistribution,
    p_test: &LabelDistribution,
) -> Result<Vec<f64>> {
    check_dims(p_train.num_classes(), p_test.num_classes(), "p_test")?;
    Ok(p_train
        .probs()
        .iter()
        .zip(p_test.probs())
        .map(|(p, q)| (q / p).ln())
        .collect())
}

/// The exponent vector λ with `lambda_prior(p_train, λ) == p_test` exactly,
/// i.e. `λ_y = log q_y / log p_y`. Undefined when some `p_train(y) == 1`.
pub fn exponent_lambda_for_target(
    p_train: &LabelDistribution,
    p_test: &LabelDistribution,
) -> Result<LambdaVector> {
    check_dims(p_train.num_classes(), p_test.num_classes(), "p_test")?;
    let lam: Vec<f64> = p_train
        .probs()
        .iter()
        .zip(p_test.probs())
        .map(|(p, q)| q.ln() / p.ln())
        .collect();
    LambdaVector::new(lam).map_err(|_| {
        Error::invalid(
            "p_train",
            "a class with probability 1 has no exponent representation",
        )
    })
}

pub fn make_ensemble_spec(lambdas: Vec<LambdaVector>) -> Result<EnsembleSpec> {
    let first = lambdas
        .first()
        .ok_or_else(|| Error::invalid("lambdas", "at least one expert is required"))?;
    let dim = first.dim();
    if let Some(bad) = lambdas.iter().find(|l| l.dim() != dim) {
        return Err(Error::invalid(
            "lambdas",
            format!("dimension mismatch: {} vs {}", bad.dim(), dim),
        ));
    }
    let k = lambdas.len() as f64;
    let lambda_bar = (0..dim)
        .map(|c| lambdas.iter().map(|l| l.values()[c]).sum::<f64>() / k)
        .collect();
    Ok(EnsembleSpec {
        experts: lambdas,
        lambda_bar,
    })
}

/// Convenience: one constant λ-vector per scalar.
pub fn ensemble_from_scalars(classes: usize, lambdas: &[f64]) -> Result<EnsembleSpec> {
    let v = lambdas
        .iter()
        .map(|&l| LambdaVector::constant(classes, l))
        .collect::<Result<Vec<_>>>()?;
    make_ensemble_spec(v)
}

fn check_dims(expected: usize, got: usize, arg: &'static str) -> Result<()> {
    if expected != got {
        return Err(Error::invalid(
            arg,
            format!("expected {expected} classes, got {got}"),
        ));
    }
    Ok(())
}
