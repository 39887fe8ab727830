//! Softmax cross-entropy and the generalized logit-adjusted loss.
//!
//! The adjusted loss is the cross-entropy of `f + τ ⊙ log p_train`; with τ = 0
//! it is plain CE and with τ = 1 it is the balanced softmax.

use crate::error::{Error, Result};
use crate::numeric::{log_softmax, log_sum_exp, lse_parts, softmax};
use crate::priors::EnsembleSpec;

/// `-Σ_y target_y log softmax(logits)_y`.
pub fn ce_loss(logits: &[f64], target: &[f64]) -> f64 {
    let (m, r) = lse_parts(logits);
    target
        .iter()
        .zip(logits)
        .filter(|(t, _)| **t != 0.0)
        .map(|(t, l)| t * ((m - l) + r))
        .sum()
}

pub fn adjusted_logits(logits: &[f64], tau: &[f64], log_prior: &[f64]) -> Vec<f64> {
    logits
        .iter()
        .zip(tau.iter().zip(log_prior))
        .map(|(f, (t, lp))| f + t * lp)
        .collect()
}

pub fn gla_loss(logits: &[f64], target: &[f64], tau: &[f64], log_prior: &[f64]) -> f64 {
    ce_loss(&adjusted_logits(logits, tau, log_prior), target)
}

/// The same loss written with pairwise margins,
/// `Σ_y t_y log(1 + Σ_{j≠y} exp(f_j - f_y + Δ_yj))`.
pub fn gla_loss_pairwise(logits: &[f64], target: &[f64], tau: &[f64], log_prior: &[f64]) -> f64 {
    let bias: Vec<f64> = tau.iter().zip(log_prior).map(|(t, lp)| t * lp).collect();
    let mut total = 0.0;
    for (y, &ty) in target.iter().enumerate() {
        if ty == 0.0 {
            continue;
        }
        // log(1 + Σ e^{a_j}) = logsumexp([0, a_j...])
        let mut terms = Vec::with_capacity(logits.len());
        terms.push(0.0);
        for j in (0..logits.len()).filter(|&j| j != y) {
            let margin = bias[j] - bias[y];
            terms.push(logits[j] - logits[y] + margin);
        }
        total += ty * log_sum_exp(&terms);
    }
    total
}

/// `softmax(f + τ ⊙ log p) - target`.
pub fn gla_grad(logits: &[f64], target: &[f64], tau: &[f64], log_prior: &[f64]) -> Vec<f64> {
    softmax(&adjusted_logits(logits, tau, log_prior))
        .into_iter()
        .zip(target)
        .map(|(p, t)| p - t)
        .collect()
}

/// Loss and gradient in one pass.
pub(crate) fn gla_loss_and_grad(
    logits: &[f64],
    target: &[f64],
    tau: &[f64],
    log_prior: &[f64],
) -> (f64, Vec<f64>) {
    let adj = adjusted_logits(logits, tau, log_prior);
    let lsm = log_softmax(&adj);
    let loss = target
        .iter()
        .zip(&lsm)
        .filter(|(t, _)| **t != 0.0)
        .map(|(t, l)| -t * l)
        .sum();
    let grad = lsm.iter().zip(target).map(|(l, t)| l.exp() - t).collect();
    (loss, grad)
}

/// Mean over experts of each expert's adjusted loss with `τ = 1 - λ`.
pub fn total_loss(
    expert_logits: &[&[f64]],
    target: &[f64],
    ensemble: &EnsembleSpec,
    log_prior: &[f64],
) -> Result<f64> {
    if expert_logits.len() != ensemble.len() {
        return Err(Error::invalid(
            "expert_logits",
            format!(
                "{} experts for an ensemble of {}",
                expert_logits.len(),
                ensemble.len()
            ),
        ));
    }
    let sum: f64 = expert_logits
        .iter()
        .zip(ensemble.experts())
        .map(|(f, lam)| gla_loss(f, target, &lam.tau(), log_prior))
        .sum();
    Ok(sum / ensemble.len() as f64)
}
