//! Log-space product of experts, posthoc prior swaps, and exact oracle
//! experts built from a known Gaussian mixture.
//!
//! An expert trained for exponent λ scores `log P(x|y) + log p^λ(y)` up to a
//! per-x constant. Averaging such experts in log space gives an ensemble that
//! targets `p^λ̄` with λ̄ the mean exponent, so λ̄ = 0 yields the balanced
//! Bayes rule.

use serde::{Deserialize, Serialize};

use crate::data::{bayes_posterior, GaussianMixture};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numeric::{argmax, log_softmax, max_abs_diff, softmax, Matrix};
use crate::par;
use crate::priors::{lambda_prior, EnsembleSpec, LabelDistribution, LambdaVector};

/// Rows per parallel work item when scoring a dataset.
const SCORE_CHUNK: usize = 1024;

/// Componentwise mean of the expert logits.
pub fn combine(expert_logits: &[&[f64]]) -> Result<Vec<f64>> {
    let first = expert_logits
        .first()
        .ok_or_else(|| Error::invalid("expert_logits", "no experts"))?;
    let c = first.len();
    if expert_logits.iter().any(|l| l.len() != c) {
        return Err(Error::invalid(
            "expert_logits",
            "experts disagree on class count",
        ));
    }
    let k = expert_logits.len() as f64;
    Ok((0..c)
        .map(|y| expert_logits.iter().map(|l| l[y]).sum::<f64>() / k)
        .collect())
}

/// `logits + log p_to - log p_from`.
pub fn posthoc_adjust(
    logits: &[f64],
    p_from: &LabelDistribution,
    p_to: &LabelDistribution,
) -> Result<Vec<f64>> {
    if p_from.num_classes() != logits.len() || p_to.num_classes() != logits.len() {
        return Err(Error::invalid("prior", "class count does not match logits"));
    }
    Ok(logits
        .iter()
        .zip(p_from.probs().iter().zip(p_to.probs()))
        .map(|(f, (a, b))| f + b.ln() - a.ln())
        .collect())
}

/// An expert whose training scores equal the exact training posterior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleScorer {
    pub mixture: GaussianMixture,
    pub lambda: LambdaVector,
}

/// `f^λ_y(x) = s_y(x) - log p(y) + λ_y log p(y)` with `s = log P_train(y|x)`.
pub fn oracle_expert_logits(scorer: &OracleScorer, x: &[f64]) -> Vec<f64> {
    let prior = scorer.mixture.prior();
    let lp = prior.log_probs();
    let joint: Vec<f64> = scorer
        .mixture
        .log_likelihoods(x)
        .iter()
        .zip(&lp)
        .map(|(ll, p)| ll + p)
        .collect();
    log_softmax(&joint)
        .iter()
        .zip(&lp)
        .zip(scorer.lambda.values())
        .map(|((s, p), l)| s - p + l * p)
        .collect()
}

/// Largest componentwise gap between the normalized oracle ensemble and the
/// exact posterior under `p^λ̄` over all `points`.
pub fn verify_theorem1(
    mixture: &GaussianMixture,
    lambdas: &[LambdaVector],
    points: &Matrix,
) -> Result<f64> {
    if points.rows() == 0 {
        return Err(Error::invalid("points", "no sample points"));
    }
    let spec = crate::priors::make_ensemble_spec(lambdas.to_vec())?;
    let oracle = OracleEnsemble::new(mixture.clone(), spec)?;
    let reference_prior = oracle.native_prior().clone();
    let devs = par::map_range(points.rows(), |i| {
        let x = points.row(i);
        let combined = oracle.combined_point(x);
        let reference = bayes_posterior(mixture, x, Some(&reference_prior));
        max_abs_diff(&softmax(&combined), &reference)
    });
    Ok(devs.into_iter().fold(0.0, f64::max))
}

/// Anything that produces per-expert logits for a batch of inputs.
pub trait Scorer: Sync {
    fn num_classes(&self) -> usize;

    fn ensemble(&self) -> &EnsembleSpec;

    /// The label prior targeted by the combined logits, `p^λ̄`.
    fn native_prior(&self) -> &LabelDistribution;

    /// One `N×C` matrix per expert.
    fn expert_logits(&self, features: &Matrix) -> Result<Vec<Matrix>>;

    /// Log-space mean over experts, `N×C`.
    fn combined_logits(&self, features: &Matrix) -> Result<Matrix> {
        let per = self.expert_logits(features)?;
        mean_of(&per)
    }
}

fn mean_of(per: &[Matrix]) -> Result<Matrix> {
    let first = per
        .first()
        .ok_or_else(|| Error::invalid("expert_logits", "no experts"))?;
    let (n, c) = (first.rows(), first.cols());
    let mut out = Matrix::zeros(n, c);
    for i in 0..n {
        let rows: Vec<&[f64]> = per.iter().map(|m| m.row(i)).collect();
        out.row_mut(i).copy_from_slice(&combine(&rows)?);
    }
    Ok(out)
}

/// Argmax of the combined logits, optionally retargeted from the scorer's
/// native prior onto `target`. Ties go to the lowest class index.
pub fn predict<S: Scorer + ?Sized>(
    scorer: &S,
    features: &Matrix,
    target: Option<&LabelDistribution>,
) -> Result<Vec<usize>> {
    let logits = scorer.combined_logits(features)?;
    predict_from_logits(&logits, scorer.native_prior(), target)
}

pub fn predict_from_logits(
    logits: &Matrix,
    native: &LabelDistribution,
    target: Option<&LabelDistribution>,
) -> Result<Vec<usize>> {
    logits
        .iter_rows()
        .map(|row| match target {
            Some(t) => posthoc_adjust(row, native, t).map(|a| argmax(&a)),
            None => Ok(argmax(row)),
        })
        .collect()
}

/// Exact experts for every λ in an ensemble spec.
#[derive(Debug, Clone)]
pub struct OracleEnsemble {
    mixture: GaussianMixture,
    spec: EnsembleSpec,
    experts: Vec<OracleScorer>,
    native: LabelDistribution,
}

impl OracleEnsemble {
    pub fn new(mixture: GaussianMixture, spec: EnsembleSpec) -> Result<Self> {
        if spec.num_classes() != mixture.num_classes() {
            return Err(Error::invalid("spec", "class count differs from mixture"));
        }
        let native = lambda_prior(
            mixture.prior(),
            &LambdaVector::new(spec.lambda_bar().to_vec())?,
        )?;
        let experts = spec
            .experts()
            .iter()
            .map(|l| OracleScorer {
                mixture: mixture.clone(),
                lambda: l.clone(),
            })
            .collect();
        Ok(OracleEnsemble {
            mixture,
            spec,
            experts,
            native,
        })
    }

    pub fn mixture(&self) -> &GaussianMixture {
        &self.mixture
    }

    fn expert_point(&self, expert: usize, x: &[f64]) -> Vec<f64> {
        oracle_expert_logits(&self.experts[expert], x)
    }

    fn combined_point(&self, x: &[f64]) -> Vec<f64> {
        let per: Vec<Vec<f64>> = (0..self.spec.len())
            .map(|e| self.expert_point(e, x))
            .collect();
        let refs: Vec<&[f64]> = per.iter().map(Vec::as_slice).collect();
        combine(&refs).expect("nonempty ensemble")
    }
}

impl Scorer for OracleEnsemble {
    fn num_classes(&self) -> usize {
        self.mixture.num_classes()
    }

    fn ensemble(&self) -> &EnsembleSpec {
        &self.spec
    }

    fn native_prior(&self) -> &LabelDistribution {
        &self.native
    }

    fn expert_logits(&self, features: &Matrix) -> Result<Vec<Matrix>> {
        let n = features.rows();
        let c = self.num_classes();
        let rows = par::map_range(n, |i| {
            (0..self.spec.len())
                .map(|e| self.expert_point(e, features.row(i)))
                .collect::<Vec<_>>()
        });
        let mut out = vec![Matrix::zeros(n, c); self.spec.len()];
        for (i, per) in rows.into_iter().enumerate() {
            for (m, r) in out.iter_mut().zip(per) {
                m.row_mut(i).copy_from_slice(&r);
            }
        }
        Ok(out)
    }
}

/// A trained model together with the λ-spec and training prior it was fit with.
#[derive(Debug, Clone)]
pub struct TrainedEnsemble {
    model: Model,
    spec: EnsembleSpec,
    native: LabelDistribution,
}

impl TrainedEnsemble {
    pub fn new(model: Model, spec: EnsembleSpec, p_train: &LabelDistribution) -> Result<Self> {
        if model.shape().experts != spec.len() {
            return Err(Error::invalid(
                "model",
                "head count differs from ensemble size",
            ));
        }
        let native = lambda_prior(p_train, &LambdaVector::new(spec.lambda_bar().to_vec())?)?;
        Ok(TrainedEnsemble {
            model,
            spec,
            native,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }
}

impl Scorer for TrainedEnsemble {
    fn num_classes(&self) -> usize {
        self.model.shape().classes
    }

    fn ensemble(&self) -> &EnsembleSpec {
        &self.spec
    }

    fn native_prior(&self) -> &LabelDistribution {
        &self.native
    }

    fn expert_logits(&self, features: &Matrix) -> Result<Vec<Matrix>> {
        model_expert_logits(&self.model, features)
    }
}

/// Forward pass over a whole dataset in fixed-size parallel chunks.
pub fn model_expert_logits(model: &Model, features: &Matrix) -> Result<Vec<Matrix>> {
    let parts = par::map_chunks(features.rows(), SCORE_CHUNK, |range| {
        let idx: Vec<usize> = range.collect();
        model.forward(&features.select_rows(&idx))
    });
    let s = model.shape();
    let mut per: Vec<Vec<f64>> = vec![Vec::with_capacity(features.rows() * s.classes); s.experts];
    for part in parts {
        for (acc, m) in per.iter_mut().zip(part?) {
            acc.extend_from_slice(m.as_slice());
        }
    }
    Ok(per
        .into_iter()
        .map(|v| Matrix::from_vec(features.rows(), s.classes, v))
        .collect())
}

pub fn model_combined_logits(model: &Model, features: &Matrix) -> Result<Matrix> {
    mean_of(&model_expert_logits(model, features)?)
}
