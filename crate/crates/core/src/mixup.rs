//! Mixup: Beta-weighted convex combinations of sample pairs and their labels.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixupConfig {
    pub enabled: bool,
    pub alpha: f64,
}

impl Default for MixupConfig {
    fn default() -> Self {
        MixupConfig {
            enabled: true,
            alpha: 0.4,
        }
    }
}

impl MixupConfig {
    pub fn disabled() -> Self {
        MixupConfig {
            enabled: false,
            alpha: 0.4,
        }
    }

    pub fn with_alpha(alpha: f64) -> Self {
        MixupConfig {
            enabled: true,
            alpha,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.enabled && !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::invalid(
                "mixup.alpha",
                "must be > 0 when mixup is enabled",
            ));
        }
        Ok(())
    }
}

/// Mixed features, soft labels, and the pairing that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedBatch {
    pub features: Matrix,
    pub soft_labels: Matrix,
    pub xi: Vec<f64>,
    /// Row `i` mixes batch rows `i` and `partner[i]`.
    pub partner: Vec<usize>,
}

/// One draw from Beta(alpha, alpha) as `G1 / (G1 + G2)` with `Gi ~ Gamma(alpha, 1)`.
pub fn beta_sample<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::invalid("alpha", format!("{alpha} must be > 0")));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::invalid("alpha", e.to_string()))?;
    loop {
        let g1 = gamma.sample(rng);
        let g2 = gamma.sample(rng);
        let s = g1 + g2;
        // both draws can underflow to 0 for very small alpha
        if s > 0.0 {
            return Ok(g1 / s);
        }
    }
}

/// Mixes the batch against a uniformly random permutation of itself, one ξ per row.
pub fn mix_batch<R: Rng + ?Sized>(
    features: &Matrix,
    labels: &[usize],
    classes: usize,
    cfg: &MixupConfig,
    rng: &mut R,
) -> Result<MixedBatch> {
    cfg.validate()?;
    let b = labels.len();
    if b == 0 || features.rows() != b {
        return Err(Error::invalid(
            "labels",
            "batch must be nonempty and match features",
        ));
    }
    if !cfg.enabled {
        let partner: Vec<usize> = (0..b).collect();
        return Ok(assemble(features, labels, classes, &partner, vec![1.0; b]));
    }
    let mut partner: Vec<usize> = (0..b).collect();
    partner.shuffle(rng);
    let xi = (0..b)
        .map(|_| beta_sample(cfg.alpha, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(features, labels, classes, &partner, xi))
}

/// Builds the mixed batch for a given pairing and coefficients.
pub fn assemble(
    features: &Matrix,
    labels: &[usize],
    classes: usize,
    partner: &[usize],
    xi: Vec<f64>,
) -> MixedBatch {
    let b = labels.len();
    let d = features.cols();
    let mut mixed = Matrix::zeros(b, d);
    let mut soft = Matrix::zeros(b, classes);
    for i in 0..b {
        let j = partner[i];
        let w = xi[i];
        let (xa, xb) = (features.row(i), features.row(j));
        for (out, (a, bb)) in mixed.row_mut(i).iter_mut().zip(xa.iter().zip(xb)) {
            *out = if w == 1.0 { *a } else { w * a + (1.0 - w) * bb };
        }
        let row = soft.row_mut(i);
        row[labels[i]] += w;
        row[labels[j]] += 1.0 - w;
    }
    MixedBatch {
        features: mixed,
        soft_labels: soft,
        xi,
        partner: partner.to_vec(),
    }
}
