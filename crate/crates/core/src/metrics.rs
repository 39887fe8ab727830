//! Balanced error, calibration error and label-marginal diagnostics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{group_partition, resample_shifted, Dataset, GroupPartition};
use crate::ensemble::{predict_from_logits, Scorer};
use crate::error::{Error, Result};
use crate::numeric::{argmax, softmax, Matrix};
use crate::priors::{lambda_prior, LabelDistribution};

pub const DEFAULT_BINS: usize = 15;

/// Mean over classes present in `labels` of the per-class error rate.
pub fn balanced_error(predictions: &[usize], labels: &[usize], classes: usize) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::invalid("labels", "empty input"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::invalid("predictions", "length differs from labels"));
    }
    let mut total = vec![0usize; classes];
    let mut wrong = vec![0usize; classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if y >= classes {
            return Err(Error::invalid("labels", format!("label {y} >= {classes}")));
        }
        total[y] += 1;
        if p != y {
            wrong[y] += 1;
        }
    }
    let rates: Vec<f64> = total
        .iter()
        .zip(&wrong)
        .filter(|(t, _)| **t > 0)
        .map(|(&t, &w)| w as f64 / t as f64)
        .collect();
    Ok(rates.iter().sum::<f64>() / rates.len() as f64)
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    hits as f64 / labels.len() as f64
}

/// Equal-width confidence bins over (0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBins {
    pub bins: Vec<ReliabilityBin>,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub low: f64,
    pub high: f64,
    pub count: usize,
    pub accuracy: f64,
    pub confidence: f64,
}

impl ReliabilityBins {
    pub fn ece(&self) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        let n = self.total as f64;
        self.bins
            .iter()
            .map(|b| b.count as f64 / n * (b.accuracy - b.confidence).abs())
            .sum()
    }

    pub fn mce(&self) -> f64 {
        self.bins
            .iter()
            .filter(|b| b.count > 0)
            .map(|b| (b.accuracy - b.confidence).abs())
            .fold(0.0, f64::max)
    }

    /// CSV with columns `bin_low,bin_high,count,accuracy,confidence`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_low,bin_high,count,accuracy,confidence\n");
        for b in &self.bins {
            s.push_str(&format!(
                "{:?},{:?},{},{:?},{:?}\n",
                b.low, b.high, b.count, b.accuracy, b.confidence
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Bin `m` covers `(m/M, (m+1)/M]`; a confidence of exactly 0 falls in bin 0.
fn bin_index(conf: f64, m: usize) -> usize {
    let idx = (conf * m as f64).ceil() as usize;
    idx.saturating_sub(1).min(m - 1)
}

pub fn reliability(confidences: &[f64], correct: &[bool], m: usize) -> Result<ReliabilityBins> {
    if m == 0 {
        return Err(Error::invalid("bins", "must be at least 1"));
    }
    if confidences.len() != correct.len() {
        return Err(Error::invalid("correct", "length differs from confidences"));
    }
    if let Some(c) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::invalid("confidences", format!("{c} outside [0, 1]")));
    }
    let mut count = vec![0usize; m];
    let mut hits = vec![0usize; m];
    let mut conf_sum = vec![0.0; m];
    for (&c, &ok) in confidences.iter().zip(correct) {
        let b = bin_index(c, m);
        count[b] += 1;
        conf_sum[b] += c;
        if ok {
            hits[b] += 1;
        }
    }
    let bins = (0..m)
        .map(|b| {
            let n = count[b];
            ReliabilityBin {
                low: b as f64 / m as f64,
                high: (b + 1) as f64 / m as f64,
                count: n,
                accuracy: if n > 0 {
                    hits[b] as f64 / n as f64
                } else {
                    0.0
                },
                confidence: if n > 0 { conf_sum[b] / n as f64 } else { 0.0 },
            }
        })
        .collect();
    Ok(ReliabilityBins {
        bins,
        total: confidences.len(),
    })
}

pub fn ece(confidences: &[f64], correct: &[bool], m: usize) -> Result<f64> {
    Ok(reliability(confidences, correct, m)?.ece())
}

pub fn mce(confidences: &[f64], correct: &[bool], m: usize) -> Result<f64> {
    Ok(reliability(confidences, correct, m)?.mce())
}

/// Column means of a row-stochastic matrix.
pub fn expected_marginal(posteriors: &Matrix) -> Result<LabelDistribution> {
    let n = posteriors.rows();
    if n == 0 {
        return Err(Error::invalid("posteriors", "no rows"));
    }
    let mut acc = vec![0.0; posteriors.cols()];
    for row in posteriors.iter_rows() {
        for (a, p) in acc.iter_mut().zip(row) {
            *a += p;
        }
    }
    // zero columns are possible with one-hot rows; smooth like empirical counts
    let w: Vec<f64> = acc
        .iter()
        .map(|a| a / n as f64 + crate::priors::COUNT_SMOOTHING)
        .collect();
    LabelDistribution::from_weights(&w)
}

/// `Σ p log(p/q)` with `0 log 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::invalid("q", "length differs from p"));
    }
    let mut kl = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            if b <= 0.0 {
                return Err(Error::invalid("q", "zero where p is positive"));
            }
            kl += a * (a / b).ln();
        }
    }
    Ok(kl.max(0.0))
}

/// A labelled shifted test distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftedTarget {
    pub name: String,
    pub imbalance_ratio: f64,
    pub prior: LabelDistribution,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub bins: usize,
    /// Also report accuracy after moving logits onto each target prior.
    pub known_prior: bool,
    /// Class counts of the training set, for many/medium/few groups and KL targets.
    pub train_counts: Vec<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertDiagnostic {
    pub lambda: Vec<f64>,
    pub target_prior: Vec<f64>,
    pub expected_marginal: Vec<f64>,
    pub kl_target_vs_marginal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftedResult {
    pub name: String,
    pub imbalance_ratio: f64,
    pub n: usize,
    pub counts: Vec<usize>,
    pub accuracy: f64,
    pub adjusted_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_test: usize,
    pub accuracy: f64,
    pub balanced_error: f64,
    pub groups: GroupPartition,
    pub group_accuracy: GroupAccuracy,
    pub ece: f64,
    pub mce: f64,
    pub reliability: ReliabilityBins,
    pub ensemble_expected_marginal: Vec<f64>,
    pub ensemble_kl_vs_native: f64,
    pub experts: Vec<ExpertDiagnostic>,
    pub shifted: Vec<ShiftedResult>,
}

fn correct_per_class(preds: &[usize], labels: &[usize], class_set: &[usize]) -> Option<f64> {
    let (mut n, mut hit) = (0usize, 0usize);
    for (&p, &y) in preds.iter().zip(labels) {
        if class_set.contains(&y) {
            n += 1;
            if p == y {
                hit += 1;
            }
        }
    }
    (n > 0).then(|| hit as f64 / n as f64)
}

fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for (i, row) in logits.iter_rows().enumerate() {
        out.row_mut(i).copy_from_slice(&softmax(row));
    }
    out
}

/// Scores `test` (assumed balanced) and every shifted resampling of it.
pub fn evaluate<S: Scorer + ?Sized>(
    scorer: &S,
    test: &Dataset,
    targets: &[ShiftedTarget],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let c = scorer.num_classes();
    if test.num_classes() != c {
        return Err(Error::invalid("test", "class count differs from scorer"));
    }
    let per_expert = scorer.expert_logits(test.features())?;
    let combined = scorer.combined_logits(test.features())?;
    let preds = predict_from_logits(&combined, scorer.native_prior(), None)?;
    let labels = test.labels();

    let probs = softmax_rows(&combined);
    let mut conf = Vec::with_capacity(test.len());
    let mut correct = Vec::with_capacity(test.len());
    for (row, (&p, &y)) in probs.iter_rows().zip(preds.iter().zip(labels)) {
        conf.push(row[argmax(row)]);
        correct.push(p == y);
    }
    let rel = reliability(&conf, &correct, opts.bins)?;

    let groups = group_partition(&opts.train_counts);
    let group_accuracy = GroupAccuracy {
        many: correct_per_class(&preds, labels, &groups.many),
        medium: correct_per_class(&preds, labels, &groups.medium),
        few: correct_per_class(&preds, labels, &groups.few),
    };

    let marginal = expected_marginal(&probs)?;
    let ensemble_kl = kl_divergence(scorer.native_prior().probs(), marginal.probs())?;
    let p_train = LabelDistribution::from_counts(&opts.train_counts)?;
    let experts = scorer
        .ensemble()
        .experts()
        .iter()
        .zip(&per_expert)
        .map(|(lam, logits)| {
            let target = lambda_prior(&p_train, lam)?;
            let m = expected_marginal(&softmax_rows(logits))?;
            Ok(ExpertDiagnostic {
                lambda: lam.values().to_vec(),
                kl_target_vs_marginal: kl_divergence(target.probs(), m.probs())?,
                target_prior: target.probs().to_vec(),
                expected_marginal: m.probs().to_vec(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let shifted = targets
        .iter()
        .map(|t| {
            let ds = resample_shifted(test, &t.prior, opts.seed)?;
            let logits = scorer.combined_logits(ds.features())?;
            let plain = predict_from_logits(&logits, scorer.native_prior(), None)?;
            let adjusted = if opts.known_prior {
                let p = predict_from_logits(&logits, scorer.native_prior(), Some(&t.prior))?;
                Some(accuracy(&p, ds.labels()))
            } else {
                None
            };
            Ok(ShiftedResult {
                name: t.name.clone(),
                imbalance_ratio: t.imbalance_ratio,
                n: ds.len(),
                counts: ds.counts().to_vec(),
                accuracy: accuracy(&plain, ds.labels()),
                adjusted_accuracy: adjusted,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(EvalReport {
        n_test: test.len(),
        accuracy: accuracy(&preds, labels),
        balanced_error: balanced_error(&preds, labels, c)?,
        groups,
        group_accuracy,
        ece: rel.ece(),
        mce: rel.mce(),
        reliability: rel,
        ensemble_expected_marginal: marginal.probs().to_vec(),
        ensemble_kl_vs_native: ensemble_kl,
        experts,
        shifted,
    })
}

/// Forward-LT, uniform and backward-LT targets for each imbalance ratio.
pub fn standard_targets(train_counts: &[usize], ratios: &[f64]) -> Result<Vec<ShiftedTarget>> {
    let c = train_counts.len();
    let mut out = Vec::new();
    for &r in ratios {
        out.push(ShiftedTarget {
            name: format!("forward{r}"),
            imbalance_ratio: r,
            prior: crate::data::shifted_target(train_counts, r, false)?,
        });
    }
    out.push(ShiftedTarget {
        name: "uniform".to_string(),
        imbalance_ratio: 1.0,
        prior: LabelDistribution::uniform(c)?,
    });
    for &r in ratios.iter().rev() {
        out.push(ShiftedTarget {
            name: format!("backward{r}"),
            imbalance_ratio: r,
            prior: crate::data::shifted_target(train_counts, r, true)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{bayes_posterior, rng_for, sample_dataset, GaussianMixture};
    use crate::priors::lt_exponential_prior;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn balanced_error_cases() {
        assert_eq!(balanced_error(&[0, 1, 1], &[0, 1, 1], 2).unwrap(), 0.0);
        assert_eq!(
            balanced_error(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap(),
            0.5
        );
        // 90 of class 0 with 9 wrong, 10 of class 1 with 5 wrong
        let labels: Vec<usize> = std::iter::repeat_n(0, 90)
            .chain(std::iter::repeat_n(1, 10))
            .collect();
        let mut preds = labels.clone();
        for p in preds.iter_mut().take(9) {
            *p = 1;
        }
        for p in preds.iter_mut().skip(90).take(5) {
            *p = 0;
        }
        assert!((balanced_error(&preds, &labels, 2).unwrap() - 0.3).abs() < 1e-15);
        assert!((1.0 - accuracy(&preds, &labels) - 0.14).abs() < 1e-15);
        // absent classes are dropped from the mean
        assert_eq!(balanced_error(&[0, 2], &[0, 0], 3).unwrap(), 0.5);
        assert!(balanced_error(&[], &[], 2).is_err());
    }

    #[test]
    fn single_bin_example() {
        let conf = [0.8; 5];
        let correct = [true, true, true, false, false];
        let e = ece(&conf, &correct, 1).unwrap();
        let m = mce(&conf, &correct, 1).unwrap();
        assert!((e - 0.2).abs() < 1e-15);
        assert!((m - 0.2).abs() < 1e-15);
        assert_eq!(ece(&[1.0; 4], &[true; 4], 15).unwrap(), 0.0);
    }

    #[test]
    fn binning_rule() {
        let r = reliability(&[0.1, 0.5, 0.9], &[true, false, true], 2).unwrap();
        assert_eq!(
            r.bins.iter().map(|b| b.count).collect::<Vec<_>>(),
            vec![2, 1]
        );
        let empty = reliability(&[], &[], 4).unwrap();
        assert!(empty.bins.iter().all(|b| b.count == 0));
        assert_eq!(empty.ece(), 0.0);
        assert!(reliability(&[1.2], &[true], 3).is_err());
    }

    #[test]
    fn oracle_posteriors_are_calibrated() {
        let mix = GaussianMixture::on_circle(2, 2.0, 1.0, lt_exponential_prior(5, 10.0).unwrap())
            .unwrap();
        let ds = sample_dataset(&mix, 10_000, 8).unwrap();
        let mut conf = Vec::new();
        let mut correct = Vec::new();
        for (x, &y) in ds.features().iter_rows().zip(ds.labels()) {
            let p = bayes_posterior(&mix, x, None);
            let k = argmax(&p);
            conf.push(p[k]);
            correct.push(k == y);
        }
        assert!(ece(&conf, &correct, 15).unwrap() < 0.02);
        assert!(ece(&conf, &correct, 15).unwrap() <= mce(&conf, &correct, 15).unwrap());
    }

    #[test]
    fn marginal_and_kl() {
        let rows = Matrix::from_rows(&vec![vec![0.2, 0.8]; 3]);
        let m = expected_marginal(&rows).unwrap();
        assert!(crate::numeric::max_abs_diff(m.probs(), &[0.2, 0.8]) < 1e-11);
        let onehot = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 0.0],
            vec![1.0, 0.0],
        ]);
        let m = expected_marginal(&onehot).unwrap();
        assert!(crate::numeric::max_abs_diff(m.probs(), &[0.75, 0.25]) < 1e-11);

        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!((kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn ece_never_exceeds_mce(
            data in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 0..300),
            m in 1usize..30,
        ) {
            let (c, k): (Vec<f64>, Vec<bool>) = data.into_iter().unzip();
            let r = reliability(&c, &k, m).unwrap();
            prop_assert!(r.ece() <= r.mce() + 1e-12);
            prop_assert_eq!(r.bins.iter().map(|b| b.count).sum::<usize>(), c.len());
            prop_assert!((r.ece() - ece(&c, &k, m).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn kl_is_nonnegative(
            a in prop::collection::vec(0.01f64..1.0, 6),
            b in prop::collection::vec(0.01f64..1.0, 6),
        ) {
            let p = LabelDistribution::from_weights(&a).unwrap();
            let q = LabelDistribution::from_weights(&b).unwrap();
            prop_assert!(kl_divergence(p.probs(), q.probs()).unwrap() >= 0.0);
        }

        #[test]
        fn marginal_is_a_distribution(rows in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 4), 1..50)) {
            let norm: Vec<Vec<f64>> = rows.iter().map(|r| {
                let s: f64 = r.iter().sum();
                r.iter().map(|v| v / s).collect()
            }).collect();
            let m = expected_marginal(&Matrix::from_rows(&norm)).unwrap();
            prop_assert!((m.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn ber_invariant_to_duplication(
            pairs in prop::collection::vec((0usize..3, 0usize..3), 1..100),
            factor in 1usize..4,
        ) {
            let (p, y): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let dp: Vec<usize> = p.iter().flat_map(|v| std::iter::repeat_n(*v, factor)).collect();
            let dy: Vec<usize> = y.iter().flat_map(|v| std::iter::repeat_n(*v, factor)).collect();
            let a = balanced_error(&p, &y, 3).unwrap();
            let b = balanced_error(&dp, &dy, 3).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bin_statistics_stay_in_range() {
        let mut rng = rng_for(1, 0);
        let c: Vec<f64> = (0..1000).map(|_| rng.random()).collect();
        let k: Vec<bool> = c.iter().map(|_| rng.random()).collect();
        let r = reliability(&c, &k, 15).unwrap();
        assert!(r.bins.iter().all(|b| (0.0..=1.0).contains(&b.accuracy)));
    }
}
