//! Synthetic Gaussian-mixture data with exact Bayes posteriors, CSV
//! ingestion, and test-set resampling onto shifted label distributions.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{argmax, softmax, Matrix};
use crate::par;
use crate::priors::LabelDistribution;

/// Identifier recorded in every artifact that depends on random draws.
pub const RNG_ALGORITHM: &str = "chacha8/rand_chacha-0.9/seed_from_u64+stream";

/// Samples generated per independently-seeded block.
const SAMPLE_BLOCK: usize = 4096;

/// Deterministic generator for `(seed, stream)`.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Isotropic Gaussian classes with a shared standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    means: Vec<Vec<f64>>,
    sigma: f64,
    prior: LabelDistribution,
}

impl GaussianMixture {
    pub fn new(means: Vec<Vec<f64>>, sigma: f64, prior: LabelDistribution) -> Result<Self> {
        if means.len() != prior.num_classes() {
            return Err(Error::invalid(
                "means",
                format!("{} means for {} classes", means.len(), prior.num_classes()),
            ));
        }
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::invalid("sigma", "must be positive"));
        }
        let dim = means[0].len();
        if dim == 0 || means.iter().any(|m| m.len() != dim) {
            return Err(Error::invalid("means", "inconsistent or zero dimension"));
        }
        if means.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("means", "entries must be finite"));
        }
        for i in 0..means.len() {
            for j in i + 1..means.len() {
                if means[i] == means[j] {
                    return Err(Error::invalid(
                        "means",
                        format!("classes {i} and {j} share a mean"),
                    ));
                }
            }
        }
        Ok(GaussianMixture {
            means,
            sigma,
            prior,
        })
    }

    /// Means evenly spaced on a circle of `radius` in the first two
    /// coordinates (on a line when `dim == 1`).
    pub fn on_circle(
        dim: usize,
        radius: f64,
        sigma: f64,
        prior: LabelDistribution,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dim", "must be at least 1"));
        }
        let c = prior.num_classes();
        let means = (0..c)
            .map(|k| {
                let mut m = vec![0.0; dim];
                if dim == 1 {
                    m[0] = radius * k as f64;
                } else {
                    let angle = 2.0 * std::f64::consts::PI * k as f64 / c as f64;
                    m[0] = radius * angle.cos();
                    m[1] = radius * angle.sin();
                }
                m
            })
            .collect();
        Self::new(means, sigma, prior)
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn prior(&self) -> &LabelDistribution {
        &self.prior
    }

    pub fn num_classes(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// Same class conditionals under a different label prior.
    pub fn with_prior(&self, prior: LabelDistribution) -> Result<Self> {
        Self::new(self.means.clone(), self.sigma, prior)
    }

    /// `log N(x; mean_y, sigma² I)` for every class.
    pub fn log_likelihoods(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim() as f64;
        let s2 = self.sigma * self.sigma;
        let norm = -0.5 * d * (2.0 * std::f64::consts::PI * s2).ln();
        self.means
            .iter()
            .map(|m| {
                let sq: f64 = x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
                norm - 0.5 * sq / s2
            })
            .collect()
    }
}

/// Features, integer labels and per-class counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    counts: Vec<usize>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::invalid(
                "labels",
                format!("{} labels for {} rows", labels.len(), features.rows()),
            ));
        }
        let mut counts = vec![0; classes];
        for &y in &labels {
            *counts
                .get_mut(y)
                .ok_or_else(|| Error::invalid("labels", format!("label {y} >= {classes}")))? += 1;
        }
        Ok(Dataset {
            features,
            labels,
            counts,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Smoothed empirical label distribution.
    pub fn empirical_prior(&self) -> Result<LabelDistribution> {
        LabelDistribution::from_counts(&self.counts)
    }

    /// Rows `idx` in the given order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let labels: Vec<usize> = idx.iter().map(|&i| self.labels[i]).collect();
        Dataset::new(self.features.select_rows(idx), labels, self.num_classes())
            .expect("subset of a valid dataset is valid")
    }
}

/// Draws `n` i.i.d. samples. Work is split into fixed blocks, each with its own
/// RNG stream, so the result does not depend on the thread count.
pub fn sample_dataset(mix: &GaussianMixture, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::invalid("n", "must be at least 1"));
    }
    let dim = mix.dim();
    let cdf: Vec<f64> = mix
        .prior()
        .probs()
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p;
            Some(*acc)
        })
        .collect();
    let blocks = par::map_chunks(n, SAMPLE_BLOCK, |range| {
        let mut rng = rng_for(seed, (range.start / SAMPLE_BLOCK) as u64);
        let mut feats = Vec::with_capacity(range.len() * dim);
        let mut labels = Vec::with_capacity(range.len());
        for _ in range {
            let u: f64 = rng.random();
            let y = cdf.iter().position(|&c| u < c).unwrap_or(cdf.len() - 1);
            for &m in &mix.means()[y] {
                let z: f64 = rng.sample(StandardNormal);
                feats.push(m + mix.sigma() * z);
            }
            labels.push(y);
        }
        (feats, labels)
    });
    let mut feats = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (f, l) in blocks {
        feats.extend(f);
        labels.extend(l);
    }
    Dataset::new(Matrix::from_vec(n, dim, feats), labels, mix.num_classes())
}

/// Per-class counts summing to `n` and proportional to `prior`, by largest
/// remainder (ties to the lower class index).
pub fn allocate_counts(prior: &LabelDistribution, n: usize) -> Vec<usize> {
    let exact: Vec<f64> = prior.probs().iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let missing = n.saturating_sub(counts.iter().sum());
    for &j in order.iter().cycle().take(missing) {
        counts[j] += 1;
    }
    counts
}

/// Exactly `counts[j]` samples of class `j`, rows in shuffled order. Features
/// are drawn in fixed blocks like [`sample_dataset`].
pub fn sample_with_counts(mix: &GaussianMixture, counts: &[usize], seed: u64) -> Result<Dataset> {
    if counts.len() != mix.num_classes() {
        return Err(Error::invalid(
            "counts",
            "length differs from the class count",
        ));
    }
    let n: usize = counts.iter().sum();
    if n == 0 {
        return Err(Error::invalid("counts", "must sum to at least 1"));
    }
    let mut labels: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(j, &k)| std::iter::repeat_n(j, k))
        .collect();
    labels.shuffle(&mut rng_for(seed, u64::MAX));
    let dim = mix.dim();
    let blocks = par::map_chunks(n, SAMPLE_BLOCK, |range| {
        let mut rng = rng_for(seed, (range.start / SAMPLE_BLOCK) as u64);
        let mut feats = Vec::with_capacity(range.len() * dim);
        for i in range {
            for &m in &mix.means()[labels[i]] {
                let z: f64 = rng.sample(StandardNormal);
                feats.push(m + mix.sigma() * z);
            }
        }
        feats
    });
    let feats: Vec<f64> = blocks.into_iter().flatten().collect();
    Dataset::new(Matrix::from_vec(n, dim, feats), labels, mix.num_classes())
}

/// Exact class posterior; `prior_override` swaps the label prior while keeping
/// the class conditionals.
pub fn bayes_posterior(
    mix: &GaussianMixture,
    x: &[f64],
    prior_override: Option<&LabelDistribution>,
) -> Vec<f64> {
    let prior = prior_override.unwrap_or(mix.prior());
    let scores: Vec<f64> = mix
        .log_likelihoods(x)
        .iter()
        .zip(prior.probs())
        .map(|(ll, p)| ll + p.ln())
        .collect();
    softmax(&scores)
}

/// `argmax_y P(x|y)`, ties to the lowest index.
pub fn bayes_balanced_classifier(mix: &GaussianMixture, x: &[f64]) -> usize {
    argmax(&mix.log_likelihoods(x))
}

/// Monte-Carlo balanced error of the Bayes-balanced rule, using `n_per_class`
/// samples of each class.
pub fn bayes_balanced_error(mix: &GaussianMixture, n_per_class: usize, seed: u64) -> Result<f64> {
    let c = mix.num_classes();
    let balanced = mix.with_prior(LabelDistribution::uniform(c)?)?;
    let test = sample_dataset(&balanced, n_per_class * c, seed)?;
    let preds = par::map_range(test.len(), |i| {
        bayes_balanced_classifier(mix, test.features().row(i))
    });
    crate::metrics::balanced_error(&preds, test.labels(), c)
}

/// Subsamples `test` without replacement so per-class counts are proportional
/// to `target`, using as many samples as possible. Row order is preserved.
pub fn resample_shifted(test: &Dataset, target: &LabelDistribution, seed: u64) -> Result<Dataset> {
    let counts = test.counts();
    if target.num_classes() != counts.len() {
        return Err(Error::invalid(
            "target",
            format!(
                "{} classes, dataset has {}",
                target.num_classes(),
                counts.len()
            ),
        ));
    }
    if let Some(j) = counts.iter().position(|&n| n == 0) {
        return Err(Error::invalid(
            "target",
            format!("class {j} has target mass but no test samples"),
        ));
    }
    let keep = shifted_counts(counts, target);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); counts.len()];
    for (i, &y) in test.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    let mut rng = rng_for(seed, 0);
    let mut chosen = Vec::with_capacity(keep.iter().sum());
    for (idx, &k) in by_class.iter_mut().zip(&keep) {
        idx.shuffle(&mut rng);
        chosen.extend_from_slice(&idx[..k]);
    }
    chosen.sort_unstable();
    Ok(test.subset(&chosen))
}

/// Largest per-class counts `k_j ≤ n_j` proportional to `target`.
pub fn shifted_counts(available: &[usize], target: &LabelDistribution) -> Vec<usize> {
    let scale = available
        .iter()
        .zip(target.probs())
        .map(|(&n, &t)| n as f64 / t)
        .fold(f64::INFINITY, f64::min);
    available
        .iter()
        .zip(target.probs())
        .map(|(&n, &t)| (((t * scale) + 1e-9).floor() as usize).min(n))
        .collect()
}

/// Forward (training order) and backward (flipped) long-tailed targets with
/// imbalance ratio `rho`. Classes are ranked by descending training count.
pub fn shifted_target(
    train_counts: &[usize],
    rho: f64,
    backward: bool,
) -> Result<LabelDistribution> {
    let c = train_counts.len();
    let profile = crate::priors::lt_exponential_prior(c, rho)?;
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| train_counts[b].cmp(&train_counts[a]));
    if backward {
        order.reverse();
    }
    let mut probs = vec![0.0; c];
    for (rank, &class) in order.iter().enumerate() {
        probs[class] = profile.probs()[rank];
    }
    LabelDistribution::new(probs)
}

/// Many-shot (> 100), medium-shot (20–100) and few-shot (< 20) classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupPartition {
    pub many: Vec<usize>,
    pub medium: Vec<usize>,
    pub few: Vec<usize>,
}

pub fn group_partition(counts: &[usize]) -> GroupPartition {
    let mut g = GroupPartition {
        many: Vec::new(),
        medium: Vec::new(),
        few: Vec::new(),
    };
    for (j, &n) in counts.iter().enumerate() {
        match n {
            101.. => g.many.push(j),
            20..=100 => g.medium.push(j),
            _ => g.few.push(j),
        }
    }
    g
}

/// Sidecar metadata written next to `data.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub classes: usize,
    pub dim: usize,
    pub counts: Vec<usize>,
    pub generator: Option<GeneratorSpec>,
    pub seed: Option<u64>,
    pub rng: Option<String>,
    pub config_hash: Option<String>,
    pub resampling: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub kind: String,
    pub mixture: GaussianMixture,
    pub n: usize,
}

/// Human-readable rule stored in dataset metadata.
pub const RESAMPLING_RULE: &str =
    "per-class subsampling without replacement, k_j = floor(t_j * min_i n_i / t_i)";

/// Writes `f1,…,fd,label` rows with a header line.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header: Vec<String> = (1..=ds.dim())
        .map(|i| format!("f{i}"))
        .chain(std::iter::once("label".to_string()))
        .collect();
    let mut write = || -> std::io::Result<()> {
        writeln!(w, "{}", header.join(","))?;
        for (row, y) in ds.features().iter_rows().zip(ds.labels()) {
            for v in row {
                // `{:?}` prints the shortest string that round-trips
                write!(w, "{v:?},")?;
            }
            writeln!(w, "{y}")?;
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path, e))
}

/// Reads a CSV of feature columns followed by one integer label column. A
/// leading header row is skipped when its first field is not numeric.
pub fn read_csv(path: &Path, classes: Option<usize>) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    let mut dim = None;
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if lineno == 0 && fields[0].parse::<f64>().is_err() {
            continue;
        }
        let parse_err = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            reason,
        };
        if fields.len() < 2 {
            return Err(parse_err(
                "expected at least one feature and a label".into(),
            ));
        }
        let d = fields.len() - 1;
        if *dim.get_or_insert(d) != d {
            return Err(parse_err(format!("expected {} columns", dim.unwrap() + 1)));
        }
        for f in &fields[..d] {
            let v: f64 = f
                .parse()
                .map_err(|_| parse_err(format!("bad feature `{f}`")))?;
            feats.push(v);
        }
        let y: usize = fields[d]
            .parse()
            .map_err(|_| parse_err(format!("bad label `{}`", fields[d])))?;
        labels.push(y);
    }
    let dim = dim.ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        reason: "no data rows".into(),
    })?;
    let c = classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
    Dataset::new(Matrix::from_vec(labels.len(), dim, feats), labels, c)
}

pub fn write_meta(meta: &DatasetMeta, path: &Path) -> Result<()> {
    let s = serde_json::to_string_pretty(meta).map_err(|e| Error::json(path, e))?;
    fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_meta(path: &Path) -> Result<DatasetMeta> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::json(path, e))
}

/// Loads `data.csv` + `meta.json` from `dir`.
pub fn load_dir(dir: &Path) -> Result<(Dataset, DatasetMeta)> {
    let meta = read_meta(&dir.join("meta.json"))?;
    let ds = read_csv(&dir.join("data.csv"), Some(meta.classes))?;
    if ds.counts() != meta.counts.as_slice() {
        return Err(Error::Config(format!(
            "{}: counts in meta.json do not match data.csv",
            dir.display()
        )));
    }
    Ok((ds, meta))
}
