//! Acceptance criteria, run sequentially so the runtime budgets are measured
//! without other tests competing for the CPU. One PASS/FAIL line each.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use logit_experts::data::{
    allocate_counts, bayes_balanced_classifier, bayes_balanced_error, bayes_posterior,
    resample_shifted, rng_for, sample_dataset, sample_with_counts, Dataset, GaussianMixture,
};
use logit_experts::ensemble::{predict, verify_theorem1, OracleEnsemble, TrainedEnsemble};
use logit_experts::metrics::{ece, evaluate, mce, standard_targets, EvalOptions, EvalReport};
use logit_experts::mixup::{mix_batch, MixupConfig};
use logit_experts::model::{
    ce_loss, gla_grad, gla_loss, gla_loss_pairwise, total_loss, train, Activation, HeadKind, Model,
    ModelShape, Schedule, TrainConfig, Trainer,
};
use logit_experts::numeric::{argmax, norm, top2_gap, Matrix};
use logit_experts::priors::{
    ensemble_from_scalars, lt_exponential_prior, LabelDistribution, LambdaVector,
};
use rand::seq::SliceRandom;
use rand::Rng;

struct Outcome {
    id: u32,
    name: &'static str,
    passed: bool,
    /// Directional checks that are reported but do not fail the suite.
    blocking: bool,
    detail: String,
    elapsed: Duration,
    budget: Option<Duration>,
}

fn run(
    id: u32,
    name: &'static str,
    budget: Option<Duration>,
    blocking: bool,
    f: impl FnOnce() -> (bool, String),
) -> Outcome {
    let start = Instant::now();
    let (ok, detail) = f();
    let elapsed = start.elapsed();
    let in_budget = budget.is_none_or(|b| elapsed < b);
    let o = Outcome {
        id,
        name,
        passed: ok && in_budget,
        blocking,
        detail,
        elapsed,
        budget,
    };
    let budget = o.budget.map_or(String::new(), |b| format!(" < {:.0?}", b));
    println!(
        "[{}] {:>2}. {}: {} ({:.2?}{})",
        if o.passed { "PASS" } else { "FAIL" },
        o.id,
        o.name,
        o.detail,
        o.elapsed,
        budget
    );
    o
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

fn random_vec<R: Rng>(rng: &mut R, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn random_soft_target<R: Rng>(rng: &mut R, c: usize) -> Vec<f64> {
    let mut t = vec![0.0; c];
    let xi: f64 = rng.random();
    t[rng.random_range(0..c)] += xi;
    t[rng.random_range(0..c)] += 1.0 - xi;
    t
}

// ---------------------------------------------------------------- 1

fn criterion_theorem() -> (bool, String) {
    let mix =
        GaussianMixture::on_circle(2, 2.0, 1.0, lt_exponential_prior(5, 100.0).unwrap()).unwrap();
    let points = sample_dataset(&mix, 1000, 11).unwrap();
    let fixed: [&[f64]; 3] = [&[1.0, 0.0, -1.0], &[1.0, -0.25, -1.5], &[0.0]];
    let mut sets: Vec<Vec<LambdaVector>> = fixed
        .iter()
        .map(|s| {
            s.iter()
                .map(|&l| LambdaVector::constant(5, l).unwrap())
                .collect()
        })
        .collect();
    let mut rng = rng_for(12, 0);
    for k in 0..10 {
        let size = rng.random_range(1..=7);
        let set = (0..size)
            .map(|_| {
                if k % 2 == 0 {
                    LambdaVector::constant(5, rng.random_range(-2.0..2.0)).unwrap()
                } else {
                    LambdaVector::new(random_vec(&mut rng, 5, -2.0, 2.0)).unwrap()
                }
            })
            .collect();
        sets.push(set);
    }
    let worst = sets
        .iter()
        .map(|s| verify_theorem1(&mix, s, points.features()).unwrap())
        .fold(0.0, f64::max);
    (
        worst < 1e-9,
        format!(
            "{} λ-multisets × 1000 points, max deviation {worst:.2e} (< 1e-9)",
            sets.len()
        ),
    )
}

// ---------------------------------------------------------------- 2

fn criterion_fisher_oracle() -> (bool, String) {
    let mix =
        GaussianMixture::on_circle(2, 2.0, 1.0, lt_exponential_prior(5, 100.0).unwrap()).unwrap();
    let oracle = OracleEnsemble::new(
        mix.clone(),
        ensemble_from_scalars(5, &[1.0, 0.0, -1.0]).unwrap(),
    )
    .unwrap();
    let pts = sample_dataset(&mix, 10_000, 21).unwrap();
    let preds = predict(&oracle, pts.features(), None).unwrap();
    let (mut disagree, mut excluded) = (0, 0);
    for (x, &p) in pts.features().iter_rows().zip(&preds) {
        if top2_gap(&mix.log_likelihoods(x)) < 1e-12 {
            excluded += 1;
            continue;
        }
        if p != bayes_balanced_classifier(&mix, x) {
            disagree += 1;
        }
    }
    (
        disagree == 0,
        format!("{disagree} disagreements on 10^4 points ({excluded} near-ties excluded)"),
    )
}

// ---------------------------------------------------------------- 3, 4, 9

struct TrainedSetup {
    train: Dataset,
    test: Dataset,
    bayes_ber: f64,
}

impl TrainedSetup {
    fn new() -> Self {
        let prior = lt_exponential_prior(3, 100.0).unwrap();
        let mix = GaussianMixture::on_circle(2, 1.75, 1.0, prior).unwrap();
        let train = sample_with_counts(&mix, &allocate_counts(mix.prior(), 6000), 31).unwrap();
        let balanced = mix
            .with_prior(LabelDistribution::uniform(3).unwrap())
            .unwrap();
        let test = sample_with_counts(&balanced, &[10_000; 3], 32).unwrap();
        let bayes_ber = bayes_balanced_error(&mix, 100_000, 33).unwrap();
        TrainedSetup {
            train,
            test,
            bayes_ber,
        }
    }

    fn fit(&self, lambdas: &[f64], mixup: MixupConfig) -> EvalReport {
        let spec = ensemble_from_scalars(3, lambdas).unwrap();
        let shape = ModelShape {
            input_dim: 2,
            depth: 1,
            hidden: 32,
            activation: Activation::Relu,
            head: HeadKind::Linear,
            classes: 3,
            experts: lambdas.len(),
        };
        let cfg = TrainConfig {
            epochs: 60,
            batch_size: 128,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule: Schedule::Cosine,
            warmup_epochs: 5,
            seed: 34,
            mixup,
        };
        let model = Model::init(shape, &mut rng_for(35, 0)).unwrap();
        let state = train(model, &self.train, &spec, &cfg).unwrap();
        let p_train = self.train.empirical_prior().unwrap();
        let scorer = TrainedEnsemble::new(state.model, spec, &p_train).unwrap();
        let opts = EvalOptions {
            bins: 15,
            known_prior: false,
            train_counts: self.train.counts().to_vec(),
            seed: 36,
        };
        evaluate(&scorer, &self.test, &[], &opts).unwrap()
    }
}

// ---------------------------------------------------------------- 5

struct GradCheck {
    name: &'static str,
    worst: f64,
}

fn check_loss_grads() -> Vec<GradCheck> {
    let mut rng = rng_for(51, 0);
    let h = 1e-5;
    let (mut ce, mut gla, mut pair, mut tot) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..20 {
        let c = rng.random_range(2..8);
        let f = random_vec(&mut rng, c, -4.0, 4.0);
        let t = random_soft_target(&mut rng, c);
        let prior = LabelDistribution::from_weights(&random_vec(&mut rng, c, 0.01, 1.0)).unwrap();
        let lp = prior.log_probs();
        let tau = random_vec(&mut rng, c, -2.0, 3.0);

        let analytic = gla_grad(&f, &t, &vec![0.0; c], &lp);
        ce = ce.max(rel_err(&analytic, &numeric_grad(&f, h, |x| ce_loss(x, &t))));

        let analytic = gla_grad(&f, &t, &tau, &lp);
        gla = gla.max(rel_err(
            &analytic,
            &numeric_grad(&f, h, |x| gla_loss(x, &t, &tau, &lp)),
        ));
        pair = pair.max(rel_err(
            &analytic,
            &numeric_grad(&f, h, |x| gla_loss_pairwise(x, &t, &tau, &lp)),
        ));

        let k = rng.random_range(1..5);
        let lams: Vec<f64> = random_vec(&mut rng, k, -1.5, 1.5);
        let spec = ensemble_from_scalars(c, &lams).unwrap();
        let flat = random_vec(&mut rng, k * c, -4.0, 4.0);
        let analytic: Vec<f64> = spec
            .experts()
            .iter()
            .enumerate()
            .flat_map(|(e, lam)| {
                gla_grad(&flat[e * c..(e + 1) * c], &t, &lam.tau(), &lp)
                    .into_iter()
                    .map(move |g| g / k as f64)
            })
            .collect();
        let numeric = numeric_grad(&flat, h, |x| {
            let parts: Vec<&[f64]> = x.chunks(c).collect();
            total_loss(&parts, &t, &spec, &lp).unwrap()
        });
        tot = tot.max(rel_err(&analytic, &numeric));
    }
    vec![
        GradCheck {
            name: "ce",
            worst: ce,
        },
        GradCheck {
            name: "gla",
            worst: gla,
        },
        GradCheck {
            name: "gla-pairwise",
            worst: pair,
        },
        GradCheck {
            name: "ensemble-loss",
            worst: tot,
        },
    ]
}

fn shapes() -> Vec<(&'static str, ModelShape)> {
    let base = ModelShape {
        input_dim: 3,
        depth: 1,
        hidden: 5,
        activation: Activation::Relu,
        head: HeadKind::Linear,
        classes: 4,
        experts: 2,
    };
    vec![
        (
            "linear-head",
            ModelShape {
                depth: 0,
                hidden: 0,
                ..base.clone()
            },
        ),
        (
            "cosine-head",
            ModelShape {
                depth: 0,
                hidden: 0,
                head: HeadKind::Cosine { kappa: 4.0 },
                ..base.clone()
            },
        ),
        ("relu-trunk", base.clone()),
        (
            "tanh-trunk",
            ModelShape {
                activation: Activation::Tanh,
                ..base.clone()
            },
        ),
        (
            "relu-trunk+cosine",
            ModelShape {
                head: HeadKind::Cosine { kappa: 4.0 },
                ..base.clone()
            },
        ),
        (
            "tanh-trunk+cosine",
            ModelShape {
                activation: Activation::Tanh,
                head: HeadKind::Cosine { kappa: 4.0 },
                ..base
            },
        ),
    ]
}

/// Draws parameters and inputs whose hidden pre-activations all stay at
/// least `margin` away from the ReLU kink.
fn point_away_from_kinks<R: Rng>(rng: &mut R, shape: &ModelShape, batch: usize) -> (Model, Matrix) {
    loop {
        let model = Model::init(shape.clone(), rng).unwrap();
        let mut params = model.params().to_vec();
        for p in params.iter_mut() {
            *p += rng.random_range(-0.3..0.3);
        }
        let model = Model::from_params(shape.clone(), params).unwrap();
        let x = Matrix::from_vec(
            batch,
            shape.input_dim,
            random_vec(rng, batch * shape.input_dim, -2.0, 2.0),
        );
        let safe = match model.hidden_preactivations(&x).unwrap() {
            Some(pre) if shape.activation == Activation::Relu => {
                pre.as_slice().iter().all(|v| v.abs() > 1e-3)
            }
            _ => true,
        };
        if safe {
            return (model, x);
        }
    }
}

fn check_layer_grads() -> Vec<GradCheck> {
    let mut rng = rng_for(52, 0);
    let h = 1e-6;
    shapes()
        .into_iter()
        .map(|(name, shape)| {
            let mut worst = 0.0f64;
            for _ in 0..20 {
                let (model, x) = point_away_from_kinks(&mut rng, &shape, 3);
                let upstream: Vec<Matrix> = (0..shape.experts)
                    .map(|_| {
                        Matrix::from_vec(
                            3,
                            shape.classes,
                            random_vec(&mut rng, 3 * shape.classes, -1.0, 1.0),
                        )
                    })
                    .collect();
                let cache = model.forward_cached(&x).unwrap();
                let analytic = model.backward(&x, &cache, &upstream);
                let numeric = numeric_grad(model.params(), h, |p| {
                    let m = Model::from_params(shape.clone(), p.to_vec()).unwrap();
                    m.forward(&x)
                        .unwrap()
                        .iter()
                        .zip(&upstream)
                        .map(|(l, g)| {
                            l.as_slice()
                                .iter()
                                .zip(g.as_slice())
                                .map(|(a, b)| a * b)
                                .sum::<f64>()
                        })
                        .sum()
                });
                worst = worst.max(rel_err(&analytic, &numeric));
            }
            GradCheck { name, worst }
        })
        .collect()
}

fn check_training_grads() -> Vec<GradCheck> {
    let mut rng = rng_for(53, 0);
    let h = 1e-6;
    let mut worst = 0.0f64;
    let (mut point, mut checked) = (0usize, 0);
    while checked < 20 {
        point += 1;
        let (_, shape) = shapes()[2 + point % 4].clone();
        let mix = GaussianMixture::on_circle(3, 1.5, 1.0, lt_exponential_prior(4, 10.0).unwrap())
            .unwrap();
        let data = sample_dataset(&mix, 40, 54 + point as u64).unwrap();
        let spec = ensemble_from_scalars(4, &[1.0, -0.5]).unwrap();
        let cfg = TrainConfig::default();
        let trainer = Trainer::new(&data, &spec, &cfg).unwrap();
        let (model, x) = point_away_from_kinks(&mut rng, &shape, 6);
        let mixed = mix_batch(
            &x,
            &data.labels()[..6],
            4,
            &MixupConfig::with_alpha(0.4),
            &mut rng,
        )
        .unwrap();
        if shape.activation == Activation::Relu {
            let pre = model
                .hidden_preactivations(&mixed.features)
                .unwrap()
                .unwrap();
            if pre.as_slice().iter().any(|v| v.abs() < 1e-3) {
                continue;
            }
        }
        let (_, analytic) = trainer
            .batch_gradient(&model, &mixed.features, &mixed.soft_labels)
            .unwrap();
        let numeric = numeric_grad(model.params(), h, |p| {
            let m = Model::from_params(shape.clone(), p.to_vec()).unwrap();
            trainer
                .batch_gradient(&m, &mixed.features, &mixed.soft_labels)
                .unwrap()
                .0
        });
        worst = worst.max(rel_err(&analytic, &numeric));
        checked += 1;
    }
    vec![GradCheck {
        name: "batch-loss",
        worst,
    }]
}

fn criterion_gradients() -> (bool, String) {
    let checks: Vec<GradCheck> = check_loss_grads()
        .into_iter()
        .chain(check_layer_grads())
        .chain(check_training_grads())
        .collect();
    let worst = checks.iter().map(|c| c.worst).fold(0.0, f64::max);
    let detail = checks
        .iter()
        .map(|c| format!("{} {:.1e}", c.name, c.worst))
        .collect::<Vec<_>>()
        .join(", ");
    (
        worst < 1e-5,
        format!("max relative error {worst:.1e} (< 1e-5): {detail}"),
    )
}

// ---------------------------------------------------------------- 6

fn criterion_calibration() -> (bool, String) {
    // one bin: confidence 0.45, accuracy 5/20 = 0.25
    let conf = [0.45; 20];
    let correct: Vec<bool> = (0..20).map(|i| i < 5).collect();
    let e1 = ece(&conf, &correct, 15).unwrap();
    let m1 = mce(&conf, &correct, 15).unwrap();

    let mix =
        GaussianMixture::on_circle(2, 2.0, 1.0, lt_exponential_prior(5, 10.0).unwrap()).unwrap();
    let ds = sample_dataset(&mix, 10_000, 61).unwrap();
    let mut confs = Vec::with_capacity(ds.len());
    let mut hits = Vec::with_capacity(ds.len());
    for (x, &y) in ds.features().iter_rows().zip(ds.labels()) {
        let p = bayes_posterior(&mix, x, None);
        let k = argmax(&p);
        confs.push(p[k]);
        hits.push(k == y);
    }
    let e = ece(&confs, &hits, 15).unwrap();
    (
        e1 == 0.2 && m1 == 0.2 && e < 0.02,
        format!("single-bin ECE {e1} MCE {m1} (= 0.2); oracle ECE {e:.4} at n=10^4, M=15 (< 0.02)"),
    )
}

// ---------------------------------------------------------------- 7

fn criterion_mixup_prior() -> (bool, String) {
    let mix =
        GaussianMixture::on_circle(2, 2.0, 1.0, lt_exponential_prior(10, 100.0).unwrap()).unwrap();
    let data = sample_with_counts(&mix, &allocate_counts(mix.prior(), 5000), 71).unwrap();
    let p_train = data.empirical_prior().unwrap();
    let cfg = MixupConfig::with_alpha(0.4);
    let mut rng = rng_for(72, 0);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut mass = [0.0; 10];
    let mut n = 0usize;
    while n < 100_000 {
        order.shuffle(&mut rng);
        for idx in order.chunks(128) {
            if n >= 100_000 {
                break;
            }
            let batch = data.subset(idx);
            let mixed = mix_batch(batch.features(), batch.labels(), 10, &cfg, &mut rng).unwrap();
            for row in mixed.soft_labels.iter_rows() {
                for (m, v) in mass.iter_mut().zip(row) {
                    *m += v;
                }
            }
            n += idx.len();
        }
    }
    let tv: f64 = 0.5
        * mass
            .iter()
            .zip(p_train.probs())
            .map(|(m, p)| (m / n as f64 - p).abs())
            .sum::<f64>();
    (
        tv < 0.01,
        format!("TV(soft-label marginal, p_train) = {tv:.2e} over {n} samples (< 0.01)"),
    )
}

// ---------------------------------------------------------------- 8

fn criterion_posthoc() -> (bool, String) {
    let mix =
        GaussianMixture::on_circle(2, 2.0, 1.0, lt_exponential_prior(10, 100.0).unwrap()).unwrap();
    let train = sample_with_counts(&mix, &allocate_counts(mix.prior(), 20_000), 81).unwrap();
    let balanced = mix
        .with_prior(LabelDistribution::uniform(10).unwrap())
        .unwrap();
    let test = sample_with_counts(&balanced, &[20_000; 10], 82).unwrap();
    let oracle = OracleEnsemble::new(
        mix.clone(),
        ensemble_from_scalars(10, &[1.0, 0.0, -1.0]).unwrap(),
    )
    .unwrap();
    let targets: Vec<_> = standard_targets(train.counts(), &[2.0, 5.0, 10.0, 25.0, 50.0])
        .unwrap()
        .into_iter()
        .filter(|t| t.name != "uniform")
        .collect();
    let opts = EvalOptions {
        bins: 15,
        known_prior: true,
        train_counts: train.counts().to_vec(),
        seed: 83,
    };
    let report = evaluate(&oracle, &test, &targets, &opts).unwrap();
    let mut ok = true;
    let mut worst_gap = 0.0f64;
    let mut min_gain = f64::INFINITY;
    for (t, r) in targets.iter().zip(&report.shifted) {
        let ds = resample_shifted(&test, &t.prior, opts.seed).unwrap();
        let bayes_hits = ds
            .features()
            .iter_rows()
            .zip(ds.labels())
            .filter(|(x, &y)| argmax(&bayes_posterior(&mix, x, Some(&t.prior))) == y)
            .count();
        let bayes_acc = bayes_hits as f64 / ds.len() as f64;
        let adjusted = r.adjusted_accuracy.unwrap();
        worst_gap = worst_gap.max((adjusted - bayes_acc).abs());
        min_gain = min_gain.min(adjusted - r.accuracy);
        ok &= (adjusted - bayes_acc).abs() < 0.01 && adjusted >= r.accuracy;
    }
    (
        ok,
        format!(
            "{} shifted sets: max |adjusted - Bayes| {worst_gap:.4} (< 0.01), min gain over unadjusted {min_gain:+.4} (≥ 0)",
            targets.len()
        ),
    )
}

// ---------------------------------------------------------------- 10

fn cli_run(workdir: &Path, threads: &str, args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_logit-experts"))
        .arg("--workdir")
        .arg(workdir)
        .args(args)
        .env("RAYON_NUM_THREADS", threads)
        .output()
        .expect("binary runs");
    assert!(
        status.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&status.stderr)
    );
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn criterion_determinism() -> (bool, String) {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let steps: [&[&str]; 3] = [
        &["gen-data", "--preset", "quick", "--seed", "5"],
        &["train", "--preset", "quick", "--seed", "5"],
        &["eval", "--preset", "quick", "--seed", "5"],
    ];
    for (dir, threads) in [(a.path(), "1"), (b.path(), "3")] {
        for s in steps {
            cli_run(dir, threads, s);
        }
    }
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    let names: Vec<&str> = sa.iter().map(|(n, _)| n.as_str()).collect();
    let same = sa == sb && sa.len() == 8;
    (
        same,
        format!(
            "{} artifacts byte-identical across two runs (1 vs 3 threads): {}",
            sa.len(),
            names.join(" ")
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let mut outcomes = Vec::new();
    let secs = Duration::from_secs;

    outcomes.push(run(
        1,
        "Mean-λ exactness",
        Some(secs(5)),
        true,
        criterion_theorem,
    ));
    outcomes.push(run(
        2,
        "Fisher consistency (oracle)",
        Some(secs(5)),
        true,
        criterion_fisher_oracle,
    ));

    let setup = TrainedSetup::new();
    let mixed = std::cell::OnceCell::new();
    outcomes.push(run(
        3,
        "Fisher consistency (trained)",
        Some(secs(120)),
        true,
        || {
            let balpoe = setup.fit(&[1.0, 0.0, -1.0], MixupConfig::with_alpha(0.4));
            let ce = setup.fit(&[1.0], MixupConfig::with_alpha(0.4));
            let gap = balpoe.balanced_error - setup.bayes_ber;
            let ok = gap.abs() <= 0.03 && balpoe.balanced_error <= ce.balanced_error;
            let detail = format!(
                "BER {:.4} vs Bayes {:.4} (|gap| {:.4} ≤ 0.03), plain CE {:.4} (≥ BalPoE)",
                balpoe.balanced_error,
                setup.bayes_ber,
                gap.abs(),
                ce.balanced_error
            );
            let _ = mixed.set(balpoe);
            (ok, detail)
        },
    ));
    let mixed = mixed.into_inner().expect("criterion 3 ran");

    outcomes.push(run(
        4,
        "λ̄-sweep minimum at 0",
        Some(secs(600)),
        true,
        || {
            let shifts = [-1.0, -0.5, 0.0, 0.5, 1.0];
            let bers: Vec<f64> = shifts
                .iter()
                .map(|&d| {
                    if d == 0.0 {
                        mixed.balanced_error
                    } else {
                        setup
                            .fit(&[1.0 + d, d, -1.0 + d], MixupConfig::with_alpha(0.4))
                            .balanced_error
                    }
                })
                .collect();
            let best = bers
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap();
            let detail = shifts
                .iter()
                .zip(&bers)
                .map(|(d, b)| format!("λ̄={d:+}: {b:.4}"))
                .collect::<Vec<_>>()
                .join(", ");
            (
                shifts[best] == 0.0,
                format!("argmin λ̄ = {:+}; {detail}", shifts[best]),
            )
        },
    ));

    outcomes.push(run(
        5,
        "Gradient correctness",
        Some(secs(10)),
        true,
        criterion_gradients,
    ));
    outcomes.push(run(
        6,
        "Calibration metrics",
        Some(secs(5)),
        true,
        criterion_calibration,
    ));
    outcomes.push(run(
        7,
        "Mixup prior preservation",
        Some(secs(10)),
        true,
        criterion_mixup_prior,
    ));
    outcomes.push(run(
        8,
        "Known-prior posthoc adjustment",
        Some(secs(60)),
        true,
        criterion_posthoc,
    ));

    outcomes.push(run(
        9,
        "Expert-marginal diagnostic (non-blocking)",
        Some(secs(300)),
        false,
        || {
            let plain = setup.fit(&[1.0, 0.0, -1.0], MixupConfig::disabled());
            let mut ok = true;
            let parts: Vec<String> = mixed
                .experts
                .iter()
                .zip(&plain.experts)
                .map(|(m, p)| {
                    let smaller = m.kl_target_vs_marginal < p.kl_target_vs_marginal;
                    ok &= smaller;
                    format!(
                        "λ={:+}: KL α=0.4 {:.4} vs α=0 {:.4}{}",
                        m.lambda[0],
                        m.kl_target_vs_marginal,
                        p.kl_target_vs_marginal,
                        if smaller { "" } else { " (not smaller)" }
                    )
                })
                .collect();
            (ok, parts.join(", "))
        },
    ));

    outcomes.push(run(
        10,
        "CLI determinism",
        None,
        true,
        criterion_determinism,
    ));

    let failed: Vec<u32> = outcomes
        .iter()
        .filter(|o| o.blocking && !o.passed)
        .map(|o| o.id)
        .collect();
    let advisory: Vec<u32> = outcomes
        .iter()
        .filter(|o| !o.blocking && !o.passed)
        .map(|o| o.id)
        .collect();
    println!(
        "{} of {} criteria passed; blocking failures {:?}; non-blocking failures {:?}",
        outcomes.iter().filter(|o| o.passed).count(),
        outcomes.len(),
        failed,
        advisory
    );
    assert!(failed.is_empty(), "acceptance criteria failed: {failed:?}");
}

#[test]
fn helpers_are_sane() {
    // the relative error used by the gradient checks
    assert_eq!(rel_err(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
    assert!((rel_err(&[1.0, 0.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
    let g = numeric_grad(&[0.3, -1.2], 1e-5, |x| x[0] * x[0] + 3.0 * x[1]);
    assert!((g[0] - 0.6).abs() < 1e-9 && (g[1] - 3.0).abs() < 1e-9);
}
