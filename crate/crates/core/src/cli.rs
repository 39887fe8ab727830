//! Command-line driver: `gen-data`, `train`, `eval`, `verify-theorem`, `report`.
//!
//! Exit codes: 0 success, 1 usage/config/I/O error, 2 numeric or training
//! failure, 3 verification tolerance exceeded.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{derive_seed, DatasetSpec, ExperimentConfig, SeedPurpose};
use crate::data::{
    read_csv, rng_for, sample_dataset, write_csv, write_meta, Dataset, DatasetMeta, GeneratorSpec,
    RESAMPLING_RULE, RNG_ALGORITHM,
};
use crate::ensemble::{verify_theorem1, OracleEnsemble, Scorer, TrainedEnsemble};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, standard_targets, EvalOptions, EvalReport, ReliabilityBins};
use crate::model::{EpochRecord, Model, TrainConfig, TrainState, Trainer};
use crate::priors::{EnsembleSpec, LabelDistribution, LambdaVector};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

const CHECKPOINT_FORMAT: &str = "logit-experts/checkpoint";
const EVAL_FORMAT: &str = "logit-experts/eval-report";
const THEOREM_FORMAT: &str = "logit-experts/theorem-report";
const ARTIFACT_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(
    name = "logit-experts",
    version,
    about = "Logit-adjusted expert ensembles for long-tailed classification"
)]
pub struct Cli {
    /// Root directory; every other path is relative to it.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write train/test data.csv + meta.json.
    GenData(GenDataArgs),
    /// Train the expert ensemble and write checkpoint.json + loss_trace.csv.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the exact oracle ensemble).
    Eval(EvalArgs),
    /// Check that the oracle ensemble matches the posterior under the mean-λ prior.
    VerifyTheorem(VerifyArgs),
    /// Re-emit reliability.csv from an eval report and print a summary.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ConfigSource {
    /// Experiment config (JSON).
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in config: cifar-like, imagenet-like, quick.
    #[arg(long)]
    pub preset: Option<String>,
    /// Override the top-level seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    pub output_dir: Option<String>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub source: ConfigSource,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub source: ConfigSource,
    /// Override the number of epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Stop after this many epochs in total; the checkpoint can be resumed.
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
    #[arg(long, conflicts_with = "mixup_alpha")]
    pub no_mixup: bool,
    #[arg(long)]
    pub mixup_alpha: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub source: ConfigSource,
    /// Checkpoint to score (default: `<output_dir>/checkpoint.json`).
    #[arg(long, conflicts_with = "oracle")]
    pub checkpoint: Option<PathBuf>,
    /// Score the exact oracle experts of the synthetic mixture instead.
    #[arg(long)]
    pub oracle: bool,
    #[arg(long)]
    pub bins: Option<usize>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub source: ConfigSource,
    #[arg(long)]
    pub points: Option<usize>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub random_sets: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub source: ConfigSource,
    /// Eval report to read (default: `<output_dir>/eval_report.json`).
    #[arg(long)]
    pub eval_report: Option<PathBuf>,
    /// Where to write the CSV (default: next to the report).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// A resolved config plus the command-line overrides applied to it.
struct Resolved {
    cfg: ExperimentConfig,
    hash: String,
    overrides: BTreeMap<String, Value>,
    workdir: PathBuf,
}

impl Resolved {
    fn output_dir(&self) -> PathBuf {
        self.workdir.join(&self.cfg.output_dir)
    }

    fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.workdir.join(rel)
    }
}

fn resolve(
    workdir: &Path,
    src: &ConfigSource,
    extra: impl FnOnce(&mut ExperimentConfig, &mut BTreeMap<String, Value>),
) -> Result<Resolved> {
    let mut cfg = match (&src.config, &src.preset) {
        (Some(p), _) => ExperimentConfig::load(&workdir.join(p))?,
        (None, Some(name)) => ExperimentConfig::preset(name)?,
        (None, None) => {
            return Err(Error::Config(
                "one of --config or --preset is required".into(),
            ))
        }
    };
    let mut overrides = BTreeMap::new();
    if let Some(s) = src.seed {
        cfg.seed = s;
        overrides.insert("seed".into(), Value::from(s));
    }
    if let Some(d) = &src.output_dir {
        cfg.output_dir = d.clone();
        overrides.insert("output_dir".into(), Value::from(d.clone()));
    }
    extra(&mut cfg, &mut overrides);
    cfg.validate()?;
    Ok(Resolved {
        hash: cfg.hash(),
        cfg,
        overrides,
        workdir: workdir.to_path_buf(),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let s = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, s + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::json(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn provenance_line(hash: &str, seed: u64) -> String {
    format!("# config_hash={hash} seed={seed}\n")
}

/// Train and test sets: regenerated for synthetic configs, read otherwise.
fn load_data(r: &Resolved) -> Result<(Dataset, Dataset)> {
    match &r.cfg.dataset {
        DatasetSpec::Synthetic { .. } => Ok(r.cfg.synthetic_data()?.expect("synthetic")),
        DatasetSpec::Csv {
            train,
            test,
            classes,
        } => {
            let tr = read_csv(&r.path(train), *classes)?;
            let c = classes.unwrap_or(tr.num_classes());
            let te = read_csv(&r.path(test), Some(c))?;
            if tr.num_classes() != te.num_classes() || tr.dim() != te.dim() {
                return Err(Error::Config(
                    "train and test CSVs disagree on classes or dim".into(),
                ));
            }
            Ok((tr, te))
        }
    }
}

fn cmd_gen_data(workdir: &Path, args: &GenDataArgs) -> Result<()> {
    let r = resolve(workdir, &args.source, |_, _| {})?;
    let (train, test) = load_data(&r)?;
    let mixture = r.cfg.mixture()?;
    for (split, ds, purpose) in [
        ("train", &train, SeedPurpose::TrainData),
        ("test", &test, SeedPurpose::TestData),
    ] {
        let dir = r.output_dir().join(split);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_csv(ds, &dir.join("data.csv"))?;
        let generator = match (&mixture, split) {
            (Some(m), "train") => Some(GeneratorSpec {
                kind: "gaussian-mixture".into(),
                mixture: m.clone(),
                n: ds.len(),
            }),
            (Some(m), _) => Some(GeneratorSpec {
                kind: "gaussian-mixture".into(),
                mixture: m.with_prior(LabelDistribution::uniform(m.num_classes())?)?,
                n: ds.len(),
            }),
            (None, _) => None,
        };
        let meta = DatasetMeta {
            classes: ds.num_classes(),
            dim: ds.dim(),
            counts: ds.counts().to_vec(),
            seed: generator.as_ref().map(|_| derive_seed(r.cfg.seed, purpose)),
            generator,
            rng: Some(RNG_ALGORITHM.to_string()),
            config_hash: Some(r.hash.clone()),
            resampling: Some(RESAMPLING_RULE.to_string()),
        };
        write_meta(&meta, &dir.join("meta.json"))?;
        eprintln!("wrote {} ({} rows)", dir.display(), ds.len());
    }
    Ok(())
}

/// Everything needed to evaluate or resume a trained ensemble.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub overrides: BTreeMap<String, Value>,
    pub ensemble: EnsembleSpec,
    pub train_prior: LabelDistribution,
    pub train_config: TrainConfig,
    pub state: TrainState,
}

fn loss_trace_csv(hash: &str, seed: u64, trace: &[EpochRecord]) -> String {
    let mut s = provenance_line(hash, seed);
    s.push_str("epoch,split,loss,accuracy\n");
    for r in trace {
        let _ = writeln!(s, "{},{},{:?},{:?}", r.epoch, r.split, r.loss, r.accuracy);
    }
    s
}

fn cmd_train(workdir: &Path, args: &TrainArgs) -> Result<()> {
    let r = resolve(workdir, &args.source, |cfg, ov| {
        if let Some(e) = args.epochs {
            cfg.train.epochs = e;
            ov.insert("train.epochs".into(), Value::from(e));
        }
        if args.no_mixup {
            cfg.mixup.enabled = false;
            ov.insert("mixup.enabled".into(), Value::from(false));
        }
        if let Some(a) = args.mixup_alpha {
            cfg.mixup.enabled = true;
            cfg.mixup.alpha = a;
            ov.insert("mixup.alpha".into(), Value::from(a));
        }
    })?;
    let (train, _) = load_data(&r)?;
    let c = train.num_classes();
    let spec = r.cfg.ensemble.build(c)?;
    let tcfg = r.cfg.train_config();
    let ckpt_path = r.output_dir().join("checkpoint.json");

    let trainer = Trainer::new(&train, &spec, &tcfg)?;
    let state = if args.resume {
        let ck: Checkpoint = read_json(&ckpt_path)?;
        if ck.config_hash != r.hash {
            return Err(Error::Config(format!(
                "{}: checkpoint config hash {} differs from current {}",
                ckpt_path.display(),
                ck.config_hash,
                r.hash
            )));
        }
        ck.state
    } else {
        let shape = r.cfg.model_shape(train.dim(), c, spec.len());
        let mut rng = rng_for(derive_seed(r.cfg.seed, SeedPurpose::Init), 0);
        trainer.start(Model::init(shape, &mut rng)?)?
    };
    let until = args.max_epochs.unwrap_or(tcfg.epochs);
    let state = trainer.run(state, until)?;

    let ck = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: ARTIFACT_VERSION,
        config_hash: r.hash.clone(),
        seed: r.cfg.seed,
        overrides: r.overrides.clone(),
        ensemble: spec,
        train_prior: train.empirical_prior()?,
        train_config: tcfg,
        state,
    };
    write_json(&ckpt_path, &ck)?;
    write_text(
        &r.output_dir().join("loss_trace.csv"),
        &loss_trace_csv(&r.hash, r.cfg.seed, &ck.state.trace),
    )?;
    match ck.state.trace.last() {
        Some(last) => println!(
            "epoch {}/{}: loss {:.6} train accuracy {:.4}",
            ck.state.epochs_done, ck.train_config.epochs, last.loss, last.accuracy
        ),
        None => println!("no epochs run"),
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalArtifact {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub rng: String,
    pub overrides: BTreeMap<String, Value>,
    pub mode: String,
    pub checkpoint_config_hash: Option<String>,
    pub report: EvalReport,
}

fn reliability_csv(hash: &str, seed: u64, bins: &ReliabilityBins) -> String {
    provenance_line(hash, seed) + &bins.to_csv()
}

fn cmd_eval(workdir: &Path, args: &EvalArgs) -> Result<()> {
    let r = resolve(workdir, &args.source, |cfg, ov| {
        if let Some(b) = args.bins {
            cfg.eval.bins = b;
            ov.insert("eval.bins".into(), Value::from(b));
        }
    })?;
    let (train, test) = load_data(&r)?;
    let targets = standard_targets(train.counts(), &r.cfg.eval.shifted_irs)?;
    let opts = EvalOptions {
        bins: r.cfg.eval.bins,
        known_prior: r.cfg.eval.known_prior,
        train_counts: train.counts().to_vec(),
        seed: derive_seed(r.cfg.seed, SeedPurpose::Eval),
    };

    let (mode, ck_hash, report) = if args.oracle {
        let mix = r
            .cfg
            .mixture()?
            .ok_or_else(|| Error::Config("--oracle needs a synthetic dataset".into()))?;
        let spec = r.cfg.ensemble.build(mix.num_classes())?;
        let scorer = OracleEnsemble::new(mix, spec)?;
        ("oracle", None, evaluate(&scorer, &test, &targets, &opts)?)
    } else {
        let path = match &args.checkpoint {
            Some(p) => r.path(p),
            None => r.output_dir().join("checkpoint.json"),
        };
        let ck: Checkpoint = read_json(&path)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!(
                "{}: not a checkpoint",
                path.display()
            )));
        }
        let scorer = TrainedEnsemble::new(ck.state.model, ck.ensemble, &ck.train_prior)?;
        if scorer.num_classes() != test.num_classes() {
            return Err(Error::Config(
                "checkpoint class count differs from the test set".into(),
            ));
        }
        let report = evaluate(&scorer, &test, &targets, &opts)?;
        ("checkpoint", Some(ck.config_hash), report)
    };

    let art = EvalArtifact {
        format: EVAL_FORMAT.into(),
        version: ARTIFACT_VERSION,
        config_hash: r.hash.clone(),
        seed: r.cfg.seed,
        rng: RNG_ALGORITHM.into(),
        overrides: r.overrides.clone(),
        mode: mode.into(),
        checkpoint_config_hash: ck_hash,
        report,
    };
    write_json(&r.output_dir().join("eval_report.json"), &art)?;
    write_text(
        &r.output_dir().join("reliability.csv"),
        &reliability_csv(&r.hash, r.cfg.seed, &art.report.reliability),
    )?;
    print!("{}", summarize(&art));
    Ok(())
}

fn summarize(art: &EvalArtifact) -> String {
    let rep = &art.report;
    let mut s = String::new();
    let _ = writeln!(s, "mode {} on {} test points", art.mode, rep.n_test);
    let _ = writeln!(
        s,
        "accuracy {:.4}  balanced error {:.4}  ECE {:.4}  MCE {:.4}",
        rep.accuracy, rep.balanced_error, rep.ece, rep.mce
    );
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |a| format!("{a:.4}"));
    let g = &rep.group_accuracy;
    let _ = writeln!(
        s,
        "groups: many {} medium {} few {}",
        fmt(g.many),
        fmt(g.medium),
        fmt(g.few)
    );
    for t in &rep.shifted {
        let _ = writeln!(
            s,
            "{:<14} n={:<6} accuracy {:.4}  adjusted {}",
            t.name,
            t.n,
            t.accuracy,
            fmt(t.adjusted_accuracy)
        );
    }
    s
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LambdaSetResult {
    pub lambdas: Vec<Vec<f64>>,
    pub lambda_bar: Vec<f64>,
    pub max_deviation: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoremArtifact {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub rng: String,
    pub overrides: BTreeMap<String, Value>,
    pub n_points: usize,
    pub tolerance: f64,
    pub lambda_sets: Vec<LambdaSetResult>,
    pub max_deviation: f64,
    pub passed: bool,
}

fn cmd_verify(workdir: &Path, args: &VerifyArgs) -> Result<()> {
    let r = resolve(workdir, &args.source, |cfg, ov| {
        if let Some(p) = args.points {
            cfg.verify.points = p;
            ov.insert("verify.points".into(), Value::from(p));
        }
        if let Some(t) = args.tolerance {
            cfg.verify.tolerance = t;
            ov.insert("verify.tolerance".into(), Value::from(t));
        }
        if let Some(k) = args.random_sets {
            cfg.verify.random_sets = k;
            ov.insert("verify.random_sets".into(), Value::from(k));
        }
    })?;
    let mix = r
        .cfg
        .mixture()?
        .ok_or_else(|| Error::Config("verify-theorem needs a synthetic dataset".into()))?;
    let c = mix.num_classes();
    let seed = derive_seed(r.cfg.seed, SeedPurpose::Verify);
    let points = sample_dataset(&mix, r.cfg.verify.points, seed)?;

    let mut sets: Vec<Vec<LambdaVector>> = vec![r.cfg.ensemble.build(c)?.experts().to_vec()];
    let mut rng = rng_for(seed, 1);
    for _ in 0..r.cfg.verify.random_sets {
        let k = rng.random_range(1..=7);
        let set = (0..k)
            .map(|_| LambdaVector::constant(c, rng.random_range(-2.0..2.0)))
            .collect::<Result<Vec<_>>>()?;
        sets.push(set);
    }
    let results = sets
        .iter()
        .map(|set| {
            let spec = crate::priors::make_ensemble_spec(set.clone())?;
            Ok(LambdaSetResult {
                lambdas: set.iter().map(|l| l.values().to_vec()).collect(),
                lambda_bar: spec.lambda_bar().to_vec(),
                max_deviation: verify_theorem1(&mix, set, points.features())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let max_deviation = results.iter().map(|s| s.max_deviation).fold(0.0, f64::max);
    let tolerance = r.cfg.verify.tolerance;
    let art = TheoremArtifact {
        format: THEOREM_FORMAT.into(),
        version: ARTIFACT_VERSION,
        config_hash: r.hash.clone(),
        seed: r.cfg.seed,
        rng: RNG_ALGORITHM.into(),
        overrides: r.overrides.clone(),
        n_points: points.len(),
        tolerance,
        lambda_sets: results,
        max_deviation,
        passed: max_deviation < tolerance,
    };
    write_json(&r.output_dir().join("theorem_report.json"), &art)?;
    println!(
        "{} λ-sets, {} points: max deviation {:e} (tolerance {:e})",
        art.lambda_sets.len(),
        art.n_points,
        max_deviation,
        tolerance
    );
    if art.passed {
        Ok(())
    } else {
        Err(Error::Verification {
            deviation: max_deviation,
            tolerance,
        })
    }
}

fn cmd_report(workdir: &Path, args: &ReportArgs) -> Result<()> {
    let input = match &args.eval_report {
        Some(p) => workdir.join(p),
        None => resolve(workdir, &args.source, |_, _| {})?
            .output_dir()
            .join("eval_report.json"),
    };
    let art: EvalArtifact = read_json(&input)?;
    if art.format != EVAL_FORMAT {
        return Err(Error::Config(format!(
            "{}: not an eval report",
            input.display()
        )));
    }
    let out = match &args.out {
        Some(p) => workdir.join(p),
        None => input.with_file_name("reliability.csv"),
    };
    write_text(
        &out,
        &reliability_csv(&art.config_hash, art.seed, &art.report.reliability),
    )?;
    print!("{}", summarize(&art));
    Ok(())
}

/// Maps an error to its process exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NumericRange(_) | Error::NonFinite(_) | Error::Divergence { .. } => EXIT_NUMERIC,
        Error::Verification { .. } => EXIT_VERIFY,
        Error::InvalidArgument { .. }
        | Error::Config(_)
        | Error::Io { .. }
        | Error::Json { .. }
        | Error::Parse { .. } => EXIT_USAGE,
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let w = &cli.workdir;
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(w, a),
        Command::Train(a) => cmd_train(w, a),
        Command::Eval(a) => cmd_eval(w, a),
        Command::VerifyTheorem(a) => cmd_verify(w, a),
        Command::Report(a) => cmd_report(w, a),
    }
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
