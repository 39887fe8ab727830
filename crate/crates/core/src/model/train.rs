//! Mini-batch SGD with momentum and weight decay over the ensemble loss.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::gla_loss_and_grad;
use super::Model;
use crate::data::{rng_for, Dataset};
use crate::error::{Error, Result};
use crate::mixup::{mix_batch, MixupConfig};
use crate::numeric::{argmax, Matrix};
use crate::par;
use crate::priors::EnsembleSpec;

/// Rows per gradient chunk. Fixed so the reduction order never depends on
/// the number of threads.
const GRAD_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Schedule {
    Constant,
    /// Multiply by `gamma` at each milestone epoch.
    Multistep {
        milestones: Vec<usize>,
        gamma: f64,
    },
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    #[serde(default)]
    pub warmup_epochs: usize,
    pub seed: u64,
    pub mixup: MixupConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 128,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule: Schedule::Cosine,
            warmup_epochs: 5,
            seed: 0,
            mixup: MixupConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid(
                "train",
                "epochs and batch_size must be positive",
            ));
        }
        // lr = 0 is allowed: it freezes the parameters
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::invalid("lr", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay", "must be non-negative"));
        }
        self.mixup.validate()
    }

    /// Learning rate used throughout epoch `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            return self.lr * (epoch + 1) as f64 / self.warmup_epochs as f64;
        }
        match &self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Multistep { milestones, gamma } => {
                let passed = milestones.iter().filter(|&&m| m <= epoch).count();
                self.lr * gamma.powi(passed as i32)
            }
            Schedule::Cosine => {
                let t = epoch as f64 / self.epochs as f64;
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub model: Model,
    pub velocity: Vec<f64>,
    pub epochs_done: usize,
    pub trace: Vec<EpochRecord>,
}

pub struct Trainer<'a> {
    data: &'a Dataset,
    ensemble: &'a EnsembleSpec,
    cfg: &'a TrainConfig,
    taus: Vec<Vec<f64>>,
    log_prior: Vec<f64>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        data: &'a Dataset,
        ensemble: &'a EnsembleSpec,
        cfg: &'a TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::invalid("dataset", "empty training set"));
        }
        if ensemble.num_classes() != data.num_classes() {
            return Err(Error::invalid(
                "ensemble",
                format!(
                    "λ-vectors have {} classes, dataset has {}",
                    ensemble.num_classes(),
                    data.num_classes()
                ),
            ));
        }
        Ok(Trainer {
            data,
            ensemble,
            cfg,
            taus: ensemble.experts().iter().map(|l| l.tau()).collect(),
            log_prior: data.empirical_prior()?.log_probs(),
        })
    }

    pub fn start(&self, model: Model) -> Result<TrainState> {
        self.check_model(&model)?;
        Ok(TrainState {
            velocity: vec![0.0; model.params().len()],
            model,
            epochs_done: 0,
            trace: Vec::new(),
        })
    }

    fn check_model(&self, model: &Model) -> Result<()> {
        let s = model.shape();
        if s.experts != self.ensemble.len() {
            return Err(Error::invalid(
                "model",
                format!("{} heads for {} experts", s.experts, self.ensemble.len()),
            ));
        }
        if s.classes != self.data.num_classes() || s.input_dim != self.data.dim() {
            return Err(Error::invalid("model", "shape does not match the dataset"));
        }
        Ok(())
    }

    /// Trains until `until` epochs are done (capped at `cfg.epochs`).
    pub fn run(&self, mut state: TrainState, until: usize) -> Result<TrainState> {
        self.check_model(&state.model)?;
        let until = until.min(self.cfg.epochs);
        while state.epochs_done < until {
            self.epoch(&mut state)?;
        }
        Ok(state)
    }

    fn epoch(&self, state: &mut TrainState) -> Result<()> {
        let epoch = state.epochs_done;
        let lr = self.cfg.lr_at(epoch);
        let mut rng = rng_for(self.cfg.seed, 1 + epoch as u64);
        let n = self.data.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for (batch_idx, idx) in order.chunks(self.cfg.batch_size).enumerate() {
            let batch = self.data.subset(idx);
            let mixed = mix_batch(
                batch.features(),
                batch.labels(),
                self.data.num_classes(),
                &self.cfg.mixup,
                &mut rng,
            )?;
            let diverged = |loss| Error::Divergence {
                epoch,
                batch: batch_idx,
                loss,
            };
            let (loss, mut grad) = self
                .batch_gradient(&state.model, &mixed.features, &mixed.soft_labels)
                .map_err(|e| match e {
                    Error::NonFinite(_) => diverged(f64::NAN),
                    e => e,
                })?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    batch: batch_idx,
                    loss,
                });
            }
            loss_sum += loss * idx.len() as f64;

            let params = state.model.params_mut();
            let wd = self.cfg.weight_decay;
            let mu = self.cfg.momentum;
            for ((p, g), v) in params
                .iter_mut()
                .zip(grad.iter_mut())
                .zip(&mut state.velocity)
            {
                *g += wd * *p;
                *v = mu * *v + *g;
                *p -= lr * *v;
            }
            if params.iter().any(|p| !p.is_finite()) {
                return Err(diverged(loss));
            }
        }

        let accuracy = training_accuracy(&state.model, self.data)?;
        state.trace.push(EpochRecord {
            epoch: epoch + 1,
            split: "train".to_string(),
            loss: loss_sum / n as f64,
            accuracy,
        });
        state.epochs_done += 1;
        Ok(())
    }

    /// Mean ensemble loss over the batch and its gradient.
    pub fn batch_gradient(
        &self,
        model: &Model,
        features: &Matrix,
        targets: &Matrix,
    ) -> Result<(f64, Vec<f64>)> {
        let b = features.rows();
        let k = self.ensemble.len() as f64;
        let scale = 1.0 / (k * b as f64);
        let parts = par::map_chunks(b, GRAD_CHUNK, |range| -> Result<(f64, Vec<f64>)> {
            let idx: Vec<usize> = range.collect();
            let x = features.select_rows(&idx);
            let cache = model.forward_cached(&x)?;
            let mut loss = 0.0;
            let dlogits: Vec<Matrix> = cache
                .logits
                .iter()
                .zip(&self.taus)
                .map(|(logits, tau)| {
                    let mut d = Matrix::zeros(idx.len(), logits.cols());
                    for (r, &i) in idx.iter().enumerate() {
                        let (l, g) =
                            gla_loss_and_grad(logits.row(r), targets.row(i), tau, &self.log_prior);
                        loss += l;
                        for (o, gv) in d.row_mut(r).iter_mut().zip(g) {
                            *o = gv * scale;
                        }
                    }
                    d
                })
                .collect();
            Ok((loss, model.backward(&x, &cache, &dlogits)))
        });
        let mut total = 0.0;
        let mut grad = vec![0.0; model.params().len()];
        for part in parts {
            let (l, g) = part?;
            total += l;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        Ok((total * scale, grad))
    }
}

/// Accuracy of the combined (log-space mean) logits on clean data.
fn training_accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    let logits = crate::ensemble::model_combined_logits(model, data.features())?;
    let correct = logits
        .iter_rows()
        .zip(data.labels())
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Trains `model` from scratch for `cfg.epochs` epochs.
pub fn train(
    model: Model,
    data: &Dataset,
    ensemble: &EnsembleSpec,
    cfg: &TrainConfig,
) -> Result<TrainState> {
    let trainer = Trainer::new(data, ensemble, cfg)?;
    let state = trainer.start(model)?;
    trainer.run(state, cfg.epochs)
}
