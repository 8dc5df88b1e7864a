//! Optimization: Adam with global-norm clipping on the permutation-invariant
//! SI-SDR objective, checkpoints, metric logs and evaluation.
//!
//! Training is single-threaded and every source of randomness is seeded, so
//! a run is fully determined by its seed, configuration and data. The
//! shuffling generator, optimizer moments and the position inside the current
//! epoch are all checkpointed, which makes resuming equivalent to never
//! having stopped.

mod adam;
mod checkpoint;
mod eval;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, clip_global_norm, AdamConfig, OptimizerState, StepNorms};
pub use checkpoint::{
    checkpoint_exists, load_checkpoint, save_checkpoint, Checkpoint, TrainingProgress, BLOB_FILE,
    HEADER_FILE,
};
pub use eval::{evaluate, score_item, EvaluationReport, ItemScore, Separator};

use crate::autodiff::{Float, Tape, Tensor};
use crate::datagen::{Dataset, DatasetItem};
use crate::dsp::MagnitudeSpectrogram;
use crate::error::{Error, Result};
use crate::model::{spectral_input, BoundParams, ConSep, ConSepConfig, ModelParams};
use crate::objectives::{upit, upit_with_grad};

/// Subdirectory of a training output holding the latest checkpoint.
pub const LAST_DIR: &str = "last";
/// Subdirectory of a training output holding the best checkpoint.
pub const BEST_DIR: &str = "best";
/// JSON-lines metric log of a training output, one record per epoch.
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Fresh parameters for `cfg` drawn from `seed`.
pub fn init_params<F: Float>(cfg: &ConSepConfig, seed: u64) -> Result<ModelParams<F>> {
    ModelParams::init(cfg, seed)
}

/// Outcome of one optimization step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    /// Step count after this update.
    pub step: u64,
    pub item: String,
    pub loss: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

/// One line of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub mean_loss: f64,
    pub valid_si_sdri: Option<f64>,
}

/// Hooks called by [`Trainer::run`].
pub trait TrainObserver<F> {
    fn on_step(&mut self, _report: &StepReport) -> Result<()> {
        Ok(())
    }

    fn on_epoch(
        &mut self,
        _record: &EpochRecord,
        _is_best: bool,
        _trainer: &Trainer<F>,
    ) -> Result<()> {
        Ok(())
    }
}

impl<F> TrainObserver<F> for () {}

/// Why [`Trainer::run`] returned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunEnd {
    Completed,
    StepLimit,
}

fn tag_item(id: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Numeric(m) => Error::Numeric(format!("item '{id}': {m}")),
        other => other,
    }
}

/// Model, optimizer and progress of one training run.
#[derive(Debug, Clone)]
pub struct Trainer<F> {
    model: ConSep<F>,
    optimizer: OptimizerState<F>,
    progress: TrainingProgress,
}

impl<F: Float> Trainer<F> {
    pub fn new(config: ConSepConfig, seed: u64, adam: AdamConfig) -> Result<Self> {
        let model = ConSep::init(config, seed)?;
        let optimizer = OptimizerState::new(model.params(), adam);
        Ok(Self {
            model,
            optimizer,
            progress: TrainingProgress::new(seed),
        })
    }

    /// Continues from a checkpoint; one without optimizer state starts with
    /// zero moments and default hyperparameters.
    pub fn from_checkpoint(ckpt: Checkpoint<F>) -> Result<Self> {
        let model = ConSep::new(ckpt.config, ckpt.params)?;
        let optimizer = ckpt
            .optimizer
            .unwrap_or_else(|| OptimizerState::new(model.params(), AdamConfig::default()));
        Ok(Self {
            model,
            optimizer,
            progress: ckpt.progress,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint<F> {
        Checkpoint {
            config: self.model.config().clone(),
            params: self.model.params().clone(),
            optimizer: Some(self.optimizer.clone()),
            progress: self.progress.clone(),
        }
    }

    pub fn model(&self) -> &ConSep<F> {
        &self.model
    }

    pub fn optimizer(&self) -> &OptimizerState<F> {
        &self.optimizer
    }

    pub fn progress(&self) -> &TrainingProgress {
        &self.progress
    }

    fn references(item: &DatasetItem, len: usize, k: usize) -> Result<Vec<&[f64]>> {
        if item.references.len() != k {
            return Err(Error::invalid(format!(
                "item '{}' has {} references, model separates {k}",
                item.id,
                item.references.len()
            )));
        }
        Ok(item
            .references
            .iter()
            .map(|r| &r.samples()[..len])
            .collect())
    }

    /// Permutation-invariant loss of the current model on one item, without
    /// updating anything.
    pub fn item_loss(
        &self,
        item: &DatasetItem,
        spectrogram: Option<&MagnitudeSpectrogram>,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let p = BoundParams::constants(&mut tape, self.model.params());
        let pass = self
            .model
            .forward(&mut tape, &p, &item.mixture, spectrogram)
            .map_err(tag_item(&item.id))?;
        let est = tape.value(pass.estimates).to_f64_vec();
        let ests: Vec<&[f64]> = est.chunks(pass.trimmed_len).collect();
        let refs = Self::references(item, pass.trimmed_len, ests.len())?;
        Ok(upit(&ests, &refs)?.loss)
    }

    /// One forward/backward pass on `item` followed by an Adam update.
    pub fn step(
        &mut self,
        item: &DatasetItem,
        spectrogram: Option<&MagnitudeSpectrogram>,
    ) -> Result<StepReport> {
        let mut tape = Tape::new();
        let p = BoundParams::leaves(&mut tape, self.model.params());
        let pass = self
            .model
            .forward(&mut tape, &p, &item.mixture, spectrogram)
            .map_err(tag_item(&item.id))?;
        let len = pass.trimmed_len;
        let est = tape.value(pass.estimates).to_f64_vec();
        let ests: Vec<&[f64]> = est.chunks(len).collect();
        let refs = Self::references(item, len, ests.len())?;
        let (result, grads) = upit_with_grad(&ests, &refs)?;
        if !result.loss.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite loss on item '{}'",
                item.id
            )));
        }
        let seed = Tensor::from_f64(&[ests.len(), len], &grads.concat())?;
        let mut g = tape
            .backward_seeded(pass.estimates, seed)
            .map_err(tag_item(&item.id))?;
        let grads: IndexMap<String, Tensor<F>> = p
            .iter()
            .filter_map(|(name, var)| g.take(var).map(|t| (name.to_string(), t)))
            .collect();
        let norms = adam_step(self.model.params_mut(), grads, &mut self.optimizer)
            .map_err(tag_item(&item.id))?;
        self.progress.step += 1;
        Ok(StepReport {
            step: self.progress.step,
            item: item.id.clone(),
            loss: result.loss,
            grad_norm: norms.grad_norm,
            clipped_norm: norms.clipped_norm,
        })
    }

    /// Spectrogram inputs of every item, when the model uses them.
    pub fn prepare(&self, data: &Dataset) -> Result<Vec<Option<MagnitudeSpectrogram>>> {
        let cfg = self.model.config();
        data.items()
            .iter()
            .map(|item| {
                cfg.uses_spectrogram()
                    .then(|| spectral_input(cfg, &item.mixture))
                    .transpose()
            })
            .collect()
    }

    /// Mean SI-SDR improvement of the current model over `data`.
    pub fn mean_si_sdri(&self, data: &Dataset) -> Result<f64> {
        let scores = evaluate(&self.model, data)?;
        Ok(scores.iter().map(|s| s.si_sdri).sum::<f64>() / scores.len() as f64)
    }

    /// Trains until `epochs` epochs are complete or the total step count
    /// reaches `max_steps`.
    ///
    /// Each epoch visits the training items once in a freshly shuffled order
    /// with batch size 1, then scores `valid` (if non-empty). The epoch is
    /// marked best when its validation SI-SDRi (or, without validation data,
    /// its negated mean loss) beats every earlier epoch.
    pub fn run(
        &mut self,
        train: &Dataset,
        valid: &Dataset,
        epochs: usize,
        max_steps: Option<u64>,
        observer: &mut dyn TrainObserver<F>,
    ) -> Result<RunEnd> {
        if self.progress.epoch >= epochs {
            return Ok(RunEnd::Completed);
        }
        if train.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        if !self.progress.order.is_empty() && self.progress.order.len() != train.len() {
            return Err(Error::invalid(format!(
                "checkpoint was taken mid-epoch over {} items, training set has {}",
                self.progress.order.len(),
                train.len()
            )));
        }
        let spectra = self.prepare(train)?;
        while self.progress.epoch < epochs {
            if self.progress.order.is_empty() {
                let mut order: Vec<usize> = (0..train.len()).collect();
                order.shuffle(&mut self.progress.rng);
                self.progress.order = order;
                self.progress.cursor = 0;
                self.progress.epoch_loss_sum = 0.0;
            }
            while self.progress.cursor < self.progress.order.len() {
                if max_steps.is_some_and(|m| self.progress.step >= m) {
                    return Ok(RunEnd::StepLimit);
                }
                let idx = self.progress.order[self.progress.cursor];
                let report = self.step(&train.items()[idx], spectra[idx].as_ref())?;
                self.progress.epoch_loss_sum += report.loss;
                self.progress.cursor += 1;
                observer.on_step(&report)?;
            }
            let valid_si_sdri = if valid.is_empty() {
                None
            } else {
                Some(self.mean_si_sdri(valid)?)
            };
            let mean_loss = self.progress.epoch_loss_sum / train.len() as f64;
            self.progress.epoch += 1;
            self.progress.order.clear();
            self.progress.cursor = 0;
            self.progress.epoch_loss_sum = 0.0;
            let score = valid_si_sdri.unwrap_or(-mean_loss);
            let is_best = self.progress.best_score.map_or(true, |b| score > b);
            if is_best {
                self.progress.best_score = Some(score);
            }
            let record = EpochRecord {
                epoch: self.progress.epoch,
                step: self.progress.step,
                mean_loss,
                valid_si_sdri,
            };
            log::info!(
                "epoch {} step {} loss {:.4} valid SI-SDRi {:?}",
                record.epoch,
                record.step,
                record.mean_loss,
                record.valid_si_sdri
            );
            observer.on_epoch(&record, is_best, self)?;
        }
        Ok(RunEnd::Completed)
    }
}

/// Run length and optimizer settings of [`train_to_dir`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub max_steps: Option<u64>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 1,
            seed: 0,
            adam: AdamConfig::default(),
            max_steps: None,
        }
    }
}

/// What [`train_to_dir`] did.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub resumed: bool,
    pub epochs: usize,
    pub steps: u64,
    pub end: RunEnd,
}

/// Reads the metric log of a training output.
pub fn read_metrics(out: &Path) -> Result<Vec<EpochRecord>> {
    let path = out.join(METRICS_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::format(format!("{}: {e}", path.display())))
        })
        .collect()
}

fn write_metrics(out: &Path, records: &[EpochRecord]) -> Result<()> {
    let path = out.join(METRICS_FILE);
    let text: String = records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect();
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

struct DirectoryObserver<'a> {
    out: &'a Path,
}

impl<F: Float> TrainObserver<F> for DirectoryObserver<'_> {
    fn on_step(&mut self, report: &StepReport) -> Result<()> {
        log::debug!(
            "step {} item {} loss {:.4}",
            report.step,
            report.item,
            report.loss
        );
        Ok(())
    }

    fn on_epoch(
        &mut self,
        record: &EpochRecord,
        is_best: bool,
        trainer: &Trainer<F>,
    ) -> Result<()> {
        let path = self.out.join(METRICS_FILE);
        let mut file = OpenOptions::new()
            .append(true)
            .create(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let line = serde_json::to_string(record).expect("record serializes");
        writeln!(file, "{line}").map_err(|e| Error::io(&path, e))?;
        let ckpt = trainer.checkpoint();
        save_checkpoint(&self.out.join(LAST_DIR), &ckpt)?;
        if is_best {
            save_checkpoint(&self.out.join(BEST_DIR), &ckpt)?;
        }
        Ok(())
    }
}

/// Trains into directory `out`: `last/` and `best/` checkpoints plus the
/// metric log.
///
/// If `out/last` already holds a checkpoint, training resumes from it (the
/// configuration must match) and the metric log is cut back to the epochs
/// that checkpoint has seen.
pub fn train_to_dir<F: Float>(
    config: &ConSepConfig,
    train: &Dataset,
    valid: &Dataset,
    settings: &TrainSettings,
    out: &Path,
) -> Result<TrainSummary> {
    config.validate()?;
    let last = out.join(LAST_DIR);
    let resumed = checkpoint_exists(&last);
    let mut trainer = if resumed {
        let ckpt = load_checkpoint::<F>(&last)?;
        if ckpt.config != *config {
            return Err(Error::invalid(format!(
                "{} holds a checkpoint with a different configuration",
                last.display()
            )));
        }
        let trainer = Trainer::from_checkpoint(ckpt)?;
        let mut records = read_metrics(out).unwrap_or_default();
        records.truncate(trainer.progress().epoch);
        write_metrics(out, &records)?;
        log::info!(
            "resuming at epoch {} step {}",
            trainer.progress().epoch,
            trainer.progress().step
        );
        trainer
    } else {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let trainer = Trainer::<F>::new(config.clone(), settings.seed, settings.adam)?;
        write_metrics(out, &[])?;
        save_checkpoint(&last, &trainer.checkpoint())?;
        save_checkpoint(&out.join(BEST_DIR), &trainer.checkpoint())?;
        trainer
    };
    let mut observer = DirectoryObserver { out };
    let end = trainer.run(
        train,
        valid,
        settings.epochs,
        settings.max_steps,
        &mut observer,
    )?;
    save_checkpoint(&last, &trainer.checkpoint())?;
    Ok(TrainSummary {
        resumed,
        epochs: trainer.progress().epoch,
        steps: trainer.progress().step,
        end,
    })
}
