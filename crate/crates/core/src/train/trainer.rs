//! Training loop, evaluation and prediction.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clear_tensor::{Rng, Tape, Tensor};

use crate::data::augment::{augment, AugmentConfig, AugmentMode};
use crate::data::split::{stratified_split, SplitSpec};
use crate::data::Dataset;
use crate::error::{CoreError, Result};
use crate::metrics::EvalReport;
use crate::model::{forward, Model};
use crate::rap::{edl_loss, DirichletOutput};
use crate::train::adam::{adam_step, AdamState, StepOutcome};
use crate::train::checkpoint::Checkpoint;
use crate::train::config::TrainConfig;
use crate::train::log::{EpochRow, MetricsLog};

const INIT_STREAM: u64 = 0x1a17;
const EPOCH_STREAM: u64 = 0xe90c;
const VAL_SPLIT_STREAM: u64 = 0x7a1;
const EVAL_BATCH: usize = 256;

pub const PREDICT_HEADER: &str = "index,pred,confidence,entropy,total_evidence";

/// Random stream used for shuffling and augmentation in epoch `epoch`
/// (0-based). It depends only on the seed and the epoch, so a resumed run
/// draws the same numbers as an uninterrupted one.
pub fn epoch_rng(seed: u64, epoch: usize) -> Rng {
    Rng::new(seed, EPOCH_STREAM).split(epoch as u64)
}

/// Stacks augmented images `indices` of `ds` into `[B, C, S, S]`.
pub fn batch_tensor(
    ds: &Dataset,
    indices: &[usize],
    aug: &AugmentConfig,
    rng: &mut Rng,
    mode: AugmentMode,
) -> Result<Tensor<f32>> {
    let dims = [ds.channels(), ds.height(), ds.width()];
    let s = aug.output_size;
    let mut data = Vec::with_capacity(indices.len() * dims[0] * s * s);
    for &i in indices {
        data.extend(augment(&ds.image_unit(i), dims, aug, rng, mode));
    }
    Ok(Tensor::new(&[indices.len(), dims[0], s, s], data)?)
}

/// Dirichlet outputs for every image of `ds` under the eval pipeline.
pub fn predict(model: &Model, ds: &Dataset, aug: &AugmentConfig) -> Result<Vec<DirichletOutput>> {
    if ds.channels() != model.cfg.backbone.in_channels {
        return Err(CoreError::input(format!(
            "dataset has {} channels, model expects {}",
            ds.channels(),
            model.cfg.backbone.in_channels
        )));
    }
    // Eval mode draws nothing; the stream only satisfies the signature.
    let mut rng = Rng::new(0, 0);
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut out = Vec::with_capacity(ds.len());
    for chunk in idx.chunks(EVAL_BATCH) {
        let x = batch_tensor(ds, chunk, aug, &mut rng, AugmentMode::Eval)?;
        out.extend(model.predict_batch(&x)?);
    }
    Ok(out)
}

pub fn evaluate(model: &Model, ds: &Dataset, aug: &AugmentConfig) -> Result<EvalReport> {
    if ds.num_classes() != model.cfg.num_classes {
        return Err(CoreError::input(format!(
            "dataset has {} classes, model has {}",
            ds.num_classes(),
            model.cfg.num_classes
        )));
    }
    EvalReport::from_outputs(&predict(model, ds, aug)?, ds.labels(), ds.num_classes())
}

/// `index,pred,confidence,entropy,total_evidence` rows.
pub fn predictions_csv(outputs: &[DirichletOutput]) -> String {
    let mut s = format!("{PREDICT_HEADER}\n");
    for (i, o) in outputs.iter().enumerate() {
        let (conf, h, total) = o.uncertainty_summary();
        s.push_str(&format!("{i},{},{conf},{h},{total}\n", o.label));
    }
    s
}

/// Labels CSV of a dataset as a string.
pub fn labels_csv(ds: &Dataset) -> Result<String> {
    let mut buf = Vec::new();
    ds.write_labels_csv(&mut buf)?;
    String::from_utf8(buf).map_err(|_| CoreError::input("class names are not UTF-8"))
}

/// Holds out `val_fraction` of `train` (stratified, seeded) when no
/// validation set is supplied.
pub fn carve_validation(train: &Dataset, cfg: &TrainConfig) -> Result<(Dataset, Dataset, Vec<String>)> {
    let spec = SplitSpec {
        train_fraction: 1.0 - cfg.val_fraction,
        seed: Rng::new(cfg.seed, VAL_SPLIT_STREAM).next_u64(),
        stratify: true,
    };
    let (mut tr, mut val, warnings) = stratified_split(train, &spec)?;
    tr.set_meta("split", "train");
    val.set_meta("split", "val");
    Ok((tr, val, warnings))
}

/// Mutable training state; [`Checkpoint`] is its serialized form.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub log: MetricsLog,
    pub best_val_oa: f64,
    pub best_epoch: usize,
    pub best_model: Model,
    /// Skipped optimizer steps and similar notices.
    pub events: Vec<String>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, in_channels: usize, num_classes: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(cfg.seed, INIT_STREAM);
        let model = Model::new(cfg.model_config(in_channels, num_classes), &mut rng)?;
        Ok(Trainer {
            adam: AdamState::new(&model.store),
            best_model: model.clone(),
            model,
            cfg,
            epoch: 0,
            log: MetricsLog::default(),
            best_val_oa: f64::NEG_INFINITY,
            best_epoch: 0,
            events: Vec::new(),
        })
    }

    /// Restores the trainer from `last`; `best` supplies the retained
    /// best-validation model if available.
    pub fn from_checkpoint(last: Checkpoint, best: Option<Checkpoint>) -> Result<Self> {
        let cfg = last.config.clone();
        let model = Model::from_store(cfg.model_config(last.in_channels, last.num_classes), last.params)?;
        let best_model = match best {
            Some(b) => Model::from_store(cfg.model_config(b.in_channels, b.num_classes), b.params)?,
            None => model.clone(),
        };
        if last.rng != epoch_rng(cfg.seed, last.epoch).state() {
            return Err(CoreError::input("checkpoint random state does not match its seed and epoch"));
        }
        Ok(Trainer {
            cfg,
            model,
            adam: last.adam,
            epoch: last.epoch,
            log: last.log,
            best_val_oa: last.best_val_oa,
            best_epoch: last.best_epoch,
            best_model,
            events: Vec::new(),
        })
    }

    fn snapshot(&self, model: &Model) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            in_channels: model.cfg.backbone.in_channels,
            num_classes: model.cfg.num_classes,
            epoch: self.epoch,
            params: model.store.clone(),
            adam: self.adam.clone(),
            rng: epoch_rng(self.cfg.seed, self.epoch).state(),
            best_val_oa: self.best_val_oa,
            best_epoch: self.best_epoch,
            log: self.log.clone(),
        }
    }

    /// Current state, for resuming.
    pub fn checkpoint(&self) -> Checkpoint {
        self.snapshot(&self.model)
    }

    /// The retained best-validation parameters with the current counters.
    pub fn best_checkpoint(&self) -> Checkpoint {
        self.snapshot(&self.best_model)
    }

    /// Trains one epoch on `train`, validates on `val` and logs the row.
    pub fn run_epoch(&mut self, train: &Dataset, val: &Dataset) -> Result<EpochRow> {
        let k = self.model.cfg.num_classes;
        if train.num_classes() != k || val.num_classes() != k {
            return Err(CoreError::input(format!(
                "class counts differ: model {k}, train {}, val {}",
                train.num_classes(),
                val.num_classes()
            )));
        }
        if train.is_empty() {
            return Err(CoreError::input("training set is empty"));
        }
        let start = Instant::now();
        let aug = self.cfg.augment_config();
        let mut rng = epoch_rng(self.cfg.seed, self.epoch);
        let order = rng.permutation(train.len());
        let (mut loss_sum, mut lambda_sum) = (0.0, 0.0);
        for (b, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let x = batch_tensor(train, chunk, &aug, &mut rng, AugmentMode::Train)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels()[i]).collect();
            let tape = Tape::new();
            let bound = self.model.store.bind(&tape);
            let out = forward(&tape, &bound, &self.model.cfg, &self.model.params, &x)?;
            let (loss, lambda) = edl_loss(out.alpha, &labels, &self.cfg.rap, self.epoch)?;
            let value = loss.item()? as f64;
            if !value.is_finite() {
                return Err(CoreError::NonFinite {
                    epoch: self.epoch + 1,
                    batch: b,
                    lambda,
                    detail: format!("loss = {value}"),
                });
            }
            let grads = tape.backward(loss)?;
            self.model.store.zero_grad();
            self.model.store.accumulate(&bound, &grads)?;
            if let StepOutcome::Skipped { param } = adam_step(&mut self.model.store, &mut self.adam, &self.cfg.adam)? {
                self.events.push(format!(
                    "epoch {} batch {b}: non-finite gradient in `{param}`, step skipped",
                    self.epoch + 1
                ));
            }
            loss_sum += value * chunk.len() as f64;
            lambda_sum += lambda * chunk.len() as f64;
        }
        let report = evaluate(&self.model, val, &aug)?;
        self.epoch += 1;
        let n = train.len() as f64;
        let row = EpochRow {
            epoch: self.epoch,
            train_loss: loss_sum / n,
            lambda: lambda_sum / n,
            val_oa: report.oa,
            val_f1: report.f1,
            val_auc: report.auc,
            val_ece: report.ece,
            seconds: if self.cfg.log_seconds { start.elapsed().as_secs_f64() } else { 0.0 },
        };
        self.log.push(row.clone())?;
        if row.val_oa > self.best_val_oa {
            self.best_val_oa = row.val_oa;
            self.best_epoch = row.epoch;
            self.best_model = self.model.clone();
        }
        Ok(row)
    }
}

/// Files written by [`train`] into its output directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: &Path) -> Self {
        RunPaths { dir: dir.to_path_buf() }
    }
    pub fn last(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }
    pub fn best(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }
    pub fn events(&self) -> PathBuf {
        self.dir.join("events.log")
    }
    pub fn config(&self) -> PathBuf {
        self.dir.join("config.txt")
    }
    pub fn periodic(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch_{epoch:04}.ckpt"))
    }
}

fn write_outputs(t: &Trainer, paths: &RunPaths) -> Result<()> {
    t.checkpoint().save(&paths.last())?;
    t.best_checkpoint().save(&paths.best())?;
    std::fs::write(paths.metrics(), t.log.to_csv())?;
    Ok(())
}

/// Runs epochs until `trainer.cfg.epochs`, writing `last.ckpt`,
/// `best.ckpt` and `metrics.csv` after every epoch when `out` is given.
/// `progress` sees each logged row.
pub fn train_to_end(
    trainer: &mut Trainer,
    train: &Dataset,
    val: &Dataset,
    out: Option<&Path>,
    mut progress: impl FnMut(&EpochRow),
) -> Result<()> {
    let paths = out.map(RunPaths::new);
    if let Some(p) = &paths {
        std::fs::create_dir_all(&p.dir)?;
        std::fs::write(p.config(), trainer.cfg.to_text())?;
        write_outputs(trainer, p)?;
    }
    while trainer.epoch < trainer.cfg.epochs {
        let row = trainer.run_epoch(train, val)?;
        progress(&row);
        if let Some(p) = &paths {
            write_outputs(trainer, p)?;
            if trainer.cfg.checkpoint_every > 0 && trainer.epoch % trainer.cfg.checkpoint_every == 0 {
                trainer.checkpoint().save(&p.periodic(trainer.epoch))?;
            }
            if !trainer.events.is_empty() {
                std::fs::write(p.events(), trainer.events.join("\n") + "\n")?;
            }
        }
    }
    Ok(())
}

/// Fresh training run; see [`train_to_end`].
pub fn train(cfg: &TrainConfig, train: &Dataset, val: &Dataset, out: Option<&Path>) -> Result<Trainer> {
    let mut t = Trainer::new(cfg.clone(), train.channels(), train.num_classes())?;
    train_to_end(&mut t, train, val, out, |_| {})?;
    Ok(t)
}
