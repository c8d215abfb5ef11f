//! Two-phase training: head-only warm-up, then full fine-tuning with
//! per-epoch exponential decay and early stopping on validation loss.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{bce_with_logits, sigmoid};
use super::model::{adam_step, predict_logits, ModelState};
use super::{NnError, Result, Scalar, Tensor};
use crate::augment::{augment_tile, AugmentConfig};
use crate::rng::{domain, stream_rng};
use crate::tiler::{ClassLabel, Raster};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhaseOne {
    pub epochs: u32,
    pub lr: f64,
}

impl Default for PhaseOne {
    fn default() -> Self {
        PhaseOne { epochs: 2, lr: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhaseTwo {
    pub epochs: u32,
    pub lr0: f64,
    /// Multiplicative decay applied after every phase-two epoch.
    pub gamma: f64,
}

impl Default for PhaseTwo {
    fn default() -> Self {
        PhaseTwo {
            epochs: 25,
            lr0: 1e-5,
            gamma: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EarlyStopping {
    pub patience: u32,
    pub restore_best: bool,
}

impl Default for EarlyStopping {
    fn default() -> Self {
        EarlyStopping {
            patience: 5,
            restore_best: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub phase1: PhaseOne,
    pub phase2: PhaseTwo,
    pub early_stopping: EarlyStopping,
    pub batch_size: usize,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            phase1: PhaseOne::default(),
            phase2: PhaseTwo::default(),
            early_stopping: EarlyStopping::default(),
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Backbone frozen, head trained.
    HeadOnly,
    Full,
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NnError::InvalidSchedule(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.early_stopping.patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(self.phase1.lr.is_finite() && self.phase1.lr > 0.0 && self.phase2.lr0.is_finite() && self.phase2.lr0 > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.phase2.gamma > 0.0 && self.phase2.gamma <= 1.0) {
            return bad("gamma must be in (0, 1]");
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> u32 {
        self.phase1.epochs + self.phase2.epochs
    }

    /// Phase and learning rate of a zero-based global epoch.
    pub fn at(&self, epoch: u32) -> (Phase, f64) {
        if epoch < self.phase1.epochs {
            (Phase::HeadOnly, self.phase1.lr)
        } else {
            let k = (epoch - self.phase1.epochs) as i32;
            (Phase::Full, self.phase2.lr0 * self.phase2.gamma.powi(k))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub phase: Phase,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

/// Everything needed to continue an interrupted run exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainProgress<T> {
    pub history: Vec<EpochRecord>,
    pub best_val_loss: Option<f64>,
    pub best_epoch: Option<u32>,
    pub best_params: Option<Vec<Vec<T>>>,
    /// Consecutive epochs without validation improvement.
    pub bad_epochs: u32,
    pub stopped_early: bool,
    pub finished: bool,
}

impl<T> Default for TrainProgress<T> {
    fn default() -> Self {
        TrainProgress {
            history: Vec::new(),
            best_val_loss: None,
            best_epoch: None,
            best_params: None,
            bad_epochs: 0,
            stopped_early: false,
            finished: false,
        }
    }
}

impl<T: Scalar> TrainProgress<T> {
    pub(crate) fn cast<U: Scalar>(&self) -> TrainProgress<U> {
        TrainProgress {
            history: self.history.clone(),
            best_val_loss: self.best_val_loss,
            best_epoch: self.best_epoch,
            best_params: self
                .best_params
                .as_ref()
                .map(|p| p.iter().map(|t| t.iter().map(|&x| U::of(x.f64())).collect()).collect()),
            bad_epochs: self.bad_epochs,
            stopped_early: self.stopped_early,
            finished: self.finished,
        }
    }

    /// Records an epoch and returns whether training should stop. The best
    /// state is tracked over every epoch; stopping only applies in phase two.
    pub fn observe(&mut self, rec: EpochRecord, params: &[Vec<T>], es: &EarlyStopping) -> bool {
        let improved = self.best_val_loss.is_none_or(|b| rec.val_loss < b);
        if improved {
            self.best_val_loss = Some(rec.val_loss);
            self.best_epoch = Some(rec.epoch);
            self.best_params = Some(params.to_vec());
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        let stop = rec.phase == Phase::Full && self.bad_epochs >= es.patience;
        self.history.push(rec);
        stop
    }
}

/// In-memory tiles with labels and stable ids (used to key augmentation).
#[derive(Debug, Clone, Default)]
pub struct TileSet {
    pub tiles: Vec<Raster>,
    pub labels: Vec<ClassLabel>,
    pub uids: Vec<u64>,
}

impl TileSet {
    pub fn push(&mut self, tile: Raster, label: ClassLabel, uid: u64) {
        self.tiles.push(tile);
        self.labels.push(label);
        self.uids.push(uid);
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    fn label_values<T: Scalar>(&self, idx: impl Iterator<Item = usize>) -> Vec<T> {
        idx.map(|i| T::of(self.labels[i].as_f32() as f64)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<u32>,
    pub best_val_loss: Option<f64>,
    pub stopped_early: bool,
}

/// Validation loss and accuracy without augmentation or dropout.
pub fn evaluate<T: Scalar>(model: &ModelState<T>, set: &TileSet) -> Result<(f64, f64)> {
    let logits = predict_logits(model, &set.tiles)?;
    let labels: Vec<T> = set.label_values(0..set.len());
    let loss = bce_with_logits(&logits, &labels).loss.f64();
    let correct = logits
        .iter()
        .zip(&set.labels)
        .filter(|(&z, &y)| ClassLabel::from_prob(sigmoid(z).f64(), 0.5) == y)
        .count();
    Ok((loss, correct as f64 / set.len().max(1) as f64))
}

fn run_epoch<T: Scalar>(
    model: &mut ModelState<T>,
    train: &TileSet,
    aug: &AugmentConfig,
    batch_size: usize,
    lr: f64,
    epoch: u32,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut stream_rng(&[domain::SHUFFLE, model.seed, epoch as u64]));
    let mut loss_sum = 0.0;
    for chunk in order.chunks(batch_size) {
        let tiles: Vec<Raster> = chunk
            .par_iter()
            .map(|&i| augment_tile(&train.tiles[i], aug, epoch as u64, train.uids[i]))
            .collect();
        let batch = Tensor::<T>::from_rasters(&tiles)?;
        let fwd = model.forward(&batch, true)?;
        let labels = train.label_values(chunk.iter().copied());
        let bce = bce_with_logits(&fwd.logits, &labels);
        if !bce.loss.is_finite() {
            return Err(NnError::NonFinite { what: "training loss", epoch });
        }
        let grads = model.backward(&fwd.cache, &bce.grad)?;
        adam_step(model, &grads, lr)?;
        loss_sum += bce.loss.f64() * chunk.len() as f64;
    }
    Ok(loss_sum / train.len() as f64)
}

/// Trains until global epoch `limit` (exclusive) or until the schedule
/// ends. Returns `true` once the run is complete; the best weights are then
/// restored if configured. Calling again on a complete model is a no-op.
pub fn train_until<T: Scalar>(
    model: &mut ModelState<T>,
    train: &TileSet,
    val: &TileSet,
    aug: &AugmentConfig,
    schedule: &TrainSchedule,
    limit: u32,
) -> Result<bool> {
    schedule.validate()?;
    if train.is_empty() {
        return Err(NnError::EmptySplit("TRAIN"));
    }
    if val.is_empty() {
        return Err(NnError::EmptySplit("VAL"));
    }
    let total = schedule.total_epochs();
    while !model.progress.finished && model.epoch < limit.min(total) {
        let e = model.epoch;
        let (phase, lr) = schedule.at(e);
        model.freeze_backbone(phase == Phase::HeadOnly);
        let train_loss = run_epoch(model, train, aug, schedule.batch_size, lr, e)?;
        let (val_loss, val_accuracy) = evaluate(model, val)?;
        if !val_loss.is_finite() {
            return Err(NnError::NonFinite { what: "validation loss", epoch: e });
        }
        model.epoch = e + 1;
        let rec = EpochRecord {
            epoch: e,
            phase,
            lr,
            train_loss,
            val_loss,
            val_accuracy,
        };
        let params = std::mem::take(&mut model.params);
        let stop = model.progress.observe(rec, &params, &schedule.early_stopping);
        model.params = params;
        if stop {
            model.progress.stopped_early = true;
            break;
        }
    }
    if !model.progress.finished && (model.progress.stopped_early || model.epoch >= total) {
        model.progress.finished = true;
        if schedule.early_stopping.restore_best {
            if let Some(best) = model.progress.best_params.clone() {
                model.params = best;
                model.version += 1;
            }
        }
    }
    Ok(model.progress.finished)
}

/// Runs the full schedule.
pub fn train<T: Scalar>(
    model: &mut ModelState<T>,
    train_set: &TileSet,
    val: &TileSet,
    aug: &AugmentConfig,
    schedule: &TrainSchedule,
) -> Result<TrainOutcome> {
    train_until(model, train_set, val, aug, schedule, u32::MAX)?;
    Ok(TrainOutcome {
        history: model.progress.history.clone(),
        best_epoch: model.progress.best_epoch,
        best_val_loss: model.progress.best_val_loss,
        stopped_early: model.progress.stopped_early,
    })
}
