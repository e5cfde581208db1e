//! Training loop, run logs, inference and k-fold experiments.

mod folds;
mod infer;
mod runlog;

pub use folds::{evaluate, run_fold_experiment, FoldExperiment};
pub use infer::{infer, sliding_window, tile_starts, Inference};
pub use runlog::{IterRecord, RunLog, ValRecord};

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{augment, stack, AugmentConfig, Sample};
use crate::error::{Error, Result};
use crate::loss::{bce_loss, combined_loss, LossConfig};
use crate::metrics::dice_coefficient;
use crate::model::{save_checkpoint, Model, ModelConfig};
use crate::nn::{Forward, Mode};
use crate::optim::{Adam, AdamConfig, PolySchedule};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Bce,
    Combined,
}

/// What one poly-schedule step is.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleUnit {
    Iteration,
    Epoch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainLength {
    Iterations(u64),
    Epochs(u64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub loss_kind: LossKind,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub length: TrainLength,
    pub schedule_unit: ScheduleUnit,
    pub augment: AugmentConfig,
    /// Tile size for validation and inference; `None` runs whole inputs.
    pub window: Option<Vec<usize>>,
    /// Validate every this many epochs.
    pub validate_every: u64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn planar() -> Self {
        TrainConfig {
            model: ModelConfig::planar(),
            loss: LossConfig::default(),
            loss_kind: LossKind::Bce,
            base_lr: 1e-4,
            weight_decay: 5e-4,
            batch_size: 8,
            length: TrainLength::Epochs(100),
            schedule_unit: ScheduleUnit::Epoch,
            augment: AugmentConfig::planar(),
            window: None,
            validate_every: 1,
            seed: 0,
        }
    }

    /// Center-cropped clinical-style volumes.
    pub fn volumetric_mra() -> Self {
        TrainConfig {
            model: ModelConfig::volumetric(),
            loss_kind: LossKind::Combined,
            batch_size: 2,
            length: TrainLength::Iterations(10_000),
            schedule_unit: ScheduleUnit::Iteration,
            augment: AugmentConfig::volumetric_mra(),
            window: Some(vec![224, 224, 64]),
            ..Self::planar()
        }
    }

    pub fn volumetric_synthetic() -> Self {
        TrainConfig {
            batch_size: 6,
            augment: AugmentConfig::volumetric_synthetic(),
            window: Some(vec![128, 128, 128]),
            ..Self::volumetric_mra()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.augment.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr {} must be finite and >= 0", self.base_lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay {} must be >= 0", self.weight_decay)));
        }
        if self.validate_every == 0 {
            return Err(Error::Config("validate_every must be at least 1".into()));
        }
        if let Some(w) = &self.window {
            let m = self.model.required_multiple();
            if w.len() != self.model.dims || w.iter().any(|&s| s == 0 || s % m != 0) {
                return Err(Error::Config(format!("window {w:?} must have {} axes divisible by {m}", self.model.dims)));
            }
        }
        Ok(())
    }

    /// Total optimizer steps and steps per epoch for `n` training samples.
    pub fn resolve_length(&self, n: usize) -> (u64, u64) {
        let per_epoch = n.div_ceil(self.batch_size.min(n.max(1))).max(1) as u64;
        let total = match self.length {
            TrainLength::Iterations(i) => i,
            TrainLength::Epochs(e) => e * per_epoch,
        };
        (total, per_epoch)
    }

    /// Learning rate logged and used at iteration `iter`.
    pub fn lr_at(&self, iter: u64, total: u64, per_epoch: u64) -> f64 {
        if iter >= total {
            return 0.0;
        }
        match self.schedule_unit {
            ScheduleUnit::Iteration => PolySchedule::new(self.base_lr, total).lr(iter),
            ScheduleUnit::Epoch => {
                let epochs = total.div_ceil(per_epoch);
                PolySchedule::new(self.base_lr, epochs).lr(iter / per_epoch)
            }
        }
    }
}

/// The best model by validation Dice.
#[derive(Clone, Debug)]
pub struct BestModel {
    pub model: Model<f32>,
    pub dice: f64,
    pub iteration: u64,
}

pub struct TrainOutput {
    pub model: Model<f32>,
    pub optimizer: Adam<f32>,
    pub best: Option<BestModel>,
    pub log: RunLog,
}

impl TrainOutput {
    /// The best model when validation ran, else the final one.
    pub fn selected(&self) -> &Model<f32> {
        self.best.as_ref().map_or(&self.model, |b| &b.model)
    }

    /// `final.ckpt`, `best.ckpt` (when validation ran), `runlog.csv` and
    /// `validation.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let last = self.log.iters.last().map_or(0, |r| r.iter);
        save_checkpoint(&dir.join("final.ckpt"), &self.model, Some(&self.optimizer), last)?;
        if let Some(b) = &self.best {
            save_checkpoint(&dir.join("best.ckpt"), &b.model, None, b.iteration)?;
        }
        self.log.write_csv(&dir.join("runlog.csv"))?;
        self.log.write_validation_csv(&dir.join("validation.csv"))
    }
}

fn batch_loss(cfg: &TrainConfig, f: &mut Forward<'_, f32>, model_net: &crate::model::Network, x: Tensor<f32>, g: &Tensor<f32>) -> Result<crate::tensor::Var> {
    let xv = f.input(x);
    let p = model_net.forward(f, xv)?;
    match cfg.loss_kind {
        LossKind::Bce => bce_loss(&mut f.tape, p, g, cfg.loss.clamp),
        LossKind::Combined => combined_loss(&mut f.tape, p, g, &cfg.loss),
    }
}

/// Mean Dice over `samples` at threshold 0.5, eval mode.
pub fn mean_dice(model: &mut Model<f32>, samples: &[Sample], window: Option<&[usize]>) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let out = infer(model, &s.input, window)?;
        total += dice_coefficient(&out.mask, &s.mask)?;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Train on `train_set`, validating on `val_set` (skipped when empty).
/// `observer` sees every logged iteration as it happens.
///
/// Randomness: one generator seeded from `cfg.seed` draws the model seed,
/// each epoch's shuffle and one seed per batch for augmentation.
pub fn train(
    cfg: &TrainConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    observer: &mut dyn FnMut(&IterRecord),
) -> Result<TrainOutput> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    for s in train_set.iter().chain(val_set) {
        s.validate()?;
        if s.input.dims().len() != cfg.model.dims + 1 {
            return Err(Error::dim(format!("{}D model given a sample shaped {}", cfg.model.dims, s.input.shape())));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::<f32>::build(&cfg.model, rng.random())?;
    let mut adam = Adam::new(AdamConfig { weight_decay: cfg.weight_decay, ..AdamConfig::default() });
    let (total, per_epoch) = cfg.resolve_length(train_set.len());
    let batch = cfg.batch_size.min(train_set.len());
    let window = cfg.window.as_deref();
    let mut log = RunLog::default();
    let mut best: Option<BestModel> = None;
    let started = Instant::now();

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut iter = 0u64;
    // The terminal pass (iter == total) logs the final loss with lr 0 and
    // makes no update.
    while iter <= total {
        if iter.is_multiple_of(per_epoch) {
            order.shuffle(&mut rng);
        }
        let slot = (iter % per_epoch) as usize;
        let members = &order[slot * batch..((slot + 1) * batch).min(order.len())];
        let batch_seed: u64 = rng.random();
        let mut aug_rng = ChaCha8Rng::seed_from_u64(batch_seed);
        let samples = members
            .iter()
            .map(|&i| augment(&train_set[i], &cfg.augment, &mut aug_rng))
            .collect::<Result<Vec<_>>>()?;
        let (x, g) = stack(&samples.iter().collect::<Vec<_>>())?;
        let lr = cfg.lr_at(iter, total, per_epoch);
        let abort = |e: Error| {
            if e.is_numeric() {
                Error::numeric("train", format!("{e}; aborted at iteration {iter}, batch seed {batch_seed}"))
            } else {
                e
            }
        };

        let loss_value = if iter == total {
            let mut scratch = model.store.clone();
            let mut f = Forward::inference(&mut scratch, Mode::Train);
            let l = batch_loss(cfg, &mut f, &model.net, x, &g).map_err(abort)?;
            f.tape.value(l).data[0] as f64
        } else {
            let mut f = Forward::new(&mut model.store, Mode::Train);
            let l = batch_loss(cfg, &mut f, &model.net, x, &g).map_err(abort)?;
            let value = f.tape.value(l).data[0] as f64;
            f.backward(l).map_err(abort)?;
            let grads = f.param_grads();
            drop(f);
            adam.step(&mut model.store, &grads, lr).map_err(abort)?;
            value
        };
        if !loss_value.is_finite() {
            return Err(Error::numeric("train", format!("non-finite loss at iteration {iter}, batch seed {batch_seed}")));
        }
        let rec = IterRecord { iter, lr, loss: loss_value, elapsed_secs: started.elapsed().as_secs_f64() };
        observer(&rec);
        log.iters.push(rec);
        iter += 1;

        let epoch_done = iter.is_multiple_of(per_epoch) && iter <= total;
        if epoch_done && !val_set.is_empty() && (iter / per_epoch).is_multiple_of(cfg.validate_every) {
            let dice = mean_dice(&mut model, val_set, window)?;
            log.validations.push(ValRecord { epoch: iter / per_epoch, iter, dice });
            if best.as_ref().is_none_or(|b| dice > b.dice) {
                best = Some(BestModel { model: model.clone(), dice, iteration: iter });
            }
        }
    }
    Ok(TrainOutput { model, optimizer: adam, best, log })
}
