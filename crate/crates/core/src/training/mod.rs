//! Losses, optimisation, the training loop, checkpoints and gradient verification.

mod checkpoint;
mod gradcheck;
mod loss;
mod optim;
mod schedule;

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CKPT_MAGIC, CKPT_VERSION};
pub use gradcheck::{
    finite_difference_check, finite_difference_check_with_fault, FamilySummary, GradEntry,
    GradcheckConfig, GradcheckReport,
};
pub use loss::{combined_loss, cross_entropy_loss, soft_dice_loss};
pub use optim::{adamw_step, AdamWConfig, OptimState};
pub use schedule::{lr_at, ScheduleConfig};

pub use crate::tape::LossTerms;
pub use crate::topology::LossGrad;

use crate::error::{HrstError, Result};
use crate::metrics::mean_foreground_dice;
use crate::topology::{Hrstnet, ModelConfig, ModelParams};
use crate::volume_io::{
    argmax_labels, random_crop, sliding_window_infer, LabelVolume, VolumeTensor,
};

/// Exact gradients of the combined loss for every parameter, aligned with `params`.
pub fn backward(
    cfg: &ModelConfig,
    params: &ModelParams,
    vol: &VolumeTensor,
    labels: &LabelVolume,
) -> Result<LossGrad> {
    Hrstnet::from_params(cfg.clone(), params.clone())?.loss_and_grad(vol, labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub crop: [usize; 3],
    pub seed: u64,
    /// Validate every this many epochs (and always after the last one).
    pub val_every: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub min_lr: f64,
    /// Tile overlap for validation inference.
    pub overlap: f64,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 1,
            crop: [128; 3],
            seed: 0,
            val_every: 1,
            base_lr: 1e-4,
            warmup_epochs: 50,
            min_lr: 0.0,
            overlap: 0.5,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.batch_size != 1 {
            return Err(HrstError::Config(format!(
                "batch_size must be 1, got {}",
                self.batch_size
            )));
        }
        if self.val_every == 0 {
            return Err(HrstError::Config("val_every must be >= 1".into()));
        }
        model.check_input_dims(self.crop)?;
        self.schedule(1).validate()
    }

    pub fn schedule(&self, steps_per_epoch: usize) -> ScheduleConfig {
        ScheduleConfig {
            base_lr: self.base_lr,
            warmup_epochs: self.warmup_epochs,
            total_epochs: self.epochs,
            steps_per_epoch,
            min_lr: self.min_lr,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub image: VolumeTensor,
    pub labels: LabelVolume,
}

/// Training and validation cases. With no validation cases the training cases are scored.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl Dataset {
    fn validation(&self) -> &[Sample] {
        if self.val.is_empty() {
            &self.train
        } else {
            &self.val
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub dice_term: f64,
    pub ce_term: f64,
    pub val_dsc: Option<f64>,
}

impl LogRow {
    pub const HEADER: &'static str = "step,epoch,lr,loss,dice_term,ce_term,val_dsc";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.lr,
            self.loss,
            self.dice_term,
            self.ce_term,
            self.val_dsc.map(|v| v.to_string()).unwrap_or_default()
        )
    }
}

/// Stateful loop: one call to [`Trainer::run_epoch`] per epoch, resumable from a checkpoint.
pub struct Trainer {
    cfg: TrainConfig,
    net: Hrstnet,
    optim: OptimState,
    epoch: usize,
    step: u64,
    best_val_dsc: Option<f64>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, model: ModelConfig) -> Result<Self> {
        model.validate()?;
        cfg.validate(&model)?;
        let net = Hrstnet::new(model, cfg.seed)?;
        let optim = OptimState::new(net.params(), cfg.optimizer);
        Ok(Self {
            cfg,
            net,
            optim,
            epoch: 0,
            step: 0,
            best_val_dsc: None,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let cfg = ckpt.train.ok_or_else(|| {
            HrstError::Config("checkpoint carries no training configuration".into())
        })?;
        cfg.validate(&ckpt.model)?;
        Ok(Self {
            cfg,
            net: Hrstnet::from_params(ckpt.model, ckpt.params)?,
            optim: ckpt.optim,
            epoch: ckpt.epoch,
            step: ckpt.step,
            best_val_dsc: ckpt.best_val_dsc,
        })
    }

    pub fn model(&self) -> &Hrstnet {
        &self.net
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn best_val_dsc(&self) -> Option<f64> {
        self.best_val_dsc
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.net.config().clone(),
            params: self.net.params().clone(),
            optim: self.optim.clone(),
            epoch: self.epoch,
            step: self.step,
            best_val_dsc: self.best_val_dsc,
            train: Some(self.cfg.clone()),
        }
    }

    /// Sample order and crop seeds for one epoch depend only on the seed and the epoch index.
    fn epoch_plan(&self, n: usize) -> Vec<(usize, u64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.epoch as u64 + 1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order.into_iter().map(|i| (i, rng.next_u64())).collect()
    }

    /// One optimizer step on a single (already cropped) case at learning rate `lr`.
    pub fn train_step(
        &mut self,
        image: &VolumeTensor,
        labels: &LabelVolume,
        lr: f64,
    ) -> Result<LogRow> {
        let lg = self.net.loss_and_grad(image, labels)?;
        if !lg.terms.total.is_finite() {
            return Err(HrstError::Numeric(format!(
                "loss diverged at step {} (dice {}, ce {})",
                self.step, lg.terms.dice, lg.terms.ce
            )));
        }
        adamw_step(self.net.params_mut(), &lg.grads, &mut self.optim, lr)?;
        let row = LogRow {
            step: self.step,
            epoch: self.epoch,
            lr,
            loss: lg.terms.total,
            dice_term: lg.terms.dice,
            ce_term: lg.terms.ce,
            val_dsc: None,
        };
        self.step += 1;
        Ok(row)
    }

    /// Mean foreground Dice over the validation cases with tiled inference at the crop size.
    pub fn validate(&self, cases: &[Sample]) -> Result<f64> {
        let classes = self.net.config().num_classes;
        let mut sum = 0.0;
        for s in cases {
            let dims = s.image.dims();
            let roi = [0, 1, 2].map(|a| self.cfg.crop[a].min(dims[a]));
            let logits = sliding_window_infer(&self.net, &s.image, roi, self.cfg.overlap)?;
            let pred = argmax_labels(&logits)?;
            sum += mean_foreground_dice(&pred, &s.labels, classes)?;
        }
        Ok(sum / cases.len().max(1) as f64)
    }

    /// One shuffled pass over the training cases, then validation when due.
    /// Returns the log rows and whether the best validation score improved.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<(Vec<LogRow>, bool)> {
        if data.train.is_empty() {
            return Err(HrstError::Config("training set is empty".into()));
        }
        let sched = self.cfg.schedule(data.train.len());
        let mut rows = Vec::with_capacity(data.train.len());
        for (i, crop_seed) in self.epoch_plan(data.train.len()) {
            let s = &data.train[i];
            let (img, lab) = random_crop(&s.image, &s.labels, self.cfg.crop, crop_seed)?;
            let lr = lr_at(self.step as usize, &sched);
            rows.push(self.train_step(&img, &lab, lr)?);
        }
        self.epoch += 1;
        let mut improved = false;
        if self.epoch.is_multiple_of(self.cfg.val_every) || self.finished() {
            let dsc = self.validate(data.validation())?;
            rows.last_mut().expect("nonempty epoch").val_dsc = Some(dsc);
            if self.best_val_dsc.is_none_or(|b| dsc > b) {
                self.best_val_dsc = Some(dsc);
                improved = true;
            }
        }
        Ok((rows, improved))
    }
}

/// Result of a complete run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    pub best: Option<Checkpoint>,
    pub log: Vec<LogRow>,
}

pub const LOG_FILE: &str = "train_log.csv";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";

fn write_log(path: &Path, rows: &[LogRow], keep_before: Option<u64>) -> Result<()> {
    let mut kept = Vec::new();
    if let Some(limit) = keep_before {
        if let Ok(text) = fs::read_to_string(path) {
            for line in text.lines().skip(1) {
                let step: Option<u64> = line.split(',').next().and_then(|s| s.parse().ok());
                if step.is_some_and(|s| s < limit) {
                    kept.push(line.to_string());
                }
            }
        }
    }
    let mut f = fs::File::create(path).map_err(|e| HrstError::io(path, e))?;
    let mut text = String::from(LogRow::HEADER);
    text.push('\n');
    for l in kept {
        text.push_str(&l);
        text.push('\n');
    }
    for r in rows {
        text.push_str(&r.csv());
        text.push('\n');
    }
    f.write_all(text.as_bytes())
        .map_err(|e| HrstError::io(path, e))
}

fn drive(
    mut t: Trainer,
    data: &Dataset,
    out: Option<&Path>,
    resumed: bool,
) -> Result<TrainOutcome> {
    let start_step = t.step;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| HrstError::io(dir, e))?;
    }
    let mut log = Vec::new();
    let mut best = None;
    while !t.finished() {
        let (rows, improved) = t.run_epoch(data)?;
        log.extend(rows);
        let ckpt = t.checkpoint();
        if let Some(dir) = out {
            write_log(&dir.join(LOG_FILE), &log, resumed.then_some(start_step))?;
            if improved {
                save_checkpoint(&ckpt, dir.join(BEST_CKPT))?;
            }
            save_checkpoint(&ckpt, dir.join(LAST_CKPT))?;
        }
        if improved {
            best = Some(ckpt);
        }
    }
    if let Some(dir) = out {
        write_log(&dir.join(LOG_FILE), &log, resumed.then_some(start_step))?;
    }
    Ok(TrainOutcome {
        last: t.checkpoint(),
        best,
        log,
    })
}

/// Trains from scratch. With `out`, writes the CSV log, `best.ckpt` (on validation improvement)
/// and `last.ckpt` (every epoch).
pub fn train(
    cfg: &TrainConfig,
    model: &ModelConfig,
    data: &Dataset,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    drive(Trainer::new(cfg.clone(), model.clone())?, data, out, false)
}

/// Continues a run from a checkpoint; log rows after the checkpoint's step are replaced.
pub fn resume(ckpt: Checkpoint, data: &Dataset, out: Option<&Path>) -> Result<TrainOutcome> {
    drive(Trainer::from_checkpoint(ckpt)?, data, out, true)
}
