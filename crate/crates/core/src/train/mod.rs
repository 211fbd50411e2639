//! The optimization recipe: composite loss, AdamW with warmup and cosine
//! decay, balanced crops, augmentation and the epoch loop.

mod loss;
mod optim;
mod sample;

pub use loss::{composite_loss, focal_loss, soft_dice_loss, LossConfig, FOCAL_CLAMP};
pub use optim::{clip_grad_norm, lr_at, AdamW};
pub use sample::{augment, extract, flip, AugmentConfig, Crop, CropSampler};

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::CaseRecord;
use crate::error::{Error, Result};
use crate::metrics::{CaseMetrics, MetricReport};
use crate::network::{write_checkpoint, HwaUnetr, DIVISOR};
use crate::tensor::{ParamStore, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Crop extents `[D, H, W]`, each a multiple of 16.
    pub crop: [usize; 3],
    /// Share of all optimizer steps spent in linear warmup.
    pub warmup_fraction: f64,
    /// Global gradient-norm clip; off when absent.
    pub clip_norm: Option<f64>,
    /// Window overlap for validation inference.
    pub overlap: f64,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-3,
            weight_decay: 0.4,
            epochs: 300,
            batch_size: 2,
            crop: [32, 32, 16],
            warmup_fraction: 0.05,
            clip_norm: None,
            overlap: 0.5,
            augment: AugmentConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("train: {m}")));
        if !(self.lr0 > 0.0) {
            return fail(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.weight_decay >= 0.0) {
            return fail(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch_size must be positive".into());
        }
        if self.crop.iter().any(|&c| c == 0 || c % DIVISOR != 0) {
            return fail(format!("crop {:?} must be positive multiples of {DIVISOR}", self.crop));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return fail(format!("warmup_fraction must lie in [0, 1], got {}", self.warmup_fraction));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return fail(format!("overlap must lie in [0, 1), got {}", self.overlap));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return fail(format!("clip_norm must be positive, got {c}"));
            }
        }
        self.augment.validate()
    }

    pub fn steps_per_epoch(&self, cases: usize) -> usize {
        cases.div_ceil(self.batch_size)
    }
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Mean loss over the epoch's steps.
    pub train_loss: f64,
    /// Validation Dice (%) per output channel, when validation cases exist.
    pub val_dice: Option<Vec<f64>>,
    pub val_dice_mean: Option<f64>,
}

pub struct TrainOutcome {
    pub store: ParamStore<f32>,
    pub best: ParamStore<f32>,
    pub best_epoch: usize,
    pub records: Vec<EpochRecord>,
    pub steps: usize,
}

/// Predicts and scores whole cases with tiled inference.
pub fn evaluate(model: &HwaUnetr, store: &ParamStore<f32>, cases: &[CaseRecord], roi: [usize; 3], overlap: f64) -> Result<MetricReport> {
    let mut report = MetricReport::default();
    for case in cases {
        let probs = model.infer_volume(store, &case.image_tensor()?, roi, overlap)?;
        report.cases.push(CaseMetrics::evaluate(&case.id, &probs, &case.mask_tensor()?, case.images[0].spacing)?);
    }
    Ok(report)
}

fn first_non_finite(model_store: &ParamStore<f32>, grads: &[Tensor<f32>]) -> Result<()> {
    for (i, g) in grads.iter().enumerate() {
        if let Some(index) = g.first_non_finite() {
            let name = model_store.name(model_store.ids().nth(i).unwrap()).to_string();
            return Err(Error::NonFiniteTensor { name: format!("gradient of {name}"), index });
        }
    }
    Ok(())
}

/// Runs the full schedule. With `out` set, appends one JSON line per epoch
/// to `metrics.jsonl` and writes `best.ckpt` and `last.ckpt` there.
///
/// The best checkpoint maximizes mean validation Dice, or minimizes the
/// training loss when there are no validation cases.
pub fn train(
    model: &HwaUnetr,
    mut store: ParamStore<f32>,
    train_cases: &[CaseRecord],
    val_cases: &[CaseRecord],
    cfg: &TrainConfig,
    seed: u64,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_cases.is_empty() {
        return Err(Error::Data("train: no training cases".into()));
    }
    let stacks = train_cases
        .iter()
        .map(|c| Ok((c.image_tensor()?, c.mask_tensor()?)))
        .collect::<Result<Vec<_>>>()?;
    for (case, (img, mask)) in train_cases.iter().zip(&stacks) {
        if img.shape()[0] != model.config.in_channels || mask.shape()[0] != model.config.out_channels {
            return Err(Error::Data(format!(
                "case {}: {} images and {} masks, model expects {} and {}",
                case.id,
                img.shape()[0],
                mask.shape()[0],
                model.config.in_channels,
                model.config.out_channels
            )));
        }
    }
    let samplers = stacks.iter().map(|(i, m)| CropSampler::new(i, m)).collect::<Result<Vec<_>>>()?;
    let mut log_file = match out {
        Some(dir) => Some(OpenOptions::new().create(true).append(true).open(dir.join("metrics.jsonl"))?),
        None => None,
    };

    let per_epoch = cfg.steps_per_epoch(train_cases.len());
    let total = per_epoch * cfg.epochs;
    let warmup = (cfg.warmup_fraction * total as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = AdamW::new(&store);
    let mut order: Vec<usize> = (0..train_cases.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut images = Vec::new();
            let mut masks = Vec::new();
            for &i in batch {
                let mut crop = samplers[i].sample(cfg.crop, &mut rng);
                augment(&mut crop.image, &mut crop.mask, &cfg.augment, &mut rng);
                images.extend_from_slice(crop.image.data());
                masks.extend_from_slice(crop.mask.data());
            }
            let [d, h, w] = cfg.crop;
            let n = batch.len();
            let x = Tensor::new(vec![n, model.config.in_channels, d, h, w], images)?;
            let y = Tensor::new(vec![n, model.config.out_channels, d, h, w], masks)?;

            let mut tape = Tape::new();
            let bind = tape.bind(&store);
            let xv = tape.constant(x);
            let prob = model.forward(&mut tape, xv, &bind)?;
            let loss = composite_loss(&mut tape, prob, &y, &cfg.loss)?;
            let value = tape.value(loss).item() as f64;
            let mut grads = tape.backward(loss)?;
            let mut grads = bind.gradients(&mut grads);
            first_non_finite(&store, &grads)?;
            if let Some(c) = cfg.clip_norm {
                clip_grad_norm(&mut grads, c);
            }
            lr = lr_at(step + 1, total, warmup, cfg.lr0);
            opt.update(&mut store, &grads, lr, cfg.weight_decay)?;
            step += 1;
            loss_sum += value;
        }
        let train_loss = loss_sum / per_epoch as f64;
        let (val_dice, val_dice_mean) = if val_cases.is_empty() {
            (None, None)
        } else {
            let report = evaluate(model, &store, val_cases, cfg.crop, cfg.overlap)?;
            (Some(report.channel_dice()), Some(report.mean_dice()))
        };
        let record = EpochRecord { epoch, lr, train_loss, val_dice, val_dice_mean };
        log::info!(
            "epoch {epoch}: loss {train_loss:.5} lr {lr:.3e}{}",
            val_dice_mean.map_or(String::new(), |d| format!(" val dice {d:.2}"))
        );
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&record).map_err(|e| Error::Data(e.to_string()))?)?;
        }
        let score = val_dice_mean.unwrap_or(-train_loss);
        if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            best = Some((score, epoch, store.clone()));
            if let Some(dir) = out {
                write_checkpoint(&dir.join("best.ckpt"), &store)?;
            }
        }
        records.push(record);
    }
    if let Some(dir) = out {
        write_checkpoint(&dir.join("last.ckpt"), &store)?;
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(TrainOutcome { store, best, best_epoch, records, steps: step })
}
