//! Three-stage training: masked single-path pretraining, three-path
//! pretraining with contrastive alignment, and supervised fine-tuning.

mod checkpoint;
mod losses;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointHeader, SplitTag};
pub use losses::{aggregate_latents, contrastive_loss, kl_divergence, masked_mse, stage1_loss, ReconLoss};

use crate::autograd::{AdamW, AdamWConfig, Graph, ParamStore};
use crate::dataio::{downsample, WindowSample, WINDOW};
use crate::encoder::ModelConfig;
use crate::error::{Error, Result};
use crate::masking::{pretraining_masks, MaskingConfig};
use crate::model::{Batch, MastModel};

/// Hyperparameters of one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub stage: u8,
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate; decays along a cosine to `min_lr`.
    pub lr: f64,
    pub min_lr: f64,
    pub lambda_recon: f64,
    pub beta_kl: f64,
    pub lambda_contrastive: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Temperature of the latent aggregation softmax.
    pub tau_agg: f64,
    /// Weight of the error on observed cells (0 = masked cells only).
    pub unmasked_weight: f64,
    pub optimizer: AdamWConfig,
    /// Stage 3: train the classifier head only.
    pub freeze_encoder: bool,
    /// Stage 3: start from random weights instead of a Stage 2 checkpoint.
    pub from_scratch: bool,
    pub seed: u64,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            stage: 1,
            epochs: 10,
            batch_size: 8,
            lr: 1e-3,
            min_lr: 1e-5,
            lambda_recon: 1.0,
            beta_kl: 1e-3,
            lambda_contrastive: 0.5,
            tau: 0.07,
            tau_agg: 1.0,
            unmasked_weight: 0.0,
            optimizer: AdamWConfig::default(),
            freeze_encoder: false,
            from_scratch: false,
            seed: 0,
        }
    }
}

impl StageConfig {
    pub fn for_stage(stage: u8) -> StageConfig {
        StageConfig {
            stage,
            ..StageConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(1..=3).contains(&self.stage) {
            return bad(format!("stage must be 1, 2 or 3, got {}", self.stage));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if self.stage == 2 && self.batch_size < 2 {
            return bad("stage 2 needs batch_size >= 2 for the contrastive term".into());
        }
        let weights = [
            ("lambda_recon", self.lambda_recon),
            ("beta_kl", self.beta_kl),
            ("lambda_contrastive", self.lambda_contrastive),
            ("unmasked_weight", self.unmasked_weight),
            ("weight_decay", self.optimizer.weight_decay),
            ("grad_clip", self.optimizer.grad_clip),
            ("min_lr", self.min_lr),
        ];
        for (name, w) in weights {
            if !(w >= 0.0 && w.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number, got {w}"));
            }
        }
        if !(self.lr > 0.0) || self.min_lr > self.lr {
            return bad(format!("need 0 <= min_lr <= lr and lr > 0, got {} / {}", self.min_lr, self.lr));
        }
        if !(self.tau > 0.0 && self.tau_agg > 0.0) {
            return bad("temperatures must be positive".into());
        }
        if self.seed > i64::MAX as u64 {
            return bad(format!("seed {} exceeds {}", self.seed, i64::MAX));
        }
        Ok(())
    }

    /// Parameter-name prefixes updated in this stage.
    pub fn trainable_prefixes(&self) -> Vec<&'static str> {
        match (self.stage, self.freeze_encoder) {
            (1, _) => vec!["time.", "vae.", "decoder."],
            (2, _) => vec!["time.", "freq.", "mag.", "cma_freq.", "cma_mag.", "vae.", "decoder."],
            (_, true) => vec!["head."],
            _ => vec!["time.", "freq.", "mag.", "cma_freq.", "cma_mag.", "head."],
        }
    }

    /// Learning rate used throughout `epoch` (cosine decay per epoch).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let p = epoch as f64 / self.epochs as f64;
        self.min_lr + 0.5 * (self.lr - self.min_lr) * (1.0 + (std::f64::consts::PI * p).cos())
    }
}

/// One window prepared for training at the model's input resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainWindow {
    /// `side x side`, amplitude-normalised.
    pub data: Vec<f64>,
    pub label: usize,
    /// Index of the recording the window came from.
    pub trial: usize,
    pub frame: usize,
}

impl TrainWindow {
    pub fn from_sample(w: &WindowSample, side: usize, trial: usize) -> Result<TrainWindow> {
        Ok(TrainWindow {
            data: downsample(&w.data, WINDOW, side)?,
            label: w.label,
            trial,
            frame: w.frame_index,
        })
    }
}

/// Summary of one epoch, as written to the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub stage: u8,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contrastive: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

/// Where a stage writes its outputs.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Rewritten after every epoch.
    pub checkpoint: Option<PathBuf>,
    /// Appended with one JSON line per epoch.
    pub metrics: Option<PathBuf>,
    /// Stop after this many completed epochs (the run can be resumed).
    pub halt_after: Option<usize>,
    pub split: Option<SplitTag>,
}

/// Seed of the generator driving one epoch of one stage.
pub fn epoch_seed(seed: u64, stage: u8, epoch: usize) -> u64 {
    let mut x = seed ^ (stage as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (epoch as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    // splitmix64 finaliser
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Runs (or resumes) one training stage.
///
/// `init` must be a checkpoint of the previous stage, or of the same stage
/// to resume; Stage 1 and from-scratch Stage 3 accept none.
pub fn run_stage(
    cfg: &StageConfig,
    masking: &MaskingConfig,
    model_cfg: &ModelConfig,
    data: &[TrainWindow],
    init: Option<&Checkpoint>,
    opts: &RunOptions,
) -> Result<Checkpoint> {
    cfg.validate()?;
    model_cfg.validate()?;
    let side = model_cfg.input_size;
    let masking = masking.scaled_to(side);
    if cfg.stage < 3 {
        masking.validate(side)?;
    }
    if data.is_empty() {
        return Err(Error::Config("no training windows".into()));
    }
    if let Some(w) = data.iter().find(|w| w.data.len() != side * side) {
        return Err(Error::Shape(format!("window has {} values, expected {side}x{side}", w.data.len())));
    }
    if let Some(w) = data.iter().find(|w| w.label >= model_cfg.num_classes) {
        return Err(Error::Config(format!("label {} outside {} classes", w.label, model_cfg.num_classes)));
    }

    let init = match init {
        Some(ck) if cfg.stage == 3 && cfg.from_scratch && ck.header.stage != 3 => {
            log::warn!("stage 3 from scratch ignores the given stage {} checkpoint", ck.header.stage);
            None
        }
        other => other,
    };
    let resume = init.filter(|ck| ck.header.stage == cfg.stage);
    match init {
        None if cfg.stage == 1 || (cfg.stage == 3 && cfg.from_scratch) => {}
        None => {
            return Err(Error::StageOrder(format!(
                "stage {} needs a stage {} checkpoint",
                cfg.stage,
                cfg.stage - 1
            )))
        }
        Some(ck) if ck.header.stage == cfg.stage || ck.header.stage + 1 == cfg.stage => {
            if &ck.header.model != model_cfg {
                return Err(Error::Config("model configuration differs from the checkpoint's".into()));
            }
        }
        Some(ck) => {
            return Err(Error::StageOrder(format!(
                "stage {} cannot start from a stage {} checkpoint",
                cfg.stage, ck.header.stage
            )))
        }
    }

    let (model, mut store) = match init {
        Some(ck) => ck.restore()?,
        None => MastModel::new(model_cfg, cfg.seed)?,
    };
    store.train_only(&cfg.trainable_prefixes());
    let mut opt = AdamW::new(cfg.optimizer.clone());
    let mut history = Vec::new();
    let mut start = 0;
    if let Some(ck) = resume {
        if ck.header.stage_config != *cfg {
            return Err(Error::Config("resumed stage configuration differs from the checkpoint's".into()));
        }
        ck.restore_optimizer(&store, &mut opt);
        start = ck.header.epoch;
        history = ck.header.history.clone();
    } else if let Some(ck) = init {
        history = ck.header.history.clone();
    }
    let split = opts.split.clone().or_else(|| init.and_then(|ck| ck.header.split.clone()));

    let stop = opts.halt_after.unwrap_or(cfg.epochs).min(cfg.epochs);
    let mut epoch = start;
    while epoch < stop {
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, cfg.stage, epoch));
        let lr = cfg.lr_at(epoch);
        let m = match cfg.stage {
            1 | 2 => pretrain_epoch(cfg, &masking, &model, &mut store, &mut opt, data, lr, &mut rng)?,
            _ => finetune_epoch(cfg, &model, &mut store, &mut opt, data, lr, &mut rng)?,
        };
        let m = EpochMetrics {
            stage: cfg.stage,
            epoch: epoch + 1,
            lr,
            ..m
        };
        log::info!(
            "stage {} epoch {}/{}: loss {:.5}{}",
            cfg.stage,
            epoch + 1,
            cfg.epochs,
            m.loss,
            m.accuracy.map(|a| format!(" acc {a:.3}")).unwrap_or_default()
        );
        if let Some(p) = &opts.metrics {
            append_line(p, &serde_json::to_string(&m)?)?;
        }
        history.push(m);
        epoch += 1;
        if let Some(p) = &opts.checkpoint {
            snapshot(cfg, masking.clone(), model_cfg, epoch, &store, &opt, &split, &history).save(p)?;
        }
    }
    Ok(snapshot(cfg, masking, model_cfg, epoch, &store, &opt, &split, &history))
}

#[allow(clippy::too_many_arguments)]
fn snapshot(
    cfg: &StageConfig,
    masking: MaskingConfig,
    model_cfg: &ModelConfig,
    epoch: usize,
    store: &ParamStore,
    opt: &AdamW,
    split: &Option<SplitTag>,
    history: &[EpochMetrics],
) -> Checkpoint {
    let header = CheckpointHeader {
        stage: cfg.stage,
        epoch,
        seed: cfg.seed,
        opt_step: opt.step,
        model: model_cfg.clone(),
        stage_config: cfg.clone(),
        masking,
        split: split.clone(),
        history: history.to_vec(),
    };
    Checkpoint::capture(header, store, Some(opt))
}

fn append_line(path: &PathBuf, line: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

/// Splits `n` shuffled items into batches, folding a trailing singleton
/// into the previous batch.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let n = out.len();
        out[n - 1] = &order[(n - 1) * size..];
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn pretrain_epoch(
    cfg: &StageConfig,
    masking: &MaskingConfig,
    model: &MastModel,
    store: &mut ParamStore,
    opt: &mut AdamW,
    data: &[TrainWindow],
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<EpochMetrics> {
    let side = model.cfg.input_size;
    let mut items: Vec<(usize, Vec<f64>)> = Vec::new();
    for (i, _) in data.iter().enumerate() {
        for m in pretraining_masks(masking, side, rng)? {
            items.push((i, m.to_f64()));
        }
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(rng);
    let mut sums = [0.0; 4];
    let mut steps = 0;
    for chunk in batches(&order, cfg.batch_size) {
        let batch = Batch {
            side,
            windows: chunk.iter().map(|&k| data[items[k].0].data.clone()).collect(),
            masks: chunk.iter().map(|&k| items[k].1.clone()).collect(),
            labels: chunk.iter().map(|&k| data[items[k].0].label).collect(),
            sample_ids: chunk.iter().map(|&k| items[k].0).collect(),
        };
        let (grads, parts) = {
            let g = Graph::new(store, true, ChaCha8Rng::seed_from_u64(rng.next_u64()));
            let out = if cfg.stage == 1 {
                model.reconstruct_time_only(&g, &batch)?
            } else {
                model.reconstruct_all_paths(&g, &batch, |p| aggregate_latents(p, cfg.tau_agg).0)?
            };
            let rec = stage1_loss(
                &out.recon,
                &batch.target(),
                &batch.mask_tensor(),
                &out.vae.mu,
                &out.vae.logvar,
                cfg.beta_kl,
                cfg.unmasked_weight,
            );
            let (total, con) = if cfg.stage == 1 {
                (rec.total.clone(), None)
            } else {
                let con = contrastive_loss(&out.pooled, &batch.sample_ids, cfg.tau)?;
                (
                    rec.total.scale(cfg.lambda_recon).add(&con.scale(cfg.lambda_contrastive)),
                    Some(con.value().data()[0]),
                )
            };
            total.backward();
            let parts = [
                total.value().data()[0],
                rec.recon.value().data()[0],
                rec.kl.value().data()[0],
                con.unwrap_or(0.0),
            ];
            (g.grads(), parts)
        };
        opt.step(store, &grads, lr);
        for (s, p) in sums.iter_mut().zip(parts) {
            *s += p;
        }
        steps += 1;
    }
    let n = steps as f64;
    Ok(EpochMetrics {
        stage: cfg.stage,
        epoch: 0,
        lr,
        loss: sums[0] / n,
        recon: Some(sums[1] / n),
        kl: Some(sums[2] / n),
        contrastive: (cfg.stage == 2).then(|| sums[3] / n),
        accuracy: None,
    })
}

fn finetune_epoch(
    cfg: &StageConfig,
    model: &MastModel,
    store: &mut ParamStore,
    opt: &mut AdamW,
    data: &[TrainWindow],
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<EpochMetrics> {
    let side = model.cfg.input_size;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let (mut loss_sum, mut correct, mut steps) = (0.0, 0usize, 0usize);
    for chunk in batches(&order, cfg.batch_size) {
        let batch = labelled_batch(data, chunk, side);
        let (grads, loss, hits) = {
            let g = Graph::new(store, true, ChaCha8Rng::seed_from_u64(rng.next_u64()));
            let logits = model.classify(&g, &batch)?;
            let loss = logits.cross_entropy(&batch.labels);
            loss.backward();
            let hits = argmax_rows(logits.value().data(), model.cfg.num_classes)
                .iter()
                .zip(&batch.labels)
                .filter(|(p, l)| p == l)
                .count();
            (g.grads(), loss.value().data()[0], hits)
        };
        opt.step(store, &grads, lr);
        loss_sum += loss;
        correct += hits;
        steps += 1;
    }
    Ok(EpochMetrics {
        stage: 3,
        epoch: 0,
        lr,
        loss: loss_sum / steps as f64,
        recon: None,
        kl: None,
        contrastive: None,
        accuracy: Some(correct as f64 / data.len() as f64),
    })
}

/// Unmasked batch of the windows at `idx`.
pub fn labelled_batch(data: &[TrainWindow], idx: &[usize], side: usize) -> Batch {
    Batch {
        side,
        windows: idx.iter().map(|&i| data[i].data.clone()).collect(),
        masks: idx.iter().map(|_| vec![1.0; side * side]).collect(),
        labels: idx.iter().map(|&i| data[i].label).collect(),
        sample_ids: idx.to_vec(),
    }
}

/// Index of the largest entry of each `k`-wide row (first on ties).
pub fn argmax_rows(values: &[f64], k: usize) -> Vec<usize> {
    values
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Eval-mode class predictions for every window.
pub fn predict(model: &MastModel, store: &ParamStore, data: &[TrainWindow], batch_size: usize) -> Result<Vec<usize>> {
    let side = model.cfg.input_size;
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let g = Graph::new(store, false, ChaCha8Rng::seed_from_u64(0));
        let logits = model.classify(&g, &labelled_batch(data, chunk, side))?;
        out.extend(argmax_rows(logits.value().data(), model.cfg.num_classes));
    }
    Ok(out)
}
