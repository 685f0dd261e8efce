//! Two-phase transfer learning: train the head on a frozen backbone, then
//! fine-tune everything at a lower rate, each phase with its own cosine
//! schedule, AdamW and class-balanced batches.

mod adamw;
mod checkpoint;

pub use adamw::{AdamW, AdamWHyper};
pub use checkpoint::{Checkpoint, CheckpointMeta, Cursor, EpochSummary, CHECKPOINT_VERSION, MAGIC};

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{FreezeScope, Network, NetworkConfig};
use crate::datapipe::{augment, resize_bilinear, substream, AugmentConfig, BalancedSampler, ImageSource, Manifest};
use crate::error::{Error, Result};
use crate::evaluation::{load_batch, score_manifest};
use crate::tensor::{Tape, Tensor};

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·epoch/total))`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total_epochs == 0 {
        return lr_max;
    }
    let e = epoch.min(total_epochs) as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * e / total_epochs as f64).cos())
}

pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size.max(1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub epochs: usize,
    pub lr: f64,
}

/// A preset name (`paper`, `tiny`) or an inline network description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NetworkChoice {
    Preset(String),
    Inline(NetworkConfig),
}

impl NetworkChoice {
    pub fn resolve(&self) -> Result<NetworkConfig> {
        match self {
            NetworkChoice::Preset(name) => {
                NetworkConfig::preset(name).ok_or_else(|| Error::config("network", format!("unknown preset {name:?}")))
            }
            NetworkChoice::Inline(cfg) => {
                cfg.validate()?;
                Ok(cfg.clone())
            }
        }
    }
}

fn default_eval_batch() -> usize {
    16
}

fn default_calibration_images() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub network: NetworkChoice,
    pub phase1: PhaseConfig,
    pub phase2: PhaseConfig,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub batch_size: usize,
    pub lr_min: f64,
    pub seed: u64,
    /// Side length images are brought to before the network.
    pub image_size: usize,
    /// Training-time augmentation; `None` trains on plain resizes.
    #[serde(default)]
    pub augment: Option<AugmentConfig>,
    #[serde(default)]
    pub pretrained_checkpoint: Option<PathBuf>,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
    /// Training images used to set batch-norm statistics of a backbone that
    /// starts from random weights; 0 keeps the initial statistics.
    #[serde(default = "default_calibration_images")]
    pub calibration_images: usize,
}

impl TrainConfig {
    /// The full recipe: 80 + 80 epochs at 5e-5 then 5e-6, 160×160 inputs.
    pub fn paper(seed: u64) -> Self {
        TrainConfig {
            network: NetworkChoice::Preset("paper".into()),
            phase1: PhaseConfig { epochs: 80, lr: 5e-5 },
            phase2: PhaseConfig { epochs: 80, lr: 5e-6 },
            weight_decay: 0.01,
            betas: [0.9, 0.999],
            eps: 1e-8,
            batch_size: 32,
            lr_min: 0.0,
            seed,
            image_size: 160,
            augment: Some(AugmentConfig::default()),
            pretrained_checkpoint: None,
            eval_batch: default_eval_batch(),
            calibration_images: default_calibration_images(),
        }
    }

    /// Desk-scale run on the tiny preset: 10 + 10 epochs of batch 8 at 32×32.
    /// Without pretrained features the head needs far larger steps than the
    /// full recipe to move within 80 updates, hence 1e-2 then 1e-3.
    pub fn toy(seed: u64) -> Self {
        TrainConfig {
            network: NetworkChoice::Preset("tiny".into()),
            phase1: PhaseConfig { epochs: 10, lr: 1e-2 },
            phase2: PhaseConfig { epochs: 10, lr: 1e-3 },
            batch_size: 8,
            image_size: 32,
            augment: None,
            ..Self::paper(seed)
        }
    }

    pub fn preset(name: &str, seed: u64) -> Option<Self> {
        match name {
            "paper" => Some(Self::paper(seed)),
            "toy" => Some(Self::toy(seed)),
            _ => None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_str(&text).map_err(|e| Error::config("<document>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn hyper(&self) -> AdamWHyper {
        AdamWHyper {
            betas: self.betas,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn phase(&self, phase: u8) -> &PhaseConfig {
        if phase == 1 {
            &self.phase1
        } else {
            &self.phase2
        }
    }

    pub fn validate(&self) -> Result<()> {
        let net = self.network.resolve()?;
        for (field, p) in [("phase1.lr", &self.phase1), ("phase2.lr", &self.phase2)] {
            if !(p.lr > 0.0 && p.lr.is_finite()) {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.phase2.lr.min(self.phase1.lr)) {
            return Err(Error::config("lr_min", "must lie in [0, min phase lr]"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        if !self.betas.iter().all(|b| (0.0..1.0).contains(b)) {
            return Err(Error::config("betas", "must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps", "must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "batch norm needs at least 2 samples per batch"));
        }
        if self.eval_batch == 0 {
            return Err(Error::config("eval_batch", "must be positive"));
        }
        let min = net.downsample_factor();
        if self.image_size < min {
            return Err(Error::config("image_size", format!("{} is below the network minimum {min}", self.image_size)));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
            if a.output_size != self.image_size {
                return Err(Error::config("augment.output_size", "must equal image_size"));
            }
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    #[serde(flatten)]
    pub summary: EpochSummary,
    pub wall_ms: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_error: Option<String>,
}

/// The data a run reads.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a Manifest,
    pub val: Option<&'a Manifest>,
    pub source: &'a dyn ImageSource,
}

const LOG_TAIL: usize = 32;
const SAMPLER_SALT: u64 = 0x5851_f42d_4c95_7f2d;

/// Mutable state of a two-phase run. Everything needed to continue is in
/// [`Trainer::checkpoint`], so a resumed run matches an uninterrupted one.
pub struct Trainer {
    pub net: Network,
    cfg: TrainConfig,
    opt: AdamW,
    sampler: BalancedSampler,
    cursor: Cursor,
    log_tail: Vec<EpochSummary>,
}

impl Trainer {
    /// Builds the network and the phase-1 state. A backbone without a
    /// pretrained checkpoint gets its batch-norm statistics from
    /// `calibration_images` training images before it is frozen.
    pub fn new(cfg: TrainConfig, data: &TrainData<'_>) -> Result<Self> {
        cfg.validate()?;
        let mut net = Network::new(cfg.network.resolve()?, cfg.seed)?;
        if let Some(path) = &cfg.pretrained_checkpoint {
            let pre = Checkpoint::load(path)?.to_network()?;
            net.load_backbone_from(&pre)?;
        } else if cfg.calibration_images > 0 {
            let mut order: Vec<usize> = (0..data.train.len()).collect();
            order.shuffle(&mut substream(cfg.seed, &[0]));
            order.truncate(cfg.calibration_images.max(2));
            let names: Vec<&str> = order.iter().map(|&i| data.train.records()[i].image_name.as_str()).collect();
            net.calibrate_norm_stats(&load_batch(data.source, &names, cfg.image_size)?)?;
        }
        net.set_frozen(FreezeScope::AllButHead);
        let opt = AdamW::new(net.params(), cfg.hyper());
        let sampler = BalancedSampler::new(&data.train.labels(), cfg.seed ^ SAMPLER_SALT)?;
        let mut t = Trainer {
            net,
            cfg,
            opt,
            sampler,
            cursor: Cursor {
                phase: 1,
                epoch: 0,
                global_step: 0,
            },
            log_tail: Vec::new(),
        };
        t.advance_phase();
        Ok(t)
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ckpt: &Checkpoint, train_labels: &[u8]) -> Result<Self> {
        let cfg = ckpt
            .meta
            .train
            .clone()
            .ok_or_else(|| Error::Data("checkpoint carries no training state".into()))?;
        let cursor = ckpt.meta.cursor.ok_or_else(|| Error::Data("checkpoint carries no cursor".into()))?;
        let net = ckpt.to_network()?;
        let mut opt = AdamW::new(net.params(), cfg.hyper());
        opt.step = ckpt.meta.optimizer_step;
        for (p, slot) in net.params().iter().zip(&mut opt.moments) {
            *slot = match (ckpt.array(&format!("adam.m.{}", p.name)), ckpt.array(&format!("adam.v.{}", p.name))) {
                (Some(m), Some(v)) => Some((m.clone(), v.clone())),
                _ => None,
            };
        }
        let mut sampler = BalancedSampler::new(train_labels, cfg.seed ^ SAMPLER_SALT)?;
        if let Some(s) = ckpt.meta.sampler {
            sampler.restore(s);
        }
        Ok(Trainer {
            net,
            cfg,
            opt,
            sampler,
            cursor,
            log_tail: ckpt.meta.log_tail.clone(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn cursor(&self) -> Cursor {
        self.cursor
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.opt
    }

    pub fn is_done(&self) -> bool {
        self.cursor.phase == 2 && self.cursor.epoch >= self.cfg.phase2.epochs
    }

    /// Moves to phase 2 once phase 1 is complete: unfreeze, fresh optimizer.
    fn advance_phase(&mut self) {
        if self.cursor.phase == 1 && self.cursor.epoch >= self.cfg.phase1.epochs {
            self.cursor.phase = 2;
            self.cursor.epoch = 0;
            self.net.set_frozen(FreezeScope::None);
            self.opt = AdamW::new(self.net.params(), self.cfg.hyper());
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::from_network(&self.net);
        ckpt.meta.train = Some(self.cfg.clone());
        ckpt.meta.cursor = Some(self.cursor);
        ckpt.meta.optimizer_step = self.opt.step;
        ckpt.meta.sampler = Some(self.sampler.state());
        ckpt.meta.log_tail = self.log_tail.clone();
        for (p, slot) in self.net.params().iter().zip(&self.opt.moments) {
            if let Some((m, v)) = slot {
                ckpt.arrays.push((format!("adam.m.{}", p.name), m.clone()));
                ckpt.arrays.push((format!("adam.v.{}", p.name), v.clone()));
            }
        }
        ckpt
    }

    fn batch(&self, data: &TrainData<'_>, indices: &[usize], step: usize) -> Result<(Tensor, Vec<f64>)> {
        let records = data.train.records();
        let size = self.cfg.image_size;
        let Cursor { phase, epoch, .. } = self.cursor;
        let images: Vec<Tensor> = indices
            .par_iter()
            .enumerate()
            .map(|(slot, &i)| {
                let img = data.source.load(&records[i].image_name)?;
                match &self.cfg.augment {
                    Some(a) => {
                        let mut rng = substream(self.cfg.seed, &[phase as u64, epoch as u64, step as u64, slot as u64]);
                        augment(&img, a, &mut rng)
                    }
                    None if img.shape()[1..] == [size, size] => Ok(img),
                    None => resize_bilinear(&img, size, size),
                }
            })
            .collect::<Result<_>>()?;
        let targets = indices.iter().map(|&i| records[i].target as f64).collect();
        Ok((Tensor::stack(&images)?, targets))
    }

    /// Runs one epoch of the current phase and evaluates on the validation
    /// set, if any. Validation failures are recorded, not raised.
    pub fn run_epoch(&mut self, data: &TrainData<'_>) -> Result<EpochRecord> {
        if self.is_done() {
            return Err(Error::Data("training is already complete".into()));
        }
        let start = Instant::now();
        let phase = self.cfg.phase(self.cursor.phase).clone();
        let lr = cosine_lr(self.cursor.epoch, phase.epochs, phase.lr, self.cfg.lr_min);
        let steps = steps_per_epoch(data.train.len(), self.cfg.batch_size);
        let mut loss_sum = 0.0;
        for step in 0..steps {
            let indices = self.sampler.draw(self.cfg.batch_size);
            let (x, targets) = self.batch(data, &indices, step)?;
            let mut tape = Tape::new();
            let vars = self.net.bind(&mut tape);
            let xv = tape.constant(x);
            let z = self.net.forward(&mut tape, &vars, xv, true)?;
            let loss = tape.bce_with_logits(z, &targets)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("training loss at phase {} epoch {} step {step}", self.cursor.phase, self.cursor.epoch)));
            }
            tape.backward(loss)?;
            let grads: Vec<Option<&Tensor>> = vars.iter().map(|&v| tape.grad(v)).collect();
            self.opt.update(self.net.params_mut(), &grads, lr)?;
            loss_sum += value;
        }
        self.cursor.global_step += steps as u64;

        let (val_auroc, val_error) = match data.val {
            Some(val) => match score_manifest(&self.net, val, data.source, self.cfg.image_size, self.cfg.eval_batch).and_then(|s| s.auroc()) {
                Ok(a) => (Some(a), None),
                Err(e) => (None, Some(e.to_string())),
            },
            None => (None, None),
        };
        let summary = EpochSummary {
            phase: self.cursor.phase,
            epoch: self.cursor.epoch,
            lr,
            train_loss: loss_sum / steps.max(1) as f64,
            val_auroc,
        };
        self.log_tail.push(summary.clone());
        if self.log_tail.len() > LOG_TAIL {
            self.log_tail.remove(0);
        }
        self.cursor.epoch += 1;
        self.advance_phase();
        Ok(EpochRecord {
            summary,
            wall_ms: start.elapsed().as_millis() as u64,
            val_error,
        })
    }

    /// Runs up to `max_epochs` epochs (all remaining if `None`). With an
    /// output directory, appends to `train_log.ndjson` and rewrites
    /// `latest.dcac` after every epoch and writes `final.dcac` at the end.
    pub fn run(
        &mut self,
        data: &TrainData<'_>,
        out_dir: Option<&Path>,
        max_epochs: Option<usize>,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<Vec<EpochRecord>> {
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut records = Vec::new();
        while !self.is_done() && max_epochs.is_none_or(|m| records.len() < m) {
            let rec = self.run_epoch(data)?;
            if let Some(dir) = out_dir {
                let path = dir.join("train_log.ndjson");
                let mut f = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                writeln!(f, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(&path, e))?;
                self.checkpoint().save(&dir.join("latest.dcac"))?;
            }
            on_epoch(&rec);
            records.push(rec);
        }
        if self.is_done() {
            if let Some(dir) = out_dir {
                self.checkpoint().save(&dir.join("final.dcac"))?;
            }
        }
        Ok(records)
    }
}

/// Trains from scratch (or from `cfg.pretrained_checkpoint`) to the end and
/// returns the final checkpoint with the full log.
pub fn train_two_phase(cfg: TrainConfig, data: &TrainData<'_>, out_dir: Option<&Path>) -> Result<(Checkpoint, Vec<EpochRecord>)> {
    let mut trainer = Trainer::new(cfg, data)?;
    let log = trainer.run(data, out_dir, None, |_| {})?;
    Ok((trainer.checkpoint(), log))
}
