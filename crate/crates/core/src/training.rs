//! Patch-based training of the transform modules (and optionally the backbone).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneHandle, Trace};
use crate::checkpoint::{save_checkpoint, Checkpoint, CheckpointKind, CheckpointMeta};
use crate::degradations::{DegradationKind, Pair};
use crate::error::{Error, Result};
use crate::losses::{LossBreakdown, LossConfig, Objective};
use crate::model::{backbone_arrays, backbone_meta, ModelTrace, ReprogramModel};
use crate::nn::{Param, Parameterized};
use crate::optim::Adam;
use crate::tensor::ImageTensor;

/// Number of most recent epochs stored in checkpoint metadata.
pub const LOSS_TAIL: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub patch: usize,
    pub lr0: f64,
    pub lr_halve_every: usize,
    pub epochs: usize,
    pub seed: u64,
    pub frozen_backbone: bool,
    pub train_kinds: Vec<DegradationKind>,
    /// Optimizer steps per epoch; `None` means one pass over the pairs.
    pub steps_per_epoch: Option<usize>,
    /// Write an intermediate checkpoint every `k` epochs.
    pub checkpoint_every: Option<usize>,
    pub flip_augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            patch: 120,
            lr0: 1e-3,
            lr_halve_every: 20,
            epochs: 300,
            seed: 0,
            frozen_backbone: true,
            train_kinds: Vec::new(),
            steps_per_epoch: None,
            checkpoint_every: None,
            flip_augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if self.batch_size < 1 {
            p.push("batch_size must be >= 1".to_string());
        }
        if self.patch < 8 {
            p.push(format!("patch must be >= 8, got {}", self.patch));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            p.push(format!("lr0 must be > 0, got {}", self.lr0));
        }
        if self.lr_halve_every < 1 {
            p.push("lr_halve_every must be >= 1".to_string());
        }
        if self.steps_per_epoch == Some(0) || self.checkpoint_every == Some(0) {
            p.push("steps_per_epoch and checkpoint_every must be >= 1 when set".to_string());
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }
}

/// Step schedule: `lr0 * 0.5^floor(epoch / lr_halve_every)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * 0.5f64.powi((epoch / cfg.lr_halve_every.max(1)) as i32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_l_s: f64,
    pub mean_l_p: f64,
    pub mean_total: f64,
    pub lr: f64,
}

pub fn loss_csv(history: &[EpochStats]) -> String {
    let mut s = String::from("epoch,mean_l_s,mean_l_p,mean_total,lr\n");
    for e in history {
        writeln!(
            s,
            "{},{},{},{},{}",
            e.epoch, e.mean_l_s, e.mean_l_p, e.mean_total, e.lr
        )
        .expect("write to string");
    }
    s
}

pub fn write_loss_csv(path: &Path, history: &[EpochStats]) -> Result<()> {
    fs::write(path, loss_csv(history)).map_err(|e| Error::io(path, e))
}

/// Something the trainer can optimize.
pub trait Trainable {
    type Trace;

    fn forward_traced(&self, x: &ImageTensor) -> Result<(ImageTensor, Self::Trace)>;
    fn backward(&mut self, trace: &Self::Trace, x: &ImageTensor, d_out: &ImageTensor);
    fn trainable(&mut self) -> Vec<&mut Param<f32>>;
    fn clear_grads(&mut self);
    fn checkpoint(&self, meta: CheckpointMeta) -> Checkpoint;
}

impl Trainable for ReprogramModel<f32> {
    type Trace = ModelTrace<f32>;

    fn forward_traced(&self, x: &ImageTensor) -> Result<(ImageTensor, Self::Trace)> {
        ReprogramModel::forward_traced(self, x)
    }

    fn backward(&mut self, trace: &Self::Trace, x: &ImageTensor, d_out: &ImageTensor) {
        ReprogramModel::backward(self, trace, x, d_out)
    }

    fn trainable(&mut self) -> Vec<&mut Param<f32>> {
        self.trainable_params_mut()
    }

    fn clear_grads(&mut self) {
        for p in self.trainable_params_mut() {
            p.zero_grad();
        }
    }

    fn checkpoint(&self, mut meta: CheckpointMeta) -> Checkpoint {
        meta.kind = CheckpointKind::Reprogram;
        self.to_checkpoint(meta)
    }
}

/// Direct training of a backbone on restoration pairs.
impl Trainable for BackboneHandle<f32> {
    type Trace = Trace<f32>;

    fn forward_traced(&self, x: &ImageTensor) -> Result<(ImageTensor, Self::Trace)> {
        BackboneHandle::forward_traced(self, x)
    }

    fn backward(&mut self, trace: &Self::Trace, _x: &ImageTensor, d_out: &ImageTensor) {
        BackboneHandle::backward(self, trace, d_out);
    }

    fn trainable(&mut self) -> Vec<&mut Param<f32>> {
        if self.frozen() {
            Vec::new()
        } else {
            self.params_mut()
        }
    }

    fn clear_grads(&mut self) {
        self.zero_grad();
    }

    fn checkpoint(&self, mut meta: CheckpointMeta) -> Checkpoint {
        meta.kind = CheckpointKind::Backbone;
        meta.backbone = backbone_meta(self);
        Checkpoint {
            meta,
            arrays: backbone_arrays(self),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Final checkpoint path; intermediate and diagnostic files are derived from it.
    pub checkpoint: Option<PathBuf>,
    pub loss_csv: Option<PathBuf>,
    pub run_config: Option<serde_json::Value>,
}

pub fn diagnostic_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("diverged.wrpg")
}

pub fn intermediate_path(checkpoint: &Path, epoch: usize) -> PathBuf {
    checkpoint.with_extension(format!("epoch{epoch}.wrpg"))
}

pub struct Trainer<'m, M: Trainable> {
    model: &'m mut M,
    objective: Objective<f32>,
    cfg: TrainConfig,
    opt: Adam,
    rng: ChaCha8Rng,
    history: Vec<EpochStats>,
    step: usize,
}

impl<'m, M: Trainable> Trainer<'m, M> {
    pub fn new(model: &'m mut M, cfg: &TrainConfig, loss: &LossConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            model,
            objective: Objective::new(loss)?,
            cfg: cfg.clone(),
            opt: Adam::default(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            history: Vec::new(),
            step: 0,
        })
    }

    pub fn history(&self) -> &[EpochStats] {
        &self.history
    }

    fn check_pairs(&self, pairs: &[Pair]) -> Result<()> {
        if pairs.is_empty() {
            return Err(Error::Config("no training pairs".into()));
        }
        let mut problems = Vec::new();
        for (i, p) in pairs.iter().enumerate() {
            if !self.cfg.train_kinds.is_empty() && !self.cfg.train_kinds.contains(&p.kind) {
                problems.push(format!("pair {i}: kind {} not in train_kinds", p.kind));
            }
            if p.degraded.shape() != p.clean.shape() {
                problems.push(format!("pair {i}: degraded and clean sizes differ"));
            }
            if p.clean.height() < self.cfg.patch || p.clean.width() < self.cfg.patch {
                problems.push(format!(
                    "pair {i}: {}x{} image is smaller than patch {}",
                    p.clean.height(),
                    p.clean.width(),
                    self.cfg.patch
                ));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    fn sample(&mut self, pair: &Pair) -> Result<(ImageTensor, ImageTensor)> {
        let p = self.cfg.patch;
        let top = self.rng.gen_range(0..=pair.clean.height() - p);
        let left = self.rng.gen_range(0..=pair.clean.width() - p);
        let mut x = pair.degraded.crop(top, left, p, p)?;
        let mut y = pair.clean.crop(top, left, p, p)?;
        if self.cfg.flip_augment && self.rng.gen_bool(0.5) {
            x = x.flip_horizontal();
            y = y.flip_horizontal();
        }
        Ok((x, y))
    }

    /// One optimizer step over a batch; returns the mean loss breakdown.
    fn train_step(&mut self, batch: &[&Pair], epoch: usize) -> Result<LossBreakdown> {
        self.model.clear_grads();
        let inv = 1.0 / batch.len() as f32;
        let mut acc = LossBreakdown::default();
        for pair in batch {
            let (x, y) = self.sample(pair)?;
            let (out, trace) = self.model.forward_traced(&x)?;
            let (l, grad) = self.objective.total_with_grad(&out, &y)?;
            if !l.total.is_finite() {
                return Err(self.diverged(epoch, l.total));
            }
            self.model.backward(&trace, &x, &grad.scale(inv));
            acc.l_s += l.l_s;
            acc.l_p += l.l_p;
            acc.total += l.total;
        }
        let n = batch.len() as f64;
        let lr = lr_at(epoch, &self.cfg);
        let params = self.model.trainable();
        if params.iter().any(|p| p.grad.iter().any(|g| !g.is_finite())) {
            return Err(self.diverged(epoch, f64::NAN));
        }
        self.opt.step(params, lr);
        self.step += 1;
        Ok(LossBreakdown {
            l_s: acc.l_s / n,
            l_p: acc.l_p / n,
            total: acc.total / n,
        })
    }

    fn diverged(&self, epoch: usize, loss: f64) -> Error {
        Error::Divergence {
            epoch,
            step: self.step,
            loss,
        }
    }

    pub fn run_epoch(&mut self, pairs: &[Pair], epoch: usize) -> Result<EpochStats> {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut self.rng);
        let bs = self.cfg.batch_size;
        let steps = self
            .cfg
            .steps_per_epoch
            .unwrap_or_else(|| pairs.len().div_ceil(bs));
        let mut sum = LossBreakdown::default();
        let mut cursor = 0;
        for _ in 0..steps {
            let mut batch = Vec::with_capacity(bs);
            for _ in 0..bs.min(pairs.len()) {
                if cursor == order.len() {
                    order.shuffle(&mut self.rng);
                    cursor = 0;
                }
                batch.push(&pairs[order[cursor]]);
                cursor += 1;
            }
            let l = self.train_step(&batch, epoch)?;
            sum.l_s += l.l_s;
            sum.l_p += l.l_p;
            sum.total += l.total;
        }
        let n = steps as f64;
        let stats = EpochStats {
            epoch,
            mean_l_s: sum.l_s / n,
            mean_l_p: sum.l_p / n,
            mean_total: sum.total / n,
            lr: lr_at(epoch, &self.cfg),
        };
        self.history.push(stats.clone());
        Ok(stats)
    }

    fn meta(&self, epoch: usize, run_config: &Option<serde_json::Value>) -> CheckpointMeta {
        let mut meta = CheckpointMeta::bare(CheckpointKind::Reprogram);
        meta.epoch = epoch;
        meta.seed = self.cfg.seed;
        meta.train_kinds = self.cfg.train_kinds.iter().map(|k| k.to_string()).collect();
        meta.run_config = run_config.clone();
        let start = self.history.len().saturating_sub(LOSS_TAIL);
        meta.loss_tail = self.history[start..].to_vec();
        meta
    }

    pub fn checkpoint(&self, epoch: usize, run_config: &Option<serde_json::Value>) -> Checkpoint {
        self.model.checkpoint(self.meta(epoch, run_config))
    }

    /// Runs every epoch, writing checkpoints and the loss trace as configured.
    pub fn fit(&mut self, pairs: &[Pair], opts: &FitOptions) -> Result<Vec<EpochStats>> {
        self.check_pairs(pairs)?;
        for epoch in 0..self.cfg.epochs {
            match self.run_epoch(pairs, epoch) {
                Ok(s) => info!(
                    "epoch {epoch}: l_s {:.6} l_p {:.6} total {:.6} lr {}",
                    s.mean_l_s, s.mean_l_p, s.mean_total, s.lr
                ),
                Err(e @ Error::Divergence { .. }) => {
                    if let Some(path) = &opts.checkpoint {
                        let mut ck = self.checkpoint(epoch, &opts.run_config);
                        ck.meta.diagnostic = Some(e.to_string());
                        let diag = diagnostic_path(path);
                        match save_checkpoint(&ck, &diag) {
                            Ok(()) => warn!("wrote diagnostic checkpoint {}", diag.display()),
                            Err(w) => warn!("could not write diagnostic checkpoint: {w}"),
                        }
                    }
                    if let Some(csv) = &opts.loss_csv {
                        write_loss_csv(csv, &self.history)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
            if let (Some(path), Some(k)) = (&opts.checkpoint, self.cfg.checkpoint_every) {
                if (epoch + 1) % k == 0 && epoch + 1 < self.cfg.epochs {
                    save_checkpoint(
                        &self.checkpoint(epoch + 1, &opts.run_config),
                        &intermediate_path(path, epoch + 1),
                    )?;
                }
            }
        }
        if let Some(path) = &opts.checkpoint {
            save_checkpoint(&self.checkpoint(self.cfg.epochs, &opts.run_config), path)?;
        }
        if let Some(csv) = &opts.loss_csv {
            write_loss_csv(csv, &self.history)?;
        }
        Ok(self.history.clone())
    }
}

/// Trains the transform modules of `model` (and its backbone when unfrozen).
pub fn train(
    model: &mut ReprogramModel<f32>,
    pairs: &[Pair],
    cfg: &TrainConfig,
    loss: &LossConfig,
    opts: &FitOptions,
) -> Result<Vec<EpochStats>> {
    if model.patch() != cfg.patch {
        return Err(Error::Config(format!(
            "model token-FC size {} differs from training patch {}",
            model.patch(),
            cfg.patch
        )));
    }
    model.backbone.freeze(cfg.frozen_backbone);
    Trainer::new(model, cfg, loss)?.fit(pairs, opts)
}

/// Trains a backbone directly on restoration pairs.
pub fn train_backbone(
    backbone: &mut BackboneHandle<f32>,
    pairs: &[Pair],
    cfg: &TrainConfig,
    loss: &LossConfig,
    opts: &FitOptions,
) -> Result<Vec<EpochStats>> {
    backbone.freeze(false);
    let out = Trainer::new(backbone, cfg, loss)?.fit(pairs, opts);
    backbone.set_origin(crate::backbone::BackboneOrigin::Trained);
    out
}
