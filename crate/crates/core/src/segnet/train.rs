use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modelfile::{fill_params, read_model_file, write_model_file};
use crate::nn::Real;
use crate::rng::{derive_seed, SplitMix64};
use crate::volume::{CaseRecord, Phase};

use super::augment::{sample_training_patch, TrainingVolume};
use super::model::{accumulate, ArchConfig, HuWindow, LossWeights, SegModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegNetConfig {
    /// Width of the first encoder stage.
    pub base_channels: usize,
    /// Sliding-window edge used at inference.
    pub patch_size: usize,
    /// Training crop edge; defaults to `patch_size`.
    pub train_patch_size: Option<usize>,
    pub batch_size: usize,
    pub max_iters: usize,
    pub lr: f64,
    pub lr_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub loss_weights: LossWeights,
    /// Probability that a crop is centered on a foreground voxel.
    pub fg_crop_prob: f64,
    /// Rescales the batch gradient to at most this L2 norm; off when `None`.
    pub grad_clip: Option<f64>,
    pub augment: bool,
    pub window: HuWindow,
    pub seed: u64,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        SegNetConfig {
            base_channels: 8,
            patch_size: 64,
            train_patch_size: None,
            batch_size: 4,
            max_iters: 2000,
            lr: 0.01,
            lr_power: 0.9,
            momentum: 0.9,
            weight_decay: 5e-4,
            loss_weights: LossWeights::default(),
            fg_crop_prob: 0.5,
            grad_clip: None,
            augment: true,
            window: HuWindow::default(),
            seed: 0,
        }
    }
}

impl SegNetConfig {
    pub fn train_patch(&self) -> usize {
        self.train_patch_size.unwrap_or(self.patch_size)
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            window: self.window,
            ..ArchConfig::new(self.base_channels)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.base_channels == 0 {
            return bad("base_channels must be positive".into());
        }
        for (name, p) in [("patch_size", self.patch_size), ("train_patch_size", self.train_patch())] {
            if p == 0 || p % 8 != 0 {
                return bad(format!("{name} must be a positive multiple of 8, got {p}"));
            }
        }
        if self.batch_size == 0 || self.max_iters == 0 {
            return bad("batch_size and max_iters must be positive".into());
        }
        let w = self.loss_weights;
        if [w.aux1, w.aux2, w.main].iter().any(|&v| !(v > 0.0)) || (w.aux1 + w.aux2 + w.main - 1.0).abs() > 1e-9 {
            return bad(format!("loss weights must be positive and sum to 1, got {w:?}"));
        }
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.fg_crop_prob) || !(0.0..1.0).contains(&self.momentum) {
            return bad("lr, fg_crop_prob or momentum out of range".into());
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive".into());
        }
        if !(self.window.hi > self.window.lo) || !(self.window.scale > 0.0) {
            return bad("HU window must have hi > lo and positive scale".into());
        }
        Ok(())
    }
}

/// Polynomial decay: `base * (1 - iter/max)^power`, zero once `iter >= max`.
pub fn lr_at(base: f64, iter: usize, max_iters: usize, power: f64) -> f64 {
    if iter >= max_iters {
        return 0.0;
    }
    base * (1.0 - iter as f64 / max_iters as f64).powf(power)
}

/// Momentum SGD with coupled weight decay:
/// `g += wd*theta; v = mu*v + g; theta -= lr*v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Vec<T>>, grads: Vec<&Vec<T>>, lr: f64) {
        assert_eq!(params.len(), grads.len());
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        }
        let (mu, wd, lr) = (T::lit(self.momentum), T::lit(self.weight_decay), T::lit(lr));
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            for ((pi, &gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = mu * *vi + gi + wd * *pi;
                *pi -= lr * *vi;
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean batch loss per iteration.
    pub losses: Vec<f64>,
    /// Batch gradient L2 norm per iteration, before clipping.
    #[serde(default)]
    pub grad_norms: Vec<f64>,
    pub seconds: f64,
}

/// Builds training volumes for one phase; every case needs a mask.
pub fn training_volumes(cases: &[CaseRecord], phase: Phase, window: &HuWindow) -> Result<Vec<TrainingVolume>> {
    cases
        .iter()
        .map(|c| {
            let pd = c.phase(phase)?;
            let mask = pd.mask.as_ref().ok_or_else(|| {
                Error::InvalidArgument(format!("case {} has no {phase} mask for training", c.case_id))
            })?;
            TrainingVolume::new(&pd.volume, mask, window)
        })
        .collect()
}

/// Mean loss and gradient over a batch. Per-sample work may run in
/// parallel; the reduction is always in sample order.
pub fn batch_step<T: Real>(
    model: &SegModel<T>,
    batch: &[(crate::nn::Tensor<T>, Vec<u8>)],
    weights: LossWeights,
) -> Result<(f64, SegModel<T>)> {
    let per: Vec<(T, SegModel<T>)> = batch
        .par_iter()
        .map(|(x, t)| model.loss_and_grad(x, t, weights))
        .collect::<Result<_>>()?;
    let mut grad = SegModel::zeros(model.arch);
    let mut loss = 0.0;
    for (l, g) in &per {
        loss += l.to_f64().unwrap();
        accumulate(&mut grad, g);
    }
    let inv = T::lit(1.0 / batch.len() as f64);
    for p in grad.params_mut() {
        p.iter_mut().for_each(|v| *v *= inv);
    }
    Ok((loss / batch.len() as f64, grad))
}

pub fn train(volumes: &[TrainingVolume], cfg: &SegNetConfig) -> Result<(SegModel<f32>, TrainLog)> {
    train_with_progress(volumes, cfg, |_, _| {})
}

/// Trains from scratch. `progress(iter, loss)` is called after every step.
pub fn train_with_progress(
    volumes: &[TrainingVolume],
    cfg: &SegNetConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<(SegModel<f32>, TrainLog)> {
    cfg.validate()?;
    if volumes.is_empty() {
        return Err(Error::InvalidArgument("no training volumes".into()));
    }
    let start = Instant::now();
    let edge = cfg.train_patch();
    let mut model = SegModel::<f32>::init(cfg.arch(), derive_seed(cfg.seed, &[0x1417]));
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut log = TrainLog::default();
    for iter in 0..cfg.max_iters {
        let batch: Vec<_> = (0..cfg.batch_size)
            .map(|b| {
                let mut rng = SplitMix64::new(derive_seed(cfg.seed, &[1, iter as u64, b as u64]));
                let v = &volumes[rng.below(volumes.len())];
                let p = sample_training_patch(v, edge, cfg.fg_crop_prob, cfg.augment, &mut rng);
                (p.input, p.target)
            })
            .collect();
        let (loss, mut grad) = batch_step(&model, &batch, cfg.loss_weights)
            .map_err(|e| Error::Numerical(format!("iteration {iter}: {e}")))?;
        if !loss.is_finite() || !grad.all_finite() {
            return Err(Error::Numerical(format!("non-finite loss or gradient at iteration {iter}")));
        }
        let norm = grad.params().iter().flat_map(|p| p.iter()).map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if let Some(clip) = cfg.grad_clip.filter(|&c| norm > c) {
            let s = (clip / norm) as f32;
            grad.params_mut().into_iter().for_each(|p| p.iter_mut().for_each(|v| *v *= s));
        }
        let lr = lr_at(cfg.lr, iter, cfg.max_iters, cfg.lr_power);
        opt.step(model.params_mut(), grad.params(), lr);
        log.losses.push(loss);
        log.grad_norms.push(norm);
        progress(iter, loss);
        if (iter + 1) % 100 == 0 {
            log::info!("iter {}/{} loss {:.4} lr {:.5}", iter + 1, cfg.max_iters, loss, lr);
        }
    }
    log.seconds = start.elapsed().as_secs_f64();
    Ok((model, log))
}

const MAGIC: &[u8; 4] = b"S4CM";

pub fn save_model(model: &SegModel<f32>, path: &Path) -> Result<()> {
    let params = model.params();
    let slices: Vec<&[f32]> = params.iter().map(|p| p.as_slice()).collect();
    write_model_file(path, MAGIC, &model.arch, &slices)
}

pub fn load_model(path: &Path) -> Result<SegModel<f32>> {
    let (arch, tensors): (ArchConfig, _) = read_model_file(path, MAGIC)?;
    if arch.base_channels == 0 || arch.num_classes != crate::volume::NUM_CLASSES {
        return Err(Error::format(path, format!("unsupported architecture {arch:?}")));
    }
    let mut model = SegModel::zeros(arch);
    fill_params(path, model.params_mut(), tensors)?;
    Ok(model)
}
