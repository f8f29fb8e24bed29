//! Direct binary classifier over Pool3 features of the pancreas ROI.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modelfile::{fill_params, read_model_file, write_model_file};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, relu_backward, relu_inplace, Conv3, GroupNorm, GroupNormCache, Linear,
    Real, Tensor,
};
use crate::rng::{derive_seed, SplitMix64};
use crate::segnet::{lr_at, SegModel, Sgd, TrainLog};
use crate::volume::{Dims, LabelMask, Volume3D};

/// Inclusive voxel box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
    pub margin: usize,
}

impl RoiBox {
    pub fn whole(dims: Dims) -> Self {
        RoiBox {
            min: [0; 3],
            max: [dims.w() - 1, dims.h() - 1, dims.l() - 1],
            margin: 0,
        }
    }

    pub fn extent(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.max[a] - self.min[a] + 1)
    }
}

/// Bounding box of classes {1,2,3}, grown by `margin` and clipped.
pub fn roi_from_mask(mask: &LabelMask, margin: usize) -> Result<RoiBox> {
    let dims = mask.dims();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for (i, &l) in mask.labels().iter().enumerate() {
        if l != 0 {
            let c = dims.coord(i);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
    }
    if lo[0] == usize::MAX {
        return Err(Error::InvalidArgument("mask has no foreground for an ROI".into()));
    }
    Ok(RoiBox {
        min: lo.map(|v| v.saturating_sub(margin)),
        max: [0, 1, 2].map(|a| (hi[a] + margin).min(dims.0[a] - 1)),
        margin,
    })
}

/// ROI from `mask`, or the whole volume (with a warning) if it is empty.
pub fn roi_or_whole(mask: &LabelMask, margin: usize) -> RoiBox {
    roi_from_mask(mask, margin).unwrap_or_else(|_| {
        log::warn!("empty foreground; using the whole volume as ROI");
        RoiBox::whole(mask.dims())
    })
}

/// Encoder features of the ROI crop. The crop is padded up to a multiple of
/// 8 (at least 8) on each axis, so the output has `ceil(extent/8)` voxels
/// per axis and `4*C0` channels.
pub fn extract_pool3_features<T: Real>(seg: &SegModel<T>, volume: &Volume3D, roi: &RoiBox) -> Result<Tensor<T>> {
    let d = volume.dims();
    if (0..3).any(|a| roi.max[a] >= d.0[a] || roi.min[a] > roi.max[a]) {
        return Err(Error::Shape(format!("ROI {roi:?} outside volume {d}")));
    }
    let ext = roi.extent();
    let padded = ext.map(|e| e.div_ceil(8).max(1) * 8);
    let pd = Dims(padded);
    let win = seg.arch.window;
    let mut buf = vec![win.pad_hu(); pd.len()];
    for z in 0..ext[2] {
        for y in 0..ext[1] {
            let s = d.index(roi.min[0], roi.min[1] + y, roi.min[2] + z);
            let t = pd.index(0, y, z);
            for x in 0..ext[0] {
                buf[t + x] = win.clamp(volume.data()[s + x]);
            }
        }
    }
    win.normalize(&mut buf);
    let x = Tensor::from_vec(1, pd, buf.into_iter().map(|v| T::from_f32(v).unwrap()).collect())?;
    seg.encode(&x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClsConfig {
    pub lr: f64,
    pub lr_power: f64,
    pub max_iters: usize,
    /// Fixed at 1: ROI feature maps differ in size.
    pub batch_size: usize,
    /// Output channels of each conv block.
    pub widths: Vec<usize>,
    pub groups: usize,
    /// ROI margin, used for ground-truth ROIs in training and predicted ROIs at test.
    pub roi_margin: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ClsConfig {
    fn default() -> Self {
        ClsConfig {
            lr: 0.001,
            lr_power: 0.9,
            max_iters: 1000,
            batch_size: 1,
            widths: vec![32, 32],
            groups: 8,
            roi_margin: 5,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
        }
    }
}

impl ClsConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.batch_size != 1 {
            return bad("classification batch size must be 1");
        }
        if !(self.lr > 0.0) || self.max_iters == 0 || self.widths.is_empty() || self.groups == 0 {
            return bad("classification lr, max_iters, widths and groups must be positive");
        }
        if self.widths.iter().any(|&w| w == 0 || w % self.groups != 0) {
            return bad("every classification width must be a positive multiple of groups");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClsArch {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub groups: usize,
}

/// `(conv3 -> group norm -> ReLU) x depth -> global average pool -> linear(2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClsHead<T> {
    pub arch: ClsArch,
    pub convs: Vec<Conv3<T>>,
    pub norms: Vec<GroupNorm<T>>,
    pub fc: Linear<T>,
}

struct BlockCache<T> {
    input: Tensor<T>,
    norm: GroupNormCache<T>,
    out: Tensor<T>,
}

impl<T: Real> ClsHead<T> {
    pub fn zeros(arch: ClsArch) -> Result<Self> {
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut cin = arch.in_channels;
        for &w in &arch.widths {
            convs.push(Conv3::zeros(cin, w));
            norms.push(GroupNorm::new(arch.groups, w)?);
            cin = w;
        }
        Ok(ClsHead {
            fc: Linear::zeros(cin, 2),
            arch,
            convs,
            norms,
        })
    }

    pub fn init(arch: ClsArch, seed: u64) -> Result<Self> {
        let mut h = Self::zeros(arch)?;
        let mut rng = SplitMix64::new(seed);
        for c in &mut h.convs {
            let std = (2.0 / c.fan_in() as f64).sqrt();
            c.weight.iter_mut().for_each(|w| *w = T::lit(std * rng.gaussian()));
        }
        let std = (1.0 / h.fc.inputs as f64).sqrt();
        h.fc.weight.iter_mut().for_each(|w| *w = T::lit(std * rng.gaussian()));
        Ok(h)
    }

    pub fn params(&self) -> Vec<&Vec<T>> {
        let mut v = Vec::new();
        for (c, n) in self.convs.iter().zip(&self.norms) {
            v.extend([&c.weight, &c.bias, &n.gamma, &n.beta]);
        }
        v.extend([&self.fc.weight, &self.fc.bias]);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut v = Vec::new();
        for (c, n) in self.convs.iter_mut().zip(self.norms.iter_mut()) {
            v.extend([&mut c.weight, &mut c.bias, &mut n.gamma, &mut n.beta]);
        }
        v.extend([&mut self.fc.weight, &mut self.fc.bias]);
        v
    }

    fn zeroed_like(&self) -> Self {
        let mut g = self.clone();
        g.params_mut().into_iter().for_each(|p| p.iter_mut().for_each(|v| *v = T::zero()));
        g
    }

    fn forward_cached(&self, features: &Tensor<T>) -> Result<(Vec<T>, Vec<BlockCache<T>>, Vec<T>)> {
        let mut h = features.clone();
        let mut caches = Vec::with_capacity(self.convs.len());
        for (c, n) in self.convs.iter().zip(&self.norms) {
            let y = c.forward(&h)?;
            let (mut out, norm) = n.forward(&y)?;
            relu_inplace(&mut out);
            let input = std::mem::replace(&mut h, out.clone());
            caches.push(BlockCache { input, norm, out });
        }
        let pooled = global_avg_pool(&h);
        let logits = self.fc.forward(&pooled)?;
        Ok((logits, caches, pooled))
    }

    /// Two-way logits (normal, abnormal).
    pub fn logits(&self, features: &Tensor<T>) -> Result<Vec<T>> {
        Ok(self.forward_cached(features)?.0)
    }

    /// Probability of the abnormal class.
    pub fn predict_proba(&self, features: &Tensor<T>) -> Result<f64> {
        let l = self.logits(features)?;
        let (a, b) = (l[0].to_f64().unwrap(), l[1].to_f64().unwrap());
        Ok(1.0 / (1.0 + (a - b).exp()))
    }

    /// Cross-entropy against `label` and parameter gradients.
    pub fn loss_and_grad(&self, features: &Tensor<T>, label: u8) -> Result<(T, Self)> {
        let (logits, caches, pooled) = self.forward_cached(features)?;
        let m = logits[0].max(logits[1]);
        let e: Vec<T> = logits.iter().map(|&l| (l - m).exp()).collect();
        let z = e[0] + e[1];
        let p = [e[0] / z, e[1] / z];
        let t = label as usize;
        let loss = -(p[t].ln());
        if !loss.is_finite() {
            return Err(Error::Numerical("non-finite classification loss".into()));
        }
        let mut grad = self.zeroed_like();
        let dl: Vec<T> = (0..2).map(|k| p[k] - if k == t { T::one() } else { T::zero() }).collect();
        let dpool = self.fc.backward(&pooled, &dl, &mut grad.fc);
        let last = caches.last().map(|c| (c.out.channels, c.out.dims)).unwrap_or((features.channels, features.dims));
        let mut g = global_avg_pool_backward(&dpool, last.0, last.1);
        for (k, c) in caches.iter().enumerate().rev() {
            relu_backward(&c.out, &mut g);
            let dy = self.norms[k].backward(&c.norm, &g, &mut grad.norms[k]);
            g = match self.convs[k].backward(&c.input, &dy, &mut grad.convs[k], k > 0)? {
                Some(dx) => dx,
                None => break,
            };
        }
        Ok((loss, grad))
    }
}

/// One training example: Pool3 features of a case's ROI and its label.
#[derive(Debug, Clone)]
pub struct ClsSample {
    pub features: Tensor<f32>,
    pub label: u8,
}

pub fn train_head(samples: &[ClsSample], cfg: &ClsConfig) -> Result<(ClsHead<f32>, TrainLog)> {
    cfg.validate()?;
    let first = samples.first().ok_or_else(|| Error::InvalidArgument("no classification samples".into()))?;
    let arch = ClsArch {
        in_channels: first.features.channels,
        widths: cfg.widths.clone(),
        groups: cfg.groups,
    };
    let start = std::time::Instant::now();
    let mut head = ClsHead::init(arch, derive_seed(cfg.seed, &[0xC15]))?;
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut rng = SplitMix64::new(derive_seed(cfg.seed, &[0xC16]));
    let mut log = TrainLog::default();
    for iter in 0..cfg.max_iters {
        let s = &samples[rng.below(samples.len())];
        let (loss, grad) = head
            .loss_and_grad(&s.features, s.label)
            .map_err(|e| Error::Numerical(format!("classification iteration {iter}: {e}")))?;
        opt.step(head.params_mut(), grad.params(), lr_at(cfg.lr, iter, cfg.max_iters, cfg.lr_power));
        log.losses.push(loss as f64);
    }
    log.seconds = start.elapsed().as_secs_f64();
    Ok((head, log))
}

const MAGIC: &[u8; 4] = b"S4CC";

pub fn save_head(head: &ClsHead<f32>, path: &Path) -> Result<()> {
    let params = head.params();
    let slices: Vec<&[f32]> = params.iter().map(|p| p.as_slice()).collect();
    write_model_file(path, MAGIC, &head.arch, &slices)
}

pub fn load_head(path: &Path) -> Result<ClsHead<f32>> {
    let (arch, tensors): (ClsArch, _) = read_model_file(path, MAGIC)?;
    let mut head = ClsHead::zeros(arch).map_err(|e| Error::format(path, e.to_string()))?;
    fill_params(path, head.params_mut(), tensors)?;
    Ok(head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{random_tensor, rel_error};
    use crate::segnet::ArchConfig;

    #[test]
    fn roi_examples() {
        let dims = Dims::cube(16).unwrap();
        let mut m = LabelMask::background(dims);
        m.set(5, 5, 5, 1);
        assert_eq!(roi_from_mask(&m, 0).unwrap().min, [5, 5, 5]);
        assert_eq!(roi_from_mask(&m, 0).unwrap().max, [5, 5, 5]);
        let r = roi_from_mask(&m, 2).unwrap();
        assert_eq!((r.min, r.max), ([3, 3, 3], [7, 7, 7]));
        let mut c = LabelMask::background(dims);
        c.set(1, 0, 15, 2);
        let r = roi_from_mask(&c, 5).unwrap();
        assert_eq!((r.min, r.max), ([0, 0, 10], [6, 5, 15]));
        assert!(roi_from_mask(&LabelMask::background(dims), 5).is_err());
        assert_eq!(roi_or_whole(&LabelMask::background(dims), 5), RoiBox::whole(dims));
    }

    #[test]
    fn feature_grid_shapes() {
        let seg = SegModel::<f32>::init(ArchConfig::new(2), 1);
        let v = Volume3D::filled(Dims::cube(64).unwrap(), 0);
        let f = extract_pool3_features(&seg, &v, &RoiBox::whole(v.dims())).unwrap();
        assert_eq!((f.channels, f.dims), (8, Dims::cube(8).unwrap()));
        let small = RoiBox { min: [3, 3, 3], max: [12, 5, 20], margin: 0 };
        let f2 = extract_pool3_features(&seg, &v, &small).unwrap();
        assert_eq!(f2.dims, Dims::new(2, 1, 3).unwrap());
    }

    #[test]
    fn zero_model_gives_zero_features() {
        let seg = SegModel::<f32>::zeros(ArchConfig::new(2));
        let v = Volume3D::filled(Dims::cube(16).unwrap(), 0);
        let f = extract_pool3_features(&seg, &v, &RoiBox::whole(v.dims())).unwrap();
        assert!(f.data.iter().all(|&x| x == 0.0));
    }

    fn arch() -> ClsArch {
        ClsArch { in_channels: 4, widths: vec![8, 8], groups: 4 }
    }

    #[test]
    fn zero_fc_weights_give_half() {
        let mut h = ClsHead::<f64>::init(arch(), 2).unwrap();
        h.fc.weight.iter_mut().for_each(|w| *w = 0.0);
        let mut rng = SplitMix64::new(3);
        let x = random_tensor(&mut rng, 4, Dims::new(3, 2, 2).unwrap());
        assert_eq!(h.predict_proba(&x).unwrap(), 0.5);
    }

    #[test]
    fn head_gradient_matches_finite_differences() {
        let h = ClsHead::<f64>::init(arch(), 4).unwrap();
        let mut rng = SplitMix64::new(5);
        let x = random_tensor(&mut rng, 4, Dims::new(3, 3, 2).unwrap());
        let (_, g) = h.loss_and_grad(&x, 1).unwrap();
        let step = 1e-6;
        for k in 0..h.params().len() {
            for _ in 0..3 {
                let i = rng.below(h.params()[k].len());
                let mut hp = h.clone();
                hp.params_mut()[k][i] += step;
                let mut hm = h.clone();
                hm.params_mut()[k][i] -= step;
                let num = (hp.loss_and_grad(&x, 1).unwrap().0 - hm.loss_and_grad(&x, 1).unwrap().0) / (2.0 * step);
                assert!(rel_error(g.params()[k][i], num) < 1e-5, "param {k}[{i}]");
            }
        }
    }

    #[test]
    fn global_pooling_ignores_interior_translation() {
        // One block of width 8 with pointwise kernels makes every stage local.
        let a = ClsArch { in_channels: 4, widths: vec![8], groups: 4 };
        let mut h = ClsHead::<f64>::init(a, 6).unwrap();
        for (i, w) in h.convs[0].weight.iter_mut().enumerate() {
            if i % 27 != 13 {
                *w = 0.0;
            }
        }
        let dims = Dims::cube(6).unwrap();
        let mut x = Tensor::<f64>::zeros(4, dims);
        let mut y = Tensor::<f64>::zeros(4, dims);
        for c in 0..4 {
            x.channel_mut(c)[dims.index(1, 2, 2)] = 1.0 + c as f64;
            y.channel_mut(c)[dims.index(3, 3, 2)] = 1.0 + c as f64;
        }
        let (p, q) = (h.predict_proba(&x).unwrap(), h.predict_proba(&y).unwrap());
        assert!((p - q).abs() < 1e-12);
    }

    #[test]
    fn training_reduces_loss_and_roundtrips() {
        let mut rng = SplitMix64::new(7);
        let samples: Vec<ClsSample> = (0..10)
            .map(|i| {
                let label = (i % 2) as u8;
                let dims = Dims::new(2 + i % 3, 2, 2).unwrap();
                let mut f = random_tensor(&mut rng, 8, dims).cast::<f32>();
                if label == 1 {
                    f.channel_mut(0).iter_mut().for_each(|v| *v += 2.0);
                }
                ClsSample { features: f, label }
            })
            .collect();
        let cfg = ClsConfig { widths: vec![8, 8], groups: 4, max_iters: 300, lr: 0.01, ..ClsConfig::default() };
        let (h, log) = train_head(&samples, &cfg).unwrap();
        let q = log.losses.len() / 5;
        let first: f64 = log.losses[..q].iter().sum();
        let last: f64 = log.losses[4 * q..].iter().sum();
        assert!(last < first, "{first} -> {last}");

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cls.bin");
        save_head(&h, &p).unwrap();
        assert_eq!(load_head(&p).unwrap(), h);
        assert!(ClsConfig { batch_size: 2, ..ClsConfig::default() }.validate().is_err());
    }
}
