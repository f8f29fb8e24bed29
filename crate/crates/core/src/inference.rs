//! Sliding-window prediction with per-voxel majority voting.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{softmax, Real, Tensor};
use crate::segnet::SegModel;
use crate::volume::{Dims, LabelMask, Volume3D, NUM_CLASSES};

/// Probabilities are accumulated as integers in units of `2^-20`, so the
/// tie-break channel is exact and independent of window order.
const PROB_ONE: f64 = (1u32 << 20) as f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceOptions {
    pub patch: usize,
    pub stride: usize,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        InferenceOptions { patch: 64, stride: 20 }
    }
}

impl InferenceOptions {
    /// Patch a positive multiple of 8; stride in `1..=patch` so windows leave no gaps.
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.patch.is_multiple_of(8) || self.stride == 0 || self.stride > self.patch {
            return Err(Error::InvalidArgument(format!(
                "patch must be a positive multiple of 8 and stride in 1..=patch, got {}/{}",
                self.patch, self.stride
            )));
        }
        Ok(())
    }
}

/// Window start offsets along one axis: `0, stride, 2*stride, ...` while the
/// window fits, plus `extent - patch` if the tail is still uncovered. A
/// single start 0 when the extent is shorter than the patch.
pub fn window_starts(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    assert!(patch > 0 && stride > 0, "patch and stride must be positive");
    if extent <= patch {
        return vec![0];
    }
    let last = extent - patch;
    let mut starts: Vec<usize> = (0..=last).step_by(stride).collect();
    if *starts.last().unwrap() != last {
        starts.push(last);
    }
    starts
}

/// Per-voxel vote counts and fixed-point probability sums.
#[derive(Debug, Clone, PartialEq)]
pub struct VoteGrid {
    dims: Dims,
    votes: Vec<[u16; NUM_CLASSES]>,
    prob: Vec<[u32; NUM_CLASSES]>,
}

impl VoteGrid {
    pub fn new(dims: Dims) -> Self {
        VoteGrid {
            dims,
            votes: vec![[0; NUM_CLASSES]; dims.len()],
            prob: vec![[0; NUM_CLASSES]; dims.len()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn votes(&self, i: usize) -> [u16; NUM_CLASSES] {
        self.votes[i]
    }

    pub fn total_votes(&self, i: usize) -> u32 {
        self.votes[i].iter().map(|&v| v as u32).sum()
    }

    /// Adds one window's per-voxel probabilities. `probs` is channel-major
    /// over `wdims`; voxels falling outside the grid are ignored.
    pub fn add_window(&mut self, origin: [usize; 3], wdims: Dims, probs: &[f32]) {
        let n = wdims.len();
        assert_eq!(probs.len(), NUM_CLASSES * n);
        let [w, h, l] = self.dims.0;
        let ex = wdims.w().min(w.saturating_sub(origin[0]));
        for z in 0..wdims.l().min(l.saturating_sub(origin[2])) {
            for y in 0..wdims.h().min(h.saturating_sub(origin[1])) {
                for x in 0..ex {
                    let j = wdims.index(x, y, z);
                    let i = self.dims.index(origin[0] + x, origin[1] + y, origin[2] + z);
                    let p: [f32; NUM_CLASSES] = std::array::from_fn(|c| probs[c * n + j]);
                    let mut best = 0;
                    for c in 1..NUM_CLASSES {
                        if p[c] > p[best] {
                            best = c;
                        }
                    }
                    self.votes[i][best] += 1;
                    for c in 0..NUM_CLASSES {
                        self.prob[i][c] += (p[c] as f64 * PROB_ONE).round() as u32;
                    }
                }
            }
        }
    }

    /// Most votes, then larger probability sum, then lower class id.
    pub fn label(&self, i: usize) -> u8 {
        let (v, p) = (&self.votes[i], &self.prob[i]);
        let mut best = 0;
        for c in 1..NUM_CLASSES {
            if (v[c], p[c]) > (v[best], p[best]) {
                best = c;
            }
        }
        best as u8
    }

    pub fn finalize(&self) -> LabelMask {
        let labels = (0..self.dims.len()).map(|i| self.label(i)).collect();
        LabelMask::new(self.dims, labels).expect("labels are valid classes")
    }
}

/// All window origins in x-fastest order.
pub fn window_origins(dims: Dims, opts: &InferenceOptions) -> Vec<[usize; 3]> {
    let s: Vec<Vec<usize>> = (0..3).map(|a| window_starts(dims.0[a], opts.patch, opts.stride)).collect();
    let mut out = Vec::with_capacity(s[0].len() * s[1].len() * s[2].len());
    for &z in &s[2] {
        for &y in &s[1] {
            for &x in &s[0] {
                out.push([x, y, z]);
            }
        }
    }
    out
}

/// Crops a `patch`^3 window (padding outside the volume) and normalizes it
/// the way the model was trained.
pub fn window_input<T: Real>(model: &SegModel<T>, volume: &Volume3D, origin: [usize; 3], patch: usize) -> Tensor<T> {
    let win = model.arch.window;
    let d = volume.dims();
    let wd = Dims::cube(patch).expect("patch > 0");
    let mut buf = vec![win.pad_hu(); wd.len()];
    let src = volume.data();
    let ex = patch.min(d.w() - origin[0]);
    for z in 0..patch.min(d.l() - origin[2]) {
        for y in 0..patch.min(d.h() - origin[1]) {
            let s = d.index(origin[0], origin[1] + y, origin[2] + z);
            let t = wd.index(0, y, z);
            for x in 0..ex {
                buf[t + x] = win.clamp(src[s + x]);
            }
        }
    }
    win.normalize(&mut buf);
    Tensor::from_vec(1, wd, buf.into_iter().map(|v| T::from_f32(v).unwrap()).collect()).expect("sized")
}

fn window_probs<T: Real>(model: &SegModel<T>, volume: &Volume3D, origin: [usize; 3], patch: usize) -> Result<Vec<f32>> {
    let x = window_input(model, volume, origin, patch);
    let out = model.forward(&x)?;
    if !out.main.all_finite() {
        return Err(Error::Numerical(format!("non-finite logits in window at {origin:?}")));
    }
    Ok(softmax(&out.main).data.iter().map(|v| v.to_f32().unwrap()).collect())
}

/// Dense prediction of a whole volume.
pub fn predict_volume<T: Real>(model: &SegModel<T>, volume: &Volume3D, opts: &InferenceOptions) -> Result<LabelMask> {
    let n = window_origins(volume.dims(), opts).len();
    predict_volume_ordered(model, volume, opts, &(0..n).collect::<Vec<_>>())
}

/// Same as [`predict_volume`] but visits windows in the given order
/// (a permutation of `0..window_origins().len()`).
pub fn predict_volume_ordered<T: Real>(
    model: &SegModel<T>,
    volume: &Volume3D,
    opts: &InferenceOptions,
    order: &[usize],
) -> Result<LabelMask> {
    Ok(vote_volume(model, volume, opts, order)?.finalize())
}

pub fn vote_volume<T: Real>(
    model: &SegModel<T>,
    volume: &Volume3D,
    opts: &InferenceOptions,
    order: &[usize],
) -> Result<VoteGrid> {
    opts.validate()?;
    let origins = window_origins(volume.dims(), opts);
    let mut seen = vec![false; origins.len()];
    for &k in order {
        if k >= origins.len() || std::mem::replace(&mut seen[k], true) {
            return Err(Error::InvalidArgument("window order is not a permutation".into()));
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::InvalidArgument("window order is not a permutation".into()));
    }
    let wd = Dims::cube(opts.patch).expect("patch > 0");
    let mut grid = VoteGrid::new(volume.dims());
    let batch = rayon::current_num_threads().max(1);
    for chunk in order.chunks(batch) {
        let probs: Vec<Vec<f32>> = chunk
            .par_iter()
            .map(|&k| window_probs(model, volume, origins[k], opts.patch))
            .collect::<Result<_>>()?;
        for (&k, p) in chunk.iter().zip(&probs) {
            grid.add_window(origins[k], wd, p);
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::segnet::ArchConfig;

    /// Walks every window start the slow way and checks the covering rule.
    fn starts_oracle(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
        let mut s = Vec::new();
        let mut k = 0;
        while k + patch <= extent {
            s.push(k);
            k += stride;
        }
        if s.is_empty() {
            return vec![0];
        }
        let end = s.last().unwrap() + patch;
        if end < extent {
            s.push(extent - patch);
        }
        s
    }

    #[test]
    fn starts_examples() {
        assert_eq!(window_starts(104, 64, 20), [0, 20, 40]);
        assert_eq!(window_starts(64, 64, 20), [0]);
        assert_eq!(window_starts(150, 64, 20), [0, 20, 40, 60, 80, 86]);
        assert_eq!(window_starts(10, 64, 20), [0]);
        for e in 1..300 {
            assert_eq!(window_starts(e, 64, 20), starts_oracle(e, 64, 20), "extent {e}");
        }
    }

    #[test]
    fn options_reject_gaps_and_bad_patches() {
        assert!(InferenceOptions::default().validate().is_ok());
        assert!(InferenceOptions { patch: 16, stride: 16 }.validate().is_ok());
        for (patch, stride) in [(16, 17), (16, 0), (12, 4), (0, 1)] {
            assert!(InferenceOptions { patch, stride }.validate().is_err(), "{patch}/{stride}");
        }
    }

    #[test]
    fn tie_resolved_by_probability_sum() {
        let dims = Dims::new(3, 1, 1).unwrap();
        let wd = Dims::new(2, 1, 1).unwrap();
        let mut g = VoteGrid::new(dims);
        // Window A over x=0..2 votes class 2 (p=0.5), window B over x=1..3 votes
        // class 1 (p=0.9). At x=1 each has one vote; B's class has the larger sum.
        let a = [0.2, 0.2, 0.1, 0.1, 0.5, 0.5, 0.2, 0.2];
        let b = [0.05, 0.05, 0.9, 0.9, 0.05, 0.05, 0.0, 0.0];
        g.add_window([0, 0, 0], wd, &a);
        g.add_window([1, 0, 0], wd, &b);
        assert_eq!(g.votes(1), [0, 1, 1, 0]);
        assert_eq!(g.finalize().labels(), &[2, 1, 1]);

        // Exact tie in votes and sums falls back to the lower class id.
        let mut g = VoteGrid::new(Dims::new(1, 1, 1).unwrap());
        let one = Dims::new(1, 1, 1).unwrap();
        g.add_window([0, 0, 0], one, &[0.0, 0.0, 0.5, 0.5]);
        g.add_window([0, 0, 0], one, &[0.0, 0.0, 0.5, 0.5]);
        assert_eq!(g.label(0), 2);
    }

    fn small_model(seed: u64) -> SegModel<f32> {
        SegModel::init(ArchConfig::new(2), seed)
    }

    fn random_volume(dims: Dims, seed: u64) -> Volume3D {
        let mut rng = SplitMix64::new(seed);
        Volume3D::new(dims, [1.0; 3], (0..dims.len()).map(|_| rng.below(500) as i16 - 200).collect()).unwrap()
    }

    #[test]
    fn single_window_equals_argmax() {
        let m = small_model(1);
        let v = random_volume(Dims::cube(16).unwrap(), 2);
        let opts = InferenceOptions { patch: 16, stride: 4 };
        let pred = predict_volume(&m, &v, &opts).unwrap();
        let p = softmax(&m.forward(&window_input(&m, &v, [0, 0, 0], 16)).unwrap().main);
        let n = v.dims().len();
        for i in 0..n {
            let mut best = 0;
            for c in 1..4 {
                if p.data[c * n + i] > p.data[best * n + i] {
                    best = c;
                }
            }
            assert_eq!(pred.labels()[i], best as u8);
        }
    }

    #[test]
    fn coverage_and_order_independence() {
        let m = small_model(3);
        let v = random_volume(Dims::new(30, 21, 17).unwrap(), 4);
        let opts = InferenceOptions { patch: 16, stride: 5 };
        let origins = window_origins(v.dims(), &opts);
        let mut order: Vec<usize> = (0..origins.len()).collect();
        let base = vote_volume(&m, &v, &opts, &order).unwrap();
        for i in 0..v.dims().len() {
            assert!(base.total_votes(i) >= 1);
        }
        let mut rng = SplitMix64::new(5);
        for _ in 0..3 {
            rng.shuffle(&mut order);
            assert_eq!(vote_volume(&m, &v, &opts, &order).unwrap(), base);
        }
        assert!(vote_volume(&m, &v, &opts, &order[1..]).is_err());
    }

    #[test]
    fn pointwise_model_gives_constant_output_on_constant_input() {
        let mut m = SegModel::<f32>::init(ArchConfig::new(2), 6);
        for c in [
            &mut m.conv1a, &mut m.conv1b, &mut m.conv2a, &mut m.conv2b, &mut m.conv3a, &mut m.conv3b,
            &mut m.conv4a, &mut m.conv4b, &mut m.conv5a, &mut m.conv5b, &mut m.conv6a, &mut m.conv6b,
            &mut m.conv7a, &mut m.conv7b,
        ] {
            for (i, w) in c.weight.iter_mut().enumerate() {
                if i % 27 != 13 {
                    *w = 0.0;
                }
            }
        }
        for d in [&mut m.deconv3, &mut m.deconv2, &mut m.deconv1] {
            let cin = d.cin;
            for co in 0..d.cout {
                for ci in 0..cin {
                    let w = d.weight[co * 8 * cin + ci];
                    for a in 0..8 {
                        d.weight[(co * 8 + a) * cin + ci] = w;
                    }
                }
            }
        }
        m.head_main.bias[3] = 0.7;
        let v = Volume3D::filled(Dims::new(40, 24, 24).unwrap(), 80);
        let mask = predict_volume(&m, &v, &InferenceOptions { patch: 16, stride: 8 }).unwrap();
        assert!(mask.labels().iter().all(|&l| l == mask.labels()[0]));
    }
}
