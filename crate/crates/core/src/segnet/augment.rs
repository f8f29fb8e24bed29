//! Cube symmetries used for augmentation and training-patch sampling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::rng::SplitMix64;
use crate::volume::{Dims, LabelMask, Volume3D, NUM_CLASSES};

use super::model::HuWindow;

/// Axis-aligned rigid transform of a cubic patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Augment {
    Identity,
    /// `quarters` counter-clockwise quarter turns about `axis` (0 = x, 1 = y, 2 = z).
    Rot90 { axis: u8, quarters: u8 },
    /// Mirror of coordinate `axis`.
    Flip { axis: u8 },
}

/// Identity, three rotations about each axis, one flip per axis.
pub const AUGMENTATIONS: [Augment; 13] = [
    Augment::Identity,
    Augment::Rot90 { axis: 0, quarters: 1 },
    Augment::Rot90 { axis: 0, quarters: 2 },
    Augment::Rot90 { axis: 0, quarters: 3 },
    Augment::Rot90 { axis: 1, quarters: 1 },
    Augment::Rot90 { axis: 1, quarters: 2 },
    Augment::Rot90 { axis: 1, quarters: 3 },
    Augment::Rot90 { axis: 2, quarters: 1 },
    Augment::Rot90 { axis: 2, quarters: 2 },
    Augment::Rot90 { axis: 2, quarters: 3 },
    Augment::Flip { axis: 0 },
    Augment::Flip { axis: 1 },
    Augment::Flip { axis: 2 },
];

impl Augment {
    /// Where the voxel at `p` lands in the output.
    pub fn map(self, p: [usize; 3], n: usize) -> [usize; 3] {
        let m = n - 1;
        match self {
            Augment::Identity => p,
            Augment::Flip { axis } => {
                let mut q = p;
                q[axis as usize] = m - p[axis as usize];
                q
            }
            Augment::Rot90 { axis, quarters } => {
                let mut q = p;
                for _ in 0..quarters {
                    let [x, y, z] = q;
                    q = match axis {
                        0 => [x, m - z, y],
                        1 => [z, y, m - x],
                        _ => [m - y, x, z],
                    };
                }
                q
            }
        }
    }

    /// Applies the transform to a cubic grid of edge `n`.
    pub fn apply<V: Copy + Default>(self, data: &[V], n: usize) -> Vec<V> {
        assert_eq!(data.len(), n * n * n, "augment expects a cubic grid");
        if self == Augment::Identity {
            return data.to_vec();
        }
        let mut out = vec![V::default(); data.len()];
        let mut i = 0;
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let [a, b, c] = self.map([x, y, z], n);
                    out[a + n * (b + n * c)] = data[i];
                    i += 1;
                }
            }
        }
        out
    }
}

/// One phase of a case with HU already clamped, ready for fast cropping.
#[derive(Debug, Clone)]
pub struct TrainingVolume {
    pub dims: Dims,
    pub input: Vec<f32>,
    pub labels: Vec<u8>,
    /// Linear indices of voxels per foreground class (index 0 unused).
    pub class_voxels: [Vec<u32>; NUM_CLASSES],
    pub window: HuWindow,
}

impl TrainingVolume {
    pub fn new(volume: &Volume3D, mask: &LabelMask, window: &HuWindow) -> Result<Self> {
        if volume.dims() != mask.dims() {
            return Err(Error::Shape(format!("volume {} vs mask {}", volume.dims(), mask.dims())));
        }
        let mut class_voxels: [Vec<u32>; NUM_CLASSES] = Default::default();
        for (i, &c) in mask.labels().iter().enumerate() {
            if c != 0 {
                class_voxels[c as usize].push(i as u32);
            }
        }
        Ok(TrainingVolume {
            dims: volume.dims(),
            input: volume.data().iter().map(|&h| window.clamp(h)).collect(),
            labels: mask.labels().to_vec(),
            class_voxels,
            window: *window,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainingPatch {
    pub input: Tensor<f32>,
    pub target: Vec<u8>,
    pub origin: [i64; 3],
    pub augment: Augment,
}

/// Crops an `edge`^3 patch. With probability `fg_prob` the crop is forced to
/// contain a voxel of a foreground class drawn uniformly among those present.
/// Out-of-volume voxels get the window's lower HU bound and background label.
pub fn sample_training_patch(
    vol: &TrainingVolume,
    edge: usize,
    fg_prob: f64,
    augment: bool,
    rng: &mut SplitMix64,
) -> TrainingPatch {
    let d = vol.dims.0;
    let present: Vec<usize> = (1..NUM_CLASSES).filter(|&c| !vol.class_voxels[c].is_empty()).collect();
    let fg = rng.bernoulli(fg_prob) && !present.is_empty();
    let mut origin = [0i64; 3];
    if fg {
        let class = present[rng.below(present.len())];
        let list = &vol.class_voxels[class];
        let v = vol.dims.coord(list[rng.below(list.len())] as usize);
        for a in 0..3 {
            let lo = v[a] as i64 - rng.below(edge) as i64;
            origin[a] = if d[a] >= edge { lo.clamp(0, (d[a] - edge) as i64) } else { 0 };
        }
    } else {
        for a in 0..3 {
            origin[a] = if d[a] > edge { rng.below(d[a] - edge + 1) as i64 } else { 0 };
        }
    }

    let mut input = vec![vol.window.pad_hu(); edge * edge * edge];
    let mut target = vec![0u8; edge * edge * edge];
    let xs = (d[0] as i64 - origin[0]).clamp(0, edge as i64) as usize;
    for z in 0..edge {
        let sz = origin[2] + z as i64;
        if sz >= d[2] as i64 {
            break;
        }
        for y in 0..edge {
            let sy = origin[1] + y as i64;
            if sy >= d[1] as i64 {
                break;
            }
            let src = vol.dims.index(origin[0] as usize, sy as usize, sz as usize);
            let dst = edge * (y + edge * z);
            input[dst..dst + xs].copy_from_slice(&vol.input[src..src + xs]);
            target[dst..dst + xs].copy_from_slice(&vol.labels[src..src + xs]);
        }
    }

    vol.window.normalize(&mut input);
    let aug = if augment {
        AUGMENTATIONS[rng.below(AUGMENTATIONS.len())]
    } else {
        Augment::Identity
    };
    let input = aug.apply(&input, edge);
    let target = aug.apply(&target, edge);
    let dims = Dims::cube(edge).expect("edge > 0");
    TrainingPatch {
        input: Tensor::from_vec(1, dims, input).expect("length matches"),
        target,
        origin,
        augment: aug,
    }
}
