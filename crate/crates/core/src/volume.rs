//! Volumetric grids, label masks and case records.
//!
//! Every grid in the crate uses the same layout: row-major with `x`
//! varying fastest, so `index = x + W * (y + H * z)`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BACKGROUND: u8 = 0;
pub const PANCREAS: u8 = 1;
pub const TUMOR: u8 = 2;
pub const DUCT: u8 = 3;
pub const NUM_CLASSES: usize = 4;

/// Grid extent `(W, H, L)` in voxels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims(pub [usize; 3]);

impl Dims {
    pub fn new(w: usize, h: usize, l: usize) -> Result<Self> {
        if w == 0 || h == 0 || l == 0 {
            return Err(Error::InvalidArgument(format!(
                "dims must be positive, got {w}x{h}x{l}"
            )));
        }
        Ok(Dims([w, h, l]))
    }

    pub fn cube(n: usize) -> Result<Self> {
        Self::new(n, n, n)
    }

    #[inline]
    pub fn w(&self) -> usize {
        self.0[0]
    }
    #[inline]
    pub fn h(&self) -> usize {
        self.0[1]
    }
    #[inline]
    pub fn l(&self) -> usize {
        self.0[2]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0[0] * self.0[1] * self.0[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.w() && y < self.h() && z < self.l());
        x + self.w() * (y + self.h() * z)
    }

    #[inline]
    pub fn coord(&self, index: usize) -> [usize; 3] {
        let x = index % self.w();
        let rest = index / self.w();
        [x, rest % self.h(), rest / self.h()]
    }

    pub fn contains(&self, c: [i64; 3]) -> bool {
        (0..3).all(|a| c[a] >= 0 && (c[a] as usize) < self.0[a])
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.0[0], self.0[1], self.0[2])
    }
}

/// Scalar grid of Hounsfield-unit values for one phase.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    dims: Dims,
    spacing: [f32; 3],
    data: Vec<i16>,
}

impl Volume3D {
    pub fn new(dims: Dims, spacing: [f32; 3], data: Vec<i16>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::Shape(format!(
                "volume data has {} voxels, dims {dims} need {}",
                data.len(),
                dims.len()
            )));
        }
        Ok(Volume3D {
            dims,
            spacing,
            data,
        })
    }

    pub fn filled(dims: Dims, value: i16) -> Self {
        Volume3D {
            dims,
            spacing: [1.0; 3],
            data: vec![value; dims.len()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }
    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }
    pub fn data(&self) -> &[i16] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [i16] {
        &mut self.data
    }
    pub fn get(&self, x: usize, y: usize, z: usize) -> i16 {
        self.data[self.dims.index(x, y, z)]
    }
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: i16) {
        let i = self.dims.index(x, y, z);
        self.data[i] = v;
    }
}

/// Per-voxel class ids in `{0 background, 1 pancreas, 2 tumor, 3 duct}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    dims: Dims,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(dims: Dims, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != dims.len() {
            return Err(Error::Shape(format!(
                "mask has {} voxels, dims {dims} need {}",
                labels.len(),
                dims.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside {{0,1,2,3}}"
            )));
        }
        Ok(LabelMask { dims, labels })
    }

    pub fn background(dims: Dims) -> Self {
        LabelMask {
            dims,
            labels: vec![BACKGROUND; dims.len()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }
    pub fn labels(&self) -> &[u8] {
        &self.labels
    }
    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[self.dims.index(x, y, z)]
    }

    /// Panics if `class` is not a valid class id.
    pub fn set(&mut self, x: usize, y: usize, z: usize, class: u8) {
        assert!((class as usize) < NUM_CLASSES, "class {class} out of range");
        let i = self.dims.index(x, y, z);
        self.labels[i] = class;
    }

    pub fn count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != BACKGROUND).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Arterial,
    Venous,
}

impl Phase {
    pub const ALL: [Phase; 2] = [Phase::Arterial, Phase::Venous];

    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Arterial => "arterial",
            Phase::Venous => "venous",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "arterial" => Ok(Phase::Arterial),
            "venous" => Ok(Phase::Venous),
            other => Err(Error::InvalidArgument(format!(
                "unknown phase `{other}` (expected arterial or venous)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseData {
    pub volume: Volume3D,
    pub mask: Option<LabelMask>,
}

/// One case: per-phase volumes (with optional masks) and the case label.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseRecord {
    pub case_id: String,
    pub phases: BTreeMap<Phase, PhaseData>,
    /// `true` for abnormal (tumor present).
    pub abnormal: bool,
}

impl CaseRecord {
    /// Checks the structural invariants. A tumor-free mask on an abnormal case
    /// is only logged, since external annotations may legitimately miss it.
    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "case `{}` has no phases",
                self.case_id
            )));
        }
        for (phase, data) in &self.phases {
            if let Some(mask) = &data.mask {
                if mask.dims() != data.volume.dims() {
                    return Err(Error::Shape(format!(
                        "case `{}` {phase}: mask dims {} != volume dims {}",
                        self.case_id,
                        mask.dims(),
                        data.volume.dims()
                    )));
                }
            }
        }
        let masks: Vec<_> = self.phases.values().filter_map(|p| p.mask.as_ref()).collect();
        if self.abnormal && !masks.is_empty() && masks.iter().all(|m| m.count(TUMOR) == 0) {
            log::warn!(
                "case `{}` is labelled abnormal but no mask contains tumor voxels",
                self.case_id
            );
        }
        Ok(())
    }

    pub fn phase(&self, phase: Phase) -> Result<&PhaseData> {
        self.phases.get(&phase).ok_or_else(|| {
            Error::InvalidArgument(format!("case `{}` has no {phase} phase", self.case_id))
        })
    }
}
