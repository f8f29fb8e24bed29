//! Seeded dual-phase phantom cases with exact ground-truth masks.
//!
//! A case is a noisy background with an ellipsoidal pancreas, optionally a
//! spherical tumor and a tubular duct. Every structure has its own per-phase
//! intensity so a tumor can be conspicuous in one phase and nearly invisible
//! in the other.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{write_mask, write_volume};
use crate::manifest::{DatasetManifest, ManifestEntry, PhaseFiles};
use crate::rng::{derive_seed, SplitMix64};
use crate::volume::{CaseRecord, Dims, LabelMask, Phase, PhaseData, Volume3D, BACKGROUND, DUCT, PANCREAS, TUMOR};

/// A value per acquisition phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerPhase {
    pub arterial: f64,
    pub venous: f64,
}

impl PerPhase {
    pub fn new(arterial: f64, venous: f64) -> Self {
        PerPhase { arterial, venous }
    }

    pub fn get(&self, phase: Phase) -> f64 {
        match phase {
            Phase::Arterial => self.arterial,
            Phase::Venous => self.venous,
        }
    }

    fn is_finite(&self) -> bool {
        self.arterial.is_finite() && self.venous.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    /// Absolute HU of the parenchyma.
    pub hu: PerPhase,
}

impl Ellipsoid {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.semi_axes[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TumorSpec {
    pub center: [f64; 3],
    pub radius: f64,
    /// HU offset relative to the pancreas.
    pub delta: PerPhase,
}

impl TumorSpec {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        dist2(p, self.center) <= self.radius * self.radius
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DuctSpec {
    pub points: Vec<[f64; 3]>,
    pub radius: f64,
    /// HU offset relative to the pancreas.
    pub delta: PerPhase,
}

impl DuctSpec {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let r2 = self.radius * self.radius;
        self.points
            .windows(2)
            .any(|s| point_segment_dist2(p, s[0], s[1]) <= r2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// `[W, H, L]`.
    pub dims: [usize; 3],
    pub background_hu: f64,
    pub pancreas: Ellipsoid,
    pub tumor: Option<TumorSpec>,
    pub duct: Option<DuctSpec>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        let n = 96.0;
        PhantomSpec {
            dims: [96; 3],
            background_hu: -50.0,
            pancreas: Ellipsoid {
                center: [n / 2.0; 3],
                semi_axes: [0.3 * n, 0.12 * n, 0.12 * n],
                hu: PerPhase::new(90.0, 110.0),
            },
            tumor: None,
            duct: None,
            noise_sigma: 10.0,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    /// Default HU contrast of a tumor: arterial-enhancing.
    pub const TUMOR_DELTA: PerPhase = PerPhase {
        arterial: 60.0,
        venous: 15.0,
    };
    pub const DUCT_DELTA: PerPhase = PerPhase {
        arterial: -60.0,
        venous: -70.0,
    };

    pub fn validate(&self) -> Result<()> {
        let dims = Dims::new(self.dims[0], self.dims[1], self.dims[2])?;
        let inside = |p: [f64; 3], r: f64| {
            (0..3).all(|a| p[a] - r >= 0.0 && p[a] + r <= (dims.0[a] - 1) as f64)
        };
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::InvalidArgument("noise sigma must be finite and >= 0".into()));
        }
        if !self.pancreas.hu.is_finite() || self.pancreas.semi_axes.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidArgument("pancreas needs positive semi-axes and finite HU".into()));
        }
        if !inside(self.pancreas.center, 0.0) {
            return Err(Error::InvalidArgument("pancreas center outside the volume".into()));
        }
        if let Some(t) = &self.tumor {
            if !(t.radius >= 1.0) || !t.delta.is_finite() {
                return Err(Error::InvalidArgument("tumor needs radius >= 1 and finite deltas".into()));
            }
            if !inside(t.center, t.radius) {
                return Err(Error::InvalidArgument(format!(
                    "tumor ball (center {:?}, radius {}) leaves the volume",
                    t.center, t.radius
                )));
            }
            if !self.pancreas.contains(t.center) {
                return Err(Error::InvalidArgument("tumor center lies outside the pancreas".into()));
            }
        }
        if let Some(d) = &self.duct {
            if !(d.radius >= 1.0) || !d.delta.is_finite() || d.points.len() < 2 {
                return Err(Error::InvalidArgument(
                    "duct needs >= 2 points, radius >= 1 and finite deltas".into(),
                ));
            }
            if let Some(p) = d.points.iter().find(|&&p| !inside(p, d.radius)) {
                return Err(Error::InvalidArgument(format!("duct point {p:?} leaves the volume")));
            }
        }
        Ok(())
    }
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

fn point_segment_dist2(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let len2: f64 = ab.iter().map(|v| v * v).sum();
    let t = if len2 > 0.0 {
        ((0..3).map(|i| ap[i] * ab[i]).sum::<f64>() / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    dist2(p, [a[0] + t * ab[0], a[1] + t * ab[1], a[2] + t * ab[2]])
}

/// Ground-truth class of the voxel centred at `p`. Tumor wins over duct,
/// duct over pancreas.
pub fn voxel_class(spec: &PhantomSpec, p: [f64; 3]) -> u8 {
    if spec.tumor.as_ref().is_some_and(|t| t.contains(p)) {
        TUMOR
    } else if spec.duct.as_ref().is_some_and(|d| d.contains(p)) {
        DUCT
    } else if spec.pancreas.contains(p) {
        PANCREAS
    } else {
        BACKGROUND
    }
}

pub fn generate_mask(spec: &PhantomSpec) -> Result<LabelMask> {
    spec.validate()?;
    let dims = Dims(spec.dims);
    let labels = (0..dims.len())
        .map(|i| {
            let [x, y, z] = dims.coord(i);
            voxel_class(spec, [x as f64, y as f64, z as f64])
        })
        .collect();
    LabelMask::new(dims, labels)
}

fn phase_volume(spec: &PhantomSpec, mask: &LabelMask, phase: Phase) -> Volume3D {
    let dims = mask.dims();
    let base = spec.pancreas.hu.get(phase);
    let tumor = spec.tumor.as_ref().map_or(0.0, |t| t.delta.get(phase));
    let duct = spec.duct.as_ref().map_or(0.0, |d| d.delta.get(phase));
    let phase_key = match phase {
        Phase::Arterial => 1,
        Phase::Venous => 2,
    };
    let mut rng = SplitMix64::new(derive_seed(spec.seed, &[phase_key]));
    let data = mask
        .labels()
        .iter()
        .map(|&c| {
            let mean = match c {
                TUMOR => base + tumor,
                DUCT => base + duct,
                PANCREAS => base,
                _ => spec.background_hu,
            };
            let hu = libm::round(mean + spec.noise_sigma * rng.gaussian());
            hu.clamp(i16::MIN as f64, i16::MAX as f64) as i16
        })
        .collect();
    Volume3D::new(dims, [1.0; 3], data).expect("dims match")
}

/// Builds both phases and the shared mask. Pure in `spec`.
pub fn generate_case(case_id: &str, spec: &PhantomSpec) -> Result<CaseRecord> {
    let mask = generate_mask(spec)?;
    let mut phases = BTreeMap::new();
    for phase in Phase::ALL {
        phases.insert(
            phase,
            PhaseData {
                volume: phase_volume(spec, &mask, phase),
                mask: Some(mask.clone()),
            },
        );
    }
    Ok(CaseRecord {
        case_id: case_id.to_string(),
        phases,
        abnormal: spec.tumor.is_some(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Hard,
}

impl Difficulty {
    pub fn as_str(&self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Hard => "hard",
        }
    }
}

impl FromStr for Difficulty {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Difficulty::Easy),
            "hard" => Ok(Difficulty::Hard),
            o => Err(Error::InvalidArgument(format!("unknown difficulty `{o}`"))),
        }
    }
}

pub fn case_id(difficulty: Difficulty, abnormal: bool, idx: usize) -> String {
    format!("{}-{}{idx:03}", difficulty.as_str(), if abnormal { 'a' } else { 'n' })
}

/// Which phase carries the near-invisible tumor in a hard abnormal case.
pub fn hard_weak_phase(idx: usize) -> Phase {
    if idx.is_multiple_of(2) {
        Phase::Venous
    } else {
        Phase::Arterial
    }
}

/// Random geometry for case `idx` of the given kind.
///
/// Easy abnormal: tumor radius 3-5 voxels, arterial delta 50-70 HU, venous
/// delta 15-25 HU, and a thin (non-dilated) duct in every third case.
/// Hard abnormal: radius 3-4.5, one phase (see [`hard_weak_phase`]) has
/// |delta| < 4 HU, the other 55-70 HU. Hard normal: every third case has a
/// dilated duct and no tumor.
pub fn random_spec(dims: Dims, seed: u64, difficulty: Difficulty, abnormal: bool, idx: usize) -> PhantomSpec {
    let case_seed = derive_seed(seed, &[difficulty as u64, abnormal as u64, idx as u64]);
    let mut rng = SplitMix64::new(case_seed);
    let d = dims.0.map(|v| v as f64);
    let mut u = |lo: f64, hi: f64| rng.uniform_range(lo, hi);

    let center = [
        d[0] / 2.0 + u(-0.08, 0.08) * d[0],
        d[1] / 2.0 + u(-0.08, 0.08) * d[1],
        d[2] / 2.0 + u(-0.08, 0.08) * d[2],
    ];
    let semi_axes = [
        (0.30 * d[0] * u(0.85, 1.1)).max(3.0),
        (0.12 * d[1] * u(0.85, 1.15)).max(3.0),
        (0.12 * d[2] * u(0.85, 1.15)).max(3.0),
    ];
    let pancreas = Ellipsoid {
        center,
        semi_axes,
        hu: PerPhase::new(90.0 + u(-5.0, 5.0), 110.0 + u(-5.0, 5.0)),
    };

    let max_r = (dims.0.iter().copied().min().unwrap() as f64 / 6.0).max(1.0);
    let tumor = abnormal.then(|| {
        let (radius, delta) = match difficulty {
            Difficulty::Easy => (u(3.0, 5.0), PerPhase::new(u(50.0, 70.0), u(15.0, 25.0))),
            Difficulty::Hard => {
                let weak = u(-4.0, 4.0);
                let strong = u(55.0, 70.0);
                let delta = match hard_weak_phase(idx) {
                    Phase::Venous => PerPhase::new(strong, weak),
                    Phase::Arterial => PerPhase::new(weak, strong),
                };
                (u(3.0, 4.5), delta)
            }
        };
        let radius = radius.min(max_r);
        // Rejection-sample an offset inside the inner 55% of the ellipsoid.
        let off = loop {
            let o = [u(-1.0, 1.0), u(-1.0, 1.0), u(-1.0, 1.0)];
            if o.iter().map(|v| v * v).sum::<f64>() <= 1.0 {
                break o;
            }
        };
        let mut c = [0.0; 3];
        for a in 0..3 {
            c[a] = (center[a] + 0.55 * off[a] * semi_axes[a]).clamp(radius, d[a] - 1.0 - radius);
        }
        TumorSpec {
            center: c,
            radius,
            delta,
        }
    });

    let duct_radius = match (difficulty, abnormal) {
        (Difficulty::Easy, true) if idx % 3 == 1 => Some(u(1.2, 1.6)),
        (Difficulty::Hard, false) if idx.is_multiple_of(3) => Some(u(2.8, 3.2)),
        _ => None,
    };
    let duct = duct_radius.map(|radius| {
        let radius = radius.min(max_r);
        let n = 4;
        let points = (0..n)
            .map(|k| {
                let t = -0.75 + 1.5 * k as f64 / (n - 1) as f64;
                let p = [
                    center[0] + t * semi_axes[0],
                    center[1] + u(-0.25, 0.25) * semi_axes[1],
                    center[2] + u(-0.25, 0.25) * semi_axes[2],
                ];
                [0, 1, 2].map(|a| p[a].clamp(radius, d[a] - 1.0 - radius))
            })
            .collect();
        let j = u(-5.0, 5.0);
        DuctSpec {
            points,
            radius,
            delta: PerPhase::new(PhantomSpec::DUCT_DELTA.arterial + j, PhantomSpec::DUCT_DELTA.venous + j),
        }
    });

    PhantomSpec {
        dims: dims.0,
        background_hu: -50.0,
        pancreas,
        tumor,
        duct,
        noise_sigma: 10.0,
        seed: case_seed,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetOptions {
    pub n_normal: usize,
    pub n_abnormal: usize,
    pub dims: Dims,
    pub seed: u64,
    pub difficulty: Difficulty,
}

pub fn case_dir(out: &Path, case_id: &str) -> PathBuf {
    out.join("cases").join(case_id)
}

/// Writes a case directory: `{phase}.raw`, `{phase}_mask.raw` (+ sidecars)
/// and `spec.json`. Returns the manifest entry with paths relative to `out`.
pub fn write_case(out: &Path, case: &CaseRecord, spec: Option<&PhantomSpec>) -> Result<ManifestEntry> {
    let dir = case_dir(out, &case.case_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let rel = PathBuf::from("cases").join(&case.case_id);
    let mut phases = BTreeMap::new();
    for (phase, data) in &case.phases {
        let vol = format!("{phase}.raw");
        write_volume(&data.volume, &dir.join(&vol))?;
        let mask = match &data.mask {
            Some(m) => {
                let name = format!("{phase}_mask.raw");
                write_mask(m, &dir.join(&name), data.volume.spacing())?;
                Some(rel.join(name))
            }
            None => None,
        };
        phases.insert(*phase, PhaseFiles { vol: rel.join(vol), mask });
    }
    if let Some(spec) = spec {
        let p = dir.join("spec.json");
        let text = serde_json::to_string_pretty(spec).expect("spec serializes");
        fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))?;
    }
    Ok(ManifestEntry {
        id: case.case_id.clone(),
        label: case.abnormal as u8,
        phases,
    })
}

pub fn read_case_spec(dir: &Path) -> Result<PhantomSpec> {
    let p = dir.join("spec.json");
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&p, e.to_string()))
}

/// Generates, writes and indexes a phantom dataset under `out`
/// (`out/manifest.json`, `out/cases/<id>/...`). Normal cases come first.
/// Normal cases first, then abnormal, each with the spec that produced it.
pub fn generate_cases(opts: &DatasetOptions) -> Result<Vec<(CaseRecord, PhantomSpec)>> {
    (0..opts.n_normal)
        .map(|i| (false, i))
        .chain((0..opts.n_abnormal).map(|i| (true, i)))
        .map(|(abnormal, idx)| {
            let spec = random_spec(opts.dims, opts.seed, opts.difficulty, abnormal, idx);
            let case = generate_case(&case_id(opts.difficulty, abnormal, idx), &spec)?;
            Ok((case, spec))
        })
        .collect()
}

pub fn generate_dataset(opts: &DatasetOptions, out: &Path) -> Result<DatasetManifest> {
    generate_datasets(std::slice::from_ref(opts), out)
}

/// Writes several generated parts (e.g. easy and hard) under one manifest.
/// The manifest records the first part's seed.
pub fn generate_datasets(parts: &[DatasetOptions], out: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut manifest = DatasetManifest::new(out, parts.first().map(|p| p.seed));
    for opts in parts {
        for (case, spec) in generate_cases(opts)? {
            if manifest.cases.iter().any(|c| c.id == case.case_id) {
                return Err(Error::DuplicateCase(case.case_id));
            }
            manifest.cases.push(write_case(out, &case, Some(&spec))?);
        }
    }
    manifest.save(&out.join("manifest.json"))?;
    Ok(manifest)
}
