//! Connected-component retention and the voxel-count abnormality rule.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dims, LabelMask, Phase, DUCT, TUMOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Six,
    #[default]
    TwentySix,
}

impl TryFrom<u8> for Connectivity {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self> {
        match v {
            6 => Ok(Connectivity::Six),
            26 => Ok(Connectivity::TwentySix),
            _ => Err(Error::InvalidArgument(format!("connectivity must be 6 or 26, got {v}"))),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::TwentySix => 26,
        }
    }
}

impl FromStr for Connectivity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        s.parse::<u8>()
            .map_err(|_| Error::InvalidArgument(format!("connectivity must be 6 or 26, got {s:?}")))?
            .try_into()
    }
}

impl fmt::Display for Connectivity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", u8::from(*self))
    }
}

impl Connectivity {
    /// Neighbour offsets that precede a voxel in x-fastest scan order.
    fn backward_offsets(self) -> Vec<[i64; 3]> {
        let mut v = Vec::new();
        for dz in -1..=1i64 {
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    let manhattan = dx.abs() + dy.abs() + dz.abs();
                    let before = (dz, dy, dx) < (0, 0, 0);
                    if before && (self == Connectivity::TwentySix || manhattan == 1) {
                        v.push([dx, dy, dz]);
                    }
                }
            }
        }
        v
    }
}

/// A maximal connected set of voxels, as sorted linear indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    pub voxels: Vec<usize>,
}

impl Component {
    pub fn size(&self) -> usize {
        self.voxels.len()
    }

    /// Lowest linear index, i.e. the first voxel in (z, y, x) lexicographic order.
    pub fn anchor(&self) -> usize {
        self.voxels[0]
    }
}

fn find(parent: &mut [u32], mut a: u32) -> u32 {
    while parent[a as usize] != a {
        let p = parent[a as usize];
        parent[a as usize] = parent[p as usize];
        a = p;
    }
    a
}

/// Components over voxels whose class is in `classes`, ordered by anchor.
pub fn connected_components(mask: &LabelMask, classes: &[u8], conn: Connectivity) -> Vec<Component> {
    let dims = mask.dims();
    let [w, h, l] = dims.0;
    let mut in_set = [false; 256];
    classes.iter().for_each(|&c| in_set[c as usize] = true);
    let labels = mask.labels();
    const NONE: u32 = u32::MAX;
    let mut prov = vec![NONE; labels.len()];
    let mut parent: Vec<u32> = Vec::new();
    let offsets = conn.backward_offsets();
    let mut i = 0;
    for z in 0..l {
        for y in 0..h {
            for x in 0..w {
                if in_set[labels[i] as usize] {
                    let mut mine = NONE;
                    for o in &offsets {
                        let (nx, ny, nz) = (x as i64 + o[0], y as i64 + o[1], z as i64 + o[2]);
                        if !dims.contains([nx, ny, nz]) {
                            continue;
                        }
                        let n = prov[dims.index(nx as usize, ny as usize, nz as usize)];
                        if n == NONE {
                            continue;
                        }
                        if mine == NONE {
                            mine = find(&mut parent, n);
                        } else {
                            let (a, b) = (find(&mut parent, mine), find(&mut parent, n));
                            if a != b {
                                let (lo, hi) = (a.min(b), a.max(b));
                                parent[hi as usize] = lo;
                                mine = lo;
                            }
                        }
                    }
                    if mine == NONE {
                        mine = parent.len() as u32;
                        parent.push(mine);
                    }
                    prov[i] = mine;
                }
                i += 1;
            }
        }
    }
    // Roots are created in scan order, so root ids already follow anchor order.
    let mut slot = vec![NONE; parent.len()];
    let mut comps: Vec<Component> = Vec::new();
    for (i, &p) in prov.iter().enumerate() {
        if p == NONE {
            continue;
        }
        let r = find(&mut parent, p) as usize;
        if slot[r] == NONE {
            slot[r] = comps.len() as u32;
            comps.push(Component { voxels: Vec::new() });
        }
        comps[slot[r] as usize].voxels.push(i);
    }
    comps
}

/// Squared Euclidean distance from every voxel to the nearest seed voxel,
/// exact in integers (separable lower-envelope transform).
pub fn squared_distance_transform(dims: Dims, seeds: &[usize]) -> Vec<u64> {
    const INF: u64 = u64::MAX;
    let mut d = vec![INF; dims.len()];
    for &s in seeds {
        d[s] = 0;
    }
    let [w, h, l] = dims.0;
    let mut line = Vec::new();
    let mut out = Vec::new();
    let mut pass = |d: &mut Vec<u64>, n: usize, stride: usize, starts: Vec<usize>| {
        for s in starts {
            line.clear();
            line.extend((0..n).map(|k| d[s + k * stride]));
            envelope_1d(&line, &mut out);
            for k in 0..n {
                d[s + k * stride] = out[k];
            }
        }
    };
    pass(&mut d, w, 1, (0..h * l).map(|r| r * w).collect());
    pass(&mut d, h, w, (0..l).flat_map(|z| (0..w).map(move |x| x + z * w * h)).collect());
    pass(&mut d, l, w * h, (0..w * h).collect());
    d
}

/// `out[q] = min_p f[p] + (q - p)^2` over finite `f[p]`.
fn envelope_1d(f: &[u64], out: &mut Vec<u64>) {
    let n = f.len();
    out.clear();
    out.resize(n, u64::MAX);
    let sites: Vec<usize> = (0..n).filter(|&p| f[p] != u64::MAX).collect();
    if sites.is_empty() {
        return;
    }
    // Parabola p dominates q > p beyond intersection s(p, q); compare with
    // cross-multiplied integers to stay exact.
    let key = |p: usize| f[p] as i128 + (p * p) as i128;
    let mut hull: Vec<usize> = Vec::with_capacity(sites.len());
    // z[k] is the boundary between hull[k-1] and hull[k] as a rational num/den.
    let mut bounds: Vec<(i128, i128)> = Vec::with_capacity(sites.len());
    for &q in &sites {
        loop {
            match hull.last() {
                None => {
                    hull.push(q);
                    bounds.push((i128::MIN, 1));
                    break;
                }
                Some(&p) => {
                    let num = key(q) - key(p);
                    let den = 2 * (q as i128 - p as i128);
                    let (bn, bd) = *bounds.last().unwrap();
                    // Pop p when the new boundary is at or before p's left boundary.
                    if bn != i128::MIN && num * bd <= bn * den {
                        hull.pop();
                        bounds.pop();
                        continue;
                    }
                    hull.push(q);
                    bounds.push((num, den));
                    break;
                }
            }
        }
    }
    let mut k = 0;
    for (x, o) in out.iter_mut().enumerate() {
        while k + 1 < hull.len() {
            let (bn, bd) = bounds[k + 1];
            if bn <= x as i128 * bd {
                k += 1;
            } else {
                break;
            }
        }
        let p = hull[k];
        let dx = x.abs_diff(p) as u64;
        *o = f[p] + dx * dx;
    }
}

/// Retention thresholds: keep components larger than `size_frac` of C_max or
/// closer than `max_distance` voxels to it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetentionRule {
    /// Numerator/denominator of the size fraction (strict `>`).
    pub size_num: u64,
    pub size_den: u64,
    /// Strict `<` on Euclidean distance between voxel centers.
    pub max_distance: u64,
}

impl Default for RetentionRule {
    fn default() -> Self {
        RetentionRule {
            size_num: 1,
            size_den: 5,
            max_distance: 27,
        }
    }
}

/// Index of C_max: largest, ties broken by lowest anchor.
pub fn largest_component(components: &[Component]) -> Option<usize> {
    (0..components.len()).min_by_key(|&i| (std::cmp::Reverse(components[i].size()), components[i].anchor()))
}

/// Per-component keep flags.
pub fn retain_components(components: &[Component], dims: Dims, rule: &RetentionRule) -> Vec<bool> {
    let Some(cmax) = largest_component(components) else {
        return Vec::new();
    };
    let big = components[cmax].size() as u64;
    let mut keep: Vec<bool> = components
        .iter()
        .map(|c| c.size() as u64 * rule.size_den > big * rule.size_num)
        .collect();
    keep[cmax] = true;
    if keep.iter().all(|&k| k) {
        return keep;
    }
    let edt = squared_distance_transform(dims, &components[cmax].voxels);
    let limit = rule.max_distance * rule.max_distance;
    for (c, k) in components.iter().zip(keep.iter_mut()) {
        if !*k {
            *k = c.voxels.iter().any(|&v| edt[v] < limit);
        }
    }
    keep
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostOptions {
    pub connectivity: Connectivity,
    pub tumor_thresh: usize,
    pub duct_thresh: usize,
    pub retention: RetentionRule,
}

impl Default for PostOptions {
    fn default() -> Self {
        PostOptions {
            connectivity: Connectivity::TwentySix,
            tumor_thresh: 40,
            duct_thresh: 500,
            retention: RetentionRule::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Normal,
    Abnormal,
}

impl Verdict {
    pub fn from_bool(abnormal: bool) -> Self {
        if abnormal {
            Verdict::Abnormal
        } else {
            Verdict::Normal
        }
    }

    pub fn is_abnormal(self) -> bool {
        self == Verdict::Abnormal
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseDecision {
    pub tumor_voxels: usize,
    pub duct_voxels: usize,
    pub components: usize,
    pub retained_components: usize,
    pub verdict: Verdict,
}

/// Foreground outside retained components is set to background.
pub fn retained_mask(mask: &LabelMask, opts: &PostOptions) -> (LabelMask, usize, usize) {
    let comps = connected_components(mask, &[1, 2, 3], opts.connectivity);
    let keep = retain_components(&comps, mask.dims(), &opts.retention);
    let mut labels = vec![0u8; mask.dims().len()];
    for (c, _) in comps.iter().zip(&keep).filter(|(_, &k)| k) {
        for &v in &c.voxels {
            labels[v] = mask.labels()[v];
        }
    }
    let kept = keep.iter().filter(|&&k| k).count();
    (LabelMask::new(mask.dims(), labels).expect("copied labels"), comps.len(), kept)
}

/// Retention over all foreground, then tumor and duct counts inside the
/// retained components against the thresholds (both inclusive).
pub fn classify_phase(mask: &LabelMask, opts: &PostOptions) -> PhaseDecision {
    let (kept, components, retained_components) = retained_mask(mask, opts);
    let tumor_voxels = kept.count(TUMOR);
    let duct_voxels = kept.count(DUCT);
    PhaseDecision {
        tumor_voxels,
        duct_voxels,
        components,
        retained_components,
        verdict: Verdict::from_bool(tumor_voxels >= opts.tumor_thresh || duct_voxels >= opts.duct_thresh),
    }
}

/// Abnormal if any phase is.
pub fn fuse_phases<'a>(decisions: impl IntoIterator<Item = &'a PhaseDecision>) -> Result<Verdict> {
    let mut any = None;
    for d in decisions {
        *any.get_or_insert(false) |= d.verdict.is_abnormal();
    }
    any.map(Verdict::from_bool)
        .ok_or_else(|| Error::InvalidArgument("fusion needs at least one phase decision".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseDecision {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub case_id: Option<String>,
    pub phases: BTreeMap<Phase, PhaseDecision>,
    pub fused: Verdict,
}

impl CaseDecision {
    pub fn new(case_id: Option<String>, phases: BTreeMap<Phase, PhaseDecision>) -> Result<Self> {
        let fused = fuse_phases(phases.values())?;
        Ok(CaseDecision { case_id, phases, fused })
    }
}
