//! Axial slices as binary PPM: grey HU window with class colors blended in
//! (pancreas blue, tumor red, duct green).

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use s4c_core::{LabelMask, Volume3D};

const HU_LO: f32 = -200.0;
const HU_HI: f32 = 300.0;
const ALPHA: f32 = 0.5;

fn class_color(c: u8) -> Option<[u8; 3]> {
    match c {
        1 => Some([0, 0, 255]),
        2 => Some([255, 0, 0]),
        3 => Some([0, 255, 0]),
        _ => None,
    }
}

/// RGB pixels of slice `z`, row-major with x fastest.
pub fn render_slice(volume: &Volume3D, mask: &LabelMask, z: usize) -> Vec<u8> {
    let d = volume.dims();
    let mut px = Vec::with_capacity(3 * d.w() * d.h());
    for y in 0..d.h() {
        for x in 0..d.w() {
            let hu = volume.get(x, y, z) as f32;
            let g = ((hu.clamp(HU_LO, HU_HI) - HU_LO) / (HU_HI - HU_LO) * 255.0).round();
            let rgb = match class_color(mask.get(x, y, z)) {
                Some(c) => c.map(|v| ((1.0 - ALPHA) * g + ALPHA * v as f32).round() as u8),
                None => [g as u8; 3],
            };
            px.extend_from_slice(&rgb);
        }
    }
    px
}

pub fn write_slices(volume: &Volume3D, mask: &LabelMask, out: &Path, every: usize) -> Result<Vec<PathBuf>> {
    ensure!(volume.dims() == mask.dims(), "mask dims {} differ from volume dims {}", mask.dims(), volume.dims());
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let d = volume.dims();
    let mut files = Vec::new();
    for z in (0..d.l()).step_by(every) {
        let mut bytes = format!("P6\n{} {}\n255\n", d.w(), d.h()).into_bytes();
        bytes.extend(render_slice(volume, mask, z));
        let path = out.join(format!("slice_{z:04}.ppm"));
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        files.push(path);
    }
    Ok(files)
}
