//! Raw little-endian grids with a JSON sidecar.
//!
//! `foo.raw` holds the voxels; `foo.raw.json` holds
//! `{"dims":[W,H,L],"spacing":[sx,sy,sz],"dtype":"i16"|"u8","order":"xyz-row-major"}`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dims, LabelMask, Volume3D};

pub const ORDER: &str = "xyz-row-major";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    I16,
    U8,
}

impl DType {
    fn size(self) -> usize {
        match self {
            DType::I16 => 2,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub dtype: DType,
    pub order: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn write_sidecar(path: &Path, sidecar: &Sidecar) -> Result<()> {
    let side = sidecar_path(path);
    let text = serde_json::to_string_pretty(sidecar).expect("sidecar serializes");
    fs::write(&side, text + "\n").map_err(|e| Error::io(&side, e))
}

pub fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sc: Sidecar =
        serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
    if sc.order != ORDER {
        return Err(Error::format(
            &side,
            format!("unsupported order `{}` (expected {ORDER})", sc.order),
        ));
    }
    Ok(sc)
}

fn read_payload(path: &Path, expected: DType) -> Result<(Sidecar, Dims, Vec<u8>)> {
    let sc = read_sidecar(path)?;
    if sc.dtype != expected {
        return Err(Error::format(
            path,
            format!("dtype {:?} in sidecar, expected {:?}", sc.dtype, expected),
        ));
    }
    let dims = Dims::new(sc.dims[0], sc.dims[1], sc.dims[2])
        .map_err(|e| Error::format(sidecar_path(path), e.to_string()))?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let want = dims.len() * expected.size();
    if bytes.len() != want {
        return Err(Error::format(
            path,
            format!(
                "payload has {} bytes, dims {dims} x {} bytes need {want}",
                bytes.len(),
                expected.size()
            ),
        ));
    }
    Ok((sc, dims, bytes))
}

pub fn encode_i16_le(values: &[i16]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 2);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_volume(v: &Volume3D, path: &Path) -> Result<()> {
    fs::write(path, encode_i16_le(v.data())).map_err(|e| Error::io(path, e))?;
    write_sidecar(
        path,
        &Sidecar {
            dims: v.dims().0,
            spacing: v.spacing(),
            dtype: DType::I16,
            order: ORDER.into(),
        },
    )
}

pub fn read_volume(path: &Path) -> Result<Volume3D> {
    let (sc, dims, bytes) = read_payload(path, DType::I16)?;
    let data = bytes
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]))
        .collect();
    Volume3D::new(dims, sc.spacing, data)
}

pub fn write_mask(m: &LabelMask, path: &Path, spacing: [f32; 3]) -> Result<()> {
    fs::write(path, m.labels()).map_err(|e| Error::io(path, e))?;
    write_sidecar(
        path,
        &Sidecar {
            dims: m.dims().0,
            spacing,
            dtype: DType::U8,
            order: ORDER.into(),
        },
    )
}

pub fn read_mask(path: &Path) -> Result<LabelMask> {
    let (_, dims, bytes) = read_payload(path, DType::U8)?;
    LabelMask::new(dims, bytes).map_err(|e| Error::format(path, e.to_string()))
}
