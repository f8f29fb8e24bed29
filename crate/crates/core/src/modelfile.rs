//! Binary container for trained weights.
//!
//! Layout (little-endian): 4-byte magic, `u32` version, `u32` header length,
//! JSON header, `u32` tensor count, then per tensor a `u64` element count and
//! the `f32` values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const VERSION: u32 = 1;

pub fn write_model_file<H: Serialize>(path: &Path, magic: &[u8; 4], header: &H, tensors: &[&[f32]]) -> Result<()> {
    let json = serde_json::to_vec(header).map_err(|e| Error::format(path, e.to_string()))?;
    let mut buf = Vec::with_capacity(16 + json.len() + tensors.iter().map(|t| 8 + 4 * t.len()).sum::<usize>());
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        buf.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for v in t.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_model_file<H: DeserializeOwned>(path: &Path, magic: &[u8; 4]) -> Result<(H, Vec<Vec<f32>>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut r = Cursor { bytes: &bytes, pos: 0, path };
    if r.take(4)? != magic {
        return Err(Error::format(path, "bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let hlen = r.u32()? as usize;
    let header = serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::format(path, format!("header: {e}")))?;
    let n = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u64()? as usize;
        let raw = r.take(len.checked_mul(4).ok_or_else(|| Error::format(path, "tensor too large"))?)?;
        tensors.push(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect());
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes"));
    }
    Ok((header, tensors))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, "truncated file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Copies loaded tensors into `dst`, checking count and lengths.
pub(crate) fn fill_params(path: &Path, dst: Vec<&mut Vec<f32>>, src: Vec<Vec<f32>>) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::format(path, format!("expected {} tensors, found {}", dst.len(), src.len())));
    }
    for (i, (d, s)) in dst.into_iter().zip(src).enumerate() {
        if d.len() != s.len() {
            return Err(Error::format(path, format!("tensor {i}: expected {} values, found {}", d.len(), s.len())));
        }
        *d = s;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        let a = [1.5f32, -2.0];
        let b = [0.25f32];
        write_model_file(&p, b"TEST", &serde_json::json!({"k": 3}), &[&a, &b]).unwrap();
        let (h, t): (serde_json::Value, _) = read_model_file(&p, b"TEST").unwrap();
        assert_eq!(h["k"], 3);
        assert_eq!(t, vec![a.to_vec(), b.to_vec()]);
        assert!(matches!(read_model_file::<serde_json::Value>(&p, b"NOPE"), Err(Error::Format { .. })));

        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_model_file::<serde_json::Value>(&p, b"TEST"), Err(Error::Format { .. })));
    }
}
