use crate::error::{Error, Result};
use crate::volume::Dims;

use super::{Real, Tensor};

/// Winning tap (0..8) for every pooled output element.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolIndices {
    pub input_dims: Dims,
    pub taps: Vec<u8>,
}

/// 2x2x2 max pooling, stride 2. Input dims must be even.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MaxPool2;

impl MaxPool2 {
    pub fn forward<T: Real>(&self, x: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices)> {
        let d = x.dims;
        if d.0.iter().any(|v| v % 2 != 0) {
            return Err(Error::Shape(format!("max pool needs even dims, got {d}")));
        }
        let od = Dims([d.w() / 2, d.h() / 2, d.l() / 2]);
        let mut out = Tensor::zeros(x.channels, od);
        let mut taps = vec![0u8; x.channels * od.len()];
        for c in 0..x.channels {
            let src = x.channel(c);
            for o in 0..od.len() {
                let [ox, oy, oz] = od.coord(o);
                let mut best = T::neg_infinity();
                let mut arg = 0u8;
                for a in 0..8usize {
                    let v = src[d.index(2 * ox + (a & 1), 2 * oy + ((a >> 1) & 1), 2 * oz + (a >> 2))];
                    if v > best {
                        best = v;
                        arg = a as u8;
                    }
                }
                out.data[c * od.len() + o] = best;
                taps[c * od.len() + o] = arg;
            }
        }
        Ok((out, PoolIndices { input_dims: d, taps }))
    }

    pub fn backward<T: Real>(&self, idx: &PoolIndices, gout: &Tensor<T>) -> Tensor<T> {
        let d = idx.input_dims;
        let od = gout.dims;
        let mut dx = Tensor::zeros(gout.channels, d);
        for c in 0..gout.channels {
            for o in 0..od.len() {
                let [ox, oy, oz] = od.coord(o);
                let a = idx.taps[c * od.len() + o] as usize;
                let i = d.index(2 * ox + (a & 1), 2 * oy + ((a >> 1) & 1), 2 * oz + (a >> 2));
                dx.data[c * d.len() + i] += gout.data[c * od.len() + o];
            }
        }
        dx
    }
}
