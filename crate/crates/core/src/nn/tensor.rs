use crate::error::{Error, Result};
use crate::volume::Dims;

use super::Real;

/// One sample: `channels` planes of a `dims` grid, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub channels: usize,
    pub dims: Dims,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(channels: usize, dims: Dims) -> Self {
        Tensor {
            channels,
            dims,
            data: vec![T::zero(); channels * dims.len()],
        }
    }

    pub fn from_vec(channels: usize, dims: Dims, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * dims.len() {
            return Err(Error::Shape(format!(
                "tensor data {} != {channels} x {dims}",
                data.len()
            )));
        }
        Ok(Tensor { channels, dims, data })
    }

    #[inline]
    pub fn voxels(&self) -> usize {
        self.dims.len()
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.voxels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.channels == other.channels && self.dims == other.dims
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            channels: self.channels,
            dims: self.dims,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64().unwrap()).unwrap()).collect(),
        }
    }
}

pub fn relu_inplace<T: Real>(t: &mut Tensor<T>) {
    for v in &mut t.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Masks `grad` by the positive support of the ReLU output `out`.
pub fn relu_backward<T: Real>(out: &Tensor<T>, grad: &mut Tensor<T>) {
    for (g, &o) in grad.data.iter_mut().zip(&out.data) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

pub fn add_assign<T: Real>(dst: &mut Tensor<T>, src: &Tensor<T>) -> Result<()> {
    if !dst.same_shape(src) {
        return Err(Error::Shape(format!(
            "residual sum of {}x{} and {}x{}",
            dst.channels, dst.dims, src.channels, src.dims
        )));
    }
    for (d, &s) in dst.data.iter_mut().zip(&src.data) {
        *d += s;
    }
    Ok(())
}
