use crate::error::{Error, Result};
use crate::volume::Dims;

use super::{Real, Tensor};

/// Fully connected layer; `weight` is `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Linear<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear {
            inputs,
            outputs,
            weight: vec![T::zero(); inputs * outputs],
            bias: vec![T::zero(); outputs],
        }
    }

    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.inputs {
            return Err(Error::Shape(format!("linear expects {} inputs, got {}", self.inputs, x.len())));
        }
        Ok((0..self.outputs)
            .map(|o| {
                let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
                self.bias[o] + row.iter().zip(x).map(|(&w, &v)| w * v).sum::<T>()
            })
            .collect())
    }

    pub fn backward(&self, x: &[T], gout: &[T], grad: &mut Linear<T>) -> Vec<T> {
        let mut dx = vec![T::zero(); self.inputs];
        for o in 0..self.outputs {
            grad.bias[o] += gout[o];
            for i in 0..self.inputs {
                grad.weight[o * self.inputs + i] += gout[o] * x[i];
                dx[i] += gout[o] * self.weight[o * self.inputs + i];
            }
        }
        dx
    }
}

/// Per-channel spatial mean.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Vec<T> {
    let n = T::from_usize(x.voxels()).unwrap();
    (0..x.channels).map(|c| x.channel(c).iter().copied().sum::<T>() / n).collect()
}

pub fn global_avg_pool_backward<T: Real>(gout: &[T], channels: usize, dims: Dims) -> Tensor<T> {
    let n = dims.len();
    let inv = T::one() / T::from_usize(n).unwrap();
    let mut dx = Tensor::zeros(channels, dims);
    for c in 0..channels {
        dx.channel_mut(c).fill(gout[c] * inv);
    }
    dx
}
