use crate::error::{Error, Result};

use super::{Real, Tensor};

/// Group normalization over `(channels in group) x voxels` with a
/// per-channel affine transform.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupNorm<T> {
    pub groups: usize,
    pub channels: usize,
    pub eps: f64,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

/// Saved statistics for the backward pass.
#[derive(Debug, Clone)]
pub struct GroupNormCache<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
}

impl<T: Real> GroupNorm<T> {
    pub const DEFAULT_EPS: f64 = 1e-6;

    pub fn new(groups: usize, channels: usize) -> Result<Self> {
        if groups == 0 || !channels.is_multiple_of(groups) {
            return Err(Error::InvalidArgument(format!(
                "{channels} channels not divisible into {groups} groups"
            )));
        }
        Ok(GroupNorm {
            groups,
            channels,
            eps: Self::DEFAULT_EPS,
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
        })
    }

    /// Normalized activations before the affine transform.
    pub fn normalize(&self, x: &Tensor<T>) -> Result<GroupNormCache<T>> {
        if x.channels != self.channels {
            return Err(Error::Shape(format!(
                "group norm expects {} channels, got {}",
                self.channels, x.channels
            )));
        }
        let n = x.voxels();
        let cpg = self.channels / self.groups;
        let m = T::from_usize(cpg * n).unwrap();
        let mut normalized = x.clone();
        let mut inv_std = Vec::with_capacity(self.groups);
        for g in 0..self.groups {
            let span = &mut normalized.data[g * cpg * n..(g + 1) * cpg * n];
            let mean = span.iter().copied().sum::<T>() / m;
            let var = span.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
            let is = T::one() / (var + T::lit(self.eps)).sqrt();
            for v in span.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        Ok(GroupNormCache { normalized, inv_std })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, GroupNormCache<T>)> {
        let cache = self.normalize(x)?;
        let mut y = cache.normalized.clone();
        for c in 0..self.channels {
            let (g, b) = (self.gamma[c], self.beta[c]);
            y.channel_mut(c).iter_mut().for_each(|v| *v = *v * g + b);
        }
        Ok((y, cache))
    }

    pub fn backward(&self, cache: &GroupNormCache<T>, gout: &Tensor<T>, grad: &mut GroupNorm<T>) -> Tensor<T> {
        let n = gout.voxels();
        let cpg = self.channels / self.groups;
        let m = T::from_usize(cpg * n).unwrap();
        let xhat = &cache.normalized;
        let mut dx = Tensor::zeros(self.channels, gout.dims);
        for c in 0..self.channels {
            let go = gout.channel(c);
            let xh = xhat.channel(c);
            grad.gamma[c] += go.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>();
            grad.beta[c] += go.iter().copied().sum::<T>();
        }
        for g in 0..self.groups {
            let range = g * cpg * n..(g + 1) * cpg * n;
            let mut sum_d = T::zero();
            let mut sum_dx = T::zero();
            for i in range.clone() {
                let dxhat = gout.data[i] * self.gamma[i / n];
                sum_d += dxhat;
                sum_dx += dxhat * xhat.data[i];
            }
            let is = cache.inv_std[g];
            for i in range {
                let dxhat = gout.data[i] * self.gamma[i / n];
                dx.data[i] = is / m * (m * dxhat - sum_d - xhat.data[i] * sum_dx);
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_layer, random_tensor};
    use crate::rng::SplitMix64;
    use crate::volume::Dims;

    #[test]
    fn constant_map_normalizes_to_zero() {
        let gn = GroupNorm::<f64>::new(2, 4).unwrap();
        let x = Tensor::from_vec(4, Dims::cube(2).unwrap(), vec![3.5; 32]).unwrap();
        let c = gn.normalize(&x).unwrap();
        assert!(c.normalized.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn group_moments() {
        let mut rng = SplitMix64::new(8);
        let gn = GroupNorm::<f64>::new(4, 8).unwrap();
        let x = random_tensor(&mut rng, 8, Dims::new(3, 4, 5).unwrap());
        let c = gn.normalize(&x).unwrap();
        let n = x.voxels() * 2;
        for g in 0..4 {
            let s = &c.normalized.data[g * n..(g + 1) * n];
            let mean = s.iter().sum::<f64>() / n as f64;
            let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-5, "mean {mean} var {var}");
        }
    }

    #[test]
    fn indivisible_groups() {
        assert!(GroupNorm::<f32>::new(3, 8).is_err());
    }

    #[test]
    fn groupnorm_gradients() {
        let mut rng = SplitMix64::new(9);
        for _ in 0..20 {
            let mut gn = GroupNorm::<f64>::new(2, 4).unwrap();
            gn.gamma.iter_mut().for_each(|v| *v = 1.0 + 0.3 * rng.gaussian());
            gn.beta.iter_mut().for_each(|v| *v = rng.gaussian());
            let x = random_tensor(&mut rng, 4, Dims::new(2, 3, 2).unwrap());
            check_layer(
                &mut rng,
                &x,
                &gn,
                |l, x| l.forward(x).unwrap().0,
                |l, x, g| {
                    let (_, cache) = l.forward(x).unwrap();
                    let mut grad = GroupNorm::new(2, 4).unwrap();
                    grad.gamma.fill(0.0);
                    let dx = l.backward(&cache, g, &mut grad);
                    (dx, vec![grad.gamma, grad.beta])
                },
                |l| vec![&mut l.gamma, &mut l.beta],
            );
        }
    }
}
