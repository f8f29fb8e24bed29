use crate::error::{Error, Result};
use crate::volume::Dims;

use super::{gemm, Real, Tensor};

/// Transposed convolution with a 2x2x2 kernel and stride 2 (exact x2
/// upsampling). `weight` is `(cout x 8) x cin`; row `co*8 + a` holds the tap
/// `a = ax + 2*ay + 4*az` of output channel `co`.
#[derive(Debug, Clone, PartialEq)]
pub struct Deconv2<T> {
    pub cin: usize,
    pub cout: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

fn up_dims(d: Dims) -> Dims {
    Dims([d.w() * 2, d.h() * 2, d.l() * 2])
}

impl<T: Real> Deconv2<T> {
    pub fn zeros(cin: usize, cout: usize) -> Self {
        Deconv2 {
            cin,
            cout,
            weight: vec![T::zero(); cout * 8 * cin],
            bias: vec![T::zero(); cout],
        }
    }

    /// Maps `(tap row, input voxel)` to the output voxel index.
    fn for_each_tap(d: Dims, mut f: impl FnMut(usize, usize, usize)) {
        let od = up_dims(d);
        for i in 0..d.len() {
            let [x, y, z] = d.coord(i);
            for a in 0..8 {
                let (ax, ay, az) = (a & 1, (a >> 1) & 1, a >> 2);
                f(a, i, od.index(2 * x + ax, 2 * y + ay, 2 * z + az));
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.channels != self.cin {
            return Err(Error::Shape(format!(
                "deconv expects {} input channels, got {}",
                self.cin, x.channels
            )));
        }
        let n = x.voxels();
        let rows = self.cout * 8;
        let mut y = vec![T::zero(); rows * n];
        gemm(rows, n, self.cin, T::one(), &self.weight, (self.cin, 1), &x.data, (n, 1), T::zero(), &mut y, n);
        let od = up_dims(x.dims);
        let on = od.len();
        let mut out = Tensor::zeros(self.cout, od);
        Self::for_each_tap(x.dims, |a, i, o| {
            for co in 0..self.cout {
                out.data[co * on + o] = y[(co * 8 + a) * n + i] + self.bias[co];
            }
        });
        Ok(out)
    }

    pub fn backward(&self, x: &Tensor<T>, gout: &Tensor<T>, grad: &mut Deconv2<T>) -> Result<Tensor<T>> {
        let od = up_dims(x.dims);
        if gout.channels != self.cout || gout.dims != od || x.channels != self.cin {
            return Err(Error::Shape("deconv backward: shape".into()));
        }
        let n = x.voxels();
        let on = od.len();
        let rows = self.cout * 8;
        let mut gy = vec![T::zero(); rows * n];
        Self::for_each_tap(x.dims, |a, i, o| {
            for co in 0..self.cout {
                gy[(co * 8 + a) * n + i] = gout.data[co * on + o];
            }
        });
        gemm(rows, self.cin, n, T::one(), &gy, (n, 1), &x.data, (1, n), T::one(), &mut grad.weight, self.cin);
        for co in 0..self.cout {
            grad.bias[co] += gout.channel(co).iter().copied().sum::<T>();
        }
        let mut dx = Tensor::zeros(self.cin, x.dims);
        gemm(self.cin, n, rows, T::one(), &self.weight, (1, self.cin), &gy, (n, 1), T::zero(), &mut dx.data, n);
        Ok(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_layer, random_tensor};
    use crate::rng::SplitMix64;

    #[test]
    fn upsamples_by_two() {
        let mut d = Deconv2::<f64>::zeros(1, 1);
        d.weight.iter_mut().enumerate().for_each(|(a, w)| *w = a as f64);
        let x = Tensor::from_vec(1, Dims::new(2, 1, 1).unwrap(), vec![1.0, 10.0]).unwrap();
        let y = d.forward(&x).unwrap();
        assert_eq!(y.dims, Dims::new(4, 2, 2).unwrap());
        // Output (3,1,1) comes from input x=1 with tap ax=1, ay=1, az=1 -> a=7.
        assert_eq!(y.data[y.dims.index(3, 1, 1)], 70.0);
        assert_eq!(y.data[y.dims.index(0, 0, 0)], 0.0);
    }

    #[test]
    fn deconv_gradients() {
        let mut rng = SplitMix64::new(4);
        for trial in 0..20 {
            let mut d = Deconv2::zeros(2, 3);
            d.weight.iter_mut().for_each(|w| *w = rng.gaussian());
            d.bias.iter_mut().for_each(|b| *b = rng.gaussian());
            let x = random_tensor(&mut rng, 2, Dims::new(1 + trial % 3, 2, 1 + trial % 2).unwrap());
            check_layer(
                &mut rng,
                &x,
                &d,
                |l, x| l.forward(x).unwrap(),
                |l, x, g| {
                    let mut grad = Deconv2::zeros(2, 3);
                    let dx = l.backward(x, g, &mut grad).unwrap();
                    (dx, vec![grad.weight, grad.bias])
                },
                |l| vec![&mut l.weight, &mut l.bias],
            );
        }
    }
}
