use crate::error::{Error, Result};
use crate::volume::Dims;

use super::{Real, Tensor};

/// Channel-wise softmax at every voxel.
pub fn softmax<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let k = logits.channels;
    let n = logits.voxels();
    let mut out = Tensor::zeros(k, logits.dims);
    for i in 0..n {
        let mut m = T::neg_infinity();
        for c in 0..k {
            m = m.max(logits.data[c * n + i]);
        }
        let mut z = T::zero();
        for c in 0..k {
            let e = (logits.data[c * n + i] - m).exp();
            out.data[c * n + i] = e;
            z += e;
        }
        for c in 0..k {
            out.data[c * n + i] = out.data[c * n + i] / z;
        }
    }
    out
}

/// Mean voxelwise cross-entropy `-log softmax(logits)[target]` and its
/// gradient with respect to the logits, both scaled by `weight`.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, target: &[u8], weight: T) -> Result<(T, Tensor<T>)> {
    let k = logits.channels;
    let n = logits.voxels();
    if target.len() != n {
        return Err(Error::Shape(format!("target has {} voxels, logits {n}", target.len())));
    }
    if let Some(&t) = target.iter().find(|&&t| t as usize >= k) {
        return Err(Error::InvalidArgument(format!("target class {t} out of range for {k} classes")));
    }
    let mut grad = softmax(logits);
    let inv_n = weight / T::from_usize(n).unwrap();
    let mut total = T::zero();
    for (i, &t) in target.iter().enumerate() {
        let p = grad.data[t as usize * n + i];
        let logit_t = logits.data[t as usize * n + i];
        // log-sum-exp form: CE = lse - logit_t, stable for large logits.
        let mut m = T::neg_infinity();
        for c in 0..k {
            m = m.max(logits.data[c * n + i]);
        }
        let mut z = T::zero();
        for c in 0..k {
            z += (logits.data[c * n + i] - m).exp();
        }
        total += m + z.ln() - logit_t;
        grad.data[t as usize * n + i] = p - T::one();
    }
    for g in &mut grad.data {
        *g *= inv_n;
    }
    Ok((total * inv_n, grad))
}

/// Nearest-neighbour label downsampling: output voxel `v` takes the label at
/// `factor * v`.
pub fn downsample_labels(labels: &[u8], dims: Dims, factor: usize) -> (Vec<u8>, Dims) {
    let od = Dims([dims.w() / factor, dims.h() / factor, dims.l() / factor]);
    let out = (0..od.len())
        .map(|o| {
            let [x, y, z] = od.coord(o);
            labels[dims.index(factor * x, factor * y, factor * z)]
        })
        .collect();
    (out, od)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_layer, random_tensor};
    use crate::rng::SplitMix64;

    #[test]
    fn uniform_logits_give_ln4() {
        let logits = Tensor::<f64>::zeros(4, Dims::cube(3).unwrap());
        let target: Vec<u8> = (0..27).map(|i| (i % 4) as u8).collect();
        let (l, _) = softmax_cross_entropy(&logits, &target, 1.0).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_voxel_oracle() {
        // Hand evaluation of -log(e^{l_t} / sum e^{l_c}) averaged over voxels.
        let l0 = [0.3, -1.2, 2.0, 0.5];
        let l1 = [-0.7, 0.1, 0.0, 1.5];
        let t = [2u8, 0u8];
        let ce = |l: &[f64; 4], t: usize| -(l[t].exp() / l.iter().map(|v| v.exp()).sum::<f64>()).ln();
        let oracle = (ce(&l0, 2) + ce(&l1, 0)) / 2.0;
        let data = (0..4).flat_map(|c| [l0[c], l1[c]]).collect();
        let logits = Tensor::from_vec(4, Dims::new(2, 1, 1).unwrap(), data).unwrap();
        let (l, _) = softmax_cross_entropy(&logits, &t, 1.0).unwrap();
        assert!((l - oracle).abs() < 1e-12);
    }

    #[test]
    fn large_target_logit_drives_loss_to_zero() {
        let mut logits = Tensor::<f64>::zeros(4, Dims::cube(1).unwrap());
        logits.data[1] = 800.0;
        let (l, _) = softmax_cross_entropy(&logits, &[1], 1.0).unwrap();
        assert!(l.abs() < 1e-12 && l.is_finite());
    }

    #[test]
    fn target_out_of_range() {
        let logits = Tensor::<f64>::zeros(4, Dims::cube(1).unwrap());
        assert!(softmax_cross_entropy(&logits, &[4], 1.0).is_err());
    }

    #[test]
    fn ce_gradients() {
        let mut rng = SplitMix64::new(6);
        for _ in 0..20 {
            let dims = Dims::new(3, 2, 2).unwrap();
            let x = random_tensor(&mut rng, 4, dims);
            let target: Vec<u8> = (0..dims.len()).map(|_| rng.below(4) as u8).collect();
            // Wrap the scalar loss as a 1-voxel tensor so the generic checker applies.
            check_layer(
                &mut rng,
                &x,
                &target,
                |t, x| {
                    let (l, _) = softmax_cross_entropy(x, t, 0.7).unwrap();
                    Tensor::from_vec(1, Dims::cube(1).unwrap(), vec![l]).unwrap()
                },
                |t, x, g| {
                    let (_, mut grad) = softmax_cross_entropy(x, t, 0.7).unwrap();
                    grad.data.iter_mut().for_each(|v| *v *= g.data[0]);
                    (grad, vec![])
                },
                |_| vec![],
            );
        }
    }

    #[test]
    fn nearest_downsampling() {
        let dims = Dims::cube(4).unwrap();
        let labels: Vec<u8> = (0..64).map(|i| (i % 4) as u8).collect();
        let (d, od) = downsample_labels(&labels, dims, 2);
        assert_eq!(od, Dims::cube(2).unwrap());
        assert_eq!(d[od.index(1, 0, 0)], labels[dims.index(2, 0, 0)]);
    }
}
