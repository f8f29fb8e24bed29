//! Central finite-difference checks for layer backward passes.
//!
//! The scalar objective is `sum(r * f(x))` for a fixed random `r`, so the
//! upstream gradient handed to `backward` is exactly `r`.

use crate::rng::SplitMix64;
use crate::volume::Dims;

use super::Tensor;

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;

/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

pub fn random_tensor(rng: &mut SplitMix64, channels: usize, dims: Dims) -> Tensor<f64> {
    let data = (0..channels * dims.len()).map(|_| rng.gaussian()).collect();
    Tensor::from_vec(channels, dims, data).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Largest relative error over input and parameter gradients of one layer.
pub fn layer_max_error<L: Clone>(
    rng: &mut SplitMix64,
    x: &Tensor<f64>,
    layer: &L,
    forward: impl Fn(&L, &Tensor<f64>) -> Tensor<f64>,
    backward: impl Fn(&L, &Tensor<f64>, &Tensor<f64>) -> (Tensor<f64>, Vec<Vec<f64>>),
    params: impl Fn(&mut L) -> Vec<&mut Vec<f64>>,
) -> f64 {
    let y = forward(layer, x);
    let r = random_tensor(rng, y.channels, y.dims);
    let objective = |l: &L, x: &Tensor<f64>| dot(&forward(l, x).data, &r.data);
    let (dx, dparams) = backward(layer, x, &r);

    let mut worst = 0.0f64;
    let mut xp = x.clone();
    for i in 0..x.data.len() {
        let orig = xp.data[i];
        xp.data[i] = orig + STEP;
        let up = objective(layer, &xp);
        xp.data[i] = orig - STEP;
        let down = objective(layer, &xp);
        xp.data[i] = orig;
        worst = worst.max(rel_error(dx.data[i], (up - down) / (2.0 * STEP)));
    }

    let mut l = layer.clone();
    let n_params = params(&mut l).len();
    for p in 0..n_params {
        let len = params(&mut l)[p].len();
        for i in 0..len {
            let orig = params(&mut l)[p][i];
            params(&mut l)[p][i] = orig + STEP;
            let up = objective(&l, x);
            params(&mut l)[p][i] = orig - STEP;
            let down = objective(&l, x);
            params(&mut l)[p][i] = orig;
            worst = worst.max(rel_error(dparams[p][i], (up - down) / (2.0 * STEP)));
        }
    }
    worst
}

/// Asserting wrapper around [`layer_max_error`].
pub fn check_layer<L: Clone>(
    rng: &mut SplitMix64,
    x: &Tensor<f64>,
    layer: &L,
    forward: impl Fn(&L, &Tensor<f64>) -> Tensor<f64>,
    backward: impl Fn(&L, &Tensor<f64>, &Tensor<f64>) -> (Tensor<f64>, Vec<Vec<f64>>),
    params: impl Fn(&mut L) -> Vec<&mut Vec<f64>>,
) {
    let err = layer_max_error(rng, x, layer, forward, backward, params);
    assert!(err < TOLERANCE, "gradient check failed: max relative error {err:e}");
}
