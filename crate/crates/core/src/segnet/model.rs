//! Encoder-decoder with sum-residual skips and two deep-supervision heads.
//!
//! ```text
//! x ─ conv1a ─ conv1b ─┬─ pool ─ conv2a ─ conv2b ─┬─ pool ─ conv3a ─ conv3b ─┬─ pool(Pool3) ─ conv4a ─ conv4b
//!                      │                          │                          │                         │
//!                      │                          │                          └──────── (+) ─ deconv3 ──┘
//!                      │                          │                                     conv5a ─ conv5b ─ aux1 (1/4)
//!                      │                          └──────── (+) ─ deconv2 ──────────────────────┘
//!                      │                                    conv6a ─ conv6b ─ aux2 (1/2)
//!                      └──────── (+) ─ deconv1 ─────────────────────┘
//!                                conv7a ─ conv7b ─ main (1/1)
//! ```
//! Widths are `C0, 2C0, 4C0, 8C0` down the encoder; every 3^3 convolution is
//! followed by ReLU.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    add_assign, downsample_labels, relu_backward, relu_inplace, softmax_cross_entropy, Conv1, Conv3, Deconv2,
    MaxPool2, PoolIndices, Real, Tensor,
};
use crate::rng::{derive_seed, SplitMix64};
use crate::volume::{Dims, NUM_CLASSES};

/// How clamped HU values become network input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// `(hu - center) / scale`, identical for every patch.
    #[default]
    Fixed,
    /// Zero mean, unit variance over each patch.
    PerPatch,
}

/// HU are clamped to `[lo, hi]`, then normalized according to `mode`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HuWindow {
    pub lo: f32,
    pub hi: f32,
    pub center: f32,
    pub scale: f32,
    pub mode: NormMode,
}

impl Default for HuWindow {
    fn default() -> Self {
        HuWindow {
            lo: -200.0,
            hi: 300.0,
            center: 50.0,
            scale: 100.0,
            mode: NormMode::Fixed,
        }
    }
}

impl HuWindow {
    #[inline]
    pub fn clamp(&self, hu: i16) -> f32 {
        (hu as f32).clamp(self.lo, self.hi)
    }

    /// Clamped HU used for voxels outside the volume.
    pub fn pad_hu(&self) -> f32 {
        self.lo
    }

    /// Turns a patch of clamped HU into network input in place.
    pub fn normalize(&self, patch: &mut [f32]) {
        match self.mode {
            NormMode::Fixed => {
                let inv = 1.0 / self.scale;
                patch.iter_mut().for_each(|v| *v = (*v - self.center) * inv);
            }
            NormMode::PerPatch => {
                let n = patch.len().max(1) as f64;
                let mean = patch.iter().map(|&v| v as f64).sum::<f64>() / n;
                let var = patch.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
                let inv = 1.0 / (var.sqrt() + 1e-6);
                patch.iter_mut().for_each(|v| *v = ((*v as f64 - mean) * inv) as f32);
            }
        }
    }
}

/// Everything needed to rebuild the layer shapes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub base_channels: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub window: HuWindow,
}

impl ArchConfig {
    pub fn new(base_channels: usize) -> Self {
        ArchConfig {
            base_channels,
            num_classes: NUM_CLASSES,
            window: HuWindow::default(),
        }
    }
}

/// Relative weights of the aux1 (1/4), aux2 (1/2) and main losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub aux1: f64,
    pub aux2: f64,
    pub main: f64,
}

impl Default for LossWeights {
    /// 1:2:5, normalized to sum to one.
    fn default() -> Self {
        LossWeights {
            aux1: 1.0 / 8.0,
            aux2: 2.0 / 8.0,
            main: 5.0 / 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegOutput<T> {
    /// Full resolution.
    pub main: Tensor<T>,
    /// Half resolution.
    pub aux2: Tensor<T>,
    /// Quarter resolution.
    pub aux1: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegModel<T> {
    pub arch: ArchConfig,
    pub conv1a: Conv3<T>,
    pub conv1b: Conv3<T>,
    pub conv2a: Conv3<T>,
    pub conv2b: Conv3<T>,
    pub conv3a: Conv3<T>,
    pub conv3b: Conv3<T>,
    pub conv4a: Conv3<T>,
    pub conv4b: Conv3<T>,
    pub deconv3: Deconv2<T>,
    pub conv5a: Conv3<T>,
    pub conv5b: Conv3<T>,
    pub deconv2: Deconv2<T>,
    pub conv6a: Conv3<T>,
    pub conv6b: Conv3<T>,
    pub deconv1: Deconv2<T>,
    pub conv7a: Conv3<T>,
    pub conv7b: Conv3<T>,
    pub head_aux1: Conv1<T>,
    pub head_aux2: Conv1<T>,
    pub head_main: Conv1<T>,
}

struct Cache<T> {
    x: Tensor<T>,
    a1: Tensor<T>,
    b1: Tensor<T>,
    i1: PoolIndices,
    p1: Tensor<T>,
    a2: Tensor<T>,
    b2: Tensor<T>,
    i2: PoolIndices,
    p2: Tensor<T>,
    a3: Tensor<T>,
    b3: Tensor<T>,
    i3: PoolIndices,
    p3: Tensor<T>,
    a4: Tensor<T>,
    b4: Tensor<T>,
    u3: Tensor<T>,
    a5: Tensor<T>,
    b5: Tensor<T>,
    u2: Tensor<T>,
    a6: Tensor<T>,
    b6: Tensor<T>,
    u1: Tensor<T>,
    a7: Tensor<T>,
    b7: Tensor<T>,
}

fn conv_relu<T: Real>(c: &Conv3<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut y = c.forward(x)?;
    relu_inplace(&mut y);
    Ok(y)
}

/// Backward through `relu(conv(input))` given the gradient at the ReLU output.
fn conv_relu_back<T: Real>(
    c: &Conv3<T>,
    input: &Tensor<T>,
    out: &Tensor<T>,
    mut g: Tensor<T>,
    grad: &mut Conv3<T>,
) -> Result<Tensor<T>> {
    relu_backward(out, &mut g);
    Ok(c.backward(input, &g, grad, true)?.expect("input gradient requested"))
}

impl<T: Real> SegModel<T> {
    pub fn zeros(arch: ArchConfig) -> Self {
        let c = arch.base_channels;
        let k = arch.num_classes;
        SegModel {
            arch,
            conv1a: Conv3::zeros(1, c),
            conv1b: Conv3::zeros(c, c),
            conv2a: Conv3::zeros(c, 2 * c),
            conv2b: Conv3::zeros(2 * c, 2 * c),
            conv3a: Conv3::zeros(2 * c, 4 * c),
            conv3b: Conv3::zeros(4 * c, 4 * c),
            conv4a: Conv3::zeros(4 * c, 8 * c),
            conv4b: Conv3::zeros(8 * c, 8 * c),
            deconv3: Deconv2::zeros(8 * c, 4 * c),
            conv5a: Conv3::zeros(4 * c, 4 * c),
            conv5b: Conv3::zeros(4 * c, 4 * c),
            deconv2: Deconv2::zeros(4 * c, 2 * c),
            conv6a: Conv3::zeros(2 * c, 2 * c),
            conv6b: Conv3::zeros(2 * c, 2 * c),
            deconv1: Deconv2::zeros(2 * c, c),
            conv7a: Conv3::zeros(c, c),
            conv7b: Conv3::zeros(c, c),
            head_aux1: Conv1::zeros(4 * c, k),
            head_aux2: Conv1::zeros(2 * c, k),
            head_main: Conv1::zeros(c, k),
        }
    }

    /// He-normal weights (fan-in), zero biases. Heads use `1/fan_in`.
    pub fn init(arch: ArchConfig, seed: u64) -> Self {
        let mut m = Self::zeros(arch);
        let fans = m.fan_ins();
        for (layer, (weight, _bias)) in m.layers_mut().into_iter().enumerate() {
            let (fan, gain) = fans[layer];
            let std = (gain / fan as f64).sqrt();
            let mut rng = SplitMix64::new(derive_seed(seed, &[layer as u64]));
            for w in weight.iter_mut() {
                *w = T::lit(std * rng.gaussian());
            }
        }
        m
    }

    fn fan_ins(&self) -> Vec<(usize, f64)> {
        let c3 = |c: &Conv3<T>| (c.fan_in(), 2.0);
        let d2 = |d: &Deconv2<T>| (d.cin, 2.0);
        let c1 = |c: &Conv1<T>| (c.cin, 1.0);
        vec![
            c3(&self.conv1a), c3(&self.conv1b), c3(&self.conv2a), c3(&self.conv2b),
            c3(&self.conv3a), c3(&self.conv3b), c3(&self.conv4a), c3(&self.conv4b),
            d2(&self.deconv3), c3(&self.conv5a), c3(&self.conv5b),
            d2(&self.deconv2), c3(&self.conv6a), c3(&self.conv6b),
            d2(&self.deconv1), c3(&self.conv7a), c3(&self.conv7b),
            c1(&self.head_aux1), c1(&self.head_aux2), c1(&self.head_main),
        ]
    }

    /// `(weight, bias)` of every layer in declaration order.
    pub fn layers_mut(&mut self) -> Vec<(&mut Vec<T>, &mut Vec<T>)> {
        macro_rules! wb {
            ($($l:ident),*) => { vec![$((&mut self.$l.weight, &mut self.$l.bias)),*] };
        }
        wb!(conv1a, conv1b, conv2a, conv2b, conv3a, conv3b, conv4a, conv4b, deconv3, conv5a, conv5b,
            deconv2, conv6a, conv6b, deconv1, conv7a, conv7b, head_aux1, head_aux2, head_main)
    }

    pub fn layers(&self) -> Vec<(&Vec<T>, &Vec<T>)> {
        macro_rules! wb {
            ($($l:ident),*) => { vec![$((&self.$l.weight, &self.$l.bias)),*] };
        }
        wb!(conv1a, conv1b, conv2a, conv2b, conv3a, conv3b, conv4a, conv4b, deconv3, conv5a, conv5b,
            deconv2, conv6a, conv6b, deconv1, conv7a, conv7b, head_aux1, head_aux2, head_main)
    }

    pub const LAYER_NAMES: [&'static str; 20] = [
        "conv1a", "conv1b", "conv2a", "conv2b", "conv3a", "conv3b", "conv4a", "conv4b", "deconv3", "conv5a",
        "conv5b", "deconv2", "conv6a", "conv6b", "deconv1", "conv7a", "conv7b", "head_aux1", "head_aux2",
        "head_main",
    ];

    /// Flat parameter tensors (weight, bias, weight, bias, ...).
    pub fn params(&self) -> Vec<&Vec<T>> {
        self.layers().into_iter().flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<T>> {
        self.layers_mut().into_iter().flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> SegModel<U> {
        let mut out = SegModel::<U>::zeros(self.arch);
        for (dst, src) in out.params_mut().into_iter().zip(self.params()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = U::from_f64(s.to_f64().unwrap()).unwrap();
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.channels != 1 {
            return Err(Error::Shape(format!("network input must have 1 channel, got {}", x.channels)));
        }
        if x.dims.0.iter().any(|d| d % 8 != 0) {
            return Err(Error::Shape(format!("input dims {} must be divisible by 8", x.dims)));
        }
        Ok(())
    }

    /// Encoder up to and including the third pooling stage.
    pub fn encode(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let b1 = conv_relu(&self.conv1b, &conv_relu(&self.conv1a, x)?)?;
        let (p1, _) = MaxPool2.forward(&b1)?;
        let b2 = conv_relu(&self.conv2b, &conv_relu(&self.conv2a, &p1)?)?;
        let (p2, _) = MaxPool2.forward(&b2)?;
        let b3 = conv_relu(&self.conv3b, &conv_relu(&self.conv3a, &p2)?)?;
        Ok(MaxPool2.forward(&b3)?.0)
    }

    fn forward_cached(&self, x: &Tensor<T>) -> Result<(SegOutput<T>, Cache<T>)> {
        self.check_input(x)?;
        let a1 = conv_relu(&self.conv1a, x)?;
        let b1 = conv_relu(&self.conv1b, &a1)?;
        let (p1, i1) = MaxPool2.forward(&b1)?;
        let a2 = conv_relu(&self.conv2a, &p1)?;
        let b2 = conv_relu(&self.conv2b, &a2)?;
        let (p2, i2) = MaxPool2.forward(&b2)?;
        let a3 = conv_relu(&self.conv3a, &p2)?;
        let b3 = conv_relu(&self.conv3b, &a3)?;
        let (p3, i3) = MaxPool2.forward(&b3)?;
        let a4 = conv_relu(&self.conv4a, &p3)?;
        let b4 = conv_relu(&self.conv4b, &a4)?;

        let mut u3 = self.deconv3.forward(&b4)?;
        add_assign(&mut u3, &b3)?;
        let a5 = conv_relu(&self.conv5a, &u3)?;
        let b5 = conv_relu(&self.conv5b, &a5)?;
        let aux1 = self.head_aux1.forward(&b5)?;

        let mut u2 = self.deconv2.forward(&b5)?;
        add_assign(&mut u2, &b2)?;
        let a6 = conv_relu(&self.conv6a, &u2)?;
        let b6 = conv_relu(&self.conv6b, &a6)?;
        let aux2 = self.head_aux2.forward(&b6)?;

        let mut u1 = self.deconv1.forward(&b6)?;
        add_assign(&mut u1, &b1)?;
        let a7 = conv_relu(&self.conv7a, &u1)?;
        let b7 = conv_relu(&self.conv7b, &a7)?;
        let main = self.head_main.forward(&b7)?;

        let cache = Cache {
            x: x.clone(),
            a1, b1, i1, p1, a2, b2, i2, p2, a3, b3, i3, p3, a4, b4, u3, a5, b5, u2, a6, b6, u1, a7, b7,
        };
        Ok((SegOutput { main, aux2, aux1 }, cache))
    }

    /// ReLU on/off flags and pooling argmax taps; the loss is smooth in the
    /// parameters wherever this pattern is constant.
    #[cfg(test)]
    pub(super) fn kink_pattern(&self, x: &Tensor<T>) -> Vec<u8> {
        let (_, c) = self.forward_cached(x).unwrap();
        let mut out = Vec::new();
        for t in [&c.a1, &c.b1, &c.a2, &c.b2, &c.a3, &c.b3, &c.a4, &c.b4, &c.a5, &c.b5, &c.a6, &c.b6, &c.a7, &c.b7] {
            out.extend(t.data.iter().map(|&v| (v > T::zero()) as u8));
        }
        for i in [&c.i1, &c.i2, &c.i3] {
            out.extend_from_slice(&i.taps);
        }
        out
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<SegOutput<T>> {
        Ok(self.forward_cached(x)?.0)
    }

    fn backward(&self, c: &Cache<T>, g: &SegOutput<T>) -> Result<SegModel<T>> {
        let mut gr = SegModel::zeros(self.arch);

        let g_b7 = self.head_main.backward(&c.b7, &g.main, &mut gr.head_main)?;
        let g_a7 = conv_relu_back(&self.conv7b, &c.a7, &c.b7, g_b7, &mut gr.conv7b)?;
        let g_u1 = conv_relu_back(&self.conv7a, &c.u1, &c.a7, g_a7, &mut gr.conv7a)?;
        let mut g_b6 = self.deconv1.backward(&c.b6, &g_u1, &mut gr.deconv1)?;
        add_assign(&mut g_b6, &self.head_aux2.backward(&c.b6, &g.aux2, &mut gr.head_aux2)?)?;

        let g_a6 = conv_relu_back(&self.conv6b, &c.a6, &c.b6, g_b6, &mut gr.conv6b)?;
        let g_u2 = conv_relu_back(&self.conv6a, &c.u2, &c.a6, g_a6, &mut gr.conv6a)?;
        let mut g_b5 = self.deconv2.backward(&c.b5, &g_u2, &mut gr.deconv2)?;
        add_assign(&mut g_b5, &self.head_aux1.backward(&c.b5, &g.aux1, &mut gr.head_aux1)?)?;

        let g_a5 = conv_relu_back(&self.conv5b, &c.a5, &c.b5, g_b5, &mut gr.conv5b)?;
        let g_u3 = conv_relu_back(&self.conv5a, &c.u3, &c.a5, g_a5, &mut gr.conv5a)?;
        let g_b4 = self.deconv3.backward(&c.b4, &g_u3, &mut gr.deconv3)?;

        let g_a4 = conv_relu_back(&self.conv4b, &c.a4, &c.b4, g_b4, &mut gr.conv4b)?;
        let g_p3 = conv_relu_back(&self.conv4a, &c.p3, &c.a4, g_a4, &mut gr.conv4a)?;
        let mut g_b3 = MaxPool2.backward(&c.i3, &g_p3);
        add_assign(&mut g_b3, &g_u3)?;

        let g_a3 = conv_relu_back(&self.conv3b, &c.a3, &c.b3, g_b3, &mut gr.conv3b)?;
        let g_p2 = conv_relu_back(&self.conv3a, &c.p2, &c.a3, g_a3, &mut gr.conv3a)?;
        let mut g_b2 = MaxPool2.backward(&c.i2, &g_p2);
        add_assign(&mut g_b2, &g_u2)?;

        let g_a2 = conv_relu_back(&self.conv2b, &c.a2, &c.b2, g_b2, &mut gr.conv2b)?;
        let g_p1 = conv_relu_back(&self.conv2a, &c.p1, &c.a2, g_a2, &mut gr.conv2a)?;
        let mut g_b1 = MaxPool2.backward(&c.i1, &g_p1);
        add_assign(&mut g_b1, &g_u1)?;

        let g_a1 = conv_relu_back(&self.conv1b, &c.a1, &c.b1, g_b1, &mut gr.conv1b)?;
        let mut g_a1 = g_a1;
        relu_backward(&c.a1, &mut g_a1);
        self.conv1a.backward(&c.x, &g_a1, &mut gr.conv1a, false)?;
        Ok(gr)
    }

    /// Weighted deep-supervision loss and its parameter gradients for one
    /// patch. `target` has the input's dims.
    pub fn loss_and_grad(&self, x: &Tensor<T>, target: &[u8], weights: LossWeights) -> Result<(T, SegModel<T>)> {
        let (out, cache) = self.forward_cached(x)?;
        let (loss, g) = seg_loss(&out, target, x.dims, weights)?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss {loss:?}")));
        }
        let grads = self.backward(&cache, &g)?;
        Ok((loss, grads))
    }
}

/// `w_aux1 * CE(aux1, down4(t)) + w_aux2 * CE(aux2, down2(t)) + w_main * CE(main, t)`
/// and the gradients with respect to each head's logits.
pub fn seg_loss<T: Real>(
    out: &SegOutput<T>,
    target: &[u8],
    dims: Dims,
    w: LossWeights,
) -> Result<(T, SegOutput<T>)> {
    if out.main.dims != dims {
        return Err(Error::Shape(format!("target dims {dims} != logits dims {}", out.main.dims)));
    }
    let (t2, _) = downsample_labels(target, dims, 2);
    let (t4, _) = downsample_labels(target, dims, 4);
    let (l_main, g_main) = softmax_cross_entropy(&out.main, target, T::lit(w.main))?;
    let (l_aux2, g_aux2) = softmax_cross_entropy(&out.aux2, &t2, T::lit(w.aux2))?;
    let (l_aux1, g_aux1) = softmax_cross_entropy(&out.aux1, &t4, T::lit(w.aux1))?;
    Ok((
        l_main + l_aux2 + l_aux1,
        SegOutput {
            main: g_main,
            aux2: g_aux2,
            aux1: g_aux1,
        },
    ))
}

/// Sums `src` into `dst` parameter-wise.
pub fn accumulate<T: Real>(dst: &mut SegModel<T>, src: &SegModel<T>) {
    for (d, s) in dst.params_mut().into_iter().zip(src.params()) {
        for (a, &b) in d.iter_mut().zip(s) {
            *a += b;
        }
    }
}
