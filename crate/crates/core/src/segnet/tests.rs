use super::*;
use crate::nn::gradcheck::rel_error;
use crate::nn::{softmax_cross_entropy, Tensor};
use crate::rng::SplitMix64;
use crate::volume::Dims;

fn random_input(seed: u64, edge: usize) -> (Tensor<f64>, Vec<u8>) {
    let mut rng = SplitMix64::new(seed);
    let dims = Dims::cube(edge).unwrap();
    let x = (0..dims.len()).map(|_| rng.gaussian()).collect();
    let t = (0..dims.len()).map(|_| rng.below(4) as u8).collect();
    (Tensor::from_vec(1, dims, x).unwrap(), t)
}

fn loss_of(m: &SegModel<f64>, x: &Tensor<f64>, t: &[u8]) -> f64 {
    let out = m.forward(x).unwrap();
    seg_loss(&out, t, x.dims, LossWeights::default()).unwrap().0
}

#[test]
fn output_shapes_and_finiteness() {
    for edge in [8, 16] {
        let m = SegModel::<f32>::init(ArchConfig::new(2), 1);
        let x = Tensor::zeros(1, Dims::cube(edge).unwrap());
        let out = m.forward(&x).unwrap();
        assert_eq!((out.main.channels, out.main.dims), (4, Dims::cube(edge).unwrap()));
        assert_eq!(out.aux2.dims, Dims::cube(edge / 2).unwrap());
        assert_eq!(out.aux1.dims, Dims::cube(edge / 4).unwrap());
        assert!(out.main.all_finite() && out.aux2.all_finite() && out.aux1.all_finite());
    }
    let m = SegModel::<f32>::init(ArchConfig::new(2), 1);
    let bad = Tensor::zeros(1, Dims::new(8, 8, 12).unwrap());
    assert!(m.forward(&bad).is_err());
    assert_eq!(m.encode(&Tensor::zeros(1, Dims::cube(16).unwrap())).unwrap().channels, 8);
}

#[test]
fn wider_model_has_more_parameters() {
    let a = SegModel::<f32>::zeros(ArchConfig::new(4)).num_params();
    let b = SegModel::<f32>::zeros(ArchConfig::new(8)).num_params();
    assert!(b > a);
}

#[test]
fn pointwise_kernels_commute_with_flip() {
    let mut m = SegModel::<f64>::init(ArchConfig::new(2), 4);
    let mut rng = SplitMix64::new(9);
    // Keep only the center tap of every 3^3 kernel and make each deconv
    // tap-independent, so each layer is equivariant under axis-0 flips.
    for (w, b) in m.layers_mut() {
        b.iter_mut().for_each(|v| *v = 0.1 * rng.gaussian());
        let _ = w;
    }
    for c in [
        &mut m.conv1a, &mut m.conv1b, &mut m.conv2a, &mut m.conv2b, &mut m.conv3a, &mut m.conv3b, &mut m.conv4a,
        &mut m.conv4b, &mut m.conv5a, &mut m.conv5b, &mut m.conv6a, &mut m.conv6b, &mut m.conv7a, &mut m.conv7b,
    ] {
        for (i, v) in c.weight.iter_mut().enumerate() {
            if i % 27 != 13 {
                *v = 0.0;
            }
        }
    }
    for d in [&mut m.deconv3, &mut m.deconv2, &mut m.deconv1] {
        let (cin, cout) = (d.cin, d.cout);
        for co in 0..cout {
            for ci in 0..cin {
                let v = d.weight[(co * 8) * cin + ci];
                for a in 0..8 {
                    d.weight[(co * 8 + a) * cin + ci] = v;
                }
            }
        }
    }
    let (x, _) = random_input(2, 16);
    let flip = Augment::Flip { axis: 0 };
    let xf = Tensor::from_vec(1, x.dims, flip.apply(&x.data, 16)).unwrap();
    let a = m.forward(&x).unwrap().main;
    let b = m.forward(&xf).unwrap().main;
    for c in 0..4 {
        let af = flip.apply(a.channel(c), 16);
        for (p, q) in af.iter().zip(b.channel(c)) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_logits_give_ln4() {
    let m = SegModel::<f64>::zeros(ArchConfig::new(2));
    let (x, t) = random_input(3, 16);
    assert!((loss_of(&m, &x, &t) - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn main_only_weights_reduce_to_plain_ce() {
    let m = SegModel::<f64>::init(ArchConfig::new(2), 5);
    let (x, t) = random_input(6, 16);
    let out = m.forward(&x).unwrap();
    let w = LossWeights { aux1: 0.0, aux2: 0.0, main: 1.0 };
    let (l, _) = seg_loss(&out, &t, x.dims, w).unwrap();
    let (ce, _) = softmax_cross_entropy(&out.main, &t, 1.0).unwrap();
    assert_eq!(l, ce);
}

/// Central differences are only meaningful where no ReLU or pooling switch
/// lies inside `[theta - h, theta + h]`; the step shrinks until that holds.
#[test]
fn whole_network_gradient_matches_finite_differences() {
    let m = SegModel::<f64>::init(ArchConfig::new(2), 11);
    let (x, t) = random_input(12, 16);
    let (_, grad) = m.loss_and_grad(&x, &t, LossWeights::default()).unwrap();
    let base = m.kink_pattern(&x);
    let mut rng = SplitMix64::new(13);
    let n_tensors = m.params().len();
    let mut full_step = 0;
    for k in 0..n_tensors {
        let len = m.params()[k].len();
        for _ in 0..2 {
            let i = rng.below(len);
            let mut h = 1e-3;
            let (mp, mm) = loop {
                let mut mp = m.clone();
                mp.params_mut()[k][i] += h;
                let mut mm = m.clone();
                mm.params_mut()[k][i] -= h;
                if h < 1e-7 || (mp.kink_pattern(&x) == base && mm.kink_pattern(&x) == base) {
                    break (mp, mm);
                }
                h /= 10.0;
            };
            full_step += (h == 1e-3) as usize;
            let numeric = (loss_of(&mp, &x, &t) - loss_of(&mm, &x, &t)) / (2.0 * h);
            let analytic = grad.params()[k][i];
            let e = rel_error(analytic, numeric);
            assert!(e < 1e-4, "tensor {k} index {i} h {h}: analytic {analytic} numeric {numeric}");
        }
    }
    assert!(full_step > 0);
}

#[test]
fn head_bias_gradient_closed_form() {
    let m = SegModel::<f64>::zeros(ArchConfig::new(2));
    let (_, t) = random_input(14, 16);
    let x = Tensor::zeros(1, Dims::cube(16).unwrap());
    let w = LossWeights::default();
    let (_, g) = m.loss_and_grad(&x, &t, w).unwrap();
    let check = |labels: &[u8], bias_grad: &[f64], weight: f64| {
        for k in 0..4 {
            let freq = labels.iter().filter(|&&l| l as usize == k).count() as f64 / labels.len() as f64;
            assert!((bias_grad[k] - weight * (0.25 - freq)).abs() < 1e-12);
        }
    };
    let dims = Dims::cube(16).unwrap();
    check(&t, &g.head_main.bias, w.main);
    check(&crate::nn::downsample_labels(&t, dims, 2).0, &g.head_aux2.bias, w.aux2);
    check(&crate::nn::downsample_labels(&t, dims, 4).0, &g.head_aux1.bias, w.aux1);
}

#[test]
fn duplicated_sample_matches_single() {
    let m = SegModel::<f64>::init(ArchConfig::new(2), 15);
    let (x, t) = random_input(16, 16);
    let (l1, g1) = batch_step(&m, &[(x.clone(), t.clone())], LossWeights::default()).unwrap();
    let (l2, g2) = batch_step(&m, &[(x.clone(), t.clone()), (x, t)], LossWeights::default()).unwrap();
    assert_eq!(l1, l2);
    assert_eq!(g1, g2);
}

#[test]
fn schedule_endpoints() {
    assert_eq!(lr_at(0.01, 0, 2000, 0.9), 0.01);
    assert_eq!(lr_at(0.01, 2000, 2000, 0.9), 0.0);
    assert!((lr_at(0.01, 1000, 2000, 0.9) - 0.01 * 0.5f64.powf(0.9)).abs() < 1e-12);
    assert!((lr_at(0.01, 1000, 2000, 0.9) - 0.005359).abs() < 1e-6);
}

#[test]
fn sgd_matches_hand_update() {
    let mut p = vec![1.0f64];
    let g = vec![0.5f64];
    let mut opt = Sgd::new(0.9, 0.1);
    opt.step(vec![&mut p], vec![&g], 0.1);
    // v = 0.5 + 0.1 = 0.6, p = 1 - 0.06
    assert!((p[0] - 0.94).abs() < 1e-15);
    opt.step(vec![&mut p], vec![&g], 0.1);
    // v = 0.54 + 0.5 + 0.094 = 1.134
    assert!((p[0] - (0.94 - 0.1134)).abs() < 1e-15);
}

fn toy_volumes() -> Vec<TrainingVolume> {
    use crate::phantom::{generate_case, PhantomSpec};
    use crate::volume::Phase;
    let mut spec = PhantomSpec::default();
    spec.dims = [24, 24, 24];
    spec.pancreas.center = [12.0, 12.0, 12.0];
    spec.pancreas.semi_axes = [7.0, 5.0, 4.0];
    spec.tumor = None;
    spec.duct = None;
    let case = generate_case("toy", &spec).unwrap();
    training_volumes(&[case], Phase::Arterial, &HuWindow::default()).unwrap()
}

#[test]
fn training_is_deterministic_and_learns() {
    let vols = toy_volumes();
    let cfg = SegNetConfig {
        base_channels: 2,
        patch_size: 16,
        batch_size: 2,
        max_iters: 40,
        lr: 0.05,
        seed: 21,
        ..SegNetConfig::default()
    };
    let (a, log_a) = train(&vols, &cfg).unwrap();
    let (b, log_b) = train(&vols, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(log_a.losses, log_b.losses);
    let first: f64 = log_a.losses[..10].iter().sum();
    let last: f64 = log_a.losses[30..].iter().sum();
    assert!(last < first, "first {first} last {last}");
}

#[test]
fn zero_iterations_returns_initial_model() {
    let vols = toy_volumes();
    let cfg = SegNetConfig {
        base_channels: 2,
        patch_size: 16,
        max_iters: 0,
        ..SegNetConfig::default()
    };
    assert!(cfg.validate().is_err());
    let (m, log) = train_with_progress(&vols, &SegNetConfig { max_iters: 1, ..cfg.clone() }, |_, _| {}).unwrap();
    assert_eq!(log.losses.len(), 1);
    assert!(m.all_finite());
}

#[test]
fn config_validation() {
    assert!(SegNetConfig::default().validate().is_ok());
    assert!(SegNetConfig { patch_size: 60, ..Default::default() }.validate().is_err());
    let w = LossWeights { aux1: 0.2, aux2: 0.2, main: 0.2 };
    assert!(SegNetConfig { loss_weights: w, ..Default::default() }.validate().is_err());
    let json = r#"{"base_channels": 4, "bogus": 1}"#;
    assert!(serde_json::from_str::<SegNetConfig>(json).is_err());
    let c: SegNetConfig = serde_json::from_str(r#"{"base_channels": 4}"#).unwrap();
    assert_eq!(c.max_iters, 2000);
}

#[test]
fn model_file_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.bin");
    let m = SegModel::<f32>::init(ArchConfig::new(2), 3);
    save_model(&m, &p).unwrap();
    assert_eq!(load_model(&p).unwrap(), m);
    std::fs::write(&p, b"S4CMxx").unwrap();
    assert!(load_model(&p).is_err());
}
