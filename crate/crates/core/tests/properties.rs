//! Invariants checked over random inputs through the public API.

use std::collections::BTreeMap;

use proptest::prelude::*;

use s4c_core::clsnet::{ClsArch, ClsHead};
use s4c_core::evaluation::{s4c_reports, CaseOutcome, PhaseOutcome};
use s4c_core::inference::{predict_volume, predict_volume_ordered, window_input, window_origins, InferenceOptions};
use s4c_core::nn::{softmax, softmax_cross_entropy, GroupNorm, Tensor};
use s4c_core::phantom::{generate_case, random_spec, voxel_class, Difficulty};
use s4c_core::postclassify::{classify_phase, retained_mask, PhaseDecision};
use s4c_core::rng::SplitMix64;
use s4c_core::segnet::{seg_loss, ArchConfig, LossWeights, SegModel, SegOutput, AUGMENTATIONS};
use s4c_core::volume::{DUCT, PANCREAS, TUMOR};
use s4c_core::{Dims, LabelMask, Phase, PostOptions, Verdict, Volume3D};

fn random_logits(rng: &mut SplitMix64, dims: Dims) -> Tensor<f64> {
    let data = (0..4 * dims.len()).map(|_| 3.0 * rng.gaussian()).collect();
    Tensor::from_vec(4, dims, data).unwrap()
}

fn random_labels(rng: &mut SplitMix64, n: usize) -> Vec<u8> {
    (0..n).map(|_| rng.below(4) as u8).collect()
}

/// Random boxes of foreground with mixed classes.
fn blob_mask(rng: &mut SplitMix64, dims: Dims, boxes: usize) -> LabelMask {
    let mut m = LabelMask::background(dims);
    for _ in 0..boxes {
        let lo: [usize; 3] = [0, 1, 2].map(|a| rng.below(dims.0[a]));
        let ext: [usize; 3] = [0, 1, 2].map(|_| 1 + rng.below(6));
        let class = 1 + rng.below(3) as u8;
        for z in lo[2]..(lo[2] + ext[2]).min(dims.l()) {
            for y in lo[1]..(lo[1] + ext[1]).min(dims.h()) {
                for x in lo[0]..(lo[0] + ext[0]).min(dims.w()) {
                    m.set(x, y, z, class);
                }
            }
        }
    }
    m
}

fn random_volume(rng: &mut SplitMix64, dims: Dims) -> Volume3D {
    let data = (0..dims.len()).map(|_| (rng.below(500) as i16) - 200).collect();
    Volume3D::new(dims, [1.0; 3], data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn phantom_mask_follows_geometry(seed in any::<u64>(), hard in any::<bool>(), abnormal in any::<bool>(), idx in 0usize..12) {
        let difficulty = if hard { Difficulty::Hard } else { Difficulty::Easy };
        let dims = Dims::cube(32).unwrap();
        let spec = random_spec(dims, seed, difficulty, abnormal, idx);
        let case = generate_case("p", &spec).unwrap();
        let mask = case.phase(Phase::Arterial).unwrap().mask.clone().unwrap();
        for (i, &l) in mask.labels().iter().enumerate() {
            let [x, y, z] = dims.coord(i);
            let p = [x as f64, y as f64, z as f64];
            prop_assert_eq!(l, voxel_class(&spec, p));
            if l == TUMOR {
                prop_assert!(spec.tumor.as_ref().unwrap().contains(p));
            }
            if l != 0 {
                let inside = spec.pancreas.contains(p)
                    || spec.tumor.as_ref().is_some_and(|t| t.contains(p))
                    || spec.duct.as_ref().is_some_and(|d| d.contains(p));
                prop_assert!(inside);
            }
        }
        prop_assert_eq!(case.abnormal, mask.count(TUMOR) > 0);
        prop_assert_eq!(generate_case("p", &spec).unwrap(), case);
    }

    #[test]
    fn head_shapes_follow_input(w in 1usize..3, h in 1usize..3, l in 1usize..3, c0 in 1usize..3, seed in any::<u64>()) {
        let dims = Dims::new(8 * w, 8 * h, 8 * l).unwrap();
        let model = SegModel::<f32>::init(ArchConfig::new(c0), seed);
        let x = Tensor::from_vec(1, dims, vec![0.1f32; dims.len()]).unwrap();
        let out = model.forward(&x).unwrap();
        prop_assert_eq!(out.main.dims, dims);
        prop_assert_eq!(out.aux2.dims, Dims::new(4 * w, 4 * h, 4 * l).unwrap());
        prop_assert_eq!(out.aux1.dims, Dims::new(2 * w, 2 * h, 2 * l).unwrap());
        prop_assert!([&out.main, &out.aux2, &out.aux1].iter().all(|t| t.channels == 4));
    }

    #[test]
    fn main_only_weights_give_plain_ce(seed in any::<u64>()) {
        let mut rng = SplitMix64::new(seed);
        let dims = Dims::cube(8).unwrap();
        let target = random_labels(&mut rng, dims.len());
        let out = SegOutput {
            main: random_logits(&mut rng, dims),
            aux2: random_logits(&mut rng, Dims::cube(4).unwrap()),
            aux1: random_logits(&mut rng, Dims::cube(2).unwrap()),
        };
        let w = LossWeights { aux1: 0.0, aux2: 0.0, main: 1.0 };
        let (total, _) = seg_loss(&out, &target, dims, w).unwrap();
        let (plain, _) = softmax_cross_entropy(&out.main, &target, 1.0).unwrap();
        prop_assert!((total - plain).abs() <= 1e-12 * plain.abs().max(1.0));
    }

    #[test]
    fn augmentations_permute_voxels(n in 1usize..9, seed in any::<u64>()) {
        let mut rng = SplitMix64::new(seed);
        let labels = random_labels(&mut rng, n * n * n);
        let mut sorted = labels.clone();
        sorted.sort_unstable();
        let ids: Vec<u32> = (0..(n * n * n) as u32).collect();
        for a in AUGMENTATIONS {
            let mut out = a.apply(&labels, n);
            out.sort_unstable();
            prop_assert_eq!(&out, &sorted);
            let mut moved = a.apply(&ids, n);
            moved.sort_unstable();
            prop_assert_eq!(&moved, &ids);
        }
    }

    #[test]
    fn windows_cover_every_voxel(w in 1usize..50, h in 1usize..50, l in 1usize..50, p in 1usize..4, s in 1usize..33) {
        let s = s.min(8 * p);
        let dims = Dims::new(w, h, l).unwrap();
        let opts = InferenceOptions { patch: 8 * p, stride: s };
        let mut hit = vec![false; dims.len()];
        for o in window_origins(dims, &opts) {
            for z in o[2]..(o[2] + opts.patch).min(l) {
                for y in o[1]..(o[1] + opts.patch).min(h) {
                    for x in o[0]..(o[0] + opts.patch).min(w) {
                        hit[dims.index(x, y, z)] = true;
                    }
                }
            }
        }
        prop_assert!(hit.iter().all(|&v| v));
    }

    #[test]
    fn window_order_does_not_change_mask(seed in any::<u64>(), stride in 1usize..9) {
        let mut rng = SplitMix64::new(seed);
        let dims = Dims::new(8 + rng.below(10), 8 + rng.below(6), 8 + rng.below(4)).unwrap();
        let volume = random_volume(&mut rng, dims);
        let model = SegModel::<f32>::init(ArchConfig::new(1), seed);
        let opts = InferenceOptions { patch: 8, stride };
        let reference = predict_volume(&model, &volume, &opts).unwrap();
        let mut order: Vec<usize> = (0..window_origins(dims, &opts).len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.below(i + 1));
        }
        prop_assert_eq!(predict_volume_ordered(&model, &volume, &opts, &order).unwrap(), reference);
    }

    #[test]
    fn single_window_is_plain_argmax(seed in any::<u64>(), w in 1usize..17, h in 1usize..17, l in 1usize..17) {
        let mut rng = SplitMix64::new(seed);
        let dims = Dims::new(w, h, l).unwrap();
        let volume = random_volume(&mut rng, dims);
        let model = SegModel::<f32>::init(ArchConfig::new(1), seed);
        let opts = InferenceOptions { patch: 16, stride: 16 };
        prop_assert_eq!(window_origins(dims, &opts).len(), 1);
        let mask = predict_volume(&model, &volume, &opts).unwrap();
        let probs = softmax(&model.forward(&window_input(&model, &volume, [0; 3], 16)).unwrap().main);
        let pd = Dims::cube(16).unwrap();
        for i in 0..dims.len() {
            let [x, y, z] = dims.coord(i);
            let j = pd.index(x, y, z);
            let mut best = 0;
            for c in 1..4 {
                if probs.channel(c)[j] > probs.channel(best)[j] {
                    best = c;
                }
            }
            prop_assert_eq!(mask.labels()[i] as usize, best);
        }
    }

    #[test]
    fn retention_is_idempotent(seed in any::<u64>(), boxes in 1usize..12, six in any::<bool>()) {
        let mut rng = SplitMix64::new(seed);
        let mask = blob_mask(&mut rng, Dims::new(40, 24, 20).unwrap(), boxes);
        let mut opts = PostOptions::default();
        if six {
            opts.connectivity = s4c_core::Connectivity::Six;
        }
        let (once, _, _) = retained_mask(&mask, &opts);
        let (twice, comps, kept) = retained_mask(&once, &opts);
        prop_assert_eq!(&twice, &once);
        prop_assert_eq!(comps, kept);
    }

    #[test]
    fn more_tumor_never_clears_a_verdict(seed in any::<u64>(), boxes in 1usize..10, thresh in 1usize..60) {
        let mut rng = SplitMix64::new(seed);
        let mask = blob_mask(&mut rng, Dims::cube(24).unwrap(), boxes);
        let opts = PostOptions { tumor_thresh: thresh, duct_thresh: 2 * thresh, ..PostOptions::default() };
        let before = classify_phase(&mask, &opts);
        // Relabel retained pancreas or duct voxels as tumor; components are unchanged.
        let (kept, _, _) = retained_mask(&mask, &opts);
        let mut grown = mask.clone();
        for (i, &l) in kept.labels().iter().enumerate() {
            if (l == PANCREAS || l == DUCT) && rng.below(3) == 0 {
                let [x, y, z] = mask.dims().coord(i);
                grown.set(x, y, z, TUMOR);
            }
        }
        let after = classify_phase(&grown, &opts);
        prop_assert!(after.tumor_voxels >= before.tumor_voxels);
        if before.tumor_voxels >= thresh {
            prop_assert_eq!(after.verdict, Verdict::Abnormal);
        }
    }

    #[test]
    fn fusion_is_monotone_over_a_dataset(verdicts in proptest::collection::vec((any::<bool>(), any::<bool>(), any::<bool>()), 1..60)) {
        let decision = |abn: bool| PhaseDecision {
            tumor_voxels: 0,
            duct_voxels: 0,
            components: 0,
            retained_components: 0,
            verdict: Verdict::from_bool(abn),
        };
        let cases: Vec<CaseOutcome> = verdicts
            .iter()
            .enumerate()
            .map(|(i, &(label, a, v))| CaseOutcome {
                case_id: format!("c{i:03}"),
                abnormal: label,
                fold: 0,
                phases: BTreeMap::from([(Phase::Arterial, a), (Phase::Venous, v)].map(|(p, x)| {
                    (p, PhaseOutcome { decision: decision(x), pancreas_dsc: 1.0, tumor_dsc: 1.0, cls_probability: None })
                })),
            })
            .collect();
        let r = s4c_reports(&cases, &Phase::ALL).unwrap();
        let fused_missed = r.fused.missed_ids();
        let fused_wrong = r.fused.wrong_call_ids();
        let mut all_missed = r.phases[&Phase::Arterial].missed_ids();
        all_missed.retain(|c| r.phases[&Phase::Venous].missed_ids().contains(c));
        prop_assert_eq!(&fused_missed, &all_missed);
        for p in Phase::ALL {
            let single = &r.phases[&p];
            prop_assert!(fused_wrong.is_superset(&single.wrong_call_ids()));
            if let (Some(fs), Some(ss)) = (r.fused.sensitivity, single.sensitivity) {
                prop_assert!(fs >= ss);
            }
            if let (Some(fs), Some(ss)) = (r.fused.specificity, single.specificity) {
                prop_assert!(fs <= ss);
            }
        }
    }

    #[test]
    fn group_norm_moments(seed in any::<u64>(), groups in 1usize..5, per in 1usize..5, side in 2usize..6) {
        let mut rng = SplitMix64::new(seed);
        let channels = groups * per;
        let dims = Dims::cube(side).unwrap();
        let scale = 1.0 + 19.0 * rng.uniform_range(0.0, 1.0);
        let shift = 100.0 * rng.gaussian();
        let data = (0..channels * dims.len()).map(|_| shift + scale * rng.gaussian()).collect();
        let x = Tensor::from_vec(channels, dims, data).unwrap();
        let cache = GroupNorm::<f64>::new(groups, channels).unwrap().normalize(&x).unwrap();
        let n = per * dims.len();
        for g in cache.normalized.data.chunks(n) {
            let mean = g.iter().sum::<f64>() / n as f64;
            let var = g.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            prop_assert!(mean.abs() <= 1e-5 && (var - 1.0).abs() <= 1e-5, "mean {} var {}", mean, var);
        }
    }

    #[test]
    fn interior_translation_keeps_probability(seed in any::<u64>(), a in 1usize..5, b in 1usize..5, c in 1usize..5) {
        // Pointwise kernels make the head local, so interior content can move freely.
        let arch = ClsArch { in_channels: 3, widths: vec![8], groups: 4 };
        let mut head = ClsHead::<f64>::init(arch, seed).unwrap();
        for (i, w) in head.convs[0].weight.iter_mut().enumerate() {
            if i % 27 != 13 {
                *w = 0.0;
            }
        }
        let dims = Dims::cube(6).unwrap();
        let mut rng = SplitMix64::new(seed ^ 1);
        let values: Vec<f64> = (0..3).map(|_| rng.gaussian()).collect();
        let place = |p: [usize; 3]| {
            let mut t = Tensor::<f64>::zeros(3, dims);
            for (ch, &v) in values.iter().enumerate() {
                t.channel_mut(ch)[dims.index(p[0], p[1], p[2])] = v;
            }
            t
        };
        let p = head.predict_proba(&place([1, 1, 1])).unwrap();
        let q = head.predict_proba(&place([a, b, c])).unwrap();
        prop_assert!((p - q).abs() < 1e-12);
    }
}
