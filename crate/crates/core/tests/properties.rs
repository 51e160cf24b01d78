//! Property tests for the invariants of each module.

use mrtnet_core::data::{prepare, Annotation, WordEmbeddings};
use mrtnet_core::diffcore::{Graph, Tensor};
use mrtnet_core::encoders::{EncoderConfig, SharedEncoder, VideoQueryAttention};
use mrtnet_core::losses::{ce_map, iou_loss, ssim_loss, LossConfig};
use mrtnet_core::metrics::{evaluate, interval_iou};
use mrtnet_core::mrt::{downsample_map, groundtruth_map, groundtruth_pyramid, ClipSpan, MultiResolutionTemporal, TemporalMap};
use mrtnet_core::nn::{Ctx, ParamStore};
use mrtnet_core::predictor::{index_to_time, joint_argmax, time_to_index, TemporalSpan};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn brute_force_argmax(ps: &[f64], pe: &[f64]) -> (usize, usize) {
    let mut pairs = Vec::new();
    for s in 0..ps.len() {
        for e in s..pe.len() {
            pairs.push((ps[s] * pe[e], s, e));
        }
    }
    let best = pairs.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let (_, s, e) = pairs.into_iter().find(|p| p.0 == best).unwrap();
    (s, e)
}

fn distribution(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, len).prop_map(|v| {
        let total: f64 = v.iter().sum::<f64>() + 1e-12;
        v.into_iter().map(|x| x / total).collect()
    })
}

fn span(s: f64, e: f64) -> TemporalSpan {
    TemporalSpan {
        start_idx: 0,
        end_idx: 0,
        start_sec: s,
        end_sec: e,
        duration_sec: e.max(1.0),
    }
}

fn interval() -> impl Strategy<Value = (f64, f64)> {
    (0.0f64..100.0, 0.0f64..50.0).prop_map(|(s, l)| (s, s + l))
}

fn map(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..=1.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn softmax_normalised_and_shift_invariant(
        v in prop::collection::vec(-50.0f64..50.0, 1..20),
        c in -500.0f64..500.0,
    ) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, v.len()], v.clone()).unwrap());
        let shifted = g.constant(Tensor::new(vec![1, v.len()], v.iter().map(|x| x + c).collect()).unwrap());
        let a = g.softmax(x, 1).unwrap();
        let b = g.softmax(shifted, 1).unwrap();
        prop_assert!((g.value(a).sum() - 1.0).abs() < 1e-9);
        for (p, q) in g.value(a).data().iter().zip(g.value(b).data()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn same_convolution_preserves_length(n in 1usize..40, half in 0usize..5, din in 1usize..4, dout in 1usize..4) {
        let k = 2 * half + 1;
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[n, din], 0.5));
        let w = g.constant(Tensor::full(&[k, din, dout], 0.1));
        let y = g.conv1d(x, w).unwrap();
        prop_assert_eq!(g.value(y).shape(), &[n, dout]);
        let dw = g.constant(Tensor::full(&[k, din], 0.1));
        let y = g.depthwise_conv1d(x, dw).unwrap();
        prop_assert_eq!(g.value(y).shape(), &[n, din]);
    }

    #[test]
    fn joint_argmax_matches_brute_force((ps, pe) in (1usize..=64).prop_flat_map(|n| (distribution(n), distribution(n)))) {
        let (s, e, p) = joint_argmax(&ps, &pe).unwrap();
        prop_assert!(s <= e);
        prop_assert_eq!((s, e), brute_force_argmax(&ps, &pe));
        prop_assert_eq!(p, ps[s] * pe[e]);
    }

    #[test]
    fn joint_argmax_ignores_positive_scaling(
        (ps, pe) in (1usize..=32).prop_flat_map(|n| (distribution(n), distribution(n))),
        a in 0.1f64..10.0,
        b in 0.1f64..10.0,
    ) {
        // power-of-two factors scale exactly, so ties stay ties
        let a = 2f64.powi(a.log2().round() as i32);
        let b = 2f64.powi(b.log2().round() as i32);
        let sa: Vec<f64> = ps.iter().map(|x| x * a).collect();
        let sb: Vec<f64> = pe.iter().map(|x| x * b).collect();
        let (s1, e1, _) = joint_argmax(&ps, &pe).unwrap();
        let (s2, e2, _) = joint_argmax(&sa, &sb).unwrap();
        prop_assert_eq!((s1, e1), (s2, e2));
    }

    #[test]
    fn quantisation_error_bounded(frac in 0.0f64..=1.0, duration in 0.5f64..1000.0, n in 1usize..1024) {
        let tau = frac * duration;
        let back = index_to_time(time_to_index(tau, duration, n).unwrap(), n, duration);
        prop_assert!((back - tau).abs() <= duration / n as f64 + 1e-9);
    }

    #[test]
    fn pyramid_is_downsampled_full_map(n4 in 1usize..40, a in 0usize..160, b in 0usize..160) {
        let n = 4 * n4;
        let (s, e) = (a.min(b) % n, a.max(b) % n);
        let (s, e) = (s.min(e), s.max(e));
        let full = groundtruth_map(ClipSpan::new(s, e).unwrap(), n).unwrap();
        let half = downsample_map(&full).unwrap();
        let quarter = downsample_map(&half).unwrap();
        let pyr = groundtruth_pyramid(ClipSpan::new(s, e).unwrap(), n).unwrap();
        prop_assert_eq!(&pyr[2], &full);
        prop_assert_eq!(&pyr[1], &half);
        prop_assert_eq!(&pyr[0], &quarter);
        for (i, &v) in half.scores.iter().enumerate() {
            let any = full.scores[2 * i] == 1.0 || full.scores[2 * i + 1] == 1.0;
            prop_assert_eq!(v == 1.0, any);
        }
    }

    #[test]
    fn loss_bounds_and_symmetry((s, g) in (4usize..64).prop_flat_map(|n| (map(n), map(n)))) {
        let cfg = LossConfig { ssim_window: 4, ..LossConfig::default() };
        let (sm, gm) = (TemporalMap::new(s), TemporalMap::new(g));
        let ssim = ssim_loss(&sm, &gm, &cfg).unwrap();
        prop_assert!((0.0..=2.0).contains(&ssim), "{}", ssim);
        prop_assert_eq!(ssim, ssim_loss(&gm, &sm, &cfg).unwrap());
        let iou = iou_loss(&sm, &gm).unwrap();
        prop_assert!((0.0..=1.0).contains(&iou), "{}", iou);
        let ce = ce_map(&sm, &gm).unwrap();
        prop_assert!(ce >= 0.0 && ce.is_finite());
    }

    #[test]
    fn iou_loss_moves_toward_target(
        (s, g) in (2usize..32).prop_flat_map(|n| (map(n), prop::collection::vec(any::<bool>(), n))),
        pick in any::<prop::sample::Index>(),
        t in 0.0f64..=1.0,
    ) {
        let g: Vec<f64> = g.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect();
        let i = pick.index(s.len());
        let mut moved = s.clone();
        moved[i] = s[i] + t * (g[i] - s[i]);
        let gm = TemporalMap::new(g);
        let before = iou_loss(&TemporalMap::new(s), &gm).unwrap();
        let after = iou_loss(&TemporalMap::new(moved), &gm).unwrap();
        prop_assert!(after <= before + 1e-12, "{} -> {}", before, after);
    }

    #[test]
    fn iou_zero_iff_equal_binary(
        (a, b) in (1usize..32).prop_flat_map(|n| (prop::collection::vec(any::<bool>(), n), prop::collection::vec(any::<bool>(), n))),
    ) {
        let f = |v: &[bool]| TemporalMap::new(v.iter().map(|&x| if x { 1.0 } else { 0.0 }).collect());
        let l = iou_loss(&f(&a), &f(&b)).unwrap();
        prop_assert_eq!(l == 0.0, a == b);
    }

    #[test]
    fn temporal_iou_properties(a in interval(), b in interval()) {
        let ab = interval_iou(a.0, a.1, b.0, b.1);
        prop_assert_eq!(ab, interval_iou(b.0, b.1, a.0, a.1));
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(interval_iou(a.0, a.1, a.0, a.1), 1.0);
        let overlap = a.1.min(b.1) - a.0.max(b.0);
        if overlap <= 0.0 {
            prop_assert_eq!(ab, 0.0);
        }
    }

    #[test]
    fn recall_monotone_and_rescale_invariant(pairs in prop::collection::vec((interval(), interval()), 1..30), c in 0.1f64..10.0) {
        let preds: Vec<_> = pairs.iter().map(|(p, _)| span(p.0, p.1)).collect();
        let gts: Vec<_> = pairs.iter().map(|(_, g)| span(g.0, g.1)).collect();
        let thresholds = [0.1, 0.3, 0.5, 0.7, 0.9];
        let r = evaluate(&preds, &gts, &thresholds).unwrap();
        for w in r.r1_iou.windows(2) {
            prop_assert!(w[1].1 <= w[0].1);
        }
        let scale = |s: &TemporalSpan| span(s.start_sec * c, s.end_sec * c);
        let sp: Vec<_> = preds.iter().map(scale).collect();
        let sg: Vec<_> = gts.iter().map(scale).collect();
        let rs = evaluate(&sp, &sg, &thresholds).unwrap();
        prop_assert!((rs.miou - r.miou).abs() < 1e-9);
    }

    #[test]
    fn prepare_marks_valid_prefix(n_raw in 1usize..150, seed in any::<u64>()) {
        let feats = Tensor::new(vec![n_raw, 3], (0..n_raw * 3).map(|i| ((i as u64 ^ seed) % 97) as f64).collect()).unwrap();
        let ann = Annotation {
            video_id: "v".into(),
            duration_sec: 20.0,
            start_sec: 3.0,
            end_sec: 9.0,
            query: vec!["a".into()],
        };
        let emb = WordEmbeddings::hashed(4);
        let s = prepare(&ann, &feats, 64, &emb, 8).unwrap();
        prop_assert_eq!(&s, &prepare(&ann, &feats, 64, &emb, 8).unwrap());
        let valid = n_raw.min(64);
        prop_assert_eq!(s.n_valid, valid);
        prop_assert!(s.mask.iter().enumerate().all(|(i, &m)| m == (i < valid)));
        prop_assert!(s.label.end < valid);
        prop_assert_eq!(&s.gt_maps[1], &downsample_map(&s.gt_maps[2]).unwrap());
        prop_assert_eq!(&s.gt_maps[0], &downsample_map(&s.gt_maps[1]).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mrt_preserves_shape(n4 in 1usize..=64, d in prop::sample::select(vec![4usize, 8, 16]), seed in any::<u64>()) {
        let n = 4 * n4;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mrt = MultiResolutionTemporal::new(&mut store, &mut rng, d, 7).unwrap();
        let mut cx = Ctx::new(&store, false);
        let x = cx.g.constant(Tensor::full(&[n, d], 0.3));
        let q = cx.g.constant(Tensor::full(&[2, d], -0.2));
        let out = mrt.forward(&mut cx, x, q, &[true, true]).unwrap();
        prop_assert_eq!(cx.g.value(out.dec1).shape(), &[n, d]);
        for (k, len) in [n / 4, n / 2, n].into_iter().enumerate() {
            prop_assert_eq!(cx.g.value(out.maps[k]).shape(), &[len]);
        }
    }

    #[test]
    fn encoder_shared_and_normalised(n in 4usize..20, m in 1usize..6, valid in 1usize..20, seed in any::<u64>()) {
        let valid = valid.min(n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = EncoderConfig { d_video: 5, d_query: 3, hidden: 8, kernel: 7, heads: 2, max_len: 32 };
        let enc = SharedEncoder::new(&mut store, &mut rng, cfg).unwrap();
        let att = VideoQueryAttention::new(&mut store, &mut rng, 8);
        let vt = Tensor::new(vec![n, 5], (0..n * 5).map(|i| ((i * 7 + seed as usize) % 11) as f64 / 11.0).collect()).unwrap();
        let qt = Tensor::new(vec![m, 3], (0..m * 3).map(|i| ((i * 5) % 7) as f64 / 7.0 - 0.5).collect()).unwrap();
        let vmask: Vec<bool> = (0..n).map(|i| i < valid).collect();
        let qmask = vec![true; m];

        let mut cx = Ctx::new(&store, false);
        let v = cx.g.constant(vt.clone());
        let q = cx.g.constant(qt.clone());
        let (ve, qe) = enc.encode(&mut cx, v, &vmask, q, &qmask).unwrap();
        prop_assert_eq!(cx.g.value(ve).shape(), &[n, 8]);

        // query first in a fresh pass
        let mut cx2 = Ctx::new(&store, false);
        let q2 = cx2.g.constant(qt);
        let v2 = cx2.g.constant(vt);
        let qe2 = enc.encode_one(&mut cx2, q2, &qmask, &enc.proj_query).unwrap();
        let ve2 = enc.encode_one(&mut cx2, v2, &vmask, &enc.proj_video).unwrap();
        prop_assert_eq!(cx.g.value(ve), cx2.g.value(ve2));
        prop_assert_eq!(cx.g.value(qe), cx2.g.value(qe2));

        let s = att.similarity(&mut cx, ve, qe).unwrap();
        let (s_r, s_c) = att.normalize(&mut cx, s, &vmask, &qmask).unwrap();
        for i in 0..valid {
            prop_assert!((cx.g.value(s_r).row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        for j in 0..m {
            let col: f64 = (0..n).map(|i| cx.g.value(s_c).at(i, j)).sum();
            prop_assert!((col - 1.0).abs() < 1e-9);
        }
        let fused = att.fuse(&mut cx, ve, qe, s, &vmask, &qmask).unwrap();
        prop_assert_eq!(cx.g.value(fused).shape(), &[n, 8]);
        for i in valid..n {
            prop_assert!(cx.g.value(fused).row(i).iter().all(|&x| x == 0.0));
        }
    }
}
