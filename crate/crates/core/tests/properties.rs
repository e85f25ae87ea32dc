use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sadi_core::data::{
    augment_with, decode_map, encode_gaussian, parse_annotations, render_blobs, AugmentParams, GaussianEncodeConfig,
    Sample, SynthConfig,
};
use sadi_core::dlm::{rasterize_h2, DensityConfig, Flow, HeadOutput};
use sadi_core::init::Init;
use sadi_core::losses::{combined_loss, mse_h1};
use sadi_core::metrics::{pck, Norm};
use sadi_core::nn::{basic_block, dilated_residual_block, BasicBlockParams, DilatedResidualBlockParams};
use sadi_core::sfm::{attend, global_attention, GlobalAttentionParams, LocalAxis};
use sadi_core::{Graph, KeypointAnnotation, Tensor};

mod common;
use common::{random, randomize};

fn point() -> impl Strategy<Value = [f64; 2]> {
    [-50.0..50.0f64, -50.0..50.0f64]
}

fn anno(joints: Vec<[f64; 2]>, visible: Vec<bool>, norm: f64) -> KeypointAnnotation {
    KeypointAnnotation {
        image_id: "p".into(),
        joints,
        visible,
        norm_head: Some(norm),
        norm_torso: None,
        center: [0.0, 0.0],
        scale: 1.0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmax_sums_to_one_and_ignores_shifts(v in prop::collection::vec(-30.0..30.0f64, 1..12), c in -100.0..100.0f64) {
        let mut g = Graph::new();
        let n = v.len();
        let a = g.constant(Tensor::new(vec![n], v.clone()).unwrap());
        let b = g.constant(Tensor::new(vec![n], v.iter().map(|x| x + c).collect()).unwrap());
        let sa = g.softmax(a, 0).unwrap();
        let sb = g.softmax(b, 0).unwrap();
        prop_assert!((g.value(sa).data().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(g.value(sa).max_abs_diff(g.value(sb)) <= 1e-12);
    }

    #[test]
    fn dilated_conv_extent(dil in 1usize..5, k in prop::sample::select(vec![1usize, 3, 5])) {
        let size = dil * (k - 1) + 5;
        let c = size / 2;
        let mut x = Tensor::zeros(&[1, 1, size, size]);
        x.set(&[0, 0, c, c], 1.0);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let w = g.constant(Tensor::full(&[1, 1, k, k], 1.0));
        let y = g.conv2d(xv, w, 1, dil * (k - 1) / 2, dil).unwrap();
        let y = g.value(y);
        let rows: Vec<usize> = (0..size).filter(|&r| y.get(&[0, 0, r, c]) != 0.0).collect();
        prop_assert_eq!(rows.last().unwrap() - rows[0] + 1, dil * (k - 1) + 1);
    }

    #[test]
    fn blocks_preserve_spatial_shape(h in 3usize..10, w in 3usize..10, seed in 0u64..100, dil in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let basic = BasicBlockParams::new(&mut Init::new(seed), "b", 2, 3);
        let drb = DilatedResidualBlockParams::new(&mut Init::new(seed), "d", 2, 4, dil, 2);
        let mut g = Graph::new();
        let x = g.constant(random(&mut rng, &[1, 2, h, w]));
        let a = basic_block(&mut g, x, &basic).unwrap();
        let b = dilated_residual_block(&mut g, x, &drb).unwrap();
        prop_assert_eq!(g.value(a).shape(), &[1, 3, h, w][..]);
        prop_assert_eq!(g.value(b).shape(), &[1, 4, h, w][..]);
    }

    #[test]
    fn attention_weights_are_a_distribution_and_shift_invariant(seed in 0u64..1000, c in -20.0..20.0f64) {
        let mut p = GlobalAttentionParams::new(&mut Init::new(seed), "ga", &[2, 3, 4, 5], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        randomize(&mut p, &mut rng, 1.0);
        let mut g = Graph::new();
        let pyr: Vec<_> = (0..4).map(|n| g.constant(random(&mut rng, &[1, 2 + n, 8 >> n, 8 >> n]))).collect();
        let before = global_attention(&mut g, &pyr, &p).unwrap();
        let w0 = g.value(before.weights).clone();
        for s in 0..64 {
            let total: f64 = (0..4).map(|b| w0.data()[b * 64 + s]).sum();
            prop_assert!((total - 1.0).abs() <= 1e-9);
        }
        prop_assert!(w0.data().iter().all(|&v| v >= 0.0));
        for proj in &mut p.project {
            for b in proj.bias.as_mut().unwrap().value.data_mut() {
                *b += c;
            }
        }
        let after = global_attention(&mut g, &pyr, &p).unwrap();
        prop_assert!(g.value(after.weights).max_abs_diff(&w0) <= 1e-9);
    }

    #[test]
    fn local_attention_only_reweights(seed in 0u64..1000, rows in prop::bool::ANY) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[2, 3, 5, 4]);
        let x = Tensor::from_fn(x.shape(), |i| x.data()[i].abs() * 3.0);
        let axis = if rows { LocalAxis::Rows } else { LocalAxis::Columns };
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = attend(&mut g, xv, axis).unwrap();
        for (o, f) in g.value(y).data().iter().zip(x.data()) {
            prop_assert!(*o >= 0.0 && *o <= *f);
        }
    }

    #[test]
    fn flow_inverts_any_parameters(seed in 0u64..10_000, z in point(), scale in 0.0..2.0f64) {
        let mut f = Flow::new(&mut Init::new(seed), "flow", 4);
        randomize(&mut f, &mut ChaCha8Rng::seed_from_u64(seed), scale);
        let (x, ld) = f.forward_point(z);
        let (back, ild) = f.inverse_point(x);
        prop_assert!(((back[0] - z[0]).powi(2) + (back[1] - z[1]).powi(2)).sqrt() < 1e-9);
        prop_assert!((ld + ild).abs() <= 1e-9);
    }

    #[test]
    fn moment_estimates_are_reproducible(seed in 0u64..1000, draw in 0u64..1000) {
        let f = Flow::new(&mut Init::new(seed), "flow", 4);
        let a = f.estimate_moments(1000, draw).unwrap();
        let b = f.estimate_moments(1000, draw).unwrap();
        prop_assert_eq!(a.mean.map(f64::to_bits), b.mean.map(f64::to_bits));
        prop_assert_eq!(a.std.map(f64::to_bits), b.std.map(f64::to_bits));
    }

    #[test]
    fn h2_is_nonnegative_with_unit_peak(seed in 0u64..1000, mu in [2.0..14.0f64, 2.0..14.0f64], sigma in [0.5..3.0f64, 0.5..3.0f64]) {
        let f = Flow::new(&mut Init::new(seed), "flow", 4);
        let m = f.estimate_moments(1000, seed).unwrap();
        let mut g = Graph::new();
        let mu = g.constant(Tensor::new(vec![1, 1, 2], mu.to_vec()).unwrap());
        let sigma = g.constant(Tensor::new(vec![1, 1, 2], sigma.to_vec()).unwrap());
        let h = rasterize_h2(&mut g, HeadOutput { mu, sigma }, &f, &m, DensityConfig::default(), 16).unwrap();
        let h = g.value(h);
        prop_assert!(h.data().iter().all(|&v| v >= 0.0 && v.is_finite()));
        prop_assert_eq!(h.data().iter().copied().fold(f64::NEG_INFINITY, f64::max), 1.0);
    }

    #[test]
    fn combined_loss_is_affine(l1 in 0.0..10.0f64, l2 in 0.0..10.0f64, chi in 0.0..=1.0f64) {
        let t = combined_loss(l1, l2, chi).unwrap().total;
        prop_assert!((t - ((1.0 - chi) * l1 + chi * l2)).abs() <= 1e-12);
    }

    #[test]
    fn mse_is_symmetric_and_zero_only_on_equality(seed in 0u64..1000, vis in prop::collection::vec(prop::bool::ANY, 3)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, &[1, 3, 4, 4]);
        let b = random(&mut rng, &[1, 3, 4, 4]);
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a), g.constant(b));
        let ab = mse_h1(&mut g, av, bv, &vis).unwrap();
        let ba = mse_h1(&mut g, bv, av, &vis).unwrap();
        let aa = mse_h1(&mut g, av, av, &vis).unwrap();
        prop_assert_eq!(g.scalar(ab), g.scalar(ba));
        prop_assert_eq!(g.scalar(aa), 0.0);
        if vis.iter().any(|&v| v) {
            prop_assert!(g.scalar(ab) > 0.0);
        }
    }

    #[test]
    fn pck_is_scale_invariant(
        gt in prop::collection::vec(point(), 6),
        noise in prop::collection::vec(point(), 6),
        norm in 1.0..40.0f64,
        c in 0.01..100.0f64,
    ) {
        let pred: Vec<[f64; 2]> = gt.iter().zip(&noise).map(|(g, n)| [g[0] + n[0] / 5.0, g[1] + n[1] / 5.0]).collect();
        let a = anno(gt.clone(), vec![true; 6], norm);
        let scaled = anno(gt.iter().map(|p| [p[0] * c, p[1] * c]).collect(), vec![true; 6], norm * c);
        let spred: Vec<[f64; 2]> = pred.iter().map(|p| [p[0] * c, p[1] * c]).collect();
        for t in [0.1, 0.2, 0.5] {
            let r = pck(std::slice::from_ref(&pred), std::slice::from_ref(&a), t, Norm::Head).unwrap();
            let s = pck(std::slice::from_ref(&spred), std::slice::from_ref(&scaled), t, Norm::Head).unwrap();
            for (x, y) in r.per_joint.iter().zip(&s.per_joint) {
                // Distances exactly on the threshold may round either way once scaled.
                let d = |p: [f64; 2], q: [f64; 2]| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
                let borderline = pred.iter().zip(&gt).any(|(p, q)| (d(*p, *q) / norm - t).abs() < 1e-9);
                prop_assert!(x == y || borderline);
            }
        }
    }

    #[test]
    fn pck_is_monotone_in_the_threshold(
        gt in prop::collection::vec(point(), 5),
        noise in prop::collection::vec(point(), 5),
        norm in 1.0..40.0f64,
        t in 0.0..1.0f64,
        dt in 0.0..1.0f64,
    ) {
        let pred: Vec<[f64; 2]> = gt.iter().zip(&noise).map(|(g, n)| [g[0] + n[0] / 5.0, g[1] + n[1] / 5.0]).collect();
        let a = anno(gt, vec![true; 5], norm);
        let lo = pck(std::slice::from_ref(&pred), std::slice::from_ref(&a), t, Norm::Head).unwrap();
        let hi = pck(&[pred], &[a], t + dt, Norm::Head).unwrap();
        for (x, y) in lo.per_joint.iter().zip(&hi.per_joint) {
            prop_assert!(x.unwrap() <= y.unwrap());
        }
        prop_assert!(lo.mean <= hi.mean);
    }

    #[test]
    fn heatmap_codec_round_trips(x in 0.5..62.5f64, y in 0.5..62.5f64, sigma in 1.5..3.0f64, cx in 0usize..64, cy in 0usize..64) {
        let cfg = GaussianEncodeConfig::new(sigma, 64).unwrap();
        let (maps, _) = encode_gaussian(&[[x, y]], &[true], &cfg);
        let d = decode_map(maps.data(), 64);
        prop_assert!(((d.x - x).powi(2) + (d.y - y).powi(2)).sqrt() <= 0.5, "{:?}", d);

        let exact = [cx as f64, cy as f64];
        let (maps, _) = encode_gaussian(&[exact], &[true], &cfg);
        let d = decode_map(maps.data(), 64);
        prop_assert_eq!([d.x, d.y], exact);
    }

    #[test]
    fn annotations_survive_json(
        joints in prop::collection::vec(point(), 1..20),
        seed in 0u64..1000,
        head in prop::option::of(0.1..100.0f64),
        scale in 0.1..5.0f64,
    ) {
        let n = joints.len();
        let visible: Vec<bool> = (0..n).map(|i| (seed >> (i % 10)) & 1 == 1).collect();
        let a = KeypointAnnotation {
            image_id: format!("img_{seed}"),
            joints,
            visible,
            norm_head: head,
            norm_torso: Some(2.5),
            center: [seed as f64 * 0.1, -3.75],
            scale,
        };
        let text = serde_json::to_string(std::slice::from_ref(&a)).unwrap();
        let back = parse_annotations(&text).unwrap();
        prop_assert!(back.errors.is_empty());
        prop_assert_eq!(&back.records[0], &a);
    }

    #[test]
    fn augmented_blobs_follow_their_annotations(
        p in [16.0..48.0f64, 16.0..48.0f64],
        rotation_deg in -45.0..45.0f64,
        scale in 0.75..1.25f64,
        flip in prop::bool::ANY,
    ) {
        let cfg = SynthConfig::new(64, 1);
        let sample = Sample {
            image: render_blobs(&cfg, &[p], &[true]),
            anno: anno(vec![p], vec![true], 10.0),
        };
        let out = augment_with(&sample, &AugmentParams { rotation_deg, scale, flip }, &[]);
        // The blob is symmetric and sits well inside the frame, so its centroid is its centre.
        let (mut m, mut mx, mut my) = (0.0, 0.0, 0.0);
        for i in 0..64 * 64 {
            let v: f64 = (0..3).map(|c| out.image.data()[c * 4096 + i]).sum();
            m += v;
            mx += v * (i % 64) as f64;
            my += v * (i / 64) as f64;
        }
        let (cx, cy) = (mx / m, my / m);
        let q = out.anno.joints[0];
        prop_assert!(((cx - q[0]).powi(2) + (cy - q[1]).powi(2)).sqrt() <= 0.5, "{:?} -> ({}, {})", q, cx, cy);
    }
}
