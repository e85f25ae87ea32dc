use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sadi_core::backbone::argmax_2d;
use sadi_core::data::{
    augment, augment_with, decode_map, encode_gaussian, flip_pairs, load_annotations, load_dataset, parse_annotations,
    render_blobs, save_annotations, save_png, synth_dataset, AugmentParams, AugmentRanges, GaussianEncodeConfig,
    SynthConfig,
};

#[test]
fn annotation_file_round_trip() {
    let set = synth_dataset(40, &SynthConfig::new(64, 16), 3).unwrap();
    let annos: Vec<_> = set.iter().map(|s| s.anno.clone()).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("annotations.json");
    save_annotations(&path, &annos).unwrap();
    let back = load_annotations(&path).unwrap();
    assert!(back.errors.is_empty());
    assert_eq!(back.records, annos);
}

#[test]
fn dataset_loads_images_beside_the_file() {
    let set = synth_dataset(3, &SynthConfig::new(32, 4), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for s in &set {
        save_png(&s.image, dir.path().join(format!("{}.png", s.anno.image_id))).unwrap();
    }
    let annos: Vec<_> = set.iter().map(|s| s.anno.clone()).collect();
    save_annotations(dir.path().join("a.json"), &annos).unwrap();
    let (loaded, report) = load_dataset(dir.path().join("a.json")).unwrap();
    assert!(report.errors.is_empty());
    for (a, b) in loaded.iter().zip(&set) {
        assert_eq!(a.anno, b.anno);
        assert!(a.image.max_abs_diff(&b.image) <= 0.5 / 255.0 + 1e-12);
    }
}

#[test]
fn bad_records_are_counted_and_skipped() {
    let text = r#"[
        {"image_id": "a", "joints": [[1.0, 2.0]], "visible": [true], "norm_head": 3.0, "center": [0, 0], "scale": 1.0},
        {"image_id": "b", "joints": [[1.0, 2.0]], "visible": [true], "center": [0, 0], "scale": 1.0},
        {"image_id": "c", "joints": [[1.0, 2.0]], "visible": [true, false], "norm_torso": 1.0, "center": [0, 0], "scale": 1.0}
    ]"#;
    let r = parse_annotations(text).unwrap();
    assert_eq!(r.records.len(), 1);
    assert_eq!(r.errors.iter().map(|e| e.0).collect::<Vec<_>>(), [1, 2]);
    assert!(parse_annotations("{}").is_err());
}

#[test]
fn synthetic_set_is_deterministic_with_the_default_shape() {
    let cfg = SynthConfig::new(64, 4);
    let a = synth_dataset(500, &cfg, 0).unwrap();
    let b = synth_dataset(500, &cfg, 0).unwrap();
    assert_eq!(a.len(), 500);
    assert!(a
        .iter()
        .all(|s| s.anno.num_joints() == 4 && s.image.shape() == [3, 64, 64]));
    assert!(a
        .iter()
        .zip(&b)
        .all(|(x, y)| x.image.data() == y.image.data() && x.anno == y.anno));
    let c = synth_dataset(5, &cfg, 1).unwrap();
    assert_ne!(a[0].image, c[0].image);
}

#[test]
fn rendered_blob_peaks_at_its_joint() {
    let cfg = SynthConfig::new(64, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for j in 0..4 {
        for _ in 0..25 {
            let p = [rng.random_range(4.0..60.0), rng.random_range(4.0..60.0)];
            let mut joints = vec![[0.0, 0.0]; 4];
            let mut vis = vec![false; 4];
            joints[j] = p;
            vis[j] = true;
            let img = render_blobs(&cfg, &joints, &vis);
            let lum: Vec<f64> = (0..64 * 64)
                .map(|i| (0..3).map(|c| img.data()[c * 4096 + i]).sum())
                .collect();
            let (r, c) = argmax_2d(&lum, 64);
            assert!(
                (c as f64 - p[0]).abs() <= 0.5 && (r as f64 - p[1]).abs() <= 0.5,
                "{p:?} -> ({c},{r})"
            );
        }
    }
}

#[test]
fn gaussian_target_values() {
    let cfg = GaussianEncodeConfig::new(2.0, 16).unwrap();
    let (maps, vis) = encode_gaussian(&[[5.0, 7.0], [3.0, 3.0]], &[true, false], &cfg);
    assert_eq!(maps.get(&[0, 7, 5]), 1.0);
    assert!((maps.get(&[0, 7, 7]) - (-0.5f64).exp()).abs() <= 1e-15);
    assert!((maps.get(&[0, 9, 5]) - (-0.5f64).exp()).abs() <= 1e-15);
    assert_eq!(vis, [true, false]);
    assert!(maps.data()[256..].iter().all(|&v| v == 0.0));
}

#[test]
fn decode_examples() {
    let size = 64;
    let cfg = GaussianEncodeConfig::new(2.0, size).unwrap();
    let (maps, _) = encode_gaussian(&[[30.5, 30.0]], &[true], &cfg);
    let d = decode_map(maps.data(), size);
    assert!(((d.x - 30.5).powi(2) + (d.y - 30.0).powi(2)).sqrt() <= 0.5, "{d:?}");

    let (maps, _) = encode_gaussian(&[[12.0, 40.0]], &[true], &cfg);
    let d = decode_map(maps.data(), size);
    assert_eq!((d.x, d.y, d.degenerate), (12.0, 40.0, false));

    let d = decode_map(&vec![0.3; size * size], size);
    assert_eq!((d.x, d.y, d.degenerate), (32.0, 32.0, true));
}

#[test]
fn identity_augmentation_leaves_the_sample() {
    let s = &synth_dataset(1, &SynthConfig::new(64, 16), 0).unwrap()[0];
    assert_eq!(&augment_with(s, &AugmentParams::IDENTITY, &flip_pairs(16)), s);
    let none = AugmentRanges {
        max_rotation_deg: 0.0,
        scale: (1.0, 1.0),
        flip_prob: 0.0,
    };
    assert_eq!(&augment(s, &none, 9).0, s);
}

#[test]
fn flip_mirrors_x_and_swaps_sides() {
    let s = &synth_dataset(1, &SynthConfig::new(64, 16), 4).unwrap()[0];
    let flip = AugmentParams {
        flip: true,
        ..AugmentParams::IDENTITY
    };
    let pairs = flip_pairs(16);
    let out = augment_with(s, &flip, &pairs);
    let mut expected: Vec<[f64; 2]> = s.anno.joints.iter().map(|p| [63.0 - p[0], p[1]]).collect();
    for &(a, b) in &pairs {
        expected.swap(a, b);
    }
    for (got, want) in out.anno.joints.iter().zip(&expected) {
        assert!((got[0] - want[0]).abs() <= 1e-12 && (got[1] - want[1]).abs() <= 1e-12);
    }
    for c in 0..3 {
        for y in 0..64 {
            for x in 0..64 {
                let a = out.image.get(&[c, y, x]);
                let b = s.image.get(&[c, y, 63 - x]);
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn composite_augmentation_follows_the_affine_map() {
    let size = 64;
    let s = &synth_dataset(1, &SynthConfig::new(size, 8), 5).unwrap()[0];
    let c = (size as f64 - 1.0) / 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let params = AugmentParams {
            rotation_deg: rng.random_range(-90.0..90.0),
            scale: rng.random_range(0.5..1.5),
            flip: rng.random_bool(0.5),
        };
        let out = augment_with(s, &params, &[]);
        let (sin, cos) = params.rotation_deg.to_radians().sin_cos();
        for (src, got) in s.anno.joints.iter().zip(&out.anno.joints) {
            let (dx, dy) = (src[0] - c, src[1] - c);
            let mut x = c + params.scale * (cos * dx - sin * dy);
            let y = c + params.scale * (sin * dx + cos * dy);
            if params.flip {
                x = size as f64 - 1.0 - x;
            }
            assert!((got[0] - x).abs() <= 1e-9 && (got[1] - y).abs() <= 1e-9, "{params:?}");
        }
        let lim = size as f64 - 1.0;
        for (p, &v) in out.anno.joints.iter().zip(&out.anno.visible) {
            if v {
                assert!(p.iter().all(|&q| (0.0..=lim).contains(&q)));
            }
        }
    }
}
