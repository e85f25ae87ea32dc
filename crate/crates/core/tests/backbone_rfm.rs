use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sadi_core::backbone::{Backbone, HourglassConfig, HourglassLevel, Inner, Stem};
use sadi_core::init::Init;
use sadi_core::nn::{zero_params, UnitConfig, UnitKind};
use sadi_core::{Graph, Tensor};

mod common;
use common::{
    add, conv_layer_reference, maxpool_reference, random, randomize, relu, unit_reference, upsample_reference,
};

fn small(heatmap: usize, depth: usize, kind: UnitKind) -> HourglassConfig {
    HourglassConfig {
        stacks: 2,
        depth,
        base_channels: 2,
        joints: 3,
        heatmap_size: heatmap,
        unit: UnitConfig {
            kind,
            ..Default::default()
        },
    }
}

#[test]
fn zero_image_with_zero_biases_gives_zero_features() {
    let cfg = small(8, 2, UnitKind::Dilated);
    let stem = Stem::new(&mut Init::new(0), &cfg);
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 3, 32, 32]));
    let y = stem.forward(&mut g, x).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn stem_takes_256_to_64() {
    let cfg = small(64, 4, UnitKind::Basic);
    let stem = Stem::new(&mut Init::new(0), &cfg);
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 3, 256, 256]));
    let y = stem.forward(&mut g, x).unwrap();
    assert_eq!(g.shape(y), [1, 2, 64, 64]);
}

#[test]
fn stem_matches_primitive_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = small(8, 2, UnitKind::Basic);
    let mut stem = Stem::new(&mut Init::new(0), &cfg);
    randomize(&mut stem, &mut rng, 0.4);
    let image = random(&mut rng, &[2, 3, 32, 32]);
    let expected = {
        let x = relu(&conv_layer_reference(&image, &stem.conv));
        let x = unit_reference(&x, &stem.unit1);
        let x = maxpool_reference(&x);
        unit_reference(&x, &stem.unit2)
    };
    let mut g = Graph::new();
    let x = g.constant(image);
    let y = stem.forward(&mut g, x).unwrap();
    assert!(g.value(y).max_abs_diff(&expected) <= 1e-12);
}

#[test]
fn zero_parameters_give_zero_heatmaps() {
    let cfg = small(8, 2, UnitKind::Dilated);
    let mut bb = Backbone::new(&mut Init::new(0), cfg).unwrap();
    zero_params(&mut bb);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::new();
    let x = g.constant(random(&mut rng, &[1, 3, 32, 32]));
    let out = bb.forward(&mut g, x).unwrap();
    for h in out.h1 {
        assert!(g.value(h).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn two_stacks_emit_two_heatmap_sets() {
    let cfg = HourglassConfig {
        base_channels: 1,
        ..small(64, 4, UnitKind::Basic)
    };
    let bb = Backbone::new(&mut Init::new(0), cfg).unwrap();
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 3, 256, 256]));
    let out = bb.forward(&mut g, x).unwrap();
    assert_eq!(out.h1.len(), 2);
    for h in &out.h1 {
        assert_eq!(g.shape(*h), [1, 3, 64, 64]);
    }
    let sizes: Vec<usize> = out.pyramid.iter().map(|p| g.shape(*p)[2]).collect();
    assert_eq!(sizes, [64, 32, 16, 8]);
}

#[test]
fn depth_one_hourglass_matches_hand_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = HourglassConfig {
        base_channels: 1,
        ..small(4, 1, UnitKind::Basic)
    };
    let mut level = HourglassLevel::new(&mut Init::new(0), "hg", &cfg, 0);
    randomize(&mut level, &mut rng, 0.6);
    let x = random(&mut rng, &[1, 1, 4, 4]);
    let Inner::Bottom(bottom) = &level.inner else {
        panic!("depth 1 has a bottom unit")
    };
    let skip = unit_reference(&x, &level.skip);
    let low = unit_reference(&maxpool_reference(&x), &level.down);
    let low = unit_reference(&unit_reference(&low, bottom), &level.up);
    let expected = add(&skip, &upsample_reference(&low, 2));

    let mut g = Graph::new();
    let xv = g.constant(x);
    let mut feats = Vec::new();
    let y = level.forward(&mut g, xv, &mut feats).unwrap();
    assert!(g.value(y).max_abs_diff(&expected) <= 1e-12);
    assert_eq!(feats.len(), 1);
    assert!(g.value(feats[0]).max_abs_diff(&skip) <= 1e-12);
}
