use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sadi_core::init::Init;
use sadi_core::nn::zero_params;
use sadi_core::sfm::{
    attend, classification_head, global_attention, ClassificationHeadParams, GlobalAttentionParams, LocalAxis,
};
use sadi_core::{Graph, Tensor};

mod common;
use common::{add, conv_layer_reference, random, randomize, relu};

#[test]
fn equal_scores_give_quarter_weights() {
    let mut p = GlobalAttentionParams::new(&mut Init::new(0), "ga", &[3, 3, 3, 3], 2);
    for c in &mut p.project {
        zero_params(c);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::new();
    let pyr: Vec<_> = (0..4)
        .map(|n| g.constant(random(&mut rng, &[2, 3, 16 >> n, 16 >> n])))
        .collect();
    let out = global_attention(&mut g, &pyr, &p).unwrap();
    assert!(g.value(out.weights).data().iter().all(|&w| w == 0.25));
}

#[test]
fn two_branch_scores_ln1_ln3() {
    let mut p = GlobalAttentionParams::new(&mut Init::new(0), "ga", &[1, 1], 1);
    zero_params(&mut p);
    p.project[0].bias.as_mut().unwrap().value.data_mut()[0] = 1f64.ln();
    p.project[1].bias.as_mut().unwrap().value.data_mut()[0] = 3f64.ln();
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
    let b = g.constant(Tensor::zeros(&[1, 1, 1, 1]));
    let out = global_attention(&mut g, &[a, b], &p).unwrap();
    let w = g.value(out.weights);
    for px in 0..4 {
        assert!((w.data()[px] - 0.25).abs() <= 1e-15);
        assert!((w.data()[4 + px] - 0.75).abs() <= 1e-15);
    }
}

#[test]
fn constant_columns_get_uniform_weights() {
    let h = 5;
    let x = Tensor::from_fn(&[1, 2, h, 3], |i| (i % 3) as f64 + 1.0);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = attend(&mut g, xv, LocalAxis::Rows).unwrap();
    for (o, v) in g.value(y).data().iter().zip(x.data()) {
        assert!((o - v / h as f64).abs() <= 1e-15);
    }
}

#[test]
fn hand_softmax_of_a_two_row_column() {
    let x = Tensor::new(vec![1, 1, 2, 1], vec![0.0, 3f64.ln()]).unwrap();
    let mut g = Graph::new();
    let xv = g.constant(x);
    let y = attend(&mut g, xv, LocalAxis::Rows).unwrap();
    let y = g.value(y).data();
    assert_eq!(y[0], 0.0);
    assert!((y[1] - 0.75 * 3f64.ln()).abs() <= 1e-15);
}

#[test]
fn zero_head_on_full_pyramid() {
    let mut head = ClassificationHeadParams::new(&mut Init::new(0), "h", &[64, 128, 256, 512]);
    zero_params(&mut head);
    let mut g = Graph::new();
    let levels: Vec<_> = (0..4)
        .map(|n| g.constant(Tensor::full(&[1, 64 << n, 64 >> n, 64 >> n], 0.5)))
        .collect();
    let out = classification_head(&mut g, &levels, &head, LocalAxis::Rows).unwrap();
    assert_eq!(g.shape(out), [1, 1024, 8, 8]);
    assert!(g.value(out).data().iter().all(|&v| v == 0.0));
}

#[test]
fn single_fusion_matches_hand_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut head = ClassificationHeadParams::new(&mut Init::new(0), "h", &[2, 2]);
    randomize(&mut head, &mut rng, 0.7);
    let f0 = random(&mut rng, &[2, 2, 6, 6]);
    let f1 = random(&mut rng, &[2, 2, 3, 3]);
    for axis in [LocalAxis::Rows, LocalAxis::Columns] {
        let w0 = relu(&conv_layer_reference(&f0, &head.widen[0]));
        let w1 = relu(&conv_layer_reference(&f1, &head.widen[1]));
        let fused = add(&conv_layer_reference(&w0, &head.downsample[0]), &w1);
        assert_eq!(fused.shape(), [2, 4, 3, 3]);
        let mut expected = fused.clone();
        for b in 0..2 {
            for c in 0..4 {
                for line in 0..3 {
                    let at = |k: usize| {
                        if axis == LocalAxis::Rows {
                            [b, c, k, line]
                        } else {
                            [b, c, line, k]
                        }
                    };
                    let m = (0..3).map(|k| fused.get(&at(k))).fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = (0..3).map(|k| (fused.get(&at(k)) - m).exp()).sum();
                    for k in 0..3 {
                        let v = fused.get(&at(k));
                        expected.set(&at(k), (v - m).exp() / z * v);
                    }
                }
            }
        }
        let mut g = Graph::new();
        let a = g.constant(f0.clone());
        let b = g.constant(f1.clone());
        let out = classification_head(&mut g, &[a, b], &head, axis).unwrap();
        assert!(g.value(out).max_abs_diff(&expected) <= 1e-12, "{axis:?}");
    }
}
