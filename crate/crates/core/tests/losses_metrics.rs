use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sadi_core::config::DatasetSpec;
use sadi_core::data::GaussianEncodeConfig;
use sadi_core::dlm::Flow;
use sadi_core::gradcheck::{grad_check_module, GradCheckOptions, DEFAULT_TOLERANCE};
use sadi_core::init::Init;
use sadi_core::losses::{combined_loss, mse_h1, mse_h2};
use sadi_core::metrics::{pck, Norm};
use sadi_core::optim::Adam;
use sadi_core::train::{build_data, prepare, stack_batch, step_seed, train_step};
use sadi_core::{checkpoint, Graph, KeypointAnnotation, Model, Module, RunConfig, Tensor};

mod common;
use common::random;

fn mse(a: &Tensor, b: &Tensor, visible: &[bool]) -> f64 {
    let mut g = Graph::new();
    let av = g.constant(a.clone());
    let bv = g.constant(b.clone());
    let l = mse_h1(&mut g, av, bv, visible).unwrap();
    g.scalar(l)
}

#[test]
fn mse_identities_and_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let t = random(&mut rng, &[2, 3, 4, 4]);
    let vis = vec![true; 6];
    assert_eq!(mse(&t, &t, &vis), 0.0);
    let shifted = Tensor::from_fn(t.shape(), |i| t.data()[i] + 0.75);
    assert!((mse(&shifted, &t, &vis) - 0.5625).abs() <= 1e-12);

    let a = random(&mut rng, &[2, 3, 5, 5]);
    let b = random(&mut rng, &[2, 3, 5, 5]);
    let vis = [true, false, true, true, true, false];
    let mut sum = 0.0;
    let mut count = 0;
    for (k, _) in vis.iter().enumerate().filter(|(_, &v)| v) {
        count += 25;
        for i in 0..25 {
            sum += (a.data()[k * 25 + i] - b.data()[k * 25 + i]).powi(2);
        }
    }
    assert!((mse(&a, &b, &vis) - sum / count as f64).abs() <= 1e-12);
}

#[test]
fn h2_loss_scales_quadratically_and_reaches_the_flow() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h1 = random(&mut rng, &[1, 2, 4, 4]);
    let h2 = random(&mut rng, &[1, 2, 4, 4]);
    let vis = [true, true];
    let run = |a: &Tensor, b: &Tensor| {
        let mut g = Graph::new();
        let av = g.constant(a.clone());
        let bv = g.constant(b.clone());
        let l = mse_h2(&mut g, av, bv, &vis).unwrap();
        g.scalar(l)
    };
    assert_eq!(run(&h1, &h1), 0.0);
    let doubled = Tensor::from_fn(h1.shape(), |i| h2.data()[i] + 2.0 * (h1.data()[i] - h2.data()[i]));
    assert!((run(&doubled, &h2) - 4.0 * run(&h1, &h2)).abs() <= 1e-12);

    // The learnable heatmap is a function of the flow; its parameters must get exact gradients.
    let mut flow = Flow::new(&mut Init::new(2), "flow", 2);
    let target = random(&mut rng, &[4, 1]);
    let report = grad_check_module(
        |g, f: &Flow, _| {
            let x = g.constant(Tensor::new(vec![4, 1], vec![0.3, -0.8, 1.1, 0.0]).unwrap());
            let y = g.constant(Tensor::new(vec![4, 1], vec![0.5, 0.2, -0.4, 1.3]).unwrap());
            let lp = f.log_prob(g, [x, y])?;
            let h = g.exp(lp);
            let h = g.reshape(h, &[1, 1, 2, 2])?;
            let t = g.constant(target.clone().reshape(&[1, 1, 2, 2])?);
            mse_h2(g, t, h, &[true])
        },
        &mut flow,
        &[],
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passes(DEFAULT_TOLERANCE), "{}", report.max_error());
}

#[test]
fn combined_loss_endpoints() {
    let l = combined_loss(0.123, 4.56, 0.0).unwrap();
    assert_eq!(l.total, 0.123);
    let l = combined_loss(0.123, 4.56, 1.0).unwrap();
    assert_eq!(l.total, 4.56);
    assert!((combined_loss(2.0, 4.0, 0.3).unwrap().total - 2.6).abs() <= 1e-15);
}

fn anno(joints: Vec<[f64; 2]>, norm: f64) -> KeypointAnnotation {
    let n = joints.len();
    KeypointAnnotation {
        image_id: "a".into(),
        joints,
        visible: vec![true; n],
        norm_head: Some(norm),
        norm_torso: Some(norm),
        center: [0.0, 0.0],
        scale: 1.0,
    }
}

#[test]
fn pck_threshold_is_inclusive() {
    let a = anno(vec![[0.0, 0.0]], 10.0);
    let r = pck(&[vec![[3.0, 4.0]]], std::slice::from_ref(&a), 0.5, Norm::Head).unwrap();
    assert_eq!(r.per_joint, [Some(1.0)]);
    let r = pck(&[vec![[3.0, 4.0001]]], &[a], 0.5, Norm::Head).unwrap();
    assert_eq!(r.per_joint, [Some(0.0)]);
}

#[test]
fn perfect_predictions_score_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let annos: Vec<_> = (0..10)
        .map(|_| {
            anno(
                (0..16)
                    .map(|_| [rng.random_range(0.0..64.0), rng.random_range(0.0..64.0)])
                    .collect(),
                5.0,
            )
        })
        .collect();
    let preds: Vec<_> = annos.iter().map(|a| a.joints.clone()).collect();
    let r = pck(&preds, &annos, 0.2, Norm::Torso).unwrap();
    assert!(r.per_joint.iter().all(|v| *v == Some(1.0)));
    assert_eq!(r.mean, 1.0);
}

#[test]
fn learning_rate_milestones() {
    let cfg = RunConfig::default();
    assert_eq!(cfg.lr_at(0), 1e-3);
    assert_eq!(cfg.lr_at(169), 1e-3);
    assert_eq!(cfg.lr_at(170), 1e-4);
    assert_eq!(cfg.lr_at(199), 1e-4);
    assert_eq!(cfg.lr_at(200), 1e-5);
    assert_eq!(cfg.lr_at(260), 1e-5);
}

fn tiny(n: usize) -> RunConfig {
    RunConfig {
        dataset: DatasetSpec::Synthetic { n },
        ..RunConfig::default()
    }
}

fn first_batch(cfg: &RunConfig, n: usize) -> sadi_core::train::Batch {
    let data = build_data(cfg).unwrap();
    let enc = GaussianEncodeConfig::new(cfg.sigma_px, cfg.heatmap_size()).unwrap();
    let prepared: Vec<_> = data.train.iter().take(n).map(|s| prepare(s, &enc)).collect();
    stack_batch(&prepared.iter().collect::<Vec<_>>()).unwrap()
}

fn flat(m: &Model) -> Vec<u64> {
    let mut v = Vec::new();
    m.visit(&mut |p| v.extend(p.value.data().iter().map(|x| x.to_bits())));
    v
}

#[test]
fn same_seed_and_data_give_identical_trajectories() {
    let cfg = tiny(4);
    let batch = first_batch(&cfg, 4);
    let run = || {
        let mut model = Model::from_run(&cfg).unwrap();
        let mut adam = Adam::default();
        let mut losses = Vec::new();
        for step in 0..2 {
            losses.push(train_step(&mut model, &mut adam, &batch, &cfg, 1e-3, step_seed(cfg.seed, step)).unwrap());
        }
        (flat(&model), losses)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(la, lb);
    assert!(a == b);
}

#[test]
fn single_sample_overfits() {
    // Four channels are too narrow to memorise an image in 200 steps; eight are enough.
    let cfg = RunConfig { channels: 8, ..tiny(1) };
    let batch = first_batch(&cfg, 1);
    let mut model = Model::from_run(&cfg).unwrap();
    let mut adam = Adam::default();
    let first = train_step(&mut model, &mut adam, &batch, &cfg, 1e-3, step_seed(0, 0))
        .unwrap()
        .total;
    let mut last = first;
    for step in 1..200 {
        last = train_step(&mut model, &mut adam, &batch, &cfg, 1e-3, step_seed(0, step))
            .unwrap()
            .total;
    }
    assert!(last < 0.1 * first, "initial {first}, after 200 steps {last}");
}

#[test]
fn checkpoint_round_trip() {
    let cfg = RunConfig { seed: 17, ..tiny(2) };
    let model = Model::from_run(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&path, &cfg, &model).unwrap();
    let (cfg2, model2) = checkpoint::load(&path).unwrap();
    assert_eq!(cfg2.to_text(), cfg.to_text());
    assert!(flat(&model) == flat(&model2));

    let elsewhere = RunConfig {
        out: "somewhere/else".into(),
        ..cfg.clone()
    };
    assert!(checkpoint::to_bytes(&cfg, &model) == checkpoint::to_bytes(&elsewhere, &model));

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() / 2);
    assert!(checkpoint::parse(&bytes).is_err());
}
