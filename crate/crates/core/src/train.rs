//! Data preparation, the optimization loop and its on-disk logs.
//!
//! A run directory holds `config.txt`, `loss_log.csv`, `lr_log.csv`,
//! `metrics.csv` and `model.ckpt`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::HeatmapStack;
use crate::checkpoint;
use crate::config::{DatasetSpec, RunConfig};
use crate::data::{
    augment, decode_to_image, encode_annotation, load_dataset, synth_range, AugmentRanges, GaussianEncodeConfig,
    KeypointAnnotation, Sample, SynthConfig,
};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::LossBreakdown;
use crate::metrics::{evaluate, JointLayout, Metric, PckResult};
use crate::model::Model;
use crate::optim::Adam;
use crate::tensor::{Module, Tensor};

/// Consecutive non-finite steps tolerated before a run is aborted.
pub const MAX_NON_FINITE_STEPS: usize = 3;

/// Images handed to evaluation per forward pass.
const EVAL_BATCH: usize = 16;

pub struct Data {
    pub train: Vec<Sample>,
    pub heldout: Vec<Sample>,
}

/// Training and held-out samples for a run.
///
/// Synthetic held-out samples continue the training indices; annotation
/// files are split with the last records held out.
pub fn build_data(cfg: &RunConfig) -> Result<Data> {
    let (train, heldout) = match &cfg.dataset {
        DatasetSpec::Synthetic { n } => {
            let synth = SynthConfig::new(cfg.image_size, cfg.joints);
            let train = synth_range(&synth, cfg.seed, 0, *n)?;
            let heldout = synth_range(&synth, cfg.seed, *n, cfg.heldout_count(*n))?;
            (train, heldout)
        }
        DatasetSpec::Annotations(path) => {
            let (mut all, report) = load_dataset(path)?;
            for (i, e) in &report.errors {
                eprintln!("warning: {}: record {i} skipped: {e}", path.display());
            }
            if all.len() < 2 {
                return Err(Error::Config(format!(
                    "{} has fewer than two usable records",
                    path.display()
                )));
            }
            let held = cfg.heldout_count(all.len()).min(all.len() - 1);
            let heldout = all.split_off(all.len() - held);
            (all, heldout)
        }
    };
    for s in train.iter().chain(&heldout) {
        check_sample(cfg, s)?;
    }
    Ok(Data { train, heldout })
}

fn check_sample(cfg: &RunConfig, s: &Sample) -> Result<()> {
    if s.anno.num_joints() != cfg.joints {
        return Err(Error::Config(format!(
            "sample '{}' has {} joints, the model predicts {}",
            s.anno.image_id,
            s.anno.num_joints(),
            cfg.joints
        )));
    }
    let shape = s.image.shape();
    if shape != [3, cfg.image_size, cfg.image_size] {
        return Err(Error::Config(format!(
            "sample '{}' image is {:?}, expected [3, {2}, {2}]",
            s.anno.image_id, shape, cfg.image_size
        )));
    }
    Ok(())
}

/// A sample with its encoded target.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub image: Tensor,
    pub target: Tensor,
    pub visible: Vec<bool>,
}

pub fn prepare(sample: &Sample, enc: &GaussianEncodeConfig) -> Prepared {
    let (target, visible) = encode_annotation(&sample.anno, sample.image_size(), enc);
    Prepared {
        image: sample.image.clone(),
        target,
        visible,
    }
}

pub struct Batch {
    /// `[N, 3, W, W]`
    pub images: Tensor,
    /// `[N, J, S, S]`
    pub targets: Tensor,
    /// Indexed `n * J + j`.
    pub visible: Vec<bool>,
}

pub fn stack_batch(items: &[&Prepared]) -> Result<Batch> {
    if items.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let stack = |ts: Vec<&Tensor>| -> Result<Tensor> {
        let mut shape = vec![ts.len()];
        shape.extend_from_slice(ts[0].shape());
        let mut data = Vec::with_capacity(ts.len() * ts[0].numel());
        for t in &ts {
            if t.shape() != ts[0].shape() {
                return Err(Error::Invalid(format!(
                    "batch mixes shapes {:?} and {:?}",
                    ts[0].shape(),
                    t.shape()
                )));
            }
            data.extend_from_slice(t.data());
        }
        Tensor::new(shape, data)
    };
    Ok(Batch {
        images: stack(items.iter().map(|p| &p.image).collect())?,
        targets: stack(items.iter().map(|p| &p.target).collect())?,
        visible: items.iter().flat_map(|p| p.visible.iter().copied()).collect(),
    })
}

/// Seed for the flow moment estimate of a given optimizer step.
pub fn step_seed(seed: u64, step: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ step.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// One forward/backward/update. Nothing is updated when the loss or any
/// gradient is non-finite.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &Batch,
    cfg: &RunConfig,
    lr: f64,
    seed: u64,
) -> Result<LossBreakdown> {
    let moments = model.flow_moments(seed)?;
    let mut g = Graph::new();
    let image = g.constant(batch.images.clone());
    let target = g.constant(batch.targets.clone());
    let out = model.forward(&mut g, image, &moments)?;
    let (loss, breakdown) = model.loss(&mut g, &out, target, &batch.visible, cfg.chi)?;
    if !breakdown.total.is_finite() {
        g.check_finite()?;
        return Err(Error::NonFinite {
            node: loss.id(),
            op: g.op_name(loss),
        });
    }
    g.backward(loss)?;
    g.store_grads(model);
    let mut bad = None;
    model.visit(&mut |p| {
        if bad.is_none()
            && p.value
                .grad
                .as_ref()
                .is_some_and(|gr| gr.iter().any(|v| !v.is_finite()))
        {
            bad = Some(p.name.clone());
        }
    });
    if let Some(name) = bad {
        model.visit_mut(&mut |p| p.value.grad = None);
        let origin = g
            .last_non_finite_grad()
            .map_or(String::new(), |(node, op)| format!(" (from node {node}, {op})"));
        return Err(Error::Diverged(format!("non-finite gradient for '{name}'{origin}")));
    }
    adam.step(model, lr);
    Ok(breakdown)
}

/// Image-frame keypoints from the final backbone stack.
pub fn predict_keypoints(model: &Model, images: &[&Tensor]) -> Result<Vec<Vec<[f64; 2]>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let size = chunk[0].shape()[2];
        let mut data = Vec::new();
        for t in chunk {
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![chunk.len()];
        shape.extend_from_slice(chunk[0].shape());
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(shape, data)?);
        let h = model.predict(&mut g, x)?;
        let h = g.value(h);
        for n in 0..chunk.len() {
            out.push(decode_to_image(&HeatmapStack::from_batch(h, n)?, size));
        }
    }
    Ok(out)
}

pub fn evaluate_model(model: &Model, samples: &[Sample], metric: Metric) -> Result<PckResult> {
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let preds = predict_keypoints(model, &images)?;
    let annos: Vec<KeypointAnnotation> = samples.iter().map(|s| s.anno.clone()).collect();
    evaluate(&preds, &annos, metric)
}

#[derive(Debug, Clone)]
pub struct EpochReport {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub heldout: PckResult,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub out: PathBuf,
    pub epochs: Vec<EpochReport>,
    pub model: Model,
}

impl TrainSummary {
    /// Held-out score after the last epoch.
    pub fn final_score(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.heldout.mean)
    }
}

pub const LOSS_LOG: &str = "loss_log.csv";
pub const LR_LOG: &str = "lr_log.csv";
pub const METRICS_CSV: &str = "metrics.csv";
pub const CHECKPOINT: &str = "model.ckpt";
pub const CONFIG_TXT: &str = "config.txt";

fn lr_log(cfg: &RunConfig) -> String {
    let mut s = String::from("epoch,lr\n");
    for e in 0..cfg.epochs {
        let _ = writeln!(s, "{e},{}", cfg.lr_at(e));
    }
    s
}

/// Writes the config and learning-rate log without any compute.
pub fn schedule_dry_run(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join(CONFIG_TXT), cfg.to_text())?;
    fs::write(cfg.out.join(LR_LOG), lr_log(cfg))?;
    Ok(cfg.out.clone())
}

fn metric_rows(s: &mut String, epoch: usize, split: &str, r: &PckResult, metric: Metric, names: &[String]) {
    for (name, v) in names.iter().zip(&r.per_joint) {
        let v = v.map_or_else(|| "nan".to_string(), |v| v.to_string());
        let _ = writeln!(s, "{epoch},{split},{name},{},{},{v}", metric.name(), metric.threshold);
    }
    let _ = writeln!(
        s,
        "{epoch},{split},mean,{},{},{}",
        metric.name(),
        metric.threshold,
        r.mean
    );
}

/// Reads the `(l_h1, l_h2, chi, total)` rows of a loss log.
pub fn read_loss_log(path: impl AsRef<Path>) -> Result<Vec<LossBreakdown>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let num = |i: usize| -> Result<f64> {
            f.get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format(format!("bad loss log line '{line}'")))
        };
        rows.push(LossBreakdown {
            l_h1: num(3)?,
            l_h2: num(4)?,
            chi: num(5)?,
            total: num(6)?,
        });
    }
    Ok(rows)
}

/// Reads `(epoch, lr)` pairs from a learning-rate log.
pub fn read_lr_log(path: impl AsRef<Path>) -> Result<Vec<(usize, f64)>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (e, r) = l
                .split_once(',')
                .ok_or_else(|| Error::Format(format!("bad lr log line '{l}'")))?;
            match (e.parse(), r.parse()) {
                (Ok(e), Ok(r)) => Ok((e, r)),
                _ => Err(Error::Format(format!("bad lr log line '{l}'"))),
            }
        })
        .collect()
}

/// Full training run; `progress` sees every finished epoch.
pub fn train(cfg: &RunConfig, progress: &mut dyn FnMut(&EpochReport)) -> Result<TrainSummary> {
    cfg.validate()?;
    let data = build_data(cfg)?;
    let mut model = Model::from_run(cfg)?;
    train_model(cfg, &data, &mut model, progress)?.finish(cfg, model)
}

struct Logs {
    epochs: Vec<EpochReport>,
}

impl Logs {
    fn finish(self, cfg: &RunConfig, model: Model) -> Result<TrainSummary> {
        checkpoint::save(cfg.out.join(CHECKPOINT), cfg, &model)?;
        Ok(TrainSummary {
            out: cfg.out.clone(),
            epochs: self.epochs,
            model,
        })
    }
}

fn train_model(
    cfg: &RunConfig,
    data: &Data,
    model: &mut Model,
    progress: &mut dyn FnMut(&EpochReport),
) -> Result<Logs> {
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join(CONFIG_TXT), cfg.to_text())?;
    fs::write(cfg.out.join(LR_LOG), lr_log(cfg))?;
    let enc = GaussianEncodeConfig::new(cfg.sigma_px, cfg.heatmap_size())?;
    let base: Vec<Prepared> = data.train.iter().map(|s| prepare(s, &enc)).collect();
    let names = JointLayout::for_joints(cfg.joints).names(cfg.joints);
    let ranges = AugmentRanges::default();

    let mut loss_log = String::from("epoch,step,lr,l_h1,l_h2,chi,total\n");
    let mut metrics = String::from("epoch,split,joint,metric,threshold,value\n");
    let mut adam = Adam::default();
    let mut order: Vec<usize> = (0..base.len()).collect();
    let mut step = 0u64;
    let mut bad_steps = 0;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut loss_count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch) {
            let augmented: Vec<Prepared>;
            let items: Vec<&Prepared> = if cfg.augment {
                augmented = chunk
                    .iter()
                    .map(|&i| {
                        let (s, _) = augment(&data.train[i], &ranges, step_seed(cfg.seed ^ i as u64, step));
                        prepare(&s, &enc)
                    })
                    .collect();
                augmented.iter().collect()
            } else {
                chunk.iter().map(|&i| &base[i]).collect()
            };
            let batch = stack_batch(&items)?;
            match train_step(model, &mut adam, &batch, cfg, lr, step_seed(cfg.seed, step)) {
                Ok(b) => {
                    bad_steps = 0;
                    loss_sum += b.total;
                    loss_count += 1;
                    let _ = writeln!(
                        loss_log,
                        "{epoch},{step},{lr},{},{},{},{}",
                        b.l_h1, b.l_h2, b.chi, b.total
                    );
                }
                Err(e @ (Error::NonFinite { .. } | Error::Diverged(_))) => {
                    bad_steps += 1;
                    let _ = writeln!(loss_log, "{epoch},{step},{lr},nan,nan,nan,nan");
                    if bad_steps >= MAX_NON_FINITE_STEPS {
                        fs::write(cfg.out.join(LOSS_LOG), &loss_log)?;
                        return Err(Error::Diverged(format!(
                            "{MAX_NON_FINITE_STEPS} consecutive non-finite steps, last at step {step}: {e}"
                        )));
                    }
                }
                Err(e) => return Err(e),
            }
            step += 1;
        }
        let heldout = evaluate_model(model, &data.heldout, cfg.metric)?;
        metric_rows(&mut metrics, epoch, "heldout", &heldout, cfg.metric, &names);
        fs::write(cfg.out.join(LOSS_LOG), &loss_log)?;
        fs::write(cfg.out.join(METRICS_CSV), &metrics)?;
        let report = EpochReport {
            epoch,
            lr,
            mean_loss: if loss_count > 0 {
                loss_sum / loss_count as f64
            } else {
                f64::NAN
            },
            heldout,
        };
        progress(&report);
        epochs.push(report);
    }
    Ok(Logs { epochs })
}
