//! The `sadi` command line.
//!
//! Settings resolve in order: built-in defaults, the `--config` file,
//! `SADI_SEED`, then individual flags and `--set key=value` overrides.
//! Exit codes: 0 success, 1 invalid input or configuration, 2 numerical failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use sadi_core::ablate::{impulse_extent, run_ablation, Recipe};
use sadi_core::checkpoint;
use sadi_core::data::{save_annotations, save_png, synth_range, KeypointAnnotation, SynthConfig};
use sadi_core::gradcheck::GradCheckOptions;
use sadi_core::gradsuite::{default_tolerance, format_report, run_suite};
use sadi_core::graph::Graph;
use sadi_core::metrics::{evaluate, format_table, table_row, JointLayout, Metric, PckResult, TABLE_COLUMNS};
use sadi_core::train::{build_data, predict_keypoints, schedule_dry_run, train, Data};
use sadi_core::{Error, Module, Result, RunConfig, Sample, Tensor};

#[derive(Debug, Parser)]
#[command(name = "sadi", version, about = "Dilated-attention heatmap pose estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write logs, metrics and a checkpoint to the output directory.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Only write the learning-rate schedule; no training.
        #[arg(long)]
        dry_run: bool,
    },
    /// Score a checkpoint on a dataset and print the per-column table.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck {
        /// Only cases whose name contains this string.
        #[arg(long, default_value = "all")]
        scope: String,
        #[arg(long)]
        tolerance: Option<f64>,
        /// Perturb the backward rule of this primitive (for testing the suite).
        #[arg(long)]
        fault: Option<String>,
        /// Probe at most this many coordinates per tensor.
        #[arg(long)]
        max_probes: Option<usize>,
    },
    /// Train two paired arms over several seeds and compare them.
    Ablate {
        #[arg(long)]
        recipe: String,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Print a configuration or checkpoint summary; optionally dump heatmaps.
    Inspect {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
        /// Write input, backbone and learned heatmaps of held-out samples as PNGs here.
        #[arg(long)]
        dump: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        samples: usize,
    },
    /// Render a procedural dataset as PNGs plus an annotation file.
    Synth {
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        joints: usize,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args, Default)]
pub struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of procedural training samples.
    #[arg(long)]
    pub synthetic: Option<usize>,
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    #[arg(long)]
    pub joints: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub stacks: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub dilation: Option<usize>,
    /// `sigma`, `fixed:<v>`, `swapped` or `sum`.
    #[arg(long)]
    pub chi_mode: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        cfg.apply_env()?;
        let flags: [(&str, Option<String>); 10] = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("synthetic", self.synthetic.map(|v| v.to_string())),
            (
                "annotations",
                self.annotations.as_ref().map(|p| p.display().to_string()),
            ),
            ("joints", self.joints.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("stacks", self.stacks.map(|v| v.to_string())),
            ("channels", self.channels.map(|v| v.to_string())),
            ("dilation", self.dilation.map(|v| v.to_string())),
            ("chi_mode", self.chi_mode.clone()),
            ("out", self.out.as_ref().map(|p| p.display().to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Evaluate on this annotation file instead of the checkpoint's held-out split.
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Evaluate on this many fresh procedural samples.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// `pckh0.5` or `pck0.2` (any threshold).
    #[arg(long)]
    pub metric: Option<String>,
    /// Score the annotations against themselves instead of the model.
    #[arg(long)]
    pub ground_truth: bool,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Train { config, dry_run } => cmd_train(&config.resolve()?, dry_run),
        Command::Eval(a) => cmd_eval(&a),
        Command::Gradcheck {
            scope,
            tolerance,
            fault,
            max_probes,
        } => cmd_gradcheck(&scope, tolerance, fault.as_deref(), max_probes),
        Command::Ablate { recipe, seeds, config } => cmd_ablate(recipe.parse()?, seeds, &config.resolve()?),
        Command::Inspect {
            checkpoint,
            config,
            dump,
            samples,
        } => cmd_inspect(checkpoint.as_deref(), &config, dump.as_deref(), samples),
        Command::Synth {
            n,
            joints,
            image_size,
            seed,
            out,
        } => cmd_synth(n, joints, image_size, seed, &out),
    }
}

fn cmd_train(cfg: &RunConfig, dry_run: bool) -> Result<i32> {
    if dry_run {
        let out = schedule_dry_run(cfg)?;
        println!("wrote schedule for {} epochs to {}", cfg.epochs, out.display());
        return Ok(0);
    }
    let t = Instant::now();
    let summary = train(cfg, &mut |r| {
        println!(
            "epoch {:>3}  lr {:<8}  loss {:.6}  heldout {} {:.4}  {:.0}s",
            r.epoch,
            r.lr,
            r.mean_loss,
            cfg.metric,
            r.heldout.mean,
            t.elapsed().as_secs_f64()
        );
    })?;
    println!(
        "final {} {:.4}; outputs in {}",
        cfg.metric,
        summary.final_score(),
        summary.out.display()
    );
    Ok(0)
}

fn eval_samples(cfg: &RunConfig, a: &EvalArgs) -> Result<Vec<Sample>> {
    if let Some(path) = &a.annotations {
        let (samples, report) = sadi_core::data::load_dataset(path)?;
        for (i, e) in &report.errors {
            eprintln!("warning: {}: record {i} skipped: {e}", path.display());
        }
        return Ok(samples);
    }
    if let Some(n) = a.synthetic {
        let synth = SynthConfig::new(cfg.image_size, cfg.joints);
        let offset = cfg.train_count().unwrap_or(0) + cfg.heldout_count(cfg.train_count().unwrap_or(0));
        return synth_range(&synth, cfg.seed, offset, n);
    }
    let Data { heldout, .. } = build_data(cfg)?;
    Ok(heldout)
}

pub fn eval_csv(r: &PckResult, layout: JointLayout, metric: Metric) -> String {
    let mut s = String::from("metric,threshold,column,value\n");
    for (c, v) in TABLE_COLUMNS.iter().zip(table_row(r, layout)) {
        let v = v.map_or_else(|| "nan".to_string(), |v| v.to_string());
        let _ = writeln!(s, "{},{},{c},{v}", metric.name(), metric.threshold);
    }
    for (name, v) in layout.names(r.per_joint.len()).iter().zip(&r.per_joint) {
        let v = v.map_or_else(|| "nan".to_string(), |v| (100.0 * v).to_string());
        let _ = writeln!(s, "{},{},joint:{name},{v}", metric.name(), metric.threshold);
    }
    s
}

fn cmd_eval(a: &EvalArgs) -> Result<i32> {
    let (cfg, model) = checkpoint::load(&a.checkpoint)?;
    let metric: Metric = match &a.metric {
        Some(m) => m.parse()?,
        None => cfg.metric,
    };
    let samples = eval_samples(&cfg, a)?;
    if samples.is_empty() {
        return Err(Error::Config("no samples to evaluate".into()));
    }
    for s in &samples {
        if s.anno.num_joints() != model.joints() {
            return Err(Error::Config(format!(
                "sample '{}' has {} joints but the checkpoint predicts {}",
                s.anno.image_id,
                s.anno.num_joints(),
                model.joints()
            )));
        }
    }
    let annos: Vec<KeypointAnnotation> = samples.iter().map(|s| s.anno.clone()).collect();
    let preds = if a.ground_truth {
        annos.iter().map(|a| a.joints.clone()).collect()
    } else {
        let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
        predict_keypoints(&model, &images)?
    };
    let r = evaluate(&preds, &annos, metric)?;
    let layout = JointLayout::for_joints(model.joints());
    print!("{}", format_table(&r, layout, &metric.to_string()));
    if r.excluded > 0 {
        println!(
            "{} samples without a {} length were excluded",
            r.excluded,
            metric.name()
        );
    }
    if let Some(p) = &a.csv {
        fs::write(p, eval_csv(&r, layout, metric))?;
    }
    Ok(0)
}

fn cmd_gradcheck(scope: &str, tolerance: Option<f64>, fault: Option<&str>, max_probes: Option<usize>) -> Result<i32> {
    let tol = tolerance.unwrap_or_else(default_tolerance);
    let fault = match fault {
        None => None,
        Some(f) => Some(
            *sadi_core::graph::OP_NAMES
                .iter()
                .find(|&&o| o == f)
                .ok_or_else(|| Error::Config(format!("unknown primitive '{f}'")))?,
        ),
    };
    let opts = GradCheckOptions {
        fault,
        max_probes,
        ..Default::default()
    };
    let filter = (scope != "all").then_some(scope);
    let results = run_suite(filter, &opts);
    if results.is_empty() {
        return Err(Error::Config(format!("no gradient case matches '{scope}'")));
    }
    print!("{}", format_report(&results, tol));
    Ok(if results.iter().all(|r| r.passed(tol)) { 0 } else { 2 })
}

fn cmd_ablate(recipe: Recipe, seeds: usize, cfg: &RunConfig) -> Result<i32> {
    let report = run_ablation(recipe, cfg, seeds, &mut |arm, seed, r| {
        println!(
            "{arm} seed {seed} epoch {:>3} {} {:.4}",
            r.epoch, cfg.metric, r.heldout.mean
        );
    })?;
    let text = report.format(&cfg.metric.to_string());
    print!("{text}");
    fs::create_dir_all(cfg.out.join(recipe.to_string()))?;
    fs::write(cfg.out.join(recipe.to_string()).join("ablation.txt"), text)?;
    Ok(0)
}

fn gray(map: &[f64], size: usize) -> Tensor {
    let hi = map.iter().cloned().fold(f64::MIN, f64::max);
    let lo = map.iter().cloned().fold(f64::MAX, f64::min);
    let span = if hi > lo { hi - lo } else { 1.0 };
    Tensor::from_fn(&[3, size, size], |k| (map[k % (size * size)] - lo) / span)
}

/// Per-pixel maximum over joints of sample `n` in a `[N,J,S,S]` tensor.
fn joint_max(t: &Tensor, n: usize) -> Vec<f64> {
    let s = t.shape();
    let hw = s[2] * s[3];
    let base = n * s[1] * hw;
    (0..hw)
        .map(|p| (0..s[1]).map(|j| t.data()[base + j * hw + p]).fold(f64::MIN, f64::max))
        .collect()
}

fn cmd_inspect(ckpt: Option<&Path>, args: &ConfigArgs, dump: Option<&Path>, samples: usize) -> Result<i32> {
    let (cfg, model) = match ckpt {
        Some(p) => checkpoint::load(p)?,
        None => {
            let cfg = args.resolve()?;
            let model = sadi_core::Model::from_run(&cfg)?;
            (cfg, model)
        }
    };
    print!("{}", cfg.to_text());
    let mut groups: Vec<(String, usize)> = Vec::new();
    for p in model.params() {
        let top = p.name.split('.').next().unwrap_or("").to_string();
        match groups.iter_mut().find(|(g, _)| *g == top) {
            Some((_, n)) => *n += p.value.numel(),
            None => groups.push((top, p.value.numel())),
        }
    }
    println!("parameters {}", model.num_params());
    for (g, n) in &groups {
        println!("  {g:<12} {n}");
    }
    println!("unit impulse extent {}", impulse_extent(cfg.hourglass().unit)?);
    if let Some(dir) = dump {
        fs::create_dir_all(dir)?;
        let data = build_data(&cfg)?;
        let take = samples.min(data.heldout.len());
        let moments = model.flow_moments(cfg.seed)?;
        for (i, s) in data.heldout.iter().take(take).enumerate() {
            let mut g = Graph::new();
            let mut shape = vec![1];
            shape.extend_from_slice(s.image.shape());
            let x = g.constant(s.image.clone().reshape(&shape)?);
            let out = model.forward(&mut g, x, &moments)?;
            let size = model.heatmap_size();
            save_png(&s.image, dir.join(format!("sample{i}_image.png")))?;
            let h1 = g.value(*out.h1.last().expect("one stack"));
            save_png(&gray(&joint_max(h1, 0), size), dir.join(format!("sample{i}_h1.png")))?;
            if let Some(h2) = out.h2 {
                save_png(
                    &gray(&joint_max(g.value(h2), 0), size),
                    dir.join(format!("sample{i}_h2.png")),
                )?;
            }
        }
        println!("wrote {take} samples to {}", dir.display());
    }
    Ok(0)
}

fn cmd_synth(n: usize, joints: usize, image_size: usize, seed: u64, out: &Path) -> Result<i32> {
    if n == 0 {
        return Err(Error::Config("--n must be >= 1".into()));
    }
    let cfg = SynthConfig::new(image_size, joints);
    let samples = synth_range(&cfg, seed, 0, n)?;
    fs::create_dir_all(out)?;
    for s in &samples {
        save_png(&s.image, out.join(format!("{}.png", s.anno.image_id)))?;
    }
    let annos: Vec<KeypointAnnotation> = samples.into_iter().map(|s| s.anno).collect();
    save_annotations(out.join("annotations.json"), &annos)?;
    println!("wrote {n} samples to {}", out.display());
    Ok(0)
}
