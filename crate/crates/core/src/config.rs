//! Run configuration: a flat `key = value` file plus overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::backbone::HourglassConfig;
use crate::dlm::{DensityConfig, MixtureKind, DEFAULT_FLOW_LAYERS, DEFAULT_MOMENT_SAMPLES, MIN_MOMENT_SAMPLES};
use crate::error::{Error, Result};
use crate::losses::ChiSetting;
use crate::metrics::Metric;
use crate::nn::{UnitConfig, UnitKind, DEFAULT_DILATION, DEFAULT_SE_REDUCTION};
use crate::sfm::LocalAxis;

pub const SEED_ENV: &str = "SADI_SEED";

/// Where training samples come from.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    /// `n` procedural training samples; the held-out split follows them.
    Synthetic { n: usize },
    /// An annotation JSON file with PNGs alongside.
    Annotations(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub stacks: usize,
    pub depth: usize,
    pub channels: usize,
    pub joints: usize,
    pub image_size: usize,
    pub unit: UnitKind,
    pub dilation: usize,
    pub se_reduction: usize,
    /// Spatial fusion and distribution learning modules enabled.
    pub fusion: bool,
    pub flow_layers: usize,
    pub local_axis: LocalAxis,
    pub jacobian: bool,
    pub mixture: MixtureKind,
    pub moment_samples: usize,
    /// Target Gaussian spread in heatmap cells.
    pub sigma_px: f64,
    pub chi: ChiSetting,
    pub lr: Vec<f64>,
    pub lr_milestones: Vec<usize>,
    pub epochs: usize,
    pub batch: usize,
    pub dataset: DatasetSpec,
    /// Held-out samples; `None` means one fifth of the training count.
    pub heldout: Option<usize>,
    pub augment: bool,
    pub metric: Metric,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            stacks: 2,
            depth: 4,
            channels: 4,
            joints: 4,
            image_size: 64,
            unit: UnitKind::Dilated,
            dilation: DEFAULT_DILATION,
            se_reduction: DEFAULT_SE_REDUCTION,
            fusion: true,
            flow_layers: DEFAULT_FLOW_LAYERS,
            local_axis: LocalAxis::Rows,
            jacobian: true,
            mixture: MixtureKind::Mixture,
            moment_samples: DEFAULT_MOMENT_SAMPLES,
            sigma_px: crate::data::DEFAULT_SIGMA,
            chi: ChiSetting::default(),
            lr: vec![1e-3, 1e-4, 1e-5],
            lr_milestones: vec![170, 200],
            epochs: 30,
            batch: 8,
            dataset: DatasetSpec::Synthetic { n: 500 },
            heldout: None,
            augment: false,
            metric: Metric::PCK_02,
            out: PathBuf::from("runs/default"),
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got '{v}'"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_num(key, s.trim()))
        .collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse_num(key, v)?,
            "stacks" => self.stacks = parse_num(key, v)?,
            "depth" => self.depth = parse_num(key, v)?,
            "channels" => self.channels = parse_num(key, v)?,
            "joints" => self.joints = parse_num(key, v)?,
            "image_size" => self.image_size = parse_num(key, v)?,
            "heatmap_size" => self.image_size = 4 * parse_num::<usize>(key, v)?,
            "unit" => {
                self.unit = match v {
                    "rfm" | "dilated" => UnitKind::Dilated,
                    "basic" | "basicblock" => UnitKind::Basic,
                    _ => return Err(Error::Config(format!("unit: expected rfm or basic, got '{v}'"))),
                }
            }
            "dilation" => self.dilation = parse_num(key, v)?,
            "se_reduction" => self.se_reduction = parse_num(key, v)?,
            "fusion" => self.fusion = parse_bool(key, v)?,
            "flow_layers" => self.flow_layers = parse_num(key, v)?,
            "local_axis" => {
                self.local_axis = match v {
                    "rows" => LocalAxis::Rows,
                    "columns" => LocalAxis::Columns,
                    _ => {
                        return Err(Error::Config(format!(
                            "local_axis: expected rows or columns, got '{v}'"
                        )))
                    }
                }
            }
            "jacobian" => self.jacobian = parse_bool(key, v)?,
            "mixture" => {
                self.mixture = match v {
                    "mixture" => MixtureKind::Mixture,
                    "sum" => MixtureKind::Sum,
                    _ => return Err(Error::Config(format!("mixture: expected mixture or sum, got '{v}'"))),
                }
            }
            "moment_samples" => self.moment_samples = parse_num(key, v)?,
            "sigma_px" => self.sigma_px = parse_num(key, v)?,
            "chi_mode" => self.chi = v.parse()?,
            "lr" => self.lr = parse_list(key, v)?,
            "lr_milestones" => self.lr_milestones = parse_list(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "batch" => self.batch = parse_num(key, v)?,
            "synthetic" => self.dataset = DatasetSpec::Synthetic { n: parse_num(key, v)? },
            "annotations" => self.dataset = DatasetSpec::Annotations(PathBuf::from(v)),
            "heldout" => self.heldout = Some(parse_num(key, v)?),
            "augment" => self.augment = parse_bool(key, v)?,
            "metric" => self.metric = v.parse()?,
            "out" => self.out = PathBuf::from(v),
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            self.set(k, v.trim().trim_matches('"'))?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(&std::fs::read_to_string(path)?)?;
        Ok(c)
    }

    /// Replaces the seed with `SADI_SEED` when that variable is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}: cannot parse '{v}'")))?;
        }
        Ok(())
    }

    pub fn heatmap_size(&self) -> usize {
        self.image_size / 4
    }

    pub fn train_count(&self) -> Option<usize> {
        match self.dataset {
            DatasetSpec::Synthetic { n } => Some(n),
            DatasetSpec::Annotations(_) => None,
        }
    }

    pub fn heldout_count(&self, train: usize) -> usize {
        self.heldout.unwrap_or((train / 5).max(1))
    }

    pub fn hourglass(&self) -> HourglassConfig {
        HourglassConfig {
            stacks: self.stacks,
            depth: self.depth,
            base_channels: self.channels,
            joints: self.joints,
            heatmap_size: self.heatmap_size(),
            unit: UnitConfig {
                kind: self.unit,
                dilation: self.dilation,
                se_reduction: self.se_reduction,
            },
        }
    }

    pub fn density(&self) -> DensityConfig {
        DensityConfig {
            jacobian: self.jacobian,
            mixture: self.mixture,
        }
    }

    /// Learning rate for a zero-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = self.lr_milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr[k.min(self.lr.len() - 1)]
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !self.image_size.is_multiple_of(4) {
            return fail(format!("image_size {} must be divisible by 4", self.image_size));
        }
        self.hourglass().validate()?;
        if self.fusion && self.depth < 4 {
            return fail(format!(
                "fusion needs depth >= 4 for four pyramid levels, got {}",
                self.depth
            ));
        }
        if self.unit == UnitKind::Dilated && self.dilation < 2 {
            return fail(format!("dilation must be >= 2, got {}", self.dilation));
        }
        if self.se_reduction == 0 {
            return fail("se_reduction must be >= 1".into());
        }
        if self.flow_layers == 0 {
            return fail("flow_layers must be >= 1".into());
        }
        if self.moment_samples < MIN_MOMENT_SAMPLES {
            return fail(format!("moment_samples must be >= {MIN_MOMENT_SAMPLES}"));
        }
        if self.sigma_px.is_nan() || self.sigma_px <= 0.0 {
            return fail(format!("sigma_px must be > 0, got {}", self.sigma_px));
        }
        if self.lr.is_empty() || self.lr.iter().any(|&l| l.is_nan() || l <= 0.0) {
            return fail("lr must be a non-empty list of positive rates".into());
        }
        if self.lr.len() != self.lr_milestones.len() + 1 {
            return fail(format!(
                "{} learning rates need {} milestones, got {}",
                self.lr.len(),
                self.lr.len() - 1,
                self.lr_milestones.len()
            ));
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return fail("lr_milestones must be strictly increasing".into());
        }
        if self.batch == 0 {
            return fail("batch must be >= 1".into());
        }
        if let DatasetSpec::Synthetic { n } = self.dataset {
            if n == 0 {
                return fail("synthetic sample count must be >= 1".into());
            }
            if self.joints > 16 {
                return fail(format!(
                    "synthetic data supports at most 16 joints, got {}",
                    self.joints
                ));
            }
        }
        Ok(())
    }

    /// Every setting as `key = value` lines, parseable by [`RunConfig::apply_text`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let unit = match self.unit {
            UnitKind::Dilated => "rfm",
            UnitKind::Basic => "basic",
        };
        let axis = match self.local_axis {
            LocalAxis::Rows => "rows",
            LocalAxis::Columns => "columns",
        };
        let mixture = match self.mixture {
            MixtureKind::Mixture => "mixture",
            MixtureKind::Sum => "sum",
        };
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "stacks = {}", self.stacks);
        let _ = writeln!(s, "depth = {}", self.depth);
        let _ = writeln!(s, "channels = {}", self.channels);
        let _ = writeln!(s, "joints = {}", self.joints);
        let _ = writeln!(s, "image_size = {}", self.image_size);
        let _ = writeln!(s, "unit = {unit}");
        let _ = writeln!(s, "dilation = {}", self.dilation);
        let _ = writeln!(s, "se_reduction = {}", self.se_reduction);
        let _ = writeln!(s, "fusion = {}", self.fusion);
        let _ = writeln!(s, "flow_layers = {}", self.flow_layers);
        let _ = writeln!(s, "local_axis = {axis}");
        let _ = writeln!(s, "jacobian = {}", self.jacobian);
        let _ = writeln!(s, "mixture = {mixture}");
        let _ = writeln!(s, "moment_samples = {}", self.moment_samples);
        let _ = writeln!(s, "sigma_px = {}", self.sigma_px);
        let _ = writeln!(s, "chi_mode = {}", self.chi);
        let _ = writeln!(s, "lr = {}", join(&self.lr));
        let _ = writeln!(s, "lr_milestones = {}", join(&self.lr_milestones));
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch = {}", self.batch);
        match &self.dataset {
            DatasetSpec::Synthetic { n } => {
                let _ = writeln!(s, "synthetic = {n}");
            }
            DatasetSpec::Annotations(p) => {
                let _ = writeln!(s, "annotations = {}", p.display());
            }
        }
        if let Some(h) = self.heldout {
            let _ = writeln!(s, "heldout = {h}");
        }
        let _ = writeln!(s, "augment = {}", self.augment);
        let _ = writeln!(s, "metric = {}", self.metric);
        let _ = writeln!(s, "out = {}", self.out.display());
        s
    }
}
