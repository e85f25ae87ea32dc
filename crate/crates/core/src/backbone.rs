//! Stacked hourglass backbone built from [`Unit`]s.
//!
//! Each stack runs a recursive down/up hourglass; the up path adds
//! same-scale skip features. The encoder features at the first four scales
//! are exposed as the pyramid `F1..F4` for the spatial fusion module.

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::init::Init;
use crate::nn::{Conv2d, ConvSpec, Unit, UnitConfig};
use crate::tensor::{Module, Param, Tensor};

/// Number of pyramid levels handed to the fusion module.
pub const PYRAMID_LEVELS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HourglassConfig {
    pub stacks: usize,
    /// Number of down/up levels.
    pub depth: usize,
    /// Channels at the finest scale; level `n` uses `base << min(n, 3)`.
    pub base_channels: usize,
    pub joints: usize,
    /// Heatmap extent; the input image is four times larger.
    pub heatmap_size: usize,
    pub unit: UnitConfig,
}

impl Default for HourglassConfig {
    fn default() -> Self {
        Self {
            stacks: 2,
            depth: 4,
            base_channels: 64,
            joints: 16,
            heatmap_size: 64,
            unit: UnitConfig::default(),
        }
    }
}

impl HourglassConfig {
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level.min(PYRAMID_LEVELS - 1)
    }

    pub fn input_size(&self) -> usize {
        4 * self.heatmap_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.stacks == 0 || self.depth == 0 || self.base_channels == 0 || self.joints == 0 {
            return Err(Error::Config("stacks, depth, channels and joints must be >= 1".into()));
        }
        if !self.heatmap_size.is_multiple_of(1 << self.depth) {
            return Err(Error::Config(format!(
                "heatmap size {} is not divisible by 2^depth = {}",
                self.heatmap_size,
                1 << self.depth
            )));
        }
        Ok(())
    }
}

/// `relu(conv7x7/2) -> unit -> maxpool2 -> unit`, taking the image to heatmap resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Stem {
    pub conv: Conv2d,
    pub unit1: Unit,
    pub unit2: Unit,
    pub input_size: usize,
}

impl Stem {
    pub fn new(init: &mut Init, cfg: &HourglassConfig) -> Self {
        let c = cfg.channels(0);
        let mut spec = ConvSpec::same(3, c, 7, 1).strided(2);
        spec.padding = 3;
        Self {
            conv: Conv2d::new(init, "stem.conv", spec),
            unit1: Unit::new(init, "stem.unit1", c, c, cfg.unit),
            unit2: Unit::new(init, "stem.unit2", c, c, cfg.unit),
            input_size: cfg.input_size(),
        }
    }

    pub fn forward(&self, g: &mut Graph, image: Var) -> Result<Var> {
        let s = g.shape(image);
        if s.len() != 4 || s[1] != 3 || s[2] != self.input_size || s[3] != self.input_size {
            return Err(shape_err(
                "stem",
                format!("expected image [N,3,{0},{0}], got {s:?}", self.input_size),
            ));
        }
        let x = self.conv.forward(g, image)?;
        let x = g.relu(x);
        let x = self.unit1.forward(g, x)?;
        let x = g.maxpool2(x)?;
        self.unit2.forward(g, x)
    }
}

impl Module for Stem {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.conv.visit(f);
        self.unit1.visit(f);
        self.unit2.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv.visit_mut(f);
        self.unit1.visit_mut(f);
        self.unit2.visit_mut(f);
    }
}

#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq)]
pub enum Inner {
    Level(Box<HourglassLevel>),
    Bottom(Unit),
}

/// One down/up level of the hourglass recursion.
#[derive(Debug, Clone, PartialEq)]
pub struct HourglassLevel {
    /// Same-scale skip branch; its output is the encoder feature of this scale.
    pub skip: Unit,
    /// Applied after pooling, widening to the next level's channels.
    pub down: Unit,
    pub inner: Inner,
    /// Narrows back to this level's channels before upsampling.
    pub up: Unit,
}

impl HourglassLevel {
    pub fn new(init: &mut Init, name: &str, cfg: &HourglassConfig, level: usize) -> Self {
        let (c, cn) = (cfg.channels(level), cfg.channels(level + 1));
        let inner = if level + 1 < cfg.depth {
            Inner::Level(Box::new(HourglassLevel::new(
                init,
                &format!("{name}.inner"),
                cfg,
                level + 1,
            )))
        } else {
            Inner::Bottom(Unit::new(init, &format!("{name}.bottom"), cn, cn, cfg.unit))
        };
        Self {
            skip: Unit::new(init, &format!("{name}.skip"), c, c, cfg.unit),
            down: Unit::new(init, &format!("{name}.down"), c, cn, cfg.unit),
            inner,
            up: Unit::new(init, &format!("{name}.up"), cn, c, cfg.unit),
        }
    }

    /// Returns the merged output; pushes this level's (and deeper) encoder features.
    pub fn forward(&self, g: &mut Graph, x: Var, features: &mut Vec<Var>) -> Result<Var> {
        let skip = self.skip.forward(g, x)?;
        features.push(skip);
        let low = g.maxpool2(x)?;
        let low = self.down.forward(g, low)?;
        let low = match &self.inner {
            Inner::Level(l) => l.forward(g, low, features)?,
            Inner::Bottom(u) => u.forward(g, low)?,
        };
        let low = self.up.forward(g, low)?;
        let up = g.upsample_nearest(low, 2)?;
        g.add(skip, up)
    }
}

impl Module for HourglassLevel {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.skip.visit(f);
        self.down.visit(f);
        match &self.inner {
            Inner::Level(l) => l.visit(f),
            Inner::Bottom(u) => u.visit(f),
        }
        self.up.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.skip.visit_mut(f);
        self.down.visit_mut(f);
        match &mut self.inner {
            Inner::Level(l) => l.visit_mut(f),
            Inner::Bottom(u) => u.visit_mut(f),
        }
        self.up.visit_mut(f);
    }
}

/// One hourglass stack with its heatmap head and (for non-final stacks) the
/// re-injection convolutions feeding the next stack.
#[derive(Debug, Clone, PartialEq)]
pub struct Stack {
    pub hourglass: HourglassLevel,
    pub post: Unit,
    pub lin: Conv2d,
    pub head: Conv2d,
    pub merge_features: Option<Conv2d>,
    pub merge_heatmaps: Option<Conv2d>,
}

impl Stack {
    pub fn new(init: &mut Init, name: &str, cfg: &HourglassConfig, last: bool) -> Self {
        let c = cfg.channels(0);
        Self {
            hourglass: HourglassLevel::new(init, &format!("{name}.hg"), cfg, 0),
            post: Unit::new(init, &format!("{name}.post"), c, c, cfg.unit),
            lin: Conv2d::new(init, &format!("{name}.lin"), ConvSpec::pointwise(c, c)),
            head: Conv2d::new(
                init,
                &format!("{name}.head"),
                ConvSpec::pointwise(c, cfg.joints).scaled(0.5),
            ),
            merge_features: (!last).then(|| {
                Conv2d::new(
                    init,
                    &format!("{name}.merge_feat"),
                    ConvSpec::pointwise(c, c).scaled(0.5),
                )
            }),
            merge_heatmaps: (!last).then(|| {
                Conv2d::new(
                    init,
                    &format!("{name}.merge_pred"),
                    ConvSpec::pointwise(cfg.joints, c).scaled(0.5),
                )
            }),
        }
    }
}

impl Module for Stack {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.hourglass.visit(f);
        self.post.visit(f);
        self.lin.visit(f);
        self.head.visit(f);
        self.merge_features.visit(f);
        self.merge_heatmaps.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.hourglass.visit_mut(f);
        self.post.visit_mut(f);
        self.lin.visit_mut(f);
        self.head.visit_mut(f);
        self.merge_features.visit_mut(f);
        self.merge_heatmaps.visit_mut(f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub cfg: HourglassConfig,
    pub stem: Stem,
    pub stacks: Vec<Stack>,
}

/// Graph handles produced by one backbone pass.
#[derive(Debug, Clone)]
pub struct BackboneOutput {
    /// Per-stack predicted heatmaps `[N, J, S, S]`, first to last.
    pub h1: Vec<Var>,
    /// Final stack encoder features `F1..F4` (finest first).
    pub pyramid: Vec<Var>,
    /// Final stack features at heatmap resolution.
    pub features: Var,
}

impl Backbone {
    pub fn new(init: &mut Init, cfg: HourglassConfig) -> Result<Self> {
        cfg.validate()?;
        let stem = Stem::new(init, &cfg);
        let stacks = (0..cfg.stacks)
            .map(|s| Stack::new(init, &format!("stack{s}"), &cfg, s + 1 == cfg.stacks))
            .collect();
        Ok(Self { cfg, stem, stacks })
    }

    pub fn forward(&self, g: &mut Graph, image: Var) -> Result<BackboneOutput> {
        let x = self.stem.forward(g, image)?;
        self.hourglass_forward(g, x)
    }

    /// Runs every stack on stem features `[N, C0, S, S]`.
    pub fn hourglass_forward(&self, g: &mut Graph, mut x: Var) -> Result<BackboneOutput> {
        let mut h1 = Vec::with_capacity(self.stacks.len());
        let mut pyramid = Vec::new();
        let mut features = x;
        for stack in &self.stacks {
            let mut feats = Vec::new();
            let y = stack.hourglass.forward(g, x, &mut feats)?;
            let y = stack.post.forward(g, y)?;
            let y = stack.lin.forward(g, y)?;
            let y = g.relu(y);
            let heat = stack.head.forward(g, y)?;
            h1.push(heat);
            if let (Some(mf), Some(mh)) = (&stack.merge_features, &stack.merge_heatmaps) {
                let a = mf.forward(g, y)?;
                let b = mh.forward(g, heat)?;
                let sum = g.add(x, a)?;
                x = g.add(sum, b)?;
            }
            feats.truncate(PYRAMID_LEVELS);
            pyramid = feats;
            features = y;
        }
        Ok(BackboneOutput { h1, pyramid, features })
    }
}

impl Module for Backbone {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.stem.visit(f);
        self.stacks.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.stem.visit_mut(f);
        self.stacks.visit_mut(f);
    }
}

/// Argmax of a `[H, W]` map; ties resolve to the lowest row, then lowest column.
pub fn argmax_2d(map: &[f64], width: usize) -> (usize, usize) {
    let mut best = 0;
    for (i, &v) in map.iter().enumerate() {
        if v > map[best] {
            best = i;
        }
    }
    (best / width, best % width)
}

/// Per-sample `[J, S, S]` heatmap grid.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    pub values: Tensor,
}

impl HeatmapStack {
    pub fn new(values: Tensor) -> Result<Self> {
        let s = values.shape();
        if s.len() != 3 || s[1] != s[2] {
            return Err(shape_err("heatmap", format!("expected [J,S,S], got {s:?}")));
        }
        Ok(Self { values })
    }

    /// Extracts sample `n` from a batched `[N, J, S, S]` tensor.
    pub fn from_batch(batch: &Tensor, n: usize) -> Result<Self> {
        let s = batch.shape();
        if s.len() != 4 || n >= s[0] {
            return Err(shape_err("heatmap", format!("cannot take sample {n} from {s:?}")));
        }
        let len = s[1] * s[2] * s[3];
        let data = batch.data()[n * len..(n + 1) * len].to_vec();
        Self::new(Tensor::new(vec![s[1], s[2], s[3]], data)?)
    }

    pub fn joints(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn size(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn map(&self, j: usize) -> &[f64] {
        let hw = self.size() * self.size();
        &self.values.data()[j * hw..(j + 1) * hw]
    }

    /// Peak `(row, col)` per joint.
    pub fn peaks(&self) -> Vec<(usize, usize)> {
        (0..self.joints())
            .map(|j| argmax_2d(self.map(j), self.size()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_prefer_lowest_row_then_column() {
        let mut m = vec![0.0; 16];
        m[9] = 1.0;
        m[6] = 1.0;
        m[7] = 1.0;
        assert_eq!(argmax_2d(&m, 4), (1, 2));
        assert_eq!(argmax_2d(&[0.0; 16], 4), (0, 0));
    }

    #[test]
    fn channel_plan_doubles_and_caps() {
        let cfg = HourglassConfig::default();
        let plan: Vec<_> = (0..5).map(|l| cfg.channels(l)).collect();
        assert_eq!(plan, vec![64, 128, 256, 512, 512]);
        assert_eq!(cfg.input_size(), 256);
    }

    #[test]
    fn rejects_indivisible_heatmap() {
        let cfg = HourglassConfig {
            heatmap_size: 12,
            depth: 3,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
