//! Spatial fusion: global attention across the pyramid, local attention
//! between adjacent scales and the classification head that feeds the
//! distribution learning module.

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::init::Init;
use crate::nn::{Conv2d, ConvSpec};
use crate::tensor::{Module, Param};

/// Axis of the `[N,C,H,W]` map that local attention normalizes over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LocalAxis {
    /// Softmax over the row index within each (channel, column).
    #[default]
    Rows,
    /// Softmax over the column index within each (channel, row).
    Columns,
}

impl LocalAxis {
    pub fn axis(self) -> usize {
        match self {
            LocalAxis::Rows => 2,
            LocalAxis::Columns => 3,
        }
    }
}

/// One 1x1 align / project / resize triple per pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalAttentionParams {
    pub align: Vec<Conv2d>,
    pub project: Vec<Conv2d>,
    pub resize: Vec<Conv2d>,
}

impl GlobalAttentionParams {
    /// `channels[n]` is the width of pyramid level `n`; `aligned` the shared width.
    pub fn new(init: &mut Init, name: &str, channels: &[usize], aligned: usize) -> Self {
        let mut align = Vec::new();
        let mut project = Vec::new();
        let mut resize = Vec::new();
        for (n, &c) in channels.iter().enumerate() {
            align.push(Conv2d::new(
                init,
                &format!("{name}.align{n}"),
                ConvSpec::pointwise(c, aligned),
            ));
            project.push(Conv2d::new(
                init,
                &format!("{name}.project{n}"),
                ConvSpec::pointwise(aligned, 1),
            ));
            resize.push(Conv2d::new(
                init,
                &format!("{name}.resize{n}"),
                ConvSpec::pointwise(aligned, c).strided(1 << n).scaled(0.5),
            ));
        }
        Self { align, project, resize }
    }

    pub fn branches(&self) -> usize {
        self.align.len()
    }
}

impl Module for GlobalAttentionParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.align.visit(f);
        self.project.visit(f);
        self.resize.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.align.visit_mut(f);
        self.project.visit_mut(f);
        self.resize.visit_mut(f);
    }
}

#[derive(Debug, Clone)]
pub struct GlobalAttentionOutput {
    /// Fused features, same shapes as the inputs.
    pub fused: Vec<Var>,
    /// Branch weights `[N, B, S, S]`, summing to one over axis 1.
    pub weights: Var,
    /// Pre-softmax scores `[N, B, S, S]`.
    pub scores: Var,
}

/// Level `n` of the pyramid must sit at `1 / 2^n` of the finest resolution.
pub fn global_attention(g: &mut Graph, pyramid: &[Var], p: &GlobalAttentionParams) -> Result<GlobalAttentionOutput> {
    if pyramid.len() != p.branches() {
        return Err(Error::Invalid(format!(
            "global attention expects {} pyramid levels, got {}",
            p.branches(),
            pyramid.len()
        )));
    }
    let fine = g.shape(pyramid[0]).to_vec();
    if fine.len() != 4 {
        return Err(shape_err(
            "global_attention",
            format!("level 0 must be [N,C,H,W], got {fine:?}"),
        ));
    }
    let mut aligned = Vec::new();
    let mut scores = Vec::new();
    for (n, &f) in pyramid.iter().enumerate() {
        let s = g.shape(f);
        let factor = 1 << n;
        if s.len() != 4 || s[2] * factor != fine[2] || s[3] * factor != fine[3] {
            return Err(shape_err(
                "global_attention",
                format!(
                    "level {n} has shape {s:?}, expected spatial {}x{}",
                    fine[2] / factor,
                    fine[3] / factor
                ),
            ));
        }
        let a = p.align[n].forward(g, f)?;
        let a = g.upsample_nearest(a, factor)?;
        scores.push(p.project[n].forward(g, a)?);
        aligned.push(a);
    }
    let u = g.concat(&scores, 1)?;
    let w = g.softmax(u, 1)?;
    let mut fused = Vec::new();
    for (n, &f) in pyramid.iter().enumerate() {
        let wn = g.slice(w, 1, n, 1)?;
        let prod = g.mul(aligned[n], wn)?;
        let back = p.resize[n].forward(g, prod)?;
        fused.push(g.add(f, back)?);
    }
    Ok(GlobalAttentionOutput {
        fused,
        weights: w,
        scores: u,
    })
}

/// Softmax attention applied to the sum of a downsampled finer map and a coarser map.
pub fn local_attention(g: &mut Graph, hi: Var, lo: Var, down: &Conv2d, axis: LocalAxis) -> Result<Var> {
    let (sh, sl) = (g.shape(hi).to_vec(), g.shape(lo).to_vec());
    if sh.len() != 4 || sl.len() != 4 || sh[2] != 2 * sl[2] || sh[3] != 2 * sl[3] {
        return Err(shape_err(
            "local_attention",
            format!("finer map {sh:?} must be exactly twice the spatial size of {sl:?}"),
        ));
    }
    let d = down.forward(g, hi)?;
    let fused = g.add(d, lo)?;
    attend(g, fused, axis)
}

/// `softmax(x, axis) * x`.
pub fn attend(g: &mut Graph, fused: Var, axis: LocalAxis) -> Result<Var> {
    let w = g.softmax(fused, axis.axis())?;
    g.mul(w, fused)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationHeadParams {
    /// 1x1 widening per level, doubling the channel count.
    pub widen: Vec<Conv2d>,
    /// 3x3 stride-2 convolutions taking level `n` to level `n + 1`.
    pub downsample: Vec<Conv2d>,
}

impl ClassificationHeadParams {
    pub fn new(init: &mut Init, name: &str, channels: &[usize]) -> Self {
        let widen: Vec<Conv2d> = channels
            .iter()
            .enumerate()
            .map(|(n, &c)| Conv2d::new(init, &format!("{name}.widen{n}"), ConvSpec::pointwise(c, 2 * c)))
            .collect();
        let downsample = channels
            .windows(2)
            .enumerate()
            .map(|(n, w)| {
                Conv2d::new(
                    init,
                    &format!("{name}.down{n}"),
                    ConvSpec::same(2 * w[0], 2 * w[1], 3, 1).strided(2),
                )
            })
            .collect();
        Self { widen, downsample }
    }

    pub fn out_channels(&self) -> usize {
        self.widen.last().map_or(0, |c| c.out_channels())
    }
}

impl Module for ClassificationHeadParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.widen.visit(f);
        self.downsample.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.widen.visit_mut(f);
        self.downsample.visit_mut(f);
    }
}

/// Widens each fused level and cascades local attention from fine to coarse.
pub fn classification_head(g: &mut Graph, fused: &[Var], p: &ClassificationHeadParams, axis: LocalAxis) -> Result<Var> {
    if fused.len() != p.widen.len() {
        return Err(Error::Invalid(format!(
            "classification head expects {} levels, got {}",
            p.widen.len(),
            fused.len()
        )));
    }
    let mut wide = Vec::new();
    for (conv, &f) in p.widen.iter().zip(fused) {
        let w = conv.forward(g, f)?;
        wide.push(g.relu(w));
    }
    let mut x = wide[0];
    for (down, &lo) in p.downsample.iter().zip(&wide[1..]) {
        x = local_attention(g, x, lo, down, axis)?;
    }
    Ok(x)
}

/// Global attention followed by the classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct Sfm {
    pub global: GlobalAttentionParams,
    pub head: ClassificationHeadParams,
    pub axis: LocalAxis,
}

impl Sfm {
    pub fn new(init: &mut Init, channels: &[usize], aligned: usize, axis: LocalAxis) -> Self {
        Self {
            global: GlobalAttentionParams::new(init, "sfm.global", channels, aligned),
            head: ClassificationHeadParams::new(init, "sfm.head", channels),
            axis,
        }
    }

    /// Returns the coarse head output and the global attention weights.
    pub fn forward(&self, g: &mut Graph, pyramid: &[Var]) -> Result<(Var, Var)> {
        let ga = global_attention(g, pyramid, &self.global)?;
        let out = classification_head(g, &ga.fused, &self.head, self.axis)?;
        Ok((out, ga.weights))
    }
}

impl Module for Sfm {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.global.visit(f);
        self.head.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.global.visit_mut(f);
        self.head.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::zero_params;
    use crate::Tensor;

    #[test]
    fn zero_projection_gives_uniform_weights() {
        let mut init = Init::new(1);
        let mut p = GlobalAttentionParams::new(&mut init, "ga", &[2, 4, 8, 16], 8);
        for c in &mut p.project {
            zero_params(c);
        }
        let mut g = Graph::new();
        let pyr: Vec<Var> = (0..4)
            .map(|n| {
                let c = 2 << n;
                let s = 8 >> n;
                g.leaf(Tensor::from_fn(&[1, c, s, s], |k| (k as f64 * 0.37).sin()))
            })
            .collect();
        let out = global_attention(&mut g, &pyr, &p).unwrap();
        assert!(g.value(out.weights).data().iter().all(|&w| w == 0.25));
        for (f, o) in pyr.iter().zip(&out.fused) {
            assert_eq!(g.shape(*f), g.shape(*o));
        }
    }

    #[test]
    fn missing_level_is_rejected() {
        let mut init = Init::new(1);
        let p = GlobalAttentionParams::new(&mut init, "ga", &[2, 4, 8, 16], 8);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 2, 8, 8]));
        assert!(global_attention(&mut g, &[x], &p).is_err());
    }

    #[test]
    fn local_attention_rejects_non_double_ratio() {
        let mut init = Init::new(1);
        let down = Conv2d::new(&mut init, "d", ConvSpec::same(2, 4, 3, 1).strided(2));
        let mut g = Graph::new();
        let hi = g.leaf(Tensor::zeros(&[1, 2, 6, 6]));
        let lo = g.leaf(Tensor::zeros(&[1, 4, 2, 2]));
        assert!(local_attention(&mut g, hi, lo, &down, LocalAxis::Rows).is_err());
    }

    #[test]
    fn head_shape_contract() {
        let mut init = Init::new(2);
        let mut head = ClassificationHeadParams::new(&mut init, "h", &[2, 4, 8, 16]);
        zero_params(&mut head);
        let mut g = Graph::new();
        let lv: Vec<Var> = (0..4)
            .map(|n| g.leaf(Tensor::full(&[2, 2 << n, 16 >> n, 16 >> n], 1.0)))
            .collect();
        let out = classification_head(&mut g, &lv, &head, LocalAxis::Rows).unwrap();
        assert_eq!(g.shape(out), &[2, 32, 2, 2]);
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }
}
