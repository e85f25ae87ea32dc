//! Convolutional building blocks: basicblock, squeeze-and-excitation gate and
//! the dilated residual block used as the hourglass unit.
//!
//! No normalization layers are used; every convolution carries a per-channel
//! bias instead.

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::init::Init;
use crate::tensor::{Module, Param};

pub const DEFAULT_DILATION: usize = 2;
pub const DEFAULT_SE_REDUCTION: usize = 4;

/// Square-kernel convolution with an optional per-channel bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub bias: bool,
    /// Extra factor on the He standard deviation.
    pub scale: f64,
}

impl ConvSpec {
    /// Stride-1 convolution with "same" padding for the given dilation.
    pub fn same(cin: usize, cout: usize, kernel: usize, dilation: usize) -> Self {
        Self {
            cin,
            cout,
            kernel,
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
            bias: true,
            scale: 1.0,
        }
    }

    pub fn pointwise(cin: usize, cout: usize) -> Self {
        Self::same(cin, cout, 1, 1)
    }

    pub fn strided(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn scaled(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }
}

impl Conv2d {
    pub fn new(init: &mut Init, name: &str, spec: ConvSpec) -> Self {
        let fan_in = spec.cin * spec.kernel * spec.kernel;
        let weight = init.he(
            format!("{name}.weight"),
            &[spec.cout, spec.cin, spec.kernel, spec.kernel],
            fan_in,
            spec.scale,
        );
        let bias = spec.bias.then(|| init.zeros(format!("{name}.bias"), &[spec.cout]));
        Self {
            weight,
            bias,
            stride: spec.stride,
            padding: spec.padding,
            dilation: spec.dilation,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let y = g.conv2d(x, w, self.stride, self.padding, self.dilation)?;
        match &self.bias {
            None => Ok(y),
            Some(b) => {
                let bv = g.param(b);
                let b4 = g.reshape(bv, &[1, self.out_channels(), 1, 1])?;
                g.add(y, b4)
            }
        }
    }
}

impl Module for Conv2d {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.weight);
        self.bias.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        self.bias.visit_mut(f);
    }
}

/// Fully connected layer on `[N, in]` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, cin: usize, cout: usize, bias: bool, scale: f64) -> Self {
        Self {
            weight: init.he(format!("{name}.weight"), &[cin, cout], cin, scale),
            bias: bias.then(|| init.zeros(format!("{name}.bias"), &[cout])),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let y = g.matmul(x, w)?;
        match &self.bias {
            None => Ok(y),
            Some(b) => {
                let bv = g.param(b);
                g.add(y, bv)
            }
        }
    }
}

impl Module for Linear {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.weight);
        self.bias.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        self.bias.visit_mut(f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasicBlockParams {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    /// 1x1 projection; required when `channels_in != channels_out`.
    pub projection: Option<Conv2d>,
    pub channels_in: usize,
    pub channels_out: usize,
}

impl BasicBlockParams {
    pub fn new(init: &mut Init, name: &str, cin: usize, cout: usize) -> Self {
        Self {
            conv1: Conv2d::new(init, &format!("{name}.conv1"), ConvSpec::same(cin, cout, 3, 1)),
            conv2: Conv2d::new(
                init,
                &format!("{name}.conv2"),
                ConvSpec::same(cout, cout, 3, 1).scaled(0.5),
            ),
            projection: (cin != cout)
                .then(|| Conv2d::new(init, &format!("{name}.projection"), ConvSpec::pointwise(cin, cout))),
            channels_in: cin,
            channels_out: cout,
        }
    }

    fn check_input(&self, g: &Graph, x: Var, op: &'static str) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != self.channels_in {
            return Err(shape_err(
                op,
                format!("expected [N,{},H,W], got {s:?}", self.channels_in),
            ));
        }
        if self.channels_in != self.channels_out && self.projection.is_none() {
            return Err(shape_err(
                op,
                format!(
                    "channels {} -> {} need a projection shortcut",
                    self.channels_in, self.channels_out
                ),
            ));
        }
        Ok(())
    }

    /// `conv2(relu(conv1(x)))`
    pub fn main_branch(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, x)?;
        let h = g.relu(h);
        self.conv2.forward(g, h)
    }

    pub fn shortcut(&self, g: &mut Graph, x: Var) -> Result<Var> {
        match &self.projection {
            Some(p) => p.forward(g, x),
            None => Ok(x),
        }
    }

    /// `main_branch(x) + shortcut(x)`, before the output nonlinearity.
    pub fn preactivation(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let m = self.main_branch(g, x)?;
        let s = self.shortcut(g, x)?;
        g.add(m, s)
    }
}

impl Module for BasicBlockParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.conv1.visit(f);
        self.conv2.visit(f);
        self.projection.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv1.visit_mut(f);
        self.conv2.visit_mut(f);
        self.projection.visit_mut(f);
    }
}

/// `relu(conv2(relu(conv1(x))) + shortcut(x))`
pub fn basic_block(g: &mut Graph, x: Var, p: &BasicBlockParams) -> Result<Var> {
    p.check_input(g, x, "basic_block")?;
    let pre = p.preactivation(g, x)?;
    Ok(g.relu(pre))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SEParams {
    /// `[C, C/r]`
    pub fc1: Param,
    /// `[C/r, C]`
    pub fc2: Param,
    pub reduction: usize,
}

/// Largest divisor of `channels` not exceeding `requested`.
pub fn effective_reduction(channels: usize, requested: usize) -> usize {
    (1..=requested.max(1).min(channels))
        .rev()
        .find(|r| channels.is_multiple_of(*r))
        .unwrap_or(1)
}

impl SEParams {
    pub fn new(init: &mut Init, name: &str, channels: usize, reduction: usize) -> Self {
        let r = effective_reduction(channels, reduction);
        let hidden = channels / r;
        Self {
            fc1: init.he(format!("{name}.fc1"), &[channels, hidden], channels, 1.0),
            fc2: init.he(format!("{name}.fc2"), &[hidden, channels], hidden, 1.0),
            reduction: r,
        }
    }

    pub fn channels(&self) -> usize {
        self.fc1.value.shape()[0]
    }

    /// Per-sample channel gates `[N, C]`, each in (0, 1).
    pub fn gates(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.channels() {
            return Err(shape_err(
                "se_gate",
                format!("expected [N,{},H,W], got {s:?}", self.channels()),
            ));
        }
        let pooled = g.global_avg_pool(x)?;
        let w1 = g.param(&self.fc1);
        let h = g.matmul(pooled, w1)?;
        let h = g.relu(h);
        let w2 = g.param(&self.fc2);
        let z = g.matmul(h, w2)?;
        Ok(g.sigmoid(z))
    }
}

impl Module for SEParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.fc1);
        f(&self.fc2);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.fc1);
        f(&mut self.fc2);
    }
}

/// `x * sigmoid(fc2(relu(fc1(gap(x)))))`, broadcast per channel.
pub fn se_gate(g: &mut Graph, x: Var, p: &SEParams) -> Result<Var> {
    let gates = p.gates(g, x)?;
    let s = g.shape(x).to_vec();
    let gates = g.reshape(gates, &[s[0], s[1], 1, 1])?;
    g.mul(x, gates)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DilatedResidualBlockParams {
    pub basic: BasicBlockParams,
    /// 3x3 kernel with dilation `b` and padding `b`, parallel to `conv2`.
    pub dilated_conv: Conv2d,
    pub se: SEParams,
}

impl DilatedResidualBlockParams {
    pub fn new(init: &mut Init, name: &str, cin: usize, cout: usize, dilation: usize, reduction: usize) -> Self {
        Self {
            basic: BasicBlockParams::new(init, name, cin, cout),
            dilated_conv: Conv2d::new(
                init,
                &format!("{name}.dilated"),
                ConvSpec::same(cout, cout, 3, dilation).scaled(0.5),
            ),
            se: SEParams::new(init, &format!("{name}.se"), cout, reduction),
        }
    }

    pub fn dilation(&self) -> usize {
        self.dilated_conv.dilation
    }

    /// `conv2(h) + dilated(h) + shortcut(x)` with `h = relu(conv1(x))`.
    pub fn pre_gate(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.basic.conv1.forward(g, x)?;
        let h = g.relu(h);
        let main = self.basic.conv2.forward(g, h)?;
        let dil = self.dilated_conv.forward(g, h)?;
        if g.shape(main) != g.shape(dil) {
            return Err(shape_err(
                "dilated_residual_block",
                format!("branch shapes differ: {:?} vs {:?}", g.shape(main), g.shape(dil)),
            ));
        }
        let sc = self.basic.shortcut(g, x)?;
        let sum = g.add(main, dil)?;
        g.add(sum, sc)
    }
}

impl Module for DilatedResidualBlockParams {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.basic.visit(f);
        self.dilated_conv.visit(f);
        self.se.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.basic.visit_mut(f);
        self.dilated_conv.visit_mut(f);
        self.se.visit_mut(f);
    }
}

/// `se_gate(conv2(h) + dilated(h) + shortcut(x))` with `h = relu(conv1(x))`.
pub fn dilated_residual_block(g: &mut Graph, x: Var, p: &DilatedResidualBlockParams) -> Result<Var> {
    p.basic.check_input(g, x, "dilated_residual_block")?;
    if p.dilated_conv.padding != p.dilation() || p.dilated_conv.weight.value.shape()[2] != 3 {
        return Err(Error::Invalid(format!(
            "dilated branch must be 3x3 with padding == dilation, got padding {} dilation {}",
            p.dilated_conv.padding,
            p.dilation()
        )));
    }
    let sum = p.pre_gate(g, x)?;
    se_gate(g, sum, &p.se)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnitKind {
    Basic,
    Dilated,
}

/// An hourglass unit: plain basicblock or dilated residual block.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq)]
pub enum Unit {
    Basic(BasicBlockParams),
    Dilated(DilatedResidualBlockParams),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UnitConfig {
    pub kind: UnitKind,
    pub dilation: usize,
    pub se_reduction: usize,
}

impl Default for UnitConfig {
    fn default() -> Self {
        Self {
            kind: UnitKind::Dilated,
            dilation: DEFAULT_DILATION,
            se_reduction: DEFAULT_SE_REDUCTION,
        }
    }
}

impl Unit {
    pub fn new(init: &mut Init, name: &str, cin: usize, cout: usize, cfg: UnitConfig) -> Self {
        match cfg.kind {
            UnitKind::Basic => Unit::Basic(BasicBlockParams::new(init, name, cin, cout)),
            UnitKind::Dilated => Unit::Dilated(DilatedResidualBlockParams::new(
                init,
                name,
                cin,
                cout,
                cfg.dilation,
                cfg.se_reduction,
            )),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Unit::Basic(p) => basic_block(g, x, p),
            Unit::Dilated(p) => dilated_residual_block(g, x, p),
        }
    }

    /// The convolutional path before any channel gating or output nonlinearity.
    pub fn spatial_response(&self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Unit::Basic(p) => p.preactivation(g, x),
            Unit::Dilated(p) => p.pre_gate(g, x),
        }
    }

    pub fn channels_out(&self) -> usize {
        match self {
            Unit::Basic(p) => p.channels_out,
            Unit::Dilated(p) => p.basic.channels_out,
        }
    }
}

impl Module for Unit {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        match self {
            Unit::Basic(p) => p.visit(f),
            Unit::Dilated(p) => p.visit(f),
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match self {
            Unit::Basic(p) => p.visit_mut(f),
            Unit::Dilated(p) => p.visit_mut(f),
        }
    }
}

/// Sets every parameter of `m` to zero.
pub fn zero_params<M: Module + ?Sized>(m: &mut M) {
    m.visit_mut(&mut |p| p.value.data_mut().fill(0.0));
}

/// Indices `(row, col)` where `|t| > eps` on a `[1,1,H,W]` response.
pub fn support(t: &crate::Tensor, eps: f64) -> Vec<(usize, usize)> {
    let s = t.shape();
    let w = s[s.len() - 1];
    t.data()
        .iter()
        .enumerate()
        .filter(|(_, v)| v.abs() > eps)
        .map(|(i, _)| ((i / w) % s[s.len() - 2], i % w))
        .collect()
}
