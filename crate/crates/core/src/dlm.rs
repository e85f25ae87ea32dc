//! Distribution learning: an affine-coupling flow on the plane, the
//! standardized density built from it, and rasterization of per-joint
//! distributions into learnable heatmaps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::init::Init;
use crate::nn::Linear;
use crate::tensor::{Module, Param, Tensor};

pub const DEFAULT_FLOW_LAYERS: usize = 4;
pub const FLOW_HIDDEN: usize = 16;
/// Coupling log-scales are `SCALE_BOUND * tanh(net)`.
pub const SCALE_BOUND: f64 = 3.0;
pub const DEFAULT_MOMENT_SAMPLES: usize = 1000;
pub const MIN_MOMENT_SAMPLES: usize = 1000;
pub const MIN_STD: f64 = 1e-6;
/// Smallest predicted spread, in grid units.
pub const SIGMA_FLOOR: f64 = 0.05;

/// `ln(2 pi)`.
pub const LN_2PI: f64 = 1.8378770664093453;
/// Std of the coupling nets' output weights; keeps a fresh flow close to the identity.
pub const OUT_STD: f64 = 0.02;

fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp()).ln_1p()
}

/// Two-layer perceptron `R -> R` with a tanh hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
}

impl Mlp {
    pub fn new(init: &mut Init, name: &str, hidden: usize) -> Self {
        Self {
            w1: init.normal(format!("{name}.w1"), &[1, hidden], 1.0),
            b1: init.normal(format!("{name}.b1"), &[hidden], 0.5),
            w2: init.normal(format!("{name}.w2"), &[hidden, 1], OUT_STD),
            b2: init.zeros(format!("{name}.b2"), &[1]),
        }
    }

    pub fn eval(&self, a: f64) -> f64 {
        let (w1, b1, w2) = (self.w1.value.data(), self.b1.value.data(), self.w2.value.data());
        let mut out = self.b2.value.data()[0];
        for k in 0..w1.len() {
            out += (a * w1[k] + b1[k]).tanh() * w2[k];
        }
        out
    }

    /// `[P,1] -> [P,1]`.
    pub fn forward(&self, g: &mut Graph, a: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (
            g.param(&self.w1),
            g.param(&self.b1),
            g.param(&self.w2),
            g.param(&self.b2),
        );
        let h = g.matmul(a, w1)?;
        let h = g.add(h, b1)?;
        let h = g.tanh(h);
        let o = g.matmul(h, w2)?;
        g.add(o, b2)
    }
}

impl Module for Mlp {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.w1);
        f(&self.b1);
        f(&self.w2);
        f(&self.b2);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.w1);
        f(&mut self.b1);
        f(&mut self.w2);
        f(&mut self.b2);
    }
}

/// Affine coupling: coordinate `transform` is scaled and shifted by nets of the other one.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    pub scale: Mlp,
    pub shift: Mlp,
    pub transform: usize,
}

impl Coupling {
    pub fn new(init: &mut Init, name: &str, transform: usize) -> Self {
        Self {
            scale: Mlp::new(init, &format!("{name}.scale"), FLOW_HIDDEN),
            shift: Mlp::new(init, &format!("{name}.shift"), FLOW_HIDDEN),
            transform,
        }
    }

    fn log_scale(&self, a: f64) -> f64 {
        SCALE_BOUND * self.scale.eval(a).tanh()
    }

    /// Returns the image of `z` and `log |det J|`.
    pub fn forward_point(&self, z: [f64; 2]) -> ([f64; 2], f64) {
        let (t, k) = (self.transform, 1 - self.transform);
        let s = self.log_scale(z[k]);
        let mut x = z;
        x[t] = z[t] * s.exp() + self.shift.eval(z[k]);
        (x, s)
    }

    /// Returns the preimage of `x` and the log-determinant of the inverse.
    pub fn inverse_point(&self, x: [f64; 2]) -> ([f64; 2], f64) {
        let (t, k) = (self.transform, 1 - self.transform);
        let s = self.log_scale(x[k]);
        let mut z = x;
        z[t] = (x[t] - self.shift.eval(x[k])) * (-s).exp();
        (z, -s)
    }

    fn nets(&self, g: &mut Graph, a: Var) -> Result<(Var, Var)> {
        let s = self.scale.forward(g, a)?;
        let s = g.tanh(s);
        let s = g.scale(s, SCALE_BOUND);
        let t = self.shift.forward(g, a)?;
        Ok((s, t))
    }

    /// Graph version of [`Coupling::forward_point`] on `[P,1]` columns.
    pub fn forward(&self, g: &mut Graph, z: [Var; 2]) -> Result<([Var; 2], Var)> {
        let (t, k) = (self.transform, 1 - self.transform);
        let (s, sh) = self.nets(g, z[k])?;
        let e = g.exp(s);
        let scaled = g.mul(z[t], e)?;
        let mut x = z;
        x[t] = g.add(scaled, sh)?;
        Ok((x, s))
    }

    /// Graph version of [`Coupling::inverse_point`] on `[P,1]` columns.
    pub fn inverse(&self, g: &mut Graph, x: [Var; 2]) -> Result<([Var; 2], Var)> {
        let (t, k) = (self.transform, 1 - self.transform);
        let (s, sh) = self.nets(g, x[k])?;
        let ns = g.neg(s);
        let e = g.exp(ns);
        let d = g.sub(x[t], sh)?;
        let mut z = x;
        z[t] = g.mul(d, e)?;
        Ok((z, ns))
    }
}

impl Module for Coupling {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.scale.visit(f);
        self.shift.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.scale.visit_mut(f);
        self.shift.visit_mut(f);
    }
}

/// Monte-Carlo moments of the flow's pushforward of a standard normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowMoments {
    pub mean: [f64; 2],
    pub std: [f64; 2],
    /// Set when a standard deviation fell below [`MIN_STD`] and was clamped.
    pub degenerate: bool,
}

impl FlowMoments {
    pub const STANDARD: FlowMoments = FlowMoments {
        mean: [0.0, 0.0],
        std: [1.0, 1.0],
        degenerate: false,
    };
}

/// Stack of couplings alternating the transformed coordinate; `x = f(z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Flow {
    pub layers: Vec<Coupling>,
}

impl Flow {
    pub fn new(init: &mut Init, name: &str, layers: usize) -> Self {
        Self {
            layers: (0..layers)
                .map(|i| Coupling::new(init, &format!("{name}.coupling{i}"), (i + 1) % 2))
                .collect(),
        }
    }

    pub fn forward_point(&self, z: [f64; 2]) -> ([f64; 2], f64) {
        self.layers.iter().fold((z, 0.0), |(x, ld), l| {
            let (y, d) = l.forward_point(x);
            (y, ld + d)
        })
    }

    pub fn inverse_point(&self, x: [f64; 2]) -> ([f64; 2], f64) {
        self.layers.iter().rev().fold((x, 0.0), |(z, ld), l| {
            let (y, d) = l.inverse_point(z);
            (y, ld + d)
        })
    }

    /// `log G(x)` by change of variables.
    pub fn log_prob_point(&self, x: [f64; 2]) -> f64 {
        let (z, ld) = self.inverse_point(x);
        -LN_2PI - 0.5 * (z[0] * z[0] + z[1] * z[1]) + ld
    }

    pub fn forward(&self, g: &mut Graph, z: [Var; 2]) -> Result<([Var; 2], Option<Var>)> {
        let mut x = z;
        let mut logdet: Option<Var> = None;
        for l in &self.layers {
            let (y, d) = l.forward(g, x)?;
            x = y;
            logdet = Some(match logdet {
                None => d,
                Some(acc) => g.add(acc, d)?,
            });
        }
        Ok((x, logdet))
    }

    /// `log G(x)` for `[P,1]` coordinate columns, returning `[P,1]`.
    pub fn log_prob(&self, g: &mut Graph, x: [Var; 2]) -> Result<Var> {
        let mut z = x;
        let mut logdet: Option<Var> = None;
        for l in self.layers.iter().rev() {
            let (y, d) = l.inverse(g, z)?;
            z = y;
            logdet = Some(match logdet {
                None => d,
                Some(acc) => g.add(acc, d)?,
            });
        }
        let a = g.square(z[0]);
        let b = g.square(z[1]);
        let r = g.add(a, b)?;
        let base = g.affine(r, -0.5, -LN_2PI);
        match logdet {
            None => Ok(base),
            Some(d) => g.add(base, d),
        }
    }

    /// Evaluates `log G` at many points through the graph, in chunks.
    pub fn log_prob_many(&self, points: &[[f64; 2]]) -> Result<Vec<f64>> {
        const CHUNK: usize = 4096;
        let mut out = Vec::with_capacity(points.len());
        for chunk in points.chunks(CHUNK) {
            let mut g = Graph::new();
            let cols = [0, 1].map(|k| g.constant(Tensor::from_fn(&[chunk.len(), 1], |i| chunk[i][k])));
            let lp = self.log_prob(&mut g, cols)?;
            out.extend_from_slice(g.value(lp).data());
        }
        Ok(out)
    }

    pub fn sample(&self, n: usize, seed: u64) -> Vec<[f64; 2]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let z = [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)];
                self.forward_point(z).0
            })
            .collect()
    }

    pub fn estimate_moments(&self, n: usize, seed: u64) -> Result<FlowMoments> {
        if n < MIN_MOMENT_SAMPLES {
            return Err(Error::Invalid(format!(
                "moment estimation needs at least {MIN_MOMENT_SAMPLES} samples, got {n}"
            )));
        }
        let xs = self.sample(n, seed);
        let mut mean = [0.0; 2];
        for x in &xs {
            mean[0] += x[0];
            mean[1] += x[1];
        }
        mean = mean.map(|m| m / n as f64);
        let mut var = [0.0; 2];
        for x in &xs {
            for k in 0..2 {
                var[k] += (x[k] - mean[k]).powi(2);
            }
        }
        let mut degenerate = false;
        let std = var.map(|v| {
            let s = (v / n as f64).sqrt();
            if s < MIN_STD || !s.is_finite() {
                degenerate = true;
                MIN_STD
            } else {
                s
            }
        });
        Ok(FlowMoments { mean, std, degenerate })
    }
}

impl Module for Flow {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.layers.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.layers.visit_mut(f);
    }
}

/// How the standard normal `Q` and the standardized flow density `I` are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MixtureKind {
    /// `Q/2 + I/2`.
    #[default]
    Mixture,
    /// `Q + I`.
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DensityConfig {
    /// Include the `1 / (sigma_x sigma_y)` factor of the standardization.
    pub jacobian: bool,
    pub mixture: MixtureKind,
}

impl Default for DensityConfig {
    fn default() -> Self {
        Self {
            jacobian: true,
            mixture: MixtureKind::Mixture,
        }
    }
}

/// `log Q(x)` for the 2-D standard normal.
pub fn log_standard_normal(x: [f64; 2]) -> f64 {
    -LN_2PI - 0.5 * (x[0] * x[0] + x[1] * x[1])
}

/// `I(x) = G((x - mu) / sigma)`, divided by `sigma_x sigma_y` when `jacobian` is set.
pub fn i_xi_point(flow: &Flow, x: [f64; 2], m: &FlowMoments, jacobian: bool) -> f64 {
    let y = [(x[0] - m.mean[0]) / m.std[0], (x[1] - m.mean[1]) / m.std[1]];
    let mut lp = flow.log_prob_point(y);
    if jacobian {
        lp -= (m.std[0] * m.std[1]).ln();
    }
    lp.exp()
}

pub fn mixture_point(flow: &Flow, x: [f64; 2], m: &FlowMoments, cfg: DensityConfig) -> f64 {
    let q = log_standard_normal(x).exp();
    let i = i_xi_point(flow, x, m, cfg.jacobian);
    match cfg.mixture {
        MixtureKind::Mixture => 0.5 * q + 0.5 * i,
        MixtureKind::Sum => q + i,
    }
}

fn mixture_weights(kind: MixtureKind) -> (f64, f64) {
    match kind {
        MixtureKind::Mixture => (0.5, 0.5),
        MixtureKind::Sum => (1.0, 1.0),
    }
}

/// `log Q` and `log I` on `[P,1]` columns.
fn log_parts(g: &mut Graph, flow: &Flow, x: [Var; 2], m: &FlowMoments, jacobian: bool) -> Result<(Var, Var)> {
    let a = g.square(x[0]);
    let b = g.square(x[1]);
    let r = g.add(a, b)?;
    let lq = g.affine(r, -0.5, -LN_2PI);
    let y = [0, 1].map(|k| g.affine(x[k], 1.0 / m.std[k], -m.mean[k] / m.std[k]));
    let mut li = flow.log_prob(g, y)?;
    if jacobian {
        li = g.affine(li, 1.0, -(m.std[0] * m.std[1]).ln());
    }
    Ok((lq, li))
}

/// Graph version of [`mixture_point`] on `[P,1]` columns.
pub fn mixture_density(g: &mut Graph, flow: &Flow, x: [Var; 2], m: &FlowMoments, cfg: DensityConfig) -> Result<Var> {
    let (lq, li) = log_parts(g, flow, x, m, cfg.jacobian)?;
    let (wq, wi) = mixture_weights(cfg.mixture);
    let q = g.exp(lq);
    let i = g.exp(li);
    let q = g.scale(q, wq);
    let i = g.scale(i, wi);
    g.add(q, i)
}

/// Logarithm of [`mixture_density`], computed as `log Q + log(wq + wi exp(log I - log Q))`
/// so that it stays finite where both densities underflow.
pub fn log_mixture_density(
    g: &mut Graph,
    flow: &Flow,
    x: [Var; 2],
    m: &FlowMoments,
    cfg: DensityConfig,
) -> Result<Var> {
    let (lq, li) = log_parts(g, flow, x, m, cfg.jacobian)?;
    let (wq, wi) = mixture_weights(cfg.mixture);
    let d = g.sub(li, lq)?;
    let e = g.exp(d);
    let t = g.affine(e, wi, wq);
    let t = g.log(t);
    g.add(lq, t)
}

/// Linear head producing per-joint location and spread from the fused features.
#[derive(Debug, Clone, PartialEq)]
pub struct JointHeads {
    pub linear: Linear,
    pub joints: usize,
    pub grid: usize,
    /// Pre-activation offset so that a zero head output gives `sigma_init`.
    pub sigma_offset: f64,
}

/// Graph handles for `mu_hat` and `sigma_hat`, both `[N, J, 2]` in grid units `(x = column, y = row)`.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    pub mu: Var,
    pub sigma: Var,
}

impl JointHeads {
    pub fn new(init: &mut Init, name: &str, features: usize, joints: usize, grid: usize, sigma_init: f64) -> Self {
        Self {
            linear: Linear::new(init, &format!("{name}.linear"), features, joints * 4, true, 0.1),
            joints,
            grid,
            sigma_offset: softplus_inv(sigma_init - SIGMA_FLOOR),
        }
    }

    pub fn forward(&self, g: &mut Graph, features: Var) -> Result<HeadOutput> {
        let s = g.shape(features).to_vec();
        let n = s[0];
        let flat: usize = s[1..].iter().product();
        let x = g.reshape(features, &[n, flat])?;
        let raw = self.linear.forward(g, x)?;
        let raw = g.reshape(raw, &[n, self.joints, 4])?;
        let half = self.grid as f64 / 2.0;
        let mu = g.slice(raw, 2, 0, 2)?;
        let mu = g.affine(mu, half, half - 0.5);
        let sr = g.slice(raw, 2, 2, 2)?;
        let sr = g.affine(sr, 1.0, self.sigma_offset);
        let sigma = g.softplus(sr);
        let sigma = g.affine(sigma, 1.0, SIGMA_FLOOR);
        Ok(HeadOutput { mu, sigma })
    }
}

impl Module for JointHeads {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.linear.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.linear.visit_mut(f);
    }
}

/// Pixel-center coordinates `(column, row)` of an `S x S` grid, row-major.
pub fn grid_points(size: usize) -> Tensor {
    Tensor::from_fn(&[size * size, 2], |k| {
        let (p, c) = (k / 2, k % 2);
        if c == 0 {
            (p % size) as f64
        } else {
            (p / size) as f64
        }
    })
}

/// Learnable heatmaps `[N, J, S, S]`: the mixture density on the grid divided by its per-joint peak.
pub fn rasterize_h2(
    g: &mut Graph,
    heads: HeadOutput,
    flow: &Flow,
    moments: &FlowMoments,
    cfg: DensityConfig,
    size: usize,
) -> Result<Var> {
    let s = g.shape(heads.mu).to_vec();
    if s.len() != 3 || s[2] != 2 || g.shape(heads.sigma) != s.as_slice() {
        return Err(shape_err("rasterize_h2", format!("heads must be [N,J,2], got {s:?}")));
    }
    let (n, j) = (s[0], s[1]);
    let grid = g.constant(grid_points(size).reshape(&[1, 1, size * size, 2])?);
    let mu = g.reshape(heads.mu, &[n, j, 1, 2])?;
    let sigma = g.reshape(heads.sigma, &[n, j, 1, 2])?;
    let d = g.sub(grid, mu)?;
    let xbar = g.div(d, sigma)?;
    let m = n * j * size * size;
    let xbar = g.reshape(xbar, &[m, 2])?;
    let cols = [g.slice(xbar, 1, 0, 1)?, g.slice(xbar, 1, 1, 1)?];
    let lp = log_mixture_density(g, flow, cols, moments, cfg)?;
    let lp = g.reshape(lp, &[n * j, size * size])?;
    let peak = g.max(lp, 1)?;
    let rel = g.sub(lp, peak)?;
    let h = g.exp(rel);
    g.reshape(h, &[n, j, size, size])
}

/// Residual log-likelihood loss averaged over `[K,2]` rows:
/// `-log Q(r) - log G(r) - log s + log sigma_x + log sigma_y` with `r = (target - mu) / sigma` and `s = 1`.
pub fn rle_loss(g: &mut Graph, flow: &Flow, target: Var, mu: Var, sigma: Var) -> Result<Var> {
    let s = g.shape(mu).to_vec();
    if s.len() != 2 || s[1] != 2 || g.shape(sigma) != s.as_slice() || g.shape(target) != s.as_slice() {
        return Err(shape_err(
            "rle_loss",
            format!("expected matching [K,2] inputs, got {s:?}"),
        ));
    }
    if g.value(sigma).data().iter().any(|&v| v <= 0.0) {
        return Err(Error::Invalid("rle_loss requires sigma > 0".into()));
    }
    let d = g.sub(target, mu)?;
    let r = g.div(d, sigma)?;
    let cols = [g.slice(r, 1, 0, 1)?, g.slice(r, 1, 1, 1)?];
    let a = g.square(cols[0]);
    let b = g.square(cols[1]);
    let rr = g.add(a, b)?;
    let nlq = g.affine(rr, 0.5, LN_2PI);
    let lg = flow.log_prob(g, cols)?;
    let per = g.sub(nlq, lg)?;
    let ls = g.log(sigma);
    let ls = g.sum(ls, Some(1))?;
    let per = g.add(per, ls)?;
    Ok(g.mean_all(per))
}

/// Flow, joint heads and density settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Dlm {
    pub flow: Flow,
    pub heads: JointHeads,
    pub density: DensityConfig,
    pub moment_samples: usize,
}

impl Module for Dlm {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.flow.visit(f);
        self.heads.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.flow.visit_mut(f);
        self.heads.visit_mut(f);
    }
}
