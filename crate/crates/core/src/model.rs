//! The full network: backbone, optional spatial fusion and distribution
//! learning, and the training objective.

use crate::backbone::{Backbone, HourglassConfig, PYRAMID_LEVELS};
use crate::config::RunConfig;
use crate::dlm::{rasterize_h2, DensityConfig, Dlm, Flow, FlowMoments, HeadOutput, JointHeads};
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::init::Init;
use crate::losses::{chi_from_sigma, combine, mse_h1, mse_h2, ChiMode, ChiSetting, LossBreakdown};
use crate::sfm::{LocalAxis, Sfm};
use crate::tensor::{Module, Param};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub hourglass: HourglassConfig,
    pub fusion: bool,
    pub flow_layers: usize,
    pub local_axis: LocalAxis,
    pub density: DensityConfig,
    pub moment_samples: usize,
    /// Initial predicted spread, grid units.
    pub sigma_init: f64,
}

impl ModelConfig {
    pub fn from_run(cfg: &RunConfig) -> Self {
        Self {
            hourglass: cfg.hourglass(),
            fusion: cfg.fusion,
            flow_layers: cfg.flow_layers,
            local_axis: cfg.local_axis,
            density: cfg.density(),
            moment_samples: cfg.moment_samples,
            sigma_init: cfg.sigma_px,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub sfm: Option<Sfm>,
    pub dlm: Option<Dlm>,
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// Per-stack heatmaps `[N, J, S, S]`.
    pub h1: Vec<Var>,
    /// Learnable heatmaps `[N, J, S, S]`.
    pub h2: Option<Var>,
    pub heads: Option<HeadOutput>,
    /// Global attention weights `[N, 4, S, S]`.
    pub weights: Option<Var>,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let mut init = Init::new(seed);
        let hg = cfg.hourglass;
        let backbone = Backbone::new(&mut init, hg)?;
        let (sfm, dlm) = if cfg.fusion {
            let channels: Vec<usize> = (0..PYRAMID_LEVELS).map(|n| hg.channels(n)).collect();
            let sfm = Sfm::new(&mut init, &channels, 4 * hg.base_channels, cfg.local_axis);
            let coarse = hg.heatmap_size >> (PYRAMID_LEVELS - 1);
            let features = sfm.head.out_channels() * coarse * coarse;
            let dlm = Dlm {
                flow: Flow::new(&mut init, "dlm.flow", cfg.flow_layers),
                heads: JointHeads::new(
                    &mut init,
                    "dlm.heads",
                    features,
                    hg.joints,
                    hg.heatmap_size,
                    cfg.sigma_init,
                ),
                density: cfg.density,
                moment_samples: cfg.moment_samples,
            };
            (Some(sfm), Some(dlm))
        } else {
            (None, None)
        };
        Ok(Self {
            cfg,
            backbone,
            sfm,
            dlm,
        })
    }

    pub fn from_run(cfg: &RunConfig) -> Result<Self> {
        Self::new(ModelConfig::from_run(cfg), cfg.seed)
    }

    pub fn heatmap_size(&self) -> usize {
        self.cfg.hourglass.heatmap_size
    }

    pub fn joints(&self) -> usize {
        self.cfg.hourglass.joints
    }

    /// Monte-Carlo moments of the current flow, or the standard ones when there is none.
    pub fn flow_moments(&self, seed: u64) -> Result<FlowMoments> {
        match &self.dlm {
            Some(d) => d.flow.estimate_moments(d.moment_samples, seed),
            None => Ok(FlowMoments::STANDARD),
        }
    }

    /// Backbone heatmaps only.
    pub fn predict(&self, g: &mut Graph, image: Var) -> Result<Var> {
        let out = self.backbone.forward(g, image)?;
        Ok(*out.h1.last().expect("at least one stack"))
    }

    pub fn forward(&self, g: &mut Graph, image: Var, moments: &FlowMoments) -> Result<ModelOutput> {
        let bb = self.backbone.forward(g, image)?;
        let (mut h2, mut heads, mut weights) = (None, None, None);
        if let (Some(sfm), Some(dlm)) = (&self.sfm, &self.dlm) {
            let (feat, w) = sfm.forward(g, &bb.pyramid)?;
            let hd = dlm.heads.forward(g, feat)?;
            h2 = Some(rasterize_h2(
                g,
                hd,
                &dlm.flow,
                moments,
                dlm.density,
                self.heatmap_size(),
            )?);
            heads = Some(hd);
            weights = Some(w);
        }
        Ok(ModelOutput {
            h1: bb.h1,
            h2,
            heads,
            weights,
        })
    }

    /// Builds the objective. Every stack's heatmaps are compared against
    /// `target`; the learnable heatmaps only against the final stack.
    pub fn loss(
        &self,
        g: &mut Graph,
        out: &ModelOutput,
        target: Var,
        visible: &[bool],
        chi: ChiSetting,
    ) -> Result<(Var, LossBreakdown)> {
        let mut l1: Option<Var> = None;
        for &h in &out.h1 {
            let l = mse_h1(g, h, target, visible)?;
            l1 = Some(match l1 {
                None => l,
                Some(acc) => g.add(acc, l)?,
            });
        }
        let l1 = l1.expect("at least one stack");
        let (l2, chi_value) = match (out.h2, out.heads) {
            (Some(h2), Some(heads)) => {
                let last = *out.h1.last().expect("at least one stack");
                let l2 = mse_h2(g, last, h2, visible)?;
                let chi_value = match chi.mode {
                    ChiMode::Fixed(v) => v,
                    ChiMode::Sigma => chi_from_sigma(g.value(heads.sigma).data(), self.heatmap_size()),
                };
                (l2, chi_value)
            }
            _ => (g.constant(crate::Tensor::scalar(0.0)), 0.0),
        };
        let total = combine(g, l1, l2, chi_value, chi.form)?;
        let breakdown = LossBreakdown {
            l_h1: g.scalar(l1),
            l_h2: g.scalar(l2),
            chi: chi_value,
            total: g.scalar(total),
        };
        Ok((total, breakdown))
    }
}

impl Module for Model {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.backbone.visit(f);
        self.sfm.visit(f);
        self.dlm.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.backbone.visit_mut(f);
        self.sfm.visit_mut(f);
        self.dlm.visit_mut(f);
    }
}
