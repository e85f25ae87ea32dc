//! Paired-seed ablations: two arms that differ in one setting, trained on
//! identical data with identical initialization of every shared parameter.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::init::Init;
use crate::losses::{ChiSetting, LossForm};
use crate::model::Model;
use crate::nn::{support, Unit, UnitConfig, UnitKind};
use crate::tensor::{Module, Tensor};
use crate::train::{train, EpochReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recipe {
    /// Backbone only, basicblock against the dilated residual unit.
    Rfm,
    /// Dilated backbone with and without the fusion and distribution modules.
    SfmDlm,
    /// Full model trained on the summed against the χ-weighted objective.
    Loss,
}

impl FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rfm" => Ok(Recipe::Rfm),
            "sfm_dlm" => Ok(Recipe::SfmDlm),
            "loss" => Ok(Recipe::Loss),
            _ => Err(Error::Config(format!(
                "unknown ablation recipe '{s}' (rfm, sfm_dlm, loss)"
            ))),
        }
    }
}

impl Recipe {
    /// Published full-scale MPII PCKh@0.5 means as `(baseline, treatment)`.
    /// The source quotes two different pairs for some recipes; both are kept.
    pub fn reference(self) -> &'static [(f64, f64)] {
        match self {
            Recipe::Rfm => &[(88.9, 89.6), (88.9, 89.9)],
            Recipe::SfmDlm => &[(88.9, 89.7), (88.9, 90.1)],
            Recipe::Loss => &[(89.3, 90.1)],
        }
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Recipe::Rfm => "rfm",
            Recipe::SfmDlm => "sfm_dlm",
            Recipe::Loss => "loss",
        })
    }
}

#[derive(Debug, Clone)]
pub struct Arm {
    pub label: String,
    pub slug: &'static str,
    pub cfg: RunConfig,
}

/// Baseline arm first, treatment second.
pub fn arms(recipe: Recipe, base: &RunConfig) -> [Arm; 2] {
    let with = |slug: &'static str, label: &str, f: &dyn Fn(&mut RunConfig)| {
        let mut cfg = base.clone();
        f(&mut cfg);
        Arm {
            label: label.to_string(),
            slug,
            cfg,
        }
    };
    match recipe {
        Recipe::Rfm => [
            with("basic", "Hourglass (basicblock)", &|c| {
                c.fusion = false;
                c.unit = UnitKind::Basic;
            }),
            with("rfm", "Hourglass + RFM", &|c| {
                c.fusion = false;
                c.unit = UnitKind::Dilated;
            }),
        ],
        Recipe::SfmDlm => [
            with("no_fusion", "RFM", &|c| {
                c.unit = UnitKind::Dilated;
                c.fusion = false;
            }),
            with("fusion", "RFM + SFM + DLM", &|c| {
                c.unit = UnitKind::Dilated;
                c.fusion = true;
            }),
        ],
        Recipe::Loss => {
            let form = |f: LossForm| ChiSetting { form: f, ..base.chi };
            [
                with("sum", LossForm::Sum.label(), &|c| {
                    c.fusion = true;
                    c.chi = form(LossForm::Sum);
                }),
                with("chi", LossForm::Convex.label(), &|c| {
                    c.fusion = true;
                    c.chi = form(LossForm::Convex);
                }),
            ]
        }
    }
}

/// Parameters present in both models and whether every one of them matches bit for bit.
pub fn shared_init(a: &Model, b: &Model) -> (usize, bool) {
    let bp: HashMap<&str, &Tensor> = b.params().into_iter().map(|p| (p.name.as_str(), &p.value)).collect();
    let mut shared = 0;
    let mut equal = true;
    for p in a.params() {
        if let Some(t) = bp.get(p.name.as_str()) {
            shared += 1;
            let same = t.shape() == p.value.shape()
                && t.data()
                    .iter()
                    .zip(p.value.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits());
            equal &= same;
        }
    }
    (shared, equal)
}

/// Width of the region an impulse reaches through one unit's convolutional path.
///
/// Weights are set to positive constants and biases to zero so that no
/// contribution cancels; the extent is the bounding box of the response.
pub fn impulse_extent(unit: UnitConfig) -> Result<usize> {
    let channels = 2;
    let size = 4 * unit.dilation + 11;
    let mut u = Unit::new(&mut Init::new(0), "probe", channels, channels, unit);
    u.visit_mut(&mut |p| {
        let fill = if p.value.rank() == 4 { 0.1 } else { 0.0 };
        p.value.data_mut().fill(fill);
    });
    let mut x = Tensor::zeros(&[1, channels, size, size]);
    x.set(&[0, 0, size / 2, size / 2], 1.0);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let y = u.spatial_response(&mut g, xv)?;
    let y = g.sum(y, Some(1))?;
    let pts = support(g.value(y), 0.0);
    let width = |f: fn(&(usize, usize)) -> usize| {
        let lo = pts.iter().map(f).min().unwrap_or(0);
        let hi = pts.iter().map(f).max().unwrap_or(0);
        if pts.is_empty() {
            0
        } else {
            hi - lo + 1
        }
    };
    Ok(width(|p| p.0).max(width(|p| p.1)))
}

#[derive(Debug, Clone)]
pub struct ArmResult {
    pub label: String,
    pub scores: Vec<f64>,
    /// Impulse extent of the backbone unit.
    pub extent: usize,
}

impl ArmResult {
    pub fn mean(&self) -> f64 {
        self.scores.iter().sum::<f64>() / self.scores.len().max(1) as f64
    }
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub recipe: Recipe,
    pub seeds: Vec<u64>,
    pub rows: [ArmResult; 2],
    pub shared_params: usize,
    pub init_matches: bool,
}

impl AblationReport {
    /// Treatment minus baseline mean score.
    pub fn delta(&self) -> f64 {
        self.rows[1].mean() - self.rows[0].mean()
    }

    pub fn format(&self, metric: &str) -> String {
        let mut s = format!("ablation {} ({metric}, seeds {:?})\n", self.recipe, self.seeds);
        s.push_str(&format!("{:<28} {:>8} {:>7}  per-seed\n", "arm", "mean", "extent"));
        for r in &self.rows {
            let per: Vec<String> = r.scores.iter().map(|v| format!("{v:.4}")).collect();
            s.push_str(&format!(
                "{:<28} {:>8.4} {:>7}  {}\n",
                r.label,
                r.mean(),
                r.extent,
                per.join(" ")
            ));
        }
        s.push_str(&format!(
            "delta {:+.2} pt; {} shared parameters, identical init: {}\n",
            100.0 * self.delta(),
            self.shared_params,
            self.init_matches
        ));
        for (i, (a, b)) in self.recipe.reference().iter().enumerate() {
            let what = if i == 0 {
                "reference MPII PCKh@0.5"
            } else {
                "also quoted as"
            };
            s.push_str(&format!("{what}: {a:.1} -> {b:.1} ({:+.1} pt)\n", b - a));
        }
        s
    }
}

/// Trains both arms for `seeds` consecutive seeds starting at the base seed.
pub fn run_ablation(
    recipe: Recipe,
    base: &RunConfig,
    seeds: usize,
    progress: &mut dyn FnMut(&str, u64, &EpochReport),
) -> Result<AblationReport> {
    if seeds == 0 {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let arms = arms(recipe, base);
    for a in &arms {
        a.cfg.validate()?;
    }
    let seed_list: Vec<u64> = (0..seeds as u64).map(|k| base.seed + k).collect();
    let (shared_params, init_matches) = {
        let a = Model::from_run(&arms[0].cfg)?;
        let b = Model::from_run(&arms[1].cfg)?;
        shared_init(&a, &b)
    };
    let mut rows = Vec::new();
    for arm in &arms {
        let mut scores = Vec::new();
        for &seed in &seed_list {
            let mut cfg = arm.cfg.clone();
            cfg.seed = seed;
            cfg.out = base
                .out
                .join(recipe.to_string())
                .join(arm.slug)
                .join(format!("seed{seed}"));
            let summary = train(&cfg, &mut |r| progress(arm.slug, seed, r))?;
            scores.push(summary.final_score());
        }
        rows.push(ArmResult {
            label: arm.label.clone(),
            scores,
            extent: impulse_extent(arm.cfg.hourglass().unit)?,
        });
    }
    let rows: [ArmResult; 2] = rows.try_into().expect("two arms");
    Ok(AblationReport {
        recipe,
        seeds: seed_list,
        rows,
        shared_params,
        init_matches,
    })
}
