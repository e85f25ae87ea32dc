//! Heatmap regression losses and the χ-weighted combination of the
//! backbone and learnable-heatmap terms.

use std::fmt;
use std::str::FromStr;

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Mean squared error between two `[N,J,S,S]` stacks over visible joints.
///
/// `visible` is indexed `n * J + j`; hidden joints contribute nothing and the
/// sum is divided by `visible_count * S * S`.
pub fn mse_heatmaps(g: &mut Graph, a: Var, b: Var, visible: &[bool]) -> Result<Var> {
    let s = g.shape(a).to_vec();
    if s.len() != 4 || g.shape(b) != s.as_slice() {
        return Err(shape_err(
            "mse",
            format!("heatmap shapes must match as [N,J,S,S], got {s:?} and {:?}", g.shape(b)),
        ));
    }
    let (n, j) = (s[0], s[1]);
    if visible.len() != n * j {
        return Err(shape_err(
            "mse",
            format!("visibility has {} entries, expected {}", visible.len(), n * j),
        ));
    }
    let count = visible.iter().filter(|&&v| v).count();
    let d = g.sub(a, b)?;
    let sq = g.square(d);
    if count == 0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let masked = if count == visible.len() {
        sq
    } else {
        let mask = g.constant(Tensor::from_fn(&[n, j, 1, 1], |k| if visible[k] { 1.0 } else { 0.0 }));
        g.mul(sq, mask)?
    };
    let total = g.sum_all(masked);
    Ok(g.scale(total, 1.0 / (count * s[2] * s[3]) as f64))
}

/// Backbone prediction against the fixed Gaussian target.
pub fn mse_h1(g: &mut Graph, h1: Var, target: Var, visible: &[bool]) -> Result<Var> {
    mse_heatmaps(g, h1, target, visible)
}

/// Backbone prediction against the learnable heatmaps; gradients reach both.
pub fn mse_h2(g: &mut Graph, h1: Var, h2: Var, visible: &[bool]) -> Result<Var> {
    mse_heatmaps(g, h1, h2, visible)
}

/// Where the weight χ comes from.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum ChiMode {
    /// Batch mean of the predicted spreads divided by the heatmap size, detached and clamped to `[0, 1]`.
    #[default]
    Sigma,
    Fixed(f64),
}

/// How χ weights the two terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossForm {
    /// `(1 - χ) L1 + χ L2`.
    #[default]
    Convex,
    /// `χ L1 + (1 - χ) L2`.
    Swapped,
    /// `L1 + L2`.
    Sum,
}

impl LossForm {
    /// Coefficients on `(L1, L2)`.
    pub fn weights(self, chi: f64) -> (f64, f64) {
        match self {
            LossForm::Convex => (1.0 - chi, chi),
            LossForm::Swapped => (chi, 1.0 - chi),
            LossForm::Sum => (1.0, 1.0),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            LossForm::Convex => "(1-chi)*L_H1 + chi*L_H2",
            LossForm::Swapped => "chi*L_H1 + (1-chi)*L_H2",
            LossForm::Sum => "L_H1 + L_H2",
        }
    }
}

/// Parsed `chi_mode` setting: `sigma`, `fixed:<v>`, `swapped` or `sum`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ChiSetting {
    pub mode: ChiMode,
    pub form: LossForm,
}

impl FromStr for ChiSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let setting = |mode, form| Ok(ChiSetting { mode, form });
        match s {
            "sigma" => setting(ChiMode::Sigma, LossForm::Convex),
            "swapped" => setting(ChiMode::Sigma, LossForm::Swapped),
            "sum" => setting(ChiMode::Sigma, LossForm::Sum),
            _ => {
                let v = s
                    .strip_prefix("fixed:")
                    .ok_or_else(|| Error::Config(format!("unknown chi mode '{s}'")))?;
                let v: f64 = v.parse().map_err(|_| Error::Config(format!("bad chi value '{v}'")))?;
                check_chi(v)?;
                setting(ChiMode::Fixed(v), LossForm::Convex)
            }
        }
    }
}

impl fmt::Display for ChiSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.mode, self.form) {
            (ChiMode::Fixed(v), _) => write!(f, "fixed:{v}"),
            (ChiMode::Sigma, LossForm::Convex) => write!(f, "sigma"),
            (ChiMode::Sigma, LossForm::Swapped) => write!(f, "swapped"),
            (ChiMode::Sigma, LossForm::Sum) => write!(f, "sum"),
        }
    }
}

pub fn check_chi(chi: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&chi) {
        return Err(Error::Invalid(format!("chi must lie in [0, 1], got {chi}")));
    }
    Ok(())
}

/// χ from predicted spreads (grid units) on a `size x size` grid.
pub fn chi_from_sigma(sigma: &[f64], size: usize) -> f64 {
    if sigma.is_empty() {
        return 0.0;
    }
    let mean = sigma.iter().sum::<f64>() / sigma.len() as f64;
    (mean / size as f64).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_h1: f64,
    pub l_h2: f64,
    pub chi: f64,
    pub total: f64,
}

/// `total = (1 - χ) l_h1 + χ l_h2`.
pub fn combined_loss(l_h1: f64, l_h2: f64, chi: f64) -> Result<LossBreakdown> {
    combined_loss_with(l_h1, l_h2, chi, LossForm::Convex)
}

pub fn combined_loss_with(l_h1: f64, l_h2: f64, chi: f64, form: LossForm) -> Result<LossBreakdown> {
    check_chi(chi)?;
    let (a, b) = form.weights(chi);
    Ok(LossBreakdown {
        l_h1,
        l_h2,
        chi,
        total: a * l_h1 + b * l_h2,
    })
}

/// Graph version of [`combined_loss_with`]; χ is a constant.
pub fn combine(g: &mut Graph, l_h1: Var, l_h2: Var, chi: f64, form: LossForm) -> Result<Var> {
    check_chi(chi)?;
    let (a, b) = form.weights(chi);
    let x = g.scale(l_h1, a);
    let y = g.scale(l_h2, b);
    g.add(x, y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        assert_eq!(combined_loss(2.0, 4.0, 0.0).unwrap().total, 2.0);
        assert_eq!(combined_loss(2.0, 4.0, 1.0).unwrap().total, 4.0);
        assert!((combined_loss(2.0, 4.0, 0.3).unwrap().total - 2.6).abs() < 1e-15);
        assert!(combined_loss(2.0, 4.0, 1.5).is_err());
        assert!(combined_loss(2.0, 4.0, -0.1).is_err());
    }

    #[test]
    fn chi_setting_round_trips() {
        for s in ["sigma", "swapped", "sum", "fixed:0", "fixed:1", "fixed:0.25"] {
            let c: ChiSetting = s.parse().unwrap();
            assert_eq!(c.to_string(), s);
        }
        assert!("fixed:2".parse::<ChiSetting>().is_err());
        assert!("median".parse::<ChiSetting>().is_err());
    }

    #[test]
    fn chi_is_clamped() {
        assert_eq!(chi_from_sigma(&[100.0], 16), 1.0);
        assert_eq!(chi_from_sigma(&[4.0, 4.0], 16), 0.25);
    }

    #[test]
    fn hidden_joints_are_masked() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_fn(&[1, 2, 2, 2], |k| k as f64));
        let b = g.leaf(Tensor::zeros(&[1, 2, 2, 2]));
        let l = mse_heatmaps(&mut g, a, b, &[false, true]).unwrap();
        assert_eq!(g.scalar(l), (16.0 + 25.0 + 36.0 + 49.0) / 4.0);
        let l = mse_heatmaps(&mut g, a, b, &[false, false]).unwrap();
        assert_eq!(g.scalar(l), 0.0);
    }
}
