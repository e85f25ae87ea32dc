//! Central finite-difference verification of recorded gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::{Module, Param, Tensor};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Probe at most this many coordinates per leaf (sampled with `seed`).
    pub max_probes: Option<usize>,
    pub seed: u64,
    pub fault: Option<&'static str>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            max_probes: None,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeafReport {
    pub name: String,
    pub probes: usize,
    /// max |analytic - numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradCheckReport {
    pub leaves: Vec<LeafReport>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.leaves.iter().map(|l| l.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_error() < tol
    }
}

impl Module for () {
    fn visit<'a>(&'a self, _: &mut dyn FnMut(&'a Param)) {}
    fn visit_mut(&mut self, _: &mut dyn FnMut(&mut Param)) {}
}

/// Checks `f` with respect to free input leaves only.
pub fn grad_check<F>(f: F, leaves: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut unit = ();
    grad_check_module(|g, _: &(), vars| f(g, vars), &mut unit, leaves, opts)
}

/// Checks `f` with respect to both the input leaves and every parameter of `module`.
pub fn grad_check_module<M, F>(
    f: F,
    module: &mut M,
    inputs: &[Tensor],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    M: Module,
    F: Fn(&mut Graph, &M, &[Var]) -> Result<Var>,
{
    let eval = |module: &M, inputs: &[Tensor], record: bool| -> Result<(f64, Option<Graph>, Vec<Var>)> {
        let mut g = Graph::new();
        if let Some(op) = opts.fault {
            g.inject_backward_fault(op);
        }
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = f(&mut g, module, &vars)?;
        g.check_finite()?;
        let value = g.scalar(loss);
        if record {
            g.backward(loss)?;
            Ok((value, Some(g), vars))
        } else {
            Ok((value, None, vars))
        }
    };

    let (_, graph, vars) = eval(module, inputs, true)?;
    let graph = graph.expect("recorded");
    graph.store_grads(module);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probes_for = |len: usize| -> Vec<usize> {
        match opts.max_probes {
            Some(k) if k < len => {
                let mut idx = sample(&mut rng, len, k).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..len).collect(),
        }
    };
    let h = opts.step;
    let mut report = GradCheckReport::default();

    let mut work: Vec<Tensor> = inputs.to_vec();
    for (li, var) in vars.iter().enumerate() {
        let analytic = graph.grad_tensor(*var);
        let mut worst: f64 = 0.0;
        let idx = probes_for(work[li].numel());
        for &k in &idx {
            let orig = work[li].data()[k];
            work[li].data_mut()[k] = orig + h;
            let plus = eval(module, &work, false)?.0;
            work[li].data_mut()[k] = orig - h;
            let minus = eval(module, &work, false)?.0;
            work[li].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max((analytic.data()[k] - numeric).abs() / numeric.abs().max(1.0));
        }
        report.leaves.push(LeafReport {
            name: format!("input[{li}]"),
            probes: idx.len(),
            max_rel_error: worst,
        });
    }

    let names: Vec<String> = module.params().iter().map(|p| p.name.clone()).collect();
    for name in names {
        let mut analytic = None;
        let mut len = 0;
        module.visit_mut(&mut |p| {
            if p.name == name {
                len = p.value.numel();
                analytic = p.value.grad.clone();
            }
        });
        let analytic = analytic.unwrap_or_else(|| vec![0.0; len]);
        let idx = probes_for(len);
        let mut worst: f64 = 0.0;
        for &k in &idx {
            let mut orig = 0.0;
            let mut set = |m: &mut M, delta: Option<f64>| {
                m.visit_mut(&mut |p| {
                    if p.name == name {
                        match delta {
                            Some(d) => p.value.data_mut()[k] = orig + d,
                            None => orig = p.value.data()[k],
                        }
                    }
                })
            };
            set(module, None);
            set(module, Some(h));
            let plus = eval(module, &work, false)?.0;
            set(module, Some(-h));
            let minus = eval(module, &work, false)?.0;
            set(module, Some(0.0));
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max((analytic[k] - numeric).abs() / numeric.abs().max(1.0));
        }
        report.leaves.push(LeafReport {
            name,
            probes: idx.len(),
            max_rel_error: worst,
        });
    }
    Ok(report)
}
