//! Registry of finite-difference checks over every primitive and block at toy shapes.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, HourglassConfig};
use crate::dlm::{mixture_density, rasterize_h2, rle_loss, Coupling, DensityConfig, Flow, FlowMoments, HeadOutput};
use crate::error::Result;
use crate::gradcheck::{grad_check, grad_check_module, GradCheckOptions, GradCheckReport, DEFAULT_TOLERANCE};
use crate::graph::{Graph, Var};
use crate::init::Init;
use crate::losses::{combine, mse_h1, mse_h2, LossForm};
use crate::nn::{
    basic_block, dilated_residual_block, se_gate, BasicBlockParams, Conv2d, ConvSpec, DilatedResidualBlockParams,
    SEParams, UnitConfig, UnitKind,
};
use crate::sfm::{
    classification_head, global_attention, local_attention, ClassificationHeadParams, GlobalAttentionParams, LocalAxis,
};
use crate::tensor::Tensor;

/// Probes per leaf for block-level cases.
const BLOCK_PROBES: usize = 32;

pub struct GradCase {
    pub name: &'static str,
    /// A single graph primitive rather than a composed block.
    pub primitive: bool,
    run: fn(&GradCheckOptions) -> Result<GradCheckReport>,
}

impl GradCase {
    pub fn run(&self, opts: &GradCheckOptions) -> Result<GradCheckReport> {
        (self.run)(opts)
    }
}

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub name: &'static str,
    pub max_error: f64,
    pub probes: usize,
    pub seconds: f64,
    /// Set when the case could not be evaluated at all.
    pub failure: Option<String>,
}

impl CaseResult {
    pub fn passed(&self, tol: f64) -> bool {
        self.failure.is_none() && self.max_error < tol
    }
}

fn uniform(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values in `±[0.1, 1]`, away from the kinks of relu and max.
fn signed(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Reduces `v` to a scalar with fixed random weights so every output element matters.
fn project(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let w = g.constant(uniform(g.shape(v), seed ^ 0xABCD, -1.0, 1.0));
    let p = g.mul(v, w)?;
    Ok(g.sum_all(p))
}

fn leaves_only(
    opts: &GradCheckOptions,
    inputs: &[Tensor],
    f: fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    grad_check(f, inputs, opts)
}

fn limited(opts: &GradCheckOptions) -> GradCheckOptions {
    GradCheckOptions {
        max_probes: Some(opts.max_probes.unwrap_or(BLOCK_PROBES)),
        ..opts.clone()
    }
}

macro_rules! unary {
    ($name:literal, $method:ident, $input:expr) => {
        GradCase {
            name: $name,
            primitive: true,
            run: |o| {
                leaves_only(o, &[$input], |g, v| {
                    let y = g.$method(v[0]);
                    project(g, y, 1)
                })
            },
        }
    };
}

macro_rules! binary {
    ($name:literal, $method:ident, $a:expr, $b:expr) => {
        GradCase {
            name: $name,
            primitive: true,
            run: |o| {
                leaves_only(o, &[$a, $b], |g, v| {
                    let y = g.$method(v[0], v[1])?;
                    project(g, y, 1)
                })
            },
        }
    };
}

fn primitives() -> Vec<GradCase> {
    vec![
        // Broadcasting is exercised by giving the second operand a size-1 axis.
        binary!("add", add, signed(&[2, 3], 1), signed(&[1, 3], 2)),
        binary!("sub", sub, signed(&[2, 3], 3), signed(&[2, 1], 4)),
        binary!("mul", mul, signed(&[2, 3], 5), signed(&[1, 3], 6)),
        binary!("div", div, signed(&[2, 3], 7), uniform(&[2, 1], 8, 0.5, 2.0)),
        GradCase {
            name: "affine_scale_shift",
            primitive: true,
            run: |o| {
                leaves_only(o, &[signed(&[4], 9)], |g, v| {
                    let y = g.affine(v[0], -1.7, 0.3);
                    project(g, y, 1)
                })
            },
        },
        binary!("matmul", matmul, signed(&[3, 4], 10), signed(&[4, 2], 11)),
        unary!("relu", relu, signed(&[6], 12)),
        unary!("sigmoid", sigmoid, signed(&[6], 13)),
        unary!("tanh", tanh, signed(&[6], 14)),
        unary!("softplus", softplus, signed(&[6], 15)),
        unary!("exp", exp, signed(&[6], 16)),
        unary!("log", log, uniform(&[6], 17, 0.2, 3.0)),
        GradCase {
            name: "softmax",
            primitive: true,
            run: |o| {
                leaves_only(o, &[signed(&[2, 3, 4], 18)], |g, v| {
                    let y = g.softmax(v[0], 1)?;
                    project(g, y, 1)
                })
            },
        },
        GradCase {
            name: "sum",
            primitive: true,
            run: |o| {
                leaves_only(o, &[signed(&[2, 3, 4], 19)], |g, v| {
                    let y = g.sum(v[0], Some(1))?;
                    project(g, y, 1)
                })
            },
        },
        GradCase {
            name: "mean",
            primitive: true,
            run: |o| {
                leaves_only(o, &[signed(&[2, 3, 4], 20)], |g, v| {
                    let y = g.mean(v[0], Some(2))?;
                    project(g, y, 1)
                })
            },
        },
        GradCase {
            name: "max",
            primitive: true,
            run: |o| {
                leaves_only(o, &[signed(&[3, 5], 21)], |g, v| {
                    let y = g.max(v[0], 1)?;
                    project(g, y, 1)
                })
            },
        },
        GradCase {
            name: "reshape",
            primitive: true,
            run: |o| {
                leaves_only(o, &[signed(&[2, 6], 22)], |g, v| {
                    let y = g.reshape(v[0], &[3, 4])?;
                    project(g, y, 1)
                })
            },
        },
        GradCase {
            name: "nearest_upsample",
            primitive: true,
            run: |o| {
                leaves_only(o, &[signed(&[1, 2, 3, 3], 23)], |g, v| {
                    let y = g.upsample_nearest(v[0], 2)?;
                    project(g, y, 1)
                })
            },
        },
        GradCase {
            name: "maxpool2d",
            primitive: true,
            run: |o| {
                leaves_only(o, &[signed(&[1, 2, 4, 4], 24)], |g, v| {
                    let y = g.maxpool2(v[0])?;
                    project(g, y, 1)
                })
            },
        },
        GradCase {
            name: "global_avg_pool",
            primitive: true,
            run: |o| {
                leaves_only(o, &[signed(&[2, 3, 3, 3], 25)], |g, v| {
                    let y = g.global_avg_pool(v[0])?;
                    project(g, y, 1)
                })
            },
        },
        GradCase {
            name: "concat",
            primitive: true,
            run: |o| {
                leaves_only(o, &[signed(&[2, 1, 3], 26), signed(&[2, 2, 3], 27)], |g, v| {
                    let y = g.concat(&[v[0], v[1]], 1)?;
                    project(g, y, 1)
                })
            },
        },
        GradCase {
            name: "slice",
            primitive: true,
            run: |o| {
                leaves_only(o, &[signed(&[2, 5, 3], 28)], |g, v| {
                    let y = g.slice(v[0], 1, 1, 3)?;
                    project(g, y, 1)
                })
            },
        },
        GradCase {
            name: "conv2d",
            primitive: true,
            run: |o| {
                leaves_only(o, &[signed(&[2, 2, 5, 5], 29), signed(&[3, 2, 3, 3], 30)], |g, v| {
                    let y = g.conv2d(v[0], v[1], 1, 1, 1)?;
                    project(g, y, 1)
                })
            },
        },
    ]
}

fn blocks() -> Vec<GradCase> {
    vec![
        GradCase {
            name: "conv2d_dilated",
            primitive: false,
            run: |o| {
                leaves_only(o, &[signed(&[1, 2, 7, 7], 40), signed(&[2, 2, 3, 3], 41)], |g, v| {
                    let y = g.conv2d(v[0], v[1], 1, 2, 2)?;
                    project(g, y, 1)
                })
            },
        },
        GradCase {
            name: "conv2d_strided",
            primitive: false,
            run: |o| {
                leaves_only(o, &[signed(&[1, 2, 6, 6], 42), signed(&[2, 2, 3, 3], 43)], |g, v| {
                    let y = g.conv2d(v[0], v[1], 2, 1, 1)?;
                    project(g, y, 1)
                })
            },
        },
        GradCase {
            name: "se_gate",
            primitive: false,
            run: |o| {
                let mut p = SEParams::new(&mut Init::new(1), "se", 8, 4);
                grad_check_module(
                    |g, p: &SEParams, v| {
                        let y = se_gate(g, v[0], p)?;
                        project(g, y, 1)
                    },
                    &mut p,
                    &[signed(&[2, 8, 3, 3], 44)],
                    &limited(o),
                )
            },
        },
        GradCase {
            name: "basic_block",
            primitive: false,
            run: |o| {
                let mut p = BasicBlockParams::new(&mut Init::new(2), "bb", 3, 4);
                grad_check_module(
                    |g, p: &BasicBlockParams, v| {
                        let y = basic_block(g, v[0], p)?;
                        project(g, y, 1)
                    },
                    &mut p,
                    &[signed(&[1, 3, 5, 5], 45)],
                    &limited(o),
                )
            },
        },
        GradCase {
            name: "dilated_residual_block",
            primitive: false,
            run: |o| {
                let mut p = DilatedResidualBlockParams::new(&mut Init::new(3), "drb", 3, 4, 2, 2);
                grad_check_module(
                    |g, p: &DilatedResidualBlockParams, v| {
                        let y = dilated_residual_block(g, v[0], p)?;
                        project(g, y, 1)
                    },
                    &mut p,
                    &[signed(&[1, 3, 6, 6], 46)],
                    &limited(o),
                )
            },
        },
        GradCase {
            name: "hourglass",
            primitive: false,
            run: |o| {
                let cfg = HourglassConfig {
                    stacks: 1,
                    depth: 2,
                    base_channels: 8,
                    joints: 2,
                    heatmap_size: 4,
                    unit: UnitConfig {
                        kind: UnitKind::Dilated,
                        ..Default::default()
                    },
                };
                let mut bb = Backbone::new(&mut Init::new(4), cfg)?;
                grad_check_module(
                    |g, bb: &Backbone, v| {
                        let out = bb.forward(g, v[0])?;
                        project(g, out.h1[0], 1)
                    },
                    &mut bb,
                    &[uniform(&[1, 3, 16, 16], 47, 0.0, 1.0)],
                    &limited(o),
                )
            },
        },
        GradCase {
            name: "global_attention",
            primitive: false,
            run: |o| {
                let channels = [2, 3, 4, 4];
                let mut p = GlobalAttentionParams::new(&mut Init::new(5), "ga", &channels, 4);
                let inputs: Vec<Tensor> = channels
                    .iter()
                    .enumerate()
                    .map(|(n, &c)| signed(&[1, c, 8 >> n, 8 >> n], 48 + n as u64))
                    .collect();
                grad_check_module(
                    |g, p: &GlobalAttentionParams, v| {
                        let out = global_attention(g, v, p)?;
                        let mut acc = project(g, out.weights, 2)?;
                        for (n, &f) in out.fused.iter().enumerate() {
                            let t = project(g, f, 3 + n as u64)?;
                            acc = g.add(acc, t)?;
                        }
                        Ok(acc)
                    },
                    &mut p,
                    &inputs,
                    &limited(o),
                )
            },
        },
        GradCase {
            name: "local_attention",
            primitive: false,
            run: |o| {
                let mut down = Conv2d::new(&mut Init::new(6), "down", ConvSpec::same(2, 3, 3, 1).strided(2));
                grad_check_module(
                    |g, down: &Conv2d, v| {
                        let rows = local_attention(g, v[0], v[1], down, LocalAxis::Rows)?;
                        let cols = local_attention(g, v[0], v[1], down, LocalAxis::Columns)?;
                        let a = project(g, rows, 1)?;
                        let b = project(g, cols, 2)?;
                        g.add(a, b)
                    },
                    &mut down,
                    &[signed(&[1, 2, 6, 6], 52), signed(&[1, 3, 3, 3], 53)],
                    &limited(o),
                )
            },
        },
        GradCase {
            name: "classification_head",
            primitive: false,
            run: |o| {
                let channels = [2, 3, 4, 4];
                let mut p = ClassificationHeadParams::new(&mut Init::new(7), "head", &channels);
                let inputs: Vec<Tensor> = channels
                    .iter()
                    .enumerate()
                    .map(|(n, &c)| signed(&[1, c, 8 >> n, 8 >> n], 54 + n as u64))
                    .collect();
                grad_check_module(
                    |g, p: &ClassificationHeadParams, v| {
                        let y = classification_head(g, v, p, LocalAxis::Rows)?;
                        project(g, y, 1)
                    },
                    &mut p,
                    &inputs,
                    &limited(o),
                )
            },
        },
        GradCase {
            name: "flow_coupling",
            primitive: false,
            run: |o| {
                let mut c = Coupling::new(&mut Init::new(8), "coupling", 1);
                grad_check_module(
                    |g, c: &Coupling, v| {
                        let (x, ld) = c.forward(g, [v[0], v[1]])?;
                        let (z, ild) = c.inverse(g, x)?;
                        let mut acc = project(g, x[1], 1)?;
                        for (k, t) in [ld, z[0], z[1], ild].into_iter().enumerate() {
                            let p = project(g, t, 2 + k as u64)?;
                            acc = g.add(acc, p)?;
                        }
                        Ok(acc)
                    },
                    &mut c,
                    &[signed(&[5, 1], 58), signed(&[5, 1], 59)],
                    &limited(o),
                )
            },
        },
        GradCase {
            name: "flow_log_prob",
            primitive: false,
            run: |o| {
                let mut f = Flow::new(&mut Init::new(9), "flow", 2);
                grad_check_module(
                    |g, f: &Flow, v| {
                        let lp = f.log_prob(g, [v[0], v[1]])?;
                        project(g, lp, 1)
                    },
                    &mut f,
                    &[signed(&[5, 1], 60), signed(&[5, 1], 61)],
                    &limited(o),
                )
            },
        },
        GradCase {
            name: "mixture_density",
            primitive: false,
            run: |o| {
                let mut f = Flow::new(&mut Init::new(10), "flow", 2);
                grad_check_module(
                    |g, f: &Flow, v| {
                        let m = FlowMoments {
                            mean: [0.1, -0.2],
                            std: [1.3, 0.8],
                            degenerate: false,
                        };
                        let d = mixture_density(g, f, [v[0], v[1]], &m, DensityConfig::default())?;
                        project(g, d, 1)
                    },
                    &mut f,
                    &[signed(&[5, 1], 62), signed(&[5, 1], 63)],
                    &limited(o),
                )
            },
        },
        GradCase {
            name: "rasterize_h2",
            primitive: false,
            run: |o| {
                let mut f = Flow::new(&mut Init::new(11), "flow", 2);
                let mu = uniform(&[1, 2, 2], 64, 1.0, 5.0);
                let sigma = uniform(&[1, 2, 2], 65, 0.8, 2.0);
                grad_check_module(
                    |g, f: &Flow, v| {
                        let heads = HeadOutput { mu: v[0], sigma: v[1] };
                        let h = rasterize_h2(g, heads, f, &FlowMoments::STANDARD, DensityConfig::default(), 6)?;
                        project(g, h, 1)
                    },
                    &mut f,
                    &[mu, sigma],
                    &limited(o),
                )
            },
        },
        GradCase {
            name: "rle_loss",
            primitive: false,
            run: |o| {
                let mut f = Flow::new(&mut Init::new(12), "flow", 2);
                grad_check_module(
                    |g, f: &Flow, v| rle_loss(g, f, v[0], v[1], v[2]),
                    &mut f,
                    &[signed(&[4, 2], 66), signed(&[4, 2], 67), uniform(&[4, 2], 68, 0.5, 2.0)],
                    &limited(o),
                )
            },
        },
        GradCase {
            name: "mse_h1",
            primitive: false,
            run: |o| {
                leaves_only(o, &[signed(&[2, 2, 3, 3], 69), signed(&[2, 2, 3, 3], 70)], |g, v| {
                    mse_h1(g, v[0], v[1], &[true, false, true, true])
                })
            },
        },
        GradCase {
            name: "mse_h2",
            primitive: false,
            run: |o| {
                leaves_only(o, &[signed(&[2, 2, 3, 3], 71), signed(&[2, 2, 3, 3], 72)], |g, v| {
                    mse_h2(g, v[0], v[1], &[true; 4])
                })
            },
        },
        GradCase {
            name: "combined_loss",
            primitive: false,
            run: |o| {
                leaves_only(
                    o,
                    &[
                        signed(&[1, 2, 3, 3], 73),
                        signed(&[1, 2, 3, 3], 74),
                        signed(&[1, 2, 3, 3], 75),
                    ],
                    |g, v| {
                        let vis = [true, true];
                        let l1 = mse_h1(g, v[0], v[1], &vis)?;
                        let l2 = mse_h2(g, v[0], v[2], &vis)?;
                        let a = combine(g, l1, l2, 0.3, LossForm::Convex)?;
                        let b = combine(g, l1, l2, 0.3, LossForm::Swapped)?;
                        let c = combine(g, l1, l2, 0.3, LossForm::Sum)?;
                        let ab = g.add(a, b)?;
                        g.add(ab, c)
                    },
                )
            },
        },
    ]
}

/// Every registered case, primitives first.
pub fn registry() -> Vec<GradCase> {
    let mut all = primitives();
    all.extend(blocks());
    all
}

/// Runs the cases whose name contains `filter` (all when `None`).
pub fn run_suite(filter: Option<&str>, opts: &GradCheckOptions) -> Vec<CaseResult> {
    registry()
        .iter()
        .filter(|c| filter.is_none_or(|f| c.name.contains(f)))
        .map(|c| {
            let t = Instant::now();
            let r = c.run(opts);
            let seconds = t.elapsed().as_secs_f64();
            match r {
                Ok(rep) => CaseResult {
                    name: c.name,
                    max_error: rep.max_error(),
                    probes: rep.leaves.iter().map(|l| l.probes).sum(),
                    seconds,
                    failure: None,
                },
                Err(e) => CaseResult {
                    name: c.name,
                    max_error: f64::INFINITY,
                    probes: 0,
                    seconds,
                    failure: Some(e.to_string()),
                },
            }
        })
        .collect()
}

/// One line per case plus a summary.
pub fn format_report(results: &[CaseResult], tol: f64) -> String {
    let mut s = String::new();
    for r in results {
        let status = if r.passed(tol) { "PASS" } else { "FAIL" };
        match &r.failure {
            Some(e) => s.push_str(&format!("{status} {:<24} error: {e}\n", r.name)),
            None => s.push_str(&format!(
                "{status} {:<24} max_rel_err {:.3e} probes {:>4} {:.2}s\n",
                r.name, r.max_error, r.probes, r.seconds
            )),
        }
    }
    let failed = results.iter().filter(|r| !r.passed(tol)).count();
    s.push_str(&format!(
        "{} cases, {failed} failed, tolerance {tol:e}\n",
        results.len()
    ));
    s
}

pub fn default_tolerance() -> f64 {
    DEFAULT_TOLERANCE
}
