//! Finite-difference checks of every differentiable operation.
//!
//! Each case draws a random instance per seed and scalarizes its output with
//! random weights, so no gradient coordinate vanishes by symmetry. Instances
//! whose unperturbed evaluation lies within `kink_threshold` of a selector
//! boundary (ReLU sign, pooling threshold, hardest-example tie) are redrawn.

use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::bfp::{bfp_pair, bfp_transform, correlation_maps, self_awareness, BfpParams};
use crate::error::{Error, Result};
use crate::losses::{batch_hard_triplet, label_smoothed_ce, SmoothingConfig, TripletConfig};
use crate::model::{train::training_loss, LossConfig, Model, ModelConfig};
use crate::nn::{Ctx, Mode, ParamStore};
use crate::pooling::{generalized_pool, multi_lambda_descriptor, GpConfig};
use crate::tensor::{finite_diff_check, Graph, Tensor, Var};

pub const PRIMITIVE_TOL: f64 = 1e-4;
pub const COMPOSITE_TOL: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SuiteConfig {
    pub seeds: u64,
    pub eps: f64,
    pub kink_threshold: f64,
    /// Redraws allowed per seed before the case is reported as failed.
    pub max_redraws: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seeds: 50,
            eps: 1e-5,
            kink_threshold: 1e-3,
            max_redraws: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub name: String,
    pub tolerance: f64,
    pub instances: usize,
    pub redraws: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

type Scalar = Box<dyn Fn(&mut Graph, Var) -> Result<Var>>;

/// A point to check and the function to differentiate there.
struct Instance {
    x: Tensor,
    f: Scalar,
}

struct Case {
    name: &'static str,
    tol: f64,
    draw: fn(&mut ChaCha8Rng) -> Instance,
}

fn randn(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(dims, 1.0, rng)
}

/// `Σ out ⊙ w` for fixed random `w` in `[0.5, 1.5)` with random signs.
fn weighted(g: &mut Graph, out: Var, w: &Tensor) -> Result<Var> {
    let w = g.constant(w.clone());
    let p = g.hadamard(out, w)?;
    Ok(g.sum(p))
}

fn weights(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(dims, |_| {
        let m = rng.gen_range(0.5..1.5);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Instance for `op(x, c)` with `x` the checked argument and `c` a constant.
fn binary(
    rng: &mut ChaCha8Rng,
    x_dims: &[usize],
    c_dims: &[usize],
    out_dims: &[usize],
    op: fn(&mut Graph, Var, Var) -> Result<Var>,
) -> Instance {
    let x = randn(x_dims, rng);
    let c = randn(c_dims, rng);
    let w = weights(out_dims, rng);
    Instance {
        x,
        f: Box::new(move |g, v| {
            let c = g.constant(c.clone());
            let y = op(g, v, c)?;
            weighted(g, y, &w)
        }),
    }
}

fn unary(rng: &mut ChaCha8Rng, dims: &[usize], out_dims: &[usize], op: fn(&mut Graph, Var) -> Result<Var>) -> Instance {
    let x = randn(dims, rng);
    let w = weights(out_dims, rng);
    Instance {
        x,
        f: Box::new(move |g, v| {
            let y = op(g, v)?;
            weighted(g, y, &w)
        }),
    }
}

/// Runs `body` on a context sharing the checker's graph.
fn with_ctx<T>(
    g: &mut Graph,
    store: &ParamStore,
    body: impl FnOnce(&mut Ctx<'_>) -> Result<T>,
) -> Result<T> {
    let mut ctx = Ctx::with_graph(std::mem::take(g), store, Mode::Train);
    let out = body(&mut ctx);
    *g = ctx.into_graph();
    out
}

fn bfp_store(rng: &mut ChaCha8Rng, da: usize, db: usize) -> (BfpParams, ParamStore) {
    let params = BfpParams::new("pair", da, db, 2, 3).expect("positive dims");
    let mut store = ParamStore::new();
    params.init(&mut store, true, rng).expect("fresh store");
    (params, store)
}

fn micro_model(rng: &mut ChaCha8Rng) -> Model {
    let cfg = ModelConfig {
        image_hw: (8, 8),
        stem_channels: 2,
        channels: [2, 2, 3],
        rank: 2,
        pool_dim: 3,
        num_classes: 3,
        ..ModelConfig::default()
    };
    Model::new(cfg, rng).expect("valid micro config")
}

fn cases() -> Vec<Case> {
    let p = PRIMITIVE_TOL;
    let c = COMPOSITE_TOL;
    vec![
        Case { name: "add", tol: p, draw: |r| binary(r, &[3, 4], &[3, 4], &[3, 4], |g, a, b| g.add(a, b)) },
        Case { name: "add_broadcast_operand", tol: p, draw: |r| binary(r, &[1, 4], &[3, 4], &[3, 4], |g, a, b| g.add(b, a)) },
        Case { name: "sub", tol: p, draw: |r| binary(r, &[3, 4], &[3, 4], &[3, 4], |g, a, b| g.sub(a, b)) },
        Case { name: "sub_broadcast_operand", tol: p, draw: |r| binary(r, &[3, 1], &[3, 4], &[3, 4], |g, a, b| g.sub(b, a)) },
        Case { name: "hadamard", tol: p, draw: |r| binary(r, &[2, 3], &[2, 3], &[2, 3], |g, a, b| g.hadamard(a, b)) },
        Case { name: "hadamard_broadcast_operand", tol: p, draw: |r| binary(r, &[2, 1, 3], &[2, 4, 3], &[2, 4, 3], |g, a, b| g.hadamard(b, a)) },
        Case { name: "scale", tol: p, draw: |r| unary(r, &[2, 3], &[2, 3], |g, a| Ok(g.scale(a, -1.7))) },
        Case { name: "add_scalar", tol: p, draw: |r| unary(r, &[2, 3], &[2, 3], |g, a| Ok(g.add_scalar(a, 0.4))) },
        Case { name: "matmul_left", tol: p, draw: |r| binary(r, &[3, 4], &[4, 2], &[3, 2], |g, a, b| g.matmul(a, b)) },
        Case { name: "matmul_right", tol: p, draw: |r| binary(r, &[4, 2], &[3, 4], &[3, 2], |g, a, b| g.matmul(b, a)) },
        Case { name: "matmul_shared_right", tol: p, draw: |r| binary(r, &[4, 2], &[2, 3, 4], &[2, 3, 2], |g, a, b| g.matmul(b, a)) },
        Case { name: "matmul_batched_left", tol: p, draw: |r| binary(r, &[2, 3, 4], &[2, 4, 2], &[2, 3, 2], |g, a, b| g.matmul(a, b)) },
        Case { name: "matmul_batched_right", tol: p, draw: |r| binary(r, &[2, 4, 2], &[2, 3, 4], &[2, 3, 2], |g, a, b| g.matmul(b, a)) },
        Case { name: "transpose", tol: p, draw: |r| unary(r, &[2, 3, 4], &[2, 4, 3], |g, a| g.transpose(a)) },
        Case { name: "reshape", tol: p, draw: |r| unary(r, &[2, 6], &[3, 4], |g, a| g.reshape(a, &[3, 4])) },
        Case { name: "relu", tol: p, draw: |r| unary(r, &[3, 4], &[3, 4], |g, a| Ok(g.relu(a))) },
        Case { name: "sigmoid", tol: p, draw: |r| unary(r, &[3, 4], &[3, 4], |g, a| Ok(g.sigmoid(a))) },
        Case { name: "softmax_columns", tol: p, draw: |r| unary(r, &[2, 3, 4], &[2, 3, 4], |g, a| g.softmax_columns(a)) },
        Case { name: "sum", tol: p, draw: |r| unary(r, &[2, 3], &[], |g, a| Ok(g.sum(a))) },
        Case { name: "mean", tol: p, draw: |r| unary(r, &[2, 3], &[], |g, a| Ok(g.mean(a))) },
        Case { name: "concat_columns", tol: p, draw: |r| binary(r, &[3, 2], &[3, 4], &[3, 6], |g, a, b| g.concat_columns(&[b, a])) },
        Case { name: "conv2d_input", tol: p, draw: |r| binary(r, &[2, 2, 5, 4], &[3, 2, 3, 3], &[2, 3, 5, 4], |g, a, b| g.conv2d(a, b, None, 1, 1)) },
        Case { name: "conv2d_weight", tol: p, draw: |r| binary(r, &[3, 2, 3, 3], &[2, 2, 5, 4], &[2, 3, 3, 2], |g, a, b| g.conv2d(b, a, None, 2, 1)) },
        Case {
            name: "conv2d_bias",
            tol: p,
            draw: |r| {
                let x = randn(&[3], r);
                let input = randn(&[2, 2, 4, 4], r);
                let w = randn(&[3, 2, 3, 3], r);
                let wt = weights(&[2, 3, 2, 2], r);
                Instance {
                    x,
                    f: Box::new(move |g, b| {
                        let i = g.constant(input.clone());
                        let w = g.constant(w.clone());
                        let y = g.conv2d(i, w, Some(b), 2, 1)?;
                        weighted(g, y, &wt)
                    }),
                }
            },
        },
        Case { name: "batch_norm_input", tol: p, draw: |r| unary(r, &[5, 3], &[5, 3], |g, a| {
            let gamma = g.constant(Tensor::new(vec![3], vec![0.5, 1.5, -1.0])?);
            let beta = g.constant(Tensor::new(vec![3], vec![0.1, 0.0, -0.2])?);
            Ok(g.batch_norm(a, gamma, beta)?.0)
        }) },
        Case { name: "batch_norm_gamma", tol: p, draw: |r| binary(r, &[3], &[5, 3], &[5, 3], |g, gamma, x| {
            let beta = g.constant(Tensor::zeros(&[3]));
            Ok(g.batch_norm(x, gamma, beta)?.0)
        }) },
        Case { name: "batch_norm_beta", tol: p, draw: |r| binary(r, &[3], &[5, 3], &[5, 3], |g, beta, x| {
            let gamma = g.constant(Tensor::ones(&[3]));
            Ok(g.batch_norm(x, gamma, beta)?.0)
        }) },
        Case { name: "generalized_pool_0", tol: p, draw: |r| unary(r, &[2, 3, 6], &[2, 3], |g, a| generalized_pool(g, a, 0.0)) },
        Case { name: "generalized_pool_0.3", tol: p, draw: |r| unary(r, &[2, 3, 6], &[2, 3], |g, a| generalized_pool(g, a, 0.3)) },
        Case { name: "generalized_pool_0.5", tol: p, draw: |r| unary(r, &[2, 3, 6], &[2, 3], |g, a| generalized_pool(g, a, 0.5)) },
        Case { name: "generalized_pool_0.7", tol: p, draw: |r| unary(r, &[2, 3, 6], &[2, 3], |g, a| generalized_pool(g, a, 0.7)) },
        Case { name: "generalized_pool_1", tol: p, draw: |r| unary(r, &[2, 3, 6], &[2, 3], |g, a| generalized_pool(g, a, 1.0)) },
        Case { name: "multi_lambda_descriptor", tol: p, draw: |r| unary(r, &[2, 3, 6], &[2, 3], |g, a| {
            multi_lambda_descriptor(g, a, &GpConfig::default())
        }) },
        Case {
            name: "batch_hard_triplet",
            tol: p,
            draw: |r| {
                let x = Tensor::randn(&[6, 4], 0.3, r);
                let cfg = TripletConfig { margin: 0.3, p_ids: 3, k_per_id: 2 };
                Instance {
                    x,
                    f: Box::new(move |g, e| batch_hard_triplet(g, e, &[0, 0, 1, 1, 2, 2], &cfg)),
                }
            },
        },
        Case {
            name: "label_smoothed_ce",
            tol: p,
            draw: |r| {
                let x = randn(&[4, 5], r);
                let labels: Vec<usize> = (0..4).map(|_| r.gen_range(0..5)).collect();
                let cfg = SmoothingConfig { epsilon: 0.3, num_classes: 5 };
                Instance {
                    x,
                    f: Box::new(move |g, l| label_smoothed_ce(g, l, &labels, &cfg)),
                }
            },
        },
        Case {
            name: "self_awareness_input",
            tol: p,
            draw: |r| {
                let (params, store) = bfp_store(r, 3, 2);
                let x = randn(&[2, 3, 3, 4], r);
                let w = weights(&[2, 3, 3, 4], r);
                Instance {
                    x,
                    f: Box::new(move |g, f| {
                        let y = with_ctx(g, &store, |ctx| self_awareness(ctx, f, &params.name("mask_a")))?;
                        weighted(g, y, &w)
                    }),
                }
            },
        },
        Case {
            name: "self_awareness_mask",
            tol: p,
            draw: |r| {
                let (params, store) = bfp_store(r, 3, 2);
                let x = randn(&[1, 3, 1, 1], r);
                let input = randn(&[2, 3, 3, 4], r);
                let w = weights(&[2, 3, 3, 4], r);
                Instance {
                    x,
                    f: Box::new(move |g, m| {
                        let y = with_ctx(g, &store, |ctx| {
                            ctx.bind(&params.name("mask_a.weight"), m);
                            let i = ctx.g.constant(input.clone());
                            self_awareness(ctx, i, &params.name("mask_a"))
                        })?;
                        weighted(g, y, &w)
                    }),
                }
            },
        },
        Case {
            name: "correlation_maps",
            tol: c,
            draw: |r| {
                let (params, store) = bfp_store(r, 3, 2);
                let x = randn(&[2, 5, 3], r);
                let yp = randn(&[2, 5, 2], r);
                let (wx, wy) = (weights(&[2, 5, 5], r), weights(&[2, 5, 5], r));
                Instance {
                    x,
                    f: Box::new(move |g, xp| {
                        let pair = with_ctx(g, &store, |ctx| {
                            let yp = ctx.g.constant(yp.clone());
                            correlation_maps(ctx, xp, yp, &params)
                        })?;
                        let a = weighted(g, pair.c_x, &wx)?;
                        let b = weighted(g, pair.c_y, &wy)?;
                        g.add(a, b)
                    }),
                }
            },
        },
        Case {
            name: "bfp_transform",
            tol: c,
            draw: |r| {
                let (params, store) = bfp_store(r, 3, 2);
                let x = randn(&[2, 5, 2], r);
                let xp = randn(&[2, 5, 3], r);
                let (wx, wy) = (weights(&[2, 5, 3], r), weights(&[2, 5, 2], r));
                Instance {
                    x,
                    f: Box::new(move |g, yp| {
                        let (xa, ya) = with_ctx(g, &store, |ctx| {
                            let xp = ctx.g.constant(xp.clone());
                            let pair = correlation_maps(ctx, xp, yp, &params)?;
                            bfp_transform(ctx, xp, yp, &pair, &params)
                        })?;
                        let a = weighted(g, xa, &wx)?;
                        let b = weighted(g, ya, &wy)?;
                        g.add(a, b)
                    }),
                }
            },
        },
        Case {
            name: "bfp_pair_input",
            tol: c,
            draw: |r| {
                let (params, store) = bfp_store(r, 3, 2);
                let x = randn(&[2, 3, 2, 3], r);
                let y = randn(&[2, 2, 2, 3], r);
                let (wx, wy) = (weights(&[2, 3, 2, 3], r), weights(&[2, 2, 2, 3], r));
                Instance {
                    x,
                    f: Box::new(move |g, xm| {
                        let (xa, ya) = with_ctx(g, &store, |ctx| {
                            let ym = ctx.g.constant(y.clone());
                            bfp_pair(ctx, xm, ym, &params)
                        })?;
                        let a = weighted(g, xa, &wx)?;
                        let b = weighted(g, ya, &wy)?;
                        g.add(a, b)
                    }),
                }
            },
        },
        Case {
            name: "bfp_pair_projections",
            tol: c,
            draw: |r| {
                let (params, store) = bfp_store(r, 3, 2);
                // U, V, U', V' and both output projections, flattened into one vector.
                let names: Vec<(String, Vec<usize>)> = ["u", "v", "u_prime", "v_prime", "p_x", "p_y"]
                    .iter()
                    .map(|p| {
                        let n = params.name(&format!("{p}.weight"));
                        let d = store.get(&n).expect("registered").dims().to_vec();
                        (n, d)
                    })
                    .collect();
                let flat: Vec<f64> = names
                    .iter()
                    .flat_map(|(n, _)| store.get(n).expect("registered").data().to_vec())
                    .collect();
                let x = Tensor::new(vec![flat.len()], flat).expect("non-empty");
                let xm = randn(&[2, 3, 2, 2], r);
                let ym = randn(&[2, 2, 2, 2], r);
                let (wx, wy) = (weights(&[2, 3, 2, 2], r), weights(&[2, 2, 2, 2], r));
                Instance {
                    x,
                    f: Box::new(move |g, theta| {
                        let (xa, ya) = with_ctx(g, &store, |ctx| {
                            let mut offset = 0;
                            for (n, d) in &names {
                                let len: usize = d.iter().product();
                                let part = slice(&mut ctx.g, theta, offset, len)?;
                                let part = ctx.g.reshape(part, d)?;
                                ctx.bind(n, part);
                                offset += len;
                            }
                            let xm = ctx.g.constant(xm.clone());
                            let ym = ctx.g.constant(ym.clone());
                            bfp_pair(ctx, xm, ym, &params)
                        })?;
                        let a = weighted(g, xa, &wx)?;
                        let b = weighted(g, ya, &wy)?;
                        g.add(a, b)
                    }),
                }
            },
        },
        Case {
            name: "hbfp_forward",
            tol: c,
            draw: |r| {
                let model = micro_model(r);
                let x = randn(&[2, 3, 8, 8], r);
                let w: Vec<Tensor> = model
                    .config
                    .channels
                    .iter()
                    .map(|&d| weights(&[2, d], r))
                    .collect();
                Instance {
                    x,
                    f: Box::new(move |g, images| {
                        let out = with_ctx(g, &model.params, |ctx| model.forward(ctx, images))?;
                        let mut total = weighted(g, out.descriptors[0], &w[0])?;
                        for k in 1..3 {
                            let t = weighted(g, out.descriptors[k], &w[k])?;
                            total = g.add(total, t)?;
                        }
                        Ok(total)
                    }),
                }
            },
        },
        Case {
            name: "training_loss",
            tol: c,
            draw: |r| {
                let model = micro_model(r);
                let name = "bfp_lm.u.weight";
                let x = model.params.get(name).expect("registered").clone();
                let images = randn(&[4, 3, 8, 8], r);
                let cfg = LossConfig {
                    triplet: TripletConfig { margin: 0.3, p_ids: 2, k_per_id: 2 },
                    smoothing_epsilon: 0.3,
                };
                Instance {
                    x,
                    f: Box::new(move |g, u| {
                        let (loss, _) = with_ctx(g, &model.params, |ctx| {
                            ctx.bind(name, u);
                            let i = ctx.g.constant(images.clone());
                            training_loss(&model, ctx, i, &[0, 0, 1, 1], &cfg)
                        })?;
                        Ok(loss)
                    }),
                }
            },
        },
    ]
}

/// `x[offset..offset + len]` of a rank-1 node, as a matmul with a selector.
fn slice(g: &mut Graph, x: Var, offset: usize, len: usize) -> Result<Var> {
    let n = g.dims(x)[0];
    let sel = Tensor::from_fn(&[n, len], |i| {
        let (r, c) = (i / len, i % len);
        if r == offset + c {
            1.0
        } else {
            0.0
        }
    });
    let row = g.reshape(x, &[1, n])?;
    let sel = g.constant(sel);
    let out = g.matmul(row, sel)?;
    g.reshape(out, &[len])
}

/// Names of every case, in report order.
pub fn case_names() -> Vec<&'static str> {
    cases().iter().map(|c| c.name).collect()
}

/// Runs every case over `cfg.seeds` seeds derived from `seed`.
pub fn run_suite(seed: u64, cfg: &SuiteConfig) -> Result<Vec<OpReport>> {
    cases().iter().map(|case| run_case(case, seed, cfg)).collect()
}

fn run_case(case: &Case, seed: u64, cfg: &SuiteConfig) -> Result<OpReport> {
    let mut report = OpReport {
        name: case.name.to_string(),
        tolerance: case.tol,
        instances: 0,
        redraws: 0,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
    };
    for s in 0..cfg.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(s);
        let mut attempts = 0;
        let check = loop {
            let inst = (case.draw)(&mut rng);
            let r = finite_diff_check(&inst.f, &inst.x, cfg.eps)?;
            if r.kink_margin >= cfg.kink_threshold {
                break r;
            }
            attempts += 1;
            if attempts > cfg.max_redraws {
                return Err(Error::Numeric(format!(
                    "{}: no kink-free instance in {} draws",
                    case.name, attempts
                )));
            }
        };
        report.redraws += attempts;
        report.instances += 1;
        report.max_rel_err = report.max_rel_err.max(check.max_rel_err);
        report.max_abs_err = report.max_abs_err.max(check.max_abs_err);
    }
    Ok(report)
}

pub fn write_report(reports: &[OpReport], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "op\tinstances\tredraws\tmax_rel_err\ttolerance\tstatus")?;
    for r in reports {
        writeln!(
            out,
            "{}\t{}\t{}\t{:e}\t{:e}\t{}",
            r.name,
            r.instances,
            r.redraws,
            r.max_rel_err,
            r.tolerance,
            if r.passed() { "pass" } else { "FAIL" }
        )?;
    }
    Ok(())
}
