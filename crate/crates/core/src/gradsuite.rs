//! Finite-difference checks for every differentiable layer, each over a
//! batch of random seeds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::dfc::{dem, dfc, gem, DfcParams};
use crate::error::{Error, Result};
use crate::fdf::{gam, mi_loss_var, soft_mi_per_image, GamParams, HistogramMi};
use crate::gradcheck::finite_difference_check;
use crate::nn::{ParamStore, Session};
use crate::ops::{BnMode, Conv2dSpec, BN_EPS};
use crate::tensor::{Dims, Tensor};

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;

pub const OPS: [&str; 12] = [
    "conv2d",
    "conv2d.weight",
    "batch_norm",
    "softmax",
    "upsample2x",
    "dem",
    "gem",
    "dfc",
    "gam",
    "gam.raw_gates",
    "soft_mi",
    "mi_loss",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpCheck {
    pub op: String,
    pub seeds: u64,
    pub max_error: f64,
    pub passed: bool,
}

fn random(rng: &mut ChaCha8Rng, dims: impl Into<Dims>, scale: f64) -> Tensor {
    let dims = dims.into();
    let data = (0..dims.numel()).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(dims, data).expect("dims match")
}

/// `sum(y * r)` for a fixed random `r`, so every output coordinate matters.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let r = random(&mut rng, g.value(y).dims(), 1.0);
    let rv = g.constant(r);
    let p = g.mul(y, rv)?;
    Ok(g.sum(p))
}

/// Runs `f` inside a training session whose graph is `g`.
fn in_session<T>(store: &ParamStore, g: &mut Graph, f: impl FnOnce(&mut Session<'_>) -> Result<T>) -> Result<T> {
    let mut s = Session::new(store, true);
    std::mem::swap(&mut s.graph, g);
    let out = f(&mut s);
    std::mem::swap(&mut s.graph, g);
    out
}

/// Worst relative error of one op at one seed.
pub fn check_op(op: &str, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match op {
        "conv2d" => {
            let stride = 1 + (seed % 2) as usize;
            let w = random(&mut rng, [3, 2, 3, 3], 1.0);
            let b = random(&mut rng, [1, 3, 1, 1], 1.0);
            let x = random(&mut rng, [2, 2, 5, 5], 1.0);
            finite_difference_check(
                |g, x| {
                    let wv = g.constant(w.clone());
                    let bv = g.constant(b.clone());
                    let y = g.conv2d(x, wv, Some(bv), Conv2dSpec::new(stride, 1, 1))?;
                    project(g, y, seed)
                },
                &x,
                STEP,
            )
        }
        "conv2d.weight" => {
            let x = random(&mut rng, [2, 4, 4, 4], 1.0);
            let w = random(&mut rng, [4, 2, 3, 3], 1.0);
            finite_difference_check(
                |g, w| {
                    let xv = g.constant(x.clone());
                    let y = g.conv2d(xv, w, None, Conv2dSpec::new(1, 1, 2))?;
                    project(g, y, seed)
                },
                &w,
                STEP,
            )
        }
        "batch_norm" => {
            let gamma = random(&mut rng, [1, 3, 1, 1], 2.0);
            let beta = random(&mut rng, [1, 3, 1, 1], 1.0);
            let x = random(&mut rng, [2, 3, 3, 3], 2.0);
            finite_difference_check(
                |g, x| {
                    let gv = g.constant(gamma.clone());
                    let bv = g.constant(beta.clone());
                    let (y, _) = g.batch_norm(x, gv, bv, BnMode::Train, BN_EPS)?;
                    project(g, y, seed)
                },
                &x,
                STEP,
            )
        }
        "softmax" => {
            let axis = (seed % 4) as usize;
            let x = random(&mut rng, [2, 3, 2, 3], 2.0);
            finite_difference_check(
                |g, x| {
                    let y = g.softmax(x, axis)?;
                    project(g, y, seed)
                },
                &x,
                STEP,
            )
        }
        "upsample2x" => {
            let x = random(&mut rng, [1, 2, 3, 4], 1.0);
            finite_difference_check(
                |g, x| {
                    let y = g.upsample2x(x)?;
                    project(g, y, seed)
                },
                &x,
                STEP,
            )
        }
        "dem" | "gem" | "dfc" => {
            let mut store = ParamStore::new();
            let p = DfcParams::new(&mut store, &mut rng, "dfc", 3)?;
            let x = random(&mut rng, [1, 3, 3, 4], 1.0);
            finite_difference_check(
                |g, x| {
                    let y = in_session(&store, g, |s| match op {
                        "dem" => dem(s, x, &p),
                        "gem" => gem(s, x, &p),
                        _ => dfc(s, x, &p),
                    })?;
                    project(g, y, seed)
                },
                &x,
                STEP,
            )
        }
        "gam" | "gam.raw_gates" => {
            let mut store = ParamStore::new();
            let p = GamParams::new(&mut store, &mut rng, "gam", 4, 4, op == "gam.raw_gates")?;
            let x = random(&mut rng, [1, 4, 3, 3], 1.0);
            finite_difference_check(
                |g, x| {
                    let y = in_session(&store, g, |s| gam(s, x, &p))?;
                    Ok(g.sum(y))
                },
                &x,
                STEP,
            )
        }
        "soft_mi" => {
            let hist = HistogramMi::soft(8)?;
            let x = random(&mut rng, [2, 2, 4, 4], 1.0);
            finite_difference_check(
                |g, x| {
                    let a = g.slice_channels(x, 0, 1)?;
                    let b = g.slice_channels(x, 1, 1)?;
                    let mi = soft_mi_per_image(g, a, b, &hist)?;
                    project(g, mi, seed)
                },
                &x,
                STEP,
            )
        }
        "mi_loss" => {
            let hist = HistogramMi::soft(8)?;
            let x = random(&mut rng, [2, 2, 4, 4], 1.0);
            let noise = random(&mut rng, [2, 1, 4, 4], 1.5);
            finite_difference_check(
                |g, x| {
                    let a = g.slice_channels(x, 0, 1)?;
                    let b = g.slice_channels(x, 1, 1)?;
                    let n = g.constant(noise.clone());
                    let an = g.add(a, n)?;
                    let bn = g.sub(b, n)?;
                    mi_loss_var(g, a, b, an, bn, &hist)
                },
                &x,
                STEP,
            )
        }
        other => Err(Error::Usage(format!("unknown gradient check op {other:?}"))),
    }
}

pub fn run_op(op: &str, seeds: u64) -> Result<OpCheck> {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        worst = worst.max(check_op(op, seed)?);
    }
    Ok(OpCheck {
        op: op.to_string(),
        seeds,
        max_error: worst,
        passed: worst < TOLERANCE,
    })
}

pub fn run_suite(seeds: u64) -> Result<Vec<OpCheck>> {
    OPS.iter().map(|op| run_op(op, seeds)).collect()
}
