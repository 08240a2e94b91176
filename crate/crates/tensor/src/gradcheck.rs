// SPDX-License-Identifier: MIT OR Apache-2.0

//! Finite-difference sweep over every graph primitive.
//!
//! Each instance draws random shapes and values, contracts the primitive's
//! output against a random weight tensor to get a scalar, and compares the
//! analytic gradient of every trainable input against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Worst relative error observed for one primitive.
#[derive(Debug, Clone)]
pub struct PrimitiveCheck {
    pub primitive: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
}

pub const PRIMITIVES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "reshape",
    "permute",
    "transpose",
    "softmax",
    "causal_softmax",
    "layer_norm",
    "gelu",
    "embedding",
    "cross_entropy",
    "sum_axis",
    "sum_all",
    "select",
    "concat",
];

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

fn dims(rng: &mut ChaCha8Rng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.gen_range(1..=4)).collect()
}

fn rand_tensor(rng: &mut ChaCha8Rng, rank: usize) -> Tensor {
    let shape = dims(rng, rank);
    randn(rng, &shape)
}

/// Builds `sum(op(inputs) * w)` for one random instance of `primitive` and
/// returns the scalar output plus the leaves to check.
fn build(primitive: &str, rng: &mut ChaCha8Rng) -> Result<(Graph, Var, Vec<Var>)> {
    let mut g = Graph::new();
    let mut leaves = Vec::new();
    let out = match primitive {
        "add" | "sub" | "mul" => {
            let a_shape = dims(rng, 3);
            // b broadcasts against a on a random subset of axes
            let skip = rng.gen_range(0..2);
            let b_shape: Vec<usize> =
                a_shape.iter().map(|&d| if rng.gen_bool(0.5) { d } else { 1 }).collect();
            let b_shape = b_shape[skip..].to_vec();
            let a = g.param(randn(rng, &a_shape));
            let b = g.param(randn(rng, &b_shape));
            leaves.extend([a, b]);
            match primitive {
                "add" => g.add(a, b)?,
                "sub" => g.sub(a, b)?,
                _ => g.mul(a, b)?,
            }
        }
        "scale" => {
            let x = g.param(rand_tensor(rng, 2));
            leaves.push(x);
            let c = rng.gen_range(-2.0..2.0);
            g.scale(x, c)?
        }
        "matmul" => {
            let (m, k, n) = (rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=4));
            let batch = rng.gen_range(1..=3);
            let (a_shape, b_shape) = match rng.gen_range(0..3) {
                0 => (vec![m, k], vec![k, n]),
                1 => (vec![batch, m, k], vec![k, n]),
                _ => (vec![batch, 1, m, k], vec![2, k, n]),
            };
            let a = g.param(randn(rng, &a_shape));
            let b = g.param(randn(rng, &b_shape));
            leaves.extend([a, b]);
            g.matmul(a, b)?
        }
        "reshape" => {
            let s = dims(rng, 3);
            let x = g.param(randn(rng, &s));
            leaves.push(x);
            g.reshape(x, &[s[0] * s[1], s[2]])?
        }
        "permute" => {
            let x = g.param(rand_tensor(rng, 3));
            leaves.push(x);
            g.permute(x, &[2, 0, 1])?
        }
        "transpose" => {
            let x = g.param(rand_tensor(rng, 3));
            leaves.push(x);
            g.transpose(x)?
        }
        "softmax" => {
            let x = g.param(rand_tensor(rng, 2));
            leaves.push(x);
            g.softmax(x)?
        }
        "causal_softmax" => {
            let n = rng.gen_range(1..=5);
            let b = rng.gen_range(1..=3);
            let x = g.param(randn(rng, &[b, n, n]));
            leaves.push(x);
            g.causal_softmax(x)?
        }
        "layer_norm" => {
            let mut s = dims(rng, 2);
            s[1] += 1;
            let x = g.param(randn(rng, &s));
            leaves.push(x);
            g.layer_norm(x, 1e-5)?
        }
        "gelu" => {
            let x = g.param(rand_tensor(rng, 2));
            leaves.push(x);
            g.gelu(x)?
        }
        "embedding" => {
            let (v, d) = (rng.gen_range(2..=6), rng.gen_range(1..=4));
            let table = g.param(randn(rng, &[v, d]));
            leaves.push(table);
            let ids: Vec<usize> = (0..6).map(|_| rng.gen_range(0..v)).collect();
            g.embedding(table, &ids, &[2, 3])?
        }
        "cross_entropy" => {
            let (n, v) = (rng.gen_range(1..=4), rng.gen_range(2..=6));
            let x = g.param(randn(rng, &[n, v]));
            leaves.push(x);
            let targets: Vec<usize> = (0..n).map(|_| rng.gen_range(0..v)).collect();
            let loss = g.cross_entropy(x, &targets)?;
            return Ok((g, loss, leaves));
        }
        "sum_axis" => {
            let x = g.param(rand_tensor(rng, 3));
            leaves.push(x);
            let axis = rng.gen_range(0..3);
            g.sum_axis(x, axis)?
        }
        "sum_all" => {
            let x = g.param(rand_tensor(rng, 2));
            leaves.push(x);
            let s = g.sum_all(x)?;
            let c = g.input(Tensor::scalar(rng.gen_range(0.5..2.0)));
            let out = g.mul(s, c)?;
            return Ok((g, out, leaves));
        }
        "select" => {
            let s = dims(rng, 3);
            let x = g.param(randn(rng, &s));
            leaves.push(x);
            let axis = rng.gen_range(0..3);
            let idx: Vec<usize> = (0..3).map(|_| rng.gen_range(0..s[axis])).collect();
            g.select(x, axis, &idx)?
        }
        "concat" => {
            let s = dims(rng, 2);
            let mut t = s.clone();
            t[1] = rng.gen_range(1..=3);
            let a = g.param(randn(rng, &s));
            let b = g.param(randn(rng, &t));
            leaves.extend([a, b]);
            g.concat(&[a, b], 1)?
        }
        other => panic!("unknown primitive {other}"),
    };
    let shape = g.shape(out)?.to_vec();
    let w = g.input(randn(rng, &shape));
    let prod = g.mul(out, w)?;
    let loss = g.sum_all(prod)?;
    Ok((g, loss, leaves))
}

/// Runs `instances` random finite-difference checks for one primitive.
pub fn check_primitive(primitive: &'static str, instances: usize, seed: u64, eps: f64) -> Result<PrimitiveCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (mut g, loss, leaves) = build(primitive, &mut rng)?;
        for leaf in leaves {
            worst = worst.max(g.grad_check(loss, leaf, eps)?);
        }
    }
    Ok(PrimitiveCheck { primitive, instances, max_rel_error: worst })
}

/// Checks every primitive in [`PRIMITIVES`].
pub fn check_all(instances: usize, seed: u64, eps: f64) -> Result<Vec<PrimitiveCheck>> {
    PRIMITIVES
        .iter()
        .enumerate()
        .map(|(i, p)| check_primitive(p, instances, seed.wrapping_add(i as u64), eps))
        .collect()
}
