//! Randomized finite-difference checks for every primitive kernel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::grad_check;
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

pub const KERNELS: &[&str] = &[
    "matmul",
    "matmul_nt",
    "matmul_tn",
    "add",
    "mul",
    "scale",
    "row_softmax",
    "layer_norm",
    "silu",
    "gelu",
    "gather",
    "concat",
    "slice",
    "mean",
    "sum",
    "cross_entropy_with_logits",
    "mse",
];

#[derive(Debug, Clone, PartialEq)]
pub struct KernelReport {
    pub kernel: String,
    pub cases: usize,
    pub max_rel_error: f64,
}

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
    Tensor::from_fn(&[r, c], |_| rng.random_range(-1.5..1.5))
}

fn dim(rng: &mut ChaCha8Rng, max: usize) -> usize {
    rng.random_range(1..=max)
}

/// Contracts a node with fixed random weights into a scalar so every
/// output element contributes a distinct gradient.
fn contract(g: &mut Graph<f64>, rng: &mut ChaCha8Rng, out: NodeId) -> Result<NodeId> {
    let (r, c) = g.value(out).dims2();
    let w = g.constant(random(rng, r, c));
    let prod = g.mul(out, w)?;
    g.sum(prod, None)
}

/// Builds one randomized case of `kernel` and returns the loss node.
fn build_case(kernel: &str, g: &mut Graph<f64>, rng: &mut ChaCha8Rng, max: usize) -> Result<NodeId> {
    let (r, c, k) = (dim(rng, max), dim(rng, max), dim(rng, max));
    let out = match kernel {
        "matmul" => {
            let a = g.param("a", random(rng, r, k));
            let b = g.param("b", random(rng, k, c));
            g.matmul(a, b)?
        }
        "matmul_nt" => {
            let a = g.param("a", random(rng, r, k));
            let b = g.param("b", random(rng, c, k));
            g.matmul_nt(a, b)?
        }
        "matmul_tn" => {
            let a = g.param("a", random(rng, k, r));
            let b = g.param("b", random(rng, k, c));
            g.matmul_tn(a, b)?
        }
        "add" | "mul" => {
            let a = g.param("a", random(rng, r, c));
            let (br, bc) = match rng.random_range(0..3) {
                0 => (r, c),
                1 => (1, c),
                _ => (r, 1),
            };
            let b = g.param("b", random(rng, br, bc));
            if kernel == "add" {
                g.add(a, b)?
            } else {
                g.mul(a, b)?
            }
        }
        "scale" => {
            let a = g.param("a", random(rng, r, c));
            g.scale(a, rng.random_range(-3.0..3.0))?
        }
        "row_softmax" => {
            let a = g.param("a", random(rng, r, c));
            g.row_softmax(a)?
        }
        "layer_norm" => {
            let a = g.param("a", random(rng, r, c.max(2)));
            g.layer_norm(a, 1e-5)?
        }
        "silu" => {
            let a = g.param("a", random(rng, r, c));
            g.silu(a)?
        }
        "gelu" => {
            let a = g.param("a", random(rng, r, c));
            g.gelu(a)?
        }
        "gather" => {
            let a = g.param("a", random(rng, r, c));
            let idx = (0..k).map(|_| rng.random_range(0..r)).collect();
            g.gather(a, idx)?
        }
        "concat" => {
            let axis = rng.random_range(0..2);
            let a = g.param("a", random(rng, r, c));
            let b = if axis == 0 {
                g.param("b", random(rng, k, c))
            } else {
                g.param("b", random(rng, r, k))
            };
            g.concat(&[a, b], axis)?
        }
        "slice" => {
            let axis = rng.random_range(0..2);
            let a = g.param("a", random(rng, r, c));
            let len = if axis == 0 { r } else { c };
            let start = rng.random_range(0..len);
            let end = rng.random_range(start + 1..=len);
            g.slice(a, axis, start, end)?
        }
        "mean" | "sum" => {
            let a = g.param("a", random(rng, r, c));
            let axis = match rng.random_range(0..3) {
                0 => None,
                1 => Some(0),
                _ => Some(1),
            };
            if kernel == "mean" {
                g.mean(a, axis)?
            } else {
                g.sum(a, axis)?
            }
        }
        "cross_entropy_with_logits" => {
            let a = g.param("a", random(rng, r, c));
            let targets = (0..r).map(|_| rng.random_range(0..c)).collect();
            let mut mask: Vec<bool> = (0..r).map(|_| rng.random_bool(0.7)).collect();
            mask[0] = true;
            return g.cross_entropy(a, targets, mask);
        }
        "mse" => {
            let a = g.param("a", random(rng, r, c));
            let b = g.param("b", random(rng, r, c));
            return g.mse(a, b);
        }
        other => panic!("unknown kernel {other}"),
    };
    contract(g, rng, out)
}

/// Runs `cases` randomized shapes (each dimension in `1..=max_dim`) per
/// kernel and reports the worst relative error.
pub fn kernel_suite(seed: u64, cases: usize, max_dim: usize) -> Result<Vec<KernelReport>> {
    let mut reports = Vec::new();
    for (ki, kernel) in KERNELS.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(ki as u64);
        let mut worst: f64 = 0.0;
        for _ in 0..cases {
            let mut g = Graph::new();
            let loss = build_case(kernel, &mut g, &mut rng, max_dim)?;
            let report = grad_check(&mut g, loss, 1e-4)?;
            worst = worst.max(report.max_rel_error());
        }
        reports.push(KernelReport {
            kernel: kernel.to_string(),
            cases,
            max_rel_error: worst,
        });
    }
    Ok(reports)
}
