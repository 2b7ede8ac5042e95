//! Finite-difference verification of every differentiable op and of the
//! full adaptation objective.
//!
//! Each op case reduces the op output to a scalar through a fixed random
//! weighting `Σ op(x) ⊙ r`, so the whole Jacobian is exercised. The
//! `grad_scale` op deliberately breaks the chain rule and is used only to
//! corrupt a case when testing the harness.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcore::{finite_diff_check, finite_diff_check_at, Graph, NodeId, Tensor};
use crate::losses::{self, LossWeights};
use crate::miniedge::{BackboneConfig, Model};
use crate::syndata;

pub const TOLERANCE: f64 = 1e-3;
pub const STEP: f64 = 1e-4;

/// Names of all checked cases, in report order.
pub const CASES: [&str; 18] = [
    "conv2d",
    "depthwise_conv2d",
    "linear",
    "layer_norm",
    "gelu",
    "attention",
    "global_avg_pool",
    "permute",
    "reshape",
    "add",
    "mul",
    "scale",
    "add_scalar",
    "hinge",
    "sum",
    "mean",
    "cosine_rows",
    "batch_objective",
];

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub op: &'static str,
    pub seeds: usize,
    pub max_rel_error: f64,
    pub coordinates: usize,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Scalarizes `y` as `Σ y ⊙ r` with `r` drawn from `rng`; `corrupt`
/// inserts a gradient-doubling node in front of the reduction.
fn reduce(g: &mut Graph, y: NodeId, r: &Tensor, corrupt: bool) -> Result<NodeId> {
    let y = if corrupt { g.grad_scale(y, 2.0) } else { y };
    let r = g.constant(r.clone());
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

/// Runs one op case for one seed; returns (max relative error, coordinates).
fn run_case(op: &str, seed: u64, corrupt: bool) -> Result<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    type Build = Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>>;
    let (params, out_shape, build): (Vec<Tensor>, Vec<usize>, Build) = match op {
        "conv2d" => {
            let (stride, pad) = [(1, 1), (2, 0), (1, 0), (2, 1)][seed as usize % 4];
            let p = vec![uniform(rng, &[2, 2, 5, 5]), uniform(rng, &[3, 2, 3, 3]), uniform(rng, &[3])];
            let side = (5 + 2 * pad - 3) / stride + 1;
            (p, vec![2, 3, side, side], Box::new(move |g, v| g.conv2d(v[0], v[1], v[2], stride, pad)))
        }
        "depthwise_conv2d" => {
            let p = vec![uniform(rng, &[2, 3, 4, 4]), uniform(rng, &[3, 1, 3, 3]), uniform(rng, &[3])];
            (p, vec![2, 3, 4, 4], Box::new(|g, v| g.depthwise_conv2d(v[0], v[1], v[2], 1)))
        }
        "linear" => {
            let p = vec![uniform(rng, &[2, 3, 4]), uniform(rng, &[5, 4]), uniform(rng, &[5])];
            (p, vec![2, 3, 5], Box::new(|g, v| g.linear(v[0], v[1], v[2])))
        }
        "layer_norm" => {
            let p = vec![uniform(rng, &[3, 6]), uniform(rng, &[6]), uniform(rng, &[6])];
            (p, vec![3, 6], Box::new(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-6)))
        }
        "gelu" => {
            let x = Tensor::from_fn(&[12], |_| rng.gen_range(-3.0..3.0));
            (vec![x], vec![12], Box::new(|g, v| Ok(g.gelu(v[0]))))
        }
        "attention" => {
            let d = 4;
            let mut p = vec![uniform(rng, &[2, 3, d])];
            p.extend((0..4).map(|_| uniform(rng, &[d, d])));
            (p, vec![2, 3, d], Box::new(|g, v| g.attention(v[0], v[1], v[2], v[3], v[4])))
        }
        "global_avg_pool" => (
            vec![uniform(rng, &[2, 3, 2, 3])],
            vec![2, 3],
            Box::new(|g, v| g.global_avg_pool(v[0])),
        ),
        "permute" => (
            vec![uniform(rng, &[2, 3, 4])],
            vec![4, 2, 3],
            Box::new(|g, v| g.permute(v[0], &[2, 0, 1])),
        ),
        "reshape" => (
            vec![uniform(rng, &[2, 6])],
            vec![3, 4],
            Box::new(|g, v| g.reshape(v[0], &[3, 4])),
        ),
        "add" | "mul" => {
            let p = vec![uniform(rng, &[3, 4]), uniform(rng, &[3, 4])];
            let build: Build = if op == "add" {
                Box::new(|g, v| g.add(v[0], v[1]))
            } else {
                Box::new(|g, v| g.mul(v[0], v[1]))
            };
            (p, vec![3, 4], build)
        }
        "scale" => {
            let f = rng.gen_range(-2.0..2.0);
            (vec![uniform(rng, &[5])], vec![5], Box::new(move |g, v| Ok(g.scale(v[0], f))))
        }
        "add_scalar" => {
            let c = rng.gen_range(-2.0..2.0);
            (vec![uniform(rng, &[5])], vec![5], Box::new(move |g, v| Ok(g.add_scalar(v[0], c))))
        }
        "hinge" => {
            let m = rng.gen_range(0.0..0.5);
            // keep every input at least 0.05 away from the corner
            let x = Tensor::from_fn(&[8], |_| {
                let off: f64 = rng.gen_range(0.05..1.0);
                if rng.gen::<bool>() {
                    m + off
                } else {
                    m - off
                }
            });
            (vec![x], vec![8], Box::new(move |g, v| Ok(g.hinge(v[0], m))))
        }
        "sum" => (vec![uniform(rng, &[3, 2])], vec![1], Box::new(|g, v| Ok(g.sum(v[0])))),
        "mean" => (vec![uniform(rng, &[3, 2])], vec![1], Box::new(|g, v| Ok(g.mean(v[0])))),
        "cosine_rows" => (
            vec![uniform(rng, &[3, 5]), uniform(rng, &[3, 5])],
            vec![3],
            Box::new(|g, v| g.cosine_rows(v[0], v[1])),
        ),
        "batch_objective" => return objective_case(seed, corrupt),
        other => return Err(crate::Error::InvalidConfig(format!("unknown gradcheck case {other}"))),
    };
    let r = uniform(rng, &out_shape);
    let f = |g: &mut Graph, v: &[NodeId]| -> Result<NodeId> {
        let y = build(g, v)?;
        reduce(g, y, &r, corrupt)
    };
    let rep = finite_diff_check(f, &params, STEP)?;
    Ok((rep.max_rel_error, rep.coordinates))
}

/// Full adaptation objective through the default backbone on a 4-pair batch, with a
/// perturbed student and a fixed teacher. Checks 24 sampled coordinates.
fn objective_case(seed: u64, corrupt: bool) -> Result<(f64, usize)> {
    let cfg = BackboneConfig::default();
    let teacher = Model::build(&cfg, seed)?;
    let mut student = teacher.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0b1e_c71e);
    for p in student.params_mut() {
        for v in p.tensor.data_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
    let ds = syndata::make_dataset(4, 2, seed)?;
    let batch = syndata::sample_pairs(&ds, 4, 0.5, seed)?;
    let weights = LossWeights::new(rng.gen_range(0.1..0.9), 0.0)?;
    let teacher_emb = teacher.embed(&batch.x_source)?;
    let params: Vec<Tensor> = student.params().iter().map(|p| p.tensor.clone()).collect();
    let coords: Vec<(usize, usize)> = (0..24)
        .map(|_| {
            let p = rng.gen_range(0..params.len());
            (p, rng.gen_range(0..params[p].numel()))
        })
        .collect();
    let f = |g: &mut Graph, v: &[NodeId]| -> Result<NodeId> {
        let xs = g.constant(batch.x_source.clone());
        let xt = g.constant(batch.x_target.clone());
        let es = student.forward(g, v, xs)?;
        let es = if corrupt { g.grad_scale(es, 2.0) } else { es };
        let et = student.forward(g, v, xt)?;
        let te = g.constant(teacher_emb.clone());
        let lc = losses::contrastive_rows(g, es, et, &batch.y, weights.margin)?;
        let ls = losses::self_distillation_rows(g, te, es)?;
        let (lc, ls) = (g.mean(lc), g.mean(ls));
        let a = g.scale(lc, 1.0 - weights.lambda);
        let b = g.scale(ls, weights.lambda);
        g.add(a, b)
    };
    let rep = finite_diff_check_at(f, &params, STEP, Some(&coords))?;
    Ok((rep.max_rel_error, rep.coordinates))
}

/// Runs every case over `seeds` seeds. `corrupt` names a case whose
/// backward is deliberately broken, to exercise the harness itself.
pub fn run_suite(seeds: usize, corrupt: Option<&str>) -> Result<Vec<CaseResult>> {
    CASES
        .iter()
        .map(|&op| {
            let mut res = CaseResult {
                op,
                seeds,
                max_rel_error: 0.0,
                coordinates: 0,
            };
            for s in 0..seeds as u64 {
                let (err, n) = run_case(op, 1000 + s, corrupt == Some(op))?;
                res.max_rel_error = res.max_rel_error.max(err);
                res.coordinates += n;
            }
            Ok(res)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes_on_a_few_seeds() {
        for r in run_suite(2, None).unwrap() {
            assert!(r.passed(), "{} rel error {}", r.op, r.max_rel_error);
            assert!(r.coordinates > 0);
        }
    }

    #[test]
    fn corrupted_case_is_caught() {
        let results = run_suite(1, Some("layer_norm")).unwrap();
        for r in results {
            assert_eq!(r.passed(), r.op != "layer_norm", "{}", r.op);
        }
    }
}
