//! Training objective: cosine contrastive alignment between modalities,
//! cosine self-distillation against a frozen teacher, and their
//! λ-weighted sum.
//!
//! Each loss exists twice: as a plain function over slices (used for
//! reporting and as a recomposition check) and as graph ops for training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{kernels, Graph, NodeId, Tensor};
use crate::miniedge::Model;
use crate::syndata::PairBatch;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.75,
            margin: 0.0,
        }
    }
}

impl LossWeights {
    pub fn new(lambda: f64, margin: f64) -> Result<Self> {
        check_unit("lambda", lambda)?;
        check_unit("margin", margin)?;
        Ok(Self { lambda, margin })
    }
}

fn check_unit(what: &'static str, value: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&value) {
        return Err(Error::OutOfRange {
            what,
            value,
            range: "[0, 1]",
        });
    }
    Ok(())
}

fn check_label(y: u8) -> Result<()> {
    if y > 1 {
        return Err(Error::InvalidLabel(y));
    }
    Ok(())
}

/// `a·b / (‖a‖‖b‖)`; rejects vectors with norm below 1e-12.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            op: "cosine",
            axis: "embedding length",
            expected: a.len(),
            got: b.len(),
        });
    }
    let (ab, aa, bb) = (kernels::dot(a, b), kernels::dot(a, a), kernels::dot(b, b));
    let norm = aa.sqrt().min(bb.sqrt());
    if !(norm > 1e-12) {
        return Err(Error::DegenerateEmbedding { norm });
    }
    Ok(ab / (aa * bb).sqrt())
}

/// `1 − cos` for a genuine pair (y = 1), `max(0, cos − m)` for an impostor pair.
pub fn contrastive_loss(e_s: &[f64], e_t: &[f64], y: u8, margin: f64) -> Result<f64> {
    check_label(y)?;
    let c = cosine(e_s, e_t)?;
    Ok(if y == 1 { 1.0 - c } else { (c - margin).max(0.0) })
}

/// `1 − cos(teacher, student)`.
pub fn self_distillation_loss(teacher: &[f64], student: &[f64]) -> Result<f64> {
    Ok(1.0 - cosine(teacher, student)?)
}

/// `(1 − λ)·l_c + λ·l_sdl`.
pub fn total_loss(l_c: f64, l_sdl: f64, lambda: f64) -> Result<f64> {
    check_unit("lambda", lambda)?;
    Ok((1.0 - lambda) * l_c + lambda * l_sdl)
}

/// Per-row contrastive loss of two N×D embedding nodes → N.
pub fn contrastive_rows(g: &mut Graph, e_s: NodeId, e_t: NodeId, labels: &[u8], margin: f64) -> Result<NodeId> {
    labels.iter().try_for_each(|&y| check_label(y))?;
    let cos = g.cosine_rows(e_s, e_t)?;
    let n = g.value(cos).numel();
    if labels.len() != n {
        return Err(Error::Dimension {
            op: "contrastive_rows",
            axis: "labels",
            expected: n,
            got: labels.len(),
        });
    }
    let pos_mask = g.constant(Tensor::from_fn(&[n], |i| f64::from(labels[i])));
    let neg_mask = g.constant(Tensor::from_fn(&[n], |i| 1.0 - f64::from(labels[i])));
    let pull = g.scale(cos, -1.0);
    let pull = g.add_scalar(pull, 1.0);
    let push = g.hinge(cos, margin);
    let pull = g.mul(pull, pos_mask)?;
    let push = g.mul(push, neg_mask)?;
    g.add(pull, push)
}

/// Per-row `1 − cos(teacher, student)` → N.
pub fn self_distillation_rows(g: &mut Graph, teacher: NodeId, student: NodeId) -> Result<NodeId> {
    let cos = g.cosine_rows(teacher, student)?;
    let neg = g.scale(cos, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// A built batch objective, ready for [`Graph::backward`].
pub struct Objective {
    pub graph: Graph,
    pub loss: NodeId,
    /// Student parameter leaves, in registry order.
    pub params: Vec<NodeId>,
    /// Batch-mean contrastive loss.
    pub l_c: f64,
    /// Batch-mean self-distillation loss.
    pub l_sdl: f64,
}

impl Objective {
    pub fn value(&self) -> f64 {
        self.graph.value(self.loss).data()[0]
    }
}

/// Batch mean of `(1 − λ)·L_C(student(x_s), student(x_t), y) + λ·L_SDL(teacher(x_s), student(x_s))`.
///
/// The teacher is evaluated in its own graph and enters as a constant, so
/// no gradient can reach its parameters.
pub fn batch_objective(student: &Model, teacher: &Model, batch: &PairBatch, weights: &LossWeights) -> Result<Objective> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("pair batch"));
    }
    LossWeights::new(weights.lambda, weights.margin)?;
    if student.config() != teacher.config() {
        return Err(Error::TopologyMismatch("student and teacher configs differ".into()));
    }
    batch_objective_with_teacher(student, teacher.embed(&batch.x_source)?, batch, weights)
}

/// [`batch_objective`] with the teacher's source embeddings supplied
/// directly, one row per pair.
pub fn batch_objective_with_teacher(
    student: &Model,
    teacher_emb: Tensor,
    batch: &PairBatch,
    weights: &LossWeights,
) -> Result<Objective> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("pair batch"));
    }
    LossWeights::new(weights.lambda, weights.margin)?;
    if teacher_emb.rank() != 2 {
        return Err(Error::Rank {
            op: "batch_objective",
            expected: 2,
            got: teacher_emb.rank(),
        });
    }
    for (axis, expected, got) in [
        ("rows", batch.len(), teacher_emb.shape()[0]),
        ("embedding", student.config().embed_dim, teacher_emb.shape()[1]),
    ] {
        if expected != got {
            return Err(Error::Dimension {
                op: "batch_objective",
                axis,
                expected,
                got,
            });
        }
    }
    let mut g = Graph::new();
    let params = student.bind(&mut g);
    let xs = g.constant(batch.x_source.clone());
    let xt = g.constant(batch.x_target.clone());
    let e_s = student.forward(&mut g, &params, xs)?;
    let e_t = student.forward(&mut g, &params, xt)?;
    let e_teacher = g.constant(teacher_emb);

    let lc = contrastive_rows(&mut g, e_s, e_t, &batch.y, weights.margin)?;
    let lsdl = self_distillation_rows(&mut g, e_teacher, e_s)?;
    let lc = g.mean(lc);
    let lsdl = g.mean(lsdl);
    let a = g.scale(lc, 1.0 - weights.lambda);
    let b = g.scale(lsdl, weights.lambda);
    let loss = g.add(a, b)?;
    let (l_c, l_sdl) = (g.value(lc).data()[0], g.value(lsdl).data()[0]);
    Ok(Objective {
        graph: g,
        loss,
        params,
        l_c,
        l_sdl,
    })
}

/// Batch mean of the contrastive loss between two views, both through `model`.
/// Used for source-only pretraining.
pub fn pair_contrastive_objective(model: &Model, batch: &PairBatch, margin: f64) -> Result<Objective> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("pair batch"));
    }
    let mut g = Graph::new();
    let params = model.bind(&mut g);
    let xs = g.constant(batch.x_source.clone());
    let xt = g.constant(batch.x_target.clone());
    let e_s = model.forward(&mut g, &params, xs)?;
    let e_t = model.forward(&mut g, &params, xt)?;
    let lc = contrastive_rows(&mut g, e_s, e_t, &batch.y, margin)?;
    let loss = g.mean(lc);
    let l_c = g.value(loss).data()[0];
    Ok(Objective {
        graph: g,
        loss,
        params,
        l_c,
        l_sdl: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine(&[1.0, 0.0], &[0.6, 0.8]).unwrap(), 0.6);
        assert!(matches!(
            cosine(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::DegenerateEmbedding { .. })
        ));
    }

    #[test]
    fn contrastive_examples() {
        let a = [1.0, 0.0];
        let b = [0.6, 0.8];
        assert_eq!(contrastive_loss(&a, &a, 1, 0.0).unwrap(), 0.0);
        assert_eq!(contrastive_loss(&a, &b, 0, 0.0).unwrap(), 0.6);
        assert_eq!(contrastive_loss(&a, &b, 1, 0.0).unwrap(), 1.0 - 0.6);
        // cos = -0.2
        let c = [-0.2, (1.0f64 - 0.04).sqrt()];
        assert_eq!(contrastive_loss(&a, &c, 0, 0.0).unwrap(), 0.0);
        assert!(matches!(contrastive_loss(&a, &b, 2, 0.0), Err(Error::InvalidLabel(2))));
    }

    #[test]
    fn distillation_examples() {
        assert_eq!(self_distillation_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(self_distillation_loss(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 1.0);
        assert_eq!(self_distillation_loss(&[1.0, 0.0], &[-2.0, 0.0]).unwrap(), 2.0);
    }

    #[test]
    fn total_loss_examples() {
        assert!((total_loss(0.4, 0.2, 0.75).unwrap() - 0.25).abs() <= 1e-15);
        assert_eq!(total_loss(0.4, 0.2, 0.0).unwrap(), 0.4);
        assert_eq!(total_loss(0.4, 0.2, 1.0).unwrap(), 0.2);
        assert!(total_loss(0.4, 0.2, 1.5).is_err());
    }

    #[test]
    fn graph_rows_match_plain_functions() {
        let a = [0.3, -1.2, 0.5, 2.0, 0.1, 0.7];
        let b = [-0.4, 0.9, 1.5, 0.2, 0.3, -0.8];
        let labels = [1u8, 0];
        let mut g = Graph::new();
        let ea = g.constant(Tensor::new(vec![2, 3], a.to_vec()).unwrap());
        let eb = g.constant(Tensor::new(vec![2, 3], b.to_vec()).unwrap());
        let lc = contrastive_rows(&mut g, ea, eb, &labels, 0.1).unwrap();
        let ls = self_distillation_rows(&mut g, ea, eb).unwrap();
        for r in 0..2 {
            let (ar, br) = (&a[r * 3..r * 3 + 3], &b[r * 3..r * 3 + 3]);
            let want = contrastive_loss(ar, br, labels[r], 0.1).unwrap();
            assert!((g.value(lc).data()[r] - want).abs() < 1e-15);
            let want = self_distillation_loss(ar, br).unwrap();
            assert!((g.value(ls).data()[r] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn distillation_gradient_is_exactly_zero_for_identical_rows() {
        let v = vec![0.31, -1.7, 0.002, 5.5, -0.25];
        let mut g = Graph::new();
        let t = g.constant(Tensor::new(vec![1, 5], v.clone()).unwrap());
        let s = g.leaf(Tensor::new(vec![1, 5], v).unwrap(), true);
        let l = self_distillation_rows(&mut g, t, s).unwrap();
        let l = g.mean(l);
        assert_eq!(g.value(l).data()[0], 0.0);
        g.backward(l).unwrap();
        assert!(g.grad(s).unwrap().iter().all(|&x| x == 0.0));
    }
}
