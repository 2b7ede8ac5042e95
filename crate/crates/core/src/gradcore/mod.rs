//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only tape: each op evaluates eagerly, stores its
//! output and whatever it needs for the reverse pass, and [`Graph::backward`]
//! walks the tape once in reverse append order. Gradients accumulate
//! additively when a node feeds several consumers.

mod graph;
pub(crate) mod kernels;
mod tensor;
#[cfg(test)]
mod tests;

pub use graph::{Graph, NodeId};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Outcome of a central finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteDiffReport {
    pub max_rel_error: f64,
    /// (parameter index, coordinate) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
}

/// Relative error with the `max(|a|, |b|, 1e-8)` denominator.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares autodiff gradients of a scalar function against central
/// differences `(f(θ+h) − f(θ−h)) / 2h`, coordinate by coordinate.
///
/// `f` receives a fresh graph plus one leaf per entry of `params` and must
/// return a scalar node. It is called once for the analytic pass and twice
/// per coordinate.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], step: f64) -> Result<FiniteDiffReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    finite_diff_check_at(f, params, step, None)
}

/// [`finite_diff_check`] restricted to the listed `(parameter, coordinate)`
/// pairs; `None` checks every coordinate.
pub fn finite_diff_check_at<F>(
    f: F,
    params: &[Tensor],
    step: f64,
    coords: Option<&[(usize, usize)]>,
) -> Result<FiniteDiffReport>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if !(step > 0.0) {
        return Err(Error::OutOfRange {
            what: "finite-difference step",
            value: step,
            range: "> 0",
        });
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let out = f(&mut g, &ids)?;
        let v = g.value(out);
        if v.numel() != 1 {
            return Err(Error::NonScalarLoss(v.shape().to_vec()));
        }
        Ok(v.data()[0])
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|p| g.leaf(p.clone(), true)).collect();
    let out = f(&mut g, &ids)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| g.grad(id).unwrap().to_vec()).collect();
    if let Some(&(p, i)) = coords.and_then(|c| c.iter().find(|&&(p, i)| p >= params.len() || i >= params[p].numel())) {
        return Err(Error::InvalidConfig(format!("coordinate ({p}, {i}) is outside the parameters")));
    }

    let coords: Vec<(usize, usize)> = match coords {
        Some(c) => c.to_vec(),
        None => (0..params.len())
            .flat_map(|p| (0..params[p].numel()).map(move |i| (p, i)))
            .collect(),
    };
    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = FiniteDiffReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for (p, i) in coords {
        let orig = work[p].data()[i];
        work[p].data_mut()[i] = orig + step;
        let plus = eval(&work)?;
        work[p].data_mut()[i] = orig - step;
        let minus = eval(&work)?;
        work[p].data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let err = relative_error(analytic[p][i], numeric);
        report.coordinates += 1;
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((p, i));
        }
    }
    Ok(report)
}
