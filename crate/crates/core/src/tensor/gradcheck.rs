//! Central finite-difference gradient checking over f64 graphs.

use super::{Graph, NodeId, Tensor};
use crate::error::Result;

/// Step used by [`max_gradient_error`].
pub const FD_STEP: f64 = 1e-6;

/// Builds a graph for `params`, returning the scalar loss and one node per param.
pub type Builder<'a> = dyn Fn(&mut Graph<f64>, &[Tensor<f64>]) -> (NodeId, Vec<NodeId>) + 'a;

/// Central finite differences of a scalar function of `params[which]`.
pub fn finite_difference(
    params: &[Tensor<f64>],
    which: usize,
    h: f64,
    f: &dyn Fn(&[Tensor<f64>]) -> f64,
) -> Tensor<f64> {
    let mut grad = Tensor::zeros(params[which].shape());
    let mut work = params.to_vec();
    for i in 0..params[which].len() {
        let orig = work[which].data()[i];
        work[which].data_mut()[i] = orig + h;
        let plus = f(&work);
        work[which].data_mut()[i] = orig - h;
        let minus = f(&work);
        work[which].data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// `||a - b|| / max(||a||, ||b||)`.
pub fn relative_error(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.l2_norm().max(b.l2_norm()).max(1e-12);
    diff / scale
}

/// Worst relative error between backprop and finite-difference gradients over all params.
pub fn max_gradient_error(params: &[Tensor<f64>], build: &Builder) -> Result<f64> {
    let mut g = Graph::new();
    let (loss, ids) = build(&mut g, params);
    let grads = g.backward(loss)?;
    let eval = |ps: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let (loss, _) = build(&mut g, ps);
        g.value(loss).item()
    };
    Ok(ids
        .iter()
        .enumerate()
        .map(|(which, id)| relative_error(&grads.wrt(*id), &finite_difference(params, which, FD_STEP, &eval)))
        .fold(0.0, f64::max))
}
