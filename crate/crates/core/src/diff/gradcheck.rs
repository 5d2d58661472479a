//! Central finite-difference checking of analytic gradients.

use crate::array::NdArray;
use crate::diff::graph::{DiffGraph, NodeId};
use crate::error::Result;
use crate::scalar::Real;

/// Outcome of comparing backprop gradients with central differences.
#[derive(Debug, Clone)]
pub struct GradCheck<T> {
    pub analytic: Vec<NdArray<T>>,
    pub numeric: Vec<NdArray<T>>,
    /// Worst per-input relative error `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂, floor)`.
    pub max_relative_error: T,
}

/// Relative error between two gradient arrays, with an absolute floor on the
/// denominator so that vanishing gradients compare on absolute terms. The
/// floor sits above the roundoff of a central difference at unit loss scale,
/// which is about 1e-11 for a step of 1e-5.
pub fn relative_error<T: Real>(a: &NdArray<T>, b: &NdArray<T>) -> T {
    let diff: T = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>().sqrt();
    let scale = a.frobenius_sq().sqrt().max(b.frobenius_sq().sqrt()).max(T::lit(1e-6));
    diff / scale
}

/// Central differences of a scalar function of several array inputs.
pub fn numeric_gradients<T: Real, F>(f: F, inputs: &[NdArray<T>], step: T) -> Result<Vec<NdArray<T>>>
where
    F: Fn(&[NdArray<T>]) -> Result<T>,
{
    let mut work: Vec<NdArray<T>> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = NdArray::zeros(inputs[i].shape().to_vec());
        for k in 0..inputs[i].len() {
            let orig = work[i].data()[k];
            work[i].data_mut()[k] = orig + step;
            let up = f(&work)?;
            work[i].data_mut()[k] = orig - step;
            let down = f(&work)?;
            work[i].data_mut()[k] = orig;
            grad.data_mut()[k] = (up - down) / (T::lit(2.0) * step);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Builds the graph from `inputs` as gradient-requiring leaves, backpropagates
/// the scalar it returns, and compares against central differences.
pub fn check_gradients<T: Real, B>(build: B, inputs: &[NdArray<T>], step: T) -> Result<GradCheck<T>>
where
    B: Fn(&mut DiffGraph<T>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = DiffGraph::new(0);
    let leaves: Vec<NodeId> = inputs.iter().map(|v| g.leaf(v.clone(), true)).collect();
    let loss = build(&mut g, &leaves)?;
    g.backpropagate(loss)?;
    let analytic: Vec<NdArray<T>> = leaves.iter().map(|&l| g.grad(l)).collect();

    let eval = |vals: &[NdArray<T>]| -> Result<T> {
        let mut g = DiffGraph::new(0);
        let leaves: Vec<NodeId> = vals.iter().map(|v| g.constant(v.clone())).collect();
        let loss = build(&mut g, &leaves)?;
        Ok(g.value(loss).item())
    };
    let numeric = numeric_gradients(eval, inputs, step)?;
    let max_relative_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a, n))
        .fold(T::zero(), |m, e| m.max(e));
    Ok(GradCheck { analytic, numeric, max_relative_error })
}
