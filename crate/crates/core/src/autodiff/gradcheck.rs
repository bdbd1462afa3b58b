//! Central finite-difference gradient checking in 64-bit mode.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Denominator floor for the per-coordinate relative error.
pub const ABS_FLOOR: f64 = 1e-8;

/// Compare reverse-mode gradients of a scalar function against central
/// differences `(f(x+eps) - f(x-eps)) / (2 eps)` for every coordinate of
/// every input. Returns the largest relative error
/// `|analytic - numeric| / max(|analytic|, |numeric|, ABS_FLOOR)`.
///
/// `build` receives a fresh graph and one leaf per input, and returns the
/// scalar output node.
pub fn finite_difference_check<F>(build: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    Ok(finite_difference_report(build, inputs, eps)?.max_rel_error)
}

/// Worst coordinate found by [`finite_difference_check`].
#[derive(Clone, Copy, Debug, Default)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

pub fn finite_difference_report<F>(build: F, inputs: &[Tensor<f64>], eps: f64) -> Result<FdReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut graph = Graph::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| graph.param(t.clone())).collect();
    let out = build(&mut graph, &leaves)?;
    let grads = graph.backward(out)?;

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let leaves: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &leaves)?;
        Ok(g.value(out).item())
    };

    let mut worst = FdReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, leaf) in leaves.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[k].rows(), inputs[k].cols());
        let analytic = grads.get(*leaf).unwrap_or(&zeros);
        for idx in 0..inputs[k].len() {
            let orig = inputs[k].data()[idx];
            work[k].data_mut()[idx] = orig + eps;
            let plus = eval(&work)?;
            work[k].data_mut()[idx] = orig - eps;
            let minus = eval(&work)?;
            work[k].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[idx];
            let denom = a.abs().max(numeric.abs()).max(ABS_FLOOR);
            let rel = (a - numeric).abs() / denom;
            if rel > worst.max_rel_error {
                worst = FdReport {
                    max_rel_error: rel,
                    input: k,
                    index: idx,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(worst)
}
