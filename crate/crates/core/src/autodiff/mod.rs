//! Minimal dense reverse-mode automatic differentiation.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{finite_difference_check, finite_difference_report, FdReport, ABS_FLOOR};
pub use graph::{Gradients, Graph, Var, ZERO_NORM};
pub use tensor::{Scalar, Tensor};

pub(crate) use graph::{logsumexp_slice, pearson_stats, softmax_slice};
pub(crate) use tensor::dot;

use crate::error::{Error, Result};

/// Numerically stable softmax of a plain vector.
pub fn softmax<T: Scalar>(x: &[T]) -> Result<Vec<T>> {
    if x.is_empty() {
        return Err(Error::EmptySoftmax);
    }
    Ok(softmax_slice(x))
}

/// Layer normalization of a single token vector.
pub fn layer_norm<T: Scalar>(x: &[T], gain: &[T], bias: &[T], eps: T) -> Result<Vec<T>> {
    if x.is_empty() || gain.len() != x.len() || bias.len() != x.len() {
        return Err(Error::shape(
            "layer_norm",
            format!("x {} gain {} bias {}", x.len(), gain.len(), bias.len()),
        ));
    }
    if eps <= T::zero() {
        return Err(Error::invalid("layer_norm eps must be positive"));
    }
    let mut g = Graph::new();
    let xv = g.constant(Tensor::row_vector(x.to_vec())?);
    let gv = g.constant(Tensor::row_vector(gain.to_vec())?);
    let bv = g.constant(Tensor::row_vector(bias.to_vec())?);
    let y = g.layer_norm(xv, gv, bv, eps)?;
    Ok(g.value(y).data().to_vec())
}
