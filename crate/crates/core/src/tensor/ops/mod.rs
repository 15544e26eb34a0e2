//! Differentiable operations on [`Var`](super::Var)s.
//!
//! Every op validates shapes eagerly and records a backward closure only when
//! one of its inputs requires a gradient.

mod conv;
mod elementwise;
mod loss;
mod norm;
mod pool;
mod resample;

pub use conv::{conv2d_output_size, gaussian_kernel};
pub use loss::{log_softmax_rows, softmax_rows};
pub use norm::{BatchStats, NormMode};
pub use resample::ResampleMap;

use super::{Element, Tensor};
use crate::error::{Error, Result};

pub(crate) fn check_same_shape<E: Element>(name: &str, a: &Tensor<E>, b: &Tensor<E>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            name: name.to_string(),
            expected: a.shape().to_vec(),
            found: b.shape().to_vec(),
        });
    }
    Ok(())
}
