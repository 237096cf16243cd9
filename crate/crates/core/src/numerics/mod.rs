//! Dense `f64` arrays, a reverse-mode tape, and a seeded generator.

mod array;
pub mod gradcheck;
mod graph;
mod rng;

pub use array::{cosine, NdArray};
pub use gradcheck::{central_difference, grad_check, relative_error};
pub use graph::{Gradients, Graph, Var};
pub use rng::SeededRng;

use crate::error::Result;

/// Softmax of a vector with masked-out positions fixed at zero.
/// `valid[i] == false` excludes position `i`.
pub fn masked_softmax(x: &NdArray, valid: Option<&[bool]>) -> Result<NdArray> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let out = g.softmax(v, valid)?;
    Ok(g.value(out).clone())
}

/// Element-wise maximum over the valid rows of a `T×d` array.
pub fn max_over_time(h: &NdArray, valid: Option<&[bool]>) -> Result<NdArray> {
    let mut g = Graph::new();
    let v = g.constant(h.clone());
    let out = g.max_over_time(v, valid)?;
    Ok(g.value(out).clone())
}
