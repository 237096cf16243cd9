use super::array::NdArray;
use super::graph::{Graph, Var};
use crate::error::Result;

/// Denominator floor for [`relative_error`].
pub const REL_FLOOR: f64 = 1e-7;

/// `|a - n| / max(|a|, |n|, 1e-7)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central differences of a scalar function at `theta`, one coordinate at a
/// time.
pub fn central_difference(
    mut f: impl FnMut(&NdArray) -> Result<f64>,
    theta: &NdArray,
    eps: f64,
) -> Result<NdArray> {
    let mut probe = theta.clone();
    let mut out = NdArray::zeros(theta.shape());
    for i in 0..theta.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(out)
}

/// Compares the tape gradient of `f` at `theta` with central differences and
/// returns the largest per-coordinate [`relative_error`].
///
/// `f` records a scalar function of its input leaf onto the given graph.
pub fn grad_check(
    mut f: impl FnMut(&mut Graph, Var) -> Result<Var>,
    theta: &NdArray,
    eps: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.param(theta.clone());
    let loss = f(&mut g, x)?;
    let analytic = g.backward(loss)?.get_or_zeros(x);
    let numeric = central_difference(
        |t| {
            let mut g = Graph::new();
            let x = g.constant(t.clone());
            let loss = f(&mut g, x)?;
            Ok(g.value(loss).item())
        },
        theta,
        eps,
    )?;
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| relative_error(*a, *n))
        .fold(0.0, f64::max))
}
