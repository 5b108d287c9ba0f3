//! Central-difference validation of analytic gradients.

use super::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Compares the analytic gradient of a scalar function against central
/// differences with step `h`, returning
/// `max_i |analytic_i − fd_i| / max(1, |analytic_i|)`.
///
/// `f` builds the function on a fresh graph from the leaf holding `x` and
/// must return a one-element output.
pub fn grad_check<F>(f: F, x: &Tensor, h: Real) -> Result<Real>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let eval = |point: &Tensor| -> Result<Real> {
        let mut g = Graph::new();
        let v = g.input(point.clone());
        let out = f(&mut g, v)?;
        let y = g.value(out).item();
        if y.is_finite() {
            Ok(y)
        } else {
            Err(Error::NonFinite)
        }
    };

    let mut g = Graph::new();
    let v = g.param(x.clone());
    let out = f(&mut g, v)?;
    if !g.value(out).item().is_finite() {
        return Err(Error::NonFinite);
    }
    g.backward(out)?;
    let analytic = g.grad(v).cloned().unwrap_or_else(|| x.zeros_like());

    let mut worst: Real = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - fd).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
