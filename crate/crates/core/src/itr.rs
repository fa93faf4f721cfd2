//! Iterative token reconstruction: `T_out = softmax(WMᵀ)·S + T`.

use crate::autodiff::Var;
use crate::error::{shape_err, Result};
use crate::numerics::Graph;

/// Reconstruction weights: the transposed map, softmax-normalized over the H axis (N×H).
pub fn reconstruction_weights(g: &mut Graph<'_>, wm: Var) -> Var {
    let wt = g.tape.transpose(wm);
    g.tape.softmax_rows(wt)
}

/// Maps enhanced sparsified tokens `s` (H×D) back onto `t` (N×D) through the
/// stage's own map `wm` (H×N), with a residual connection.
pub fn reconstruct(g: &mut Graph<'_>, s: Var, t: Var, wm: Var) -> Result<Var> {
    let (h, d) = g.value(s).shape();
    let (n, dt) = g.value(t).shape();
    if d != dt {
        return Err(shape_err(
            "reconstruct",
            format!("S width {d} vs T width {dt}"),
        ));
    }
    if g.value(wm).shape() != (h, n) {
        return Err(shape_err(
            "reconstruct",
            format!("map {:?} for H = {h}, N = {n}", g.value(wm).shape()),
        ));
    }
    let w = reconstruction_weights(g, wm);
    let mixed = g.tape.matmul(w, s)?;
    g.tape.add(mixed, t)
}
