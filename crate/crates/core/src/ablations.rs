//! Drop-in replacements for the sparsify, aggregate, attention and
//! reconstruction blocks, used by the ablation switches of the model config.

use crate::autodiff::Var;
use crate::data::fps;
use crate::dta::{wca_map, WcaVars};
use crate::error::{shape_err, Error, Result};
use crate::lts::{Selection, Tokens};
use crate::numerics::{Graph, RngState};
use crate::tensor::Matrix;

/// Default neighborhood size for the kNN + MLP aggregator.
pub const DEFAULT_KNN: usize = 16;

/// Uniform sample of `h` of `n` indices without replacement, ascending.
pub fn random_sample(n: usize, h: usize, rng: &mut RngState) -> Result<Vec<usize>> {
    if h == 0 || h > n {
        return Err(Error::InvalidInput {
            op: "random_sample",
            detail: format!("H = {h} with N = {n}"),
        });
    }
    Ok(rng.sample_indices(n, h))
}

/// Farthest-point sampling over token coordinates, in selection order.
pub fn fps_sample(coords: &Matrix, h: usize) -> Result<Vec<usize>> {
    fps(coords, h)
}

/// Gathers `indices` from `tokens` with no score pathway.
pub fn select_fixed(g: &mut Graph<'_>, tokens: &Tokens, indices: Vec<usize>) -> Result<Selection> {
    let features = g.tape.gather_rows(tokens.features, &indices)?;
    Ok(Selection {
        coords: tokens.coords.select_rows(&indices),
        indices,
        features,
        soft: None,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).take(3).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// For each query row, the `k` nearest key rows by squared distance (ties → lower index).
pub fn knn_indices(query: &Matrix, keys: &Matrix, k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > keys.rows() {
        return Err(Error::InvalidInput {
            op: "knn",
            detail: format!("k = {k} with {} keys", keys.rows()),
        });
    }
    Ok((0..query.rows())
        .map(|i| {
            let q = query.row(i);
            let mut order: Vec<(f64, usize)> =
                (0..keys.rows()).map(|j| (sq_dist(q, keys.row(j)), j)).collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            order.truncate(k);
            order.into_iter().map(|(_, j)| j).collect()
        })
        .collect())
}

/// Each sparsified token max-pools a shared two-layer MLP over its `k` nearest
/// original tokens (D → D → D).
pub fn knn_mlp_aggregate(
    g: &mut Graph<'_>,
    s_coords: &Matrix,
    t: &Tokens,
    k: usize,
    prefix: &str,
) -> Result<Var> {
    let d = g.value(t.features).cols();
    let neighbors = knn_indices(s_coords, &t.coords, k)?;
    let flat: Vec<usize> = neighbors.into_iter().flatten().collect();
    let gathered = g.tape.gather_rows(t.features, &flat)?;
    let mapped = g.mlp2(gathered, &format!("{prefix}.mlp"), d, d)?;
    g.tape.group_max_rows(mapped, k)
}

/// Vanilla cross-attention map: the weighted map with Π ≡ 1.
pub fn vca_map(g: &mut Graph<'_>, q: Var, k: Var, bias: Option<Var>, d: usize) -> Result<WcaVars> {
    wca_map(g, q, k, None, bias, d)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InterpMode {
    /// Inverse-squared-distance average of the 3 nearest sources.
    Trilinear,
    Nearest,
}

/// N×H interpolation weights from `sources` onto `targets`.
pub fn interpolation_weights(sources: &Matrix, targets: &Matrix, mode: InterpMode) -> Result<Matrix> {
    let h = sources.rows();
    if h == 0 {
        return Err(shape_err("interpolate_up", "no source tokens"));
    }
    let k = match mode {
        InterpMode::Trilinear => h.min(3),
        InterpMode::Nearest => 1,
    };
    let neighbors = knn_indices(targets, sources, k)?;
    let mut w = Matrix::zeros(targets.rows(), h);
    for (i, nb) in neighbors.iter().enumerate() {
        let d2: Vec<f64> = nb
            .iter()
            .map(|&j| sq_dist(targets.row(i), sources.row(j)))
            .collect();
        if d2[0] == 0.0 {
            w[(i, nb[0])] = 1.0;
            continue;
        }
        let inv: Vec<f64> = d2.iter().map(|v| 1.0 / v).collect();
        let total: f64 = inv.iter().sum();
        for (&j, v) in nb.iter().zip(inv) {
            w[(i, j)] = v / total;
        }
    }
    Ok(w)
}

/// Upsamples sparsified features `s` (H×D at `s_coords`) to the N target coordinates.
pub fn interpolate_up(
    g: &mut Graph<'_>,
    s: Var,
    s_coords: &Matrix,
    t_coords: &Matrix,
    mode: InterpMode,
) -> Result<Var> {
    if g.value(s).rows() != s_coords.rows() {
        return Err(shape_err("interpolate_up", "feature/coordinate count mismatch"));
    }
    let w = interpolation_weights(s_coords, t_coords, mode)?;
    let w = g.constant(w);
    g.tape.matmul(w, s)
}
