//! Dynamic token aggregating through weighted cross-attention (WCA).
//!
//! The sparsified tokens query the full token set; the pre-softmax logits are
//! scaled column-wise by the keep probabilities Π before normalization.

use crate::autodiff::Var;
use crate::error::{shape_err, Result};
use crate::numerics::Graph;
use crate::tensor::Matrix;

/// H×N row-stochastic attention map plus the logits it was normalized from.
#[derive(Clone, Debug, PartialEq)]
pub struct WcaMap {
    pub wm: Matrix,
    pub logits: Matrix,
}

/// Tape handles for a map; `wm` is the handle the same stage's reconstruction consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WcaVars {
    pub wm: Var,
    pub logits: Var,
}

impl WcaVars {
    pub fn to_map(self, g: &Graph<'_>) -> WcaMap {
        WcaMap {
            wm: g.value(self.wm).clone(),
            logits: g.value(self.logits).clone(),
        }
    }
}

/// `Q = S·W_Q`, `K = T·W_K`, `V = T·W_V` (no biases).
pub fn project_qkv(g: &mut Graph<'_>, s: Var, t: Var, prefix: &str) -> Result<(Var, Var, Var)> {
    let d = g.value(s).cols();
    if g.value(t).cols() != d {
        return Err(shape_err(
            "project_qkv",
            format!("S width {d} vs T width {}", g.value(t).cols()),
        ));
    }
    let q = g.linear(s, &format!("{prefix}.w_q"), d, false)?;
    let k = g.linear(t, &format!("{prefix}.w_k"), d, false)?;
    let v = g.linear(t, &format!("{prefix}.w_v"), d, false)?;
    Ok((q, k, v))
}

/// `WM = softmax_rows(Π ⊙ (Q·Kᵀ/√D + B))`.
///
/// `pi` is the keep vector as N×1 (repeated over the H rows); `None` gives the
/// vanilla cross-attention map. `bias` is H×N or absent.
pub fn wca_map(
    g: &mut Graph<'_>,
    q: Var,
    k: Var,
    pi: Option<Var>,
    bias: Option<Var>,
    d: usize,
) -> Result<WcaVars> {
    let (h, n) = (g.value(q).rows(), g.value(k).rows());
    let qk = g.tape.matmul_nt(q, k)?;
    let mut logits = g.tape.scale(qk, 1.0 / (d as f64).sqrt());
    if let Some(b) = bias {
        if g.value(b).shape() != (h, n) {
            return Err(shape_err(
                "wca_map",
                format!("bias {:?} for {h}x{n}", g.value(b).shape()),
            ));
        }
        logits = g.tape.add(logits, b)?;
    }
    if let Some(p) = pi {
        if g.value(p).shape() != (n, 1) {
            return Err(shape_err(
                "wca_map",
                format!("pi {:?} for N = {n}", g.value(p).shape()),
            ));
        }
        let row = g.tape.transpose(p);
        logits = g.tape.mul_row(logits, row)?;
    }
    let wm = g.tape.softmax_rows(logits);
    Ok(WcaVars { wm, logits })
}

/// Pooled sparsified tokens `WM·V`.
pub fn aggregate(g: &mut Graph<'_>, wm: Var, v: Var) -> Result<Var> {
    g.tape.matmul(wm, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ParamStore;

    #[test]
    fn single_entry_map_is_one() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let q = g.constant(Matrix::from_rows(&[[0.3, -2.0]]));
        let k = g.constant(Matrix::from_rows(&[[1.5, 0.7]]));
        let pi = g.constant(Matrix::column_vector(&[0.2]));
        let m = wca_map(&mut g, q, k, Some(pi), None, 2).unwrap();
        assert_eq!(g.value(m.wm).as_slice(), &[1.0]);
    }

    #[test]
    fn identity_and_null_projections() {
        let mut store = ParamStore::new();
        store.insert("dta.w_q.weight", Matrix::identity(2));
        store.insert("dta.w_k.weight", Matrix::identity(2));
        store.insert("dta.w_v.weight", Matrix::identity(2));
        let s_m = Matrix::from_rows(&[[1.0, 2.0]]);
        let t_m = Matrix::from_rows(&[[0.5, -1.0], [3.0, 0.0]]);
        let mut g = Graph::new(&store);
        let s = g.constant(s_m.clone());
        let t = g.constant(t_m.clone());
        let (q, k, v) = project_qkv(&mut g, s, t, "dta").unwrap();
        assert_eq!(g.value(q), &s_m);
        assert_eq!(g.value(k), &t_m);
        assert_eq!(g.value(v), &t_m);

        store.insert("dta.w_v.weight", Matrix::zeros(2, 2));
        let mut g = Graph::new(&store);
        let s = g.constant(s_m);
        let t = g.constant(t_m);
        let (_, _, v) = project_qkv(&mut g, s, t, "dta").unwrap();
        assert_eq!(g.value(v), &Matrix::zeros(2, 2));
    }

    #[test]
    fn projection_hand_example() {
        let mut store = ParamStore::new();
        store.insert("p.w_q.weight", Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));
        store.insert("p.w_k.weight", Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]));
        store.insert("p.w_v.weight", Matrix::from_rows(&[[2.0, 0.0], [0.0, -1.0]]));
        let mut g = Graph::new(&store);
        let s = g.constant(Matrix::from_rows(&[[1.0, 1.0], [0.0, 2.0]]));
        let t = g.constant(Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));
        let (q, k, v) = project_qkv(&mut g, s, t, "p").unwrap();
        assert_eq!(g.value(q), &Matrix::from_rows(&[[4.0, 6.0], [6.0, 8.0]]));
        assert_eq!(g.value(k), &Matrix::from_rows(&[[2.0, 1.0], [4.0, 3.0]]));
        assert_eq!(g.value(v), &Matrix::from_rows(&[[2.0, -2.0], [6.0, -4.0]]));
    }

    #[test]
    fn projection_width_mismatch_errors() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let s = g.constant(Matrix::zeros(1, 2));
        let t = g.constant(Matrix::zeros(3, 4));
        assert!(project_qkv(&mut g, s, t, "p").is_err());
    }

    #[test]
    fn aggregate_uniform_is_mean_and_one_hot_is_copy() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let v_m = Matrix::from_rows(&[[1.0, 2.0], [3.0, -4.0], [5.0, 0.5]]);
        let v = g.constant(v_m.clone());
        let uni = g.constant(Matrix::filled(2, 3, 1.0 / 3.0));
        let out = aggregate(&mut g, uni, v).unwrap();
        for r in 0..2 {
            assert!((g.value(out)[(r, 0)] - 3.0).abs() < 1e-12);
            assert!((g.value(out)[(r, 1)] + 0.5).abs() < 1e-12);
        }
        let hot = g.constant(Matrix::from_rows(&[[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]));
        let out = aggregate(&mut g, hot, v).unwrap();
        assert_eq!(g.value(out).row(0), v_m.row(2));
        assert_eq!(g.value(out).row(1), v_m.row(0));
    }

    #[test]
    fn aggregate_shape_mismatch_errors() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let wm = g.constant(Matrix::zeros(2, 3));
        let v = g.constant(Matrix::zeros(4, 2));
        assert!(aggregate(&mut g, wm, v).is_err());
    }

    #[test]
    fn raising_one_keep_score_changes_only_its_column() {
        let store = ParamStore::new();
        let q_m = Matrix::from_rows(&[[0.2, -0.4], [1.0, 0.3]]);
        let k_m = Matrix::from_rows(&[[0.5, 0.1], [-0.3, 0.8], [0.9, -0.6]]);
        let logits_for = |pi: &[f64]| {
            let mut g = Graph::new(&store);
            let q = g.constant(q_m.clone());
            let k = g.constant(k_m.clone());
            let p = g.constant(Matrix::column_vector(pi));
            let m = wca_map(&mut g, q, k, Some(p), None, 2).unwrap();
            g.value(m.logits).clone()
        };
        let a = logits_for(&[0.3, 0.6, 0.2]);
        let b = logits_for(&[0.3, 0.9, 0.2]);
        for r in 0..2 {
            assert_eq!(a[(r, 0)], b[(r, 0)]);
            assert_ne!(a[(r, 1)], b[(r, 1)]);
            assert_eq!(a[(r, 2)], b[(r, 2)]);
        }
    }
}
