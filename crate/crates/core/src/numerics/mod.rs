//! Differentiable primitives shared by every block: stable softmax, Gumbel
//! top-H selection, LBR layers and the scalar relative-position bias.

mod graph;
mod params;
mod rng;

pub use graph::{BnUpdate, Graph, ParamSource, SelectionRecord};
pub use params::{Init, Param, ParamStore};
pub use rng::RngState;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Floor on keep probabilities before taking logarithms.
pub const KEEP_LOGIT_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

/// Max-shifted softmax. `Axis::Cols` normalizes each row (sums across columns);
/// `Axis::Rows` normalizes each column.
pub fn stable_softmax(x: &Matrix, axis: Axis) -> Result<Matrix> {
    if !x.is_finite() {
        return Err(Error::InvalidInput {
            op: "stable_softmax",
            detail: "non-finite entry".into(),
        });
    }
    Ok(match axis {
        Axis::Cols => crate::autodiff::softmax_rows(x),
        Axis::Rows => crate::autodiff::softmax_rows(&x.transpose()).transpose(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GumbelSelection {
    /// Selected positions, ascending.
    pub indices: Vec<usize>,
    /// `softmax((logits + noise) / temperature)` over all N positions.
    pub soft_weights: Vec<f64>,
    /// The Gumbel perturbation that was added (all zeros in eval mode).
    pub noise: Vec<f64>,
}

/// Top-`h` of Gumbel-perturbed logits. With `noise = None` (eval mode) no noise
/// is drawn and ties go to the lower index.
pub fn gumbel_top_h(
    logits: &[f64],
    h: usize,
    temperature: f64,
    noise: Option<&mut RngState>,
) -> Result<GumbelSelection> {
    let n = logits.len();
    if h == 0 || h > n {
        return Err(Error::InvalidInput {
            op: "gumbel_top_h",
            detail: format!("H = {h} with N = {n}"),
        });
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidInput {
            op: "gumbel_top_h",
            detail: format!("temperature {temperature}"),
        });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput {
            op: "gumbel_top_h",
            detail: "non-finite logit".into(),
        });
    }
    let gumbel: Vec<f64> = match noise {
        Some(rng) => (0..n).map(|_| rng.gumbel()).collect(),
        None => vec![0.0; n],
    };
    let perturbed: Vec<f64> = logits.iter().zip(&gumbel).map(|(l, g)| l + g).collect();
    let indices = top_h_indices(&perturbed, h);
    let scaled = Matrix::row_vector(
        &perturbed.iter().map(|v| v / temperature).collect::<Vec<_>>(),
    );
    let soft = crate::autodiff::softmax_rows(&scaled).into_vec();
    Ok(GumbelSelection {
        indices,
        soft_weights: soft,
        noise: gumbel,
    })
}

/// Indices of the `h` largest scores (ties → lower index), returned ascending.
pub fn top_h_indices(scores: &[f64], h: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut picked = order[..h.min(scores.len())].to_vec();
    picked.sort_unstable();
    picked
}

/// Linear → BatchNorm → ReLU on a token matrix.
pub fn lbr(g: &mut Graph<'_>, x: Var, prefix: &str, out: usize) -> Result<Var> {
    g.lbr(x, prefix, out)
}

/// Hidden width of the position MLP for token width `d`.
pub fn position_hidden(d: usize) -> usize {
    (d / 4).max(8)
}

/// H×N scalar bias `B[i,j] = MLP(q_i − k_j)` with a 3 → `hidden` → 1 ReLU MLP
/// stored under `{prefix}.w1/.b1/.w2/.b2`.
pub fn position_bias(
    g: &mut Graph<'_>,
    coords_q: &Matrix,
    coords_k: &Matrix,
    prefix: &str,
    hidden: usize,
) -> Result<Var> {
    if !coords_q.is_finite() || !coords_k.is_finite() {
        return Err(Error::InvalidInput {
            op: "position_bias",
            detail: "non-finite coordinates".into(),
        });
    }
    let w1 = g.param(&format!("{prefix}.w1"), 3, hidden, Init::FanInUniform)?;
    let b1 = g.param(&format!("{prefix}.b1"), 1, hidden, Init::Zeros)?;
    let w2 = g.param(&format!("{prefix}.w2"), hidden, 1, Init::FanInUniform)?;
    let b2 = g.param(&format!("{prefix}.b2"), 1, 1, Init::Zeros)?;
    g.tape.pair_bias(coords_q, coords_k, w1, b1, w2, b2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        let s = stable_softmax(&Matrix::row_vector(&[0.0, 0.0]), Axis::Cols).unwrap();
        assert_eq!(s.as_slice(), &[0.5, 0.5]);
        let s = stable_softmax(&Matrix::row_vector(&[1000.0; 3]), Axis::Cols).unwrap();
        for v in s.as_slice() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        // exp(ln k) = k, so the weights are k / (1 + 2 + 3).
        let x = Matrix::row_vector(&[1f64.ln(), 2f64.ln(), 3f64.ln()]);
        let s = stable_softmax(&x, Axis::Cols).unwrap();
        for (v, e) in s.as_slice().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((v - e).abs() < 1e-12);
        }
        let col = stable_softmax(&x.transpose(), Axis::Rows).unwrap();
        assert!(col.transpose().max_abs_diff(&s) < 1e-15);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(stable_softmax(&Matrix::row_vector(&[0.0, f64::NAN]), Axis::Cols).is_err());
        assert!(stable_softmax(&Matrix::row_vector(&[f64::INFINITY]), Axis::Cols).is_err());
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(
            vals in proptest::collection::vec(-1e3f64..1e3, 1..24),
            shift in -50.0f64..50.0,
        ) {
            let x = Matrix::row_vector(&vals);
            let s = stable_softmax(&x, Axis::Cols).unwrap();
            prop_assert!((s.sum() - 1.0).abs() < 1e-6);
            prop_assert!(s.as_slice().iter().all(|&v| v >= 0.0));
            let shifted = stable_softmax(&x.map(|v| v + shift), Axis::Cols).unwrap();
            prop_assert!(shifted.max_abs_diff(&s) < 1e-9);
        }
    }

    #[test]
    fn gumbel_eval_examples() {
        assert_eq!(gumbel_top_h(&[5.0, -5.0], 1, 1.0, None).unwrap().indices, vec![0]);
        assert_eq!(
            gumbel_top_h(&[0.1, 0.4, 0.2], 3, 1.0, None).unwrap().indices,
            vec![0, 1, 2]
        );
        // sorted descending: 0.9 (2), 0.3 (0), 0.2 (3), 0.1 (1)
        assert_eq!(
            gumbel_top_h(&[0.3, 0.1, 0.9, 0.2], 2, 1.0, None).unwrap().indices,
            vec![0, 2]
        );
        assert_eq!(gumbel_top_h(&[1.0, 1.0, 1.0], 2, 1.0, None).unwrap().indices, vec![0, 1]);
    }

    #[test]
    fn gumbel_rejects_bad_counts() {
        assert!(gumbel_top_h(&[1.0, 2.0], 3, 1.0, None).is_err());
        assert!(gumbel_top_h(&[1.0, 2.0], 0, 1.0, None).is_err());
        assert!(gumbel_top_h(&[1.0, 2.0], 1, 0.0, None).is_err());
    }

    #[test]
    fn gumbel_training_is_reproducible() {
        let logits = [0.1, -0.3, 0.7, 0.2, 0.0, -1.0];
        let mut a = RngState::new(9);
        let mut b = RngState::new(9);
        let x = gumbel_top_h(&logits, 3, 1.0, Some(&mut a)).unwrap();
        let y = gumbel_top_h(&logits, 3, 1.0, Some(&mut b)).unwrap();
        assert_eq!(x, y);
        assert!(x.noise.iter().any(|&v| v != 0.0));
        assert!((x.soft_weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let e1 = gumbel_top_h(&logits, 3, 1.0, None).unwrap();
        let e2 = gumbel_top_h(&logits, 3, 1.0, None).unwrap();
        assert_eq!(e1, e2);
    }

    #[test]
    fn position_bias_zero_final_layer_gives_zeros() {
        let mut store = ParamStore::new();
        store.insert("pb.w1", Matrix::filled(3, 8, 0.3));
        store.insert("pb.b1", Matrix::filled(1, 8, 0.1));
        store.insert("pb.w2", Matrix::zeros(8, 1));
        store.insert("pb.b2", Matrix::zeros(1, 1));
        let mut g = Graph::new(&store);
        let q = Matrix::from_rows(&[[0.0, 1.0, 2.0], [1.0, -1.0, 0.5]]);
        let k = Matrix::from_rows(&[[3.0, 0.0, 0.0], [0.2, 0.2, 0.2], [1.0, 1.0, 1.0]]);
        let b = position_bias(&mut g, &q, &k, "pb", 8).unwrap();
        assert_eq!(g.value(b), &Matrix::zeros(2, 3));
    }

    #[test]
    fn position_bias_hand_example() {
        // hidden = 2: w1 columns (1,0,0) and (0,1,-1), b1 = (0, 0.5), w2 = (2, -1), b2 = 0.25
        let mut store = ParamStore::new();
        store.insert("pb.w1", Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]));
        store.insert("pb.b1", Matrix::row_vector(&[0.0, 0.5]));
        store.insert("pb.w2", Matrix::column_vector(&[2.0, -1.0]));
        store.insert("pb.b2", Matrix::filled(1, 1, 0.25));
        let q = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 2.0, 1.0]]);
        let k = Matrix::from_rows(&[[0.0, 0.0, 0.0], [2.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let oracle = |d: [f64; 3]| {
            let h0 = d[0].max(0.0);
            let h1 = (d[1] - d[2] + 0.5).max(0.0);
            2.0 * h0 - h1 + 0.25
        };
        let mut g = Graph::new(&store);
        let b = position_bias(&mut g, &q, &k, "pb", 2).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                let d = [
                    q[(i, 0)] - k[(j, 0)],
                    q[(i, 1)] - k[(j, 1)],
                    q[(i, 2)] - k[(j, 2)],
                ];
                assert!((g.value(b)[(i, j)] - oracle(d)).abs() < 1e-12);
            }
        }
        // diagonal offsets are all zero when q = k
        let mut g = Graph::new(&store);
        let b = position_bias(&mut g, &k, &k, "pb", 2).unwrap();
        let d0 = g.value(b)[(0, 0)];
        for i in 0..3 {
            assert_eq!(g.value(b)[(i, i)], d0);
        }
        assert_eq!(d0, oracle([0.0; 3]));
    }

    #[test]
    fn lbr_constant_input_normalizes_to_zero() {
        let mut store = ParamStore::new();
        store.insert("l.linear.weight", Matrix::identity(2));
        store.insert("l.linear.bias", Matrix::zeros(1, 2));
        store.insert("l.bn.gamma", Matrix::filled(1, 2, 1.0));
        store.insert("l.bn.beta", Matrix::zeros(1, 2));
        store.set_buffer("l.bn.running_mean", Matrix::zeros(1, 2));
        store.set_buffer("l.bn.running_var", Matrix::filled(1, 2, 1.0));
        let mut rng = RngState::new(0);
        let mut g = Graph::training(&store, &mut rng);
        let x = g.constant(Matrix::filled(4, 2, 3.5));
        let y = lbr(&mut g, x, "l", 2).unwrap();
        assert_eq!(g.value(y), &Matrix::zeros(4, 2));
    }

    #[test]
    fn lbr_hand_example() {
        // W = [[1, 2], [0, -1]], b = [0, 1]; x = [[1, 0], [3, 1]]
        // pre = [[1, 3], [3, 6]]; per-column mean [2, 4.5], biased var [1, 2.25]
        // xhat = [[-1, -1], [1, 1]] · 1/sqrt(var + eps) · sqrt(var); gamma [2, 1], beta [0.5, -0.5]
        let mut store = ParamStore::new();
        store.insert("l.linear.weight", Matrix::from_rows(&[[1.0, 2.0], [0.0, -1.0]]));
        store.insert("l.linear.bias", Matrix::row_vector(&[0.0, 1.0]));
        store.insert("l.bn.gamma", Matrix::row_vector(&[2.0, 1.0]));
        store.insert("l.bn.beta", Matrix::row_vector(&[0.5, -0.5]));
        store.set_buffer("l.bn.running_mean", Matrix::zeros(1, 2));
        store.set_buffer("l.bn.running_var", Matrix::filled(1, 2, 1.0));
        let mut rng = RngState::new(0);
        let mut g = Graph::training(&store, &mut rng);
        let x = g.constant(Matrix::from_rows(&[[1.0, 0.0], [3.0, 1.0]]));
        let y = lbr(&mut g, x, "l", 2).unwrap();
        let eps = crate::autodiff::BN_EPS;
        let z0 = 1.0 / (1.0 + eps).sqrt();
        let z1 = 1.5 / (2.25 + eps).sqrt();
        let expected = Matrix::from_rows(&[
            [(0.5 - 2.0 * z0).max(0.0), (-0.5 - z1).max(0.0)],
            [0.5 + 2.0 * z0, -0.5 + z1],
        ]);
        assert!(g.value(y).max_abs_diff(&expected) < 1e-12);
        let upd = &g.bn_updates()[0];
        assert_eq!(upd.mean, vec![2.0, 4.5]);
        assert_eq!(upd.var, vec![2.0, 4.5]);
    }

    #[test]
    fn lbr_rejects_width_mismatch() {
        let mut store = ParamStore::new();
        store.insert("l.linear.weight", Matrix::identity(3));
        let mut g = Graph::new(&store);
        let x = g.constant(Matrix::zeros(2, 2));
        assert!(lbr(&mut g, x, "l", 3).is_err());
    }
}
