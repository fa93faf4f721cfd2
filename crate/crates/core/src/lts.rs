//! Learnable token sparsification: GLocal embedding, keep/drop decision scores
//! and straight-through top-H selection.

use crate::autodiff::Var;
use crate::error::{shape_err, Error, Result};
use crate::numerics::{gumbel_top_h, Graph, SelectionRecord, KEEP_LOGIT_EPS};
use crate::tensor::Matrix;

/// N feature rows of width D with their 3D coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSet {
    pub features: Matrix,
    pub coords: Matrix,
}

impl TokenSet {
    pub fn new(features: Matrix, coords: Matrix) -> Result<Self> {
        if features.rows() == 0 {
            return Err(shape_err("TokenSet", "empty token set"));
        }
        if coords.shape() != (features.rows(), 3) {
            return Err(shape_err(
                "TokenSet",
                format!("coords {:?} for {} tokens", coords.shape(), features.rows()),
            ));
        }
        if !features.is_finite() || !coords.is_finite() {
            return Err(Error::InvalidInput {
                op: "TokenSet",
                detail: "non-finite entry".into(),
            });
        }
        Ok(Self { features, coords })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.features.cols()
    }
}

/// Token features living on a tape, with their (constant) coordinates.
#[derive(Clone, Debug)]
pub struct Tokens {
    pub features: Var,
    pub coords: Matrix,
}

/// Keep/drop probabilities on the tape. `pi` is column 0 of `phi`, as an N×1 column.
#[derive(Clone, Copy, Debug)]
pub struct DecisionVars {
    pub phi: Var,
    pub pi: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecisionScores {
    /// N×2, columns (keep, drop).
    pub phi: Matrix,
    pub pi: Vec<f64>,
}

impl DecisionScores {
    pub fn from_graph(g: &Graph<'_>, d: &DecisionVars) -> Self {
        Self {
            phi: g.value(d.phi).clone(),
            pi: g.value(d.pi).as_slice().to_vec(),
        }
    }
}

/// Selected tokens on the tape. `features` rows equal the source rows exactly in
/// the forward pass; gradients reach the scorer through `soft`.
#[derive(Clone, Debug)]
pub struct Selection {
    pub indices: Vec<usize>,
    pub features: Var,
    pub coords: Matrix,
    /// 1×N soft selection weights.
    pub soft: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparsifiedSelection {
    pub indices: Vec<usize>,
    pub features: Matrix,
    pub coords: Matrix,
    pub soft_weights: Vec<f64>,
}

impl SparsifiedSelection {
    pub fn from_graph(g: &Graph<'_>, s: &Selection) -> Self {
        Self {
            indices: s.indices.clone(),
            features: g.value(s.features).clone(),
            coords: s.coords.clone(),
            soft_weights: s
                .soft
                .map(|v| g.value(v).as_slice().to_vec())
                .unwrap_or_default(),
        }
    }
}

/// Number of tokens kept for ratio `r`: ⌈r·N⌉ clamped to `1..=N`.
pub fn keep_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64).ceil() as usize).clamp(1, n.max(1))
}

/// `[MLP_local(T), mean(MLP_global(T)) repeated]`, width D.
pub fn glocal_embed(g: &mut Graph<'_>, features: Var, prefix: &str) -> Result<Var> {
    let (n, d) = g.value(features).shape();
    if d < 2 || d % 2 != 0 {
        return Err(Error::Config(format!("token width {d} must be even and ≥ 2")));
    }
    let half = d / 2;
    let local = g.mlp2(features, &format!("{prefix}.local"), half, half)?;
    let global = g.mlp2(features, &format!("{prefix}.global"), half, half)?;
    let pooled = g.tape.mean_rows(global);
    let repeated = g.tape.broadcast_rows(pooled, n)?;
    g.tape.concat_cols(local, repeated)
}

/// Φ = softmax(MLP(GLocal)) with a D → D/2 → 2 perceptron; Π = Φ[:, 0].
pub fn decision_scores(g: &mut Graph<'_>, glocal: Var, prefix: &str) -> Result<DecisionVars> {
    let d = g.value(glocal).cols();
    let logits = g.mlp2(glocal, &format!("{prefix}.score"), (d / 2).max(1), 2)?;
    let phi = g.tape.softmax_rows(logits);
    let pick = g.constant(Matrix::column_vector(&[1.0, 0.0]));
    let pi = g.tape.matmul(phi, pick)?;
    Ok(DecisionVars { phi, pi })
}

/// Top-H selection over keep-logits `ln(φ_keep + ε)`.
///
/// Training graphs perturb with Gumbel noise from `g.noise`; otherwise the
/// selection is deterministic. Replaying graphs reuse recorded selections.
pub fn sparsify(
    g: &mut Graph<'_>,
    tokens: &Tokens,
    scores: &DecisionVars,
    h: usize,
    temperature: f64,
) -> Result<Selection> {
    let n = g.value(tokens.features).rows();
    if g.value(scores.pi).rows() != n {
        return Err(shape_err("sparsify", "score count differs from token count"));
    }
    if h == 0 || h > n {
        return Err(Error::InvalidInput {
            op: "sparsify",
            detail: format!("H = {h} with N = {n}"),
        });
    }
    let pi_row = g.tape.transpose(scores.pi);
    let shifted = g.tape.add_scalar(pi_row, KEEP_LOGIT_EPS);
    let logits = g.tape.ln(shifted);

    let replayed = g.next_replay();
    let (indices, noise, baseline) = match replayed {
        Some(rec) => {
            if rec.indices.len() != h {
                return Err(shape_err("sparsify", "replayed selection size differs"));
            }
            (rec.indices, vec![0.0; n], Some(rec.soft_at_indices))
        }
        None => {
            let values = g.value(logits).as_slice().to_vec();
            let sel = gumbel_top_h(&values, h, temperature, g.noise.as_deref_mut())?;
            (sel.indices, sel.noise, None)
        }
    };
    let noise_v = g.constant(Matrix::row_vector(&noise));
    let perturbed = g.tape.add(logits, noise_v)?;
    let scaled = g.tape.scale(perturbed, 1.0 / temperature);
    let soft = g.tape.softmax_rows(scaled);
    let mult = g.tape.straight_through(soft, &indices, baseline.as_deref())?;
    let gathered = g.tape.gather_rows(tokens.features, &indices)?;
    let features = g.tape.mul_col(gathered, mult)?;

    let soft_vals = g.value(soft).as_slice();
    let record = SelectionRecord {
        indices: indices.clone(),
        soft_at_indices: indices.iter().map(|&i| soft_vals[i]).collect(),
    };
    g.selection_log.push(record);
    Ok(Selection {
        coords: tokens.coords.select_rows(&indices),
        indices,
        features,
        soft: Some(soft),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{ParamStore, RngState};

    fn phi_graph<'a>(store: &'a ParamStore, keep: &[f64]) -> (Graph<'a>, DecisionVars) {
        let mut g = Graph::new(store);
        let phi = Matrix::from_vec(
            keep.len(),
            2,
            keep.iter().flat_map(|&k| [k, 1.0 - k]).collect(),
        )
        .unwrap();
        let phi = g.tape.leaf(phi);
        let pick = g.constant(Matrix::column_vector(&[1.0, 0.0]));
        let pi = g.tape.matmul(phi, pick).unwrap();
        (g, DecisionVars { phi, pi })
    }

    fn tokens(g: &mut Graph<'_>, n: usize, d: usize) -> Tokens {
        let feats = Matrix::from_vec(n, d, (0..n * d).map(|v| v as f64 * 0.37 - 1.0).collect())
            .unwrap();
        let coords =
            Matrix::from_vec(n, 3, (0..n * 3).map(|v| (v as f64).sin()).collect()).unwrap();
        Tokens {
            features: g.tape.leaf(feats),
            coords,
        }
    }

    #[test]
    fn keep_count_rounds_up() {
        assert_eq!(keep_count(8, 0.25), 2);
        assert_eq!(keep_count(9, 0.25), 3);
        assert_eq!(keep_count(1, 0.25), 1);
        assert_eq!(keep_count(8, 1.0), 8);
    }

    #[test]
    fn full_keep_copies_in_order() {
        let store = ParamStore::new();
        let (mut g, scores) = phi_graph(&store, &[0.2, 0.9, 0.5, 0.4]);
        let t = tokens(&mut g, 4, 2);
        let sel = sparsify(&mut g, &t, &scores, 4, 1.0).unwrap();
        assert_eq!(sel.indices, vec![0, 1, 2, 3]);
        assert_eq!(g.value(sel.features), g.value(t.features));
    }

    #[test]
    fn dominant_keep_probability_wins() {
        let store = ParamStore::new();
        let (mut g, scores) = phi_graph(&store, &[0.01, 0.01, 0.01, 0.99, 0.01]);
        let t = tokens(&mut g, 5, 2);
        let sel = sparsify(&mut g, &t, &scores, 1, 1.0).unwrap();
        assert_eq!(sel.indices, vec![3]);
        assert_eq!(g.value(sel.features).row(0), g.value(t.features).row(3));
    }

    #[test]
    fn matches_exhaustive_top3() {
        let mut rng = RngState::new(3);
        for _ in 0..20 {
            let keep: Vec<f64> = (0..6).map(|_| rng.uniform()).collect();
            // brute force: the 3-subset with the largest keep sum
            let mut best = (f64::NEG_INFINITY, vec![]);
            for a in 0..6 {
                for b in a + 1..6 {
                    for c in b + 1..6 {
                        let s = keep[a] + keep[b] + keep[c];
                        if s > best.0 {
                            best = (s, vec![a, b, c]);
                        }
                    }
                }
            }
            let store = ParamStore::new();
            let (mut g, scores) = phi_graph(&store, &keep);
            let t = tokens(&mut g, 6, 2);
            let sel = sparsify(&mut g, &t, &scores, 3, 1.0).unwrap();
            assert_eq!(sel.indices, best.1);
        }
    }

    #[test]
    fn rejects_oversized_h() {
        let store = ParamStore::new();
        let (mut g, scores) = phi_graph(&store, &[0.5, 0.5]);
        let t = tokens(&mut g, 2, 2);
        assert!(sparsify(&mut g, &t, &scores, 3, 1.0).is_err());
        assert!(sparsify(&mut g, &t, &scores, 0, 1.0).is_err());
    }

    #[test]
    fn glocal_requires_even_width() {
        let mut store = ParamStore::new();
        let mut rng = RngState::new(0);
        let mut g = Graph::with_source(crate::numerics::ParamSource::Create(&mut store, &mut rng));
        let x = g.constant(Matrix::zeros(3, 3));
        assert!(matches!(glocal_embed(&mut g, x, "lts"), Err(Error::Config(_))));
    }
}
