//! Global feature enhancement: point-wise and channel-wise self-attention over
//! the pooled sparsified tokens, fused through a residual LBR.

use crate::autodiff::Var;
use crate::error::{shape_err, Result};
use crate::numerics::{position_bias, position_hidden, Graph};
use crate::tensor::Matrix;

/// Which attention branches are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GfeMode {
    Dual,
    /// Point-wise branch only ("−CSA").
    PointOnly,
    /// Channel-wise branch only ("−PSA").
    ChannelOnly,
    /// Block removed: tokens pass through unchanged.
    Off,
}

impl GfeMode {
    pub fn point(self) -> bool {
        matches!(self, GfeMode::Dual | GfeMode::PointOnly)
    }

    pub fn channel(self) -> bool {
        matches!(self, GfeMode::Dual | GfeMode::ChannelOnly)
    }
}

/// `(S·W_QE, S·W_KE, S·W_VE)`, shared by both branches.
#[derive(Clone, Copy, Debug)]
pub struct GfeProjections {
    pub q: Var,
    pub k: Var,
    pub v: Var,
}

pub fn project(g: &mut Graph<'_>, s: Var, prefix: &str) -> Result<GfeProjections> {
    let d = g.value(s).cols();
    Ok(GfeProjections {
        q: g.linear(s, &format!("{prefix}.w_qe"), d, false)?,
        k: g.linear(s, &format!("{prefix}.w_ke"), d, false)?,
        v: g.linear(s, &format!("{prefix}.w_ve"), d, false)?,
    })
}

/// `F_P = softmax(Q_E·K_Eᵀ/√D + B̀)·V_E`, with B̀ from the coordinate offsets.
pub fn pointwise_attention(
    g: &mut Graph<'_>,
    proj: &GfeProjections,
    coords: &Matrix,
    prefix: &str,
) -> Result<Var> {
    let (h, d) = g.value(proj.q).shape();
    if coords.rows() != h {
        return Err(shape_err("pointwise_attention", "coords/token count mismatch"));
    }
    let qk = g.tape.matmul_nt(proj.q, proj.k)?;
    let scaled = g.tape.scale(qk, 1.0 / (d as f64).sqrt());
    let bias = position_bias(g, coords, coords, &format!("{prefix}.pos"), position_hidden(d))?;
    let logits = g.tape.add(scaled, bias)?;
    let attn = g.tape.softmax_rows(logits);
    g.tape.matmul(attn, proj.v)
}

/// `F_C = (softmax(K_Eᵀ·Q_E/√D)·V_Eᵀ)ᵀ`, an H×D result.
pub fn channelwise_attention(g: &mut Graph<'_>, proj: &GfeProjections) -> Result<Var> {
    let d = g.value(proj.q).cols();
    let kt = g.tape.transpose(proj.k);
    let kq = g.tape.matmul(kt, proj.q)?;
    let scaled = g.tape.scale(kq, 1.0 / (d as f64).sqrt());
    let attn = g.tape.softmax_rows(scaled);
    let vt = g.tape.transpose(proj.v);
    let raw = g.tape.matmul(attn, vt)?;
    Ok(g.tape.transpose(raw))
}

/// Pre-normalization part of the fuse: `S + MLP(F_P + F_C)`, absent branches as zero.
pub fn fuse_residual(
    g: &mut Graph<'_>,
    s: Var,
    fp: Option<Var>,
    fc: Option<Var>,
    prefix: &str,
) -> Result<Var> {
    let (h, d) = g.value(s).shape();
    for f in [fp, fc].into_iter().flatten() {
        if g.value(f).shape() != (h, d) {
            return Err(shape_err(
                "gfe_fuse",
                format!("branch {:?} vs S {:?}", g.value(f).shape(), (h, d)),
            ));
        }
    }
    let sum = match (fp, fc) {
        (Some(a), Some(b)) => g.tape.add(a, b)?,
        (Some(a), None) | (None, Some(a)) => a,
        (None, None) => g.constant(Matrix::zeros(h, d)),
    };
    let mixed = g.linear(sum, &format!("{prefix}.fuse"), d, true)?;
    g.tape.add(s, mixed)
}

/// `LBR(S + MLP(F_P + F_C))` for a single token set.
pub fn gfe_fuse(
    g: &mut Graph<'_>,
    s: Var,
    fp: Option<Var>,
    fc: Option<Var>,
    prefix: &str,
) -> Result<Var> {
    let d = g.value(s).cols();
    let r = fuse_residual(g, s, fp, fc, prefix)?;
    g.lbr(r, &format!("{prefix}.out"), d)
}

/// Branch outputs for one token set under `mode`.
pub fn branches(
    g: &mut Graph<'_>,
    s: Var,
    coords: &Matrix,
    mode: GfeMode,
    prefix: &str,
) -> Result<(Option<Var>, Option<Var>)> {
    if mode == GfeMode::Off {
        return Ok((None, None));
    }
    let proj = project(g, s, prefix)?;
    let fp = if mode.point() {
        Some(pointwise_attention(g, &proj, coords, prefix)?)
    } else {
        None
    };
    let fc = if mode.channel() {
        Some(channelwise_attention(g, &proj)?)
    } else {
        None
    };
    Ok((fp, fc))
}

/// Full block over a batch of token sets; normalization statistics span the batch.
pub fn gfe_batch(
    g: &mut Graph<'_>,
    sets: &[(Var, &Matrix)],
    mode: GfeMode,
    prefix: &str,
) -> Result<Vec<Var>> {
    if mode == GfeMode::Off {
        return Ok(sets.iter().map(|(s, _)| *s).collect());
    }
    let mut residuals = Vec::with_capacity(sets.len());
    for &(s, coords) in sets {
        let (fp, fc) = branches(g, s, coords, mode, prefix)?;
        residuals.push(fuse_residual(g, s, fp, fc, prefix)?);
    }
    let d = g.value(sets[0].0).cols();
    g.lbr_batch(&residuals, &format!("{prefix}.out"), d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{ParamSource, ParamStore, RngState};

    fn consts(g: &mut Graph<'_>, q: Matrix, k: Matrix, v: Matrix) -> GfeProjections {
        GfeProjections {
            q: g.constant(q),
            k: g.constant(k),
            v: g.constant(v),
        }
    }

    fn close(a: &Matrix, b: &Matrix, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        assert!(a.max_abs_diff(b) < tol, "{a:?} vs {b:?}");
    }

    #[test]
    fn single_token_point_attention_is_value() {
        let mut store = ParamStore::new();
        let mut rng = RngState::new(1);
        let mut g = Graph::with_source(ParamSource::Create(&mut store, &mut rng));
        let s = g.constant(Matrix::from_rows(&[[0.4, -1.2, 2.0]]));
        let proj = project(&mut g, s, "gfe").unwrap();
        let fp = pointwise_attention(&mut g, &proj, &Matrix::zeros(1, 3), "gfe").unwrap();
        close(g.value(fp), g.value(proj.v), 1e-15);
    }

    #[test]
    fn identical_rows_give_identical_outputs() {
        let mut store = ParamStore::new();
        let mut rng = RngState::new(2);
        let mut g = Graph::with_source(ParamSource::Create(&mut store, &mut rng));
        let s = g.constant(Matrix::from_rows(&[[0.3, 0.9], [0.3, 0.9], [0.3, 0.9]]));
        let coords = Matrix::filled(3, 3, 0.5);
        let (fp, fc) = branches(&mut g, s, &coords, GfeMode::Dual, "gfe").unwrap();
        for v in [fp.unwrap(), fc.unwrap()] {
            let m = g.value(v);
            for r in 1..3 {
                assert_eq!(m.row(r), m.row(0));
            }
        }
    }

    #[test]
    fn point_attention_hand_example() {
        // zero offsets and zero-initialized biases make B̀ vanish
        let mut store = ParamStore::new();
        let mut rng = RngState::new(3);
        let mut g = Graph::with_source(ParamSource::Create(&mut store, &mut rng));
        let proj = consts(
            &mut g,
            Matrix::identity(2),
            Matrix::identity(2),
            Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]),
        );
        let fp = pointwise_attention(&mut g, &proj, &Matrix::zeros(2, 3), "gfe").unwrap();
        let want = Matrix::from_rows(&[[1.6604769, 2.6604769], [2.3395231, 3.3395231]]);
        close(g.value(fp), &want, 1e-7);
    }

    #[test]
    fn single_channel_attention_is_value() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let v = Matrix::from_rows(&[[1.5], [-0.5], [2.0]]);
        let proj = consts(&mut g, Matrix::from_rows(&[[3.0], [1.0], [-2.0]]), Matrix::from_rows(&[[0.1], [0.2], [0.3]]), v.clone());
        let fc = channelwise_attention(&mut g, &proj).unwrap();
        close(g.value(fc), &v, 1e-15);
    }

    #[test]
    fn zero_input_gives_zero_channel_attention() {
        let mut store = ParamStore::new();
        let mut rng = RngState::new(4);
        let mut g = Graph::with_source(ParamSource::Create(&mut store, &mut rng));
        let s = g.constant(Matrix::zeros(3, 4));
        let proj = project(&mut g, s, "gfe").unwrap();
        let fc = channelwise_attention(&mut g, &proj).unwrap();
        assert_eq!(g.value(fc), &Matrix::zeros(3, 4));
    }

    #[test]
    fn channel_attention_hand_example() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let proj = consts(
            &mut g,
            Matrix::identity(2),
            Matrix::identity(2),
            Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]),
        );
        let fc = channelwise_attention(&mut g, &proj).unwrap();
        let want = Matrix::from_rows(&[[1.33023845, 1.66976155], [3.33023845, 3.66976155]]);
        close(g.value(fc), &want, 1e-8);
    }

    #[test]
    fn empty_branches_with_zero_mixer_reduce_to_lbr() {
        let mut store = ParamStore::new();
        let mut rng = RngState::new(5);
        let s_m = Matrix::from_rows(&[[0.5, -1.0, 2.0], [1.5, 0.25, -0.75]]);
        {
            let mut g = Graph::with_source(ParamSource::Create(&mut store, &mut rng));
            let s = g.constant(s_m.clone());
            gfe_fuse(&mut g, s, None, None, "gfe").unwrap();
        }
        for (name, p) in store.iter_mut() {
            if name.starts_with("gfe.fuse") {
                *p = Matrix::zeros(p.rows(), p.cols());
            }
        }
        let mut g = Graph::new(&store);
        let s = g.constant(s_m);
        let out = gfe_fuse(&mut g, s, None, None, "gfe").unwrap();
        let direct = g.lbr(s, "gfe.out", 3).unwrap();
        assert_eq!(g.value(out).shape(), (2, 3));
        assert_eq!(g.value(out), g.value(direct));
    }

    #[test]
    fn fuse_matches_composed_oracle() {
        let mut store = ParamStore::new();
        let mut rng = RngState::new(6);
        let s_m = Matrix::from_rows(&[[0.2, -0.4], [0.9, 0.1], [-0.3, 0.6]]);
        let coords = Matrix::from_rows(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.5]]);
        let (got, fp, fc) = {
            let mut g = Graph::with_source(ParamSource::Create(&mut store, &mut rng));
            let s = g.constant(s_m.clone());
            let (fp, fc) = branches(&mut g, s, &coords, GfeMode::Dual, "gfe").unwrap();
            let out = gfe_fuse(&mut g, s, fp, fc, "gfe").unwrap();
            (g.value(out).clone(), g.value(fp.unwrap()).clone(), g.value(fc.unwrap()).clone())
        };
        // LBR(S + (F_P + F_C)·W + b) with running statistics (0, 1)
        let w = store.get("gfe.fuse.weight").unwrap();
        let b = store.get("gfe.fuse.bias").unwrap();
        let lw = store.get("gfe.out.linear.weight").unwrap();
        let lb = store.get("gfe.out.linear.bias").unwrap();
        let sum = fp.zip_map(&fc, |a, c| a + c);
        let inv = 1.0 / (1.0 + crate::autodiff::BN_EPS).sqrt();
        for r in 0..3 {
            let mixed: Vec<f64> = (0..2)
                .map(|c| s_m.row(r)[c] + (0..2).map(|k| sum.row(r)[k] * w.row(k)[c]).sum::<f64>() + b.row(0)[c])
                .collect();
            for c in 0..2 {
                let lin = (0..2).map(|k| mixed[k] * lw.row(k)[c]).sum::<f64>() + lb.row(0)[c];
                assert!((got.row(r)[c] - (lin * inv).max(0.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn block_is_permutation_equivariant() {
        let mut store = ParamStore::new();
        let mut rng = RngState::new(7);
        let s_m = Matrix::from_rows(&[[0.2, -0.4, 1.0, 0.0], [0.9, 0.1, -0.5, 0.3], [-0.3, 0.6, 0.2, -1.1]]);
        let c_m = Matrix::from_rows(&[[0.0, 0.1, 0.2], [1.0, -0.4, 0.0], [0.3, 0.8, 0.5]]);
        {
            let mut g = Graph::with_source(ParamSource::Create(&mut store, &mut rng));
            let s = g.constant(s_m.clone());
            gfe_batch(&mut g, &[(s, &c_m)], GfeMode::Dual, "gfe").unwrap();
        }
        let perm = [2usize, 0, 1];
        let run = |s_m: &Matrix, c_m: &Matrix| {
            let mut g = Graph::new(&store);
            let s = g.constant(s_m.clone());
            let out = gfe_batch(&mut g, &[(s, c_m)], GfeMode::Dual, "gfe").unwrap();
            g.value(out[0]).clone()
        };
        let base = run(&s_m, &c_m);
        let moved = run(&s_m.select_rows(&perm), &c_m.select_rows(&perm));
        close(&moved, &base.select_rows(&perm), 1e-12);
    }
}
