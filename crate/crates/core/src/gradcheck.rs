//! Central finite-difference checks of every block and of a toy end-to-end model.
//!
//! Inputs are stored as parameters so one harness perturbs everything. Learned
//! selections are recorded on the analytic pass and replayed on perturbed
//! passes, so the numeric derivative is taken of the straight-through relaxation.

use serde::Serialize;

pub use crate::autodiff::GradFault;
use crate::autodiff::Var;
use crate::data::PointCloudBlock;
use crate::dta::{aggregate, project_qkv, wca_map};
use crate::error::Result;
use crate::gfe::{branches, gfe_fuse, GfeMode};
use crate::itr::reconstruct;
use crate::lts::{decision_scores, glocal_embed, sparsify, DecisionVars, Tokens};
use crate::numerics::{position_bias, position_hidden, Graph, Init, ParamSource, ParamStore, RngState};
use crate::tensor::Matrix;
use crate::wnet::{forward_batch, multi_loss, Model, ModelConfig, StageConfig};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub fault: Option<GradFault>,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-3,
            floor: 1e-6,
            fault: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockCheck {
    pub block: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Parameter holding the worst entry.
    pub worst: String,
    pub passed: bool,
}

type Build<'a> = dyn Fn(&mut Graph<'_>) -> Result<Var> + 'a;

/// Registers the parameters `build` touches (beyond those already in `store`).
pub fn register(store: &mut ParamStore, seed: u64, build: &Build<'_>) -> Result<()> {
    let mut rng = RngState::new(seed);
    let mut g = Graph::with_source(ParamSource::Create(store, &mut rng));
    g.batch_stats = true;
    build(&mut g)?;
    Ok(())
}

fn loss_value(store: &ParamStore, build: &Build<'_>, replay: &[crate::numerics::SelectionRecord]) -> Result<f64> {
    let mut g = Graph::new(store).replaying(replay.to_vec());
    g.batch_stats = true;
    let l = build(&mut g)?;
    Ok(g.value(l)[(0, 0)])
}

/// Compares analytic and central-difference gradients for every parameter entry.
pub fn check(name: &str, store: &ParamStore, build: &Build<'_>, opts: &GradcheckOptions) -> Result<BlockCheck> {
    let (analytic, log) = {
        let mut g = Graph::new(store);
        if let Some(f) = opts.fault {
            g = g.with_fault(f);
        }
        g.batch_stats = true;
        let loss = build(&mut g)?;
        let grads = g.backward(loss)?;
        (g.param_grads(&grads), g.selection_log.clone())
    };
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    let mut probe = store.clone();
    for (pname, grad) in &analytic {
        for i in 0..grad.as_slice().len() {
            let orig = probe.get(pname).expect("bound parameter").as_slice()[i];
            probe.get_mut(pname).unwrap().as_mut_slice()[i] = orig + opts.step;
            let up = loss_value(&probe, build, &log)?;
            probe.get_mut(pname).unwrap().as_mut_slice()[i] = orig - opts.step;
            let down = loss_value(&probe, build, &log)?;
            probe.get_mut(pname).unwrap().as_mut_slice()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = grad.as_slice()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            if rel > worst.0 || !rel.is_finite() {
                worst = (if rel.is_finite() { rel } else { f64::INFINITY }, format!("{pname}[{i}]"));
            }
            checked += 1;
        }
    }
    Ok(BlockCheck {
        block: name.to_string(),
        checked,
        max_rel_err: worst.0,
        worst: worst.1,
        passed: worst.0 <= opts.tolerance,
    })
}

/// Moves every parameter off its initialization (zero biases sit on ReLU kinks
/// whenever a pairwise offset is zero).
pub fn jitter(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut rng = RngState::new(seed ^ 0x11);
    for (_, m) in store.iter_mut() {
        for v in m.as_mut_slice() {
            *v += rng.uniform_range(-scale, scale);
        }
    }
}

fn rand_matrix(rng: &mut RngState, r: usize, c: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.uniform_range(lo, hi)).collect()).unwrap()
}

/// `Σ x ⊙ R` for a fixed random weighting `R`, so no gradient cancels by symmetry.
fn weighted_sum(g: &mut Graph<'_>, x: Var, seed: u64) -> Result<Var> {
    let (r, c) = g.value(x).shape();
    let w = rand_matrix(&mut RngState::new(seed ^ 0xabcd), r, c, -1.0, 1.0);
    let w = g.constant(w);
    let m = g.tape.mul(x, w)?;
    Ok(g.tape.sum_all(m))
}

fn input(g: &mut Graph<'_>, name: &str, r: usize, c: usize) -> Result<Var> {
    g.param(name, r, c, Init::Zeros)
}

fn case(name: &str, inputs: Vec<(&str, Matrix)>, build: &Build<'_>, opts: &GradcheckOptions) -> Result<BlockCheck> {
    let mut store = ParamStore::new();
    for (k, m) in inputs {
        store.insert(k, m);
    }
    register(&mut store, opts.seed, build)?;
    jitter(&mut store, opts.seed, 0.1);
    check(name, &store, build, opts)
}

/// The toy configuration of the end-to-end check: N = 8, D = 4, two stages, two classes.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        in_channels: 4,
        num_classes: 2,
        stages: vec![
            StageConfig {
                width: 4,
                ratio: 0.5,
                temperature: 1.0,
            };
            2
        ],
        knn_k: 4,
        ..ModelConfig::default()
    }
}

pub fn toy_block(seed: u64) -> PointCloudBlock {
    let mut rng = RngState::new(seed);
    let pts = rand_matrix(&mut rng, 8, 4, -1.0, 1.0);
    PointCloudBlock::new("toy", pts, vec![0, 1, 1, 0, 1, 0, 0, 1]).unwrap()
}

/// End-to-end check of a model's multi-stage loss on `blocks`.
pub fn check_model(model: &Model, blocks: &[PointCloudBlock], opts: &GradcheckOptions) -> Result<BlockCheck> {
    let cfg = model.config.clone();
    let build = |g: &mut Graph<'_>| -> Result<Var> {
        let pts: Vec<&Matrix> = blocks.iter().map(|b| &b.points).collect();
        let labels: Vec<&[usize]> = blocks.iter().map(|b| b.labels.as_slice()).collect();
        let out = forward_batch(g, &cfg, &pts)?;
        multi_loss(g, &out, &labels, cfg.num_classes)
    };
    check("end_to_end", &model.params, &build, opts)
}

/// All suites at toy sizes.
pub fn run_suite(opts: &GradcheckOptions) -> Result<Vec<BlockCheck>> {
    let mut rng = RngState::new(opts.seed.wrapping_add(1));
    let s = opts.seed;
    let mut out = Vec::new();

    let x = rand_matrix(&mut rng, 3, 4, -2.0, 2.0);
    out.push(case(
        "numerics.softmax",
        vec![("x", x)],
        &|g| {
            let x = input(g, "x", 3, 4)?;
            let y = g.tape.softmax_rows(x);
            weighted_sum(g, y, s)
        },
        opts,
    )?);

    let x = rand_matrix(&mut rng, 4, 4, -1.0, 1.0);
    out.push(case(
        "numerics.lbr",
        vec![("x", x)],
        &|g| {
            let x = input(g, "x", 4, 4)?;
            let y = g.lbr(x, "lbr", 4)?;
            weighted_sum(g, y, s)
        },
        opts,
    )?);

    let cq = rand_matrix(&mut rng, 2, 3, -1.0, 1.0);
    let ck = rand_matrix(&mut rng, 4, 3, -1.0, 1.0);
    out.push(case(
        "numerics.position_bias",
        vec![],
        &|g| {
            let b = position_bias(g, &cq, &ck, "pos", 8)?;
            weighted_sum(g, b, s)
        },
        opts,
    )?);

    // straight-through top-H: keep probabilities from a softmax over free logits
    let logits = rand_matrix(&mut rng, 8, 2, -1.5, 1.5);
    let feats = rand_matrix(&mut rng, 8, 2, -1.0, 1.0);
    let coords8 = rand_matrix(&mut rng, 8, 3, -1.0, 1.0);
    out.push(case(
        "numerics.gumbel_ste",
        vec![("logits", logits), ("t", feats)],
        &|g| {
            let l = input(g, "logits", 8, 2)?;
            let phi = g.tape.softmax_rows(l);
            let pick = g.constant(Matrix::column_vector(&[1.0, 0.0]));
            let pi = g.tape.matmul(phi, pick)?;
            let t = Tokens {
                features: input(g, "t", 8, 2)?,
                coords: coords8.clone(),
            };
            let sel = sparsify(g, &t, &DecisionVars { phi, pi }, 3, 1.0)?;
            weighted_sum(g, sel.features, s)
        },
        opts,
    )?);

    let t4 = rand_matrix(&mut rng, 4, 4, -1.0, 1.0);
    let c4 = rand_matrix(&mut rng, 4, 3, -1.0, 1.0);
    out.push(case(
        "lts",
        vec![("t", t4)],
        &|g| {
            let t = Tokens {
                features: input(g, "t", 4, 4)?,
                coords: c4.clone(),
            };
            let gl = glocal_embed(g, t.features, "lts")?;
            let scores = decision_scores(g, gl, "lts")?;
            let sel = sparsify(g, &t, &scores, 2, 1.0)?;
            let total = g.tape.sum_all(sel.features);
            let w = weighted_sum(g, sel.features, s)?;
            g.tape.add(total, w)
        },
        opts,
    )?);

    let sm = rand_matrix(&mut rng, 2, 2, -1.0, 1.0);
    let tm = rand_matrix(&mut rng, 3, 2, -1.0, 1.0);
    let pim = rand_matrix(&mut rng, 3, 1, 0.2, 0.9);
    let sc = rand_matrix(&mut rng, 2, 3, -1.0, 1.0);
    let tc = rand_matrix(&mut rng, 3, 3, -1.0, 1.0);
    out.push(case(
        "dta",
        vec![("s", sm), ("t", tm), ("pi", pim)],
        &|g| {
            let sv = input(g, "s", 2, 2)?;
            let tv = input(g, "t", 3, 2)?;
            let pi = input(g, "pi", 3, 1)?;
            let (q, k, v) = project_qkv(g, sv, tv, "dta")?;
            let b = position_bias(g, &sc, &tc, "dta.pos", position_hidden(2))?;
            let wm = wca_map(g, q, k, Some(pi), Some(b), 2)?;
            let agg = aggregate(g, wm.wm, v)?;
            weighted_sum(g, agg, s)
        },
        opts,
    )?);

    let s3 = rand_matrix(&mut rng, 3, 4, -1.0, 1.0);
    let c3 = rand_matrix(&mut rng, 3, 3, -1.0, 1.0);
    out.push(case(
        "gfe",
        vec![("s", s3)],
        &|g| {
            let sv = input(g, "s", 3, 4)?;
            let (fp, fc) = branches(g, sv, &c3, GfeMode::Dual, "gfe")?;
            let y = gfe_fuse(g, sv, fp, fc, "gfe")?;
            weighted_sum(g, y, s)
        },
        opts,
    )?);

    let s2 = rand_matrix(&mut rng, 2, 2, -1.0, 1.0);
    let t3 = rand_matrix(&mut rng, 3, 2, -1.0, 1.0);
    let wl = rand_matrix(&mut rng, 2, 3, -1.0, 1.0);
    out.push(case(
        "itr",
        vec![("s", s2), ("t", t3), ("wm_logits", wl)],
        &|g| {
            let sv = input(g, "s", 2, 2)?;
            let tv = input(g, "t", 3, 2)?;
            let l = input(g, "wm_logits", 2, 3)?;
            let wm = g.tape.softmax_rows(l);
            let y = reconstruct(g, sv, tv, wm)?;
            weighted_sum(g, y, s)
        },
        opts,
    )?);

    let mut model = Model::new(toy_model_config(), opts.seed)?;
    jitter(&mut model.params, opts.seed, 0.1);
    out.push(check_model(&model, &[toy_block(opts.seed.wrapping_add(2))], opts)?);
    Ok(out)
}
