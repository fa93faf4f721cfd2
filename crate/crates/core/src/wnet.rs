//! Stem, two-stage sparsify → aggregate → enhance → reconstruct network with a
//! prediction head after every stage, the multi-stage loss and the U-net variant.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ablations::{
    fps_sample, interpolate_up, knn_mlp_aggregate, random_sample, select_fixed, vca_map,
    InterpMode, DEFAULT_KNN,
};
use crate::autodiff::Var;
use crate::dta::{aggregate, project_qkv, wca_map};
use crate::error::{shape_err, Error, Result};
use crate::gfe::{gfe_batch, GfeMode};
use crate::itr::reconstruct;
use crate::lts::{decision_scores, glocal_embed, keep_count, sparsify, DecisionVars, Tokens};
use crate::numerics::{position_bias, position_hidden, Graph, ParamSource, ParamStore, RngState};
use crate::tensor::Matrix;

/// Seed of the sampler used by random-sampling selection when a graph carries no noise.
const EVAL_SAMPLE_SEED: u64 = 0x5eed;

macro_rules! named_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $s:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const NAMES: &'static [&'static str] = &[$($s),+];

            pub fn name(self) -> &'static str {
                match self { $($name::$variant => $s),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($name::$variant),)+
                    _ => Err(Error::Config(format!(
                        "`{s}` is not one of {}",
                        Self::NAMES.join(", ")
                    ))),
                }
            }
        }
    };
}

named_enum!(Architecture { WNet => "wnet", UNet => "unet" });
named_enum!(LtsMode { Learned => "learned", Fps => "fps", Random => "random" });
named_enum!(DtaMode { Wca => "wca", None => "none", KnnMlp => "knn_mlp", Vca => "vca" });
named_enum!(ItrMode { WcaMap => "wca_map", Trilinear => "trilinear", Nearest => "nearest" });
named_enum!(GfeSwitch { Dual => "dual", NoPsa => "no_psa", NoCsa => "no_csa", Off => "none" });

impl GfeSwitch {
    pub fn mode(self) -> GfeMode {
        match self {
            GfeSwitch::Dual => GfeMode::Dual,
            GfeSwitch::NoPsa => GfeMode::ChannelOnly,
            GfeSwitch::NoCsa => GfeMode::PointOnly,
            GfeSwitch::Off => GfeMode::Off,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub width: usize,
    pub ratio: f64,
    pub temperature: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Stage widths; the stem maps C → D₁/2 → D₁.
    pub stages: Vec<StageConfig>,
    pub arch: Architecture,
    pub lts: LtsMode,
    pub dta: DtaMode,
    pub gfe: GfeSwitch,
    pub itr: ItrMode,
    pub knn_k: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 6,
            num_classes: 6,
            stages: vec![
                StageConfig {
                    width: 64,
                    ratio: 0.25,
                    temperature: 1.0,
                },
                StageConfig {
                    width: 128,
                    ratio: 0.25,
                    temperature: 1.0,
                },
            ],
            arch: Architecture::WNet,
            lts: LtsMode::Learned,
            dta: DtaMode::Wca,
            gfe: GfeSwitch::Dual,
            itr: ItrMode::WcaMap,
            knn_k: DEFAULT_KNN,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.in_channels < 3 {
            return Err(Error::Config("need at least X, Y, Z input channels".into()));
        }
        if self.stages.is_empty() {
            return Err(Error::Config("need at least one stage".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.width < 2 || s.width % 2 != 0 {
                return Err(Error::Config(format!("stage {} width {} must be even", i + 1, s.width)));
            }
            if !(s.ratio > 0.0 && s.ratio <= 1.0) {
                return Err(Error::Config(format!("stage {} ratio {}", i + 1, s.ratio)));
            }
            if !(s.temperature > 0.0) {
                return Err(Error::Config(format!("stage {} temperature", i + 1)));
            }
        }
        if self.knn_k == 0 {
            return Err(Error::Config("knn k must be positive".into()));
        }
        Ok(())
    }

    /// Reconstruction mode actually used: without a map, nearest interpolation.
    pub fn effective_itr(&self) -> ItrMode {
        match (self.itr, self.dta) {
            (ItrMode::WcaMap, DtaMode::None | DtaMode::KnnMlp) => ItrMode::Nearest,
            (m, _) => m,
        }
    }

    /// Number of prediction heads (one per stage in W-net mode, one in U-net mode).
    pub fn num_heads(&self) -> usize {
        match self.arch {
            Architecture::WNet => self.stages.len(),
            Architecture::UNet => 1,
        }
    }
}

/// What one stage produced for one block, kept for inspection.
#[derive(Clone, Debug)]
pub struct StageTrace {
    /// Selected token indices into the stage input.
    pub indices: Vec<usize>,
    pub scores: Option<DecisionVars>,
    pub soft: Option<Var>,
    /// Map produced by the aggregation step.
    pub map: Option<Var>,
    /// Map handed to reconstruction (`None` when interpolation was used).
    pub map_consumed: Option<Var>,
    /// Stage input token count.
    pub input_count: usize,
    /// Reconstructed stage output (W-net) or enhanced sparse tokens (U-net encoder).
    pub output: Var,
}

#[derive(Clone, Debug)]
pub struct BlockForward {
    /// Per-head logits, N×classes each.
    pub logits: Vec<Var>,
    pub stages: Vec<StageTrace>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationOutput {
    pub stage_logits: Vec<Matrix>,
}

impl SegmentationOutput {
    /// Argmax of the last head's logits (ties → lower class).
    pub fn prediction(&self) -> Vec<usize> {
        let last = self.stage_logits.last().expect("at least one head");
        argmax_rows(last)
    }
}

/// One stage of [`Model::inspect`]. Indices and map columns refer to the stage
/// input; `origin[i]` is the block point that stage input `i` came from.
#[derive(Clone, Debug, PartialEq)]
pub struct StageInspection {
    pub origin: Vec<usize>,
    pub indices: Vec<usize>,
    /// Keep probability per stage input (learned sampling only).
    pub keep_prob: Option<Vec<f64>>,
    /// H×(stage input) map, absent when the aggregation has none.
    pub map: Option<Matrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inspection {
    pub stages: Vec<StageInspection>,
    pub prediction: Vec<usize>,
}

pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    (0..m.rows())
        .map(|r| {
            m.row(r)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Per-point two-layer LBR `C → D₁/2 → D₁`.
pub fn stem(g: &mut Graph<'_>, cfg: &ModelConfig, points: &[&Matrix]) -> Result<Vec<Var>> {
    for p in points {
        if p.cols() != cfg.in_channels {
            return Err(Error::Config(format!(
                "block has {} channels, model expects {}",
                p.cols(),
                cfg.in_channels
            )));
        }
        if p.rows() == 0 {
            return Err(shape_err("stem", "empty block"));
        }
    }
    let d1 = cfg.stages[0].width;
    let xs: Vec<Var> = points.iter().map(|p| g.constant((*p).clone())).collect();
    let h = g.lbr_batch(&xs, "stem.0", (d1 / 2).max(1))?;
    g.lbr_batch(&h, "stem.1", d1)
}

/// `[t_i, maxpool(T)] → LBR(2D → D) → Linear(D → classes)`.
pub fn head(g: &mut Graph<'_>, tokens: &[Var], prefix: &str, classes: usize) -> Result<Vec<Var>> {
    let mut cats = Vec::with_capacity(tokens.len());
    for &t in tokens {
        let n = g.value(t).rows();
        let pooled = g.tape.max_rows(t)?;
        let rep = g.tape.broadcast_rows(pooled, n)?;
        cats.push(g.tape.concat_cols(t, rep)?);
    }
    let d = g.value(tokens[0]).cols();
    let hidden = g.lbr_batch(&cats, &format!("{prefix}.fc1"), d)?;
    hidden
        .into_iter()
        .map(|h| g.linear(h, &format!("{prefix}.fc2"), classes, true))
        .collect()
}

struct Encoded {
    indices: Vec<usize>,
    coords: Matrix,
    scores: Option<DecisionVars>,
    soft: Option<Var>,
    map: Option<Var>,
    enhanced: Var,
}

/// Sparsify → aggregate → enhance for every block of the batch.
fn encode_stage(
    g: &mut Graph<'_>,
    cfg: &ModelConfig,
    stage: usize,
    tokens: &[Tokens],
) -> Result<Vec<Encoded>> {
    let sc = &cfg.stages[stage];
    let p = format!("stage{}", stage + 1);
    let mut parts = Vec::with_capacity(tokens.len());
    for t in tokens {
        let (n, d) = g.value(t.features).shape();
        if d != sc.width {
            return Err(shape_err("stage_forward", format!("token width {d}, stage width {}", sc.width)));
        }
        let h = keep_count(n, sc.ratio);
        let (sel, scores) = match cfg.lts {
            LtsMode::Learned => {
                let glocal = glocal_embed(g, t.features, &format!("{p}.lts"))?;
                let scores = decision_scores(g, glocal, &format!("{p}.lts"))?;
                (sparsify(g, t, &scores, h, sc.temperature)?, Some(scores))
            }
            LtsMode::Fps => (select_fixed(g, t, fps_sample(&t.coords, h)?)?, None),
            LtsMode::Random => {
                let idx = match g.noise.as_deref_mut() {
                    Some(rng) => random_sample(n, h, rng)?,
                    None => random_sample(n, h, &mut RngState::new(EVAL_SAMPLE_SEED).fork(stage as u64))?,
                };
                (select_fixed(g, t, idx)?, None)
            }
        };
        let (agg, map) = match cfg.dta {
            DtaMode::Wca | DtaMode::Vca => {
                let (q, k, v) = project_qkv(g, sel.features, t.features, &format!("{p}.dta"))?;
                let bias = position_bias(
                    g,
                    &sel.coords,
                    &t.coords,
                    &format!("{p}.dta.pos"),
                    position_hidden(d),
                )?;
                let wm = if cfg.dta == DtaMode::Wca {
                    wca_map(g, q, k, scores.map(|s| s.pi), Some(bias), d)?
                } else {
                    vca_map(g, q, k, Some(bias), d)?
                };
                (aggregate(g, wm.wm, v)?, Some(wm.wm))
            }
            DtaMode::None => (sel.features, None),
            DtaMode::KnnMlp => {
                let k = cfg.knn_k.min(n);
                (knn_mlp_aggregate(g, &sel.coords, t, k, &format!("{p}.knn"))?, None)
            }
        };
        parts.push((sel, scores, agg, map));
    }
    let sets: Vec<(Var, &Matrix)> = parts.iter().map(|(s, _, a, _)| (*a, &s.coords)).collect();
    let enhanced = gfe_batch(g, &sets, cfg.gfe.mode(), &format!("{p}.gfe"))?;
    Ok(parts
        .into_iter()
        .zip(enhanced)
        .map(|((sel, scores, _, map), enhanced)| Encoded {
            indices: sel.indices,
            coords: sel.coords,
            scores,
            soft: sel.soft,
            map,
            enhanced,
        })
        .collect())
}

/// Maps sparse tokens back onto `target` (with residual). Returns the output and
/// the map it consumed, if any.
fn reconstruct_onto(
    g: &mut Graph<'_>,
    cfg: &ModelConfig,
    sparse: Var,
    sparse_coords: &Matrix,
    map: Option<Var>,
    target: &Tokens,
) -> Result<(Var, Option<Var>)> {
    match (cfg.effective_itr(), map) {
        (ItrMode::WcaMap, Some(wm)) => Ok((reconstruct(g, sparse, target.features, wm)?, Some(wm))),
        (mode, _) => {
            let mode = if mode == ItrMode::Trilinear {
                InterpMode::Trilinear
            } else {
                InterpMode::Nearest
            };
            let up = interpolate_up(g, sparse, sparse_coords, &target.coords, mode)?;
            Ok((g.tape.add(up, target.features)?, None))
        }
    }
}

fn transition(g: &mut Graph<'_>, xs: &[Var], stage: usize, width: usize) -> Result<Vec<Var>> {
    g.lbr_batch(xs, &format!("transition{}", stage + 1), width)
}

/// Full forward over a batch. Normalization statistics (training mode) span
/// every point of every block.
pub fn forward_batch(g: &mut Graph<'_>, cfg: &ModelConfig, points: &[&Matrix]) -> Result<Vec<BlockForward>> {
    cfg.validate()?;
    if points.is_empty() {
        return Ok(Vec::new());
    }
    let coords: Vec<Matrix> = points.iter().map(|p| xyz(p)).collect();
    let mut feats = stem(g, cfg, points)?;
    let mut out: Vec<BlockForward> = (0..points.len())
        .map(|_| BlockForward {
            logits: Vec::new(),
            stages: Vec::new(),
        })
        .collect();

    match cfg.arch {
        Architecture::WNet => {
            for s in 0..cfg.stages.len() {
                if s > 0 {
                    feats = transition(g, &feats, s, cfg.stages[s].width)?;
                }
                let tokens: Vec<Tokens> = feats
                    .iter()
                    .zip(&coords)
                    .map(|(&f, c)| Tokens {
                        features: f,
                        coords: c.clone(),
                    })
                    .collect();
                let enc = encode_stage(g, cfg, s, &tokens)?;
                let mut next = Vec::with_capacity(enc.len());
                for ((e, t), bf) in enc.into_iter().zip(&tokens).zip(out.iter_mut()) {
                    let (y, used) = reconstruct_onto(g, cfg, e.enhanced, &e.coords, e.map, t)?;
                    debug_assert_eq!(g.value(y).rows(), t.coords.rows());
                    bf.stages.push(StageTrace {
                        indices: e.indices,
                        scores: e.scores,
                        soft: e.soft,
                        map: e.map,
                        map_consumed: used,
                        input_count: t.coords.rows(),
                        output: y,
                    });
                    next.push(y);
                }
                feats = next;
                let logits = head(g, &feats, &format!("head{}", s + 1), cfg.num_classes)?;
                for (bf, l) in out.iter_mut().zip(logits) {
                    bf.logits.push(l);
                }
            }
        }
        Architecture::UNet => {
            // encoder: each stage consumes the previous stage's sparse tokens
            let mut levels: Vec<(Vec<Tokens>, Vec<Encoded>)> = Vec::new();
            let mut cur_coords = coords.clone();
            for s in 0..cfg.stages.len() {
                if s > 0 {
                    feats = transition(g, &feats, s, cfg.stages[s].width)?;
                }
                let tokens: Vec<Tokens> = feats
                    .iter()
                    .zip(&cur_coords)
                    .map(|(&f, c)| Tokens {
                        features: f,
                        coords: c.clone(),
                    })
                    .collect();
                let enc = encode_stage(g, cfg, s, &tokens)?;
                feats = enc.iter().map(|e| e.enhanced).collect();
                cur_coords = enc.iter().map(|e| e.coords.clone()).collect();
                levels.push((tokens, enc));
            }
            // decoder: reconstruct through the stored maps in reverse
            let mut up: Vec<Var> = feats;
            for s in (0..cfg.stages.len()).rev() {
                let (tokens, enc) = &levels[s];
                if s + 1 < cfg.stages.len() {
                    up = g.lbr_batch(&up, &format!("decoder.proj{}", s + 1), cfg.stages[s].width)?;
                }
                let mut next = Vec::with_capacity(up.len());
                for (b, &u) in up.iter().enumerate() {
                    let e = &enc[b];
                    let (y, used) = reconstruct_onto(g, cfg, u, &e.coords, e.map, &tokens[b])?;
                    out[b].stages.push(StageTrace {
                        indices: e.indices.clone(),
                        scores: e.scores,
                        soft: e.soft,
                        map: e.map,
                        map_consumed: used,
                        input_count: tokens[b].coords.rows(),
                        output: y,
                    });
                    next.push(y);
                }
                up = next;
            }
            for bf in out.iter_mut() {
                bf.stages.reverse();
            }
            let logits = head(g, &up, "head1", cfg.num_classes)?;
            for (bf, l) in out.iter_mut().zip(logits) {
                bf.logits.push(l);
            }
        }
    }
    Ok(out)
}

fn xyz(p: &Matrix) -> Matrix {
    let mut c = Matrix::zeros(p.rows(), 3);
    for r in 0..p.rows() {
        c.row_mut(r).copy_from_slice(&p.row(r)[..3]);
    }
    c
}

/// Mean over blocks and heads of the per-point cross-entropy.
pub fn multi_loss(
    g: &mut Graph<'_>,
    outputs: &[BlockForward],
    labels: &[&[usize]],
    classes: usize,
) -> Result<Var> {
    if outputs.len() != labels.len() || outputs.is_empty() {
        return Err(shape_err("multi_loss", "one label vector per block required"));
    }
    let mut terms = Vec::new();
    for (o, l) in outputs.iter().zip(labels) {
        if let Some(&bad) = l.iter().find(|&&v| v >= classes) {
            return Err(Error::LabelRange {
                label: bad as i64,
                classes,
            });
        }
        for &logits in &o.logits {
            terms.push(g.tape.cross_entropy(logits, l)?);
        }
    }
    let count = terms.len();
    let stacked = g.tape.concat_rows(&terms)?;
    let total = g.tape.sum_all(stacked);
    Ok(g.tape.scale(total, 1.0 / count as f64))
}

/// A model: configuration plus named parameters and normalization buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Registers every parameter with a throwaway forward pass on a small
    /// random block, drawing initial values from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut init_rng = RngState::new(seed).fork(u64::MAX);
        let mut data_rng = RngState::new(seed).fork(u64::MAX - 1);
        let n = 16usize.max(config.knn_k);
        let probe = Matrix::from_vec(
            n,
            config.in_channels,
            (0..n * config.in_channels).map(|_| data_rng.normal()).collect(),
        )?;
        {
            let mut g = Graph::with_source(ParamSource::Create(&mut params, &mut init_rng));
            forward_batch(&mut g, &config, &[&probe])?;
        }
        Ok(Self { config, params })
    }

    /// Eval-mode forward of a single block.
    pub fn forward(&self, points: &Matrix) -> Result<SegmentationOutput> {
        let mut g = Graph::new(&self.params);
        let out = forward_batch(&mut g, &self.config, &[points])?;
        Ok(SegmentationOutput {
            stage_logits: out[0].logits.iter().map(|&v| g.value(v).clone()).collect(),
        })
    }

    pub fn predict(&self, points: &Matrix) -> Result<Vec<usize>> {
        Ok(self.forward(points)?.prediction())
    }

    /// Eval-mode forward that keeps the per-stage selection and maps.
    pub fn inspect(&self, points: &Matrix) -> Result<Inspection> {
        let mut g = Graph::new(&self.params);
        let out = forward_batch(&mut g, &self.config, &[points])?;
        let bf = &out[0];
        let mut origin: Vec<usize> = (0..points.rows()).collect();
        let mut stages = Vec::with_capacity(bf.stages.len());
        for st in &bf.stages {
            let stage = StageInspection {
                origin: origin.clone(),
                indices: st.indices.clone(),
                keep_prob: st.scores.map(|d| g.value(d.pi).as_slice().to_vec()),
                map: st.map.map(|m| g.value(m).clone()),
            };
            if self.config.arch == Architecture::UNet {
                origin = st.indices.iter().map(|&i| origin[i]).collect();
            }
            stages.push(stage);
        }
        let logits: Vec<Matrix> = bf.logits.iter().map(|&v| g.value(v).clone()).collect();
        Ok(Inspection {
            stages,
            prediction: argmax_rows(logits.last().expect("at least one head")),
        })
    }

    /// Eval-mode predictions for many blocks, one independent graph per block.
    pub fn predict_batch(&self, blocks: &[&Matrix]) -> Result<Vec<Vec<usize>>> {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            blocks.par_iter().map(|b| self.predict(b)).collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            self.predict_batch_seq(blocks)
        }
    }

    pub fn predict_batch_seq(&self, blocks: &[&Matrix]) -> Result<Vec<Vec<usize>>> {
        blocks.iter().map(|b| self.predict(b)).collect()
    }
}

/// SGD with momentum and L2 weight decay: `g ← g + λp`, `b ← μb + g` (`b ← g`
/// on the first step), `p ← p − η·b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: std::collections::BTreeMap<String, Matrix>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Default::default(),
        }
    }

    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &std::collections::BTreeMap<String, Matrix>,
        lr: f64,
    ) -> Result<()> {
        for (name, grad) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Checkpoint(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != grad.shape() {
                return Err(shape_err("sgd", format!("gradient shape for `{name}`")));
            }
            let mut d = grad.clone();
            if self.weight_decay != 0.0 {
                d = d.zip_map(p, |gv, pv| gv + self.weight_decay * pv);
            }
            let buf = match self.velocity.get_mut(name) {
                Some(b) => {
                    *b = b.zip_map(&d, |bv, dv| self.momentum * bv + dv);
                    b.clone()
                }
                None => {
                    self.velocity.insert(name.clone(), d.clone());
                    d
                }
            };
            *p = p.zip_map(&buf, |pv, bv| pv - lr * bv);
        }
        Ok(())
    }
}

/// Cosine-annealed learning rate for 0-based `epoch` of `total`.
pub fn cosine_lr(base: f64, epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * (1.0 + (std::f64::consts::PI * epoch as f64 / total as f64).cos()) / 2.0
}

pub const BN_MOMENTUM: f64 = 0.1;

/// Where a training step sits in the run, for diagnostics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepContext {
    pub epoch: usize,
    pub batch: usize,
}

/// One optimizer step on the multi-stage loss of `batch`; returns the loss.
pub fn train_step(
    model: &mut Model,
    opt: &mut Sgd,
    batch: &[&crate::data::PointCloudBlock],
    lr: f64,
    rng: &mut RngState,
    ctx: StepContext,
) -> Result<f64> {
    let points: Vec<&Matrix> = batch.iter().map(|b| &b.points).collect();
    let labels: Vec<&[usize]> = batch.iter().map(|b| b.labels.as_slice()).collect();
    let (loss, grads, updates) = {
        let mut g = Graph::training(&model.params, rng);
        let out = forward_batch(&mut g, &model.config, &points)?;
        let loss = multi_loss(&mut g, &out, &labels, model.config.num_classes)?;
        let value = g.value(loss)[(0, 0)];
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: ctx.epoch,
                batch: ctx.batch,
                detail: format!(
                    "loss {value} on blocks [{}]",
                    batch.iter().map(|b| b.id.as_str()).collect::<Vec<_>>().join(", ")
                ),
            });
        }
        let grads = g.backward(loss)?;
        (value, g.param_grads(&grads), g.bn_updates().to_vec())
    };
    if let Some((name, _)) = grads.iter().find(|(_, m)| !m.is_finite()) {
        return Err(Error::NonFiniteLoss {
            epoch: ctx.epoch,
            batch: ctx.batch,
            detail: format!("non-finite gradient for `{name}`"),
        });
    }
    for u in updates {
        for (suffix, batch_stat) in [("running_mean", &u.mean), ("running_var", &u.var)] {
            let key = format!("{}.{suffix}", u.prefix);
            let mut buf = model
                .params
                .buffer(&key)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing buffer `{key}`")))?;
            for (b, &s) in buf.as_mut_slice().iter_mut().zip(batch_stat) {
                *b = (1.0 - BN_MOMENTUM) * *b + BN_MOMENTUM * s;
            }
            model.params.set_buffer(&key, buf);
        }
    }
    opt.step(&mut model.params, &grads, lr)?;
    Ok(loss)
}
