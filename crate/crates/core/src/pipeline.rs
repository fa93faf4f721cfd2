//! Corpus loading, the epoch loop, evaluation and checkpoints.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{DataSource, RunConfig};
use crate::data::{load_blocks, normalize_block, synth_generate, DatasetSpec, PointCloudBlock, SynthOptions};
use crate::error::{Error, Result};
use crate::metrics::{measure_latency, ConfusionMatrix, EvalReport};
use crate::numerics::{ParamStore, RngState};
use crate::wnet::{cosine_lr, train_step, Model, ModelConfig, Sgd, StepContext};

/// Stream offset separating the evaluation corpus from the training corpus.
const EVAL_CORPUS_STREAM: u64 = 0x0e7a_15ee_d000_0001;

#[derive(Clone, Debug)]
pub struct Corpus {
    pub spec: DatasetSpec,
    pub train: Vec<PointCloudBlock>,
    pub eval: Vec<PointCloudBlock>,
}

/// Generator options for the synthetic evaluation split: same shape as the
/// training split, independent seed.
pub fn eval_synth_options(cfg: &RunConfig) -> SynthOptions {
    SynthOptions {
        num_blocks: cfg.synth_eval_blocks,
        seed: cfg.synth.seed ^ EVAL_CORPUS_STREAM,
        ..cfg.synth.clone()
    }
}

pub fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let spec = cfg.dataset_spec()?;
    let (train, eval) = match cfg.data.source {
        DataSource::Synthetic => {
            let train = synth_generate(&cfg.synth)?;
            let eval = if cfg.synth_eval_blocks == 0 {
                train.clone()
            } else {
                synth_generate(&eval_synth_options(cfg))?
            };
            (train, eval)
        }
        DataSource::Dir => {
            let dir = |split: &str| {
                let p = cfg.data.root.join(split);
                if p.is_dir() {
                    Ok(p)
                } else {
                    Err(Error::Config(format!("data directory `{}` does not exist", p.display())))
                }
            };
            let train = load_blocks(&dir(&cfg.data.train_split)?, &spec)?;
            let eval = load_blocks(&dir(&cfg.data.eval_split)?, &spec)?;
            (train, eval)
        }
    };
    let prep = |v: Vec<PointCloudBlock>| -> Vec<PointCloudBlock> {
        if cfg.data.normalize {
            v.iter().map(normalize_block).collect()
        } else {
            v
        }
    };
    Ok(Corpus {
        spec,
        train: prep(train),
        eval: prep(eval),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub eval: Option<EvalMetrics>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub oa: f64,
    pub miou: f64,
    pub avg_f1: f64,
}

impl EvalMetrics {
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self> {
        Ok(Self {
            oa: cm.overall_accuracy()?,
            miou: cm.miou()?,
            avg_f1: cm.average_f1(),
        })
    }
}

/// Everything needed to reload a model and continue or evaluate it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_echo: String,
    pub seed: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub model_config: ModelConfig,
    pub params: ParamStore,
    pub optimizer: Sgd,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn model(&self) -> Model {
        Model {
            config: self.model_config.clone(),
            params: self.params.clone(),
        }
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub optimizer: Sgd,
    pub log: Vec<EpochLog>,
}

/// Per-epoch callback: the fresh log row and, when a checkpoint is due, the checkpoint.
pub type EpochHook<'a> = dyn FnMut(&EpochLog, Option<&Checkpoint>) -> Result<()> + 'a;

/// Runs the full schedule. Batch order and selection noise for epoch `e` come
/// from stream `e` of the run seed, so the run is a pure function of the config.
pub fn train(cfg: &RunConfig, corpus: &Corpus, hook: &mut EpochHook<'_>) -> Result<TrainOutcome> {
    for b in corpus.train.iter().chain(&corpus.eval) {
        b.check_labels(cfg.model.num_classes)?;
    }
    if corpus.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let root = RngState::new(cfg.seed);
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let mut opt = Sgd::new(cfg.train.momentum, cfg.train.weight_decay);
    let epochs = cfg.train.epochs;
    let mut log = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let lr = cosine_lr(cfg.train.lr, epoch, epochs);
        let mut rng = root.fork(epoch as u64);
        let mut order: Vec<usize> = (0..corpus.train.len()).collect();
        rng.shuffle(&mut order);
        let mut losses = Vec::new();
        for (bi, chunk) in order.chunks(cfg.train.batch_size).enumerate() {
            let batch: Vec<&PointCloudBlock> = chunk.iter().map(|&i| &corpus.train[i]).collect();
            let ctx = StepContext { epoch, batch: bi };
            losses.push(train_step(&mut model, &mut opt, &batch, lr, &mut rng, ctx)?);
        }
        let last = epoch + 1 == epochs;
        let eval = if (last || (epoch + 1) % cfg.train.eval_every == 0) && !corpus.eval.is_empty() {
            Some(EvalMetrics::from_confusion(&evaluate(&model, &corpus.eval)?)?)
        } else {
            None
        };
        let row = EpochLog {
            epoch: epoch + 1,
            lr,
            train_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            eval,
        };
        let ckpt = (last || (epoch + 1) % cfg.train.checkpoint_every == 0).then(|| Checkpoint {
            config_echo: cfg.echo(),
            seed: cfg.seed,
            epoch: epoch + 1,
            model_config: model.config.clone(),
            params: model.params.clone(),
            optimizer: opt.clone(),
        });
        hook(&row, ckpt.as_ref())?;
        log.push(row);
    }
    Ok(TrainOutcome {
        model,
        optimizer: opt,
        log,
    })
}

/// Eval-mode confusion matrix over `blocks`.
pub fn evaluate(model: &Model, blocks: &[PointCloudBlock]) -> Result<ConfusionMatrix> {
    let points: Vec<_> = blocks.iter().map(|b| &b.points).collect();
    let preds = model.predict_batch(&points)?;
    let mut cm = ConfusionMatrix::new(model.config.num_classes);
    for (p, b) in preds.iter().zip(blocks) {
        cm.update(p, &b.labels)?;
    }
    Ok(cm)
}

/// Evaluation report for `blocks`, timing the first block when requested.
pub fn eval_report(
    model: &Model,
    blocks: &[PointCloudBlock],
    spec: &DatasetSpec,
    config_echo: String,
    seed: u64,
    latency_repeats: usize,
) -> Result<EvalReport> {
    let cm = evaluate(model, blocks)?;
    let latency = match (latency_repeats, blocks.first()) {
        (0, _) | (_, None) => None,
        (r, Some(b)) => Some(measure_latency(r, || model.forward(&b.points).map(|_| ()))?),
    };
    EvalReport::build(&cm, &spec.class_names, latency, config_echo, seed)
}

pub const LOG_HEADER: &str = "epoch,lr,train_loss,eval_oa,eval_miou,eval_avg_f1";

/// CSV log row; metrics not computed this epoch are left empty.
pub fn log_row(row: &EpochLog) -> String {
    let mut s = format!("{},{},{}", row.epoch, row.lr, row.train_loss);
    match row.eval {
        Some(m) => write!(s, ",{},{},{}", m.oa, m.miou, m.avg_f1).unwrap(),
        None => s.push_str(",,,"),
    }
    s
}

/// `# `-prefixed provenance lines (seed and config echo) for CSV artifacts.
pub fn csv_preamble(seed: u64, echo: &str) -> String {
    let mut s = format!("# seed = {seed}\n");
    for line in echo.lines() {
        writeln!(s, "# {line}").unwrap();
    }
    s
}

/// Single-switch variants, one per row of the key-block ablation table.
pub const ABLATION_VARIANTS: [&str; 11] = [
    "lts=fps",
    "lts=random",
    "dta=none",
    "dta=knn_mlp",
    "dta=vca",
    "gfe=none",
    "gfe=no_psa",
    "gfe=no_csa",
    "itr=trilinear",
    "itr=nearest",
    "arch=unet",
];

/// Parses a comma-separated variant list; `all` expands to every variant.
pub fn parse_variants(list: &str) -> Result<Vec<String>> {
    let list = list.trim();
    if list == "all" {
        return Ok(ABLATION_VARIANTS.iter().map(|v| v.to_string()).collect());
    }
    let mut out = Vec::new();
    for v in list.split(',').map(str::trim).filter(|v| !v.is_empty()) {
        if !ABLATION_VARIANTS.contains(&v) {
            return Err(Error::Config(format!(
                "unknown variant `{v}`; valid variants: {}",
                ABLATION_VARIANTS.join(", ")
            )));
        }
        out.push(v.to_string());
    }
    Ok(out)
}

/// The run config with one switch flipped, e.g. `dta=none`.
pub fn apply_variant(cfg: &RunConfig, variant: &str) -> Result<RunConfig> {
    let (key, value) = variant
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("variant `{variant}` is not `switch=value`")))?;
    let mut out = cfg.clone();
    out.set(&format!("model.{key}"), value)?;
    out.model.validate()?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub metrics: EvalMetrics,
    pub latency_ms: Option<f64>,
}

/// Trains and evaluates the baseline and each variant under the same seed and budget.
pub fn run_ablation(cfg: &RunConfig, corpus: &Corpus, variants: &[String]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(variants.len() + 1);
    for name in std::iter::once("baseline").chain(variants.iter().map(String::as_str)) {
        let run = if name == "baseline" { cfg.clone() } else { apply_variant(cfg, name)? };
        let outcome = train(&run, corpus, &mut |_, _| Ok(()))?;
        let metrics = EvalMetrics::from_confusion(&evaluate(&outcome.model, &corpus.eval)?)?;
        let latency_ms = match (run.latency_repeats, corpus.eval.first()) {
            (0, _) | (_, None) => None,
            (r, Some(b)) => Some(measure_latency(r, || outcome.model.forward(&b.points).map(|_| ()))?),
        };
        rows.push(AblationRow {
            variant: name.to_string(),
            metrics,
            latency_ms,
        });
    }
    Ok(rows)
}

pub const ABLATION_HEADER: &str = "variant,oa,miou,avg_f1,latency_ms";

pub fn ablation_row(row: &AblationRow) -> String {
    let m = row.metrics;
    let lat = row.latency_ms.map(|l| l.to_string()).unwrap_or_default();
    format!("{},{},{},{},{lat}", row.variant, m.oa, m.miou, m.avg_f1)
}

/// Per-point dumps for plotting: one table per stage selection, one map row,
/// and the predictions. Every table has one row per block point.
#[derive(Clone, Debug, PartialEq)]
pub struct VizDump {
    pub selections: Vec<String>,
    pub map_row: String,
    pub predictions: String,
}

/// Builds the dumps for `block`; `query` picks a row of stage `map_stage`'s
/// (1-based) aggregation map.
pub fn viz_dump(model: &Model, block: &PointCloudBlock, query: usize, map_stage: usize) -> Result<VizDump> {
    let ins = model.inspect(&block.points)?;
    let n = block.len();
    let xyz = |i: usize| {
        let r = block.points.row(i);
        format!("{},{},{}", r[0], r[1], r[2])
    };
    let mut selections = Vec::with_capacity(ins.stages.len());
    for st in &ins.stages {
        let mut prob = vec![None; n];
        let mut selected = vec![false; n];
        for (j, &o) in st.origin.iter().enumerate() {
            prob[o] = Some(st.keep_prob.as_ref().map_or(f64::NAN, |p| p[j]));
        }
        for &i in &st.indices {
            selected[st.origin[i]] = true;
        }
        let mut s = String::from("point,x,y,z,keep_prob,selected\n");
        for i in 0..n {
            let p = match prob[i] {
                Some(v) if v.is_finite() => v.to_string(),
                _ => String::new(),
            };
            writeln!(s, "{i},{},{p},{}", xyz(i), selected[i] as u8).unwrap();
        }
        selections.push(s);
    }

    let st = map_stage
        .checked_sub(1)
        .and_then(|s| ins.stages.get(s))
        .ok_or_else(|| Error::Config(format!("stage {map_stage} out of range 1..={}", ins.stages.len())))?;
    let map = st
        .map
        .as_ref()
        .ok_or_else(|| Error::Config(format!("stage {map_stage} has no aggregation map in this configuration")))?;
    if query >= map.rows() {
        return Err(Error::Config(format!(
            "query index {query} out of range: stage {map_stage} keeps {} tokens",
            map.rows()
        )));
    }
    let mut weight = vec![None; n];
    for (j, &o) in st.origin.iter().enumerate() {
        weight[o] = Some(map.row(query)[j]);
    }
    let mut map_row = String::from("point,x,y,z,weight\n");
    for (i, w) in weight.iter().enumerate() {
        let w = w.map(|v| v.to_string()).unwrap_or_default();
        writeln!(map_row, "{i},{},{w}", xyz(i)).unwrap();
    }

    let mut predictions = String::from("point,x,y,z,label,pred\n");
    for (i, p) in ins.prediction.iter().enumerate() {
        writeln!(predictions, "{i},{},{},{p}", xyz(i), block.labels[i]).unwrap();
    }
    Ok(VizDump {
        selections,
        map_row,
        predictions,
    })
}
