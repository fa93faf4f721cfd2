//! Flat `key = value` run configuration with dotted keys.
//!
//! ```text
//! # comment
//! seed = 7
//! model.stage1.ratio = 0.25
//! ```
//!
//! Every key is listed in [`KEYS`]; anything else is rejected.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::data::{DatasetSpec, SynthOptions};
use crate::error::{Error, Result};
use crate::wnet::{Architecture, DtaMode, GfeSwitch, ItrMode, LtsMode, ModelConfig, StageConfig};

/// Environment variable that overrides `data.root`.
pub const DATA_ROOT_ENV: &str = "DTA_DATA_ROOT";

/// Key inventory (stage keys use `model.stageN.*` for N in 1..=model.stages).
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "run seed (also set by --seed)"),
    ("data.source", "dir | synthetic"),
    ("data.root", "corpus root holding split directories"),
    ("data.train_split", "training split directory name"),
    ("data.eval_split", "evaluation split directory name"),
    ("data.preset", "ms_lidar | dales | shapenet"),
    ("data.normalize", "center/scale XYZ and min-max radiometric channels per block"),
    ("synth.blocks", "synthetic training blocks"),
    ("synth.eval_blocks", "synthetic evaluation blocks (0 = evaluate on the training blocks)"),
    ("synth.points", "points per synthetic block"),
    ("synth.classes", "synthetic class count"),
    ("synth.channels", "synthetic channel count including XYZ"),
    ("synth.seed", "synthetic corpus seed"),
    ("model.arch", "wnet | unet"),
    ("model.stages", "number of stages"),
    ("model.stageN.width", "token width of stage N"),
    ("model.stageN.ratio", "keep ratio of stage N"),
    ("model.stageN.temperature", "selection temperature of stage N"),
    ("model.lts", "learned | fps | random"),
    ("model.dta", "wca | none | knn_mlp | vca"),
    ("model.gfe", "dual | no_psa | no_csa | none"),
    ("model.itr", "wca_map | trilinear | nearest"),
    ("model.knn_k", "neighborhood size of the knn_mlp aggregator"),
    ("train.epochs", "epoch count"),
    ("train.batch_size", "blocks per step"),
    ("train.lr", "initial learning rate (cosine annealed per epoch)"),
    ("train.momentum", "SGD momentum"),
    ("train.weight_decay", "L2 weight decay"),
    ("train.checkpoint_every", "write a checkpoint every N epochs (and after the last)"),
    ("train.eval_every", "evaluate every N epochs (and after the last)"),
    ("eval.latency_repeats", "timed forward passes for latency (0 = skip)"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    Dir,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub root: PathBuf,
    pub train_split: String,
    pub eval_split: String,
    pub preset: String,
    pub normalize: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub checkpoint_every: usize,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 8,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            checkpoint_every: 10,
            eval_every: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub synth: SynthOptions,
    pub synth_eval_blocks: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub latency_repeats: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig {
                source: DataSource::Dir,
                root: PathBuf::from("data"),
                train_split: "train".into(),
                eval_split: "eval".into(),
                preset: "ms_lidar".into(),
                normalize: true,
            },
            synth: SynthOptions::default(),
            synth_eval_blocks: 8,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            latency_repeats: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

fn named<T: std::str::FromStr<Err = Error>>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|e: Error| Error::Config(format!("`{key}`: {e}")))
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_text(&text, &path.display().to_string())
    }

    /// Parses config text; the data-root environment override is applied last.
    pub fn parse_text(text: &str, origin: &str) -> Result<Self> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                detail: format!("expected `key = value`, found `{line}`"),
            })?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = Self::default();
        // stage count first so per-stage keys resolve against it
        if let Some((_, v)) = pairs.iter().rev().find(|(k, _)| k == "model.stages") {
            cfg.set("model.stages", v)?;
        }
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        if let Ok(root) = std::env::var(DATA_ROOT_ENV) {
            if !root.is_empty() {
                cfg.data.root = PathBuf::from(root);
            }
        }
        cfg.resolve()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "data.source" => {
                self.data.source = match value {
                    "dir" => DataSource::Dir,
                    "synthetic" => DataSource::Synthetic,
                    _ => return Err(Error::Config(format!("`{key}`: `{value}` is not one of dir, synthetic"))),
                }
            }
            "data.root" => self.data.root = PathBuf::from(value),
            "data.train_split" => self.data.train_split = value.to_string(),
            "data.eval_split" => self.data.eval_split = value.to_string(),
            "data.preset" => {
                preset_spec(value)?;
                self.data.preset = value.to_string();
            }
            "data.normalize" => self.data.normalize = parse_bool(key, value)?,
            "synth.blocks" => self.synth.num_blocks = parse(key, value)?,
            "synth.eval_blocks" => self.synth_eval_blocks = parse(key, value)?,
            "synth.points" => self.synth.points_per_block = parse(key, value)?,
            "synth.classes" => self.synth.num_classes = parse(key, value)?,
            "synth.channels" => self.synth.channels = parse(key, value)?,
            "synth.seed" => self.synth.seed = parse(key, value)?,
            "model.arch" => self.model.arch = named::<Architecture>(key, value)?,
            "model.stages" => {
                let n: usize = parse(key, value)?;
                if n == 0 {
                    return Err(Error::Config("model.stages must be ≥ 1".into()));
                }
                while self.model.stages.len() < n {
                    let w = self.model.stages.last().map_or(64, |s| s.width * 2);
                    self.model.stages.push(StageConfig {
                        width: w,
                        ratio: 0.25,
                        temperature: 1.0,
                    });
                }
                self.model.stages.truncate(n);
            }
            "model.lts" => self.model.lts = named::<LtsMode>(key, value)?,
            "model.dta" => self.model.dta = named::<DtaMode>(key, value)?,
            "model.gfe" => self.model.gfe = named::<GfeSwitch>(key, value)?,
            "model.itr" => self.model.itr = named::<ItrMode>(key, value)?,
            "model.knn_k" => self.model.knn_k = parse(key, value)?,
            "train.epochs" => self.train.epochs = parse(key, value)?,
            "train.batch_size" => self.train.batch_size = parse(key, value)?,
            "train.lr" => self.train.lr = parse(key, value)?,
            "train.momentum" => self.train.momentum = parse(key, value)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, value)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse(key, value)?,
            "train.eval_every" => self.train.eval_every = parse(key, value)?,
            "eval.latency_repeats" => self.latency_repeats = parse(key, value)?,
            _ => return self.set_stage(key, value),
        }
        Ok(())
    }

    fn set_stage(&mut self, key: &str, value: &str) -> Result<()> {
        let unknown = || Error::UnknownKey(key.to_string());
        let rest = key.strip_prefix("model.stage").ok_or_else(unknown)?;
        let (idx, field) = rest.split_once('.').ok_or_else(unknown)?;
        let idx: usize = idx.parse().map_err(|_| unknown())?;
        if idx == 0 || idx > self.model.stages.len() {
            return Err(unknown());
        }
        let stage = &mut self.model.stages[idx - 1];
        match field {
            "width" => stage.width = parse(key, value)?,
            "ratio" => stage.ratio = parse(key, value)?,
            "temperature" => stage.temperature = parse(key, value)?,
            _ => return Err(unknown()),
        }
        Ok(())
    }

    /// Fills the model's input channels and classes from the data source and validates.
    pub fn resolve(&mut self) -> Result<()> {
        let spec = self.dataset_spec()?;
        self.model.in_channels = spec.num_channels();
        self.model.num_classes = spec.num_classes();
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be ≥ 1".into()));
        }
        if self.train.checkpoint_every == 0 || self.train.eval_every == 0 {
            return Err(Error::Config("checkpoint/eval intervals must be ≥ 1".into()));
        }
        self.model.validate()
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        let spec = match self.data.source {
            DataSource::Synthetic => {
                let s = &self.synth;
                let mut channels: Vec<String> = ["x", "y", "z"].iter().map(|c| c.to_string()).collect();
                channels.extend((3..s.channels).map(|j| format!("band{}", j - 2)));
                DatasetSpec {
                    points_per_block: Some(s.points_per_block),
                    channels,
                    class_names: (0..s.num_classes).map(|c| format!("class{c}")).collect(),
                    grid_cell: None,
                    block_edge: 20.0,
                }
            }
            DataSource::Dir => preset_spec(&self.data.preset)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Canonical, sorted `key = value` text of the resolved configuration.
    pub fn echo(&self) -> String {
        let mut m: BTreeMap<String, String> = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("seed", self.seed.to_string());
        put(
            "data.source",
            match self.data.source {
                DataSource::Dir => "dir",
                DataSource::Synthetic => "synthetic",
            }
            .into(),
        );
        put("data.root", self.data.root.display().to_string());
        put("data.train_split", self.data.train_split.clone());
        put("data.eval_split", self.data.eval_split.clone());
        put("data.preset", self.data.preset.clone());
        put("data.normalize", self.data.normalize.to_string());
        put("synth.blocks", self.synth.num_blocks.to_string());
        put("synth.eval_blocks", self.synth_eval_blocks.to_string());
        put("synth.points", self.synth.points_per_block.to_string());
        put("synth.classes", self.synth.num_classes.to_string());
        put("synth.channels", self.synth.channels.to_string());
        put("synth.seed", self.synth.seed.to_string());
        put("model.arch", self.model.arch.to_string());
        put("model.stages", self.model.stages.len().to_string());
        for (i, s) in self.model.stages.iter().enumerate() {
            put(&format!("model.stage{}.width", i + 1), s.width.to_string());
            put(&format!("model.stage{}.ratio", i + 1), s.ratio.to_string());
            put(&format!("model.stage{}.temperature", i + 1), s.temperature.to_string());
        }
        put("model.lts", self.model.lts.to_string());
        put("model.dta", self.model.dta.to_string());
        put("model.gfe", self.model.gfe.to_string());
        put("model.itr", self.model.itr.to_string());
        put("model.knn_k", self.model.knn_k.to_string());
        put("train.epochs", self.train.epochs.to_string());
        put("train.batch_size", self.train.batch_size.to_string());
        put("train.lr", self.train.lr.to_string());
        put("train.momentum", self.train.momentum.to_string());
        put("train.weight_decay", self.train.weight_decay.to_string());
        put("train.checkpoint_every", self.train.checkpoint_every.to_string());
        put("train.eval_every", self.train.eval_every.to_string());
        put("eval.latency_repeats", self.latency_repeats.to_string());
        m.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

pub fn preset_spec(name: &str) -> Result<DatasetSpec> {
    match name {
        "ms_lidar" => Ok(DatasetSpec::ms_lidar()),
        "dales" => Ok(DatasetSpec::dales()),
        "shapenet" => Ok(DatasetSpec::shapenet()),
        _ => Err(Error::Config(format!(
            "`data.preset`: `{name}` is not one of ms_lidar, dales, shapenet"
        ))),
    }
}
