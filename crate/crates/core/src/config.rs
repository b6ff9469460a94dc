//! Run configuration: TOML files, named presets and grid files.
//!
//! A config may name a `preset`; the preset's table is loaded first and
//! the file's own keys are merged over it, recursively for tables.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::Value;

use crate::bayes::BayesConfig;
use crate::data::TokenMode;
use crate::error::{Error, Result};
use crate::model::{InitConfig, TaskKind};
use crate::optim::{AdamConfig, LrSchedule};
use crate::prune::PruneConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    OneHot,
    Embedding,
    Dense,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input: InputKind,
    #[serde(default)]
    pub embed_dim: Option<usize>,
    pub hidden: Vec<usize>,
    pub task: TaskKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataConfig {
    /// `train.txt`/`valid.txt` for language models, `train.tsv` and an
    /// optional `valid.tsv` for classification.
    Dir {
        path: PathBuf,
        token_mode: TokenMode,
        #[serde(default)]
        vocab_size: Option<usize>,
        /// Held-out share of `train.tsv` when there is no `valid.tsv`.
        #[serde(default)]
        valid_fraction: Option<f64>,
        #[serde(default)]
        max_len: Option<usize>,
    },
    /// Seeded English-like text.
    SyntheticText {
        /// Generator seed, independent of the training seed.
        #[serde(default)]
        seed: u64,
        bytes: usize,
        valid_bytes: usize,
        token_mode: TokenMode,
        #[serde(default)]
        vocab_size: Option<usize>,
    },
    /// Seeded regression with relevant and distractor input features.
    SyntheticRegression {
        #[serde(default)]
        seed: u64,
        train_examples: usize,
        valid_examples: usize,
        steps: usize,
        relevant: usize,
        irrelevant: usize,
        noise_std: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Framework {
    Dense,
    Bayes(BayesConfig),
    Prune(PruneConfig),
}

impl Framework {
    pub fn label(&self) -> String {
        match self {
            Framework::Dense => "dense".into(),
            Framework::Bayes(b) => match serde_json::to_value(b.variant) {
                Ok(serde_json::Value::String(v)) => format!("bayes {v}"),
                _ => "bayes".into(),
            },
            Framework::Prune(p) => format!("prune {:?}", p.grouping),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub schedule: LrSchedule,
    /// Global gradient-norm clip; off when absent.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub adam: AdamConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Truncated backpropagation length for language models.
    #[serde(default = "default_bptt")]
    pub bptt: usize,
    /// Early stopping on the validation loss; off when absent.
    #[serde(default)]
    pub patience: Option<usize>,
    #[serde(default)]
    pub init: InitConfig,
    /// Standard deviation of the Gaussian likelihood for regression.
    #[serde(default = "default_noise")]
    pub noise_std: f64,
}

fn default_bptt() -> usize {
    35
}

fn default_noise() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub checkpoint: PathBuf,
    #[serde(default)]
    pub metrics_log: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub preset: Option<String>,
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub framework: Framework,
    pub optimizer: OptimizerConfig,
    pub train: TrainConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.schedule.validate()?;
        if let Some(c) = self.optimizer.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config("clip_norm must be positive".into()));
            }
        }
        if self.train.batch_size == 0 || self.train.bptt == 0 {
            return Err(Error::Config("batch_size and bptt must be positive".into()));
        }
        if !(self.train.noise_std > 0.0) {
            return Err(Error::Config("noise_std must be positive".into()));
        }
        if let Framework::Prune(p) = &self.framework {
            p.validate()?;
        }
        if self.model.input == InputKind::Embedding && self.model.embed_dim.unwrap_or(0) == 0 {
            return Err(Error::Config("embedding input needs a positive embed_dim".into()));
        }
        let regression_data = matches!(self.data, DataConfig::SyntheticRegression { .. });
        if regression_data != (self.model.task == TaskKind::Regression) {
            return Err(Error::Config("regression tasks need regression data and vice versa".into()));
        }
        if regression_data != (self.model.input == InputKind::Dense) {
            return Err(Error::Config("dense input is used exactly for regression data".into()));
        }
        Ok(())
    }

    /// Resolves relative data and output paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let DataConfig::Dir { path, .. } = &mut self.data {
            fix(path);
        }
        fix(&mut self.output.checkpoint);
        if let Some(m) = &mut self.output.metrics_log {
            fix(m);
        }
    }

    pub fn from_value(value: Value) -> Result<RunConfig> {
        let value = expand_preset(value)?;
        let cfg: RunConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        Self::from_value(parse_toml(text)?)
    }

    /// Loads a config file; relative paths are taken from its directory.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }
}

pub fn parse_toml(text: &str) -> Result<Value> {
    text.parse::<toml::Table>()
        .map(Value::Table)
        .map_err(|e| Error::Config(e.message().to_string()))
}

/// Recursive merge: tables merge key by key, anything else is replaced.
pub fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn expand_preset(value: Value) -> Result<Value> {
    let name = match value.get("preset") {
        None => return Ok(value),
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(Error::Config("preset must be a string".into())),
    };
    let preset = preset(&name).ok_or_else(|| {
        Error::Config(format!(
            "unknown preset {name:?}; known: {}",
            PRESETS.iter().map(|p| p.name).collect::<Vec<_>>().join(", ")
        ))
    })?;
    let mut base = parse_toml(preset.toml)?;
    if let Value::Table(t) = &mut base {
        t.insert("preset".into(), Value::String(name));
    }
    merge(&mut base, value);
    Ok(base)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PresetScale {
    /// Published hyperparameters; needs the full corpora and long runs.
    Full,
    /// Small runs on synthetic data, exercised by the test suite.
    Desk,
}

pub struct Preset {
    pub name: &'static str,
    pub scale: PresetScale,
    pub toml: &'static str,
}

pub fn preset(name: &str) -> Option<&'static Preset> {
    PRESETS.iter().find(|p| p.name == name)
}

pub const PRESETS: &[Preset] = &[
    Preset {
        name: "ptb-small-prune-wn",
        scale: PresetScale::Full,
        toml: r#"
[model]
input = "embedding"
embed_dim = 200
hidden = [200, 200]
task = "language_model"
[data]
source = "dir"
path = "data/ptb-word"
token_mode = "word"
[framework]
kind = "prune"
grouping = "iss_union"
lambda_lasso = 1e-5
lambda_group = 0.002
threshold = 1e-4
[optimizer]
kind = "sgd"
schedule = { kind = "decay_after", initial = 1.0, start_decay_epoch = 4, decay = 0.6 }
[train]
epochs = 20
batch_size = 20
bptt = 35
[output]
checkpoint = "runs/ptb-small-prune-wn.ckpt"
metrics_log = "runs/ptb-small-prune-wn.metrics.jsonl"
"#,
    },
    Preset {
        name: "ptb-small-prune-wgn",
        scale: PresetScale::Full,
        toml: r#"
[model]
input = "embedding"
embed_dim = 200
hidden = [200, 200]
task = "language_model"
[data]
source = "dir"
path = "data/ptb-word"
token_mode = "word"
[framework]
kind = "prune"
grouping = "five_group"
lambda_lasso = 1e-5
lambda_group = 0.0017
threshold = 1e-4
[optimizer]
kind = "sgd"
schedule = { kind = "decay_after", initial = 1.0, start_decay_epoch = 4, decay = 0.6 }
[train]
epochs = 20
batch_size = 20
bptt = 35
[output]
checkpoint = "runs/ptb-small-prune-wgn.ckpt"
metrics_log = "runs/ptb-small-prune-wgn.metrics.jsonl"
"#,
    },
    Preset {
        name: "ptb-large-prune-wgn",
        scale: PresetScale::Full,
        toml: r#"
[model]
input = "embedding"
embed_dim = 1500
hidden = [1500, 1500]
task = "language_model"
[data]
source = "dir"
path = "data/ptb-word"
token_mode = "word"
[framework]
kind = "prune"
grouping = "five_group"
lambda_lasso = 1.5e-5
lambda_group = 0.00125
threshold = 1e-4
[optimizer]
kind = "sgd"
schedule = { kind = "milestones", initial = 1.0, epochs = [18, 36], decay = 0.1 }
[train]
epochs = 55
batch_size = 20
bptt = 35
[output]
checkpoint = "runs/ptb-large-prune-wgn.ckpt"
metrics_log = "runs/ptb-large-prune-wgn.metrics.jsonl"
"#,
    },
    Preset {
        name: "imdb-bayes-wgn",
        scale: PresetScale::Full,
        toml: r#"
[model]
input = "embedding"
embed_dim = 300
hidden = [128]
task = "classification"
[data]
source = "dir"
path = "data/imdb"
token_mode = "word"
vocab_size = 20000
valid_fraction = 0.15
[framework]
kind = "bayes"
variant = "W+G+N"
vocab_groups = true
feature_groups = true
[optimizer]
kind = "adam"
schedule = { kind = "constant", initial = 0.0005 }
[train]
epochs = 800
batch_size = 128
[output]
checkpoint = "runs/imdb-bayes-wgn.ckpt"
metrics_log = "runs/imdb-bayes-wgn.metrics.jsonl"
"#,
    },
    Preset {
        name: "agnews-bayes-wgn",
        scale: PresetScale::Full,
        toml: r#"
[model]
input = "embedding"
embed_dim = 300
hidden = [512]
task = "classification"
[data]
source = "dir"
path = "data/agnews"
token_mode = "word"
vocab_size = 20000
valid_fraction = 0.05
[framework]
kind = "bayes"
variant = "W+G+N"
vocab_groups = true
feature_groups = true
[optimizer]
kind = "adam"
schedule = { kind = "constant", initial = 0.0005 }
[train]
epochs = 150
batch_size = 128
[output]
checkpoint = "runs/agnews-bayes-wgn.ckpt"
metrics_log = "runs/agnews-bayes-wgn.metrics.jsonl"
"#,
    },
    Preset {
        name: "char-ptb-bayes-wgn",
        scale: PresetScale::Full,
        toml: r#"
[model]
input = "one_hot"
hidden = [1000]
task = "language_model"
[data]
source = "dir"
path = "data/ptb-char"
token_mode = "char"
[framework]
kind = "bayes"
variant = "W+G+N"
[optimizer]
kind = "adam"
schedule = { kind = "constant", initial = 0.002 }
[train]
epochs = 250
batch_size = 128
bptt = 100
[output]
checkpoint = "runs/char-ptb-bayes-wgn.ckpt"
metrics_log = "runs/char-ptb-bayes-wgn.metrics.jsonl"
"#,
    },
    Preset {
        name: "word-ptb-bayes-wgn",
        scale: PresetScale::Full,
        toml: r#"
[model]
input = "embedding"
embed_dim = 200
hidden = [200, 200]
task = "language_model"
[data]
source = "dir"
path = "data/ptb-word"
token_mode = "word"
[framework]
kind = "bayes"
variant = "W+G+N"
feature_groups = true
[optimizer]
kind = "adam"
schedule = { kind = "constant", initial = 0.002 }
[train]
epochs = 50
batch_size = 32
bptt = 35
[output]
checkpoint = "runs/word-ptb-bayes-wgn.ckpt"
metrics_log = "runs/word-ptb-bayes-wgn.metrics.jsonl"
"#,
    },
    Preset {
        name: "desk-char-dense",
        scale: PresetScale::Desk,
        toml: r#"
[model]
input = "one_hot"
hidden = [64]
task = "language_model"
[data]
source = "synthetic_text"
bytes = 100000
valid_bytes = 10000
token_mode = "char"
[framework]
kind = "dense"
[optimizer]
kind = "adam"
schedule = { kind = "constant", initial = 0.005 }
[train]
epochs = 10
batch_size = 32
bptt = 50
patience = 2
[output]
checkpoint = "runs/desk-char-dense.ckpt"
metrics_log = "runs/desk-char-dense.metrics.jsonl"
"#,
    },
    Preset {
        name: "desk-char-bayes",
        scale: PresetScale::Desk,
        toml: r#"
[model]
input = "one_hot"
hidden = [64]
task = "language_model"
[data]
source = "synthetic_text"
bytes = 100000
valid_bytes = 10000
token_mode = "char"
[framework]
kind = "bayes"
variant = "W+G+N"
[optimizer]
kind = "adam"
schedule = { kind = "constant", initial = 0.005 }
[train]
epochs = 10
batch_size = 32
bptt = 50
[output]
checkpoint = "runs/desk-char-bayes.ckpt"
metrics_log = "runs/desk-char-bayes.metrics.jsonl"
"#,
    },
    Preset {
        name: "desk-char-prune",
        scale: PresetScale::Desk,
        toml: r#"
[model]
input = "one_hot"
hidden = [64]
task = "language_model"
[data]
source = "synthetic_text"
bytes = 100000
valid_bytes = 10000
token_mode = "char"
[framework]
kind = "prune"
grouping = "five_group"
lambda_lasso = 1e-5
lambda_group = 0.002
threshold = 1e-4
[optimizer]
kind = "sgd"
schedule = { kind = "decay_after", initial = 1.0, start_decay_epoch = 4, decay = 0.6 }
clip_norm = 5.0
[train]
epochs = 10
batch_size = 32
bptt = 50
[output]
checkpoint = "runs/desk-char-prune.ckpt"
metrics_log = "runs/desk-char-prune.metrics.jsonl"
"#,
    },
];

/// Grid file: `[grid]` maps dotted config keys to lists of values; points
/// are the Cartesian product in key order. An optional `[stop]` table
/// holds a target on the validation metric.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub keys: Vec<String>,
    pub points: Vec<Vec<Value>>,
    pub stop: Option<StopRule>,
}

/// Target-quality rule: once a point's final validation metric meets it,
/// the remaining points are skipped.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum StopRule {
    MetricAtMost(f64),
    MetricAtLeast(f64),
}

impl StopRule {
    pub fn met(self, metric: f64) -> bool {
        match self {
            StopRule::MetricAtMost(t) => metric <= t,
            StopRule::MetricAtLeast(t) => metric >= t,
        }
    }
}

impl Grid {
    pub fn parse(text: &str) -> Result<Grid> {
        let v = parse_toml(text)?;
        let table = v
            .get("grid")
            .and_then(Value::as_table)
            .ok_or_else(|| Error::Config("grid file needs a [grid] table".into()))?;
        let mut axes: BTreeMap<String, Vec<Value>> = BTreeMap::new();
        for (k, vals) in table {
            let vals = vals
                .as_array()
                .ok_or_else(|| Error::Config(format!("grid key {k} must map to a list")))?;
            if vals.is_empty() {
                return Err(Error::Config(format!("grid key {k} has no values")));
            }
            axes.insert(k.clone(), vals.clone());
        }
        if axes.is_empty() {
            return Err(Error::Config("grid is empty".into()));
        }
        let stop = match v.get("stop") {
            None => None,
            Some(s) => Some(
                s.clone()
                    .try_into()
                    .map_err(|e: toml::de::Error| Error::Config(format!("[stop]: {}", e.message())))?,
            ),
        };
        let keys: Vec<String> = axes.keys().cloned().collect();
        let mut points: Vec<Vec<Value>> = vec![Vec::new()];
        for vals in axes.values() {
            points = points
                .into_iter()
                .flat_map(|p| {
                    vals.iter().map(move |v| {
                        let mut q = p.clone();
                        q.push(v.clone());
                        q
                    })
                })
                .collect();
        }
        Ok(Grid { keys, points, stop })
    }

    /// Config table with the point's values set at their dotted keys.
    pub fn apply(&self, base: &Value, point: usize) -> Result<Value> {
        let mut out = base.clone();
        for (key, val) in self.keys.iter().zip(&self.points[point]) {
            let mut over = val.clone();
            for part in key.split('.').rev() {
                let mut t = toml::Table::new();
                t.insert(part.to_string(), over);
                over = Value::Table(t);
            }
            merge(&mut out, over);
        }
        Ok(out)
    }
}
