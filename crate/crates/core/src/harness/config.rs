//! Run configuration and its flat `key = value` file format.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{SynthSpec, TaskKind};
use crate::encoder::LayerIndex;
use crate::error::{Error, Result};
use crate::mixup::{MixupConfig, PaddingStrategy};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskSpec {
    /// Generated task; `data_seed` fixes the dataset independently of the run seed.
    Synthetic {
        kind: String,
        size: usize,
        data_seed: u64,
    },
    /// Directory holding `train.jsonl`, `[dev.jsonl]`, `test.jsonl`, `labels.json`.
    Dir(PathBuf),
}

impl TaskSpec {
    pub fn synthetic(kind: TaskKind, size: usize, data_seed: u64) -> Self {
        TaskSpec::Synthetic {
            kind: match kind {
                TaskKind::Content => "content".into(),
                TaskKind::Syntax => "syntax".into(),
            },
            size,
            data_seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainSize {
    Full,
    N(usize),
}

impl FromStr for TrainSize {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("full") {
            return Ok(TrainSize::Full);
        }
        s.parse().map(TrainSize::N).map_err(|_| {
            Error::Parse(format!(
                "train size must be 'full' or an integer, got {s:?}"
            ))
        })
    }
}

impl fmt::Display for TrainSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainSize::Full => f.write_str("full"),
            TrainSize::N(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMetric {
    Accuracy,
    Mcc,
}

impl FromStr for SelectionMetric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "accuracy" | "acc" => Ok(SelectionMetric::Accuracy),
            "mcc" => Ok(SelectionMetric::Mcc),
            other => Err(Error::Parse(format!("unknown selection metric {other:?}"))),
        }
    }
}

/// Which split picks the best epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionSplit {
    Dev,
    Test,
}

impl FromStr for SelectionSplit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dev" => Ok(SelectionSplit::Dev),
            "test" => Ok(SelectionSplit::Test),
            other => Err(Error::Parse(format!("unknown selection split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout_rate: f64,
    pub max_seq_len: usize,
    pub mixup: MixupConfig,
    pub task: TaskSpec,
    pub synth: SynthShape,
    pub train_size: TrainSize,
    pub seed: u64,
    pub selection_metric: SelectionMetric,
    pub selection_split: SelectionSplit,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_min_count: usize,
    pub eval_batch_size: usize,
}

/// Serializable mirror of [`SynthSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthShape {
    pub lexicon_size: usize,
    pub neutral_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub sentiment_min: usize,
    pub sentiment_max: usize,
}

impl From<&SynthShape> for SynthSpec {
    fn from(s: &SynthShape) -> Self {
        SynthSpec {
            lexicon_size: s.lexicon_size,
            neutral_size: s.neutral_size,
            min_len: s.min_len,
            max_len: s.max_len,
            sentiment_min: s.sentiment_min,
            sentiment_max: s.sentiment_max,
        }
    }
}

impl Default for SynthShape {
    fn default() -> Self {
        let s = SynthSpec::default();
        SynthShape {
            lexicon_size: s.lexicon_size,
            neutral_size: s.neutral_size,
            min_len: s.min_len,
            max_len: s.max_len,
            sentiment_min: s.sentiment_min,
            sentiment_max: s.sentiment_max,
        }
    }
}

pub const DEFAULT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

impl Default for TrainConfig {
    /// Desk-scale defaults: 32-example content task, 4-layer 64-wide encoder.
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 60,
            dropout_rate: 0.1,
            max_seq_len: 64,
            mixup: MixupConfig::none(),
            task: TaskSpec::synthetic(TaskKind::Content, 1000, 0),
            synth: SynthShape::default(),
            train_size: TrainSize::N(32),
            seed: 1,
            selection_metric: SelectionMetric::Accuracy,
            selection_split: SelectionSplit::Dev,
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            vocab_min_count: 1,
            eval_batch_size: 64,
        }
    }
}

/// Parses `0-5` (inclusive range) or `0,2,5`.
pub fn parse_layers(s: &str) -> Result<Vec<LayerIndex>> {
    let bad = || Error::Parse(format!("invalid layer set {s:?}"));
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once('-') {
            let a: usize = a.trim().parse().map_err(|_| bad())?;
            let b: usize = b.trim().parse().map_err(|_| bad())?;
            if a > b {
                return Err(bad());
            }
            out.extend((a..=b).map(LayerIndex));
        } else {
            out.push(LayerIndex(part.parse().map_err(|_| bad())?));
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Parse(format!("{key}: cannot parse {value:?}")))
}

impl TrainConfig {
    /// Sets one field by its `key = value` name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "learning_rate" | "lr" => self.learning_rate = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "dropout_rate" => self.dropout_rate = num(key, v)?,
            "max_seq_len" => self.max_seq_len = num(key, v)?,
            "mixup" => {
                self.mixup.mode = v.parse()?;
                if self.mixup.mode == crate::mixup::MixMode::Manifold
                    && self.mixup.layer_set.is_empty()
                {
                    self.mixup.layer_set = (0..=self.n_layers + 1).map(LayerIndex).collect();
                }
            }
            "alpha" => self.mixup.alpha = num(key, v)?,
            "layers" => self.mixup.layer_set = parse_layers(v)?,
            "padding" => self.mixup.padding = v.parse::<PaddingStrategy>()?,
            "pad_token" => self.mixup.pad_token = v.parse()?,
            "start_fraction" => self.mixup.start_fraction = num(key, v)?,
            "task" => {
                self.task = match v.parse::<TaskKind>() {
                    Ok(kind) => {
                        let (size, data_seed) = match &self.task {
                            TaskSpec::Synthetic {
                                size, data_seed, ..
                            } => (*size, *data_seed),
                            TaskSpec::Dir(_) => (1000, 0),
                        };
                        TaskSpec::synthetic(kind, size, data_seed)
                    }
                    Err(_) => TaskSpec::Dir(PathBuf::from(v)),
                }
            }
            "task_size" | "data_seed" => match &mut self.task {
                TaskSpec::Synthetic {
                    size, data_seed, ..
                } => {
                    if key.trim() == "task_size" {
                        *size = num(key, v)?;
                    } else {
                        *data_seed = num(key, v)?;
                    }
                }
                TaskSpec::Dir(_) => {
                    return Err(Error::Parse(format!(
                        "{key} only applies to synthetic tasks"
                    )));
                }
            },
            "lexicon_size" => self.synth.lexicon_size = num(key, v)?,
            "neutral_size" => self.synth.neutral_size = num(key, v)?,
            "min_len" => self.synth.min_len = num(key, v)?,
            "max_len" => self.synth.max_len = num(key, v)?,
            "sentiment_min" => self.synth.sentiment_min = num(key, v)?,
            "sentiment_max" => self.synth.sentiment_max = num(key, v)?,
            "train_size" => self.train_size = v.parse()?,
            "seed" => self.seed = num(key, v)?,
            "selection_metric" => self.selection_metric = v.parse()?,
            "selection_split" => self.selection_split = v.parse()?,
            "n_layers" => self.n_layers = num(key, v)?,
            "d_model" => self.d_model = num(key, v)?,
            "n_heads" => self.n_heads = num(key, v)?,
            "d_ff" => self.d_ff = num(key, v)?,
            "vocab_min_count" => self.vocab_min_count = num(key, v)?,
            "eval_batch_size" => self.eval_batch_size = num(key, v)?,
            other => return Err(Error::Parse(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a flat `key = value` file; `#` starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Parse(format!(
                    "{}:{}: expected key = value",
                    path.display(),
                    n + 1
                ))
            })?;
            self.set(k, v)
                .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), n + 1)))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Validation(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Validation(
                "epochs and batch sizes must be >= 1".into(),
            ));
        }
        if let TrainSize::N(0) = self.train_size {
            return Err(Error::Validation("train_size must be >= 1".into()));
        }
        self.mixup.validate(self.n_layers)
    }
}
