//! Tokenization, dataset files, low-resource subsampling and batching.

mod synth;

pub use synth::{
    bow_probe_accuracy, content_label, synth_task_generate, SynthSpec, SynthTask, TaskKind,
};

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{derive_seed, Rng, Stream};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const UNUSED: usize = 4;

const RESERVED: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[unused0]"];

/// Lowercased word and punctuation tokens.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '_' {
            cur.extend(ch.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate vocabulary token {t:?}"
                )));
            }
        }
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::Validation(format!(
                    "reserved token {r} must have id {i}"
                )));
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Reserved block first, then tokens seen at least `min_count` times,
    /// by descending frequency and then lexicographically.
    pub fn build<'a, I>(corpus: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut docs = 0;
        for text in corpus {
            docs += 1;
            for w in split_words(text) {
                *counts.entry(w).or_default() += 1;
            }
        }
        if docs == 0 {
            return Err(Error::Validation(
                "cannot build a vocabulary from an empty corpus".into(),
            ));
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_count.max(1) && !RESERVED.contains(&w.as_str()))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w))
            .collect();
        Vocab::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for t in &self.tokens {
            text.push_str(t);
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocab::from_tokens(text.lines().map(str::to_string).collect())
    }

    /// `[CLS] words [SEP]`, truncated to `max_seq_len` keeping the final `[SEP]`.
    pub fn tokenize(&self, text: &str, max_seq_len: usize) -> Vec<usize> {
        self.encode(text, None, max_seq_len)
    }

    /// `[CLS] a [SEP]` or `[CLS] a [SEP] b [SEP]`, tail-truncated.
    pub fn encode(&self, text: &str, pair: Option<&str>, max_seq_len: usize) -> Vec<usize> {
        let lookup = |w: String| self.id(&w).unwrap_or(UNK);
        let mut ids = vec![CLS];
        ids.extend(split_words(text).into_iter().map(lookup));
        ids.push(SEP);
        if let Some(b) = pair {
            ids.extend(split_words(b).into_iter().map(lookup));
            ids.push(SEP);
        }
        let max = max_seq_len.max(2);
        if ids.len() > max {
            ids.truncate(max - 1);
            ids.push(SEP);
        }
        ids
    }

    /// Space-joined tokens with `[CLS]`, `[SEP]` and `[PAD]` dropped.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != CLS && i != SEP && i != PAD)
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Parse(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_pair: Option<String>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub n_classes: usize,
    pub split: Split,
}

#[derive(Serialize, Deserialize)]
struct LabelMap {
    labels: Vec<String>,
}

impl Dataset {
    pub fn new(examples: Vec<Example>, n_classes: usize, split: Split) -> Result<Self> {
        for (i, e) in examples.iter().enumerate() {
            if e.label >= n_classes {
                return Err(Error::Validation(format!(
                    "example {i}: label {} outside [0, {n_classes})",
                    e.label
                )));
            }
            if e.text.trim().is_empty() {
                return Err(Error::Validation(format!("example {i}: empty text")));
            }
        }
        Ok(Dataset {
            examples,
            n_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for e in &self.examples {
            counts[e.label] += 1;
        }
        counts
    }

    /// Reads one JSON object per line: `{"text": ..., "label": ...}`.
    pub fn load_jsonl(path: &Path, n_classes: usize, split: Split) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut examples = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let ex: Example = serde_json::from_str(&line)
                .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), n + 1)))?;
            examples.push(ex);
        }
        Dataset::new(examples, n_classes, split)
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let mut f =
            std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        for e in &self.examples {
            let line = serde_json::to_string(e).map_err(|e| Error::Parse(e.to_string()))?;
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        f.flush().map_err(|e| Error::io(path, e))
    }

    /// Uniform sample of `n` examples without replacement, in original order.
    pub fn subsample(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n > self.len() {
            return Err(Error::Validation(format!(
                "cannot subsample {n} examples from {}",
                self.len()
            )));
        }
        let mut rng = Rng::stream(seed, Stream::Subsample);
        let mut idx = rng.permutation(self.len());
        idx.truncate(n);
        idx.sort_unstable();
        Ok(Dataset {
            examples: idx.into_iter().map(|i| self.examples[i].clone()).collect(),
            n_classes: self.n_classes,
            split: self.split,
        })
    }

    pub fn encode(&self, vocab: &Vocab, max_seq_len: usize) -> Vec<Encoded> {
        self.examples
            .iter()
            .map(|e| Encoded {
                ids: vocab.encode(&e.text, e.text_pair.as_deref(), max_seq_len),
                label: e.label,
            })
            .collect()
    }
}

pub fn save_label_map(path: &Path, labels: &[String]) -> Result<()> {
    let text = serde_json::to_string(&LabelMap {
        labels: labels.to_vec(),
    })
    .map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_label_map(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let map: LabelMap = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    if map.labels.len() < 2 {
        return Err(Error::Validation(format!(
            "{}: need at least two labels",
            path.display()
        )));
    }
    Ok(map.labels)
}

/// Train/dev/test datasets of one task plus its label names.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub train: Dataset,
    pub dev: Option<Dataset>,
    pub test: Dataset,
    pub labels: Vec<String>,
}

impl TaskData {
    /// Loads `train.jsonl`, optional `dev.jsonl`, `test.jsonl` and `labels.json` from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let labels = load_label_map(&dir.join("labels.json"))?;
        let k = labels.len();
        let dev_path = dir.join("dev.jsonl");
        Ok(TaskData {
            train: Dataset::load_jsonl(&dir.join("train.jsonl"), k, Split::Train)?,
            dev: if dev_path.exists() {
                Some(Dataset::load_jsonl(&dev_path, k, Split::Dev)?)
            } else {
                None
            },
            test: Dataset::load_jsonl(&dir.join("test.jsonl"), k, Split::Test)?,
            labels,
        })
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_label_map(&dir.join("labels.json"), &self.labels)?;
        self.train.save_jsonl(&dir.join("train.jsonl"))?;
        if let Some(dev) = &self.dev {
            dev.save_jsonl(&dir.join("dev.jsonl"))?;
        }
        self.test.save_jsonl(&dir.join("test.jsonl"))
    }
}

/// A tokenized example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    pub label: usize,
}

/// Right-padded token matrix with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Row-major `[batch, len]`.
    pub token_ids: Vec<usize>,
    pub lengths: Vec<usize>,
    pub len: usize,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Batch {
    pub fn from_encoded(items: &[&Encoded], n_classes: usize) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let len = items.iter().map(|e| e.ids.len()).max().unwrap_or(0);
        let mut token_ids = Vec::with_capacity(items.len() * len);
        for e in items {
            if e.label >= n_classes {
                return Err(Error::Validation(format!(
                    "label {} outside [0, {n_classes})",
                    e.label
                )));
            }
            token_ids.extend(&e.ids);
            token_ids.extend(std::iter::repeat(PAD).take(len - e.ids.len()));
        }
        Ok(Batch {
            token_ids,
            lengths: items.iter().map(|e| e.ids.len()).collect(),
            len,
            labels: items.iter().map(|e| e.label).collect(),
            n_classes,
        })
    }

    pub fn size(&self) -> usize {
        self.lengths.len()
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.token_ids[b * self.len..(b + 1) * self.len]
    }

    /// `[batch, n_classes]` one-hot rows.
    pub fn one_hot(&self) -> Vec<f64> {
        let mut y = vec![0.0; self.size() * self.n_classes];
        for (b, &l) in self.labels.iter().enumerate() {
            y[b * self.n_classes + l] = 1.0;
        }
        y
    }

    /// Mask that is true exactly on real-token positions.
    pub fn mask(&self) -> crate::encoder::AttentionMask {
        crate::encoder::AttentionMask::from_lengths(&self.lengths, self.len)
    }
}

/// Shuffles with a seed derived from `(seed, epoch)` and cuts into batches.
pub fn make_batches(
    data: &[Encoded],
    n_classes: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    drop_last: bool,
) -> Result<Vec<Batch>> {
    Ok(batch_order(data.len(), batch_size, seed, epoch, drop_last)?
        .iter()
        .map(|idx| {
            let items: Vec<&Encoded> = idx.iter().map(|&i| &data[i]).collect();
            Batch::from_encoded(&items, n_classes)
        })
        .collect::<Result<Vec<_>>>()?)
}

/// Example indices of each batch for one epoch.
pub fn batch_order(
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    drop_last: bool,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Parameter("batch_size must be >= 1".into()));
    }
    let mut rng = Rng::stream(derive_seed(seed, epoch as u64), Stream::Shuffle);
    let order = rng.permutation(n);
    Ok(order
        .chunks(batch_size)
        .filter(|c| !drop_last || c.len() == batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

/// Sequential, unshuffled batches for evaluation.
pub fn eval_batches(data: &[Encoded], n_classes: usize, batch_size: usize) -> Result<Vec<Batch>> {
    data.chunks(batch_size.max(1))
        .map(|c| Batch::from_encoded(&c.iter().collect::<Vec<_>>(), n_classes))
        .collect()
}

/// Label histogram keyed by label name, for run metadata.
pub fn label_distribution(ds: &Dataset, labels: &[String]) -> BTreeMap<String, usize> {
    ds.label_counts()
        .into_iter()
        .enumerate()
        .map(|(i, c)| (labels.get(i).cloned().unwrap_or_else(|| i.to_string()), c))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(text: &str, label: usize) -> Example {
        Example {
            text: text.into(),
            text_pair: None,
            label,
        }
    }

    #[test]
    fn vocab_threshold_and_reserved() {
        let v = Vocab::build(["a a b"], 2).unwrap();
        assert!(v.contains("a"));
        assert!(!v.contains("b"));
        for (i, r) in RESERVED.iter().enumerate() {
            assert_eq!(v.id(r), Some(i));
        }
        assert_eq!(v, Vocab::build(["a a b"], 2).unwrap());
    }

    #[test]
    fn vocab_ordering_is_frequency_then_lexicographic() {
        let v = Vocab::build(["c b b a a z"], 1).unwrap();
        let words: Vec<&str> = (5..v.len()).map(|i| v.token(i).unwrap()).collect();
        assert_eq!(words, ["a", "b", "c", "z"]);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(matches!(
            Vocab::build(Vec::<&str>::new(), 1),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn tokenize_cases() {
        let v = Vocab::build(["hello world"], 1).unwrap();
        assert_eq!(v.tokenize("", 16), vec![CLS, SEP]);
        let ids = v.tokenize("Hello world", 16);
        assert_eq!(ids.len(), 4);
        assert_eq!(ids[0], CLS);
        assert_eq!(v.tokenize("hello unknown", 16)[2], UNK);
        let t = v.tokenize("hello world hello world hello", 4);
        assert_eq!(t.len(), 4);
        assert_eq!(t[0], CLS);
        assert_eq!(t[3], SEP);
    }

    #[test]
    fn punctuation_is_split() {
        assert_eq!(split_words("Hi, there!"), ["hi", ",", "there", "!"]);
    }

    #[test]
    fn sentence_pairs_use_two_separators() {
        let v = Vocab::build(["is it red"], 1).unwrap();
        let ids = v.encode("is it", Some("red"), 16);
        assert_eq!(ids.iter().filter(|&&i| i == SEP).count(), 2);
        assert_eq!(ids.len(), 6);
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = Vocab::build(["x y y z"], 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        assert_eq!(Vocab::load(&p).unwrap(), v);
    }

    #[test]
    fn dataset_validation() {
        assert!(Dataset::new(vec![ex("a", 2)], 2, Split::Train).is_err());
        assert!(Dataset::new(vec![ex("  ", 0)], 2, Split::Train).is_err());
    }

    #[test]
    fn subsample_cases() {
        let ds = Dataset::new(
            (0..50).map(|i| ex(&format!("w{i}"), i % 2)).collect(),
            2,
            Split::Train,
        )
        .unwrap();
        let all = ds.subsample(50, 1).unwrap();
        assert_eq!(all, ds);
        let a = ds.subsample(32, 1).unwrap();
        assert_eq!(a.len(), 32);
        assert_eq!(a, ds.subsample(32, 1).unwrap());
        assert_ne!(a, ds.subsample(32, 2).unwrap());
        assert!(matches!(ds.subsample(51, 1), Err(Error::Validation(_))));
    }

    #[test]
    fn batching_cases() {
        let data: Vec<Encoded> = (0..10)
            .map(|i| Encoded {
                ids: vec![CLS; 2 + i % 3],
                label: i % 2,
            })
            .collect();
        let b = make_batches(&data, 2, 16, 0, 0, false).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].size(), 10);
        assert_eq!(b[0].len, 4);
        let b = make_batches(&data, 2, 4, 7, 0, false).unwrap();
        assert_eq!(b.iter().map(Batch::size).collect::<Vec<_>>(), [4, 4, 2]);
        assert_eq!(b, make_batches(&data, 2, 4, 7, 0, false).unwrap());
        assert_ne!(
            batch_order(10, 4, 7, 0, false).unwrap(),
            batch_order(10, 4, 7, 1, false).unwrap()
        );
        assert_eq!(make_batches(&data, 2, 4, 7, 0, true).unwrap().len(), 2);
    }

    #[test]
    fn batch_mask_and_one_hot() {
        let a = Encoded {
            ids: vec![CLS, 7, SEP],
            label: 1,
        };
        let b = Encoded {
            ids: vec![CLS, SEP],
            label: 0,
        };
        let batch = Batch::from_encoded(&[&a, &b], 2).unwrap();
        assert_eq!(batch.token_ids, vec![CLS, 7, SEP, CLS, SEP, PAD]);
        assert_eq!(batch.mask().keep, vec![true, true, true, true, true, false]);
        assert_eq!(batch.one_hot(), vec![0.0, 1.0, 1.0, 0.0]);
    }
}
