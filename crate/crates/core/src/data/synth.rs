//! Synthetic desk-scale tasks.
//!
//! `Content` tasks are decided by which sentiment lexicon dominates a
//! sentence, so a bag of words solves them. `Syntax` tasks are decided by
//! the relative order of two marker tokens that occur exactly once in every
//! sentence, so unigram statistics carry no label information.

use std::collections::HashMap;
use std::str::FromStr;

use super::{split_words, Dataset, Example, Split, TaskData};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Content,
    Syntax,
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "content" => Ok(TaskKind::Content),
            "syntax" => Ok(TaskKind::Syntax),
            other => Err(Error::Parse(format!("unknown task kind {other:?}"))),
        }
    }
}

/// Vocabulary and length shape of a synthetic task.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    /// Words per sentiment lexicon (content task).
    pub lexicon_size: usize,
    /// Filler words shared by both classes.
    pub neutral_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Sentiment tokens per content sentence; odd counts only are drawn.
    pub sentiment_min: usize,
    pub sentiment_max: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            lexicon_size: 8,
            neutral_size: 40,
            min_len: 6,
            max_len: 12,
            sentiment_min: 1,
            sentiment_max: 5,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.lexicon_size == 0 || self.neutral_size == 0 {
            return Err(Error::Validation(
                "lexicon and filler vocabularies must be nonempty".into(),
            ));
        }
        if self.min_len < 2 || self.min_len > self.max_len {
            return Err(Error::Validation(format!(
                "invalid length range [{}, {}]",
                self.min_len, self.max_len
            )));
        }
        if self.sentiment_min == 0
            || self.sentiment_min > self.sentiment_max
            || self.sentiment_max > self.min_len
        {
            return Err(Error::Validation(format!(
                "sentiment count range [{}, {}] must be nonempty and fit min_len {}",
                self.sentiment_min, self.sentiment_max, self.min_len
            )));
        }
        Ok(())
    }
}

pub const POSITIVE_PREFIX: &str = "pos";
pub const NEGATIVE_PREFIX: &str = "neg";
pub const FIRST_MARKER: &str = "alpha";
pub const SECOND_MARKER: &str = "omega";

/// Majority-lexicon label: 1 when positive tokens outnumber negative ones.
pub fn content_label(positive: usize, negative: usize) -> usize {
    usize::from(positive > negative)
}

pub type SynthTask = TaskData;

fn content_example(spec: &SynthSpec, rng: &mut Rng) -> Example {
    let label = rng.below(2);
    let odd: Vec<usize> = (spec.sentiment_min..=spec.sentiment_max)
        .filter(|s| s % 2 == 1)
        .collect();
    let s = if odd.is_empty() {
        spec.sentiment_min | 1
    } else {
        odd[rng.below(odd.len())]
    };
    let majority = s / 2 + 1 + rng.below(s - s / 2);
    let (pos, neg) = if label == 1 {
        (majority, s - majority)
    } else {
        (s - majority, majority)
    };
    let len = (spec.min_len + rng.below(spec.max_len - spec.min_len + 1)).max(s);
    let mut words: Vec<String> = Vec::with_capacity(len);
    for _ in 0..pos {
        words.push(format!("{POSITIVE_PREFIX}{}", rng.below(spec.lexicon_size)));
    }
    for _ in 0..neg {
        words.push(format!("{NEGATIVE_PREFIX}{}", rng.below(spec.lexicon_size)));
    }
    while words.len() < len {
        words.push(format!("w{}", rng.below(spec.neutral_size)));
    }
    rng.shuffle(&mut words);
    debug_assert_eq!(content_label(pos, neg), label);
    Example {
        text: words.join(" "),
        text_pair: None,
        label,
    }
}

fn syntax_example(spec: &SynthSpec, rng: &mut Rng) -> Example {
    let len = spec.min_len + rng.below(spec.max_len - spec.min_len + 1);
    let mut words: Vec<String> = (0..len)
        .map(|_| format!("w{}", rng.below(spec.neutral_size)))
        .collect();
    let a = rng.below(len);
    let mut b = rng.below(len - 1);
    if b >= a {
        b += 1;
    }
    words[a] = FIRST_MARKER.to_string();
    words[b] = SECOND_MARKER.to_string();
    Example {
        text: words.join(" "),
        text_pair: None,
        label: usize::from(a < b),
    }
}

/// Generates `size` examples and splits them 70/15/15 into train/dev/test.
pub fn synth_task_generate(
    kind: TaskKind,
    size: usize,
    spec: &SynthSpec,
    seed: u64,
) -> Result<SynthTask> {
    if size < 2 {
        return Err(Error::Validation(format!(
            "synthetic task size must be >= 2, got {size}"
        )));
    }
    spec.validate()?;
    let mut rng = Rng::stream(seed, Stream::Data);
    let mut examples: Vec<Example> = (0..size)
        .map(|_| match kind {
            TaskKind::Content => content_example(spec, &mut rng),
            TaskKind::Syntax => syntax_example(spec, &mut rng),
        })
        .collect();
    rng.shuffle(&mut examples);
    let n_train = (size * 70 / 100).max(1);
    let n_dev = size * 15 / 100;
    let test = examples.split_off(n_train + n_dev);
    let dev = examples.split_off(n_train);
    let labels = match kind {
        TaskKind::Content => vec!["negative".to_string(), "positive".to_string()],
        TaskKind::Syntax => vec!["reversed".to_string(), "ordered".to_string()],
    };
    // a tiny task can leave test empty; borrow from dev in that case
    let (dev, test) = if test.is_empty() {
        (Vec::new(), dev)
    } else {
        (dev, test)
    };
    Ok(TaskData {
        train: Dataset::new(examples, 2, Split::Train)?,
        dev: if dev.is_empty() {
            None
        } else {
            Some(Dataset::new(dev, 2, Split::Dev)?)
        },
        test: Dataset::new(test, 2, Split::Test)?,
        labels,
    })
}

/// Dev accuracy of a bag-of-words logistic-regression probe trained on `train`.
///
/// Full-batch gradient descent on word counts, zero-initialised, so the
/// result is deterministic.
pub fn bow_probe_accuracy(train: &Dataset, eval: &Dataset) -> f64 {
    let mut index: HashMap<String, usize> = HashMap::new();
    for e in &train.examples {
        for w in split_words(&e.text) {
            let n = index.len();
            index.entry(w).or_insert(n);
        }
    }
    let dim = index.len() + 1;
    let k = train.n_classes;
    let featurize = |text: &str| {
        let mut x = vec![0.0; dim];
        x[dim - 1] = 1.0;
        for w in split_words(text) {
            if let Some(&i) = index.get(&w) {
                x[i] += 1.0;
            }
        }
        x
    };
    let xs: Vec<Vec<f64>> = train.examples.iter().map(|e| featurize(&e.text)).collect();
    let mut w = vec![0.0; dim * k];
    let (lr, l2, iters) = (0.5, 1e-3, 300);
    let n = xs.len() as f64;
    for _ in 0..iters {
        let mut grad = vec![0.0; dim * k];
        for (x, e) in xs.iter().zip(&train.examples) {
            let logits: Vec<f64> = (0..k)
                .map(|c| (0..dim).map(|j| x[j] * w[j * k + c]).sum())
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            for c in 0..k {
                let p = (logits[c] - max).exp() / z;
                let err = p - f64::from(u8::from(c == e.label));
                for j in 0..dim {
                    if x[j] != 0.0 {
                        grad[j * k + c] += err * x[j];
                    }
                }
            }
        }
        for (wi, gi) in w.iter_mut().zip(&grad) {
            *wi -= lr * (gi / n + l2 * *wi);
        }
    }
    let correct = eval
        .examples
        .iter()
        .filter(|e| {
            let x = featurize(&e.text);
            let scores: Vec<f64> = (0..k)
                .map(|c| (0..dim).map(|j| x[j] * w[j * k + c]).sum())
                .collect();
            let pred = scores
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &s)| {
                    if s > best.1 {
                        (i, s)
                    } else {
                        best
                    }
                })
                .0;
            pred == e.label
        })
        .count();
    correct as f64 / eval.len().max(1) as f64
}
