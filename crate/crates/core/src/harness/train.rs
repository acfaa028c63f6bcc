use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{SelectionMetric, SelectionSplit, TaskSpec, TrainConfig, TrainSize};
use super::optim::{optimizer_step, AdamState};
use crate::calibration::{CalibrationReport, PredictionRecord, DEFAULT_BINS};
use crate::data::{
    batch_order, eval_batches, make_batches, synth_task_generate, Dataset, Encoded, SynthSpec,
    TaskData, TaskKind, Vocab,
};
use crate::encoder::{Encoder, EncoderConfig, Phase};
use crate::error::{Error, Result};
use crate::mixup::{baseline_step, mixup_step, MixStreams};
use crate::tensor::{Rng, Stream};

/// Metrics after one training epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    /// Mean cross-entropy on the test split, unmixed.
    pub test_loss: f64,
    pub test_acc: f64,
    pub test_ece: f64,
    pub test_nll: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mcc: Option<f64>,
    /// Selection metric on the selection split.
    pub selection: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config: TrainConfig,
    pub seed: u64,
    pub variant: String,
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: usize,
    /// Full test report at the best epoch.
    pub best: CalibrationReport,
    pub selection_split: SelectionSplit,
    pub train_examples: usize,
    pub init_hash: String,
    pub order_hash: String,
    pub final_hash: String,
}

impl RunResult {
    pub fn best_metrics(&self) -> &EpochMetrics {
        &self.epochs[self.best_epoch]
    }
}

/// A finished run together with the best-epoch model and its vocabulary.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub result: RunResult,
    pub model: Encoder,
    pub vocab: Vocab,
}

/// Prepared data for a run: vocabulary from the full train split, train
/// subsampled by the run seed.
#[derive(Debug, Clone)]
pub struct RunData {
    pub vocab: Vocab,
    pub n_classes: usize,
    pub train: Vec<Encoded>,
    pub select: Vec<Encoded>,
    pub test: Vec<Encoded>,
    pub selection_split: SelectionSplit,
}

pub fn resolve_task(config: &TrainConfig) -> Result<TaskData> {
    match &config.task {
        TaskSpec::Synthetic {
            kind,
            size,
            data_seed,
        } => {
            let kind: TaskKind = kind.parse()?;
            synth_task_generate(kind, *size, &SynthSpec::from(&config.synth), *data_seed)
        }
        TaskSpec::Dir(dir) => TaskData::load_dir(dir),
    }
}

pub fn prepare_data(config: &TrainConfig, task: &TaskData) -> Result<RunData> {
    let vocab = Vocab::build(
        task.train.examples.iter().map(|e| e.text.as_str()),
        config.vocab_min_count,
    )?;
    let train: Dataset = match config.train_size {
        TrainSize::Full => task.train.clone(),
        TrainSize::N(n) => task.train.subsample(n, config.seed)?,
    };
    let (selection_split, select) = match (config.selection_split, &task.dev) {
        (SelectionSplit::Dev, Some(dev)) => (SelectionSplit::Dev, dev),
        _ => (SelectionSplit::Test, &task.test),
    };
    let msl = config.max_seq_len;
    Ok(RunData {
        n_classes: task.labels.len(),
        train: train.encode(&vocab, msl),
        select: select.encode(&vocab, msl),
        test: task.test.encode(&vocab, msl),
        selection_split,
        vocab,
    })
}

pub fn encoder_config(config: &TrainConfig, vocab_size: usize, n_classes: usize) -> EncoderConfig {
    EncoderConfig {
        n_layers: config.n_layers,
        d_model: config.d_model,
        n_heads: config.n_heads,
        d_ff: config.d_ff,
        max_seq_len: config.max_seq_len,
        vocab_size,
        n_classes,
        dropout_rate: config.dropout_rate,
    }
}

/// Hash of every epoch's batch composition; equal across variants at equal seed.
pub fn order_hash(n: usize, config: &TrainConfig) -> Result<String> {
    let mut h = Sha256::new();
    for epoch in 0..config.epochs {
        for batch in batch_order(n, config.batch_size, config.seed, epoch, false)? {
            h.update((batch.len() as u64).to_le_bytes());
            for i in batch {
                h.update((i as u64).to_le_bytes());
            }
        }
    }
    Ok(hex::encode(h.finalize()))
}

/// Predictions and mean cross-entropy, in dataset order.
pub fn predict(
    model: &Encoder,
    data: &[Encoded],
    n_classes: usize,
    batch_size: usize,
) -> Result<(Vec<PredictionRecord>, f64)> {
    if data.is_empty() {
        return Err(Error::Contract(
            "cannot evaluate on an empty dataset".into(),
        ));
    }
    let bound = model.bind_frozen();
    let mut records = Vec::with_capacity(data.len());
    let mut ce = 0.0;
    for batch in eval_batches(data, n_classes, batch_size)? {
        let logits = bound.logits(&batch.token_ids, &batch.mask(), &mut Phase::Eval)?;
        for (row, &label) in logits.values().chunks(n_classes).zip(&batch.labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|l| (l - max).exp()).sum();
            ce += max + z.ln() - row[label];
            let probs = row.iter().map(|l| (l - max).exp() / z).collect();
            records.push(PredictionRecord::from_probs(probs, label)?);
        }
    }
    Ok((records, ce / data.len() as f64))
}

/// Single unmixed, dropout-free pass producing a full calibration report.
pub fn evaluate(model: &Encoder, data: &[Encoded], n_classes: usize) -> Result<CalibrationReport> {
    let (records, _) = predict(model, data, n_classes, 64)?;
    CalibrationReport::from_records(&records, DEFAULT_BINS, true)
}

fn selection_value(report: &CalibrationReport, metric: SelectionMetric) -> f64 {
    match metric {
        SelectionMetric::Accuracy => report.accuracy,
        SelectionMetric::Mcc => report.mcc.unwrap_or(0.0),
    }
}

/// First index attaining the maximum.
pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn train(config: &TrainConfig) -> Result<TrainedRun> {
    config.validate()?;
    let task = resolve_task(config)?;
    let data = prepare_data(config, &task)?;
    train_on(config, data)
}

pub fn train_on(config: &TrainConfig, data: RunData) -> Result<TrainedRun> {
    config.validate()?;
    let seed = config.seed;
    let k = data.n_classes;
    let enc_cfg = encoder_config(config, data.vocab.len(), k);
    let mut model = Encoder::new(enc_cfg, &mut Rng::stream(seed, Stream::Init))?;
    let init_hash = model.param_hash();
    let order_hash = order_hash(data.train.len(), config)?;
    let global_max = data.train.iter().map(|e| e.ids.len()).max().unwrap_or(0);

    let mut adam = AdamState::new(model.params());
    let mut dropout = Rng::stream(seed, Stream::Dropout);
    let mut streams = MixStreams::new(seed);
    let with_mcc = config.selection_metric == SelectionMetric::Mcc;

    let mut epochs = Vec::with_capacity(config.epochs);
    let mut reports = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, Encoder)> = None;
    for epoch in 0..config.epochs {
        let mixing = config.mixup.active_at(epoch, config.epochs);
        let batches = make_batches(&data.train, k, config.batch_size, seed, epoch, false)?;
        let mut loss_sum = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            let bound = model.bind();
            let mut phase = Phase::Train(&mut dropout);
            let (loss, diag) = if mixing {
                let (loss, mixed) = mixup_step(
                    &bound,
                    batch,
                    &config.mixup,
                    &mut streams,
                    &mut phase,
                    global_max,
                )?;
                (loss, Some((mixed.lambda, mixed.layer.0)))
            } else {
                (baseline_step(&bound, batch, &mut phase)?, None)
            };
            let value = loss.item()?;
            if !value.is_finite() {
                let detail = match diag {
                    Some((l, layer)) => format!("lambda {l}, layer {layer}"),
                    None => "no mixing".to_string(),
                };
                return Err(Error::Numeric(format!(
                    "non-finite loss {value} at epoch {epoch}, batch {bi} ({detail})"
                )));
            }
            loss_sum += value;
            loss.backward()?;
            let grads = bound.grads();
            drop(bound);
            optimizer_step(model.params_mut(), &grads, &mut adam, config.learning_rate)?;
        }

        let (test_records, test_loss) = predict(&model, &data.test, k, config.eval_batch_size)?;
        let test = CalibrationReport::from_records(&test_records, DEFAULT_BINS, true)?;
        let select = if data.selection_split == SelectionSplit::Test {
            selection_value(&test, config.selection_metric)
        } else {
            let (r, _) = predict(&model, &data.select, k, config.eval_batch_size)?;
            selection_value(
                &CalibrationReport::from_records(&r, DEFAULT_BINS, true)?,
                config.selection_metric,
            )
        };
        if best.as_ref().map_or(true, |(v, _)| select > *v) {
            best = Some((select, model.clone()));
        }
        let mut test_report = test;
        if !with_mcc {
            test_report.mcc = None;
        }
        epochs.push(EpochMetrics {
            epoch: epoch + 1,
            train_loss: loss_sum / batches.len().max(1) as f64,
            test_loss,
            test_acc: test_report.accuracy,
            test_ece: test_report.ece,
            test_nll: test_report.nll,
            mcc: test_report.mcc,
            selection: select,
        });
        reports.push(test_report);
    }

    let best_epoch = argmax_first(&epochs.iter().map(|e| e.selection).collect::<Vec<_>>());
    let final_hash = model.param_hash();
    let (_, best_model) = best.expect("at least one epoch");
    Ok(TrainedRun {
        result: RunResult {
            config: config.clone(),
            seed,
            variant: config.mixup.variant_name(),
            best: reports.swap_remove(best_epoch),
            epochs,
            best_epoch,
            selection_split: data.selection_split,
            train_examples: data.train.len(),
            init_hash,
            order_hash,
            final_hash,
        },
        model: best_model,
        vocab: data.vocab,
    })
}
