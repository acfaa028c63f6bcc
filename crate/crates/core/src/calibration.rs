//! Expected calibration error, negative log-likelihood, accuracy and MCC.
//!
//! Confidences are grouped into `M` equal-width bins; bin `m` (1-based)
//! covers `((m - 1) / M, m / M]` and a confidence of exactly 0 goes to the
//! first bin. ECE is `sum_m |B_m| / n * |acc(B_m) - conf(B_m)|`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 15;
pub const NLL_FLOOR: f64 = 1e-12;
pub const REPORT_SCHEMA: &str = "reliability-report";
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub probs: Vec<f64>,
    pub confidence: f64,
    pub predicted: usize,
    pub label: usize,
}

impl PredictionRecord {
    /// Takes the winning class (first on ties) and its probability as confidence.
    pub fn from_probs(probs: Vec<f64>, label: usize) -> Result<Self> {
        if probs.is_empty() || label >= probs.len() {
            return Err(Error::Validation(format!(
                "label {label} outside probability vector of length {}",
                probs.len()
            )));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 || probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Validation(format!("probabilities sum to {total}")));
        }
        let (predicted, confidence) =
            probs
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &p)| {
                    if p > best.1 {
                        (i, p)
                    } else {
                        best
                    }
                });
        Ok(PredictionRecord {
            probs,
            confidence,
            predicted,
            label,
        })
    }

    pub fn correct(&self) -> bool {
        self.predicted == self.label
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// `None` for an empty bin.
    pub accuracy: Option<f64>,
    #[serde(rename = "confidence")]
    pub mean_confidence: Option<f64>,
}

fn bin_bounds(m: usize, bins: usize) -> (f64, f64) {
    (m as f64 / bins as f64, (m + 1) as f64 / bins as f64)
}

/// 0-based bin of a confidence in `[0, 1]`.
pub fn bin_index(confidence: f64, bins: usize) -> usize {
    if confidence <= 0.0 {
        return 0;
    }
    let mut idx = ((confidence * bins as f64).ceil() as usize).clamp(1, bins) - 1;
    while idx > 0 && confidence <= bin_bounds(idx, bins).0 {
        idx -= 1;
    }
    while idx + 1 < bins && confidence > bin_bounds(idx, bins).1 {
        idx += 1;
    }
    idx
}

pub fn bin_predictions(records: &[PredictionRecord], bins: usize) -> Result<Vec<CalibrationBin>> {
    if bins == 0 {
        return Err(Error::Parameter("need at least one bin".into()));
    }
    let mut count = vec![0usize; bins];
    let mut correct = vec![0usize; bins];
    let mut conf = vec![0.0; bins];
    for (i, r) in records.iter().enumerate() {
        if !(0.0..=1.0).contains(&r.confidence) {
            return Err(Error::Validation(format!(
                "record {i}: confidence {} outside [0,1]",
                r.confidence
            )));
        }
        let b = bin_index(r.confidence, bins);
        count[b] += 1;
        correct[b] += usize::from(r.correct());
        conf[b] += r.confidence;
    }
    Ok((0..bins)
        .map(|m| {
            let (lower, upper) = bin_bounds(m, bins);
            let n = count[m];
            CalibrationBin {
                lower,
                upper,
                count: n,
                accuracy: (n > 0).then(|| correct[m] as f64 / n as f64),
                mean_confidence: (n > 0).then(|| conf[m] / n as f64),
            }
        })
        .collect())
}

pub fn ece(bins: &[CalibrationBin], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Contract("ECE of zero samples".into()));
    }
    let total: usize = bins.iter().map(|b| b.count).sum();
    if total != n {
        return Err(Error::Contract(format!(
            "bin counts sum to {total}, expected {n}"
        )));
    }
    Ok(bins
        .iter()
        .filter_map(|b| match (b.accuracy, b.mean_confidence) {
            (Some(a), Some(c)) => Some(b.count as f64 / n as f64 * (a - c).abs()),
            _ => None,
        })
        .sum())
}

/// Mean `-ln p(true class)`, with probabilities floored at [`NLL_FLOOR`].
/// Also returns how many records hit the floor.
pub fn nll(records: &[PredictionRecord]) -> Result<(f64, usize)> {
    if records.is_empty() {
        return Err(Error::Contract("NLL of zero samples".into()));
    }
    let mut clamped = 0;
    let total: f64 = records
        .iter()
        .map(|r| {
            let p = r.probs[r.label];
            if p < NLL_FLOOR {
                clamped += 1;
            }
            -p.max(NLL_FLOOR).ln()
        })
        .sum();
    Ok((total / records.len() as f64, clamped))
}

/// Matthews correlation coefficient; the K-class form reduces to the
/// usual binary formula. Returns 0 when a marginal is degenerate.
pub fn mcc(predictions: &[usize], labels: &[usize]) -> f64 {
    let n = predictions.len().min(labels.len());
    if n == 0 {
        return 0.0;
    }
    let k = predictions[..n]
        .iter()
        .chain(&labels[..n])
        .max()
        .copied()
        .unwrap_or(0)
        + 1;
    let mut pred_count = vec![0.0; k];
    let mut true_count = vec![0.0; k];
    let mut correct = 0.0;
    for (&p, &t) in predictions.iter().zip(labels) {
        pred_count[p] += 1.0;
        true_count[t] += 1.0;
        if p == t {
            correct += 1.0;
        }
    }
    let s = n as f64;
    let pt: f64 = pred_count.iter().zip(&true_count).map(|(p, t)| p * t).sum();
    let pp: f64 = pred_count.iter().map(|p| p * p).sum();
    let tt: f64 = true_count.iter().map(|t| t * t).sum();
    let denom = ((s * s - pp) * (s * s - tt)).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        (correct * s - pt) / denom
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub bins: Vec<CalibrationBin>,
    pub ece: f64,
    pub nll: f64,
    pub accuracy: f64,
    pub mcc: Option<f64>,
    pub n: usize,
    #[serde(default)]
    pub nll_clamped: usize,
}

#[derive(Serialize, Deserialize)]
struct ReportFile {
    schema: String,
    version: u32,
    #[serde(flatten)]
    report: CalibrationReport,
}

impl CalibrationReport {
    pub fn from_records(records: &[PredictionRecord], bins: usize, with_mcc: bool) -> Result<Self> {
        let n = records.len();
        if n == 0 {
            return Err(Error::Contract("cannot report on zero predictions".into()));
        }
        let binned = bin_predictions(records, bins)?;
        let ece = ece(&binned, n)?;
        let (nll, nll_clamped) = nll(records)?;
        let accuracy = records.iter().filter(|r| r.correct()).count() as f64 / n as f64;
        let mcc = with_mcc.then(|| {
            let preds: Vec<usize> = records.iter().map(|r| r.predicted).collect();
            let labels: Vec<usize> = records.iter().map(|r| r.label).collect();
            mcc(&preds, &labels)
        });
        Ok(CalibrationReport {
            bins: binned,
            ece,
            nll,
            accuracy,
            mcc,
            n,
            nll_clamped,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&ReportFile {
            schema: REPORT_SCHEMA.to_string(),
            version: REPORT_VERSION,
            report: self.clone(),
        })
        .map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: ReportFile = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        if f.schema != REPORT_SCHEMA || f.version != REPORT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported report {} v{}",
                f.schema, f.version
            )));
        }
        Ok(f.report)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }
}
