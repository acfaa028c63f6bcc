use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::train::{prepare_data, resolve_task, train_on, TrainedRun};
use crate::error::{Error, Result};
use crate::mixup::{MixMode, MixupConfig, PadToken, PaddingStrategy};

/// Mean and standard error (sample sd / sqrt(n)); `se` is absent below two values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: Option<f64>,
}

impl MeanSe {
    pub fn of(values: &[f64]) -> Option<MeanSe> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let se = (values.len() >= 2).then(|| {
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        });
        Some(MeanSe { mean, se })
    }

    fn scaled(self, s: f64) -> MeanSe {
        MeanSe {
            mean: self.mean * s,
            se: self.se.map(|e| e * s),
        }
    }
}

/// Best-epoch test metrics of one (variant, seed) cell, or why it failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_epoch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nll: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ece: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mcc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub mixup: MixupConfig,
    pub accuracy: Option<MeanSe>,
    pub nll: Option<MeanSe>,
    pub ece: Option<MeanSe>,
    pub mcc: Option<MeanSe>,
    pub failed: usize,
    pub cells: Vec<CellOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub seeds: Vec<u64>,
    pub variants: Vec<VariantSummary>,
}

impl ExperimentSummary {
    pub fn variant(&self, label: &str) -> Option<&VariantSummary> {
        self.variants.iter().find(|v| v.variant == label)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Text table, one row per variant. `paper_units` scales NLL and ECE by 100.
    pub fn table(&self, paper_units: bool) -> String {
        let s = if paper_units { 100.0 } else { 1.0 };
        let cell = |m: Option<MeanSe>, s: f64| match m.map(|m| m.scaled(s)) {
            None => "n/a".to_string(),
            Some(MeanSe { mean, se: Some(se) }) => format!("{mean:.4} ± {se:.4}"),
            Some(MeanSe { mean, se: None }) => format!("{mean:.4}"),
        };
        let with_mcc = self.variants.iter().any(|v| v.mcc.is_some());
        let width = self
            .variants
            .iter()
            .map(|v| v.variant.len())
            .max()
            .unwrap_or(7)
            .max(7);
        let mut out = String::new();
        let _ = write!(
            out,
            "{:<width$}  {:>19}  {:>19}  {:>19}",
            "variant", "accuracy", "loss", "ece"
        );
        if with_mcc {
            let _ = write!(out, "  {:>19}", "mcc");
        }
        let _ = writeln!(out, "  failed");
        for v in &self.variants {
            let _ = write!(
                out,
                "{:<width$}  {:>19}  {:>19}  {:>19}",
                v.variant,
                cell(v.accuracy, 1.0),
                cell(v.nll, s),
                cell(v.ece, s)
            );
            if with_mcc {
                let _ = write!(out, "  {:>19}", cell(v.mcc, 1.0));
            }
            let _ = writeln!(out, "  {}/{}", v.failed, v.cells.len());
        }
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(out, "seeds: {}", seeds.join(","));
        out
    }
}

/// Display label: the variant name, plus padding choices for token-level mixing.
pub fn variant_label(m: &MixupConfig, n_layers: usize) -> String {
    let mut name = m.variant_name();
    if m.mixes_tokens(n_layers)
        && (m.padding != PaddingStrategy::Pair || m.pad_token != PadToken::Sep)
    {
        name = format!("{name}/{}-{}", m.padding, m.pad_token);
    }
    if m.mode != MixMode::None && m.start_fraction > 0.0 {
        name = format!("{name}@{}", m.start_fraction);
    }
    name
}

/// One trained cell; `Err` holds the failure diagnostic.
pub struct CellRun {
    pub variant: String,
    pub seed: u64,
    pub outcome: std::result::Result<TrainedRun, String>,
}

pub struct Experiment {
    pub summary: ExperimentSummary,
    pub runs: Vec<CellRun>,
}

/// Trains every (variant, seed) pair independently and aggregates best-epoch test metrics.
pub fn run_experiment(
    config: &TrainConfig,
    seeds: &[u64],
    variants: &[MixupConfig],
) -> Result<Experiment> {
    if seeds.is_empty() {
        return Err(Error::Contract("experiment needs at least one seed".into()));
    }
    if variants.is_empty() {
        return Err(Error::Contract(
            "experiment needs at least one variant".into(),
        ));
    }
    let task = resolve_task(config)?;
    let cells: Vec<(usize, u64)> = (0..variants.len())
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let runs: Vec<CellRun> = cells
        .par_iter()
        .map(|&(v, seed)| {
            let mut cfg = config.clone();
            cfg.seed = seed;
            cfg.mixup = variants[v].clone();
            let outcome = prepare_data(&cfg, &task)
                .and_then(|data| train_on(&cfg, data))
                .map_err(|e| e.to_string());
            CellRun {
                variant: variant_label(&variants[v], config.n_layers),
                seed,
                outcome,
            }
        })
        .collect();

    let summaries = variants
        .iter()
        .enumerate()
        .map(|(v, mixup)| {
            let cells: Vec<CellOutcome> = runs[v * seeds.len()..(v + 1) * seeds.len()]
                .iter()
                .map(|c| match &c.outcome {
                    Ok(t) => {
                        let r = &t.result;
                        CellOutcome {
                            seed: c.seed,
                            best_epoch: Some(r.best_epoch),
                            accuracy: Some(r.best.accuracy),
                            nll: Some(r.best.nll),
                            ece: Some(r.best.ece),
                            mcc: r.best.mcc,
                            error: None,
                        }
                    }
                    Err(e) => CellOutcome {
                        seed: c.seed,
                        best_epoch: None,
                        accuracy: None,
                        nll: None,
                        ece: None,
                        mcc: None,
                        error: Some(e.clone()),
                    },
                })
                .collect();
            let col = |f: fn(&CellOutcome) -> Option<f64>| {
                MeanSe::of(&cells.iter().filter_map(f).collect::<Vec<_>>())
            };
            VariantSummary {
                variant: variant_label(mixup, config.n_layers),
                mixup: mixup.clone(),
                accuracy: col(|c| c.accuracy),
                nll: col(|c| c.nll),
                ece: col(|c| c.ece),
                mcc: col(|c| c.mcc),
                failed: cells.iter().filter(|c| c.error.is_some()).count(),
                cells,
            }
        })
        .collect();
    Ok(Experiment {
        summary: ExperimentSummary {
            seeds: seeds.to_vec(),
            variants: summaries,
        },
        runs,
    })
}

/// The pad-study grid: input MixUp under each padding strategy and pad token.
pub fn pad_study_variants(alpha: f64) -> Vec<MixupConfig> {
    let mut out = Vec::new();
    for padding in [PaddingStrategy::Pair, PaddingStrategy::Max] {
        for pad_token in [PadToken::Sep, PadToken::Pad, PadToken::Unused] {
            out.push(MixupConfig {
                padding,
                pad_token,
                ..MixupConfig::input(alpha)
            });
        }
    }
    out
}
