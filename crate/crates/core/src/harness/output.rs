use std::path::Path;

use serde::Serialize;

use super::curves::emit_curves;
use super::train::{RunResult, TrainedRun};
use crate::error::{Error, Result};

#[derive(Serialize)]
struct RunFile<'a> {
    format: &'static str,
    version: u32,
    #[serde(flatten)]
    run: &'a RunResult,
}

pub fn run_json(run: &RunResult) -> Result<String> {
    serde_json::to_string_pretty(&RunFile {
        format: "mixup-run",
        version: 1,
        run,
    })
    .map(|s| s + "\n")
    .map_err(|e| Error::Parse(e.to_string()))
}

/// Writes `curve.tsv`, `reliability.json`, `run.json`, `vocab.txt` and,
/// when asked, `checkpoint.json` (the best-epoch model) into `dir`.
pub fn write_run(dir: &Path, run: &TrainedRun, checkpoint: bool) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    emit_curves(&run.result, &dir.join("curve.tsv"))?;
    run.result.best.save(&dir.join("reliability.json"))?;
    let p = dir.join("run.json");
    std::fs::write(&p, run_json(&run.result)?).map_err(|e| Error::io(&p, e))?;
    run.vocab.save(&dir.join("vocab.txt"))?;
    if checkpoint {
        run.model.save(&dir.join("checkpoint.json"))?;
    }
    Ok(())
}
