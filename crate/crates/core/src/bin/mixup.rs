use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mixup_core::calibration::CalibrationReport;
use mixup_core::data::{
    bow_probe_accuracy, synth_task_generate, Dataset, Split, SynthSpec, TaskData, TaskKind, Vocab,
};
use mixup_core::encoder::Encoder;
use mixup_core::harness::gradcheck::GradcheckCase;
use mixup_core::harness::train::predict;
use mixup_core::harness::{
    pad_study_variants, run_experiment, train, write_run, TrainConfig, DEFAULT_SEEDS,
};
use mixup_core::mixup::{MixMode, MixupConfig};
use mixup_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "mixup",
    version,
    about = "MixUp training and calibration toolkit for a small transformer encoder"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run and write its curve, reliability report, metadata and checkpoint.
    Train(Shared),
    /// Evaluate a checkpoint on a dataset split.
    Evaluate(EvaluateArgs),
    /// Train every (variant, seed) cell and print mean ± standard error per variant.
    Experiment(ExperimentArgs),
    /// Write a synthetic task directory.
    GenData(GenDataArgs),
    /// Finite-difference check of the full encoder and MixUp loss.
    Gradcheck(GradcheckArgs),
    /// Compare padding strategies and pad tokens for input MixUp.
    PadStudy(Shared),
}

#[derive(Args, Clone)]
struct Shared {
    /// Flat `key = value` file using TrainConfig field names.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated seeds for experiments.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    mixup: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Eligible layers, `0-5` or `0,2,5`.
    #[arg(long)]
    layers: Option<String>,
    #[arg(long)]
    padding: Option<String>,
    #[arg(long)]
    pad_token: Option<String>,
    /// `full` or a number of training examples.
    #[arg(long)]
    train_size: Option<String>,
    #[arg(long)]
    start_fraction: Option<f64>,
    /// Task: `content`, `syntax`, or a task directory.
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Scale loss and ECE by 100 in printed tables.
    #[arg(long)]
    paper_units: bool,
    /// Also write best-epoch checkpoints for experiment cells.
    #[arg(long)]
    checkpoints: bool,
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(flatten)]
    shared: Shared,
    /// Comma-separated variants among none, cls, input, manifold.
    #[arg(long, value_delimiter = ',', default_value = "none,cls,input,manifold")]
    variants: Vec<String>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Task directory holding the split files.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 64)]
    max_seq_len: usize,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value = "content")]
    task: String,
    #[arg(long, default_value_t = 1000)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    instances: u64,
    #[arg(long, default_value = "cls")]
    mixup: String,
    #[arg(long, default_value_t = 1e-5)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

fn config_from(s: &Shared) -> Result<TrainConfig> {
    let mut c = TrainConfig::default();
    if let Some(p) = &s.config {
        c.apply_file(p)?;
    }
    let pairs = [
        ("task", s.task.clone()),
        ("seed", s.seed.map(|v| v.to_string())),
        ("mixup", s.mixup.clone()),
        ("alpha", s.alpha.map(|v| v.to_string())),
        ("layers", s.layers.clone()),
        ("padding", s.padding.clone()),
        ("pad_token", s.pad_token.clone()),
        ("train_size", s.train_size.clone()),
        ("start_fraction", s.start_fraction.map(|v| v.to_string())),
        ("epochs", s.epochs.map(|v| v.to_string())),
    ];
    for (k, v) in pairs {
        if let Some(v) = v {
            c.set(k, &v)?;
        }
    }
    for kv in &s.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        c.set(k, v)?;
    }
    c.validate()?;
    Ok(c)
}

fn seeds_from(s: &Shared, c: &TrainConfig) -> Vec<u64> {
    match (&s.seeds, s.seed) {
        (Some(v), _) => v.clone(),
        (None, Some(_)) => vec![c.seed],
        (None, None) => DEFAULT_SEEDS.to_vec(),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn variant(name: &str, base: &TrainConfig) -> Result<MixupConfig> {
    let mode: MixMode = name.parse()?;
    let mut m = base.mixup.clone();
    m.mode = mode;
    if mode == MixMode::Manifold && m.layer_set.is_empty() {
        m.layer_set = (0..=base.n_layers + 1)
            .map(mixup_core::encoder::LayerIndex)
            .collect();
    }
    Ok(m)
}

fn experiment(shared: &Shared, variants: Vec<MixupConfig>) -> Result<()> {
    let config = config_from(shared)?;
    let seeds = seeds_from(shared, &config);
    let exp = run_experiment(&config, &seeds, &variants)?;
    mkdir(&shared.out)?;
    for cell in &exp.runs {
        let dir = shared
            .out
            .join(cell.variant.replace(['/', '[', ']', ','], "_"))
            .join(format!("seed{}", cell.seed));
        match &cell.outcome {
            Ok(run) => write_run(&dir, run, shared.checkpoints)?,
            Err(e) => eprintln!("warning: {} seed {} failed: {e}", cell.variant, cell.seed),
        }
    }
    let table = exp.summary.table(shared.paper_units);
    write_text(&shared.out.join("summary.txt"), &table)?;
    write_text(
        &shared.out.join("summary.json"),
        &(exp.summary.to_json()? + "\n"),
    )?;
    print!("{table}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(s) => {
            let config = config_from(&s)?;
            let run = train(&config)?;
            write_run(&s.out, &run, true)?;
            let b = run.result.best_metrics();
            let scale = if s.paper_units { 100.0 } else { 1.0 };
            println!(
                "{} seed {}: best epoch {} accuracy {:.4} loss {:.4} ece {:.4}",
                run.result.variant,
                run.result.seed,
                run.result.best_epoch + 1,
                b.test_acc,
                b.test_nll * scale,
                b.test_ece * scale
            );
            Ok(())
        }
        Command::Evaluate(a) => {
            let model = Encoder::load(&a.checkpoint)?;
            let vocab = Vocab::load(&a.vocab)?;
            let task = TaskData::load_dir(&a.data)?;
            let split: Split = a.split.parse()?;
            let ds: &Dataset = match split {
                Split::Train => &task.train,
                Split::Dev => task.dev.as_ref().ok_or_else(|| {
                    Error::Contract(format!("{} has no dev split", a.data.display()))
                })?,
                Split::Test => &task.test,
            };
            let data = ds.encode(&vocab, a.max_seq_len.min(model.config().max_seq_len));
            let k = model.config().n_classes;
            let (records, _) = predict(&model, &data, k, 64)?;
            let report = CalibrationReport::from_records(
                &records,
                mixup_core::calibration::DEFAULT_BINS,
                true,
            )?;
            match a.out {
                Some(p) => report.save(&p)?,
                None => println!("{}", report.to_json()?),
            }
            Ok(())
        }
        Command::Experiment(a) => {
            let base = config_from(&a.shared)?;
            let variants = a
                .variants
                .iter()
                .map(|v| variant(v, &base))
                .collect::<Result<Vec<_>>>()?;
            experiment(&a.shared, variants)
        }
        Command::PadStudy(s) => {
            let base = config_from(&s)?;
            let variants = pad_study_variants(base.mixup.alpha)
                .into_iter()
                .map(|v| MixupConfig {
                    start_fraction: base.mixup.start_fraction,
                    ..v
                })
                .collect();
            experiment(&s, variants)
        }
        Command::GenData(a) => {
            let kind: TaskKind = a.task.parse()?;
            let task = synth_task_generate(kind, a.size, &SynthSpec::default(), a.data_seed)?;
            task.save_dir(&a.out)?;
            println!(
                "wrote {} train, {} dev, {} test examples to {}",
                task.train.len(),
                task.dev.as_ref().map_or(0, Dataset::len),
                task.test.len(),
                a.out.display()
            );
            if let Some(dev) = &task.dev {
                println!(
                    "bag-of-words probe dev accuracy {:.4}",
                    bow_probe_accuracy(&task.train, dev)
                );
            }
            Ok(())
        }
        Command::Gradcheck(a) => {
            let mode: MixMode = a.mixup.parse()?;
            let mixup = match mode {
                MixMode::None => MixupConfig::none(),
                MixMode::Cls => MixupConfig::cls(1.0),
                MixMode::Input => MixupConfig::input(1.0),
                MixMode::Manifold => MixupConfig::manifold(1.0, 0..=3),
            };
            let mut worst: f64 = 0.0;
            for seed in 0..a.instances {
                let report =
                    GradcheckCase::random(seed, mixup.clone())?.check(a.step, a.tol, None)?;
                worst = worst.max(report.max_error);
                println!(
                    "instance {seed}: max relative error {:.3e} over {} coordinates: {}",
                    report.max_error,
                    report.checked,
                    if report.passed { "ok" } else { "FAIL" }
                );
            }
            if worst >= a.tol {
                return Err(Error::Numeric(format!(
                    "gradient check failed: max error {worst:.3e} >= {}",
                    a.tol
                )));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
