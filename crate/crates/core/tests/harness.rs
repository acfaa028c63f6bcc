use std::path::Path;
use std::process::Command;

use mixup_core::encoder::Phase;
use mixup_core::harness::curves::{format_curves, parse_curves, CURVE_COLUMNS};
use mixup_core::harness::train::{argmax_first, prepare_data, resolve_task, train_on};
use mixup_core::harness::{
    evaluate, load_curves, run_experiment, train, write_run, MeanSe, TrainConfig, TrainSize,
};
use mixup_core::mixup::MixupConfig;
use mixup_core::Error;
use proptest::prelude::*;

/// Small but complete: 2 layers, width 16, 16 training examples.
fn quick(epochs: usize) -> TrainConfig {
    let mut c = TrainConfig::default();
    for (k, v) in [
        ("task_size", "200"),
        ("n_layers", "2"),
        ("d_model", "16"),
        ("n_heads", "2"),
        ("d_ff", "32"),
        ("batch_size", "8"),
    ] {
        c.set(k, v).unwrap();
    }
    c.train_size = TrainSize::N(16);
    c.epochs = epochs;
    c
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn repeated_runs_are_byte_identical() {
    let mut c = quick(3);
    c.mixup = MixupConfig::manifold(0.5, 0..=3);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        write_run(d.path(), &train(&c).unwrap(), true).unwrap();
    }
    for f in ["curve.tsv", "reliability.json", "run.json", "vocab.txt", "checkpoint.json"] {
        assert_eq!(read(&dirs[0].path().join(f)), read(&dirs[1].path().join(f)), "{f}");
    }
}

#[test]
fn variants_at_equal_seed_are_paired() {
    let base = train(&quick(2)).unwrap().result;
    for m in [MixupConfig::cls(1.0), MixupConfig::input(0.4)] {
        let mut c = quick(2);
        c.mixup = m;
        let r = train(&c).unwrap().result;
        assert_eq!(r.init_hash, base.init_hash);
        assert_eq!(r.order_hash, base.order_hash);
        assert_ne!(r.final_hash, base.final_hash);
    }
    let mut other = quick(2);
    other.seed = 2;
    let r = train(&other).unwrap().result;
    assert_ne!(r.init_hash, base.init_hash);
}

#[test]
fn cls_at_lambda_one_matches_baseline_without_dropout() {
    let mut c = quick(3);
    c.dropout_rate = 0.0;
    let base = train(&c).unwrap().result;
    c.mixup = MixupConfig {
        fixed_lambda: Some(1.0),
        ..MixupConfig::cls(1.0)
    };
    let mixed = train(&c).unwrap().result;
    assert_eq!(base.epochs, mixed.epochs);
    assert_eq!(base.final_hash, mixed.final_hash);
}

#[test]
fn deferred_mixup_starts_late() {
    let base = train(&quick(4)).unwrap().result;
    let mut c = quick(4);
    c.mixup = MixupConfig {
        start_fraction: 0.5,
        ..MixupConfig::input(1.0)
    };
    let r = train(&c).unwrap().result;
    assert_eq!(r.epochs[..2], base.epochs[..2]);
    assert_ne!(r.epochs[2].train_loss, base.epochs[2].train_loss);
}

#[test]
fn evaluation_is_pure_and_matches_argmax_scan() {
    let c = quick(2);
    let run = train(&c).unwrap();
    let task = resolve_task(&c).unwrap();
    let data = prepare_data(&c, &task).unwrap();
    let before = run.model.param_hash();
    let a = evaluate(&run.model, &data.test, 2).unwrap();
    let b = evaluate(&run.model, &data.test, 2).unwrap();
    assert_eq!(a, b);
    assert_eq!(run.model.param_hash(), before);
    assert_eq!(a.n, data.test.len());

    // one example at a time, no padding anywhere
    let bound = run.model.bind_frozen();
    let correct = data
        .test
        .iter()
        .filter(|e| {
            let mask = mixup_core::encoder::AttentionMask::all(1, e.ids.len());
            let l = bound.logits(&e.ids, &mask, &mut Phase::Eval).unwrap();
            let pred = usize::from(l.values()[1] > l.values()[0]);
            pred == e.label
        })
        .count();
    assert_eq!(a.accuracy, correct as f64 / data.test.len() as f64);
    assert!(matches!(evaluate(&run.model, &[], 2), Err(Error::Contract(_))));
}

#[test]
fn best_epoch_and_curves() {
    let c = quick(4);
    let run = train(&c).unwrap();
    let r = &run.result;
    assert_eq!(r.epochs.len(), 4);
    let sel: Vec<f64> = r.epochs.iter().map(|e| e.selection).collect();
    assert_eq!(r.best_epoch, argmax_first(&sel));
    assert!(sel.iter().all(|&s| s <= sel[r.best_epoch]));
    assert_eq!(r.best.accuracy, r.epochs[r.best_epoch].test_acc);
    // the kept model is the best-epoch model
    let task = resolve_task(&c).unwrap();
    let data = prepare_data(&c, &task).unwrap();
    assert_eq!(evaluate(&run.model, &data.test, 2).unwrap().accuracy, r.best.accuracy);

    let dir = tempfile::tempdir().unwrap();
    write_run(dir.path(), &run, false).unwrap();
    let text = std::fs::read_to_string(dir.path().join("curve.tsv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), CURVE_COLUMNS.join("\t"));
    let rows = load_curves(&dir.path().join("curve.tsv")).unwrap();
    assert_eq!(rows.len(), 4);
    for (row, e) in rows.iter().zip(&r.epochs) {
        assert_eq!(row.train_loss.to_bits(), e.train_loss.to_bits());
        assert_eq!(row.test_loss.to_bits(), e.test_loss.to_bits());
        assert_eq!(row.test_ece.to_bits(), e.test_ece.to_bits());
        assert_eq!(row.test_nll.to_bits(), e.test_nll.to_bits());
    }
    assert_eq!(format_curves(&rows), text);
    assert!(!dir.path().join("checkpoint.json").exists());
}

#[test]
fn mcc_selection_adds_curve_column() {
    let mut c = quick(2);
    c.set("selection_metric", "mcc").unwrap();
    let r = train(&c).unwrap().result;
    assert!(r.best.mcc.is_some());
    let rows = parse_curves(&format_curves(&mixup_core::harness::curves::curve_rows(&r))).unwrap();
    assert!(rows.iter().all(|row| row.mcc.is_some()));
}

#[test]
fn experiment_aggregates_and_marks_failures() {
    let c = quick(2);
    let bad = MixupConfig {
        fixed_lambda: Some(2.0),
        ..MixupConfig::cls(1.0)
    };
    let exp = run_experiment(&c, &[1, 2, 3], &[MixupConfig::none(), bad]).unwrap();
    let s = &exp.summary;
    let ok = &s.variants[0];
    let acc: Vec<f64> = ok.cells.iter().map(|c| c.accuracy.unwrap()).collect();
    let mean = acc.iter().sum::<f64>() / 3.0;
    assert!((ok.accuracy.unwrap().mean - mean).abs() < 1e-12);
    let sd = (acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
    assert!((ok.accuracy.unwrap().se.unwrap() - sd / 3f64.sqrt()).abs() < 1e-12);
    let nll: Vec<f64> = ok.cells.iter().map(|c| c.nll.unwrap()).collect();
    assert!((ok.nll.unwrap().mean - nll.iter().sum::<f64>() / 3.0).abs() < 1e-12);
    // cells match standalone runs at the same seed
    let mut single = c.clone();
    single.seed = 2;
    assert_eq!(train(&single).unwrap().result.best.accuracy, acc[1]);

    let failed = &s.variants[1];
    assert_eq!(failed.failed, 3);
    assert!(failed.accuracy.is_none());
    assert!(failed.cells.iter().all(|c| c.error.is_some()));
    let table = s.table(true);
    assert!(table.contains("3/3"));

    let one = run_experiment(&c, &[4], &[MixupConfig::none()]).unwrap();
    assert_eq!(one.summary.variants[0].accuracy.unwrap().se, None);
    assert!(run_experiment(&c, &[], &[MixupConfig::none()]).is_err());
}

#[test]
fn mean_se_paper_units_only_scale_loss_and_ece() {
    let m = MeanSe::of(&[0.5, 0.7]).unwrap();
    assert!((m.mean - 0.6).abs() < 1e-15);
    let exp = run_experiment(&quick(1), &[1, 2], &[MixupConfig::none()]).unwrap();
    let v = &exp.summary.variants[0];
    let raw = exp.summary.table(false);
    let scaled = exp.summary.table(true);
    let acc = format!("{:.4}", v.accuracy.unwrap().mean);
    assert!(raw.contains(&acc) && scaled.contains(&acc));
    assert!(scaled.contains(&format!("{:.4}", v.nll.unwrap().mean * 100.0)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]
    #[test]
    fn best_epoch_invariant_to_positive_rescaling(v in prop::collection::vec(0.0f64..1.0, 1..30), s in 1e-3f64..1e3) {
        let scaled: Vec<f64> = v.iter().map(|x| x * s).collect();
        prop_assert_eq!(argmax_first(&v), argmax_first(&scaled));
    }
}

// ---- command line ---------------------------------------------------------

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_mixup")).args(args).output().unwrap()
}

#[test]
fn cli_train_evaluate_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "# quick\ntask_size = 200\nn_layers = 2\nd_model = 16\nn_heads = 2\nd_ff = 32\nepochs = 2\ntrain_size = 16\n",
    )
    .unwrap();
    let data = dir.path().join("data");
    let out = cli(&["gen-data", "--task", "content", "--size", "200", "--out", data.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for o in [&a, &b] {
        let out = cli(&[
            "train", "--config", cfg.to_str().unwrap(), "--mixup", "input", "--seed", "3",
            "--out", o.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["curve.tsv", "reliability.json", "run.json", "checkpoint.json", "vocab.txt"] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f}");
    }

    let report = dir.path().join("eval.json");
    let out = cli(&[
        "evaluate",
        "--checkpoint", a.join("checkpoint.json").to_str().unwrap(),
        "--vocab", a.join("vocab.txt").to_str().unwrap(),
        "--data", data.to_str().unwrap(),
        "--out", report.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = mixup_core::calibration::CalibrationReport::from_json(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r.n, 30);

    let out = cli(&["train", "--config", cfg.to_str().unwrap(), "--alpha", "-1", "--mixup", "cls"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    let out = cli(&["train", "--config", dir.path().join("missing.cfg").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.cfg"));
}

#[test]
fn cli_gradcheck_passes() {
    let out = cli(&["gradcheck", "--instances", "2", "--mixup", "manifold"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn train_on_reports_invalid_config() {
    let mut c = quick(1);
    c.learning_rate = -1.0;
    let task = resolve_task(&quick(1)).unwrap();
    let data = prepare_data(&quick(1), &task).unwrap();
    assert!(matches!(train_on(&c, data), Err(Error::Validation(_))));
}
