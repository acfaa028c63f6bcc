use mixup_core::calibration::{
    bin_predictions, ece, mcc, nll, CalibrationReport, PredictionRecord, DEFAULT_BINS,
};
use mixup_core::tensor::Rng;
use proptest::prelude::*;

/// Straight from the definition: scan bins ((m-1)/M, m/M], m = 1..M, with a
/// zero confidence counted in the first bin.
fn brute_force_ece(confs: &[f64], correct: &[bool], m: usize) -> f64 {
    let n = confs.len() as f64;
    let mut total = 0.0;
    for bin in 1..=m {
        let lo = (bin - 1) as f64 / m as f64;
        let hi = bin as f64 / m as f64;
        let members: Vec<usize> = (0..confs.len())
            .filter(|&i| (confs[i] > lo && confs[i] <= hi) || (bin == 1 && confs[i] == 0.0))
            .collect();
        if members.is_empty() {
            continue;
        }
        let acc = members.iter().filter(|&&i| correct[i]).count() as f64 / members.len() as f64;
        let conf = members.iter().map(|&i| confs[i]).sum::<f64>() / members.len() as f64;
        total += members.len() as f64 / n * (acc - conf).abs();
    }
    total
}

fn random_records(rng: &mut Rng, n: usize, k: usize) -> Vec<PredictionRecord> {
    (0..n)
        .map(|_| {
            // occasionally land exactly on a bin edge
            let probs = if rng.below(10) == 0 {
                let edge = (rng.below(DEFAULT_BINS) + 1) as f64 / DEFAULT_BINS as f64;
                let edge = edge.max(1.0 / k as f64);
                let mut p = vec![(1.0 - edge) / (k - 1) as f64; k];
                p[rng.below(k)] = edge;
                let s: f64 = p.iter().sum();
                p.iter().map(|v| v / s).collect()
            } else {
                let raw: Vec<f64> = (0..k).map(|_| rng.uniform().powi(3)).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|v| v / s).collect()
            };
            PredictionRecord::from_probs(probs, rng.below(k)).unwrap()
        })
        .collect()
}

#[test]
fn ece_matches_brute_force() {
    let mut rng = Rng::new(2024);
    for trial in 0..1000 {
        let n = 1 + rng.below(500);
        let k = 2 + rng.below(3);
        let records = random_records(&mut rng, n, k);
        let bins = bin_predictions(&records, DEFAULT_BINS).unwrap();
        let got = ece(&bins, n).unwrap();
        let confs: Vec<f64> = records.iter().map(|r| r.confidence).collect();
        let correct: Vec<bool> = records.iter().map(|r| r.correct()).collect();
        let want = brute_force_ece(&confs, &correct, DEFAULT_BINS);
        assert!((got - want).abs() < 1e-12, "trial {trial}: {got} vs {want}");
    }
}

#[test]
fn hand_case() {
    let records = vec![
        PredictionRecord::from_probs(vec![0.8, 0.2], 0).unwrap(),
        PredictionRecord::from_probs(vec![0.8, 0.2], 1).unwrap(),
    ];
    let r = CalibrationReport::from_records(&records, DEFAULT_BINS, false).unwrap();
    assert!((r.ece - 0.3).abs() < 1e-15, "{}", r.ece);
    assert_eq!(r.accuracy, 0.5);
    let filled: Vec<_> = r.bins.iter().filter(|b| b.count > 0).collect();
    assert_eq!(filled.len(), 1);
    assert_eq!(filled[0].count, 2);
}

#[test]
fn calibrated_generator_has_small_ece() {
    let mut rng = Rng::new(77);
    let records: Vec<PredictionRecord> = (0..100_000)
        .map(|_| {
            let c = 0.5 + 0.5 * rng.uniform();
            let label = usize::from(rng.uniform() >= c);
            PredictionRecord::from_probs(vec![c, 1.0 - c], label).unwrap()
        })
        .collect();
    let r = CalibrationReport::from_records(&records, DEFAULT_BINS, false).unwrap();
    assert!(r.ece < 0.02, "{}", r.ece);
}

#[test]
fn overconfident_predictor_is_penalised() {
    let mut rng = Rng::new(5);
    let records: Vec<PredictionRecord> = (0..20_000)
        .map(|_| {
            let label = usize::from(rng.uniform() >= 0.6);
            PredictionRecord::from_probs(vec![0.99, 0.01], label).unwrap()
        })
        .collect();
    let r = CalibrationReport::from_records(&records, DEFAULT_BINS, false).unwrap();
    assert!((r.ece - 0.39).abs() < 0.02);
}

#[test]
fn nll_matches_mean_log_loss_and_counts_floor() {
    let records = vec![
        PredictionRecord::from_probs(vec![0.25, 0.75], 1).unwrap(),
        PredictionRecord::from_probs(vec![1.0, 0.0], 1).unwrap(),
    ];
    let (v, clamped) = nll(&records).unwrap();
    assert_eq!(clamped, 1);
    let want = (-(0.75f64).ln() - (1e-12f64).ln()) / 2.0;
    assert!((v - want).abs() < 1e-12);
}

fn binary_mcc(pred: &[usize], label: &[usize]) -> f64 {
    let (mut tp, mut tn, mut fp, mut fn_) = (0.0, 0.0, 0.0, 0.0);
    for (&p, &l) in pred.iter().zip(label) {
        match (p, l) {
            (1, 1) => tp += 1.0,
            (0, 0) => tn += 1.0,
            (1, 0) => fp += 1.0,
            _ => fn_ += 1.0,
        }
    }
    let d = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)) as f64;
    if d == 0.0 {
        0.0
    } else {
        (tp * tn - fp * fn_) / d.sqrt()
    }
}

#[test]
fn report_json_round_trip() {
    let mut rng = Rng::new(3);
    let records = random_records(&mut rng, 40, 3);
    let r = CalibrationReport::from_records(&records, DEFAULT_BINS, true).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("reliability.json");
    r.save(&p).unwrap();
    let back = CalibrationReport::from_json(&std::fs::read_to_string(&p).unwrap()).unwrap();
    assert_eq!(back, r);
    assert_eq!(r.bins.len(), 15);
    assert!(r.bins.iter().filter(|b| b.count == 0).all(|b| b.accuracy.is_none()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn ece_is_permutation_invariant_and_bounded(seed in any::<u64>(), n in 1usize..200, k in 2usize..5) {
        let mut rng = Rng::new(seed);
        let records = random_records(&mut rng, n, k);
        let a = CalibrationReport::from_records(&records, DEFAULT_BINS, true).unwrap();
        let mut shuffled = records.clone();
        rng.shuffle(&mut shuffled);
        let b = CalibrationReport::from_records(&shuffled, DEFAULT_BINS, true).unwrap();
        prop_assert!((a.ece - b.ece).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a.ece));
        prop_assert!(a.nll >= 0.0);
        prop_assert_eq!(a.bins.iter().map(|b| b.count).sum::<usize>(), n);
    }

    #[test]
    fn mcc_binary_matches_formula(pairs in prop::collection::vec((0usize..2, 0usize..2), 1..100)) {
        let (p, l): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let got = mcc(&p, &l);
        prop_assert!((got - binary_mcc(&p, &l)).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&got));
    }
}

#[test]
fn mcc_extremes() {
    assert_eq!(mcc(&[0, 1, 1, 0], &[0, 1, 1, 0]), 1.0);
    assert_eq!(mcc(&[1, 0, 0, 1], &[0, 1, 1, 0]), -1.0);
    assert_eq!(mcc(&[1, 1, 1], &[0, 1, 0]), 0.0);
}
