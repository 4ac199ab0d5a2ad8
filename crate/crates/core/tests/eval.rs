use std::collections::BTreeSet;

use drr::eval::{
    auroc, balanced_accuracy, bin_aurocs, default_k_grid, desk_lambda_grid, lda_fit, make_folds, make_stratified_folds,
    model_count, nested_cv, full_lambda_grid, patient_aggregate, pick_peaks_auroc, select_k, select_lambda,
    select_log_mean, CvConfig, EvalError, Method, PeakRanking,
};
use drr::synth::{generate_cohort, Cohort, SynthConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---- hand oracles ----

/// ½(TP/(TP+FN) + TN/(TN+FP)), counted the slow way.
fn balanced_accuracy_oracle(pred: &[usize], truth: &[usize]) -> f64 {
    let (mut tp, mut fn_, mut tn, mut fp) = (0.0, 0.0, 0.0, 0.0);
    for (&p, &y) in pred.iter().zip(truth) {
        match (y, p) {
            (1, 1) => tp += 1.0,
            (1, _) => fn_ += 1.0,
            (_, 0) => tn += 1.0,
            _ => fp += 1.0,
        }
    }
    0.5 * (tp / (tp + fn_) + tn / (tn + fp))
}

/// Concordant pairs over all positive/negative pairs, ties ½.
fn auroc_oracle(values: &[f64], labels: &[usize]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &a) in values.iter().enumerate() {
        for (j, &b) in values.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                wins += if a > b {
                    1.0
                } else if a == b {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

fn vote_oracle(pred: &[usize], ids: &[&str], patient: &str) -> usize {
    let zeros = pred.iter().zip(ids).filter(|(&p, &id)| id == patient && p == 0).count();
    let ones = pred.iter().zip(ids).filter(|(&p, &id)| id == patient && p == 1).count();
    usize::from(ones > zeros)
}

fn random_binary_labels(r: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut y: Vec<usize> = (0..n).map(|_| r.random_range(0..2)).collect();
    y[0] = 0;
    y[1] = 1;
    y
}

#[test]
fn balanced_accuracy_examples() {
    assert_eq!(balanced_accuracy(&[0, 1, 1, 0], &[0, 1, 1, 0]).unwrap(), 1.0);
    assert_eq!(balanced_accuracy(&[1, 1, 1, 1], &[0, 1, 1, 0]).unwrap(), 0.5);
    // TP=3 FN=1 TN=2 FP=2
    let truth = [1, 1, 1, 1, 0, 0, 0, 0];
    let pred = [1, 1, 1, 0, 0, 0, 1, 1];
    assert_eq!(balanced_accuracy(&pred, &truth).unwrap(), 0.625);
    assert!(matches!(balanced_accuracy(&[0, 1], &[1, 1]), Err(EvalError::SingleClass)));
    assert!(matches!(balanced_accuracy(&[0], &[1, 0]), Err(EvalError::Length(_))));
}

#[test]
fn balanced_accuracy_matches_oracle_on_random_instances() {
    let mut r = rng(1);
    for _ in 0..50 {
        let n = r.random_range(2..30);
        let truth = random_binary_labels(&mut r, n);
        let pred: Vec<usize> = (0..n).map(|_| r.random_range(0..2)).collect();
        let got = balanced_accuracy(&pred, &truth).unwrap();
        assert!((got - balanced_accuracy_oracle(&pred, &truth)).abs() < 1e-12);
    }
}

#[test]
fn auroc_examples() {
    assert_eq!(auroc(&[1.0, 2.0, 3.0, 4.0], &[0, 0, 1, 1]).unwrap(), 1.0);
    assert_eq!(auroc(&[1.0, 2.0, 3.0, 4.0], &[0, 1, 0, 1]).unwrap(), 0.75);
    assert_eq!(auroc(&[7.0; 6], &[0, 1, 0, 1, 1, 0]).unwrap(), 0.5);
    assert!(matches!(auroc(&[1.0, 2.0], &[1, 1]), Err(EvalError::SingleClass)));
}

#[test]
fn auroc_matches_pair_counting_on_random_instances() {
    let mut r = rng(2);
    for _ in 0..50 {
        let n = r.random_range(2..25);
        let labels = random_binary_labels(&mut r, n);
        // coarse values so that ties are common
        let values: Vec<f64> = (0..n).map(|_| r.random_range(0..6) as f64 * 0.5).collect();
        let got = auroc(&values, &labels).unwrap();
        assert!((got - auroc_oracle(&values, &labels)).abs() < 1e-12);
    }
}

#[test]
fn patient_vote_examples() {
    let votes = patient_aggregate(&[0, 0, 1, 1, 1, 0, 1], &["a", "a", "a", "b", "b", "c", "c"]);
    assert_eq!(
        votes,
        vec![("a".to_string(), 0), ("b".to_string(), 1), ("c".to_string(), 0)]
    );
}

#[test]
fn patient_vote_matches_oracle_on_random_instances() {
    let mut r = rng(3);
    let names = ["p0", "p1", "p2", "p3", "p4"];
    for _ in 0..50 {
        let n = r.random_range(1..30);
        let ids: Vec<&str> = (0..n).map(|_| names[r.random_range(0..names.len())]).collect();
        let pred: Vec<usize> = (0..n).map(|_| r.random_range(0..2)).collect();
        let votes = patient_aggregate(&pred, &ids);
        let distinct: BTreeSet<&str> = ids.iter().copied().collect();
        assert_eq!(votes.len(), distinct.len());
        for (id, label) in votes {
            assert_eq!(label, vote_oracle(&pred, &ids, &id), "patient {id}");
        }
    }
}

// ---- peak picking ----

#[test]
fn pick_peaks_examples() {
    let xs: Vec<Vec<f64>> = vec![
        vec![0.0, 5.0, 1.0],
        vec![1.0, 5.0, 0.0],
        vec![2.0, 9.0, 1.0],
        vec![3.0, 9.0, 0.0],
    ];
    let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
    let labels = [0, 0, 1, 1];
    assert_eq!(pick_peaks_auroc(&refs, &labels, 3, PeakRanking::TwoSided).unwrap().len(), 3);
    // bins 0 and 1 both separate perfectly; the tie goes to the lower index
    assert_eq!(pick_peaks_auroc(&refs, &labels, 1, PeakRanking::TwoSided).unwrap(), vec![0]);
}

#[test]
fn pick_peaks_matches_exhaustive_ranking() {
    let mut r = rng(4);
    for _ in 0..25 {
        let m = r.random_range(4..12);
        let labels = random_binary_labels(&mut r, m);
        let xs: Vec<Vec<f64>> = (0..m).map(|_| (0..5).map(|_| r.random_range(0..4) as f64).collect()).collect();
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let aucs = bin_aurocs(&refs, &labels).unwrap();
        for (b, &a) in aucs.iter().enumerate() {
            let col: Vec<f64> = xs.iter().map(|x| x[b]).collect();
            assert!((a - auroc_oracle(&col, &labels)).abs() < 1e-12);
        }
        for (ranking, key) in [
            (PeakRanking::TwoSided, (|a: f64| (a - 0.5).abs()) as fn(f64) -> f64),
            (PeakRanking::OneSided, |a: f64| a),
        ] {
            // sort all five by (score desc, index asc) and take three
            let mut order: Vec<usize> = (0..5).collect();
            order.sort_by(|&i, &j| key(aucs[j]).total_cmp(&key(aucs[i])).then(i.cmp(&j)));
            assert_eq!(pick_peaks_auroc(&refs, &labels, 3, ranking).unwrap(), order[..3].to_vec());
        }
    }
}

// ---- LDA ----

#[test]
fn one_dimensional_boundary_sits_halfway() {
    let features: Vec<Vec<f64>> = [-1.5, -1.0, -0.5, 0.5, 1.0, 1.5].iter().map(|&v| vec![v]).collect();
    let labels = [0, 0, 0, 1, 1, 1];
    let model = lda_fit(&features, &labels, 0.1).unwrap();
    assert_eq!(model.predict(&[-0.01]), 0);
    assert_eq!(model.predict(&[0.01]), 1);
    let s = model.scores(&[0.0]);
    assert!((s[0] - s[1]).abs() < 1e-12);
}

#[test]
fn swapping_labels_swaps_predictions() {
    let mut r = rng(5);
    let features: Vec<Vec<f64>> = (0..30).map(|_| vec![r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)]).collect();
    let labels: Vec<usize> = features.iter().map(|f| usize::from(f[0] + 0.3 * f[1] > 0.1)).collect();
    let swapped: Vec<usize> = labels.iter().map(|&y| 1 - y).collect();
    let a = lda_fit(&features, &labels, 0.1).unwrap();
    let b = lda_fit(&features, &swapped, 0.1).unwrap();
    for _ in 0..50 {
        let x = [r.random_range(-3.0..3.0), r.random_range(-3.0..3.0)];
        assert_eq!(a.predict(&x), 1 - b.predict(&x));
    }
}

/// Nearest class mean under the shrunk pooled covariance, with log priors,
/// using an explicit 2×2 inverse.
fn mahalanobis_oracle(features: &[Vec<f64>], labels: &[usize], gamma: f64, x: &[f64]) -> usize {
    let mut mean = [[0.0; 2]; 2];
    let mut count = [0.0; 2];
    for (f, &y) in features.iter().zip(labels) {
        count[y] += 1.0;
        mean[y][0] += f[0];
        mean[y][1] += f[1];
    }
    for y in 0..2 {
        mean[y][0] /= count[y];
        mean[y][1] /= count[y];
    }
    let mut s = [[0.0; 2]; 2];
    for (f, &y) in features.iter().zip(labels) {
        let d = [f[0] - mean[y][0], f[1] - mean[y][1]];
        for i in 0..2 {
            for j in 0..2 {
                s[i][j] += d[i] * d[j] / (features.len() as f64 - 2.0);
            }
        }
    }
    let t = (s[0][0] + s[1][1]) / 2.0;
    for i in 0..2 {
        for j in 0..2 {
            s[i][j] *= 1.0 - gamma;
        }
        s[i][i] += gamma * t;
    }
    let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
    let inv = [[s[1][1] / det, -s[0][1] / det], [-s[1][0] / det, s[0][0] / det]];
    let score = |y: usize| {
        let d = [x[0] - mean[y][0], x[1] - mean[y][1]];
        let q = d[0] * (inv[0][0] * d[0] + inv[0][1] * d[1]) + d[1] * (inv[1][0] * d[0] + inv[1][1] * d[1]);
        -0.5 * q + (count[y] / features.len() as f64).ln()
    };
    usize::from(score(1) > score(0))
}

#[test]
fn two_blobs_match_mahalanobis_oracle() {
    let mut r = rng(6);
    for trial in 0..20 {
        let n0 = r.random_range(8..20);
        let n1 = r.random_range(8..20);
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (y, n, c) in [(0, n0, [-3.0, 1.0]), (1, n1, [3.0, -1.0])] {
            for _ in 0..n {
                let u: f64 = r.random_range(-1.0..1.0);
                let v: f64 = r.random_range(-1.0..1.0);
                features.push(vec![c[0] + u + 0.5 * v, c[1] + v]);
                labels.push(y);
            }
        }
        let model = lda_fit(&features, &labels, 0.1).unwrap();
        let train_pred: Vec<usize> = features.iter().map(|f| model.predict(f)).collect();
        assert_eq!(train_pred, labels, "trial {trial}");
        for _ in 0..40 {
            let x = [r.random_range(-6.0..6.0), r.random_range(-4.0..4.0)];
            let s = model.scores(&x);
            // skip points on the boundary itself
            if (s[0] - s[1]).abs() > 1e-9 {
                assert_eq!(model.predict(&x), mahalanobis_oracle(&features, &labels, 0.1, &x));
            }
        }
    }
}

#[test]
fn degenerate_lda_inputs_are_errors() {
    let zeros = vec![vec![0.0, 0.0]; 4];
    assert!(matches!(lda_fit(&zeros, &[0, 0, 1, 1], 0.1), Err(EvalError::Singular)));
    assert!(lda_fit(&[vec![1.0], vec![2.0]], &[0, 0], 0.1).is_err());
}

// ---- folds ----

#[test]
fn fold_sizes_follow_round_robin() {
    let ten: Vec<u32> = (0..10).collect();
    let sizes: Vec<usize> = make_folds(&ten, 5, 1).unwrap().iter().map(Vec::len).collect();
    assert_eq!(sizes, vec![2; 5]);
    let thirteen: Vec<u32> = (0..13).collect();
    let folds = make_folds(&thirteen, 5, 1).unwrap();
    assert_eq!(folds.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 3, 2, 2]);
    let all: BTreeSet<u32> = folds.iter().flatten().copied().collect();
    assert_eq!(all.len(), 13);
    assert_eq!(make_folds(&thirteen, 5, 1).unwrap(), folds);
    assert_ne!(make_folds(&thirteen, 5, 2).unwrap(), folds);
    assert!(matches!(
        make_folds(&[1, 2], 5, 0),
        Err(EvalError::TooFewPatients { patients: 2, folds: 5 })
    ));
}

#[test]
fn stratified_folds_spread_each_class() {
    let a: Vec<String> = (0..7).map(|i| format!("a{i}")).collect();
    let b: Vec<String> = (0..8).map(|i| format!("b{i}")).collect();
    let folds = make_stratified_folds(&[a, b], 5, 3).unwrap();
    let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
    assert_eq!(sizes.iter().sum::<usize>(), 15);
    assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    for f in &folds {
        let a_count = f.iter().filter(|p| p.starts_with('a')).count();
        assert!((1..=2).contains(&a_count));
    }
}

// ---- selection ----

#[test]
fn lambda_selection_takes_the_next_step_up() {
    let grid = full_lambda_grid();
    assert_eq!(grid.len(), 7);
    assert!((grid[0] - 1e-5).abs() < 1e-18 && (grid[6] - 1e-2).abs() < 1e-15);
    // best at 10^-3 (index 4)
    let scores = [0.5, 0.6, 0.62, 0.7, 0.8, 0.7, 0.6];
    let chosen = select_lambda(&grid, &scores).unwrap();
    assert!((chosen - 10f64.powf(-2.5)).abs() < 1e-15);
    // best at the top stays there
    let rising = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7];
    assert_eq!(select_lambda(&grid, &rising).unwrap(), grid[6]);
    assert_eq!(select_lambda(&[0.3], &[0.9]).unwrap(), 0.3);
    // tie between indices 1 and 2 resolves to 2, then steps to 3
    assert_eq!(select_lambda(&[1.0, 2.0, 3.0, 4.0], &[0.1, 0.9, 0.9, 0.2]).unwrap(), 4.0);
}

#[test]
fn k_selection_takes_the_next_step_down() {
    let grid = default_k_grid();
    assert_eq!(grid.len(), 16);
    assert_eq!((grid[0], grid[15]), (5, 200));
    assert!(grid.windows(2).all(|w| w[0] < w[1]));
    let mut scores = vec![0.5; 16];
    scores[0] = 0.9;
    assert_eq!(select_k(&grid, &scores).unwrap(), grid[0]);
    scores[0] = 0.5;
    scores[3] = 0.9;
    assert_eq!(select_k(&grid, &scores).unwrap(), grid[2]);
    let rising: Vec<f64> = (0..16).map(|i| i as f64).collect();
    assert_eq!(select_k(&grid, &rising).unwrap(), grid[14]);
    // tie between indices 2 and 3 resolves to 2, then steps to 1
    assert_eq!(select_k(&[5, 10, 20, 40], &[0.1, 0.2, 0.9, 0.9]).unwrap(), 10);
}

#[test]
fn log_mean_selection() {
    let grid = [1e-4, 1e-3, 1e-2, 1e-1];
    let chosen = select_log_mean(&grid, &[0.5, 0.79, 0.8, 0.6], 0.02).unwrap();
    assert!((chosen - (1e-3f64 * 1e-2).sqrt()).abs() < 1e-15);
    assert_eq!(select_log_mean(&grid, &[0.5, 0.6, 0.8, 0.6], 0.0).unwrap(), 1e-2);
    assert!(select_log_mean(&[0.0, 1.0], &[0.1, 0.2], 0.1).is_err());
}

#[test]
fn selection_rejects_bad_grids() {
    assert!(select_lambda(&[], &[]).is_err());
    assert!(select_lambda(&[2.0, 1.0], &[0.1, 0.2]).is_err());
    assert!(select_lambda(&[1.0, 2.0], &[0.1]).is_err());
}

#[test]
fn desk_grid_is_half_decade_spaced() {
    let g = desk_lambda_grid();
    assert_eq!(g.len(), 4);
    for w in g.windows(2) {
        assert!(((w[1] / w[0]).log10() - 0.5).abs() < 1e-12);
    }
}

// ---- bookkeeping ----

#[test]
fn model_counts() {
    assert_eq!(model_count(2, 5, 5, 7), 360);
    assert_eq!(model_count(2, 3, 2, 4), 54);
    let plain = CvConfig {
        method: Method::PlainNn,
        ..CvConfig::default()
    };
    assert_eq!(plain.expected_models(2), 10);
    let full = CvConfig {
        lambda_grid: full_lambda_grid(),
        ..CvConfig::default()
    };
    assert_eq!(full.expected_models(2), 360);
}

#[test]
fn invalid_cv_configs_are_rejected() {
    let one_outer = CvConfig {
        outer_folds: 1,
        ..CvConfig::default()
    };
    assert!(one_outer.validate().is_err());
    let fixed_with_grid = CvConfig {
        inner_folds: 0,
        ..CvConfig::default()
    };
    assert!(fixed_with_grid.validate().is_err());
    let fixed = CvConfig {
        inner_folds: 0,
        lambda_grid: vec![0.3],
        ..CvConfig::default()
    };
    fixed.validate().unwrap();
    assert_eq!(fixed.expected_models(2), 10);
    let no_workers = CvConfig {
        workers: 0,
        ..CvConfig::default()
    };
    assert!(no_workers.validate().is_err());
}

// ---- nested cross-validation on a small cohort ----

fn small_cohort() -> Cohort {
    let mut cfg = SynthConfig {
        patients_per_class: 6,
        spots_per_patient: (2, 3),
        n_bins: 300,
        mz_end: 800.0 + 300.0 * 0.6,
        ..SynthConfig::default()
    };
    let top = cfg.mz_end - 5.0;
    for ps in &mut cfg.biomarkers {
        ps.retain(|p| p.mz <= top);
    }
    cfg.background_peaks.retain(|p| p.mz <= top);
    generate_cohort(&cfg).unwrap()
}

fn quick(method: Method) -> CvConfig {
    let mut cfg = CvConfig {
        method,
        outer_folds: 3,
        inner_folds: 2,
        lambda_grid: vec![0.01, 0.1],
        k_grid: vec![2, 4, 8],
        ..CvConfig::default()
    };
    cfg.train.epochs = 1;
    cfg.train.batch_size = 8;
    cfg
}

#[test]
fn roc_lda_run_is_leak_free_and_pooled() {
    let cohort = small_cohort();
    let cfg = quick(Method::RocLda);
    let run = nested_cv(&cohort, &cfg).unwrap();
    let report = &run.report;
    report.check_no_leakage(&cohort).unwrap();
    assert_eq!(report.model_count, model_count(2, 3, 2, 3));
    assert_eq!(report.folds.len(), 6);
    assert!(report.folds.iter().all(|f| f.chosen_k.is_some() && f.chosen_lambda.is_none()));

    // every spectrum is predicted exactly once
    let predicted: Vec<&str> = report.folds.iter().flat_map(|f| &f.predictions).map(|p| p.sample_id.as_str()).collect();
    let distinct: BTreeSet<&str> = predicted.iter().copied().collect();
    assert_eq!(predicted.len(), cohort.len());
    assert_eq!(distinct.len(), cohort.len());

    let preds: Vec<usize> = report.folds.iter().flat_map(|f| &f.predictions).map(|p| p.predicted).collect();
    let truth: Vec<usize> = report.folds.iter().flat_map(|f| &f.predictions).map(|p| p.truth).collect();
    assert_eq!(report.spot_balanced_accuracy, balanced_accuracy(&preds, &truth).unwrap());

    let csv = report.predictions_csv();
    assert!(csv.starts_with("sample_id,patient_id,trained_on,fold,predicted,true\n"));
    assert_eq!(csv.lines().count(), cohort.len() + 1);
}

#[test]
fn leakage_check_catches_a_planted_leak() {
    let cohort = small_cohort();
    let mut report = nested_cv(&cohort, &quick(Method::RocLda)).unwrap().report;
    let leaked = report.folds[0].test_patients[0].clone();
    report.folds[0].train_patients.push(leaked);
    assert!(report.check_no_leakage(&cohort).is_err());

    let mut report = nested_cv(&cohort, &quick(Method::RocLda)).unwrap().report;
    report.folds[1].test_lab = report.folds[1].training_lab.clone();
    assert!(report.check_no_leakage(&cohort).is_err());
}

#[test]
fn drr_run_counts_models_and_picks_from_the_grid() {
    let cohort = small_cohort();
    let cfg = quick(Method::DrrNn);
    let run = nested_cv(&cohort, &cfg).unwrap();
    run.report.check_no_leakage(&cohort).unwrap();
    assert_eq!(run.report.model_count, 54 - 2 * 3 * 2 * 2);
    for f in &run.report.folds {
        assert!(cfg.lambda_grid.contains(&f.chosen_lambda.unwrap()));
        assert_eq!(f.inner_scores.len(), 2);
        assert!(f.inner_scores.iter().all(|g| g.fold_scores.len() == 2));
    }
    assert_eq!(run.outcomes.len(), 6);
    assert!(run.outcomes.iter().all(|o| o.model.is_some()));
}

#[test]
fn worker_count_does_not_change_results() {
    let cohort = small_cohort();
    let one = nested_cv(&cohort, &quick(Method::DrrNn)).unwrap().report;
    let two = nested_cv(
        &cohort,
        &CvConfig {
            workers: 2,
            ..quick(Method::DrrNn)
        },
    )
    .unwrap()
    .report;
    assert_eq!(one, two);
}

#[test]
fn plain_run_trains_one_model_per_outer_fold() {
    let cohort = small_cohort();
    let run = nested_cv(&cohort, &quick(Method::PlainNn)).unwrap();
    assert_eq!(run.report.model_count, 6);
    assert!(run.report.folds.iter().all(|f| f.inner_scores.is_empty()));
}

#[test]
fn one_lab_cohort_is_rejected() {
    let mut cohort = small_cohort();
    let lab = cohort.samples[0].lab_id.clone();
    cohort.samples.retain(|s| s.lab_id == lab);
    assert!(matches!(nested_cv(&cohort, &quick(Method::RocLda)), Err(EvalError::Setup(_))));
}

proptest! {
    #[test]
    fn auroc_ignores_monotone_transforms(
        values in prop::collection::vec(-10.0f64..10.0, 4..30),
        seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let labels = random_binary_labels(&mut r, values.len());
        let base = auroc(&values, &labels).unwrap();
        let cubed: Vec<f64> = values.iter().map(|v| v * v * v + 2.0 * v).collect();
        let exp: Vec<f64> = values.iter().map(|v| (0.3 * v).exp()).collect();
        prop_assert!((auroc(&cubed, &labels).unwrap() - base).abs() < 1e-12);
        prop_assert!((auroc(&exp, &labels).unwrap() - base).abs() < 1e-12);
        let flipped: Vec<f64> = values.iter().map(|v| -v).collect();
        prop_assert!((auroc(&flipped, &labels).unwrap() - (1.0 - base)).abs() < 1e-12);
    }

    #[test]
    fn selection_steps_toward_regularization(scores in prop::collection::vec(0.0f64..1.0, 1..10)) {
        let grid: Vec<f64> = (0..scores.len()).map(|i| 10f64.powi(i as i32 - 5)).collect();
        let best = scores.iter().cloned().fold(f64::MIN, f64::max);
        let arg_first = scores.iter().position(|&s| s == best).unwrap();
        let arg_last = scores.iter().rposition(|&s| s == best).unwrap();
        prop_assert!(select_lambda(&grid, &scores).unwrap() >= grid[arg_last]);
        let ks: Vec<usize> = (0..scores.len()).map(|i| 5 + 10 * i).collect();
        prop_assert!(select_k(&ks, &scores).unwrap() <= ks[arg_first]);
    }

    #[test]
    fn folds_partition_and_balance(n in 5usize..60, folds in 2usize..6, seed in any::<u64>()) {
        let items: Vec<usize> = (0..n).collect();
        let groups = make_folds(&items, folds, seed).unwrap();
        let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let mut all: Vec<usize> = groups.concat();
        all.sort_unstable();
        prop_assert_eq!(all, items);
    }
}
