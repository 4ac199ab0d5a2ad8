//! Metrics, ROC/LDA, patient folds and the inter-lab nested cross-validation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{build_isotopenet_lite, ModelError, ModelParams};
use crate::synth::Cohort;
use crate::training::{train, TrainConfig, TrainError};

pub const DEFAULT_LDA_SHRINKAGE: f64 = 0.1;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("labels contain a single class; need at least two")]
    SingleClass,
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("{patients} patients cannot fill {folds} folds")]
    TooFewPatients { patients: usize, folds: usize },
    #[error("covariance is singular after shrinkage")]
    Singular,
    #[error("invalid cross-validation setup: {0}")]
    Setup(String),
    #[error("lab {lab}, outer fold {fold}: {source}")]
    Train {
        lab: String,
        fold: usize,
        #[source]
        source: TrainError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("worker pool: {0}")]
    Pool(String),
}

type Result<T> = std::result::Result<T, EvalError>;

/// Mean per-class recall over the classes present in `labels`; for two
/// classes this is ½(TPR + TNR).
pub fn balanced_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(EvalError::Length(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut hits: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&p, &y) in predictions.iter().zip(labels) {
        let e = hits.entry(y).or_default();
        e.1 += 1;
        if p == y {
            e.0 += 1;
        }
    }
    if hits.len() < 2 {
        return Err(EvalError::SingleClass);
    }
    let sum: f64 = hits.values().map(|&(h, n)| h as f64 / n as f64).sum();
    Ok(sum / hits.len() as f64)
}

/// Majority vote per patient, in order of first appearance. Ties go to the
/// lowest class index.
pub fn patient_aggregate(predictions: &[usize], patient_ids: &[&str]) -> Vec<(String, usize)> {
    assert_eq!(predictions.len(), patient_ids.len(), "one patient id per prediction");
    let mut order: Vec<&str> = Vec::new();
    let mut votes: HashMap<&str, BTreeMap<usize, usize>> = HashMap::new();
    for (&p, &id) in predictions.iter().zip(patient_ids) {
        let v = votes.entry(id).or_insert_with(|| {
            order.push(id);
            BTreeMap::new()
        });
        *v.entry(p).or_default() += 1;
    }
    order
        .into_iter()
        .map(|id| {
            let v = &votes[id];
            let best = v.values().copied().max().unwrap_or(0);
            let label = v.iter().find(|(_, &n)| n == best).map(|(&c, _)| c).unwrap_or(0);
            (id.to_string(), label)
        })
        .collect()
}

/// Probability that a random positive (label 1) outranks a random negative
/// (label 0), ties counted ½.
pub fn auroc(values: &[f64], labels: &[usize]) -> Result<f64> {
    if values.len() != labels.len() {
        return Err(EvalError::Length(format!("{} values for {} labels", values.len(), labels.len())));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.iter().filter(|&&y| y == 0).count();
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut idx: Vec<usize> = (0..values.len()).filter(|&i| labels[i] <= 1).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    // midranks over tie groups, then the Mann-Whitney U of the positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * idx[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PeakRanking {
    /// Largest `|AUROC − 0.5|`.
    #[default]
    TwoSided,
    /// Largest AUROC with class 1 as the positive class.
    OneSided,
}

/// Per-bin AUROC over spectra `xs`.
pub fn bin_aurocs(xs: &[&[f64]], labels: &[usize]) -> Result<Vec<f64>> {
    let n = xs.first().ok_or(EvalError::Empty)?.len();
    let mut column = vec![0.0; xs.len()];
    (0..n)
        .map(|j| {
            for (c, x) in column.iter_mut().zip(xs) {
                *c = x[j];
            }
            auroc(&column, labels)
        })
        .collect()
}

/// Indices of the `k` most discriminative bins, best first; ties go to the
/// lower index.
pub fn pick_peaks_auroc(xs: &[&[f64]], labels: &[usize], k: usize, ranking: PeakRanking) -> Result<Vec<usize>> {
    let aucs = bin_aurocs(xs, labels)?;
    rank_bins(&aucs, k, ranking)
}

pub fn rank_bins(aucs: &[f64], k: usize, ranking: PeakRanking) -> Result<Vec<usize>> {
    if k == 0 || k > aucs.len() {
        return Err(EvalError::Grid(format!("k = {k} must lie in 1..={}", aucs.len())));
    }
    let score = |a: f64| match ranking {
        PeakRanking::TwoSided => (a - 0.5).abs(),
        PeakRanking::OneSided => a,
    };
    let mut idx: Vec<usize> = (0..aucs.len()).collect();
    idx.sort_by(|&a, &b| score(aucs[b]).total_cmp(&score(aucs[a])).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Linear discriminant with shrunk pooled covariance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LdaModel {
    /// `Σ⁻¹ μ_c` per class.
    pub coefficients: Vec<Vec<f64>>,
    /// `−½ μ_cᵀ Σ⁻¹ μ_c + ln π_c` per class.
    pub intercepts: Vec<f64>,
}

impl LdaModel {
    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        self.coefficients
            .iter()
            .zip(&self.intercepts)
            .map(|(w, b)| b + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>())
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        crate::model::argmax(&self.scores(x))
    }
}

/// `Σ̂ = (1−γ)Σ_pooled + γ·(tr Σ_pooled / k)·I`, priors from class frequencies.
pub fn lda_fit(features: &[Vec<f64>], labels: &[usize], gamma: f64) -> Result<LdaModel> {
    let k = features.first().ok_or(EvalError::Empty)?.len();
    if features.len() != labels.len() || features.iter().any(|f| f.len() != k) {
        return Err(EvalError::Length("features must be rectangular with one label per row".into()));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(EvalError::Setup(format!("shrinkage {gamma} must lie in [0, 1]")));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; classes];
    let mut means = vec![DVector::<f64>::zeros(k); classes];
    for (f, &y) in features.iter().zip(labels) {
        counts[y] += 1;
        means[y] += DVector::from_column_slice(f);
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(EvalError::SingleClass);
    }
    for (m, &c) in means.iter_mut().zip(&counts) {
        if c > 0 {
            *m /= c as f64;
        }
    }
    let mut cov = DMatrix::<f64>::zeros(k, k);
    for (f, &y) in features.iter().zip(labels) {
        let d = DVector::from_column_slice(f) - &means[y];
        cov.syger(1.0, &d, &d, 1.0);
    }
    let present = counts.iter().filter(|&&c| c > 0).count();
    let dof = features.len().saturating_sub(present).max(1);
    cov /= dof as f64;
    let shrink = gamma * cov.trace() / k as f64;
    let mut sigma = cov * (1.0 - gamma);
    for i in 0..k {
        sigma[(i, i)] += shrink;
    }
    let chol = sigma.cholesky().ok_or(EvalError::Singular)?;
    let n = features.len() as f64;
    let mut coefficients = Vec::with_capacity(classes);
    let mut intercepts = Vec::with_capacity(classes);
    for (m, &c) in means.iter().zip(&counts) {
        if c == 0 {
            coefficients.push(vec![0.0; k]);
            intercepts.push(f64::NEG_INFINITY);
            continue;
        }
        let w = chol.solve(m);
        intercepts.push(-0.5 * m.dot(&w) + (c as f64 / n).ln());
        coefficients.push(w.as_slice().to_vec());
    }
    if coefficients.iter().flatten().chain(intercepts.iter().filter(|b| b.is_finite())).any(|v| !v.is_finite()) {
        return Err(EvalError::Singular);
    }
    Ok(LdaModel { coefficients, intercepts })
}

/// Seeded shuffle, then round-robin into `folds` groups.
pub fn make_folds<T: Clone>(items: &[T], folds: usize, seed: u64) -> Result<Vec<Vec<T>>> {
    if folds == 0 || items.len() < folds {
        return Err(EvalError::TooFewPatients {
            patients: items.len(),
            folds,
        });
    }
    let mut shuffled = items.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut groups = vec![Vec::new(); folds];
    for (i, item) in shuffled.into_iter().enumerate() {
        groups[i % folds].push(item);
    }
    Ok(groups)
}

/// Like [`make_folds`], but each stratum is shuffled separately and the
/// round-robin continues across strata, so every group gets a near-equal
/// share of each stratum.
pub fn make_stratified_folds<T: Clone>(strata: &[Vec<T>], folds: usize, seed: u64) -> Result<Vec<Vec<T>>> {
    let total: usize = strata.iter().map(Vec::len).sum();
    if folds == 0 || total < folds {
        return Err(EvalError::TooFewPatients { patients: total, folds });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups = vec![Vec::new(); folds];
    let mut slot = 0;
    for stratum in strata {
        let mut s = stratum.clone();
        s.shuffle(&mut rng);
        for item in s {
            groups[slot % folds].push(item);
            slot += 1;
        }
    }
    Ok(groups)
}

fn check_grid(grid: &[f64], scores: &[f64]) -> Result<usize> {
    if grid.is_empty() || grid.len() != scores.len() {
        return Err(EvalError::Grid(format!("{} grid values for {} scores", grid.len(), scores.len())));
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(EvalError::Grid("grid must be strictly ascending".into()));
    }
    Ok(scores.len())
}

/// Index of the best score; ties go to the larger index if `prefer_high`.
fn argmax_tie(scores: &[f64], prefer_high: bool) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] || (s == scores[best] && prefer_high) {
            best = i;
        }
    }
    best
}

/// Best grid value, then one step up if possible.
pub fn select_lambda(grid: &[f64], scores: &[f64]) -> Result<f64> {
    let n = check_grid(grid, scores)?;
    let best = argmax_tie(scores, true);
    Ok(grid[(best + 1).min(n - 1)])
}

/// Best grid value, then one step down if possible.
pub fn select_k(grid: &[usize], scores: &[f64]) -> Result<usize> {
    let g: Vec<f64> = grid.iter().map(|&k| k as f64).collect();
    check_grid(&g, scores)?;
    let best = argmax_tie(scores, false);
    Ok(grid[best.saturating_sub(1)])
}

/// Geometric mean of the ends of the contiguous run of grid values around the
/// argmax whose scores are within `tolerance` of the best.
pub fn select_log_mean(grid: &[f64], scores: &[f64], tolerance: f64) -> Result<f64> {
    let n = check_grid(grid, scores)?;
    if grid[0] <= 0.0 {
        return Err(EvalError::Grid("log-mean selection needs positive grid values".into()));
    }
    let best = argmax_tie(scores, true);
    let floor = scores[best] - tolerance;
    let mut lo = best;
    while lo > 0 && scores[lo - 1] >= floor {
        lo -= 1;
    }
    let mut hi = best;
    while hi + 1 < n && scores[hi + 1] >= floor {
        hi += 1;
    }
    Ok((grid[lo] * grid[hi]).sqrt())
}

/// `labs·outer·inner·grid + labs·outer`.
pub fn model_count(labs: usize, outer: usize, inner: usize, grid: usize) -> usize {
    labs * outer * inner * grid + labs * outer
}

/// `10^-5, 10^-4.5, …, 10^-2`.
pub fn full_lambda_grid() -> Vec<f64> {
    (0..7).map(|i| 10f64.powf(-5.0 + 0.5 * i as f64)).collect()
}

/// `10^-1, 10^-0.5, 10^0, 10^0.5`.
///
/// Shifted up from [`full_lambda_grid`]: the desk network and cohort are small
/// enough that the penalty only changes the learned features above ~0.1.
pub fn desk_lambda_grid() -> Vec<f64> {
    (0..4).map(|i| 10f64.powf(-1.0 + 0.5 * i as f64)).collect()
}

/// 16 log-spaced peak counts from 5 to 200.
pub fn default_k_grid() -> Vec<usize> {
    let (lo, hi): (f64, f64) = (5.0, 200.0);
    (0..16)
        .map(|i| (lo * (hi / lo).powf(i as f64 / 15.0)).round() as usize)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "drr-nn")]
    DrrNn,
    #[serde(rename = "plain-nn", alias = "unregularized-nn")]
    PlainNn,
    #[serde(rename = "roc-lda")]
    RocLda,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::DrrNn, Method::PlainNn, Method::RocLda];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::DrrNn => "drr-nn",
            Method::PlainNn => "plain-nn",
            Method::RocLda => "roc-lda",
        }
    }

    pub fn is_neural(self) -> bool {
        self != Method::RocLda
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "drr-nn" => Ok(Method::DrrNn),
            "plain-nn" | "unregularized-nn" => Ok(Method::PlainNn),
            "roc-lda" => Ok(Method::RocLda),
            _ => Err(format!("unknown method {s:?}; expected drr-nn, plain-nn or roc-lda")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum Selection {
    /// One grid step toward more regularization.
    #[default]
    NextStep,
    /// Geometric mean of the near-best range; λ only.
    LogMean { tolerance: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvConfig {
    pub method: Method,
    pub outer_folds: usize,
    /// Zero skips the inner search; the grid must then hold one value.
    pub inner_folds: usize,
    pub lambda_grid: Vec<f64>,
    pub k_grid: Vec<usize>,
    pub selection: Selection,
    pub ranking: PeakRanking,
    pub lda_shrinkage: f64,
    pub seed: u64,
    pub workers: usize,
    pub train: TrainConfig,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            method: Method::DrrNn,
            outer_folds: 5,
            inner_folds: 5,
            lambda_grid: desk_lambda_grid(),
            k_grid: default_k_grid(),
            selection: Selection::NextStep,
            ranking: PeakRanking::TwoSided,
            lda_shrinkage: DEFAULT_LDA_SHRINKAGE,
            seed: 0,
            workers: 1,
            train: TrainConfig::default(),
        }
    }
}

impl CvConfig {
    fn grid_len(&self) -> usize {
        match self.method {
            Method::DrrNn => self.lambda_grid.len(),
            Method::RocLda => self.k_grid.len(),
            Method::PlainNn => 0,
        }
    }

    fn inner(&self) -> usize {
        if self.method == Method::PlainNn {
            0
        } else {
            self.inner_folds
        }
    }

    /// Models a run over `labs` labs trains.
    pub fn expected_models(&self, labs: usize) -> usize {
        model_count(labs, self.outer_folds, self.inner(), self.grid_len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.outer_folds < 2 {
            return Err(EvalError::Setup("need at least 2 outer folds".into()));
        }
        if self.workers == 0 {
            return Err(EvalError::Setup("workers must be positive".into()));
        }
        let g = self.grid_len();
        if self.method != Method::PlainNn {
            if g == 0 {
                return Err(EvalError::Grid("grid is empty".into()));
            }
            if self.inner_folds == 1 || (self.inner_folds == 0 && g != 1) {
                return Err(EvalError::Setup(
                    "inner_folds must be at least 2, or 0 with a single grid value".into(),
                ));
            }
        }
        match self.method {
            Method::DrrNn => {
                check_grid(&self.lambda_grid, &vec![0.0; g])?;
                if self.lambda_grid.iter().any(|&l| !(l >= 0.0)) {
                    return Err(EvalError::Grid("λ values must be nonnegative".into()));
                }
            }
            Method::RocLda => {
                let k: Vec<f64> = self.k_grid.iter().map(|&k| k as f64).collect();
                check_grid(&k, &vec![0.0; g])?;
                if self.k_grid[0] == 0 {
                    return Err(EvalError::Grid("k must be positive".into()));
                }
                if matches!(self.selection, Selection::LogMean { .. }) {
                    return Err(EvalError::Setup("log-mean selection applies to λ only".into()));
                }
            }
            Method::PlainNn => {}
        }
        self.train.validate().map_err(|e| EvalError::Setup(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub patient_id: String,
    pub predicted: usize,
    #[serde(rename = "true")]
    pub truth: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridScore {
    pub value: f64,
    pub fold_scores: Vec<f64>,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub training_lab: String,
    pub test_lab: String,
    pub fold: usize,
    pub chosen_lambda: Option<f64>,
    pub chosen_k: Option<usize>,
    pub train_patients: Vec<String>,
    pub inner_groups: Vec<Vec<String>>,
    pub test_patients: Vec<String>,
    pub inner_scores: Vec<GridScore>,
    pub predictions: Vec<Prediction>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub method: Method,
    pub seed: u64,
    pub outer_folds: usize,
    pub inner_folds: usize,
    pub grid: Vec<f64>,
    pub folds: Vec<FoldRecord>,
    pub spot_balanced_accuracy: f64,
    pub patient_balanced_accuracy: f64,
    pub model_count: usize,
}

impl CvReport {
    /// Fails if any test patient was seen in training or inner validation of
    /// its fold, or if a fold tested on its own training lab.
    pub fn check_no_leakage(&self, cohort: &Cohort) -> std::result::Result<(), String> {
        let lab_of: HashMap<&str, &str> = cohort.samples.iter().map(|s| (s.id.as_str(), s.lab_id.as_str())).collect();
        for f in &self.folds {
            let tag = format!("{} fold {}", f.training_lab, f.fold);
            if f.training_lab == f.test_lab {
                return Err(format!("{tag}: tested on its training lab"));
            }
            let train: BTreeSet<&str> = f.train_patients.iter().map(String::as_str).collect();
            let inner: BTreeSet<&str> = f.inner_groups.iter().flatten().map(String::as_str).collect();
            if !inner.is_subset(&train) {
                return Err(format!("{tag}: inner validation patients outside the outer training set"));
            }
            let test: BTreeSet<&str> = f.test_patients.iter().map(String::as_str).collect();
            if let Some(p) = test.intersection(&train).next() {
                return Err(format!("{tag}: patient {p} is both trained on and tested"));
            }
            for p in &f.predictions {
                if !test.contains(p.patient_id.as_str()) {
                    return Err(format!("{tag}: prediction for {} outside the test patients", p.sample_id));
                }
                match lab_of.get(p.sample_id.as_str()) {
                    Some(&lab) if lab == f.test_lab => {}
                    Some(&lab) => return Err(format!("{tag}: sample {} comes from lab {lab}", p.sample_id)),
                    None => return Err(format!("{tag}: unknown sample {}", p.sample_id)),
                }
            }
        }
        Ok(())
    }

    pub fn predictions_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["sample_id", "patient_id", "trained_on", "fold", "predicted", "true"])
            .expect("write to memory");
        for f in &self.folds {
            for p in &f.predictions {
                w.write_record([
                    p.sample_id.as_str(),
                    p.patient_id.as_str(),
                    f.training_lab.as_str(),
                    &f.fold.to_string(),
                    &p.predicted.to_string(),
                    &p.truth.to_string(),
                ])
                .expect("write to memory");
            }
        }
        String::from_utf8(w.into_inner().expect("flush to memory")).expect("utf-8")
    }
}

/// One outer-fold model with the cohort indices it was trained and tested on.
#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub training_lab: String,
    pub fold: usize,
    pub model: Option<ModelParams>,
    pub lda: Option<(Vec<usize>, LdaModel)>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct CvRun {
    pub report: CvReport,
    pub outcomes: Vec<FoldOutcome>,
}

/// Deterministic per-job seed.
pub fn derive_seed(seed: u64, parts: [usize; 4]) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let code = parts.iter().fold(0u64, |acc, &p| acc.wrapping_mul(1_000_003).wrapping_add(p as u64 + 1));
    rng.set_stream(code);
    rng.next_u64()
}

struct LabPlan {
    lab: String,
    other: String,
    outer: Vec<Vec<String>>,
}

struct OuterSplit {
    lab_index: usize,
    fold: usize,
    train_patients: Vec<String>,
    inner: Vec<Vec<String>>,
    test_patients: Vec<String>,
    train_idx: Vec<usize>,
    test_idx: Vec<usize>,
}

struct Fitted {
    model: Option<ModelParams>,
    lda: Option<(Vec<usize>, LdaModel)>,
}

fn indices_of(cohort: &Cohort, lab: &str, patients: &[String]) -> Vec<usize> {
    let set: BTreeSet<&str> = patients.iter().map(String::as_str).collect();
    cohort
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.lab_id == lab && set.contains(s.patient_id.as_str()))
        .map(|(i, _)| i)
        .collect()
}

fn patients_by_class(cohort: &Cohort, lab: &str, patients: &[String]) -> Vec<Vec<String>> {
    let mut class_of = HashMap::new();
    for s in cohort.samples.iter().filter(|s| s.lab_id == lab) {
        class_of.insert(s.patient_id.as_str(), s.label);
    }
    let mut strata = vec![Vec::new(); cohort.classes()];
    for p in patients {
        strata[class_of[p.as_str()]].push(p.clone());
    }
    strata
}

fn fit_nn(cohort: &Cohort, idx: &[usize], lambda: f64, cfg: &CvConfig, seed: u64) -> std::result::Result<ModelParams, TrainError> {
    let model = build_isotopenet_lite(cohort.n, cohort.classes(), cohort.mz_step, seed)?;
    let xs: Vec<&[f64]> = idx.iter().map(|&i| cohort.spectrum(i)).collect();
    let ys: Vec<usize> = idx.iter().map(|&i| cohort.samples[i].label).collect();
    let mut tc = cfg.train.clone().with_lambda(lambda);
    tc.seed = seed;
    Ok(train(model, &xs, &ys, &tc)?.0)
}

fn predict_nn(model: &ModelParams, cohort: &Cohort, idx: &[usize]) -> std::result::Result<Vec<usize>, ModelError> {
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(64) {
        let xs: Vec<&[f64]> = chunk.iter().map(|&i| cohort.spectrum(i)).collect();
        out.extend(model.predict_logits_batch(&xs)?.iter().map(|z| crate::model::argmax(z)));
    }
    Ok(out)
}

fn labels_of(cohort: &Cohort, idx: &[usize]) -> Vec<usize> {
    idx.iter().map(|&i| cohort.samples[i].label).collect()
}

fn features(cohort: &Cohort, idx: &[usize], bins: &[usize]) -> Vec<Vec<f64>> {
    idx.iter()
        .map(|&i| {
            let x = cohort.spectrum(i);
            bins.iter().map(|&b| x[b]).collect()
        })
        .collect()
}

/// Spot-level validation scores for every k on one train/validation split;
/// the ranking is computed once and truncated per k.
fn lda_scores(cohort: &Cohort, train_idx: &[usize], val_idx: &[usize], cfg: &CvConfig) -> Result<Vec<f64>> {
    let xs: Vec<&[f64]> = train_idx.iter().map(|&i| cohort.spectrum(i)).collect();
    let ys = labels_of(cohort, train_idx);
    let kmax = *cfg.k_grid.last().expect("validated grid");
    let ranked = pick_peaks_auroc(&xs, &ys, kmax.min(cohort.n), cfg.ranking)?;
    let truth = labels_of(cohort, val_idx);
    cfg.k_grid
        .iter()
        .map(|&k| {
            let bins = &ranked[..k.min(ranked.len())];
            let model = lda_fit(&features(cohort, train_idx, bins), &ys, cfg.lda_shrinkage)?;
            let pred: Vec<usize> = features(cohort, val_idx, bins).iter().map(|f| model.predict(f)).collect();
            balanced_accuracy(&pred, &truth)
        })
        .collect()
}

fn fit_lda(cohort: &Cohort, idx: &[usize], k: usize, cfg: &CvConfig) -> Result<(Vec<usize>, LdaModel)> {
    let xs: Vec<&[f64]> = idx.iter().map(|&i| cohort.spectrum(i)).collect();
    let ys = labels_of(cohort, idx);
    let bins = pick_peaks_auroc(&xs, &ys, k.min(cohort.n), cfg.ranking)?;
    let model = lda_fit(&features(cohort, idx, &bins), &ys, cfg.lda_shrinkage)?;
    Ok((bins, model))
}

/// Inter-lab nested cross-validation. Every lab trains on its outer training
/// patients and tests on the held-out patients' spectra from the next lab.
pub fn nested_cv(cohort: &Cohort, cfg: &CvConfig) -> Result<CvRun> {
    cfg.validate()?;
    let labs = cohort.labs();
    if labs.len() != 2 {
        return Err(EvalError::Setup(format!("need exactly 2 labs, found {}", labs.len())));
    }
    for lab in &labs {
        let present: BTreeSet<usize> = cohort.samples.iter().filter(|s| &s.lab_id == lab).map(|s| s.label).collect();
        if present.len() != cohort.classes() {
            return Err(EvalError::Setup(format!("lab {lab} lacks a class")));
        }
    }
    let plans: Vec<LabPlan> = labs
        .iter()
        .enumerate()
        .map(|(li, lab)| {
            let patients = cohort.patients(lab);
            let strata = patients_by_class(cohort, lab, &patients);
            let outer = make_stratified_folds(&strata, cfg.outer_folds, derive_seed(cfg.seed, [li, 0, 0, 0]))?;
            Ok(LabPlan {
                lab: lab.clone(),
                other: labs[(li + 1) % labs.len()].clone(),
                outer,
            })
        })
        .collect::<Result<_>>()?;

    let mut splits = Vec::new();
    for (li, plan) in plans.iter().enumerate() {
        for fold in 0..cfg.outer_folds {
            let test_patients = plan.outer[fold].clone();
            let train_patients: Vec<String> = plan
                .outer
                .iter()
                .enumerate()
                .filter(|(g, _)| *g != fold)
                .flat_map(|(_, g)| g.iter().cloned())
                .collect();
            let inner = if cfg.inner() > 0 {
                let strata = patients_by_class(cohort, &plan.lab, &train_patients);
                make_stratified_folds(&strata, cfg.inner(), derive_seed(cfg.seed, [li, fold + 1, 0, 0]))?
            } else {
                Vec::new()
            };
            splits.push(OuterSplit {
                lab_index: li,
                fold,
                train_idx: indices_of(cohort, &plan.lab, &train_patients),
                test_idx: indices_of(cohort, &plan.other, &test_patients),
                train_patients,
                inner,
                test_patients,
            });
        }
    }
    if let Some(s) = splits.iter().find(|s| s.test_idx.is_empty()) {
        return Err(EvalError::Setup(format!(
            "lab {} fold {}: held-out patients have no spectra in lab {}",
            plans[s.lab_index].lab, s.fold, plans[s.lab_index].other
        )));
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| EvalError::Pool(e.to_string()))?;
    let grid_len = cfg.grid_len();
    let train_err = |s: &OuterSplit, source: TrainError| EvalError::Train {
        lab: plans[s.lab_index].lab.clone(),
        fold: s.fold,
        source,
    };

    // inner search: one job per (split, inner fold, grid value) for the nets,
    // one per (split, inner fold) for LDA, which scores the whole k grid
    let inner_scores: Vec<Vec<Vec<f64>>> = if cfg.inner() > 0 {
        let jobs: Vec<(usize, usize, usize)> = match cfg.method {
            Method::DrrNn => (0..splits.len())
                .flat_map(|s| (0..cfg.inner()).flat_map(move |f| (0..grid_len).map(move |g| (s, f, g))))
                .collect(),
            _ => (0..splits.len()).flat_map(|s| (0..cfg.inner()).map(move |f| (s, f, 0))).collect(),
        };
        let results: Vec<Result<Vec<f64>>> = pool.install(|| {
            jobs.par_iter()
                .map(|&(s, f, g)| {
                    let split = &splits[s];
                    let lab = &plans[split.lab_index].lab;
                    let val_patients = &split.inner[f];
                    let fit_patients: Vec<String> = split
                        .train_patients
                        .iter()
                        .filter(|p| !val_patients.contains(p))
                        .cloned()
                        .collect();
                    let fit_idx = indices_of(cohort, lab, &fit_patients);
                    let val_idx = indices_of(cohort, lab, val_patients);
                    match cfg.method {
                        Method::DrrNn => {
                            let seed = derive_seed(cfg.seed, [split.lab_index, split.fold + 1, f + 1, g + 1]);
                            let model = fit_nn(cohort, &fit_idx, cfg.lambda_grid[g], cfg, seed)
                                .map_err(|e| train_err(split, e))?;
                            let pred = predict_nn(&model, cohort, &val_idx)?;
                            Ok(vec![balanced_accuracy(&pred, &labels_of(cohort, &val_idx))?])
                        }
                        _ => lda_scores(cohort, &fit_idx, &val_idx, cfg),
                    }
                })
                .collect()
        });
        let mut table = vec![vec![vec![0.0; cfg.inner()]; grid_len]; splits.len()];
        for (&(s, f, g), r) in jobs.iter().zip(results) {
            let r = r?;
            if cfg.method == Method::DrrNn {
                table[s][g][f] = r[0];
            } else {
                for (gi, v) in r.into_iter().enumerate() {
                    table[s][gi][f] = v;
                }
            }
        }
        table
    } else {
        vec![Vec::new(); splits.len()]
    };

    let mut chosen_lambda = vec![None; splits.len()];
    let mut chosen_k = vec![None; splits.len()];
    let mut grid_scores = vec![Vec::new(); splits.len()];
    for (s, table) in inner_scores.iter().enumerate() {
        let means: Vec<f64> = table.iter().map(|f| f.iter().sum::<f64>() / f.len() as f64).collect();
        match cfg.method {
            Method::DrrNn => {
                chosen_lambda[s] = Some(if cfg.inner() == 0 {
                    cfg.lambda_grid[0]
                } else {
                    match cfg.selection {
                        Selection::NextStep => select_lambda(&cfg.lambda_grid, &means)?,
                        Selection::LogMean { tolerance } => select_log_mean(&cfg.lambda_grid, &means, tolerance)?,
                    }
                });
            }
            Method::RocLda => {
                chosen_k[s] = Some(if cfg.inner() == 0 {
                    cfg.k_grid[0]
                } else {
                    select_k(&cfg.k_grid, &means)?
                });
            }
            Method::PlainNn => {}
        }
        let values: Vec<f64> = match cfg.method {
            Method::DrrNn => cfg.lambda_grid.clone(),
            _ => cfg.k_grid.iter().map(|&k| k as f64).collect(),
        };
        grid_scores[s] = table
            .iter()
            .zip(&means)
            .zip(values)
            .map(|((f, &mean), value)| GridScore {
                value,
                fold_scores: f.clone(),
                mean,
            })
            .collect();
    }

    let fitted: Vec<Result<(Fitted, Vec<usize>)>> = pool.install(|| {
        splits
            .par_iter()
            .enumerate()
            .map(|(s, split)| {
                let seed = derive_seed(cfg.seed, [split.lab_index, split.fold + 1, 0, 0]);
                match cfg.method {
                    Method::RocLda => {
                        let (bins, lda) = fit_lda(cohort, &split.train_idx, chosen_k[s].expect("chosen"), cfg)?;
                        let pred = features(cohort, &split.test_idx, &bins).iter().map(|f| lda.predict(f)).collect();
                        Ok((
                            Fitted {
                                model: None,
                                lda: Some((bins, lda)),
                            },
                            pred,
                        ))
                    }
                    _ => {
                        let lambda = chosen_lambda[s].unwrap_or(0.0);
                        let model =
                            fit_nn(cohort, &split.train_idx, lambda, cfg, seed).map_err(|e| train_err(split, e))?;
                        let pred = predict_nn(&model, cohort, &split.test_idx)?;
                        Ok((
                            Fitted {
                                model: Some(model),
                                lda: None,
                            },
                            pred,
                        ))
                    }
                }
            })
            .collect()
    });

    let mut folds = Vec::with_capacity(splits.len());
    let mut outcomes = Vec::with_capacity(splits.len());
    let (mut all_pred, mut all_true) = (Vec::new(), Vec::new());
    let (mut pat_pred, mut pat_true) = (Vec::new(), Vec::new());
    for ((s, split), result) in splits.iter().enumerate().zip(fitted) {
        let (fit, pred) = result?;
        let plan = &plans[split.lab_index];
        let truth = labels_of(cohort, &split.test_idx);
        let predictions: Vec<Prediction> = split
            .test_idx
            .iter()
            .zip(&pred)
            .map(|(&i, &p)| Prediction {
                sample_id: cohort.samples[i].id.clone(),
                patient_id: cohort.samples[i].patient_id.clone(),
                predicted: p,
                truth: cohort.samples[i].label,
            })
            .collect();
        let ids: Vec<&str> = predictions.iter().map(|p| p.patient_id.as_str()).collect();
        let votes = patient_aggregate(&pred, &ids);
        let true_votes = patient_aggregate(&truth, &ids);
        pat_pred.extend(votes.iter().map(|v| v.1));
        pat_true.extend(true_votes.iter().map(|v| v.1));
        all_pred.extend_from_slice(&pred);
        all_true.extend_from_slice(&truth);
        folds.push(FoldRecord {
            training_lab: plan.lab.clone(),
            test_lab: plan.other.clone(),
            fold: split.fold,
            chosen_lambda: chosen_lambda[s],
            chosen_k: chosen_k[s],
            train_patients: split.train_patients.clone(),
            inner_groups: split.inner.clone(),
            test_patients: split.test_patients.clone(),
            inner_scores: std::mem::take(&mut grid_scores[s]),
            predictions,
        });
        outcomes.push(FoldOutcome {
            training_lab: plan.lab.clone(),
            fold: split.fold,
            model: fit.model,
            lda: fit.lda,
            train_indices: split.train_idx.clone(),
            test_indices: split.test_idx.clone(),
        });
    }
    let grid = match cfg.method {
        Method::DrrNn => cfg.lambda_grid.clone(),
        Method::RocLda => cfg.k_grid.iter().map(|&k| k as f64).collect(),
        Method::PlainNn => Vec::new(),
    };
    let report = CvReport {
        method: cfg.method,
        seed: cfg.seed,
        outer_folds: cfg.outer_folds,
        inner_folds: cfg.inner(),
        grid,
        folds,
        spot_balanced_accuracy: balanced_accuracy(&all_pred, &all_true)?,
        patient_balanced_accuracy: balanced_accuracy(&pat_pred, &pat_true)?,
        model_count: cfg.expected_models(labs.len()),
    };
    Ok(CvRun { report, outcomes })
}
