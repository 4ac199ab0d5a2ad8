//! Class-weighted NLL plus the elastic relevance penalty, minimized with
//! Adam through double backprop.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::{record_input_gradient, AttributionError, ScoreMode};
use crate::autodiff::{AdError, NodeId, Tape, Tensor};
use crate::model::{ModelError, ModelParams};

pub const NLL_EPS: f64 = 1e-12;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("class {0} does not occur in the training labels")]
    MissingClass(usize),
    #[error("label {label} of sample {index} is outside 0..{classes}")]
    Label { index: usize, label: usize, classes: usize },
    #[error("training set is empty")]
    Empty,
    #[error("penalty mask: {0}")]
    Mask(String),
    #[error("non-finite gradient {value} in parameter tensor {tensor} at entry {index}")]
    NonFiniteGradient { tensor: usize, index: usize, value: f64 },
    #[error("loss became {value} in epoch {epoch}, batch {batch}")]
    Diverged {
        epoch: usize,
        batch: usize,
        value: f64,
        report: Box<TrainReport>,
    },
    #[error(transparent)]
    Attribution(#[from] AttributionError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config file: {0}")]
    Toml(#[from] toml::de::Error),
}

impl From<AdError> for TrainError {
    fn from(e: AdError) -> Self {
        Self::Model(e.into())
    }
}

type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub score_mode: ScoreMode,
    pub class_weights: bool,
    pub weight_decay: f64,
    pub penalty_mask_path: Option<PathBuf>,
    /// Loaded from `penalty_mask_path` or set directly.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub penalty_mask: Option<Vec<f64>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.0,
            lambda2: 0.0,
            lr: 1e-3,
            epochs: 30,
            batch_size: 32,
            seed: 0,
            score_mode: ScoreMode::Logit,
            class_weights: true,
            weight_decay: 0.0,
            penalty_mask_path: None,
            penalty_mask: None,
        }
    }
}

impl TrainConfig {
    /// Same `λ` for both penalty terms.
    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda1 = lambda;
        self.lambda2 = lambda;
        self
    }

    pub fn penalized(&self) -> bool {
        self.lambda1 > 0.0 || self.lambda2 > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TrainError::Config(msg));
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be finite and nonnegative"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr = {} must be positive", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if let Some(mask) = &self.penalty_mask {
            if let Some((i, v)) = mask.iter().enumerate().find(|(_, v)| !(**v >= 0.0 && v.is_finite())) {
                return Err(TrainError::Mask(format!("entry {i} is {v}; entries must be nonnegative")));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML config. A relative `penalty_mask_path` is resolved
    /// against the config file's directory and the mask is loaded.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(p) = cfg.penalty_mask_path.clone() {
            let p = if p.is_relative() {
                path.parent().unwrap_or(Path::new(".")).join(p)
            } else {
                p
            };
            cfg.penalty_mask = Some(load_penalty_mask(&p)?);
            cfg.validate()?;
        }
        Ok(cfg)
    }
}

/// One nonnegative number per bin, separated by whitespace or commas.
pub fn load_penalty_mask(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .enumerate()
        .map(|(i, t)| {
            t.parse::<f64>()
                .map_err(|_| TrainError::Mask(format!("entry {i} ({t:?}) is not a number")))
        })
        .collect()
}

/// `w_y = N / (C · N_y)`.
pub fn class_weights(labels: &[usize], classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; classes];
    for (index, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(TrainError::Label { index, label, classes });
        }
        counts[label] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(TrainError::MissingClass(c));
    }
    let n = labels.len() as f64;
    Ok(counts.iter().map(|&k| n / (classes as f64 * k as f64)).collect())
}

/// `-ln p_y` with `p_y` clamped below at [`NLL_EPS`]; the flag is set when
/// the clamp was active.
pub fn nll_loss(p: &[f64], y: usize) -> (f64, bool) {
    let py = p[y];
    if py < NLL_EPS {
        (-NLL_EPS.ln(), true)
    } else {
        (-py.ln(), false)
    }
}

/// `λ1 ‖w⊙ρ‖₁ + λ2 ‖w⊙ρ‖₂²` with `w = 1` when no mask is given.
pub fn drr_penalty(rho: &[f64], lambda1: f64, lambda2: f64, mask: Option<&[f64]>) -> f64 {
    let (mut l1, mut l2) = (0.0, 0.0);
    for (i, r) in rho.iter().enumerate() {
        let v = mask.map_or(*r, |m| m[i] * r);
        l1 += v.abs();
        l2 += v * v;
    }
    lambda1 * l1 + lambda2 * l2
}

/// Nodes of the recorded batch objective.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub total: NodeId,
    pub nll: NodeId,
    /// `None` when the penalty is switched off.
    pub l1: Option<NodeId>,
    pub l2: Option<NodeId>,
    /// Number of samples whose NLL hit the clamp.
    pub clamped: usize,
}

/// Records `(1/B) Σ_b [w_{y_b} NLL_b + λ1 ‖m⊙ρ_b‖₁ + λ2 ‖m⊙ρ_b‖₂²]` where
/// `ρ_b` is the relevance of sample `b` for its own label.
///
/// `x` is the input node `[B, 1, n]`; `weights` holds one weight per class.
/// With both `λ` at zero no relevance nodes are recorded.
pub fn record_objective(
    tape: &mut Tape,
    model: &ModelParams,
    params: &[NodeId],
    x: NodeId,
    labels: &[usize],
    weights: &[f64],
    config: &TrainConfig,
) -> Result<Objective> {
    let batch = labels.len();
    let n = model.input_len();
    let inv_b = 1.0 / batch as f64;
    let (logits, relevance) = if config.penalized() {
        let (logits, grad) = record_input_gradient(tape, model, params, x, labels, config.score_mode)?;
        let rho = tape.mul(x, grad)?;
        let rho = match &config.penalty_mask {
            Some(mask) => {
                if mask.len() != n {
                    return Err(TrainError::Mask(format!("length {} does not match input length {n}", mask.len())));
                }
                let tiled: Vec<f64> = (0..batch).flat_map(|_| mask.iter().copied()).collect();
                let m = tape.input(Tensor::from_vec(&[batch, 1, n], tiled));
                tape.mul(rho, m)?
            }
            None => rho,
        };
        (logits, Some(rho))
    } else {
        (model.forward(tape, params, x)?, None)
    };

    let logp = tape.log_softmax(logits)?;
    let picked = tape.gather(logp, labels)?;
    // max(log p_y, ln ε) = relu(log p_y − ln ε) + ln ε
    let floor = tape.input(Tensor::full(&[batch], NLL_EPS.ln()));
    let clamped = tape.value(picked).data().iter().filter(|v| **v < NLL_EPS.ln()).count();
    let shifted = tape.sub(picked, floor)?;
    let kept = tape.relu(shifted)?;
    let logp_y = tape.add(kept, floor)?;
    let w = tape.input(Tensor::vector(labels.iter().map(|&y| weights[y]).collect()));
    let weighted = tape.mul(logp_y, w)?;
    let sum = tape.sum(weighted)?;
    let nll = tape.scale(sum, -inv_b)?;

    let (l1, l2, total) = match relevance {
        Some(rho) => {
            let a = tape.abs(rho)?;
            let s1 = tape.sum(a)?;
            let l1 = tape.scale(s1, config.lambda1 * inv_b)?;
            let q = tape.square(rho)?;
            let s2 = tape.sum(q)?;
            let l2 = tape.scale(s2, config.lambda2 * inv_b)?;
            let t = tape.add(nll, l1)?;
            let total = tape.add(t, l2)?;
            (Some(l1), Some(l2), total)
        }
        None => (None, None, nll),
    };
    Ok(Objective {
        total,
        nll,
        l1,
        l2,
        clamped,
    })
}

/// Values of the batch objective and its parameter gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchLoss {
    pub nll: f64,
    pub l1: f64,
    pub l2: f64,
    pub total: f64,
    pub clamped: usize,
    pub grads: Vec<Tensor>,
}

pub fn batch_loss(
    model: &ModelParams,
    xs: &[&[f64]],
    labels: &[usize],
    weights: &[f64],
    config: &TrainConfig,
) -> Result<BatchLoss> {
    if xs.is_empty() {
        return Err(TrainError::Empty);
    }
    let n = model.input_len();
    if let Some(bad) = xs.iter().find(|x| x.len() != n) {
        return Err(ModelError::InputLength {
            expected: n,
            got: bad.len(),
        }
        .into());
    }
    let mut tape = Tape::new();
    let params = model.register(&mut tape);
    let data: Vec<f64> = xs.iter().flat_map(|x| x.iter().copied()).collect();
    let x = tape.input(Tensor::from_vec(&[xs.len(), 1, n], data));
    let obj = record_objective(&mut tape, model, &params, x, labels, weights, config)?;
    let value = |id: Option<NodeId>, tape: &Tape| id.map_or(0.0, |i| tape.value(i).item());
    let (nll, l1, l2, total) = (
        tape.value(obj.nll).item(),
        value(obj.l1, &tape),
        value(obj.l2, &tape),
        tape.value(obj.total).item(),
    );
    let grads = tape.gradient_values(obj.total, &params)?;
    Ok(BatchLoss {
        nll,
        l1,
        l2,
        total,
        clamped: obj.clamped,
        grads,
    })
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &[Tensor], lr: f64) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            lr,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Updates `params` in place. Nothing is modified if any gradient entry
    /// is non-finite.
    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter tensor");
        for (tensor, g) in grads.iter().enumerate() {
            assert_eq!(g.shape(), params[tensor].shape(), "gradient shape of tensor {tensor}");
            if let Some((index, &value)) = g.data().iter().enumerate().find(|(_, v)| !v.is_finite()) {
                return Err(TrainError::NonFiniteGradient { tensor, index, value });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p -= self.lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

/// Per-sample averages over one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub nll: f64,
    pub l1: f64,
    pub l2: f64,
    /// `(weight_decay / 2) ‖θ‖²` at the start of each batch.
    pub weight_decay: f64,
    pub total: f64,
}

impl EpochLoss {
    pub fn component_sum(&self) -> f64 {
        self.nll + self.l1 + self.l2 + self.weight_decay
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLoss>,
    pub seed: u64,
    pub wall_time_secs: f64,
    pub clamped_nll: usize,
}

impl TrainReport {
    /// Loss history as CSV, one row per epoch.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "nll", "l1", "l2", "weight_decay", "total"])
            .expect("write to memory");
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.nll.to_string(),
                e.l1.to_string(),
                e.l2.to_string(),
                e.weight_decay.to_string(),
                e.total.to_string(),
            ])
            .expect("write to memory");
        }
        String::from_utf8(w.into_inner().expect("flush to memory")).expect("ascii")
    }
}

/// Trains `model` on `(xs, labels)` with seeded mini-batch shuffling.
pub fn train(
    mut model: ModelParams,
    xs: &[&[f64]],
    labels: &[usize],
    config: &TrainConfig,
) -> Result<(ModelParams, TrainReport)> {
    config.validate()?;
    if xs.is_empty() {
        return Err(TrainError::Empty);
    }
    assert_eq!(xs.len(), labels.len(), "one label per spectrum");
    let classes = model.classes();
    let weights = if config.class_weights {
        class_weights(labels, classes)?
    } else {
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, y)| **y >= classes) {
            return Err(TrainError::Label { index, label, classes });
        }
        vec![1.0; classes]
    };
    if let Some(mask) = &config.penalty_mask {
        if mask.len() != model.input_len() {
            return Err(TrainError::Mask(format!(
                "length {} does not match input length {}",
                mask.len(),
                model.input_len()
            )));
        }
    }

    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(&model.tensors, config.lr);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut report = TrainReport {
        epochs: Vec::with_capacity(config.epochs),
        seed: config.seed,
        wall_time_secs: 0.0,
        clamped_nll: 0,
    };
    let total_n = xs.len() as f64;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut acc = EpochLoss {
            epoch,
            nll: 0.0,
            l1: 0.0,
            l2: 0.0,
            weight_decay: 0.0,
            total: 0.0,
        };
        for (batch, idx) in order.chunks(config.batch_size).enumerate() {
            let bx: Vec<&[f64]> = idx.iter().map(|&i| xs[i]).collect();
            let by: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut loss = batch_loss(&model, &bx, &by, &weights, config)?;
            let mut decay = 0.0;
            if config.weight_decay > 0.0 {
                for (g, p) in loss.grads.iter_mut().zip(&model.tensors) {
                    for (g, p) in g.data_mut().iter_mut().zip(p.data()) {
                        *g += config.weight_decay * p;
                        decay += p * p;
                    }
                }
                decay *= 0.5 * config.weight_decay;
            }
            let total = loss.total + decay;
            if !total.is_finite() {
                report.wall_time_secs = start.elapsed().as_secs_f64();
                return Err(TrainError::Diverged {
                    epoch,
                    batch,
                    value: total,
                    report: Box::new(report),
                });
            }
            let share = idx.len() as f64 / total_n;
            acc.nll += share * loss.nll;
            acc.l1 += share * loss.l1;
            acc.l2 += share * loss.l2;
            acc.weight_decay += share * decay;
            acc.total += share * total;
            report.clamped_nll += loss.clamped;
            adam.update(&mut model.tensors, &loss.grads)?;
        }
        report.epochs.push(acc);
    }
    report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok((model, report))
}
