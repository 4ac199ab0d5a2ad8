//! Relevance maps: saliency, std-weighted saliency, the LRP z-rule and
//! the diagnostics computed on them.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, NodeId, Tape, Tensor};
use crate::model::{softmax, ModelError, ModelParams};

/// Spectra per tape when attributing many inputs at once.
const CHUNK: usize = 64;

pub const DEFAULT_SPARSITY_TAU: f64 = 0.01;
pub const SOFTMAX_IDENTITY_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("class {class} is out of range for a {classes}-class model")]
    InvalidClass { class: usize, classes: usize },
    #[error("{what} has length {got}, expected {expected}")]
    Length {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{0}")]
    NotReluOnly(String),
    #[error("softmax relevance is defined for two classes, model has {0}")]
    NotTwoClass(usize),
    #[error("cannot average relevance over an empty subset")]
    EmptySubset,
    #[error("cosine similarity of a zero vector is undefined")]
    ZeroVector,
    #[error("sparsity threshold {0} must lie in (0, 1)")]
    Threshold(f64),
    #[error("per-bin standard deviation {value} at bin {bin} is negative or not finite")]
    Sigma { bin: usize, value: f64 },
    #[error("softmax gradient identity violated: relative error {0:e}")]
    Identity(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<AdError> for AttributionError {
    fn from(e: AdError) -> Self {
        Self::Model(e.into())
    }
}

type Result<T> = std::result::Result<T, AttributionError>;

/// Which class score the relevance is taken of.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    #[default]
    Logit,
    Softmax,
}

/// Per-bin relevance for one class. Positive values are evidence for the
/// class, negative values counterevidence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelevanceMap {
    pub values: Vec<f64>,
    pub class: usize,
    pub mode: ScoreMode,
}

impl RelevanceMap {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Records `S = Σ_b score(b, labels[b])` for the batch input `x` of shape
/// `[B, 1, n]` and its gradient with respect to `x`.
///
/// Returns `(logits, dS/dx)`. The gradient node stays differentiable, which
/// is what the relevance penalty in training relies on.
pub fn record_input_gradient(
    tape: &mut Tape,
    model: &ModelParams,
    params: &[NodeId],
    x: NodeId,
    labels: &[usize],
    mode: ScoreMode,
) -> Result<(NodeId, NodeId)> {
    for &y in labels {
        check_class(model, y)?;
    }
    let logits = model.forward(tape, params, x)?;
    let scores = match mode {
        ScoreMode::Logit => logits,
        ScoreMode::Softmax => tape.softmax(logits)?,
    };
    let picked = tape.gather(scores, labels)?;
    let total = tape.sum(picked)?;
    let grad = tape.gradient(total, &[x])?[0];
    Ok((logits, grad))
}

fn check_class(model: &ModelParams, y: usize) -> Result<()> {
    if y >= model.classes() {
        return Err(AttributionError::InvalidClass {
            class: y,
            classes: model.classes(),
        });
    }
    Ok(())
}

fn check_len(model: &ModelParams, what: &'static str, got: usize) -> Result<()> {
    if got != model.input_len() {
        return Err(AttributionError::Length {
            what,
            expected: model.input_len(),
            got,
        });
    }
    Ok(())
}

/// Input gradients of the chosen score for many spectra, one per label.
pub fn input_gradients(model: &ModelParams, xs: &[&[f64]], labels: &[usize], mode: ScoreMode) -> Result<Vec<Vec<f64>>> {
    assert_eq!(xs.len(), labels.len(), "one label per spectrum");
    let n = model.input_len();
    for x in xs {
        check_len(model, "spectrum", x.len())?;
    }
    let mut out = Vec::with_capacity(xs.len());
    for (chunk, ys) in xs.chunks(CHUNK).zip(labels.chunks(CHUNK)) {
        let mut tape = Tape::new();
        let params = model.register(&mut tape);
        let data: Vec<f64> = chunk.iter().flat_map(|x| x.iter().copied()).collect();
        let x = tape.input(Tensor::from_vec(&[chunk.len(), 1, n], data));
        let (_, grad) = record_input_gradient(&mut tape, model, &params, x, ys, mode)?;
        out.extend(tape.value(grad).data().chunks(n).map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// Gradient of the logit of class `y` with respect to the input.
pub fn saliency(model: &ModelParams, x: &[f64], y: usize) -> Result<Vec<f64>> {
    Ok(input_gradients(model, &[x], &[y], ScoreMode::Logit)?.remove(0))
}

/// Saliency scaled bin-wise by the training-set standard deviation.
pub fn std_weighted_saliency(model: &ModelParams, x: &[f64], y: usize, sigma: &[f64]) -> Result<Vec<f64>> {
    check_len(model, "standard deviation vector", sigma.len())?;
    if let Some((bin, &value)) = sigma.iter().enumerate().find(|(_, s)| !(s.is_finite() && **s >= 0.0)) {
        return Err(AttributionError::Sigma { bin, value });
    }
    let s = saliency(model, x, y)?;
    Ok(s.iter().zip(sigma).map(|(g, sd)| g * sd).collect())
}

fn require_relu(model: &ModelParams) -> Result<()> {
    if !model.arch.relu_only() {
        return Err(AttributionError::NotReluOnly(
            "the z-rule equals input times gradient only for ReLU networks; \
             this model has a non-ReLU nonlinearity"
                .into(),
        ));
    }
    Ok(())
}

/// LRP z-rule relevance, `x ⊙ ∇x z_y`.
pub fn lrp_z(model: &ModelParams, x: &[f64], y: usize) -> Result<RelevanceMap> {
    require_relu(model)?;
    let s = saliency(model, x, y)?;
    Ok(RelevanceMap {
        values: hadamard(x, &s),
        class: y,
        mode: ScoreMode::Logit,
    })
}

/// z-rule relevance of many spectra, each for its own class.
pub fn lrp_z_batch(model: &ModelParams, xs: &[&[f64]], labels: &[usize], mode: ScoreMode) -> Result<Vec<RelevanceMap>> {
    require_relu(model)?;
    let grads = input_gradients(model, xs, labels, mode)?;
    Ok(grads
        .iter()
        .zip(xs)
        .zip(labels)
        .map(|((g, x), &y)| RelevanceMap {
            values: hadamard(x, g),
            class: y,
            mode,
        })
        .collect())
}

fn hadamard(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(u, v)| u * v).collect()
}

/// Softmax-score relevance of a two-class model together with the check of
/// `∇p_y = p_y p_o (∇z_y − ∇z_o)` against the autodiff gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxRelevance {
    pub map: RelevanceMap,
    pub probability: f64,
    /// Largest absolute deviation between the two sides divided by the
    /// largest absolute entry of the closed-form side.
    pub identity_error: f64,
}

pub fn softmax_relevance(model: &ModelParams, x: &[f64], y: usize) -> Result<SoftmaxRelevance> {
    if model.classes() != 2 {
        return Err(AttributionError::NotTwoClass(model.classes()));
    }
    require_relu(model)?;
    check_class(model, y)?;
    let other = 1 - y;
    let gp = input_gradients(model, &[x], &[y], ScoreMode::Softmax)?.remove(0);
    let gz = input_gradients(model, &[x, x], &[y, other], ScoreMode::Logit)?;
    let p = softmax(&model.predict_logits(x)?);
    // p[other] stands in for 1 - p[y]; it keeps its precision when p[y] is near 1
    let factor = p[y] * p[other];
    let closed: Vec<f64> = gz[0].iter().zip(&gz[1]).map(|(a, b)| factor * (a - b)).collect();
    let scale = closed.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let dev = gp.iter().zip(&closed).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let identity_error = if dev == 0.0 { 0.0 } else { dev / scale };
    if !(identity_error < SOFTMAX_IDENTITY_TOL) {
        return Err(AttributionError::Identity(identity_error));
    }
    Ok(SoftmaxRelevance {
        map: RelevanceMap {
            values: hadamard(x, &gp),
            class: y,
            mode: ScoreMode::Softmax,
        },
        probability: p[y],
        identity_error,
    })
}

/// Mean z-rule relevance over a subset, all taken for class `y`.
pub fn mean_relevance(model: &ModelParams, xs: &[&[f64]], y: usize) -> Result<RelevanceMap> {
    if xs.is_empty() {
        return Err(AttributionError::EmptySubset);
    }
    let maps = lrp_z_batch(model, xs, &vec![y; xs.len()], ScoreMode::Logit)?;
    let mut sum = vec![0.0; model.input_len()];
    for m in &maps {
        for (s, v) in sum.iter_mut().zip(&m.values) {
            *s += v;
        }
    }
    let k = xs.len() as f64;
    Ok(RelevanceMap {
        values: sum.into_iter().map(|s| s / k).collect(),
        class: y,
        mode: ScoreMode::Logit,
    })
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(AttributionError::Length {
            what: "second vector",
            expected: u.len(),
            got: v.len(),
        });
    }
    let nu: f64 = u.iter().map(|a| a * a).sum();
    let nv: f64 = v.iter().map(|a| a * a).sum();
    if nu == 0.0 || nv == 0.0 {
        return Err(AttributionError::ZeroVector);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    // one square root keeps cos(u, u) exactly 1
    Ok((dot / (nu * nv).sqrt()).clamp(-1.0, 1.0))
}

/// Fraction of bins with `|ρ_i| > τ · max|ρ|`; zero for an all-zero map.
pub fn relevance_sparsity(rho: &[f64], tau: f64) -> Result<f64> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(AttributionError::Threshold(tau));
    }
    let max = rho.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max == 0.0 || rho.is_empty() {
        return Ok(0.0);
    }
    let active = rho.iter().filter(|v| v.abs() > tau * max).count();
    Ok(active as f64 / rho.len() as f64)
}

/// Writes `mz, relevance_class0, relevance_class1, ...` with one row per bin.
pub fn write_relevance_csv<W: Write>(out: W, mz_start: f64, mz_step: f64, maps: &[&RelevanceMap]) -> Result<()> {
    let n = maps.first().map_or(0, |m| m.len());
    if let Some(m) = maps.iter().find(|m| m.len() != n) {
        return Err(AttributionError::Length {
            what: "relevance map",
            expected: n,
            got: m.len(),
        });
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["mz".to_string()];
    header.extend(maps.iter().map(|m| format!("relevance_class{}", m.class)));
    w.write_record(&header).map_err(csv_io)?;
    for i in 0..n {
        let mut row = vec![(mz_start + i as f64 * mz_step).to_string()];
        row.extend(maps.iter().map(|m| m.values[i].to_string()));
        w.write_record(&row).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> AttributionError {
    AttributionError::Io(std::io::Error::other(e))
}
