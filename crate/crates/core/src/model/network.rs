use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::autodiff::{NodeId, Tape, Tensor};

/// One stage of a sequential network.
///
/// Convolutions are zero-padded to preserve length and require an odd width.
/// Locally-connected layers use valid windows with unshared weights and one
/// bias per output unit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Fixed multiplier, no parameters. Linear, so relevance is unaffected.
    Scale { factor: f64 },
    Conv { filters: usize, width: usize },
    LocallyConnected { filters: usize, width: usize, stride: usize },
    Dense { units: usize },
    Relu,
    /// Not piecewise linear; a network containing it has no LRP z-rule identity.
    Tanh,
    /// Adds the activation produced by layer `from` (an earlier index).
    ResidualAdd { from: usize },
    /// Only allowed last; logits are read before it.
    Softmax,
}

/// Per-sample activation shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActShape {
    Seq { channels: usize, len: usize },
    Flat(usize),
}

impl ActShape {
    pub fn numel(self) -> usize {
        match self {
            ActShape::Seq { channels, len } => channels * len,
            ActShape::Flat(n) => n,
        }
    }
}

impl LayerSpec {
    /// Output activation shape, or a description of why the layer does not fit.
    pub fn output_shape(&self, input: ActShape) -> Result<ActShape, String> {
        match (*self, input) {
            (LayerSpec::Conv { filters, width }, ActShape::Seq { len, .. }) => {
                if width % 2 == 0 || width == 0 {
                    return Err(format!("conv width {width} must be odd"));
                }
                if filters == 0 {
                    return Err("conv needs at least one filter".into());
                }
                Ok(ActShape::Seq { channels: filters, len })
            }
            (LayerSpec::LocallyConnected { filters, width, stride }, ActShape::Seq { len, .. }) => {
                if width == 0 || stride == 0 || filters == 0 {
                    return Err("locally-connected width, stride and filters must be positive".into());
                }
                if len < width {
                    return Err(format!("input length {len} shorter than window {width}"));
                }
                Ok(ActShape::Seq {
                    channels: filters,
                    len: (len - width) / stride + 1,
                })
            }
            (LayerSpec::Scale { factor }, s) => {
                if !(factor.is_finite() && factor != 0.0) {
                    return Err(format!("scale factor {factor} must be finite and nonzero"));
                }
                Ok(s)
            }
            (LayerSpec::Dense { units }, _) if units > 0 => Ok(ActShape::Flat(units)),
            (LayerSpec::Relu | LayerSpec::Tanh | LayerSpec::Softmax | LayerSpec::ResidualAdd { .. }, s) => Ok(s),
            (spec, s) => Err(format!("{spec:?} cannot follow activation {s:?}")),
        }
    }

    fn param_shapes(&self, input: ActShape, output: ActShape) -> Vec<Vec<usize>> {
        match (*self, input, output) {
            (LayerSpec::Conv { filters, width }, ActShape::Seq { channels, .. }, _) => {
                vec![vec![filters, channels, width], vec![filters]]
            }
            (
                LayerSpec::LocallyConnected { filters, width, .. },
                ActShape::Seq { channels, .. },
                ActShape::Seq { len: out_len, .. },
            ) => vec![vec![out_len, filters, channels, width], vec![filters, out_len]],
            (LayerSpec::Dense { units }, s, _) => vec![vec![units, s.numel()], vec![units]],
            _ => vec![],
        }
    }

    fn fan_in(&self, input: ActShape) -> usize {
        match (*self, input) {
            (LayerSpec::Conv { width, .. }, ActShape::Seq { channels, .. })
            | (LayerSpec::LocallyConnected { width, .. }, ActShape::Seq { channels, .. }) => channels * width,
            (LayerSpec::Dense { .. }, s) => s.numel(),
            _ => 0,
        }
    }
}

/// Layer list plus input and output sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_len: usize,
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    /// Activation shape after each layer, starting from a single-channel input.
    pub fn shapes(&self) -> Result<Vec<ActShape>, ModelError> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur = ActShape::Seq {
            channels: 1,
            len: self.input_len,
        };
        for (i, layer) in self.layers.iter().enumerate() {
            if let LayerSpec::ResidualAdd { from } = layer {
                if *from >= i {
                    return Err(ModelError::Architecture(format!(
                        "layer {i}: residual source {from} is not an earlier layer"
                    )));
                }
                if shapes[*from] != cur {
                    return Err(ModelError::Architecture(format!(
                        "layer {i}: residual source shape {:?} differs from {cur:?}",
                        shapes[*from]
                    )));
                }
            }
            if matches!(layer, LayerSpec::Softmax) && i + 1 != self.layers.len() {
                return Err(ModelError::Architecture(format!("layer {i}: softmax must be the last layer")));
            }
            cur = layer
                .output_shape(cur)
                .map_err(|e| ModelError::Architecture(format!("layer {i}: {e}")))?;
            shapes.push(cur);
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.classes == 0 {
            return Err(ModelError::Architecture("class count must be positive".into()));
        }
        let shapes = self.shapes()?;
        let logits = self
            .layers
            .iter()
            .zip(&shapes)
            .rev()
            .find(|(l, _)| !matches!(l, LayerSpec::Softmax))
            .map(|(_, s)| *s);
        match logits {
            Some(ActShape::Flat(n)) if n == self.classes => Ok(()),
            other => Err(ModelError::Architecture(format!(
                "network must end in {} logits, ends in {other:?}",
                self.classes
            ))),
        }
    }

    /// Shapes of every trainable tensor, layer by layer (weight then bias).
    pub fn param_shapes(&self) -> Result<Vec<Vec<usize>>, ModelError> {
        let shapes = self.shapes()?;
        let mut input = ActShape::Seq {
            channels: 1,
            len: self.input_len,
        };
        let mut out = Vec::new();
        for (layer, &output) in self.layers.iter().zip(&shapes) {
            out.extend(layer.param_shapes(input, output));
            input = output;
        }
        Ok(out)
    }

    /// True when every nonlinearity is a ReLU (the softmax head excluded).
    pub fn relu_only(&self) -> bool {
        !self.layers.iter().any(|l| matches!(l, LayerSpec::Tanh))
    }

    /// Receptive field in input bins of the leading run of conv/ReLU layers.
    pub fn conv_receptive_field(&self) -> usize {
        let mut rf = 1;
        for layer in &self.layers {
            match layer {
                LayerSpec::Conv { width, .. } => rf += width - 1,
                LayerSpec::Relu | LayerSpec::Scale { .. } => {}
                _ => break,
            }
        }
        rf
    }
}

/// Architecture together with its trainable tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub arch: Architecture,
    pub tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn new(arch: Architecture, tensors: Vec<Tensor>) -> Result<Self, ModelError> {
        arch.validate()?;
        let expected = arch.param_shapes()?;
        if expected.len() != tensors.len() {
            return Err(ModelError::Architecture(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (i, (s, t)) in expected.iter().zip(&tensors).enumerate() {
            if t.shape() != s.as_slice() {
                return Err(ModelError::Architecture(format!(
                    "parameter {i} has shape {:?}, expected {s:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { arch, tensors })
    }

    /// All-zero weights and biases.
    pub fn zeros(arch: Architecture) -> Result<Self, ModelError> {
        let tensors = arch.param_shapes()?.iter().map(|s| Tensor::zeros(s)).collect();
        Self::new(arch, tensors)
    }

    /// Weights uniform in `±sqrt(6 / fan_in)`, biases zero.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self, ModelError> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = arch.shapes()?;
        let mut input = ActShape::Seq {
            channels: 1,
            len: arch.input_len,
        };
        let mut tensors = Vec::new();
        for (layer, &output) in arch.layers.iter().zip(&shapes) {
            let ps = layer.param_shapes(input, output);
            if let [w, b] = ps.as_slice() {
                let bound = (6.0 / layer.fan_in(input) as f64).sqrt();
                let n: usize = w.iter().product();
                let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                tensors.push(Tensor::from_vec(w, data));
                tensors.push(Tensor::zeros(b));
            }
            input = output;
        }
        Self::new(arch, tensors)
    }

    pub fn input_len(&self) -> usize {
        self.arch.input_len
    }

    pub fn classes(&self) -> usize {
        self.arch.classes
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Adds every parameter tensor to `tape` as a trainable leaf.
    pub fn register(&self, tape: &mut Tape) -> Vec<NodeId> {
        self.tensors.iter().map(|t| tape.parameter(t.clone())).collect()
    }

    /// Records the network on `tape` for an input node of shape `[B, 1, n]`
    /// and returns the `[B, C]` logit node.
    pub fn forward(&self, tape: &mut Tape, params: &[NodeId], x: NodeId) -> Result<NodeId, ModelError> {
        let xs = tape.shape(x).to_vec();
        if xs.len() != 3 || xs[1] != 1 || xs[2] != self.arch.input_len {
            return Err(ModelError::InputLength {
                expected: self.arch.input_len,
                got: xs.last().copied().unwrap_or(0),
            });
        }
        let batch = xs[0];
        let mut outputs: Vec<NodeId> = Vec::with_capacity(self.arch.layers.len());
        let mut cur = x;
        let mut next_param = 0;
        let mut take = || {
            let p = (params[next_param], params[next_param + 1]);
            next_param += 2;
            p
        };
        for layer in &self.arch.layers {
            cur = match *layer {
                LayerSpec::Conv { .. } => {
                    let (w, b) = take();
                    let y = tape.conv1d(cur, w)?;
                    tape.add_channel_bias(y, b)?
                }
                LayerSpec::LocallyConnected { stride, .. } => {
                    let (w, b) = take();
                    let y = tape.locally_connected(cur, w, stride)?;
                    let bb = tape.broadcast_batch(b, batch)?;
                    tape.add(y, bb)?
                }
                LayerSpec::Dense { .. } => {
                    let (w, b) = take();
                    let features = tape.value(cur).len() / batch;
                    let flat = tape.reshape(cur, &[batch, features])?;
                    let y = tape.matmul(flat, w, false, true)?;
                    tape.add_channel_bias(y, b)?
                }
                LayerSpec::Scale { factor } => tape.scale(cur, factor)?,
                LayerSpec::Relu => tape.relu(cur)?,
                LayerSpec::Tanh => tape.tanh(cur)?,
                LayerSpec::ResidualAdd { from } => tape.add(cur, outputs[from])?,
                LayerSpec::Softmax => cur,
            };
            outputs.push(cur);
        }
        Ok(cur)
    }

    /// Logits for a batch of spectra (each of length `input_len`).
    pub fn predict_logits_batch(&self, xs: &[&[f64]]) -> Result<Vec<Vec<f64>>, ModelError> {
        let n = self.arch.input_len;
        if let Some(bad) = xs.iter().find(|x| x.len() != n) {
            return Err(ModelError::InputLength {
                expected: n,
                got: bad.len(),
            });
        }
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let params = self.register(&mut tape);
        let data: Vec<f64> = xs.iter().flat_map(|x| x.iter().copied()).collect();
        let x = tape.input(Tensor::from_vec(&[xs.len(), 1, n], data));
        let z = self.forward(&mut tape, &params, x)?;
        let c = self.arch.classes;
        Ok(tape.value(z).data().chunks(c).map(<[f64]>::to_vec).collect())
    }

    pub fn predict_logits(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        Ok(self.predict_logits_batch(&[x])?.remove(0))
    }

    pub fn classify(&self, x: &[f64]) -> Result<usize, ModelError> {
        Ok(argmax(&self.predict_logits(x)?))
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// Max-shifted softmax.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}
