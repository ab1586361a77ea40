//! Sequential CNN models: layer specs, the traced forward pass, reverse-mode
//! gradients, and the losses the attacks and trainer differentiate.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::ops::{self, ProbVector};
use crate::rng::Stream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    Relu,
    #[serde(rename = "maxpool2d")]
    MaxPool2d,
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Softmax,
}

impl LayerKind {
    pub fn is_parametric(&self) -> bool {
        matches!(self, LayerKind::Conv2d { .. } | LayerKind::Dense { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool2d => "maxpool2d",
            LayerKind::Dense { .. } => "dense",
            LayerKind::Softmax => "softmax",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub kind: LayerKind,
    /// Whether the layer takes part in sparsification (parametric layers) or
    /// activation noise (relu layers).
    pub noise_eligible: bool,
}

impl LayerSpec {
    pub fn new(kind: LayerKind, noise_eligible: bool) -> Self {
        Self { kind, noise_eligible }
    }
}

/// conv8@3x3 -> relu -> pool -> conv16@3x3 -> relu -> pool -> dense -> softmax.
///
/// `image_size` must leave even extents before each pool (18 works; so do 22 and 30).
pub fn fixture_arch(image_size: usize, classes: usize) -> Result<Vec<LayerSpec>> {
    let after1 = image_size.checked_sub(2).filter(|s| s % 2 == 0 && *s >= 4);
    let after2 = after1.and_then(|s| (s / 2).checked_sub(2)).filter(|s| s % 2 == 0 && *s >= 2);
    let Some(s2) = after2 else {
        return Err(Error::InvalidArgument(format!(
            "image size {image_size} does not give even extents before both pooling layers"
        )));
    };
    let flat = 16 * (s2 / 2) * (s2 / 2);
    Ok(vec![
        LayerSpec::new(LayerKind::Conv2d { in_channels: 1, out_channels: 8, kernel: 3, stride: 1 }, false),
        LayerSpec::new(LayerKind::Relu, true),
        LayerSpec::new(LayerKind::MaxPool2d, false),
        LayerSpec::new(LayerKind::Conv2d { in_channels: 8, out_channels: 16, kernel: 3, stride: 1 }, true),
        LayerSpec::new(LayerKind::Relu, true),
        LayerSpec::new(LayerKind::MaxPool2d, false),
        LayerSpec::new(LayerKind::Dense { inputs: flat, outputs: classes }, true),
        LayerSpec::new(LayerKind::Softmax, false),
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

/// Per-layer weight masks, indexed like `Model::layers`. `None` means dense.
pub type LayerMasks = Vec<Option<Vec<bool>>>;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    input_shape: [usize; 3],
    layers: Vec<LayerSpec>,
    params: Vec<Option<Params>>,
    class_count: usize,
}

/// Multiplicative activation noise: every eligible relu output `v` becomes `v * (1 + d)`,
/// `d ~ U(-level, level)`.
#[derive(Debug, Clone, Copy)]
pub struct ActivationNoise {
    pub level: f64,
    pub stream: Stream,
}

/// Layer inputs recorded during a forward pass, for backprop.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `inputs[i]` is the input of layer `i`; the last entry is the logits.
    pub inputs: Vec<Tensor>,
    pub output: ProbVector,
}

/// Gradient of a parametric layer.
#[derive(Debug, Clone)]
pub struct ParamGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

fn layer_output_shape(kind: &LayerKind, shape: &[usize], layer: usize) -> Result<Vec<usize>> {
    let bad = |detail: String| Error::Layer { layer, detail };
    match *kind {
        LayerKind::Conv2d { in_channels, out_channels, kernel, stride } => {
            let [c, h, w] = match shape[..] {
                [c, h, w] => [c, h, w],
                _ => return Err(bad(format!("conv2d needs a [C,H,W] input, got {shape:?}"))),
            };
            if c != in_channels || kernel > h || kernel > w || stride == 0 || kernel == 0 {
                return Err(bad(format!(
                    "conv2d {in_channels}->{out_channels} k{kernel} incompatible with input {shape:?}"
                )));
            }
            Ok(vec![out_channels, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
        }
        LayerKind::Relu => Ok(shape.to_vec()),
        LayerKind::MaxPool2d => match shape[..] {
            [c, h, w] if h % 2 == 0 && w % 2 == 0 => Ok(vec![c, h / 2, w / 2]),
            _ => Err(bad(format!("maxpool2d needs even [C,H,W], got {shape:?}"))),
        },
        LayerKind::Dense { inputs, outputs } => {
            let n: usize = shape.iter().product();
            if n != inputs {
                return Err(bad(format!("dense expects {inputs} inputs, gets {n}")));
            }
            Ok(vec![outputs])
        }
        LayerKind::Softmax => {
            if shape.len() != 1 {
                return Err(bad(format!("softmax needs a vector, got {shape:?}")));
            }
            Ok(shape.to_vec())
        }
    }
}

fn param_shapes(kind: &LayerKind) -> Option<(Vec<usize>, usize)> {
    match *kind {
        LayerKind::Conv2d { in_channels, out_channels, kernel, .. } => {
            Some((vec![out_channels, in_channels, kernel, kernel], out_channels))
        }
        LayerKind::Dense { inputs, outputs } => Some((vec![outputs, inputs], outputs)),
        _ => None,
    }
}

/// Validate an architecture and return the class count.
pub fn check_arch(input_shape: [usize; 3], layers: &[LayerSpec]) -> Result<usize> {
    let softmaxes = layers.iter().filter(|l| l.kind == LayerKind::Softmax).count();
    if softmaxes != 1 || layers.last().map(|l| l.kind) != Some(LayerKind::Softmax) {
        return Err(Error::InvalidArgument("architecture must end in exactly one softmax".into()));
    }
    let mut shape = input_shape.to_vec();
    for (i, l) in layers.iter().enumerate() {
        shape = layer_output_shape(&l.kind, &shape, i)?;
    }
    if shape[0] < 2 {
        return Err(Error::InvalidArgument("need at least two classes".into()));
    }
    Ok(shape[0])
}

impl Model {
    pub fn new(input_shape: [usize; 3], layers: Vec<LayerSpec>, params: Vec<Option<Params>>) -> Result<Self> {
        let class_count = check_arch(input_shape, &layers)?;
        if params.len() != layers.len() {
            return Err(Error::InvalidArgument(format!(
                "{} parameter slots for {} layers",
                params.len(),
                layers.len()
            )));
        }
        for (i, (l, p)) in layers.iter().zip(&params).enumerate() {
            match (param_shapes(&l.kind), p) {
                (None, None) => {}
                (Some((wshape, nb)), Some(p)) => {
                    if p.weights.shape() != wshape.as_slice() || p.bias.len() != nb {
                        return Err(Error::Layer {
                            layer: i,
                            detail: format!(
                                "{} expects weights {wshape:?} + {nb} biases, got {:?} + {}",
                                l.kind.name(),
                                p.weights.shape(),
                                p.bias.len()
                            ),
                        });
                    }
                    if !p.weights.is_finite() || p.bias.iter().any(|b| !b.is_finite()) {
                        return Err(Error::Layer { layer: i, detail: "non-finite parameters".into() });
                    }
                }
                (Some(_), None) => return Err(Error::Layer { layer: i, detail: "missing parameters".into() }),
                (None, Some(_)) => {
                    return Err(Error::Layer { layer: i, detail: format!("{} takes no parameters", l.kind.name()) })
                }
            }
        }
        Ok(Self { input_shape, layers, params, class_count })
    }

    /// He-initialized weights, zero biases.
    pub fn init(input_shape: [usize; 3], layers: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        check_arch(input_shape, &layers)?;
        let root = Stream::new(seed).fork_named("init");
        let params = layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                param_shapes(&l.kind).map(|(wshape, nb)| {
                    let fan_in: usize = wshape[1..].iter().product();
                    let std = (2.0 / fan_in as f64).sqrt();
                    let mut s = root.fork(i as u64);
                    let n: usize = wshape.iter().product();
                    let data = (0..n).map(|_| std * s.normal()).collect();
                    Params { weights: Tensor::new(wshape, data).expect("shape from spec"), bias: vec![0.0; nb] }
                })
            })
            .collect();
        Self::new(input_shape, layers, params)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerSpec] {
        &mut self.layers
    }

    pub fn params(&self) -> &[Option<Params>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Option<Params>] {
        &mut self.params
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Indices of conv/dense layers.
    pub fn parametric_layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers.iter().enumerate().filter(|(_, l)| l.kind.is_parametric()).map(|(i, _)| i)
    }

    /// `(filter count, weights per filter)` of a parametric layer. A conv
    /// filter is one output channel's kernel; a dense filter is one output row.
    pub fn filter_geometry(&self, layer: usize) -> Option<(usize, usize)> {
        let p = self.params.get(layer)?.as_ref()?;
        let filters = p.weights.shape()[0];
        Some((filters, p.weights.len() / filters))
    }

    /// Output positions each filter of a parametric layer is evaluated at.
    pub fn output_positions(&self, layer: usize) -> Option<usize> {
        let mut shape = self.input_shape.to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            shape = layer_output_shape(&l.kind, &shape, i).ok()?;
            if i == layer {
                return match l.kind {
                    LayerKind::Conv2d { .. } => Some(shape[1] * shape[2]),
                    LayerKind::Dense { .. } => Some(1),
                    _ => None,
                };
            }
        }
        None
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.shape() != self.input_shape {
            return Err(shape_err("model input", format!("expected {:?}, got {:?}", self.input_shape, input.shape())));
        }
        Ok(())
    }

    fn check_masks(&self, masks: &LayerMasks) -> Result<()> {
        if masks.len() != self.layers.len() {
            return Err(Error::PlanMismatch(format!("{} mask slots for {} layers", masks.len(), self.layers.len())));
        }
        for (i, (m, p)) in masks.iter().zip(&self.params).enumerate() {
            match (m, p) {
                (None, _) => {}
                (Some(m), Some(p)) if m.len() == p.weights.len() => {}
                (Some(m), _) => {
                    return Err(Error::PlanMismatch(format!("layer {i}: mask of {} bits does not fit", m.len())))
                }
            }
        }
        Ok(())
    }

    fn run(
        &self,
        input: &Tensor,
        masks: Option<&LayerMasks>,
        noise: Option<ActivationNoise>,
        keep_trace: bool,
    ) -> Result<Trace> {
        self.check_input(input)?;
        if let Some(m) = masks {
            self.check_masks(m)?;
        }
        let mut inputs = Vec::with_capacity(if keep_trace { self.layers.len() } else { 0 });
        let mut x = input.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let mask = masks.and_then(|m| m[i].as_deref());
            let next = match l.kind {
                LayerKind::Conv2d { stride, .. } => {
                    let p = self.params[i].as_ref().expect("validated");
                    ops::conv2d_forward(&x, &p.weights, &p.bias, stride, mask)?
                }
                LayerKind::Relu => {
                    let mut y = ops::relu_forward(&x);
                    if let (Some(n), true) = (noise, l.noise_eligible) {
                        let s = n.stream.fork(i as u64);
                        for (k, v) in y.data_mut().iter_mut().enumerate() {
                            let u = (s.at(k as u64) >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
                            *v *= 1.0 + n.level * (2.0 * u - 1.0);
                        }
                    }
                    y
                }
                LayerKind::MaxPool2d => ops::maxpool2d_forward(&x)?,
                LayerKind::Dense { .. } => {
                    let p = self.params[i].as_ref().expect("validated");
                    Tensor::vector(ops::dense_forward(x.data(), &p.weights, &p.bias, mask)?)
                }
                LayerKind::Softmax => {
                    let out = ops::softmax(x.data());
                    if keep_trace {
                        inputs.push(x);
                    }
                    return Ok(Trace { inputs, output: out });
                }
            };
            if keep_trace {
                inputs.push(std::mem::replace(&mut x, next));
            } else {
                x = next;
            }
        }
        unreachable!("architecture validated to end in softmax")
    }

    /// Dense reference pass.
    pub fn predict(&self, input: &Tensor) -> Result<ProbVector> {
        Ok(self.run(input, None, None, false)?.output)
    }

    pub fn forward_masked(&self, input: &Tensor, masks: &LayerMasks) -> Result<ProbVector> {
        Ok(self.run(input, Some(masks), None, false)?.output)
    }

    pub fn forward_activation_noise(&self, input: &Tensor, noise: ActivationNoise) -> Result<ProbVector> {
        Ok(self.run(input, None, Some(noise), false)?.output)
    }

    pub fn forward_trace(&self, input: &Tensor, masks: Option<&LayerMasks>) -> Result<Trace> {
        self.run(input, masks, None, true)
    }

    /// Backpropagate a gradient with respect to the logits through a trace.
    ///
    /// Returns the input gradient and, when `param_grads` is set, one entry per
    /// layer (`Some` for parametric layers).
    pub fn backward(
        &self,
        trace: &Trace,
        masks: Option<&LayerMasks>,
        grad_logits: &[f64],
        param_grads: bool,
    ) -> Result<(Tensor, Option<Vec<Option<ParamGrad>>>)> {
        let n = self.layers.len();
        if trace.inputs.len() != n {
            return Err(shape_err("backward", "trace does not match model"));
        }
        let mut pg: Vec<Option<ParamGrad>> = vec![None; n];
        // The softmax layer is folded into the loss; start from the logits.
        let mut g = Tensor::vector(grad_logits.to_vec());
        for i in (0..n - 1).rev() {
            let x = &trace.inputs[i];
            let mask = masks.and_then(|m| m[i].as_deref());
            g = match self.layers[i].kind {
                LayerKind::Conv2d { stride, .. } => {
                    let p = self.params[i].as_ref().expect("validated");
                    let cg = ops::conv2d_backward(x, &p.weights, &p.bias, stride, mask, &g, param_grads)?;
                    if param_grads {
                        pg[i] = Some(ParamGrad { weights: cg.weights.unwrap(), bias: cg.bias.unwrap() });
                    }
                    cg.input
                }
                LayerKind::Relu => ops::relu_backward(x, &g),
                LayerKind::MaxPool2d => ops::maxpool2d_backward(x, &g)?,
                LayerKind::Dense { .. } => {
                    let p = self.params[i].as_ref().expect("validated");
                    let dg = ops::dense_backward(x.data(), &p.weights, &p.bias, mask, g.data(), param_grads)?;
                    if param_grads {
                        pg[i] = Some(ParamGrad { weights: dg.weights.unwrap(), bias: dg.bias.unwrap() });
                    }
                    Tensor::new(x.shape().to_vec(), dg.input)?
                }
                LayerKind::Softmax => unreachable!("softmax is terminal"),
            };
        }
        Ok((g, param_grads.then_some(pg)))
    }
}

/// A scalar objective over the network output (and, for the composite loss, the input).
#[derive(Debug, Clone, PartialEq)]
pub enum LossSpec {
    /// `-ln p[label]`
    CrossEntropy { label: usize },
    /// The raw logit of one class.
    Logit { class: usize },
    /// `max(max_{i != target} z_i - z_target, -k)`
    CwMargin { target: usize, k: f64 },
    /// `c * margin + beta * |softmax(z) - target_probs|_1 + |x - origin|_2^2`
    Composite { target: usize, k: f64, c: f64, beta: f64, target_probs: Vec<f64>, origin: Tensor },
}

impl LossSpec {
    fn validate(&self, classes: usize, input: &Tensor) -> Result<()> {
        let idx = match self {
            LossSpec::CrossEntropy { label } => *label,
            LossSpec::Logit { class } => *class,
            LossSpec::CwMargin { target, .. } => *target,
            LossSpec::Composite { target, target_probs, origin, .. } => {
                if target_probs.len() != classes {
                    return Err(shape_err(
                        "loss",
                        format!("{} target probs for {classes} classes", target_probs.len()),
                    ));
                }
                if origin.shape() != input.shape() {
                    return Err(shape_err("loss", "origin shape differs from input"));
                }
                *target
            }
        };
        if idx >= classes {
            return Err(Error::ClassIndex { index: idx, classes });
        }
        Ok(())
    }
}

/// Largest logit among classes other than `target` (lowest index on ties).
pub fn runner_up(logits: &[f64], target: usize) -> usize {
    let mut best = usize::MAX;
    for (i, &z) in logits.iter().enumerate() {
        if i != target && (best == usize::MAX || z > logits[best]) {
            best = i;
        }
    }
    best
}

pub fn cw_margin(logits: &[f64], target: usize, k: f64) -> f64 {
    let other = runner_up(logits, target);
    (logits[other] - logits[target]).max(-k)
}

fn l1_to(probs: &[f64], target: &[f64]) -> f64 {
    probs.iter().zip(target).map(|(p, q)| (p - q).abs()).sum()
}

/// Loss value and its gradient with respect to the logits. The composite
/// loss's input-space term is handled by the callers.
fn loss_and_logit_grad(loss: &LossSpec, out: &ProbVector) -> (f64, Vec<f64>) {
    let z = &out.logits;
    let p = &out.probs;
    let c = z.len();
    match loss {
        LossSpec::CrossEntropy { label } => {
            let mut g = p.clone();
            g[*label] -= 1.0;
            // log-sum-exp form keeps the value finite for saturated probabilities
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            (lse - z[*label], g)
        }
        LossSpec::Logit { class } => {
            let mut g = vec![0.0; c];
            g[*class] = 1.0;
            (z[*class], g)
        }
        LossSpec::CwMargin { target, k } => margin_term(z, *target, *k, 1.0),
        LossSpec::Composite { target, k, c: weight, beta, target_probs, .. } => {
            let (fv, mut g) = margin_term(z, *target, *k, *weight);
            let gp: Vec<f64> = p
                .iter()
                .zip(target_probs)
                .map(|(a, b)| {
                    beta * if a > b {
                        1.0
                    } else if a < b {
                        -1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            for (gi, d) in g.iter_mut().zip(ops::softmax_backward(p, &gp)) {
                *gi += d;
            }
            (fv + beta * l1_to(p, target_probs), g)
        }
    }
}

fn margin_term(z: &[f64], target: usize, k: f64, weight: f64) -> (f64, Vec<f64>) {
    let other = runner_up(z, target);
    let diff = z[other] - z[target];
    let mut g = vec![0.0; z.len()];
    if diff > -k {
        g[other] = weight;
        g[target] = -weight;
    }
    (weight * diff.max(-k), g)
}

fn origin_term(loss: &LossSpec, input: &Tensor) -> Option<(f64, Vec<f64>)> {
    match loss {
        LossSpec::Composite { origin, .. } => {
            let d: Vec<f64> = input.data().iter().zip(origin.data()).map(|(a, b)| a - b).collect();
            Some((d.iter().map(|v| v * v).sum(), d.iter().map(|v| 2.0 * v).collect()))
        }
        _ => None,
    }
}

pub fn loss_value(model: &Model, input: &Tensor, loss: &LossSpec) -> Result<f64> {
    loss.validate(model.class_count(), input)?;
    let out = model.predict(input)?;
    let (v, _) = loss_and_logit_grad(loss, &out);
    Ok(v + origin_term(loss, input).map_or(0.0, |(o, _)| o))
}

/// Loss value and `d loss / d input` through the dense model.
pub fn loss_and_input_gradient(model: &Model, input: &Tensor, loss: &LossSpec) -> Result<(f64, Tensor, ProbVector)> {
    loss.validate(model.class_count(), input)?;
    let trace = model.forward_trace(input, None)?;
    let (v, gz) = loss_and_logit_grad(loss, &trace.output);
    let (mut gx, _) = model.backward(&trace, None, &gz, false)?;
    let mut total = v;
    if let Some((o, go)) = origin_term(loss, input) {
        total += o;
        for (a, b) in gx.data_mut().iter_mut().zip(go) {
            *a += b;
        }
    }
    Ok((total, gx, trace.output))
}

pub fn input_gradient(model: &Model, input: &Tensor, loss: &LossSpec) -> Result<Tensor> {
    Ok(loss_and_input_gradient(model, input, loss)?.1)
}

/// Cross-entropy and parameter gradients for one labelled sample.
pub fn param_gradients(
    model: &Model,
    input: &Tensor,
    label: usize,
) -> Result<(f64, Vec<Option<ParamGrad>>, ProbVector)> {
    let loss = LossSpec::CrossEntropy { label };
    loss.validate(model.class_count(), input)?;
    let trace = model.forward_trace(input, None)?;
    let (v, gz) = loss_and_logit_grad(&loss, &trace.output);
    let (_, pg) = model.backward(&trace, None, &gz, true)?;
    Ok((v, pg.expect("requested"), trace.output))
}
