//! Forward layers and their vector-Jacobian products.
//!
//! Convolutions are valid (no padding) cross-correlations. An optional weight
//! mask zeroes dropped weights by building an effective weight buffer, so a
//! masked pass performs exactly the same arithmetic as a pass over a model
//! whose dropped weights were physically set to zero.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::{argmax, Tensor};

/// A softmax output together with the logits it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbVector {
    pub probs: Vec<f64>,
    pub logits: Vec<f64>,
}

impl ProbVector {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

/// Weights with dropped entries replaced by exact zeros.
pub fn masked_weights<'a>(weights: &'a [f64], mask: Option<&[bool]>) -> Result<Cow<'a, [f64]>> {
    match mask {
        None => Ok(Cow::Borrowed(weights)),
        Some(m) if m.len() != weights.len() => {
            Err(shape_err("mask", format!("mask has {} entries, layer has {} weights", m.len(), weights.len())))
        }
        Some(m) => Ok(Cow::Owned(weights.iter().zip(m).map(|(&w, &keep)| if keep { w } else { 0.0 }).collect())),
    }
}

fn conv_dims(input: &Tensor, weights: &Tensor, bias: &[f64], stride: usize) -> Result<ConvDims> {
    let [c_in, h, w] = input.chw("conv2d")?;
    let (c_out, wc, kh, kw) = match weights.shape()[..] {
        [a, b, c, d] => (a, b, c, d),
        _ => return Err(shape_err("conv2d", format!("weights must be 4-D, got {:?}", weights.shape()))),
    };
    if wc != c_in {
        return Err(shape_err("conv2d", format!("input has {c_in} channels, kernel expects {wc}")));
    }
    if bias.len() != c_out {
        return Err(shape_err("conv2d", format!("bias has {} entries for {c_out} filters", bias.len())));
    }
    if stride == 0 {
        return Err(shape_err("conv2d", "stride must be positive"));
    }
    if kh > h || kw > w {
        return Err(shape_err("conv2d", format!("kernel {kh}x{kw} larger than input {h}x{w}")));
    }
    Ok(ConvDims { c_in, h, w, c_out, kh, kw, stride, oh: (h - kh) / stride + 1, ow: (w - kw) / stride + 1 })
}

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
}

pub fn conv2d_forward(
    input: &Tensor,
    weights: &Tensor,
    bias: &[f64],
    stride: usize,
    mask: Option<&[bool]>,
) -> Result<Tensor> {
    let d = conv_dims(input, weights, bias, stride)?;
    let wts = masked_weights(weights.data(), mask)?;
    let x = input.data();
    let mut out = vec![0.0; d.c_out * d.oh * d.ow];
    let ksize = d.c_in * d.kh * d.kw;
    for o in 0..d.c_out {
        let filt = &wts[o * ksize..(o + 1) * ksize];
        let plane = &mut out[o * d.oh * d.ow..(o + 1) * d.oh * d.ow];
        for i in 0..d.oh {
            for j in 0..d.ow {
                let mut acc = bias[o];
                for c in 0..d.c_in {
                    for ki in 0..d.kh {
                        let row = (c * d.h + i * d.stride + ki) * d.w + j * d.stride;
                        let wrow = (c * d.kh + ki) * d.kw;
                        for kj in 0..d.kw {
                            acc += filt[wrow + kj] * x[row + kj];
                        }
                    }
                }
                plane[i * d.ow + j] = acc;
            }
        }
    }
    Tensor::new(vec![d.c_out, d.oh, d.ow], out)
}

/// Gradients of a convolution given the upstream gradient.
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub fn conv2d_backward(
    input: &Tensor,
    weights: &Tensor,
    bias: &[f64],
    stride: usize,
    mask: Option<&[bool]>,
    grad_out: &Tensor,
    param_grads: bool,
) -> Result<ConvGrads> {
    let d = conv_dims(input, weights, bias, stride)?;
    if grad_out.shape() != [d.c_out, d.oh, d.ow] {
        return Err(shape_err("conv2d_backward", format!("grad shape {:?}", grad_out.shape())));
    }
    let wts = masked_weights(weights.data(), mask)?;
    let x = input.data();
    let g = grad_out.data();
    let ksize = d.c_in * d.kh * d.kw;
    let mut gx = vec![0.0; x.len()];
    let mut gw = if param_grads { vec![0.0; wts.len()] } else { Vec::new() };
    let mut gb = if param_grads { vec![0.0; d.c_out] } else { Vec::new() };
    for o in 0..d.c_out {
        let filt = &wts[o * ksize..(o + 1) * ksize];
        for i in 0..d.oh {
            for j in 0..d.ow {
                let go = g[(o * d.oh + i) * d.ow + j];
                if go == 0.0 {
                    continue;
                }
                if param_grads {
                    gb[o] += go;
                }
                for c in 0..d.c_in {
                    for ki in 0..d.kh {
                        let row = (c * d.h + i * d.stride + ki) * d.w + j * d.stride;
                        let wrow = (c * d.kh + ki) * d.kw;
                        for kj in 0..d.kw {
                            gx[row + kj] += filt[wrow + kj] * go;
                            if param_grads {
                                gw[o * ksize + wrow + kj] += x[row + kj] * go;
                            }
                        }
                    }
                }
            }
        }
    }
    if let (true, Some(m)) = (param_grads, mask) {
        for (gwi, &keep) in gw.iter_mut().zip(m) {
            if !keep {
                *gwi = 0.0;
            }
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), gx)?,
        weights: param_grads.then_some(gw),
        bias: param_grads.then_some(gb),
    })
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = input.data().iter().zip(grad_out.data()).map(|(&x, &g)| if x > 0.0 { g } else { 0.0 }).collect();
    Tensor::new(input.shape().to_vec(), data).expect("relu_backward preserves shape")
}

fn pool_dims(input: &Tensor) -> Result<[usize; 3]> {
    let [c, h, w] = input.chw("maxpool2d")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err("maxpool2d", format!("extent {h}x{w} is not even")));
    }
    Ok([c, h, w])
}

/// 2x2 max pooling with stride 2. Ties pick the first element in row-major order.
pub fn maxpool2d_forward(input: &Tensor) -> Result<Tensor> {
    let [c, h, w] = pool_dims(input)?;
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let base = (ch * h + 2 * i) * w + 2 * j;
                let m = x[base].max(x[base + 1]).max(x[base + w]).max(x[base + w + 1]);
                out.push(m);
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

pub fn maxpool2d_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    let [c, h, w] = pool_dims(input)?;
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let g = grad_out.data();
    let mut gx = vec![0.0; x.len()];
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let base = (ch * h + 2 * i) * w + 2 * j;
                let cands = [base, base + 1, base + w, base + w + 1];
                let mut best = cands[0];
                for &k in &cands[1..] {
                    if x[k] > x[best] {
                        best = k;
                    }
                }
                gx[best] += g[(ch * oh + i) * ow + j];
            }
        }
    }
    Tensor::new(input.shape().to_vec(), gx)
}

fn dense_dims(input: &[f64], weights: &Tensor, bias: &[f64]) -> Result<(usize, usize)> {
    let (m, n) = match weights.shape()[..] {
        [m, n] => (m, n),
        _ => return Err(shape_err("dense", format!("weights must be 2-D, got {:?}", weights.shape()))),
    };
    if input.len() != n {
        return Err(shape_err("dense", format!("input has {} values, weights expect {n}", input.len())));
    }
    if bias.len() != m {
        return Err(shape_err("dense", format!("bias has {} entries for {m} outputs", bias.len())));
    }
    Ok((m, n))
}

/// Affine map `W x + b` over the flattened input.
pub fn dense_forward(input: &[f64], weights: &Tensor, bias: &[f64], mask: Option<&[bool]>) -> Result<Vec<f64>> {
    let (m, n) = dense_dims(input, weights, bias)?;
    let wts = masked_weights(weights.data(), mask)?;
    Ok((0..m)
        .map(|r| {
            let row = &wts[r * n..(r + 1) * n];
            let mut acc = bias[r];
            for (w, x) in row.iter().zip(input) {
                acc += w * x;
            }
            acc
        })
        .collect())
}

pub struct DenseGrads {
    pub input: Vec<f64>,
    pub weights: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub fn dense_backward(
    input: &[f64],
    weights: &Tensor,
    bias: &[f64],
    mask: Option<&[bool]>,
    grad_out: &[f64],
    param_grads: bool,
) -> Result<DenseGrads> {
    let (m, n) = dense_dims(input, weights, bias)?;
    if grad_out.len() != m {
        return Err(shape_err("dense_backward", format!("grad has {} values for {m} outputs", grad_out.len())));
    }
    let wts = masked_weights(weights.data(), mask)?;
    let mut gx = vec![0.0; n];
    for r in 0..m {
        let g = grad_out[r];
        for (gxi, w) in gx.iter_mut().zip(&wts[r * n..(r + 1) * n]) {
            *gxi += w * g;
        }
    }
    let (gw, gb) = if param_grads {
        let mut gw = Vec::with_capacity(m * n);
        for r in 0..m {
            for (c, x) in input.iter().enumerate() {
                let keep = mask.is_none_or(|mk| mk[r * n + c]);
                gw.push(if keep { grad_out[r] * x } else { 0.0 });
            }
        }
        (Some(gw), Some(grad_out.to_vec()))
    } else {
        (None, None)
    };
    Ok(DenseGrads { input: gx, weights: gw, bias: gb })
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> ProbVector {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    ProbVector { probs: exps.iter().map(|e| e / sum).collect(), logits: logits.to_vec() }
}

/// Pull a gradient with respect to the probabilities back to the logits.
pub fn softmax_backward(probs: &[f64], grad_probs: &[f64]) -> Vec<f64> {
    let dot: f64 = probs.iter().zip(grad_probs).map(|(p, g)| p * g).sum();
    probs.iter().zip(grad_probs).map(|(p, g)| p * (g - dot)).collect()
}
