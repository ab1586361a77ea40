use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{param_gradients, LayerSpec, Model};
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
}

fn default_batch() -> usize {
    16
}

fn default_momentum() -> f64 {
    0.9
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 0.02, epochs: 20, seed: 7, batch_size: default_batch(), momentum: default_momentum() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub final_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

pub fn accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for (x, &y) in data.images.iter().zip(&data.labels) {
        if model.predict(x)?.argmax() == y {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Per-sample cross-entropy past which training is considered blown up.
pub const DIVERGED_LOSS: f64 = 1e6;

/// Minibatch SGD with momentum on cross-entropy. Deterministic given the seed.
pub fn train(
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    arch: Vec<LayerSpec>,
    cfg: &TrainConfig,
) -> Result<(Model, TrainReport)> {
    let shape = train_set.image_shape().ok_or_else(|| Error::InvalidArgument("empty training set".into()))?;
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut model = Model::init(shape, arch, cfg.seed)?;
    if model.class_count() != train_set.class_count {
        return Err(Error::InvalidArgument(format!(
            "architecture emits {} classes, dataset has {}",
            model.class_count(),
            train_set.class_count
        )));
    }
    let order_stream = Stream::new(cfg.seed).fork_named("shuffle");
    let mut velocity: Vec<Option<(Vec<f64>, Vec<f64>)>> = model
        .params()
        .iter()
        .map(|p| p.as_ref().map(|p| (vec![0.0; p.weights.len()], vec![0.0; p.bias.len()])))
        .collect();
    let mut final_loss = f64::NAN;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order_stream.fork(epoch as u64).shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Vec<Option<(Vec<f64>, Vec<f64>)>> =
                velocity.iter().map(|v| v.as_ref().map(|(w, b)| (vec![0.0; w.len()], vec![0.0; b.len()]))).collect();
            for &i in batch {
                let (loss, grads, _) = param_gradients(&model, &train_set.images[i], train_set.labels[i])?;
                if !(loss.is_finite() && loss < DIVERGED_LOSS) {
                    return Err(Error::Diverged { epoch, loss });
                }
                epoch_loss += loss;
                for (a, g) in acc.iter_mut().zip(grads) {
                    if let (Some((aw, ab)), Some(g)) = (a, g) {
                        aw.iter_mut().zip(&g.weights).for_each(|(x, y)| *x += y);
                        ab.iter_mut().zip(&g.bias).for_each(|(x, y)| *x += y);
                    }
                }
            }
            let scale = cfg.lr / batch.len() as f64;
            for ((p, v), a) in model.params_mut().iter_mut().zip(velocity.iter_mut()).zip(&acc) {
                if let (Some(p), Some((vw, vb)), Some((aw, ab))) = (p, v, a) {
                    for ((w, v), g) in p.weights.data_mut().iter_mut().zip(vw.iter_mut()).zip(aw) {
                        *v = cfg.momentum * *v - scale * g;
                        *w += *v;
                    }
                    for ((b, v), g) in p.bias.iter_mut().zip(vb.iter_mut()).zip(ab) {
                        *v = cfg.momentum * *v - scale * g;
                        *b += *v;
                    }
                }
            }
        }
        final_loss = epoch_loss / train_set.len() as f64;
        let params_finite =
            model.params().iter().flatten().all(|p| p.weights.is_finite() && p.bias.iter().all(|b| b.is_finite()));
        if !(final_loss.is_finite() && params_finite) {
            return Err(Error::Diverged { epoch, loss: final_loss });
        }
    }
    let report = TrainReport {
        epochs: cfg.epochs,
        final_loss,
        train_accuracy: accuracy(&model, train_set)?,
        test_accuracy: test_set.map(|t| accuracy(&model, t)).transpose()?,
    };
    Ok((model, report))
}
