//! Confidence-adaptive noise: the confidence of the clean pass sets a maximum
//! sparsification rate, and each noisy pass draws per-filter rates below it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ActivationNoise, LayerMasks, Model};
use crate::ops::ProbVector;
use crate::rng::Stream;
use crate::tensor::Tensor;
use crate::threshold::{grid_rate, snap_down, ThresholdTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    #[default]
    Sparsify,
    Activation,
}

impl std::str::FromStr for NoiseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sparsify" => Ok(NoiseMode::Sparsify),
            "activation" => Ok(NoiseMode::Activation),
            other => Err(Error::InvalidArgument(format!("unknown noise mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub sr_lo: f64,
    pub sr_hi: f64,
    pub gamma: f64,
    #[serde(default)]
    pub mode: NoiseMode,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { sr_lo: 0.1, sr_hi: 0.8, gamma: 4.0, mode: NoiseMode::Sparsify }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.sr_lo && self.sr_lo <= self.sr_hi && self.sr_hi < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "need 0 <= sr_lo <= sr_hi < 1, got {} and {}",
                self.sr_lo, self.sr_hi
            )));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidArgument(format!("gamma must be positive, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Top-2 probability margin.
pub fn confidence(p: &ProbVector) -> f64 {
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &v in &p.probs {
        if v > first {
            second = first;
            first = v;
        } else if v > second {
            second = v;
        }
    }
    (first - second).clamp(0.0, 1.0)
}

/// Saturating-exponential map from confidence to the maximum sparsification
/// rate, pinned to `sr_lo` at 0 and `sr_hi` at 1.
pub fn noise_budget(conf: f64, cfg: &NoiseConfig) -> f64 {
    let c = conf.clamp(0.0, 1.0);
    let shape = (1.0 - (-cfg.gamma * c).exp()) / (1.0 - (-cfg.gamma).exp());
    cfg.sr_lo + (cfg.sr_hi - cfg.sr_lo) * shape
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterPlan {
    /// Rate drawn from `U(0, max_rate)`.
    pub assigned_rate: f64,
    pub grid_step: usize,
    pub tau: f64,
    pub dropped: usize,
    pub nnz: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub layer: usize,
    pub weights_per_filter: usize,
    pub filters: Vec<FilterPlan>,
    /// Active-weight bit mask over the layer's weights, filter-major.
    pub mask: Vec<bool>,
}

impl LayerPlan {
    pub fn filter_mask(&self, f: usize) -> &[bool] {
        &self.mask[f * self.weights_per_filter..(f + 1) * self.weights_per_filter]
    }

    pub fn nnz(&self) -> Vec<usize> {
        self.filters.iter().map(|f| f.nnz).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsificationPlan {
    pub pass_seed: u64,
    pub max_rate: f64,
    pub layer_count: usize,
    pub layers: Vec<LayerPlan>,
}

impl SparsificationPlan {
    pub fn layer(&self, layer: usize) -> Option<&LayerPlan> {
        self.layers.iter().find(|l| l.layer == layer)
    }

    pub fn masks(&self) -> LayerMasks {
        let mut m: LayerMasks = vec![None; self.layer_count];
        for l in &self.layers {
            m[l.layer] = Some(l.mask.clone());
        }
        m
    }

    /// Fraction of planned weights dropped.
    pub fn achieved_sparsity(&self) -> f64 {
        let total: usize = self.layers.iter().map(|l| l.mask.len()).sum();
        let kept: usize = self.layers.iter().flat_map(|l| &l.filters).map(|f| f.nnz).sum();
        if total == 0 {
            0.0
        } else {
            1.0 - kept as f64 / total as f64
        }
    }

    pub fn check_model(&self, model: &Model) -> Result<()> {
        if self.layer_count != model.layers().len() {
            return Err(Error::PlanMismatch(format!(
                "plan for {} layers, model has {}",
                self.layer_count,
                model.layers().len()
            )));
        }
        for l in &self.layers {
            let Some((count, per)) = model.filter_geometry(l.layer) else {
                return Err(Error::PlanMismatch(format!("layer {} is not parametric", l.layer)));
            };
            if l.filters.len() != count || l.weights_per_filter != per || l.mask.len() != count * per {
                return Err(Error::PlanMismatch(format!("layer {} geometry differs", l.layer)));
            }
        }
        Ok(())
    }
}

/// The stream a filter's rate is drawn from.
pub fn filter_stream(pass_seed: u64, layer: usize, filter: usize) -> Stream {
    Stream::new(pass_seed).fork_named("sparsify").fork(layer as u64).fork(filter as u64)
}

/// Draw one noisy pass's per-filter rates and resolve them to masks.
pub fn draw_plan(model: &Model, table: &ThresholdTable, max_rate: f64, pass_seed: u64) -> Result<SparsificationPlan> {
    table.check_model(model)?;
    if !(0.0..1.0).contains(&max_rate) {
        return Err(Error::InvalidArgument(format!("max rate {max_rate} outside [0, 1)")));
    }
    let mut layers = Vec::new();
    for lt in &table.layers {
        if !model.layers()[lt.layer].noise_eligible {
            continue;
        }
        let w = model.params()[lt.layer].as_ref().expect("parametric").weights.data();
        let per = lt.weights_per_filter;
        let mut mask = Vec::with_capacity(w.len());
        let mut filters = Vec::with_capacity(lt.filters.len());
        for (f, ft) in lt.filters.iter().enumerate() {
            let assigned_rate = filter_stream(pass_seed, lt.layer, f).uniform(0.0, max_rate);
            let grid_step = snap_down(assigned_rate);
            let tau = ft.tau[grid_step];
            let before = mask.len();
            mask.extend(w[f * per..(f + 1) * per].iter().map(|x| x.abs() >= tau));
            let nnz = mask[before..].iter().filter(|&&k| k).count();
            filters.push(FilterPlan { assigned_rate, grid_step, tau, dropped: per - nnz, nnz });
        }
        layers.push(LayerPlan { layer: lt.layer, weights_per_filter: per, filters, mask });
    }
    Ok(SparsificationPlan { pass_seed, max_rate, layer_count: model.layers().len(), layers })
}

/// Forward pass with the plan's dropped weights zeroed.
pub fn noisy_forward(model: &Model, plan: &SparsificationPlan, input: &Tensor) -> Result<ProbVector> {
    plan.check_model(model)?;
    model.forward_masked(input, &plan.masks())
}

pub fn activation_stream(pass_seed: u64) -> Stream {
    Stream::new(pass_seed).fork_named("activation")
}

/// Forward pass with multiplicative uniform noise on eligible activations.
pub fn noisy_activation_forward(model: &Model, level: f64, input: &Tensor, pass_seed: u64) -> Result<ProbVector> {
    if !(0.0..1.0).contains(&level) {
        return Err(Error::InvalidArgument(format!("activation noise level {level} outside [0, 1)")));
    }
    model.forward_activation_noise(input, ActivationNoise { level, stream: activation_stream(pass_seed) })
}

/// One noisy pass in the configured mode at the given budget.
pub fn noisy_pass(
    model: &Model,
    table: &ThresholdTable,
    mode: NoiseMode,
    budget: f64,
    pass_seed: u64,
    input: &Tensor,
) -> Result<ProbVector> {
    match mode {
        NoiseMode::Sparsify => noisy_forward(model, &draw_plan(model, table, budget, pass_seed)?, input),
        NoiseMode::Activation => noisy_activation_forward(model, budget, input, pass_seed),
    }
}

/// Expected dropped fraction of a filter when its rate is `U(0, max_rate)`
/// snapped down to the grid.
pub fn expected_drop_fraction(drops: &[usize], weights: usize, max_rate: f64) -> f64 {
    if max_rate <= 0.0 {
        return 0.0;
    }
    let mut e = 0.0;
    for (g, &d) in drops.iter().enumerate() {
        let lo = grid_rate(g);
        let hi = if g + 1 == drops.len() { 1.0 } else { grid_rate(g + 1) };
        let overlap = (hi.min(max_rate) - lo).max(0.0);
        e += overlap / max_rate * d as f64 / weights as f64;
    }
    e
}
