//! Offline per-filter magnitude thresholds.
//!
//! For each filter and each grid rate `g / 32`, the table holds a magnitude
//! `tau` such that dropping every weight with `|w| < tau` removes the largest
//! achievable fraction of the filter that does not exceed the rate. Weights
//! of equal magnitude are never split: either all are dropped or none.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;

pub const RATE_STEPS: usize = 32;

/// Grid rate for step `g`.
pub fn grid_rate(g: usize) -> f64 {
    g as f64 / RATE_STEPS as f64
}

/// Largest grid step whose rate does not exceed `rate`.
pub fn snap_down(rate: f64) -> usize {
    ((rate * RATE_STEPS as f64).floor().max(0.0) as usize).min(RATE_STEPS - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterThresholds {
    /// `tau[g]` for each grid step.
    pub tau: Vec<f64>,
    /// Weights removed by `tau[g]`.
    pub drops: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerThresholds {
    pub layer: usize,
    pub weights_per_filter: usize,
    pub filters: Vec<FilterThresholds>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub rate_steps: usize,
    pub layers: Vec<LayerThresholds>,
}

/// Thresholds for one filter's weights.
pub fn filter_thresholds(weights: &[f64]) -> FilterThresholds {
    let mut mags: Vec<f64> = weights.iter().map(|w| w.abs()).collect();
    mags.sort_by(f64::total_cmp);
    let n = mags.len();
    let mut tau = Vec::with_capacity(RATE_STEPS);
    let mut drops = Vec::with_capacity(RATE_STEPS);
    for g in 0..RATE_STEPS {
        let cap = g * n / RATE_STEPS;
        // A cut after position d is achievable iff it does not split a run of equal magnitudes.
        let d = (1..=cap).rev().find(|&d| d == n || mags[d] > mags[d - 1]).unwrap_or(0);
        let t = if d == 0 {
            0.0
        } else if d == n {
            f64::INFINITY
        } else {
            let (lo, hi) = (mags[d - 1], mags[d]);
            let mid = lo + (hi - lo) / 2.0;
            if mid > lo {
                mid
            } else {
                hi
            }
        };
        tau.push(t);
        drops.push(d);
    }
    FilterThresholds { tau, drops }
}

pub fn profile_thresholds(model: &Model) -> ThresholdTable {
    let layers = model
        .parametric_layers()
        .map(|layer| {
            let (count, per) = model.filter_geometry(layer).expect("parametric");
            let w = model.params()[layer].as_ref().expect("parametric").weights.data();
            LayerThresholds {
                layer,
                weights_per_filter: per,
                filters: (0..count).map(|f| filter_thresholds(&w[f * per..(f + 1) * per])).collect(),
            }
        })
        .collect();
    ThresholdTable { rate_steps: RATE_STEPS, layers }
}

impl ThresholdTable {
    pub fn layer(&self, layer: usize) -> Option<&LayerThresholds> {
        self.layers.iter().find(|l| l.layer == layer)
    }

    /// Check that the table was profiled from a model with this geometry.
    pub fn check_model(&self, model: &Model) -> Result<()> {
        if self.rate_steps != RATE_STEPS {
            return Err(Error::PlanMismatch(format!("table has {} rate steps", self.rate_steps)));
        }
        let expected: Vec<usize> = model.parametric_layers().collect();
        let have: Vec<usize> = self.layers.iter().map(|l| l.layer).collect();
        if expected != have {
            return Err(Error::PlanMismatch(format!("table covers layers {have:?}, model has {expected:?}")));
        }
        for l in &self.layers {
            let (count, per) = model.filter_geometry(l.layer).expect("parametric");
            if l.filters.len() != count || l.weights_per_filter != per {
                return Err(Error::PlanMismatch(format!(
                    "layer {}: table has {}x{} filters, model {count}x{per}",
                    l.layer,
                    l.filters.len(),
                    l.weights_per_filter
                )));
            }
        }
        Ok(())
    }
}
