//! Cycle-approximate model of the dynamically sparsified accelerator.
//!
//! Filters are packed into groups of `group_size` lanes that share one input
//! stream. Each lane consumes one active weight per cycle. The input window
//! starts at the slowest lane's next weight index; a lane whose next active
//! weight lies more than `lookahead` positions past that base waits. The
//! cycles a group needs beyond its densest lane's active-weight count are
//! stall cycles. The dense baseline spends the full filter size per group
//! and output position.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::sparsify::{LayerPlan, SparsificationPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AcceleratorConfig {
    pub group_size: usize,
    pub lookahead: usize,
    pub tiles: usize,
}

impl Default for AcceleratorConfig {
    fn default() -> Self {
        Self { group_size: 4, lookahead: 4, tiles: 1 }
    }
}

impl AcceleratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size == 0 || self.lookahead == 0 || self.tiles == 0 {
            return Err(Error::InvalidArgument(format!("accelerator extents must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterSlot {
    pub filter: usize,
    pub nnz: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub layer: usize,
    pub groups: Vec<Vec<FilterSlot>>,
}

impl Schedule {
    /// Sum over groups of the densest lane.
    pub fn ideal_cycles(&self) -> usize {
        self.groups.iter().map(|g| g.iter().map(|s| s.nnz).max().unwrap_or(0)).sum()
    }
}

/// Sort by active-weight count, descending (stable on filter id), and cut into
/// consecutive groups of `group_size`.
pub fn group_by_nnz(nnz: &[usize], group_size: usize) -> Vec<Vec<FilterSlot>> {
    let mut slots: Vec<FilterSlot> = nnz.iter().enumerate().map(|(filter, &nnz)| FilterSlot { filter, nnz }).collect();
    slots.sort_by(|a, b| b.nnz.cmp(&a.nnz).then(a.filter.cmp(&b.filter)));
    slots.chunks(group_size.max(1)).map(<[FilterSlot]>::to_vec).collect()
}

pub fn group_filters(plan: &LayerPlan, cfg: &AcceleratorConfig) -> Schedule {
    Schedule { layer: plan.layer, groups: group_by_nnz(&plan.nnz(), cfg.group_size) }
}

/// Per-cycle replay of a group's lanes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamTrace {
    pub cycles: usize,
    pub stalls: usize,
    /// Active weights each lane consumed.
    pub consumed: Vec<usize>,
    /// `selections[cycle][lane]`: input offset from the window base the lane's
    /// multiplexer selected, or `None` if the lane idled.
    pub selections: Vec<Vec<Option<usize>>>,
}

pub fn mask_stream_trace(masks: &[&[bool]], lookahead: usize) -> StreamTrace {
    let active: Vec<Vec<usize>> =
        masks.iter().map(|m| m.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i).collect()).collect();
    let mut pos = vec![0usize; masks.len()];
    let mut selections = Vec::new();
    loop {
        let base = active.iter().zip(&pos).filter_map(|(a, &p)| a.get(p).copied()).min();
        let Some(base) = base else { break };
        let row = active
            .iter()
            .zip(pos.iter_mut())
            .map(|(a, p)| match a.get(*p) {
                Some(&idx) if idx - base <= lookahead => {
                    *p += 1;
                    Some(idx - base)
                }
                _ => None,
            })
            .collect();
        selections.push(row);
    }
    let densest = active.iter().map(Vec::len).max().unwrap_or(0);
    StreamTrace { cycles: selections.len(), stalls: selections.len() - densest, consumed: pos, selections }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCycles {
    pub layer: usize,
    pub sparse: bool,
    /// Noisy passes accumulated into this entry.
    pub passes: usize,
    pub positions: usize,
    pub filters: usize,
    pub weights_per_filter: usize,
    pub active_weights: usize,
    pub consumed_weights: usize,
    pub dense_cycles: u64,
    pub sparse_cycles: u64,
    pub idle_mac_slots: u64,
    pub stall_cycles: u64,
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub dense_cycles: u64,
    pub sparse_cycles: u64,
    pub idle_mac_slots: u64,
    pub stall_cycles: u64,
    pub speedup: f64,
    /// Speedup over the sparsified layers only.
    pub eligible_speedup: f64,
    /// Active-weight sparsity over the sparsified layers, weighted by output positions.
    pub eligible_sparsity: f64,
    pub layers: Vec<LayerCycles>,
}

/// Makespan when groups with the given costs are dealt round-robin to tiles.
fn tiled(costs: &[u64], tiles: usize) -> u64 {
    let mut per = vec![0u64; tiles];
    for (i, c) in costs.iter().enumerate() {
        per[i % tiles] += c;
    }
    per.into_iter().max().unwrap_or(0)
}

fn ratio(dense: u64, sparse: u64) -> f64 {
    if sparse == 0 {
        1.0
    } else {
        dense as f64 / sparse as f64
    }
}

pub fn simulate_layer(
    plan: &LayerPlan,
    schedule: &Schedule,
    cfg: &AcceleratorConfig,
    positions: usize,
) -> Result<LayerCycles> {
    cfg.validate()?;
    let filters = plan.filters.len();
    let mut seen = vec![false; filters];
    for g in &schedule.groups {
        if g.is_empty() || g.len() > cfg.group_size {
            return Err(Error::Schedule(format!("group of {} filters with group size {}", g.len(), cfg.group_size)));
        }
        for s in g {
            if s.filter >= filters || std::mem::replace(&mut seen[s.filter], true) {
                return Err(Error::Schedule(format!("filter {} missing from plan or scheduled twice", s.filter)));
            }
            let mask_nnz = plan.filter_mask(s.filter).iter().filter(|&&k| k).count();
            if mask_nnz != s.nnz || plan.filters[s.filter].nnz != s.nnz {
                return Err(Error::Schedule(format!(
                    "filter {}: schedule says {} active weights, mask has {mask_nnz}",
                    s.filter, s.nnz
                )));
            }
        }
    }
    if let Some(f) = seen.iter().position(|s| !s) {
        return Err(Error::Schedule(format!("filter {f} not scheduled")));
    }
    let m = plan.weights_per_filter;
    let p = positions as u64;
    let (mut sparse_costs, mut idle, mut stalls, mut consumed) = (Vec::new(), 0u64, 0u64, 0usize);
    for g in &schedule.groups {
        let masks: Vec<&[bool]> = g.iter().map(|s| plan.filter_mask(s.filter)).collect();
        let trace = mask_stream_trace(&masks, cfg.lookahead);
        let densest = g.iter().map(|s| s.nnz).max().unwrap_or(0);
        idle += g.iter().map(|s| (densest - s.nnz) as u64).sum::<u64>() * p;
        stalls += trace.stalls as u64 * p;
        consumed += trace.consumed.iter().sum::<usize>();
        sparse_costs.push(trace.cycles as u64 * p);
    }
    let dense_costs = vec![m as u64 * p; schedule.groups.len()];
    let dense_cycles = tiled(&dense_costs, cfg.tiles);
    let sparse_cycles = tiled(&sparse_costs, cfg.tiles);
    Ok(LayerCycles {
        layer: plan.layer,
        sparse: true,
        passes: 1,
        positions,
        filters,
        weights_per_filter: m,
        active_weights: plan.filters.iter().map(|f| f.nnz).sum(),
        consumed_weights: consumed,
        dense_cycles,
        sparse_cycles,
        idle_mac_slots: idle,
        stall_cycles: stalls,
        speedup: ratio(dense_cycles, sparse_cycles),
    })
}

pub fn simulate_model(model: &Model, plan: &SparsificationPlan, cfg: &AcceleratorConfig) -> Result<CycleReport> {
    cfg.validate()?;
    plan.check_model(model)?;
    let mut layers = Vec::new();
    for layer in model.parametric_layers() {
        let positions = model.output_positions(layer).expect("parametric");
        let (filters, per) = model.filter_geometry(layer).expect("parametric");
        let lc = match plan.layer(layer) {
            Some(lp) => simulate_layer(lp, &group_filters(lp, cfg), cfg, positions)?,
            None => {
                let groups = filters.div_ceil(cfg.group_size);
                let cycles = tiled(&vec![(per * positions) as u64; groups], cfg.tiles);
                LayerCycles {
                    layer,
                    sparse: false,
                    passes: 1,
                    positions,
                    filters,
                    weights_per_filter: per,
                    active_weights: filters * per,
                    consumed_weights: filters * per,
                    dense_cycles: cycles,
                    sparse_cycles: cycles,
                    idle_mac_slots: 0,
                    stall_cycles: 0,
                    speedup: 1.0,
                }
            }
        };
        layers.push(lc);
    }
    Ok(finish(layers))
}

fn finish(layers: Vec<LayerCycles>) -> CycleReport {
    let sum = |f: &dyn Fn(&LayerCycles) -> u64, only_sparse: bool| -> u64 {
        layers.iter().filter(|l| !only_sparse || l.sparse).map(f).sum()
    };
    let dense = sum(&|l| l.dense_cycles, false);
    let sparse = sum(&|l| l.sparse_cycles, false);
    let elig_dense = sum(&|l| l.dense_cycles, true);
    let elig_sparse = sum(&|l| l.sparse_cycles, true);
    let act = sum(&|l| (l.active_weights * l.positions) as u64, true);
    let tot = sum(&|l| (l.filters * l.weights_per_filter * l.positions * l.passes) as u64, true);
    CycleReport {
        dense_cycles: dense,
        sparse_cycles: sparse,
        idle_mac_slots: sum(&|l| l.idle_mac_slots, false),
        stall_cycles: sum(&|l| l.stall_cycles, false),
        speedup: ratio(dense, sparse),
        eligible_speedup: ratio(elig_dense, elig_sparse),
        eligible_sparsity: if tot == 0 { 0.0 } else { 1.0 - act as f64 / tot as f64 },
        layers,
    }
}

/// Layer-wise sum of reports for the same model, e.g. one per noisy pass.
pub fn combine_reports(reports: &[CycleReport]) -> Option<CycleReport> {
    let (first, rest) = reports.split_first()?;
    let mut layers = first.layers.clone();
    for r in rest {
        if r.layers.len() != layers.len() {
            return None;
        }
        for (acc, l) in layers.iter_mut().zip(&r.layers) {
            if acc.layer != l.layer || acc.sparse != l.sparse {
                return None;
            }
            acc.passes += l.passes;
            acc.active_weights += l.active_weights;
            acc.consumed_weights += l.consumed_weights;
            acc.dense_cycles += l.dense_cycles;
            acc.sparse_cycles += l.sparse_cycles;
            acc.idle_mac_slots += l.idle_mac_slots;
            acc.stall_cycles += l.stall_cycles;
            acc.speedup = ratio(acc.dense_cycles, acc.sparse_cycles);
        }
    }
    Some(finish(layers))
}
