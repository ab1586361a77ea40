//! Tabular outputs: metric summaries, sweep tables, L1 histograms and cycle
//! breakdowns, rendered as CSV with a provenance comment on the first line.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::attack::{AttackConfig, AttackKind, TargetMode};
use crate::detect::Metrics;
use crate::sim::CycleReport;
use crate::store::Provenance;

pub const HIST_BIN_WIDTH: f64 = 0.05;
pub const HIST_BINS: usize = 40;

/// Counts over `[0, 2]` in bins of width 0.05. The value 2 lands in the last
/// bin; out-of-range values are clamped.
pub fn histogram(values: &[f64]) -> Vec<u64> {
    let mut counts = vec![0u64; HIST_BINS];
    for &v in values {
        let bin = ((v / HIST_BIN_WIDTH).floor().max(0.0) as usize).min(HIST_BINS - 1);
        counts[bin] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn render(&self, provenance: Option<&Provenance>) -> String {
        let mut out = String::new();
        if let Some(p) = provenance {
            out.push_str(&provenance_comment(p));
            out.push('\n');
        }
        out.push_str(&self.header.join(","));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.iter().map(|c| escape(c)).collect::<Vec<_>>().join(","));
            out.push('\n');
        }
        out
    }
}

pub fn provenance_comment(p: &Provenance) -> String {
    format!("# config_hash={} base_seed={} tool_version={}", p.config_hash, p.base_seed, p.tool_version)
}

fn escape(cell: &str) -> String {
    if cell.contains([',', '"', '\n']) {
        format!("\"{}\"", cell.replace('"', "\"\""))
    } else {
        cell.to_string()
    }
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

pub fn mode_name(m: TargetMode) -> &'static str {
    match m {
        TargetMode::Next => "next",
        TargetMode::LeastLikely => "least_likely",
    }
}

/// Aggregates for one attack configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub attack: AttackConfig,
    pub attempted: usize,
    pub successes: usize,
    pub mean_l2: Option<f64>,
    pub mean_attack_l1: Option<f64>,
    /// Detector metrics over the successful samples.
    pub detection: Metrics,
}

fn attack_order(a: &AttackConfig, b: &AttackConfig) -> Ordering {
    a.kind
        .name()
        .cmp(b.kind.name())
        .then(mode_name(a.target_mode).cmp(mode_name(b.target_mode)))
        .then(a.k.total_cmp(&b.k))
        .then(a.beta.total_cmp(&b.beta))
        .then(a.eps.total_cmp(&b.eps))
        .then(a.c.total_cmp(&b.c))
}

pub fn sort_summaries(s: &mut [AttackSummary]) {
    s.sort_by(|a, b| attack_order(&a.attack, &b.attack));
}

/// One row per attack plus a `benign` row carrying the false-positive rate.
pub fn metrics_table(summaries: &[AttackSummary], benign: Option<&Metrics>) -> CsvTable {
    let mut t = CsvTable::new(&[
        "set",
        "kind",
        "target_mode",
        "k",
        "beta",
        "eps",
        "attempted",
        "successes",
        "mean_l2",
        "mean_attack_l1",
        "detection_rate",
        "fpr",
        "mean_runs",
    ]);
    let mut s = summaries.to_vec();
    sort_summaries(&mut s);
    for a in &s {
        t.push(vec![
            a.attack.label(),
            a.attack.kind.name().into(),
            mode_name(a.attack.target_mode).into(),
            num(a.attack.k),
            num(a.attack.beta),
            num(a.attack.eps),
            a.attempted.to_string(),
            a.successes.to_string(),
            opt(a.mean_l2),
            opt(a.mean_attack_l1),
            opt(a.detection.detection_rate),
            opt(benign.and_then(|b| b.fpr)),
            opt(a.detection.mean_runs),
        ]);
    }
    if let Some(b) = benign {
        t.push(vec![
            "benign".into(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            b.benign_count.to_string(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            opt(b.fpr),
            opt(b.mean_runs),
        ]);
    }
    t
}

/// CW rows: distortion and detection against confidence margin.
pub fn k_sweep_table(summaries: &[AttackSummary]) -> CsvTable {
    let mut t = CsvTable::new(&["target_mode", "k", "successes", "mean_l2", "detection_rate"]);
    let mut s: Vec<_> = summaries.iter().filter(|a| a.attack.kind == AttackKind::CwL2).cloned().collect();
    sort_summaries(&mut s);
    for a in &s {
        t.push(vec![
            mode_name(a.attack.target_mode).into(),
            num(a.attack.k),
            a.successes.to_string(),
            opt(a.mean_l2),
            opt(a.detection.detection_rate),
        ]);
    }
    t
}

/// Defense-aware rows: L1 to the target exemplar, distortion and detection against beta.
pub fn beta_sweep_table(summaries: &[AttackSummary]) -> CsvTable {
    let mut t = CsvTable::new(&["beta", "mean_l1", "mean_l2", "detection_rate", "target_mode", "k", "successes"]);
    let mut s: Vec<_> = summaries.iter().filter(|a| a.attack.kind == AttackKind::DefenseAware).cloned().collect();
    sort_summaries(&mut s);
    for a in &s {
        t.push(vec![
            num(a.attack.beta),
            opt(a.mean_attack_l1),
            opt(a.mean_l2),
            opt(a.detection.detection_rate),
            mode_name(a.attack.target_mode).into(),
            num(a.attack.k),
            a.successes.to_string(),
        ]);
    }
    t
}

/// Long-format histogram rows, one per (set, bin). Sets are sorted by name.
pub fn histogram_table(sets: &[(String, Vec<f64>)]) -> CsvTable {
    let mut t = CsvTable::new(&["set", "bin_lo", "bin_hi", "count"]);
    let mut order: Vec<_> = sets.iter().collect();
    order.sort_by(|a, b| a.0.cmp(&b.0));
    for (name, values) in order {
        for (i, c) in histogram(values).into_iter().enumerate() {
            t.push(vec![
                name.clone(),
                num(i as f64 * HIST_BIN_WIDTH),
                num((i + 1) as f64 * HIST_BIN_WIDTH),
                c.to_string(),
            ]);
        }
    }
    t
}

pub fn cycles_table(r: &CycleReport) -> CsvTable {
    let mut t = CsvTable::new(&[
        "layer",
        "sparse",
        "positions",
        "filters",
        "weights_per_filter",
        "active_weights",
        "dense_cycles",
        "sparse_cycles",
        "idle_mac_slots",
        "stall_cycles",
        "speedup",
    ]);
    for l in &r.layers {
        t.push(vec![
            l.layer.to_string(),
            l.sparse.to_string(),
            l.positions.to_string(),
            l.filters.to_string(),
            l.weights_per_filter.to_string(),
            l.active_weights.to_string(),
            l.dense_cycles.to_string(),
            l.sparse_cycles.to_string(),
            l.idle_mac_slots.to_string(),
            l.stall_cycles.to_string(),
            num(l.speedup),
        ]);
    }
    t
}

pub fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}
