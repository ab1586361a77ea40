//! Stochastic-inference detection.
//!
//! A clean pass fixes the reference `P^b` and, through its confidence, the
//! noise budget. Noisy passes are then compared to the reference by L1
//! distance: the first pass may decide immediately against the greedy
//! thresholds, after which the running mean is tested against the averaged
//! thresholds until a decision or the run cap.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::ops::ProbVector;
use crate::rng::Stream;
use crate::sparsify::{confidence, noise_budget, noisy_pass, NoiseConfig};
use crate::tensor::Tensor;
use crate::threshold::ThresholdTable;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionThresholds {
    pub t1_greedy: f64,
    pub t2_greedy: f64,
    pub t1_avg: f64,
    pub t2_avg: f64,
}

impl DetectionThresholds {
    pub fn new(t1_greedy: f64, t1_avg: f64, t2_avg: f64, t2_greedy: f64) -> Result<Self> {
        let t = Self { t1_greedy, t2_greedy, t1_avg, t2_avg };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = self.t1_greedy <= self.t1_avg && self.t1_avg <= self.t2_avg && self.t2_avg <= self.t2_greedy;
        let bounded =
            [self.t1_greedy, self.t2_greedy, self.t1_avg, self.t2_avg].iter().all(|t| (0.0..=2.0).contains(t));
        if !(ordered && bounded) {
            return Err(Error::InvalidArgument(format!(
                "thresholds must satisfy 0 <= t1' <= t1 <= t2 <= t2' <= 2: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn midpoint(&self) -> f64 {
        (self.t1_avg + self.t2_avg) / 2.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Benign,
    Adversarial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Greedy,
    Average,
    Cap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionVerdict {
    pub label: Label,
    pub runs_used: usize,
    pub l1_history: Vec<f64>,
    pub final_class: usize,
    pub terminated_by: Termination,
}

/// One line of a verdict log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub input_id: String,
    pub label: Label,
    pub final_class: usize,
    pub runs_used: usize,
    pub l1_history: Vec<f64>,
    pub terminated_by: Termination,
}

impl VerdictRecord {
    pub fn new(input_id: impl Into<String>, v: &DetectionVerdict) -> Self {
        Self {
            input_id: input_id.into(),
            label: v.label,
            final_class: v.final_class,
            runs_used: v.runs_used,
            l1_history: v.l1_history.clone(),
            terminated_by: v.terminated_by,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub thresholds: DetectionThresholds,
    pub max_runs: usize,
    pub noise: NoiseConfig,
    pub base_seed: u64,
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_runs == 0 {
            return Err(Error::InvalidArgument("max_runs must be at least 1".into()));
        }
        self.thresholds.validate()?;
        self.noise.validate()
    }
}

pub fn l1_distance(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape { op: "l1_distance", detail: format!("{} vs {} classes", p.len(), q.len()) });
    }
    Ok(p.probs.iter().zip(&q.probs).map(|(a, b)| (a - b).abs()).sum())
}

/// The decision after the latest pass, if any. `history` holds every
/// completed pass's distance.
pub fn decide(t: &DetectionThresholds, history: &[f64], max_runs: usize) -> Option<(Label, Termination)> {
    let i = history.len();
    if i == 0 {
        return None;
    }
    if i == 1 {
        if history[0] < t.t1_greedy {
            return Some((Label::Benign, Termination::Greedy));
        }
        if history[0] > t.t2_greedy {
            return Some((Label::Adversarial, Termination::Greedy));
        }
    }
    let mean = history.iter().sum::<f64>() / i as f64;
    if mean < t.t1_avg {
        return Some((Label::Benign, Termination::Average));
    }
    if mean > t.t2_avg {
        return Some((Label::Adversarial, Termination::Average));
    }
    if i >= max_runs {
        // ties at the midpoint go to benign
        let label = if mean > t.midpoint() { Label::Adversarial } else { Label::Benign };
        return Some((label, Termination::Cap));
    }
    None
}

/// Drive the decision rule with distances supplied by `next_distance(pass)`,
/// passes numbered from 1.
pub fn run_state_machine(
    t: &DetectionThresholds,
    max_runs: usize,
    mut next_distance: impl FnMut(usize) -> Result<f64>,
) -> Result<(Label, Termination, Vec<f64>)> {
    if max_runs == 0 {
        return Err(Error::InvalidArgument("max_runs must be at least 1".into()));
    }
    let mut history = Vec::with_capacity(max_runs);
    loop {
        history.push(next_distance(history.len() + 1)?);
        if let Some((label, term)) = decide(t, &history, max_runs) {
            return Ok((label, term, history));
        }
    }
}

/// Per-input stream: keyed by the base seed and the input's bit pattern, so
/// every input gets its own noise while staying reproducible.
pub fn input_stream(base_seed: u64, input: &Tensor) -> Stream {
    let mut h = Stream::new(base_seed).fork_named("detect");
    for &v in input.data() {
        h = h.fork(v.to_bits());
    }
    h
}

pub fn pass_seed(stream: &Stream, pass: usize) -> u64 {
    stream.fork(pass as u64).key()
}

/// Reference output, noise budget and the distance of noisy pass `pass`.
pub struct NoisyProbe<'a> {
    model: &'a Model,
    table: &'a ThresholdTable,
    input: &'a Tensor,
    noise: NoiseConfig,
    stream: Stream,
    pub reference: ProbVector,
    pub budget: f64,
}

impl<'a> NoisyProbe<'a> {
    pub fn new(
        model: &'a Model,
        table: &'a ThresholdTable,
        input: &'a Tensor,
        noise: NoiseConfig,
        base_seed: u64,
    ) -> Result<Self> {
        let reference = model.predict(input)?;
        let budget = noise_budget(confidence(&reference), &noise);
        Ok(Self { model, table, input, noise, stream: input_stream(base_seed, input), reference, budget })
    }

    pub fn distance(&self, pass: usize) -> Result<f64> {
        let noisy = noisy_pass(
            self.model,
            self.table,
            self.noise.mode,
            self.budget,
            pass_seed(&self.stream, pass),
            self.input,
        )?;
        l1_distance(&noisy, &self.reference)
    }
}

pub fn stochastic_inference(
    model: &Model,
    table: &ThresholdTable,
    input: &Tensor,
    cfg: &DetectorConfig,
) -> Result<DetectionVerdict> {
    cfg.validate()?;
    let probe = NoisyProbe::new(model, table, input, cfg.noise, cfg.base_seed)?;
    let (label, terminated_by, l1_history) = run_state_machine(&cfg.thresholds, cfg.max_runs, |i| probe.distance(i))?;
    Ok(DetectionVerdict {
        label,
        runs_used: l1_history.len(),
        l1_history,
        final_class: probe.reference.argmax(),
        terminated_by,
    })
}

/// First noisy pass distance, the statistic thresholds are calibrated on.
pub fn first_pass_distance(
    model: &Model,
    table: &ThresholdTable,
    input: &Tensor,
    noise: &NoiseConfig,
    base_seed: u64,
) -> Result<f64> {
    NoisyProbe::new(model, table, input, *noise, base_seed)?.distance(1)
}

/// Linear-interpolation quantile of sorted data (`q` in [0, 1]).
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub const MIN_CALIBRATION_SAMPLES: usize = 100;

/// Thresholds from benign first-pass distances only.
pub fn calibrate(benign_l1: &[f64], target_fpr: f64) -> Result<DetectionThresholds> {
    if benign_l1.len() < MIN_CALIBRATION_SAMPLES {
        return Err(Error::TooFewSamples { needed: MIN_CALIBRATION_SAMPLES, got: benign_l1.len() });
    }
    if !(target_fpr > 0.0 && target_fpr < 1.0) {
        return Err(Error::InvalidArgument(format!("target FPR {target_fpr} outside (0, 1)")));
    }
    let mut s = benign_l1.to_vec();
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite calibration sample".into()));
    }
    s.sort_by(f64::total_cmp);
    let clamp = |v: f64| v.clamp(0.0, 2.0);
    let t1_greedy = clamp(quantile(&s, 0.10));
    let t1_avg = clamp(quantile(&s, 0.5)).max(t1_greedy);
    let t2_avg = clamp(quantile(&s, 1.0 - target_fpr)).max(t1_avg);
    let t2_greedy = clamp(quantile(&s, 1.0 - target_fpr / 4.0)).max(t2_avg);
    DetectionThresholds::new(t1_greedy, t1_avg, t2_avg, t2_greedy)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Fraction of adversarial inputs flagged; `None` when there were none.
    pub detection_rate: Option<f64>,
    pub fpr: Option<f64>,
    pub tpr: Option<f64>,
    pub mean_runs: Option<f64>,
    pub benign_count: usize,
    pub adversarial_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub benign: Vec<DetectionVerdict>,
    pub adversarial: Vec<DetectionVerdict>,
}

pub fn metrics_from(benign: &[DetectionVerdict], adversarial: &[DetectionVerdict]) -> Metrics {
    let flagged = |vs: &[DetectionVerdict]| vs.iter().filter(|v| v.label == Label::Adversarial).count() as f64;
    let rate = |vs: &[DetectionVerdict]| (!vs.is_empty()).then(|| flagged(vs) / vs.len() as f64);
    let fpr = rate(benign);
    let total = benign.len() + adversarial.len();
    let runs: usize = benign.iter().chain(adversarial).map(|v| v.runs_used).sum();
    Metrics {
        detection_rate: rate(adversarial),
        fpr,
        tpr: fpr.map(|f| 1.0 - f),
        mean_runs: (total > 0).then(|| runs as f64 / total as f64),
        benign_count: benign.len(),
        adversarial_count: adversarial.len(),
    }
}

pub fn evaluate(
    model: &Model,
    table: &ThresholdTable,
    cfg: &DetectorConfig,
    benign: &[Tensor],
    adversarial: &[Tensor],
) -> Result<Evaluation> {
    let run = |xs: &[Tensor]| xs.iter().map(|x| stochastic_inference(model, table, x, cfg)).collect::<Result<Vec<_>>>();
    let b = run(benign)?;
    let a = run(adversarial)?;
    Ok(Evaluation { metrics: metrics_from(&b, &a), benign: b, adversarial: a })
}
