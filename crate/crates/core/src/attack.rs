//! White-box attacks: FGSM, a CW-L2-style targeted attack with confidence
//! margin `k`, and the defense-aware variant that also pulls the output
//! distribution toward a benign exemplar of the target class.
//!
//! The targeted attacks optimize in `w` space with `x = (tanh(w) + 1) / 2`,
//! which keeps every iterate inside the [0, 1] box.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{loss_and_input_gradient, runner_up, LossSpec, Model};
use crate::ops::ProbVector;
use crate::store::{blob_tensor, read_container, write_container, BlobEntry, Provenance};
use crate::tensor::{argmax, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    CwL2,
    DefenseAware,
}

impl AttackKind {
    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::CwL2 => "cw_l2",
            AttackKind::DefenseAware => "defense_aware",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    #[default]
    Next,
    LeastLikely,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    #[serde(default)]
    pub target_mode: TargetMode,
    /// Required logit margin of the target over every other class.
    #[serde(default)]
    pub k: f64,
    #[serde(default = "default_c")]
    pub c: f64,
    #[serde(default)]
    pub beta: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_step_size")]
    pub step_size: f64,
    /// FGSM step.
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_c() -> f64 {
    2.0
}
fn default_steps() -> usize {
    1000
}
fn default_step_size() -> f64 {
    0.02
}
fn default_eps() -> f64 {
    0.15
}

impl AttackConfig {
    pub fn new(kind: AttackKind) -> Self {
        Self {
            kind,
            target_mode: TargetMode::Next,
            k: 0.0,
            c: default_c(),
            beta: 0.0,
            steps: default_steps(),
            step_size: default_step_size(),
            eps: default_eps(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidArgument("attack needs at least one step".into()));
        }
        if !(self.k >= 0.0 && self.c > 0.0 && self.beta >= 0.0 && self.step_size > 0.0) {
            return Err(Error::InvalidArgument(format!("invalid attack parameters {self:?}")));
        }
        if !(0.0..1.0).contains(&self.eps) {
            return Err(Error::InvalidArgument(format!("eps {} outside [0, 1)", self.eps)));
        }
        Ok(())
    }

    /// Short stable label, e.g. `cw_l2/next/k=2`.
    pub fn label(&self) -> String {
        let mode = match self.target_mode {
            TargetMode::Next => "next",
            TargetMode::LeastLikely => "ll",
        };
        match self.kind {
            AttackKind::Fgsm => format!("fgsm/eps={}", self.eps),
            AttackKind::CwL2 => format!("cw_l2/{mode}/k={}", self.k),
            AttackKind::DefenseAware => format!("defense_aware/{mode}/k={}/beta={:e}", self.k, self.beta),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialSample {
    pub original: Tensor,
    pub perturbed: Tensor,
    /// `None` for untargeted attacks.
    pub target_class: Option<usize>,
    pub success: bool,
    pub l2_distortion: f64,
    /// `|y(x') - y(x_t)|_1`, defense-aware attack only.
    pub attack_l1_to_target: Option<f64>,
}

/// Second most likely (`Next`) or least likely class; ties pick the lowest index.
pub fn select_target(reference: &ProbVector, mode: TargetMode) -> usize {
    let p = &reference.probs;
    match mode {
        TargetMode::Next => runner_up(p, argmax(p)),
        TargetMode::LeastLikely => {
            let mut best = 0;
            for (i, &v) in p.iter().enumerate().skip(1) {
                if v < p[best] {
                    best = i;
                }
            }
            best
        }
    }
}

/// Untargeted fast gradient sign step against the predicted class.
pub fn fgsm(model: &Model, x: &Tensor, eps: f64) -> Result<AdversarialSample> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::InvalidArgument(format!("eps {eps} outside [0, 1)")));
    }
    let label = model.predict(x)?.argmax();
    let (_, g, _) = loss_and_input_gradient(model, x, &LossSpec::CrossEntropy { label })?;
    let mut xp = x.clone();
    for (v, gi) in xp.data_mut().iter_mut().zip(g.data()) {
        let step = if *gi > 0.0 {
            eps
        } else if *gi < 0.0 {
            -eps
        } else {
            0.0
        };
        *v = (*v + step).clamp(0.0, 1.0);
    }
    let success = model.predict(&xp)?.argmax() != label;
    Ok(AdversarialSample {
        l2_distortion: xp.l2_distance(x),
        original: x.clone(),
        perturbed: xp,
        target_class: None,
        success,
        attack_l1_to_target: None,
    })
}

/// Whether `out` classifies as `target` with a logit margin of at least `k`.
pub fn reaches_target(out: &ProbVector, target: usize, k: f64) -> bool {
    let z = &out.logits;
    argmax(z) == target && z[target] - z[runner_up(z, target)] >= k
}

const BOX_EDGE: f64 = 1e-6;

fn to_w(x: f64) -> f64 {
    (2.0 * x.clamp(BOX_EDGE, 1.0 - BOX_EDGE) - 1.0).atanh()
}

fn from_w(w: f64) -> f64 {
    // Rounding can land a hair outside the box; clamp for the invariant.
    ((w.tanh() + 1.0) / 2.0).clamp(0.0, 1.0)
}

/// Adam over `w`, keeping the lowest-objective iterate that reaches the target.
fn optimize(
    model: &Model,
    x0: &Tensor,
    target: usize,
    cfg: &AttackConfig,
    target_probs: Option<&[f64]>,
) -> Result<AdversarialSample> {
    cfg.validate()?;
    let classes = model.class_count();
    if target >= classes {
        return Err(Error::ClassIndex { index: target, classes });
    }
    let beta = if target_probs.is_some() { cfg.beta } else { 0.0 };
    let tprobs = target_probs.map_or_else(|| vec![0.0; classes], <[f64]>::to_vec);
    let loss =
        LossSpec::Composite { target, k: cfg.k, c: cfg.c, beta, target_probs: tprobs.clone(), origin: x0.clone() };
    let l1_of = |out: &ProbVector| out.probs.iter().zip(&tprobs).map(|(a, b)| (a - b).abs()).sum::<f64>();
    let finish = |x: Tensor, success: bool, out: &ProbVector| AdversarialSample {
        l2_distortion: x.l2_distance(x0),
        original: x0.clone(),
        perturbed: x,
        target_class: Some(target),
        success,
        attack_l1_to_target: target_probs.map(|_| l1_of(out)),
    };

    let start = model.predict(x0)?;
    if start.argmax() == target {
        return Ok(finish(x0.clone(), true, &start));
    }

    let mut w: Vec<f64> = x0.data().iter().map(|&v| to_w(v)).collect();
    let (mut m1, mut m2) = (vec![0.0; w.len()], vec![0.0; w.len()]);
    let (b1, b2, adam_eps) = (0.9f64, 0.999f64, 1e-8);
    let mut best: Option<(f64, Tensor, ProbVector)> = None;
    for step in 0..=cfg.steps {
        let x = Tensor::new(x0.shape().to_vec(), w.iter().map(|&v| from_w(v)).collect())?;
        let (objective, gx, out) = loss_and_input_gradient(model, &x, &loss)?;
        if reaches_target(&out, target, cfg.k) && best.as_ref().is_none_or(|(o, _, _)| objective < *o) {
            best = Some((objective, x.clone(), out));
        }
        if step == cfg.steps {
            break;
        }
        let t = (step + 1) as i32;
        for i in 0..w.len() {
            let th = w[i].tanh();
            let g = gx.data()[i] * (1.0 - th * th) / 2.0;
            m1[i] = b1 * m1[i] + (1.0 - b1) * g;
            m2[i] = b2 * m2[i] + (1.0 - b2) * g * g;
            let mh = m1[i] / (1.0 - b1.powi(t));
            let vh = m2[i] / (1.0 - b2.powi(t));
            w[i] -= cfg.step_size * mh / (vh.sqrt() + adam_eps);
        }
    }
    Ok(match best {
        Some((_, x, out)) => {
            let success = out.argmax() == target;
            finish(x, success, &out)
        }
        None => finish(x0.clone(), false, &start),
    })
}

/// Targeted CW-L2-style attack: minimize `|x' - x|^2 + c * max(max_{i!=t} z_i - z_t, -k)`.
pub fn cw_l2(model: &Model, x: &Tensor, target: usize, cfg: &AttackConfig) -> Result<AdversarialSample> {
    optimize(model, x, target, cfg, None)
}

/// CW objective plus `beta * |y(x') - y(x_t)|_1`, with `y` the dense model's softmax.
pub fn defense_aware(
    model: &Model,
    x: &Tensor,
    exemplar: &Tensor,
    target: usize,
    cfg: &AttackConfig,
) -> Result<AdversarialSample> {
    let yt = model.predict(exemplar)?;
    optimize(model, x, target, cfg, Some(&yt.probs))
}

/// Run the configured attack on one input, choosing the target from the clean prediction.
pub fn run_attack(
    model: &Model,
    x: &Tensor,
    cfg: &AttackConfig,
    exemplars: &[Option<Tensor>],
) -> Result<AdversarialSample> {
    cfg.validate()?;
    match cfg.kind {
        AttackKind::Fgsm => fgsm(model, x, cfg.eps),
        AttackKind::CwL2 => {
            let target = select_target(&model.predict(x)?, cfg.target_mode);
            cw_l2(model, x, target, cfg)
        }
        AttackKind::DefenseAware => {
            let target = select_target(&model.predict(x)?, cfg.target_mode);
            let exemplar = exemplars
                .get(target)
                .and_then(Option::as_ref)
                .ok_or_else(|| Error::InvalidArgument(format!("no exemplar for class {target}")))?;
            defense_aware(model, x, exemplar, target, cfg)
        }
    }
}

/// For each class, the correctly classified sample the model is most confident on.
pub fn select_exemplars(model: &Model, data: &Dataset) -> Result<Vec<Option<Tensor>>> {
    let mut best: Vec<Option<(f64, usize)>> = vec![None; model.class_count()];
    for (i, (x, &y)) in data.images.iter().zip(&data.labels).enumerate() {
        let p = model.predict(x)?;
        if p.argmax() != y || y >= best.len() {
            continue;
        }
        if best[y].is_none_or(|(conf, _)| p.probs[y] > conf) {
            best[y] = Some((p.probs[y], i));
        }
    }
    Ok(best.into_iter().map(|b| b.map(|(_, i)| data.images[i].clone())).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub source_index: usize,
    pub attack: AttackConfig,
    pub target_class: Option<usize>,
    pub success: bool,
    pub l2_distortion: f64,
    pub attack_l1_to_target: Option<f64>,
    pub original: BlobEntry,
    pub perturbed: BlobEntry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AdversarialManifest {
    format: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
    samples: Vec<SampleRecord>,
    blob_values: usize,
}

const ADV_FORMAT: &str = "stochdet-adversarial/1";

/// A stored attack run.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialSet {
    pub provenance: Option<Provenance>,
    pub entries: Vec<(usize, AttackConfig, AdversarialSample)>,
}

impl AdversarialSet {
    pub fn successes(&self) -> impl Iterator<Item = &AdversarialSample> {
        self.entries.iter().map(|(_, _, s)| s).filter(|s| s.success)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blob = Vec::new();
        let push = |t: &Tensor, blob: &mut Vec<f64>| {
            let e = BlobEntry { shape: t.shape().to_vec(), offset: blob.len(), len: t.len() };
            blob.extend_from_slice(t.data());
            e
        };
        let mut samples = Vec::with_capacity(self.entries.len());
        for (n, (src, cfg, s)) in self.entries.iter().enumerate() {
            let original = push(&s.original, &mut blob);
            let perturbed = push(&s.perturbed, &mut blob);
            samples.push(SampleRecord {
                id: format!("{}#{n}", cfg.label()),
                source_index: *src,
                attack: *cfg,
                target_class: s.target_class,
                success: s.success,
                l2_distortion: s.l2_distortion,
                attack_l1_to_target: s.attack_l1_to_target,
                original,
                perturbed,
            });
        }
        let manifest = AdversarialManifest {
            format: ADV_FORMAT.into(),
            provenance: self.provenance.clone(),
            samples,
            blob_values: blob.len(),
        };
        write_container(&manifest, &blob)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (m, blob): (AdversarialManifest, Vec<f64>) = read_container(bytes)?;
        if m.format != ADV_FORMAT {
            return Err(Error::Container(format!("unknown format {:?}", m.format)));
        }
        if blob.len() != m.blob_values {
            return Err(Error::Container(format!(
                "blob holds {} values, manifest declares {}",
                blob.len(),
                m.blob_values
            )));
        }
        let entries = m
            .samples
            .into_iter()
            .map(|r| {
                let sample = AdversarialSample {
                    original: blob_tensor(&blob, &r.original, &r.id)?,
                    perturbed: blob_tensor(&blob, &r.perturbed, &r.id)?,
                    target_class: r.target_class,
                    success: r.success,
                    l2_distortion: r.l2_distortion,
                    attack_l1_to_target: r.attack_l1_to_target,
                };
                Ok((r.source_index, r.attack, sample))
            })
            .collect::<Result<_>>()?;
        Ok(Self { provenance: m.provenance, entries })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{fixture_arch, Model};

    fn pv(p: &[f64]) -> ProbVector {
        ProbVector { probs: p.to_vec(), logits: p.iter().map(|v| v.ln()).collect() }
    }

    #[test]
    fn target_selection() {
        assert_eq!(select_target(&pv(&[0.7, 0.2, 0.1]), TargetMode::Next), 1);
        assert_eq!(select_target(&pv(&[0.7, 0.2, 0.1]), TargetMode::LeastLikely), 2);
        assert_eq!(select_target(&pv(&[0.5, 0.25, 0.25]), TargetMode::LeastLikely), 1);
        assert_eq!(select_target(&pv(&[0.1, 0.45, 0.45]), TargetMode::Next), 2);
    }

    #[test]
    fn fgsm_zero_eps_is_identity() {
        let m = Model::init([1, 18, 18], fixture_arch(18, 4).unwrap(), 4).unwrap();
        let x = Tensor::filled(&[1, 18, 18], 0.5);
        let s = fgsm(&m, &x, 0.0).unwrap();
        assert_eq!(s.perturbed, x);
        assert!(!s.success);
        assert_eq!(s.l2_distortion, 0.0);
    }

    #[test]
    fn fgsm_step_is_eps_or_clipped() {
        let m = Model::init([1, 18, 18], fixture_arch(18, 4).unwrap(), 4).unwrap();
        let mut x = Tensor::filled(&[1, 18, 18], 0.5);
        x.data_mut()[0] = 0.02;
        x.data_mut()[1] = 0.97;
        let s = fgsm(&m, &x, 0.1).unwrap();
        for (a, b) in s.perturbed.data().iter().zip(x.data()) {
            let d = (a - b).abs();
            assert!((d - 0.1).abs() < 1e-12 || d == 0.0 || *a == 0.0 || *a == 1.0, "{a} {b}");
        }
        assert!(s.perturbed.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn already_target_is_free() {
        let m = Model::init([1, 18, 18], fixture_arch(18, 4).unwrap(), 4).unwrap();
        let x = Tensor::filled(&[1, 18, 18], 0.5);
        let top = m.predict(&x).unwrap().argmax();
        let s = cw_l2(&m, &x, top, &AttackConfig::new(AttackKind::CwL2)).unwrap();
        assert!(s.success);
        assert_eq!(s.l2_distortion, 0.0);
        assert_eq!(s.perturbed, x);
    }

    #[test]
    fn invalid_configs() {
        let mut c = AttackConfig::new(AttackKind::CwL2);
        c.steps = 0;
        assert!(c.validate().is_err());
        let mut c = AttackConfig::new(AttackKind::CwL2);
        c.c = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn box_mapping_stays_inside() {
        for x in [0.0, 1e-9, 0.3, 1.0 - 1e-12, 1.0] {
            let y = from_w(to_w(x));
            assert!((0.0..=1.0).contains(&y));
            assert!((y - x).abs() < 2e-6);
        }
        assert_eq!(from_w(50.0), 1.0);
    }
}
