//! End-to-end experiment driver. Each stage reads the artifacts of earlier
//! stages from the output directory and writes its own, so stages can run one
//! at a time or all together. Every artifact embeds the config hash, the base
//! seed and the tool version; `manifest.json` lists their digests.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::attack::{run_attack, select_exemplars, AdversarialSet, AttackConfig, AttackKind, TargetMode};
use crate::data::{load_idx_dataset, synth_range, Dataset};
use crate::detect::{
    calibrate, first_pass_distance, input_stream, metrics_from, pass_seed, stochastic_inference, DetectionThresholds,
    DetectionVerdict, DetectorConfig, Metrics, VerdictRecord, MIN_CALIBRATION_SAMPLES,
};
use crate::error::{Error, Result};
use crate::model::{fixture_arch, Model};
use crate::report::{
    beta_sweep_table, cycles_table, histogram_table, k_sweep_table, mean, metrics_table, sort_summaries, AttackSummary,
};
use crate::rng::Stream;
use crate::sim::{combine_reports, simulate_model, AcceleratorConfig, CycleReport};
use crate::sparsify::{confidence, draw_plan, noise_budget, NoiseConfig};
use crate::store::{load_model, save_model, Provenance};
use crate::threshold::{profile_thresholds, ThresholdTable};
use crate::train::{accuracy, train, TrainConfig, TrainReport};

pub const OUTPUT_DIR_ENV: &str = "STOCHDET_OUTPUT_DIR";
pub const MANIFEST: &str = "manifest.json";

pub const STAGES: [&str; 8] = ["train", "profile", "attack", "calibrate", "detect", "eval", "simulate", "report"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DatasetSpec {
    Synth { seed: u64 },
    Idx { images: PathBuf, labels: PathBuf },
}

impl FromStr for DatasetSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config {
            field: "dataset".into(),
            detail: format!("expected synth:<seed> or idx:<images>:<labels>, got {s:?}"),
        };
        match s.split_once(':') {
            Some(("synth", seed)) => Ok(Self::Synth { seed: seed.parse().map_err(|_| bad())? }),
            Some(("idx", rest)) => {
                let (images, labels) = rest.split_once(':').ok_or_else(bad)?;
                if images.is_empty() || labels.is_empty() {
                    return Err(bad());
                }
                Ok(Self::Idx { images: images.into(), labels: labels.into() })
            }
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for DatasetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Synth { seed } => write!(f, "synth:{seed}"),
            Self::Idx { images, labels } => write!(f, "idx:{}:{}", images.display(), labels.display()),
        }
    }
}

impl Serialize for DatasetSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for DatasetSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Consecutive, disjoint sample ranges of the dataset, in this order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Splits {
    pub train: usize,
    pub calibration: usize,
    pub benign_eval: usize,
    pub attack: usize,
    pub exemplar: usize,
}

impl Default for Splits {
    fn default() -> Self {
        Self { train: 4000, calibration: 500, benign_eval: 600, attack: 200, exemplar: 200 }
    }
}

impl Splits {
    pub fn total(&self) -> usize {
        self.train + self.calibration + self.benign_eval + self.attack + self.exemplar
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSettings {
    pub max_runs: usize,
    pub target_fpr: f64,
}

impl Default for DetectorSettings {
    fn default() -> Self {
        Self { max_runs: 5, target_fpr: 0.05 }
    }
}

fn default_image_size() -> usize {
    18
}
fn default_simulate_inputs() -> usize {
    32
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    /// Side length of synthetic images; ignored for IDX data.
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default)]
    pub splits: Splits,
    /// Pre-trained model. Mutually exclusive with `train`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub detector: DetectorSettings,
    #[serde(default)]
    pub attacks: Vec<AttackConfig>,
    #[serde(default)]
    pub accelerator: AcceleratorConfig,
    /// Benign inputs whose first noisy pass is run through the cycle model.
    #[serde(default = "default_simulate_inputs")]
    pub simulate_inputs: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub base_seed: u64,
}

fn cfg_err(field: impl Into<String>, detail: impl fmt::Display) -> Error {
    Error::Config { field: field.into(), detail: detail.to_string() }
}

impl ExperimentConfig {
    /// The synthetic fixture experiment.
    pub fn fixture(base_seed: u64) -> Self {
        let cw = |k: f64| AttackConfig { k, ..AttackConfig::new(AttackKind::CwL2) };
        let aware = |beta: f64| AttackConfig { beta, ..AttackConfig::new(AttackKind::DefenseAware) };
        Self {
            dataset: DatasetSpec::Synth { seed: 7 },
            image_size: 18,
            splits: Splits::default(),
            model: None,
            train: Some(TrainConfig::default()),
            noise: NoiseConfig { sr_hi: 0.5, ..NoiseConfig::default() },
            detector: DetectorSettings::default(),
            attacks: vec![cw(0.0), cw(2.0), cw(5.0), aware(1e-4), aware(1e-1)],
            accelerator: AcceleratorConfig::default(),
            simulate_inputs: default_simulate_inputs(),
            output_dir: default_output_dir(),
            base_seed,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| cfg_err("<root>", e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| cfg_err("<file>", format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.model, &self.train) {
            (None, None) => return Err(cfg_err("model", "no model path given and no train section")),
            (Some(_), Some(_)) => {
                return Err(cfg_err("train", "a pre-trained model and a train section are exclusive"))
            }
            (Some(p), None) if !p.is_file() => return Err(cfg_err("model", format!("{} does not exist", p.display()))),
            _ => {}
        }
        if let DatasetSpec::Idx { images, labels } = &self.dataset {
            for p in [images, labels] {
                if !p.is_file() {
                    return Err(cfg_err("dataset", format!("{} does not exist", p.display())));
                }
            }
        }
        if self.image_size < 12 {
            return Err(cfg_err("image_size", format!("{} < 12", self.image_size)));
        }
        let s = &self.splits;
        if s.calibration < MIN_CALIBRATION_SAMPLES {
            return Err(cfg_err("splits.calibration", format!("need at least {MIN_CALIBRATION_SAMPLES}")));
        }
        for (name, n) in
            [("splits.benign_eval", s.benign_eval), ("splits.attack", s.attack), ("splits.exemplar", s.exemplar)]
        {
            if n == 0 {
                return Err(cfg_err(name, "must be positive"));
            }
        }
        if self.train.is_some() && s.train == 0 {
            return Err(cfg_err("splits.train", "must be positive when training"));
        }
        self.noise.validate().map_err(|e| cfg_err("noise", e))?;
        if self.detector.max_runs == 0 {
            return Err(cfg_err("detector.max_runs", "must be at least 1"));
        }
        if !(self.detector.target_fpr > 0.0 && self.detector.target_fpr < 1.0) {
            return Err(cfg_err("detector.target_fpr", "must lie in (0, 1)"));
        }
        for (i, a) in self.attacks.iter().enumerate() {
            a.validate().map_err(|e| cfg_err(format!("attacks[{i}]"), e))?;
        }
        self.accelerator.validate().map_err(|e| cfg_err("accelerator", e))?;
        Ok(())
    }

    /// SHA-256 over the canonical JSON form, output directory excluded.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("output_dir");
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub provenance: Provenance,
    pub config: ExperimentConfig,
    /// Relative path to SHA-256 hex digest.
    pub files: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Partitions {
    pub train: Option<Dataset>,
    pub calibration: Dataset,
    pub benign_eval: Dataset,
    pub attack: Dataset,
    pub exemplar: Dataset,
    /// Index of the first sample of each partition in the full dataset.
    pub offsets: [usize; 5],
}

#[derive(Serialize, Deserialize)]
struct TrainArtifact {
    provenance: Provenance,
    pretrained: Option<PathBuf>,
    report: Option<TrainReport>,
    benign_eval_accuracy: f64,
}

#[derive(Serialize, Deserialize)]
struct TableArtifact {
    provenance: Provenance,
    table: ThresholdTable,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackIndexEntry {
    pub file: String,
    pub name: String,
    pub attack: AttackConfig,
}

#[derive(Serialize, Deserialize)]
struct AttackIndex {
    provenance: Provenance,
    sets: Vec<AttackIndexEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationArtifact {
    pub provenance: Provenance,
    pub target_fpr: f64,
    pub thresholds: DetectionThresholds,
    pub samples: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerdictLog {
    pub provenance: Provenance,
    pub set: String,
    pub records: Vec<VerdictRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsArtifact {
    pub provenance: Provenance,
    pub benign: Metrics,
    pub attacks: Vec<AttackSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CyclesArtifact {
    pub provenance: Provenance,
    pub accelerator: AcceleratorConfig,
    pub inputs: usize,
    pub report: CycleReport,
}

fn record_to_verdict(r: &VerdictRecord) -> DetectionVerdict {
    DetectionVerdict {
        label: r.label,
        runs_used: r.runs_used,
        l1_history: r.l1_history.clone(),
        final_class: r.final_class,
        terminated_by: r.terminated_by,
    }
}

fn slug(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect()
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub struct Pipeline {
    cfg: ExperimentConfig,
    out: PathBuf,
    provenance: Provenance,
}

impl Pipeline {
    /// Validates the config. The output directory comes from the environment
    /// override when set, else from the config.
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        let out = std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| cfg.output_dir.clone());
        Self::with_output_dir(cfg, out)
    }

    pub fn with_output_dir(cfg: ExperimentConfig, out: PathBuf) -> Result<Self> {
        cfg.validate()?;
        let provenance = Provenance::new(cfg.hash(), cfg.base_seed);
        Ok(Self { cfg, out, provenance })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn output_dir(&self) -> &Path {
        &self.out
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    fn write(&self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.out.join(rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(&path, bytes)?;
        let mpath = self.out.join(MANIFEST);
        let mut manifest = std::fs::read(&mpath)
            .ok()
            .and_then(|b| serde_json::from_slice::<Manifest>(&b).ok())
            .filter(|m| m.provenance == self.provenance)
            .unwrap_or_else(|| Manifest {
                provenance: self.provenance.clone(),
                config: self.cfg.clone(),
                files: BTreeMap::new(),
            });
        manifest.files.insert(rel.to_string(), digest(bytes));
        std::fs::write(mpath, serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    fn write_json<T: Serialize>(&self, rel: &str, v: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(v)?;
        bytes.push(b'\n');
        self.write(rel, &bytes)
    }

    fn read(&self, rel: &str, producer: &str) -> Result<Vec<u8>> {
        std::fs::read(self.out.join(rel))
            .map_err(|e| Error::InvalidArgument(format!("cannot read {rel} ({e}); run the `{producer}` stage first")))
    }

    fn read_json<T: for<'de> Deserialize<'de>>(&self, rel: &str, producer: &str) -> Result<T> {
        Ok(serde_json::from_slice(&self.read(rel, producer)?)?)
    }

    pub fn partitions(&self) -> Result<Partitions> {
        let s = self.cfg.splits;
        let sizes = [s.train, s.calibration, s.benign_eval, s.attack, s.exemplar];
        let mut offsets = [0usize; 5];
        for i in 1..5 {
            offsets[i] = offsets[i - 1] + sizes[i - 1];
        }
        let take = |i: usize| -> Result<Option<Dataset>> {
            if sizes[i] == 0 {
                return Ok(None);
            }
            match &self.cfg.dataset {
                DatasetSpec::Synth { seed } => synth_range(*seed, offsets[i], sizes[i], self.cfg.image_size).map(Some),
                DatasetSpec::Idx { .. } => unreachable!("idx handled below"),
            }
        };
        let parts: Vec<Option<Dataset>> = match &self.cfg.dataset {
            DatasetSpec::Synth { .. } => (0..5).map(take).collect::<Result<_>>()?,
            DatasetSpec::Idx { images, labels } => {
                let all = load_idx_dataset(images, labels)?;
                if all.len() < s.total() {
                    return Err(cfg_err(
                        "splits",
                        format!("dataset has {} samples, splits need {}", all.len(), s.total()),
                    ));
                }
                (0..5).map(|i| (sizes[i] > 0).then(|| all.slice(offsets[i], sizes[i]))).collect()
            }
        };
        let mut it = parts.into_iter();
        let train = it.next().flatten();
        let mut next = || it.next().flatten().expect("validated non-empty split");
        Ok(Partitions { train, calibration: next(), benign_eval: next(), attack: next(), exemplar: next(), offsets })
    }

    pub fn model(&self) -> Result<Model> {
        let bytes = match &self.cfg.model {
            Some(p) => std::fs::read(p).map_err(|e| cfg_err("model", format!("{}: {e}", p.display())))?,
            None => self.read("model.bin", "train")?,
        };
        load_model(&bytes)
    }

    fn check_data(model: &Model, data: &Dataset) -> Result<()> {
        let shape = data.image_shape().expect("non-empty split");
        if shape != model.input_shape() {
            return Err(Error::InvalidArgument(format!(
                "dataset images are {shape:?}, model expects {:?}",
                model.input_shape()
            )));
        }
        if data.class_count > model.class_count() {
            return Err(Error::InvalidArgument(format!(
                "dataset has {} classes, model {}",
                data.class_count,
                model.class_count()
            )));
        }
        Ok(())
    }

    pub fn table(&self) -> Result<ThresholdTable> {
        Ok(self.read_json::<TableArtifact>("thresholds.json", "profile")?.table)
    }

    pub fn calibration(&self) -> Result<CalibrationArtifact> {
        self.read_json("calibration.json", "calibrate")
    }

    pub fn attack_index(&self) -> Result<Vec<AttackIndexEntry>> {
        Ok(self.read_json::<AttackIndex>("attacks/index.json", "attack")?.sets)
    }

    pub fn adversarial_set(&self, entry: &AttackIndexEntry) -> Result<AdversarialSet> {
        AdversarialSet::from_bytes(&self.read(&entry.file, "attack")?)
    }

    pub fn verdict_log(&self, set: &str) -> Result<VerdictLog> {
        self.read_json(&format!("verdicts/{set}.json"), "detect")
    }

    pub fn metrics(&self) -> Result<MetricsArtifact> {
        self.read_json("metrics.json", "eval")
    }

    pub fn cycles(&self) -> Result<CyclesArtifact> {
        self.read_json("cycles.json", "simulate")
    }

    pub fn detector_config(&self) -> Result<DetectorConfig> {
        Ok(DetectorConfig {
            thresholds: self.calibration()?.thresholds,
            max_runs: self.cfg.detector.max_runs,
            noise: self.cfg.noise,
            base_seed: self.cfg.base_seed,
        })
    }

    pub fn stage_train(&self) -> Result<()> {
        let parts = self.partitions()?;
        let (model, report, pretrained) = match &self.cfg.train {
            Some(tc) => {
                let data = parts.train.as_ref().expect("validated train split");
                let [_, h, w] = data.image_shape().expect("non-empty");
                if h != w {
                    return Err(Error::InvalidArgument(format!(
                        "fixture architecture needs square images, got {h}x{w}"
                    )));
                }
                let arch = fixture_arch(h, data.class_count)?;
                let (model, report) = train(data, None, arch, tc)?;
                self.write("model.bin", &save_model(&model, Some(&self.provenance))?)?;
                (model, Some(report), None)
            }
            None => (self.model()?, None, self.cfg.model.clone()),
        };
        Self::check_data(&model, &parts.benign_eval)?;
        let acc = accuracy(&model, &parts.benign_eval)?;
        self.write_json(
            "train_report.json",
            &TrainArtifact { provenance: self.provenance.clone(), pretrained, report, benign_eval_accuracy: acc },
        )
    }

    pub fn stage_profile(&self) -> Result<()> {
        let model = self.model()?;
        self.write_json(
            "thresholds.json",
            &TableArtifact { provenance: self.provenance.clone(), table: profile_thresholds(&model) },
        )
    }

    pub fn stage_attack(&self) -> Result<()> {
        let model = self.model()?;
        let parts = self.partitions()?;
        Self::check_data(&model, &parts.attack)?;
        let needs_exemplars = self.cfg.attacks.iter().any(|a| a.kind == AttackKind::DefenseAware);
        let exemplars = if needs_exemplars { select_exemplars(&model, &parts.exemplar)? } else { Vec::new() };
        let root = Stream::new(self.cfg.base_seed).fork_named("attack");
        let mut sets = Vec::new();
        for (i, base) in self.cfg.attacks.iter().enumerate() {
            let cfg = AttackConfig { seed: root.fork(i as u64).key(), ..*base };
            let name = format!("{i:02}_{}", slug(&base.label()));
            let entries = parts
                .attack
                .images
                .iter()
                .enumerate()
                .map(|(j, x)| Ok((parts.offsets[3] + j, cfg, run_attack(&model, x, &cfg, &exemplars)?)))
                .collect::<Result<Vec<_>>>()?;
            let set = AdversarialSet { provenance: Some(self.provenance.clone()), entries };
            let file = format!("attacks/{name}.bin");
            self.write(&file, &set.to_bytes()?)?;
            sets.push(AttackIndexEntry { file, name, attack: cfg });
        }
        self.write_json("attacks/index.json", &AttackIndex { provenance: self.provenance.clone(), sets })
    }

    pub fn stage_calibrate(&self) -> Result<()> {
        let model = self.model()?;
        let table = self.table()?;
        let parts = self.partitions()?;
        Self::check_data(&model, &parts.calibration)?;
        let samples = parts
            .calibration
            .images
            .iter()
            .map(|x| first_pass_distance(&model, &table, x, &self.cfg.noise, self.cfg.base_seed))
            .collect::<Result<Vec<_>>>()?;
        let thresholds = calibrate(&samples, self.cfg.detector.target_fpr)?;
        self.write_json(
            "calibration.json",
            &CalibrationArtifact {
                provenance: self.provenance.clone(),
                target_fpr: self.cfg.detector.target_fpr,
                thresholds,
                samples,
            },
        )
    }

    pub fn stage_detect(&self) -> Result<()> {
        let model = self.model()?;
        let table = self.table()?;
        let dcfg = self.detector_config()?;
        let parts = self.partitions()?;
        Self::check_data(&model, &parts.benign_eval)?;
        let run = |id: String, x: &crate::tensor::Tensor| -> Result<VerdictRecord> {
            Ok(VerdictRecord::new(id, &stochastic_inference(&model, &table, x, &dcfg)?))
        };
        let records = parts
            .benign_eval
            .images
            .iter()
            .enumerate()
            .map(|(j, x)| run(format!("benign/{}", parts.offsets[2] + j), x))
            .collect::<Result<Vec<_>>>()?;
        self.write_json(
            "verdicts/benign.json",
            &VerdictLog { provenance: self.provenance.clone(), set: "benign".into(), records },
        )?;
        for entry in self.attack_index()? {
            let set = self.adversarial_set(&entry)?;
            let records = set
                .entries
                .iter()
                .filter(|(_, _, s)| s.success)
                .map(|(src, _, s)| run(format!("{}/{src}", entry.name), &s.perturbed))
                .collect::<Result<Vec<_>>>()?;
            self.write_json(
                &format!("verdicts/{}.json", entry.name),
                &VerdictLog { provenance: self.provenance.clone(), set: entry.name.clone(), records },
            )?;
        }
        Ok(())
    }

    pub fn stage_eval(&self) -> Result<()> {
        let benign: Vec<_> = self.verdict_log("benign")?.records.iter().map(record_to_verdict).collect();
        let benign_metrics = metrics_from(&benign, &[]);
        let mut attacks = Vec::new();
        for entry in self.attack_index()? {
            let set = self.adversarial_set(&entry)?;
            let verdicts: Vec<_> = self.verdict_log(&entry.name)?.records.iter().map(record_to_verdict).collect();
            let ok: Vec<_> = set.successes().collect();
            let l2: Vec<f64> = ok.iter().map(|s| s.l2_distortion).collect();
            let l1: Vec<f64> = ok.iter().filter_map(|s| s.attack_l1_to_target).collect();
            attacks.push(AttackSummary {
                attack: entry.attack,
                attempted: set.entries.len(),
                successes: ok.len(),
                mean_l2: mean(&l2),
                mean_attack_l1: mean(&l1),
                detection: metrics_from(&[], &verdicts),
            });
        }
        sort_summaries(&mut attacks);
        let csv = metrics_table(&attacks, Some(&benign_metrics)).render(Some(&self.provenance));
        self.write("metrics.csv", csv.as_bytes())?;
        self.write_json(
            "metrics.json",
            &MetricsArtifact { provenance: self.provenance.clone(), benign: benign_metrics, attacks },
        )
    }

    pub fn stage_simulate(&self) -> Result<()> {
        let model = self.model()?;
        let table = self.table()?;
        let parts = self.partitions()?;
        Self::check_data(&model, &parts.benign_eval)?;
        let n = self.cfg.simulate_inputs.min(parts.benign_eval.len());
        let mut reports = Vec::with_capacity(n);
        for x in &parts.benign_eval.images[..n] {
            let budget = noise_budget(confidence(&model.predict(x)?), &self.cfg.noise);
            let seed = pass_seed(&input_stream(self.cfg.base_seed, x), 1);
            let plan = draw_plan(&model, &table, budget, seed)?;
            reports.push(simulate_model(&model, &plan, &self.cfg.accelerator)?);
        }
        let Some(report) = combine_reports(&reports) else {
            return Err(Error::InvalidArgument("no inputs to simulate".into()));
        };
        self.write("cycles.csv", cycles_table(&report).render(Some(&self.provenance)).as_bytes())?;
        self.write_json(
            "cycles.json",
            &CyclesArtifact {
                provenance: self.provenance.clone(),
                accelerator: self.cfg.accelerator,
                inputs: n,
                report,
            },
        )
    }

    pub fn stage_report(&self) -> Result<()> {
        let metrics = self.metrics()?;
        let first =
            |log: &VerdictLog| log.records.iter().filter_map(|r| r.l1_history.first().copied()).collect::<Vec<_>>();
        let mut sets = vec![("benign".to_string(), first(&self.verdict_log("benign")?))];
        for entry in self.attack_index()? {
            sets.push((entry.name.clone(), first(&self.verdict_log(&entry.name)?)));
        }
        let p = Some(&self.provenance);
        self.write("histograms.csv", histogram_table(&sets).render(p).as_bytes())?;
        self.write("k_sweep.csv", k_sweep_table(&metrics.attacks).render(p).as_bytes())?;
        self.write("beta_sweep.csv", beta_sweep_table(&metrics.attacks).render(p).as_bytes())
    }

    pub fn run_stage(&self, stage: &str) -> Result<()> {
        let (name, f): (&'static str, fn(&Self) -> Result<()>) = match stage {
            "train" => ("train", Self::stage_train),
            "profile" => ("profile", Self::stage_profile),
            "attack" => ("attack", Self::stage_attack),
            "calibrate" => ("calibrate", Self::stage_calibrate),
            "detect" => ("detect", Self::stage_detect),
            "eval" => ("eval", Self::stage_eval),
            "simulate" => ("simulate", Self::stage_simulate),
            "report" => ("report", Self::stage_report),
            other => return Err(Error::InvalidArgument(format!("unknown stage {other:?}"))),
        };
        f(self).map_err(|e| match e {
            Error::Config { .. } => e,
            other => Error::Stage { stage: name, source: Box::new(other) },
        })
    }

    /// All stages in order.
    pub fn run(&self) -> Result<()> {
        STAGES.iter().try_for_each(|s| self.run_stage(s))
    }
}

/// Problems found in an output directory: digest mismatches, missing files,
/// artifacts not stamped with the manifest's config hash, or a config that
/// no longer hashes to the recorded value.
pub fn verify(out: &Path, expected: Option<&ExperimentConfig>) -> Result<Vec<String>> {
    let bytes = std::fs::read(out.join(MANIFEST))
        .map_err(|e| Error::InvalidArgument(format!("cannot read {}: {e}", out.join(MANIFEST).display())))?;
    let manifest: Manifest = serde_json::from_slice(&bytes)?;
    let mut problems = Vec::new();
    let hash = manifest.provenance.config_hash.clone();
    if manifest.config.hash() != hash {
        problems.push(format!("manifest config hashes to {}, recorded {hash}", manifest.config.hash()));
    }
    if manifest.config.base_seed != manifest.provenance.base_seed {
        problems.push("manifest base_seed disagrees with its config".into());
    }
    if let Some(cfg) = expected {
        if cfg.hash() != hash {
            problems.push(format!("outputs were produced by config {hash}, expected {}", cfg.hash()));
        }
    }
    for (rel, want) in &manifest.files {
        let Ok(data) = std::fs::read(out.join(rel)) else {
            problems.push(format!("{rel}: missing"));
            continue;
        };
        if &digest(&data) != want {
            problems.push(format!("{rel}: digest mismatch"));
        }
        if !data.windows(hash.len()).any(|w| w == hash.as_bytes()) {
            problems.push(format!("{rel}: not stamped with config hash"));
        }
    }
    Ok(problems)
}

/// `next` / `least_likely` for flag parsing.
pub fn parse_target_mode(s: &str) -> Result<TargetMode> {
    match s {
        "next" => Ok(TargetMode::Next),
        "least_likely" | "ll" => Ok(TargetMode::LeastLikely),
        _ => Err(Error::InvalidArgument(format!("unknown target mode {s:?}"))),
    }
}
