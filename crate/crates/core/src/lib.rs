//! Stochastic-inference detection of adversarial inputs for small CNNs.
//!
//! A clean forward pass sets a reference output and a confidence-dependent
//! noise budget; noisy passes with per-filter magnitude sparsification are
//! compared to the reference by L1 distance. The crate also provides the
//! white-box attacks used to evaluate the detector and a cycle model of an
//! accelerator that exploits the dynamic sparsity.

pub mod attack;
pub mod data;
pub mod detect;
pub mod error;
pub mod model;
pub mod ops;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod sim;
pub mod sparsify;
pub mod store;
pub mod tensor;
pub mod threshold;
pub mod train;

pub use attack::{AdversarialSample, AttackConfig, AttackKind, TargetMode};
pub use data::Dataset;
pub use detect::{DetectionThresholds, DetectionVerdict, DetectorConfig, Label, Metrics, Termination};
pub use error::{Error, Result};
pub use model::{LayerKind, LayerSpec, LossSpec, Model};
pub use ops::ProbVector;
pub use sim::{AcceleratorConfig, CycleReport, Schedule};
pub use sparsify::{NoiseConfig, NoiseMode, SparsificationPlan};
pub use tensor::Tensor;
pub use threshold::ThresholdTable;
