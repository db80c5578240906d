//! A small two-stage detector with a three-way objectness RPN, trained on
//! synthetic shapes in a base-pretrain then k-shot fine-tune schedule.
//!
//! Layers are written out by hand with explicit backward passes; the objectness
//! losses, anchor sampling and proposal ranking come from `tfsod-core`.

pub mod boxes;
pub mod checkpoint;
pub mod config;
mod infer;
pub mod model;
pub mod nn;
pub mod params;
mod step;
pub mod telemetry;
pub mod train;

use std::path::PathBuf;

use tfsod_core::anchor_sampler::SamplerError;
use tfsod_core::objectness_losses::LossError;
use tfsod_core::ternary_rpn::RpnError;
use thiserror::Error;

pub use checkpoint::{Checkpoint, CheckpointManifest};
pub use config::RunConfig;
pub use infer::Detection;
pub use model::{Arch, Detector};
pub use params::{ParamGroup, ParamStore};
pub use step::{AnchorCounts, GtBox, TrainOutput};
pub use telemetry::{FileSink, MemorySink, TelemetryRecord, TelemetrySink};
pub use train::{finetune, pretrain, TrainFailure, TransferPolicy};

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("ground-truth class {class} outside 1..={num_classes}")]
    BadClass { class: usize, num_classes: usize },
    #[error("anchor sampling failed: {0}")]
    Sampler(#[from] SamplerError),
    #[error("loss evaluation failed: {0}")]
    Loss(#[from] LossError),
    #[error("proposal stage failed: {0}")]
    Rpn(#[from] RpnError),
    #[error("training diverged at iteration {iteration}")]
    Diverged { iteration: u64 },
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("no training images")]
    EmptyDataset,
    #[error("checkpoint categories {checkpoint:?} are not a prefix of {config:?}")]
    CategoryMismatch {
        checkpoint: Vec<String>,
        config: Vec<String>,
    },
    #[error("invalid transfer policy: {0}")]
    Policy(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("telemetry write failed: {0}")]
    Telemetry(std::io::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl DetectorError {
    /// Whether the failure is numerical (loss or parameters went non-finite).
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            DetectorError::Diverged { .. } | DetectorError::NonFinite(_) | DetectorError::Loss(LossError::NonFinite(_))
        )
    }
}
