//! Experiment harness: config loading, content-addressed run directories,
//! AP50 evaluation, the module ablation and parameter sweeps, and telemetry plots.
//! The `tfsod` binary is a thin CLI over these.

pub mod config;
pub mod eval;
pub mod experiments;
pub mod pipeline;
pub mod plot;

use std::path::PathBuf;

use tfsod_core::Stage;
use tfsod_detector::DetectorError;
use tfsod_synth::SynthError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("missing artifact {}{}", path.display(), source.as_ref().map(|e| format!(": {e}")).unwrap_or_default())]
    MissingArtifact {
        path: PathBuf,
        source: Option<std::io::Error>,
    },
    #[error("{stage} failed: {source}{}", last_good.as_ref().map(|p| format!(" (last good parameters in {})", p.display())).unwrap_or_default())]
    Training {
        stage: Stage,
        source: DetectorError,
        last_good: Option<PathBuf>,
    },
    #[error("rows {} and {} saw different datasets for seed {seed}", rows.0, rows.1)]
    Unpaired { seed: u64, rows: (String, String) },
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("{}: {message}", path.display())]
    Corrupt { path: PathBuf, message: String },
    #[error("plotting failed: {0}")]
    Plot(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl HarnessError {
    /// Process exit status: 2 config, 3 missing artifact, 4 divergence, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::MissingArtifact { .. } => 3,
            HarnessError::Training { source, .. } if source.is_divergence() => 4,
            HarnessError::Detector(e) if e.is_divergence() => 4,
            HarnessError::Detector(DetectorError::Config(_)) => 2,
            HarnessError::Training {
                source: DetectorError::Config(_),
                ..
            } => 2,
            _ => 1,
        }
    }
}
