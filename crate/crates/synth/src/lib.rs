//! Deterministic synthetic shapes for few-shot detection experiments.
//!
//! Categories are split into base, novel-seen and unseen groups. Pretrain scenes
//! label base objects only, while unlabeled novel or unseen objects sit in the
//! background, so a detector trained on them learns to call real objects
//! background unless something corrects for it.

mod dataset;
mod generate;
mod io;
pub mod shapes;
mod taxonomy;

use std::path::PathBuf;

use thiserror::Error;

pub use dataset::{Annotation, Dataset, GenParams, Image, RenderConfig, SceneCounts, SceneRecord, Split, Splits};
pub use generate::generate;
pub use io::{export, load, SCHEMA_VERSION};
pub use shapes::{ShapeFamily, ShapeKind};
pub use taxonomy::{CategoryGroup, CategoryTaxonomy};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("k_shot must be at least 1")]
    BadKShot,
    #[error("unseen_rate must lie in [0, 1], got {0}")]
    BadUnseenRate(f64),
    #[error("k_shot = {k_shot} exceeds the {available} images generated per novel category")]
    NotEnoughNovel { k_shot: usize, available: usize },
    #[error("invalid taxonomy: {0}")]
    Taxonomy(String),
    #[error("invalid render config: {0}")]
    Render(String),
    #[error("dataset schema version {found} is not supported (this build reads version {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", path.display())]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{}: {source}", path.display())]
    Image { path: PathBuf, source: image::ImageError },
}
