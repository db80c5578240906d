//! Building blocks for few-shot detection with ternary objectness.
//!
//! The crate is split by concern:
//!
//! * [`boxgeom`] - boxes, IoU and feature-pyramid anchor grids.
//! * [`anchor_sampler`] - IoU-threshold labeling and per-image anchor sampling
//!   (uniform pooled sampling and the level-balanced `hsamp` sampler).
//! * [`ternary_rpn`] - ternary objectness labels, the classification gate that
//!   marks potential unseen-class anchors, and stage-dependent proposal ranking.
//! * [`objectness_losses`] - ternary cross-entropy, IoU-weighted supervised
//!   contrastive loss, the projection head and total-loss composition.
//!
//! Everything here is pure: functions take immutable inputs plus explicit seeds.

pub mod anchor_sampler;
pub mod boxgeom;
pub mod objectness_losses;
pub mod ternary_rpn;

mod keyhash;

pub use anchor_sampler::{AnchorBatch, AnchorCandidate, AnchorRole, SamplerConfig, SamplerKind};
pub use boxgeom::{AnchorGrid, BBox, PyramidSpec};
pub use objectness_losses::{ContrastiveEmbedding, LossWeights};
pub use ternary_rpn::{CombineOp, Proposal, ProposalBatch, Stage, TernaryLabel};
