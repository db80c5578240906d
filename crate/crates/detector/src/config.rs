//! Every tunable of a two-stage experiment, as one flat record.
//!
//! Field docs double as the config-file schema; see `docs/config.md`.

use serde::{Deserialize, Serialize};
use tfsod_core::{CombineOp, LossWeights, SamplerKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Global seed: data generation, initialization, sampling, augmentation.
    pub seed: u64,

    /// Synthetic dataset: pretrain scenes.
    pub data_pretrain_images: usize,
    /// Candidate scenes rendered per novel category.
    pub data_novel_pool: usize,
    pub data_test_images: usize,
    /// Labeled images per novel category at fine-tuning.
    pub k_shot: usize,
    /// Probability that a training scene carries unlabeled objects.
    pub unseen_rate: f64,
    /// Draw unlabeled objects at the largest size.
    pub large_unlabeled: bool,

    /// `hsamp` (level-balanced negatives) or `random` (pooled).
    pub sampler: SamplerKind,
    /// Anchors sampled per image.
    pub budget: usize,
    pub pos_fraction: f64,
    /// Split the active quota across levels as well (hsamp only).
    pub balance_actives: bool,
    /// IoU above which an anchor is active.
    pub active_iou: f64,
    /// IoU below which an anchor is negative.
    pub negative_iou: f64,

    /// RoI classification probability above which a negative anchor becomes potential.
    /// `1.0` disables relabeling.
    pub thre_cls: f64,
    /// How the object and potential scores merge when ranking at fine-tuning.
    pub combine_op: CombineOp,
    /// Proposals kept before NMS.
    pub pre_nms_topk: usize,
    /// Proposals kept after NMS.
    pub topk: usize,
    pub rpn_nms_iou: f64,

    /// Weight of the RoI contrastive loss.
    pub alpha: f64,
    /// Weight of the objectness contrastive loss.
    pub lambda: f64,
    /// IoU cutoff for contributing to a contrastive loss.
    pub phi: f64,
    /// Contrastive temperature.
    pub tau: f64,
    pub embed_dim: usize,

    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Linear learning-rate warmup length, in iterations.
    pub warmup_iters: usize,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub pretrain_iters: usize,
    pub finetune_iters: usize,
    pub images_per_step: usize,
    /// Share of fine-tuning images drawn from the novel k-shot scenes.
    pub finetune_novel_fraction: f64,
    /// RoIs sampled per image for the second stage.
    pub roi_per_image: usize,
    pub roi_fg_fraction: f64,
    pub hflip: bool,

    /// Detection confidence cutoff at evaluation.
    pub score_thresh: f64,
    /// Per-category NMS IoU at evaluation.
    pub nms_iou: f64,

    /// Single-worker mode with wall-clock columns zeroed, for bit-identical reruns.
    pub deterministic: bool,
    /// Telemetry flush period in iterations (at most 50).
    pub telemetry_flush_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            seed: 0,
            data_pretrain_images: 300,
            data_novel_pool: 10,
            data_test_images: 120,
            k_shot: 5,
            unseen_rate: 0.5,
            large_unlabeled: false,
            sampler: SamplerKind::Hsamp,
            budget: 256,
            pos_fraction: 0.5,
            balance_actives: false,
            active_iou: 0.7,
            negative_iou: 0.3,
            thre_cls: 0.75,
            combine_op: CombineOp::Max,
            pre_nms_topk: 300,
            topk: 48,
            rpn_nms_iou: 0.7,
            alpha: w.alpha,
            lambda: w.lambda,
            phi: w.phi,
            tau: w.tau,
            embed_dim: 128,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_iters: 100,
            grad_clip: 10.0,
            pretrain_iters: 2000,
            finetune_iters: 600,
            images_per_step: 1,
            finetune_novel_fraction: 0.5,
            roi_per_image: 32,
            roi_fg_fraction: 0.25,
            hflip: true,
            score_thresh: 0.05,
            nms_iou: 0.5,
            deterministic: true,
            telemetry_flush_every: 50,
        }
    }
}

/// One failed check: the offending key and what is wrong with it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub key: &'static str,
    pub message: String,
}

impl std::fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.key, self.message)
    }
}

impl RunConfig {
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            lambda: self.lambda,
            phi: self.phi,
            tau: self.tau,
        }
    }

    /// All problems found, empty when the config is usable.
    pub fn validate(&self) -> Vec<ConfigIssue> {
        let mut out = Vec::new();
        let mut check = |ok: bool, key: &'static str, message: &str| {
            if !ok {
                out.push(ConfigIssue {
                    key,
                    message: message.to_string(),
                });
            }
        };
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        check(
            self.data_pretrain_images > 0,
            "data_pretrain_images",
            "must be positive",
        );
        check(self.data_test_images > 0, "data_test_images", "must be positive");
        check(self.k_shot >= 1, "k_shot", "must be at least 1");
        check(
            self.k_shot <= self.data_novel_pool,
            "k_shot",
            "must not exceed data_novel_pool",
        );
        check(unit(self.unseen_rate), "unseen_rate", "must lie in [0, 1]");
        check(self.budget > 0, "budget", "must be positive");
        check(unit(self.pos_fraction), "pos_fraction", "must lie in [0, 1]");
        check(
            0.0 <= self.negative_iou && self.negative_iou < self.active_iou && self.active_iou <= 1.0,
            "active_iou",
            "need 0 <= negative_iou < active_iou <= 1",
        );
        check(
            self.thre_cls > 0.0 && self.thre_cls <= 1.0,
            "thre_cls",
            "must lie in (0, 1]",
        );
        check(self.pre_nms_topk >= self.topk, "pre_nms_topk", "must be >= topk");
        check(self.topk > 0, "topk", "must be positive");
        check(unit(self.rpn_nms_iou), "rpn_nms_iou", "must lie in [0, 1]");
        check(
            self.alpha >= 0.0 && self.alpha.is_finite(),
            "alpha",
            "must be finite and >= 0",
        );
        check(
            self.lambda >= 0.0 && self.lambda.is_finite(),
            "lambda",
            "must be finite and >= 0",
        );
        check(unit(self.phi), "phi", "must lie in [0, 1]");
        check(self.tau > 0.0 && self.tau.is_finite(), "tau", "must be finite and > 0");
        check(self.embed_dim > 0, "embed_dim", "must be positive");
        check(self.lr > 0.0 && self.lr.is_finite(), "lr", "must be finite and > 0");
        check(
            unit(self.momentum) && self.momentum < 1.0,
            "momentum",
            "must lie in [0, 1)",
        );
        check(self.weight_decay >= 0.0, "weight_decay", "must be >= 0");
        check(self.grad_clip >= 0.0, "grad_clip", "must be >= 0");
        check(self.images_per_step > 0, "images_per_step", "must be positive");
        check(
            unit(self.finetune_novel_fraction),
            "finetune_novel_fraction",
            "must lie in [0, 1]",
        );
        check(self.roi_per_image > 0, "roi_per_image", "must be positive");
        check(unit(self.roi_fg_fraction), "roi_fg_fraction", "must lie in [0, 1]");
        check(unit(self.score_thresh), "score_thresh", "must lie in [0, 1]");
        check(unit(self.nms_iou), "nms_iou", "must lie in [0, 1]");
        check(
            (1..=50).contains(&self.telemetry_flush_every),
            "telemetry_flush_every",
            "must lie in 1..=50",
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = RunConfig::default();
        assert!(c.validate().is_empty(), "{:?}", c.validate());
        assert_eq!(c.weight_decay, 1e-4);
        assert_eq!(c.momentum, 0.9);
        assert_eq!(c.tau, 0.2);
        assert_eq!(c.alpha, 0.5);
        assert_eq!(c.thre_cls, 0.75);
        assert_eq!(c.embed_dim, 128);
    }

    #[test]
    fn issues_name_the_key() {
        let c = RunConfig {
            thre_cls: 0.0,
            tau: -1.0,
            ..RunConfig::default()
        };
        let keys: Vec<_> = c.validate().into_iter().map(|i| i.key).collect();
        assert_eq!(keys, vec!["thre_cls", "tau"]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"seed": 1, "bogus": 2}"#).unwrap_err();
        assert!(err.to_string().contains("bogus"));
        let ok: RunConfig = serde_json::from_str(r#"{"seed": 1, "sampler": "random"}"#).unwrap();
        assert_eq!(ok.sampler, SamplerKind::Random);
    }
}
