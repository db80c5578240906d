//! Two-stage training: base-class pretraining and k-shot fine-tuning.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tfsod_core::objectness_losses::LossComponents;
use tfsod_core::Stage;
use tfsod_synth::{CategoryGroup, Dataset, Image, SceneRecord, Split};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::model::{tensor_seed, Arch, Detector};
use crate::nn::Fmap;
use crate::params::{ParamGroup, ParamStore, Sgd};
use crate::step::{AnchorCounts, GtBox};
use crate::telemetry::{TelemetryRecord, TelemetrySink};
use crate::DetectorError;

const PIXEL_MEAN: f32 = 0.5;
const PIXEL_STD: f32 = 0.25;
const STAGE_TAG_PRETRAIN: u64 = 0x0050_5245;
const STAGE_TAG_FINETUNE: u64 = 0x0046_494E;

/// Network input: channels-first, roughly zero-mean.
pub fn image_to_fmap(img: &Image) -> Fmap {
    let plane = img.width * img.height;
    let mut out = Fmap::zeros(3, img.height, img.width);
    for (p, px) in img.pixels.chunks_exact(3).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            out.data[c * plane + p] = (f32::from(v) / 255.0 - PIXEL_MEAN) / PIXEL_STD;
        }
    }
    out
}

/// Mirrors an input map and its boxes left to right.
pub fn hflip(img: &Fmap, gt: &[GtBox]) -> (Fmap, Vec<GtBox>) {
    let mut out = Fmap::zeros_like(img);
    for c in 0..img.c {
        for y in 0..img.h {
            for x in 0..img.w {
                out.data[(c * img.h + y) * img.w + x] = img.data[(c * img.h + y) * img.w + (img.w - 1 - x)];
            }
        }
    }
    let w = img.w as f64;
    let gt = gt
        .iter()
        .map(|g| GtBox {
            rect: [w - g.rect[2], g.rect[1], w - g.rect[0], g.rect[3]],
            class: g.class,
        })
        .collect();
    (out, gt)
}

/// A scene converted to network input and classifier targets.
#[derive(Debug, Clone)]
pub struct TrainImage {
    pub image: Fmap,
    pub gt: Vec<GtBox>,
    /// Carries a novel-seen label.
    pub novel: bool,
}

/// Category ids map to classes `id + 1`: base first, then novel-seen.
pub fn train_image(scene: &SceneRecord, dataset: &Dataset) -> TrainImage {
    let gt = scene
        .visible
        .iter()
        .map(|a| GtBox {
            rect: a.bbox.to_array(),
            class: a.category + 1,
        })
        .collect();
    let novel = scene
        .visible
        .iter()
        .any(|a| dataset.taxonomy.group(a.category) == CategoryGroup::NovelSeen);
    TrainImage {
        image: image_to_fmap(&scene.image),
        gt,
        novel,
    }
}

/// Category names a detector is trained on at `stage`, in class order.
pub fn stage_categories(dataset: &Dataset, stage: Stage) -> Vec<String> {
    let t = &dataset.taxonomy;
    let ids: Vec<usize> = match stage {
        Stage::Pretrain => t.base_ids().collect(),
        Stage::Finetune => t.base_ids().chain(t.novel_ids()).collect(),
    };
    ids.into_iter().map(|i| t.name(i).to_string()).collect()
}

/// Which parameter groups are discarded or frozen when fine-tuning starts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferPolicy {
    pub drop_heads: Vec<ParamGroup>,
    pub freeze: Vec<ParamGroup>,
}

impl Default for TransferPolicy {
    fn default() -> Self {
        Self {
            drop_heads: vec![ParamGroup::ObjContrastHead, ParamGroup::RoiContrastHead],
            freeze: Vec::new(),
        }
    }
}

impl TransferPolicy {
    pub fn validate(&self) -> Result<(), DetectorError> {
        for g in [ParamGroup::ObjContrastHead, ParamGroup::RoiContrastHead] {
            if !self.drop_heads.contains(&g) {
                return Err(DetectorError::Policy(format!(
                    "`{}` must be dropped at transfer",
                    g.name()
                )));
            }
        }
        for g in [ParamGroup::Backbone, ParamGroup::RoiHead] {
            if self.freeze.contains(&g) {
                return Err(DetectorError::Policy(format!("`{}` must stay trainable", g.name())));
            }
        }
        Ok(())
    }

    pub fn frozen_mask(&self, params: &ParamStore) -> Vec<bool> {
        params.meta.iter().map(|m| self.freeze.contains(&m.group)).collect()
    }
}

/// Builds the fine-tuning network from a pretrain checkpoint.
///
/// Tensors outside `drop_heads` are copied bit for bit, except that the RoI
/// classifier gains freshly initialized rows for the new categories. Dropped
/// heads are re-initialized from a fine-tuning seed.
pub fn transfer(
    ckpt: &Checkpoint,
    categories: &[String],
    policy: &TransferPolicy,
    cfg: &RunConfig,
) -> Result<Detector, DetectorError> {
    policy.validate()?;
    let old = &ckpt.manifest.categories;
    if categories.len() < old.len() || &categories[..old.len()] != old.as_slice() {
        return Err(DetectorError::CategoryMismatch {
            checkpoint: old.clone(),
            config: categories.to_vec(),
        });
    }
    let src = &ckpt.detector;
    let arch = Arch {
        num_classes: categories.len(),
        embed_dim: cfg.embed_dim,
        ..src.arch.clone()
    };
    let mut det = Detector::new(arch, tensor_seed(cfg.seed, STAGE_TAG_FINETUNE as usize));
    let (cls_w, cls_b) = det.cls_ids();
    for i in 0..det.params.len() {
        let meta = det.params.meta[i].clone();
        if policy.drop_heads.contains(&meta.group) {
            continue;
        }
        let from = src
            .params
            .find(&meta.name)
            .ok_or_else(|| DetectorError::Checkpoint(format!("checkpoint lacks tensor `{}`", meta.name)))?;
        let values = src.params.get(from);
        let dst = &mut det.params.values[i];
        if i == cls_w.0 || i == cls_b.0 {
            // Rows are classes; the old classes are a prefix of the new ones.
            dst[..values.len()].copy_from_slice(values);
        } else if values.len() == dst.len() {
            dst.copy_from_slice(values);
        } else {
            return Err(DetectorError::Checkpoint(format!("shape mismatch for `{}`", meta.name)));
        }
    }
    Ok(det)
}

/// Training stopped early.
#[derive(Debug)]
pub struct TrainFailure {
    pub error: DetectorError,
    /// Parameters from before the failing iteration.
    pub last_good: Checkpoint,
}

/// Where training images are drawn from.
struct Pool {
    base: Vec<TrainImage>,
    novel: Vec<TrainImage>,
    novel_fraction: f64,
}

impl Pool {
    fn new(dataset: &Dataset, split: Split, novel_fraction: f64) -> Self {
        let (novel, base): (Vec<TrainImage>, Vec<TrainImage>) = dataset
            .scenes_in(split)
            .map(|s| train_image(s, dataset))
            .partition(|t| t.novel);
        Self {
            base,
            novel,
            novel_fraction,
        }
    }

    fn pick(&self, rng: &mut ChaCha8Rng) -> &TrainImage {
        let use_novel = !self.novel.is_empty() && (self.base.is_empty() || rng.random::<f64>() < self.novel_fraction);
        let from = if use_novel { &self.novel } else { &self.base };
        &from[rng.random_range(0..from.len())]
    }
}

fn mix(a: u64, b: u64) -> u64 {
    tensor_seed(a, b as usize)
}

/// Runs `iters` SGD iterations, reporting one telemetry record each.
#[allow(clippy::too_many_arguments)]
fn train_loop(
    det: &mut Detector,
    pool: &Pool,
    cfg: &RunConfig,
    stage: Stage,
    iters: usize,
    frozen: &[bool],
    categories: &[String],
    sink: &mut dyn TelemetrySink,
) -> Result<(), Box<TrainFailure>> {
    let tag = match stage {
        Stage::Pretrain => STAGE_TAG_PRETRAIN,
        Stage::Finetune => STAGE_TAG_FINETUNE,
    };
    let mut opt = Sgd::new(&det.params, cfg.momentum as f32, cfg.weight_decay as f32);
    let mut grads = det.params.zeros_like();
    let start = Instant::now();
    let fail = |det: &Detector, it: usize, error: DetectorError| {
        Box::new(TrainFailure {
            error,
            last_good: Checkpoint::new(det.clone(), stage, it as u64, categories.to_vec(), cfg.clone()),
        })
    };
    if pool.base.is_empty() && pool.novel.is_empty() && iters > 0 {
        return Err(fail(det, 0, DetectorError::EmptyDataset));
    }
    let scale = 1.0 / cfg.images_per_step as f32;
    for it in 0..iters {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(cfg.seed, tag), it as u64));
        grads.fill_zero();
        let mut losses = LossComponents::default();
        let mut total = 0.0;
        let mut counts = AnchorCounts::zeros(det.num_levels());
        for _ in 0..cfg.images_per_step {
            let sample = pool.pick(&mut rng);
            let flip = cfg.hflip && rng.random::<bool>();
            let step_seed = rng.random::<u64>();
            let flipped;
            let (image, gt) = if flip {
                flipped = hflip(&sample.image, &sample.gt);
                (&flipped.0, flipped.1.as_slice())
            } else {
                (&sample.image, sample.gt.as_slice())
            };
            let out = det
                .forward_train(image, gt, stage, cfg, step_seed, Some((&mut grads, scale)))
                .map_err(|e| fail(det, it, e))?;
            let w = f64::from(scale);
            losses.cls += out.losses.cls * w;
            losses.bbox += out.losses.bbox * w;
            losses.obj += out.losses.obj * w;
            losses.tcon += out.losses.tcon * w;
            losses.contra += out.losses.contra * w;
            total += out.total * w;
            counts.add(&out.counts);
        }
        if !total.is_finite() || !grads.all_finite() {
            return Err(fail(det, it, DetectorError::Diverged { iteration: it as u64 }));
        }
        if cfg.grad_clip > 0.0 {
            let norm = grads.squared_norm().sqrt();
            if norm > cfg.grad_clip {
                let s = (cfg.grad_clip / norm) as f32;
                grads.values.iter_mut().flatten().for_each(|g| *g *= s);
            }
        }
        let warm = if cfg.warmup_iters == 0 {
            1.0
        } else {
            ((it + 1) as f64 / cfg.warmup_iters as f64).min(1.0)
        };
        let lr = cfg.lr * warm;
        let before = det.params.clone();
        opt.step(&mut det.params, &grads, lr as f32, frozen);
        if !det.params.all_finite() {
            det.params = before;
            return Err(fail(det, it, DetectorError::Diverged { iteration: it as u64 }));
        }
        let rec = TelemetryRecord {
            stage,
            iteration: it as u64,
            loss_total: total,
            loss_cls: losses.cls,
            loss_bbox: losses.bbox,
            loss_obj: losses.obj,
            loss_tcon: losses.tcon,
            loss_contra: losses.contra,
            lr,
            images: cfg.images_per_step,
            counts,
            elapsed_ms: if cfg.deterministic {
                0
            } else {
                start.elapsed().as_millis() as u64
            },
        };
        sink.record(&rec)
            .map_err(|e| fail(det, it + 1, DetectorError::Telemetry(e)))?;
    }
    sink.flush()
        .map_err(|e| fail(det, iters, DetectorError::Telemetry(e)))?;
    Ok(())
}

fn check_config(cfg: &RunConfig) -> Result<(), DetectorError> {
    let issues = cfg.validate();
    if issues.is_empty() {
        Ok(())
    } else {
        Err(DetectorError::Config(
            issues.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; "),
        ))
    }
}

/// Trains on base categories from scratch.
pub fn pretrain(
    dataset: &Dataset,
    cfg: &RunConfig,
    sink: &mut dyn TelemetrySink,
) -> Result<Checkpoint, Box<TrainFailure>> {
    let categories = stage_categories(dataset, Stage::Pretrain);
    let arch = Arch::toy(categories.len(), cfg.embed_dim);
    let mut det = Detector::new(arch, tensor_seed(cfg.seed, STAGE_TAG_PRETRAIN as usize));
    if let Err(error) = check_config(cfg) {
        return Err(Box::new(TrainFailure {
            error,
            last_good: Checkpoint::new(det, Stage::Pretrain, 0, categories, cfg.clone()),
        }));
    }
    let pool = Pool::new(dataset, Split::Pretrain, 0.0);
    let frozen = vec![false; det.params.len()];
    train_loop(
        &mut det,
        &pool,
        cfg,
        Stage::Pretrain,
        cfg.pretrain_iters,
        &frozen,
        &categories,
        sink,
    )?;
    Ok(Checkpoint::new(
        det,
        Stage::Pretrain,
        cfg.pretrain_iters as u64,
        categories,
        cfg.clone(),
    ))
}

/// Transfers `ckpt` to base plus novel-seen categories and trains on the k-shot split.
pub fn finetune(
    ckpt: &Checkpoint,
    dataset: &Dataset,
    cfg: &RunConfig,
    policy: &TransferPolicy,
    sink: &mut dyn TelemetrySink,
) -> Result<Checkpoint, Box<TrainFailure>> {
    let categories = stage_categories(dataset, Stage::Finetune);
    let failed = |error| {
        Box::new(TrainFailure {
            error,
            last_good: ckpt.clone(),
        })
    };
    check_config(cfg).map_err(failed)?;
    let mut det = transfer(ckpt, &categories, policy, cfg).map_err(failed)?;
    let pool = Pool::new(dataset, Split::Finetune, cfg.finetune_novel_fraction);
    let frozen = policy.frozen_mask(&det.params);
    train_loop(
        &mut det,
        &pool,
        cfg,
        Stage::Finetune,
        cfg.finetune_iters,
        &frozen,
        &categories,
        sink,
    )?;
    Ok(Checkpoint::new(
        det,
        Stage::Finetune,
        cfg.finetune_iters as u64,
        categories,
        cfg.clone(),
    ))
}

/// Continues training a checkpoint at its own stage; used to observe a trained
/// model's anchor statistics.
pub fn continue_training(
    ckpt: &Checkpoint,
    dataset: &Dataset,
    cfg: &RunConfig,
    iters: usize,
    sink: &mut dyn TelemetrySink,
) -> Result<Checkpoint, Box<TrainFailure>> {
    let stage = ckpt.manifest.stage;
    let categories = ckpt.manifest.categories.clone();
    let mut det = ckpt.detector.clone();
    let (split, frac) = match stage {
        Stage::Pretrain => (Split::Pretrain, 0.0),
        Stage::Finetune => (Split::Finetune, cfg.finetune_novel_fraction),
    };
    let pool = Pool::new(dataset, split, frac);
    let frozen = vec![false; det.params.len()];
    train_loop(&mut det, &pool, cfg, stage, iters, &frozen, &categories, sink)?;
    let iteration = ckpt.manifest.iteration + iters as u64;
    Ok(Checkpoint::new(det, stage, iteration, categories, cfg.clone()))
}
