//! One training forward/backward pass over a single image.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tfsod_core::anchor_sampler::{label_anchors, sample, AnchorCandidate, AnchorRole, SamplerConfig};
use tfsod_core::boxgeom::match_boxes;
use tfsod_core::objectness_losses::{
    supcon_loss_with_grad, ternary_ce_with_grad, total_loss, ContrastiveEmbedding, LossComponents,
};
use tfsod_core::ternary_rpn::{
    assign_proposal_labels, gate_potential, ranking_key, top_k_by_key, Proposal, ProposalBatch,
};
use tfsod_core::{BBox, Stage, TernaryLabel};

use crate::boxes::{clip, decode, encode, nms, smooth_l1, to_bbox, Rect};
use crate::config::RunConfig;
use crate::model::{Detector, FeatureGrads, Features, HeadKind, ROI_BOX_WEIGHTS};
use crate::nn::Fmap;
use crate::params::ParamStore;
use crate::DetectorError;

const RPN_BOX_BETA: f64 = 1.0 / 9.0;
const ROI_FG_IOU: f64 = 0.5;
const ROI_STREAM: u64 = 0x005E_ED0F_2015;

/// A labeled box; `class` counts from 1, 0 being background.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub rect: Rect,
    pub class: usize,
}

/// Sampled-anchor counts by role after gating, per pyramid level.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorCounts {
    pub active: Vec<usize>,
    pub negative: Vec<usize>,
    pub potential: Vec<usize>,
}

impl AnchorCounts {
    pub fn zeros(levels: usize) -> Self {
        Self {
            active: vec![0; levels],
            negative: vec![0; levels],
            potential: vec![0; levels],
        }
    }

    pub fn add(&mut self, other: &AnchorCounts) {
        for (dst, src) in [
            (&mut self.active, &other.active),
            (&mut self.negative, &other.negative),
            (&mut self.potential, &other.potential),
        ] {
            if dst.len() < src.len() {
                dst.resize(src.len(), 0);
            }
            for (a, b) in dst.iter_mut().zip(src) {
                *a += b;
            }
        }
    }

    pub fn totals(&self) -> (usize, usize, usize) {
        (
            self.active.iter().sum(),
            self.negative.iter().sum(),
            self.potential.iter().sum(),
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub losses: LossComponents,
    pub total: f64,
    pub proposals: ProposalBatch,
    pub counts: AnchorCounts,
}

fn log_softmax3(l: [f32; 3]) -> [f64; 3] {
    let l = l.map(f64::from);
    let m = l[0].max(l[1]).max(l[2]);
    let lse = m + l.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    l.map(|v| v - lse)
}

impl Detector {
    /// Decoded, clipped proposal box of anchor `i`.
    pub(crate) fn anchor_proposal(&self, f: &Features, i: usize) -> Rect {
        let size = self.arch.image_size as f64;
        let r = clip(decode(&self.anchor_rects()[i], self.anchor_deltas(f, i)), size, size);
        widen(r, size)
    }

    /// Ranked, NMS-filtered proposals: anchor indices, boxes and log-probabilities.
    pub(crate) fn propose(
        &self,
        f: &Features,
        stage: Stage,
        cfg: &RunConfig,
    ) -> (Vec<usize>, Vec<Rect>, Vec<[f64; 3]>) {
        let n = self.anchor_rects().len();
        let logp: Vec<[f64; 3]> = (0..n).map(|i| log_softmax3(self.anchor_logits(f, i))).collect();
        let keys: Vec<f64> = logp.iter().map(|l| ranking_key(l, stage, cfg.combine_op)).collect();
        let top = top_k_by_key(&keys, cfg.pre_nms_topk);
        let rects: Vec<Rect> = top.iter().map(|&i| self.anchor_proposal(f, i)).collect();
        let local: Vec<usize> = (0..top.len()).collect();
        let kept = nms(&rects, &local, cfg.rpn_nms_iou, cfg.topk);
        (
            kept.iter().map(|&k| top[k]).collect(),
            kept.iter().map(|&k| rects[k]).collect(),
            kept.iter().map(|&k| logp[top[k]]).collect(),
        )
    }

    /// Forward pass with losses; accumulates `scale`-weighted gradients when `grads` is given.
    ///
    /// Anchors are matched and sampled, sampled negatives are gated through the RoI
    /// classifier, proposals are ranked with the stage's key, and RoIs are sampled
    /// from the surviving proposals plus the ground truth.
    pub fn forward_train(
        &self,
        image: &Fmap,
        gt: &[GtBox],
        stage: Stage,
        cfg: &RunConfig,
        seed: u64,
        grads: Option<(&mut ParamStore, f32)>,
    ) -> Result<TrainOutput, DetectorError> {
        let f = self.features(image);
        if !f.is_finite() {
            return Err(DetectorError::NonFinite("network features"));
        }
        let k1 = self.num_classes() + 1;
        if let Some(g) = gt.iter().find(|g| g.class == 0 || g.class >= k1) {
            return Err(DetectorError::BadClass {
                class: g.class,
                num_classes: self.num_classes(),
            });
        }
        let gt_boxes: Vec<BBox> = gt.iter().map(|g| to_bbox(g.rect)).collect();
        let anchors = self.grid().anchors();
        let matches = match_boxes(anchors.iter().map(|a| &a.bbox), &gt_boxes);
        let ious: Vec<f64> = matches.iter().map(|m| m.0).collect();
        let roles = label_anchors(&ious, cfg.active_iou, cfg.negative_iou)?;
        let cands: Vec<AnchorCandidate> = anchors
            .iter()
            .enumerate()
            .filter(|(i, _)| roles[*i] != AnchorRole::Ignore)
            .map(|(i, a)| AnchorCandidate {
                id: i as u64,
                level: a.level,
                role: roles[i],
                iou: ious[i],
            })
            .collect();
        let sampler = SamplerConfig {
            kind: cfg.sampler,
            budget: cfg.budget,
            pos_fraction: cfg.pos_fraction,
            num_levels: self.num_levels(),
            balance_actives: cfg.balance_actives,
        };
        let batch = sample(&cands, &sampler, seed)?;
        let members = &batch.members;
        let mut labels: Vec<TernaryLabel> = members.iter().map(|m| m.label).collect();

        // Gate: sampled negatives the RoI classifier confidently calls an object.
        if cfg.thre_cls < 1.0 {
            let neg: Vec<usize> = (0..members.len())
                .filter(|&k| labels[k] == TernaryLabel::NonObject)
                .collect();
            if !neg.is_empty() {
                // The anchor's own region, not its regressed box: a negative next to a
                // labeled object would otherwise be scored as that object.
                let size = self.arch.image_size as f64;
                let rects: Vec<Rect> = neg
                    .iter()
                    .map(|&k| widen(clip(self.anchor_rects()[members[k].id as usize], size, size), size))
                    .collect();
                let (probs, _) = self.classify(&f, &rects);
                let probs: Vec<f64> = probs.iter().map(|&p| f64::from(p)).collect();
                let mut sub = vec![TernaryLabel::NonObject; neg.len()];
                gate_potential(&probs, k1, cfg.thre_cls, &mut sub)?;
                for (&k, l) in neg.iter().zip(sub) {
                    labels[k] = l;
                }
            }
        }

        let mut counts = AnchorCounts::zeros(self.num_levels());
        for (m, l) in members.iter().zip(&labels) {
            match l {
                TernaryLabel::Object => counts.active[m.level] += 1,
                TernaryLabel::NonObject => counts.negative[m.level] += 1,
                TernaryLabel::Potential => counts.potential[m.level] += 1,
            }
        }

        let (mut grads, scale) = match grads {
            Some((g, s)) => (Some(g), s),
            None => (None, 0.0),
        };
        let want_grads = grads.is_some();
        let mut fg = FeatureGrads::zeros(&f);
        let mut losses = LossComponents::default();

        // Ternary objectness.
        let logits: Vec<[f64; 3]> = members
            .iter()
            .map(|m| self.anchor_logits(&f, m.id as usize).map(f64::from))
            .collect();
        let (obj, obj_grad) = ternary_ce_with_grad(&logits, &labels)?;
        losses.obj = obj;

        // RPN box regression on active anchors only.
        let inv_m = 1.0 / members.len().max(1) as f64;
        let mut rpn_box = 0.0;
        let mut box_grad: Vec<(usize, [f64; 4])> = Vec::new();
        for (m, l) in members.iter().zip(&labels) {
            if *l != TernaryLabel::Object {
                continue;
            }
            let i = m.id as usize;
            let gi = matches[i].1.expect("active anchors have a match");
            let target = encode(&self.anchor_rects()[i], &gt[gi].rect);
            let (v, g) = smooth_l1(self.anchor_deltas(&f, i), target, RPN_BOX_BETA);
            rpn_box += v * inv_m;
            box_grad.push((i, g.map(|x| x * inv_m)));
        }

        if want_grads {
            for (m, g) in members.iter().zip(&obj_grad) {
                let s = self.slots()[m.id as usize];
                let map = fg.obj[s.level].get_or_insert_with(|| Fmap::zeros_like(&f.rpn[s.level].obj));
                let plane = map.plane();
                for (t, &gt) in g.iter().enumerate() {
                    map.data[(s.ratio * 3 + t) * plane + s.offset] += (gt as f32) * scale;
                }
            }
            for (i, g) in &box_grad {
                let s = self.slots()[*i];
                let map = fg.delta[s.level].get_or_insert_with(|| Fmap::zeros_like(&f.rpn[s.level].delta));
                let plane = map.plane();
                for (d, &gd) in g.iter().enumerate() {
                    map.data[(s.ratio * 4 + d) * plane + s.offset] += (gd as f32) * scale;
                }
            }
        }

        // Objectness contrastive loss on the RPN hidden features of sampled anchors.
        if cfg.lambda > 0.0 && !members.is_empty() {
            let c = self.arch.fpn_channels;
            let mut x = Vec::with_capacity(members.len() * c);
            for m in members {
                let s = self.slots()[m.id as usize];
                let t = &f.rpn[s.level].t;
                let plane = t.plane();
                x.extend((0..c).map(|ch| t.data[ch * plane + s.offset]));
            }
            let head = self.head(HeadKind::Objectness);
            let pass = head.forward(&x, members.len());
            let unit: Vec<f64> = pass.normalized.unit.iter().map(|&v| f64::from(v)).collect();
            let emb = ContrastiveEmbedding::new(unit, head.d_out, true)?;
            let ids: Vec<usize> = labels.iter().map(|l| l.index()).collect();
            let mious: Vec<f64> = members.iter().map(|m| m.iou).collect();
            let (tcon, gu) = supcon_loss_with_grad(&emb, &ids, &mious, cfg.phi, cfg.tau)?;
            losses.tcon = tcon;
            if let Some(grads) = grads.as_deref_mut() {
                let w = (cfg.lambda as f32) * scale;
                let gu: Vec<f32> = gu.iter().map(|&v| v as f32 * w).collect();
                let (hg, gx) = head.backward(&x, &pass, &gu);
                self.add_head_grads(HeadKind::Objectness, &hg, grads);
                for (r, m) in members.iter().enumerate() {
                    let s = self.slots()[m.id as usize];
                    let t = &f.rpn[s.level].t;
                    let map = fg.rpn_hidden[s.level].get_or_insert_with(|| Fmap::zeros_like(t));
                    let plane = map.plane();
                    for ch in 0..c {
                        map.data[ch * plane + s.offset] += gx[r * c + ch];
                    }
                }
            }
        }

        // Proposals.
        let (sources, rects, logp) = self.propose(&f, stage, cfg);
        let sampled_label = |i: usize| {
            members
                .iter()
                .position(|m| m.id as usize == i)
                .map_or(TernaryLabel::NonObject, |k| labels[k])
        };
        let prop_boxes: Vec<BBox> = rects.iter().map(|r| to_bbox(*r)).collect();
        let src_labels: Vec<TernaryLabel> = sources.iter().map(|&i| sampled_label(i)).collect();
        let assigned = assign_proposal_labels(&prop_boxes, &gt_boxes, &src_labels, cfg.active_iou)?;
        let proposals = ProposalBatch::new(
            (0..sources.len())
                .map(|k| Proposal {
                    bbox: prop_boxes[k],
                    logits: logp[k],
                    iou_gt: assigned[k].1,
                    label: assigned[k].0,
                    source_anchor: sources[k],
                    embedding_row: members.iter().position(|m| m.id as usize == sources[k]),
                })
                .collect(),
        )?;

        // RoI sampling from proposals plus ground truth, in anchor order so the
        // draw does not depend on how proposals happened to rank.
        let mut by_anchor: Vec<usize> = (0..sources.len()).collect();
        by_anchor.sort_by_key(|&k| sources[k]);
        let mut pool: Vec<Rect> = by_anchor.iter().map(|&k| rects[k]).collect();
        pool.extend(gt.iter().map(|g| g.rect));
        let pool_boxes: Vec<BBox> = pool.iter().map(|r| to_bbox(*r)).collect();
        let pool_match = match_boxes(&pool_boxes, &gt_boxes);
        let mut fg_idx: Vec<usize> = (0..pool.len()).filter(|&i| pool_match[i].0 >= ROI_FG_IOU).collect();
        let mut bg_idx: Vec<usize> = (0..pool.len()).filter(|&i| pool_match[i].0 < ROI_FG_IOU).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ROI_STREAM);
        fg_idx.shuffle(&mut rng);
        bg_idx.shuffle(&mut rng);
        let fg_quota = ((cfg.roi_per_image as f64 * cfg.roi_fg_fraction).floor() as usize).min(fg_idx.len());
        fg_idx.truncate(fg_quota);
        bg_idx.truncate(cfg.roi_per_image - fg_quota);
        let roi_sel: Vec<usize> = fg_idx.iter().chain(&bg_idx).copied().collect();
        let roi_rects: Vec<Rect> = roi_sel.iter().map(|&i| pool[i]).collect();
        let roi_class: Vec<usize> = roi_sel
            .iter()
            .map(|&i| {
                pool_match[i]
                    .1
                    .filter(|_| pool_match[i].0 >= ROI_FG_IOU)
                    .map_or(0, |g| gt[g].class)
            })
            .collect();
        let roi_iou: Vec<f64> = roi_sel.iter().map(|&i| pool_match[i].0).collect();

        if !roi_rects.is_empty() {
            let n = roi_rects.len();
            let pass = self.roi_forward(&f, &roi_rects);
            let inv_n = 1.0 / n as f64;
            let mut d_cls = vec![0.0f32; n * k1];
            let mut d_box = vec![0.0f32; n * 4];
            let mut cls_loss = 0.0;
            let mut roi_box = 0.0;
            for r in 0..n {
                let row: Vec<f64> = pass.cls[r * k1..(r + 1) * k1].iter().map(|&v| f64::from(v)).collect();
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
                let lse = m + s.ln();
                cls_loss += (lse - row[roi_class[r]]) * inv_n;
                for c in 0..k1 {
                    let p = (row[c] - lse).exp();
                    let y = if c == roi_class[r] { 1.0 } else { 0.0 };
                    d_cls[r * k1 + c] = ((p - y) * inv_n) as f32 * scale;
                }
                if roi_class[r] > 0 {
                    let gi = pool_match[roi_sel[r]].1.unwrap();
                    let e = encode(&roi_rects[r], &gt[gi].rect);
                    let target: [f64; 4] = std::array::from_fn(|d| e[d] * ROI_BOX_WEIGHTS[d]);
                    let pred: [f64; 4] = std::array::from_fn(|d| f64::from(pass.bbox[r * 4 + d]));
                    let (v, g) = smooth_l1(pred, target, 1.0);
                    roi_box += v * inv_n;
                    for d in 0..4 {
                        d_box[r * 4 + d] = (g[d] * inv_n) as f32 * scale;
                    }
                }
            }
            losses.cls = cls_loss;

            let mut d_h2: Option<Vec<f32>> = None;
            if cfg.alpha > 0.0 {
                let head = self.head(HeadKind::Roi);
                let hp = head.forward(&pass.h2, n);
                let unit: Vec<f64> = hp.normalized.unit.iter().map(|&v| f64::from(v)).collect();
                let emb = ContrastiveEmbedding::new(unit, head.d_out, true)?;
                let (contra, gu) = supcon_loss_with_grad(&emb, &roi_class, &roi_iou, cfg.phi, cfg.tau)?;
                losses.contra = contra;
                if let Some(grads) = grads.as_deref_mut() {
                    let w = (cfg.alpha as f32) * scale;
                    let gu: Vec<f32> = gu.iter().map(|&v| v as f32 * w).collect();
                    let (hg, gx) = head.backward(&pass.h2, &hp, &gu);
                    self.add_head_grads(HeadKind::Roi, &hg, grads);
                    d_h2 = Some(gx);
                }
            }
            losses.bbox = rpn_box + roi_box;
            if let Some(grads) = grads.as_deref_mut() {
                self.roi_backward(&pass, &d_cls, &d_box, d_h2.as_deref(), &mut fg.pyramid, grads);
            }
        } else {
            losses.bbox = rpn_box;
        }

        let total = total_loss(&losses, &cfg.loss_weights())?;
        if let Some(grads) = grads {
            self.features_backward(&f, fg, grads);
        }
        Ok(TrainOutput {
            losses,
            total,
            proposals,
            counts,
        })
    }
}

/// Ensures a clipped box keeps at least one pixel of extent.
fn widen(r: Rect, size: f64) -> Rect {
    let mut r = r;
    if r[2] - r[0] < 1.0 {
        let c = ((r[0] + r[2]) / 2.0).clamp(0.5, size - 0.5);
        r[0] = c - 0.5;
        r[2] = c + 0.5;
    }
    if r[3] - r[1] < 1.0 {
        let c = ((r[1] + r[3]) / 2.0).clamp(0.5, size - 0.5);
        r[1] = c - 0.5;
        r[3] = c + 0.5;
    }
    r
}
