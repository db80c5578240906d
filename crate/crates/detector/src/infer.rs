use tfsod_core::Stage;

use crate::boxes::{clip, decode, nms, Rect};
use crate::config::RunConfig;
use crate::model::{Detector, ROI_BOX_WEIGHTS};
use crate::nn::Fmap;

const MAX_DETECTIONS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub rect: Rect,
    /// Foreground class, counting from 1.
    pub class: usize,
    pub score: f64,
}

impl Detector {
    /// Proposal boxes for `image`, ranked with the fine-tuning key.
    pub fn proposals(&self, image: &Fmap, cfg: &RunConfig) -> Vec<Rect> {
        let f = self.features(image);
        if !f.is_finite() {
            return Vec::new();
        }
        self.propose(&f, Stage::Finetune, cfg).1
    }

    /// Detections with confidence strictly above `score_thresh`, after per-class NMS.
    ///
    /// Proposals are always ranked with the fine-tuning key, so the potential
    /// logit can recall objects the object logit alone would miss.
    pub fn infer(&self, image: &Fmap, cfg: &RunConfig, score_thresh: f64, nms_iou: f64) -> Vec<Detection> {
        let f = self.features(image);
        if !f.is_finite() {
            return Vec::new();
        }
        let (_, rects, _) = self.propose(&f, Stage::Finetune, cfg);
        if rects.is_empty() {
            return Vec::new();
        }
        let (probs, deltas) = self.classify(&f, &rects);
        let k1 = self.num_classes() + 1;
        let size = self.arch.image_size as f64;
        let mut out = Vec::new();
        for class in 1..k1 {
            let mut cands: Vec<(Rect, f64)> = Vec::new();
            for (r, rect) in rects.iter().enumerate() {
                let score = f64::from(probs[r * k1 + class]);
                if score <= score_thresh {
                    continue;
                }
                let d: [f64; 4] = std::array::from_fn(|i| f64::from(deltas[r * 4 + i]) / ROI_BOX_WEIGHTS[i]);
                let b = clip(decode(rect, d), size, size);
                if b[2] - b[0] < 1.0 || b[3] - b[1] < 1.0 {
                    continue;
                }
                cands.push((b, score));
            }
            let mut order: Vec<usize> = (0..cands.len()).collect();
            order.sort_by(|&a, &b| cands[b].1.total_cmp(&cands[a].1).then(a.cmp(&b)));
            let boxes: Vec<Rect> = cands.iter().map(|c| c.0).collect();
            for k in nms(&boxes, &order, nms_iou, MAX_DETECTIONS) {
                out.push(Detection {
                    rect: cands[k].0,
                    class,
                    score: cands[k].1,
                });
            }
        }
        out.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.class.cmp(&b.class)));
        out.truncate(MAX_DETECTIONS);
        out
    }
}
