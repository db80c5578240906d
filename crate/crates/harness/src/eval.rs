//! AP at IoU 0.5 with all-points interpolation.
//!
//! Detections are visited in descending confidence. A detection counts as a
//! true positive when it overlaps a same-category ground-truth box at IoU >= 0.5
//! and can be matched without unmatching an earlier true positive; each box is
//! matched at most once. Visiting in confidence order and keeping every
//! earlier match means no other one-to-one assignment yields a higher AP.

use serde::{Deserialize, Serialize};
use tfsod_detector::boxes::{rect_iou, Rect};
use tfsod_detector::Detection;
use tfsod_synth::{CategoryGroup, Dataset, Split};

pub const IOU_THRESHOLD: f64 = 0.5;

/// One scored box of a single category.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub image: usize,
    pub rect: Rect,
    pub score: f64,
}

/// True-positive flags in ranked order. Ties in score keep input order.
pub fn match_detections(dets: &[ScoredBox], gts: &[(usize, Rect)]) -> (Vec<usize>, Vec<bool>) {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let cands: Vec<Vec<usize>> = order
        .iter()
        .map(|&d| {
            (0..gts.len())
                .filter(|&g| gts[g].0 == dets[d].image && rect_iou(&gts[g].1, &dets[d].rect) >= IOU_THRESHOLD)
                .collect()
        })
        .collect();
    // owner[g]: rank of the detection currently holding box g.
    let mut owner: Vec<Option<usize>> = vec![None; gts.len()];
    let mut tp = vec![false; order.len()];
    for (r, t) in tp.iter_mut().enumerate() {
        let mut seen = vec![false; gts.len()];
        *t = augment(r, &cands, &mut owner, &mut seen);
    }
    (order, tp)
}

fn augment(r: usize, cands: &[Vec<usize>], owner: &mut [Option<usize>], seen: &mut [bool]) -> bool {
    for &g in &cands[r] {
        if seen[g] {
            continue;
        }
        seen[g] = true;
        let free = match owner[g] {
            None => true,
            Some(o) => augment(o, cands, owner, seen),
        };
        if free {
            owner[g] = Some(r);
            return true;
        }
    }
    false
}

/// All-points interpolated area under the precision-recall curve.
pub fn average_precision(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    for (i, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        recall.push(hits as f64 / num_gt as f64);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

pub fn ap50(dets: &[ScoredBox], gts: &[(usize, Rect)]) -> f64 {
    let (_, tp) = match_detections(dets, gts);
    average_precision(&tp, gts.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryAp {
    pub name: String,
    pub group: CategoryGroup,
    pub num_gt: usize,
    pub ap50: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub categories: Vec<CategoryAp>,
    /// Mean over base categories with ground truth.
    pub bap50: f64,
    /// Mean over novel-seen categories with ground truth.
    pub nap50: f64,
    pub manifest_hash: String,
}

fn mean_ap(cats: &[CategoryAp], group: CategoryGroup) -> f64 {
    let v: Vec<f64> = cats
        .iter()
        .filter(|c| c.group == group && c.num_gt > 0)
        .map(|c| c.ap50)
        .collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Scores per-image detections against the test split's visible labels.
///
/// `categories` lists the detector's class names in class order (class 1 first).
pub fn compute_ap50(
    dataset: &Dataset,
    categories: &[String],
    detections: &[Vec<Detection>],
    manifest_hash: &str,
) -> EvalReport {
    let t = &dataset.taxonomy;
    let test = dataset.split(Split::Test);
    let evaluated: Vec<usize> = t.base_ids().chain(t.novel_ids()).collect();
    let mut cats = Vec::new();
    for id in evaluated {
        let name = t.name(id).to_string();
        let class = categories.iter().position(|c| *c == name).map(|p| p + 1);
        let mut gts = Vec::new();
        let mut dets = Vec::new();
        for (k, &s) in test.iter().enumerate() {
            let scene = &dataset.scenes[s];
            gts.extend(
                scene
                    .visible
                    .iter()
                    .filter(|a| a.category == id)
                    .map(|a| (k, a.bbox.to_array())),
            );
            if let (Some(class), Some(image_dets)) = (class, detections.get(k)) {
                dets.extend(image_dets.iter().filter(|d| d.class == class).map(|d| ScoredBox {
                    image: k,
                    rect: d.rect,
                    score: d.score,
                }));
            }
        }
        cats.push(CategoryAp {
            name,
            group: t.group(id),
            num_gt: gts.len(),
            ap50: ap50(&dets, &gts),
        });
    }
    EvalReport {
        bap50: mean_ap(&cats, CategoryGroup::Base),
        nap50: mean_ap(&cats, CategoryGroup::NovelSeen),
        categories: cats,
        manifest_hash: manifest_hash.to_string(),
    }
}
