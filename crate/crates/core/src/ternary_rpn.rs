//! Ternary objectness: labels, the potential-object gate and proposal ranking.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxgeom::{match_boxes, BBox};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RpnError {
    #[error("thre_cls must lie in (0, 1], got {0}")]
    BadThreshold(f64),
    #[error("score rows must have {expected} entries (background + classes), got {got}")]
    BadScoreShape { expected: usize, got: usize },
    #[error("score row count {rows} does not match label count {labels}")]
    LengthMismatch { rows: usize, labels: usize },
    #[error("invalid ternary label {0}")]
    BadLabel(u8),
    #[error("proposal {0} has a non-finite logit")]
    NonFiniteLogit(usize),
}

/// Objectness target: 0 non-object, 1 object, 2 potential unseen-class object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
#[repr(u8)]
pub enum TernaryLabel {
    NonObject = 0,
    Object = 1,
    Potential = 2,
}

impl TernaryLabel {
    pub const ALL: [TernaryLabel; 3] = [Self::NonObject, Self::Object, Self::Potential];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl TryFrom<u8> for TernaryLabel {
    type Error = RpnError;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            0 => Ok(Self::NonObject),
            1 => Ok(Self::Object),
            2 => Ok(Self::Potential),
            other => Err(RpnError::BadLabel(other)),
        }
    }
}

impl From<TernaryLabel> for u8 {
    fn from(l: TernaryLabel) -> u8 {
        l as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        })
    }
}

/// How the object and potential-object logits merge into a fine-tuning ranking key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CombineOp {
    Max,
    Add,
    /// Object logit only; the binary-RPN behaviour.
    Object,
}

impl CombineOp {
    pub fn apply(self, object: f64, potential: f64) -> f64 {
        match self {
            CombineOp::Max => object.max(potential),
            CombineOp::Add => object + potential,
            CombineOp::Object => object,
        }
    }
}

impl std::str::FromStr for CombineOp {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "max" => Ok(Self::Max),
            "add" => Ok(Self::Add),
            "object" => Ok(Self::Object),
            other => Err(format!("unknown combine_op `{other}` (expected max|add|object)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    /// Objectness logits for labels 0, 1, 2.
    pub logits: [f64; 3],
    pub iou_gt: f64,
    pub label: TernaryLabel,
    /// Flat index of the anchor this proposal was decoded from.
    pub source_anchor: usize,
    /// Row of this proposal in the contrastive embedding matrix, once computed.
    pub embedding_row: Option<usize>,
}

impl Proposal {
    /// Softmax of the three logits.
    pub fn scores(&self) -> [f64; 3] {
        softmax3(self.logits)
    }
}

pub fn softmax3(l: [f64; 3]) -> [f64; 3] {
    let m = l[0].max(l[1]).max(l[2]);
    let e = l.map(|v| (v - m).exp());
    let s = e[0] + e[1] + e[2];
    e.map(|v| v / s)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProposalBatch {
    pub proposals: Vec<Proposal>,
}

impl ProposalBatch {
    pub fn new(proposals: Vec<Proposal>) -> Result<Self, RpnError> {
        for (i, p) in proposals.iter().enumerate() {
            if p.logits.iter().any(|v| !v.is_finite()) {
                return Err(RpnError::NonFiniteLogit(i));
            }
        }
        Ok(Self { proposals })
    }

    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }
}

/// Validates a gate threshold. `1.0` is accepted and closes the gate entirely,
/// since no probability can exceed it.
pub fn check_threshold(thre_cls: f64) -> Result<(), RpnError> {
    if thre_cls > 0.0 && thre_cls <= 1.0 {
        Ok(())
    } else {
        Err(RpnError::BadThreshold(thre_cls))
    }
}

/// Marks negatives that the RoI classifier confidently assigns to a known class.
///
/// `scores` holds one probability row per entry of `labels`, laid out as
/// `[background, class_1, .., class_K]`. An entry labeled `NonObject` whose best
/// non-background probability is strictly greater than `thre_cls` becomes
/// `Potential`. Other labels are left alone. Returns the number relabeled.
///
/// This only rewrites targets; callers must not route gradients through it.
pub fn gate_potential(
    scores: &[f64],
    num_classes_with_bg: usize,
    thre_cls: f64,
    labels: &mut [TernaryLabel],
) -> Result<usize, RpnError> {
    check_threshold(thre_cls)?;
    if num_classes_with_bg < 2 {
        return Err(RpnError::BadScoreShape {
            expected: 2,
            got: num_classes_with_bg,
        });
    }
    if scores.len() != labels.len() * num_classes_with_bg {
        return Err(RpnError::LengthMismatch {
            rows: scores.len() / num_classes_with_bg,
            labels: labels.len(),
        });
    }
    let mut relabeled = 0;
    for (row, label) in scores.chunks_exact(num_classes_with_bg).zip(labels.iter_mut()) {
        if *label != TernaryLabel::NonObject {
            continue;
        }
        let best = row[1..].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if best > thre_cls {
            *label = TernaryLabel::Potential;
            relabeled += 1;
        }
    }
    Ok(relabeled)
}

/// Ranking key of a proposal for the given stage.
pub fn ranking_key(logits: &[f64; 3], stage: Stage, combine: CombineOp) -> f64 {
    match stage {
        Stage::Pretrain => logits[1],
        Stage::Finetune => combine.apply(logits[1], logits[2]),
    }
}

/// Indices of the top-`k` proposals, highest key first, ties by ascending index.
///
/// Pre-training ranks on the object logit alone; fine-tuning ranks on
/// `combine(object, potential)`.
pub fn rank_proposals(batch: &ProposalBatch, stage: Stage, k: usize, combine: CombineOp) -> Vec<usize> {
    let keys: Vec<f64> = batch
        .proposals
        .iter()
        .map(|p| ranking_key(&p.logits, stage, combine))
        .collect();
    top_k_by_key(&keys, k)
}

/// Descending top-`k` of finite keys with ascending-index tie-break.
pub fn top_k_by_key(keys: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    let cmp = |a: &usize, b: &usize| keys[*b].total_cmp(&keys[*a]).then(a.cmp(b));
    if k == 0 {
        return Vec::new();
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    idx
}

/// IoU to the best-matching ground truth and the inherited ternary label.
///
/// A proposal is positive (label 1) when its source anchor was active or its own
/// IoU exceeds `positive_iou`; otherwise it keeps a gated anchor's label 2, else 0.
pub fn assign_proposal_labels(
    boxes: &[BBox],
    gt: &[BBox],
    source_labels: &[TernaryLabel],
    positive_iou: f64,
) -> Result<Vec<(TernaryLabel, f64)>, RpnError> {
    if boxes.len() != source_labels.len() {
        return Err(RpnError::LengthMismatch {
            rows: boxes.len(),
            labels: source_labels.len(),
        });
    }
    Ok(match_boxes(boxes, gt)
        .into_iter()
        .zip(source_labels)
        .map(|((iou, _), &src)| {
            let label = if src == TernaryLabel::Object || iou > positive_iou {
                TernaryLabel::Object
            } else if src == TernaryLabel::Potential {
                TernaryLabel::Potential
            } else {
                TernaryLabel::NonObject
            };
            (label, iou)
        })
        .collect())
}
