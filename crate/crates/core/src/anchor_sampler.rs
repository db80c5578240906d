//! Anchor role assignment and per-image training-anchor selection.
//!
//! Two samplers share one contract: up to `pos_fraction * budget` active anchors,
//! the rest of the budget filled with negatives, never an ignored anchor, no
//! duplicates. [`random_select`] draws negatives from all levels pooled, so small
//! top-level populations are rarely hit. [`hsamp_select`] splits the negative quota
//! evenly across pyramid levels first.
//!
//! Selection is driven by per-identity keys (see `keyhash`): the same seed picks
//! the same anchor identities however the candidate list is ordered.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::keyhash::{take_smallest, KeyStream};
use crate::ternary_rpn::TernaryLabel;

const ACTIVE_STREAM: u64 = 0xA1;
const NEGATIVE_STREAM: u64 = 0xB2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("IoU thresholds must satisfy 0 <= lo < hi <= 1, got lo={lo}, hi={hi}")]
    BadThresholds { lo: f64, hi: f64 },
    #[error("sampling budget must be positive")]
    ZeroBudget,
    #[error("pos_fraction must lie in [0, 1], got {0}")]
    BadPosFraction(f64),
    #[error("no selectable anchors")]
    NoAnchors,
    #[error("anchor level {level} out of range for {num_levels} levels")]
    LevelOutOfRange { level: usize, num_levels: usize },
    #[error("at least one pyramid level is required")]
    NoLevels,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AnchorRole {
    Active,
    Negative,
    Ignore,
}

/// IoU above `hi` is active, below `lo` negative, anything in between ignored.
pub fn label_anchors(iou_gt: &[f64], hi: f64, lo: f64) -> Result<Vec<AnchorRole>, SamplerError> {
    if !(0.0 <= lo && lo < hi && hi <= 1.0) {
        return Err(SamplerError::BadThresholds { lo, hi });
    }
    Ok(iou_gt
        .iter()
        .map(|&v| {
            if v > hi {
                AnchorRole::Active
            } else if v < lo {
                AnchorRole::Negative
            } else {
                AnchorRole::Ignore
            }
        })
        .collect())
}

/// An anchor offered to a sampler. `id` is the identity the random key is derived from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorCandidate {
    pub id: u64,
    pub level: usize,
    pub role: AnchorRole,
    pub iou: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Random,
    Hsamp,
}

impl std::str::FromStr for SamplerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(Self::Random),
            "hsamp" => Ok(Self::Hsamp),
            other => Err(format!("unknown sampler `{other}` (expected random|hsamp)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub budget: usize,
    pub pos_fraction: f64,
    pub num_levels: usize,
    /// Also split the active quota across levels (hsamp only).
    pub balance_actives: bool,
}

impl SamplerConfig {
    pub fn new(kind: SamplerKind, num_levels: usize) -> Self {
        Self {
            kind,
            budget: 256,
            pos_fraction: 0.5,
            num_levels,
            balance_actives: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampledAnchor {
    pub id: u64,
    pub level: usize,
    pub role: AnchorRole,
    pub iou: f64,
    pub label: TernaryLabel,
}

/// The training anchors selected for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorBatch {
    pub members: Vec<SampledAnchor>,
    pub num_levels: usize,
    /// Negatives requested but not available anywhere in the pyramid.
    pub negative_shortfall: usize,
}

impl AnchorBatch {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn count_role(&self, role: AnchorRole) -> usize {
        self.members.iter().filter(|m| m.role == role).count()
    }

    pub fn count_label(&self, label: TernaryLabel) -> usize {
        self.members.iter().filter(|m| m.label == label).count()
    }

    /// Per level: counts of labels 0, 1, 2.
    pub fn label_counts_by_level(&self) -> Vec<[usize; 3]> {
        let mut out = vec![[0usize; 3]; self.num_levels];
        for m in &self.members {
            out[m.level][m.label as usize] += 1;
        }
        out
    }

    pub fn role_counts_by_level(&self, role: AnchorRole) -> Vec<usize> {
        let mut out = vec![0usize; self.num_levels];
        for m in self.members.iter().filter(|m| m.role == role) {
            out[m.level] += 1;
        }
        out
    }
}

/// Splits `quota` as evenly as possible over levels with `available[l]` items each.
///
/// The remainder goes to the lowest-indexed open levels, one each. Levels that run
/// out are capped and the shortfall is re-split evenly over the levels that still
/// have items, until the quota is met or every level is exhausted.
pub fn split_quota(quota: usize, available: &[usize]) -> Vec<usize> {
    let mut alloc = vec![0usize; available.len()];
    let mut remaining = quota;
    loop {
        let open: Vec<usize> = (0..available.len()).filter(|&l| alloc[l] < available[l]).collect();
        if remaining == 0 || open.is_empty() {
            break;
        }
        let share = remaining / open.len();
        let extra = remaining % open.len();
        for (k, &l) in open.iter().enumerate() {
            let want = share + usize::from(k < extra);
            let give = want.min(available[l] - alloc[l]);
            alloc[l] += give;
            remaining -= give;
        }
    }
    alloc
}

fn validate(cands: &[AnchorCandidate], budget: usize, pos_fraction: f64) -> Result<(), SamplerError> {
    if budget == 0 {
        return Err(SamplerError::ZeroBudget);
    }
    if !(0.0..=1.0).contains(&pos_fraction) {
        return Err(SamplerError::BadPosFraction(pos_fraction));
    }
    if !cands.iter().any(|c| c.role != AnchorRole::Ignore) {
        return Err(SamplerError::NoAnchors);
    }
    Ok(())
}

/// Keys of the candidates with `role`, paired with their positions in `cands`.
fn keyed(cands: &[AnchorCandidate], role: AnchorRole, seed: u64, stream: u64) -> Vec<(u64, u32)> {
    let ks = KeyStream::new(seed, stream);
    cands
        .iter()
        .enumerate()
        .filter(|(_, c)| c.role == role)
        .map(|(i, c)| (ks.key(c.id), i as u32))
        .collect()
}

fn pick_pooled(
    cands: &[AnchorCandidate],
    role: AnchorRole,
    quota: usize,
    seed: u64,
    stream: u64,
) -> Vec<AnchorCandidate> {
    take_smallest(keyed(cands, role, seed, stream), quota)
        .into_iter()
        .map(|i| cands[i as usize])
        .collect()
}

fn into_member(c: AnchorCandidate) -> SampledAnchor {
    SampledAnchor {
        id: c.id,
        level: c.level,
        role: c.role,
        iou: c.iou,
        label: match c.role {
            AnchorRole::Active => TernaryLabel::Object,
            _ => TernaryLabel::NonObject,
        },
    }
}

fn pick_per_level(
    cands: &[AnchorCandidate],
    role: AnchorRole,
    quota: usize,
    num_levels: usize,
    seed: u64,
    stream: u64,
) -> (Vec<AnchorCandidate>, usize) {
    let mut by_level: Vec<Vec<(u64, u32)>> = vec![Vec::new(); num_levels];
    for e in keyed(cands, role, seed, stream) {
        by_level[cands[e.1 as usize].level].push(e);
    }
    let available: Vec<usize> = by_level.iter().map(Vec::len).collect();
    let alloc = split_quota(quota, &available);
    let taken: usize = alloc.iter().sum();
    let picked = by_level
        .into_iter()
        .zip(alloc)
        .flat_map(|(pool, k)| take_smallest(pool, k))
        .map(|i| cands[i as usize])
        .collect();
    (picked, quota - taken)
}

/// Baseline sampler: actives then negatives, each uniformly from all levels pooled.
pub fn random_select(
    cands: &[AnchorCandidate],
    num_levels: usize,
    budget: usize,
    pos_fraction: f64,
    seed: u64,
) -> Result<AnchorBatch, SamplerError> {
    validate(cands, budget, pos_fraction)?;
    check_levels(cands, num_levels)?;
    let pos_cap = (pos_fraction * budget as f64).floor() as usize;
    let actives = pick_pooled(cands, AnchorRole::Active, pos_cap, seed, ACTIVE_STREAM);
    let neg_quota = budget - actives.len();
    let negatives = pick_pooled(cands, AnchorRole::Negative, neg_quota, seed, NEGATIVE_STREAM);
    let shortfall = neg_quota - negatives.len();
    Ok(AnchorBatch {
        members: actives.into_iter().chain(negatives).map(into_member).collect(),
        num_levels,
        negative_shortfall: shortfall,
    })
}

/// Hierarchical sampler: the negative quota is split evenly across levels.
///
/// Actives are drawn exactly as in [`random_select`] unless `balance_actives` is
/// set, in which case the active quota is level-balanced too.
pub fn hsamp_select(
    cands: &[AnchorCandidate],
    num_levels: usize,
    budget: usize,
    pos_fraction: f64,
    balance_actives: bool,
    seed: u64,
) -> Result<AnchorBatch, SamplerError> {
    validate(cands, budget, pos_fraction)?;
    check_levels(cands, num_levels)?;
    let pos_cap = (pos_fraction * budget as f64).floor() as usize;
    let actives = if balance_actives {
        pick_per_level(cands, AnchorRole::Active, pos_cap, num_levels, seed, ACTIVE_STREAM).0
    } else {
        pick_pooled(cands, AnchorRole::Active, pos_cap, seed, ACTIVE_STREAM)
    };
    let neg_quota = budget - actives.len();
    let (negatives, shortfall) = pick_per_level(
        cands,
        AnchorRole::Negative,
        neg_quota,
        num_levels,
        seed,
        NEGATIVE_STREAM,
    );
    Ok(AnchorBatch {
        members: actives.into_iter().chain(negatives).map(into_member).collect(),
        num_levels,
        negative_shortfall: shortfall,
    })
}

/// Dispatches on `cfg.kind`.
pub fn sample(cands: &[AnchorCandidate], cfg: &SamplerConfig, seed: u64) -> Result<AnchorBatch, SamplerError> {
    match cfg.kind {
        SamplerKind::Random => random_select(cands, cfg.num_levels, cfg.budget, cfg.pos_fraction, seed),
        SamplerKind::Hsamp => hsamp_select(
            cands,
            cfg.num_levels,
            cfg.budget,
            cfg.pos_fraction,
            cfg.balance_actives,
            seed,
        ),
    }
}

fn check_levels(cands: &[AnchorCandidate], num_levels: usize) -> Result<(), SamplerError> {
    if num_levels == 0 {
        return Err(SamplerError::NoLevels);
    }
    if let Some(c) = cands.iter().find(|c| c.level >= num_levels) {
        return Err(SamplerError::LevelOutOfRange {
            level: c.level,
            num_levels,
        });
    }
    Ok(())
}

/// Expected number of negatives drawn from each level by pooled uniform sampling of
/// `m` out of the summed population (hypergeometric mean).
pub fn pooled_expectation(m: usize, populations: &[usize]) -> Vec<f64> {
    let total: usize = populations.iter().sum();
    let take = m.min(total) as f64;
    populations.iter().map(|&p| take * p as f64 / total as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn negatives(pops: &[usize]) -> Vec<AnchorCandidate> {
        let mut id = 0u64;
        let mut out = Vec::new();
        for (level, &p) in pops.iter().enumerate() {
            for _ in 0..p {
                out.push(AnchorCandidate {
                    id,
                    level,
                    role: AnchorRole::Negative,
                    iou: 0.0,
                });
                id += 1;
            }
        }
        out
    }

    #[test]
    fn label_thresholds() {
        let roles = label_anchors(&[0.9, 0.1, 0.5, 0.7, 0.3], 0.7, 0.3).unwrap();
        assert_eq!(
            roles,
            vec![
                AnchorRole::Active,
                AnchorRole::Negative,
                AnchorRole::Ignore,
                AnchorRole::Ignore,
                AnchorRole::Ignore
            ]
        );
        assert!(label_anchors(&[0.5], 0.3, 0.7).is_err());
        assert!(label_anchors(&[0.5], 1.1, 0.3).is_err());
    }

    #[test]
    fn quota_examples() {
        assert_eq!(split_quota(100, &[1000, 10]), vec![90, 10]);
        let q = split_quota(218, &[500, 500, 500, 500, 500]);
        assert_eq!(q, vec![44, 44, 44, 43, 43]);
        assert_eq!(split_quota(10, &[3, 2]), vec![3, 2]);
        assert_eq!(split_quota(0, &[3, 2]), vec![0, 0]);
        assert_eq!(split_quota(7, &[0, 0, 100]), vec![0, 0, 7]);
    }

    #[test]
    fn all_negatives_when_no_actives() {
        let c = negatives(&[400, 100]);
        let b = random_select(&c, 2, 256, 0.5, 3).unwrap();
        assert_eq!(b.len(), 256);
        assert_eq!(b.count_role(AnchorRole::Negative), 256);
        let h = hsamp_select(&c, 2, 256, 0.5, false, 3).unwrap();
        assert_eq!(h.role_counts_by_level(AnchorRole::Negative), vec![156, 100]);
    }

    #[test]
    fn hsamp_two_level_shortfall() {
        let c = negatives(&[1000, 10]);
        let b = hsamp_select(&c, 2, 100, 0.0, false, 11).unwrap();
        assert_eq!(b.role_counts_by_level(AnchorRole::Negative), vec![90, 10]);
        assert_eq!(b.negative_shortfall, 0);
    }

    #[test]
    fn hsamp_reports_global_shortfall() {
        let c = negatives(&[5, 3]);
        let b = hsamp_select(&c, 2, 20, 0.5, false, 1).unwrap();
        assert_eq!(b.len(), 8);
        assert_eq!(b.negative_shortfall, 12);
    }

    #[test]
    fn single_level_hsamp_matches_random() {
        let c = negatives(&[300]);
        for seed in 0..5 {
            let a = random_select(&c, 1, 64, 0.5, seed).unwrap();
            let b = hsamp_select(&c, 1, 64, 0.5, false, seed).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn actives_capped_and_slack_to_negatives() {
        let mut c = negatives(&[500]);
        for i in 0..10 {
            c.push(AnchorCandidate {
                id: 10_000 + i,
                level: 0,
                role: AnchorRole::Active,
                iou: 0.8,
            });
        }
        c.push(AnchorCandidate {
            id: 20_000,
            level: 0,
            role: AnchorRole::Ignore,
            iou: 0.5,
        });
        let b = random_select(&c, 1, 256, 0.5, 9).unwrap();
        assert_eq!(b.count_role(AnchorRole::Active), 10);
        assert_eq!(b.count_role(AnchorRole::Negative), 246);
        assert_eq!(b.count_label(TernaryLabel::Object), 10);
        assert!(b.members.iter().all(|m| m.id != 20_000));
    }

    #[test]
    fn errors() {
        let c = negatives(&[5]);
        assert_eq!(random_select(&c, 1, 0, 0.5, 0), Err(SamplerError::ZeroBudget));
        assert_eq!(random_select(&[], 1, 4, 0.5, 0), Err(SamplerError::NoAnchors));
        assert_eq!(hsamp_select(&c, 0, 4, 0.5, false, 0), Err(SamplerError::NoLevels));
        assert!(matches!(
            random_select(&c, 1, 4, 1.5, 0),
            Err(SamplerError::BadPosFraction(_))
        ));
    }

    #[test]
    fn deterministic_given_seed() {
        let c = negatives(&[1000, 300, 50]);
        let a = hsamp_select(&c, 3, 128, 0.5, false, 42).unwrap();
        let b = hsamp_select(&c, 3, 128, 0.5, false, 42).unwrap();
        assert_eq!(a, b);
        let d = hsamp_select(&c, 3, 128, 0.5, false, 43).unwrap();
        assert_ne!(a, d);
    }

    #[test]
    fn pooled_expectation_fig_populations() {
        let e = pooled_expectation(218, &[120_000, 30_000, 7_500, 1_875, 507]);
        assert!((e[4] - 218.0 * 507.0 / 159_882.0).abs() < 1e-12);
        assert!((e.iter().sum::<f64>() - 218.0).abs() < 1e-9);
    }

    fn arb_cands() -> impl Strategy<Value = Vec<AnchorCandidate>> {
        prop::collection::vec((0usize..4, 0u8..3), 1..300).prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (level, r))| AnchorCandidate {
                    id: i as u64 * 7 + 3,
                    level,
                    role: match r {
                        0 => AnchorRole::Active,
                        1 => AnchorRole::Negative,
                        _ => AnchorRole::Ignore,
                    },
                    iou: match r {
                        0 => 0.9,
                        1 => 0.1,
                        _ => 0.5,
                    },
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn sampler_contracts(cands in arb_cands(), budget in 1usize..128, seed in any::<u64>(), hs in any::<bool>()) {
            prop_assume!(cands.iter().any(|c| c.role != AnchorRole::Ignore));
            let b = if hs {
                hsamp_select(&cands, 4, budget, 0.5, false, seed).unwrap()
            } else {
                random_select(&cands, 4, budget, 0.5, seed).unwrap()
            };
            prop_assert!(b.len() <= budget);
            let ids: HashSet<u64> = b.members.iter().map(|m| m.id).collect();
            prop_assert_eq!(ids.len(), b.len());
            for m in &b.members {
                prop_assert!(m.role != AnchorRole::Ignore);
                match m.role {
                    AnchorRole::Active => prop_assert!(m.iou > 0.7 && m.label == TernaryLabel::Object),
                    _ => prop_assert!(m.iou < 0.3 && m.label == TernaryLabel::NonObject),
                }
            }
            let actives = cands.iter().filter(|c| c.role == AnchorRole::Active).count();
            let negs = cands.iter().filter(|c| c.role == AnchorRole::Negative).count();
            prop_assert_eq!(b.len(), budget.min(actives.min(budget / 2) + negs));
        }

        #[test]
        fn permutation_equivariant(cands in arb_cands(), seed in any::<u64>(), rot in 0usize..300, hs in any::<bool>()) {
            prop_assume!(cands.iter().any(|c| c.role != AnchorRole::Ignore));
            let mut perm = cands.clone();
            let k = rot % perm.len();
            perm.rotate_left(k);
            perm.reverse();
            let run = |c: &[AnchorCandidate]| {
                let b = if hs {
                    hsamp_select(c, 4, 64, 0.5, false, seed).unwrap()
                } else {
                    random_select(c, 4, 64, 0.5, seed).unwrap()
                };
                b.members.iter().map(|m| m.id).collect::<HashSet<_>>()
            };
            prop_assert_eq!(run(&cands), run(&perm));
        }

        #[test]
        fn quota_balanced_when_populations_suffice(m in 0usize..2000, levels in 1usize..8, extra in prop::collection::vec(0usize..50, 8)) {
            let need = m.div_ceil(levels);
            let pops: Vec<usize> = (0..levels).map(|l| need + extra[l]).collect();
            let q = split_quota(m, &pops);
            prop_assert_eq!(q.iter().sum::<usize>(), m);
            let (lo, hi) = (q.iter().min().unwrap(), q.iter().max().unwrap());
            prop_assert!(hi - lo <= 1);
        }

        #[test]
        fn quota_never_exceeds_population(m in 0usize..500, pops in prop::collection::vec(0usize..100, 1..6)) {
            let q = split_quota(m, &pops);
            prop_assert_eq!(q.iter().sum::<usize>(), m.min(pops.iter().sum()));
            for (a, p) in q.iter().zip(&pops) {
                prop_assert!(a <= p);
            }
        }
    }
}
