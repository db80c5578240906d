use serde::{Deserialize, Serialize};

use crate::shapes::ShapeKind;
use crate::SynthError;

/// Which group a category belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CategoryGroup {
    Base,
    NovelSeen,
    Unseen,
}

/// Base, novel-seen and unseen categories.
///
/// Category ids are positions in `base ++ novel_seen ++ unseen`, so base ids come
/// first and stay stable when novel categories are appended at fine-tuning.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TaxonomyRepr", into = "TaxonomyRepr")]
pub struct CategoryTaxonomy {
    base: Vec<ShapeKind>,
    novel_seen: Vec<ShapeKind>,
    unseen: Vec<ShapeKind>,
}

#[derive(Serialize, Deserialize)]
struct TaxonomyRepr {
    base: Vec<String>,
    novel_seen: Vec<String>,
    unseen: Vec<String>,
}

impl TryFrom<TaxonomyRepr> for CategoryTaxonomy {
    type Error = SynthError;

    fn try_from(r: TaxonomyRepr) -> Result<Self, SynthError> {
        CategoryTaxonomy::from_names(&r.base, &r.novel_seen, &r.unseen)
    }
}

impl From<CategoryTaxonomy> for TaxonomyRepr {
    fn from(t: CategoryTaxonomy) -> Self {
        let names = |v: &[ShapeKind]| v.iter().map(|k| k.name().to_string()).collect();
        TaxonomyRepr {
            base: names(&t.base),
            novel_seen: names(&t.novel_seen),
            unseen: names(&t.unseen),
        }
    }
}

impl CategoryTaxonomy {
    /// Validates disjointness and the family pairing of unseen categories.
    ///
    /// Base categories must come from distinct families, and every unseen category
    /// must share its family with exactly one base category.
    pub fn new(base: Vec<ShapeKind>, novel_seen: Vec<ShapeKind>, unseen: Vec<ShapeKind>) -> Result<Self, SynthError> {
        if base.is_empty() {
            return Err(SynthError::Taxonomy("at least one base category is required".into()));
        }
        let all: Vec<ShapeKind> = base.iter().chain(&novel_seen).chain(&unseen).copied().collect();
        for (i, a) in all.iter().enumerate() {
            if all[..i].contains(a) {
                return Err(SynthError::Taxonomy(format!("category `{a}` listed twice")));
            }
        }
        for (i, a) in base.iter().enumerate() {
            if base[..i].iter().any(|b| b.family() == a.family()) {
                return Err(SynthError::Taxonomy(format!(
                    "base categories must have distinct shape families (`{a}`)"
                )));
            }
        }
        for u in &unseen {
            let partners = base.iter().filter(|b| b.family() == u.family()).count();
            if partners != 1 {
                return Err(SynthError::Taxonomy(format!(
                    "unseen category `{u}` must share its family with exactly one base category, found {partners}"
                )));
            }
        }
        Ok(Self {
            base,
            novel_seen,
            unseen,
        })
    }

    pub fn from_names<S: AsRef<str>>(base: &[S], novel_seen: &[S], unseen: &[S]) -> Result<Self, SynthError> {
        let parse = |v: &[S]| -> Result<Vec<ShapeKind>, SynthError> {
            v.iter()
                .map(|s| s.as_ref().parse().map_err(SynthError::Taxonomy))
                .collect()
        };
        Self::new(parse(base)?, parse(novel_seen)?, parse(unseen)?)
    }

    /// Four base shapes, three hollow novel variants, two perturbed unseen variants.
    pub fn toy() -> Self {
        use ShapeKind::*;
        Self::new(
            vec![Square, Disk, Triangle, Cross],
            vec![HollowSquare, Ring, HollowTriangle],
            vec![RoundedSquare, Octagon],
        )
        .expect("toy taxonomy is valid")
    }

    pub fn base(&self) -> &[ShapeKind] {
        &self.base
    }

    pub fn novel_seen(&self) -> &[ShapeKind] {
        &self.novel_seen
    }

    pub fn unseen(&self) -> &[ShapeKind] {
        &self.unseen
    }

    pub fn len(&self) -> usize {
        self.base.len() + self.novel_seen.len() + self.unseen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self, id: usize) -> ShapeKind {
        let (nb, nn) = (self.base.len(), self.novel_seen.len());
        if id < nb {
            self.base[id]
        } else if id < nb + nn {
            self.novel_seen[id - nb]
        } else {
            self.unseen[id - nb - nn]
        }
    }

    pub fn name(&self, id: usize) -> &'static str {
        self.kind(id).name()
    }

    pub fn id_of(&self, kind: ShapeKind) -> Option<usize> {
        (0..self.len()).find(|&i| self.kind(i) == kind)
    }

    pub fn group(&self, id: usize) -> CategoryGroup {
        let (nb, nn) = (self.base.len(), self.novel_seen.len());
        if id < nb {
            CategoryGroup::Base
        } else if id < nb + nn {
            CategoryGroup::NovelSeen
        } else {
            CategoryGroup::Unseen
        }
    }

    pub fn base_ids(&self) -> std::ops::Range<usize> {
        0..self.base.len()
    }

    pub fn novel_ids(&self) -> std::ops::Range<usize> {
        self.base.len()..self.base.len() + self.novel_seen.len()
    }

    pub fn unseen_ids(&self) -> std::ops::Range<usize> {
        self.base.len() + self.novel_seen.len()..self.len()
    }

    /// The base category an unseen category was derived from.
    pub fn paired_base(&self, unseen_id: usize) -> Option<usize> {
        if self.group(unseen_id) != CategoryGroup::Unseen {
            return None;
        }
        let fam = self.kind(unseen_id).family();
        self.base_ids().find(|&b| self.kind(b).family() == fam)
    }
}
