use serde::{Deserialize, Serialize};
use tfsod_core::BBox;

use crate::taxonomy::{CategoryGroup, CategoryTaxonomy};

/// 8-bit RGB image, row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            pixels.extend_from_slice(&rgb);
        }
        Self { width, height, pixels }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Annotation {
    pub bbox: BBox,
    /// Category id within the dataset's taxonomy.
    pub category: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub id: String,
    pub image: Image,
    /// Labels a detector may train on for the split this scene belongs to.
    pub visible: Vec<Annotation>,
    /// Every rendered object, labeled or not.
    pub hidden: Vec<Annotation>,
}

impl SceneRecord {
    /// Objects present in the image but absent from the visible labels.
    pub fn unlabeled(&self) -> impl Iterator<Item = &Annotation> {
        self.hidden.iter().filter(|h| !self.visible.contains(h))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Pretrain,
    Finetune,
    Test,
}

/// Scene indices per split. The fine-tune split reuses every pretrain scene.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Splits {
    pub pretrain: Vec<usize>,
    pub finetune: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneCounts {
    pub pretrain: usize,
    /// Candidate images rendered per novel category; the first `k_shot` are kept.
    pub novel_pool: usize,
    pub test: usize,
}

impl Default for SceneCounts {
    fn default() -> Self {
        Self {
            pretrain: 300,
            novel_pool: 10,
            test: 120,
        }
    }
}

/// Rendering knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderConfig {
    pub image_size: usize,
    /// Object side lengths to draw from, in pixels.
    pub object_sizes: Vec<f64>,
    /// Center lattice spacing used with each object size.
    pub strides: Vec<f64>,
    /// Relative jitter applied to object side length.
    pub size_jitter: f64,
    pub max_labeled: usize,
    pub max_unlabeled: usize,
    /// Per-pixel background noise amplitude.
    pub noise: u8,
    /// Number of low-contrast clutter marks per image.
    pub clutter: usize,
    /// Minimum empty margin between object boxes.
    pub gap: f64,
    /// Draw unlabeled objects at the largest object size.
    pub large_unlabeled: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            object_sizes: vec![16.0, 32.0, 64.0],
            strides: vec![4.0, 8.0, 16.0],
            size_jitter: 0.08,
            max_labeled: 3,
            max_unlabeled: 2,
            noise: 6,
            clutter: 8,
            gap: 3.0,
            large_unlabeled: false,
        }
    }
}

/// Everything `generate` was called with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub seed: u64,
    pub k_shot: usize,
    pub unseen_rate: f64,
    pub counts: SceneCounts,
    pub render: RenderConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub taxonomy: CategoryTaxonomy,
    pub params: GenParams,
    pub scenes: Vec<SceneRecord>,
    pub splits: Splits,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[usize] {
        match split {
            Split::Pretrain => &self.splits.pretrain,
            Split::Finetune => &self.splits.finetune,
            Split::Test => &self.splits.test,
        }
    }

    pub fn scenes_in(&self, split: Split) -> impl Iterator<Item = &SceneRecord> {
        self.split(split).iter().map(|&i| &self.scenes[i])
    }

    /// Scenes of `split` whose visible labels include a novel-seen category.
    pub fn novel_labeled(&self, split: Split) -> impl Iterator<Item = &SceneRecord> {
        self.scenes_in(split).filter(|s| {
            s.visible
                .iter()
                .any(|a| self.taxonomy.group(a.category) == CategoryGroup::NovelSeen)
        })
    }
}
