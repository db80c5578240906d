//! Axis-aligned boxes, IoU, and anchor grids over a feature pyramid.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("box has negative extent: ({x_min}, {y_min}, {x_max}, {y_max})")]
    NegativeExtent {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
    },
    #[error("box coordinate is not finite")]
    NonFinite,
    #[error("image must have non-zero size, got {height}x{width}")]
    EmptyImage { height: u32, width: u32 },
    #[error("invalid pyramid: {0}")]
    InvalidPyramid(String),
}

/// Axis-aligned rectangle in image pixel coordinates.
///
/// Zero-area boxes are allowed; negative extents are rejected.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeomError> {
        if ![x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) {
            return Err(GeomError::NonFinite);
        }
        if x_max < x_min || y_max < y_min {
            return Err(GeomError::NegativeExtent {
                x_min,
                y_min,
                x_max,
                y_max,
            });
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Builds a box from centre and size; negative sizes are clamped to zero.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, GeomError> {
        let (w, h) = (w.max(0.0), h.max(0.0));
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }
    pub fn y_min(&self) -> f64 {
        self.y_min
    }
    pub fn x_max(&self) -> f64 {
        self.x_max
    }
    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox {
            x_min: self.x_min + dx,
            y_min: self.y_min + dy,
            x_max: self.x_max + dx,
            y_max: self.y_max + dy,
        }
    }

    /// Scales all coordinates about the origin. `factor` must be positive.
    pub fn scale(&self, factor: f64) -> BBox {
        debug_assert!(factor > 0.0);
        BBox {
            x_min: self.x_min * factor,
            y_min: self.y_min * factor,
            x_max: self.x_max * factor,
            y_max: self.y_max * factor,
        }
    }

    /// Clips the box to `[0, width] x [0, height]`.
    pub fn clip(&self, width: f64, height: f64) -> BBox {
        let x_min = self.x_min.clamp(0.0, width);
        let y_min = self.y_min.clamp(0.0, height);
        BBox {
            x_min,
            y_min,
            x_max: self.x_max.clamp(x_min, width),
            y_max: self.y_max.clamp(y_min, height),
        }
    }

    pub fn is_within(&self, width: f64, height: f64) -> bool {
        self.x_min >= 0.0 && self.y_min >= 0.0 && self.x_max <= width && self.y_max <= height
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = GeomError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// Intersection over union. Returns 0 when the union has zero area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).min(1.0)
    }
}

/// One pyramid level: feature stride and the base anchor size used there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub name: String,
    pub stride: u32,
    pub base_size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PyramidSpec {
    levels: Vec<LevelSpec>,
    aspect_ratios: Vec<f64>,
}

impl PyramidSpec {
    /// Validates a pyramid: strides and base sizes must strictly increase with
    /// level, aspect ratios (height / width) must be positive.
    pub fn new(levels: Vec<LevelSpec>, aspect_ratios: Vec<f64>) -> Result<Self, GeomError> {
        if levels.is_empty() {
            return Err(GeomError::InvalidPyramid("no levels".into()));
        }
        if aspect_ratios.is_empty() {
            return Err(GeomError::InvalidPyramid("no aspect ratios".into()));
        }
        if aspect_ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(GeomError::InvalidPyramid("aspect ratios must be positive".into()));
        }
        for l in &levels {
            if l.stride == 0 || !(l.base_size.is_finite() && l.base_size > 0.0) {
                return Err(GeomError::InvalidPyramid(format!(
                    "level {} needs positive stride and base size",
                    l.name
                )));
            }
        }
        for w in levels.windows(2) {
            if w[1].stride <= w[0].stride {
                return Err(GeomError::InvalidPyramid(format!(
                    "stride of {} must exceed stride of {}",
                    w[1].name, w[0].name
                )));
            }
            if w[1].base_size <= w[0].base_size {
                return Err(GeomError::InvalidPyramid(format!(
                    "base size of {} must exceed base size of {}",
                    w[1].name, w[0].name
                )));
            }
        }
        Ok(Self { levels, aspect_ratios })
    }

    /// Builds levels named `p{first_index}..` from parallel stride/size lists.
    pub fn from_lists(strides: &[u32], base_sizes: &[f64], aspect_ratios: &[f64]) -> Result<Self, GeomError> {
        if strides.len() != base_sizes.len() {
            return Err(GeomError::InvalidPyramid(format!(
                "{} strides but {} base sizes",
                strides.len(),
                base_sizes.len()
            )));
        }
        let levels = strides
            .iter()
            .zip(base_sizes)
            .enumerate()
            .map(|(i, (&stride, &base_size))| LevelSpec {
                name: format!("p{}", i + 2),
                stride,
                base_size,
            })
            .collect();
        Self::new(levels, aspect_ratios.to_vec())
    }

    /// Four-level pyramid (p2..p5) used by the toy detector on 128x128 inputs.
    pub fn toy() -> Self {
        Self::from_lists(&[4, 8, 16, 32], &[16.0, 32.0, 64.0, 128.0], &[0.5, 1.0, 2.0])
            .expect("static pyramid is valid")
    }

    /// Standard five-level FPN (p2..p6).
    pub fn fpn_default() -> Self {
        Self::from_lists(
            &[4, 8, 16, 32, 64],
            &[32.0, 64.0, 128.0, 256.0, 512.0],
            &[0.5, 1.0, 2.0],
        )
        .expect("static pyramid is valid")
    }

    pub fn levels(&self) -> &[LevelSpec] {
        &self.levels
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn aspect_ratios(&self) -> &[f64] {
        &self.aspect_ratios
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.aspect_ratios.len()
    }

    /// Feature-map size of a level: `ceil(image / stride)` on each axis.
    pub fn feature_dims(&self, level: usize, image_h: u32, image_w: u32) -> (usize, usize) {
        let s = self.levels[level].stride;
        (image_h.div_ceil(s) as usize, image_w.div_ceil(s) as usize)
    }
}

/// A fixed prior box with its provenance in the pyramid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub bbox: BBox,
    pub level: usize,
    pub row: u32,
    pub col: u32,
    pub ratio_index: u8,
    /// Anchor extends past the image border.
    pub crosses_border: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridLevel {
    pub height: usize,
    pub width: usize,
    pub stride: u32,
    /// Index of this level's first anchor in the flat anchor list.
    pub offset: usize,
}

impl GridLevel {
    pub fn len(&self, anchors_per_cell: usize) -> usize {
        self.height * self.width * anchors_per_cell
    }
}

/// Every anchor of every level, flattened level-major then row, column, ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrid {
    anchors: Vec<Anchor>,
    levels: Vec<GridLevel>,
    anchors_per_cell: usize,
    image_h: u32,
    image_w: u32,
}

impl AnchorGrid {
    pub fn anchors(&self) -> &[Anchor] {
        &self.anchors
    }

    pub fn levels(&self) -> &[GridLevel] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchors_per_cell
    }

    pub fn image_size(&self) -> (u32, u32) {
        (self.image_h, self.image_w)
    }

    pub fn level_counts(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.len(self.anchors_per_cell)).collect()
    }

    pub fn level_anchors(&self, level: usize) -> &[Anchor] {
        let l = &self.levels[level];
        &self.anchors[l.offset..l.offset + l.len(self.anchors_per_cell)]
    }

    /// Flat index of the anchor at `(level, row, col, ratio)`.
    pub fn flat_index(&self, level: usize, row: usize, col: usize, ratio: usize) -> usize {
        let l = &self.levels[level];
        l.offset + (row * l.width + col) * self.anchors_per_cell + ratio
    }
}

/// Tiles `anchors_per_cell` anchors on every cell of every level.
///
/// Feature maps are `ceil(image / stride)` per axis, which is what zero-padding the
/// image on the right/bottom yields for each level. Anchor centres sit at cell
/// centres; anchors crossing the image border are kept and flagged.
pub fn build_anchor_grid(spec: &PyramidSpec, image_h: u32, image_w: u32) -> Result<AnchorGrid, GeomError> {
    if image_h == 0 || image_w == 0 {
        return Err(GeomError::EmptyImage {
            height: image_h,
            width: image_w,
        });
    }
    let per_cell = spec.anchors_per_cell();
    let shapes: Vec<(f64, f64)> = spec
        .aspect_ratios()
        .iter()
        .map(|&r| (1.0 / r.sqrt(), r.sqrt()))
        .collect();
    let mut anchors = Vec::new();
    let mut levels = Vec::with_capacity(spec.num_levels());
    for (li, level) in spec.levels().iter().enumerate() {
        let (h, w) = spec.feature_dims(li, image_h, image_w);
        levels.push(GridLevel {
            height: h,
            width: w,
            stride: level.stride,
            offset: anchors.len(),
        });
        let stride = level.stride as f64;
        for row in 0..h {
            let cy = (row as f64 + 0.5) * stride;
            for col in 0..w {
                let cx = (col as f64 + 0.5) * stride;
                for (ri, &(wf, hf)) in shapes.iter().enumerate() {
                    let bbox = BBox::from_center(cx, cy, level.base_size * wf, level.base_size * hf)?;
                    anchors.push(Anchor {
                        bbox,
                        level: li,
                        row: row as u32,
                        col: col as u32,
                        ratio_index: ri as u8,
                        crosses_border: !bbox.is_within(image_w as f64, image_h as f64),
                    });
                }
            }
        }
    }
    Ok(AnchorGrid {
        anchors,
        levels,
        anchors_per_cell: per_cell,
        image_h,
        image_w,
    })
}

/// Max IoU of each anchor over the ground-truth boxes (0 when `gt` is empty).
pub fn match_anchors(grid: &AnchorGrid, gt: &[BBox]) -> Vec<f64> {
    match_boxes(grid.anchors().iter().map(|a| &a.bbox), gt)
        .into_iter()
        .map(|(v, _)| v)
        .collect()
}

/// For each box, the best IoU over `gt` and the index of the box achieving it.
/// Ties resolve to the lowest gt index.
pub fn match_boxes<'a>(boxes: impl IntoIterator<Item = &'a BBox>, gt: &[BBox]) -> Vec<(f64, Option<usize>)> {
    boxes
        .into_iter()
        .map(|b| {
            let mut best = (0.0, None);
            for (gi, g) in gt.iter().enumerate() {
                let v = iou(b, g);
                if v > best.0 {
                    best = (v, Some(gi));
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(a: f64, b: f64, c: f64, d: f64) -> BBox {
        BBox::new(a, b, c, d).unwrap()
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(20.0, 20.0, 30.0, 30.0)), 0.0);
        // inter = 50, union = 150
        assert!((iou(&a, &bx(5.0, 0.0, 15.0, 10.0)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_boxes() {
        let p = bx(3.0, 3.0, 3.0, 3.0);
        assert_eq!(iou(&p, &p), 0.0);
        let line = bx(0.0, 0.0, 10.0, 0.0);
        assert_eq!(iou(&line, &bx(0.0, 0.0, 10.0, 10.0)), 0.0);
    }

    #[test]
    fn rejects_negative_extent() {
        assert!(matches!(
            BBox::new(1.0, 0.0, 0.0, 1.0),
            Err(GeomError::NegativeExtent { .. })
        ));
        assert!(BBox::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn serde_rejects_invalid_box() {
        let ok: BBox = serde_json::from_str("[0.0,1.0,2.0,3.0]").unwrap();
        assert_eq!(ok, bx(0.0, 1.0, 2.0, 3.0));
        assert!(serde_json::from_str::<BBox>("[2.0,1.0,0.0,3.0]").is_err());
    }

    #[test]
    fn toy_grid_counts() {
        let spec = PyramidSpec::from_lists(&[4, 8, 16, 32], &[8.0, 16.0, 32.0, 64.0], &[0.5, 1.0, 2.0]).unwrap();
        let grid = build_anchor_grid(&spec, 64, 64).unwrap();
        assert_eq!(grid.level_counts(), vec![768, 192, 48, 12]);
        assert_eq!(grid.len(), 768 + 192 + 48 + 12);
    }

    #[test]
    fn single_cell_grid() {
        let spec = PyramidSpec::from_lists(&[16], &[16.0], &[0.5, 1.0, 2.0]).unwrap();
        let grid = build_anchor_grid(&spec, 16, 16).unwrap();
        assert_eq!(grid.len(), 3);
        let grid = build_anchor_grid(&spec, 1, 1).unwrap();
        assert_eq!(grid.len(), 3);
    }

    #[test]
    fn paper_scale_populations() {
        // 800x800 with ceil(800/64) = 13 at the top level.
        let grid = build_anchor_grid(&PyramidSpec::fpn_default(), 800, 800).unwrap();
        assert_eq!(grid.level_counts(), vec![120_000, 30_000, 7_500, 1_875, 507]);
        assert_eq!(grid.len(), 159_882);
    }

    #[test]
    fn odd_sizes_round_up() {
        let spec = PyramidSpec::toy();
        let grid = build_anchor_grid(&spec, 100, 130).unwrap();
        let l0 = &grid.levels()[0];
        assert_eq!((l0.height, l0.width), (25, 33));
        let l3 = &grid.levels()[3];
        assert_eq!((l3.height, l3.width), (4, 5));
    }

    #[test]
    fn zero_image_is_error() {
        assert!(matches!(
            build_anchor_grid(&PyramidSpec::toy(), 0, 10),
            Err(GeomError::EmptyImage { .. })
        ));
    }

    #[test]
    fn invalid_pyramids() {
        assert!(PyramidSpec::from_lists(&[8, 4], &[16.0, 32.0], &[1.0]).is_err());
        assert!(PyramidSpec::from_lists(&[4, 8], &[32.0, 32.0], &[1.0]).is_err());
        assert!(PyramidSpec::from_lists(&[4], &[16.0], &[]).is_err());
        assert!(PyramidSpec::from_lists(&[4], &[16.0, 32.0], &[1.0]).is_err());
    }

    #[test]
    fn anchor_shapes_and_lattice() {
        let spec = PyramidSpec::toy();
        let grid = build_anchor_grid(&spec, 128, 128).unwrap();
        for a in grid.anchors() {
            let stride = spec.levels()[a.level].stride as f64;
            let (cx, cy) = a.bbox.center();
            assert!(((cx / stride) - 0.5 - a.col as f64).abs() < 1e-9);
            assert!(((cy / stride) - 0.5 - a.row as f64).abs() < 1e-9);
            let r = spec.aspect_ratios()[a.ratio_index as usize];
            assert!((a.bbox.height() / a.bbox.width() - r).abs() < 1e-9);
            let size = spec.levels()[a.level].base_size;
            assert!((a.bbox.area() - size * size).abs() < 1e-6);
        }
        // the 128px top-level anchors cover the whole image or more
        assert!(grid.level_anchors(3).iter().all(|a| a.crosses_border));
        let idx = grid.flat_index(1, 2, 3, 1);
        let a = grid.anchors()[idx];
        assert_eq!((a.level, a.row, a.col, a.ratio_index), (1, 2, 3, 1));
    }

    #[test]
    fn counts_decrease_with_level() {
        let grid = build_anchor_grid(&PyramidSpec::fpn_default(), 512, 512).unwrap();
        let c = grid.level_counts();
        assert!(c.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn grid_is_deterministic() {
        let a = build_anchor_grid(&PyramidSpec::toy(), 128, 96).unwrap();
        let b = build_anchor_grid(&PyramidSpec::toy(), 128, 96).unwrap();
        assert_eq!(a, b);
        for (x, y) in a.anchors().iter().zip(b.anchors()) {
            assert_eq!(x.bbox.to_array().map(f64::to_bits), y.bbox.to_array().map(f64::to_bits));
        }
    }

    #[test]
    fn match_examples() {
        let grid = build_anchor_grid(&PyramidSpec::toy(), 64, 64).unwrap();
        assert!(match_anchors(&grid, &[]).iter().all(|&v| v == 0.0));
        let target = grid.anchors()[17].bbox;
        let m = match_anchors(&grid, &[target]);
        assert_eq!(m[17], 1.0);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.1..40.0f64, 0.1..40.0f64).prop_map(|(x, y, w, h)| bx(x, y, x + w, y + h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let v = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou(&b, &a));
        }

        #[test]
        fn iou_self_is_one(a in arb_box()) {
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn iou_translation_and_scale_invariant(
            a in arb_box(), b in arb_box(),
            dx in -100.0..100.0f64, dy in -100.0..100.0f64, s in 0.1..10.0f64,
        ) {
            let base = iou(&a, &b);
            let moved = iou(&a.translate(dx, dy), &b.translate(dx, dy));
            let scaled = iou(&a.scale(s), &b.scale(s));
            prop_assert!((base - moved).abs() < 1e-9);
            prop_assert!((base - scaled).abs() < 1e-9);
        }
    }
}
