//! Shape vocabulary and rasterization.
//!
//! A shape is a predicate over normalized coordinates `(u, v)` in `[-1, 1]^2`
//! relative to the object's center and half-extents; `v` grows downwards like
//! image rows. Pixels are tested at their centers.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Visual family. Categories in one family share an outline and differ in detail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Square,
    Disk,
    Triangle,
    Cross,
    Diamond,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Square,
    Disk,
    Triangle,
    Cross,
    Diamond,
    HollowSquare,
    Ring,
    HollowTriangle,
    HollowDiamond,
    RoundedSquare,
    Octagon,
    NotchedTriangle,
    ThinCross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 13] = [
        ShapeKind::Square,
        ShapeKind::Disk,
        ShapeKind::Triangle,
        ShapeKind::Cross,
        ShapeKind::Diamond,
        ShapeKind::HollowSquare,
        ShapeKind::Ring,
        ShapeKind::HollowTriangle,
        ShapeKind::HollowDiamond,
        ShapeKind::RoundedSquare,
        ShapeKind::Octagon,
        ShapeKind::NotchedTriangle,
        ShapeKind::ThinCross,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Disk => "disk",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
            ShapeKind::Diamond => "diamond",
            ShapeKind::HollowSquare => "hollow_square",
            ShapeKind::Ring => "ring",
            ShapeKind::HollowTriangle => "hollow_triangle",
            ShapeKind::HollowDiamond => "hollow_diamond",
            ShapeKind::RoundedSquare => "rounded_square",
            ShapeKind::Octagon => "octagon",
            ShapeKind::NotchedTriangle => "notched_triangle",
            ShapeKind::ThinCross => "thin_cross",
        }
    }

    pub fn family(self) -> ShapeFamily {
        match self {
            ShapeKind::Square | ShapeKind::HollowSquare | ShapeKind::RoundedSquare => ShapeFamily::Square,
            ShapeKind::Disk | ShapeKind::Ring | ShapeKind::Octagon => ShapeFamily::Disk,
            ShapeKind::Triangle | ShapeKind::HollowTriangle | ShapeKind::NotchedTriangle => ShapeFamily::Triangle,
            ShapeKind::Cross | ShapeKind::ThinCross => ShapeFamily::Cross,
            ShapeKind::Diamond | ShapeKind::HollowDiamond => ShapeFamily::Diamond,
        }
    }

    /// Whether `(u, v)` lies inside the shape.
    pub fn contains(self, u: f64, v: f64) -> bool {
        if u.abs() > 1.0 || v.abs() > 1.0 {
            return false;
        }
        let r2 = u * u + v * v;
        match self {
            ShapeKind::Square => true,
            ShapeKind::Disk => r2 <= 1.0,
            ShapeKind::Triangle => in_triangle(u, v, 1.0),
            ShapeKind::Cross => u.abs() <= 0.34 || v.abs() <= 0.34,
            ShapeKind::Diamond => u.abs() + v.abs() <= 1.0,
            ShapeKind::HollowSquare => u.abs() > 0.5 || v.abs() > 0.5,
            ShapeKind::Ring => r2 <= 1.0 && r2 > 0.3,
            ShapeKind::HollowTriangle => in_triangle(u, v, 1.0) && !in_triangle(u, v - 0.25, 0.45),
            ShapeKind::HollowDiamond => {
                let d = u.abs() + v.abs();
                d <= 1.0 && d > 0.5
            }
            ShapeKind::RoundedSquare => {
                let cu = (u.abs() - 0.55).max(0.0);
                let cv = (v.abs() - 0.55).max(0.0);
                cu * cu + cv * cv <= 0.45 * 0.45
            }
            ShapeKind::Octagon => u.abs() + v.abs() <= 1.42,
            ShapeKind::NotchedTriangle => in_triangle(u, v, 1.0) && !(v > 0.55 && u.abs() < 0.22),
            ShapeKind::ThinCross => u.abs() <= 0.18 || v.abs() <= 0.18,
        }
    }
}

/// Apex-up triangle with apex at `v = -scale` and base at `v = scale`.
fn in_triangle(u: f64, v: f64, scale: f64) -> bool {
    v <= scale && v >= -scale && u.abs() <= (v + scale) / 2.0
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ShapeKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown shape `{s}`"))
    }
}

/// Placement of one shape: center and half-extents in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub cx: f64,
    pub cy: f64,
    pub half_w: f64,
    pub half_h: f64,
}

/// Rasterized coverage of a placed shape, clipped to the image.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<bool>,
}

impl Mask {
    /// Tight pixel bounds `[x0, y0, x1, y1)` of the covered pixels, if any.
    pub fn bounds(&self) -> Option<[usize; 4]> {
        let mut b: Option<[usize; 4]> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.pixels[y * self.width + x] {
                    continue;
                }
                b = Some(match b {
                    None => [x, y, x + 1, y + 1],
                    Some([x0, y0, x1, y1]) => [x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)],
                });
            }
        }
        b
    }
}

pub fn rasterize(kind: ShapeKind, p: &Placement, width: usize, height: usize) -> Mask {
    let mut pixels = vec![false; width * height];
    let x_lo = ((p.cx - p.half_w).floor().max(0.0)) as usize;
    let y_lo = ((p.cy - p.half_h).floor().max(0.0)) as usize;
    let x_hi = ((p.cx + p.half_w).ceil().max(0.0) as usize).min(width);
    let y_hi = ((p.cy + p.half_h).ceil().max(0.0) as usize).min(height);
    for y in y_lo..y_hi {
        let v = (y as f64 + 0.5 - p.cy) / p.half_h;
        for x in x_lo..x_hi {
            let u = (x as f64 + 0.5 - p.cx) / p.half_w;
            if kind.contains(u, v) {
                pixels[y * width + x] = true;
            }
        }
    }
    Mask { width, height, pixels }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for k in ShapeKind::ALL {
            assert_eq!(k.name().parse::<ShapeKind>().unwrap(), k);
        }
        assert!("blob".parse::<ShapeKind>().is_err());
    }

    #[test]
    fn every_shape_touches_its_box_edges() {
        let p = Placement {
            cx: 32.0,
            cy: 32.0,
            half_w: 12.0,
            half_h: 12.0,
        };
        for k in ShapeKind::ALL {
            let b = rasterize(k, &p, 64, 64).bounds().unwrap();
            for (got, want) in b.iter().zip([20usize, 20, 44, 44]) {
                assert!(got.abs_diff(want) <= 1, "{k}: bounds {b:?}");
            }
        }
    }

    #[test]
    fn hollow_variants_have_holes() {
        for k in [ShapeKind::HollowSquare, ShapeKind::Ring, ShapeKind::HollowDiamond] {
            assert!(!k.contains(0.0, 0.0));
        }
        assert!(!ShapeKind::HollowTriangle.contains(0.0, 0.3));
        assert!(ShapeKind::Triangle.contains(0.0, 0.3));
    }

    #[test]
    fn clipped_rasterization_stays_in_image() {
        let p = Placement {
            cx: 2.0,
            cy: 62.0,
            half_w: 10.0,
            half_h: 10.0,
        };
        let m = rasterize(ShapeKind::Square, &p, 64, 64);
        assert_eq!(m.bounds(), Some([0, 52, 12, 64]));
    }
}
