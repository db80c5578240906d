//! Box coding, smooth-L1 and non-maximum suppression on `[x0, y0, x1, y1]` arrays.

use tfsod_core::boxgeom::iou;
use tfsod_core::BBox;

/// Largest log-scale change a decoded box may apply.
const MAX_LOG_SCALE: f64 = 4.135; // ln(1000 / 16)

pub type Rect = [f64; 4];

pub fn rect(b: &BBox) -> Rect {
    b.to_array()
}

pub fn to_bbox(r: Rect) -> BBox {
    BBox::new(r[0], r[1], r[2].max(r[0]), r[3].max(r[1])).expect("ordered rectangle")
}

fn center_size(r: &Rect) -> (f64, f64, f64, f64) {
    let w = (r[2] - r[0]).max(1e-6);
    let h = (r[3] - r[1]).max(1e-6);
    (r[0] + 0.5 * w, r[1] + 0.5 * h, w, h)
}

/// Regression target `(dx, dy, dw, dh)` taking `reference` to `target`.
pub fn encode(reference: &Rect, target: &Rect) -> [f64; 4] {
    let (rx, ry, rw, rh) = center_size(reference);
    let (tx, ty, tw, th) = center_size(target);
    [(tx - rx) / rw, (ty - ry) / rh, (tw / rw).ln(), (th / rh).ln()]
}

pub fn decode(reference: &Rect, d: [f64; 4]) -> Rect {
    let (rx, ry, rw, rh) = center_size(reference);
    let cx = rx + d[0] * rw;
    let cy = ry + d[1] * rh;
    let w = rw * d[2].min(MAX_LOG_SCALE).exp();
    let h = rh * d[3].min(MAX_LOG_SCALE).exp();
    [cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h]
}

pub fn clip(r: Rect, width: f64, height: f64) -> Rect {
    [
        r[0].clamp(0.0, width),
        r[1].clamp(0.0, height),
        r[2].clamp(0.0, width),
        r[3].clamp(0.0, height),
    ]
}

pub fn rect_iou(a: &Rect, b: &Rect) -> f64 {
    iou(&to_bbox(*a), &to_bbox(*b))
}

/// Smooth-L1 summed over the four coordinates, with its gradient.
pub fn smooth_l1(pred: [f64; 4], target: [f64; 4], beta: f64) -> (f64, [f64; 4]) {
    let mut loss = 0.0;
    let mut grad = [0.0; 4];
    for i in 0..4 {
        let d = pred[i] - target[i];
        if d.abs() < beta {
            loss += 0.5 * d * d / beta;
            grad[i] = d / beta;
        } else {
            loss += d.abs() - 0.5 * beta;
            grad[i] = d.signum();
        }
    }
    (loss, grad)
}

/// Greedy NMS over `order` (already sorted by decreasing score). Returns kept entries.
pub fn nms(rects: &[Rect], order: &[usize], iou_thresh: f64, max_keep: usize) -> Vec<usize> {
    let mut keep: Vec<usize> = Vec::new();
    for &i in order {
        if keep.len() >= max_keep {
            break;
        }
        if keep.iter().all(|&k| rect_iou(&rects[i], &rects[k]) <= iou_thresh) {
            keep.push(i);
        }
    }
    keep
}
