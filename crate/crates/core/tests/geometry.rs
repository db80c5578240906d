mod oracles;

use oracles::{brute_force_max_iou, rational_iou};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tfsod_core::boxgeom::{build_anchor_grid, iou, match_anchors, match_boxes, BBox, PyramidSpec};

#[test]
fn iou_matches_rational_arithmetic() {
    let (num, den) = rational_iou([0, 0, 10, 10], [5, 0, 15, 10]);
    assert_eq!((num, den), (1, 3));
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..2000 {
        let mut r = || {
            let x = rng.random_range(0..40i64);
            let y = rng.random_range(0..40i64);
            [x, y, x + rng.random_range(1..30i64), y + rng.random_range(1..30i64)]
        };
        let (a, b) = (r(), r());
        let (num, den) = rational_iou(a, b);
        let fa = BBox::new(a[0] as f64, a[1] as f64, a[2] as f64, a[3] as f64).unwrap();
        let fb = BBox::new(b[0] as f64, b[1] as f64, b[2] as f64, b[3] as f64).unwrap();
        assert!((iou(&fa, &fb) - num as f64 / den as f64).abs() < 1e-15);
    }
}

#[test]
fn match_equals_pairwise_max() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let rand_box = |rng: &mut ChaCha8Rng| {
        let x = rng.random_range(0.0..100.0);
        let y = rng.random_range(0.0..100.0);
        [x, y, x + rng.random_range(0.5..60.0), y + rng.random_range(0.5..60.0)]
    };
    for _ in 0..20 {
        let anchors: Vec<[f64; 4]> = (0..20).map(|_| rand_box(&mut rng)).collect();
        let gt: Vec<[f64; 4]> = (0..5).map(|_| rand_box(&mut rng)).collect();
        let ab: Vec<BBox> = anchors.iter().map(|a| BBox::try_from(*a).unwrap()).collect();
        let gb: Vec<BBox> = gt.iter().map(|a| BBox::try_from(*a).unwrap()).collect();
        let fast: Vec<f64> = match_boxes(&ab, &gb).into_iter().map(|m| m.0).collect();
        let slow = brute_force_max_iou(&anchors, &gt);
        for (f, s) in fast.iter().zip(&slow) {
            assert!((f - s).abs() < 1e-12);
        }
    }
    // up to 1000 anchors x 50 gt through the grid path
    let spec = PyramidSpec::from_lists(&[4, 8], &[8.0, 16.0], &[0.5, 1.0, 2.0]).unwrap();
    let grid = build_anchor_grid(&spec, 64, 64).unwrap();
    assert!(grid.len() <= 1000);
    let gt: Vec<[f64; 4]> = (0..50).map(|_| rand_box(&mut rng)).collect();
    let gb: Vec<BBox> = gt.iter().map(|a| BBox::try_from(*a).unwrap()).collect();
    let anchors: Vec<[f64; 4]> = grid.anchors().iter().map(|a| a.bbox.to_array()).collect();
    let slow = brute_force_max_iou(&anchors, &gt);
    for (f, s) in match_anchors(&grid, &gb).iter().zip(&slow) {
        assert!((f - s).abs() < 1e-12);
    }
}
