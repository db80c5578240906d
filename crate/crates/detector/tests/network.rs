use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tfsod_core::Stage;
use tfsod_detector::nn::Fmap;
use tfsod_detector::{Arch, Detector, DetectorError, GtBox, RunConfig};

fn small_arch() -> Arch {
    Arch {
        image_size: 64,
        backbone: [6, 8, 8, 8, 8],
        fpn_channels: 8,
        roi_bins: 3,
        roi_samples: 2,
        fc_dim: 16,
        obj_head_hidden: 8,
        roi_head_hidden: 8,
        embed_dim: 6,
        num_classes: 3,
    }
}

fn noise_image(size: usize, seed: u64) -> Fmap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = Fmap::zeros(3, size, size);
    for v in f.data.iter_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    f
}

fn fixture_gt() -> Vec<GtBox> {
    vec![
        GtBox {
            rect: [8.0, 8.0, 24.0, 24.0],
            class: 1,
        },
        GtBox {
            rect: [30.0, 26.0, 62.0, 58.0],
            class: 3,
        },
    ]
}

fn loss(det: &Detector, img: &Fmap, gt: &[GtBox], stage: Stage, cfg: &RunConfig, seed: u64) -> f64 {
    det.forward_train(img, gt, stage, cfg, seed, None).unwrap().total
}

/// Directional finite differences, one random direction per tensor.
fn check_gradients(det: &Detector, cfg: &RunConfig, stage: Stage, skip: &[&str]) -> Vec<String> {
    let img = noise_image(det.arch.image_size, 3);
    let gt = fixture_gt();
    let mut grads = det.params.zeros_like();
    det.forward_train(&img, &gt, stage, cfg, 11, Some((&mut grads, 1.0)))
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    // Small enough that few ReLUs change state, large enough to clear f32 noise.
    let h = 2e-4f32;
    let mut failures = Vec::new();
    for (i, meta) in det.params.meta.iter().enumerate() {
        if skip.iter().any(|s| meta.name.starts_with(s)) {
            continue;
        }
        let dir: Vec<f32> = (0..meta.len()).map(|_| rng.sample(StandardNormal)).collect();
        let analytic: f64 = grads.values[i].iter().zip(&dir).map(|(&g, &d)| f64::from(g * d)).sum();
        let probe = |sign: f32| {
            let mut d = det.clone();
            for (w, &u) in d.params.values[i].iter_mut().zip(&dir) {
                *w += sign * h * u;
            }
            loss(&d, &img, &gt, stage, cfg, 11)
        };
        let numeric = (probe(1.0) - probe(-1.0)) / (2.0 * f64::from(h));
        let tol = 0.03 * analytic.abs().max(numeric.abs()) + 2e-3;
        if (analytic - numeric).abs() > tol {
            failures.push(format!("{}: analytic {analytic:.6} numeric {numeric:.6}", meta.name));
        }
    }
    failures
}

fn gt_only_config() -> RunConfig {
    RunConfig {
        topk: 0,
        thre_cls: 1.0,
        budget: 64,
        roi_per_image: 8,
        ..RunConfig::default()
    }
}

#[test]
fn full_network_gradients_match_finite_differences() {
    let det = Detector::new(small_arch(), 5);
    for stage in [Stage::Pretrain, Stage::Finetune] {
        let failures = check_gradients(&det, &gt_only_config(), stage, &[]);
        assert!(failures.is_empty(), "{stage}: {failures:#?}");
    }
}

#[test]
fn gradients_match_with_gate_and_proposals_active() {
    // Zero RPN deltas pin every proposal to its anchor and an NMS threshold of
    // 1 suppresses nothing, so every anchor survives as a proposal whatever the
    // scores. The RoI set then does not move with the parameters.
    let mut det = Detector::new(small_arch(), 8);
    for (meta, v) in det.params.meta.iter().zip(det.params.values.iter_mut()) {
        if meta.name.starts_with("rpn.delta") {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
    }
    let cfg = RunConfig {
        thre_cls: 0.05,
        budget: 64,
        roi_per_image: 8,
        pre_nms_topk: 4096,
        topk: 4096,
        rpn_nms_iou: 1.0,
        ..RunConfig::default()
    };
    let out = det
        .forward_train(&noise_image(64, 3), &fixture_gt(), Stage::Finetune, &cfg, 11, None)
        .unwrap();
    assert!(out.counts.totals().2 > 0, "fixture should relabel some negatives");
    let failures = check_gradients(&det, &cfg, Stage::Finetune, &["rpn.delta"]);
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn anchor_covered_by_gt_is_active() {
    let det = Detector::new(Arch::toy(4, 16), 1);
    let i = det
        .anchor_rects()
        .iter()
        .position(|r| r[0] >= 0.0 && r[1] >= 0.0 && r[2] <= 128.0 && r[3] <= 128.0)
        .unwrap();
    let gt = [GtBox {
        rect: det.anchor_rects()[i],
        class: 2,
    }];
    let cfg = RunConfig::default();
    let out = det
        .forward_train(&noise_image(128, 1), &gt, Stage::Pretrain, &cfg, 0, None)
        .unwrap();
    assert!(out.counts.totals().0 >= 1);
}

#[test]
fn background_image_has_no_actives_and_counts_fill_budget() {
    let det = Detector::new(Arch::toy(4, 16), 1);
    let cfg = RunConfig {
        thre_cls: 1.0,
        ..RunConfig::default()
    };
    let out = det
        .forward_train(&noise_image(128, 2), &[], Stage::Pretrain, &cfg, 0, None)
        .unwrap();
    let (a, n, p) = out.counts.totals();
    assert_eq!((a, p), (0, 0));
    assert_eq!(n, cfg.budget);
    assert!(out.total.is_finite());
}

#[test]
fn anchor_counts_sum_to_budget() {
    let det = Detector::new(Arch::toy(4, 16), 2);
    let cfg = RunConfig::default();
    let gt = [
        GtBox {
            rect: [10.0, 12.0, 42.0, 44.0],
            class: 1,
        },
        GtBox {
            rect: [64.0, 60.0, 128.0, 124.0],
            class: 4,
        },
    ];
    for seed in 0..4 {
        let out = det
            .forward_train(&noise_image(128, seed), &gt, Stage::Finetune, &cfg, seed, None)
            .unwrap();
        let (a, n, p) = out.counts.totals();
        assert_eq!(a + n + p, cfg.budget);
    }
}

#[test]
fn confident_classifier_relabels_background_objects() {
    // A classifier biased hard towards class 1 scores every negative proposal
    // above the gate threshold, as it would an unlabeled look-alike object.
    let mut det = Detector::new(Arch::toy(4, 16), 3);
    let bias = det.params.find("roi.cls.bias").unwrap();
    det.params.get_mut(bias)[1] = 12.0;
    let cfg = RunConfig {
        thre_cls: 0.75,
        ..RunConfig::default()
    };
    let gt = [GtBox {
        rect: [16.0, 16.0, 48.0, 48.0],
        class: 1,
    }];
    let out = det
        .forward_train(&noise_image(128, 4), &gt, Stage::Pretrain, &cfg, 0, None)
        .unwrap();
    assert!(out.counts.totals().2 >= 1);

    let off = RunConfig { thre_cls: 1.0, ..cfg };
    let out = det
        .forward_train(&noise_image(128, 4), &gt, Stage::Pretrain, &off, 0, None)
        .unwrap();
    assert_eq!(out.counts.totals().2, 0);
}

#[test]
fn repeated_calls_are_identical() {
    let det = Detector::new(Arch::toy(4, 16), 4);
    let cfg = RunConfig::default();
    let img = noise_image(128, 5);
    let gt = [GtBox {
        rect: [20.0, 20.0, 52.0, 52.0],
        class: 3,
    }];
    let run = || {
        let mut g = det.params.zeros_like();
        let out = det
            .forward_train(&img, &gt, Stage::Finetune, &cfg, 7, Some((&mut g, 1.0)))
            .unwrap();
        (out.total.to_bits(), out.counts, g.values)
    };
    assert_eq!(run(), run());
}

#[test]
fn out_of_range_class_is_rejected() {
    let det = Detector::new(Arch::toy(4, 16), 4);
    let gt = [GtBox {
        rect: [20.0, 20.0, 52.0, 52.0],
        class: 5,
    }];
    let err = det
        .forward_train(
            &noise_image(128, 0),
            &gt,
            Stage::Pretrain,
            &RunConfig::default(),
            0,
            None,
        )
        .unwrap_err();
    assert!(matches!(
        err,
        DetectorError::BadClass {
            class: 5,
            num_classes: 4
        }
    ));
}
