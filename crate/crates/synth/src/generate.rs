use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tfsod_core::BBox;

use crate::dataset::{Annotation, Dataset, GenParams, Image, RenderConfig, SceneCounts, SceneRecord, Splits};
use crate::shapes::{rasterize, Placement};
use crate::taxonomy::CategoryTaxonomy;
use crate::SynthError;

const TAG_PRETRAIN: u64 = 1;
const TAG_SHOT: u64 = 2;
const TAG_TEST: u64 = 3;

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn scene_rng(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(mix(seed) ^ tag) ^ index))
}

/// What to draw in one scene, in placement order.
struct SceneSpec {
    labeled: Vec<usize>,
    unlabeled: Vec<usize>,
}

/// Builds the pretrain, fine-tune and test splits.
///
/// Pretrain scenes label base objects only and, with probability `unseen_rate`,
/// also contain unlabeled novel-seen or unseen objects. The fine-tune split is
/// every pretrain scene plus `k_shot` scenes per novel-seen category, each showing
/// that category labeled. Test scenes label base and novel-seen objects; unseen
/// objects, when present, stay unlabeled.
pub fn generate(
    taxonomy: &CategoryTaxonomy,
    counts: SceneCounts,
    k_shot: usize,
    seed: u64,
    unseen_rate: f64,
    render: RenderConfig,
) -> Result<Dataset, SynthError> {
    if k_shot == 0 {
        return Err(SynthError::BadKShot);
    }
    if !(0.0..=1.0).contains(&unseen_rate) {
        return Err(SynthError::BadUnseenRate(unseen_rate));
    }
    if k_shot > counts.novel_pool && !taxonomy.novel_seen().is_empty() {
        return Err(SynthError::NotEnoughNovel {
            k_shot,
            available: counts.novel_pool,
        });
    }
    validate_render(&render)?;

    let base: Vec<usize> = taxonomy.base_ids().collect();
    let novel: Vec<usize> = taxonomy.novel_ids().collect();
    let unseen: Vec<usize> = taxonomy.unseen_ids().collect();
    let hidden_pool: Vec<usize> = novel.iter().chain(&unseen).copied().collect();
    let labeled_pool: Vec<usize> = base.iter().chain(&novel).copied().collect();

    let mut scenes = Vec::new();
    let mut splits = Splits::default();

    for i in 0..counts.pretrain {
        let mut rng = scene_rng(seed, TAG_PRETRAIN, i as u64);
        let spec = SceneSpec {
            labeled: pick_many(&mut rng, &base, 1, render.max_labeled),
            unlabeled: maybe_unlabeled(&mut rng, &hidden_pool, unseen_rate, render.max_unlabeled),
        };
        splits.pretrain.push(scenes.len());
        splits.finetune.push(scenes.len());
        scenes.push(render_scene(
            taxonomy,
            format!("pretrain-{i:05}"),
            &spec,
            &render,
            &mut rng,
        ));
    }

    for &c in &novel {
        for j in 0..k_shot {
            let mut rng = scene_rng(seed, TAG_SHOT, ((c as u64) << 32) | j as u64);
            let mut labeled = vec![c];
            labeled.extend(pick_many(&mut rng, &base, 0, 1));
            let spec = SceneSpec {
                labeled,
                unlabeled: maybe_unlabeled(&mut rng, &unseen, unseen_rate, 1),
            };
            splits.finetune.push(scenes.len());
            let id = format!("shot-{}-{j:03}", taxonomy.name(c));
            scenes.push(render_scene(taxonomy, id, &spec, &render, &mut rng));
        }
    }

    for i in 0..counts.test {
        let mut rng = scene_rng(seed, TAG_TEST, i as u64);
        let mut labeled = pick_many(&mut rng, &labeled_pool, 1, render.max_labeled);
        // Every other test scene is guaranteed a novel object so nAP has support.
        if i % 2 == 0 && !novel.is_empty() && !labeled.iter().any(|c| novel.contains(c)) {
            labeled[0] = novel[(i / 2) % novel.len()];
        }
        let spec = SceneSpec {
            labeled,
            unlabeled: maybe_unlabeled(&mut rng, &unseen, unseen_rate, 1),
        };
        splits.test.push(scenes.len());
        scenes.push(render_scene(taxonomy, format!("test-{i:05}"), &spec, &render, &mut rng));
    }

    Ok(Dataset {
        taxonomy: taxonomy.clone(),
        params: GenParams {
            seed,
            k_shot,
            unseen_rate,
            counts,
            render,
        },
        scenes,
        splits,
    })
}

fn validate_render(r: &RenderConfig) -> Result<(), SynthError> {
    let bad = |m: &str| Err(SynthError::Render(m.to_string()));
    if r.image_size < 16 {
        return bad("image_size must be at least 16");
    }
    if r.object_sizes.is_empty() || r.object_sizes.len() != r.strides.len() {
        return bad("object_sizes and strides must be non-empty and equally long");
    }
    let limit = r.image_size as f64 / (1.0 + r.size_jitter) / 1.25f64.sqrt();
    if r.object_sizes
        .iter()
        .chain(&r.strides)
        .any(|&v| !(v.is_finite() && v > 0.0))
        || r.object_sizes.iter().any(|&s| s > limit)
    {
        return bad("object sizes and strides must be positive and fit the image");
    }
    if !(0.0..0.5).contains(&r.size_jitter) {
        return bad("size_jitter must lie in [0, 0.5)");
    }
    if r.max_labeled == 0 {
        return bad("max_labeled must be at least 1");
    }
    Ok(())
}

fn pick_many(rng: &mut ChaCha8Rng, pool: &[usize], lo: usize, hi: usize) -> Vec<usize> {
    if pool.is_empty() {
        return Vec::new();
    }
    let n = rng.random_range(lo..=hi.max(lo));
    (0..n).map(|_| *pool.choose(rng).unwrap()).collect()
}

fn maybe_unlabeled(rng: &mut ChaCha8Rng, pool: &[usize], rate: f64, max: usize) -> Vec<usize> {
    // Draw unconditionally so the stream does not depend on the outcome.
    let hit = rng.random::<f64>() < rate;
    let picks = pick_many(rng, pool, 1, max.max(1));
    if hit {
        picks
    } else {
        Vec::new()
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as u32 % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r, g, b].map(|c| (c * 255.0).round().clamp(0.0, 255.0) as u8)
}

fn render_scene(
    taxonomy: &CategoryTaxonomy,
    id: String,
    spec: &SceneSpec,
    cfg: &RenderConfig,
    rng: &mut ChaCha8Rng,
) -> SceneRecord {
    let size = cfg.image_size;
    let bg = hsv_to_rgb(rng.random(), rng.random_range(0.0..0.3), rng.random_range(0.12..0.32));
    let mut image = Image::filled(size, size, bg);
    if cfg.noise > 0 {
        let amp = i16::from(cfg.noise);
        for p in image.pixels.iter_mut() {
            *p = (i16::from(*p) + rng.random_range(-amp..=amp)).clamp(0, 255) as u8;
        }
    }
    for _ in 0..cfg.clutter {
        let shade = bg.map(|c| (i16::from(c) + rng.random_range(-40i16..=40)).clamp(0, 255) as u8);
        let (x0, y0) = (rng.random_range(0..size), rng.random_range(0..size));
        let len = rng.random_range(2..10usize);
        let horizontal = rng.random::<bool>();
        for k in 0..len {
            let (x, y) = if horizontal { (x0 + k, y0) } else { (x0, y0 + k) };
            if x < size && y < size {
                image.put(x, y, shade);
            }
        }
    }

    let mut boxes: Vec<BBox> = Vec::new();
    let mut visible = Vec::new();
    let mut hidden = Vec::new();
    // Unlabeled objects go first: the scene was chosen to contain at least one.
    let order = spec
        .unlabeled
        .iter()
        .map(|&c| (c, false))
        .chain(spec.labeled.iter().map(|&c| (c, true)));
    for (category, labeled) in order {
        let level = if !labeled && cfg.large_unlabeled {
            cfg.object_sizes.len() - 1
        } else {
            rng.random_range(0..cfg.object_sizes.len())
        };
        let Some(placement) = place(rng, cfg, level, &boxes) else {
            continue;
        };
        let color = hsv_to_rgb(rng.random(), rng.random_range(0.55..1.0), rng.random_range(0.75..1.0));
        let mask = rasterize(taxonomy.kind(category), &placement, size, size);
        let Some([x0, y0, x1, y1]) = mask.bounds() else {
            continue;
        };
        for (i, &on) in mask.pixels.iter().enumerate() {
            if on {
                image.put(i % size, i / size, color);
            }
        }
        let bbox = BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64).expect("mask bounds are ordered");
        boxes.push(bbox);
        let ann = Annotation { bbox, category };
        if labeled {
            visible.push(ann);
        }
        hidden.push(ann);
    }
    SceneRecord {
        id,
        image,
        visible,
        hidden,
    }
}

/// Picks a center near the object-size lattice so some anchor fits the object well,
/// keeping the box inside the image and `gap` pixels away from earlier boxes.
fn place(rng: &mut ChaCha8Rng, cfg: &RenderConfig, level: usize, taken: &[BBox]) -> Option<Placement> {
    let size = cfg.image_size as f64;
    let stride = cfg.strides[level];
    for _ in 0..64 {
        let side = cfg.object_sizes[level] * (1.0 + rng.random_range(-cfg.size_jitter..=cfg.size_jitter));
        let aspect: f64 = rng.random_range(0.8..1.25);
        let half_w = (side * aspect.sqrt() / 2.0).min(size / 2.0);
        let half_h = (side / aspect.sqrt() / 2.0).min(size / 2.0);
        let cells_x = ((size - 2.0 * half_w) / stride).floor() as i64;
        let cells_y = ((size - 2.0 * half_h) / stride).floor() as i64;
        let jitter = stride / 4.0;
        let cx = snap(rng, half_w, stride, cells_x, jitter, size);
        let cy = snap(rng, half_h, stride, cells_y, jitter, size);
        let p = Placement { cx, cy, half_w, half_h };
        let b = BBox::new(
            cx - half_w - cfg.gap,
            cy - half_h - cfg.gap,
            cx + half_w + cfg.gap,
            cy + half_h + cfg.gap,
        )
        .expect("positive extents");
        if taken.iter().all(|t| t.intersection_area(&b) == 0.0) {
            return Some(p);
        }
    }
    None
}

/// A coordinate on the `(k + 0.5) * stride` lattice, jittered, with `half` room each side.
fn snap(rng: &mut ChaCha8Rng, half: f64, stride: f64, cells: i64, jitter: f64, size: f64) -> f64 {
    let lo = half;
    let hi = size - half;
    if cells <= 0 || hi <= lo {
        return size / 2.0;
    }
    let first = ((lo / stride - 0.5).ceil()).max(0.0) as i64;
    let last = ((hi / stride - 0.5).floor()) as i64;
    let c = if last >= first {
        (rng.random_range(first..=last) as f64 + 0.5) * stride
    } else {
        (lo + hi) / 2.0
    };
    (c + rng.random_range(-jitter..=jitter)).clamp(lo, hi)
}
