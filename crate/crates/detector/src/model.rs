//! The detector network: conv backbone, top-down feature pyramid, shared RPN head
//! with three objectness logits per anchor, RoI classifier/regressor and the two
//! contrastive projection heads.

use serde::{Deserialize, Serialize};
use tfsod_core::boxgeom::{build_anchor_grid, AnchorGrid, PyramidSpec};
use tfsod_core::objectness_losses::ProjectionHead;

use crate::boxes::Rect;
use crate::nn::{
    conv_backward, conv_forward, linear_backward, linear_forward, relu_backward, relu_inplace, upsample2,
    upsample2_backward, ConvCache, ConvShape, Fmap, RoiAlign, RoiTaps,
};
use crate::params::{init_tensor, Init, ParamGroup, ParamStore, Pid};

/// Objectness logits per anchor.
pub const OBJ_LOGITS: usize = 3;
/// Scale applied to RoI regression targets.
pub const ROI_BOX_WEIGHTS: [f64; 4] = [10.0, 10.0, 5.0, 5.0];

/// Network dimensions. Everything that shapes a parameter tensor lives here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arch {
    pub image_size: usize,
    /// Output channels of the five stride-2 backbone convolutions.
    pub backbone: [usize; 5],
    pub fpn_channels: usize,
    pub roi_bins: usize,
    pub roi_samples: usize,
    pub fc_dim: usize,
    pub obj_head_hidden: usize,
    pub roi_head_hidden: usize,
    pub embed_dim: usize,
    /// Foreground categories; the classifier has one more output for background.
    pub num_classes: usize,
}

impl Arch {
    pub fn toy(num_classes: usize, embed_dim: usize) -> Self {
        Self {
            image_size: 128,
            backbone: [16, 32, 48, 64, 64],
            fpn_channels: 32,
            roi_bins: 7,
            roi_samples: 2,
            fc_dim: 128,
            obj_head_hidden: 64,
            roi_head_hidden: 128,
            embed_dim,
            num_classes,
        }
    }

    pub fn pooled_dim(&self) -> usize {
        self.fpn_channels * self.roi_bins * self.roi_bins
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Wb {
    w: Pid,
    b: Pid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct HeadIds {
    w1: Pid,
    b1: Pid,
    w2: Pid,
    b2: Pid,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Ids {
    backbone: [Wb; 5],
    lateral: [Wb; 4],
    rpn_conv: Wb,
    rpn_obj: Wb,
    rpn_delta: Wb,
    fc1: Wb,
    fc2: Wb,
    cls: Wb,
    bbox: Wb,
    obj_head: HeadIds,
    roi_head: HeadIds,
}

/// Where each anchor's outputs live in the RPN maps.
#[derive(Debug, Clone, Copy)]
pub struct AnchorSlot {
    pub level: usize,
    pub offset: usize,
    pub ratio: usize,
}

#[derive(Debug, Clone)]
pub struct Detector {
    pub arch: Arch,
    pub params: ParamStore,
    pyramid: PyramidSpec,
    grid: AnchorGrid,
    anchor_rects: Vec<Rect>,
    slots: Vec<AnchorSlot>,
    ids: Ids,
    roi_align: RoiAlign,
}

/// Initialization recipe for each tensor name, by role.
fn init_for(name: &str, fan_in: usize) -> Init {
    if name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2") {
        Init::Zeros
    } else if name.starts_with("rpn.objectness") || name.starts_with("roi.cls") {
        Init::Normal(0.01)
    } else if name.starts_with("rpn.delta") || name.starts_with("roi.bbox") {
        Init::Normal(0.001)
    } else if name.ends_with(".w2") || name.starts_with("fpn.") {
        Init::Fan { fan_in, gain: 1.0 }
    } else {
        Init::Fan { fan_in, gain: 2.0 }
    }
}

pub(crate) fn tensor_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ ((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Detector {
    /// A freshly initialized detector.
    pub fn new(arch: Arch, seed: u64) -> Self {
        let mut d = Self::skeleton(arch);
        for i in 0..d.params.len() {
            d.init_param(Pid(i), seed);
        }
        d
    }

    /// Layout without meaningful values; used when loading checkpoints.
    pub(crate) fn skeleton(arch: Arch) -> Self {
        let pyramid = PyramidSpec::toy();
        let size = arch.image_size as u32;
        let grid = build_anchor_grid(&pyramid, size, size).expect("toy pyramid fits the image");
        let mut p = ParamStore::new();
        let conv = |p: &mut ParamStore, name: &str, g: ParamGroup, cout: usize, cin: usize, k: usize| Wb {
            w: p.add(&format!("{name}.weight"), g, &[cout, cin, k, k]),
            b: p.add(&format!("{name}.bias"), g, &[cout]),
        };
        let lin = |p: &mut ParamStore, name: &str, g: ParamGroup, out: usize, inp: usize| Wb {
            w: p.add(&format!("{name}.weight"), g, &[out, inp]),
            b: p.add(&format!("{name}.bias"), g, &[out]),
        };
        let head = |p: &mut ParamStore, name: &str, g: ParamGroup, d_in: usize, hid: usize, out: usize| HeadIds {
            w1: p.add(&format!("{name}.w1"), g, &[hid, d_in]),
            b1: p.add(&format!("{name}.b1"), g, &[hid]),
            w2: p.add(&format!("{name}.w2"), g, &[out, hid]),
            b2: p.add(&format!("{name}.b2"), g, &[out]),
        };
        let bb = arch.backbone;
        let cins = [3, bb[0], bb[1], bb[2], bb[3]];
        let backbone: [Wb; 5] = std::array::from_fn(|i| {
            conv(
                &mut p,
                &format!("backbone.conv{}", i + 1),
                ParamGroup::Backbone,
                bb[i],
                cins[i],
                3,
            )
        });
        let f = arch.fpn_channels;
        let lateral: [Wb; 4] = std::array::from_fn(|i| {
            conv(
                &mut p,
                &format!("fpn.lateral{}", i + 2),
                ParamGroup::Fpn,
                f,
                bb[i + 1],
                1,
            )
        });
        let a = pyramid.anchors_per_cell();
        let rpn_conv = conv(&mut p, "rpn.conv", ParamGroup::RpnHead, f, f, 3);
        let rpn_obj = conv(&mut p, "rpn.objectness", ParamGroup::RpnHead, a * OBJ_LOGITS, f, 1);
        let rpn_delta = conv(&mut p, "rpn.delta", ParamGroup::RpnHead, a * 4, f, 1);
        let fc1 = lin(&mut p, "roi.fc1", ParamGroup::RoiHead, arch.fc_dim, arch.pooled_dim());
        let fc2 = lin(&mut p, "roi.fc2", ParamGroup::RoiHead, arch.fc_dim, arch.fc_dim);
        let cls = lin(
            &mut p,
            "roi.cls",
            ParamGroup::RoiHead,
            arch.num_classes + 1,
            arch.fc_dim,
        );
        let bbox = lin(&mut p, "roi.bbox", ParamGroup::RoiHead, 4, arch.fc_dim);
        let obj_head = head(
            &mut p,
            "obj_contrast",
            ParamGroup::ObjContrastHead,
            f,
            arch.obj_head_hidden,
            arch.embed_dim,
        );
        let roi_head = head(
            &mut p,
            "roi_contrast",
            ParamGroup::RoiContrastHead,
            arch.fc_dim,
            arch.roi_head_hidden,
            arch.embed_dim,
        );

        let mut slots = Vec::with_capacity(grid.len());
        for anchor in grid.anchors() {
            let lvl = &grid.levels()[anchor.level];
            slots.push(AnchorSlot {
                level: anchor.level,
                offset: anchor.row as usize * lvl.width + anchor.col as usize,
                ratio: anchor.ratio_index as usize,
            });
        }
        let anchor_rects = grid.anchors().iter().map(|a| a.bbox.to_array()).collect();
        let roi_align = RoiAlign {
            bins: arch.roi_bins,
            samples: arch.roi_samples,
        };
        Self {
            arch,
            params: p,
            pyramid,
            grid,
            anchor_rects,
            slots,
            ids: Ids {
                backbone,
                lateral,
                rpn_conv,
                rpn_obj,
                rpn_delta,
                fc1,
                fc2,
                cls,
                bbox,
                obj_head,
                roi_head,
            },
            roi_align,
        }
    }

    /// Re-draws one tensor from `seed`.
    pub(crate) fn init_param(&mut self, pid: Pid, seed: u64) {
        let meta = &self.params.meta[pid.0];
        let fan_in: usize = meta.shape.iter().skip(1).product();
        let init = init_for(&meta.name, fan_in);
        init_tensor(self.params.get_mut(pid), init, tensor_seed(seed, pid.0));
    }

    pub fn grid(&self) -> &AnchorGrid {
        &self.grid
    }

    pub fn pyramid(&self) -> &PyramidSpec {
        &self.pyramid
    }

    pub fn anchor_rects(&self) -> &[Rect] {
        &self.anchor_rects
    }

    pub fn slots(&self) -> &[AnchorSlot] {
        &self.slots
    }

    pub fn num_levels(&self) -> usize {
        self.pyramid.num_levels()
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub(crate) fn level_stride(&self, level: usize) -> f64 {
        f64::from(self.pyramid.levels()[level].stride)
    }

    fn conv_shape(&self, wb: Wb, stride: usize) -> ConvShape {
        let s = &self.params.meta[wb.w.0].shape;
        ConvShape {
            cout: s[0],
            cin: s[1],
            k: s[2],
            stride,
            pad: s[2] / 2,
        }
    }

    fn conv(&self, x: &Fmap, wb: Wb, stride: usize) -> (Fmap, ConvCache) {
        conv_forward(
            x,
            &self.conv_shape(wb, stride),
            self.params.get(wb.w),
            self.params.get(wb.b),
        )
    }

    /// Backbone, pyramid and RPN head.
    pub fn features(&self, image: &Fmap) -> Features {
        let mut acts = Vec::with_capacity(5);
        let mut bb_caches = Vec::with_capacity(5);
        let mut x = image.clone();
        for wb in self.ids.backbone {
            let (mut y, cache) = self.conv(&x, wb, 2);
            relu_inplace(&mut y.data);
            bb_caches.push(cache);
            acts.push(y.clone());
            x = y;
        }
        let nl = 4;
        let mut lat_caches: Vec<Option<ConvCache>> = vec![None; nl];
        let mut pyr: Vec<Option<Fmap>> = vec![None; nl];
        for l in (0..nl).rev() {
            let (mut p, cache) = self.conv(&acts[l + 1], self.ids.lateral[l], 1);
            if let Some(above) = &pyr.get(l + 1).cloned().flatten() {
                p.add_assign(&upsample2(above));
            }
            lat_caches[l] = Some(cache);
            pyr[l] = Some(p);
        }
        let pyr: Vec<Fmap> = pyr.into_iter().map(|p| p.expect("every level built")).collect();
        let mut rpn = Vec::with_capacity(nl);
        for p in &pyr {
            let (mut t, conv_cache) = self.conv(p, self.ids.rpn_conv, 1);
            relu_inplace(&mut t.data);
            let (obj, obj_cache) = self.conv(&t, self.ids.rpn_obj, 1);
            let (delta, delta_cache) = self.conv(&t, self.ids.rpn_delta, 1);
            rpn.push(RpnLevel {
                t,
                obj,
                delta,
                conv_cache,
                obj_cache,
                delta_cache,
            });
        }
        Features {
            acts,
            bb_caches,
            lat_caches: lat_caches.into_iter().map(|c| c.unwrap()).collect(),
            pyramid: pyr,
            rpn,
        }
    }

    /// Objectness logits of anchor `i`.
    pub fn anchor_logits(&self, f: &Features, i: usize) -> [f32; 3] {
        let s = self.slots[i];
        let map = &f.rpn[s.level].obj;
        let plane = map.plane();
        std::array::from_fn(|t| map.data[(s.ratio * OBJ_LOGITS + t) * plane + s.offset])
    }

    pub fn anchor_deltas(&self, f: &Features, i: usize) -> [f64; 4] {
        let s = self.slots[i];
        let map = &f.rpn[s.level].delta;
        let plane = map.plane();
        std::array::from_fn(|d| f64::from(map.data[(s.ratio * 4 + d) * plane + s.offset]))
    }

    /// Backpropagates gradients on the RPN outputs, RPN hidden maps and pyramid
    /// levels down to the backbone, accumulating parameter gradients.
    pub fn features_backward(&self, f: &Features, mut g: FeatureGrads, grads: &mut ParamStore) {
        let ids = &self.ids;
        let nl = f.pyramid.len();
        for l in 0..nl {
            let r = &f.rpn[l];
            let mut dt = g.rpn_hidden[l].take().unwrap_or_else(|| Fmap::zeros_like(&r.t));
            for (dout, wb, cache) in [
                (&g.obj[l], ids.rpn_obj, &r.obj_cache),
                (&g.delta[l], ids.rpn_delta, &r.delta_cache),
            ] {
                if let Some(dout) = dout {
                    let (dw, db) = two_mut(grads, wb);
                    let dx = conv_backward(
                        dout,
                        &self.conv_shape(wb, 1),
                        self.params.get(wb.w),
                        cache,
                        dw,
                        db,
                        true,
                    );
                    dt.add_assign(&dx.unwrap());
                }
            }
            relu_backward(&r.t.data, &mut dt.data);
            let (dw, db) = two_mut(grads, ids.rpn_conv);
            let dp = conv_backward(
                &dt,
                &self.conv_shape(ids.rpn_conv, 1),
                self.params.get(ids.rpn_conv.w),
                &r.conv_cache,
                dw,
                db,
                true,
            )
            .unwrap();
            g.pyramid[l].add_assign(&dp);
        }
        let mut dacts: Vec<Option<Fmap>> = vec![None; 5];
        for l in 0..nl {
            if l + 1 < nl {
                let down = upsample2_backward(&g.pyramid[l]);
                g.pyramid[l + 1].add_assign(&down);
            }
            let wb = ids.lateral[l];
            let (dw, db) = two_mut(grads, wb);
            let dc = conv_backward(
                &g.pyramid[l],
                &self.conv_shape(wb, 1),
                self.params.get(wb.w),
                &f.lat_caches[l],
                dw,
                db,
                true,
            )
            .unwrap();
            dacts[l + 1] = Some(dc);
        }
        let mut carry: Option<Fmap> = None;
        for i in (0..5).rev() {
            let mut d = match (dacts[i].take(), carry.take()) {
                (Some(mut a), Some(b)) => {
                    a.add_assign(&b);
                    a
                }
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (None, None) => continue,
            };
            relu_backward(&f.acts[i].data, &mut d.data);
            let wb = ids.backbone[i];
            let (dw, db) = two_mut(grads, wb);
            carry = conv_backward(
                &d,
                &self.conv_shape(wb, 2),
                self.params.get(wb.w),
                &f.bb_caches[i],
                dw,
                db,
                i > 0,
            );
        }
    }

    /// Pyramid level a box is pooled from, by its scale.
    pub fn roi_level(&self, r: &Rect) -> usize {
        let s = ((r[2] - r[0]).max(1.0) * (r[3] - r[1]).max(1.0)).sqrt();
        let base = self.pyramid.levels()[0].base_size;
        let l = (s / base).log2().round();
        l.clamp(0.0, (self.num_levels() - 1) as f64) as usize
    }

    /// RoI head forward for `rects`. Intermediates are kept for backward.
    pub fn roi_forward(&self, f: &Features, rects: &[Rect]) -> RoiPass {
        let n = rects.len();
        let d = self.arch.pooled_dim();
        let mut pooled = vec![0.0f32; n * d];
        let mut taps = Vec::with_capacity(n);
        let mut levels = Vec::with_capacity(n);
        for (i, r) in rects.iter().enumerate() {
            let l = self.roi_level(r);
            let p = &f.pyramid[l];
            let t = self.roi_align.taps(*r, self.level_stride(l), p.h, p.w);
            self.roi_align.forward(p, &t, &mut pooled[i * d..(i + 1) * d]);
            taps.push(t);
            levels.push(l);
        }
        let ids = &self.ids;
        let fc = self.arch.fc_dim;
        let mut h1 = linear_forward(
            &pooled,
            n,
            d,
            self.params.get(ids.fc1.w),
            self.params.get(ids.fc1.b),
            fc,
        );
        relu_inplace(&mut h1);
        let mut h2 = linear_forward(&h1, n, fc, self.params.get(ids.fc2.w), self.params.get(ids.fc2.b), fc);
        relu_inplace(&mut h2);
        let k1 = self.arch.num_classes + 1;
        let cls = linear_forward(&h2, n, fc, self.params.get(ids.cls.w), self.params.get(ids.cls.b), k1);
        let bbox = linear_forward(&h2, n, fc, self.params.get(ids.bbox.w), self.params.get(ids.bbox.b), 4);
        RoiPass {
            n,
            levels,
            taps,
            pooled,
            h1,
            h2,
            cls,
            bbox,
        }
    }

    /// Backward through the RoI head into `pyramid_grads`.
    pub fn roi_backward(
        &self,
        pass: &RoiPass,
        d_cls: &[f32],
        d_bbox: &[f32],
        d_h2_extra: Option<&[f32]>,
        pyramid_grads: &mut [Fmap],
        grads: &mut ParamStore,
    ) {
        let ids = &self.ids;
        let n = pass.n;
        let fc = self.arch.fc_dim;
        let k1 = self.arch.num_classes + 1;
        let (dw, db) = two_mut(grads, ids.cls);
        let mut dh2 = linear_backward(&pass.h2, d_cls, n, fc, k1, self.params.get(ids.cls.w), dw, db, true).unwrap();
        let (dw, db) = two_mut(grads, ids.bbox);
        let dh2b = linear_backward(&pass.h2, d_bbox, n, fc, 4, self.params.get(ids.bbox.w), dw, db, true).unwrap();
        for (a, b) in dh2.iter_mut().zip(&dh2b) {
            *a += b;
        }
        if let Some(extra) = d_h2_extra {
            for (a, b) in dh2.iter_mut().zip(extra) {
                *a += b;
            }
        }
        relu_backward(&pass.h2, &mut dh2);
        let (dw, db) = two_mut(grads, ids.fc2);
        let mut dh1 = linear_backward(&pass.h1, &dh2, n, fc, fc, self.params.get(ids.fc2.w), dw, db, true).unwrap();
        relu_backward(&pass.h1, &mut dh1);
        let d = self.arch.pooled_dim();
        let (dw, db) = two_mut(grads, ids.fc1);
        let dpooled = linear_backward(&pass.pooled, &dh1, n, d, fc, self.params.get(ids.fc1.w), dw, db, true).unwrap();
        for i in 0..n {
            let l = pass.levels[i];
            self.roi_align
                .backward(&dpooled[i * d..(i + 1) * d], &pass.taps[i], &mut pyramid_grads[l]);
        }
    }

    /// Class probabilities (background first) for `rects`, without keeping intermediates.
    pub fn classify(&self, f: &Features, rects: &[Rect]) -> (Vec<f32>, Vec<f32>) {
        let pass = self.roi_forward(f, rects);
        let k1 = self.arch.num_classes + 1;
        let mut probs = pass.cls.clone();
        for row in probs.chunks_exact_mut(k1) {
            softmax_inplace(row);
        }
        (probs, pass.bbox)
    }

    pub(crate) fn head(&self, which: HeadKind) -> ProjectionHead<f32> {
        let h = self.head_ids(which);
        let w1 = &self.params.meta[h.w1.0].shape;
        let w2 = &self.params.meta[h.w2.0].shape;
        ProjectionHead {
            d_in: w1[1],
            hidden: w1[0],
            d_out: w2[0],
            w1: self.params.get(h.w1).to_vec(),
            b1: self.params.get(h.b1).to_vec(),
            w2: self.params.get(h.w2).to_vec(),
            b2: self.params.get(h.b2).to_vec(),
        }
    }

    pub(crate) fn add_head_grads(&self, which: HeadKind, g: &ProjectionHead<f32>, grads: &mut ParamStore) {
        let h = self.head_ids(which);
        for (pid, src) in [(h.w1, &g.w1), (h.b1, &g.b1), (h.w2, &g.w2), (h.b2, &g.b2)] {
            for (a, b) in grads.get_mut(pid).iter_mut().zip(src) {
                *a += b;
            }
        }
    }

    fn head_ids(&self, which: HeadKind) -> HeadIds {
        match which {
            HeadKind::Objectness => self.ids.obj_head,
            HeadKind::Roi => self.ids.roi_head,
        }
    }

    /// Rows of the RoI classifier, in category order (background first).
    pub(crate) fn cls_ids(&self) -> (Pid, Pid) {
        (self.ids.cls.w, self.ids.cls.b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum HeadKind {
    Objectness,
    Roi,
}

pub fn softmax_inplace(row: &mut [f32]) {
    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

fn two_mut(grads: &mut ParamStore, wb: Wb) -> (&mut [f32], &mut [f32]) {
    let (lo, hi) = (wb.w.0.min(wb.b.0), wb.w.0.max(wb.b.0));
    let (a, b) = grads.values.split_at_mut(hi);
    let (x, y) = (&mut a[lo], &mut b[0]);
    if wb.w.0 < wb.b.0 {
        (x.as_mut_slice(), y.as_mut_slice())
    } else {
        (y.as_mut_slice(), x.as_mut_slice())
    }
}

#[derive(Debug, Clone)]
pub struct RpnLevel {
    /// Hidden activation of the shared RPN convolution.
    pub t: Fmap,
    pub obj: Fmap,
    pub delta: Fmap,
    conv_cache: ConvCache,
    obj_cache: ConvCache,
    delta_cache: ConvCache,
}

#[derive(Debug, Clone)]
pub struct Features {
    acts: Vec<Fmap>,
    bb_caches: Vec<ConvCache>,
    lat_caches: Vec<ConvCache>,
    pub pyramid: Vec<Fmap>,
    pub rpn: Vec<RpnLevel>,
}

impl Features {
    /// Whether every pyramid and RPN output is finite.
    pub fn is_finite(&self) -> bool {
        let ok = |m: &Fmap| m.data.iter().all(|v| v.is_finite());
        self.pyramid.iter().all(ok) && self.rpn.iter().all(|r| ok(&r.obj) && ok(&r.delta))
    }
}

/// Upstream gradients for [`Detector::features_backward`].
#[derive(Debug, Clone)]
pub struct FeatureGrads {
    pub pyramid: Vec<Fmap>,
    pub rpn_hidden: Vec<Option<Fmap>>,
    pub obj: Vec<Option<Fmap>>,
    pub delta: Vec<Option<Fmap>>,
}

impl FeatureGrads {
    pub fn zeros(f: &Features) -> Self {
        let nl = f.pyramid.len();
        Self {
            pyramid: f.pyramid.iter().map(Fmap::zeros_like).collect(),
            rpn_hidden: vec![None; nl],
            obj: vec![None; nl],
            delta: vec![None; nl],
        }
    }
}

#[derive(Debug, Clone)]
pub struct RoiPass {
    pub n: usize,
    pub levels: Vec<usize>,
    taps: Vec<RoiTaps>,
    pooled: Vec<f32>,
    pub h1: Vec<f32>,
    pub h2: Vec<f32>,
    /// Class logits, background first.
    pub cls: Vec<f32>,
    pub bbox: Vec<f32>,
}
