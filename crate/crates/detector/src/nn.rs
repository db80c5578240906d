//! Layer kernels with explicit backward passes.
//!
//! Feature maps are single images laid out `[channels, height, width]`. Matrix
//! products go through `matrixmultiply::sgemm`.

/// `c (m x n) = a (m x k) * b (k x n)`, optionally accumulating into `c`.
///
/// `a_t` / `b_t` mean the stored buffer is the transpose of the operand.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f32], a_t: bool, b: &[f32], b_t: bool, c: &mut [f32], accumulate: bool) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm shape");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides describe row-major buffers whose lengths were checked above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fmap {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Fmap {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn zeros_like(other: &Fmap) -> Self {
        Self::zeros(other.c, other.h, other.w)
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn add_assign(&mut self, other: &Fmap) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Square-kernel convolution geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvShape {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }
}

fn im2col(x: &Fmap, s: &ConvShape, oh: usize, ow: usize) -> Vec<f32> {
    let kk = s.k * s.k;
    let p = oh * ow;
    let mut col = vec![0.0f32; s.cin * kk * p];
    for ci in 0..s.cin {
        let src = &x.data[ci * x.plane()..(ci + 1) * x.plane()];
        for ky in 0..s.k {
            for kx in 0..s.k {
                let row = (ci * kk + ky * s.k + kx) * p;
                for oy in 0..oh {
                    let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                    if iy < 0 || iy >= x.h as isize {
                        continue;
                    }
                    let src_row = &src[iy as usize * x.w..(iy as usize + 1) * x.w];
                    let dst = &mut col[row + oy * ow..row + (oy + 1) * ow];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                        if ix >= 0 && ix < x.w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(col: &[f32], s: &ConvShape, h: usize, w: usize, oh: usize, ow: usize) -> Fmap {
    let kk = s.k * s.k;
    let p = oh * ow;
    let mut dx = Fmap::zeros(s.cin, h, w);
    for ci in 0..s.cin {
        let dst = &mut dx.data[ci * h * w..(ci + 1) * h * w];
        for ky in 0..s.k {
            for kx in 0..s.k {
                let row = (ci * kk + ky * s.k + kx) * p;
                for oy in 0..oh {
                    let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &col[row + oy * ow..row + (oy + 1) * ow];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[iy as usize * w + ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Saved input columns of a convolution.
#[derive(Debug, Clone)]
pub struct ConvCache {
    col: Vec<f32>,
    in_h: usize,
    in_w: usize,
}

pub fn conv_forward(x: &Fmap, s: &ConvShape, weight: &[f32], bias: &[f32]) -> (Fmap, ConvCache) {
    assert_eq!(x.c, s.cin, "conv input channels");
    let (oh, ow) = s.out_hw(x.h, x.w);
    let p = oh * ow;
    let kdim = s.cin * s.k * s.k;
    let col = if s.k == 1 && s.stride == 1 && s.pad == 0 {
        x.data.clone()
    } else {
        im2col(x, s, oh, ow)
    };
    let mut out = Fmap::zeros(s.cout, oh, ow);
    for (co, chunk) in out.data.chunks_exact_mut(p).enumerate() {
        chunk.fill(bias[co]);
    }
    gemm(s.cout, kdim, p, weight, false, &col, false, &mut out.data, true);
    (
        out,
        ConvCache {
            col,
            in_h: x.h,
            in_w: x.w,
        },
    )
}

/// Accumulates weight and bias gradients; returns the input gradient if requested.
pub fn conv_backward(
    dout: &Fmap,
    s: &ConvShape,
    weight: &[f32],
    cache: &ConvCache,
    dweight: &mut [f32],
    dbias: &mut [f32],
    need_dx: bool,
) -> Option<Fmap> {
    let p = dout.plane();
    let kdim = s.cin * s.k * s.k;
    for (co, chunk) in dout.data.chunks_exact(p).enumerate() {
        dbias[co] += chunk.iter().sum::<f32>();
    }
    gemm(s.cout, p, kdim, &dout.data, false, &cache.col, true, dweight, true);
    if !need_dx {
        return None;
    }
    let mut dcol = vec![0.0f32; kdim * p];
    gemm(kdim, s.cout, p, weight, true, &dout.data, false, &mut dcol, false);
    if s.k == 1 && s.stride == 1 && s.pad == 0 {
        return Some(Fmap {
            c: s.cin,
            h: cache.in_h,
            w: cache.in_w,
            data: dcol,
        });
    }
    Some(col2im(&dcol, s, cache.in_h, cache.in_w, dout.h, dout.w))
}

pub fn relu_inplace(x: &mut [f32]) {
    for v in x.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes gradient entries where the forward activation was clamped.
pub fn relu_backward(activated: &[f32], grad: &mut [f32]) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &Fmap) -> Fmap {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Fmap::zeros(x.c, h, w);
    for c in 0..x.c {
        for y in 0..h {
            for xx in 0..w {
                out.data[(c * h + y) * w + xx] = x.data[(c * x.h + y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(dout: &Fmap) -> Fmap {
    let mut dx = Fmap::zeros(dout.c, dout.h / 2, dout.w / 2);
    for c in 0..dout.c {
        for y in 0..dout.h {
            for xx in 0..dout.w {
                dx.data[(c * dx.h + y / 2) * dx.w + xx / 2] += dout.data[(c * dout.h + y) * dout.w + xx];
            }
        }
    }
    dx
}

/// `y (n x out) = x (n x in) * w^T + b` with `w` stored `out x in`.
pub fn linear_forward(x: &[f32], n: usize, d_in: usize, w: &[f32], b: &[f32], d_out: usize) -> Vec<f32> {
    let mut y = Vec::with_capacity(n * d_out);
    for _ in 0..n {
        y.extend_from_slice(&b[..d_out]);
    }
    gemm(n, d_in, d_out, x, false, w, true, &mut y, true);
    y
}

/// Accumulates `dw`, `db`; returns `dx` when requested.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    x: &[f32],
    dy: &[f32],
    n: usize,
    d_in: usize,
    d_out: usize,
    w: &[f32],
    dw: &mut [f32],
    db: &mut [f32],
    need_dx: bool,
) -> Option<Vec<f32>> {
    for row in dy.chunks_exact(d_out) {
        for (g, v) in db.iter_mut().zip(row) {
            *g += v;
        }
    }
    gemm(d_out, n, d_in, dy, true, x, false, dw, true);
    if !need_dx {
        return None;
    }
    let mut dx = vec![0.0f32; n * d_in];
    gemm(n, d_out, d_in, dy, false, w, false, &mut dx, false);
    Some(dx)
}

/// Bilinear region pooling to a fixed `bins x bins` grid, `samples^2` taps per bin.
///
/// The tap table is kept so backward is an exact transpose of forward.
#[derive(Debug, Clone)]
pub struct RoiAlign {
    pub bins: usize,
    pub samples: usize,
}

/// Interpolation taps of one region: for each bin, `(plane offset, weight)` pairs.
#[derive(Debug, Clone)]
pub struct RoiTaps {
    taps: Vec<(u32, f32)>,
    per_bin: usize,
}

impl RoiAlign {
    pub fn out_len(&self, channels: usize) -> usize {
        channels * self.bins * self.bins
    }

    /// Taps for `bbox` (image coordinates) on a map of stride `stride`.
    pub fn taps(&self, bbox: [f64; 4], stride: f64, h: usize, w: usize) -> RoiTaps {
        let [x0, y0, x1, y1] = bbox.map(|v| v / stride);
        let bw = ((x1 - x0).max(1.0 / stride)) / self.bins as f64;
        let bh = ((y1 - y0).max(1.0 / stride)) / self.bins as f64;
        let per_bin = self.samples * self.samples * 4;
        let norm = 1.0 / (self.samples * self.samples) as f64;
        let mut taps = Vec::with_capacity(self.bins * self.bins * per_bin);
        for by in 0..self.bins {
            for bx in 0..self.bins {
                for sy in 0..self.samples {
                    for sx in 0..self.samples {
                        let y = y0 + bh * (by as f64 + (sy as f64 + 0.5) / self.samples as f64) - 0.5;
                        let x = x0 + bw * (bx as f64 + (sx as f64 + 0.5) / self.samples as f64) - 0.5;
                        push_bilinear(&mut taps, x, y, h, w, norm);
                    }
                }
            }
        }
        RoiTaps { taps, per_bin }
    }

    pub fn forward(&self, x: &Fmap, taps: &RoiTaps, out: &mut [f32]) {
        let nb = self.bins * self.bins;
        let plane = x.plane();
        for c in 0..x.c {
            let src = &x.data[c * plane..(c + 1) * plane];
            for b in 0..nb {
                let t = &taps.taps[b * taps.per_bin..(b + 1) * taps.per_bin];
                out[c * nb + b] = t.iter().map(|&(i, wt)| src[i as usize] * wt).sum();
            }
        }
    }

    pub fn backward(&self, dout: &[f32], taps: &RoiTaps, dx: &mut Fmap) {
        let nb = self.bins * self.bins;
        let plane = dx.plane();
        for c in 0..dx.c {
            let dst = &mut dx.data[c * plane..(c + 1) * plane];
            for b in 0..nb {
                let g = dout[c * nb + b];
                if g == 0.0 {
                    continue;
                }
                for &(i, wt) in &taps.taps[b * taps.per_bin..(b + 1) * taps.per_bin] {
                    dst[i as usize] += g * wt;
                }
            }
        }
    }
}

/// Four bilinear corner taps; samples outside the map contribute zero weight.
fn push_bilinear(taps: &mut Vec<(u32, f32)>, x: f64, y: f64, h: usize, w: usize, scale: f64) {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        taps.extend([(0, 0.0); 4]);
        return;
    }
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ly, lx) = (y - y0 as f64, x - x0 as f64);
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    taps.extend([
        ((y0 * w + x0) as u32, (hy * hx * scale) as f32),
        ((y0 * w + x1) as u32, (hy * lx * scale) as f32),
        ((y1 * w + x0) as u32, (ly * hx * scale) as f32),
        ((y1 * w + x1) as u32, (ly * lx * scale) as f32),
    ]);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Fmap, s: &ConvShape, w: &[f32], b: &[f32]) -> Fmap {
        let (oh, ow) = s.out_hw(x.h, x.w);
        let mut out = Fmap::zeros(s.cout, oh, ow);
        for co in 0..s.cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[co];
                    for ci in 0..s.cin {
                        for ky in 0..s.k {
                            for kx in 0..s.k {
                                let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                                let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                                if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                    continue;
                                }
                                acc += w[((co * s.cin + ci) * s.k + ky) * s.k + kx]
                                    * x.data[(ci * x.h + iy as usize) * x.w + ix as usize];
                            }
                        }
                    }
                    out.data[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    fn ramp(n: usize, scale: f32) -> Vec<f32> {
        (0..n).map(|i| ((i * 37 % 23) as f32 - 11.0) * scale).collect()
    }

    #[test]
    fn conv_matches_direct_loops() {
        for s in [
            ConvShape {
                cin: 3,
                cout: 4,
                k: 3,
                stride: 2,
                pad: 1,
            },
            ConvShape {
                cin: 2,
                cout: 5,
                k: 3,
                stride: 1,
                pad: 1,
            },
            ConvShape {
                cin: 4,
                cout: 3,
                k: 1,
                stride: 1,
                pad: 0,
            },
        ] {
            let x = Fmap {
                c: s.cin,
                h: 7,
                w: 6,
                data: ramp(s.cin * 42, 0.1),
            };
            let w = ramp(s.weight_len(), 0.05);
            let b = ramp(s.cout, 0.2);
            let (got, _) = conv_forward(&x, &s, &w, &b);
            let want = naive_conv(&x, &s, &w, &b);
            assert_eq!((got.c, got.h, got.w), (want.c, want.h, want.w));
            for (a, b) in got.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let x = Fmap {
            c: 2,
            h: 3,
            w: 2,
            data: ramp(12, 0.3),
        };
        let g = Fmap {
            c: 2,
            h: 6,
            w: 4,
            data: ramp(48, 0.1),
        };
        let lhs: f32 = upsample2(&x).data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs: f32 = x
            .data
            .iter()
            .zip(&upsample2_backward(&g).data)
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }

    #[test]
    fn roi_align_of_constant_map_is_constant() {
        let x = Fmap {
            c: 1,
            h: 8,
            w: 8,
            data: vec![2.5; 64],
        };
        let ra = RoiAlign { bins: 3, samples: 2 };
        let taps = ra.taps([4.0, 4.0, 20.0, 28.0], 4.0, 8, 8);
        let mut out = vec![0.0; 9];
        ra.forward(&x, &taps, &mut out);
        assert!(out.iter().all(|v| (v - 2.5).abs() < 1e-5));
    }
}
