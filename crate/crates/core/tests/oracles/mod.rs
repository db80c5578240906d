//! Independent reference implementations used to freeze and cross-check the
//! optimized routines. Deliberately naive: no log-sum-exp tricks beyond what is
//! needed for range, no shared helpers with the library.
#![allow(dead_code)]

/// Mean of `-ln softmax(l)[y]`, computed element by element.
pub fn naive_ce(logits: &[[f64; 3]], labels: &[usize]) -> f64 {
    if logits.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0;
    for (l, &y) in logits.iter().zip(labels) {
        let mut denom = 0.0;
        for v in l {
            denom += v.exp();
        }
        sum += -(l[y].exp() / denom).ln();
    }
    sum / logits.len() as f64
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for t in 0..a.len() {
        s += a[t] * b[t];
    }
    s
}

/// Triple loop over (i, j, k) of the IoU-gated supervised contrastive loss.
pub fn naive_supcon(z: &[f64], dim: usize, labels: &[usize], iou: &[f64], phi: f64, tau: f64) -> f64 {
    let n = labels.len();
    let row = |i: usize| &z[i * dim..(i + 1) * dim];
    let mut total = 0.0;
    for i in 0..n {
        let w = if iou[i] >= phi { 1.0 } else { 0.0 };
        let same = (0..n).filter(|&j| labels[j] == labels[i]).count();
        if same <= 1 {
            continue;
        }
        let mut li = 0.0;
        for j in 0..n {
            if j == i || labels[j] != labels[i] {
                continue;
            }
            let mut denom = 0.0;
            for k in 0..n {
                if k != i {
                    denom += (dot(row(i), row(k)) / tau).exp();
                }
            }
            li += -((dot(row(i), row(j)) / tau).exp() / denom).ln();
        }
        total += w * li / (same - 1) as f64;
    }
    total / n as f64
}

/// Normalizes rows naively (no zero guard: callers avoid zero rows).
pub fn naive_normalize(raw: &[f64], dim: usize) -> Vec<f64> {
    let mut out = raw.to_vec();
    for r in out.chunks_mut(dim) {
        let n = dot(r, r).sqrt();
        for v in r.iter_mut() {
            *v /= n;
        }
    }
    out
}

/// Central finite-difference gradient of `f` at `x`.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let up = f(&xp);
            xp[i] = orig - h;
            let down = f(&xp);
            xp[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Norm-wise relative error `|a - b| / max(|a|, |b|)`; 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Full sort by (key descending, index ascending), truncated to `k`.
pub fn full_sort_top_k(keys: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by(|&a, &b| keys[b].partial_cmp(&keys[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Exact IoU of integer-coordinate boxes as a reduced fraction (num, den).
pub fn rational_iou(a: [i64; 4], b: [i64; 4]) -> (i64, i64) {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0);
    let inter = iw * ih;
    let area = |r: [i64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    let union = area(a) + area(b) - inter;
    if inter == 0 || union == 0 {
        return (0, 1);
    }
    fn gcd(a: i64, b: i64) -> i64 {
        if b == 0 {
            a
        } else {
            gcd(b, a % b)
        }
    }
    let g = gcd(inter, union);
    (inter / g, union / g)
}

/// Pairwise max IoU by exhaustive enumeration over float boxes `[x0, y0, x1, y1]`.
pub fn brute_force_max_iou(anchors: &[[f64; 4]], gt: &[[f64; 4]]) -> Vec<f64> {
    anchors
        .iter()
        .map(|a| {
            let mut best = 0.0f64;
            for g in gt {
                let iw = (a[2].min(g[2]) - a[0].max(g[0])).max(0.0);
                let ih = (a[3].min(g[3]) - a[1].max(g[1])).max(0.0);
                let inter = iw * ih;
                let union = (a[2] - a[0]) * (a[3] - a[1]) + (g[2] - g[0]) * (g[3] - g[1]) - inter;
                let v = if union > 0.0 { inter / union } else { 0.0 };
                best = best.max(v);
            }
            best
        })
        .collect()
}
