//! Objectness losses: ternary cross-entropy, IoU-gated supervised contrastive
//! loss over normalized embeddings, the projection head that produces those
//! embeddings, and total-loss composition.
//!
//! All reductions run in ascending index order (`i` outer, `k` inner) so results
//! are bit-reproducible for identical inputs.

use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ternary_rpn::TernaryLabel;

const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("embedding row {row} is not unit norm (norm {norm})")]
    NotNormalized { row: usize, norm: f64 },
    #[error("embedding is not marked normalized")]
    UnnormalizedEmbedding,
    #[error("contrastive loss needs at least one proposal")]
    EmptyBatch,
    #[error("length mismatch: {what} has {got} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("loss component `{0}` is not finite")]
    NonFinite(&'static str),
    #[error("invalid loss weights: {0}")]
    BadWeights(String),
}

/// Balancing weights and contrastive hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the RoI-side contrastive loss in the total.
    pub alpha: f64,
    /// Weight of the objectness contrastive loss inside the objectness loss.
    pub lambda: f64,
    /// IoU cutoff below which a proposal's contrastive term is dropped.
    pub phi: f64,
    /// Temperature.
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            lambda: 0.5,
            phi: 0.7,
            tau: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(LossError::BadWeights(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(LossError::BadWeights(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(LossError::BadWeights(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if !(0.0..=1.0).contains(&self.phi) {
            return Err(LossError::BadWeights(format!(
                "phi must lie in [0, 1], got {}",
                self.phi
            )));
        }
        Ok(())
    }
}

/// Row-major `n x dim` embedding matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveEmbedding {
    dim: usize,
    data: Vec<f64>,
    normalized: bool,
}

impl ContrastiveEmbedding {
    pub fn new(data: Vec<f64>, dim: usize, normalized: bool) -> Result<Self, LossError> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(LossError::LengthMismatch {
                what: "embedding data",
                got: data.len(),
                expected: dim,
            });
        }
        Ok(Self { dim, data, normalized })
    }

    /// L2-normalizes every row. Zero rows become the first basis vector; their
    /// indices are returned so callers can report them.
    pub fn normalized_from_raw(raw: &[f64], dim: usize) -> Result<(Self, Vec<usize>), LossError> {
        if dim == 0 || !raw.len().is_multiple_of(dim) {
            return Err(LossError::LengthMismatch {
                what: "embedding data",
                got: raw.len(),
                expected: dim,
            });
        }
        let n = normalize_rows(raw, dim);
        Ok((
            Self {
                dim,
                data: n.unit,
                normalized: true,
            },
            n.zero_rows,
        ))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn cosine(&self, i: usize, j: usize) -> f64 {
        dot(self.row(i), self.row(j))
    }

    fn check_unit(&self) -> Result<(), LossError> {
        if !self.normalized {
            return Err(LossError::UnnormalizedEmbedding);
        }
        for i in 0..self.len() {
            let norm = dot(self.row(i), self.row(i)).sqrt();
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(LossError::NotNormalized { row: i, norm });
            }
        }
        Ok(())
    }
}

/// Output of [`normalize_rows`]: unit rows, the original norms, and zero rows.
#[derive(Debug, Clone)]
pub struct Normalized<T> {
    pub unit: Vec<T>,
    pub norms: Vec<T>,
    pub zero_rows: Vec<usize>,
}

pub fn normalize_rows<T: Float>(raw: &[T], dim: usize) -> Normalized<T> {
    let n = raw.len() / dim;
    let mut unit = vec![T::zero(); raw.len()];
    let mut norms = Vec::with_capacity(n);
    let mut zero_rows = Vec::new();
    for i in 0..n {
        let r = &raw[i * dim..(i + 1) * dim];
        let norm = r.iter().fold(T::zero(), |acc, &v| acc + v * v).sqrt();
        let out = &mut unit[i * dim..(i + 1) * dim];
        if norm > T::zero() && norm.is_finite() {
            for (o, &v) in out.iter_mut().zip(r) {
                *o = v / norm;
            }
        } else {
            out[0] = T::one();
            zero_rows.push(i);
        }
        norms.push(norm);
    }
    Normalized { unit, norms, zero_rows }
}

/// Backpropagates through [`normalize_rows`]. Zero rows receive no gradient.
pub fn normalize_rows_backward<T: Float>(n: &Normalized<T>, grad_unit: &[T], dim: usize) -> Vec<T> {
    let mut out = vec![T::zero(); grad_unit.len()];
    for (i, &norm) in n.norms.iter().enumerate() {
        if !(norm > T::zero() && norm.is_finite()) {
            continue;
        }
        let u = &n.unit[i * dim..(i + 1) * dim];
        let g = &grad_unit[i * dim..(i + 1) * dim];
        let proj = u.iter().zip(g).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
        for ((o, &gi), &ui) in out[i * dim..(i + 1) * dim].iter_mut().zip(g).zip(u) {
            *o = (gi - ui * proj) / norm;
        }
    }
    out
}

/// Two-layer MLP encoder (`d_in -> hidden -> d_out`, ReLU in between) whose
/// output is L2-normalized into a contrastive embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead<T> {
    pub d_in: usize,
    pub hidden: usize,
    pub d_out: usize,
    /// `hidden x d_in`, row-major.
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    /// `d_out x hidden`, row-major.
    pub w2: Vec<T>,
    pub b2: Vec<T>,
}

/// Intermediate values of a projection forward pass, kept for backward.
#[derive(Debug, Clone)]
pub struct ProjectionPass<T> {
    pub n: usize,
    pub hidden_act: Vec<T>,
    pub raw: Vec<T>,
    pub normalized: Normalized<T>,
}

impl<T: Float> ProjectionHead<T> {
    pub fn zeros(d_in: usize, hidden: usize, d_out: usize) -> Self {
        Self {
            d_in,
            hidden,
            d_out,
            w1: vec![T::zero(); hidden * d_in],
            b1: vec![T::zero(); hidden],
            w2: vec![T::zero(); d_out * hidden],
            b2: vec![T::zero(); d_out],
        }
    }

    /// He-normal initialisation from a seed; biases start at zero.
    pub fn seeded(d_in: usize, hidden: usize, d_out: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut head = Self::zeros(d_in, hidden, d_out);
        let s1 = (2.0 / d_in as f64).sqrt();
        let s2 = (1.0 / hidden as f64).sqrt();
        for w in head.w1.iter_mut() {
            let v: f64 = StandardNormal.sample(&mut rng);
            *w = T::from(v * s1).unwrap();
        }
        for w in head.w2.iter_mut() {
            let v: f64 = StandardNormal.sample(&mut rng);
            *w = T::from(v * s2).unwrap();
        }
        head
    }

    pub fn forward(&self, x: &[T], n: usize) -> ProjectionPass<T> {
        assert_eq!(x.len(), n * self.d_in, "projection input shape");
        let mut hidden_act = vec![T::zero(); n * self.hidden];
        for r in 0..n {
            let xr = &x[r * self.d_in..(r + 1) * self.d_in];
            for h in 0..self.hidden {
                let w = &self.w1[h * self.d_in..(h + 1) * self.d_in];
                let v = xr.iter().zip(w).fold(self.b1[h], |acc, (&a, &b)| acc + a * b);
                hidden_act[r * self.hidden + h] = v.max(T::zero());
            }
        }
        let mut raw = vec![T::zero(); n * self.d_out];
        for r in 0..n {
            let hr = &hidden_act[r * self.hidden..(r + 1) * self.hidden];
            for o in 0..self.d_out {
                let w = &self.w2[o * self.hidden..(o + 1) * self.hidden];
                raw[r * self.d_out + o] = hr.iter().zip(w).fold(self.b2[o], |acc, (&a, &b)| acc + a * b);
            }
        }
        let normalized = normalize_rows(&raw, self.d_out);
        ProjectionPass {
            n,
            hidden_act,
            raw,
            normalized,
        }
    }

    /// Gradients of the head parameters and of the input, given the gradient with
    /// respect to the normalized output.
    pub fn backward(&self, x: &[T], pass: &ProjectionPass<T>, grad_unit: &[T]) -> (Self, Vec<T>) {
        let n = pass.n;
        let grad_raw = normalize_rows_backward(&pass.normalized, grad_unit, self.d_out);
        let mut g = Self::zeros(self.d_in, self.hidden, self.d_out);
        let mut grad_hidden = vec![T::zero(); n * self.hidden];
        for r in 0..n {
            let hr = &pass.hidden_act[r * self.hidden..(r + 1) * self.hidden];
            let gr = &grad_raw[r * self.d_out..(r + 1) * self.d_out];
            let gh = &mut grad_hidden[r * self.hidden..(r + 1) * self.hidden];
            for (o, &go) in gr.iter().enumerate() {
                if go == T::zero() {
                    continue;
                }
                g.b2[o] = g.b2[o] + go;
                let w = &self.w2[o * self.hidden..(o + 1) * self.hidden];
                let gw = &mut g.w2[o * self.hidden..(o + 1) * self.hidden];
                for h in 0..self.hidden {
                    gw[h] = gw[h] + go * hr[h];
                    gh[h] = gh[h] + go * w[h];
                }
            }
            for (h, v) in gh.iter_mut().enumerate() {
                if hr[h] <= T::zero() {
                    *v = T::zero();
                }
            }
        }
        let mut grad_x = vec![T::zero(); n * self.d_in];
        for r in 0..n {
            let xr = &x[r * self.d_in..(r + 1) * self.d_in];
            let gh = &grad_hidden[r * self.hidden..(r + 1) * self.hidden];
            let gx = &mut grad_x[r * self.d_in..(r + 1) * self.d_in];
            for (h, &gv) in gh.iter().enumerate() {
                if gv == T::zero() {
                    continue;
                }
                g.b1[h] = g.b1[h] + gv;
                let w = &self.w1[h * self.d_in..(h + 1) * self.d_in];
                let gw = &mut g.w1[h * self.d_in..(h + 1) * self.d_in];
                for i in 0..self.d_in {
                    gw[i] = gw[i] + gv * xr[i];
                    gx[i] = gx[i] + gv * w[i];
                }
            }
        }
        (g, grad_x)
    }
}

/// Encodes `n` feature rows and L2-normalizes the result.
///
/// Returns the embedding and the rows that were zero before normalization (these
/// were replaced by the first basis vector).
pub fn project_embed(
    head: &ProjectionHead<f64>,
    features: &[f64],
    n: usize,
) -> Result<(ContrastiveEmbedding, Vec<usize>), LossError> {
    if features.len() != n * head.d_in {
        return Err(LossError::LengthMismatch {
            what: "features",
            got: features.len(),
            expected: n * head.d_in,
        });
    }
    let pass = head.forward(features, n);
    let zero_rows = pass.normalized.zero_rows.clone();
    Ok((
        ContrastiveEmbedding::new(pass.normalized.unit, head.d_out, true)?,
        zero_rows,
    ))
}

/// Mean cross-entropy of three-way objectness logits. Empty input gives 0.
pub fn ternary_ce(logits: &[[f64; 3]], labels: &[TernaryLabel]) -> Result<f64, LossError> {
    ternary_ce_with_grad(logits, labels).map(|(l, _)| l)
}

/// [`ternary_ce`] and its gradient with respect to the logits.
pub fn ternary_ce_with_grad(logits: &[[f64; 3]], labels: &[TernaryLabel]) -> Result<(f64, Vec<[f64; 3]>), LossError> {
    if logits.len() != labels.len() {
        return Err(LossError::LengthMismatch {
            what: "labels",
            got: labels.len(),
            expected: logits.len(),
        });
    }
    let n = logits.len();
    if n == 0 {
        return Ok((0.0, Vec::new()));
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n);
    for (l, &y) in logits.iter().zip(labels) {
        let m = l[0].max(l[1]).max(l[2]);
        let e = l.map(|v| (v - m).exp());
        let s = e[0] + e[1] + e[2];
        let lse = m + s.ln();
        loss += lse - l[y.index()];
        let mut g = e.map(|v| v / s * inv_n);
        g[y.index()] -= inv_n;
        grad.push(g);
    }
    Ok((loss * inv_n, grad))
}

/// Contrastive weight of a proposal: 1 when its IoU reaches `phi`, else 0.
pub fn contrast_weight(iou_gt: f64, phi: f64) -> f64 {
    if iou_gt >= phi {
        1.0
    } else {
        0.0
    }
}

/// IoU-gated supervised contrastive loss over unit embeddings with integer
/// class labels (ternary objectness labels, or RoI categories).
///
/// For every proposal `i` with weight 1 and at least one other proposal of the
/// same label, the term is the mean over those partners `j` of
/// `-log(exp(z_i.z_j / tau) / sum_{k != i} exp(z_i.z_k / tau))`. The result is
/// the sum of terms divided by the total proposal count. Proposals without a
/// same-label partner contribute nothing.
pub fn supcon_loss(
    emb: &ContrastiveEmbedding,
    labels: &[usize],
    iou_gt: &[f64],
    phi: f64,
    tau: f64,
) -> Result<f64, LossError> {
    supcon_impl(emb, labels, iou_gt, phi, tau, false).map(|(l, _)| l)
}

/// [`supcon_loss`] and its gradient with respect to the unit embeddings.
pub fn supcon_loss_with_grad(
    emb: &ContrastiveEmbedding,
    labels: &[usize],
    iou_gt: &[f64],
    phi: f64,
    tau: f64,
) -> Result<(f64, Vec<f64>), LossError> {
    supcon_impl(emb, labels, iou_gt, phi, tau, true)
}

fn supcon_impl(
    emb: &ContrastiveEmbedding,
    labels: &[usize],
    iou_gt: &[f64],
    phi: f64,
    tau: f64,
    want_grad: bool,
) -> Result<(f64, Vec<f64>), LossError> {
    let n = emb.len();
    if n == 0 {
        return Err(LossError::EmptyBatch);
    }
    for (what, got) in [("labels", labels.len()), ("iou_gt", iou_gt.len())] {
        if got != n {
            return Err(LossError::LengthMismatch { what, got, expected: n });
        }
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(LossError::BadWeights(format!("tau must be > 0, got {tau}")));
    }
    emb.check_unit()?;

    let d = emb.dim;
    let z = &emb.data;
    let max_label = labels.iter().copied().max().unwrap_or(0);
    let mut counts = vec![0usize; max_label + 1];
    for &y in labels {
        counts[y] += 1;
    }

    let inv_n = 1.0 / n as f64;
    let inv_tau = 1.0 / tau;
    let mut total = 0.0;
    let mut grad = if want_grad { vec![0.0; n * d] } else { Vec::new() };
    let mut s = vec![0.0; n];
    for i in 0..n {
        let w = contrast_weight(iou_gt[i], phi);
        let partners = counts[labels[i]] - 1;
        if w == 0.0 || partners == 0 {
            continue;
        }
        let zi = &z[i * d..(i + 1) * d];
        let mut m = f64::NEG_INFINITY;
        for k in 0..n {
            if k != i {
                s[k] = dot(zi, &z[k * d..(k + 1) * d]) * inv_tau;
                m = m.max(s[k]);
            }
        }
        let mut denom = 0.0;
        let mut pos = 0.0;
        for k in 0..n {
            if k != i {
                denom += (s[k] - m).exp();
                if labels[k] == labels[i] {
                    pos += s[k];
                }
            }
        }
        let lse = m + denom.ln();
        let inv_p = 1.0 / partners as f64;
        total += w * (lse - pos * inv_p);

        if want_grad {
            let scale = w * inv_n * inv_tau;
            for k in 0..n {
                if k == i {
                    continue;
                }
                let mut g = (s[k] - lse).exp();
                if labels[k] == labels[i] {
                    g -= inv_p;
                }
                let g = g * scale;
                for t in 0..d {
                    grad[i * d + t] += g * z[k * d + t];
                    grad[k * d + t] += g * z[i * d + t];
                }
            }
        }
    }
    Ok((total * inv_n, grad))
}

/// Objectness contrastive loss: [`supcon_loss`] over ternary labels.
pub fn tcon_loss(
    emb: &ContrastiveEmbedding,
    labels: &[TernaryLabel],
    iou_gt: &[f64],
    weights: &LossWeights,
) -> Result<f64, LossError> {
    let ids: Vec<usize> = labels.iter().map(|l| l.index()).collect();
    supcon_loss(emb, &ids, iou_gt, weights.phi, weights.tau)
}

/// Loss value plus gradient with respect to the raw (pre-normalization) embeddings.
#[derive(Debug, Clone)]
pub struct RawContrastive {
    pub loss: f64,
    pub grad_raw: Vec<f64>,
    pub zero_rows: Vec<usize>,
}

/// Normalizes raw embeddings then evaluates [`supcon_loss_with_grad`], returning
/// the gradient with respect to the raw rows.
pub fn supcon_from_raw(
    raw: &[f64],
    dim: usize,
    labels: &[usize],
    iou_gt: &[f64],
    phi: f64,
    tau: f64,
) -> Result<RawContrastive, LossError> {
    if dim == 0 || !raw.len().is_multiple_of(dim) {
        return Err(LossError::LengthMismatch {
            what: "embedding data",
            got: raw.len(),
            expected: dim,
        });
    }
    let norm = normalize_rows(raw, dim);
    let emb = ContrastiveEmbedding::new(norm.unit.clone(), dim, true)?;
    let (loss, grad_unit) = supcon_loss_with_grad(&emb, labels, iou_gt, phi, tau)?;
    let grad_raw = normalize_rows_backward(&norm, &grad_unit, dim);
    Ok(RawContrastive {
        loss,
        grad_raw,
        zero_rows: norm.zero_rows,
    })
}

/// The five terms of the total training loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    /// RoI classification.
    pub cls: f64,
    /// Box regression (RPN and RoI heads).
    pub bbox: f64,
    /// Ternary objectness cross-entropy.
    pub obj: f64,
    /// Objectness contrastive loss.
    pub tcon: f64,
    /// RoI-feature contrastive loss.
    pub contra: f64,
}

impl LossComponents {
    fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("cls", self.cls),
            ("bbox", self.bbox),
            ("obj", self.obj),
            ("tcon", self.tcon),
            ("contra", self.contra),
        ]
    }
}

/// `cls + bbox + (obj + lambda * tcon) + alpha * contra`.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<f64, LossError> {
    for (name, v) in c.named() {
        if !v.is_finite() {
            return Err(LossError::NonFinite(name));
        }
    }
    Ok(c.cls + c.bbox + (c.obj + w.lambda * c.tcon) + w.alpha * c.contra)
}

/// Partial derivatives of [`total_loss`] with respect to each component.
pub fn total_loss_partials(w: &LossWeights) -> LossComponents {
    LossComponents {
        cls: 1.0,
        bbox: 1.0,
        obj: 1.0,
        tcon: w.lambda,
        contra: w.alpha,
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn ce_examples() {
        let l = ternary_ce(&[[10.0, -10.0, -10.0]], &[TernaryLabel::NonObject]).unwrap();
        assert!(l < 1e-4);
        for y in TernaryLabel::ALL {
            let l = ternary_ce(&[[0.0, 0.0, 0.0]], &[y]).unwrap();
            assert!((l - 3f64.ln()).abs() < 1e-12);
        }
        assert_eq!(ternary_ce(&[], &[]).unwrap(), 0.0);
        assert!(ternary_ce(&[[0.0; 3]], &[]).is_err());
    }

    #[test]
    fn weight_examples() {
        assert_eq!(contrast_weight(0.9, 0.7), 1.0);
        assert_eq!(contrast_weight(0.5, 0.7), 0.0);
        assert_eq!(contrast_weight(0.7, 0.7), 1.0);
    }

    #[test]
    fn supcon_two_identical() {
        let e = unit(&[1.0, 2.0, 3.0]);
        let emb = ContrastiveEmbedding::new([e.clone(), e].concat(), 3, true).unwrap();
        let l = supcon_loss(&emb, &[1, 1], &[1.0, 1.0], 0.7, 0.2).unwrap();
        assert!(l.abs() < 1e-12);
        let l = supcon_loss(&emb, &[1, 0], &[1.0, 1.0], 0.7, 0.2).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn supcon_three_point_fixture() {
        let emb = ContrastiveEmbedding::new(vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0], 2, true).unwrap();
        let e = std::f64::consts::E;
        let expected = (1.0 / 3.0) * 2.0 * -(e / (e + 1.0)).ln();
        let l = supcon_loss(&emb, &[1, 1, 0], &[0.9, 0.8, 0.1], 0.7, 1.0).unwrap();
        assert!((l - expected).abs() < 1e-14);
        // second proposal under the cutoff: only the first term survives
        let l = supcon_loss(&emb, &[1, 1, 0], &[0.9, 0.5, 0.1], 0.7, 1.0).unwrap();
        assert!((l - expected / 2.0).abs() < 1e-14);
    }

    #[test]
    fn supcon_rejects_unnormalized() {
        let emb = ContrastiveEmbedding::new(vec![2.0, 0.0, 0.0, 1.0], 2, true).unwrap();
        assert!(matches!(
            supcon_loss(&emb, &[0, 0], &[1.0, 1.0], 0.7, 0.2),
            Err(LossError::NotNormalized { row: 0, .. })
        ));
        let emb = ContrastiveEmbedding::new(vec![1.0, 0.0], 2, false).unwrap();
        assert_eq!(
            supcon_loss(&emb, &[0], &[1.0], 0.7, 0.2),
            Err(LossError::UnnormalizedEmbedding)
        );
        let empty = ContrastiveEmbedding::new(vec![], 2, true).unwrap();
        assert_eq!(supcon_loss(&empty, &[], &[], 0.7, 0.2), Err(LossError::EmptyBatch));
    }

    #[test]
    fn normalization_guards_zero_rows() {
        let (emb, zeros) = ContrastiveEmbedding::normalized_from_raw(&[0.0, 0.0, 3.0, 4.0], 2).unwrap();
        assert_eq!(zeros, vec![0]);
        assert_eq!(emb.row(0), &[1.0, 0.0]);
        assert_eq!(emb.row(1), &[0.6, 0.8]);
        let (emb, zeros) = ContrastiveEmbedding::normalized_from_raw(&[0.6, 0.8], 2).unwrap();
        assert!(zeros.is_empty());
        assert_eq!(emb.row(0), &[0.6, 0.8]);
    }

    #[test]
    fn projection_is_unit_and_deterministic() {
        let head = ProjectionHead::<f64>::seeded(6, 8, 4, 7);
        let x = [0.3, -1.0, 2.0, 0.5, 0.1, -0.2, 0.3, -1.0, 2.0, 0.5, 0.1, -0.2];
        let (emb, zeros) = project_embed(&head, &x, 2).unwrap();
        assert!(zeros.is_empty());
        for i in 0..2 {
            let n = emb.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        assert!((emb.cosine(0, 1) - 1.0).abs() < 1e-12);
        assert_eq!(ProjectionHead::<f64>::seeded(6, 8, 4, 7), head);
    }

    #[test]
    fn projection_zero_output_is_guarded() {
        let head = ProjectionHead::<f64>::zeros(3, 4, 2);
        let (emb, zeros) = project_embed(&head, &[1.0, 2.0, 3.0], 1).unwrap();
        assert_eq!(zeros, vec![0]);
        assert_eq!(emb.row(0), &[1.0, 0.0]);
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert_eq!(total_loss(&LossComponents::default(), &w).unwrap(), 0.0);
        let ones = LossComponents {
            cls: 1.0,
            bbox: 1.0,
            obj: 1.0,
            tcon: 1.0,
            contra: 1.0,
        };
        assert_eq!(total_loss(&ones, &w).unwrap(), 4.0);
        let bad = LossComponents { tcon: f64::NAN, ..ones };
        assert_eq!(total_loss(&bad, &w), Err(LossError::NonFinite("tcon")));
        let no_roi = LossWeights { alpha: 0.0, ..w };
        assert_eq!(total_loss_partials(&no_roi).contra, 0.0);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights {
            tau: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(LossWeights {
            phi: 1.5,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(LossWeights {
            alpha: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
