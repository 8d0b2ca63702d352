//! Attentive metric-learning losses and prototype updates.
//!
//! Three losses shape the embedding space around a pair of learnable class
//! prototypes:
//!
//! * triplet-center: per-sample hinge on
//!   `Σ_j a_j[(e_j - p_j)² - (e_j - n_j)²] + margin·mean(a)`, where `p` is
//!   the sample's own prototype and `n` the opposite one;
//! * center: `Σ_j a_j (e_j - p_j)²`;
//! * cosine: `-Σ_j a_j [e_j p_j / (|e||p|) - e_j n_j / (|e||n|)]`, offset by `+2`.
//!
//! Each returns the closed-form gradient with respect to the embeddings and
//! the attention weights, and a prototype delta. The triplet and cosine
//! deltas are normalized by their active-set sizes `k` and `k'` rather than
//! the batch size; they are the exact gradients of the same loss restricted
//! to (and averaged over) the active set.
//!
//! With every attention weight set to one the losses reduce to their
//! non-attentive forms.

use thiserror::Error;

use crate::imaging::Label;

#[derive(Debug, Error, PartialEq)]
pub enum DmlError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("vector with norm below 1e-12 in cosine loss")]
    ZeroNormVector,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("inconsistent batch: {0}")]
    InconsistentBatch(String),
    #[error("non-finite prototype delta")]
    NonFiniteDelta,
    #[error("invalid hyperparameter: {0}")]
    InvalidHyper(String),
}

pub type Result<T> = std::result::Result<T, DmlError>;

const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypePair {
    pub flame: Vec<f64>,
    pub noflame: Vec<f64>,
}

impl PrototypePair {
    pub fn new(flame: Vec<f64>, noflame: Vec<f64>) -> Result<Self> {
        if flame.len() != noflame.len() || flame.is_empty() {
            return Err(DmlError::ShapeMismatch(format!(
                "prototype lengths {} / {}",
                flame.len(),
                noflame.len()
            )));
        }
        if flame.iter().chain(&noflame).any(|v| !v.is_finite()) {
            return Err(DmlError::NonFiniteDelta);
        }
        Ok(Self { flame, noflame })
    }

    pub fn dim(&self) -> usize {
        self.flame.len()
    }

    pub fn get(&self, label: Label) -> &[f64] {
        match label {
            Label::Flame => &self.flame,
            Label::NoFlame => &self.noflame,
        }
    }

    pub fn get_mut(&mut self, label: Label) -> &mut Vec<f64> {
        match label {
            Label::Flame => &mut self.flame,
            Label::NoFlame => &mut self.noflame,
        }
    }

    /// Per-class mean embedding. `None` if either class is absent.
    pub fn from_class_means(embeddings: &[Vec<f64>], labels: &[Label]) -> Option<Self> {
        let dim = embeddings.first()?.len();
        let mut sums = [vec![0.0; dim], vec![0.0; dim]];
        let mut counts = [0usize; 2];
        for (e, &l) in embeddings.iter().zip(labels) {
            counts[l.index()] += 1;
            for (s, v) in sums[l.index()].iter_mut().zip(e) {
                *s += v;
            }
        }
        if counts.contains(&0) {
            return None;
        }
        let [noflame, flame] = sums;
        let mean = |v: Vec<f64>, n: usize| v.into_iter().map(|s| s / n as f64).collect();
        Some(Self {
            flame: mean(flame, counts[1]),
            noflame: mean(noflame, counts[0]),
        })
    }

    pub fn norms(&self) -> (f64, f64) {
        (norm(&self.flame), norm(&self.noflame))
    }
}

/// Per-sample attention weights for each loss, every entry in `(0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub tl: Vec<f64>,
    pub cl: Vec<f64>,
    pub cos: Vec<f64>,
}

impl AttentionWeights {
    pub fn ones(dim: usize) -> Self {
        Self {
            tl: vec![1.0; dim],
            cl: vec![1.0; dim],
            cos: vec![1.0; dim],
        }
    }
}

pub use crate::model::attention_weights;

#[derive(Debug, Clone, PartialEq)]
pub struct DmlHyper {
    pub margin: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub lambda: f64,
    pub proto_lr_tl: f64,
    pub proto_lr_cl: f64,
    pub proto_lr_cos: f64,
}

impl Default for DmlHyper {
    fn default() -> Self {
        Self {
            margin: 1.0,
            gamma1: 0.01,
            gamma2: 0.0001,
            gamma3: 0.01,
            lambda: 1.0,
            proto_lr_tl: 0.5,
            proto_lr_cl: 0.5,
            proto_lr_cos: 0.1,
        }
    }
}

impl DmlHyper {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("margin", self.margin),
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
            ("gamma3", self.gamma3),
            ("lambda", self.lambda),
        ];
        for (name, v) in nonneg {
            if !v.is_finite() || v < 0.0 {
                return Err(DmlError::InvalidHyper(format!("{name}={v}")));
            }
        }
        let pos = [
            ("proto_lr_tl", self.proto_lr_tl),
            ("proto_lr_cl", self.proto_lr_cl),
            ("proto_lr_cos", self.proto_lr_cos),
        ];
        for (name, v) in pos {
            if !v.is_finite() || v <= 0.0 {
                return Err(DmlError::InvalidHyper(format!("{name}={v}")));
            }
        }
        Ok(())
    }

    /// All metric-learning weights and the reconstruction weight are zero.
    pub fn is_plain_classifier(&self) -> bool {
        self.gamma1 == 0.0 && self.gamma2 == 0.0 && self.gamma3 == 0.0 && self.lambda == 0.0
    }
}

/// Prototype step direction for each class.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtoDelta {
    pub flame: Vec<f64>,
    pub noflame: Vec<f64>,
}

impl ProtoDelta {
    pub fn zeros(dim: usize) -> Self {
        Self {
            flame: vec![0.0; dim],
            noflame: vec![0.0; dim],
        }
    }

    pub fn get(&self, label: Label) -> &[f64] {
        match label {
            Label::Flame => &self.flame,
            Label::NoFlame => &self.noflame,
        }
    }

    fn get_mut(&mut self, label: Label) -> &mut Vec<f64> {
        match label {
            Label::Flame => &mut self.flame,
            Label::NoFlame => &mut self.noflame,
        }
    }
}

/// Value and closed-form derivatives of one metric-learning loss.
#[derive(Debug, Clone, PartialEq)]
pub struct TermOutput {
    pub value: f64,
    pub grad_e: Vec<Vec<f64>>,
    pub grad_a: Vec<Vec<f64>>,
    pub delta: ProtoDelta,
    /// Size of the active set (`m` for the center loss).
    pub active: usize,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_batch(e: &[Vec<f64>], labels: &[Label], protos: &PrototypePair, a: &[Vec<f64>]) -> Result<usize> {
    let m = e.len();
    if m == 0 {
        return Err(DmlError::DegenerateBatch("no samples".into()));
    }
    if labels.len() != m || a.len() != m {
        return Err(DmlError::ShapeMismatch(format!(
            "{m} embeddings, {} labels, {} attention rows",
            labels.len(),
            a.len()
        )));
    }
    let d = protos.dim();
    if protos.noflame.len() != d {
        return Err(DmlError::ShapeMismatch("prototype lengths differ".into()));
    }
    if e.iter().chain(a).any(|v| v.len() != d) {
        return Err(DmlError::ShapeMismatch(format!("rows must have length {d}")));
    }
    Ok(m)
}

/// Per-sample triplet-center terms before the hinge.
pub fn triplet_terms(
    e: &[Vec<f64>],
    labels: &[Label],
    protos: &PrototypePair,
    a: &[Vec<f64>],
    margin: f64,
) -> Result<Vec<f64>> {
    check_batch(e, labels, protos, a)?;
    let d = protos.dim() as f64;
    Ok(e.iter()
        .zip(labels)
        .zip(a)
        .map(|((ei, &y), ai)| {
            let p = protos.get(y);
            let n = protos.get(y.opposite());
            let mut s = 0.0;
            let mut a_sum = 0.0;
            for j in 0..ei.len() {
                let dp = (ei[j] - p[j]).powi(2);
                let dn = (ei[j] - n[j]).powi(2);
                s += ai[j] * (dp - dn);
                a_sum += ai[j];
            }
            s + margin * a_sum / d
        })
        .collect())
}

/// Attentive triplet-center loss, `(1/2m) Σ_i max(0, s_i)`.
pub fn loss_triplet(
    e: &[Vec<f64>],
    labels: &[Label],
    protos: &PrototypePair,
    a: &[Vec<f64>],
    margin: f64,
) -> Result<TermOutput> {
    let terms = triplet_terms(e, labels, protos, a, margin)?;
    let m = e.len();
    let dim = protos.dim();
    let inv_m = 1.0 / m as f64;
    let active: Vec<bool> = terms.iter().map(|&s| s > 0.0).collect();
    let k = active.iter().filter(|&&x| x).count();
    // Folding from +0 keeps an empty active set from reporting -0.
    let value = 0.5 * inv_m * terms.iter().filter(|&&s| s > 0.0).fold(0.0, |acc, s| acc + s);

    let mut grad_e = vec![vec![0.0; dim]; m];
    let mut grad_a = vec![vec![0.0; dim]; m];
    let mut delta = ProtoDelta::zeros(dim);
    let margin_share = margin / dim as f64;
    for i in 0..m {
        if !active[i] {
            continue;
        }
        let y = labels[i];
        let p = protos.get(y);
        let n = protos.get(y.opposite());
        for j in 0..dim {
            let dp = (e[i][j] - p[j]).powi(2);
            let dn = (e[i][j] - n[j]).powi(2);
            grad_e[i][j] = inv_m * a[i][j] * (n[j] - p[j]);
            grad_a[i][j] = 0.5 * inv_m * (dp - dn + margin_share);
        }
        // Pull the own prototype toward e, push the opposite one away.
        let inv_k = 1.0 / k as f64;
        let own = delta.get_mut(y);
        for j in 0..dim {
            own[j] -= inv_k * a[i][j] * (e[i][j] - p[j]);
        }
        let other = delta.get_mut(y.opposite());
        for j in 0..dim {
            other[j] += inv_k * a[i][j] * (e[i][j] - n[j]);
        }
    }
    Ok(TermOutput {
        value,
        grad_e,
        grad_a,
        delta,
        active: k,
    })
}

/// Attentive center loss, `(1/2m) Σ_i Σ_j a_ij (e_ij - p_j)²`.
pub fn loss_center(
    e: &[Vec<f64>],
    labels: &[Label],
    protos: &PrototypePair,
    a: &[Vec<f64>],
) -> Result<TermOutput> {
    let m = check_batch(e, labels, protos, a)?;
    let dim = protos.dim();
    let inv_m = 1.0 / m as f64;
    let mut value = 0.0;
    let mut grad_e = vec![vec![0.0; dim]; m];
    let mut grad_a = vec![vec![0.0; dim]; m];
    let mut delta = ProtoDelta::zeros(dim);
    for i in 0..m {
        let y = labels[i];
        let p = protos.get(y);
        for j in 0..dim {
            let diff = e[i][j] - p[j];
            value += a[i][j] * diff * diff;
            grad_e[i][j] = inv_m * a[i][j] * diff;
            grad_a[i][j] = 0.5 * inv_m * diff * diff;
        }
        let own = delta.get_mut(y);
        for j in 0..dim {
            own[j] -= inv_m * a[i][j] * (e[i][j] - p[j]);
        }
    }
    Ok(TermOutput {
        value: 0.5 * inv_m * value,
        grad_e,
        grad_a,
        delta,
        active: m,
    })
}

/// Attention-weighted cosine similarity, `Σ_j a_j e_j c_j / (|e||c|)`.
fn weighted_cos(e: &[f64], c: &[f64], a: &[f64], ne: f64, nc: f64) -> f64 {
    let mut s = 0.0;
    for j in 0..e.len() {
        s += a[j] * e[j] * c[j];
    }
    s / (ne * nc)
}

/// Per-sample cosine brackets `cos_a(e, p) - cos_a(e, n)` (positive = closer to own class).
pub fn cosine_brackets(
    e: &[Vec<f64>],
    labels: &[Label],
    protos: &PrototypePair,
    a: &[Vec<f64>],
) -> Result<Vec<f64>> {
    check_batch(e, labels, protos, a)?;
    let (nf, nn) = protos.norms();
    if nf < NORM_FLOOR || nn < NORM_FLOOR {
        return Err(DmlError::ZeroNormVector);
    }
    e.iter()
        .zip(labels)
        .zip(a)
        .map(|((ei, &y), ai)| {
            let ne = norm(ei);
            if ne < NORM_FLOOR {
                return Err(DmlError::ZeroNormVector);
            }
            let p = protos.get(y);
            let n = protos.get(y.opposite());
            Ok(weighted_cos(ei, p, ai, ne, norm(p)) - weighted_cos(ei, n, ai, ne, norm(n)))
        })
        .collect()
}

/// Attentive triplet cosine loss, `-(1/2m) Σ_i bracket_i + 2`.
///
/// The active set `K'` holds samples whose bracket is negative, i.e. whose
/// embedding is angularly closer to the opposite prototype.
pub fn loss_cosine(
    e: &[Vec<f64>],
    labels: &[Label],
    protos: &PrototypePair,
    a: &[Vec<f64>],
) -> Result<TermOutput> {
    let brackets = cosine_brackets(e, labels, protos, a)?;
    let m = e.len();
    let dim = protos.dim();
    let inv_m = 1.0 / m as f64;
    let value = -0.5 * inv_m * brackets.iter().sum::<f64>() + 2.0;
    let k = brackets.iter().filter(|&&b| b < 0.0).count();

    let mut grad_e = vec![vec![0.0; dim]; m];
    let mut grad_a = vec![vec![0.0; dim]; m];
    let mut delta = ProtoDelta::zeros(dim);
    for i in 0..m {
        let y = labels[i];
        let (ei, ai) = (&e[i], &a[i]);
        let ne = norm(ei);
        let ae: Vec<f64> = ai.iter().zip(ei).map(|(x, y)| x * y).collect();
        let mut ge = vec![0.0; dim];
        for (sign, c) in [(1.0, protos.get(y)), (-1.0, protos.get(y.opposite()))] {
            let nc = norm(c);
            let s = dot(&ae, c);
            for j in 0..dim {
                ge[j] += sign * (ai[j] * c[j] / (ne * nc) - s * ei[j] / (ne.powi(3) * nc));
                grad_a[i][j] -= sign * 0.5 * inv_m * ei[j] * c[j] / (ne * nc);
            }
        }
        for j in 0..dim {
            grad_e[i][j] = -0.5 * inv_m * ge[j];
        }

        if brackets[i] < 0.0 {
            let scale = -0.5 / k as f64;
            for (sign, label) in [(1.0, y), (-1.0, y.opposite())] {
                let c = protos.get(label).to_vec();
                let nc = norm(&c);
                let s = dot(&ae, &c);
                let target = delta.get_mut(label);
                for j in 0..dim {
                    target[j] += scale * sign * (ae[j] / (ne * nc) - s * c[j] / (ne * nc.powi(3)));
                }
            }
        }
    }
    Ok(TermOutput {
        value,
        grad_e,
        grad_a,
        delta,
        active: k,
    })
}

/// Mean negative log-likelihood and its gradient `(p - onehot)/m` w.r.t. the logits.
pub fn loss_bce(probs: &[[f64; 2]], labels: &[Label]) -> Result<(f64, Vec<[f64; 2]>)> {
    loss_bce_weighted(probs, labels, [1.0, 1.0])
}

/// Class-weighted variant; weights are indexed by [`Label::index`].
pub fn loss_bce_weighted(
    probs: &[[f64; 2]],
    labels: &[Label],
    class_weight: [f64; 2],
) -> Result<(f64, Vec<[f64; 2]>)> {
    if probs.is_empty() {
        return Err(DmlError::EmptyBatch);
    }
    if probs.len() != labels.len() {
        return Err(DmlError::ShapeMismatch(format!(
            "{} probability rows vs {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let inv_m = 1.0 / probs.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(probs.len());
    for (p, &y) in probs.iter().zip(labels) {
        let t = y.index();
        let w = class_weight[t];
        loss -= w * p[t].max(f64::MIN_POSITIVE).ln();
        let mut g = [p[0], p[1]];
        g[t] -= 1.0;
        grads.push([w * g[0] * inv_m, w * g[1] * inv_m]);
    }
    Ok((loss * inv_m, grads))
}

/// Mean squared reconstruction error and its gradient `-2(x - x̂)/m`.
pub fn loss_rec(x: &[Vec<f64>], x_hat: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
    if x.is_empty() {
        return Err(DmlError::EmptyBatch);
    }
    if x.len() != x_hat.len() || x.iter().zip(x_hat).any(|(a, b)| a.len() != b.len()) {
        return Err(DmlError::ShapeMismatch("reconstruction shape".into()));
    }
    let inv_m = 1.0 / x.len() as f64;
    let mut loss = 0.0;
    let grads = x
        .iter()
        .zip(x_hat)
        .map(|(xi, hi)| {
            xi.iter()
                .zip(hi)
                .map(|(a, b)| {
                    let d = a - b;
                    loss += d * d;
                    -2.0 * d * inv_m
                })
                .collect()
        })
        .collect();
    Ok((loss * inv_m, grads))
}

/// [`loss_rec`] divided by the number of pixels per patch.
///
/// This is the form used in training: with a summed reconstruction error the
/// term outweighs the cross-entropy by roughly the pixel count.
pub fn loss_rec_per_pixel(x: &[Vec<f64>], x_hat: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
    let (loss, mut grads) = loss_rec(x, x_hat)?;
    let n = x[0].len().max(1) as f64;
    for g in grads.iter_mut().flatten() {
        *g /= n;
    }
    Ok((loss / n, grads))
}

/// Inputs to [`total_loss`]; disabled metric-learning terms are `None`.
#[derive(Debug, Clone)]
pub struct LossComponents {
    pub batch_size: usize,
    pub bce: f64,
    pub rec: f64,
    pub tl: Option<TermOutput>,
    pub cl: Option<TermOutput>,
    pub cos: Option<TermOutput>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub bce: f64,
    pub rec: f64,
    pub tl: f64,
    pub cl: f64,
    pub cos: f64,
    pub total: f64,
    /// Weighted metric-learning gradient per sample.
    pub grads_e: Vec<Vec<f64>>,
    /// Weighted gradients per attention head (triplet, center, cosine).
    pub grads_a: [Vec<Vec<f64>>; 3],
    /// Unweighted prototype deltas per loss (triplet, center, cosine).
    pub delta_c: [ProtoDelta; 3],
    pub k: usize,
    pub k_prime: usize,
}

impl LossBreakdown {
    pub fn recompute_total(&self, hyper: &DmlHyper) -> f64 {
        self.bce
            + hyper.lambda * self.rec
            + hyper.gamma1 * self.tl
            + hyper.gamma2 * self.cos
            + hyper.gamma3 * self.cl
    }
}

/// Weighted multi-task objective `bce + λ rec + γ1 tl + γ2 cos + γ3 cl`.
pub fn total_loss(c: LossComponents, hyper: &DmlHyper, dim: usize) -> Result<LossBreakdown> {
    let m = c.batch_size;
    for t in [&c.tl, &c.cl, &c.cos].into_iter().flatten() {
        if t.grad_e.len() != m || t.grad_a.len() != m {
            return Err(DmlError::InconsistentBatch(format!(
                "term has {} rows, batch has {m}",
                t.grad_e.len()
            )));
        }
    }
    let value = |t: &Option<TermOutput>| t.as_ref().map_or(0.0, |t| t.value);
    let (tl, cl, cos) = (value(&c.tl), value(&c.cl), value(&c.cos));
    let total = c.bce + hyper.lambda * c.rec + hyper.gamma1 * tl + hyper.gamma2 * cos + hyper.gamma3 * cl;

    let mut grads_e = vec![vec![0.0; dim]; m];
    let zeros = || vec![vec![0.0; dim]; m];
    let mut grads_a = [zeros(), zeros(), zeros()];
    let mut delta_c = [ProtoDelta::zeros(dim), ProtoDelta::zeros(dim), ProtoDelta::zeros(dim)];
    let terms = [(&c.tl, hyper.gamma1), (&c.cl, hyper.gamma3), (&c.cos, hyper.gamma2)];
    for (slot, (term, gamma)) in terms.into_iter().enumerate() {
        let Some(t) = term else { continue };
        for i in 0..m {
            for j in 0..dim {
                grads_e[i][j] += gamma * t.grad_e[i][j];
                grads_a[slot][i][j] = gamma * t.grad_a[i][j];
            }
        }
        delta_c[slot] = t.delta.clone();
    }
    Ok(LossBreakdown {
        bce: c.bce,
        rec: c.rec,
        tl,
        cl,
        cos,
        total,
        grads_e,
        grads_a,
        delta_c,
        k: c.tl.as_ref().map_or(0, |t| t.active),
        k_prime: c.cos.as_ref().map_or(0, |t| t.active),
    })
}

/// `C <- C - (lr_tl Δ_tl + lr_cl Δ_cl + lr_cos Δ_cos)` for both classes.
pub fn update_prototypes(
    protos: &PrototypePair,
    deltas: &[ProtoDelta; 3],
    hyper: &DmlHyper,
) -> Result<PrototypePair> {
    let dim = protos.dim();
    if deltas.iter().any(|d| {
        d.flame.len() != dim
            || d.noflame.len() != dim
            || d.flame.iter().chain(&d.noflame).any(|v| !v.is_finite())
    }) {
        return Err(DmlError::NonFiniteDelta);
    }
    let rates = [hyper.proto_lr_tl, hyper.proto_lr_cl, hyper.proto_lr_cos];
    let mut next = protos.clone();
    for label in [Label::Flame, Label::NoFlame] {
        let c = next.get_mut(label);
        for (d, lr) in deltas.iter().zip(rates) {
            for (cj, dj) in c.iter_mut().zip(d.get(label)) {
                *cj -= lr * dj;
            }
        }
    }
    Ok(next)
}
