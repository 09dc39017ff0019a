//! Fuzzy class-affiliation primitives.
//!
//! Classifier logits are mapped to per-class membership degrees in `[0, 1]`
//! (no sum-to-one constraint). From memberships this module derives:
//!
//! * the necessity of each class (how sure we are the sample is *not*
//!   elsewhere),
//! * category credibility (mean of membership and necessity),
//! * decision uncertainty (normalized binary entropy of the credibilities),
//! * inter-view conflict (mean cosine dissimilarity against other views),
//! * the asymmetric credibility variant used while training against labels.
//!
//! All functions are pure and re-entrant.

use crate::error::{Error, Result};

/// Inputs this far outside `[0, 1]` are rejected; anything closer is clamped.
/// Backprop accumulation routinely produces values like `1.0 + 2e-16`.
pub const RANGE_TOL: f64 = 1e-9;

fn clamp_unit(values: &[f64], what: &str) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(values.len());
    for (i, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::invalid(format!("{what}[{i}] is not finite")));
        }
        if v < -RANGE_TOL || v > 1.0 + RANGE_TOL {
            return Err(Error::invalid(format!(
                "{what}[{i}] = {v} outside [0, 1]"
            )));
        }
        out.push(v.clamp(0.0, 1.0));
    }
    Ok(out)
}

/// Per-class membership degrees of one sample in one view.
///
/// Entries lie in `[0, 1]` and the vector has at least two classes. The
/// entries are *not* a probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct Membership(Vec<f64>);

impl Membership {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::invalid(format!(
                "membership needs at least 2 classes, got {}",
                values.len()
            )));
        }
        Ok(Membership(clamp_unit(&values, "membership")?))
    }

    /// Uniform vector `1/K` in every coordinate; the fallback view opinion
    /// when the logits carry no information.
    pub fn uniform(class_count: usize) -> Result<Self> {
        if class_count < 2 {
            return Err(Error::invalid("class_count must be >= 2"));
        }
        Ok(Membership(vec![1.0 / class_count as f64; class_count]))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn class_count(&self) -> usize {
        self.0.len()
    }

    /// Necessity per class: `1 - max` of the *other* memberships. High when
    /// every competing class has low membership.
    pub fn necessity(&self) -> Vec<f64> {
        let k = self.0.len();
        (0..k)
            .map(|i| 1.0 - max_excluding(&self.0, i))
            .collect()
    }

    /// Category credibility: the arithmetic mean of membership (possibility)
    /// and necessity for each class.
    pub fn credibility(&self) -> Credibility {
        let k = self.0.len();
        let values = (0..k)
            .map(|i| 0.5 * (self.0[i] + 1.0 - max_excluding(&self.0, i)))
            .collect();
        // Both terms are in [0, 1], so the mean is too.
        Credibility(values)
    }
}

fn max_excluding(values: &[f64], skip: usize) -> f64 {
    values
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != skip)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Per-class credibility scores in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Credibility(Vec<f64>);

impl Credibility {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::invalid(format!(
                "credibility needs at least 2 classes, got {}",
                values.len()
            )));
        }
        Ok(Credibility(clamp_unit(&values, "credibility")?))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn class_count(&self) -> usize {
        self.0.len()
    }

    /// Decision uncertainty: the sum of binary entropies of all entries,
    /// normalized by `K * ln 2` so the result lies in `[0, 1]`.
    /// 0 means every class is fully decided, 1 maximal ambiguity.
    pub fn uncertainty(&self) -> f64 {
        let k = self.0.len() as f64;
        let total: f64 = self.0.iter().map(|&c| binary_entropy(c)).sum();
        total / (k * std::f64::consts::LN_2)
    }
}

/// Binary entropy in nats with the `0 ln 0 = 0` convention.
pub fn binary_entropy(x: f64) -> f64 {
    let mut h = 0.0;
    if x > 0.0 {
        h -= x * x.ln();
    }
    if x < 1.0 {
        h -= (1.0 - x) * (1.0 - x).ln();
    }
    h
}

/// A one-hot class label over `class_count` classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OneHot {
    class: usize,
    class_count: usize,
}

impl OneHot {
    pub fn new(class: usize, class_count: usize) -> Result<Self> {
        if class_count < 2 {
            return Err(Error::invalid("class_count must be >= 2"));
        }
        if class >= class_count {
            return Err(Error::invalid(format!(
                "class {class} out of range for {class_count} classes"
            )));
        }
        Ok(OneHot { class, class_count })
    }

    pub fn class(&self) -> usize {
        self.class
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// 1.0 at the hot index, 0.0 elsewhere.
    pub fn value(&self, index: usize) -> f64 {
        if index == self.class {
            1.0
        } else {
            0.0
        }
    }
}

/// Map raw logits to memberships: L_p-normalize (bounding each coordinate to
/// `[-1, 1]`), then clamp negatives to zero.
///
/// A zero-norm logits vector carries no information; the uniform vector
/// `1/K` is returned so downstream scores stay well defined.
pub fn membership_from_logits(logits: &[f64], norm_order: f64) -> Result<Membership> {
    if logits.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 logits, got {}",
            logits.len()
        )));
    }
    if !(norm_order >= 1.0) || !norm_order.is_finite() {
        return Err(Error::invalid(format!(
            "norm order must be finite and >= 1, got {norm_order}"
        )));
    }
    if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("logit[{i}] is not finite")));
    }
    let norm = lp_norm(logits, norm_order);
    if norm == 0.0 {
        return Membership::uniform(logits.len());
    }
    let values = logits.iter().map(|&a| (a / norm).max(0.0)).collect();
    Ok(Membership(values))
}

pub(crate) fn lp_norm(values: &[f64], p: f64) -> f64 {
    if p == 2.0 {
        values.iter().map(|v| v * v).sum::<f64>().sqrt()
    } else {
        values
            .iter()
            .map(|v| v.abs().powf(p))
            .sum::<f64>()
            .powf(1.0 / p)
    }
}

/// Cosine similarity that treats a (near-)zero vector as orthogonal to
/// everything. Membership vectors can legitimately collapse to all zeros
/// when every logit is negative; scoring such a view as maximally
/// dissimilar keeps fusion defined while giving it no weight advantage.
pub(crate) fn cosine_guarded(a: &[f64], b: &[f64]) -> f64 {
    const NORM_FLOOR: f64 = 1e-12;
    let na = lp_norm(a, 2.0);
    let nb = lp_norm(b, 2.0);
    if na < NORM_FLOOR || nb < NORM_FLOOR {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (na * nb)
}

/// Inter-view conflict of `own` against the remaining views: the mean cosine
/// dissimilarity `1 - cos` over all other membership vectors.
///
/// Errors on zero vectors, where the cosine is undefined. Training and
/// evaluation paths use [`conflict_guarded`] instead.
pub fn conflict(own: &Membership, others: &[&Membership]) -> Result<f64> {
    if others.is_empty() {
        return Err(Error::invalid("conflict needs at least one other view"));
    }
    let own_norm = lp_norm(own.values(), 2.0);
    if own_norm == 0.0 {
        return Err(Error::degenerate("own membership vector is zero"));
    }
    let mut total = 0.0;
    for (j, other) in others.iter().enumerate() {
        if other.class_count() != own.class_count() {
            return Err(Error::shape(format!(
                "view {} has {} classes, expected {}",
                j,
                other.class_count(),
                own.class_count()
            )));
        }
        let other_norm = lp_norm(other.values(), 2.0);
        if other_norm == 0.0 {
            return Err(Error::degenerate(format!(
                "membership vector of other view {j} is zero"
            )));
        }
        let dot: f64 = own
            .values()
            .iter()
            .zip(other.values())
            .map(|(a, b)| a * b)
            .sum();
        total += 1.0 - dot / (own_norm * other_norm);
    }
    Ok(total / others.len() as f64)
}

/// [`conflict`] with the zero-vector guard: a zero membership vector is
/// treated as fully dissimilar (cosine 0) instead of erroring.
pub fn conflict_guarded(own: &Membership, others: &[&Membership]) -> Result<f64> {
    if others.is_empty() {
        return Err(Error::invalid("conflict needs at least one other view"));
    }
    let mut total = 0.0;
    for other in others {
        if other.class_count() != own.class_count() {
            return Err(Error::shape("conflict over differing class counts"));
        }
        total += 1.0 - cosine_guarded(own.values(), other.values());
    }
    Ok(total / others.len() as f64)
}

/// Credibility used while training: the true class keeps the test-time
/// definition, while every other class measures necessity against the true
/// class's membership only. This steers the true class's membership up and
/// the others down without rewarding spurious large memberships.
pub fn training_credibility(m: &Membership, label: &OneHot) -> Result<Credibility> {
    if m.class_count() != label.class_count() {
        return Err(Error::shape(format!(
            "membership has {} classes, label has {}",
            m.class_count(),
            label.class_count()
        )));
    }
    let values = m.values();
    let true_class = label.class();
    let true_membership = values[true_class];
    let out = (0..values.len())
        .map(|k| {
            if k == true_class {
                0.5 * (values[k] + 1.0 - max_excluding(values, k))
            } else {
                0.5 * (values[k] + 1.0 - true_membership)
            }
        })
        .collect();
    Ok(Credibility(out))
}
