//! Credibility learning losses.
//!
//! The base loss is a per-class binary cross-entropy between the
//! training-phase credibility vector and the one-hot label, summed over
//! classes and averaged over the batch. On top of it sit the multi-task
//! total loss (fused branch scaled by a warm-up coefficient) and the robust
//! variant that multiplies each per-view sample term by an importance
//! weight.

use crate::error::{Error, Result};
use crate::fuzzy::{Credibility, OneHot};

/// Clamp applied to credibilities before taking logs. Training credibility
/// reaches exactly 0 and 1 on perfectly fit samples; the loss must stay
/// finite there.
pub const LOG_CLAMP: f64 = 1e-7;

/// Class-summed binary cross-entropy of one sample.
pub fn sample_bce(r: &Credibility, y: &OneHot) -> Result<f64> {
    if r.class_count() != y.class_count() {
        return Err(Error::shape(format!(
            "credibility has {} classes, label has {}",
            r.class_count(),
            y.class_count()
        )));
    }
    let mut total = 0.0;
    for (k, &raw) in r.values().iter().enumerate() {
        let c = raw.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
        total -= y.value(k) * c.ln() + (1.0 - y.value(k)) * (1.0 - c).ln();
    }
    Ok(total)
}

/// Mean over the batch of [`sample_bce`].
pub fn credibility_loss(r_batch: &[Credibility], y_batch: &[OneHot]) -> Result<f64> {
    if r_batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if r_batch.len() != y_batch.len() {
        return Err(Error::shape(format!(
            "{} credibilities but {} labels",
            r_batch.len(),
            y_batch.len()
        )));
    }
    let mut total = 0.0;
    for (r, y) in r_batch.iter().zip(y_batch) {
        total += sample_bce(r, y)?;
    }
    Ok(total / r_batch.len() as f64)
}

/// Importance-weighted mean of per-sample cross-entropies for one view.
pub fn weighted_credibility_loss(
    r_batch: &[Credibility],
    y_batch: &[OneHot],
    importance: &[f64],
) -> Result<f64> {
    if r_batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if r_batch.len() != y_batch.len() || r_batch.len() != importance.len() {
        return Err(Error::shape(format!(
            "batch sizes disagree: {} credibilities, {} labels, {} weights",
            r_batch.len(),
            y_batch.len(),
            importance.len()
        )));
    }
    let mut total = 0.0;
    for ((r, y), &d) in r_batch.iter().zip(y_batch).zip(importance) {
        if !(0.0..=1.0).contains(&d) {
            return Err(Error::invalid(format!(
                "importance weight {d} outside [0, 1]"
            )));
        }
        total += d * sample_bce(r, y)?;
    }
    Ok(total / r_batch.len() as f64)
}

/// Warm-up coefficient for the fused branch: ramps linearly from
/// `1/warmup_epochs` at epoch 1 to 1 at `warmup_epochs`, then saturates.
pub fn warmup_gamma(epoch: usize, warmup_epochs: usize) -> f64 {
    debug_assert!(epoch >= 1 && warmup_epochs >= 1);
    (epoch as f64 / warmup_epochs as f64).min(1.0)
}

/// Multi-task total: `gamma * fused loss + sum of per-view losses`.
pub fn total_loss(
    fused_r: &[Credibility],
    per_view_r: &[Vec<Credibility>],
    y_batch: &[OneHot],
    gamma: f64,
) -> Result<f64> {
    let mut total = gamma * credibility_loss(fused_r, y_batch)?;
    for view_r in per_view_r {
        total += credibility_loss(view_r, y_batch)?;
    }
    Ok(total)
}

/// Robust total: the fused branch is unchanged, each per-view sample term is
/// scaled by its importance weight. With all weights 1 this equals
/// [`total_loss`].
pub fn robust_total_loss(
    fused_r: &[Credibility],
    per_view_r: &[Vec<Credibility>],
    y_batch: &[OneHot],
    gamma: f64,
    importance: &[Vec<f64>],
) -> Result<f64> {
    if importance.len() != per_view_r.len() {
        return Err(Error::shape(format!(
            "{} views but {} importance vectors",
            per_view_r.len(),
            importance.len()
        )));
    }
    let mut total = gamma * credibility_loss(fused_r, y_batch)?;
    for (view_r, d) in per_view_r.iter().zip(importance) {
        total += weighted_credibility_loss(view_r, y_batch, d)?;
    }
    Ok(total)
}
