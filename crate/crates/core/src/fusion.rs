//! Decision-level fusion of per-view opinions.
//!
//! Each view contributes an opinion: its membership vector plus derived
//! uncertainty and conflict scores. Test-time weights favor views that are
//! both certain and in agreement with the others; training-time weights use
//! conflict alone, because uncertainty is computed from supervised
//! credibility and is unreliable while labels may be wrong.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fuzzy::{conflict_guarded, Membership};

/// One view's contribution to a fusion decision.
#[derive(Debug, Clone)]
pub struct ViewOpinion {
    pub membership: Membership,
    /// Decision uncertainty in `[0, 1]`.
    pub uncertainty: f64,
    /// Conflict against the other views in `[0, 1]`.
    pub conflict: f64,
    pub view_index: usize,
}

impl ViewOpinion {
    /// Build the full opinion set for one instance from its per-view
    /// memberships: uncertainty from each view's credibility, conflict from
    /// pairwise cosine dissimilarity.
    pub fn from_memberships(memberships: &[Membership]) -> Result<Vec<ViewOpinion>> {
        if memberships.len() < 2 {
            return Err(Error::invalid("fusion needs at least 2 views"));
        }
        let mut opinions = Vec::with_capacity(memberships.len());
        for (v, m) in memberships.iter().enumerate() {
            let others: Vec<&Membership> = memberships
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != v)
                .map(|(_, m)| m)
                .collect();
            opinions.push(ViewOpinion {
                membership: m.clone(),
                uncertainty: m.credibility().uncertainty(),
                conflict: conflict_guarded(m, &others)?,
                view_index: v,
            });
        }
        Ok(opinions)
    }
}

/// Monotone transform applied to view scores before normalization.
/// `Exp` is the default; `Identity` exists for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightTransform {
    #[default]
    Exp,
    Identity,
}

impl WeightTransform {
    pub(crate) fn apply(&self, score: f64) -> f64 {
        match self {
            WeightTransform::Exp => score.exp(),
            WeightTransform::Identity => score,
        }
    }
}

/// Normalized per-view fusion weights: nonnegative, summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights(Vec<f64>);

impl FusionWeights {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn uniform(views: usize) -> Self {
        FusionWeights(vec![1.0 / views as f64; views])
    }

    fn from_scores(scores: &[f64], transform: WeightTransform) -> Self {
        let transformed: Vec<f64> = scores.iter().map(|&s| transform.apply(s)).collect();
        let total: f64 = transformed.iter().sum();
        if total <= 0.0 {
            // Only reachable with the identity transform when every score is
            // zero; exp is always positive.
            return FusionWeights::uniform(scores.len());
        }
        FusionWeights(transformed.iter().map(|&t| t / total).collect())
    }
}

/// The fused decision: a membership vector and its overall uncertainty.
#[derive(Debug, Clone)]
pub struct FusedOpinion {
    pub membership: Membership,
    pub uncertainty: f64,
}

/// Test-time fusion weights from `(1 - uncertainty) * (1 - conflict)`:
/// views must be both confident and aligned to dominate the decision.
pub fn test_weights(opinions: &[ViewOpinion], transform: WeightTransform) -> Result<FusionWeights> {
    if opinions.len() < 2 {
        return Err(Error::invalid("fusion needs at least 2 views"));
    }
    let scores: Vec<f64> = opinions
        .iter()
        .map(|o| (1.0 - o.uncertainty) * (1.0 - o.conflict))
        .collect();
    Ok(FusionWeights::from_scores(&scores, transform))
}

/// Training-time fusion weights from `1 - conflict` alone. Conflict is
/// computed purely from network outputs and carries no supervised signal,
/// so it stays usable even when some views are trained on wrong labels.
pub fn train_weights(
    opinions: &[ViewOpinion],
    transform: WeightTransform,
) -> Result<FusionWeights> {
    if opinions.len() < 2 {
        return Err(Error::invalid("fusion needs at least 2 views"));
    }
    let scores: Vec<f64> = opinions.iter().map(|o| 1.0 - o.conflict).collect();
    Ok(FusionWeights::from_scores(&scores, transform))
}

/// Weighted sum of the view memberships, with overall uncertainty taken
/// from the credibility of the fused membership.
pub fn fuse(opinions: &[ViewOpinion], weights: &FusionWeights) -> Result<FusedOpinion> {
    if opinions.is_empty() {
        return Err(Error::invalid("cannot fuse zero opinions"));
    }
    if opinions.len() != weights.values().len() {
        return Err(Error::shape(format!(
            "{} opinions but {} weights",
            opinions.len(),
            weights.values().len()
        )));
    }
    let k = opinions[0].membership.class_count();
    let mut fused = vec![0.0; k];
    for (opinion, &w) in opinions.iter().zip(weights.values()) {
        if opinion.membership.class_count() != k {
            return Err(Error::shape("views disagree on class count"));
        }
        for (f, &m) in fused.iter_mut().zip(opinion.membership.values()) {
            *f += w * m;
        }
    }
    let membership = Membership::new(fused)?;
    let uncertainty = membership.credibility().uncertainty();
    Ok(FusedOpinion {
        membership,
        uncertainty,
    })
}
