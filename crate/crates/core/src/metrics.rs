//! Evaluation metrics: accuracy, FPR95 for uncertainty-based conflict
//! detection, division quality against ground truth, and uncertainty
//! density exports.

use serde::Serialize;

use crate::data::ConflictLabels;
use crate::error::{Error, Result};
use crate::gmm::DivisionResult;

/// Format a float with 9 significant digits, used by all metric CSVs.
pub fn sig9(x: f64) -> String {
    format!("{x:.8e}")
}

/// Fraction of exact prediction matches.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::invalid("empty prediction set"));
    }
    if predictions.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// False positive rate at 95% true positive rate.
///
/// Positives are conflicting instances, detected by high uncertainty
/// scores. The threshold is the largest score achieving TPR >= 0.95 when
/// instances scoring at or above it count as detected; the result is the
/// fraction of clean instances at or above that threshold. This equals a
/// sweep over every real-valued threshold.
pub fn fpr95(scores: &[f64], is_positive: &[bool]) -> Result<f64> {
    if scores.len() != is_positive.len() {
        return Err(Error::shape(format!(
            "{} scores for {} flags",
            scores.len(),
            is_positive.len()
        )));
    }
    if let Some(&bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::invalid(format!("non-finite score {bad}")));
    }
    let mut positives: Vec<f64> = scores
        .iter()
        .zip(is_positive)
        .filter(|&(_, &p)| p)
        .map(|(&s, _)| s)
        .collect();
    let negatives: Vec<f64> = scores
        .iter()
        .zip(is_positive)
        .filter(|&(_, &p)| !p)
        .map(|(&s, _)| s)
        .collect();
    if positives.is_empty() {
        return Err(Error::UndefinedMetric(
            "no conflicting instances; FPR95 undefined".into(),
        ));
    }
    if negatives.is_empty() {
        return Err(Error::UndefinedMetric(
            "no clean instances; FPR95 undefined".into(),
        ));
    }
    positives.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let p_total = positives.len() as f64;
    // Walk candidate thresholds from high to low; the first to reach
    // TPR >= 0.95 is the largest feasible threshold and has the lowest FPR.
    let mut threshold = positives[positives.len() - 1];
    let mut detected = 0usize;
    let mut idx = 0usize;
    while idx < positives.len() {
        let tau = positives[idx];
        while idx < positives.len() && positives[idx] == tau {
            detected += 1;
            idx += 1;
        }
        if detected as f64 / p_total >= 0.95 {
            threshold = tau;
            break;
        }
    }
    let false_positives = negatives.iter().filter(|&&s| s >= threshold).count();
    Ok(false_positives as f64 / negatives.len() as f64)
}

/// Division quality for one view; rates are `None` when the view has no
/// instances of the relevant ground-truth class.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ViewDivisionRates {
    pub view: usize,
    pub fpr: Option<f64>,
    pub fnr: Option<f64>,
    pub average: Option<f64>,
}

/// Division quality per view plus pooled means over the views where each
/// rate is defined.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct DivisionRates {
    pub per_view: Vec<ViewDivisionRates>,
    pub pooled_fpr: Option<f64>,
    pub pooled_fnr: Option<f64>,
    pub pooled_average: Option<f64>,
    pub warnings: Vec<String>,
}

/// Compare a division against corruption ground truth. Positive means
/// conflicting: FNR is the fraction of conflicting views marked clean, FPR
/// the fraction of clean views marked conflicting.
pub fn division_rates(division: &DivisionResult, truth: &ConflictLabels) -> Result<DivisionRates> {
    if division.instances() != truth.instances() || division.views() != truth.views() {
        return Err(Error::shape(format!(
            "division grid {}x{} but truth grid {}x{}",
            division.instances(),
            division.views(),
            truth.instances(),
            truth.views()
        )));
    }
    let mut per_view = Vec::with_capacity(division.views());
    let mut warnings = Vec::new();
    for v in 0..division.views() {
        let mut conflicting_total = 0usize;
        let mut missed_conflicting = 0usize;
        let mut clean_total = 0usize;
        let mut flagged_clean = 0usize;
        for i in 0..division.instances() {
            if truth.is_view_conflicting(i, v) {
                conflicting_total += 1;
                if division.is_clean(i, v) {
                    missed_conflicting += 1;
                }
            } else {
                clean_total += 1;
                if !division.is_clean(i, v) {
                    flagged_clean += 1;
                }
            }
        }
        let fnr = if conflicting_total > 0 {
            Some(missed_conflicting as f64 / conflicting_total as f64)
        } else {
            warnings.push(format!(
                "view {v} has no conflicting entries; FNR undefined and excluded from pooled mean"
            ));
            None
        };
        let fpr = if clean_total > 0 {
            Some(flagged_clean as f64 / clean_total as f64)
        } else {
            warnings.push(format!(
                "view {v} has no clean entries; FPR undefined and excluded from pooled mean"
            ));
            None
        };
        let average = match (fpr, fnr) {
            (Some(a), Some(b)) => Some(0.5 * (a + b)),
            _ => None,
        };
        per_view.push(ViewDivisionRates {
            view: v,
            fpr,
            fnr,
            average,
        });
    }
    let mean = |values: Vec<f64>| -> Option<f64> {
        if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
    };
    let pooled_fpr = mean(per_view.iter().filter_map(|r| r.fpr).collect());
    let pooled_fnr = mean(per_view.iter().filter_map(|r| r.fnr).collect());
    let pooled_average = match (pooled_fpr, pooled_fnr) {
        (Some(a), Some(b)) => Some(0.5 * (a + b)),
        _ => None,
    };
    Ok(DivisionRates {
        per_view,
        pooled_fpr,
        pooled_fnr,
        pooled_average,
        warnings,
    })
}

/// Histogram of uncertainty scores for the clean and conflicting groups
/// over equal-width bins on `[0, 1]`.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct DensityTable {
    /// `bins + 1` edges from 0 to 1.
    pub edges: Vec<f64>,
    pub clean_counts: Vec<usize>,
    pub conflicting_counts: Vec<usize>,
}

impl DensityTable {
    pub fn to_csv(&self) -> String {
        let mut text = String::from("bin_low,bin_high,clean_count,conflicting_count\n");
        for b in 0..self.clean_counts.len() {
            text.push_str(&format!(
                "{},{},{},{}\n",
                sig9(self.edges[b]),
                sig9(self.edges[b + 1]),
                self.clean_counts[b],
                self.conflicting_counts[b]
            ));
        }
        text
    }
}

pub fn uncertainty_density(
    uncertainties: &[f64],
    is_conflicting: &[bool],
    bins: usize,
) -> Result<DensityTable> {
    if bins < 2 {
        return Err(Error::invalid("need at least 2 bins"));
    }
    if uncertainties.len() != is_conflicting.len() {
        return Err(Error::shape("scores and flags differ in length"));
    }
    let edges: Vec<f64> = (0..=bins).map(|b| b as f64 / bins as f64).collect();
    let mut clean_counts = vec![0usize; bins];
    let mut conflicting_counts = vec![0usize; bins];
    for (&u, &conflicting) in uncertainties.iter().zip(is_conflicting) {
        if !(-1e-9..=1.0 + 1e-9).contains(&u) {
            return Err(Error::invalid(format!("uncertainty {u} outside [0, 1]")));
        }
        let bin = ((u * bins as f64) as usize).min(bins - 1);
        if conflicting {
            conflicting_counts[bin] += 1;
        } else {
            clean_counts[bin] += 1;
        }
    }
    Ok(DensityTable {
        edges,
        clean_counts,
        conflicting_counts,
    })
}

/// Full evaluation of a trained run against a dataset with ground truth.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub test_accuracy: f64,
    /// `None` with a reason when one of the two groups is absent.
    pub fpr95: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fpr95_unavailable_reason: Option<String>,
    pub mean_uncertainty_clean: Option<f64>,
    pub mean_uncertainty_conflicting: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub division: Option<DivisionRates>,
    pub uncertainty_histogram: DensityTable,
}
