//! Clean/conflicting division from per-view loss statistics.
//!
//! Networks fit clean views faster than conflicting ones, so the per-view
//! loss averaged over the cyclical-training epochs separates the two
//! populations. A two-component univariate Gaussian mixture is fitted by EM
//! per view; the posterior of the lower-mean (clean) component scores each
//! (instance, view) pair, a threshold `beta` splits clean from conflicting,
//! and conflicting pairs keep their posterior as an importance weight.

use crate::data::Matrix;
use crate::error::{Error, Result};

/// Per-instance, per-view, per-epoch losses recorded during cyclical
/// training. Stored epoch-major so epochs append cheaply.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTrace {
    instances: usize,
    views: usize,
    epochs: usize,
    values: Vec<f64>,
}

impl LossTrace {
    pub fn new(instances: usize, views: usize) -> Self {
        LossTrace {
            instances,
            views,
            epochs: 0,
            values: Vec::new(),
        }
    }

    pub fn instances(&self) -> usize {
        self.instances
    }

    pub fn views(&self) -> usize {
        self.views
    }

    pub fn epochs(&self) -> usize {
        self.epochs
    }

    /// Append one epoch of losses, laid out instance-major (`N * V` values).
    pub fn push_epoch(&mut self, losses: &[f64]) -> Result<()> {
        if losses.len() != self.instances * self.views {
            return Err(Error::shape(format!(
                "epoch slice has {} values, expected {}",
                losses.len(),
                self.instances * self.views
            )));
        }
        if let Some(&bad) = losses.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::invalid(format!("loss value {bad} invalid in trace")));
        }
        self.values.extend_from_slice(losses);
        self.epochs += 1;
        Ok(())
    }

    pub fn value(&self, instance: usize, view: usize, epoch: usize) -> f64 {
        self.values[epoch * self.instances * self.views + instance * self.views + view]
    }

    /// The trace restricted to the first `epochs` epochs; a run with a
    /// shorter cyclical stage produces exactly this prefix, since the
    /// learning-rate schedule depends only on the epoch index within a
    /// cycle.
    pub fn prefix(&self, epochs: usize) -> Result<LossTrace> {
        if epochs == 0 || epochs > self.epochs {
            return Err(Error::invalid(format!(
                "prefix of {epochs} epochs out of range (have {})",
                self.epochs
            )));
        }
        Ok(LossTrace {
            instances: self.instances,
            views: self.views,
            epochs,
            values: self.values[..epochs * self.instances * self.views].to_vec(),
        })
    }

    /// Arithmetic mean over epochs: an `N x V` matrix.
    pub fn average_view_losses(&self) -> Result<Matrix> {
        if self.epochs == 0 {
            return Err(Error::invalid("trace has no epochs"));
        }
        let mut out = Matrix::zeros(self.instances, self.views);
        let stride = self.instances * self.views;
        for epoch in 0..self.epochs {
            let block = &self.values[epoch * stride..(epoch + 1) * stride];
            for i in 0..self.instances {
                let row = out.row_mut(i);
                for v in 0..self.views {
                    row[v] += block[i * self.views + v];
                }
            }
        }
        let scale = 1.0 / self.epochs as f64;
        for i in 0..self.instances {
            for v in out.row_mut(i) {
                *v *= scale;
            }
        }
        Ok(out)
    }
}

/// A fitted two-component univariate Gaussian mixture, canonicalized so
/// component 0 (clean) has the smaller mean.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmFit {
    pub weights: [f64; 2],
    pub means: [f64; 2],
    pub variances: [f64; 2],
    pub iterations: usize,
    pub log_likelihood: f64,
    /// Log-likelihood after every EM iteration.
    pub ll_history: Vec<f64>,
}

impl GmmFit {
    /// Posterior probability that `loss` belongs to the clean (lower-mean)
    /// component.
    pub fn posterior_clean(&self, loss: f64) -> f64 {
        let l0 = self.weights[0].ln() + log_normal_pdf(loss, self.means[0], self.variances[0]);
        let l1 = self.weights[1].ln() + log_normal_pdf(loss, self.means[1], self.variances[1]);
        let m = l0.max(l1);
        let e0 = (l0 - m).exp();
        let e1 = (l1 - m).exp();
        e0 / (e0 + e1)
    }
}

fn log_normal_pdf(x: f64, mean: f64, variance: f64) -> f64 {
    let d = x - mean;
    -0.5 * (2.0 * std::f64::consts::PI * variance).ln() - d * d / (2.0 * variance)
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Fit a two-component mixture by EM. Initialization is deterministic:
/// means at the 25th and 75th percentiles, both variances at the data
/// variance, equal mixing weights. Stops when the log-likelihood moves less
/// than `tol` or after `max_iters` iterations.
pub fn fit_gmm(losses: &[f64], max_iters: usize, tol: f64) -> Result<GmmFit> {
    let n = losses.len();
    if n < 4 {
        return Err(Error::invalid(format!(
            "need at least 4 samples to fit a mixture, got {n}"
        )));
    }
    if let Some(&bad) = losses.iter().find(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("non-finite loss {bad}")));
    }
    let first = losses[0];
    if losses.iter().all(|&v| v == first) {
        return Err(Error::degenerate(
            "all loss values identical; no mixture structure",
        ));
    }
    if max_iters == 0 {
        return Err(Error::invalid("max_iters must be positive"));
    }

    let mean: f64 = losses.iter().sum::<f64>() / n as f64;
    let data_variance: f64 = losses.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let variance_floor = (1e-6 * data_variance).max(1e-12);

    let mut sorted = losses.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut means = [percentile(&sorted, 0.25), percentile(&sorted, 0.75)];
    let mut variances = [data_variance.max(variance_floor); 2];
    let mut weights = [0.5f64, 0.5];

    let mut ll_history = Vec::new();
    let mut responsibilities = vec![0.0; n]; // P(component 0 | x)
    let mut last_ll = f64::NEG_INFINITY;
    let mut iterations = 0;

    for _ in 0..max_iters {
        // E step, accumulating the log-likelihood of the current parameters.
        let mut ll = 0.0;
        for (i, &x) in losses.iter().enumerate() {
            let l0 = weights[0].ln() + log_normal_pdf(x, means[0], variances[0]);
            let l1 = weights[1].ln() + log_normal_pdf(x, means[1], variances[1]);
            let m = l0.max(l1);
            let e0 = (l0 - m).exp();
            let e1 = (l1 - m).exp();
            responsibilities[i] = e0 / (e0 + e1);
            ll += m + (e0 + e1).ln();
        }
        debug_assert!(
            ll_history.last().is_none_or(|&prev: &f64| ll >= prev - 1e-9 * prev.abs().max(1.0)),
            "EM log-likelihood decreased"
        );
        ll_history.push(ll);
        iterations += 1;
        let converged = (ll - last_ll).abs() < tol;
        last_ll = ll;

        // M step.
        let r0: f64 = responsibilities.iter().sum();
        let r1 = n as f64 - r0;
        if r0 > 0.0 {
            let mu0 = losses
                .iter()
                .zip(&responsibilities)
                .map(|(&x, &r)| x * r)
                .sum::<f64>()
                / r0;
            let var0 = losses
                .iter()
                .zip(&responsibilities)
                .map(|(&x, &r)| r * (x - mu0) * (x - mu0))
                .sum::<f64>()
                / r0;
            means[0] = mu0;
            variances[0] = var0.max(variance_floor);
        }
        if r1 > 0.0 {
            let mu1 = losses
                .iter()
                .zip(&responsibilities)
                .map(|(&x, &r)| x * (1.0 - r))
                .sum::<f64>()
                / r1;
            let var1 = losses
                .iter()
                .zip(&responsibilities)
                .map(|(&x, &r)| (1.0 - r) * (x - mu1) * (x - mu1))
                .sum::<f64>()
                / r1;
            means[1] = mu1;
            variances[1] = var1.max(variance_floor);
        }
        weights[0] = (r0 / n as f64).clamp(1e-12, 1.0 - 1e-12);
        weights[1] = 1.0 - weights[0];

        if converged {
            break;
        }
    }

    // Canonicalize: component 0 is the lower-mean (clean) component.
    if means[0] > means[1] {
        means.swap(0, 1);
        variances.swap(0, 1);
        weights.swap(0, 1);
    }

    Ok(GmmFit {
        weights,
        means,
        variances,
        iterations,
        log_likelihood: last_ll,
        ll_history,
    })
}

/// Division settings for the conflict-identification stage.
#[derive(Debug, Clone)]
pub struct DivisionConfig {
    /// Posterior threshold; a pair is clean iff its clean posterior exceeds
    /// this (a posterior exactly at the threshold counts as conflicting).
    pub beta: f64,
    /// Fit one mixture over all views' losses instead of one per view.
    pub pooled: bool,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for DivisionConfig {
    fn default() -> Self {
        DivisionConfig {
            beta: 0.5,
            pooled: false,
            max_iters: 200,
            tol: 1e-6,
        }
    }
}

/// Clean/conflicting partition with posteriors and importance weights per
/// (instance, view) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct DivisionResult {
    instances: usize,
    views: usize,
    avg_losses: Vec<f64>,
    posteriors: Vec<f64>,
    clean: Vec<bool>,
    pub beta: f64,
}

impl DivisionResult {
    pub fn instances(&self) -> usize {
        self.instances
    }

    pub fn views(&self) -> usize {
        self.views
    }

    pub fn posterior(&self, instance: usize, view: usize) -> f64 {
        self.posteriors[instance * self.views + view]
    }

    pub fn is_clean(&self, instance: usize, view: usize) -> bool {
        self.clean[instance * self.views + view]
    }

    pub fn avg_loss(&self, instance: usize, view: usize) -> f64 {
        self.avg_losses[instance * self.views + view]
    }

    /// Importance weight: 1 on the clean set, the clean posterior on the
    /// conflicting set.
    pub fn importance(&self, instance: usize, view: usize) -> f64 {
        if self.is_clean(instance, view) {
            1.0
        } else {
            self.posterior(instance, view)
        }
    }

    pub fn clean_indices(&self, view: usize) -> Vec<usize> {
        (0..self.instances)
            .filter(|&i| self.is_clean(i, view))
            .collect()
    }

    pub fn conflicting_indices(&self, view: usize) -> Vec<usize> {
        (0..self.instances)
            .filter(|&i| !self.is_clean(i, view))
            .collect()
    }

    /// Per-view importance vectors, aligned with instance order.
    pub fn importance_by_view(&self) -> Vec<Vec<f64>> {
        (0..self.views)
            .map(|v| (0..self.instances).map(|i| self.importance(i, v)).collect())
            .collect()
    }

    pub fn clean_fraction(&self) -> f64 {
        self.clean.iter().filter(|&&c| c).count() as f64 / self.clean.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut text =
            String::from("instance_id,view_id,avg_loss,posterior_clean,is_clean,importance_weight\n");
        for i in 0..self.instances {
            for v in 0..self.views {
                text.push_str(&format!(
                    "{i},{v},{},{},{},{}\n",
                    crate::metrics::sig9(self.avg_loss(i, v)),
                    crate::metrics::sig9(self.posterior(i, v)),
                    self.is_clean(i, v),
                    crate::metrics::sig9(self.importance(i, v)),
                ));
            }
        }
        text
    }

    pub fn from_csv(text: &str) -> Result<DivisionResult> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::invalid("empty division csv"))?;
        let expected = "instance_id,view_id,avg_loss,posterior_clean,is_clean,importance_weight";
        if header.trim() != expected {
            return Err(Error::invalid(format!("unexpected division header '{header}'")));
        }
        let mut rows = Vec::new();
        let mut max_i = 0usize;
        let mut max_v = 0usize;
        for (idx, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 6 {
                return Err(Error::invalid(format!(
                    "division csv line {} has {} cells",
                    idx + 2,
                    cells.len()
                )));
            }
            let i: usize = cells[0].parse().map_err(|_| Error::invalid("bad instance_id"))?;
            let v: usize = cells[1].parse().map_err(|_| Error::invalid("bad view_id"))?;
            let avg: f64 = cells[2].parse().map_err(|_| Error::invalid("bad avg_loss"))?;
            let post: f64 = cells[3].parse().map_err(|_| Error::invalid("bad posterior"))?;
            let clean: bool = cells[4].parse().map_err(|_| Error::invalid("bad is_clean"))?;
            max_i = max_i.max(i);
            max_v = max_v.max(v);
            rows.push((i, v, avg, post, clean));
        }
        if rows.is_empty() {
            return Err(Error::invalid("division csv has no rows"));
        }
        let instances = max_i + 1;
        let views = max_v + 1;
        if rows.len() != instances * views {
            return Err(Error::invalid("division csv does not cover the full grid"));
        }
        let mut avg_losses = vec![0.0; instances * views];
        let mut posteriors = vec![0.0; instances * views];
        let mut clean = vec![false; instances * views];
        for (i, v, avg, post, is_clean) in rows {
            avg_losses[i * views + v] = avg;
            posteriors[i * views + v] = post;
            clean[i * views + v] = is_clean;
        }
        Ok(DivisionResult {
            instances,
            views,
            avg_losses,
            posteriors,
            clean,
            beta: f64::NAN, // not stored in the CSV
        })
    }
}

/// Apply already-fitted mixtures (one per view) to an `N x V` matrix of
/// average losses.
pub fn divide(avg_losses: &Matrix, fits: &[GmmFit], beta: f64) -> Result<DivisionResult> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::invalid("beta must be in [0, 1]"));
    }
    let views = avg_losses.cols();
    if fits.len() != views {
        return Err(Error::shape(format!(
            "{} fits for {} views",
            fits.len(),
            views
        )));
    }
    let instances = avg_losses.rows();
    let mut posteriors = vec![0.0; instances * views];
    let mut clean = vec![false; instances * views];
    for i in 0..instances {
        for v in 0..views {
            let p = fits[v].posterior_clean(avg_losses.row(i)[v]);
            posteriors[i * views + v] = p;
            clean[i * views + v] = p > beta;
        }
    }
    Ok(DivisionResult {
        instances,
        views,
        avg_losses: avg_losses.values().to_vec(),
        posteriors,
        clean,
        beta,
    })
}

/// Average a trace, fit mixtures (per view by default, pooled on request),
/// and divide at `beta`. Degenerate per-view data surfaces the view index.
pub fn divide_trace(trace: &LossTrace, cfg: &DivisionConfig) -> Result<DivisionResult> {
    let avg = trace.average_view_losses()?;
    let views = trace.views();
    let fits: Vec<GmmFit> = if cfg.pooled {
        let fit = fit_gmm(avg.values(), cfg.max_iters, cfg.tol)
            .map_err(|e| Error::degenerate(format!("pooled mixture: {e}")))?;
        vec![fit; views]
    } else {
        (0..views)
            .map(|v| {
                let column: Vec<f64> = (0..trace.instances()).map(|i| avg.row(i)[v]).collect();
                fit_gmm(&column, cfg.max_iters, cfg.tol)
                    .map_err(|e| Error::degenerate(format!("view {v} mixture: {e}")))
            })
            .collect::<Result<_>>()?
    };
    divide(&avg, &fits, cfg.beta)
}
