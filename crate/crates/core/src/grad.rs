//! Exact reverse-mode gradients of the credibility losses through the whole
//! multi-view graph: dense layers, the normalize-then-clamp membership head,
//! training credibility, conflict-driven fusion weights, and the fused
//! branch.
//!
//! Fusion weights are differentiable functions of the memberships and
//! gradients flow through them by default; `detach_weights` freezes them to
//! their forward values for ablation.
//!
//! Subgradient conventions: `relu'(0) = 0`, the membership clamp passes
//! gradient only where the normalized logit is strictly positive, and max
//! ties inside training credibility route gradient to the lowest tied
//! index.

use crate::data::Matrix;
use crate::error::{Error, Result};
use crate::fusion::WeightTransform;
use crate::fuzzy::OneHot;
use crate::loss::LOG_CLAMP;
use crate::net::{backprop_layers, membership_backward, ForwardCache, Gradients, MlpModel};

/// How the fused branch derives its per-view weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FusionWeighting {
    /// Conflict-driven weights (the training-time fusion rule).
    #[default]
    Conflict,
    /// Plain averaging; used by the single-stage control arm.
    Uniform,
}

/// How the fused branch combines view memberships during training.
#[derive(Debug, Clone)]
pub struct FusionSettings {
    pub transform: WeightTransform,
    /// Treat fusion weights as constants in the backward pass.
    pub detach_weights: bool,
    pub weighting: FusionWeighting,
}

impl Default for FusionSettings {
    fn default() -> Self {
        FusionSettings {
            transform: WeightTransform::Exp,
            detach_weights: false,
            weighting: FusionWeighting::Conflict,
        }
    }
}

/// Total loss of one mini-batch: `gamma * fused + sum of per-view terms`,
/// each per-view sample term optionally scaled by an importance weight.
pub fn ensemble_loss(
    models: &[MlpModel],
    views: &[Matrix],
    labels: &[OneHot],
    gamma: f64,
    importance: Option<&[Vec<f64>]>,
    fusion: &FusionSettings,
) -> Result<f64> {
    let (loss, _) = evaluate(models, views, labels, gamma, importance, fusion, false)?;
    Ok(loss)
}

/// Loss plus exact parameter gradients for every view model.
pub fn ensemble_backward(
    models: &[MlpModel],
    views: &[Matrix],
    labels: &[OneHot],
    gamma: f64,
    importance: Option<&[Vec<f64>]>,
    fusion: &FusionSettings,
) -> Result<(f64, Vec<Gradients>)> {
    let (loss, grads) = evaluate(models, views, labels, gamma, importance, fusion, true)?;
    Ok((loss, grads.expect("gradients requested")))
}

const NORM_FLOOR: f64 = 1e-12;

fn validate(
    models: &[MlpModel],
    views: &[Matrix],
    labels: &[OneHot],
    gamma: f64,
    importance: Option<&[Vec<f64>]>,
) -> Result<()> {
    if models.is_empty() {
        return Err(Error::invalid("no view models"));
    }
    if views.len() != models.len() {
        return Err(Error::shape(format!(
            "{} views but {} models",
            views.len(),
            models.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if gamma != 0.0 && models.len() < 2 {
        return Err(Error::invalid(
            "the fused branch needs at least 2 views; set gamma = 0 for single-view training",
        ));
    }
    let k = models[0].spec.class_count;
    for (v, model) in models.iter().enumerate() {
        if model.spec.class_count != k {
            return Err(Error::shape(format!("view {v} disagrees on class count")));
        }
        if views[v].rows() != labels.len() {
            return Err(Error::shape(format!(
                "view {v} has {} rows, batch has {} labels",
                views[v].rows(),
                labels.len()
            )));
        }
        if views[v].cols() != model.spec.input_dim {
            return Err(Error::shape(format!(
                "view {v} has {} features, model expects {}",
                views[v].cols(),
                model.spec.input_dim
            )));
        }
    }
    for y in labels {
        if y.class_count() != k {
            return Err(Error::shape("label class count disagrees with models"));
        }
    }
    if let Some(imp) = importance {
        if imp.len() != models.len() {
            return Err(Error::shape(format!(
                "{} importance vectors for {} views",
                imp.len(),
                models.len()
            )));
        }
        for (v, d) in imp.iter().enumerate() {
            if d.len() != labels.len() {
                return Err(Error::shape(format!(
                    "importance for view {v} has {} entries, batch has {}",
                    d.len(),
                    labels.len()
                )));
            }
            if let Some(&bad) = d.iter().find(|x| !(0.0..=1.0).contains(*x)) {
                return Err(Error::invalid(format!(
                    "importance weight {bad} outside [0, 1]"
                )));
            }
        }
    }
    Ok(())
}

fn evaluate(
    models: &[MlpModel],
    views: &[Matrix],
    labels: &[OneHot],
    gamma: f64,
    importance: Option<&[Vec<f64>]>,
    fusion: &FusionSettings,
    want_grads: bool,
) -> Result<(f64, Option<Vec<Gradients>>)> {
    validate(models, views, labels, gamma, importance)?;
    let v_count = models.len();
    let batch = labels.len();
    let k = models[0].spec.class_count;
    let inv_batch = 1.0 / batch as f64;

    let mut grads: Option<Vec<Gradients>> =
        want_grads.then(|| models.iter().map(Gradients::zeros_like).collect());
    let mut total = 0.0;

    for i in 0..batch {
        let label = labels[i].class();
        let caches: Vec<ForwardCache> = (0..v_count)
            .map(|v| {
                models[v].forward_cached(views[v].row(i)).map_err(|e| match e {
                    Error::Numeric { context } => Error::numeric(format!("view {v} {context}")),
                    other => other,
                })
            })
            .collect::<Result<_>>()?;

        // dL/dm per view, filled by both branches.
        let mut dmo: Option<Vec<Vec<f64>>> = want_grads.then(|| vec![vec![0.0; k]; v_count]);

        // Per-view credibility terms.
        for v in 0..v_count {
            let weight = importance.map_or(1.0, |imp| imp[v][i]);
            let (r, rival) = train_cred_raw(&caches[v].membership, label);
            let (bce, dr) = bce_and_grad(&r, label);
            total += weight * inv_batch * bce;
            if let Some(dm) = &mut dmo {
                let scale = weight * inv_batch;
                accumulate_train_cred_backward(&dr, label, rival, scale, &mut dm[v]);
            }
        }

        // Fused branch.
        if gamma != 0.0 {
            let memberships: Vec<&[f64]> =
                caches.iter().map(|c| c.membership.as_slice()).collect();
            let uniform_weighting = fusion.weighting == FusionWeighting::Uniform;
            let norms: Vec<f64> = memberships
                .iter()
                .map(|m| m.iter().map(|x| x * x).sum::<f64>().sqrt())
                .collect();
            let mut cosines = vec![0.0; v_count * v_count];
            for t in 0..v_count {
                for j in (t + 1)..v_count {
                    let c = if norms[t] < NORM_FLOOR || norms[j] < NORM_FLOOR {
                        0.0
                    } else {
                        let dot: f64 = memberships[t]
                            .iter()
                            .zip(memberships[j])
                            .map(|(a, b)| a * b)
                            .sum();
                        dot / (norms[t] * norms[j])
                    };
                    cosines[t * v_count + j] = c;
                    cosines[j * v_count + t] = c;
                }
            }
            let scores: Vec<f64> = (0..v_count)
                .map(|t| {
                    let conflict: f64 = (0..v_count)
                        .filter(|&j| j != t)
                        .map(|j| 1.0 - cosines[t * v_count + j])
                        .sum::<f64>()
                        / (v_count - 1) as f64;
                    1.0 - conflict
                })
                .collect();
            let transformed: Vec<f64> = scores.iter().map(|&s| fusion.transform.apply(s)).collect();
            let transformed_sum: f64 = transformed.iter().sum();
            let uniform_fallback = uniform_weighting || transformed_sum <= 0.0;
            let weights: Vec<f64> = if uniform_fallback {
                vec![1.0 / v_count as f64; v_count]
            } else {
                transformed.iter().map(|&t| t / transformed_sum).collect()
            };

            let mut fused = vec![0.0; k];
            for v in 0..v_count {
                for (f, &m) in fused.iter_mut().zip(memberships[v]) {
                    *f += weights[v] * m;
                }
            }
            let (r_a, rival_a) = train_cred_raw(&fused, label);
            let (bce_a, dr_a) = bce_and_grad(&r_a, label);
            total += gamma * inv_batch * bce_a;

            if let Some(dm) = &mut dmo {
                let mut g = vec![0.0; k];
                accumulate_train_cred_backward(&dr_a, label, rival_a, gamma * inv_batch, &mut g);

                // Direct path: m_fused = sum_v w_v m_v.
                for v in 0..v_count {
                    for (acc, &gi) in dm[v].iter_mut().zip(&g) {
                        *acc += weights[v] * gi;
                    }
                }

                // Weight path: w depends on all memberships through the
                // pairwise cosines.
                if !fusion.detach_weights && !uniform_fallback {
                    let q: Vec<f64> = (0..v_count)
                        .map(|v| g.iter().zip(memberships[v]).map(|(a, b)| a * b).sum())
                        .collect();
                    let qw: f64 = q.iter().zip(&weights).map(|(a, b)| a * b).sum();
                    let dscore: Vec<f64> = match fusion.transform {
                        WeightTransform::Exp => (0..v_count)
                            .map(|t| weights[t] * (q[t] - qw))
                            .collect(),
                        WeightTransform::Identity => (0..v_count)
                            .map(|t| (q[t] - qw) / transformed_sum)
                            .collect(),
                    };
                    for t in 0..v_count {
                        // score = 1 - conflict, conflict averages (1 - cos).
                        let dcos = dscore[t] / (v_count - 1) as f64;
                        if dcos == 0.0 {
                            continue;
                        }
                        for j in 0..v_count {
                            if j == t || norms[t] < NORM_FLOOR || norms[j] < NORM_FLOOR {
                                continue;
                            }
                            let c = cosines[t * v_count + j];
                            let inv_tj = 1.0 / (norms[t] * norms[j]);
                            let inv_tt = 1.0 / (norms[t] * norms[t]);
                            let inv_jj = 1.0 / (norms[j] * norms[j]);
                            for idx in 0..k {
                                dm[t][idx] += dcos
                                    * (memberships[j][idx] * inv_tj
                                        - c * memberships[t][idx] * inv_tt);
                                dm[j][idx] += dcos
                                    * (memberships[t][idx] * inv_tj
                                        - c * memberships[j][idx] * inv_jj);
                            }
                        }
                    }
                }
            }
        }

        if let (Some(dm), Some(gs)) = (&dmo, &mut grads) {
            for v in 0..v_count {
                let dlogits = membership_backward(&caches[v], models[v].spec.norm_order, &dm[v]);
                backprop_layers(&models[v], &caches[v], &dlogits, &mut gs[v]);
            }
        }
    }

    if !total.is_finite() {
        return Err(Error::numeric("total loss"));
    }
    if let Some(gs) = &grads {
        if let Some(v) = gs.iter().position(|g| !g.is_finite()) {
            return Err(Error::numeric(format!("gradients of view {v}")));
        }
    }
    Ok((total, grads))
}

/// Training credibility of one membership vector against the true class.
/// Returns the credibility values and the rival index (lowest index
/// attaining the max membership among classes other than the true one).
fn train_cred_raw(m: &[f64], true_class: usize) -> (Vec<f64>, usize) {
    let mut rival = if true_class == 0 { 1 } else { 0 };
    let mut best = f64::NEG_INFINITY;
    for (j, &mj) in m.iter().enumerate() {
        if j != true_class && mj > best {
            best = mj;
            rival = j;
        }
    }
    let true_membership = m[true_class];
    let r = (0..m.len())
        .map(|c| {
            if c == true_class {
                0.5 * (m[c] + 1.0 - best)
            } else {
                0.5 * (m[c] + 1.0 - true_membership)
            }
        })
        .collect();
    (r, rival)
}

/// Pull `dr` (gradient w.r.t. training credibility values, scaled by
/// `scale`) back to the membership vector.
fn accumulate_train_cred_backward(
    dr: &[f64],
    true_class: usize,
    rival: usize,
    scale: f64,
    dm: &mut [f64],
) {
    for (c, &d) in dr.iter().enumerate() {
        let d = d * scale;
        dm[c] += 0.5 * d;
        if c == true_class {
            dm[rival] -= 0.5 * d;
        } else {
            dm[true_class] -= 0.5 * d;
        }
    }
}

/// Class-summed binary cross-entropy with the log clamp, plus its gradient
/// with respect to the credibility values. The gradient is zero where the
/// clamp is active.
fn bce_and_grad(r: &[f64], true_class: usize) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut dr = vec![0.0; r.len()];
    for (c, &raw) in r.iter().enumerate() {
        let clamped = raw.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
        let inside = raw > LOG_CLAMP && raw < 1.0 - LOG_CLAMP;
        if c == true_class {
            loss -= clamped.ln();
            if inside {
                dr[c] = -1.0 / clamped;
            }
        } else {
            loss -= (1.0 - clamped).ln();
            if inside {
                dr[c] = 1.0 / (1.0 - clamped);
            }
        }
    }
    (loss, dr)
}

/// Minimum distance of a batch configuration from the non-smooth regions of
/// the loss surface (hidden ReLU kinks, the membership clamp, training
/// credibility max ties, the log clamp). Finite-difference tests sample
/// configurations until this margin is comfortably positive.
#[doc(hidden)]
pub fn fd_safety_margin(
    models: &[MlpModel],
    views: &[Matrix],
    labels: &[OneHot],
    gamma: f64,
    fusion: &FusionSettings,
) -> Result<f64> {
    validate(models, views, labels, gamma, None)?;
    let v_count = models.len();
    let mut margin = f64::INFINITY;
    for i in 0..labels.len() {
        let label = labels[i].class();
        let mut memberships = Vec::with_capacity(v_count);
        for v in 0..v_count {
            let cache = models[v].forward_cached(views[v].row(i))?;
            if models[v].spec.activation == crate::net::Activation::Relu {
                for pre in &cache.pre_acts {
                    for &x in pre {
                        margin = margin.min(x.abs());
                    }
                }
            }
            margin = margin.min(cache.norm);
            // Coordinates must sit clearly on one side of the clamp; a
            // coordinate pinned at zero is flat and therefore safe.
            for &z in &cache.normalized {
                margin = margin.min(z.abs());
            }
            memberships.push(cache.membership);
        }
        fn credibility_margins(m: &[f64], live: &[bool], label: usize, margin: &mut f64) {
            *margin = margin.min(live_rival_gap(m, live, label));
            let (r, _) = train_cred_raw(m, label);
            for &x in &r {
                *margin = margin.min(x - LOG_CLAMP);
                *margin = margin.min(1.0 - LOG_CLAMP - x);
            }
        }
        for m in &memberships {
            let live: Vec<bool> = m.iter().map(|&x| x > 0.0).collect();
            credibility_margins(m, &live, label, &mut margin);
        }
        if gamma != 0.0 {
            let fused = {
                let refs: Vec<&[f64]> = memberships.iter().map(|m| m.as_slice()).collect();
                fused_membership(&refs, fusion)
            };
            // A fused coordinate moves if any view's membership there does.
            let live: Vec<bool> = (0..fused.len())
                .map(|c| memberships.iter().any(|m| m[c] > 0.0))
                .collect();
            credibility_margins(&fused, &live, label, &mut margin);
        }
    }
    Ok(margin)
}

/// Gap between the two largest *movable* memberships among classes other
/// than the true one. Coordinates pinned at zero by the clamp are constant
/// under small perturbations, so a tie among them is harmless; a pinned
/// runner-up below a live leader is likewise safe because the leader
/// already clears the clamp margin.
fn live_rival_gap(m: &[f64], live: &[bool], true_class: usize) -> f64 {
    let mut best = f64::NEG_INFINITY;
    let mut second = f64::NEG_INFINITY;
    for (j, &mj) in m.iter().enumerate() {
        if j == true_class || !live[j] {
            continue;
        }
        if mj > best {
            second = best;
            best = mj;
        } else if mj > second {
            second = mj;
        }
    }
    if second == f64::NEG_INFINITY {
        f64::INFINITY
    } else {
        best - second
    }
}

fn fused_membership(memberships: &[&[f64]], fusion: &FusionSettings) -> Vec<f64> {
    let v_count = memberships.len();
    let k = memberships[0].len();
    let norms: Vec<f64> = memberships
        .iter()
        .map(|m| m.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let scores: Vec<f64> = (0..v_count)
        .map(|t| {
            let conflict: f64 = (0..v_count)
                .filter(|&j| j != t)
                .map(|j| {
                    let c = if norms[t] < NORM_FLOOR || norms[j] < NORM_FLOOR {
                        0.0
                    } else {
                        let dot: f64 = memberships[t]
                            .iter()
                            .zip(memberships[j])
                            .map(|(a, b)| a * b)
                            .sum();
                        dot / (norms[t] * norms[j])
                    };
                    1.0 - c
                })
                .sum::<f64>()
                / (v_count - 1) as f64;
            1.0 - conflict
        })
        .collect();
    let transformed: Vec<f64> = scores.iter().map(|&s| fusion.transform.apply(s)).collect();
    let total: f64 = transformed.iter().sum();
    let weights: Vec<f64> = if fusion.weighting == FusionWeighting::Uniform || total <= 0.0 {
        vec![1.0 / v_count as f64; v_count]
    } else {
        transformed.iter().map(|&t| t / total).collect()
    };
    let mut fused = vec![0.0; k];
    for v in 0..v_count {
        for (f, &m) in fused.iter_mut().zip(memberships[v]) {
            *f += weights[v] * m;
        }
    }
    fused
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Activation, MlpSpec};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(input: usize, hidden: Vec<usize>, k: usize) -> MlpSpec {
        MlpSpec {
            input_dim: input,
            hidden_dims: hidden,
            class_count: k,
            activation: Activation::Relu,
            norm_order: 2.0,
        }
    }

    fn random_setup(
        seed: u64,
        v_count: usize,
        batch: usize,
        k: usize,
    ) -> (Vec<MlpModel>, Vec<Matrix>, Vec<OneHot>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input_dim = 3;
        let models: Vec<MlpModel> = (0..v_count)
            .map(|v| MlpModel::init(spec(input_dim, vec![5], k), seed * 100 + v as u64).unwrap())
            .collect();
        let views: Vec<Matrix> = (0..v_count)
            .map(|_| {
                Matrix::from_rows(
                    (0..batch)
                        .map(|_| (0..input_dim).map(|_| rng.gen_range(-2.0..2.0)).collect())
                        .collect(),
                )
                .unwrap()
            })
            .collect();
        let labels: Vec<OneHot> = (0..batch)
            .map(|_| OneHot::new(rng.gen_range(0..k), k).unwrap())
            .collect();
        (models, views, labels)
    }

    fn fd_gradients(
        models: &[MlpModel],
        views: &[Matrix],
        labels: &[OneHot],
        gamma: f64,
        importance: Option<&[Vec<f64>]>,
        fusion: &FusionSettings,
    ) -> Vec<Gradients> {
        let h = 1e-5;
        let mut models = models.to_vec();
        let mut out = Vec::new();
        for v in 0..models.len() {
            let mut g = Gradients::zeros_like(&models[v]);
            for layer in 0..models[v].layers.len() {
                for (kind, len) in [(0usize, models[v].layers[layer].weights.len()), (1, models[v].layers[layer].biases.len())] {
                    for idx in 0..len {
                        fn slot(m: &mut MlpModel, layer: usize, kind: usize, idx: usize) -> &mut f64 {
                            if kind == 0 {
                                &mut m.layers[layer].weights[idx]
                            } else {
                                &mut m.layers[layer].biases[idx]
                            }
                        }
                        let read = |models: &[MlpModel]| {
                            ensemble_loss(models, views, labels, gamma, importance, fusion).unwrap()
                        };
                        let orig = *slot(&mut models[v], layer, kind, idx);
                        *slot(&mut models[v], layer, kind, idx) = orig + h;
                        let up = read(&models);
                        *slot(&mut models[v], layer, kind, idx) = orig - h;
                        let down = read(&models);
                        *slot(&mut models[v], layer, kind, idx) = orig;
                        let d = (up - down) / (2.0 * h);
                        if kind == 0 {
                            g.layers[layer].weights[idx] = d;
                        } else {
                            g.layers[layer].biases[idx] = d;
                        }
                    }
                }
            }
            out.push(g);
        }
        out
    }

    fn max_rel_error(analytic: &[Gradients], numeric: &[Gradients]) -> f64 {
        let mut worst: f64 = 0.0;
        for (a, n) in analytic.iter().zip(numeric) {
            for (la, ln) in a.layers.iter().zip(&n.layers) {
                for (x, y) in la
                    .weights
                    .iter()
                    .chain(&la.biases)
                    .zip(ln.weights.iter().chain(&ln.biases))
                {
                    let diff = (x - y).abs();
                    if diff <= 1e-8 {
                        continue;
                    }
                    worst = worst.max(diff / (x.abs() + y.abs()).max(1e-8));
                }
            }
        }
        worst
    }

    fn check_case(seed: u64, gamma: f64, with_importance: bool, fusion: &FusionSettings) {
        let k = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
        for attempt in 0..50 {
            let (models, views, labels) = random_setup(seed + attempt * 1000, 3, 4, k);
            let importance: Option<Vec<Vec<f64>>> = with_importance.then(|| {
                (0..3)
                    .map(|_| (0..4).map(|_| rng.gen_range(0.05..1.0)).collect())
                    .collect()
            });
            let margin = fd_safety_margin(&models, &views, &labels, gamma, fusion).unwrap();
            if margin < 1e-3 {
                continue;
            }
            let (_, analytic) = ensemble_backward(
                &models,
                &views,
                &labels,
                gamma,
                importance.as_deref(),
                fusion,
            )
            .unwrap();
            let numeric = fd_gradients(&models, &views, &labels, gamma, importance.as_deref(), fusion);
            let err = max_rel_error(&analytic, &numeric);
            assert!(err <= 1e-4, "rel err {err} (seed {seed}, gamma {gamma})");
            return;
        }
        panic!("no finite-difference-safe configuration found for seed {seed}");
    }

    #[test]
    fn per_view_gradients_match_finite_differences() {
        for seed in [1, 2, 3] {
            check_case(seed, 0.0, false, &FusionSettings::default());
        }
    }

    #[test]
    fn total_loss_gradients_match_finite_differences() {
        for seed in [4, 5, 6] {
            check_case(seed, 0.8, false, &FusionSettings::default());
        }
    }

    #[test]
    fn robust_loss_gradients_match_finite_differences() {
        for seed in [7, 8, 9] {
            check_case(seed, 0.6, true, &FusionSettings::default());
        }
    }

    /// Loss with the per-sample fusion weights pinned to externally supplied
    /// values, built from the public API. This is what "detached weights"
    /// must differentiate.
    fn frozen_weight_loss(
        models: &[MlpModel],
        views: &[Matrix],
        labels: &[OneHot],
        gamma: f64,
        frozen: &[Vec<f64>],
    ) -> f64 {
        use crate::fuzzy::training_credibility;
        use crate::loss::sample_bce;
        let batch = labels.len();
        let mut total = 0.0;
        for i in 0..batch {
            let memberships: Vec<crate::fuzzy::Membership> = models
                .iter()
                .enumerate()
                .map(|(v, m)| m.forward(views[v].row(i)).unwrap().1)
                .collect();
            for m in &memberships {
                let r = training_credibility(m, &labels[i]).unwrap();
                total += sample_bce(&r, &labels[i]).unwrap() / batch as f64;
            }
            let k = memberships[0].class_count();
            let mut fused = vec![0.0; k];
            for (m, &w) in memberships.iter().zip(&frozen[i]) {
                for (f, &x) in fused.iter_mut().zip(m.values()) {
                    *f += w * x;
                }
            }
            let fused = crate::fuzzy::Membership::new(fused).unwrap();
            let r = training_credibility(&fused, &labels[i]).unwrap();
            total += gamma * sample_bce(&r, &labels[i]).unwrap() / batch as f64;
        }
        total
    }

    #[test]
    fn detached_weights_gradients_match_frozen_weight_finite_differences() {
        use crate::fusion::{train_weights, ViewOpinion};
        let mut fusion_detached = FusionSettings::default();
        fusion_detached.detach_weights = true;
        let gamma = 0.9;
        let h = 1e-5;
        for attempt in 0..50 {
            let (mut models, views, labels) = random_setup(11 + attempt * 1000, 3, 4, 3);
            let margin =
                fd_safety_margin(&models, &views, &labels, gamma, &fusion_detached).unwrap();
            if margin < 1e-3 {
                continue;
            }
            // Weights at the base point, per sample.
            let frozen: Vec<Vec<f64>> = (0..labels.len())
                .map(|i| {
                    let memberships: Vec<crate::fuzzy::Membership> = models
                        .iter()
                        .enumerate()
                        .map(|(v, m)| m.forward(views[v].row(i)).unwrap().1)
                        .collect();
                    let opinions = ViewOpinion::from_memberships(&memberships).unwrap();
                    train_weights(&opinions, WeightTransform::Exp)
                        .unwrap()
                        .values()
                        .to_vec()
                })
                .collect();

            let base = frozen_weight_loss(&models, &views, &labels, gamma, &frozen);
            let (analytic_loss, analytic) =
                ensemble_backward(&models, &views, &labels, gamma, None, &fusion_detached)
                    .unwrap();
            assert!((base - analytic_loss).abs() < 1e-12);

            // Also verify detaching actually changes the gradient.
            let (_, full) = ensemble_backward(
                &models,
                &views,
                &labels,
                gamma,
                None,
                &FusionSettings::default(),
            )
            .unwrap();
            assert_ne!(full, analytic);

            let mut worst: f64 = 0.0;
            for v in 0..models.len() {
                for layer in 0..models[v].layers.len() {
                    for idx in 0..models[v].layers[layer].weights.len() {
                        let orig = models[v].layers[layer].weights[idx];
                        models[v].layers[layer].weights[idx] = orig + h;
                        let up = frozen_weight_loss(&models, &views, &labels, gamma, &frozen);
                        models[v].layers[layer].weights[idx] = orig - h;
                        let down = frozen_weight_loss(&models, &views, &labels, gamma, &frozen);
                        models[v].layers[layer].weights[idx] = orig;
                        let fd = (up - down) / (2.0 * h);
                        let an = analytic[v].layers[layer].weights[idx];
                        let diff = (fd - an).abs();
                        if diff > 1e-8 {
                            worst = worst.max(diff / (fd.abs() + an.abs()).max(1e-8));
                        }
                    }
                }
            }
            assert!(worst <= 1e-4, "rel err {worst}");
            return;
        }
        panic!("no finite-difference-safe configuration found");
    }

    #[test]
    fn identity_transform_gradients_match_finite_differences() {
        let fusion = FusionSettings {
            transform: WeightTransform::Identity,
            ..FusionSettings::default()
        };
        check_case(21, 0.7, false, &fusion);
    }

    #[test]
    fn tanh_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let k = 3;
        let models: Vec<MlpModel> = (0..2)
            .map(|v| {
                MlpModel::init(
                    MlpSpec {
                        input_dim: 3,
                        hidden_dims: vec![4],
                        class_count: k,
                        activation: Activation::Tanh,
                        norm_order: 2.0,
                    },
                    700 + v,
                )
                .unwrap()
            })
            .collect();
        let views: Vec<Matrix> = (0..2)
            .map(|_| {
                Matrix::from_rows(
                    (0..3)
                        .map(|_| (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect())
                        .collect(),
                )
                .unwrap()
            })
            .collect();
        let labels: Vec<OneHot> = (0..3)
            .map(|_| OneHot::new(rng.gen_range(0..k), k).unwrap())
            .collect();
        let fusion = FusionSettings::default();
        let margin = fd_safety_margin(&models, &views, &labels, 0.5, &fusion).unwrap();
        assert!(margin > 1e-3, "margin {margin}");
        let (_, analytic) =
            ensemble_backward(&models, &views, &labels, 0.5, None, &fusion).unwrap();
        let numeric = fd_gradients(&models, &views, &labels, 0.5, None, &fusion);
        let err = max_rel_error(&analytic, &numeric);
        assert!(err <= 1e-4, "rel err {err}");
    }

    #[test]
    fn zero_importance_zeroes_per_view_gradients() {
        let (models, views, labels) = random_setup(41, 2, 3, 3);
        let importance = vec![vec![0.0; 3]; 2];
        let (_, grads) = ensemble_backward(
            &models,
            &views,
            &labels,
            0.0,
            Some(&importance),
            &FusionSettings::default(),
        )
        .unwrap();
        for g in &grads {
            for layer in &g.layers {
                assert!(layer.weights.iter().all(|&x| x == 0.0));
                assert!(layer.biases.iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn duplicated_sample_leaves_gradient_unchanged() {
        let (models, views, labels) = random_setup(43, 2, 1, 3);
        let (loss1, grads1) =
            ensemble_backward(&models, &views, &labels, 0.5, None, &FusionSettings::default())
                .unwrap();
        let views2: Vec<Matrix> = views
            .iter()
            .map(|m| {
                Matrix::from_rows(vec![m.row(0).to_vec(), m.row(0).to_vec()]).unwrap()
            })
            .collect();
        let labels2 = vec![labels[0], labels[0]];
        let (loss2, grads2) =
            ensemble_backward(&models, &views2, &labels2, 0.5, None, &FusionSettings::default())
                .unwrap();
        assert!((loss1 - loss2).abs() < 1e-12);
        for (a, b) in grads1.iter().zip(&grads2) {
            for (la, lb) in a.layers.iter().zip(&b.layers) {
                for (x, y) in la.weights.iter().zip(&lb.weights) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn loss_agrees_with_public_composition() {
        // The internal graph must produce the same value as composing the
        // public membership / fusion / loss APIs.
        use crate::fusion::{fuse, train_weights, ViewOpinion};
        use crate::fuzzy::training_credibility;
        use crate::loss::total_loss;

        let (models, views, labels) = random_setup(47, 3, 5, 3);
        let gamma = 0.7;
        let internal = ensemble_loss(
            &models,
            &views,
            &labels,
            gamma,
            None,
            &FusionSettings::default(),
        )
        .unwrap();

        let batch = labels.len();
        let mut fused_r = Vec::new();
        let mut per_view_r: Vec<Vec<crate::fuzzy::Credibility>> = vec![Vec::new(); 3];
        for i in 0..batch {
            let memberships: Vec<crate::fuzzy::Membership> = (0..3)
                .map(|v| models[v].forward(views[v].row(i)).unwrap().1)
                .collect();
            for v in 0..3 {
                per_view_r[v].push(training_credibility(&memberships[v], &labels[i]).unwrap());
            }
            let opinions = ViewOpinion::from_memberships(&memberships).unwrap();
            let weights = train_weights(&opinions, WeightTransform::Exp).unwrap();
            let fused = fuse(&opinions, &weights).unwrap();
            fused_r.push(training_credibility(&fused.membership, &labels[i]).unwrap());
        }
        let labels_vec: Vec<OneHot> = labels.clone();
        let public = total_loss(&fused_r, &per_view_r, &labels_vec, gamma).unwrap();
        assert!(
            (internal - public).abs() < 1e-12,
            "internal {internal} public {public}"
        );
    }

    #[test]
    fn membership_gradient_is_orthogonal_to_logits_for_p2() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let model = MlpModel::init(spec(3, vec![], 4), 5).unwrap();
        for _ in 0..20 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let cache = model.forward_cached(&x).unwrap();
            if cache.norm < 1e-6 {
                continue;
            }
            let dm: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let dlogits = membership_backward(&cache, 2.0, &dm);
            let dot: f64 = dlogits.iter().zip(&cache.logits).map(|(a, b)| a * b).sum();
            let scale: f64 = dlogits.iter().map(|v| v.abs()).sum::<f64>() + 1e-12;
            assert!(dot.abs() / scale < 1e-9, "projection violated: {dot}");
        }
    }
}
