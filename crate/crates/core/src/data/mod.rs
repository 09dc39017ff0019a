//! Multi-view datasets: representation, synthetic generation, train/test
//! splitting, and the corruption protocol (view misalignment plus Gaussian
//! feature noise) with ground-truth conflict labels.

pub mod io;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Dense row-major matrix of feature values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        let n = rows.len();
        let mut data = Vec::with_capacity(n * cols);
        for row in rows {
            data.extend(row);
        }
        Ok(Matrix {
            rows: n,
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(indices.len(), self.cols);
        for (dst, &src) in indices.iter().enumerate() {
            out.row_mut(dst).copy_from_slice(self.row(src));
        }
        out
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }
}

/// Per-(instance, view) corruption state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewStatus {
    Clean,
    Misaligned,
    Noisy,
}

impl ViewStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            ViewStatus::Clean => "clean",
            ViewStatus::Misaligned => "misaligned",
            ViewStatus::Noisy => "noisy",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(ViewStatus::Clean),
            "misaligned" => Ok(ViewStatus::Misaligned),
            "noisy" => Ok(ViewStatus::Noisy),
            other => Err(Error::invalid(format!("unknown view status '{other}'"))),
        }
    }
}

/// Ground-truth corruption record: a status per (instance, view) and the
/// label the stored features actually represent. Clean views carry the
/// instance label, misaligned views the donor's label, noisy views `None`
/// (the features no longer cleanly represent any class).
#[derive(Debug, Clone, PartialEq)]
pub struct ConflictLabels {
    instances: usize,
    views: usize,
    status: Vec<ViewStatus>,
    effective: Vec<Option<usize>>,
}

impl ConflictLabels {
    pub fn all_clean(labels: &[usize], views: usize) -> Self {
        let instances = labels.len();
        let mut effective = Vec::with_capacity(instances * views);
        for &label in labels {
            for _ in 0..views {
                effective.push(Some(label));
            }
        }
        ConflictLabels {
            instances,
            views,
            status: vec![ViewStatus::Clean; instances * views],
            effective,
        }
    }

    pub(crate) fn from_parts(
        instances: usize,
        views: usize,
        status: Vec<ViewStatus>,
        effective: Vec<Option<usize>>,
    ) -> Result<Self> {
        if status.len() != instances * views || effective.len() != instances * views {
            return Err(Error::shape("conflict label dimensions disagree"));
        }
        Ok(ConflictLabels {
            instances,
            views,
            status,
            effective,
        })
    }

    pub fn instances(&self) -> usize {
        self.instances
    }

    pub fn views(&self) -> usize {
        self.views
    }

    pub fn status(&self, instance: usize, view: usize) -> ViewStatus {
        self.status[instance * self.views + view]
    }

    pub fn effective_label(&self, instance: usize, view: usize) -> Option<usize> {
        self.effective[instance * self.views + view]
    }

    pub fn is_view_conflicting(&self, instance: usize, view: usize) -> bool {
        self.status(instance, view) != ViewStatus::Clean
    }

    pub fn is_instance_conflicting(&self, instance: usize) -> bool {
        (0..self.views).any(|v| self.is_view_conflicting(instance, v))
    }

    /// Alignment indicator for a view pair: 1 when both views carry the same
    /// defined effective label (clean views carry the instance label, so two
    /// clean views are always aligned).
    pub fn aligned(&self, instance: usize, view_a: usize, view_b: usize) -> bool {
        match (
            self.effective_label(instance, view_a),
            self.effective_label(instance, view_b),
        ) {
            (Some(a), Some(b)) => a == b,
            _ => false,
        }
    }

    /// True when every view pair of the instance is aligned.
    pub fn instance_fully_aligned(&self, instance: usize) -> bool {
        for a in 0..self.views {
            for b in (a + 1)..self.views {
                if !self.aligned(instance, a, b) {
                    return false;
                }
            }
        }
        true
    }

    fn set(&mut self, instance: usize, view: usize, status: ViewStatus, effective: Option<usize>) {
        self.status[instance * self.views + view] = status;
        self.effective[instance * self.views + view] = effective;
    }

    pub fn select(&self, indices: &[usize]) -> ConflictLabels {
        let mut status = Vec::with_capacity(indices.len() * self.views);
        let mut effective = Vec::with_capacity(indices.len() * self.views);
        for &i in indices {
            for v in 0..self.views {
                status.push(self.status(i, v));
                effective.push(self.effective_label(i, v));
            }
        }
        ConflictLabels {
            instances: indices.len(),
            views: self.views,
            status,
            effective,
        }
    }
}

/// A labeled dataset of `V` feature matrices over the same instances.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewDataset {
    pub views: Vec<Matrix>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    /// Corruption ground truth, when known.
    pub conflicts: Option<ConflictLabels>,
}

impl MultiViewDataset {
    pub fn new(views: Vec<Matrix>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let ds = MultiViewDataset {
            views,
            labels,
            class_count,
            conflicts: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.views.is_empty() {
            return Err(Error::invalid("dataset has no views"));
        }
        let n = self.labels.len();
        if n == 0 {
            return Err(Error::invalid("dataset has no instances"));
        }
        for (v, m) in self.views.iter().enumerate() {
            if m.rows() != n {
                return Err(Error::shape(format!(
                    "view {v} has {} rows, labels have {n}",
                    m.rows()
                )));
            }
            if let Some(bad) = m.values().iter().find(|x| !x.is_finite()) {
                return Err(Error::invalid(format!(
                    "view {v} contains non-finite value {bad}"
                )));
            }
        }
        if self.class_count < 2 {
            return Err(Error::invalid("class_count must be >= 2"));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.class_count) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {} classes",
                self.class_count
            )));
        }
        if let Some(c) = &self.conflicts {
            if c.instances() != n || c.views() != self.views.len() {
                return Err(Error::shape("conflict labels do not match dataset"));
            }
        }
        Ok(())
    }

    pub fn instance_count(&self) -> usize {
        self.labels.len()
    }

    pub fn view_count(&self) -> usize {
        self.views.len()
    }

    pub fn view_dims(&self) -> Vec<usize> {
        self.views.iter().map(|m| m.cols()).collect()
    }

    /// Content hash over shapes, feature bits, and labels.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.views.len() as u64).to_le_bytes());
        hasher.update((self.labels.len() as u64).to_le_bytes());
        hasher.update((self.class_count as u64).to_le_bytes());
        for m in &self.views {
            hasher.update((m.cols() as u64).to_le_bytes());
            for v in m.values() {
                hasher.update(v.to_le_bytes());
            }
        }
        for &l in &self.labels {
            hasher.update((l as u64).to_le_bytes());
        }
        format!("sha256:{:x}", hasher.finalize())
    }

    pub fn select(&self, indices: &[usize]) -> MultiViewDataset {
        MultiViewDataset {
            views: self.views.iter().map(|m| m.select_rows(indices)).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            conflicts: self.conflicts.as_ref().map(|c| c.select(indices)),
        }
    }
}

/// Parameters of the corruption protocol.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorruptionSpec {
    /// Fraction of instances whose views get misaligned.
    pub misalign_rate: f64,
    /// Views corrupted per selected instance; defaults to `V - 2`, floored
    /// at 1 so two-view datasets still get corrupted.
    pub views_per_instance: Option<usize>,
    /// Fraction of instances receiving additive Gaussian noise.
    pub noise_rate: f64,
    pub noise_std: f64,
    pub noise_mean: f64,
    pub seed: u64,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        CorruptionSpec {
            misalign_rate: 0.0,
            views_per_instance: None,
            noise_rate: 0.10,
            noise_std: 0.5,
            noise_mean: 0.0,
            seed: 0,
        }
    }
}

/// Isotropic Gaussian blobs: one blob per (class, view), with the blob mean
/// drawn uniformly on a sphere of radius `separation` and unit feature
/// noise. Labels are balanced up to the remainder.
pub fn generate_synthetic(
    views: usize,
    classes: usize,
    instances: usize,
    dims: &[usize],
    separation: f64,
    seed: u64,
) -> Result<MultiViewDataset> {
    if views == 0 || classes < 2 || instances == 0 {
        return Err(Error::invalid(
            "views, classes (>= 2) and instances must be positive",
        ));
    }
    if dims.len() != views {
        return Err(Error::shape(format!(
            "{} views but {} dims",
            views,
            dims.len()
        )));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::invalid("view dims must be positive"));
    }
    if !(separation >= 0.0) {
        return Err(Error::invalid("separation must be >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Blob means first, in (view, class) order.
    let mut means: Vec<Vec<Vec<f64>>> = Vec::with_capacity(views);
    for &d in dims {
        let mut per_class = Vec::with_capacity(classes);
        for _ in 0..classes {
            let mut dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                dir.iter_mut().for_each(|x| *x *= separation / norm);
            }
            per_class.push(dir);
        }
        means.push(per_class);
    }

    let labels: Vec<usize> = (0..instances).map(|i| i % classes).collect();
    let mut view_matrices: Vec<Matrix> = dims.iter().map(|&d| Matrix::zeros(instances, d)).collect();
    for i in 0..instances {
        let class = labels[i];
        for v in 0..views {
            let mean = &means[v][class];
            let row = view_matrices[v].row_mut(i);
            for (x, mu) in row.iter_mut().zip(mean) {
                let z: f64 = rng.sample(StandardNormal);
                *x = mu + z;
            }
        }
    }

    let mut ds = MultiViewDataset::new(view_matrices, labels, classes)?;
    ds.conflicts = Some(ConflictLabels::all_clean(&ds.labels, views));
    Ok(ds)
}

/// Seeded shuffle-and-cut split. No stratification: class presence in both
/// halves is not guaranteed.
pub fn split(
    ds: &MultiViewDataset,
    train_ratio: f64,
    seed: u64,
) -> Result<(MultiViewDataset, MultiViewDataset)> {
    if !(train_ratio > 0.0 && train_ratio < 1.0) {
        return Err(Error::invalid("train ratio must be in (0, 1)"));
    }
    let n = ds.instance_count();
    if n < 2 {
        return Err(Error::invalid("need at least 2 instances to split"));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let train_count = ((train_ratio * n as f64).round() as usize).clamp(1, n - 1);
    let (train_idx, test_idx) = indices.split_at(train_count);
    Ok((ds.select(train_idx), ds.select(test_idx)))
}

/// Replace feature rows of randomly chosen views with rows borrowed from
/// donor instances of a different class, so the corrupted views stay
/// in-distribution for the wrong label. Conflict labels record the donor's
/// class as the effective label.
pub fn inject_misalignment(
    ds: &MultiViewDataset,
    spec: &CorruptionSpec,
) -> Result<MultiViewDataset> {
    ds.validate()?;
    let n = ds.instance_count();
    let v_count = ds.view_count();
    if v_count < 2 {
        return Err(Error::invalid("misalignment needs at least 2 views"));
    }
    if !(0.0..=1.0).contains(&spec.misalign_rate) {
        return Err(Error::invalid("misalign_rate must be in [0, 1]"));
    }
    let per_instance = spec
        .views_per_instance
        .unwrap_or_else(|| v_count.saturating_sub(2).max(1));
    if per_instance == 0 || per_instance >= v_count {
        return Err(Error::invalid(format!(
            "views_per_instance {per_instance} must be in [1, {}]",
            v_count - 1
        )));
    }

    let mut out = ds.clone();
    let mut conflicts = ds
        .conflicts
        .clone()
        .unwrap_or_else(|| ConflictLabels::all_clean(&ds.labels, v_count));

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let count = (spec.misalign_rate * n as f64).round() as usize;

    let mut view_order: Vec<usize> = (0..v_count).collect();
    for &i in order.iter().take(count) {
        view_order.shuffle(&mut rng);
        for &view in view_order.iter().take(per_instance) {
            let donors: Vec<usize> = (0..n).filter(|&j| ds.labels[j] != ds.labels[i]).collect();
            if donors.is_empty() {
                return Err(Error::degenerate(
                    "no donor instance with a different class label",
                ));
            }
            let donor = donors[rng.gen_range(0..donors.len())];
            // Donor rows come from the uncorrupted input dataset.
            let donor_row = ds.views[view].row(donor).to_vec();
            out.views[view].row_mut(i).copy_from_slice(&donor_row);
            conflicts.set(i, view, ViewStatus::Misaligned, Some(ds.labels[donor]));
        }
    }
    out.conflicts = Some(conflicts);
    Ok(out)
}

/// Add zero-mean Gaussian noise to a uniform-random number of views (in
/// `[1, V]`) for a fraction of instances. Intended for the test split; the
/// caller decides where to apply it.
pub fn inject_noise(ds: &MultiViewDataset, spec: &CorruptionSpec) -> Result<MultiViewDataset> {
    ds.validate()?;
    let n = ds.instance_count();
    let v_count = ds.view_count();
    if !(0.0..=1.0).contains(&spec.noise_rate) {
        return Err(Error::invalid("noise_rate must be in [0, 1]"));
    }
    if !(spec.noise_std >= 0.0) {
        return Err(Error::invalid("noise_std must be >= 0"));
    }

    let mut out = ds.clone();
    let mut conflicts = ds
        .conflicts
        .clone()
        .unwrap_or_else(|| ConflictLabels::all_clean(&ds.labels, v_count));
    // A zero-std, zero-mean perturbation leaves the features untouched and
    // is not a corruption.
    let perturbs = spec.noise_std > 0.0 || spec.noise_mean != 0.0;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let count = (spec.noise_rate * n as f64).round() as usize;

    let mut view_order: Vec<usize> = (0..v_count).collect();
    for &i in order.iter().take(count) {
        let how_many = rng.gen_range(1..=v_count);
        view_order.shuffle(&mut rng);
        for &view in view_order.iter().take(how_many) {
            for x in out.views[view].row_mut(i) {
                let z: f64 = rng.sample(StandardNormal);
                *x += spec.noise_mean + spec.noise_std * z;
            }
            if perturbs {
                conflicts.set(i, view, ViewStatus::Noisy, None);
            }
        }
    }
    out.conflicts = Some(conflicts);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> CorruptionSpec {
        CorruptionSpec {
            misalign_rate: 1.0,
            views_per_instance: None,
            noise_rate: 0.5,
            noise_std: 0.5,
            noise_mean: 0.0,
            seed,
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic(3, 4, 40, &[5, 6, 7], 3.0, 9).unwrap();
        let b = generate_synthetic(3, 4, 40, &[5, 6, 7], 3.0, 9).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(3, 4, 40, &[5, 6, 7], 3.0, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_labels_are_balanced() {
        let ds = generate_synthetic(2, 4, 10, &[3, 3], 1.0, 0).unwrap();
        let mut counts = [0usize; 4];
        for &l in &ds.labels {
            counts[l] += 1;
        }
        assert_eq!(counts, [3, 3, 2, 2]);
    }

    #[test]
    fn split_sizes_and_partition() {
        let ds = generate_synthetic(2, 2, 10, &[3, 3], 1.0, 1).unwrap();
        let (train, test) = split(&ds, 0.8, 5).unwrap();
        assert_eq!(train.instance_count(), 8);
        assert_eq!(test.instance_count(), 2);

        let (t2, _) = split(&ds, 0.8, 5).unwrap();
        assert_eq!(train, t2);

        // Every original row appears exactly once across the halves.
        let mut seen: Vec<Vec<f64>> = Vec::new();
        for part in [&train, &test] {
            for i in 0..part.instance_count() {
                seen.push(part.views[0].row(i).to_vec());
            }
        }
        assert_eq!(seen.len(), 10);
        for i in 0..10 {
            let row = ds.views[0].row(i);
            assert_eq!(seen.iter().filter(|r| r.as_slice() == row).count(), 1);
        }
    }

    #[test]
    fn zero_rate_misalignment_is_identity() {
        let ds = generate_synthetic(3, 3, 30, &[4, 4, 4], 2.0, 3).unwrap();
        let spec = CorruptionSpec {
            misalign_rate: 0.0,
            ..small_spec(1)
        };
        let out = inject_misalignment(&ds, &spec).unwrap();
        assert_eq!(out.views, ds.views);
        let conflicts = out.conflicts.unwrap();
        for i in 0..30 {
            assert!(!conflicts.is_instance_conflicting(i));
        }
    }

    #[test]
    fn full_rate_misaligns_exactly_one_view_of_three() {
        let ds = generate_synthetic(3, 3, 30, &[4, 4, 4], 2.0, 3).unwrap();
        let out = inject_misalignment(&ds, &small_spec(7)).unwrap();
        let conflicts = out.conflicts.as_ref().unwrap();
        for i in 0..30 {
            let corrupted: Vec<usize> = (0..3)
                .filter(|&v| conflicts.is_view_conflicting(i, v))
                .collect();
            assert_eq!(corrupted.len(), 1, "instance {i}");
            let v = corrupted[0];
            assert_eq!(conflicts.status(i, v), ViewStatus::Misaligned);
            // Effective label differs from the instance label by construction.
            assert_ne!(conflicts.effective_label(i, v), Some(out.labels[i]));
            assert!(conflicts.effective_label(i, v).is_some());
        }
    }

    #[test]
    fn misalignment_preserves_shapes() {
        let ds = generate_synthetic(3, 4, 24, &[5, 6, 7], 2.0, 2).unwrap();
        let out = inject_misalignment(&ds, &small_spec(4)).unwrap();
        assert_eq!(out.instance_count(), ds.instance_count());
        assert_eq!(out.view_dims(), ds.view_dims());
        assert_eq!(out.labels, ds.labels);
        assert_eq!(out.class_count, ds.class_count);
    }

    #[test]
    fn misalignment_needs_a_donor_class() {
        let views = vec![Matrix::from_rows(vec![vec![1.0], vec![2.0]]).unwrap(); 2];
        let mut ds = MultiViewDataset::new(views, vec![0, 0], 2).unwrap();
        ds.conflicts = Some(ConflictLabels::all_clean(&ds.labels, 2));
        let err = inject_misalignment(&ds, &small_spec(0)).unwrap_err();
        assert!(matches!(err, Error::DegenerateInput(_)));
    }

    #[test]
    fn alignment_indicator_matches_conflict_flags() {
        let ds = generate_synthetic(3, 4, 40, &[4, 4, 4], 2.0, 11).unwrap();
        let spec = CorruptionSpec {
            misalign_rate: 0.5,
            ..small_spec(13)
        };
        let out = inject_misalignment(&ds, &spec).unwrap();
        let out = inject_noise(&out, &spec).unwrap();
        let conflicts = out.conflicts.as_ref().unwrap();
        for i in 0..40 {
            assert_eq!(
                conflicts.instance_fully_aligned(i),
                !conflicts.is_instance_conflicting(i),
                "instance {i}"
            );
        }
    }

    #[test]
    fn noise_zero_rate_is_identity() {
        let ds = generate_synthetic(2, 2, 20, &[3, 3], 2.0, 5).unwrap();
        let spec = CorruptionSpec {
            noise_rate: 0.0,
            ..small_spec(1)
        };
        let out = inject_noise(&ds, &spec).unwrap();
        assert_eq!(out.views, ds.views);
    }

    #[test]
    fn zero_std_noise_changes_nothing_and_flags_nothing() {
        let ds = generate_synthetic(2, 2, 20, &[3, 3], 2.0, 5).unwrap();
        let spec = CorruptionSpec {
            noise_rate: 1.0,
            noise_std: 0.0,
            noise_mean: 0.0,
            ..small_spec(1)
        };
        let out = inject_noise(&ds, &spec).unwrap();
        assert_eq!(out.views, ds.views);
        let conflicts = out.conflicts.unwrap();
        for i in 0..20 {
            assert!(!conflicts.is_instance_conflicting(i));
        }
    }

    #[test]
    fn noise_marks_views_noisy() {
        let ds = generate_synthetic(3, 2, 30, &[3, 3, 3], 2.0, 5).unwrap();
        let spec = CorruptionSpec {
            noise_rate: 0.5,
            ..small_spec(17)
        };
        let out = inject_noise(&ds, &spec).unwrap();
        let conflicts = out.conflicts.as_ref().unwrap();
        let noisy_instances = (0..30)
            .filter(|&i| conflicts.is_instance_conflicting(i))
            .count();
        assert_eq!(noisy_instances, 15);
        for i in 0..30 {
            for v in 0..3 {
                if conflicts.is_view_conflicting(i, v) {
                    assert_eq!(conflicts.status(i, v), ViewStatus::Noisy);
                    assert_eq!(conflicts.effective_label(i, v), None);
                    assert_ne!(out.views[v].row(i), ds.views[v].row(i));
                } else {
                    assert_eq!(out.views[v].row(i), ds.views[v].row(i));
                }
            }
        }
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = generate_synthetic(2, 2, 10, &[3, 3], 2.0, 5).unwrap();
        let b = generate_synthetic(2, 2, 10, &[3, 3], 2.0, 5).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = generate_synthetic(2, 2, 10, &[3, 3], 2.0, 6).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }
}
