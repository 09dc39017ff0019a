//! Shared helpers for the integration suites: an independent least-squares
//! linear classifier used as a separability oracle, and the common desk
//! benchmark configuration.
#![allow(dead_code)] // each integration target uses a different subset

use mvfuzz::config::RunConfig;
use mvfuzz::data::Matrix;

/// Train accuracy of a one-vs-all least-squares linear classifier fitted on
/// the given view. Independent of the crate's network code: plain normal
/// equations with partial-pivot elimination.
pub fn least_squares_train_accuracy(view: &Matrix, labels: &[usize], class_count: usize) -> f64 {
    let n = view.rows();
    let d = view.cols() + 1; // bias column
    // Normal equations: (X^T X) W = X^T Y with one-hot targets.
    let mut xtx = vec![vec![0.0; d]; d];
    let mut xty = vec![vec![0.0; class_count]; d];
    for i in 0..n {
        let mut row = view.row(i).to_vec();
        row.push(1.0);
        for a in 0..d {
            for b in 0..d {
                xtx[a][b] += row[a] * row[b];
            }
            xty[a][labels[i]] += row[a];
        }
    }
    for (a, row) in xtx.iter_mut().enumerate() {
        row[a] += 1e-8; // tiny ridge for numeric safety
    }
    let weights = solve_multi(xtx, xty);

    let mut hits = 0usize;
    for i in 0..n {
        let mut row = view.row(i).to_vec();
        row.push(1.0);
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for c in 0..class_count {
            let score: f64 = (0..d).map(|a| row[a] * weights[a][c]).sum();
            if score > best_score {
                best_score = score;
                best = c;
            }
        }
        if best == labels[i] {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}

/// Solve `A X = B` for square `A` by Gaussian elimination with partial
/// pivoting; `B` holds multiple right-hand sides as columns.
fn solve_multi(mut a: Vec<Vec<f64>>, mut b: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let m = a.len();
    let k = b[0].len();
    for col in 0..m {
        let pivot = (col..m)
            .max_by(|&x, &y| a[x][col].abs().partial_cmp(&a[y][col].abs()).unwrap())
            .unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        let diag = a[col][col];
        assert!(diag.abs() > 0.0, "singular system");
        for row in (col + 1)..m {
            let factor = a[row][col] / diag;
            if factor == 0.0 {
                continue;
            }
            for c in col..m {
                a[row][c] -= factor * a[col][c];
            }
            for c in 0..k {
                b[row][c] -= factor * b[col][c];
            }
        }
    }
    let mut x = vec![vec![0.0; k]; m];
    for row in (0..m).rev() {
        for c in 0..k {
            let mut acc = b[row][c];
            for col in (row + 1)..m {
                acc -= a[row][col] * x[col][c];
            }
            x[row][c] = acc / a[row][row];
        }
    }
    x
}

/// The desk-scale benchmark: 3 views, 4 classes, 1200 instances, blob
/// separation high enough for >= 95% per-view linear accuracy, 40%
/// misalignment in train and test, Gaussian noise on 10% of test
/// instances.
pub fn benchmark_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.data.views = 3;
    cfg.data.classes = 4;
    cfg.data.instances = 1200;
    cfg.data.view_dims = vec![24, 24, 24];
    cfg.data.separation = 3.5;
    cfg.data.corruption.misalign_rate = 0.4;
    cfg.data.corruption.noise_rate = 0.10;
    cfg
}
