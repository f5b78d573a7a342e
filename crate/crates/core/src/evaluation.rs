//! Hungarian matching and clustering accuracy with the All/Old/New breakdown.

use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView2};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Minimum-cost perfect assignment of a square cost matrix.
///
/// Returns `perm` with `perm[row] = column`. Among all optimal assignments the
/// lexicographically smallest `perm` is returned.
pub fn hungarian_match<T: Scalar>(cost: ArrayView2<T>) -> Result<Vec<usize>> {
    let (n, m) = cost.dim();
    if n != m {
        return Err(Error::Shape(format!("cost matrix must be square, got {n}x{m}")));
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("cost matrix contains non-finite entries".into()));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let (mut perm, u, v) = solve_potentials(cost);
    let scale = cost.iter().fold(T::one(), |a, &b| a.max(b.abs()));
    let eps = T::lit(1e-9) * scale;
    let tight = |i: usize, j: usize| cost[[i, j]] - u[i] - v[j] <= eps;
    lexicographic_repair(n, &tight, &mut perm);
    Ok(perm)
}

/// Shortest-augmenting-path Hungarian method with row/column potentials.
fn solve_potentials<T: Scalar>(cost: ArrayView2<T>) -> (Vec<usize>, Vec<T>, Vec<T>) {
    let n = cost.nrows();
    // 1-indexed internally; index 0 is the virtual source column
    let inf = T::infinity();
    let mut u = vec![T::zero(); n + 1];
    let mut v = vec![T::zero(); n + 1];
    let mut col_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        col_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_row[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_row[j0] = col_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0usize; n];
    for j in 1..=n {
        perm[col_row[j] - 1] = j - 1;
    }
    (perm, u[1..].to_vec(), v[1..].to_vec())
}

/// Walks rows in order, moving each to the smallest tight column that still
/// admits a perfect matching of the remaining rows on tight edges.
fn lexicographic_repair(n: usize, tight: &dyn Fn(usize, usize) -> bool, perm: &mut [usize]) {
    let mut owner = vec![0usize; n];
    for (r, &c) in perm.iter().enumerate() {
        owner[c] = r;
    }
    for row in 0..n {
        let current = perm[row];
        for col in 0..current {
            if !tight(row, col) || owner[col] < row {
                continue;
            }
            // Take `col` for `row`; its displaced owner must reach `current`.
            let displaced = owner[col];
            let mut visited = vec![false; n];
            let mut trial_perm = perm.to_vec();
            let mut trial_owner = owner.clone();
            trial_perm[row] = col;
            trial_owner[col] = row;
            // `current` is now free; search an alternating path from `displaced`.
            if augment(displaced, row, tight, &mut trial_perm, &mut trial_owner, &mut visited, current) {
                perm.copy_from_slice(&trial_perm);
                owner = trial_owner;
                break;
            }
        }
    }
}

/// DFS for an alternating path that rehomes `r` using only rows > `fixed`.
fn augment(
    r: usize,
    fixed: usize,
    tight: &dyn Fn(usize, usize) -> bool,
    perm: &mut [usize],
    owner: &mut [usize],
    visited: &mut [bool],
    free_col: usize,
) -> bool {
    let n = perm.len();
    for c in 0..n {
        if visited[c] || !tight(r, c) {
            continue;
        }
        if c == free_col {
            perm[r] = c;
            owner[c] = r;
            return true;
        }
        let o = owner[c];
        if o <= fixed || o == r {
            continue;
        }
        visited[c] = true;
        if augment(o, fixed, tight, perm, owner, visited, free_col) {
            perm[r] = c;
            owner[c] = r;
            return true;
        }
    }
    false
}

/// Total cost of an assignment.
pub fn assignment_cost<T: Scalar>(cost: ArrayView2<T>, perm: &[usize]) -> T {
    perm.iter().enumerate().map(|(r, &c)| cost[[r, c]]).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AccReport {
    pub all: f64,
    /// Accuracy on samples whose true class is old; NaN when there are none.
    pub old: f64,
    /// Accuracy on samples whose true class is new; NaN when there are none.
    pub new: f64,
    pub n_old: usize,
    pub n_new: usize,
    /// `permutation[predicted cluster] = matched class`.
    pub permutation: Vec<usize>,
}

/// Clustering accuracy under one global Hungarian match over all samples.
pub fn clustering_acc(preds: &[usize], labels: &[usize], old_classes: &BTreeSet<usize>) -> Result<AccReport> {
    if preds.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left_name: "predictions",
            left: preds.len(),
            right_name: "labels",
            right: labels.len(),
        });
    }
    if preds.is_empty() {
        return Err(Error::Empty("no samples to evaluate".into()));
    }
    let k = preds.iter().chain(labels).copied().max().unwrap() + 1;
    let mut counts = Array2::<f64>::zeros((k, k));
    for (&p, &y) in preds.iter().zip(labels) {
        counts[[p, y]] += 1.0;
    }
    let cost = counts.mapv(|c| -c);
    let permutation = hungarian_match(cost.view())?;
    let (mut hit_old, mut hit_new, mut n_old, mut n_new) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &y) in preds.iter().zip(labels) {
        let hit = permutation[p] == y;
        if old_classes.contains(&y) {
            n_old += 1;
            hit_old += hit as usize;
        } else {
            n_new += 1;
            hit_new += hit as usize;
        }
    }
    let ratio = |h: usize, n: usize| {
        if n == 0 {
            f64::NAN
        } else {
            h as f64 / n as f64
        }
    };
    Ok(AccReport {
        all: (hit_old + hit_new) as f64 / preds.len() as f64,
        old: ratio(hit_old, n_old),
        new: ratio(hit_new, n_new),
        n_old,
        n_new,
        permutation,
    })
}
