//! Silhouette coefficient with the Euclidean metric.

use ndarray::ArrayView2;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Mean over points of `(b - a) / max(a, b)`.
///
/// `a` is the mean distance to the other members of the point's cluster and
/// `b` the smallest mean distance to another cluster. Points in singleton
/// clusters score 0, as do points with `a = b = 0`.
pub fn silhouette_score<T: Scalar>(points: ArrayView2<T>, labels: &[usize]) -> Result<T> {
    let m = points.nrows();
    if labels.len() != m {
        return Err(Error::LengthMismatch { left_name: "labels", left: labels.len(), right_name: "points", right: m });
    }
    let k = labels.iter().copied().max().map_or(0, |x| x + 1);
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    let occupied = sizes.iter().filter(|&&s| s > 0).count();
    if occupied < 2 {
        return Err(Error::Invalid(format!("silhouette needs at least 2 non-empty clusters, got {occupied}")));
    }
    let mut total = T::zero();
    let mut sums = vec![T::zero(); k];
    for i in 0..m {
        sums.iter_mut().for_each(|s| *s = T::zero());
        let pi = points.row(i);
        for j in 0..m {
            if i == j {
                continue;
            }
            let d = pi.iter().zip(points.row(j).iter()).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>().sqrt();
            sums[labels[j]] += d;
        }
        let own = labels[i];
        if sizes[own] <= 1 {
            continue;
        }
        let a = sums[own] / T::from_usize_lossy(sizes[own] - 1);
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / T::from_usize_lossy(sizes[c]))
            .fold(T::infinity(), T::min);
        let denom = a.max(b);
        if denom > T::zero() {
            total += (b - a) / denom;
        }
    }
    Ok(total / T::from_usize_lossy(m))
}
