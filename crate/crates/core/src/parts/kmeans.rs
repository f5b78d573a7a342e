//! k-means++ seeding and Lloyd refinement.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub(crate) fn sq_dist<T: Scalar>(a: ArrayView1<T>, b: ArrayView1<T>) -> T {
    a.iter().zip(b.iter()).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding: the first center uniformly, the rest by D^2 sampling.
pub fn kmeans_pp_seed<T: Scalar, R: Rng + ?Sized>(points: ArrayView2<T>, k: usize, rng: &mut R) -> Result<Array2<T>> {
    let m = points.nrows();
    if k == 0 || m < k {
        return Err(Error::TooFewPoints { what: "k-means++ seeding", needed: k.max(1), got: m });
    }
    let mut centers = Array2::<T>::zeros((k, points.ncols()));
    let first = rng.random_range(0..m);
    centers.row_mut(0).assign(&points.row(first));
    let mut dist: Vec<f64> = points.outer_iter().map(|p| sq_dist(p, points.row(first)).as_f64()).collect();
    for c in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = m - 1;
            for (i, &d) in dist.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            // all points coincide with existing centers
            rng.random_range(0..m)
        };
        centers.row_mut(c).assign(&points.row(pick));
        for (i, p) in points.outer_iter().enumerate() {
            let d = sq_dist(p, points.row(pick)).as_f64();
            if d < dist[i] {
                dist[i] = d;
            }
        }
    }
    Ok(centers)
}

#[derive(Clone, Debug)]
pub struct KMeansResult<T> {
    pub centers: Array2<T>,
    pub labels: Vec<usize>,
    pub inertia: T,
}

fn nearest<T: Scalar>(p: ArrayView1<T>, centers: &Array2<T>) -> (usize, T) {
    let mut best = (0, T::infinity());
    for (c, center) in centers.outer_iter().enumerate() {
        let d = sq_dist(p, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd iterations from the given centers. Empty clusters keep their center.
pub fn lloyd<T: Scalar>(points: ArrayView2<T>, mut centers: Array2<T>, max_iters: usize) -> KMeansResult<T> {
    let (m, d) = points.dim();
    let k = centers.nrows();
    let mut labels = vec![usize::MAX; m];
    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        for (i, p) in points.outer_iter().enumerate() {
            let (c, _) = nearest(p, &centers);
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = Array2::<T>::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (p, &l) in points.outer_iter().zip(&labels) {
            sums.row_mut(l).zip_mut_with(&p, |s, &x| *s += x);
            counts[l] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                let n = T::from_usize_lossy(counts[c]);
                centers.row_mut(c).assign(&sums.row(c).mapv(|s| s / n));
            }
        }
    }
    let mut inertia = T::zero();
    for (i, p) in points.outer_iter().enumerate() {
        let (c, d) = nearest(p, &centers);
        labels[i] = c;
        inertia += d;
    }
    KMeansResult { centers, labels, inertia }
}

/// Best-of-`restarts` k-means (lowest inertia) with k-means++ seeding.
pub fn kmeans<T: Scalar, R: Rng + ?Sized>(
    points: ArrayView2<T>,
    k: usize,
    restarts: usize,
    max_iters: usize,
    rng: &mut R,
) -> Result<KMeansResult<T>> {
    let mut best: Option<KMeansResult<T>> = None;
    for _ in 0..restarts.max(1) {
        let seeds = kmeans_pp_seed(points, k, rng)?;
        let run = lloyd(points, seeds, max_iters);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}
