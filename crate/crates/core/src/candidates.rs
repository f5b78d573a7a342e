//! Per-class candidate selection through calibrated prototypes.
//!
//! Flow per epoch: adjusted predictions `Q` (see [`crate::transport`]) give
//! hard assignments, the assignments re-estimate one prototype per class as
//! a `Q`-weighted mean of CLS features, and the recalibrated prototypes rank
//! samples for every new class. Old classes simply take their labeled data.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::evaluation::hungarian_match;
use crate::scalar::Scalar;

/// Unit-norm class prototypes stored column-wise (`d x C`).
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes<T> {
    w: Array2<T>,
}

impl<T: Scalar> Prototypes<T> {
    /// Normalizes every column of `w`. Fails on a zero column.
    pub fn from_columns(mut w: Array2<T>) -> Result<Self> {
        for (c, mut col) in w.axis_iter_mut(Axis(1)).enumerate() {
            let norm = col.iter().map(|&x| x * x).sum::<T>().sqrt();
            if !(norm > T::zero()) || !norm.is_finite() {
                return Err(Error::Numerical(format!("prototype column {c} has zero or non-finite norm")));
            }
            col.mapv_inplace(|x| x / norm);
        }
        Ok(Prototypes { w })
    }

    pub fn matrix(&self) -> &Array2<T> {
        &self.w
    }

    pub fn into_matrix(self) -> Array2<T> {
        self.w
    }

    pub fn dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.w.ncols()
    }

    /// `n x C` cosine logits for row-normalized `features`.
    pub fn logits(&self, features: ArrayView2<T>) -> Array2<T> {
        features.dot(&self.w)
    }
}

/// Row-wise softmax with an optional temperature.
pub fn softmax_rows<T: Scalar>(logits: ArrayView2<T>, temperature: T) -> Array2<T> {
    let mut out = logits.mapv(|x| x / temperature);
    for mut row in out.outer_iter_mut() {
        let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let s = row.sum();
        row.mapv_inplace(|x| x / s);
    }
    out
}

/// Copy of `x` with every row scaled to unit norm (zero rows stay zero).
pub fn normalize_rows<T: Scalar>(x: ArrayView2<T>) -> Array2<T> {
    let mut out = x.to_owned();
    for mut row in out.outer_iter_mut() {
        let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if n > T::zero() {
            row.mapv_inplace(|v| v / n);
        }
    }
    out
}

/// Candidates per class: `N_s = floor(gamma * labeled / old_classes)`, at least 1.
pub fn compute_ns(gamma: f64, labeled_count: usize, old_class_count: usize) -> Result<usize> {
    if old_class_count == 0 {
        return Err(Error::Config("need at least one old class".into()));
    }
    if !(gamma > 0.0) {
        return Err(Error::Config(format!("gamma must be > 0, got {gamma}")));
    }
    let ns = (gamma * labeled_count as f64 / old_class_count as f64).floor() as usize;
    Ok(ns.max(1))
}

/// `a_i = argmax_c q_i^(c)`, ties to the lowest class index.
pub fn compute_assignments<T: Scalar>(q: ArrayView2<T>) -> Vec<usize> {
    q.outer_iter()
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Recomputes each class prototype as the `Q`-weighted mean of the CLS
/// features assigned to it, then renormalizes.
///
/// A class that receives no assignment is populated with its top
/// `fallback_count` samples by adjusted prediction.
pub fn calibrate_prototypes<T: Scalar>(
    q: ArrayView2<T>,
    cls_features: ArrayView2<T>,
    fallback_count: usize,
) -> Result<Prototypes<T>> {
    let (n, c) = q.dim();
    if cls_features.nrows() != n {
        return Err(Error::LengthMismatch {
            left_name: "prediction rows",
            left: n,
            right_name: "feature rows",
            right: cls_features.nrows(),
        });
    }
    let d = cls_features.ncols();
    let assignments = compute_assignments(q);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, &a) in assignments.iter().enumerate() {
        members[a].push(i);
    }
    let mut w = Array2::<T>::zeros((d, c));
    for class in 0..c {
        if members[class].is_empty() {
            members[class] = top_indices(q.column(class).to_owned(), fallback_count.max(1));
        }
        let mut acc = Array1::<T>::zeros(d);
        let mut total = T::zero();
        for &i in &members[class] {
            let weight = q[[i, class]];
            acc.scaled_add(weight, &cls_features.row(i));
            total += weight;
        }
        if !(total > T::zero()) {
            return Err(Error::ZeroClassWeight { class });
        }
        acc.mapv_inplace(|x| x / total);
        w.column_mut(class).assign(&acc);
    }
    Prototypes::from_columns(w).map_err(|e| match e {
        Error::Numerical(msg) => Error::Numerical(format!("calibrated {msg}")),
        other => other,
    })
}

/// Indices of the `k` largest scores, ties by index.
fn top_indices<T: Scalar>(scores: Array1<T>, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CandidateSet {
    /// Per class, dataset row indices of the selected samples.
    pub per_class: Vec<Vec<usize>>,
    pub n_s: usize,
}

/// Top-`N_s` samples per new class by `softmax(W~^T f)`; old classes take
/// their labeled samples. `visible_labels[i]` is `Some` only for labeled data.
pub fn select_candidates<T: Scalar>(
    w_tilde: &Prototypes<T>,
    cls_features: ArrayView2<T>,
    visible_labels: &[Option<usize>],
    old_classes: &BTreeSet<usize>,
    n_s: usize,
) -> Result<CandidateSet> {
    let n = cls_features.nrows();
    if visible_labels.len() != n {
        return Err(Error::LengthMismatch {
            left_name: "labels",
            left: visible_labels.len(),
            right_name: "features",
            right: n,
        });
    }
    if n_s > n {
        log::warn!("N_s = {n_s} exceeds the {n} available samples; taking all");
    }
    let probs = softmax_rows(w_tilde.logits(cls_features).view(), T::one());
    let c = w_tilde.num_classes();
    let per_class = (0..c)
        .map(|class| {
            if old_classes.contains(&class) {
                (0..n).filter(|&i| visible_labels[i] == Some(class)).collect()
            } else {
                top_indices(probs.column(class).to_owned(), n_s.min(n))
            }
        })
        .collect();
    Ok(CandidateSet { per_class, n_s })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PurityReport {
    /// Per class purity; NaN for classes with no candidates.
    pub per_class: Vec<f64>,
    pub mean_new: f64,
}

/// Fraction of each class's candidates whose true label matches the class,
/// after one Hungarian alignment of cluster indices to true labels.
pub fn candidate_purity(
    cands: &CandidateSet,
    true_labels: &[usize],
    old_classes: &BTreeSet<usize>,
) -> Result<PurityReport> {
    let c = cands.per_class.len();
    let k = true_labels.iter().copied().max().map_or(c, |m| c.max(m + 1));
    let mut counts = Array2::<f64>::zeros((k, k));
    for (class, members) in cands.per_class.iter().enumerate() {
        for &i in members {
            let y = *true_labels.get(i).ok_or_else(|| {
                Error::Invalid(format!("candidate index {i} outside label vector of {}", true_labels.len()))
            })?;
            counts[[class, y]] += 1.0;
        }
    }
    let perm = hungarian_match(counts.mapv(|x| -x).view())?;
    let per_class: Vec<f64> = (0..c)
        .map(|class| {
            let total = cands.per_class[class].len();
            if total == 0 {
                f64::NAN
            } else {
                counts[[class, perm[class]]] / total as f64
            }
        })
        .collect();
    let new: Vec<f64> =
        (0..c).filter(|cl| !old_classes.contains(cl)).map(|cl| per_class[cl]).filter(|v| !v.is_nan()).collect();
    let mean_new = if new.is_empty() { f64::NAN } else { new.iter().sum::<f64>() / new.len() as f64 };
    Ok(PurityReport { per_class, mean_new })
}

pub const PROTO_MAGIC: [u8; 4] = *b"PGPW";
pub const PROTO_VERSION: u32 = 1;

/// `"PGPW" | u32 version=1 | u32 d | u32 C | f32[d*C]` row-major, little-endian.
pub fn encode_prototypes(w: &Prototypes<f32>) -> Result<Vec<u8>> {
    let u32_of =
        |field: &'static str, v: usize| u32::try_from(v).map_err(|_| Error::HeaderOverflow { field, value: v });
    let mut buf = Vec::with_capacity(16 + 4 * w.w.len());
    buf.extend_from_slice(&PROTO_MAGIC);
    buf.extend_from_slice(&PROTO_VERSION.to_le_bytes());
    buf.extend_from_slice(&u32_of("d", w.dim())?.to_le_bytes());
    buf.extend_from_slice(&u32_of("C", w.num_classes())?.to_le_bytes());
    for x in w.w.iter() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    Ok(buf)
}

/// Reads a prototype file; columns are renormalized on load.
pub fn decode_prototypes(bytes: &[u8]) -> Result<Prototypes<f32>> {
    if bytes.len() < 16 {
        return Err(Error::Truncated { record: 0 });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != PROTO_MAGIC {
        return Err(Error::BadMagic { expected: PROTO_MAGIC, found: magic });
    }
    let rd = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
    let version = rd(4) as u32;
    if version != PROTO_VERSION {
        return Err(Error::VersionMismatch { expected: PROTO_VERSION, found: version });
    }
    let (d, c) = (rd(8), rd(12));
    let n = d.checked_mul(c).ok_or(Error::HeaderOverflow { field: "d*C", value: usize::MAX })?;
    let body = &bytes[16..];
    if body.len() != 4 * n {
        return Err(if body.len() < 4 * n {
            Error::Truncated { record: 0 }
        } else {
            Error::Invalid("trailing bytes after prototypes".into())
        });
    }
    let vals: Vec<f32> = body.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("non-finite prototype entry".into()));
    }
    Prototypes::from_columns(Array2::from_shape_vec((d, c), vals).expect("sized"))
}

pub fn save_prototypes(w: &Prototypes<f32>, path: impl AsRef<std::path::Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_prototypes(w)?).map_err(|e| Error::io(path, e))
}

pub fn load_prototypes(path: impl AsRef<std::path::Path>) -> Result<Prototypes<f32>> {
    let path = path.as_ref();
    decode_prototypes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ns_arithmetic() {
        assert_eq!(compute_ns(1.0, 2000, 98).unwrap(), 20);
        assert_eq!(compute_ns(1.0, 7, 7).unwrap(), 1);
        assert_eq!(compute_ns(0.5, 100, 100).unwrap(), 1);
        assert!(compute_ns(1.0, 10, 0).is_err());
    }

    #[test]
    fn assignment_ties_go_low() {
        let q = array![[0.0, 1.0, 0.0], [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]];
        assert_eq!(compute_assignments(q.view()), vec![1, 0]);
    }

    #[test]
    fn assignments_match_reference_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = Array2::from_shape_fn((50, 5), |_| rng.random::<f64>() + 0.01);
        let q = crate::transport::sinkhorn_adjust(p.view(), &Default::default()).unwrap().q;
        let got = compute_assignments(q.view());
        for (i, row) in q.outer_iter().enumerate() {
            let mut best = 0;
            for c in 1..5 {
                if row[c] > row[best] {
                    best = c;
                }
            }
            assert_eq!(got[i], best);
        }
    }

    #[test]
    fn single_member_calibration_is_identity() {
        let f = normalize_rows(array![[1.0f64, 2.0], [-3.0, 0.5]].view());
        let q = array![[1.0, 0.0], [0.0, 1.0]];
        let w = calibrate_prototypes(q.view(), f.view(), 1).unwrap();
        for c in 0..2 {
            for t in 0..2 {
                assert!((w.matrix()[[t, c]] - f[[c, t]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_assignment_uses_fallback() {
        let f = normalize_rows(array![[1.0, 0.0], [0.8, 0.6], [0.0, 1.0]].view());
        // every row prefers class 0 equally; class 1 is empty
        let q = array![[0.6, 0.4], [0.6, 0.1], [0.6, 0.3]];
        let w = calibrate_prototypes(q.view(), f.view(), 1).unwrap();
        let mean = f.mean_axis(Axis(0)).unwrap();
        let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
        for t in 0..2 {
            assert!((w.matrix()[[t, 0]] - mean[t] / norm).abs() < 1e-12);
            // fallback: top-1 by q column 1 is row 0
            assert!((w.matrix()[[t, 1]] - f[[0, t]]).abs() < 1e-12);
        }
    }

    #[test]
    fn calibration_homogeneous_in_class_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = normalize_rows(Array2::from_shape_fn((30, 4), |_| rng.random::<f64>() - 0.5).view());
        let q = Array2::from_shape_fn((30, 3), |_| rng.random::<f64>());
        let mut q2 = q.clone();
        q2.column_mut(1).mapv_inplace(|x| x * 7.5);
        // scaling column 1 changes assignments, so compare with assignments pinned
        let a = calibrate_prototypes(q.view(), f.view(), 3).unwrap();
        let assign = compute_assignments(q.view());
        let mut w_ref = Array2::<f64>::zeros((4, 3));
        for (i, &c) in assign.iter().enumerate() {
            w_ref.column_mut(c).scaled_add(q2[[i, c]], &f.row(i));
        }
        let w_ref = Prototypes::from_columns(w_ref).unwrap();
        for (x, y) in a.matrix().iter().zip(w_ref.matrix().iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn selection_takes_all_when_ns_is_n() {
        let f = normalize_rows(array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]].view());
        let w = Prototypes::from_columns(array![[1.0], [0.0]]).unwrap();
        let c = select_candidates(&w, f.view(), &[None, None, None], &BTreeSet::new(), 3).unwrap();
        let mut got = c.per_class[0].clone();
        got.sort();
        assert_eq!(got, vec![0, 1, 2]);
    }

    #[test]
    fn old_classes_take_labeled_ids() {
        let f = normalize_rows(array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, -1.0]].view());
        let w = Prototypes::from_columns(array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let labels = [Some(0), None, Some(0), None];
        let old: BTreeSet<usize> = [0].into_iter().collect();
        let c = select_candidates(&w, f.view(), &labels, &old, 2).unwrap();
        assert_eq!(c.per_class[0], vec![0, 2]);
        assert_eq!(c.per_class[1].len(), 2);
    }

    #[test]
    fn selection_matches_softmax_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = normalize_rows(Array2::from_shape_fn((40, 3), |_| rng.random::<f64>() - 0.5).view());
        let w = Prototypes::from_columns(array![[1.0, 0.0], [0.0, 1.0], [0.2, 0.1]]).unwrap();
        let c = select_candidates(&w, f.view(), &vec![None; 40], &BTreeSet::new(), 5).unwrap();
        let wm = w.matrix();
        for class in 0..2 {
            let prob = |i: usize| {
                let z: Vec<f64> = (0..2).map(|k| f.row(i).dot(&wm.column(k)).exp()).collect();
                z[class] / z.iter().sum::<f64>()
            };
            let mut ranked: Vec<usize> = (0..40).collect();
            ranked.sort_by(|&a, &b| prob(b).partial_cmp(&prob(a)).unwrap());
            let mut got = c.per_class[class].clone();
            let mut want = ranked[..5].to_vec();
            got.sort();
            want.sort();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn separated_clusters_match_cosine_ranking() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let centers = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        // five members per cluster sit much closer to the center than the rest
        let f = normalize_rows(
            Array2::from_shape_fn((40, 3), |(i, j)| {
                let off_axis = if i >= 10 && j == 2 { 0.3 } else { 0.0 };
                centers[i % 2][j] + off_axis + 0.01 * (rng.random::<f64>() - 0.5)
            })
            .view(),
        );
        let w = Prototypes::from_columns(array![[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]).unwrap();
        let c = select_candidates(&w, f.view(), &vec![None; 40], &BTreeSet::new(), 5).unwrap();
        for class in 0..2 {
            let cos = |i: usize| f.row(i).dot(&w.matrix().column(class));
            let mut by_cos: Vec<usize> = (0..40).collect();
            by_cos.sort_by(|&a, &b| cos(b).partial_cmp(&cos(a)).unwrap());
            let mut got = c.per_class[class].clone();
            let mut want = by_cos[..5].to_vec();
            got.sort();
            want.sort();
            assert_eq!(got, want);
            assert_eq!(got, (0..5).map(|t| 2 * t + class).collect::<Vec<_>>());
        }
    }

    #[test]
    fn purity_perfect_and_random() {
        let cands = CandidateSet { per_class: vec![vec![0, 1], vec![2, 3]], n_s: 2 };
        let r = candidate_purity(&cands, &[1, 1, 0, 0], &BTreeSet::new()).unwrap();
        assert_eq!(r.mean_new, 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c_new = 5;
        let n = 5000;
        let trials = 1000;
        let mut total = 0.0;
        for _ in 0..trials {
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c_new)).collect();
            let scores = Array2::from_shape_fn((n, c_new), |_| rng.random::<f64>());
            let per_class = (0..c_new).map(|c| top_indices(scores.column(c).to_owned(), 1000)).collect();
            let r = candidate_purity(&CandidateSet { per_class, n_s: 1000 }, &labels, &BTreeSet::new()).unwrap();
            total += r.mean_new;
        }
        let mean = total / trials as f64;
        assert!((mean - 1.0 / c_new as f64).abs() < 0.03, "mean purity {mean}");
    }

    #[test]
    fn prototype_file_round_trip() {
        let w = Prototypes::from_columns(array![[1.0f32, 0.0, 0.6], [0.0, 2.0, 0.8]]).unwrap();
        let bytes = encode_prototypes(&w).unwrap();
        assert_eq!(decode_prototypes(&bytes).unwrap(), w);
        assert!(matches!(decode_prototypes(&bytes[..bytes.len() - 1]), Err(Error::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'Q';
        assert!(matches!(decode_prototypes(&bad), Err(Error::BadMagic { .. })));
        let mut long = bytes;
        long.push(0);
        assert!(decode_prototypes(&long).is_err());
    }
}
