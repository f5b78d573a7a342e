//! Individual loss terms. Every function takes raw (unnormalized) inputs,
//! normalizes them internally and returns gradients with respect to the raw
//! inputs.

use std::collections::BTreeSet;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{l2_normalize_rows, l2_normalize_rows_backward};
use crate::scalar::{log_sum_exp, Scalar};

/// Value plus gradients of a loss over one feature matrix and the prototypes.
#[derive(Clone, Debug)]
pub struct ClsGrad<T> {
    pub loss: T,
    pub d_features: Array2<T>,
    pub d_prototypes: Array2<T>,
}

/// Value plus gradients of a loss over two aligned views and the prototypes.
#[derive(Clone, Debug)]
pub struct PairClsGrad<T> {
    pub loss: T,
    pub d_view1: Array2<T>,
    pub d_view2: Array2<T>,
    pub d_prototypes: Array2<T>,
}

/// Value plus gradients of a representation loss over two aligned views.
#[derive(Clone, Debug)]
pub struct PairRepGrad<T> {
    pub loss: T,
    pub d_view1: Array2<T>,
    pub d_view2: Array2<T>,
}

#[derive(Clone, Debug)]
pub struct PdrGrad<T> {
    pub loss: T,
    /// Number of `(sample, part)` terms that entered the mean.
    pub terms: usize,
    pub d_view1: Vec<Array2<T>>,
    pub d_view2: Vec<Array2<T>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PdrVariant {
    /// Denominator over the other shared parts only.
    #[default]
    Exact,
    /// Denominator also contains the positive pair.
    InfoNce,
}

/// Normalized features, normalized prototype columns and their cosine matrix.
struct CosineHead<T> {
    xn: Array2<T>,
    x_norms: Array1<T>,
    /// Prototype columns as rows, normalized (`C x d`).
    wn: Array2<T>,
    w_norms: Array1<T>,
    cos: Array2<T>,
}

impl<T: Scalar> CosineHead<T> {
    fn new(x: ArrayView2<T>, w: ArrayView2<T>) -> Result<Self> {
        if x.ncols() != w.nrows() {
            return Err(Error::Shape(format!("features have dim {}, prototypes {}", x.ncols(), w.nrows())));
        }
        let (xn, x_norms) = l2_normalize_rows(x);
        let (wn, w_norms) = l2_normalize_rows(w.t());
        let cos = xn.dot(&wn.t());
        Ok(CosineHead { xn, x_norms, wn, w_norms, cos })
    }

    /// Maps `dL/dcos` to gradients for the raw features and raw `d x C` prototypes.
    fn backward(&self, d_cos: ArrayView2<T>) -> (Array2<T>, Array2<T>) {
        let d_xn = d_cos.dot(&self.wn);
        let d_wn = d_cos.t().dot(&self.xn);
        let dx = l2_normalize_rows_backward(self.xn.view(), &self.x_norms, d_xn.view());
        let dw = l2_normalize_rows_backward(self.wn.view(), &self.w_norms, d_wn.view());
        (dx, dw.reversed_axes())
    }
}

/// Row-wise softmax of `z / tau`.
pub fn softmax_scaled<T: Scalar>(z: ArrayView2<T>, tau: T) -> Array2<T> {
    let mut out = z.mapv(|v| v / tau);
    for mut row in out.outer_iter_mut() {
        let lse = log_sum_exp(row.to_vec());
        row.mapv_inplace(|v| (v - lse).exp());
    }
    out
}

/// Predictions `softmax(cos(x, W) / tau)` for a feature matrix.
pub fn cosine_predictions<T: Scalar>(x: ArrayView2<T>, w: ArrayView2<T>, tau: T) -> Result<Array2<T>> {
    Ok(softmax_scaled(CosineHead::new(x, w)?.cos.view(), tau))
}

fn check_temperature<T: Scalar>(name: &str, tau: T) -> Result<()> {
    if !(tau > T::zero()) || !tau.is_finite() {
        return Err(Error::Config(format!("{name} must be positive and finite, got {tau}")));
    }
    Ok(())
}

fn check_labels(labels: &[Option<usize>], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::LengthMismatch {
            left_name: "labels",
            left: labels.len(),
            right_name: "features",
            right: rows,
        });
    }
    if let Some(bad) = labels.iter().flatten().find(|&&y| y >= classes) {
        return Err(Error::Invalid(format!("label {bad} out of range for {classes} classes")));
    }
    Ok(())
}

fn check_pair<T>(a: ArrayView2<T>, b: ArrayView2<T>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("views differ in shape: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// Cross-entropy of `softmax(cos(x, W) / tau_s)` against the labels, averaged
/// over labeled rows. Unlabeled rows are ignored; no labeled rows gives 0.
pub fn sup_cls_loss<T: Scalar>(
    features: ArrayView2<T>,
    labels: &[Option<usize>],
    prototypes: ArrayView2<T>,
    tau_s: T,
) -> Result<ClsGrad<T>> {
    check_temperature("tau_s", tau_s)?;
    let head = CosineHead::new(features, prototypes)?;
    check_labels(labels, features.nrows(), prototypes.ncols())?;
    let labeled = labels.iter().filter(|y| y.is_some()).count();
    if labeled == 0 {
        return Ok(ClsGrad {
            loss: T::zero(),
            d_features: Array2::zeros(features.raw_dim()),
            d_prototypes: Array2::zeros(prototypes.raw_dim()),
        });
    }
    let p = softmax_scaled(head.cos.view(), tau_s);
    let m = T::from_usize_lossy(labeled);
    let mut loss = T::zero();
    let mut d_cos = Array2::<T>::zeros(head.cos.raw_dim());
    for (i, y) in labels.iter().enumerate() {
        let Some(y) = *y else { continue };
        loss -= p[[i, y]].ln();
        for c in 0..p.ncols() {
            let target = if c == y { T::one() } else { T::zero() };
            d_cos[[i, c]] = (p[[i, c]] - target) / (m * tau_s);
        }
    }
    let (d_features, d_prototypes) = head.backward(d_cos.view());
    Ok(ClsGrad { loss: loss / m, d_features, d_prototypes })
}

/// Soft cross-entropy `-(1/n) sum_i sum_c q_ic log p_ic` and its logit gradient.
fn soft_ce<T: Scalar>(q: &Array2<T>, z: ArrayView2<T>, tau: T) -> (T, Array2<T>) {
    let p = softmax_scaled(z, tau);
    let n = T::from_usize_lossy(z.nrows());
    let mut loss = T::zero();
    for (qr, zr) in q.outer_iter().zip(z.outer_iter()) {
        let lse = log_sum_exp(zr.iter().map(|&v| v / tau));
        loss += lse - qr.iter().zip(zr.iter()).map(|(&a, &b)| a * b / tau).sum::<T>();
    }
    let d_z = (&p - q).mapv(|v| v / (n * tau));
    (loss / n, d_z)
}

/// Self-distillation between views: the teacher is `softmax(cos / tau_t)` of
/// the other view, treated as a constant.
///
/// With `symmetric`, both views act as teacher once and the two directions
/// are averaged; otherwise view 2 teaches view 1.
pub fn unsup_cls_loss<T: Scalar>(
    view1: ArrayView2<T>,
    view2: ArrayView2<T>,
    prototypes: ArrayView2<T>,
    tau_s: T,
    tau_t: T,
    symmetric: bool,
) -> Result<PairClsGrad<T>> {
    check_temperature("tau_t", tau_t)?;
    let t1 = cosine_predictions(view1, prototypes, tau_t)?;
    let t2 = cosine_predictions(view2, prototypes, tau_t)?;
    unsup_cls_loss_with_teachers(view1, view2, prototypes, tau_s, &t1, &t2, symmetric)
}

/// [`unsup_cls_loss`] with the teacher distributions supplied:
/// `teacher1` comes from view 1 and supervises view 2, and vice versa.
pub fn unsup_cls_loss_with_teachers<T: Scalar>(
    view1: ArrayView2<T>,
    view2: ArrayView2<T>,
    prototypes: ArrayView2<T>,
    tau_s: T,
    teacher1: &Array2<T>,
    teacher2: &Array2<T>,
    symmetric: bool,
) -> Result<PairClsGrad<T>> {
    check_temperature("tau_s", tau_s)?;
    check_pair(view1, view2)?;
    if view1.nrows() == 0 {
        return Err(Error::Empty("unsup_cls needs a non-empty batch".into()));
    }
    let h1 = CosineHead::new(view1, prototypes)?;
    let h2 = CosineHead::new(view2, prototypes)?;
    if teacher1.dim() != h1.cos.dim() || teacher2.dim() != h2.cos.dim() {
        return Err(Error::Shape("teacher distributions do not match the batch".into()));
    }
    let (l1, dz1) = soft_ce(teacher2, h1.cos.view(), tau_s);
    let (dx1, mut dw) = h1.backward(dz1.view());
    if !symmetric {
        return Ok(PairClsGrad { loss: l1, d_view1: dx1, d_view2: Array2::zeros(view2.raw_dim()), d_prototypes: dw });
    }
    let (l2, dz2) = soft_ce(teacher1, h2.cos.view(), tau_s);
    let (dx2, dw2) = h2.backward(dz2.view());
    let half = T::lit(0.5);
    dw += &dw2;
    Ok(PairClsGrad { loss: (l1 + l2) * half, d_view1: dx1 * half, d_view2: dx2 * half, d_prototypes: dw * half })
}

/// `zeta = -eps_me * H(mean_i softmax(cos_i / tau_s))`.
pub fn mean_entropy_reg<T: Scalar>(
    features: ArrayView2<T>,
    prototypes: ArrayView2<T>,
    tau_s: T,
    eps_me: T,
) -> Result<ClsGrad<T>> {
    check_temperature("tau_s", tau_s)?;
    if features.nrows() == 0 {
        return Err(Error::Empty("mean entropy needs at least one prediction".into()));
    }
    let head = CosineHead::new(features, prototypes)?;
    let p = softmax_scaled(head.cos.view(), tau_s);
    let n = T::from_usize_lossy(p.nrows());
    let p_bar = p.mean_axis(Axis(0)).expect("non-empty");
    let neg_entropy: T = p_bar.iter().map(|&v| if v > T::zero() { v * v.ln() } else { T::zero() }).sum();
    // d zeta / d p_bar_c = eps (log p_bar_c + 1); spread over rows and pulled through softmax
    let g = p_bar.mapv(|v| eps_me * (v.max(T::min_positive_value()).ln() + T::one()) / n);
    let mut d_cos = Array2::<T>::zeros(p.raw_dim());
    for (mut d, pr) in d_cos.outer_iter_mut().zip(p.outer_iter()) {
        let dot = pr.dot(&g);
        d.assign(&pr.iter().zip(g.iter()).map(|(&pc, &gc)| pc * (gc - dot) / tau_s).collect::<Array1<T>>());
    }
    let (d_features, d_prototypes) = head.backward(d_cos.view());
    Ok(ClsGrad { loss: eps_me * neg_entropy, d_features, d_prototypes })
}

/// Sum over anchors of `log sum_{n in pool, n != i} exp(s_in / tau) - mean_{j in P_i} s_ij / tau`
/// on normalized rows, with the gradient w.r.t. those rows. Anchors with no
/// positives are skipped.
fn contrastive_rows<T: Scalar>(hn: &Array2<T>, positives: &[Vec<usize>], pool: &[bool], tau: T) -> (T, Array2<T>) {
    let m = hn.nrows();
    let mut total = T::zero();
    let mut d = Array2::<T>::zeros(hn.raw_dim());
    let sims = hn.dot(&hn.t());
    for i in 0..m {
        let pos = &positives[i];
        if pos.is_empty() {
            continue;
        }
        let others: Vec<usize> = (0..m).filter(|&n| n != i && pool[n]).collect();
        let logits: Vec<T> = others.iter().map(|&n| sims[[i, n]] / tau).collect();
        let lse = log_sum_exp(logits.iter().copied());
        let inv_pos = T::one() / T::from_usize_lossy(pos.len());
        total += lse - pos.iter().map(|&j| sims[[i, j]] / tau).sum::<T>() * inv_pos;
        for (&n, &z) in others.iter().zip(&logits) {
            let mut coef = (z - lse).exp();
            if pos.contains(&n) {
                coef -= inv_pos;
            }
            let coef = coef / tau;
            let (hi, hn_row) = (hn.row(i).to_owned(), hn.row(n).to_owned());
            d.row_mut(i).scaled_add(coef, &hn_row);
            d.row_mut(n).scaled_add(coef, &hi);
        }
    }
    (total, d)
}

fn split_views<T: Scalar>(d: Array2<T>, b: usize) -> (Array2<T>, Array2<T>) {
    (d.slice(s![..b, ..]).to_owned(), d.slice(s![b.., ..]).to_owned())
}

/// Supervised contrastive loss over the labeled rows of both views.
///
/// The anchor set is every labeled view row (`2 |B_l|` rows); positives are
/// the other rows with the same label and the denominator runs over every
/// other labeled row. An anchor without positives contributes 0 but still
/// counts in the mean.
pub fn sup_rep_loss<T: Scalar>(
    view1: ArrayView2<T>,
    view2: ArrayView2<T>,
    labels: &[Option<usize>],
    tau_c: T,
) -> Result<PairRepGrad<T>> {
    check_temperature("tau_c", tau_c)?;
    check_pair(view1, view2)?;
    let b = view1.nrows();
    check_labels(labels, b, usize::MAX)?;
    let stacked = concatenate(Axis(0), &[view1, view2]).map_err(|e| Error::Shape(e.to_string()))?;
    let (hn, norms) = l2_normalize_rows(stacked.view());
    let row_label = |r: usize| labels[r % b.max(1)];
    let pool: Vec<bool> = (0..2 * b).map(|r| row_label(r).is_some()).collect();
    let anchors = pool.iter().filter(|&&p| p).count();
    if anchors == 0 {
        return Ok(PairRepGrad {
            loss: T::zero(),
            d_view1: Array2::zeros(view1.raw_dim()),
            d_view2: Array2::zeros(view2.raw_dim()),
        });
    }
    let positives: Vec<Vec<usize>> = (0..2 * b)
        .map(|i| match row_label(i) {
            Some(y) => (0..2 * b).filter(|&j| j != i && row_label(j) == Some(y)).collect(),
            None => Vec::new(),
        })
        .collect();
    let (total, d_hn) = contrastive_rows(&hn, &positives, &pool, tau_c);
    let scale = T::one() / T::from_usize_lossy(anchors);
    let d = l2_normalize_rows_backward(hn.view(), &norms, (d_hn * scale).view());
    let (d_view1, d_view2) = split_views(d, b);
    Ok(PairRepGrad { loss: total * scale, d_view1, d_view2 })
}

/// Unsupervised contrastive loss over both views.
///
/// Every view row is an anchor; its positive is the same sample's other view
/// and the denominator runs over all other `2B - 1` rows.
pub fn unsup_rep_loss<T: Scalar>(view1: ArrayView2<T>, view2: ArrayView2<T>, tau_u: T) -> Result<PairRepGrad<T>> {
    check_temperature("tau_u", tau_u)?;
    check_pair(view1, view2)?;
    let b = view1.nrows();
    if b < 2 {
        return Err(Error::TooFewPoints { what: "unsupervised contrastive batch", needed: 2, got: b });
    }
    let stacked = concatenate(Axis(0), &[view1, view2]).map_err(|e| Error::Shape(e.to_string()))?;
    let (hn, norms) = l2_normalize_rows(stacked.view());
    let positives: Vec<Vec<usize>> = (0..2 * b).map(|r| vec![(r + b) % (2 * b)]).collect();
    let pool = vec![true; 2 * b];
    let (total, d_hn) = contrastive_rows(&hn, &positives, &pool, tau_u);
    let scale = T::one() / T::from_usize_lossy(2 * b);
    let d = l2_normalize_rows_backward(hn.view(), &norms, (d_hn * scale).view());
    let (d_view1, d_view2) = split_views(d, b);
    Ok(PairRepGrad { loss: total * scale, d_view1, d_view2 })
}

/// Part discrepancy regularization on l2-normalized part features.
///
/// For sample `i` and shared part `k`, the term is
/// `-log(exp(a_kk) / sum_{k' in S_i, k' != k} exp(a_kk'))` with
/// `a_kk' = v1_k . v2_k'`. The loss is the mean over all terms. Samples with
/// fewer than two shared parts contribute nothing.
pub fn pdr_loss<T: Scalar>(
    parts_view1: &[Array2<T>],
    parts_view2: &[Array2<T>],
    shared: &[BTreeSet<usize>],
    variant: PdrVariant,
) -> Result<PdrGrad<T>> {
    let b = parts_view1.len();
    if parts_view2.len() != b || shared.len() != b {
        return Err(Error::LengthMismatch {
            left_name: "part views",
            left: parts_view2.len(),
            right_name: "shared-part sets",
            right: shared.len().min(b),
        });
    }
    let mut loss = T::zero();
    let mut terms = 0usize;
    let mut d_view1 = Vec::with_capacity(b);
    let mut d_view2 = Vec::with_capacity(b);
    let mut per_sample = Vec::with_capacity(b);
    for i in 0..b {
        let (v1, v2) = (&parts_view1[i], &parts_view2[i]);
        check_pair(v1.view(), v2.view())?;
        let k = v1.nrows();
        if let Some(&bad) = shared[i].iter().find(|&&p| p >= k) {
            return Err(Error::Invalid(format!("shared part {bad} out of range for K = {k}")));
        }
        let set: Vec<usize> = shared[i].iter().copied().collect();
        let mut d1n = Array2::<T>::zeros(v1.raw_dim());
        let mut d2n = Array2::<T>::zeros(v2.raw_dim());
        let (n1, norms1) = l2_normalize_rows(v1.view());
        let (n2, norms2) = l2_normalize_rows(v2.view());
        if set.len() >= 2 {
            for &p in &set {
                let pool: Vec<usize> = match variant {
                    PdrVariant::Exact => set.iter().copied().filter(|&q| q != p).collect(),
                    PdrVariant::InfoNce => set.clone(),
                };
                let a: Vec<T> = pool.iter().map(|&q| n1.row(p).dot(&n2.row(q))).collect();
                let lse = log_sum_exp(a.iter().copied());
                let a_pos = n1.row(p).dot(&n2.row(p));
                loss += lse - a_pos;
                terms += 1;
                // d/da_pk' = softmax_k' over the pool, minus 1 on the positive
                let mut coefs: Vec<(usize, T)> = pool.iter().zip(&a).map(|(&q, &v)| (q, (v - lse).exp())).collect();
                coefs.push((p, -T::one()));
                for (q, c) in coefs {
                    let (r1, r2) = (n1.row(p).to_owned(), n2.row(q).to_owned());
                    d1n.row_mut(p).scaled_add(c, &r2);
                    d2n.row_mut(q).scaled_add(c, &r1);
                }
            }
        }
        per_sample.push((n1, norms1, d1n, n2, norms2, d2n));
    }
    if terms == 0 {
        log::warn!("no sample in the batch shares two or more parts across views; PDR is 0");
    }
    let scale = if terms == 0 { T::zero() } else { T::one() / T::from_usize_lossy(terms) };
    for (n1, norms1, d1n, n2, norms2, d2n) in per_sample {
        d_view1.push(l2_normalize_rows_backward(n1.view(), &norms1, (d1n * scale).view()));
        d_view2.push(l2_normalize_rows_backward(n2.view(), &norms2, (d2n * scale).view()));
    }
    Ok(PdrGrad { loss: loss * scale, terms, d_view1, d_view2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    fn direct_softmax(z: &[f64], tau: f64) -> Vec<f64> {
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| ((v - m) / tau).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    fn unit_cos(x: &Array2<f64>, w: &Array2<f64>) -> Array2<f64> {
        let xn = Array2::from_shape_fn(x.dim(), |(i, j)| x[[i, j]] / x.row(i).dot(&x.row(i)).sqrt());
        let wn = Array2::from_shape_fn(w.dim(), |(i, j)| w[[i, j]] / w.column(j).dot(&w.column(j)).sqrt());
        xn.dot(&wn)
    }

    #[test]
    fn identical_prototypes_give_log_c() {
        let x = array![[1.0, 2.0, -0.5], [0.3, -1.0, 4.0], [2.0, 0.0, 0.1]];
        let w = array![[1.0, 1.0, 1.0, 1.0], [0.5, 0.5, 0.5, 0.5], [-2.0, -2.0, -2.0, -2.0]];
        let r = sup_cls_loss(x.view(), &[Some(0), None, Some(3)], w.view(), 0.1).unwrap();
        assert!((r.loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn aligned_logits_with_cold_temperature_vanish() {
        let x = Array2::<f64>::eye(3) * 2.5;
        let r = sup_cls_loss(x.view(), &[Some(0), Some(1), Some(2)], Array2::eye(3).view(), 0.01).unwrap();
        assert!(r.loss < 1e-40);
    }

    #[test]
    fn no_labels_is_zero_with_zero_gradient() {
        let x = array![[1.0, 2.0], [3.0, -1.0]];
        let w = array![[1.0, 0.0], [0.0, 1.0]];
        let r = sup_cls_loss(x.view(), &[None, None], w.view(), 0.1).unwrap();
        assert_eq!(r.loss, 0.0);
        assert!(r.d_features.iter().chain(r.d_prototypes.iter()).all(|&v| v == 0.0));
        assert!(sup_cls_loss(x.view(), &[Some(2), None], w.view(), 0.1).is_err());
    }

    #[test]
    fn self_distillation_of_identical_views_is_entropy() {
        let x = array![[1.0, 0.2, -0.3], [-0.4, 1.1, 0.5], [0.3, 0.3, 0.9]];
        let w = array![[1.0, 0.0, 0.6], [0.0, 1.0, 0.6], [0.2, -0.3, 0.1]];
        let tau = 0.3;
        let cos = unit_cos(&x, &w);
        let entropy: f64 = cos
            .outer_iter()
            .map(|r| -direct_softmax(r.as_slice().unwrap(), tau).iter().map(|p| p * p.ln()).sum::<f64>())
            .sum::<f64>()
            / 3.0;
        for symmetric in [true, false] {
            let r = unsup_cls_loss(x.view(), x.view(), w.view(), tau, tau, symmetric).unwrap();
            assert!((r.loss - entropy).abs() < 1e-12);
        }
    }

    #[test]
    fn cold_teacher_is_hard_cross_entropy() {
        let x1 = array![[1.0, 0.2, -0.3], [-0.4, 1.1, 0.5]];
        let x2 = array![[0.8, 0.1, 0.0], [0.1, 0.9, 0.7]];
        let w = array![[1.0, 0.0, 0.6], [0.0, 1.0, 0.6], [0.2, -0.3, 0.1]];
        let soft = unsup_cls_loss(x1.view(), x2.view(), w.view(), 0.2, 1e-4, false).unwrap();
        let targets: Vec<Option<usize>> = unit_cos(&x2, &w)
            .outer_iter()
            .map(|r| Some((0..3).max_by(|&a, &b| r[a].total_cmp(&r[b])).unwrap()))
            .collect();
        let hard = sup_cls_loss(x1.view(), &targets, w.view(), 0.2).unwrap();
        assert!((soft.loss - hard.loss).abs() < 1e-9);
    }

    #[test]
    fn teacher_branch_carries_no_gradient() {
        let x1 = array![[1.0, 0.2, -0.3], [-0.4, 1.1, 0.5]];
        let x2 = array![[0.8, 0.1, 0.0], [0.1, 0.9, 0.7]];
        let w = array![[1.0, 0.0, 0.6], [0.0, 1.0, 0.6], [0.2, -0.3, 0.1]];
        let (tau_s, tau_t) = (0.5, 0.3);
        let r = unsup_cls_loss(x1.view(), x2.view(), w.view(), tau_s, tau_t, false).unwrap();
        // one-way: view 2 is only a teacher, so its gradient is exactly zero
        assert!(r.d_view2.iter().all(|&v| v == 0.0));
        let t2 = cosine_predictions(x2.view(), w.view(), tau_t).unwrap();
        let h = 1e-5;
        let mut detached_max = 0.0f64;
        let mut through_teacher_max = 0.0f64;
        for i in 0..2 {
            for j in 0..3 {
                let mut p = x1.clone();
                p[[i, j]] += h;
                let mut m = x1.clone();
                m[[i, j]] -= h;
                let fixed = |a: &Array2<f64>| {
                    unsup_cls_loss_with_teachers(a.view(), x2.view(), w.view(), tau_s, &t2, &t2, false).unwrap().loss
                };
                detached_max = detached_max.max(((fixed(&p) - fixed(&m)) / (2.0 * h) - r.d_view1[[i, j]]).abs());
                let mut p2 = x2.clone();
                p2[[i, j]] += h;
                let mut m2 = x2.clone();
                m2[[i, j]] -= h;
                let live =
                    |b: &Array2<f64>| unsup_cls_loss(x1.view(), b.view(), w.view(), tau_s, tau_t, false).unwrap().loss;
                through_teacher_max = through_teacher_max.max(((live(&p2) - live(&m2)) / (2.0 * h)).abs());
            }
        }
        assert!(detached_max < 1e-8);
        // differentiating through the teacher would give a non-zero view-2 gradient
        assert!(through_teacher_max > 1e-3);
    }

    #[test]
    fn mean_entropy_extremes() {
        let w = array![[1.0, -1.0], [0.0, 0.0]];
        let x = array![[2.0, 0.3], [-2.0, -0.3]];
        let r = mean_entropy_reg(x.view(), w.view(), 0.2, 1.5).unwrap();
        assert!((r.loss + 1.5 * 2f64.ln()).abs() < 1e-12);
        let g = r.d_features.iter().chain(r.d_prototypes.iter()).map(|v| v * v).sum::<f64>().sqrt();
        assert!(g < 1e-12, "gradient at uniform mean is {g}");

        let one_hot = mean_entropy_reg(array![[1.0, 0.0], [3.0, 0.0]].view(), w.view(), 0.005, 1.5).unwrap();
        assert!(one_hot.loss.abs() < 1e-30 && one_hot.loss <= 0.0);
    }

    #[test]
    fn sup_rep_degenerate_values() {
        let v1 = array![[0.3f64, 0.9]];
        let v2 = array![[-0.8, 0.1]];
        let r = sup_rep_loss(v1.view(), v2.view(), &[Some(4)], 0.5).unwrap();
        assert!(r.loss.abs() < 1e-12);

        let same = Array2::from_elem((3, 2), 0.7);
        let r = sup_rep_loss(same.view(), same.view(), &[Some(1), Some(1), Some(1)], 1.0).unwrap();
        assert!((r.loss - 5f64.ln()).abs() < 1e-12);

        let r = sup_rep_loss(same.view(), same.view(), &[None, None, None], 1.0).unwrap();
        assert_eq!(r.loss, 0.0);
    }

    #[test]
    fn sup_rep_matches_direct_evaluation() {
        let v1 = array![[1.0f64, 0.2], [0.1, 1.0], [-0.5, 0.5]];
        let v2 = array![[0.9, 0.3], [-0.2, 1.0], [0.6, 0.4]];
        let labels = [Some(0), Some(1), Some(0)];
        let tau = 0.7;
        let rows: Vec<Vec<f64>> = v1
            .outer_iter()
            .chain(v2.outer_iter())
            .map(|r| {
                let n = r.dot(&r).sqrt();
                r.iter().map(|v| v / n).collect()
            })
            .collect();
        let lab: Vec<usize> = (0..6).map(|r| labels[r % 3].unwrap()).collect();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut total = 0.0;
        for i in 0..6 {
            let denom: f64 = (0..6).filter(|&n| n != i).map(|n| (dot(&rows[i], &rows[n]) / tau).exp()).sum();
            let pos: Vec<usize> = (0..6).filter(|&j| j != i && lab[j] == lab[i]).collect();
            let s: f64 = pos.iter().map(|&j| ((dot(&rows[i], &rows[j]) / tau).exp() / denom).ln()).sum();
            total -= s / pos.len() as f64;
        }
        let r = sup_rep_loss(v1.view(), v2.view(), &labels, tau).unwrap();
        assert!((r.loss - total / 6.0).abs() < 1e-12);
    }

    #[test]
    fn unsup_rep_hand_values() {
        let x = array![[1.0, 0.0], [0.0, 1.0]];
        let r = unsup_rep_loss(x.view(), x.view(), 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((r.loss - ((e + 2.0).ln() - 1.0)).abs() < 1e-12);

        let opposed = array![[1.0, 0.0], [-1.0, 0.0]];
        let r = unsup_rep_loss(opposed.view(), opposed.view(), 0.01).unwrap();
        assert!(r.loss < 1e-80);

        let one = array![[1.0, 0.0]];
        assert!(unsup_rep_loss(one.view(), one.view(), 1.0).is_err());
    }

    #[test]
    fn pdr_hand_values() {
        let ortho = vec![array![[1.0f64, 0.0, 0.0], [0.0, 1.0, 0.0]]];
        let shared = vec![BTreeSet::from([0, 1])];
        let r = pdr_loss(&ortho, &ortho, &shared, PdrVariant::Exact).unwrap();
        assert_eq!(r.terms, 2);
        assert!((r.loss + 1.0).abs() < 1e-12);

        let k = 5;
        let same = vec![Array2::from_elem((k, 3), 0.4); 2];
        let all: Vec<BTreeSet<usize>> = vec![(0..k).collect(); 2];
        let r = pdr_loss(&same, &same, &all, PdrVariant::Exact).unwrap();
        assert_eq!(r.terms, 2 * k);
        assert!((r.loss - ((k - 1) as f64).ln()).abs() < 1e-12);
        let r = pdr_loss(&same, &same, &all, PdrVariant::InfoNce).unwrap();
        assert!((r.loss - (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn pdr_skips_samples_without_two_shared_parts() {
        let parts = vec![array![[1.0, 0.0], [0.0, 1.0]], array![[0.5, 0.5], [0.2, -1.0]]];
        let shared = vec![BTreeSet::from([1]), BTreeSet::new()];
        let r = pdr_loss(&parts, &parts, &shared, PdrVariant::Exact).unwrap();
        assert_eq!((r.loss, r.terms), (0.0, 0));
        assert!(r.d_view1.iter().chain(&r.d_view2).all(|d| d.iter().all(|&v| v == 0.0)));
        let bad = vec![BTreeSet::from([0, 2]), BTreeSet::new()];
        assert!(pdr_loss(&parts, &parts, &bad, PdrVariant::Exact).is_err());
    }

    fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
        proptest::collection::vec(-2.0f64..2.0, rows * cols)
            .prop_filter("rows away from zero", move |v| {
                v.chunks(cols).all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-2)
            })
            .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
    }

    fn permute(x: &Array2<f64>, perm: &[usize]) -> Array2<f64> {
        Array2::from_shape_fn(x.dim(), |(i, j)| x[[perm[i], j]])
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn losses_ignore_sample_order(
            x1 in matrix(5, 3),
            x2 in matrix(5, 3),
            w in matrix(3, 4),
            labels in proptest::collection::vec(proptest::option::of(0usize..4), 5),
            perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(),
        ) {
            let (p1, p2) = (permute(&x1, &perm), permute(&x2, &perm));
            let plabels: Vec<Option<usize>> = perm.iter().map(|&i| labels[i]).collect();
            let close = |a: f64, b: f64| (a - b).abs() <= 1e-10 * (1.0 + a.abs());
            let a = sup_cls_loss(x1.view(), &labels, w.view(), 0.1).unwrap().loss;
            let b = sup_cls_loss(p1.view(), &plabels, w.view(), 0.1).unwrap().loss;
            prop_assert!(close(a, b));
            let a = unsup_cls_loss(x1.view(), x2.view(), w.view(), 0.1, 0.05, true).unwrap().loss;
            let b = unsup_cls_loss(p1.view(), p2.view(), w.view(), 0.1, 0.05, true).unwrap().loss;
            prop_assert!(close(a, b));
            let a = mean_entropy_reg(x1.view(), w.view(), 0.1, 1.0).unwrap().loss;
            let b = mean_entropy_reg(p1.view(), w.view(), 0.1, 1.0).unwrap().loss;
            prop_assert!(close(a, b));
            let a = sup_rep_loss(x1.view(), x2.view(), &labels, 1.0).unwrap().loss;
            let b = sup_rep_loss(p1.view(), p2.view(), &plabels, 1.0).unwrap().loss;
            prop_assert!(close(a, b));
            let a = unsup_rep_loss(x1.view(), x2.view(), 0.07).unwrap().loss;
            let b = unsup_rep_loss(p1.view(), p2.view(), 0.07).unwrap().loss;
            prop_assert!(close(a, b));
            let parts1: Vec<Array2<f64>> = (0..5).map(|i| x1.select(Axis(0), &[i, (i + 1) % 5, (i + 3) % 5])).collect();
            let parts2: Vec<Array2<f64>> = (0..5).map(|i| x2.select(Axis(0), &[i, (i + 2) % 5, (i + 4) % 5])).collect();
            let shared: Vec<BTreeSet<usize>> = (0..5).map(|i| (0..3).filter(|k| (i + k) % 4 != 0).collect()).collect();
            let pp1: Vec<_> = perm.iter().map(|&i| parts1[i].clone()).collect();
            let pp2: Vec<_> = perm.iter().map(|&i| parts2[i].clone()).collect();
            let ps: Vec<_> = perm.iter().map(|&i| shared[i].clone()).collect();
            let a = pdr_loss(&parts1, &parts2, &shared, PdrVariant::Exact).unwrap().loss;
            let b = pdr_loss(&pp1, &pp2, &ps, PdrVariant::Exact).unwrap().loss;
            prop_assert!(close(a, b));
        }

        #[test]
        fn cosine_losses_ignore_positive_scale(
            x in matrix(4, 3),
            w in matrix(3, 5),
            scales in proptest::collection::vec(0.01f64..100.0, 4),
            wscale in 0.01f64..100.0,
        ) {
            let labels = [Some(0), None, Some(4), Some(2)];
            let mut xs = x.clone();
            for (mut r, s) in xs.outer_iter_mut().zip(&scales) {
                r *= *s;
            }
            let a = sup_cls_loss(x.view(), &labels, w.view(), 0.1).unwrap().loss;
            let b = sup_cls_loss(xs.view(), &labels, (&w * wscale).view(), 0.1).unwrap().loss;
            prop_assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()));
        }
    }
}
