//! Part decomposition: attention filtering, per-class mixtures over patch
//! features, selection of the part count, and posterior part-attention maps.

mod em;
mod io;
mod kmeans;
mod silhouette;

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use em::{fit_gmm, GmmConfig, GmmFit, GmmParams, COLLAPSE_WEIGHT};
pub use io::{decode_gmms, encode_gmms, load_gmms, save_gmms, GMM_MAGIC, GMM_VERSION};
pub use kmeans::{kmeans, kmeans_pp_seed, lloyd, KMeansResult};
pub use silhouette::silhouette_score;

use crate::dataset::{foreground_mask, Sample};
use crate::error::{Error, Result};
use crate::scalar::{log_sum_exp, Scalar};

/// Indices of patches whose attention is at least the sample's mean attention.
pub fn filter_patches(attention: ArrayView1<f32>) -> Vec<usize> {
    let mean = attention.mean().unwrap_or(0.0);
    attention.iter().enumerate().filter(|(_, &a)| a >= mean).map(|(j, _)| j).collect()
}

/// Stacks the attention-filtered fixed patches of `samples` into one matrix.
pub fn filtered_patch_matrix<'a, T: Scalar>(
    samples: impl IntoIterator<Item = &'a Sample>,
    normalize: bool,
) -> Array2<T> {
    let mut rows: Vec<T> = Vec::new();
    let mut d = 0;
    let mut m = 0;
    for s in samples {
        d = s.patches_fixed.ncols();
        for j in filter_patches(s.attention.view()) {
            let row = s.patches_fixed.row(j);
            let scale = if normalize {
                let n = row.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
                if n > 0.0 {
                    1.0 / n
                } else {
                    1.0
                }
            } else {
                1.0
            };
            rows.extend(row.iter().map(|&x| T::lit(x as f64 * scale)));
            m += 1;
        }
    }
    Array2::from_shape_vec((m, d), rows).expect("sized")
}

/// Posterior part-attention map (`N_p x K`); rows are distributions over parts.
#[derive(Clone, Debug, PartialEq)]
pub struct PartAttentionMap<T> {
    pub m: Array2<T>,
    /// Patches whose every component density underflowed and got a uniform row.
    pub underflow_rows: usize,
}

/// `M[j, k] = pi_k N(f_j; k) / sum_k' pi_k' N(f_j; k')`, evaluated in log space.
pub fn part_posteriors<T: Scalar>(patches: ArrayView2<T>, params: &GmmParams<T>) -> PartAttentionMap<T> {
    let k = params.k();
    let mut m = Array2::<T>::zeros((patches.nrows(), k));
    let mut underflow_rows = 0;
    let uniform = T::one() / T::from_usize_lossy(k);
    for (j, f) in patches.outer_iter().enumerate() {
        let logs = params.weighted_log_densities(f);
        let lse = log_sum_exp(logs.to_vec());
        if !lse.is_finite() {
            underflow_rows += 1;
            m.row_mut(j).fill(uniform);
            continue;
        }
        for c in 0..k {
            m[[j, c]] = (logs[c] - lse).exp();
        }
    }
    if underflow_rows > 0 {
        log::warn!("{underflow_rows} patches underflowed every part density; using uniform rows");
    }
    PartAttentionMap { m, underflow_rows }
}

/// `v^k = sum_j M[j, k] f_j`, i.e. `M^T F` (`K x d`).
pub fn part_features<T: Scalar>(m: ArrayView2<T>, patches_learnable: ArrayView2<T>) -> Result<Array2<T>> {
    if m.nrows() != patches_learnable.nrows() {
        return Err(Error::Shape(format!(
            "attention map has {} patches, feature matrix {}",
            m.nrows(),
            patches_learnable.nrows()
        )));
    }
    Ok(m.t().dot(&patches_learnable))
}

/// Parts that are the argmax of at least one foreground patch.
pub fn present_parts<T: Scalar>(m: ArrayView2<T>, attention: &Array1<f32>) -> BTreeSet<usize> {
    foreground_mask(attention)
        .into_iter()
        .enumerate()
        .filter(|&(_, fg)| fg)
        .map(|(j, _)| {
            let row = m.row(j);
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

/// Parts present in both views of one sample.
pub fn shared_parts<T: Scalar>(
    m_view1: ArrayView2<T>,
    attention_view1: &Array1<f32>,
    m_view2: ArrayView2<T>,
    attention_view2: &Array1<f32>,
) -> BTreeSet<usize> {
    let a = present_parts(m_view1, attention_view1);
    let b = present_parts(m_view2, attention_view2);
    a.intersection(&b).copied().collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectKConfig {
    pub k_min: usize,
    pub k_max: usize,
    pub kmeans_restarts: usize,
    pub kmeans_iters: usize,
}

impl Default for SelectKConfig {
    fn default() -> Self {
        SelectKConfig { k_min: 3, k_max: 8, kmeans_restarts: 4, kmeans_iters: 50 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectKReport {
    pub k: usize,
    /// `(k, mean silhouette)` for every candidate value.
    pub scores: Vec<(usize, f64)>,
}

/// Reorders `fit`'s components to best match `reference` (squared distance
/// between means), so part slots keep their meaning across refits.
pub fn align_components<T: Scalar>(fit: &GmmParams<T>, reference: &GmmParams<T>) -> Result<GmmParams<T>> {
    if fit.k() != reference.k() || fit.dim() != reference.dim() {
        return Err(Error::Shape(format!(
            "cannot align a {}x{} mixture to a {}x{} one",
            fit.k(),
            fit.dim(),
            reference.k(),
            reference.dim()
        )));
    }
    let k = fit.k();
    let cost = Array2::from_shape_fn((k, k), |(r, f)| {
        let d = &reference.means.row(r) - &fit.means.row(f);
        d.dot(&d)
    });
    let order = crate::evaluation::hungarian_match(cost.view())?;
    Ok(fit.permuted(&order))
}

/// Chooses the part count maximizing the mean silhouette over per-class patch
/// sets; ties go to the smaller `k`.
pub fn select_k<T: Scalar, R: Rng + ?Sized>(
    class_patch_sets: &[Array2<T>],
    cfg: &SelectKConfig,
    rng: &mut R,
) -> Result<SelectKReport> {
    if cfg.k_min < 2 || cfg.k_max < cfg.k_min {
        return Err(Error::Config(format!("invalid k range [{}, {}]", cfg.k_min, cfg.k_max)));
    }
    let usable: Vec<&Array2<T>> = class_patch_sets
        .iter()
        .filter(|s| {
            if s.nrows() <= cfg.k_max {
                log::warn!("skipping a class patch set with {} points (need > {})", s.nrows(), cfg.k_max);
                false
            } else {
                true
            }
        })
        .collect();
    if usable.is_empty() {
        return Err(Error::Empty("no class has enough filtered patches for K selection".into()));
    }
    let mut scores = Vec::new();
    for k in cfg.k_min..=cfg.k_max {
        let mut total = 0.0;
        for set in &usable {
            let km = kmeans(set.view(), k, cfg.kmeans_restarts, cfg.kmeans_iters, rng)?;
            // k-means may leave a cluster empty on degenerate data; score it 0
            total += silhouette_score(set.view(), &km.labels).map(|s| s.as_f64()).unwrap_or(0.0);
        }
        scores.push((k, total / usable.len() as f64));
    }
    let mut best = scores[0];
    for &(k, s) in &scores[1..] {
        if s > best.1 {
            best = (k, s);
        }
    }
    Ok(SelectKReport { k: best.0, scores })
}
