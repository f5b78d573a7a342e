//! Diagonal-covariance Gaussian mixtures fitted by EM.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::kmeans::{kmeans_pp_seed, lloyd};
use crate::error::{Error, Result};
use crate::scalar::{log_sum_exp, Scalar};

/// Weight below which a component counts as collapsed.
pub const COLLAPSE_WEIGHT: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GmmConfig {
    pub max_em_iters: usize,
    /// Relative log-likelihood improvement below which EM stops.
    pub em_tol: f64,
    pub var_floor: f64,
    /// Lloyd iterations run on the k-means++ seeds before EM.
    pub kmeans_iters: usize,
}

impl Default for GmmConfig {
    fn default() -> Self {
        GmmConfig { max_em_iters: 100, em_tol: 1e-4, var_floor: 1e-6, kmeans_iters: 10 }
    }
}

/// Mixture weights, means and diagonal variances (`K x d`).
#[derive(Clone, Debug, PartialEq)]
pub struct GmmParams<T> {
    pub weights: Array1<T>,
    pub means: Array2<T>,
    pub variances: Array2<T>,
}

impl<T: Scalar> GmmParams<T> {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    /// Components reordered so that new component `i` is old `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        GmmParams {
            weights: self.weights.select(ndarray::Axis(0), order),
            means: self.means.select(ndarray::Axis(0), order),
            variances: self.variances.select(ndarray::Axis(0), order),
        }
    }

    pub fn validate(&self, var_floor: f64) -> Result<()> {
        let k = self.k();
        if k == 0 || self.means.nrows() != k || self.variances.dim() != self.means.dim() {
            return Err(Error::Shape(format!(
                "gmm with {k} weights, means {:?}, variances {:?}",
                self.means.dim(),
                self.variances.dim()
            )));
        }
        let total: T = self.weights.sum();
        if (total - T::one()).abs() > T::lit(1e-6) || self.weights.iter().any(|&w| w < T::zero()) {
            return Err(Error::Invalid(format!("mixture weights sum to {total}")));
        }
        // file round trips pass through f32
        let floor = T::lit(var_floor * (1.0 - 1e-6));
        if self.variances.iter().any(|&v| !(v >= floor) || !v.is_finite()) {
            return Err(Error::Invalid("variance below floor or non-finite".into()));
        }
        Ok(())
    }

    /// `ln N(x; mu_k, diag(var_k))`.
    pub fn component_log_density(&self, x: ArrayView1<T>, k: usize) -> T {
        let ln_2pi = T::lit(std::f64::consts::TAU.ln());
        let mut acc = T::zero();
        for ((&xi, &mu), &var) in x.iter().zip(self.means.row(k).iter()).zip(self.variances.row(k).iter()) {
            let diff = xi - mu;
            acc += ln_2pi + var.ln() + diff * diff / var;
        }
        -T::lit(0.5) * acc
    }

    /// `ln pi_k + ln N(x; k)` for every component.
    pub fn weighted_log_densities(&self, x: ArrayView1<T>) -> Array1<T> {
        Array1::from_iter((0..self.k()).map(|k| self.weights[k].ln() + self.component_log_density(x, k)))
    }

    /// Total log-likelihood of `points`.
    pub fn log_likelihood(&self, points: ArrayView2<T>) -> T {
        points.outer_iter().map(|x| log_sum_exp(self.weighted_log_densities(x).to_vec())).sum()
    }

    pub fn cast<U: Scalar>(&self) -> GmmParams<U> {
        let c = |v: &T| U::lit(v.as_f64());
        GmmParams { weights: self.weights.map(c), means: self.means.map(c), variances: self.variances.map(c) }
    }
}

#[derive(Clone, Debug)]
pub struct GmmFit<T> {
    pub params: GmmParams<T>,
    pub log_likelihood: T,
    /// Log-likelihood evaluated at the start of every EM iteration plus the final value.
    pub history: Vec<T>,
    pub iterations: usize,
    /// Iteration index at which a collapsed component was reseeded, if any.
    pub reinitialized_at: Option<usize>,
}

fn per_dim_variance<T: Scalar>(points: ArrayView2<T>, floor: T) -> Array1<T> {
    let mean = points.mean_axis(Axis(0)).expect("non-empty");
    let m = T::from_usize_lossy(points.nrows());
    let mut var = Array1::<T>::zeros(points.ncols());
    for row in points.outer_iter() {
        for ((v, &x), &mu) in var.iter_mut().zip(row.iter()).zip(mean.iter()) {
            *v += (x - mu) * (x - mu);
        }
    }
    var.mapv(|v| (v / m).max(floor))
}

/// E-step: responsibilities (`m x K`) and the log-likelihood.
fn e_step<T: Scalar>(params: &GmmParams<T>, points: ArrayView2<T>) -> (Array2<T>, T) {
    let k = params.k();
    let mut resp = Array2::<T>::zeros((points.nrows(), k));
    let mut ll = T::zero();
    for (i, x) in points.outer_iter().enumerate() {
        let logs = params.weighted_log_densities(x);
        let lse = log_sum_exp(logs.to_vec());
        ll += lse;
        for c in 0..k {
            resp[[i, c]] = (logs[c] - lse).exp();
        }
    }
    (resp, ll)
}

/// M-step. Returns the index of a collapsed component, if any.
fn m_step<T: Scalar>(params: &mut GmmParams<T>, points: ArrayView2<T>, resp: &Array2<T>, floor: T) -> Option<usize> {
    let m = T::from_usize_lossy(points.nrows());
    let mut collapsed = None;
    for c in 0..params.k() {
        let r = resp.column(c);
        let nk: T = r.sum();
        let weight = nk / m;
        if weight < T::lit(COLLAPSE_WEIGHT) {
            params.weights[c] = weight;
            collapsed.get_or_insert(c);
            continue;
        }
        let mut mean = Array1::<T>::zeros(points.ncols());
        for (x, &ri) in points.outer_iter().zip(r.iter()) {
            mean.scaled_add(ri, &x);
        }
        mean.mapv_inplace(|v| v / nk);
        let mut var = Array1::<T>::zeros(points.ncols());
        for (x, &ri) in points.outer_iter().zip(r.iter()) {
            for ((v, &xi), &mu) in var.iter_mut().zip(x.iter()).zip(mean.iter()) {
                *v += ri * (xi - mu) * (xi - mu);
            }
        }
        params.weights[c] = weight;
        params.means.row_mut(c).assign(&mean);
        params.variances.row_mut(c).assign(&var.mapv(|v| (v / nk).max(floor)));
    }
    let total = params.weights.sum();
    params.weights.mapv_inplace(|w| w / total);
    collapsed
}

/// Point with the largest Mahalanobis distance to its closest healthy component.
fn farthest_point<T: Scalar>(params: &GmmParams<T>, points: ArrayView2<T>, skip: usize) -> usize {
    let mut best = (0, T::neg_infinity());
    for (i, x) in points.outer_iter().enumerate() {
        let mut closest = T::infinity();
        for c in (0..params.k()).filter(|&c| c != skip) {
            let d: T = x
                .iter()
                .zip(params.means.row(c).iter())
                .zip(params.variances.row(c).iter())
                .map(|((&xi, &mu), &v)| (xi - mu) * (xi - mu) / v)
                .sum();
            closest = closest.min(d);
        }
        if closest > best.1 {
            best = (i, closest);
        }
    }
    best.0
}

/// Fits a `K`-component diagonal mixture to the rows of `points`.
///
/// Seeds come from k-means++ refined by a few Lloyd steps; EM then runs until
/// the relative log-likelihood gain drops below `em_tol`. A component whose
/// weight falls under [`COLLAPSE_WEIGHT`] is reseeded once at the farthest
/// point; a second collapse is an error.
pub fn fit_gmm<T: Scalar, R: Rng + ?Sized>(
    points: ArrayView2<T>,
    k: usize,
    cfg: &GmmConfig,
    rng: &mut R,
) -> Result<GmmFit<T>> {
    let (m, d) = points.dim();
    if d == 0 {
        return Err(Error::Shape("points have zero dimension".into()));
    }
    if k == 0 || m < k {
        return Err(Error::TooFewPoints { what: "mixture fit", needed: k.max(1), got: m });
    }
    let floor = T::lit(cfg.var_floor);
    let seeds = kmeans_pp_seed(points, k, rng)?;
    let means = if cfg.kmeans_iters > 0 { lloyd(points, seeds, cfg.kmeans_iters).centers } else { seeds };
    let global_var = per_dim_variance(points, floor);
    let mut variances = Array2::<T>::zeros((k, d));
    for mut row in variances.outer_iter_mut() {
        row.assign(&global_var);
    }
    let mut params = GmmParams { weights: Array1::from_elem(k, T::one() / T::from_usize_lossy(k)), means, variances };

    let tol = T::lit(cfg.em_tol);
    let mut history = Vec::new();
    let mut reinitialized_at = None;
    let mut iterations = 0;
    let mut prev_ll: Option<T> = None;
    let (mut resp, mut ll) = e_step(&params, points);
    while iterations < cfg.max_em_iters {
        history.push(ll);
        if let Some(prev) = prev_ll {
            let gain = (ll - prev) / prev.abs().max(T::lit(1e-300));
            if gain.abs() < tol {
                break;
            }
        }
        prev_ll = Some(ll);
        if let Some(c) = m_step(&mut params, points, &resp, floor) {
            if reinitialized_at.is_some() {
                return Err(Error::ComponentCollapse { component: c });
            }
            let far = farthest_point(&params, points, c);
            params.means.row_mut(c).assign(&points.row(far));
            params.variances.row_mut(c).assign(&global_var);
            params.weights[c] = T::one() / T::from_usize_lossy(k);
            let total = params.weights.sum();
            params.weights.mapv_inplace(|w| w / total);
            reinitialized_at = Some(iterations);
            // the reseed breaks monotonicity; restart the convergence test
            prev_ll = None;
        }
        iterations += 1;
        (resp, ll) = e_step(&params, points);
        if !ll.is_finite() {
            return Err(Error::Numerical(format!("EM log-likelihood became {ll}")));
        }
    }
    if history.last() != Some(&ll) {
        history.push(ll);
    }
    Ok(GmmFit { params, log_likelihood: ll, history, iterations, reinitialized_at })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn single_component_is_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = Array2::from_shape_fn((200, 4), |(_, t)| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * (t as f64 + 1.0) + t as f64
        });
        let fit = fit_gmm(pts.view(), 1, &GmmConfig::default(), &mut rng).unwrap();
        assert_eq!(fit.params.weights[0], 1.0);
        for t in 0..4 {
            let col = pts.column(t);
            let mean = col.sum() / 200.0;
            let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 200.0;
            assert!((fit.params.means[[0, t]] - mean).abs() < 1e-9);
            assert!((fit.params.variances[[0, t]] - var).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_points_hit_the_floor() {
        let pts = Array2::<f64>::from_elem((10, 3), 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fit = fit_gmm(pts.view(), 1, &GmmConfig::default(), &mut rng).unwrap();
        assert!(fit.params.variances.iter().all(|&v| v == 1e-6));
        fit.params.validate(1e-6).unwrap();
    }

    #[test]
    fn too_few_points_is_an_error() {
        let pts = Array2::<f64>::zeros((2, 3));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(fit_gmm(pts.view(), 3, &GmmConfig::default(), &mut rng), Err(Error::TooFewPoints { .. })));
    }

    #[test]
    fn likelihood_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10 {
            let pts = Array2::from_shape_fn((120, 3), |(i, _)| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z + (i % 3) as f64 * 2.0
            });
            let fit =
                fit_gmm(pts.view(), 3, &GmmConfig { em_tol: 0.0, max_em_iters: 40, ..Default::default() }, &mut rng)
                    .unwrap();
            assert!(fit.reinitialized_at.is_none());
            for w in fit.history.windows(2) {
                assert!(w[1] >= w[0] - 1e-9, "{} -> {}", w[0], w[1]);
            }
        }
    }
}
