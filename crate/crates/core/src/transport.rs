//! Sinkhorn-Knopp scaling of a prediction matrix onto the class-uniform
//! transport polytope: rows sum to 1, every column sums to `n / C`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{log_sum_exp, Scalar};

/// Entries are floored here before scaling.
pub const CLAMP_FLOOR: f64 = 1e-12;
/// Below this, scaling switches to the log domain.
pub const LOG_DOMAIN_THRESHOLD: f64 = 1e-30;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SinkhornConfig {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig { max_iters: 100, tol: 1e-6 }
    }
}

#[derive(Clone, Debug)]
pub struct SinkhornOutcome<T> {
    /// The adjusted matrix `Q = D P E`.
    pub q: Array2<T>,
    pub converged: bool,
    pub iterations: usize,
    /// Max constraint violation after the final sweep.
    pub violation: T,
    /// Violation after every full row+column sweep.
    pub history: Vec<T>,
    pub log_domain: bool,
}

/// Largest of `|row_sum - 1|` and `|col_sum - n/C| / (n/C)` over all rows and columns.
pub fn constraint_violation<T: Scalar>(q: ArrayView2<T>) -> T {
    let (n, c) = q.dim();
    if n == 0 || c == 0 {
        return T::zero();
    }
    let target = T::from_usize_lossy(n) / T::from_usize_lossy(c);
    let rows = q.sum_axis(Axis(1)).iter().fold(T::zero(), |m, &s| m.max((s - T::one()).abs()));
    let cols = q.sum_axis(Axis(0)).iter().fold(T::zero(), |m, &s| m.max((s - target).abs() / target));
    rows.max(cols)
}

/// Alternating row normalization and column scaling.
///
/// Non-convergence is not an error: the outcome carries `converged = false`
/// and the final violation, and a warning is logged.
pub fn sinkhorn_adjust<T: Scalar>(p: ArrayView2<T>, cfg: &SinkhornConfig) -> Result<SinkhornOutcome<T>> {
    let (n, c) = p.dim();
    if n == 0 || c == 0 {
        return Err(Error::Empty("sinkhorn needs a non-empty matrix".into()));
    }
    if p.iter().any(|&v| !(v >= T::zero()) || !v.is_finite()) {
        return Err(Error::Invalid("prediction matrix must be finite and non-negative".into()));
    }
    for (j, col) in p.axis_iter(Axis(1)).enumerate() {
        if col.iter().all(|&v| v == T::zero()) {
            return Err(Error::ZeroColumn { column: j });
        }
    }
    let floor = T::lit(CLAMP_FLOOR);
    let log_domain = p.iter().any(|&v| v < T::lit(LOG_DOMAIN_THRESHOLD));
    let clamped = p.mapv(|v| v.max(floor));
    let out = if log_domain { scale_log(&clamped, cfg) } else { scale_linear(&clamped, cfg) };
    if !out.converged {
        log::warn!(
            "sinkhorn did not converge in {} iterations (violation {:.3e})",
            cfg.max_iters,
            out.violation.as_f64()
        );
    }
    Ok(out)
}

fn scale_linear<T: Scalar>(p: &Array2<T>, cfg: &SinkhornConfig) -> SinkhornOutcome<T> {
    let (n, c) = p.dim();
    let target = T::from_usize_lossy(n) / T::from_usize_lossy(c);
    let tol = T::lit(cfg.tol);
    let mut row_scale = Array1::<T>::ones(n);
    let mut col_scale = Array1::<T>::ones(c);
    let mut history = Vec::new();
    let mut violation = constraint_violation(p.view());
    let mut converged = violation < tol;
    let mut iterations = 0;
    while !converged && iterations < cfg.max_iters {
        // d_i = 1 / sum_j P_ij e_j
        for (i, row) in p.outer_iter().enumerate() {
            let s: T = row.iter().zip(col_scale.iter()).map(|(&a, &b)| a * b).sum();
            row_scale[i] = T::one() / s;
        }
        // e_j = (n/C) / sum_i d_i P_ij
        let mut col_sums = Array1::<T>::zeros(c);
        for (row, &d) in p.outer_iter().zip(row_scale.iter()) {
            col_sums.scaled_add(d, &row);
        }
        for (e, &s) in col_scale.iter_mut().zip(col_sums.iter()) {
            *e = target / s;
        }
        iterations += 1;
        // columns are exact after the column step; only rows can be off
        let mut worst = T::zero();
        for (row, &d) in p.outer_iter().zip(row_scale.iter()) {
            let s: T = row.iter().zip(col_scale.iter()).map(|(&a, &b)| a * b).sum::<T>() * d;
            worst = worst.max((s - T::one()).abs());
        }
        violation = worst;
        history.push(violation);
        converged = violation < tol;
    }
    let mut q = p.clone();
    for (mut row, &d) in q.outer_iter_mut().zip(row_scale.iter()) {
        row.zip_mut_with(&col_scale, |x, &e| *x = *x * d * e);
    }
    if iterations > 0 {
        violation = constraint_violation(q.view());
    }
    SinkhornOutcome { q, converged, iterations, violation, history, log_domain: false }
}

fn scale_log<T: Scalar>(p: &Array2<T>, cfg: &SinkhornConfig) -> SinkhornOutcome<T> {
    let (n, c) = p.dim();
    let log_target = (T::from_usize_lossy(n) / T::from_usize_lossy(c)).ln();
    let tol = T::lit(cfg.tol);
    let log_p = p.mapv(|v| v.ln());
    let mut log_d = Array1::<T>::zeros(n);
    let mut log_e = Array1::<T>::zeros(c);
    let mut history = Vec::new();
    let mut violation = constraint_violation(p.view());
    let mut converged = violation < tol;
    let mut iterations = 0;
    while !converged && iterations < cfg.max_iters {
        for (i, row) in log_p.outer_iter().enumerate() {
            log_d[i] = -log_sum_exp(row.iter().zip(log_e.iter()).map(|(&a, &b)| a + b));
        }
        for (j, col) in log_p.axis_iter(Axis(1)).enumerate() {
            log_e[j] = log_target - log_sum_exp(col.iter().zip(log_d.iter()).map(|(&a, &b)| a + b));
        }
        iterations += 1;
        let mut worst = T::zero();
        for (row, &ld) in log_p.outer_iter().zip(log_d.iter()) {
            let s = (ld + log_sum_exp(row.iter().zip(log_e.iter()).map(|(&a, &b)| a + b))).exp();
            worst = worst.max((s - T::one()).abs());
        }
        violation = worst;
        history.push(violation);
        converged = violation < tol;
    }
    let mut q = log_p;
    for (mut row, &ld) in q.outer_iter_mut().zip(log_d.iter()) {
        row.zip_mut_with(&log_e, |x, &le| *x = (*x + ld + le).exp());
    }
    violation = constraint_violation(q.view());
    SinkhornOutcome { q, converged, iterations, violation, history, log_domain: true }
}
