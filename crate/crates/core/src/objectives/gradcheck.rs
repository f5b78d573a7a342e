//! Central finite differences as an oracle for the analytic gradients.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::{
    compute_teachers, cosine_predictions, mean_entropy_reg, pdr_loss, sup_cls_loss, sup_rep_loss,
    total_objective_with_teachers, unsup_cls_loss_with_teachers, unsup_rep_loss, BatchViewPair, LossConfig,
    ObjectiveKind, PartBatch, PdrVariant, StepWeights,
};
use crate::error::Result;
use crate::model::{Model, ModelConfig};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm; 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckRow {
    pub check: String,
    pub instance: usize,
    pub params: usize,
    pub rel_err: f64,
    pub passed: bool,
}

fn row(check: &str, instance: usize, analytic: &[f64], numeric: &[f64]) -> GradCheckRow {
    let rel_err = relative_error(analytic, numeric);
    GradCheckRow {
        check: check.to_string(),
        instance,
        params: analytic.len(),
        rel_err,
        passed: rel_err < FD_TOLERANCE && rel_err.is_finite(),
    }
}

fn gaussian(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| StandardNormal.sample(rng))
}

/// Concatenates arrays into one flat vector.
fn pack(arrays: &[&Array2<f64>]) -> Vec<f64> {
    arrays.iter().flat_map(|a| a.iter().copied()).collect()
}

/// Splits a flat vector back into arrays of the given shapes.
fn unpack(flat: &[f64], shapes: &[(usize, usize)]) -> Vec<Array2<f64>> {
    let mut at = 0;
    shapes
        .iter()
        .map(|&s| {
            let n = s.0 * s.1;
            let a = Array2::from_shape_vec(s, flat[at..at + n].to_vec()).expect("sized");
            at += n;
            a
        })
        .collect()
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<Option<usize>> {
    (0..n).map(|_| if rng.random_bool(0.6) { Some(rng.random_range(0..classes)) } else { None }).collect()
}

/// A random batch with part inputs; shared sets are random subsets.
pub(crate) fn random_batch(
    rng: &mut ChaCha8Rng,
    b: usize,
    d: usize,
    np: usize,
    k: usize,
    classes: usize,
) -> BatchViewPair<f64> {
    let cls = [gaussian(rng, (b, d)), gaussian(rng, (b, d))];
    let labels = random_labels(rng, b, classes);
    let mut patches = [Vec::new(), Vec::new()];
    let mut maps = [Vec::new(), Vec::new()];
    for v in 0..2 {
        for _ in 0..b {
            patches[v].push(gaussian(rng, (np, d)));
            let mut m = gaussian(rng, (np, k)).mapv(f64::exp);
            for mut r in m.outer_iter_mut() {
                let s = r.sum();
                r /= s;
            }
            maps[v].push(m);
        }
    }
    let shared = (0..b).map(|_| (0..k).filter(|_| rng.random_bool(0.8)).collect::<BTreeSet<usize>>()).collect();
    BatchViewPair { cls, labels, parts: Some(PartBatch { patches, maps, shared }) }
}

/// Runs every finite-difference check `instances` times.
pub fn gradcheck_suite(seed: u64, instances: usize) -> Result<Vec<GradCheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let h = FD_STEP;
    for inst in 0..instances {
        let (b, d, c) = (rng.random_range(2..7), rng.random_range(2..6), rng.random_range(2..5));
        let tau = rng.random_range(0.2..1.0);
        let x = gaussian(&mut rng, (b, d));
        let x2 = gaussian(&mut rng, (b, d));
        let w = gaussian(&mut rng, (d, c));
        let labels = random_labels(&mut rng, b, c);
        let shapes = [(b, d), (d, c)];

        let g = sup_cls_loss(x.view(), &labels, w.view(), tau)?;
        let f = |p: &[f64]| {
            let a = unpack(p, &shapes);
            sup_cls_loss(a[0].view(), &labels, a[1].view(), tau).map(|r| r.loss).unwrap_or(f64::NAN)
        };
        let numeric = central_difference(f, &pack(&[&x, &w]), h);
        rows.push(row("sup_cls", inst, &pack(&[&g.d_features, &g.d_prototypes]), &numeric));

        let tau_t = tau * 0.5;
        let t1 = cosine_predictions(x.view(), w.view(), tau_t)?;
        let t2 = cosine_predictions(x2.view(), w.view(), tau_t)?;
        let pair_shapes = [(b, d), (b, d), (d, c)];
        for symmetric in [true, false] {
            let g = unsup_cls_loss_with_teachers(x.view(), x2.view(), w.view(), tau, &t1, &t2, symmetric)?;
            let f = |p: &[f64]| {
                let a = unpack(p, &pair_shapes);
                unsup_cls_loss_with_teachers(a[0].view(), a[1].view(), a[2].view(), tau, &t1, &t2, symmetric)
                    .map(|r| r.loss)
                    .unwrap_or(f64::NAN)
            };
            let numeric = central_difference(f, &pack(&[&x, &x2, &w]), h);
            let name = if symmetric { "unsup_cls" } else { "unsup_cls_one_way" };
            rows.push(row(name, inst, &pack(&[&g.d_view1, &g.d_view2, &g.d_prototypes]), &numeric));
        }

        let eps = rng.random_range(0.5..2.0);
        let g = mean_entropy_reg(x.view(), w.view(), tau, eps)?;
        let f = |p: &[f64]| {
            let a = unpack(p, &shapes);
            mean_entropy_reg(a[0].view(), a[1].view(), tau, eps).map(|r| r.loss).unwrap_or(f64::NAN)
        };
        let numeric = central_difference(f, &pack(&[&x, &w]), h);
        rows.push(row("mean_entropy", inst, &pack(&[&g.d_features, &g.d_prototypes]), &numeric));

        let rep_shapes = [(b, d), (b, d)];
        let g = sup_rep_loss(x.view(), x2.view(), &labels, tau)?;
        let f = |p: &[f64]| {
            let a = unpack(p, &rep_shapes);
            sup_rep_loss(a[0].view(), a[1].view(), &labels, tau).map(|r| r.loss).unwrap_or(f64::NAN)
        };
        let numeric = central_difference(f, &pack(&[&x, &x2]), h);
        rows.push(row("sup_rep", inst, &pack(&[&g.d_view1, &g.d_view2]), &numeric));

        let g = unsup_rep_loss(x.view(), x2.view(), tau)?;
        let f = |p: &[f64]| {
            let a = unpack(p, &rep_shapes);
            unsup_rep_loss(a[0].view(), a[1].view(), tau).map(|r| r.loss).unwrap_or(f64::NAN)
        };
        let numeric = central_difference(f, &pack(&[&x, &x2]), h);
        rows.push(row("unsup_rep", inst, &pack(&[&g.d_view1, &g.d_view2]), &numeric));

        let k = rng.random_range(2..5);
        let p1: Vec<Array2<f64>> = (0..b).map(|_| gaussian(&mut rng, (k, d))).collect();
        let p2: Vec<Array2<f64>> = (0..b).map(|_| gaussian(&mut rng, (k, d))).collect();
        let mut shared: Vec<BTreeSet<usize>> =
            (0..b).map(|_| (0..k).filter(|_| rng.random_bool(0.7)).collect()).collect();
        shared[0] = (0..k).collect();
        let part_shapes = vec![(k, d); 2 * b];
        for variant in [PdrVariant::Exact, PdrVariant::InfoNce] {
            let g = pdr_loss(&p1, &p2, &shared, variant)?;
            let f = |p: &[f64]| {
                let a = unpack(p, &part_shapes);
                let (a1, a2) = a.split_at(b);
                pdr_loss(a1, a2, &shared, variant).map(|r| r.loss).unwrap_or(f64::NAN)
            };
            let all: Vec<&Array2<f64>> = p1.iter().chain(&p2).collect();
            let numeric = central_difference(f, &pack(&all), h);
            let grads: Vec<&Array2<f64>> = g.d_view1.iter().chain(&g.d_view2).collect();
            let name = match variant {
                PdrVariant::Exact => "pdr",
                PdrVariant::InfoNce => "pdr_infonce",
            };
            rows.push(row(name, inst, &pack(&grads), &numeric));
        }

        for separate in [false, true] {
            rows.extend(check_total(&mut rng, inst, separate)?);
        }
    }
    Ok(rows)
}

/// Whole-objective check, one row per parameter group.
fn check_total(rng: &mut ChaCha8Rng, inst: usize, separate: bool) -> Result<Vec<GradCheckRow>> {
    let (b, d, np, k, c) = (rng.random_range(3..6), rng.random_range(2..5), 4, rng.random_range(2..4), 3);
    let mcfg = ModelConfig { separate_part_projector: separate, ..Default::default() };
    let mut model = Model::<f64>::init(d, c, k, &mcfg, rng)?;
    // move the encoder away from the identity so every path is exercised
    model.encoder.weight += &(gaussian(rng, (d, d)) * 0.3);
    let batch = random_batch(rng, b, d, np, k, c);
    let cfg = LossConfig {
        objective: ObjectiveKind::Full,
        tau_s: 0.5,
        tau_u: 0.5,
        symmetric_unsup_cls: inst % 3 != 2,
        ..Default::default()
    };
    let step = StepWeights { alpha: 0.7, tau_t: 0.3 };
    let teachers = compute_teachers(&model, &batch, &cfg, &step)?;
    let out = total_objective_with_teachers(&model, &batch, &cfg, &step, &teachers)?;
    let theta = model.flatten();
    let analytic = out.grad.flatten();
    let f = |p: &[f64]| {
        let mut m = model.clone();
        m.unflatten(p).expect("same layout");
        total_objective_with_teachers(&m, &batch, &cfg, &step, &teachers).map(|o| o.terms.total).unwrap_or(f64::NAN)
    };
    let numeric = central_difference(f, &theta, FD_STEP);
    Ok(model
        .param_groups()
        .into_iter()
        .map(|(name, r)| row(&format!("total:{name}"), inst, &analytic[r.clone()], &numeric[r]))
        .collect())
}
