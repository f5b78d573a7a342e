//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! Run alone with `cargo test -p partdisc --test acceptance`.

use std::collections::BTreeSet;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, Axis};
use partdisc_core::candidates::{
    calibrate_prototypes, candidate_purity, compute_ns, normalize_rows, select_candidates, Prototypes,
};
use partdisc_core::dataset::{generate_synthetic, FeatureDataset, SynthConfig};
use partdisc_core::evaluation::clustering_acc;
use partdisc_core::objectives::{cosine_predictions, ObjectiveKind};
use partdisc_core::parts::{fit_gmm, part_posteriors, GmmConfig, GmmParams, SelectKConfig};
use partdisc_core::trainer::{auto_part_count, train, EpochMetrics, TrainConfig, TrainOutput, TrainState};
use partdisc_core::transport::{sinkhorn_adjust, SinkhornConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const SEEDS: u64 = 5;

struct Verdict {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn verdict(name: &'static str, pass: bool, detail: String) -> Verdict {
    Verdict { name, pass, detail }
}

fn gaussian(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| StandardNormal.sample(rng))
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.outer_iter_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    p
}

fn sinkhorn_criterion() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = SinkhornConfig::default();
    let start = Instant::now();
    let (mut worst_row, mut worst_col, mut worst_idem) = (0.0f64, 0.0f64, 0.0f64);
    let mut failures = Vec::new();
    for t in 0..50 {
        let (n, c) = if t == 49 { (10_000, 100) } else { (rng.random_range(10..=10_000), rng.random_range(2..=100)) };
        let scale = rng.random_range(0.5..4.0);
        let p = softmax_rows(&gaussian(&mut rng, (n, c)).mapv(|v| v * scale));
        let out = sinkhorn_adjust(p.view(), &cfg).expect("valid input");
        let target = n as f64 / c as f64;
        let row_err = out.q.sum_axis(Axis(1)).iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
        let col_err = out.q.sum_axis(Axis(0)).iter().map(|s| (s - target).abs() / target).fold(0.0, f64::max);
        let again = sinkhorn_adjust(out.q.view(), &cfg).expect("valid input");
        let idem = (&again.q - &out.q).iter().map(|v| v.abs()).fold(0.0, f64::max);
        worst_row = worst_row.max(row_err);
        worst_col = worst_col.max(col_err);
        worst_idem = worst_idem.max(idem);
        if row_err > 1e-6 || col_err > 1e-4 || idem > 1e-6 || out.iterations > cfg.max_iters {
            failures.push(format!("#{t} {n}x{c}"));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        "sinkhorn constraints, idempotence and runtime",
        failures.is_empty() && secs < 30.0,
        format!(
            "max row err {worst_row:.1e}, max rel col err {worst_col:.1e}, idempotence {worst_idem:.1e}, {secs:.1}s, \
             failing {failures:?}"
        ),
    )
}

fn gmm_criterion() -> Verdict {
    let cfg = GmmConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst_drop = 0.0f64;
    for _ in 0..100 {
        let (m, d, k) = (rng.random_range(20..200), rng.random_range(1..6), rng.random_range(1..5));
        let pts = gaussian(&mut rng, (m, d)).mapv(|v| v * rng.random_range(0.5..3.0));
        let fit = fit_gmm(pts.view(), k, &cfg, &mut rng).expect("fit");
        for (i, w) in fit.history.windows(2).enumerate() {
            if fit.reinitialized_at.is_some_and(|r| r == i || r + 1 == i) {
                continue;
            }
            worst_drop = worst_drop.max(w[0] - w[1]);
        }
    }
    let monotone = worst_drop <= 1e-9;

    // three 8-d components, unit variance, pairwise 5 sigma apart; 2000 points each
    // keeps the sampling error of the true means near 0.06
    let mut worst_mean = 0.0f64;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut truth = Array2::<f64>::zeros((3, 8));
        for k in 0..3 {
            truth[[k, k]] = 5.0 / 2f64.sqrt();
        }
        let per = 2000;
        let mut pts = gaussian(&mut rng, (3 * per, 8));
        for (i, mut row) in pts.outer_iter_mut().enumerate() {
            row += &truth.row(i / per);
        }
        let fit = fit_gmm(pts.view(), 3, &cfg, &mut rng).expect("fit");
        let err = matched_mean_error(&truth, &fit.params.means);
        worst_mean = worst_mean.max(err);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let pts = gaussian(&mut rng, (57, 4)).mapv(|v| 2.0 * v + 1.0);
    let one = fit_gmm(pts.view(), 1, &cfg, &mut rng).expect("fit").params;
    let mean = pts.mean_axis(Axis(0)).unwrap();
    let var = pts.var_axis(Axis(0), 0.0).mapv(|v| v.max(cfg.var_floor));
    let closed = (one.weights[0] - 1.0)
        .abs()
        .max((&one.means.row(0) - &mean).iter().map(|v| v.abs()).fold(0.0, f64::max))
        .max((&one.variances.row(0) - &var).iter().map(|v| v.abs()).fold(0.0, f64::max));

    verdict(
        "gmm monotone likelihood, recovery and closed form",
        monotone && worst_mean < 0.1 && closed < 1e-9,
        format!(
            "largest log-lik drop {worst_drop:.1e}, worst matched mean error {worst_mean:.3}, K=1 gap {closed:.1e}"
        ),
    )
}

/// Mean Euclidean error between true and fitted means under the best matching.
fn matched_mean_error(truth: &Array2<f64>, fitted: &Array2<f64>) -> f64 {
    let k = truth.nrows();
    let mut order: Vec<usize> = (0..k).collect();
    let mut best = f64::INFINITY;
    permutations(&mut order, 0, &mut |perm| {
        let e =
            (0..k).map(|r| (&truth.row(r) - &fitted.row(perm[r])).mapv(|v| v * v).sum().sqrt()).sum::<f64>() / k as f64;
        best = best.min(e);
    });
    best
}

fn permutations(v: &mut Vec<usize>, at: usize, f: &mut impl FnMut(&[usize])) {
    if at == v.len() {
        f(v);
        return;
    }
    for i in at..v.len() {
        v.swap(at, i);
        permutations(v, at + 1, f);
        v.swap(at, i);
    }
}

fn posterior_criterion() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let (mut worst_sum, mut worst_oracle) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let (k, d, n) = (rng.random_range(1..6), rng.random_range(1..5), rng.random_range(1..12));
        let mut w = Array1::from_shape_fn(k, |_| rng.random_range(0.05..1.0));
        w /= w.sum();
        let params = GmmParams {
            weights: w,
            means: gaussian(&mut rng, (k, d)),
            variances: Array2::from_shape_fn((k, d), |_| rng.random_range(0.3..2.0)),
        };
        let x = gaussian(&mut rng, (n, d)).mapv(|v| 1.5 * v);
        let m = part_posteriors(x.view(), &params).m;
        for (j, row) in m.outer_iter().enumerate() {
            worst_sum = worst_sum.max((row.sum() - 1.0).abs());
            let dens: Vec<f64> = (0..k)
                .map(|c| {
                    let mut p = params.weights[c];
                    for t in 0..d {
                        let v = params.variances[[c, t]];
                        let z = x[[j, t]] - params.means[[c, t]];
                        p *= (-(z * z) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
                    }
                    p
                })
                .collect();
            let total: f64 = dens.iter().sum();
            for c in 0..k {
                worst_oracle = worst_oracle.max((row[c] - dens[c] / total).abs());
            }
        }
    }
    verdict(
        "posterior maps normalized and equal to direct densities",
        worst_sum <= 1e-6 && worst_oracle <= 1e-9,
        format!("max row-sum error {worst_sum:.1e}, max oracle gap {worst_oracle:.1e}"),
    )
}

fn select_k_criterion() -> Verdict {
    let mut hits = Vec::new();
    for k_true in 3..=6 {
        let mut found = Vec::new();
        for seed in 0..SEEDS {
            let ds = generate_synthetic(&SynthConfig { parts_per_class: k_true, seed, ..Default::default() })
                .expect("generator");
            let r = auto_part_count(&ds, &SelectKConfig::default(), false, seed).expect("select_k");
            found.push(r.k);
        }
        hits.push((k_true, found));
    }
    let pass = hits.iter().all(|(k, f)| f.iter().filter(|&&x| x == *k).count() >= 4);
    let detail = hits.iter().map(|(k, f)| format!("K={k}: {f:?}")).collect::<Vec<_>>().join("; ");
    verdict("silhouette recovers the true part count in 4 of 5 seeds", pass, detail)
}

fn gradcheck_criterion() -> Verdict {
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_partdisc"))
        .args(["gradcheck", "--instances", "20", "--seed", "7"])
        .output()
        .expect("run binary");
    let secs = start.elapsed().as_secs_f64();
    let table = String::from_utf8_lossy(&out.stdout);
    let mut rdr = csv::Reader::from_reader(table.as_bytes());
    let mut per_check: std::collections::BTreeMap<String, (usize, f64)> = Default::default();
    for rec in rdr.records() {
        let rec = rec.expect("csv row");
        let e = per_check.entry(rec[0].to_string()).or_default();
        e.0 += 1;
        e.1 = e.1.max(rec[3].parse::<f64>().unwrap_or(f64::INFINITY));
    }
    let enough = !per_check.is_empty() && per_check.values().all(|&(n, err)| n >= 20 && err < 1e-4);
    verdict(
        "gradient suite via the binary",
        out.status.code() == Some(0) && enough && secs < 60.0,
        format!(
            "exit {:?}, {secs:.1}s, {} checks, worst rel err {:.1e}",
            out.status.code(),
            per_check.len(),
            per_check.values().map(|v| v.1).fold(0.0, f64::max)
        ),
    )
}

fn brute_force_acc(preds: &[usize], labels: &[usize], c: usize) -> f64 {
    let mut counts = vec![vec![0usize; c]; c];
    for (&p, &y) in preds.iter().zip(labels) {
        counts[p][y] += 1;
    }
    let mut order: Vec<usize> = (0..c).collect();
    let mut best = 0;
    permutations(&mut order, 0, &mut |perm| {
        best = best.max((0..c).map(|p| counts[p][perm[p]]).sum::<usize>());
    });
    best as f64 / preds.len() as f64
}

fn hungarian_criterion() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let (mut mismatches, mut variant) = (0, 0);
    for _ in 0..100 {
        let c = rng.random_range(2..=7);
        let n = rng.random_range(c..60);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let preds: Vec<usize> =
            labels.iter().map(|&y| if rng.random_bool(0.6) { y } else { rng.random_range(0..c) }).collect();
        let old: BTreeSet<usize> = (0..rng.random_range(0..c)).collect();
        let got = clustering_acc(&preds, &labels, &old).expect("acc").all;
        if (got - brute_force_acc(&preds, &labels, c)).abs() > 1e-12 {
            mismatches += 1;
        }
        let mut relabel: Vec<usize> = (0..c).collect();
        relabel.shuffle(&mut rng);
        let renamed: Vec<usize> = preds.iter().map(|&p| relabel[p]).collect();
        let again = clustering_acc(&renamed, &labels, &old).expect("acc");
        if (again.all - got).abs() > 1e-12 {
            variant += 1;
        }
    }
    verdict(
        "hungarian accuracy equals exhaustive search",
        mismatches == 0 && variant == 0,
        format!("{mismatches} mismatches, {variant} permutation-dependent results over 100 instances"),
    )
}

/// Mean new-class purity of `(calibrated, raw)` selections under a trained state.
fn selection_purities(state: &TrainState<f64>, ds: &FeatureDataset) -> (f64, f64) {
    let x = ds.cls_matrix().mapv(f64::from);
    let g = state.model.encode(x.view());
    let gn = normalize_rows(g.view());
    let old = &ds.meta.old_classes;
    let n_s = compute_ns(1.0, ds.labeled_indices().len(), old.len()).unwrap();
    let p = cosine_predictions(g.view(), state.model.prototypes.view(), state.tau_s).unwrap();
    let q = sinkhorn_adjust(p.view(), &SinkhornConfig::default()).unwrap().q;
    let calibrated = calibrate_prototypes(q.view(), gn.view(), n_s).unwrap();
    let raw = Prototypes::from_columns(state.model.prototypes.clone()).unwrap();
    let y: Vec<usize> = ds.samples.iter().map(|s| s.label.unwrap()).collect();
    let purity = |w: &Prototypes<f64>| {
        let c = select_candidates(w, gn.view(), &ds.visible_labels(), old, n_s).unwrap();
        candidate_purity(&c, &y, old).unwrap().mean_new
    };
    (purity(&calibrated), purity(&raw))
}

fn metric_bits(m: &EpochMetrics) -> Vec<u64> {
    [m.loss, m.sup_cls, m.unsup_cls, m.entropy, m.sup_rep, m.unsup_rep, m.all_acc, m.old_acc, m.new_acc, m.purity]
        .iter()
        .map(|v| v.to_bits())
        .collect()
}

struct BenchmarkRuns {
    /// Final All-ACC per seed for baseline, PDR-only and full.
    acc: Vec<[f64; 3]>,
    purity: Vec<(f64, f64)>,
    slopes: Vec<f64>,
    identical: Vec<bool>,
    elapsed: Duration,
}

fn run(ds: &FeatureDataset, seed: u64, kind: ObjectiveKind, alpha: Option<f64>) -> TrainOutput<f64> {
    let mut cfg = TrainConfig::benchmark(seed);
    cfg.loss.objective = kind;
    if let Some(a) = alpha {
        cfg.loss.alpha = a;
    }
    train::<f64>(ds, &cfg).expect("training")
}

/// Least-squares slope of the per-epoch purity over the second half of training.
fn purity_slope(metrics: &[EpochMetrics]) -> f64 {
    let ys: Vec<f64> = metrics[metrics.len() / 2..].iter().map(|m| m.purity).collect();
    let n = ys.len() as f64;
    let xm = (n - 1.0) / 2.0;
    let ym = ys.iter().sum::<f64>() / n;
    let num: f64 = ys.iter().enumerate().map(|(i, y)| (i as f64 - xm) * (y - ym)).sum();
    let den: f64 = (0..ys.len()).map(|i| (i as f64 - xm).powi(2)).sum();
    num / den
}

fn benchmark_runs() -> BenchmarkRuns {
    let start = Instant::now();
    let mut r =
        BenchmarkRuns { acc: vec![], purity: vec![], slopes: vec![], identical: vec![], elapsed: Duration::ZERO };
    for seed in 0..SEEDS {
        let ds = generate_synthetic(&SynthConfig::benchmark(seed)).expect("generator");
        let base = run(&ds, seed, ObjectiveKind::Baseline, None);
        let pdr = run(&ds, seed, ObjectiveKind::PdrOnly, None);
        let full = run(&ds, seed, ObjectiveKind::Full, None);
        let zero = run(&ds, seed, ObjectiveKind::Full, Some(0.0));
        let last = |o: &TrainOutput<f64>| o.metrics.last().unwrap().all_acc;
        r.acc.push([last(&base), last(&pdr), last(&full)]);
        r.purity.push(selection_purities(&full.state, &ds));
        r.slopes.push(purity_slope(&full.metrics));
        r.identical.push(
            zero.state.model.flatten() == base.state.model.flatten()
                && zero.state.velocity == base.state.velocity
                && zero.metrics.iter().map(metric_bits).eq(base.metrics.iter().map(metric_bits)),
        );
    }
    r.elapsed = start.elapsed();
    r
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn benchmark_criteria(r: &BenchmarkRuns) -> Vec<Verdict> {
    let [base, pdr, full] = [0, 1, 2].map(|i| mean(r.acc.iter().map(|a| a[i])));
    let per_seed = r.acc.iter().map(|a| format!("{:.3}/{:.3}/{:.3}", a[0], a[1], a[2])).collect::<Vec<_>>().join(" ");
    let (cal, raw) = (mean(r.purity.iter().map(|p| p.0)), mean(r.purity.iter().map(|p| p.1)));
    let worst_inversion = r.purity.iter().map(|(c, w)| w - c).fold(f64::NEG_INFINITY, f64::max);
    let secs = r.elapsed.as_secs_f64();
    vec![
        verdict(
            "calibrated selection purity at least raw",
            cal >= raw && worst_inversion <= 0.02,
            format!(
                "calibrated {cal:.3} vs raw {raw:.3}, largest per-seed inversion {:.1} points",
                100.0 * worst_inversion
            ),
        ),
        verdict(
            "end-to-end: full beats baseline by 5 points, alpha = 0 matches baseline bitwise",
            full - base >= 0.05 && r.identical.iter().all(|&b| b) && secs < 600.0,
            format!(
                "All-ACC base {base:.3} full {full:.3} (+{:.1}), bitwise {:?}, {secs:.0}s for {} runs",
                100.0 * (full - base),
                r.identical,
                4 * SEEDS
            ),
        ),
        verdict(
            "ablation: baseline < PDR only < full",
            base < pdr && pdr < full,
            format!("mean All-ACC {base:.3} < {pdr:.3} < {full:.3}; per seed base/pdr/full {per_seed}"),
        ),
        verdict(
            "candidate purity does not decline over the final half",
            mean(r.slopes.iter().copied()) >= 0.0,
            format!(
                "mean slope {:.2e} per epoch, per seed {:?}",
                mean(r.slopes.iter().copied()),
                r.slopes.iter().map(|s| format!("{s:.1e}")).collect::<Vec<_>>()
            ),
        ),
    ]
}

fn main() -> ExitCode {
    // libtest flags such as --nocapture are accepted and ignored
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    type Check = (&'static str, fn() -> Vec<Verdict>);
    let checks: [Check; 7] = [
        ("sinkhorn", || vec![sinkhorn_criterion()]),
        ("gmm", || vec![gmm_criterion()]),
        ("posterior", || vec![posterior_criterion()]),
        ("select_k", || vec![select_k_criterion()]),
        ("gradcheck", || vec![gradcheck_criterion()]),
        ("hungarian", || vec![hungarian_criterion()]),
        ("benchmark", || benchmark_criteria(&benchmark_runs())),
    ];
    let mut failed = 0;
    for (key, check) in checks {
        if filter.as_deref().is_some_and(|f| !key.contains(f)) {
            continue;
        }
        for v in check() {
            println!("{} {}: {}", if v.pass { "PASS" } else { "FAIL" }, v.name, v.detail);
            failed += usize::from(!v.pass);
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
