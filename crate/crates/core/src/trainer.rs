//! Desk-scale training loop: per epoch, refresh the class-level part
//! mixtures from calibrated candidates, then run SGD over two-view batches.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::candidates::{
    calibrate_prototypes, candidate_purity, compute_assignments, compute_ns, normalize_rows, select_candidates,
};
use crate::dataset::{augment_view, AugmentConfig, FeatureDataset, Sample};
use crate::error::{Error, Result};
use crate::evaluation::clustering_acc;
use crate::model::{Model, ModelConfig};
use crate::objectives::{cosine_predictions, total_objective, BatchViewPair, LossConfig, PartBatch};
use crate::parts::{
    align_components, filtered_patch_matrix, fit_gmm, part_posteriors, select_k, shared_parts, GmmConfig, GmmParams,
    SelectKConfig, SelectKReport,
};
use crate::scalar::Scalar;
use crate::transport::{sinkhorn_adjust, SinkhornConfig};

pub const STATE_MAGIC: [u8; 4] = *b"PGST";
pub const STATE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Epochs over which `alpha` ramps up from 0.
    pub warmup_epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate; decays to 0 on a cosine over all steps.
    pub learning_rate: f64,
    pub momentum: f64,
    /// Candidate budget `N_s = floor(gamma |D_l| / |C_old|)`.
    pub gamma: f64,
    /// Parts per class; 0 picks it by silhouette on the labeled data.
    pub parts: usize,
    /// L2-normalize patch features before fitting the mixtures.
    pub normalize_gmm_inputs: bool,
    pub seed: u64,
    pub loss: LossConfig,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    pub gmm: GmmConfig,
    pub select_k: SelectKConfig,
    pub sinkhorn: SinkhornConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            warmup_epochs: 5,
            batch_size: 64,
            learning_rate: 0.05,
            momentum: 0.9,
            gamma: 1.0,
            parts: 0,
            normalize_gmm_inputs: false,
            seed: 0,
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            augment: AugmentConfig::default(),
            gmm: GmmConfig::default(),
            select_k: SelectKConfig::default(),
            sinkhorn: SinkhornConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Training setup paired with [`SynthConfig::benchmark`](crate::dataset::SynthConfig::benchmark).
    pub fn benchmark(seed: u64) -> Self {
        TrainConfig { parts: 4, seed, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs ({}) exceeds epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if self.parts == 1 {
            return Err(Error::Config("parts must be 0 (auto) or at least 2".into()));
        }
        Ok(())
    }

    /// Whether any epoch trains on part features.
    pub fn uses_parts(&self) -> bool {
        self.loss.objective.uses_parts() && self.loss.alpha > 0.0
    }

    /// Whether prediction adds the part-enhanced branch; only the full
    /// objective trains the adapter that produces it.
    pub fn predicts_with_parts(&self) -> bool {
        self.uses_parts() && self.loss.objective.uses_adapter()
    }

    /// Cosine learning rate for global step `step` out of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        self.learning_rate * 0.5 * (1.0 + (PI * step as f64 / total.max(1) as f64).cos())
    }
}

/// One row of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub alpha: f64,
    pub tau_t: f64,
    pub loss: f64,
    pub sup_cls: f64,
    pub unsup_cls: f64,
    pub entropy: f64,
    pub sup_rep: f64,
    pub unsup_rep: f64,
    /// Base loss on the part-enhanced features; NaN when inactive.
    pub part_base: f64,
    /// NaN when inactive.
    pub pdr: f64,
    pub all_acc: f64,
    pub old_acc: f64,
    pub new_acc: f64,
    /// Mean new-class candidate purity; NaN without ground truth.
    pub purity: f64,
    pub fitted_classes: usize,
}

/// Everything needed to resume prediction: parameters, optimizer state and
/// the part mixtures of the last epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    pub model: Model<T>,
    /// Momentum buffer, laid out like [`Model::flatten`].
    pub velocity: Vec<T>,
    pub epoch: usize,
    pub parts: usize,
    pub gmms: Vec<Option<GmmParams<T>>>,
    /// Class whose mixture decomposes each training sample.
    pub assignments: Vec<usize>,
    /// Whether prediction adds the part-enhanced branch.
    pub use_parts: bool,
    pub tau_s: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutput<T> {
    pub state: TrainState<T>,
    pub metrics: Vec<EpochMetrics>,
    /// Per-class silhouette scan when the part count was chosen automatically.
    pub k_scores: Vec<(usize, f64)>,
}

/// Mixes a run seed with stream identifiers (splitmix64 finalizer).
pub fn stream_seed(seed: u64, tag: u64, a: u64, b: u64) -> u64 {
    let mut z = seed;
    for v in [tag, a, b] {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(v);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Stream tags mixed into [`stream_seed`]; one per consumer of randomness.
pub const TAG_INIT: u64 = 1;
pub const TAG_SHUFFLE: u64 = 2;
pub const TAG_VIEW: u64 = 3;
pub const TAG_GMM: u64 = 4;
pub const TAG_SELECT_K: u64 = 5;

fn to_scalar<T: Scalar>(a: ArrayView2<f32>) -> Array2<T> {
    a.mapv(|v| T::lit(v as f64))
}

fn cls_matrix<T: Scalar>(samples: &[&Sample]) -> Array2<T> {
    let d = samples.first().map_or(0, |s| s.cls_fixed.len());
    let mut out = Array2::<T>::zeros((samples.len(), d));
    for (mut row, s) in out.outer_iter_mut().zip(samples) {
        row.assign(&s.cls_fixed.mapv(|v| T::lit(v as f64)));
    }
    out
}

fn true_labels(ds: &FeatureDataset) -> Option<Vec<usize>> {
    ds.samples.iter().map(|s| s.label).collect()
}

/// Picks the part count by silhouette on the labeled old-class patches.
pub fn auto_part_count(
    ds: &FeatureDataset,
    cfg: &SelectKConfig,
    normalize_inputs: bool,
    seed: u64,
) -> Result<SelectKReport> {
    let visible = ds.visible_labels();
    let sets: Vec<Array2<f64>> = ds
        .meta
        .old_classes
        .iter()
        .map(|&c| {
            let members = ds.samples.iter().zip(&visible).filter(|(_, y)| **y == Some(c)).map(|(s, _)| s);
            filtered_patch_matrix::<f64>(members, normalize_inputs)
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, TAG_SELECT_K, 0, 0));
    let report = select_k(&sets, cfg, &mut rng)?;
    log::info!("selected K = {} from silhouette scan {:?}", report.k, report.scores);
    Ok(report)
}

/// Result of one epoch-level refresh.
struct Refresh<T> {
    gmms: Option<Vec<Option<GmmParams<T>>>>,
    assignments: Vec<usize>,
    purity: f64,
}

/// Sinkhorn-adjusted predictions, calibrated prototypes, candidate selection
/// and (when `fit`) per-class mixtures on the candidates' filtered patches.
fn refresh<T: Scalar>(
    model: &Model<T>,
    ds: &FeatureDataset,
    cfg: &TrainConfig,
    k: usize,
    epoch: usize,
    fit: bool,
    previous: &[Option<GmmParams<T>>],
) -> Result<Refresh<T>> {
    let samples: Vec<&Sample> = ds.samples.iter().collect();
    let g = model.encode(cls_matrix::<T>(&samples).view());
    let gn = normalize_rows(g.view());
    let p = cosine_predictions(g.view(), model.prototypes.view(), T::lit(cfg.loss.tau_s))?;
    let sk = sinkhorn_adjust(p.view(), &cfg.sinkhorn)?;
    if !sk.converged {
        log::debug!("epoch {epoch}: sinkhorn stopped after {} iterations", sk.iterations);
    }
    let visible = ds.visible_labels();
    let old = &ds.meta.old_classes;
    let n_s = compute_ns(cfg.gamma, ds.labeled_indices().len(), old.len())?;
    let w_tilde = calibrate_prototypes(sk.q.view(), gn.view(), n_s)?;
    let cands = select_candidates(&w_tilde, gn.view(), &visible, old, n_s)?;
    let purity = match true_labels(ds) {
        Some(y) => candidate_purity(&cands, &y, old)?.mean_new,
        None => f64::NAN,
    };
    let assignments: Vec<usize> =
        compute_assignments(sk.q.view()).into_iter().zip(&visible).map(|(a, y)| y.unwrap_or(a)).collect();
    let gmms = if fit {
        let fits: Vec<Option<GmmParams<T>>> = cands
            .per_class
            .par_iter()
            .enumerate()
            .map(|(c, members)| {
                let pts = filtered_patch_matrix::<T>(members.iter().map(|&i| &ds.samples[i]), cfg.normalize_gmm_inputs);
                let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, TAG_GMM, epoch as u64, c as u64));
                match fit_gmm(pts.view(), k, &cfg.gmm, &mut rng) {
                    Ok(f) => match previous.get(c).and_then(Option::as_ref) {
                        Some(prev) => Some(align_components(&f.params, prev).unwrap_or(f.params)),
                        None => Some(f.params),
                    },
                    Err(e) => {
                        log::warn!("epoch {epoch}: no part mixture for class {c}: {e}");
                        None
                    }
                }
            })
            .collect();
        Some(fits)
    } else {
        None
    };
    Ok(Refresh { gmms, assignments, purity })
}

/// Part map of one view; uniform when the assigned class has no mixture.
fn part_map<T: Scalar>(patches: ArrayView2<T>, gmm: Option<&GmmParams<T>>, k: usize) -> Array2<T> {
    match gmm {
        Some(g) => part_posteriors(patches, g).m,
        None => Array2::from_elem((patches.nrows(), k), T::one() / T::from_usize_lossy(k)),
    }
}

/// Two augmented views of the samples at `idx`, with part inputs when `gmms` is given.
fn build_batch<T: Scalar>(
    ds: &FeatureDataset,
    idx: &[usize],
    state: &TrainState<T>,
    with_parts: bool,
    cfg: &TrainConfig,
    epoch: usize,
) -> BatchViewPair<T> {
    let views: Vec<[Sample; 2]> = idx
        .iter()
        .map(|&i| {
            let s = &ds.samples[i];
            [0u64, 1]
                .map(|v| augment_view(s, stream_seed(cfg.seed, TAG_VIEW, epoch as u64, (s.id << 1) | v), &cfg.augment))
        })
        .collect();
    let visible = ds.visible_labels();
    let labels = idx.iter().map(|&i| visible[i]).collect();
    let cls = [0, 1].map(|v| cls_matrix::<T>(&views.iter().map(|p| &p[v]).collect::<Vec<_>>()));
    let parts = with_parts.then(|| {
        let k = state.parts;
        let mut patches = [Vec::with_capacity(idx.len()), Vec::with_capacity(idx.len())];
        let mut maps = [Vec::with_capacity(idx.len()), Vec::with_capacity(idx.len())];
        let mut shared = Vec::with_capacity(idx.len());
        for (&i, pair) in idx.iter().zip(&views) {
            let gmm = state.gmms.get(state.assignments[i]).and_then(Option::as_ref);
            for v in 0..2 {
                let x = to_scalar::<T>(pair[v].patches_fixed.view());
                maps[v].push(part_map(x.view(), gmm, k));
                patches[v].push(x);
            }
            shared.push(match gmm {
                Some(_) => shared_parts(
                    maps[0].last().unwrap().view(),
                    &pair[0].attention,
                    maps[1].last().unwrap().view(),
                    &pair[1].attention,
                ),
                None => BTreeSet::new(),
            });
        }
        PartBatch { patches, maps, shared }
    });
    BatchViewPair { cls, labels, parts }
}

/// Shuffled batches; a trailing batch smaller than 2 joins the previous one.
fn batches(n: usize, size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(seed, TAG_SHUFFLE, epoch as u64, 0)));
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let tail = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(tail);
    }
    out
}

#[derive(Default)]
struct Running {
    n: f64,
    loss: f64,
    sup_cls: f64,
    unsup_cls: f64,
    entropy: f64,
    sup_rep: f64,
    unsup_rep: f64,
    part_base: f64,
    pdr: f64,
    part_n: f64,
    pdr_n: f64,
}

impl Running {
    fn mean(sum: f64, n: f64) -> f64 {
        if n > 0.0 {
            sum / n
        } else {
            f64::NAN
        }
    }
}

/// Runs the full training schedule on `ds`.
pub fn train<T: Scalar>(ds: &FeatureDataset, cfg: &TrainConfig) -> Result<TrainOutput<T>> {
    cfg.validate()?;
    ds.validate()?;
    if ds.len() < 2 {
        return Err(Error::TooFewPoints { what: "training set", needed: 2, got: ds.len() });
    }
    if ds.labeled_indices().is_empty() || ds.unlabeled_indices().is_empty() {
        return Err(Error::Invalid("training needs both labeled and unlabeled samples".into()));
    }
    let (k, k_scores) = if cfg.parts > 0 {
        (cfg.parts, Vec::new())
    } else {
        let r = auto_part_count(ds, &cfg.select_k, cfg.normalize_gmm_inputs, cfg.seed)?;
        (r.k, r.scores)
    };
    let mut init_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, TAG_INIT, 0, 0));
    let model = Model::<T>::init(ds.meta.dim, ds.meta.num_classes, k, &cfg.model, &mut init_rng)?;
    let mut state = TrainState {
        velocity: vec![T::zero(); model.param_count()],
        model,
        epoch: 0,
        parts: k,
        gmms: vec![None; ds.meta.num_classes],
        assignments: vec![0; ds.len()],
        use_parts: cfg.predicts_with_parts(),
        tau_s: cfg.loss.tau_s,
    };
    let steps_per_epoch = batches(ds.len(), cfg.batch_size, cfg.seed, 0).len();
    let total_steps = steps_per_epoch * cfg.epochs;
    let momentum = T::lit(cfg.momentum);
    let mut step_idx = 0;
    let mut metrics = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let weights = cfg.loss.at_epoch(epoch, cfg.warmup_epochs);
        let with_parts = cfg.loss.objective.uses_parts() && weights.alpha > 0.0;
        let r = refresh(&state.model, ds, cfg, k, epoch, with_parts, &state.gmms)?;
        if let Some(g) = r.gmms {
            state.gmms = g;
        }
        state.assignments = r.assignments;

        let mut run = Running::default();
        let mut lr = cfg.lr_at(step_idx, total_steps);
        for (b, idx) in batches(ds.len(), cfg.batch_size, cfg.seed, epoch).into_iter().enumerate() {
            let batch = build_batch(ds, &idx, &state, with_parts, cfg, epoch);
            let out = total_objective(&state.model, &batch, &cfg.loss, &weights).map_err(|e| match e {
                e if e.is_numerical() => Error::Diverged { epoch, batch: b, detail: e.to_string() },
                e => e,
            })?;
            let t = &out.terms;
            if !t.total.is_finite() {
                return Err(Error::Diverged { epoch, batch: b, detail: format!("loss is {}", t.total) });
            }
            lr = cfg.lr_at(step_idx, total_steps);
            let grad = out.grad.flatten();
            let mut theta = state.model.flatten();
            let lr_t = T::lit(lr);
            for ((w, v), g) in theta.iter_mut().zip(state.velocity.iter_mut()).zip(&grad) {
                *v = momentum * *v + *g;
                *w -= lr_t * *v;
            }
            state.model.unflatten(&theta)?;
            state.model.renormalize_prototypes();
            step_idx += 1;

            run.n += 1.0;
            run.loss += t.total.as_f64();
            run.sup_cls += t.global.sup_cls.as_f64();
            run.unsup_cls += t.global.unsup_cls.as_f64();
            run.entropy += t.global.entropy.as_f64();
            run.sup_rep += t.global.sup_rep.as_f64();
            run.unsup_rep += t.global.unsup_rep.as_f64();
            if let Some(p) = &t.part {
                run.part_base += p.total.as_f64();
                run.part_n += 1.0;
            }
            if let Some(p) = t.pdr {
                run.pdr += p.as_f64();
                run.pdr_n += 1.0;
            }
        }
        state.epoch = epoch + 1;

        let acc = evaluate_unlabeled(&state, ds)?;
        let fitted_classes = state.gmms.iter().filter(|g| g.is_some()).count();
        let m = EpochMetrics {
            epoch,
            lr,
            alpha: weights.alpha,
            tau_t: weights.tau_t,
            loss: Running::mean(run.loss, run.n),
            sup_cls: Running::mean(run.sup_cls, run.n),
            unsup_cls: Running::mean(run.unsup_cls, run.n),
            entropy: Running::mean(run.entropy, run.n),
            sup_rep: Running::mean(run.sup_rep, run.n),
            unsup_rep: Running::mean(run.unsup_rep, run.n),
            part_base: Running::mean(run.part_base, run.part_n),
            pdr: Running::mean(run.pdr, run.pdr_n),
            all_acc: acc.0,
            old_acc: acc.1,
            new_acc: acc.2,
            purity: r.purity,
            fitted_classes,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} all {:.4} old {:.4} new {:.4} purity {:.4}",
            m.loss,
            m.all_acc,
            m.old_acc,
            m.new_acc,
            m.purity
        );
        metrics.push(m);
    }
    Ok(TrainOutput { state, metrics, k_scores })
}

/// `(all, old, new)` accuracy on the unlabeled split; NaN without ground truth.
fn evaluate_unlabeled<T: Scalar>(state: &TrainState<T>, ds: &FeatureDataset) -> Result<(f64, f64, f64)> {
    let preds = predict(state, ds)?;
    let unl = ds.unlabeled_indices();
    let labels: Option<Vec<usize>> = unl.iter().map(|&i| ds.samples[i].label).collect();
    let Some(labels) = labels else {
        return Ok((f64::NAN, f64::NAN, f64::NAN));
    };
    let p: Vec<usize> = unl.iter().map(|&i| preds[i]).collect();
    let r = clustering_acc(&p, &labels, &ds.meta.old_classes)?;
    Ok((r.all, r.old, r.new))
}

/// Mixture assignment for samples outside the training state: labeled
/// samples use their label, others the Sinkhorn-adjusted argmax.
fn assignments_for<T: Scalar>(state: &TrainState<T>, ds: &FeatureDataset, g: &Array2<T>) -> Result<Vec<usize>> {
    let p = cosine_predictions(g.view(), state.model.prototypes.view(), T::lit(state.tau_s))?;
    let q = sinkhorn_adjust(p.view(), &SinkhornConfig::default())?.q;
    Ok(compute_assignments(q.view()).into_iter().zip(ds.visible_labels()).map(|(a, y)| y.unwrap_or(a)).collect())
}

/// Summed class scores `softmax(cos(g, W)) + softmax(cos(h, W))`; the part
/// term is dropped when the state does not use parts or the sample's class
/// has no mixture.
pub fn predict_scores<T: Scalar>(state: &TrainState<T>, ds: &FeatureDataset) -> Result<Array2<T>> {
    if ds.meta.dim != state.model.dim() {
        return Err(Error::Shape(format!("dataset has d = {}, model {}", ds.meta.dim, state.model.dim())));
    }
    let samples: Vec<&Sample> = ds.samples.iter().collect();
    let g = state.model.encode(cls_matrix::<T>(&samples).view());
    let w = state.model.prototypes.view();
    let mut scores = cosine_predictions(g.view(), w, T::one())?;
    if !state.use_parts {
        return Ok(scores);
    }
    let assignments = assignments_for(state, ds, &g)?;
    let mut with_gmm = Vec::new();
    let mut parts = Vec::new();
    for (i, s) in ds.samples.iter().enumerate() {
        if let Some(gmm) = state.gmms.get(assignments[i]).and_then(Option::as_ref) {
            let x = to_scalar::<T>(s.patches_fixed.view());
            let m = part_posteriors(x.view(), gmm).m;
            parts.push(state.model.part_features(x.view(), m.view()));
            with_gmm.push(i);
        }
    }
    if parts.is_empty() {
        return Ok(scores);
    }
    let h = state.model.aggregate_parts(&parts);
    let ph = cosine_predictions(h.view(), w, T::one())?;
    for (row, &i) in ph.outer_iter().zip(&with_gmm) {
        let mut dst = scores.row_mut(i);
        dst += &row;
    }
    Ok(scores)
}

/// Row-wise argmax with ties to the lower class id.
pub fn argmax_rows<T: Scalar>(scores: ArrayView2<T>) -> Vec<usize> {
    compute_assignments(scores)
}

pub fn predict<T: Scalar>(state: &TrainState<T>, ds: &FeatureDataset) -> Result<Vec<usize>> {
    Ok(argmax_rows(predict_scores(state, ds)?.view()))
}

#[derive(Serialize, Deserialize)]
struct StateHeader {
    dim: usize,
    classes: usize,
    parts: usize,
    adapter_hidden: usize,
    proj_dim: usize,
    separate_part_projector: bool,
    epoch: usize,
    use_parts: bool,
    tau_s: f64,
    assignments: Vec<usize>,
}

fn put_f64s(out: &mut Vec<u8>, xs: impl IntoIterator<Item = f64>) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Serializes a state:
/// `"PGST" | u32 version | u64 header_len | JSON header | f64[P] params | f64[P] velocity`
/// followed per class by `u8 present` and, if present, weights, means and
/// variances as `f64`.
pub fn encode_state(state: &TrainState<f64>) -> Result<Vec<u8>> {
    let m = &state.model;
    let header = StateHeader {
        dim: m.dim(),
        classes: m.num_classes(),
        parts: state.parts,
        adapter_hidden: m.adapter.hidden.d_out(),
        proj_dim: m.projector.out.d_out(),
        separate_part_projector: m.part_projector.is_some(),
        epoch: state.epoch,
        use_parts: state.use_parts,
        tau_s: state.tau_s,
        assignments: state.assignments.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Invalid(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(&STATE_MAGIC);
    out.extend_from_slice(&STATE_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    put_f64s(&mut out, m.flatten());
    put_f64s(&mut out, state.velocity.iter().copied());
    if state.gmms.len() != m.num_classes() {
        return Err(Error::Shape(format!("{} mixtures for {} classes", state.gmms.len(), m.num_classes())));
    }
    for g in &state.gmms {
        match g {
            None => out.push(0),
            Some(g) => {
                out.push(1);
                put_f64s(&mut out, g.weights.iter().chain(g.means.iter()).chain(g.variances.iter()).copied());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Truncated { record: 0 })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n.checked_mul(8).ok_or(Error::Truncated { record: 0 })?)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn decode_state(bytes: &[u8]) -> Result<TrainState<f64>> {
    let mut r = Reader { bytes, at: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if magic != STATE_MAGIC {
        return Err(Error::BadMagic { expected: STATE_MAGIC, found: magic });
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if version != STATE_VERSION {
        return Err(Error::VersionMismatch { expected: STATE_VERSION, found: version });
    }
    let len = r.u64()? as usize;
    let h: StateHeader =
        serde_json::from_slice(r.take(len)?).map_err(|e| Error::Invalid(format!("state header: {e}")))?;
    let cfg = ModelConfig {
        adapter_hidden: h.adapter_hidden,
        proj_dim: h.proj_dim,
        separate_part_projector: h.separate_part_projector,
        adapter_init: crate::model::AdapterInit::Random,
    };
    let mut model = Model::<f64>::init(h.dim, h.classes, h.parts, &cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    let n = model.param_count();
    model.unflatten(&r.f64s(n)?)?;
    let velocity = r.f64s(n)?;
    let (k, d) = (h.parts, h.dim);
    let mut gmms = Vec::with_capacity(h.classes);
    for _ in 0..h.classes {
        gmms.push(match r.take(1)?[0] {
            0 => None,
            1 => {
                let v = r.f64s(k + 2 * k * d)?;
                Some(GmmParams {
                    weights: Array1::from_vec(v[..k].to_vec()),
                    means: Array2::from_shape_vec((k, d), v[k..k + k * d].to_vec()).expect("sized"),
                    variances: Array2::from_shape_vec((k, d), v[k + k * d..].to_vec()).expect("sized"),
                })
            }
            b => return Err(Error::Invalid(format!("bad mixture presence byte {b}"))),
        });
    }
    if r.at != bytes.len() {
        return Err(Error::Invalid(format!("{} trailing bytes after state", bytes.len() - r.at)));
    }
    Ok(TrainState {
        model,
        velocity,
        epoch: h.epoch,
        parts: h.parts,
        gmms,
        assignments: h.assignments,
        use_parts: h.use_parts,
        tau_s: h.tau_s,
    })
}

pub fn save_state(state: &TrainState<f64>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_state(state)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_state(path: impl AsRef<Path>) -> Result<TrainState<f64>> {
    let path = path.as_ref();
    decode_state(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
