//! Loss terms with analytic gradients and the composed training objective.

mod gradcheck;
mod losses;

use std::collections::BTreeSet;

use ndarray::{concatenate, s, Array2, Axis};
use serde::{Deserialize, Serialize};

pub use gradcheck::{central_difference, gradcheck_suite, relative_error, GradCheckRow, FD_STEP, FD_TOLERANCE};
pub use losses::{
    cosine_predictions, mean_entropy_reg, pdr_loss, softmax_scaled, sup_cls_loss, sup_rep_loss, unsup_cls_loss,
    unsup_cls_loss_with_teachers, unsup_rep_loss, ClsGrad, PairClsGrad, PairRepGrad, PdrGrad, PdrVariant,
};

use crate::error::{Error, Result};
use crate::model::{flatten_parts, Model};
use crate::nn::Mlp;
use crate::scalar::Scalar;

/// Which terms beyond the global base loss are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    /// `L_base(g)` only.
    Baseline,
    /// `L_base(g) + alpha L_pdr`.
    PdrOnly,
    /// `L_base(g) + alpha (L_base(h_part) + L_pdr)`.
    #[default]
    Full,
}

impl ObjectiveKind {
    pub fn uses_parts(self) -> bool {
        self != ObjectiveKind::Baseline
    }

    pub fn uses_adapter(self) -> bool {
        self == ObjectiveKind::Full
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub tau_s: f64,
    /// Teacher temperature at epoch 0.
    pub tau_t_start: f64,
    /// Teacher temperature once the schedule has finished.
    pub tau_t_end: f64,
    /// Epochs over which the teacher temperature moves linearly.
    pub tau_t_epochs: usize,
    pub tau_u: f64,
    pub tau_c: f64,
    pub lambda: f64,
    pub eps_me: f64,
    /// Weight of the part terms once warm-up is over.
    pub alpha: f64,
    pub symmetric_unsup_cls: bool,
    pub pdr_variant: PdrVariant,
    pub objective: ObjectiveKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau_s: 0.1,
            tau_t_start: 0.07,
            tau_t_end: 0.04,
            tau_t_epochs: 30,
            tau_u: 0.07,
            tau_c: 1.0,
            lambda: 0.35,
            eps_me: 1.0,
            alpha: 1.0,
            symmetric_unsup_cls: true,
            pdr_variant: PdrVariant::Exact,
            objective: ObjectiveKind::Full,
        }
    }
}

/// Per-step values of the scheduled weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepWeights {
    pub alpha: f64,
    pub tau_t: f64,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("tau_s", self.tau_s),
            ("tau_t_start", self.tau_t_start),
            ("tau_t_end", self.tau_t_end),
            ("tau_u", self.tau_u),
            ("tau_c", self.tau_c),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        if !self.eps_me.is_finite() {
            return Err(Error::Config("eps_me must be finite".into()));
        }
        Ok(())
    }

    pub fn tau_t_at(&self, epoch: usize) -> f64 {
        if self.tau_t_epochs == 0 || epoch >= self.tau_t_epochs {
            return self.tau_t_end;
        }
        let f = epoch as f64 / self.tau_t_epochs as f64;
        self.tau_t_start + (self.tau_t_end - self.tau_t_start) * f
    }

    /// `alpha` ramps linearly from 0 over the warm-up epochs.
    pub fn alpha_at(&self, epoch: usize, warmup_epochs: usize) -> f64 {
        if warmup_epochs == 0 || epoch >= warmup_epochs {
            self.alpha
        } else {
            self.alpha * epoch as f64 / warmup_epochs as f64
        }
    }

    pub fn at_epoch(&self, epoch: usize, warmup_epochs: usize) -> StepWeights {
        StepWeights { alpha: self.alpha_at(epoch, warmup_epochs), tau_t: self.tau_t_at(epoch) }
    }
}

/// Part inputs for one batch: per sample and view, the fixed patches and the
/// part attention map computed from them.
#[derive(Clone, Debug)]
pub struct PartBatch<T> {
    pub patches: [Vec<Array2<T>>; 2],
    pub maps: [Vec<Array2<T>>; 2],
    pub shared: Vec<BTreeSet<usize>>,
}

/// Two aligned views of a batch.
#[derive(Clone, Debug)]
pub struct BatchViewPair<T> {
    /// Fixed CLS features per view (`B x d`).
    pub cls: [Array2<T>; 2],
    pub labels: Vec<Option<usize>>,
    pub parts: Option<PartBatch<T>>,
}

impl<T: Scalar> BatchViewPair<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn validate(&self, model: &Model<T>) -> Result<()> {
        let b = self.len();
        for v in &self.cls {
            if v.nrows() != b || v.ncols() != model.dim() {
                return Err(Error::Shape(format!("cls view is {:?}, expected ({b}, {})", v.dim(), model.dim())));
            }
        }
        if let Some(p) = &self.parts {
            for v in 0..2 {
                if p.patches[v].len() != b || p.maps[v].len() != b {
                    return Err(Error::Shape("part inputs do not cover the batch".into()));
                }
                for (patch, map) in p.patches[v].iter().zip(&p.maps[v]) {
                    if map.nrows() != patch.nrows() || map.ncols() != model.num_parts() {
                        return Err(Error::Shape(format!(
                            "part map {:?} does not fit {} patches and K = {}",
                            map.dim(),
                            patch.nrows(),
                            model.num_parts()
                        )));
                    }
                }
            }
            if p.shared.len() != b {
                return Err(Error::Shape("shared-part sets do not cover the batch".into()));
            }
        }
        Ok(())
    }
}

/// Values of the five base-loss terms and their weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct BaseTerms<T> {
    pub sup_cls: T,
    pub unsup_cls: T,
    pub entropy: T,
    pub sup_rep: T,
    pub unsup_rep: T,
    pub total: T,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ObjectiveTerms<T> {
    pub global: BaseTerms<T>,
    pub part: Option<BaseTerms<T>>,
    pub pdr: Option<T>,
    pub pdr_terms: usize,
    pub alpha: T,
    pub total: T,
}

#[derive(Clone, Debug)]
pub struct ObjectiveOutput<T> {
    pub terms: ObjectiveTerms<T>,
    pub grad: Model<T>,
}

/// Teacher distributions for the self-distillation terms, per view.
#[derive(Clone, Debug)]
pub struct Teachers<T> {
    pub global: [Array2<T>; 2],
    pub part: Option<[Array2<T>; 2]>,
}

struct BaseGrad<T> {
    terms: BaseTerms<T>,
    d_x: [Array2<T>; 2],
    d_prototypes: Array2<T>,
    d_projector: Mlp<T>,
}

#[allow(clippy::too_many_arguments)]
fn base_loss<T: Scalar>(
    x: [&Array2<T>; 2],
    labels: &[Option<usize>],
    prototypes: &Array2<T>,
    projector: &Mlp<T>,
    cfg: &LossConfig,
    tau_t: T,
    teachers: Option<&[Array2<T>; 2]>,
) -> Result<BaseGrad<T>> {
    let b = labels.len();
    let lambda = T::lit(cfg.lambda);
    let rest = T::one() - lambda;
    let tau_s = T::lit(cfg.tau_s);
    let w = prototypes.view();
    let stacked = concatenate(Axis(0), &[x[0].view(), x[1].view()]).map_err(|e| Error::Shape(e.to_string()))?;
    let labels2: Vec<Option<usize>> = labels.iter().chain(labels).copied().collect();

    let sc = sup_cls_loss(stacked.view(), &labels2, w, tau_s)?;
    let uc = match teachers {
        Some(t) => {
            unsup_cls_loss_with_teachers(x[0].view(), x[1].view(), w, tau_s, &t[0], &t[1], cfg.symmetric_unsup_cls)?
        }
        None => unsup_cls_loss(x[0].view(), x[1].view(), w, tau_s, tau_t, cfg.symmetric_unsup_cls)?,
    };
    let me = mean_entropy_reg(stacked.view(), w, tau_s, T::lit(cfg.eps_me))?;
    let (z, cache) = projector.forward(stacked.view());
    let (z1, z2) = (z.slice(s![..b, ..]), z.slice(s![b.., ..]));
    let sr = sup_rep_loss(z1, z2, labels, T::lit(cfg.tau_c))?;
    let ur = unsup_rep_loss(z1, z2, T::lit(cfg.tau_u))?;

    let d_z = concatenate(
        Axis(0),
        &[(&sr.d_view1 * lambda + &ur.d_view1 * rest).view(), (&sr.d_view2 * lambda + &ur.d_view2 * rest).view()],
    )
    .map_err(|e| Error::Shape(e.to_string()))?;
    let mut d_projector = projector.zeros_like();
    let mut d_stacked = projector.backward(stacked.view(), &cache, d_z.view(), &mut d_projector);
    d_stacked.scaled_add(lambda, &sc.d_features);
    d_stacked += &me.d_features;
    let mut d1 = d_stacked.slice(s![..b, ..]).to_owned();
    let mut d2 = d_stacked.slice(s![b.., ..]).to_owned();
    d1.scaled_add(rest, &uc.d_view1);
    d2.scaled_add(rest, &uc.d_view2);
    let mut d_prototypes = &sc.d_prototypes * lambda + &me.d_prototypes;
    d_prototypes.scaled_add(rest, &uc.d_prototypes);

    let terms = BaseTerms {
        sup_cls: sc.loss,
        unsup_cls: uc.loss,
        entropy: me.loss,
        sup_rep: sr.loss,
        unsup_rep: ur.loss,
        total: lambda * sc.loss + rest * uc.loss + me.loss + lambda * sr.loss + rest * ur.loss,
    };
    Ok(BaseGrad { terms, d_x: [d1, d2], d_prototypes, d_projector })
}

fn parts_active<T: Scalar>(batch: &BatchViewPair<T>, cfg: &LossConfig, step: &StepWeights) -> bool {
    cfg.objective.uses_parts() && step.alpha > 0.0 && batch.parts.is_some()
}

/// Teacher distributions for `model` on `batch`; held fixed, they make the
/// objective an ordinary differentiable function of the parameters.
pub fn compute_teachers<T: Scalar>(
    model: &Model<T>,
    batch: &BatchViewPair<T>,
    cfg: &LossConfig,
    step: &StepWeights,
) -> Result<Teachers<T>> {
    batch.validate(model)?;
    let tau_t = T::lit(step.tau_t);
    let w = model.prototypes.view();
    let g = [model.encode(batch.cls[0].view()), model.encode(batch.cls[1].view())];
    let global = [cosine_predictions(g[0].view(), w, tau_t)?, cosine_predictions(g[1].view(), w, tau_t)?];
    let part = match (&batch.parts, parts_active(batch, cfg, step) && cfg.objective.uses_adapter()) {
        (Some(p), true) => {
            let mut out = Vec::with_capacity(2);
            for v in 0..2 {
                let parts: Vec<Array2<T>> =
                    p.patches[v].iter().zip(&p.maps[v]).map(|(x, m)| model.part_features(x.view(), m.view())).collect();
                let h = model.aggregate_parts(&parts);
                out.push(cosine_predictions(h.view(), w, tau_t)?);
            }
            let b = out.pop().expect("two views");
            let a = out.pop().expect("two views");
            Some([a, b])
        }
        _ => None,
    };
    Ok(Teachers { global, part })
}

/// The full objective and its gradient for every parameter group.
pub fn total_objective<T: Scalar>(
    model: &Model<T>,
    batch: &BatchViewPair<T>,
    cfg: &LossConfig,
    step: &StepWeights,
) -> Result<ObjectiveOutput<T>> {
    objective_impl(model, batch, cfg, step, None)
}

/// [`total_objective`] with the self-distillation teachers supplied.
pub fn total_objective_with_teachers<T: Scalar>(
    model: &Model<T>,
    batch: &BatchViewPair<T>,
    cfg: &LossConfig,
    step: &StepWeights,
    teachers: &Teachers<T>,
) -> Result<ObjectiveOutput<T>> {
    objective_impl(model, batch, cfg, step, Some(teachers))
}

fn objective_impl<T: Scalar>(
    model: &Model<T>,
    batch: &BatchViewPair<T>,
    cfg: &LossConfig,
    step: &StepWeights,
    teachers: Option<&Teachers<T>>,
) -> Result<ObjectiveOutput<T>> {
    cfg.validate()?;
    batch.validate(model)?;
    let tau_t = T::lit(step.tau_t);
    let mut grad = model.zeros_like();

    let g = [model.encode(batch.cls[0].view()), model.encode(batch.cls[1].view())];
    let global = base_loss(
        [&g[0], &g[1]],
        &batch.labels,
        &model.prototypes,
        &model.projector,
        cfg,
        tau_t,
        teachers.map(|t| &t.global),
    )?;
    for v in 0..2 {
        model.encoder.backward(batch.cls[v].view(), global.d_x[v].view(), &mut grad.encoder);
    }
    grad.prototypes += &global.d_prototypes;
    grad.projector = global.d_projector;
    let mut total = global.terms.total;
    let mut terms =
        ObjectiveTerms { global: global.terms, part: None, pdr: None, pdr_terms: 0, alpha: T::zero(), total };

    if parts_active(batch, cfg, step) {
        let p = batch.parts.as_ref().expect("checked");
        let alpha = T::lit(step.alpha);
        let enc: [Vec<Array2<T>>; 2] = [0, 1].map(|v| p.patches[v].iter().map(|x| model.encode(x.view())).collect());
        let parts: [Vec<Array2<T>>; 2] =
            [0, 1].map(|v| enc[v].iter().zip(&p.maps[v]).map(|(f, m)| m.t().dot(f)).collect());

        let pdr = pdr_loss(&parts[0], &parts[1], &p.shared, cfg.pdr_variant)?;
        let mut d_parts = [pdr.d_view1, pdr.d_view2];
        let mut part_total = pdr.loss;
        terms.pdr = Some(pdr.loss);
        terms.pdr_terms = pdr.terms;

        if cfg.objective.uses_adapter() {
            let flat = [flatten_parts(&parts[0]), flatten_parts(&parts[1])];
            let fwd = [model.adapter.forward(flat[0].view()), model.adapter.forward(flat[1].view())];
            let part_teachers = match teachers {
                Some(t) => Some(t.part.as_ref().ok_or_else(|| Error::Invalid("missing part teachers".into()))?),
                None => None,
            };
            let projector = model.part_projector();
            let base = base_loss(
                [&fwd[0].0, &fwd[1].0],
                &batch.labels,
                &model.prototypes,
                projector,
                cfg,
                tau_t,
                part_teachers,
            )?;
            part_total += base.terms.total;
            terms.part = Some(base.terms);
            grad.prototypes.scaled_add(alpha, &base.d_prototypes);
            let mut d_proj = base.d_projector;
            scale_mlp(&mut d_proj, alpha);
            match &mut grad.part_projector {
                Some(pp) => add_mlp(pp, &d_proj),
                None => add_mlp(&mut grad.projector, &d_proj),
            }
            for v in 0..2 {
                let d_flat = model.adapter.backward(flat[v].view(), &fwd[v].1, base.d_x[v].view(), &mut grad.adapter);
                for (i, row) in d_flat.outer_iter().enumerate() {
                    let dv = row.to_owned().into_shape_with_order(d_parts[v][i].raw_dim()).expect("K x d");
                    d_parts[v][i] += &dv;
                }
            }
            scale_mlp(&mut grad.adapter, alpha);
        }

        // d enc(P) = M dV, then through the encoder
        let mut d_encoder = model.encoder.clone();
        d_encoder.weight.fill(T::zero());
        d_encoder.bias.fill(T::zero());
        for v in 0..2 {
            for i in 0..batch.len() {
                let d_f = p.maps[v][i].dot(&d_parts[v][i]);
                model.encoder.backward(p.patches[v][i].view(), d_f.view(), &mut d_encoder);
            }
        }
        grad.encoder.weight.scaled_add(alpha, &d_encoder.weight);
        grad.encoder.bias.scaled_add(alpha, &d_encoder.bias);
        terms.alpha = alpha;
        total += alpha * part_total;
        terms.total = total;
    }
    Ok(ObjectiveOutput { terms, grad })
}

fn scale_mlp<T: Scalar>(m: &mut Mlp<T>, a: T) {
    for l in [&mut m.hidden, &mut m.out] {
        l.weight.mapv_inplace(|v| v * a);
        l.bias.mapv_inplace(|v| v * a);
    }
}

fn add_mlp<T: Scalar>(dst: &mut Mlp<T>, src: &Mlp<T>) {
    dst.hidden.weight += &src.hidden.weight;
    dst.hidden.bias += &src.hidden.bias;
    dst.out.weight += &src.out.weight;
    dst.out.bias += &src.out.bias;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (Model<f64>, BatchViewPair<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Model::init(4, 3, 2, &ModelConfig::default(), &mut rng).unwrap();
        let batch = gradcheck::random_batch(&mut rng, 5, 4, 6, 2, 3);
        (model, batch)
    }

    #[test]
    fn every_gradient_check_passes() {
        let rows = gradcheck_suite(7, 20).unwrap();
        let mut names: Vec<&str> = rows.iter().map(|r| r.check.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        assert!(names.len() >= 12, "{names:?}");
        for name in names {
            let n = rows.iter().filter(|r| r.check == name).count();
            assert!(n >= 20, "{name} ran {n} times");
        }
        let failed: Vec<_> = rows.iter().filter(|r| !r.passed).collect();
        assert!(failed.is_empty(), "{failed:?}");
    }

    #[test]
    fn zero_alpha_is_exactly_the_baseline() {
        let (model, batch) = setup(3);
        let step = StepWeights { alpha: 0.0, tau_t: 0.05 };
        let full = total_objective(&model, &batch, &LossConfig::default(), &step).unwrap();
        let base_cfg = LossConfig { objective: ObjectiveKind::Baseline, ..Default::default() };
        let mut no_parts = batch.clone();
        no_parts.parts = None;
        let base = total_objective(&model, &no_parts, &base_cfg, &StepWeights { alpha: 2.0, tau_t: 0.05 }).unwrap();
        assert_eq!(full.terms.total.to_bits(), base.terms.total.to_bits());
        assert_eq!(full.grad, base.grad);
        assert_eq!(full.terms.total, full.terms.global.total);
    }

    #[test]
    fn total_is_sum_of_weighted_terms() {
        let (model, batch) = setup(4);
        let cfg = LossConfig::default();
        let step = StepWeights { alpha: 1.3, tau_t: 0.06 };
        let out = total_objective(&model, &batch, &cfg, &step).unwrap();
        let t = &out.terms;
        let l = cfg.lambda;
        let base = |b: &BaseTerms<f64>| {
            l * b.sup_cls + (1.0 - l) * b.unsup_cls + b.entropy + l * b.sup_rep + (1.0 - l) * b.unsup_rep
        };
        let part = t.part.unwrap();
        assert!((base(&t.global) - t.global.total).abs() < 1e-12);
        assert!((base(&part) - part.total).abs() < 1e-12);
        let expected = t.global.total + 1.3 * (part.total + t.pdr.unwrap());
        assert!((t.total - expected).abs() < 1e-12);
        assert!(t.pdr_terms > 0);
    }

    #[test]
    fn pdr_only_leaves_the_adapter_alone() {
        let (model, batch) = setup(5);
        let cfg = LossConfig { objective: ObjectiveKind::PdrOnly, ..Default::default() };
        let step = StepWeights { alpha: 1.0, tau_t: 0.06 };
        let out = total_objective(&model, &batch, &cfg, &step).unwrap();
        assert!(out.terms.part.is_none());
        assert_eq!(out.grad.adapter, model.adapter.zeros_like());
        let expected = out.terms.global.total + out.terms.pdr.unwrap();
        assert!((out.terms.total - expected).abs() < 1e-12);
    }

    #[test]
    fn schedules() {
        let cfg = LossConfig::default();
        assert_eq!(cfg.tau_t_at(0), 0.07);
        assert!((cfg.tau_t_at(15) - 0.055).abs() < 1e-15);
        assert_eq!(cfg.tau_t_at(30), 0.04);
        assert_eq!(cfg.tau_t_at(99), 0.04);
        assert_eq!(cfg.alpha_at(0, 5), 0.0);
        assert!((cfg.alpha_at(2, 5) - 0.4).abs() < 1e-15);
        assert_eq!(cfg.alpha_at(7, 5), 1.0);
        assert!(LossConfig { lambda: 1.5, ..cfg }.validate().is_err());
        assert!(LossConfig { tau_u: 0.0, ..cfg }.validate().is_err());
        assert!(LossConfig { alpha: -1.0, ..cfg }.validate().is_err());
    }
}
