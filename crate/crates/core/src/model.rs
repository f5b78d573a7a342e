//! Trainable parameters of the toy model: a linear encoder over fixed
//! features, the prototype matrix, the part adapter and the projector(s).

use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp, NORM_EPS};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Adapter hidden width; 0 means `2 d`.
    pub adapter_hidden: usize,
    /// Projector output width; 0 means `d`.
    pub proj_dim: usize,
    /// Use a second projector for the part-enhanced branch.
    pub separate_part_projector: bool,
    pub adapter_init: AdapterInit,
}

/// Starting point of the part adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterInit {
    /// Uniform fan-in initialization.
    Random,
    /// Exact mean over part slots, using `silu(x) - silu(-x) = x` in the
    /// first `2 d` hidden units, plus a small random perturbation.
    MeanPool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            adapter_hidden: 0,
            proj_dim: 0,
            separate_part_projector: false,
            adapter_init: AdapterInit::MeanPool,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub encoder: Linear<T>,
    /// `d x C`; columns are kept unit-norm between steps.
    pub prototypes: Array2<T>,
    /// `K d -> d`.
    pub adapter: Mlp<T>,
    pub projector: Mlp<T>,
    pub part_projector: Option<Mlp<T>>,
}

impl<T: Scalar> Model<T> {
    /// Identity encoder, random unit prototypes, randomly initialized MLPs.
    pub fn init<R: Rng + ?Sized>(
        dim: usize,
        classes: usize,
        parts: usize,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if dim == 0 || classes == 0 || parts == 0 {
            return Err(Error::Config(format!("model needs positive sizes, got d={dim}, C={classes}, K={parts}")));
        }
        let hidden = if cfg.adapter_hidden == 0 { 2 * dim } else { cfg.adapter_hidden };
        let proj = if cfg.proj_dim == 0 { dim } else { cfg.proj_dim };
        let prototypes = Array2::from_shape_fn((dim, classes), |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z)
        });
        let mut adapter = Mlp::init(parts * dim, hidden, dim, rng);
        if cfg.adapter_init == AdapterInit::MeanPool {
            mean_pool_adapter(&mut adapter, parts, dim);
        }
        let projector = Mlp::init(dim, dim, proj, rng);
        let part_projector = cfg.separate_part_projector.then(|| Mlp::init(dim, dim, proj, rng));
        let mut model = Model { encoder: Linear::identity(dim), prototypes, adapter, projector, part_projector };
        model.renormalize_prototypes();
        Ok(model)
    }

    pub fn dim(&self) -> usize {
        self.encoder.d_in()
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.ncols()
    }

    pub fn num_parts(&self) -> usize {
        self.adapter.hidden.d_in() / self.dim()
    }

    pub fn zeros_like(&self) -> Self {
        Model {
            encoder: Linear::zeros(self.encoder.d_in(), self.encoder.d_out()),
            prototypes: Array2::zeros(self.prototypes.raw_dim()),
            adapter: self.adapter.zeros_like(),
            projector: self.projector.zeros_like(),
            part_projector: self.part_projector.as_ref().map(Mlp::zeros_like),
        }
    }

    pub fn encode(&self, x: ArrayView2<T>) -> Array2<T> {
        self.encoder.forward(x)
    }

    pub fn part_projector(&self) -> &Mlp<T> {
        self.part_projector.as_ref().unwrap_or(&self.projector)
    }

    pub fn renormalize_prototypes(&mut self) {
        let eps = T::lit(NORM_EPS);
        for mut col in self.prototypes.columns_mut() {
            let n = col.dot(&col).sqrt().max(eps);
            col.mapv_inplace(|v| v / n);
        }
    }

    /// Part features `V = M^T enc(P)` for one sample.
    pub fn part_features(&self, patches_fixed: ArrayView2<T>, map: ArrayView2<T>) -> Array2<T> {
        map.t().dot(&self.encode(patches_fixed))
    }

    /// Part-enhanced features for a batch of flattened part matrices.
    pub fn aggregate_parts(&self, parts: &[Array2<T>]) -> Array2<T> {
        self.adapter.forward(flatten_parts(parts).view()).0
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count()
            + self.prototypes.len()
            + self.adapter.param_count()
            + self.projector.param_count()
            + self.part_projector.as_ref().map_or(0, Mlp::param_count)
    }

    /// Named ranges of the flat parameter vector.
    pub fn param_groups(&self) -> Vec<(&'static str, Range<usize>)> {
        let mut out = Vec::new();
        let mut at = 0;
        let mut push = |name, n: usize| {
            out.push((name, at..at + n));
            at += n;
        };
        push("encoder", self.encoder.param_count());
        push("prototypes", self.prototypes.len());
        push("adapter", self.adapter.param_count());
        push("projector", self.projector.param_count());
        if let Some(p) = &self.part_projector {
            push("part_projector", p.param_count());
        }
        out
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        self.encoder.flatten_into(&mut out);
        out.extend(self.prototypes.iter().copied());
        self.adapter.flatten_into(&mut out);
        self.projector.flatten_into(&mut out);
        if let Some(p) = &self.part_projector {
            p.flatten_into(&mut out);
        }
        out
    }

    pub fn unflatten(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!("expected {} parameters, got {}", self.param_count(), flat.len())));
        }
        let mut it = flat.iter().copied();
        self.encoder.unflatten_from(&mut it);
        for v in self.prototypes.iter_mut() {
            *v = it.next().expect("sized");
        }
        self.adapter.unflatten_from(&mut it);
        self.projector.unflatten_from(&mut it);
        if let Some(p) = &mut self.part_projector {
            p.unflatten_from(&mut it);
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let flat: Vec<U> = self.flatten().into_iter().map(|v| U::lit(v.as_f64())).collect();
        let mut out = Model {
            encoder: Linear::zeros(self.encoder.d_in(), self.encoder.d_out()),
            prototypes: Array2::zeros(self.prototypes.raw_dim()),
            adapter: Mlp {
                hidden: Linear::zeros(self.adapter.hidden.d_in(), self.adapter.hidden.d_out()),
                out: Linear::zeros(self.adapter.out.d_in(), self.adapter.out.d_out()),
            },
            projector: Mlp {
                hidden: Linear::zeros(self.projector.hidden.d_in(), self.projector.hidden.d_out()),
                out: Linear::zeros(self.projector.out.d_in(), self.projector.out.d_out()),
            },
            part_projector: self.part_projector.as_ref().map(|p| Mlp {
                hidden: Linear::zeros(p.hidden.d_in(), p.hidden.d_out()),
                out: Linear::zeros(p.out.d_in(), p.out.d_out()),
            }),
        };
        out.unflatten(&flat).expect("same layout");
        out
    }
}

/// Shrinks the random weights and overlays the pooling solution on as many
/// coordinates as the hidden width allows.
fn mean_pool_adapter<T: Scalar>(adapter: &mut Mlp<T>, parts: usize, dim: usize) {
    let shrink = T::lit(MEAN_POOL_NOISE);
    for l in [&mut adapter.hidden, &mut adapter.out] {
        l.weight.mapv_inplace(|v| v * shrink);
        l.bias.mapv_inplace(|v| v * shrink);
    }
    let inv_k = T::one() / T::from_usize_lossy(parts);
    for t in 0..dim.min(adapter.hidden.d_out() / 2) {
        for k in 0..parts {
            adapter.hidden.weight[[k * dim + t, t]] += inv_k;
            adapter.hidden.weight[[k * dim + t, dim + t]] -= inv_k;
        }
        adapter.out.weight[[t, t]] += T::one();
        adapter.out.weight[[dim + t, t]] -= T::one();
    }
}

/// Scale of the random weights left in a mean-pooling adapter.
const MEAN_POOL_NOISE: f64 = 0.05;

/// Stacks `K x d` part matrices into `B x (K d)` rows.
pub fn flatten_parts<T: Scalar>(parts: &[Array2<T>]) -> Array2<T> {
    let width = parts.first().map_or(0, |p| p.len());
    let mut out = Array2::<T>::zeros((parts.len(), width));
    for (mut row, p) in out.outer_iter_mut().zip(parts) {
        row.assign(&Array1::from_iter(p.iter().copied()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn flat_roundtrip_and_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = ModelConfig { separate_part_projector: true, ..Default::default() };
        let m = Model::<f64>::init(4, 3, 2, &cfg, &mut rng).unwrap();
        let flat = m.flatten();
        assert_eq!(flat.len(), m.param_count());
        let groups = m.param_groups();
        assert_eq!(groups.last().unwrap().1.end, flat.len());
        let mut z = m.zeros_like();
        z.unflatten(&flat).unwrap();
        assert_eq!(z, m);
        assert!(z.unflatten(&flat[1..]).is_err());
        assert_eq!(m.num_parts(), 2);
    }

    #[test]
    fn prototypes_start_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Model::<f64>::init(5, 7, 3, &ModelConfig::default(), &mut rng).unwrap();
        for col in m.prototypes.columns() {
            assert!((col.dot(&col).sqrt() - 1.0).abs() < 1e-12);
        }
        assert_eq!(m.encode(Array2::eye(5).view()), Array2::<f64>::eye(5));
    }
}
