//! Dense layers and row normalization with hand-written backward passes.

use crate::scalar::Scalar;
use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

/// Norms below this are clamped before dividing.
pub const NORM_EPS: f64 = 1e-12;

/// `y = x W + b` with `W` stored `in x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Linear { weight: Array2::zeros((d_in, d_out)), bias: Array1::zeros(d_out) }
    }

    pub fn identity(d: usize) -> Self {
        Linear { weight: Array2::eye(d), bias: Array1::zeros(d) }
    }

    /// Weights and biases uniform in `+-1/sqrt(d_in)`.
    pub fn init<R: Rng + ?Sized>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d_in.max(1) as f64).sqrt();
        let dist = Uniform::new(-bound, bound).expect("finite bound");
        Linear {
            weight: Array2::from_shape_fn((d_in, d_out), |_| T::lit(dist.sample(rng))),
            bias: Array1::from_shape_fn(d_out, |_| T::lit(dist.sample(rng))),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        x.dot(&self.weight) + &self.bias
    }

    /// Returns `dL/dx` and accumulates parameter gradients into `grad`.
    pub fn backward(&self, x: ArrayView2<T>, dy: ArrayView2<T>, grad: &mut Linear<T>) -> Array2<T> {
        grad.weight += &x.t().dot(&dy);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub(crate) fn flatten_into(&self, out: &mut Vec<T>) {
        out.extend(self.weight.iter().copied());
        out.extend(self.bias.iter().copied());
    }

    pub(crate) fn unflatten_from(&mut self, src: &mut impl Iterator<Item = T>) {
        for v in self.weight.iter_mut().chain(self.bias.iter_mut()) {
            *v = src.next().expect("flat parameter vector too short");
        }
    }
}

pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Two linear layers with a SiLU in between.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub hidden: Linear<T>,
    pub out: Linear<T>,
}

/// Intermediate values kept for the backward pass.
#[derive(Clone, Debug)]
pub struct MlpCache<T> {
    pre: Array2<T>,
    act: Array2<T>,
}

impl<T: Scalar> Mlp<T> {
    pub fn init<R: Rng + ?Sized>(d_in: usize, d_hidden: usize, d_out: usize, rng: &mut R) -> Self {
        Mlp { hidden: Linear::init(d_in, d_hidden, rng), out: Linear::init(d_hidden, d_out, rng) }
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            hidden: Linear::zeros(self.hidden.d_in(), self.hidden.d_out()),
            out: Linear::zeros(self.out.d_in(), self.out.d_out()),
        }
    }

    pub fn forward(&self, x: ArrayView2<T>) -> (Array2<T>, MlpCache<T>) {
        let pre = self.hidden.forward(x);
        let act = pre.mapv(silu);
        let y = self.out.forward(act.view());
        (y, MlpCache { pre, act })
    }

    pub fn backward(&self, x: ArrayView2<T>, cache: &MlpCache<T>, dy: ArrayView2<T>, grad: &mut Mlp<T>) -> Array2<T> {
        let mut d_act = self.out.backward(cache.act.view(), dy, &mut grad.out);
        Zip::from(&mut d_act).and(&cache.pre).for_each(|g, &p| *g *= silu_grad(p));
        self.hidden.backward(x, d_act.view(), &mut grad.hidden)
    }

    pub fn param_count(&self) -> usize {
        self.hidden.param_count() + self.out.param_count()
    }

    pub(crate) fn flatten_into(&self, out: &mut Vec<T>) {
        self.hidden.flatten_into(out);
        self.out.flatten_into(out);
    }

    pub(crate) fn unflatten_from(&mut self, src: &mut impl Iterator<Item = T>) {
        self.hidden.unflatten_from(src);
        self.out.unflatten_from(src);
    }
}

/// Row-wise l2 normalization; also returns the (clamped) norms.
pub fn l2_normalize_rows<T: Scalar>(x: ArrayView2<T>) -> (Array2<T>, Array1<T>) {
    let eps = T::lit(NORM_EPS);
    let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(eps));
    let mut y = x.to_owned();
    for (mut row, &n) in y.outer_iter_mut().zip(norms.iter()) {
        row.mapv_inplace(|v| v / n);
    }
    (y, norms)
}

/// Backward of [`l2_normalize_rows`]: `dx = (dy - y (y . dy)) / |x|`.
pub fn l2_normalize_rows_backward<T: Scalar>(y: ArrayView2<T>, norms: &Array1<T>, dy: ArrayView2<T>) -> Array2<T> {
    let eps = T::lit(NORM_EPS);
    let mut dx = dy.to_owned();
    for ((mut g, yr), &n) in dx.outer_iter_mut().zip(y.outer_iter()).zip(norms.iter()) {
        if n > eps {
            let proj = yr.dot(&g);
            g.zip_mut_with(&yr, |gv, &yv| *gv = (*gv - yv * proj) / n);
        } else {
            g.mapv_inplace(|v| v / n);
        }
    }
    dx
}
