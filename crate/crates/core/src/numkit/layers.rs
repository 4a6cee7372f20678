//! Layer primitives: linear, GELU, layer norm and row softmax, each with an
//! analytic backward.

use super::params::{LayerParams, ParamGrads};
use super::scalar::{lit, Scalar};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;
const GELU_COEF: f64 = 0.044715;
// sqrt(2 / pi)
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

/// Borrowed view of a `{prefix}.weight` / `{prefix}.bias` pair.
#[derive(Clone, Copy)]
pub struct Linear<'a, T> {
    pub weight: &'a Tensor<T>,
    pub bias: Option<&'a Tensor<T>>,
}

pub struct LinearGrads<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<'a, T: Scalar> Linear<'a, T> {
    pub fn from_params(p: &'a LayerParams<T>, prefix: &str) -> Result<Self> {
        Ok(Self {
            weight: p.get(&format!("{prefix}.weight"))?,
            bias: p.get(&format!("{prefix}.bias")).ok(),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    /// `x · Wᵀ + b`
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.cols() != self.weight.cols() {
            return Err(Error::Dimension {
                op: "linear",
                left: x.shape(),
                right: self.weight.shape(),
            });
        }
        let mut out = x.matmul_t(self.weight)?;
        if let Some(b) = self.bias {
            out.add_row(b.data())?;
        }
        Ok(out)
    }

    /// Returns `∂L/∂x` and, when requested, the weight and bias gradients.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        grad_out: &Tensor<T>,
        want_params: bool,
    ) -> Result<(Tensor<T>, Option<LinearGrads<T>>)> {
        let gx = grad_out.matmul(self.weight)?;
        let grads = if want_params {
            let weight = grad_out.t_matmul(x)?;
            let bias = Tensor::row_vector(grad_out.sum_rows());
            Some(LinearGrads { weight, bias })
        } else {
            None
        };
        Ok((gx, grads))
    }
}

impl<T: Scalar> LinearGrads<T> {
    pub fn store(self, prefix: &str, out: &mut ParamGrads<T>, has_bias: bool) {
        out.insert(format!("{prefix}.weight"), self.weight);
        if has_bias {
            out.insert(format!("{prefix}.bias"), self.bias);
        }
    }
}

/// `linear(params, x)` for a layer holding plain `weight` / `bias` tensors.
pub fn linear<T: Scalar>(params: &LayerParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    Linear {
        weight: params.get("weight")?,
        bias: params.get("bias").ok(),
    }
    .forward(x)
}

#[inline]
fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = lit::<T>(0.5);
    let u = lit::<T>(GELU_SCALE) * (x + lit::<T>(GELU_COEF) * x * x * x);
    half * x * (T::one() + u.tanh())
}

#[inline]
fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let half = lit::<T>(0.5);
    let c = lit::<T>(GELU_SCALE);
    let a = lit::<T>(GELU_COEF);
    let th = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + lit::<T>(3.0) * a * x * x)
}

/// Tanh-approximated GELU.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

/// Backward of [`gelu`] given the pre-activation `x`.
pub fn gelu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&xi, &g)| g * gelu_grad_scalar(xi))
        .collect();
    Tensor::new(x.rows(), x.cols(), data).expect("same shape")
}

/// Saved per-row statistics for the layer-norm backward.
#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Per-row normalization without the affine part.
pub fn normalize_rows<T: Scalar>(x: &Tensor<T>) -> LayerNormCache<T> {
    let d = x.cols();
    let dn = lit::<T>(d as f64);
    let eps = lit::<T>(LN_EPS);
    let mut normalized = Tensor::zeros(x.rows(), d);
    let mut inv_std = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let r = x.row(i);
        let mean = r.iter().copied().sum::<T>() / dn;
        let var = r.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let inv = T::one() / (var + eps).sqrt();
        for (o, &v) in normalized.row_mut(i).iter_mut().zip(r) {
            *o = (v - mean) * inv;
        }
        inv_std.push(inv);
    }
    LayerNormCache { normalized, inv_std }
}

/// `gamma ⊙ (x - mean) / sqrt(var + eps) + beta`, per row.
pub fn layer_norm<T: Scalar>(
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    x: &Tensor<T>,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    if gamma.len() != x.cols() || beta.len() != x.cols() {
        return Err(Error::Dimension {
            op: "layer_norm",
            left: x.shape(),
            right: gamma.shape(),
        });
    }
    let cache = normalize_rows(x);
    let mut y = cache.normalized.clone();
    for i in 0..y.rows() {
        for ((o, &g), &b) in y.row_mut(i).iter_mut().zip(gamma.data()).zip(beta.data()) {
            *o = *o * g + b;
        }
    }
    Ok((y, cache))
}

/// Returns `∂L/∂x` and, when requested, `(∂L/∂gamma, ∂L/∂beta)`.
pub fn layer_norm_backward<T: Scalar>(
    gamma: &Tensor<T>,
    cache: &LayerNormCache<T>,
    grad_out: &Tensor<T>,
    want_params: bool,
) -> (Tensor<T>, Option<(Tensor<T>, Tensor<T>)>) {
    let (rows, d) = grad_out.shape();
    let dn = lit::<T>(d as f64);
    let mut gx = Tensor::zeros(rows, d);
    let mut ggamma = vec![T::zero(); d];
    let mut gbeta = vec![T::zero(); d];
    let mut gxhat = vec![T::zero(); d];
    for i in 0..rows {
        let go = grad_out.row(i);
        let xh = cache.normalized.row(i);
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for j in 0..d {
            let g = go[j] * gamma.data()[j];
            gxhat[j] = g;
            sum_g += g;
            sum_gx += g * xh[j];
            if want_params {
                ggamma[j] += go[j] * xh[j];
                gbeta[j] += go[j];
            }
        }
        let inv = cache.inv_std[i];
        for (j, o) in gx.row_mut(i).iter_mut().enumerate() {
            *o = inv / dn * (dn * gxhat[j] - sum_g - xh[j] * sum_gx);
        }
    }
    let params = want_params.then(|| (Tensor::row_vector(ggamma), Tensor::row_vector(gbeta)));
    (gx, params)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    for i in 0..y.rows() {
        let r = y.row_mut(i);
        let max = r.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for v in r.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in r.iter_mut() {
            *v /= sum;
        }
    }
    y
}

/// Backward of [`softmax_rows`] given its output `y`.
pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let mut gx = Tensor::zeros(y.rows(), y.cols());
    for i in 0..y.rows() {
        let yr = y.row(i);
        let gr = grad_out.row(i);
        let s: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((o, &yv), &gv) in gx.row_mut(i).iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - s);
        }
    }
    gx
}
