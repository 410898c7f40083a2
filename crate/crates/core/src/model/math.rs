//! Numeric building blocks shared by the forward and backward passes.
//!
//! Everything here is generic over [`Scalar`] so the same code path serves
//! single-precision training and double-precision gradient checking.
//! Transcendentals route through `f64` (see [`Scalar`]), keeping the two
//! instantiations in agreement up to `f32` round-off.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

use crate::scalar::Scalar;

/// Gaussian error linear unit in its exact form `x · Φ(x)`, with `Φ` the
/// standard normal CDF expressed through the error function.
pub fn gelu<F: Scalar>(x: F) -> F {
    let x64 = x.to_f64();
    F::from_f64(x64 * 0.5 * (1.0 + libm::erf(x64 / std::f64::consts::SQRT_2)))
}

/// Derivative of [`gelu`]: `Φ(x) + x · φ(x)` with `φ` the standard normal
/// density.
pub fn gelu_grad<F: Scalar>(x: F) -> F {
    let x64 = x.to_f64();
    let cdf = 0.5 * (1.0 + libm::erf(x64 / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x64 * x64).exp() / (2.0 * std::f64::consts::PI).sqrt();
    F::from_f64(cdf + x64 * pdf)
}

pub fn gelu_inplace<F: Scalar>(x: &mut Array2<F>) {
    x.mapv_inplace(gelu);
}

/// One draw from N(0, std²) via Box–Muller, computed in `f64`.
pub fn normal_draw<F: Scalar>(rng: &mut impl Rng, std: f64) -> F {
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    F::from_f64((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos() * std)
}

/// Numerically stable softmax over each row, in place.
pub fn softmax_rows_inplace<F: Scalar>(x: &mut Array2<F>) {
    for mut row in x.rows_mut() {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// Backward through a row-wise softmax: given the probabilities `p` and the
/// downstream gradient `dp`, returns `p ∘ (dp − rowsum(dp ∘ p))`.
pub fn softmax_rows_backward<F: Scalar>(p: &Array2<F>, dp: &Array2<F>) -> Array2<F> {
    let inner = (dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
    p * &(dp - &inner)
}

/// Row-wise layer normalization state needed by the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache<F> {
    /// Normalized activations before scale/shift.
    pub x_hat: Array2<F>,
    /// Per-row `1 / sqrt(var + eps)`.
    pub inv_std: Array1<F>,
}

pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Layer norm over the feature (last) axis: `y = γ ∘ x̂ + β` per row.
pub fn layer_norm<F: Scalar>(
    x: &Array2<F>,
    gamma: &Array1<F>,
    beta: &Array1<F>,
) -> (Array2<F>, LayerNormCache<F>) {
    let h = F::from_f64(x.ncols() as f64);
    let eps = F::from_f64(LAYER_NORM_EPS);
    let mut x_hat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in x_hat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / h;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| *v * *v).fold(F::zero(), |a, b| a + b) / h;
        let is = F::one() / (var + eps).sqrt();
        row.mapv_inplace(|v| v * is);
        *s = is;
    }
    let y = &x_hat * gamma + beta;
    (y, LayerNormCache { x_hat, inv_std })
}

/// Gradients of a layer norm: `(dx, dγ, dβ)`.
pub fn layer_norm_backward<F: Scalar>(
    dy: &Array2<F>,
    gamma: &Array1<F>,
    cache: &LayerNormCache<F>,
) -> (Array2<F>, Array1<F>, Array1<F>) {
    let h = F::from_f64(dy.ncols() as f64);
    let d_gamma = (dy * &cache.x_hat).sum_axis(Axis(0));
    let d_beta = dy.sum_axis(Axis(0));

    let dyg = dy * gamma;
    let mean_dyg = dyg.sum_axis(Axis(1)).insert_axis(Axis(1)) / h;
    let mean_dyg_xhat = (&dyg * &cache.x_hat).sum_axis(Axis(1)).insert_axis(Axis(1)) / h;
    let mut dx = dyg - mean_dyg - &cache.x_hat * &mean_dyg_xhat;
    for (mut row, is) in dx.rows_mut().into_iter().zip(cache.inv_std.iter()) {
        row.mapv_inplace(|v| v * *is);
    }
    (dx, d_gamma, d_beta)
}

/// Inverted-scaling dropout mask: entries are `0` with probability `rate`,
/// else `1 / (1 - rate)`. Multiplying by the mask both drops and rescales.
pub fn dropout_mask<F: Scalar>(shape: (usize, usize), rate: f64, rng: &mut impl Rng) -> Array2<F> {
    let keep_scale = F::from_f64(1.0 / (1.0 - rate));
    let mut mask = Array2::zeros(shape);
    for v in mask.iter_mut() {
        if rng.random::<f64>() >= rate {
            *v = keep_scale;
        }
    }
    mask
}
