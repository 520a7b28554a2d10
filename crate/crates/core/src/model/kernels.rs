//! Row-wise building blocks with explicit backward passes.

use super::scalar::Scalar;

pub(crate) const LN_EPS: f64 = 1e-5;

/// Saved state of a layer normalization over `rows x dim`.
#[derive(Debug, Clone, Default)]
pub(crate) struct NormCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn layer_norm<T: Scalar>(
    x: &[T],
    gain: &[T],
    bias: &[T],
    dim: usize,
    keep: bool,
) -> (Vec<T>, NormCache<T>) {
    let rows = x.len() / dim;
    let mut y = vec![T::zero(); x.len()];
    let mut cache = NormCache {
        xhat: if keep { vec![T::zero(); x.len()] } else { Vec::new() },
        rstd: if keep { vec![T::zero(); rows] } else { Vec::new() },
    };
    let n = T::lit(dim as f64);
    let eps = T::lit(LN_EPS);
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rstd = T::one() / (var + eps).sqrt();
        let out = &mut y[r * dim..(r + 1) * dim];
        for c in 0..dim {
            let xh = (row[c] - mean) * rstd;
            out[c] = xh * gain[c] + bias[c];
            if keep {
                cache.xhat[r * dim + c] = xh;
            }
        }
        if keep {
            cache.rstd[r] = rstd;
        }
    }
    (y, cache)
}

/// Returns `dx`; accumulates parameter gradients.
pub(crate) fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    cache: &NormCache<T>,
    gain: &[T],
    dgain: &mut [T],
    dbias: &mut [T],
    dim: usize,
) -> Vec<T> {
    let rows = dy.len() / dim;
    let mut dx = vec![T::zero(); dy.len()];
    let n = T::lit(dim as f64);
    let mut dxhat = vec![T::zero(); dim];
    for r in 0..rows {
        let g = &dy[r * dim..(r + 1) * dim];
        let xh = &cache.xhat[r * dim..(r + 1) * dim];
        let mut sum = T::zero();
        let mut dot = T::zero();
        for c in 0..dim {
            dgain[c] += g[c] * xh[c];
            dbias[c] += g[c];
            dxhat[c] = g[c] * gain[c];
            sum += dxhat[c];
            dot += dxhat[c] * xh[c];
        }
        let mean = sum / n;
        let mean_dot = dot / n;
        let rstd = cache.rstd[r];
        for c in 0..dim {
            dx[r * dim + c] = rstd * (dxhat[c] - mean - xh[c] * mean_dot);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

#[inline]
pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * dinner
}

/// In-place numerically stable softmax of one row.
#[inline]
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

/// `dS = P * (dP - rowdot(dP, P))`, written over `dp`.
#[inline]
pub(crate) fn softmax_backward_in_place<T: Scalar>(p: &[T], dp: &mut [T]) {
    let dot = p.iter().zip(dp.iter()).map(|(&a, &b)| a * b).sum::<T>();
    for (g, &pv) in dp.iter_mut().zip(p) {
        *g = pv * (*g - dot);
    }
}

pub(crate) fn add_row_bias<T: Scalar>(x: &mut [T], bias: &[T]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub(crate) fn col_sums_into<T: Scalar>(x: &[T], dim: usize, out: &mut [T]) {
    for row in x.chunks_exact(dim) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}
