//! Two-dimensional rotary position encoding.
//!
//! A vector of even length `d` is viewed as `d / 2` coordinate pairs. The
//! first `ceil(d / 4)` pairs rotate by `theta_t * row`, the remaining pairs by
//! `theta_t * col`, with `theta_t = base^(-t / pairs_in_group)`. Every pair is
//! a plane rotation, so norms are preserved and
//! `<rope(q, p1), rope(k, p2)>` depends only on `p1 - p2`.

use crate::error::{Error, Result};

use super::scalar::Scalar;

/// Per-pair rotation angles for position `(row, col)`.
pub fn rope_angles(pairs: usize, row: usize, col: usize, base: f64) -> Vec<f64> {
    let row_pairs = pairs.div_ceil(2);
    let col_pairs = pairs - row_pairs;
    let mut out = Vec::with_capacity(pairs);
    for t in 0..row_pairs {
        out.push(base.powf(-(t as f64) / row_pairs as f64) * row as f64);
    }
    for t in 0..col_pairs {
        out.push(base.powf(-(t as f64) / col_pairs as f64) * col as f64);
    }
    out
}

/// Rotates `v` for grid position `(row, col)`.
pub fn rope2d<T: Scalar>(v: &[T], row: usize, col: usize, base: f64) -> Result<Vec<T>> {
    if !v.len().is_multiple_of(2) {
        return Err(Error::OddDimension(v.len()));
    }
    let table = RopeTable::new(v.len() / 2, &[(row, col)], base);
    let mut out = v.to_vec();
    table.rotate(&mut out, 0, false);
    Ok(out)
}

/// Cached cos/sin for a list of positions.
#[derive(Debug, Clone)]
pub(crate) struct RopeTable<T> {
    pairs: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Scalar> RopeTable<T> {
    pub fn new(pairs: usize, positions: &[(usize, usize)], base: f64) -> Self {
        let mut cos = Vec::with_capacity(positions.len() * pairs);
        let mut sin = Vec::with_capacity(positions.len() * pairs);
        for &(r, c) in positions {
            for a in rope_angles(pairs, r, c, base) {
                cos.push(T::lit(a.cos()));
                sin.push(T::lit(a.sin()));
            }
        }
        Self { pairs, cos, sin }
    }

    /// Rotates one head slice (`2 * pairs` values) in place; `inverse`
    /// applies the transpose, which is what the backward pass needs.
    #[inline]
    pub fn rotate(&self, x: &mut [T], pos: usize, inverse: bool) {
        let cos = &self.cos[pos * self.pairs..(pos + 1) * self.pairs];
        let sin = &self.sin[pos * self.pairs..(pos + 1) * self.pairs];
        for t in 0..self.pairs {
            let (a, b) = (x[2 * t], x[2 * t + 1]);
            let s = if inverse { -sin[t] } else { sin[t] };
            x[2 * t] = a * cos[t] - b * s;
            x[2 * t + 1] = a * s + b * cos[t];
        }
    }

    /// Rotates every head of a `rows x (heads * 2 * pairs)` matrix.
    pub fn rotate_rows(&self, x: &mut [T], width: usize, inverse: bool) {
        let head = 2 * self.pairs;
        for (pos, row) in x.chunks_exact_mut(width).enumerate() {
            for h in row.chunks_exact_mut(head) {
                self.rotate(h, pos, inverse);
            }
        }
    }
}
