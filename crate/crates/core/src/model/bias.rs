//! Additive attention-logit bias controlling the condition stream.

use crate::error::{invalid, Result};

/// Logit used in place of `log(0)`; large enough that the post-softmax
/// weight is exactly zero in both `f32` and `f64`.
pub const MASKED_LOGIT: f64 = -1e9;

/// Condition strength `gamma >= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasSpec {
    gamma: f64,
}

impl BiasSpec {
    pub fn new(gamma: f64) -> Result<Self> {
        if !gamma.is_finite() || gamma < 0.0 {
            return Err(invalid(format!("gamma must be finite and non-negative, got {gamma}")));
        }
        Ok(Self { gamma })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Logit offset for the iterate/condition cross blocks.
    pub fn cross_logit(&self) -> f64 {
        if self.gamma == 0.0 {
            MASKED_LOGIT
        } else {
            self.gamma.ln()
        }
    }
}

impl Default for BiasSpec {
    fn default() -> Self {
        Self { gamma: 1.0 }
    }
}

/// Square additive bias over the concatenation `[text; iterate; condition]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasMatrix {
    pub text_len: usize,
    pub image_len: usize,
    pub values: Vec<f64>,
}

impl BiasMatrix {
    pub fn size(&self) -> usize {
        self.text_len + 2 * self.image_len
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.size() + col]
    }
}

/// Builds the `(M + 2N)^2` bias: `log(gamma)` on the iterate->condition and
/// condition->iterate blocks, zero elsewhere.
///
/// With `gamma = 0` the cross blocks become [`MASKED_LOGIT`], and so does
/// the text->condition block: text rows are shared by both image streams, so
/// leaving them open would let the condition reach the iterate stream
/// through the text tokens one layer later.
pub fn build_bias(text_len: usize, image_len: usize, gamma: f64) -> Result<BiasMatrix> {
    let spec = BiasSpec::new(gamma)?;
    let size = text_len + 2 * image_len;
    let mut values = vec![0.0; size * size];
    let cross = spec.cross_logit();
    let (it, cv) = (text_len, text_len + image_len);
    for r in 0..image_len {
        for c in 0..image_len {
            values[(it + r) * size + cv + c] = cross;
            values[(cv + r) * size + it + c] = cross;
        }
    }
    if gamma == 0.0 {
        for r in 0..text_len {
            for c in 0..image_len {
                values[r * size + cv + c] = MASKED_LOGIT;
            }
        }
    }
    Ok(BiasMatrix { text_len, image_len, values })
}
