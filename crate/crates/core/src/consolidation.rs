//! Multi-layer attention consolidation and map smoothing.
//!
//! [`stack_layers`] averages instruction-to-image attention over a layer
//! range; the smoothers sharpen the result. Filters (gaussian, bilateral,
//! morphological, adaptive) finish with [`peak_preserve`]; interpolators
//! upsample by an odd factor and block-average back down.
//!
//! Borders use half-sample symmetric reflection (`d c b a | a b c d | d c`)
//! for every method. Arithmetic runs in f64; maps are stored as f32.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, Error, Result};
use crate::model::AttentionRecord;

/// Fraction of the original kept above the 90th percentile.
pub const PEAK_ALPHA: f64 = 0.7;
/// Percentile above which peaks are preserved.
pub const PEAK_PERCENTILE: f64 = 90.0;
/// Largest side accepted by the thin-plate spline interpolator.
pub const RBF_MAX_SIDE: usize = 64;

/// Non-negative map over the image grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl AttnMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::Shape(format!("{} values for a {height}x{width} map", values.len())));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite map value {v}")));
        }
        Ok(Self { height, width, values })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self { height, width, values: vec![value; height * width] }
    }

    pub fn at(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    /// `(min, max)` of the values.
    pub fn range(&self) -> (f32, f32) {
        self.values.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    fn from_f64(height: usize, width: usize, values: &[f64]) -> Self {
        Self { height, width, values: values.iter().map(|&v| v as f32).collect() }
    }
}

/// Smoothing method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SmoothMethod {
    Gaussian,
    Bilateral,
    Morphological,
    Adaptive,
    Rbf,
    Cubic,
    Linear,
    Nearest,
}

impl SmoothMethod {
    pub const ALL: [SmoothMethod; 8] = [
        SmoothMethod::Gaussian,
        SmoothMethod::Bilateral,
        SmoothMethod::Morphological,
        SmoothMethod::Adaptive,
        SmoothMethod::Rbf,
        SmoothMethod::Cubic,
        SmoothMethod::Linear,
        SmoothMethod::Nearest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SmoothMethod::Gaussian => "gaussian",
            SmoothMethod::Bilateral => "bilateral",
            SmoothMethod::Morphological => "morphological",
            SmoothMethod::Adaptive => "adaptive",
            SmoothMethod::Rbf => "rbf",
            SmoothMethod::Cubic => "cubic",
            SmoothMethod::Linear => "linear",
            SmoothMethod::Nearest => "nearest",
        }
    }

    /// Upsample-then-downsample methods; their strength is an odd factor.
    pub fn is_interpolator(self) -> bool {
        matches!(self, SmoothMethod::Rbf | SmoothMethod::Cubic | SmoothMethod::Linear | SmoothMethod::Nearest)
    }
}

impl fmt::Display for SmoothMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SmoothMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SmoothMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid(format!("unknown smoothing method {s:?}")))
    }
}

/// A smoothing method with its strength (filters) or upsample factor
/// (interpolators).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothSpec {
    method: SmoothMethod,
    strength: f64,
}

impl SmoothSpec {
    pub fn new(method: SmoothMethod, strength: f64) -> Result<Self> {
        if !(strength.is_finite() && strength > 0.0) {
            return Err(invalid(format!("strength must be positive, got {strength}")));
        }
        if method.is_interpolator() && (strength.fract() != 0.0 || (strength as u64).is_multiple_of(2)) {
            return Err(invalid(format!("{method} needs an odd integer factor, got {strength}")));
        }
        Ok(Self { method, strength })
    }

    pub fn method(&self) -> SmoothMethod {
        self.method
    }

    pub fn strength(&self) -> f64 {
        self.strength
    }

    pub fn apply(&self, map: &AttnMap) -> Result<AttnMap> {
        let s = self.strength;
        Ok(match self.method {
            SmoothMethod::Gaussian => gaussian_smooth(map, s),
            SmoothMethod::Bilateral => bilateral_smooth(map, s),
            SmoothMethod::Morphological => morphological_smooth(map, s),
            SmoothMethod::Adaptive => adaptive_smooth(map, s),
            m => interpolate_smooth(map, m, s as usize)?,
        })
    }
}

impl FromStr for SmoothSpec {
    type Err = Error;

    /// Parses `method:strength`.
    fn from_str(s: &str) -> Result<Self> {
        let (method, strength) =
            s.split_once(':').ok_or_else(|| invalid(format!("expected method:strength, got {s:?}")))?;
        let strength = strength.parse::<f64>().map_err(|_| invalid(format!("bad strength {strength:?}")))?;
        SmoothSpec::new(method.parse()?, strength)
    }
}

/// Mean over `layers`, all heads and text rows `rows` of the
/// instruction-to-iterate attention block, reshaped to `height x width`.
pub fn stack_layers(
    records: &[AttentionRecord],
    layers: &[usize],
    rows: &[usize],
    height: usize,
    width: usize,
) -> Result<AttnMap> {
    if layers.is_empty() || rows.is_empty() {
        return Err(invalid("layer and row sets must be non-empty"));
    }
    let n = height * width;
    let mut acc = vec![0.0f64; n];
    let mut count = 0usize;
    for &layer in layers {
        let mut found = false;
        for rec in records.iter().filter(|r| r.layer == layer) {
            found = true;
            if rec.image_len != n {
                return Err(Error::Shape(format!("record has {} image tokens, map has {n}", rec.image_len)));
            }
            if let Some(&m) = rows.iter().find(|&&m| m >= rec.text_len) {
                return Err(invalid(format!("text row {m} out of range for {} text tokens", rec.text_len)));
            }
            let off = rec.iterate_offset();
            for &m in rows {
                for (a, &w) in acc.iter_mut().zip(&rec.row(m)[off..off + n]) {
                    *a += w as f64;
                }
                count += 1;
            }
        }
        if !found {
            return Err(invalid(format!("no attention recorded for layer {layer}")));
        }
    }
    let scale = 1.0 / count as f64;
    let values: Vec<f64> = acc.iter().map(|a| a * scale).collect();
    Ok(AttnMap::from_f64(height, width, &values))
}

/// Half-sample symmetric reflection of index `i` into `0..n`.
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Normalized 1D Gaussian taps for `sigma`, radius `ceil(3 sigma)`.
fn gaussian_taps(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius).map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Separable Gaussian blur; the normalized 2D kernel over the square
/// window factors into the product of normalized 1D kernels.
fn gaussian_raw(values: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let taps = gaussian_taps(sigma);
    let radius = (taps.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * values[y * w + reflect_index(x as isize + k as isize - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * tmp[reflect_index(y as isize + k as isize - radius, h) * w + x])
                .sum();
        }
    }
    out
}

/// Gaussian spatial scale for a filter strength.
pub fn gaussian_sigma(strength: f64) -> f64 {
    2.0 * strength
}

/// Structuring-element radius for a morphological strength.
pub fn disk_radius(strength: f64) -> usize {
    ((5.0 * strength).floor() as usize).max(3)
}

/// Linearly interpolated percentile `q` in `[0, 100]`.
pub fn percentile(values: &[f32], q: f64) -> f64 {
    let mut sorted: Vec<f64> = values.iter().map(|&v| v as f64).collect();
    sorted.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Keeps `0.7 * original + 0.3 * smoothed` where `original` exceeds its
/// 90th percentile, `smoothed` elsewhere.
pub fn peak_preserve(original: &AttnMap, smoothed: &AttnMap) -> Result<AttnMap> {
    if (original.height, original.width) != (smoothed.height, smoothed.width) {
        return Err(Error::Shape("peak preservation needs equal map shapes".into()));
    }
    Ok(peak_preserve_f64(original, &smoothed.to_f64()))
}

fn peak_preserve_f64(original: &AttnMap, smoothed: &[f64]) -> AttnMap {
    let p90 = percentile(&original.values, PEAK_PERCENTILE);
    let out: Vec<f64> = original
        .values
        .iter()
        .zip(smoothed)
        .map(|(&o, &s)| {
            let o = o as f64;
            if o > p90 {
                PEAK_ALPHA * o + (1.0 - PEAK_ALPHA) * s
            } else {
                s
            }
        })
        .collect();
    AttnMap::from_f64(original.height, original.width, &out)
}

/// Gaussian blur with `sigma = 2 * strength`, then peak preservation.
pub fn gaussian_smooth(map: &AttnMap, strength: f64) -> AttnMap {
    let blurred = gaussian_raw(&map.to_f64(), map.height, map.width, gaussian_sigma(strength));
    peak_preserve_f64(map, &blurred)
}

fn bilateral_raw(map: &AttnMap, sigma_s: f64, sigma_r: f64) -> Vec<f64> {
    let (h, w) = (map.height, map.width);
    let v = map.to_f64();
    let radius = (3.0 * sigma_s).ceil() as isize;
    let spatial: Vec<f64> = (-radius..=radius)
        .flat_map(|dy| (-radius..=radius).map(move |dx| (dy, dx)))
        .map(|(dy, dx)| (-((dy * dy + dx * dx) as f64) / (2.0 * sigma_s * sigma_s)).exp())
        .collect();
    let side = (2 * radius + 1) as usize;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let centre = v[y * w + x];
            let (mut num, mut den) = (0.0, 0.0);
            for (i, dy) in (-radius..=radius).enumerate() {
                let yy = reflect_index(y as isize + dy, h);
                for (j, dx) in (-radius..=radius).enumerate() {
                    let q = v[yy * w + reflect_index(x as isize + dx, w)];
                    let d = q - centre;
                    let wt = spatial[i * side + j] * (-(d * d) / (2.0 * sigma_r * sigma_r)).exp();
                    num += wt * q;
                    den += wt;
                }
            }
            out[y * w + x] = num / den;
        }
    }
    out
}

/// Range-Gaussian scale: `strength * (max - min)`, or 1 on a flat map.
pub fn bilateral_range_sigma(map: &AttnMap, strength: f64) -> f64 {
    let (lo, hi) = map.range();
    let range = (hi - lo) as f64;
    if range > 0.0 {
        strength * range
    } else {
        1.0
    }
}

/// Edge-preserving bilateral filter, then peak preservation.
pub fn bilateral_smooth(map: &AttnMap, strength: f64) -> AttnMap {
    let out = bilateral_raw(map, gaussian_sigma(strength), bilateral_range_sigma(map, strength));
    peak_preserve_f64(map, &out)
}

/// Bilateral filter with an explicit range scale, without peak preservation.
pub fn bilateral_with_range(map: &AttnMap, strength: f64, sigma_r: f64) -> AttnMap {
    AttnMap::from_f64(map.height, map.width, &bilateral_raw(map, gaussian_sigma(strength), sigma_r))
}

/// Offsets `(dy, dx)` with `dy^2 + dx^2 <= r^2`.
pub fn disk_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dy, dx))).filter(|(dy, dx)| dy * dy + dx * dx <= r * r).collect()
}

fn window_extreme(v: &[f64], h: usize, w: usize, disk: &[(isize, isize)], max: bool) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let vals = disk.iter().map(|&(dy, dx)| {
                v[reflect_index(y as isize + dy, h) * w + reflect_index(x as isize + dx, w)]
            });
            out[y * w + x] = if max { vals.fold(f64::NEG_INFINITY, f64::max) } else { vals.fold(f64::INFINITY, f64::min) };
        }
    }
    out
}

/// Grayscale erosion (windowed minimum over a disk).
pub fn erode(map: &AttnMap, radius: usize) -> AttnMap {
    let out = window_extreme(&map.to_f64(), map.height, map.width, &disk_offsets(radius), false);
    AttnMap::from_f64(map.height, map.width, &out)
}

/// Grayscale dilation (windowed maximum over a disk).
pub fn dilate(map: &AttnMap, radius: usize) -> AttnMap {
    let out = window_extreme(&map.to_f64(), map.height, map.width, &disk_offsets(radius), true);
    AttnMap::from_f64(map.height, map.width, &out)
}

/// Dilation followed by erosion.
pub fn closing(map: &AttnMap, radius: usize) -> AttnMap {
    erode(&dilate(map, radius), radius)
}

/// Erosion followed by dilation.
pub fn opening(map: &AttnMap, radius: usize) -> AttnMap {
    dilate(&erode(map, radius), radius)
}

/// Opening then closing with a disk of radius `max(3, floor(5 * strength))`,
/// then peak preservation.
pub fn morphological_smooth(map: &AttnMap, strength: f64) -> AttnMap {
    let r = disk_radius(strength);
    let out = closing(&opening(map, r), r);
    peak_preserve_f64(map, &out.to_f64())
}

/// Population variance over each 3x3 neighbourhood.
pub fn local_variance(map: &AttnMap) -> Vec<f64> {
    let (h, w) = (map.height, map.width);
    let v = map.to_f64();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut win = [0.0f64; 9];
            for (k, slot) in win.iter_mut().enumerate() {
                let (dy, dx) = (k as isize / 3 - 1, k as isize % 3 - 1);
                *slot = v[reflect_index(y as isize + dy, h) * w + reflect_index(x as isize + dx, w)];
            }
            let mean = win.iter().sum::<f64>() / 9.0;
            out[y * w + x] = win.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / 9.0;
        }
    }
    out
}

/// Per-position blend weight of the smoothed map: 1 at the lowest local
/// variance, 0.3 at the highest.
pub fn adaptive_weights(variance: &[f64]) -> Vec<f64> {
    let lo = variance.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = variance.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return vec![1.0; variance.len()];
    }
    variance.iter().map(|v| 1.0 - 0.7 * (v - lo) / (hi - lo)).collect()
}

/// Variance-weighted blend of the Gaussian blur and the input, then peak
/// preservation.
pub fn adaptive_smooth(map: &AttnMap, strength: f64) -> AttnMap {
    let v = map.to_f64();
    let blurred = gaussian_raw(&v, map.height, map.width, gaussian_sigma(strength));
    let weights = adaptive_weights(&local_variance(map));
    let out: Vec<f64> = weights.iter().zip(blurred.iter().zip(&v)).map(|(w, (g, o))| w * g + (1.0 - w) * o).collect();
    peak_preserve_f64(map, &out)
}

/// Grid coordinate of sub-sample `i` when upsampling by `k`, aligned so
/// pixel centres coincide.
pub fn upsample_coord(i: usize, k: usize) -> f64 {
    (i as f64 + 0.5) / k as f64 - 0.5
}

/// Cubic convolution kernel with `a = -0.5`.
pub fn cubic_kernel(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Thin-plate radial basis `r^2 log r`, zero at the origin.
pub fn thin_plate(r2: f64) -> f64 {
    if r2 == 0.0 {
        0.0
    } else {
        0.5 * r2 * r2.ln()
    }
}

/// Thin-plate spline through every grid point with an affine tail.
struct ThinPlate {
    centres: Vec<(f64, f64)>,
    weights: Vec<f64>,
    affine: [f64; 3],
}

impl ThinPlate {
    fn fit(v: &[f64], h: usize, w: usize) -> Result<Self> {
        let n = h * w;
        let centres: Vec<(f64, f64)> = (0..n).map(|p| ((p / w) as f64, (p % w) as f64)).collect();
        let size = n + 3;
        let mut a = DMatrix::<f64>::zeros(size, size);
        for i in 0..n {
            for j in 0..n {
                let (dy, dx) = (centres[i].0 - centres[j].0, centres[i].1 - centres[j].1);
                a[(i, j)] = thin_plate(dy * dy + dx * dx);
            }
            let tail = [1.0, centres[i].0, centres[i].1];
            for (k, &t) in tail.iter().enumerate() {
                a[(i, n + k)] = t;
                a[(n + k, i)] = t;
            }
        }
        let mut b = DVector::<f64>::zeros(size);
        b.rows_mut(0, n).copy_from_slice(v);
        let sol = a.lu().solve(&b).ok_or_else(|| invalid("thin-plate system is singular"))?;
        Ok(Self { centres, weights: sol.rows(0, n).iter().copied().collect(), affine: [sol[n], sol[n + 1], sol[n + 2]] })
    }

    fn eval(&self, y: f64, x: f64) -> f64 {
        let radial: f64 = self
            .centres
            .iter()
            .zip(&self.weights)
            .map(|(&(cy, cx), &wt)| wt * thin_plate((y - cy) * (y - cy) + (x - cx) * (x - cx)))
            .sum();
        radial + self.affine[0] + self.affine[1] * y + self.affine[2] * x
    }
}

/// Upsamples by the odd factor `k` with the named interpolant, then
/// averages each `k x k` block back to one value.
pub fn interpolate_smooth(map: &AttnMap, method: SmoothMethod, k: usize) -> Result<AttnMap> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(invalid(format!("upsample factor must be odd and positive, got {k}")));
    }
    let (h, w) = (map.height, map.width);
    let v = map.to_f64();
    let at = |y: isize, x: isize| v[reflect_index(y, h) * w + reflect_index(x, w)];
    let sample: Box<dyn Fn(f64, f64) -> f64 + '_> = match method {
        SmoothMethod::Nearest => {
            if k == 1 {
                return Ok(map.clone());
            }
            Box::new(move |y: f64, x: f64| {
                let yi = (y.round() as isize).clamp(0, h as isize - 1);
                let xi = (x.round() as isize).clamp(0, w as isize - 1);
                at(yi, xi)
            })
        }
        SmoothMethod::Linear => Box::new(move |y: f64, x: f64| {
            let (y0, x0) = (y.floor(), x.floor());
            let (fy, fx) = (y - y0, x - x0);
            let (y0, x0) = (y0 as isize, x0 as isize);
            (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1))
        }),
        SmoothMethod::Cubic => Box::new(move |y: f64, x: f64| {
            let (y0, x0) = (y.floor() as isize, x.floor() as isize);
            let mut acc = 0.0;
            for dy in -1..=2 {
                let wy = cubic_kernel(y - (y0 + dy) as f64);
                for dx in -1..=2 {
                    acc += wy * cubic_kernel(x - (x0 + dx) as f64) * at(y0 + dy, x0 + dx);
                }
            }
            acc
        }),
        SmoothMethod::Rbf => {
            if h > RBF_MAX_SIDE || w > RBF_MAX_SIDE {
                return Err(Error::RbfSizeLimit { h, w });
            }
            let tps = ThinPlate::fit(&v, h, w)?;
            Box::new(move |y: f64, x: f64| tps.eval(y, x))
        }
        m => return Err(invalid(format!("{m} is not an interpolator"))),
    };
    let inv = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for i in 0..k {
                let sy = upsample_coord(y * k + i, k);
                for j in 0..k {
                    acc += sample(sy, upsample_coord(x * k + j, k));
                }
            }
            out[y * w + x] = acc * inv;
        }
    }
    Ok(AttnMap::from_f64(h, w, &out))
}

/// Direct, unoptimized evaluations of every smoother, used to self-check
/// the kernels above (the Gaussian is evaluated as a full 2D kernel, the
/// spline is solved by plain Gaussian elimination).
pub mod reference {
    use super::*;

    fn sample(v: &[f32], h: usize, w: usize, y: isize, x: isize) -> f64 {
        v[reflect_index(y, h) * w + reflect_index(x, w)] as f64
    }

    fn gaussian2d(map: &AttnMap, sigma: f64) -> Vec<f64> {
        let (h, w) = (map.height, map.width);
        let r = (3.0 * sigma).ceil() as isize;
        let mut out = vec![0.0; h * w];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let (mut num, mut den) = (0.0, 0.0);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let g = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
                        num += g * sample(&map.values, h, w, y + dy, x + dx);
                        den += g;
                    }
                }
                out[y as usize * w + x as usize] = num / den;
            }
        }
        out
    }

    fn preserve(map: &AttnMap, smoothed: &[f64]) -> AttnMap {
        let mut sorted = map.values.clone();
        sorted.sort_by(f32::total_cmp);
        let pos = 0.9 * (sorted.len() - 1) as f64;
        let (lo, frac) = (pos.floor() as usize, pos.fract());
        let p90 = if frac == 0.0 {
            sorted[lo] as f64
        } else {
            sorted[lo] as f64 * (1.0 - frac) + sorted[lo + 1] as f64 * frac
        };
        let out: Vec<f64> = map
            .values
            .iter()
            .zip(smoothed)
            .map(|(&o, &s)| if o as f64 > p90 { 0.7 * o as f64 + 0.3 * s } else { s })
            .collect();
        AttnMap::from_f64(map.height, map.width, &out)
    }

    pub fn gaussian(map: &AttnMap, strength: f64) -> AttnMap {
        preserve(map, &gaussian2d(map, 2.0 * strength))
    }

    pub fn bilateral(map: &AttnMap, strength: f64) -> AttnMap {
        let (h, w) = (map.height, map.width);
        let sigma_s = 2.0 * strength;
        let (lo, hi) = map.range();
        let sigma_r = if hi > lo { strength * (hi - lo) as f64 } else { 1.0 };
        let r = (3.0 * sigma_s).ceil() as isize;
        let mut out = vec![0.0; h * w];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let c = sample(&map.values, h, w, y, x);
                let (mut num, mut den) = (0.0, 0.0);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let q = sample(&map.values, h, w, y + dy, x + dx);
                        let wt = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma_s * sigma_s)).exp()
                            * (-(q - c) * (q - c) / (2.0 * sigma_r * sigma_r)).exp();
                        num += wt * q;
                        den += wt;
                    }
                }
                out[y as usize * w + x as usize] = num / den;
            }
        }
        preserve(map, &out)
    }

    fn extreme(v: &[f32], h: usize, w: usize, r: isize, max: bool) -> Vec<f32> {
        let mut out = vec![0.0; h * w];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut best = if max { f32::NEG_INFINITY } else { f32::INFINITY };
                for dy in -r..=r {
                    for dx in -r..=r {
                        if dx * dx + dy * dy <= r * r {
                            let q = v[reflect_index(y + dy, h) * w + reflect_index(x + dx, w)];
                            best = if max { best.max(q) } else { best.min(q) };
                        }
                    }
                }
                out[y as usize * w + x as usize] = best;
            }
        }
        out
    }

    pub fn morphological(map: &AttnMap, strength: f64) -> AttnMap {
        let (h, w) = (map.height, map.width);
        let r = ((5.0 * strength).floor() as isize).max(3);
        let opened = extreme(&extreme(&map.values, h, w, r, false), h, w, r, true);
        let closed = extreme(&extreme(&opened, h, w, r, true), h, w, r, false);
        let out: Vec<f64> = closed.iter().map(|&v| v as f64).collect();
        preserve(map, &out)
    }

    pub fn adaptive(map: &AttnMap, strength: f64) -> AttnMap {
        let (h, w) = (map.height, map.width);
        let g = gaussian2d(map, 2.0 * strength);
        let var: Vec<f64> = (0..h * w)
            .map(|p| {
                let (y, x) = ((p / w) as isize, (p % w) as isize);
                let win: Vec<f64> =
                    (-1..=1).flat_map(|dy| (-1..=1).map(move |dx| (dy, dx))).map(|(dy, dx)| sample(&map.values, h, w, y + dy, x + dx)).collect();
                let mean = win.iter().sum::<f64>() / 9.0;
                win.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 9.0
            })
            .collect();
        let lo = var.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = var.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let out: Vec<f64> = (0..h * w)
            .map(|p| {
                let wt = if hi > lo { 1.0 - 0.7 * (var[p] - lo) / (hi - lo) } else { 1.0 };
                wt * g[p] + (1.0 - wt) * map.values[p] as f64
            })
            .collect();
        preserve(map, &out)
    }

    /// Solves `a x = b` by Gaussian elimination with partial pivoting.
    pub fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
        let n = b.len();
        for col in 0..n {
            let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
            if a[piv][col] == 0.0 {
                return None;
            }
            a.swap(col, piv);
            b.swap(col, piv);
            for row in col + 1..n {
                let f = a[row][col] / a[col][col];
                if f != 0.0 {
                    for k in col..n {
                        a[row][k] -= f * a[col][k];
                    }
                    b[row] -= f * b[col];
                }
            }
        }
        let mut x = vec![0.0; n];
        for row in (0..n).rev() {
            let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
            x[row] = (b[row] - s) / a[row][row];
        }
        Some(x)
    }

    pub fn interpolate(map: &AttnMap, method: SmoothMethod, k: usize) -> Result<AttnMap> {
        let (h, w) = (map.height, map.width);
        let v = &map.values;
        let f: Box<dyn Fn(f64, f64) -> f64> = match method {
            SmoothMethod::Nearest => Box::new(move |y: f64, x: f64| {
                let yi = (y.round().max(0.0) as usize).min(h - 1);
                let xi = (x.round().max(0.0) as usize).min(w - 1);
                v[yi * w + xi] as f64
            }),
            SmoothMethod::Linear => Box::new(move |y: f64, x: f64| {
                let mut acc = 0.0;
                for gy in y.floor() as isize..=y.floor() as isize + 1 {
                    for gx in x.floor() as isize..=x.floor() as isize + 1 {
                        let wt = (1.0 - (y - gy as f64).abs()) * (1.0 - (x - gx as f64).abs());
                        acc += wt * sample(v, h, w, gy, gx);
                    }
                }
                acc
            }),
            SmoothMethod::Cubic => Box::new(move |y: f64, x: f64| {
                let mut acc = 0.0;
                for gy in y.floor() as isize - 1..=y.floor() as isize + 2 {
                    for gx in x.floor() as isize - 1..=x.floor() as isize + 2 {
                        acc += cubic_kernel(y - gy as f64) * cubic_kernel(x - gx as f64) * sample(v, h, w, gy, gx);
                    }
                }
                acc
            }),
            SmoothMethod::Rbf => {
                if h > RBF_MAX_SIDE || w > RBF_MAX_SIDE {
                    return Err(Error::RbfSizeLimit { h, w });
                }
                let n = h * w;
                let pts: Vec<(f64, f64)> = (0..n).map(|p| ((p / w) as f64, (p % w) as f64)).collect();
                let phi = |a: (f64, f64), b: (f64, f64)| {
                    let r = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
                    if r == 0.0 {
                        0.0
                    } else {
                        r * r * r.ln()
                    }
                };
                let mut a = vec![vec![0.0; n + 3]; n + 3];
                for i in 0..n {
                    for j in 0..n {
                        a[i][j] = phi(pts[i], pts[j]);
                    }
                    for (k, t) in [1.0, pts[i].0, pts[i].1].into_iter().enumerate() {
                        a[i][n + k] = t;
                        a[n + k][i] = t;
                    }
                }
                let mut b: Vec<f64> = v.iter().map(|&x| x as f64).collect();
                b.extend([0.0; 3]);
                let c = solve_dense(a, b).ok_or_else(|| invalid("singular spline system"))?;
                Box::new(move |y: f64, x: f64| {
                    let radial: f64 = (0..n).map(|i| c[i] * phi((y, x), pts[i])).sum();
                    radial + c[n] + c[n + 1] * y + c[n + 2] * x
                })
            }
            m => return Err(invalid(format!("{m} is not an interpolator"))),
        };
        let mut out = vec![0.0; h * w];
        for (p, o) in out.iter_mut().enumerate() {
            let (y, x) = (p / w, p % w);
            let mut acc = 0.0;
            for i in 0..k {
                for j in 0..k {
                    acc += f((y * k + i) as f64 / k as f64 + 0.5 / k as f64 - 0.5, (x * k + j) as f64 / k as f64 + 0.5 / k as f64 - 0.5);
                }
            }
            *o = acc / (k * k) as f64;
        }
        Ok(AttnMap::from_f64(h, w, &out))
    }

    /// Reference evaluation of `spec`.
    pub fn apply(spec: &SmoothSpec, map: &AttnMap) -> Result<AttnMap> {
        let s = spec.strength();
        Ok(match spec.method() {
            SmoothMethod::Gaussian => gaussian(map, s),
            SmoothMethod::Bilateral => bilateral(map, s),
            SmoothMethod::Morphological => morphological(map, s),
            SmoothMethod::Adaptive => adaptive(map, s),
            m => interpolate(map, m, s as usize)?,
        })
    }
}
