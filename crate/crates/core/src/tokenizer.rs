//! Palette quantizer: images to token grids and back.
//!
//! A [`Palette`] holds `V` prototype patches of `P x P x C` values. Encoding
//! maps every non-overlapping `P x P` patch to its nearest prototype
//! (squared Euclidean distance, lowest index wins ties); decoding pastes the
//! prototypes back.

use std::collections::HashSet;

use crate::error::{invalid, Error, Result};
use crate::rng::CounterRng;

/// Sentinel marking a masked position in an in-progress grid.
pub const MASK_TOKEN: u32 = u32::MAX;

/// A dense `height x width x channels` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "image {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Copies the `size x size` patch whose top-left pixel is `(y0, x0)`.
    pub fn patch(&self, y0: usize, x0: usize, size: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(size * size * self.channels);
        for y in y0..y0 + size {
            let row = (y * self.width + x0) * self.channels;
            out.extend_from_slice(&self.data[row..row + size * self.channels]);
        }
        out
    }

    fn put_patch(&mut self, y0: usize, x0: usize, size: usize, values: &[f32]) {
        let span = size * self.channels;
        for (dy, chunk) in values.chunks_exact(span).enumerate() {
            let row = ((y0 + dy) * self.width + x0) * self.channels;
            self.data[row..row + span].copy_from_slice(chunk);
        }
    }

    /// All non-overlapping `size x size` patches in raster order.
    pub fn patches(&self, size: usize) -> Result<Vec<Vec<f32>>> {
        if size == 0 || !self.height.is_multiple_of(size) || !self.width.is_multiple_of(size) {
            return Err(Error::Shape(format!(
                "image {}x{} not divisible by patch size {size}",
                self.height, self.width
            )));
        }
        let mut out = Vec::with_capacity((self.height / size) * (self.width / size));
        for ty in 0..self.height / size {
            for tx in 0..self.width / size {
                out.push(self.patch(ty * size, tx * size, size));
            }
        }
        Ok(out)
    }
}

/// Row-major grid of discrete token indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenGrid {
    pub height: usize,
    pub width: usize,
    pub tokens: Vec<u32>,
}

impl TokenGrid {
    pub fn new(height: usize, width: usize, tokens: Vec<u32>) -> Result<Self> {
        if tokens.len() != height * width {
            return Err(Error::Shape(format!(
                "grid {height}x{width} needs {} tokens, got {}",
                height * width,
                tokens.len()
            )));
        }
        Ok(Self { height, width, tokens })
    }

    pub fn filled(height: usize, width: usize, token: u32) -> Self {
        Self { height, width, tokens: vec![token; height * width] }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.tokens[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, token: u32) {
        self.tokens[row * self.width + col] = token;
    }

    pub fn check_vocab(&self, vocab: usize) -> Result<()> {
        match self.tokens.iter().find(|&&t| t as usize >= vocab) {
            Some(&token) => Err(Error::TokenOutOfVocabulary { token, vocab }),
            None => Ok(()),
        }
    }

    /// Number of positions at which two equally-shaped grids differ.
    pub fn hamming(&self, other: &TokenGrid) -> usize {
        self.tokens.iter().zip(&other.tokens).filter(|(a, b)| a != b).count()
    }
}

/// `V` prototype patches of shape `patch_size x patch_size x channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct Palette {
    patch_size: usize,
    channels: usize,
    prototypes: Vec<f32>,
}

impl Palette {
    pub fn new(patch_size: usize, channels: usize, prototypes: Vec<f32>) -> Result<Self> {
        let len = patch_size * patch_size * channels;
        if len == 0 || !prototypes.len().is_multiple_of(len) {
            return Err(Error::Shape(format!(
                "prototype buffer of {} values is not a multiple of patch length {len}",
                prototypes.len()
            )));
        }
        let vocab = prototypes.len() / len;
        if vocab < 2 {
            return Err(invalid(format!("palette needs at least 2 prototypes, got {vocab}")));
        }
        if let Some(v) = prototypes.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid(format!("prototype value {v} outside [0, 1]")));
        }
        let mut seen = HashSet::with_capacity(vocab);
        for proto in prototypes.chunks_exact(len) {
            let key: Vec<u32> = proto.iter().map(|v| v.to_bits()).collect();
            if !seen.insert(key) {
                return Err(invalid("palette prototypes must be pairwise distinct"));
            }
        }
        Ok(Self { patch_size, channels, prototypes })
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn vocab_size(&self) -> usize {
        self.prototypes.len() / self.patch_len()
    }

    pub fn prototype(&self, token: usize) -> &[f32] {
        let len = self.patch_len();
        &self.prototypes[token * len..(token + 1) * len]
    }

    pub fn raw(&self) -> &[f32] {
        &self.prototypes
    }

    /// Index of the nearest prototype, lowest index on ties.
    pub fn nearest(&self, patch: &[f32]) -> u32 {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (k, proto) in self.prototypes.chunks_exact(self.patch_len()).enumerate() {
            let d = squared_distance(patch, proto);
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best as u32
    }

    /// A flat-colour palette: one prototype per RGB level combination,
    /// `levels^3` entries. Used by the synthetic task and the CLI.
    pub fn flat_colors(levels: usize, patch_size: usize) -> Result<Self> {
        if levels < 2 {
            return Err(invalid("flat palette needs at least 2 levels"));
        }
        let patches: Vec<Vec<f32>> = (0..levels * levels * levels)
            .map(|k| {
                let rgb = [k / (levels * levels), (k / levels) % levels, k % levels]
                    .map(|l| l as f32 / (levels - 1) as f32);
                rgb.iter().copied().cycle().take(patch_size * patch_size * 3).collect()
            })
            .collect();
        Self::new(patch_size, 3, patches.concat())
    }
}

#[inline]
pub(crate) fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum()
}

/// Shape of the patches fed to [`build_palette`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchShape {
    pub size: usize,
    pub channels: usize,
}

/// Indices of the first occurrence of every exactly-distinct patch.
pub fn distinct_patch_indices(patches: &[Vec<f32>]) -> Vec<usize> {
    let mut seen = HashSet::new();
    patches
        .iter()
        .enumerate()
        .filter(|(_, p)| seen.insert(p.iter().map(|v| v.to_bits()).collect::<Vec<_>>()))
        .map(|(i, _)| i)
        .collect()
}

/// Seeded initial centroid choice: a Fisher-Yates shuffle of the distinct
/// patch indices, keeping the first `vocab`.
pub fn initial_centroid_indices(patches: &[Vec<f32>], vocab: usize, seed: u64) -> Result<Vec<usize>> {
    let mut distinct = distinct_patch_indices(patches);
    if distinct.len() < vocab {
        return Err(Error::InsufficientDistinctPatches { distinct: distinct.len(), requested: vocab });
    }
    CounterRng::new(seed).stream(0).shuffle(&mut distinct);
    distinct.truncate(vocab);
    Ok(distinct)
}

/// Lloyd's k-means over patch vectors.
///
/// Runs at most `iters` assignment/update rounds, stopping early once the
/// assignment is stable. Empty clusters are re-seeded, in ascending cluster
/// order, from the point farthest from its centroid (lowest index on ties).
pub fn build_palette(
    patches: &[Vec<f32>],
    vocab: usize,
    iters: usize,
    seed: u64,
    shape: PatchShape,
) -> Result<Palette> {
    let len = shape.size * shape.size * shape.channels;
    if vocab < 2 {
        return Err(invalid(format!("vocab must be at least 2, got {vocab}")));
    }
    if patches.len() < vocab {
        return Err(invalid(format!("{} patches for {vocab} prototypes", patches.len())));
    }
    for p in patches {
        if p.len() != len {
            return Err(Error::Shape(format!("patch of {} values, expected {len}", p.len())));
        }
        if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("patch values must lie in [0, 1]"));
        }
    }
    let init = initial_centroid_indices(patches, vocab, seed)?;
    let mut centroids: Vec<Vec<f64>> = init
        .iter()
        .map(|&i| patches[i].iter().map(|&v| f64::from(v)).collect())
        .collect();
    let mut assign = vec![usize::MAX; patches.len()];

    for _ in 0..iters {
        let mut changed = false;
        for (i, p) in patches.iter().enumerate() {
            let k = nearest_f64(p, &centroids);
            if assign[i] != k {
                assign[i] = k;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0f64; len]; vocab];
        let mut counts = vec![0usize; vocab];
        for (p, &k) in patches.iter().zip(&assign) {
            counts[k] += 1;
            for (s, &v) in sums[k].iter_mut().zip(p) {
                *s += f64::from(v);
            }
        }
        for k in 0..vocab {
            if counts[k] > 0 {
                let n = counts[k] as f64;
                centroids[k] = sums[k].iter().map(|s| s / n).collect();
            }
        }
        if counts.contains(&0) {
            let mut dist: Vec<f64> = patches
                .iter()
                .zip(&assign)
                .map(|(p, &k)| squared_distance_f64(p, &centroids[k]))
                .collect();
            for k in (0..vocab).filter(|&k| counts[k] == 0) {
                let far = argmax_lowest(&dist);
                centroids[k] = patches[far].iter().map(|&v| f64::from(v)).collect();
                dist[far] = f64::NEG_INFINITY;
            }
        }
    }

    let prototypes: Vec<f32> = centroids.iter().flatten().map(|&v| v as f32).collect();
    Palette::new(shape.size, shape.channels, prototypes)
}

fn squared_distance_f64(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - y;
            d * d
        })
        .sum()
}

fn nearest_f64(p: &[f32], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in centroids.iter().enumerate() {
        let d = squared_distance_f64(p, c);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Maps every patch of `image` to its nearest prototype.
pub fn encode(image: &Image, palette: &Palette) -> Result<TokenGrid> {
    if image.channels != palette.channels() {
        return Err(Error::Shape(format!(
            "image has {} channels, palette {}",
            image.channels,
            palette.channels()
        )));
    }
    let p = palette.patch_size();
    let tokens = image.patches(p)?.iter().map(|patch| palette.nearest(patch)).collect();
    TokenGrid::new(image.height / p, image.width / p, tokens)
}

/// Replaces every token by its prototype patch.
pub fn decode(grid: &TokenGrid, palette: &Palette) -> Result<Image> {
    grid.check_vocab(palette.vocab_size())?;
    let p = palette.patch_size();
    let mut image = Image::filled(grid.height * p, grid.width * p, palette.channels(), 0.0);
    for r in 0..grid.height {
        for c in 0..grid.width {
            image.put_patch(r * p, c * p, p, palette.prototype(grid.get(r, c) as usize));
        }
    }
    Ok(image)
}
