//! Localization maps and region-hold reverting.
//!
//! The localization map scores each image position by how much the
//! instruction attends to it, averaged over a layer range, optionally
//! smoothed, and min-max normalized. After a decoding step every position
//! scoring below the threshold is put back to the source token and frozen.

use std::ops::Range;

use crate::consolidation::{stack_layers, AttnMap, SmoothSpec};
use crate::error::{invalid, Error, Result};
use crate::model::AttentionRecord;
use crate::sampler::SamplerState;
use crate::tokenizer::TokenGrid;

/// Region-hold settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionHoldSpec {
    /// Revert threshold in `[0, 1]`; 1 reverts every position.
    pub lambda: f64,
    /// Layers to average; `None` is the last third of the model.
    pub layers: Option<Vec<usize>>,
    /// Instruction rows to average; `None` is every instruction token.
    pub rows: Option<Vec<usize>>,
    pub smooth: Option<SmoothSpec>,
    /// Apply after every `cadence`-th step (counting from the first).
    pub cadence: usize,
}

impl RegionHoldSpec {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(invalid(format!("lambda {lambda} outside [0, 1]")));
        }
        Ok(Self { lambda, layers: None, rows: None, smooth: None, cadence: 1 })
    }

    /// Threshold handed to [`apply_region_hold`]. At `lambda = 1` it is
    /// lifted above every score so the top-scoring positions revert too.
    pub fn effective_threshold(&self) -> f64 {
        if self.lambda >= 1.0 {
            f64::INFINITY
        } else {
            self.lambda
        }
    }

    pub fn applies_at(&self, step: usize) -> bool {
        step.is_multiple_of(self.cadence.max(1))
    }

    fn resolved_layers(&self, records: &[AttentionRecord]) -> Result<Vec<usize>> {
        match &self.layers {
            Some(l) if l.is_empty() => Err(invalid("empty layer set")),
            Some(l) => Ok(l.clone()),
            None => {
                let n = records.iter().map(|r| r.layer + 1).max().ok_or_else(|| invalid("no attention records"))?;
                Ok(default_layers(n).collect())
            }
        }
    }

    fn resolved_rows(&self, records: &[AttentionRecord]) -> Result<Vec<usize>> {
        match &self.rows {
            Some(r) if r.is_empty() => Err(invalid("empty row set")),
            Some(r) => Ok(r.clone()),
            None => {
                let m = records.first().ok_or_else(|| invalid("no attention records"))?.text_len;
                if m == 0 {
                    return Err(invalid("no instruction tokens to localize with"));
                }
                Ok((0..m).collect())
            }
        }
    }
}

/// Last third of `n_layers` (at least one layer).
pub fn default_layers(n_layers: usize) -> Range<usize> {
    n_layers - n_layers.div_ceil(3).max(1)..n_layers
}

/// Per-position edit relevance in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationMap {
    pub height: usize,
    pub width: usize,
    pub scores: Vec<f32>,
}

impl LocalizationMap {
    /// Min-max normalizes `map`; a flat map becomes all ones.
    pub fn normalized(map: &AttnMap) -> Self {
        let (lo, hi) = map.range();
        let scores = if hi > lo {
            let span = (hi - lo) as f64;
            map.values.iter().map(|&v| ((v - lo) as f64 / span) as f32).collect()
        } else {
            vec![1.0; map.values.len()]
        };
        Self { height: map.height, width: map.width, scores }
    }

    pub fn as_attn_map(&self) -> AttnMap {
        AttnMap { height: self.height, width: self.width, values: self.scores.clone() }
    }
}

/// Aggregated, smoothed and normalized localization map for one step.
pub fn localization_map(
    records: &[AttentionRecord],
    spec: &RegionHoldSpec,
    height: usize,
    width: usize,
) -> Result<LocalizationMap> {
    let layers = spec.resolved_layers(records)?;
    let rows = spec.resolved_rows(records)?;
    let stacked = stack_layers(records, &layers, &rows, height, width)?;
    let smoothed = match &spec.smooth {
        Some(s) => s.apply(&stacked)?,
        None => stacked,
    };
    Ok(LocalizationMap::normalized(&smoothed))
}

/// Reverts every position with `score < threshold` to `original` and marks
/// it committed.
pub fn apply_region_hold(
    state: &SamplerState,
    map: &LocalizationMap,
    threshold: f64,
    original: &TokenGrid,
) -> Result<SamplerState> {
    let n = state.grid.len();
    if map.scores.len() != n || original.len() != n {
        return Err(Error::Shape(format!(
            "state has {n} positions, map {}, original {}",
            map.scores.len(),
            original.len()
        )));
    }
    let mut next = state.clone();
    for (p, &s) in map.scores.iter().enumerate() {
        if (s as f64) < threshold {
            next.grid[p] = original.tokens[p];
            next.committed[p] = true;
        }
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::MASK_TOKEN;

    fn record(layer: usize, text_len: usize, image_len: usize, fill: impl Fn(usize, usize) -> f32) -> AttentionRecord {
        let s = text_len + 2 * image_len;
        let weights = (0..s * s).map(|i| fill(i / s, i % s)).collect();
        AttentionRecord { layer, head: 0, text_len, image_len, weights }
    }

    fn state(original: &TokenGrid) -> SamplerState {
        let mut s = SamplerState::new(original, None, 0).unwrap();
        for p in 0..original.len() {
            if p % 2 == 0 {
                s.grid[p] = 7;
                s.committed[p] = true;
            }
        }
        s
    }

    #[test]
    fn default_layer_range() {
        assert_eq!(default_layers(8), 5..8);
        assert_eq!(default_layers(2), 1..2);
        assert_eq!(default_layers(3), 2..3);
    }

    #[test]
    fn uniform_attention_is_degenerate() {
        let rec = record(0, 2, 4, |_, _| 0.1);
        let spec = RegionHoldSpec::new(0.5).unwrap();
        let map = localization_map(&[rec], &spec, 2, 2).unwrap();
        assert_eq!(map.scores, vec![1.0; 4]);
    }

    #[test]
    fn dominant_key_scores_one() {
        let rec = record(0, 1, 4, |_, c| match c {
            3 => 0.6,
            1 => 0.0,
            _ => 0.1,
        });
        let spec = RegionHoldSpec { rows: Some(vec![0]), layers: Some(vec![0]), ..RegionHoldSpec::new(0.5).unwrap() };
        let map = localization_map(&[rec], &spec, 2, 2).unwrap();
        assert_eq!(map.scores[2], 1.0);
        assert_eq!(map.scores[0], 0.0);
    }

    #[test]
    fn lambda_zero_reverts_nothing() {
        let original = TokenGrid::filled(2, 3, 4);
        let s = state(&original);
        let map = LocalizationMap { height: 2, width: 3, scores: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0] };
        assert_eq!(apply_region_hold(&s, &map, 0.0, &original).unwrap(), s);
    }

    #[test]
    fn clamped_lambda_restores_original() {
        let original = TokenGrid::filled(2, 3, 4);
        let s = state(&original);
        let map = LocalizationMap { height: 2, width: 3, scores: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0] };
        let spec = RegionHoldSpec::new(1.0).unwrap();
        let out = apply_region_hold(&s, &map, spec.effective_threshold(), &original).unwrap();
        assert_eq!(out.grid, original.tokens);
        assert!(out.committed.iter().all(|&c| c));
    }

    #[test]
    fn degenerate_map_keeps_state() {
        let original = TokenGrid::filled(2, 3, 4);
        let s = state(&original);
        let map = LocalizationMap { height: 2, width: 3, scores: vec![1.0; 6] };
        for lambda in [0.0, 0.5, 1.0] {
            assert_eq!(apply_region_hold(&s, &map, lambda, &original).unwrap(), s);
        }
    }

    #[test]
    fn strict_threshold_and_idempotence() {
        let original = TokenGrid::filled(2, 3, 4);
        let s = state(&original);
        let map = LocalizationMap { height: 2, width: 3, scores: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0] };
        let once = apply_region_hold(&s, &map, 0.4, &original).unwrap();
        assert_eq!(&once.grid[..3], &[4, 4, 7]);
        assert_eq!(once.grid[3], MASK_TOKEN);
        assert_eq!(apply_region_hold(&once, &map, 0.4, &original).unwrap(), once);
    }

    #[test]
    fn spec_validation() {
        assert!(RegionHoldSpec::new(-0.1).is_err());
        assert!(RegionHoldSpec::new(1.1).is_err());
        let rec = record(0, 1, 4, |_, _| 0.1);
        let spec = RegionHoldSpec { layers: Some(vec![]), ..RegionHoldSpec::new(0.5).unwrap() };
        assert!(localization_map(&[rec], &spec, 2, 2).is_err());
    }
}
