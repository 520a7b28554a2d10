//! Shared fixtures for the benchmarks.

use mgt_core::consolidation::AttnMap;
use mgt_core::model::ModelConfig;
use mgt_core::rng::CounterRng;
use mgt_core::trainer::{make_synthetic_task, EditSample};
use mgt_core::Model;

/// Random `side x side` map with values in `[0, 1]`.
pub fn random_map(side: usize, seed: u64) -> AttnMap {
    let mut s = CounterRng::new(seed).stream(0);
    AttnMap::new(side, side, (0..side * side).map(|_| s.closed01() as f32).collect()).expect("valid map")
}

/// Default-sized untrained model with one synthetic sample to edit.
pub fn model_and_sample(grid: usize) -> (Model<f32>, EditSample) {
    let cfg = ModelConfig { grid_h: grid, grid_w: grid, ..ModelConfig::default() };
    let model = Model::new(cfg, 1).expect("valid config");
    let sample = make_synthetic_task(2, 1, grid, grid).expect("valid task").remove(0);
    (model, sample)
}
