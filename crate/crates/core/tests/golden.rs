//! Regression anchor: logits of a fixed random model against values
//! recorded once by this implementation. Set `MGT_BLESS=1` to re-record.

use std::path::PathBuf;

use mgt_core::model::ModelConfig;
use mgt_core::{BiasSpec, Model, TokenStreams, MASK_TOKEN};

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden_logits.txt")
}

fn logits() -> Vec<f32> {
    let cfg = ModelConfig { d_model: 16, n_layers: 2, n_heads: 2, grid_h: 3, grid_w: 3, max_text_len: 4, ffn_dim: 32, ..ModelConfig::default() };
    let model = Model::<f32>::new(cfg, 2024).unwrap();
    let streams = TokenStreams {
        text: vec![1, 6, 4, 12],
        iterate: vec![MASK_TOKEN, 3, 48, MASK_TOKEN, 21, 21, MASK_TOKEN, 60, 15],
        condition: vec![21, 3, 48, 21, 21, 21, 12, 60, 15],
    };
    model.forward(&streams, &BiasSpec::new(0.5).unwrap()).unwrap().logits
}

#[test]
fn random_model_logits_match_golden_file() {
    let got = logits();
    let path = golden_path();
    if std::env::var_os("MGT_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        let text: String = got.iter().map(|v| format!("{v:.9e}\n")).collect();
        std::fs::write(&path, text).unwrap();
        return;
    }
    let want: Vec<f32> = std::fs::read_to_string(&path)
        .expect("golden file present")
        .lines()
        .map(|l| l.parse().unwrap())
        .collect();
    assert_eq!(got.len(), want.len());
    for (i, (g, w)) in got.iter().zip(&want).enumerate() {
        assert!((g - w).abs() <= 1e-5 * (1.0 + w.abs()), "logit {i}: {g} vs {w}");
    }
}
