use std::collections::BTreeMap;

use crate::error::{invalid, Error, Result};
use crate::text::Vocabulary;

/// Architecture of the toy multimodal transformer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Image vocabulary size `V`; the mask embedding is stored as row `V`.
    pub vocab_size: usize,
    pub text_vocab: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub max_text_len: usize,
    /// Number of learned timestep embeddings; row 0 is the clean image.
    pub time_buckets: usize,
    pub ffn_dim: usize,
    pub rope_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 8,
            n_heads: 4,
            vocab_size: 64,
            text_vocab: Vocabulary::instructions().len(),
            grid_h: 16,
            grid_w: 16,
            max_text_len: 8,
            time_buckets: 16,
            ffn_dim: 256,
            rope_base: 100.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("text_vocab", self.text_vocab),
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("max_text_len", self.max_text_len),
            ("time_buckets", self.time_buckets),
            ("ffn_dim", self.ffn_dim),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(invalid(format!("{name} must be at least 1")));
        }
        if self.n_layers < 2 {
            return Err(invalid("n_layers must be at least 2"));
        }
        if !self.d_model.is_multiple_of(2 * self.n_heads) {
            return Err(invalid(format!(
                "d_model {} must be divisible by 2 * n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.rope_base.is_nan() || self.rope_base <= 1.0 {
            return Err(invalid("rope_base must exceed 1"));
        }
        Ok(())
    }

    pub fn n_tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Flat `key=value` lines in sorted key order.
    pub fn to_kv(&self) -> String {
        let mut map = BTreeMap::new();
        map.insert("d_model", self.d_model.to_string());
        map.insert("n_layers", self.n_layers.to_string());
        map.insert("n_heads", self.n_heads.to_string());
        map.insert("vocab_size", self.vocab_size.to_string());
        map.insert("text_vocab", self.text_vocab.to_string());
        map.insert("grid_h", self.grid_h.to_string());
        map.insert("grid_w", self.grid_w.to_string());
        map.insert("max_text_len", self.max_text_len.to_string());
        map.insert("time_buckets", self.time_buckets.to_string());
        map.insert("ffn_dim", self.ffn_dim.to_string());
        map.insert("rope_base", format!("{:?}", self.rope_base));
        map.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| invalid(format!("config line without '=': {line:?}")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |key: &str| -> Result<&String> {
            map.get(key).ok_or_else(|| invalid(format!("config missing key {key}")))
        };
        let int = |key: &str| -> Result<usize> {
            get(key)?.parse().map_err(|_| invalid(format!("config key {key} is not an integer")))
        };
        let cfg = Self {
            d_model: int("d_model")?,
            n_layers: int("n_layers")?,
            n_heads: int("n_heads")?,
            vocab_size: int("vocab_size")?,
            text_vocab: int("text_vocab")?,
            grid_h: int("grid_h")?,
            grid_w: int("grid_w")?,
            max_text_len: int("max_text_len")?,
            time_buckets: int("time_buckets")?,
            ffn_dim: int("ffn_dim")?,
            rope_base: get("rope_base")?
                .parse()
                .map_err(|_| Error::InvalidArgument("config key rope_base is not a number".into()))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
