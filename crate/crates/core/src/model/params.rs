use crate::error::{Error, Result};
use crate::rng::CounterRng;

use super::config::ModelConfig;
use super::scalar::Scalar;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    fn normal(shape: &[usize], std: f64, rng: &CounterRng, stream: u64) -> Self {
        let mut s = rng.stream(stream);
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(|_| T::lit(s.normal() * std)).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.to_f64().unwrap_or(f64::NAN))).collect(),
        }
    }
}

/// Weights of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub ln_in_g: Tensor<T>,
    pub ln_in_b: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub ln_ctx_g: Tensor<T>,
    pub ln_ctx_b: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub ln_ffn_g: Tensor<T>,
    pub ln_ffn_b: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

macro_rules! layer_fields {
    ($m:ident) => {
        $m!(ln_in_g, ln_in_b, wq, wk, wv, ln_ctx_g, ln_ctx_b, wo, bo, ln_ffn_g, ln_ffn_b, w1, b1, w2, b2)
    };
}

/// All model weights. The same struct doubles as a gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub text_emb: Tensor<T>,
    /// `M x d` absolute word-order embedding added to the text stream, which
    /// has no rotary position of its own.
    pub text_pos: Tensor<T>,
    /// `(V + 1) x d`: image tokens plus the mask embedding in the last row.
    /// Shared by the iterate and condition streams.
    pub token_emb: Tensor<T>,
    pub time_emb: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub ln_out_g: Tensor<T>,
    pub ln_out_b: Tensor<T>,
    pub head_w: Tensor<T>,
    pub head_b: Tensor<T>,
}

impl<T: Scalar> Params<T> {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let d = cfg.d_model;
        let rng = CounterRng::new(seed).fork(0x1417);
        let mut stream = 0u64;
        let mut normal = |shape: &[usize], std: f64| {
            stream += 1;
            Tensor::normal(shape, std, &rng, stream)
        };
        let proj = (1.0 / d as f64).sqrt();
        let out_std = proj / (2.0 * cfg.n_layers as f64).sqrt();
        let text_emb = normal(&[cfg.text_vocab, d], 1.0);
        let token_emb = normal(&[cfg.vocab_size + 1, d], 1.0);
        let time_emb = normal(&[cfg.time_buckets, d], 0.1);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                ln_in_g: Tensor::filled(&[d], T::one()),
                ln_in_b: Tensor::zeros(&[d]),
                wq: normal(&[d, d], proj),
                wk: normal(&[d, d], proj),
                wv: normal(&[d, d], proj),
                ln_ctx_g: Tensor::filled(&[d], T::one()),
                ln_ctx_b: Tensor::zeros(&[d]),
                wo: normal(&[d, d], out_std),
                bo: Tensor::zeros(&[d]),
                ln_ffn_g: Tensor::filled(&[d], T::one()),
                ln_ffn_b: Tensor::zeros(&[d]),
                w1: normal(&[d, cfg.ffn_dim], proj),
                b1: Tensor::zeros(&[cfg.ffn_dim]),
                w2: normal(&[cfg.ffn_dim, d], (1.0 / cfg.ffn_dim as f64).sqrt() / (2.0 * cfg.n_layers as f64).sqrt()),
                b2: Tensor::zeros(&[d]),
            })
            .collect();
        Self {
            text_emb,
            token_emb,
            time_emb,
            layers,
            ln_out_g: Tensor::filled(&[d], T::one()),
            ln_out_b: Tensor::zeros(&[d]),
            head_w: normal(&[d, cfg.vocab_size], proj),
            head_b: Tensor::zeros(&[cfg.vocab_size]),
            text_pos: normal(&[cfg.max_text_len, d], 0.5),
        }
    }

    /// Expected shape of every named tensor for `cfg`.
    pub fn shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        Params::<T>::zeros(cfg).named().into_iter().map(|(n, t)| (n, t.shape.clone())).collect()
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        let mut p = Self::init(cfg, 0);
        p.visit_mut(|_, t| t.data.iter_mut().for_each(|v| *v = T::zero()));
        p
    }

    pub fn zeros_like(&self) -> Self {
        let mut p = self.clone();
        p.visit_mut(|_, t| t.data.iter_mut().for_each(|v| *v = T::zero()));
        p
    }

    /// Tensors paired with their canonical names.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("embed.text".to_string(), &self.text_emb),
            ("embed.text_pos".to_string(), &self.text_pos),
            ("embed.token".to_string(), &self.token_emb),
            ("embed.time".to_string(), &self.time_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            macro_rules! push {
                ($($f:ident),*) => { $( out.push((format!("layer.{i:03}.{}", stringify!($f)), &l.$f)); )* };
            }
            layer_fields!(push);
        }
        out.push(("out.ln_g".into(), &self.ln_out_g));
        out.push(("out.ln_b".into(), &self.ln_out_b));
        out.push(("out.head_w".into(), &self.head_w));
        out.push(("out.head_b".into(), &self.head_b));
        out
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor<T>)) {
        f("embed.text", &mut self.text_emb);
        f("embed.text_pos", &mut self.text_pos);
        f("embed.token", &mut self.token_emb);
        f("embed.time", &mut self.time_emb);
        for (i, l) in self.layers.iter_mut().enumerate() {
            macro_rules! visit {
                ($($field:ident),*) => { $( f(&format!("layer.{i:03}.{}", stringify!($field)), &mut l.$field); )* };
            }
            layer_fields!(visit);
        }
        f("out.ln_g", &mut self.ln_out_g);
        f("out.ln_b", &mut self.ln_out_b);
        f("out.head_w", &mut self.head_w);
        f("out.head_b", &mut self.head_b);
    }

    /// Visits matching tensors of `self` and `other` (same architecture).
    pub fn zip_mut(&mut self, other: &Params<T>, mut f: impl FnMut(&mut Tensor<T>, &Tensor<T>)) {
        let others: Vec<&Tensor<T>> = other.named().into_iter().map(|(_, t)| t).collect();
        let mut i = 0;
        self.visit_mut(|_, t| {
            f(t, others[i]);
            i += 1;
        });
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        let mut out = Params::<U> {
            text_emb: self.text_emb.cast(),
            text_pos: self.text_pos.cast(),
            token_emb: self.token_emb.cast(),
            time_emb: self.time_emb.cast(),
            layers: Vec::new(),
            ln_out_g: self.ln_out_g.cast(),
            ln_out_b: self.ln_out_b.cast(),
            head_w: self.head_w.cast(),
            head_b: self.head_b.cast(),
        };
        for l in &self.layers {
            macro_rules! cast {
                ($($f:ident),*) => { LayerParams { $( $f: l.$f.cast(), )* } };
            }
            out.layers.push(layer_fields!(cast));
        }
        out
    }

    /// Replaces every tensor from `(name, tensor)` pairs, checking shapes.
    pub fn load_named(&mut self, mut lookup: impl FnMut(&str) -> Option<Tensor<T>>) -> Result<()> {
        let mut err = None;
        self.visit_mut(|name, t| {
            if err.is_some() {
                return;
            }
            match lookup(name) {
                Some(src) if src.shape == t.shape => *t = src,
                Some(src) => {
                    err = Some(Error::Shape(format!(
                        "tensor {name}: expected shape {:?}, found {:?}",
                        t.shape, src.shape
                    )))
                }
                None => err = Some(Error::Shape(format!("missing tensor {name}"))),
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> std::result::Result<(), String> {
        match self.named().into_iter().find(|(_, t)| t.data.iter().any(|v| !v.is_finite())) {
            Some((name, _)) => Err(name),
            None => Ok(()),
        }
    }
}
