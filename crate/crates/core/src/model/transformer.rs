//! Bidirectional multimodal transformer over `[text; iterate; condition]`.
//!
//! Each block: `x += Wo . LN(softmax(QK^T / sqrt(dh) + E) V) + bo` with
//! queries and keys taken from `LN(x)` and rotated by 2D RoPE, followed by
//! `x += FFN(LN(x))`. Text tokens sit at rotary position (0, 0); the iterate
//! and condition streams share grid positions, token embeddings and every
//! block weight, and differ only in their timestep embedding (the condition
//! is pinned to bucket 0).

use crate::error::{Error, Result};
use crate::tokenizer::MASK_TOKEN;

use super::bias::{build_bias, BiasSpec};
use super::config::ModelConfig;
use super::kernels::{
    add_row_bias, col_sums_into, gelu, gelu_grad, layer_norm, layer_norm_backward, softmax_backward_in_place,
    softmax_in_place, NormCache,
};
use super::params::{LayerParams, Params, Tensor};
use super::rope::RopeTable;
use super::scalar::{gemm_into, matmul, matmul_acc, Scalar, View};

/// The three token streams fed to the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStreams {
    /// Instruction tokens `C_T`.
    pub text: Vec<u32>,
    /// In-progress image `C_I`; may contain [`MASK_TOKEN`].
    pub iterate: Vec<u32>,
    /// Source image `C_V`.
    pub condition: Vec<u32>,
}

/// Which stream an embedding lookup serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Text,
    Iterate,
    Condition,
}

/// Post-softmax attention weights of one head in one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub layer: usize,
    pub head: usize,
    pub text_len: usize,
    pub image_len: usize,
    /// Row-major `(M + 2N)^2`, rows are queries.
    pub weights: Vec<f32>,
}

impl AttentionRecord {
    pub fn size(&self) -> usize {
        self.text_len + 2 * self.image_len
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let s = self.size();
        &self.weights[r * s..(r + 1) * s]
    }

    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.weights[r * self.size() + c]
    }

    /// First row/column index of the iterate block.
    pub fn iterate_offset(&self) -> usize {
        self.text_len
    }

    /// First row/column index of the condition block.
    pub fn condition_offset(&self) -> usize {
        self.text_len + self.image_len
    }
}

/// Result of an inference forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// `N x V` logits for the iterate positions.
    pub logits: Vec<T>,
    pub records: Vec<AttentionRecord>,
}

/// Timestep bucket for an iterate stream with `masked` of `total` positions
/// masked. Bucket 0 means "clean" and is reserved for unmasked inputs.
pub fn timestep_bucket(masked: usize, total: usize, buckets: usize) -> usize {
    if masked == 0 || buckets <= 1 || total == 0 {
        return 0;
    }
    let scaled = (masked as f64 / total as f64 * (buckets - 1) as f64).ceil() as usize;
    scaled.clamp(1, buckets - 1)
}

#[derive(Debug, Clone, Default)]
struct LayerCache<T> {
    ln_in: NormCache<T>,
    h: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    ln_ctx: NormCache<T>,
    c2: Vec<T>,
    ln_ffn: NormCache<T>,
    h2: Vec<T>,
    u: Vec<T>,
    a: Vec<T>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    streams: TokenStreams,
    iterate_bucket: usize,
    rope: RopeTable<T>,
    layers: Vec<LayerCache<T>>,
    ln_out: NormCache<T>,
    z: Vec<T>,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn text_len(&self) -> usize {
        self.streams.text.len()
    }

    pub fn image_len(&self) -> usize {
        self.streams.iterate.len()
    }

    /// Post-softmax attention of `layer`, `heads x S x S` row-major.
    pub fn attention(&self, layer: usize) -> &[T] {
        &self.layers[layer].probs
    }
}

/// The model: an architecture plus its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = f32> {
    pub config: ModelConfig,
    pub params: Params<T>,
}

struct Dims {
    d: usize,
    heads: usize,
    dh: usize,
    m: usize,
    n: usize,
    s: usize,
    ffn: usize,
}

impl<T: Scalar> Model<T> {
    /// Randomly initialized model, deterministic in `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config, seed);
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: Params<T>) -> Result<Self> {
        config.validate()?;
        for ((name, want), (_, have)) in Params::<T>::shapes(&config).iter().zip(params.named()) {
            if want != &have.shape {
                return Err(Error::Shape(format!("tensor {name}: expected {want:?}, found {:?}", have.shape)));
            }
        }
        if params.layers.len() != config.n_layers {
            return Err(Error::Shape("layer count does not match config".into()));
        }
        Ok(Self { config, params })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { config: self.config.clone(), params: self.params.cast() }
    }

    /// The embedding table a stream reads. Iterate and condition share one
    /// table, so both variants return the same storage.
    pub fn stream_embedding(&self, stream: Stream) -> &Tensor<T> {
        match stream {
            Stream::Text => &self.params.text_emb,
            Stream::Iterate | Stream::Condition => &self.params.token_emb,
        }
    }

    pub fn validate_streams(&self, streams: &TokenStreams) -> Result<()> {
        let cfg = &self.config;
        let n = cfg.n_tokens();
        if streams.text.len() > cfg.max_text_len {
            return Err(Error::TextTooLong { len: streams.text.len(), max: cfg.max_text_len });
        }
        if streams.iterate.len() != n || streams.condition.len() != n {
            return Err(Error::Shape(format!(
                "streams need {n} image tokens, got iterate {} / condition {}",
                streams.iterate.len(),
                streams.condition.len()
            )));
        }
        if let Some(&t) = streams.text.iter().find(|&&t| t as usize >= cfg.text_vocab) {
            return Err(Error::TokenOutOfVocabulary { token: t, vocab: cfg.text_vocab });
        }
        if let Some(&t) = streams.iterate.iter().find(|&&t| t != MASK_TOKEN && t as usize >= cfg.vocab_size) {
            return Err(Error::TokenOutOfVocabulary { token: t, vocab: cfg.vocab_size });
        }
        if let Some(&t) = streams.condition.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::TokenOutOfVocabulary { token: t, vocab: cfg.vocab_size });
        }
        Ok(())
    }

    fn dims(&self, text_len: usize) -> Dims {
        let c = &self.config;
        let n = c.n_tokens();
        Dims {
            d: c.d_model,
            heads: c.n_heads,
            dh: c.head_dim(),
            m: text_len,
            n,
            s: text_len + 2 * n,
            ffn: c.ffn_dim,
        }
    }

    fn positions(&self, text_len: usize, offset: (usize, usize)) -> Vec<(usize, usize)> {
        let (h, w) = (self.config.grid_h, self.config.grid_w);
        let (di, dj) = offset;
        let grid = (0..h).flat_map(|r| (0..w).map(move |c| (r + di, c + dj)));
        std::iter::repeat_n((di, dj), text_len).chain(grid.clone()).chain(grid).collect()
    }

    fn embed(&self, streams: &TokenStreams, bucket: usize) -> Vec<T> {
        let d = self.config.d_model;
        let p = &self.params;
        let mut x = Vec::with_capacity((streams.text.len() + 2 * streams.iterate.len()) * d);
        for (i, &t) in streams.text.iter().enumerate() {
            let e = &p.text_emb.data[t as usize * d..(t as usize + 1) * d];
            let pos = &p.text_pos.data[i * d..(i + 1) * d];
            x.extend(e.iter().zip(pos).map(|(&a, &b)| a + b));
        }
        let mask_row = self.config.vocab_size;
        for (tokens, b) in [(&streams.iterate, bucket), (&streams.condition, 0)] {
            let time = &p.time_emb.data[b * d..(b + 1) * d];
            for &t in tokens.iter() {
                let row = if t == MASK_TOKEN { mask_row } else { t as usize };
                let e = &p.token_emb.data[row * d..(row + 1) * d];
                x.extend(e.iter().zip(time).map(|(&a, &b)| a + b));
            }
        }
        x
    }

    /// Inference forward pass with attention capture.
    pub fn forward(&self, streams: &TokenStreams, bias: &BiasSpec) -> Result<ForwardOutput<T>> {
        let (logits, _, records) = self.run(streams, bias, false, true)?;
        Ok(ForwardOutput { logits, records })
    }

    /// Forward pass that keeps activations for [`Model::backward`].
    pub fn forward_train(&self, streams: &TokenStreams, bias: &BiasSpec) -> Result<(Vec<T>, ForwardCache<T>)> {
        let (logits, cache, _) = self.run(streams, bias, true, false)?;
        Ok((logits, cache.expect("cache requested")))
    }

    /// Forward pass with every rotary position (text included) shifted by
    /// `offset`. Only relative positions enter the attention logits, so the
    /// output must match [`Model::forward`].
    pub fn forward_shifted(
        &self,
        streams: &TokenStreams,
        bias: &BiasSpec,
        offset: (usize, usize),
    ) -> Result<ForwardOutput<T>> {
        let (logits, _, records) = self.run_at(streams, bias, false, true, offset)?;
        Ok(ForwardOutput { logits, records })
    }

    fn bucket(&self, streams: &TokenStreams) -> usize {
        let masked = streams.iterate.iter().filter(|&&t| t == MASK_TOKEN).count();
        timestep_bucket(masked, streams.iterate.len(), self.config.time_buckets)
    }

    fn bias_values(&self, dims: &Dims, bias: &BiasSpec) -> Result<Option<Vec<T>>> {
        if bias.gamma() == 1.0 {
            return Ok(None);
        }
        let b = build_bias(dims.m, dims.n, bias.gamma())?;
        Ok(Some(b.values.iter().map(|&v| T::lit(v)).collect()))
    }

    #[allow(clippy::type_complexity)]
    fn run(
        &self,
        streams: &TokenStreams,
        bias: &BiasSpec,
        keep: bool,
        capture: bool,
    ) -> Result<(Vec<T>, Option<ForwardCache<T>>, Vec<AttentionRecord>)> {
        self.run_at(streams, bias, keep, capture, (0, 0))
    }

    #[allow(clippy::type_complexity)]
    fn run_at(
        &self,
        streams: &TokenStreams,
        bias: &BiasSpec,
        keep: bool,
        capture: bool,
        offset: (usize, usize),
    ) -> Result<(Vec<T>, Option<ForwardCache<T>>, Vec<AttentionRecord>)> {
        self.validate_streams(streams)?;
        let dims = self.dims(streams.text.len());
        let bucket = self.bucket(streams);
        let mut x = self.embed(streams, bucket);
        let bias_values = self.bias_values(&dims, bias)?;
        let rope = RopeTable::new(dims.dh / 2, &self.positions(dims.m, offset), self.config.rope_base);
        let mut caches = Vec::new();
        let mut records = Vec::new();
        for (li, layer) in self.params.layers.iter().enumerate() {
            let (next, cache, recs) =
                block_forward(layer, li, &x, &dims, bias_values.as_deref(), &rope, keep, capture);
            x = next;
            caches.extend(cache);
            records.extend(recs);
        }
        let p = &self.params;
        let img = &x[dims.m * dims.d..(dims.m + dims.n) * dims.d];
        let (z, ln_out) = layer_norm(img, &p.ln_out_g.data, &p.ln_out_b.data, dims.d, keep);
        let v = self.config.vocab_size;
        let mut logits = matmul(View::dense(&z, dims.n, dims.d), View::dense(&p.head_w.data, dims.d, v));
        add_row_bias(&mut logits, &p.head_b.data);
        let cache = keep.then(|| ForwardCache {
            streams: streams.clone(),
            iterate_bucket: bucket,
            rope,
            layers: caches,
            ln_out,
            z,
        });
        Ok((logits, cache, records))
    }

    /// Accumulates parameter gradients of `sum(dlogits * logits)` into `grads`.
    pub fn backward(&self, cache: &ForwardCache<T>, dlogits: &[T], grads: &mut Params<T>) {
        self.backward_with_attention(cache, dlogits, &[], grads);
    }

    /// [`Model::backward`] plus extra loss gradients with respect to the
    /// post-softmax attention of some layers, given as
    /// `(layer, heads x S x S)` pairs.
    pub fn backward_with_attention(
        &self,
        cache: &ForwardCache<T>,
        dlogits: &[T],
        dattention: &[(usize, Vec<T>)],
        grads: &mut Params<T>,
    ) {
        let dims = self.dims(cache.streams.text.len());
        let (d, v) = (dims.d, self.config.vocab_size);
        let p = &self.params;

        matmul_acc(View::dense(&cache.z, dims.n, d).t(), View::dense(dlogits, dims.n, v), &mut grads.head_w.data);
        col_sums_into(dlogits, v, &mut grads.head_b.data);
        let dz = matmul(View::dense(dlogits, dims.n, v), View::dense(&p.head_w.data, d, v).t());
        let dimg = layer_norm_backward(
            &dz,
            &cache.ln_out,
            &p.ln_out_g.data,
            &mut grads.ln_out_g.data,
            &mut grads.ln_out_b.data,
            d,
        );
        let mut dx = vec![T::zero(); dims.s * d];
        dx[dims.m * d..(dims.m + dims.n) * d].copy_from_slice(&dimg);

        for (li, layer) in p.layers.iter().enumerate().rev() {
            let extra = dattention.iter().find(|(l, _)| *l == li).map(|(_, g)| g.as_slice());
            dx = block_backward(layer, &cache.layers[li], &mut grads.layers[li], dx, &dims, &cache.rope, extra);
        }

        // Embedding gradients; iterate and condition scatter into the same table.
        let s = &cache.streams;
        for (i, &t) in s.text.iter().enumerate() {
            add_into(&mut grads.text_emb.data[t as usize * d..(t as usize + 1) * d], &dx[i * d..(i + 1) * d]);
            add_into(&mut grads.text_pos.data[i * d..(i + 1) * d], &dx[i * d..(i + 1) * d]);
        }
        let mask_row = self.config.vocab_size;
        for (stream, offset, bucket) in
            [(&s.iterate, dims.m, cache.iterate_bucket), (&s.condition, dims.m + dims.n, 0)]
        {
            for (i, &t) in stream.iter().enumerate() {
                let row = if t == MASK_TOKEN { mask_row } else { t as usize };
                let g = &dx[(offset + i) * d..(offset + i + 1) * d];
                add_into(&mut grads.token_emb.data[row * d..(row + 1) * d], g);
                add_into(&mut grads.time_emb.data[bucket * d..(bucket + 1) * d], g);
            }
        }
    }
}

#[inline]
fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// Attention sub-block only: `x + Wo . LN(attn(LN(x))) + bo`, plus records.
/// Exposed for tests and tools that inspect a single layer.
pub fn attention_layer<T: Scalar>(
    x: &[T],
    text_len: usize,
    positions: &[(usize, usize)],
    bias: Option<&[T]>,
    layer: &LayerParams<T>,
    n_heads: usize,
    rope_base: f64,
) -> Result<(Vec<T>, Vec<AttentionRecord>)> {
    let d = layer.wq.shape[0];
    let s = positions.len();
    if x.len() != s * d || !(s - text_len).is_multiple_of(2) || !d.is_multiple_of(2 * n_heads) {
        return Err(Error::Shape("attention_layer input does not match positions".into()));
    }
    if let Some(b) = bias {
        if b.len() != s * s {
            return Err(Error::Shape("bias must be (M + 2N)^2".into()));
        }
    }
    let dims = Dims { d, heads: n_heads, dh: d / n_heads, m: text_len, n: (s - text_len) / 2, s, ffn: 0 };
    let rope = RopeTable::new(dims.dh / 2, positions, rope_base);
    let (out, _, records) = attention_forward(layer, 0, x, &dims, bias, &rope, false, true);
    Ok((out, records))
}

/// Plain scaled dot-product attention of one head, no projections:
/// returns `(softmax(q k^T / sqrt(dh) + bias) v, weights)`.
pub fn scaled_dot_attention<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    rows: usize,
    dh: usize,
    bias: Option<&[T]>,
) -> (Vec<T>, Vec<T>) {
    let mut w = matmul(View::dense(q, rows, dh), View::dense(k, rows, dh).t());
    let scale = T::one() / T::lit(dh as f64).sqrt();
    for (r, row) in w.chunks_exact_mut(rows).enumerate() {
        for (c, val) in row.iter_mut().enumerate() {
            *val = *val * scale + bias.map_or(T::zero(), |b| b[r * rows + c]);
        }
        softmax_in_place(row);
    }
    let out = matmul(View::dense(&w, rows, rows), View::dense(v, rows, dh));
    (out, w)
}

#[allow(clippy::too_many_arguments)]
fn attention_forward<T: Scalar>(
    layer: &LayerParams<T>,
    layer_index: usize,
    x: &[T],
    dims: &Dims,
    bias: Option<&[T]>,
    rope: &RopeTable<T>,
    keep: bool,
    capture: bool,
) -> (Vec<T>, LayerCache<T>, Vec<AttentionRecord>) {
    let Dims { d, heads, dh, s, .. } = *dims;
    let (h, ln_in) = layer_norm(x, &layer.ln_in_g.data, &layer.ln_in_b.data, d, keep);
    let hv = View::dense(&h, s, d);
    let mut q = matmul(hv, View::dense(&layer.wq.data, d, d));
    let mut k = matmul(hv, View::dense(&layer.wk.data, d, d));
    let v = matmul(hv, View::dense(&layer.wv.data, d, d));
    rope.rotate_rows(&mut q, d, false);
    rope.rotate_rows(&mut k, d, false);

    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut ctx = vec![T::zero(); s * d];
    let mut probs = if keep { vec![T::zero(); heads * s * s] } else { Vec::new() };
    let mut scratch = vec![T::zero(); s * s];
    let mut records = Vec::new();
    for head in 0..heads {
        let col0 = head * dh;
        let qh = View::cols(&q, s, d, col0, dh);
        let kh = View::cols(&k, s, d, col0, dh);
        gemm_into(qh, kh.t(), &mut scratch, 0, s, 1, T::zero());
        for (r, row) in scratch.chunks_exact_mut(s).enumerate() {
            match bias {
                Some(b) => {
                    for (val, &bv) in row.iter_mut().zip(&b[r * s..(r + 1) * s]) {
                        *val = *val * scale + bv;
                    }
                }
                None => row.iter_mut().for_each(|val| *val = *val * scale),
            }
            softmax_in_place(row);
        }
        gemm_into(View::dense(&scratch, s, s), View::cols(&v, s, d, col0, dh), &mut ctx, col0, d, 1, T::zero());
        if capture {
            records.push(AttentionRecord {
                layer: layer_index,
                head,
                text_len: dims.m,
                image_len: dims.n,
                weights: scratch.iter().map(|w| w.to_f32().unwrap_or(f32::NAN)).collect(),
            });
        }
        if keep {
            probs[head * s * s..(head + 1) * s * s].copy_from_slice(&scratch);
        }
    }

    let (c2, ln_ctx) = layer_norm(&ctx, &layer.ln_ctx_g.data, &layer.ln_ctx_b.data, d, keep);
    let mut out = matmul(View::dense(&c2, s, d), View::dense(&layer.wo.data, d, d));
    add_row_bias(&mut out, &layer.bo.data);
    for (o, &xi) in out.iter_mut().zip(x) {
        *o += xi;
    }
    let cache = if keep {
        LayerCache { ln_in, h, q, k, v, probs, ln_ctx, c2, ..Default::default() }
    } else {
        LayerCache::default()
    };
    (out, cache, records)
}

#[allow(clippy::too_many_arguments)]
fn block_forward<T: Scalar>(
    layer: &LayerParams<T>,
    layer_index: usize,
    x: &[T],
    dims: &Dims,
    bias: Option<&[T]>,
    rope: &RopeTable<T>,
    keep: bool,
    capture: bool,
) -> (Vec<T>, Option<LayerCache<T>>, Vec<AttentionRecord>) {
    let (mut x1, mut cache, records) = attention_forward(layer, layer_index, x, dims, bias, rope, keep, capture);
    let Dims { d, s, ffn, .. } = *dims;
    let (h2, ln_ffn) = layer_norm(&x1, &layer.ln_ffn_g.data, &layer.ln_ffn_b.data, d, keep);
    let mut u = matmul(View::dense(&h2, s, d), View::dense(&layer.w1.data, d, ffn));
    add_row_bias(&mut u, &layer.b1.data);
    let a: Vec<T> = u.iter().map(|&v| gelu(v)).collect();
    let mut f = matmul(View::dense(&a, s, ffn), View::dense(&layer.w2.data, ffn, d));
    add_row_bias(&mut f, &layer.b2.data);
    for (xi, &fi) in x1.iter_mut().zip(&f) {
        *xi += fi;
    }
    if keep {
        cache.ln_ffn = ln_ffn;
        cache.h2 = h2;
        cache.u = u;
        cache.a = a;
        (x1, Some(cache), records)
    } else {
        (x1, None, records)
    }
}

fn block_backward<T: Scalar>(
    layer: &LayerParams<T>,
    c: &LayerCache<T>,
    g: &mut LayerParams<T>,
    dx: Vec<T>,
    dims: &Dims,
    rope: &RopeTable<T>,
    dprobs: Option<&[T]>,
) -> Vec<T> {
    let Dims { d, heads, dh, s, ffn, .. } = *dims;

    // Feed-forward.
    col_sums_into(&dx, d, &mut g.b2.data);
    matmul_acc(View::dense(&c.a, s, ffn).t(), View::dense(&dx, s, d), &mut g.w2.data);
    let mut du = matmul(View::dense(&dx, s, d), View::dense(&layer.w2.data, ffn, d).t());
    for (gu, &u) in du.iter_mut().zip(&c.u) {
        *gu = *gu * gelu_grad(u);
    }
    col_sums_into(&du, ffn, &mut g.b1.data);
    matmul_acc(View::dense(&c.h2, s, d).t(), View::dense(&du, s, ffn), &mut g.w1.data);
    let dh2 = matmul(View::dense(&du, s, ffn), View::dense(&layer.w1.data, d, ffn).t());
    let dres = layer_norm_backward(&dh2, &c.ln_ffn, &layer.ln_ffn_g.data, &mut g.ln_ffn_g.data, &mut g.ln_ffn_b.data, d);
    let mut dx1 = dx;
    add_into(&mut dx1, &dres);

    // Attention output projection and context norm.
    col_sums_into(&dx1, d, &mut g.bo.data);
    matmul_acc(View::dense(&c.c2, s, d).t(), View::dense(&dx1, s, d), &mut g.wo.data);
    let dc2 = matmul(View::dense(&dx1, s, d), View::dense(&layer.wo.data, d, d).t());
    let dctx = layer_norm_backward(&dc2, &c.ln_ctx, &layer.ln_ctx_g.data, &mut g.ln_ctx_g.data, &mut g.ln_ctx_b.data, d);

    // Per-head attention.
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut dq = vec![T::zero(); s * d];
    let mut dk = vec![T::zero(); s * d];
    let mut dv = vec![T::zero(); s * d];
    let mut dp = vec![T::zero(); s * s];
    for head in 0..heads {
        let col0 = head * dh;
        let p = &c.probs[head * s * s..(head + 1) * s * s];
        let dctx_h = View::cols(&dctx, s, d, col0, dh);
        gemm_into(dctx_h, View::cols(&c.v, s, d, col0, dh).t(), &mut dp, 0, s, 1, T::zero());
        if let Some(extra) = dprobs {
            add_into(&mut dp, &extra[head * s * s..(head + 1) * s * s]);
        }
        gemm_into(View::dense(p, s, s).t(), dctx_h, &mut dv, col0, d, 1, T::zero());
        for (prow, grow) in p.chunks_exact(s).zip(dp.chunks_exact_mut(s)) {
            softmax_backward_in_place(prow, grow);
            grow.iter_mut().for_each(|v| *v = *v * scale);
        }
        gemm_into(View::dense(&dp, s, s), View::cols(&c.k, s, d, col0, dh), &mut dq, col0, d, 1, T::zero());
        gemm_into(View::dense(&dp, s, s).t(), View::cols(&c.q, s, d, col0, dh), &mut dk, col0, d, 1, T::zero());
    }
    rope.rotate_rows(&mut dq, d, true);
    rope.rotate_rows(&mut dk, d, true);

    let hv = View::dense(&c.h, s, d).t();
    matmul_acc(hv, View::dense(&dq, s, d), &mut g.wq.data);
    matmul_acc(hv, View::dense(&dk, s, d), &mut g.wk.data);
    matmul_acc(hv, View::dense(&dv, s, d), &mut g.wv.data);
    let mut dh_in = matmul(View::dense(&dq, s, d), View::dense(&layer.wq.data, d, d).t());
    matmul_acc(View::dense(&dk, s, d), View::dense(&layer.wk.data, d, d).t(), &mut dh_in);
    matmul_acc(View::dense(&dv, s, d), View::dense(&layer.wv.data, d, d).t(), &mut dh_in);
    let dres = layer_norm_backward(&dh_in, &c.ln_in, &layer.ln_in_g.data, &mut g.ln_in_g.data, &mut g.ln_in_b.data, d);
    add_into(&mut dx1, &dres);
    dx1
}
