//! Masked-token training for the editing objective.

mod synthetic;

pub use synthetic::{make_synthetic_task, quadrant_block, EditKind, EditSample, BACKGROUND_TOKENS};

use std::f64::consts::FRAC_PI_2;
use std::io::Write;

use crate::error::{invalid, Error, Result};
use crate::model::{BiasSpec, Model, Params, Scalar, TokenStreams};
use crate::parallel::map_indexed;
use crate::region_hold::default_layers;
use crate::rng::CounterRng;
use crate::tokenizer::MASK_TOKEN;

/// Inverse-CDF draw from the truncated arccos density
/// `p(r) = (2 / pi) (1 - r^2)^(-1/2)` on `[0, 1]`, whose CDF is
/// `(2 / pi) asin(r)`.
pub fn sample_mask_rate(u: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&u) {
        return Err(invalid(format!("uniform draw {u} outside [0, 1]")));
    }
    Ok((FRAC_PI_2 * u).sin())
}

/// Mean negative log-likelihood over masked positions, with its gradient
/// with respect to the logits (zero on unmasked rows).
pub fn masked_ce_loss<T: Scalar>(logits: &[T], targets: &[u32], mask: &[bool], vocab: usize) -> Result<(f64, Vec<T>)> {
    if logits.len() != targets.len() * vocab || mask.len() != targets.len() {
        return Err(Error::Shape("logits, targets and mask disagree".into()));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::NoMaskedTokens);
    }
    let inv = 1.0 / count as f64;
    let mut loss = 0.0;
    let mut grad = vec![T::zero(); logits.len()];
    for (i, (&t, _)) in targets.iter().zip(mask).enumerate().filter(|(_, (_, &m))| m) {
        if t as usize >= vocab {
            return Err(Error::TokenOutOfVocabulary { token: t, vocab });
        }
        let row = &logits[i * vocab..(i + 1) * vocab];
        let max = row.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.to_f64().unwrap_or(f64::NAN) - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        loss += sum.ln() - (row[t as usize].to_f64().unwrap_or(f64::NAN) - max);
        for (k, e) in exps.iter().enumerate() {
            let p = e / sum - if k == t as usize { 1.0 } else { 0.0 };
            grad[i * vocab + k] = T::lit(p * inv);
        }
    }
    Ok((loss * inv, grad))
}

/// Localization penalty on instruction-to-image attention.
///
/// `S[p]` is the mean over the given layers, all heads and all instruction
/// rows of the attention on iterate position `p`; with `q = S / sum(S)` the
/// loss is `-mean_{p in region} log q[p]`, the cross-entropy of the uniform
/// distribution over the edited region against `q`, minus its entropy
/// `ln |region|` so a perfectly spread map scores 0. Returns the loss and
/// its gradient with respect to each layer's attention, or `None` when the
/// region or the instruction is empty.
pub fn localization_loss<T: Scalar>(
    attention: &[&[T]],
    heads: usize,
    text_len: usize,
    image_len: usize,
    region: &[bool],
) -> Option<(f64, Vec<Vec<T>>)> {
    let count = region.iter().filter(|&&r| r).count();
    if count == 0 || text_len == 0 || attention.is_empty() {
        return None;
    }
    let s = text_len + 2 * image_len;
    let k = (attention.len() * heads * text_len) as f64;
    let mut score = vec![0.0f64; image_len];
    for probs in attention {
        for h in 0..heads {
            for m in 0..text_len {
                let row = &probs[h * s * s + m * s + text_len..h * s * s + m * s + text_len + image_len];
                for (a, v) in score.iter_mut().zip(row) {
                    *a += v.to_f64().unwrap_or(f64::NAN);
                }
            }
        }
    }
    score.iter_mut().for_each(|a| *a /= k);
    let total: f64 = score.iter().sum();
    let inv = 1.0 / count as f64;
    let loss = total.ln() - (count as f64).ln() - inv * region.iter().zip(&score).filter(|(&r, _)| r).map(|(_, a)| a.ln()).sum::<f64>();
    let dscore: Vec<T> = region
        .iter()
        .zip(&score)
        .map(|(&r, &a)| T::lit(((1.0 / total) - if r { inv / a } else { 0.0 }) / k))
        .collect();
    let mut grad = vec![T::zero(); heads * s * s];
    for h in 0..heads {
        for m in 0..text_len {
            let at = h * s * s + m * s + text_len;
            grad[at..at + image_len].copy_from_slice(&dscore);
        }
    }
    Some((loss, vec![grad; attention.len()]))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    /// Plain gradient descent.
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Learning-rate multiplier over the run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Linear warmup over `warmup` steps, then cosine decay to
    /// `floor * lr` at the last step.
    Cosine { warmup: usize, floor: f64 },
}

impl LrSchedule {
    /// Multiplier for 0-based `step` of a `total`-step run.
    pub fn factor(&self, step: usize, total: usize) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine { warmup, floor } => {
                if step < warmup {
                    return (step + 1) as f64 / warmup as f64;
                }
                let span = total.saturating_sub(warmup).max(1);
                let progress = ((step - warmup) as f64 / span as f64).min(1.0);
                floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub gamma_train: f64,
    pub optimizer: Optimizer,
    pub lr_schedule: LrSchedule,
    /// Weight of [`localization_loss`]; 0 trains on masked cross-entropy only.
    pub localization_weight: f64,
    /// Layers the localization penalty reads; `None` is the last third.
    pub localization_layers: Option<Vec<usize>>,
    /// Share of examples whose mask is exactly the edit region, the state a
    /// region-held decode reaches once everything outside is reverted.
    pub region_mask_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 4,
            lr: 1e-2,
            seed: 0,
            gamma_train: 1.0,
            optimizer: Optimizer::Sgd,
            lr_schedule: LrSchedule::Constant,
            localization_weight: 0.0,
            localization_layers: None,
            region_mask_fraction: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(invalid("steps must be at least 1"));
        }
        if self.batch == 0 {
            return Err(invalid("batch must be at least 1"));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(invalid("lr must be finite and non-negative"));
        }
        if !self.localization_weight.is_finite() || self.localization_weight < 0.0 {
            return Err(invalid("localization weight must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.region_mask_fraction) {
            return Err(invalid("region mask fraction must lie in [0, 1]"));
        }
        if let LrSchedule::Cosine { floor, .. } = self.lr_schedule {
            if !(0.0..=1.0).contains(&floor) {
                return Err(invalid("lr floor must lie in [0, 1]"));
            }
        }
        if self.localization_layers.as_ref().is_some_and(|l| l.is_empty()) {
            return Err(invalid("empty localization layer set"));
        }
        BiasSpec::new(self.gamma_train)?;
        Ok(())
    }
}

/// The masked streams of one training example.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedExample {
    pub streams: TokenStreams,
    pub targets: Vec<u32>,
    pub mask: Vec<bool>,
}

/// Masks `max(1, ceil(r * N))` target positions chosen uniformly without
/// replacement, `r` drawn from the arccos law. Purely a function of
/// `(seed, step, slot)`.
pub fn mask_example(sample: &EditSample, seed: u64, step: u64, slot: usize) -> Result<MaskedExample> {
    let n = sample.target.len();
    let rng = CounterRng::new(seed).fork(step);
    let rate = sample_mask_rate(rng.closed01(slot as u64, 0, 0))?;
    let count = ((rate * n as f64).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    rng.fork(1 + slot as u64).stream(0).shuffle(&mut order);
    let mut mask = vec![false; n];
    order[..count].iter().for_each(|&p| mask[p] = true);
    let iterate = sample.target.tokens.iter().zip(&mask).map(|(&t, &m)| if m { MASK_TOKEN } else { t }).collect();
    Ok(MaskedExample {
        streams: TokenStreams {
            text: sample.instruction.clone(),
            iterate,
            condition: sample.source.tokens.clone(),
        },
        targets: sample.target.tokens.clone(),
        mask,
    })
}

/// Masks exactly the positions where source and target differ. Falls back
/// to [`mask_example`] when they are equal.
pub fn mask_edit_region(sample: &EditSample, seed: u64, step: u64, slot: usize) -> Result<MaskedExample> {
    let mask = sample.edit_region();
    if !mask.contains(&true) {
        return mask_example(sample, seed, step, slot);
    }
    let iterate = sample.target.tokens.iter().zip(&mask).map(|(&t, &m)| if m { MASK_TOKEN } else { t }).collect();
    Ok(MaskedExample {
        streams: TokenStreams {
            text: sample.instruction.clone(),
            iterate,
            condition: sample.source.tokens.clone(),
        },
        targets: sample.target.tokens.clone(),
        mask,
    })
}

#[derive(Debug, Clone)]
struct AdamState {
    m: Params<f32>,
    v: Params<f32>,
    t: i32,
}

/// Owns a model during training.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model<f32>,
    pub config: TrainConfig,
    step: u64,
    adam: Option<AdamState>,
}

impl Trainer {
    pub fn new(model: Model<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let n_layers = model.config.n_layers;
        if let Some(&l) = config.localization_layers.iter().flatten().find(|&&l| l >= n_layers) {
            return Err(invalid(format!("localization layer {l} out of range for {n_layers} layers")));
        }
        Ok(Self { model, config, step: 0, adam: None })
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    /// Batch-mean loss and gradient at the current weights.
    pub fn loss_and_grad(&self, batch: &[EditSample]) -> Result<(f64, Params<f32>)> {
        if batch.is_empty() {
            return Err(invalid("empty batch"));
        }
        let bias = BiasSpec::new(self.config.gamma_train)?;
        let vocab = self.model.config.vocab_size;
        let scale = 1.0 / batch.len() as f32;
        let weight = self.config.localization_weight;
        let loc_layers: Vec<usize> = match &self.config.localization_layers {
            Some(l) => l.clone(),
            None => default_layers(self.model.config.n_layers).collect(),
        };
        let per_sample = map_indexed(batch.len(), |j| -> Result<(f64, Params<f32>)> {
            let sample = &batch[j];
            let draw = CounterRng::new(self.config.seed).fork(self.step).closed01(j as u64, 1, 0);
            let ex = if draw < self.config.region_mask_fraction {
                mask_edit_region(sample, self.config.seed, self.step, j)?
            } else {
                mask_example(sample, self.config.seed, self.step, j)?
            };
            let (logits, cache) = self.model.forward_train(&ex.streams, &bias)?;
            let (mut loss, mut dlogits) = masked_ce_loss(&logits, &ex.targets, &ex.mask, vocab)?;
            dlogits.iter_mut().for_each(|g| *g *= scale);
            let mut dattention = Vec::new();
            if weight > 0.0 {
                let attention: Vec<&[f32]> = loc_layers.iter().map(|&l| cache.attention(l)).collect();
                let region = sample.edit_region();
                let heads = self.model.config.n_heads;
                if let Some((aux, grads)) =
                    localization_loss(&attention, heads, cache.text_len(), cache.image_len(), &region)
                {
                    loss += weight * aux;
                    let w = weight as f32 * scale;
                    for (&l, mut g) in loc_layers.iter().zip(grads) {
                        g.iter_mut().for_each(|v| *v *= w);
                        dattention.push((l, g));
                    }
                }
            }
            let mut grads = self.model.params.zeros_like();
            self.model.backward_with_attention(&cache, &dlogits, &dattention, &mut grads);
            Ok((loss, grads))
        });
        let mut total = 0.0;
        let mut acc: Option<Params<f32>> = None;
        for r in per_sample {
            let (loss, g) = r?;
            total += loss;
            match acc.as_mut() {
                None => acc = Some(g),
                Some(a) => a.zip_mut(&g, |x, y| x.data.iter_mut().zip(&y.data).for_each(|(p, q)| *p += q)),
            }
        }
        Ok((total / batch.len() as f64, acc.expect("non-empty batch")))
    }

    /// One update on `batch`; returns the pre-update batch loss.
    pub fn train_step(&mut self, batch: &[EditSample]) -> Result<f64> {
        let (loss, grads) = self.loss_and_grad(batch)?;
        if !loss.is_finite() {
            return Err(invalid(format!("non-finite loss at step {}", self.step)));
        }
        self.apply(&grads);
        self.step += 1;
        Ok(loss)
    }

    fn apply(&mut self, grads: &Params<f32>) {
        let lr = self.config.lr * self.config.lr_schedule.factor(self.step as usize, self.config.steps);
        if lr == 0.0 {
            return;
        }
        match self.config.optimizer {
            Optimizer::Sgd => {
                let lr = lr as f32;
                self.model.params.zip_mut(grads, |w, g| {
                    w.data.iter_mut().zip(&g.data).for_each(|(p, q)| *p -= lr * q);
                });
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let state = self.adam.get_or_insert_with(|| AdamState {
                    m: grads.zeros_like(),
                    v: grads.zeros_like(),
                    t: 0,
                });
                state.t += 1;
                let (b1, b2) = (beta1 as f32, beta2 as f32);
                let c1 = 1.0 - b1.powi(state.t);
                let c2 = 1.0 - b2.powi(state.t);
                let (lr, eps) = (lr as f32, eps as f32);
                state.m.zip_mut(grads, |m, g| m.data.iter_mut().zip(&g.data).for_each(|(a, &b)| *a = b1 * *a + (1.0 - b1) * b));
                state.v.zip_mut(grads, |v, g| {
                    v.data.iter_mut().zip(&g.data).for_each(|(a, &b)| *a = b2 * *a + (1.0 - b2) * b * b)
                });
                let (m, v) = (&state.m, &state.v);
                let mv: Vec<(&[f32], &[f32])> =
                    m.named().into_iter().zip(v.named()).map(|((_, a), (_, b))| (&a.data[..], &b.data[..])).collect();
                let mut i = 0;
                self.model.params.visit_mut(|_, w| {
                    let (mt, vt) = mv[i];
                    for ((p, &a), &b) in w.data.iter_mut().zip(mt).zip(vt) {
                        *p -= lr * (a / c1) / ((b / c2).sqrt() + eps);
                    }
                    i += 1;
                });
            }
        }
    }

    /// Runs `config.steps` updates, drawing each batch uniformly from
    /// `data`, and writes one `step=<i> loss=<f>` line per step to `log`.
    pub fn fit(&mut self, data: &[EditSample], mut log: impl Write) -> Result<Vec<f64>> {
        if data.is_empty() {
            return Err(invalid("empty training set"));
        }
        let picker = CounterRng::new(self.config.seed).fork(0xDA7A);
        let mut losses = Vec::with_capacity(self.config.steps);
        for _ in 0..self.config.steps {
            let step = self.step;
            let batch: Vec<EditSample> = (0..self.config.batch)
                .map(|j| data[picker.below(data.len() as u64, step, j as u32, 0) as usize].clone())
                .collect();
            let loss = self.train_step(&batch)?;
            writeln!(log, "step={step} loss={loss:.6}")?;
            losses.push(loss);
        }
        Ok(losses)
    }
}
