//! Per-language transformer encoder and decoder stacks.
//!
//! A [`LanguageModule`] owns one embedding table shared by its encoder and
//! decoder. Parameter containers are generic over the leaf type so the same
//! structure holds owned [`Tensor`]s, tape handles ([`Var`]) while a forward
//! pass is recorded, gradients, or optimizer moments.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const NUM_RESERVED: usize = 4;

const MASKED: f64 = -1e9;
const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_blocks: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Upper bound on each language's vocabulary, reserved ids included.
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { num_blocks: 2, num_heads: 2, d_model: 32, d_ff: 128, vocab_size: 512, max_len: 50, dropout: 0.0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_blocks == 0 || self.num_heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return fail("num_blocks, num_heads, d_model and d_ff must be positive".into());
        }
        if self.d_model % self.num_heads != 0 {
            return fail(format!("d_model {} not divisible by num_heads {}", self.d_model, self.num_heads));
        }
        if self.d_model % 2 != 0 {
            return fail(format!("d_model {} must be even for sinusoidal positions", self.d_model));
        }
        if self.vocab_size <= NUM_RESERVED {
            return fail(format!("vocab_size {} leaves no room beyond the reserved ids", self.vocab_size));
        }
        if self.max_len == 0 {
            return fail("max_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Sinusoidal position table `[max_len, d_model]`.
pub fn positional_encoding(max_len: usize, d_model: usize) -> Result<Tensor> {
    if d_model == 0 || d_model % 2 != 0 {
        return Err(Error::Config(format!("positional encoding needs an even d_model, got {d_model}")));
    }
    if max_len == 0 {
        return Err(Error::Config("positional encoding needs max_len >= 1".into()));
    }
    let mut data = vec![0.0; max_len * d_model];
    for pos in 0..max_len {
        for i in (0..d_model).step_by(2) {
            let angle = pos as f64 / 10000f64.powf(i as f64 / d_model as f64);
            data[pos * d_model + i] = angle.sin();
            data[pos * d_model + i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![max_len, d_model], data)
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Structural visitor over named parameters.
pub trait Params<P> {
    type Mapped<Q>;

    fn map_named<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Self::Mapped<Q>;

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P));

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &P)) {
        self.map_named(prefix, &mut |n, p| f(n, p));
    }
}

macro_rules! param_struct {
    ($name:ident { $($field:ident),* $(,)? } $(, seq: $seq:ident)?) => {
        impl<P> Params<P> for $name<P> {
            type Mapped<Q> = $name<Q>;

            fn map_named<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> $name<Q> {
                $name { $($field: self.$field.map_named(&join(prefix, stringify!($field)), f)),* }
            }

            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
                $(self.$field.visit_mut(&join(prefix, stringify!($field)), f);)*
            }
        }
    };
}

/// A single named parameter leaf.
#[derive(Clone, Debug, PartialEq)]
pub struct Leaf<P>(pub P);

impl<P> Params<P> for Leaf<P> {
    type Mapped<Q> = Leaf<Q>;

    fn map_named<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Leaf<Q> {
        Leaf(f(prefix, &self.0))
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        f(prefix, &mut self.0)
    }
}

impl<P, T: Params<P>> Params<P> for Vec<T> {
    type Mapped<Q> = Vec<T::Mapped<Q>>;

    fn map_named<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Self::Mapped<Q> {
        self.iter().enumerate().map(|(i, t)| t.map_named(&join(prefix, &i.to_string()), f)).collect()
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        for (i, t) in self.iter_mut().enumerate() {
            t.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<P> {
    pub weight: Leaf<P>,
    pub bias: Leaf<P>,
}
param_struct!(Linear { weight, bias });

#[derive(Clone, Debug, PartialEq)]
pub struct Norm<P> {
    pub gain: Leaf<P>,
    pub bias: Leaf<P>,
}
param_struct!(Norm { gain, bias });

#[derive(Clone, Debug, PartialEq)]
pub struct Attention<P> {
    pub query: Linear<P>,
    pub key: Linear<P>,
    pub value: Linear<P>,
    pub out: Linear<P>,
}
param_struct!(Attention { query, key, value, out });

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward<P> {
    pub up: Linear<P>,
    pub down: Linear<P>,
}
param_struct!(FeedForward { up, down });

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock<P> {
    pub attn_norm: Norm<P>,
    pub attn: Attention<P>,
    pub ff_norm: Norm<P>,
    pub ff: FeedForward<P>,
}
param_struct!(EncoderBlock { attn_norm, attn, ff_norm, ff });

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderBlock<P> {
    pub self_norm: Norm<P>,
    pub self_attn: Attention<P>,
    pub cross_norm: Norm<P>,
    pub cross_attn: Attention<P>,
    pub ff_norm: Norm<P>,
    pub ff: FeedForward<P>,
}
param_struct!(DecoderBlock { self_norm, self_attn, cross_norm, cross_attn, ff_norm, ff });

/// One language's parameters: embeddings, encoder stack and decoder stack.
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageModule<P = Tensor> {
    pub language: String,
    pub embeddings: Leaf<P>,
    pub encoder: Vec<EncoderBlock<P>>,
    pub encoder_norm: Norm<P>,
    pub decoder: Vec<DecoderBlock<P>>,
    pub decoder_norm: Norm<P>,
    pub output_projection: Leaf<P>,
}

impl<P> Params<P> for LanguageModule<P> {
    type Mapped<Q> = LanguageModule<Q>;

    fn map_named<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> LanguageModule<Q> {
        LanguageModule {
            language: self.language.clone(),
            embeddings: self.embeddings.map_named(&join(prefix, "embeddings"), f),
            encoder: self.encoder.map_named(&join(prefix, "encoder"), f),
            encoder_norm: self.encoder_norm.map_named(&join(prefix, "encoder_norm"), f),
            decoder: self.decoder.map_named(&join(prefix, "decoder"), f),
            decoder_norm: self.decoder_norm.map_named(&join(prefix, "decoder_norm"), f),
            output_projection: self.output_projection.map_named(&join(prefix, "output_projection"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
        self.embeddings.visit_mut(&join(prefix, "embeddings"), f);
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.encoder_norm.visit_mut(&join(prefix, "encoder_norm"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
        self.decoder_norm.visit_mut(&join(prefix, "decoder_norm"), f);
        self.output_projection.visit_mut(&join(prefix, "output_projection"), f);
    }
}

struct Init<'a, R> {
    rng: &'a mut R,
}

impl<R: Rng> Init<'_, R> {
    fn linear(&mut self, fan_in: usize, fan_out: usize) -> Linear<Tensor> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Linear {
            weight: Leaf(Tensor::uniform(&[fan_in, fan_out], bound, self.rng)),
            bias: Leaf(Tensor::zeros(&[fan_out])),
        }
    }

    fn norm(&mut self, d: usize) -> Norm<Tensor> {
        Norm { gain: Leaf(Tensor::ones(&[d])), bias: Leaf(Tensor::zeros(&[d])) }
    }

    fn attention(&mut self, d: usize) -> Attention<Tensor> {
        Attention { query: self.linear(d, d), key: self.linear(d, d), value: self.linear(d, d), out: self.linear(d, d) }
    }

    fn ff(&mut self, d: usize, d_ff: usize) -> FeedForward<Tensor> {
        FeedForward { up: self.linear(d, d_ff), down: self.linear(d_ff, d) }
    }
}

impl LanguageModule<Tensor> {
    /// Randomly initialized module for a vocabulary of `vocab_len` ids.
    pub fn new(language: &str, vocab_len: usize, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        if vocab_len <= NUM_RESERVED || vocab_len > cfg.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary of {vocab_len} ids for '{language}' outside ({NUM_RESERVED}, {}]",
                cfg.vocab_size
            )));
        }
        let d = cfg.d_model;
        let mut init = Init { rng };
        let embeddings = Leaf(Tensor::randn(&[vocab_len, d], 1.0 / (d as f64).sqrt(), init.rng));
        let encoder = (0..cfg.num_blocks)
            .map(|_| EncoderBlock {
                attn_norm: init.norm(d),
                attn: init.attention(d),
                ff_norm: init.norm(d),
                ff: init.ff(d, cfg.d_ff),
            })
            .collect();
        let decoder = (0..cfg.num_blocks)
            .map(|_| DecoderBlock {
                self_norm: init.norm(d),
                self_attn: init.attention(d),
                cross_norm: init.norm(d),
                cross_attn: init.attention(d),
                ff_norm: init.norm(d),
                ff: init.ff(d, cfg.d_ff),
            })
            .collect();
        let encoder_norm = init.norm(d);
        let decoder_norm = init.norm(d);
        let bound = (6.0 / (d + vocab_len) as f64).sqrt();
        let output_projection = Leaf(Tensor::uniform(&[d, vocab_len], bound, init.rng));
        Ok(LanguageModule {
            language: language.to_string(),
            embeddings,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
            output_projection,
        })
    }

    pub fn vocab_len(&self) -> usize {
        self.embeddings.0.shape()[0]
    }

    pub fn d_model(&self) -> usize {
        self.embeddings.0.shape()[1]
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    /// Records every parameter on `tape`, as trainable leaves or as
    /// constants, returning the bound module and the `(name, var)` list.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> (LanguageModule<Var>, Vec<(String, Var)>) {
        let mut bound = Vec::new();
        let m = self.map_named(&self.language, &mut |name, t| {
            let v = if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) };
            bound.push((name.to_string(), v));
            v
        });
        (m, bound)
    }
}

/// Right-padded batch of token sequences, row-major `[rows, len]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    ids: Vec<usize>,
    rows: usize,
    len: usize,
}

impl TokenBatch {
    pub fn from_sequences<S: AsRef<[TokenId]>>(seqs: &[S]) -> Result<Self> {
        let rows = seqs.len();
        let len = seqs.iter().map(|s| s.as_ref().len()).max().unwrap_or(0);
        if rows == 0 || len == 0 {
            return Err(Error::Degenerate("token batch needs at least one non-empty sequence".into()));
        }
        let mut ids = vec![PAD as usize; rows * len];
        for (r, s) in seqs.iter().enumerate() {
            let s = s.as_ref();
            if s.is_empty() {
                return Err(Error::Degenerate(format!("sequence {r} is empty")));
            }
            for (t, &id) in s.iter().enumerate() {
                ids[r * len + t] = id as usize;
            }
        }
        Ok(TokenBatch { ids, rows, len })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// `true` at non-pad positions.
    pub fn keep_mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&id| id != PAD as usize).collect()
    }
}

/// Decoder inputs (`BOS` + sequence without its last token) and targets.
pub fn teacher_forcing_pair<S: AsRef<[TokenId]>>(seqs: &[S]) -> Result<(TokenBatch, TokenBatch)> {
    let inputs: Vec<Vec<TokenId>> = seqs
        .iter()
        .map(|s| {
            let s = s.as_ref();
            std::iter::once(BOS).chain(s[..s.len().saturating_sub(1)].iter().copied()).collect()
        })
        .collect();
    Ok((TokenBatch::from_sequences(&inputs)?, TokenBatch::from_sequences(seqs)?))
}

/// Source of dropout masks for a training forward pass. Inference uses
/// [`Dropout::off`].
pub struct Dropout<'a> {
    p: f64,
    rng: Option<&'a mut dyn rand::RngCore>,
}

impl<'a> Dropout<'a> {
    pub fn off() -> Self {
        Dropout { p: 0.0, rng: None }
    }

    pub fn train(p: f64, rng: &'a mut dyn rand::RngCore) -> Self {
        Dropout { p, rng: Some(rng) }
    }

    fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_deref_mut() else { return Ok(x) };
        if self.p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - self.p);
        let shape = tape.shape(x).to_vec();
        let n = shape.iter().product();
        let mask: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < self.p { 0.0 } else { keep }).collect();
        let m = tape.constant(Tensor::new(shape, mask)?);
        tape.mul(x, m)
    }
}

fn linear(tape: &mut Tape, p: &Linear<Var>, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let fan_in = *shape.last().ok_or_else(|| Error::Shape("linear on scalar".into()))?;
    let rows = shape.iter().product::<usize>() / fan_in;
    let flat = tape.reshape(x, &[rows, fan_in])?;
    let y = tape.matmul(flat, p.weight.0)?;
    let y = tape.add_broadcast(y, p.bias.0)?;
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = tape.shape(y)[1];
    tape.reshape(y, &out_shape)
}

fn norm(tape: &mut Tape, p: &Norm<Var>, x: Var) -> Result<Var> {
    tape.layer_norm(x, p.gain.0, p.bias.0, NORM_EPS)
}

fn feed_forward(tape: &mut Tape, p: &FeedForward<Var>, x: Var, dropout: &mut Dropout) -> Result<Var> {
    let h = linear(tape, &p.up, x)?;
    let h = tape.relu(h);
    let h = dropout.apply(tape, h)?;
    linear(tape, &p.down, h)
}

/// Additive attention mask `[B, H, Tq, Tk]`: 0 where `allowed`, a large
/// negative number elsewhere.
fn attention_mask(
    rows: usize,
    heads: usize,
    tq: usize,
    tk: usize,
    allowed: impl Fn(usize, usize, usize) -> bool,
) -> Tensor {
    let mut data = Vec::with_capacity(rows * heads * tq * tk);
    for b in 0..rows {
        for _ in 0..heads {
            for q in 0..tq {
                for k in 0..tk {
                    data.push(if allowed(b, q, k) { 0.0 } else { MASKED });
                }
            }
        }
    }
    Tensor::from_parts(vec![rows, heads, tq, tk], data)
}

/// Multi-head attention of `query [B, Tq, D]` over `memory [B, Tk, D]`.
/// Returns the output and the attention weights `[B, H, Tq, Tk]`.
fn attention(
    tape: &mut Tape,
    p: &Attention<Var>,
    heads: usize,
    query: Var,
    memory: Var,
    mask: Tensor,
) -> Result<(Var, Var)> {
    let (b, tq, d) = dims3(tape, query)?;
    let tk = tape.shape(memory)[1];
    let dh = d / heads;
    let q = linear(tape, &p.query, query)?;
    let k = linear(tape, &p.key, memory)?;
    let v = linear(tape, &p.value, memory)?;
    let q = tape.reshape(q, &[b, tq, heads, dh])?;
    let q = tape.permute(q, &[0, 2, 1, 3])?;
    let k = tape.reshape(k, &[b, tk, heads, dh])?;
    let kt = tape.permute(k, &[0, 2, 3, 1])?;
    let v = tape.reshape(v, &[b, tk, heads, dh])?;
    let v = tape.permute(v, &[0, 2, 1, 3])?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let mask = tape.constant(mask);
    let scores = tape.add(scores, mask)?;
    let weights = tape.softmax(scores, 3)?;
    let ctx = tape.matmul(weights, v)?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[b, tq, d])?;
    Ok((linear(tape, &p.out, ctx)?, weights))
}

fn dims3(tape: &Tape, x: Var) -> Result<(usize, usize, usize)> {
    match *tape.shape(x) {
        [b, t, d] => Ok((b, t, d)),
        ref s => Err(Error::Shape(format!("expected a rank-3 tensor, got {s:?}"))),
    }
}

fn embed(
    tape: &mut Tape,
    m: &LanguageModule<Var>,
    cfg: &ModelConfig,
    tokens: &TokenBatch,
    dropout: &mut Dropout,
) -> Result<Var> {
    if tokens.len() > cfg.max_len {
        return Err(Error::Length { len: tokens.len(), max_len: cfg.max_len });
    }
    let d = cfg.d_model;
    let vocab = tape.shape(m.embeddings.0)[0];
    if let Some(&bad) = tokens.ids().iter().find(|&&id| id >= vocab) {
        return Err(Error::Contract(format!("token id {bad} outside vocabulary of {vocab} for '{}'", m.language)));
    }
    let rows = tape.gather(m.embeddings.0, tokens.ids())?;
    let x = tape.reshape(rows, &[tokens.rows(), tokens.len(), d])?;
    let x = tape.scale(x, (d as f64).sqrt());
    let pe = positional_encoding(tokens.len(), d)?;
    let pe = tape.constant(pe);
    let x = tape.add_broadcast(x, pe)?;
    dropout.apply(tape, x)
}

/// Contextual encoder states `[B, T, d_model]`; pad positions are masked out
/// of attention.
pub fn encode(
    tape: &mut Tape,
    m: &LanguageModule<Var>,
    cfg: &ModelConfig,
    tokens: &TokenBatch,
    dropout: &mut Dropout,
) -> Result<Var> {
    let mut x = embed(tape, m, cfg, tokens, dropout)?;
    let (rows, len) = (tokens.rows(), tokens.len());
    let keep = tokens.keep_mask();
    for block in &m.encoder {
        let h = norm(tape, &block.attn_norm, x)?;
        let mask = attention_mask(rows, cfg.num_heads, len, len, |b, _, k| keep[b * len + k]);
        let (a, _) = attention(tape, &block.attn, cfg.num_heads, h, h, mask)?;
        let a = dropout.apply(tape, a)?;
        x = tape.add(x, a)?;
        let h = norm(tape, &block.ff_norm, x)?;
        let f = feed_forward(tape, &block.ff, h, dropout)?;
        let f = dropout.apply(tape, f)?;
        x = tape.add(x, f)?;
    }
    norm(tape, &m.encoder_norm, x)
}

pub struct DecoderOutput {
    /// `[B, T, V]`
    pub logits: Var,
    /// Cross-attention weights per block, `[B, H, T, T_src]`.
    pub cross_attention: Vec<Var>,
}

/// Teacher-forced decoder pass over `latent [B, T_src, d_model]`.
pub fn decode_teacher_forced(
    tape: &mut Tape,
    m: &LanguageModule<Var>,
    cfg: &ModelConfig,
    latent: Var,
    src_keep: &[bool],
    target_in: &TokenBatch,
    dropout: &mut Dropout,
) -> Result<DecoderOutput> {
    let (lb, ls, ld) = dims3(tape, latent)?;
    if ld != cfg.d_model || tape.shape(m.embeddings.0)[1] != ld {
        return Err(Error::Compatibility(format!(
            "latent width {ld} does not match decoder '{}' d_model {}",
            m.language,
            tape.shape(m.embeddings.0)[1]
        )));
    }
    if lb != target_in.rows() || src_keep.len() != lb * ls {
        return Err(Error::Shape(format!(
            "latent [{lb}, {ls}, {ld}] with {} mask entries vs {} target rows",
            src_keep.len(),
            target_in.rows()
        )));
    }
    let mut x = embed(tape, m, cfg, target_in, dropout)?;
    let (rows, len) = (target_in.rows(), target_in.len());
    let tgt_keep = target_in.keep_mask();
    let mut cross_attention = Vec::with_capacity(m.decoder.len());
    for block in &m.decoder {
        let h = norm(tape, &block.self_norm, x)?;
        let mask = attention_mask(rows, cfg.num_heads, len, len, |b, q, k| k <= q && tgt_keep[b * len + k]);
        let (a, _) = attention(tape, &block.self_attn, cfg.num_heads, h, h, mask)?;
        let a = dropout.apply(tape, a)?;
        x = tape.add(x, a)?;
        let h = norm(tape, &block.cross_norm, x)?;
        let mask = attention_mask(rows, cfg.num_heads, len, ls, |b, _, k| src_keep[b * ls + k]);
        let (a, w) = attention(tape, &block.cross_attn, cfg.num_heads, h, latent, mask)?;
        cross_attention.push(w);
        let a = dropout.apply(tape, a)?;
        x = tape.add(x, a)?;
        let h = norm(tape, &block.ff_norm, x)?;
        let f = feed_forward(tape, &block.ff, h, dropout)?;
        let f = dropout.apply(tape, f)?;
        x = tape.add(x, f)?;
    }
    let h = norm(tape, &m.decoder_norm, x)?;
    let d = cfg.d_model;
    let flat = tape.reshape(h, &[rows * len, d])?;
    let logits = tape.matmul(flat, m.output_projection.0)?;
    let vocab = tape.shape(logits)[1];
    let logits = tape.reshape(logits, &[rows, len, vocab])?;
    Ok(DecoderOutput { logits, cross_attention })
}

/// Greedy decoding from `BOS`. Each returned row starts with `BOS` and ends
/// with `EOS` unless `max_steps` ran out first. `PAD` and `BOS` are never
/// emitted after position 0; ties go to the lowest id.
pub fn greedy_decode(
    m: &LanguageModule,
    cfg: &ModelConfig,
    latent: &Tensor,
    src_keep: &[bool],
    max_steps: usize,
) -> Result<Vec<Vec<TokenId>>> {
    if max_steps == 0 {
        return Err(Error::Contract("greedy_decode needs max_steps >= 1".into()));
    }
    let rows = latent.shape().first().copied().unwrap_or(0);
    let mut out: Vec<Vec<TokenId>> = vec![vec![BOS]; rows];
    let mut done = vec![false; rows];
    let steps = max_steps.min(cfg.max_len);
    let mut tape = Tape::new();
    let (bound, _) = m.bind(&mut tape, false);
    let latent = tape.constant(latent.clone());
    for _ in 0..steps {
        if done.iter().all(|&d| d) {
            break;
        }
        let prefix = TokenBatch::from_sequences(&out)?;
        let dec = decode_teacher_forced(&mut tape, &bound, cfg, latent, src_keep, &prefix, &mut Dropout::off())?;
        let logits = tape.value(dec.logits);
        let (len, vocab) = (prefix.len(), logits.shape()[2]);
        for r in 0..rows {
            if done[r] {
                continue;
            }
            let t = out[r].len() - 1;
            let row = &logits.data()[(r * len + t) * vocab..(r * len + t + 1) * vocab];
            let mut best = EOS as usize;
            for id in (BOS as usize + 1)..vocab {
                if row[id] > row[best] || (row[id] == row[best] && id < best) {
                    best = id;
                }
            }
            out[r].push(best as TokenId);
            if best == EOS as usize {
                done[r] = true;
            }
        }
    }
    Ok(out)
}

/// Drops `BOS`, everything from `EOS` on, and pads.
pub fn strip_special(seq: &[TokenId]) -> Vec<TokenId> {
    seq.iter().copied().skip_while(|&t| t == BOS).take_while(|&t| t != EOS).filter(|&t| t != PAD).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig { num_blocks: 2, num_heads: 2, d_model: 8, d_ff: 16, vocab_size: 16, max_len: 12, dropout: 0.0 }
    }

    fn module(lang: &str, seed: u64) -> LanguageModule {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LanguageModule::new(lang, 12, &tiny(), &mut rng).unwrap()
    }

    fn encode_values(m: &LanguageModule, seqs: &[Vec<TokenId>]) -> Tensor {
        let mut tape = Tape::new();
        let (b, _) = m.bind(&mut tape, false);
        let batch = TokenBatch::from_sequences(seqs).unwrap();
        let h = encode(&mut tape, &b, &tiny(), &batch, &mut Dropout::off()).unwrap();
        tape.value(h).clone()
    }

    #[test]
    fn positional_encoding_values() {
        let pe = positional_encoding(4, 6).unwrap();
        assert_eq!(pe.row(0), &[0., 1., 0., 1., 0., 1.]);
        assert!((pe.row(1)[0] - 1f64.sin()).abs() < 1e-15);
        assert!((pe.row(1)[0] - 0.8415).abs() < 1e-4);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(matches!(positional_encoding(4, 5), Err(Error::Config(_))));
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig { num_heads: 3, ..tiny() };
        assert!(bad.validate().is_err());
        let bad = ModelConfig { dropout: 1.0, ..tiny() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn encode_shape_and_length_check() {
        let m = module("x", 1);
        let h = encode_values(&m, &[vec![4, 5, 6, EOS], vec![7, EOS]]);
        assert_eq!(h.shape(), &[2, 4, 8]);

        let mut tape = Tape::new();
        let (b, _) = m.bind(&mut tape, false);
        let long = TokenBatch::from_sequences(&[vec![4; 13]]).unwrap();
        let err = encode(&mut tape, &b, &tiny(), &long, &mut Dropout::off()).unwrap_err();
        assert!(matches!(err, Error::Length { len: 13, max_len: 12 }));
    }

    #[test]
    fn pad_positions_do_not_leak() {
        let m = module("x", 2);
        let short = encode_values(&m, &[vec![4, 5, EOS]]);
        let padded = encode_values(&m, &[vec![4, 5, EOS], vec![6, 7, 8, 9, 10, EOS]]);
        for t in 0..3 {
            for j in 0..8 {
                let a = short.data()[t * 8 + j];
                let b = padded.data()[t * 8 + j];
                assert!((a - b).abs() <= 1e-9, "t={t} j={j}");
            }
        }
    }

    #[test]
    fn identical_rows_identical_states() {
        let m = module("x", 3);
        let h = encode_values(&m, &[vec![4, 5, 6, EOS], vec![4, 5, 6, EOS]]);
        let n = 4 * 8;
        assert_eq!(&h.data()[..n], &h.data()[n..]);
    }

    #[test]
    fn decoder_rejects_wrong_width() {
        let m = module("y", 4);
        let mut tape = Tape::new();
        let (b, _) = m.bind(&mut tape, false);
        let latent = tape.constant(Tensor::zeros(&[1, 3, 6]));
        let tgt = TokenBatch::from_sequences(&[vec![BOS, 4]]).unwrap();
        let err = decode_teacher_forced(&mut tape, &b, &tiny(), latent, &[true; 3], &tgt, &mut Dropout::off());
        assert!(matches!(err, Err(Error::Compatibility(_))));
    }

    #[test]
    fn greedy_output_contract() {
        let m = module("y", 5);
        let latent = encode_values(&module("x", 6), &[vec![4, 5, EOS], vec![9, EOS]]);
        let keep = [true, true, true, true, true, false];
        let a = greedy_decode(&m, &tiny(), &latent, &keep, 10).unwrap();
        let b = greedy_decode(&m, &tiny(), &latent, &keep, 10).unwrap();
        assert_eq!(a, b);
        for row in &a {
            assert_eq!(row[0], BOS);
            assert!(row[1..].iter().all(|&t| t != BOS && t != PAD));
            if let Some(p) = row.iter().position(|&t| t == EOS) {
                assert_eq!(p, row.len() - 1);
            }
            assert!(row.len() <= 11);
        }
        assert!(greedy_decode(&m, &tiny(), &latent, &keep, 0).is_err());
    }

    #[test]
    fn param_names_are_unique_and_stable() {
        let m = module("x", 7);
        let mut names = Vec::new();
        m.visit("x", &mut |n, _| names.push(n.to_string()));
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert!(names.contains(&"x.decoder.1.cross_attn.key.weight".to_string()));
    }

    #[test]
    fn strip_special_tokens() {
        assert_eq!(strip_special(&[BOS, 5, 6, EOS, 7]), vec![5, 6]);
        assert_eq!(strip_special(&[BOS, 5]), vec![5]);
    }
}
