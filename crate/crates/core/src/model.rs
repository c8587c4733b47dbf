//! Full network assembly: a post-LN transformer encoder plus a decoder that
//! can run either as two coupled streams (left-to-right and right-to-left
//! generated in lockstep, each peeking at the other through the cross term
//! of the two-stream attention) or as a plain single-stream baseline. Both
//! decoder flavours share one parameter set and the same sub-layer code, so
//! a coupling weight of zero makes the two-stream path agree with the
//! baseline to the last bit.
//!
//! Every residual block is post-norm: `h = LN(h + sublayer(h))`. Encoder
//! layers hold two such blocks (self-attention, feed-forward); decoder
//! layers hold three (self-attention over the target prefix, attention over
//! the encoder output, feed-forward).
//!
//! Incremental decoding keeps per-layer key/value caches so each generation
//! step only runs the new position through the stack. States are immutable;
//! a step returns a fresh state, and beam search reorders rows with
//! [`DecoderState::select_rows`].

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    attend, bi_mha_intra_bias, merge_heads, mha_bias, split_heads, AttnDropout,
    MultiHeadParams, MASK_BIAS,
};
use crate::data::{L2R_ID, R2L_ID, RESERVED_TOKENS};
use crate::error::{Result, SbsgError};
use crate::tensor::{no_grad, Tensor};

mod checkpoint;
pub use checkpoint::{load_checkpoint, save_checkpoint};

/// Epsilon inside every layer norm.
pub const LN_EPS: f64 = 1e-6;

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

/// Which decoder the model trains and decodes with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Two streams generated ends-inward.
    Bidirectional,
    /// Plain left-to-right baseline.
    L2R,
    /// Right-to-left baseline (targets reversed for training, un-reversed
    /// after decoding).
    R2L,
}

impl FromStr for Mode {
    type Err = SbsgError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bidirectional" => Ok(Mode::Bidirectional),
            "l2r" => Ok(Mode::L2R),
            "r2l" => Ok(Mode::R2L),
            other => Err(SbsgError::Config(format!(
                "unknown mode '{other}' (expected bidirectional, l2r or r2l)"
            ))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Bidirectional => "bidirectional",
            Mode::L2R => "l2r",
            Mode::R2L => "r2l",
        })
    }
}

/// Architecture hyperparameters. `validate` is called by every entry point
/// that builds or loads parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Encoder and decoder layer count (same for both stacks).
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    /// Includes the reserved tokens, so at least 7.
    pub vocab_size: usize,
    /// Cross-stream coupling weight in `[0, 1]`; only the decoder
    /// self-attention uses it.
    pub lambda: f64,
    /// Dropout rate in `[0, 1)`, applied to sub-layer outputs, the embedding
    /// sum and attention weights during training.
    pub dropout: f64,
    /// Longest position the sinusoidal table covers.
    pub max_positions: usize,
    pub mode: Mode,
}

impl ModelConfig {
    /// Small configuration that trains in minutes on one core.
    pub fn desk_default(vocab_size: usize) -> Self {
        ModelConfig {
            layers: 2,
            d_model: 64,
            heads: 4,
            d_ff: 256,
            vocab_size,
            lambda: 0.5,
            dropout: 0.1,
            max_positions: 64,
            mode: Mode::Bidirectional,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(SbsgError::Config("layers must be at least 1".into()));
        }
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(SbsgError::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.d_ff == 0 {
            return Err(SbsgError::Config("d_ff must be at least 1".into()));
        }
        if self.vocab_size <= RESERVED_TOKENS.len() {
            return Err(SbsgError::Config(format!(
                "vocab_size {} leaves no room for real tokens after the {} reserved ones",
                self.vocab_size,
                RESERVED_TOKENS.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(SbsgError::Config(format!(
                "lambda {} outside [0, 1]",
                self.lambda
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(SbsgError::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.max_positions < 2 {
            return Err(SbsgError::Config("max_positions must be at least 2".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// parameters
// ---------------------------------------------------------------------------

/// Two-layer position-wise feed-forward block with ReLU.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl FeedForward {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.w1)?
            .add(&self.b1)?
            .relu()
            .matmul(&self.w2)?
            .add(&self.b2)
    }
}

/// Gain and bias of one layer norm.
#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNormParams {
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gain, &self.bias, LN_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attn: MultiHeadParams,
    pub ln1: LayerNormParams,
    pub ffn: FeedForward,
    pub ln2: LayerNormParams,
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    /// Self-attention over the target prefix; carries the cross-stream term
    /// when the decoder runs two streams.
    pub intra: MultiHeadParams,
    pub ln1: LayerNormParams,
    /// Attention over the encoder output. Never couples streams.
    pub inter: MultiHeadParams,
    pub ln2: LayerNormParams,
    pub ffn: FeedForward,
    pub ln3: LayerNormParams,
}

/// All trainable tensors plus the fixed sinusoidal position table.
///
/// Leaf order is part of the contract: the optimizer walks it to pair moment
/// buffers with tensors and the checkpoint writer emits records in this
/// order. Both streams of the decoder read the same tensors; nothing here is
/// direction-specific.
#[derive(Debug, Clone)]
pub struct Params {
    /// Token embeddings `[vocab, d_model]`.
    pub embedding: Tensor,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    /// Output projection `[d_model, vocab]`; deliberately not tied to the
    /// embedding.
    pub output: Tensor,
    /// Sinusoidal table `[max_positions, d_model]`; derived, never trained
    /// or saved.
    pub positions: Tensor,
}

/// Visits every trainable leaf as `(name, &mut Tensor)` in the fixed order
/// shared by the optimizer and the checkpoint format. Callers that only need
/// to read can walk a clone: leaf tensors are reference handles, so clones
/// alias the same storage and gradient.
macro_rules! for_each_leaf {
    ($params:expr, $f:expr) => {{
        let p = $params;
        let f = &mut $f;
        f("embedding".to_string(), &mut p.embedding);
        for (i, layer) in p.encoder.iter_mut().enumerate() {
            f(format!("enc.{i}.attn.wq"), &mut layer.attn.wq);
            f(format!("enc.{i}.attn.wk"), &mut layer.attn.wk);
            f(format!("enc.{i}.attn.wv"), &mut layer.attn.wv);
            f(format!("enc.{i}.attn.wo"), &mut layer.attn.wo);
            f(format!("enc.{i}.ln1.gain"), &mut layer.ln1.gain);
            f(format!("enc.{i}.ln1.bias"), &mut layer.ln1.bias);
            f(format!("enc.{i}.ffn.w1"), &mut layer.ffn.w1);
            f(format!("enc.{i}.ffn.b1"), &mut layer.ffn.b1);
            f(format!("enc.{i}.ffn.w2"), &mut layer.ffn.w2);
            f(format!("enc.{i}.ffn.b2"), &mut layer.ffn.b2);
            f(format!("enc.{i}.ln2.gain"), &mut layer.ln2.gain);
            f(format!("enc.{i}.ln2.bias"), &mut layer.ln2.bias);
        }
        for (i, layer) in p.decoder.iter_mut().enumerate() {
            f(format!("dec.{i}.intra.wq"), &mut layer.intra.wq);
            f(format!("dec.{i}.intra.wk"), &mut layer.intra.wk);
            f(format!("dec.{i}.intra.wv"), &mut layer.intra.wv);
            f(format!("dec.{i}.intra.wo"), &mut layer.intra.wo);
            f(format!("dec.{i}.ln1.gain"), &mut layer.ln1.gain);
            f(format!("dec.{i}.ln1.bias"), &mut layer.ln1.bias);
            f(format!("dec.{i}.inter.wq"), &mut layer.inter.wq);
            f(format!("dec.{i}.inter.wk"), &mut layer.inter.wk);
            f(format!("dec.{i}.inter.wv"), &mut layer.inter.wv);
            f(format!("dec.{i}.inter.wo"), &mut layer.inter.wo);
            f(format!("dec.{i}.ln2.gain"), &mut layer.ln2.gain);
            f(format!("dec.{i}.ln2.bias"), &mut layer.ln2.bias);
            f(format!("dec.{i}.ffn.w1"), &mut layer.ffn.w1);
            f(format!("dec.{i}.ffn.b1"), &mut layer.ffn.b1);
            f(format!("dec.{i}.ffn.w2"), &mut layer.ffn.w2);
            f(format!("dec.{i}.ffn.b2"), &mut layer.ffn.b2);
            f(format!("dec.{i}.ln3.gain"), &mut layer.ln3.gain);
            f(format!("dec.{i}.ln3.bias"), &mut layer.ln3.bias);
        }
        f("output".to_string(), &mut p.output);
    }};
}

pub(crate) use for_each_leaf;

impl Params {
    /// Named trainable leaves in fixed order (position table excluded). The
    /// returned handles alias this struct's tensors.
    pub fn leaves(&self) -> Vec<(String, Tensor)> {
        let mut this = self.clone();
        let mut out = Vec::new();
        for_each_leaf!(&mut this, |name: String, t: &mut Tensor| out
            .push((name, t.clone())));
        out
    }
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.gen::<f64>() * 2.0 * bound - bound)
        .collect();
    Tensor::new(data, &[rows, cols]).unwrap().with_grad()
}

fn init_mha(rng: &mut ChaCha8Rng, d_model: usize, heads: usize) -> MultiHeadParams {
    let wq = xavier(rng, d_model, d_model);
    let wk = xavier(rng, d_model, d_model);
    let wv = xavier(rng, d_model, d_model);
    let wo = xavier(rng, d_model, d_model);
    MultiHeadParams::new(wq, wk, wv, wo, heads).unwrap()
}

fn init_ffn(rng: &mut ChaCha8Rng, d_model: usize, d_ff: usize) -> FeedForward {
    FeedForward {
        w1: xavier(rng, d_model, d_ff),
        b1: Tensor::zeros(&[d_ff]).with_grad(),
        w2: xavier(rng, d_ff, d_model),
        b2: Tensor::zeros(&[d_model]).with_grad(),
    }
}

fn init_ln(d_model: usize) -> LayerNormParams {
    LayerNormParams {
        gain: Tensor::ones(&[d_model]).with_grad(),
        bias: Tensor::zeros(&[d_model]).with_grad(),
    }
}

/// Sinusoidal position table: even columns sine, odd columns cosine, sharing
/// the frequency of the even column to their left.
fn sinusoid_table(max_positions: usize, d_model: usize) -> Tensor {
    let mut data = vec![0.0; max_positions * d_model];
    for p in 0..max_positions {
        for j in 0..d_model {
            let exponent = (j - j % 2) as f64 / d_model as f64;
            let angle = p as f64 / 10000f64.powf(exponent);
            data[p * d_model + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(data, &[max_positions, d_model]).unwrap()
}

/// Fresh Xavier-initialised parameters. Weight matrices are drawn in leaf
/// order (biases and layer-norm terms are constant-initialised and consume
/// no randomness), so a seed pins every value.
pub fn init_params(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Params> {
    config.validate()?;
    let d = config.d_model;
    let embedding = xavier(rng, config.vocab_size, d);
    let encoder = (0..config.layers)
        .map(|_| EncoderLayer {
            attn: init_mha(rng, d, config.heads),
            ln1: init_ln(d),
            ffn: init_ffn(rng, d, config.d_ff),
            ln2: init_ln(d),
        })
        .collect();
    let decoder = (0..config.layers)
        .map(|_| DecoderLayer {
            intra: init_mha(rng, d, config.heads),
            ln1: init_ln(d),
            inter: init_mha(rng, d, config.heads),
            ln2: init_ln(d),
            ffn: init_ffn(rng, d, config.d_ff),
            ln3: init_ln(d),
        })
        .collect();
    let output = xavier(rng, d, config.vocab_size);
    Ok(Params {
        embedding,
        encoder,
        decoder,
        output,
        positions: sinusoid_table(config.max_positions, d),
    })
}

// ---------------------------------------------------------------------------
// forward passes
// ---------------------------------------------------------------------------

/// Whether a pass samples dropout. Decode paths always run `Eval`.
pub enum ForwardMode<'a> {
    Train { rate: f64, rng: &'a mut ChaCha8Rng },
    Eval,
}

impl<'a> ForwardMode<'a> {
    pub fn train(config: &ModelConfig, rng: &'a mut ChaCha8Rng) -> Self {
        ForwardMode::Train {
            rate: config.dropout,
            rng,
        }
    }

    fn attn(&mut self) -> AttnDropout<'_> {
        match self {
            ForwardMode::Train { rate, rng } if *rate > 0.0 => Some((*rate, &mut **rng)),
            _ => None,
        }
    }

    fn drop(&mut self, x: Tensor) -> Tensor {
        match self {
            ForwardMode::Train { rate, rng } if *rate > 0.0 => {
                x.dropout(*rate, &mut || rng.gen())
            }
            _ => x,
        }
    }
}

/// Scaled token embeddings plus positions `start..start + q`, with embedding
/// dropout in training mode.
fn embed(
    ids: &[u32],
    rows: usize,
    q: usize,
    start: usize,
    params: &Params,
    config: &ModelConfig,
    mode: &mut ForwardMode,
) -> Result<Tensor> {
    if start + q > config.max_positions {
        return Err(SbsgError::Contract(format!(
            "position {} exceeds max_positions {}",
            start + q,
            config.max_positions
        )));
    }
    let tok = Tensor::embedding(&params.embedding, ids, &[rows, q])?;
    let pos = params.positions.narrow(0, start, q)?;
    let x = tok.scale((config.d_model as f64).sqrt()).add(&pos)?;
    Ok(mode.drop(x))
}

/// Additive padding bias `[b, 1, 1, m]`, or `None` when nothing is padded.
fn padding_bias(lens: &[usize], m: usize) -> Option<Tensor> {
    if lens.iter().all(|&l| l == m) {
        return None;
    }
    let mut data = vec![0.0; lens.len() * m];
    for (i, &l) in lens.iter().enumerate() {
        for slot in &mut data[i * m + l..(i + 1) * m] {
            *slot = MASK_BIAS;
        }
    }
    Some(Tensor::new(data, &[lens.len(), 1, 1, m]).unwrap())
}

/// Lower-triangular causal bias `[q, q]` (position j sees 0..=j).
fn causal_bias(q: usize) -> Tensor {
    let mut data = vec![0.0; q * q];
    for i in 0..q {
        for slot in &mut data[i * q + i + 1..(i + 1) * q] {
            *slot = MASK_BIAS;
        }
    }
    Tensor::new(data, &[q, q]).unwrap()
}

/// Runs the encoder over a padded batch. `src_ids` is row-major `[b * m]`
/// with `m = src_ids.len() / src_lens.len()`; positions at and beyond each
/// length must be padding and are masked out of every attention.
pub fn encode(
    src_ids: &[u32],
    src_lens: &[usize],
    params: &Params,
    config: &ModelConfig,
    mode: &mut ForwardMode,
) -> Result<Tensor> {
    let b = src_lens.len();
    if b == 0 || src_ids.is_empty() || src_ids.len() % b != 0 {
        return Err(SbsgError::Contract(format!(
            "source batch of {} ids does not divide into {} rows",
            src_ids.len(),
            b
        )));
    }
    let m = src_ids.len() / b;
    if src_lens.iter().any(|&l| l == 0 || l > m) {
        return Err(SbsgError::Contract(format!(
            "source lengths {src_lens:?} must lie in 1..={m}"
        )));
    }
    let bias = padding_bias(src_lens, m);
    let mut h = embed(src_ids, b, m, 0, params, config, mode)?;
    for layer in &params.encoder {
        let a = mha_bias(&h, &h, &h, bias.as_ref(), &layer.attn, mode.attn())?;
        h = layer.ln1.apply(&h.add(&mode.drop(a))?)?;
        let f = layer.ffn.apply(&h)?;
        h = layer.ln2.apply(&h.add(&mode.drop(f))?)?;
    }
    Ok(h)
}

/// One pass through the decoder layers for one or two streams. With two
/// streams the self-attention couples them through the cross term; with one
/// it is plain masked attention. Everything else is identical, which is what
/// pins the zero-coupling equivalence.
fn decoder_stack(
    streams: &mut [Tensor],
    causal: &Tensor,
    enc_out: &Tensor,
    src_bias: Option<&Tensor>,
    params: &Params,
    config: &ModelConfig,
    mode: &mut ForwardMode,
) -> Result<()> {
    for layer in &params.decoder {
        match streams {
            [s] => {
                let a = mha_bias(s, s, s, Some(causal), &layer.intra, mode.attn())?;
                *s = layer.ln1.apply(&s.add(&mode.drop(a))?)?;
            }
            [f, b] => {
                let (af, ab) = bi_mha_intra_bias(
                    f,
                    b,
                    Some(causal),
                    &layer.intra,
                    config.lambda,
                    mode.attn(),
                )?;
                *f = layer.ln1.apply(&f.add(&mode.drop(af))?)?;
                *b = layer.ln1.apply(&b.add(&mode.drop(ab))?)?;
            }
            _ => {
                return Err(SbsgError::Contract(
                    "decoder runs one or two streams".into(),
                ))
            }
        }
        for s in streams.iter_mut() {
            let a = mha_bias(s, enc_out, enc_out, src_bias, &layer.inter, mode.attn())?;
            *s = layer.ln2.apply(&s.add(&mode.drop(a))?)?;
        }
        for s in streams.iter_mut() {
            let f = layer.ffn.apply(s)?;
            *s = layer.ln3.apply(&s.add(&mode.drop(f))?)?;
        }
    }
    Ok(())
}

fn check_decoder_batch(ids: &[u32], b: usize, what: &str) -> Result<usize> {
    if b == 0 || ids.is_empty() || ids.len() % b != 0 {
        return Err(SbsgError::Contract(format!(
            "{what} batch of {} ids does not divide into {b} rows",
            ids.len()
        )));
    }
    Ok(ids.len() / b)
}

/// Teacher-forced pass of the two-stream decoder. `fwd_in`/`bwd_in` are
/// row-major `[b * q]` shifted targets; row starts must be the two start
/// markers. Returns per-position logits `([b, q, V], [b, q, V])`.
pub fn decode_bidirectional(
    fwd_in: &[u32],
    bwd_in: &[u32],
    enc_out: &Tensor,
    src_lens: &[usize],
    params: &Params,
    config: &ModelConfig,
    mode: &mut ForwardMode,
) -> Result<(Tensor, Tensor)> {
    let b = enc_out.shape()[0];
    let q = check_decoder_batch(fwd_in, b, "forward stream")?;
    if bwd_in.len() != fwd_in.len() {
        return Err(SbsgError::Contract(format!(
            "stream lengths differ: {} vs {}",
            fwd_in.len(),
            bwd_in.len()
        )));
    }
    for row in 0..b {
        if fwd_in[row * q] != L2R_ID || bwd_in[row * q] != R2L_ID {
            return Err(SbsgError::Contract(format!(
                "row {row} must start with the direction markers"
            )));
        }
    }
    let m = enc_out.shape()[1];
    let src_bias = padding_bias(src_lens, m);
    let causal = causal_bias(q);
    let mut streams = [
        embed(fwd_in, b, q, 0, params, config, mode)?,
        embed(bwd_in, b, q, 0, params, config, mode)?,
    ];
    decoder_stack(
        &mut streams,
        &causal,
        enc_out,
        src_bias.as_ref(),
        params,
        config,
        mode,
    )?;
    let [f, bw] = streams;
    Ok((f.matmul(&params.output)?, bw.matmul(&params.output)?))
}

/// Teacher-forced pass of the single-stream decoder (either direction; the
/// input carries its own start marker). Returns logits `[b, q, V]`.
pub fn decode_unidirectional(
    tgt_in: &[u32],
    enc_out: &Tensor,
    src_lens: &[usize],
    params: &Params,
    config: &ModelConfig,
    mode: &mut ForwardMode,
) -> Result<Tensor> {
    let b = enc_out.shape()[0];
    let q = check_decoder_batch(tgt_in, b, "target")?;
    for row in 0..b {
        let first = tgt_in[row * q];
        if first != L2R_ID && first != R2L_ID {
            return Err(SbsgError::Contract(format!(
                "row {row} must start with a direction marker"
            )));
        }
    }
    let m = enc_out.shape()[1];
    let src_bias = padding_bias(src_lens, m);
    let causal = causal_bias(q);
    let mut streams = [embed(tgt_in, b, q, 0, params, config, mode)?];
    decoder_stack(
        &mut streams,
        &causal,
        enc_out,
        src_bias.as_ref(),
        params,
        config,
        mode,
    )?;
    let [h] = streams;
    h.matmul(&params.output)
}

// ---------------------------------------------------------------------------
// incremental decoding
// ---------------------------------------------------------------------------

/// Immutable cache for step-by-step decoding of ONE source sentence.
///
/// Rows are hypotheses. In two-stream mode the first half of the rows are
/// forward streams and the second half their backward partners, so row `i`
/// exchanges cross-attention with row `(i + rows/2) % rows`. Each step
/// appends one position to the per-layer key/value caches; frozen rows
/// (finished streams) still occupy a position, and `valid` records how many
/// leading positions of each row are real so partners mask the garbage.
pub struct DecoderState {
    /// Positions consumed so far (same for every row).
    step: usize,
    /// Per row: number of real positions, `<= step`.
    valid: Vec<usize>,
    /// Per decoder layer: keys/values `[rows, h, step, d_k]`.
    caches: Vec<Option<(Tensor, Tensor)>>,
    /// Per decoder layer: projected encoder keys/values `[1, h, m, d_k]`,
    /// shared across rows and selections.
    inter_kv: Rc<Vec<(Tensor, Tensor)>>,
    rows: usize,
    bidirectional: bool,
}

impl DecoderState {
    /// Prepares caches for decoding one encoded sentence (`enc_out`
    /// `[1, m, d_model]`). `rows` counts hypothesis streams: two per
    /// hypothesis pair in two-stream mode, one per beam otherwise.
    pub fn new(
        enc_out: &Tensor,
        rows: usize,
        params: &Params,
        config: &ModelConfig,
    ) -> Result<Self> {
        if enc_out.ndim() != 3 || enc_out.shape()[0] != 1 {
            return Err(SbsgError::Contract(format!(
                "incremental decoding takes one sentence at a time, got encoder shape {:?}",
                enc_out.shape()
            )));
        }
        let bidirectional = config.mode == Mode::Bidirectional;
        if rows == 0 || (bidirectional && rows % 2 != 0) {
            return Err(SbsgError::Contract(format!(
                "row count {rows} invalid for mode {}",
                config.mode
            )));
        }
        let inter_kv = no_grad(|| -> Result<Vec<(Tensor, Tensor)>> {
            params
                .decoder
                .iter()
                .map(|layer| {
                    let k = split_heads(enc_out, &layer.inter.wk, config.heads)?;
                    let v = split_heads(enc_out, &layer.inter.wv, config.heads)?;
                    Ok((k, v))
                })
                .collect()
        })?;
        Ok(DecoderState {
            step: 0,
            valid: vec![0; rows],
            caches: vec![None; params.decoder.len()],
            inter_kv: Rc::new(inter_kv),
            rows,
            bidirectional,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Reorders/duplicates rows (beam selection). In two-stream mode the
    /// index list must keep the halves aligned: entry `i` and entry
    /// `i + len/2` must be partners in the old state.
    pub fn select_rows(&self, idx: &[usize]) -> Result<DecoderState> {
        if idx.is_empty() || (self.bidirectional && idx.len() % 2 != 0) {
            return Err(SbsgError::Contract(format!(
                "cannot select {} rows from a {}-row state",
                idx.len(),
                self.rows
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.rows) {
            return Err(SbsgError::Contract(format!(
                "row index {bad} out of range 0..{}",
                self.rows
            )));
        }
        let caches = no_grad(|| -> Result<Vec<Option<(Tensor, Tensor)>>> {
            self.caches
                .iter()
                .map(|cache| {
                    cache
                        .as_ref()
                        .map(|(k, v)| Ok((gather_rows(k, idx)?, gather_rows(v, idx)?)))
                        .transpose()
                })
                .collect()
        })?;
        Ok(DecoderState {
            step: self.step,
            valid: idx.iter().map(|&i| self.valid[i]).collect(),
            caches,
            inter_kv: Rc::clone(&self.inter_kv),
            rows: idx.len(),
            bidirectional: self.bidirectional,
        })
    }
}

fn gather_rows(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let views: Vec<Tensor> = idx
        .iter()
        .map(|&i| x.narrow(0, i, 1))
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor> = views.iter().collect();
    Tensor::cat(&refs, 0)
}

/// First half of rows swapped with the second half along axis 0 — the view
/// each stream has of its partner's cache.
fn swap_halves(x: &Tensor) -> Result<Tensor> {
    let rows = x.shape()[0];
    let half = rows / 2;
    let top = x.narrow(0, 0, half)?;
    let bot = x.narrow(0, half, half)?;
    Tensor::cat(&[&bot, &top], 0)
}

/// Bias hiding garbage cache positions of each row's partner:
/// `[rows, 1, 1, t]`, `None` when every position everywhere is real.
fn partner_bias(valid: &[usize], t: usize) -> Option<Tensor> {
    if valid.iter().all(|&v| v == t) {
        return None;
    }
    let rows = valid.len();
    let half = rows / 2;
    let mut data = vec![0.0; rows * t];
    for i in 0..rows {
        let partner = (i + half) % rows;
        for slot in &mut data[i * t + valid[partner]..(i + 1) * t] {
            *slot = MASK_BIAS;
        }
    }
    Some(Tensor::new(data, &[rows, 1, 1, t]).unwrap())
}

/// Feeds one token per row through the decoder and returns raw logits
/// (row-major `[rows * vocab]`) plus the advanced state.
///
/// `ids[i]` is the token row `i` consumed this step (a start marker at step
/// 0, afterwards the previously emitted token, or padding once frozen).
/// `active[i] == false` marks a frozen row: its cache slot is garbage from
/// this step on and partners stop attending to it. Logits of frozen rows are
/// meaningless; callers must ignore them.
pub fn incremental_step(
    state: &DecoderState,
    ids: &[u32],
    active: &[bool],
    params: &Params,
    config: &ModelConfig,
) -> Result<(Vec<f64>, DecoderState)> {
    let rows = state.rows;
    if ids.len() != rows || active.len() != rows {
        return Err(SbsgError::Contract(format!(
            "expected {rows} ids and flags, got {} and {}",
            ids.len(),
            active.len()
        )));
    }
    no_grad(|| {
        let mut mode = ForwardMode::Eval;
        let mut h = embed(ids, rows, 1, state.step, params, config, &mut mode)?;
        let t = state.step + 1;
        let valid_next: Vec<usize> = state
            .valid
            .iter()
            .zip(active)
            .map(|(&v, &a)| v + a as usize)
            .collect();
        let cross_bias = if state.bidirectional && config.lambda > 0.0 {
            partner_bias(&valid_next, t)
        } else {
            None
        };
        let mut caches = Vec::with_capacity(params.decoder.len());
        for (layer, cache) in params.decoder.iter().zip(&state.caches) {
            let k_new = split_heads(&h, &layer.intra.wk, config.heads)?;
            let v_new = split_heads(&h, &layer.intra.wv, config.heads)?;
            let (k_all, v_all) = match cache {
                Some((k, v)) => (
                    Tensor::cat(&[k, &k_new], 2)?,
                    Tensor::cat(&[v, &v_new], 2)?,
                ),
                None => (k_new, v_new),
            };
            let q = split_heads(&h, &layer.intra.wq, config.heads)?;
            // Own-stream attention needs no mask: an active row's cache is
            // all real, and frozen rows' outputs are ignored anyway.
            let mut ctx = attend(&q, &k_all, &v_all, None, None)?;
            if state.bidirectional && config.lambda > 0.0 {
                let ks = swap_halves(&k_all)?;
                let vs = swap_halves(&v_all)?;
                let cross = attend(&q, &ks, &vs, cross_bias.as_ref(), None)?;
                ctx = ctx.add(&cross.scale(config.lambda))?;
            }
            let a = merge_heads(&ctx)?.matmul(&layer.intra.wo)?;
            h = layer.ln1.apply(&h.add(&a)?)?;
            caches.push(Some((k_all, v_all)));

            let (ik, iv) = &state.inter_kv[caches.len() - 1];
            let qi = split_heads(&h, &layer.inter.wq, config.heads)?;
            let ictx = attend(&qi, ik, iv, None, None)?;
            let a = merge_heads(&ictx)?.matmul(&layer.inter.wo)?;
            h = layer.ln2.apply(&h.add(&a)?)?;

            let f = layer.ffn.apply(&h)?;
            h = layer.ln3.apply(&h.add(&f)?)?;
        }
        let logits = h.matmul(&params.output)?;
        Ok((
            logits.data().to_vec(),
            DecoderState {
                step: t,
                valid: valid_next,
                caches,
                inter_kv: Rc::clone(&state.inter_kv),
                rows,
                bidirectional: state.bidirectional,
            },
        ))
    })
}
