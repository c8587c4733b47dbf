//! Training: label-smoothed likelihood over both decoder streams, Adam with
//! the inverse-square-root warmup schedule, global-norm gradient clipping,
//! and a driver loop with greedy exact-match selection on the dev set.
//!
//! Determinism contract: every random draw — parameter init, epoch
//! shuffles, the per-example coin that places the odd-length filler under
//! [`NullSidePolicy::Random`], and dropout — comes from a stream derived
//! from (seed, purpose, counter), so two runs with the same seed produce
//! byte-identical logs and checkpoints.

use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{
    make_batch, split_target, split_target_fixed, Batch, Vocabulary, EOS_ID, L2R_ID, PAD_ID,
    R2L_ID,
};
use crate::decoding::{translate_ids, DecodeConfig};
use crate::error::{Result, SbsgError};
use crate::model::{
    decode_bidirectional, decode_unidirectional, encode, for_each_leaf, init_params,
    save_checkpoint, ForwardMode, Mode, ModelConfig, Params,
};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.998;
pub const ADAM_EPS: f64 = 1e-9;

// ---------------------------------------------------------------------------
// schedule
// ---------------------------------------------------------------------------

/// Inverse-square-root schedule with linear warmup:
/// `d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)`. Steps count from 1.
pub fn lr(step: usize, warmup: usize, d_model: usize) -> Result<f64> {
    if step == 0 || warmup == 0 || d_model == 0 {
        return Err(SbsgError::Contract(format!(
            "learning rate undefined for step {step}, warmup {warmup}, d_model {d_model}"
        )));
    }
    let s = step as f64;
    let w = warmup as f64;
    Ok((d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
}

// ---------------------------------------------------------------------------
// loss
// ---------------------------------------------------------------------------

/// Sum of label-smoothed negative log likelihoods over the masked positions
/// of one stream. `log_probs` is `[.., V]` log-softmax output; the smoothed
/// target puts `1 - eps` on the gold token and spreads `eps` uniformly over
/// the non-padding vocabulary.
fn smoothed_nll_sum(
    log_probs: &Tensor,
    targets: &[u32],
    mask: &[bool],
    eps: f64,
) -> Result<Tensor> {
    let vocab = *log_probs.shape().last().ok_or_else(|| {
        SbsgError::Dimension("loss needs at least a vocabulary axis".into())
    })?;
    if vocab < 2 {
        return Err(SbsgError::Dimension(format!(
            "vocabulary axis of {vocab} is too small"
        )));
    }
    let positions = log_probs.numel() / vocab;
    if targets.len() != positions || mask.len() != positions {
        return Err(SbsgError::Dimension(format!(
            "{} targets / {} mask flags for {} positions",
            targets.len(),
            mask.len(),
            positions
        )));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(SbsgError::Contract(format!(
            "label smoothing {eps} outside [0, 1)"
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(SbsgError::Contract(
            "loss mask excludes every position".into(),
        ));
    }
    let pad = PAD_ID as usize;
    for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
        if t as usize >= vocab {
            return Err(SbsgError::Contract(format!(
                "target id {t} at position {i} outside vocabulary {vocab}"
            )));
        }
        if m && t == PAD_ID {
            return Err(SbsgError::Contract(format!(
                "masked-in padding target at position {i}"
            )));
        }
    }

    let uniform = eps / (vocab - 1) as f64;
    let data = log_probs.data();
    let mut total = 0.0;
    for (i, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        let row = &data[i * vocab..(i + 1) * vocab];
        let spread: f64 = row.iter().sum::<f64>() - row[pad];
        total -= (1.0 - eps) * row[targets[i] as usize] + uniform * spread;
    }

    let targets = targets.to_vec();
    let mask = mask.to_vec();
    Ok(Tensor::from_op(
        vec![1],
        vec![total],
        vec![log_probs.clone()],
        Box::new(move |grad, _out, parents| {
            if !parents[0].tracked() {
                return;
            }
            let g = grad[0];
            let mut d = vec![0.0; parents[0].numel()];
            for (i, &m) in mask.iter().enumerate() {
                if !m {
                    continue;
                }
                let base = i * vocab;
                for (t, slot) in d[base..base + vocab].iter_mut().enumerate() {
                    if t != pad {
                        *slot -= g * uniform;
                    }
                }
                d[base + targets[i] as usize] -= g * (1.0 - eps);
            }
            parents[0].accumulate_grad(&d);
        }),
    ))
}

/// Joint objective over both streams: mean label-smoothed NLL per masked
/// position, with the position count summed across the two streams.
pub fn joint_loss(
    logits_f: &Tensor,
    logits_b: &Tensor,
    batch: &Batch,
    eps: f64,
) -> Result<Tensor> {
    let lp_f = logits_f.log_softmax(2)?;
    let lp_b = logits_b.log_softmax(2)?;
    let sum_f = smoothed_nll_sum(&lp_f, &batch.fwd_out, &batch.loss_mask, eps)?;
    let sum_b = smoothed_nll_sum(&lp_b, &batch.bwd_out, &batch.loss_mask, eps)?;
    let count = 2 * batch.loss_mask.iter().filter(|&&m| m).count();
    Ok(sum_f.add(&sum_b)?.scale(1.0 / count as f64))
}

/// Mean label-smoothed NLL of a single stream.
pub fn single_stream_loss(
    logits: &Tensor,
    targets: &[u32],
    mask: &[bool],
    eps: f64,
) -> Result<Tensor> {
    let lp = logits.log_softmax(2)?;
    let total = smoothed_nll_sum(&lp, targets, mask, eps)?;
    let count = mask.iter().filter(|&&m| m).count();
    Ok(total.scale(1.0 / count as f64))
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

/// Adam moment buffers, allocated in leaf order.
pub struct OptimizerState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &Params) -> Self {
        let sizes: Vec<usize> = params.leaves().iter().map(|(_, t)| t.numel()).collect();
        OptimizerState {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update on a flat parameter.
pub(crate) fn adam_update(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
) {
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for j in 0..theta.len() {
        m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * grad[j];
        v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * grad[j] * grad[j];
        let m_hat = m[j] / bc1;
        let v_hat = v[j] / bc2;
        theta[j] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// Applies one optimizer step from the gradients accumulated on the leaves.
/// Gradients are clipped to `clip_norm` by global norm first. Returns the
/// pre-clip norm. Leaves come back with fresh (zero) gradients.
pub fn adam_step(
    params: &mut Params,
    opt: &mut OptimizerState,
    lr: f64,
    clip_norm: f64,
) -> Result<f64> {
    if clip_norm <= 0.0 {
        return Err(SbsgError::Contract(format!(
            "clip norm {clip_norm} must be positive"
        )));
    }
    let mut grads = Vec::with_capacity(opt.m.len());
    for (name, leaf) in params.leaves() {
        let g = leaf.grad().ok_or_else(|| {
            SbsgError::Contract(format!("leaf {name} has no gradient; run backward first"))
        })?;
        grads.push(g);
    }
    if grads.len() != opt.m.len() {
        return Err(SbsgError::Contract(format!(
            "optimizer tracks {} leaves but the model has {}",
            opt.m.len(),
            grads.len()
        )));
    }
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&g| g * g)
        .sum::<f64>()
        .sqrt();
    let scale = if norm > clip_norm { clip_norm / norm } else { 1.0 };
    if scale != 1.0 {
        for g in &mut grads {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    opt.step += 1;
    let t = opt.step;
    let mut i = 0;
    for_each_leaf!(params, |_name: String, leaf: &mut Tensor| {
        let mut data = leaf.data().to_vec();
        adam_update(&mut data, &grads[i], &mut opt.m[i], &mut opt.v[i], t, lr);
        let shape = leaf.shape().to_vec();
        *leaf = Tensor::new(data, &shape).unwrap().with_grad();
        i += 1;
    });
    Ok(norm)
}

// ---------------------------------------------------------------------------
// training driver
// ---------------------------------------------------------------------------

/// Which stream takes the `<null>` filler when an odd-length target is
/// split for two-stream training.
///
/// Drawing the side at random smooths both streams equally, but it also
/// makes the side unpredictable from context, so training drives both
/// streams to a 50/50 tie at the meeting token. The streams cannot see each
/// other's same-round choice while decoding, so greedy search resolves that
/// tie by accident and drops or duplicates the middle token on roughly half
/// of the odd-length outputs. Fixing the side keeps the meeting
/// deterministic; the filler mechanism itself is unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NullSidePolicy {
    /// Draw the side per example, re-drawn each epoch.
    Random,
    /// The forward stream always takes the filler.
    Fwd,
    /// The backward stream always takes the filler.
    Bwd,
}

impl FromStr for NullSidePolicy {
    type Err = SbsgError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(NullSidePolicy::Random),
            "fwd" => Ok(NullSidePolicy::Fwd),
            "bwd" => Ok(NullSidePolicy::Bwd),
            other => Err(SbsgError::Config(format!(
                "unknown null side '{other}' (expected random, fwd or bwd)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainHyper {
    pub batch_size: usize,
    pub max_steps: usize,
    pub warmup: usize,
    pub label_smoothing: f64,
    pub clip_norm: f64,
    /// Steps between dev evaluations / log lines.
    pub log_every: usize,
    /// Odd-length filler placement; ignored by single-stream training.
    pub null_side: NullSidePolicy,
}

impl TrainHyper {
    pub fn desk_default() -> Self {
        TrainHyper {
            batch_size: 32,
            max_steps: 3000,
            warmup: 400,
            label_smoothing: 0.1,
            clip_norm: 1.0,
            log_every: 200,
            null_side: NullSidePolicy::Bwd,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_steps == 0 || self.warmup == 0 || self.log_every == 0
        {
            return Err(SbsgError::Config(
                "batch_size, max_steps, warmup and log_every must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(SbsgError::Config(format!(
                "label smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        if self.clip_norm <= 0.0 {
            return Err(SbsgError::Config(format!(
                "clip norm {} must be positive",
                self.clip_norm
            )));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct TrainReport {
    /// One `step<TAB>loss<TAB>lr<TAB>dev_metric` line per evaluation.
    pub lines: Vec<String>,
    pub best_metric: f64,
    pub best_step: usize,
    pub final_loss: f64,
}

// Independent rng streams per purpose, all derived from the run seed.
const TAG_SPLIT: u64 = 1;
const TAG_DROPOUT: u64 = 2;
const TAG_SHUFFLE: u64 = 3;

fn mix_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed
        ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Single-stream analogue of [`Batch`] for the baseline decoders.
struct UniBatch {
    src_ids: Vec<u32>,
    src_lens: Vec<usize>,
    tgt_in: Vec<u32>,
    tgt_out: Vec<u32>,
    mask: Vec<bool>,
}

fn make_uni_batch(
    pairs: &[(Vec<String>, Vec<String>)],
    vocab: &Vocabulary,
    mode: Mode,
) -> Result<UniBatch> {
    if pairs.is_empty() {
        return Err(SbsgError::Input("cannot batch zero examples".into()));
    }
    let start = if mode == Mode::R2L { R2L_ID } else { L2R_ID };
    let mut streams = Vec::with_capacity(pairs.len());
    let mut src_token_ids = Vec::with_capacity(pairs.len());
    for (src, tgt) in pairs {
        let mut ids = vocab.encode(tgt);
        if mode == Mode::R2L {
            ids.reverse();
        }
        let mut stream = Vec::with_capacity(ids.len() + 2);
        stream.push(start);
        stream.extend_from_slice(&ids);
        stream.push(EOS_ID);
        streams.push(stream);
        src_token_ids.push(vocab.encode(src));
    }
    let m = src_token_ids.iter().map(Vec::len).max().unwrap();
    let q = streams.iter().map(|s| s.len() - 1).max().unwrap();
    let b = pairs.len();
    let mut out = UniBatch {
        src_ids: vec![PAD_ID; b * m],
        src_lens: Vec::with_capacity(b),
        tgt_in: vec![PAD_ID; b * q],
        tgt_out: vec![PAD_ID; b * q],
        mask: vec![false; b * q],
    };
    for (row, (src, stream)) in src_token_ids.iter().zip(&streams).enumerate() {
        out.src_ids[row * m..row * m + src.len()].copy_from_slice(src);
        out.src_lens.push(src.len());
        let n = stream.len() - 1;
        out.tgt_in[row * q..row * q + n].copy_from_slice(&stream[..n]);
        out.tgt_out[row * q..row * q + n].copy_from_slice(&stream[1..]);
        for flag in &mut out.mask[row * q..row * q + n] {
            *flag = true;
        }
    }
    Ok(out)
}

/// Greedy exact-match rate over (source ids, reference ids) pairs.
fn dev_exact_match(
    dev: &[(Vec<u32>, Vec<u32>)],
    params: &Params,
    config: &ModelConfig,
    max_len: usize,
) -> Result<f64> {
    if dev.is_empty() {
        return Ok(0.0);
    }
    let dcfg = DecodeConfig::greedy(max_len);
    let mut hits = 0usize;
    for (src, reference) in dev {
        let got = translate_ids(src, params, config, &dcfg)?;
        if &got.tokens == reference {
            hits += 1;
        }
    }
    Ok(hits as f64 / dev.len() as f64)
}

/// Emission budget per stream that comfortably covers every target in the
/// corpus, clamped to the position table.
fn stream_budget(
    data: &[&[(Vec<String>, Vec<String>)]],
    config: &ModelConfig,
) -> usize {
    let longest = data
        .iter()
        .flat_map(|part| part.iter())
        .map(|(_, tgt)| tgt.len())
        .max()
        .unwrap_or(1);
    let per_stream = match config.mode {
        Mode::Bidirectional => longest.div_ceil(2) + 1,
        _ => longest + 1,
    };
    (per_stream + 1).min(config.max_positions).max(2)
}

/// Trains a model from scratch and writes the best-dev checkpoint to
/// `ckpt_path` (by greedy exact match, evaluated every `log_every` steps and
/// at the final step). `log` receives each progress line as it is produced.
#[allow(clippy::too_many_arguments)]
pub fn train(
    config: &ModelConfig,
    hyper: &TrainHyper,
    train_pairs: &[(Vec<String>, Vec<String>)],
    dev_pairs: &[(Vec<String>, Vec<String>)],
    vocab: &Vocabulary,
    seed: u64,
    ckpt_path: &Path,
    log: &mut dyn FnMut(&str),
) -> Result<TrainReport> {
    config.validate()?;
    hyper.validate()?;
    if train_pairs.is_empty() {
        return Err(SbsgError::Input("training set is empty".into()));
    }
    if vocab.size() != config.vocab_size {
        return Err(SbsgError::Config(format!(
            "vocabulary has {} entries but the model expects {}",
            vocab.size(),
            config.vocab_size
        )));
    }

    let mut params = init_params(config, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let mut opt = OptimizerState::new(&params);
    let dev: Vec<(Vec<u32>, Vec<u32>)> = dev_pairs
        .iter()
        .map(|(s, t)| (vocab.encode(s), vocab.encode(t)))
        .collect();
    let budget = stream_budget(&[train_pairs, dev_pairs], config);

    let mut report = TrainReport {
        lines: Vec::new(),
        best_metric: f64::NEG_INFINITY,
        best_step: 0,
        final_loss: f64::NAN,
    };
    let mut step = 0usize;
    let mut last_loss = f64::NAN;

    'outer: for epoch in 0u64.. {
        let mut order: Vec<usize> = (0..train_pairs.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, TAG_SHUFFLE, epoch)));
        for chunk in order.chunks(hyper.batch_size) {
            step += 1;
            let rate = lr(step, hyper.warmup, config.d_model)?;
            let mut drop_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, TAG_DROPOUT, step as u64));
            let mut mode = ForwardMode::train(config, &mut drop_rng);

            let loss = if config.mode == Mode::Bidirectional {
                let mut examples = Vec::with_capacity(chunk.len());
                for &idx in chunk {
                    let (src, tgt) = &train_pairs[idx];
                    let ids = vocab.encode(tgt);
                    let target = match hyper.null_side {
                        NullSidePolicy::Random => {
                            let mut split_rng = ChaCha8Rng::seed_from_u64(mix_seed(
                                seed,
                                TAG_SPLIT,
                                epoch * train_pairs.len() as u64 + idx as u64,
                            ));
                            split_target(&ids, &mut split_rng)?
                        }
                        NullSidePolicy::Fwd => split_target_fixed(&ids, true)?,
                        NullSidePolicy::Bwd => split_target_fixed(&ids, false)?,
                    };
                    examples.push((src.clone(), target));
                }
                let batch = make_batch(&examples, vocab)?;
                let enc = encode(&batch.src_ids, &batch.src_lens, &params, config, &mut mode)?;
                let (lf, lb) = decode_bidirectional(
                    &batch.fwd_in,
                    &batch.bwd_in,
                    &enc,
                    &batch.src_lens,
                    &params,
                    config,
                    &mut mode,
                )?;
                joint_loss(&lf, &lb, &batch, hyper.label_smoothing)?
            } else {
                let pairs: Vec<(Vec<String>, Vec<String>)> =
                    chunk.iter().map(|&i| train_pairs[i].clone()).collect();
                let batch = make_uni_batch(&pairs, vocab, config.mode)?;
                let enc = encode(&batch.src_ids, &batch.src_lens, &params, config, &mut mode)?;
                let logits = decode_unidirectional(
                    &batch.tgt_in,
                    &enc,
                    &batch.src_lens,
                    &params,
                    config,
                    &mut mode,
                )?;
                single_stream_loss(&logits, &batch.tgt_out, &batch.mask, hyper.label_smoothing)?
            };
            last_loss = loss.item();
            loss.backward()?;
            adam_step(&mut params, &mut opt, rate, hyper.clip_norm)?;

            if step % hyper.log_every == 0 || step == hyper.max_steps {
                let metric = dev_exact_match(&dev, &params, config, budget)?;
                let line = format!("{step}\t{last_loss:.6}\t{rate:.6e}\t{metric:.4}");
                log(&line);
                report.lines.push(line);
                if metric > report.best_metric {
                    report.best_metric = metric;
                    report.best_step = step;
                    save_checkpoint(ckpt_path, config, &params)?;
                }
            }
            if step == hyper.max_steps {
                break 'outer;
            }
        }
    }
    report.final_loss = last_loss;
    Ok(report)
}

/// Rewrites a parallel corpus with a trained single-stream teacher's beam
/// output in place of each reference. Sources (and line count) are
/// preserved; if the teacher produces an empty line the original reference
/// is kept so the corpus stays well-formed.
pub fn distill(
    teacher: &(ModelConfig, Params),
    data: &[(Vec<String>, Vec<String>)],
    vocab: &Vocabulary,
    dcfg: &DecodeConfig,
) -> Result<Vec<(Vec<String>, Vec<String>)>> {
    let (config, params) = teacher;
    if config.mode == Mode::Bidirectional {
        return Err(SbsgError::Contract(
            "distillation teacher must be a single-stream model".into(),
        ));
    }
    dcfg.validate(config.mode)?;
    let mut out = Vec::with_capacity(data.len());
    for (src, tgt) in data {
        let result = translate_ids(&vocab.encode(src), params, config, dcfg)?;
        let hyp = vocab.decode(&result.tokens)?;
        if hyp.is_empty() {
            out.push((src.clone(), tgt.clone()));
        } else {
            out.push((src.clone(), hyp));
        }
    }
    Ok(out)
}
