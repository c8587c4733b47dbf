//! Search procedures: greedy and beam search for both decoder flavours.
//!
//! The two-stream searches advance a whole hypothesis set through one
//! batched [`incremental_step`] per round — forward streams in the first
//! half of the rows, their backward partners in the second half. A stream
//! that emits the end marker freezes: it keeps its accumulated log
//! probability, consumes padding from then on, and is masked out of its
//! partner's cross-attention. A pair whose streams are both frozen stays in
//! the beam as an unextendable candidate competing on its frozen score.
//!
//! Beam bookkeeping follows the usual two-phase scheme: during search,
//! pairs are ranked by raw joint log probability; only the final selection
//! divides by the length penalty `((5 + len) / 6)^alpha`. Ties are broken
//! by lowest token id (forward first), then lowest parent index, so results
//! are fully deterministic.

use crate::data::{stitch, EOS_ID, L2R_ID, PAD_ID, R2L_ID};
use crate::error::{Result, SbsgError};
use crate::model::{incremental_step, DecoderState, Mode, ModelConfig, Params};
use crate::tensor::Tensor;

/// How to decode. `beam: None` is greedy; `Some(k)` keeps `k` live streams
/// (so `k/2` hypothesis pairs in two-stream mode, where `k` must be even).
#[derive(Debug, Clone)]
pub struct DecodeConfig {
    pub beam: Option<usize>,
    /// Length-penalty exponent; 0 disables the penalty.
    pub alpha: f64,
    /// Emission budget per stream, including the end-marker attempt.
    pub max_len: usize,
}

impl DecodeConfig {
    pub fn greedy(max_len: usize) -> Self {
        DecodeConfig {
            beam: None,
            alpha: 0.0,
            max_len,
        }
    }

    pub fn beam(k: usize, alpha: f64, max_len: usize) -> Self {
        DecodeConfig {
            beam: Some(k),
            alpha,
            max_len,
        }
    }

    pub fn validate(&self, mode: Mode) -> Result<()> {
        if self.max_len < 2 {
            return Err(SbsgError::Config(format!(
                "max_len {} must be at least 2",
                self.max_len
            )));
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(SbsgError::Config(format!(
                "alpha {} must be finite and non-negative",
                self.alpha
            )));
        }
        match (self.beam, mode) {
            (Some(k), Mode::Bidirectional) if k < 2 || k % 2 != 0 => {
                Err(SbsgError::Config(format!(
                    "two-stream beam width {k} must be even and at least 2"
                )))
            }
            (Some(0), _) => Err(SbsgError::Config("beam width must be positive".into())),
            _ => Ok(()),
        }
    }
}

/// One decoded sentence.
#[derive(Debug, Clone)]
pub struct DecodeResult {
    /// Final surface ids: halves stitched, structural tokens removed.
    pub tokens: Vec<u32>,
    /// Raw forward-stream emissions (end marker stripped, fillers kept).
    pub fwd: Vec<u32>,
    /// Raw backward-stream emissions, still reversed. Empty for
    /// single-stream decodes.
    pub bwd: Vec<u32>,
    /// Raw joint log probability of the emissions.
    pub logp: f64,
    /// Length-penalized score the hypothesis won with; equals `logp` for
    /// greedy search.
    pub score: f64,
    /// Model invocations spent.
    pub steps: usize,
}

/// GNMT-style length penalty `((5 + len) / 6)^alpha`.
pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

/// Log-softmax of one logit row, plainly in f64.
fn log_probs(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|v| v - lse).collect()
}

/// Highest-probability token, ignoring padding; ties go to the lowest id.
fn argmax_skip_pad(lp: &[f64]) -> u32 {
    let mut best = u32::MAX;
    let mut best_lp = f64::NEG_INFINITY;
    for (v, &l) in lp.iter().enumerate() {
        if v as u32 != PAD_ID && l > best_lp {
            best = v as u32;
            best_lp = l;
        }
    }
    best
}

/// Top `width` tokens by log probability, padding excluded, ties by lowest
/// id.
fn top_tokens(lp: &[f64], width: usize) -> Vec<(u32, f64)> {
    let mut order: Vec<u32> = (0..lp.len() as u32).filter(|&v| v != PAD_ID).collect();
    order.sort_by(|&a, &b| {
        lp[b as usize]
            .total_cmp(&lp[a as usize])
            .then(a.cmp(&b))
    });
    order
        .into_iter()
        .take(width)
        .map(|v| (v, lp[v as usize]))
        .collect()
}

fn check_budget(dcfg: &DecodeConfig, config: &ModelConfig) -> Result<()> {
    if dcfg.max_len > config.max_positions {
        return Err(SbsgError::Contract(format!(
            "max_len {} exceeds the position table ({})",
            dcfg.max_len, config.max_positions
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// two-stream decoding
// ---------------------------------------------------------------------------

/// State of one live hypothesis pair.
#[derive(Debug, Clone)]
struct Pair {
    fwd: Vec<u32>, // emissions including the end marker once emitted
    bwd: Vec<u32>,
    logp_f: f64,
    logp_b: f64,
    done_f: bool,
    done_b: bool,
}

impl Pair {
    fn start() -> Self {
        Pair {
            fwd: Vec::new(),
            bwd: Vec::new(),
            logp_f: 0.0,
            logp_b: 0.0,
            done_f: false,
            done_b: false,
        }
    }

    fn done(&self) -> bool {
        self.done_f && self.done_b
    }

    fn logp(&self) -> f64 {
        self.logp_f + self.logp_b
    }

    /// Emission counts for the length penalty (end markers included).
    fn len(&self) -> usize {
        self.fwd.len() + self.bwd.len()
    }

    /// Next tokens to feed and which rows are live.
    fn feeds(&self) -> ((u32, bool), (u32, bool)) {
        let f = if self.done_f {
            (PAD_ID, false)
        } else {
            (*self.fwd.last().unwrap_or(&L2R_ID), true)
        };
        let b = if self.done_b {
            (PAD_ID, false)
        } else {
            (*self.bwd.last().unwrap_or(&R2L_ID), true)
        };
        (f, b)
    }
}

/// Greedy ends-inward decoding of one encoded sentence: each round both
/// streams take their argmax token, conditioned on each other's prefixes.
pub fn greedy_bidirectional(
    enc_out: &Tensor,
    params: &Params,
    config: &ModelConfig,
    max_len: usize,
) -> Result<DecodeResult> {
    let dcfg = DecodeConfig::greedy(max_len);
    dcfg.validate(config.mode)?;
    check_budget(&dcfg, config)?;
    if config.mode != Mode::Bidirectional {
        return Err(SbsgError::Contract(format!(
            "two-stream decode called on a {} model",
            config.mode
        )));
    }
    let vocab = config.vocab_size;
    let mut state = DecoderState::new(enc_out, 2, params, config)?;
    let mut pair = Pair::start();
    let mut steps = 0;
    for _ in 0..max_len {
        if pair.done() {
            break;
        }
        let ((tf, af), (tb, ab)) = pair.feeds();
        let (logits, next) = incremental_step(&state, &[tf, tb], &[af, ab], params, config)?;
        state = next;
        steps += 1;
        if af {
            let lp = log_probs(&logits[..vocab]);
            let tok = argmax_skip_pad(&lp);
            pair.logp_f += lp[tok as usize];
            pair.fwd.push(tok);
            pair.done_f = tok == EOS_ID;
        }
        if ab {
            let lp = log_probs(&logits[vocab..]);
            let tok = argmax_skip_pad(&lp);
            pair.logp_b += lp[tok as usize];
            pair.bwd.push(tok);
            pair.done_b = tok == EOS_ID;
        }
    }
    Ok(finish_pair(pair, steps, 0.0))
}

fn finish_pair(pair: Pair, steps: usize, alpha: f64) -> DecodeResult {
    let tokens = stitch(&pair.fwd, &pair.bwd);
    let strip = |v: &[u32]| -> Vec<u32> {
        v.iter().copied().filter(|&t| t != EOS_ID).collect()
    };
    let logp = pair.logp();
    DecodeResult {
        tokens,
        fwd: strip(&pair.fwd),
        bwd: strip(&pair.bwd),
        logp,
        score: logp / length_penalty(pair.len(), alpha),
        steps,
    }
}

/// One candidate extension considered during a beam round. `None` tokens
/// mean the stream (or whole pair) is frozen and contributes its stored
/// score unchanged.
struct Candidate {
    parent: usize,
    tok_f: Option<(u32, f64)>,
    tok_b: Option<(u32, f64)>,
    logp: f64,
}

impl Candidate {
    fn order_key(&self) -> (u32, u32, usize) {
        let f = self.tok_f.map_or(u32::MAX, |(t, _)| t);
        let b = self.tok_b.map_or(u32::MAX, |(t, _)| t);
        (f, b, self.parent)
    }
}

/// Beam search over hypothesis pairs. Keeps `k/2` pairs; each round every
/// live stream proposes its top `ceil(sqrt(k))` tokens, the per-pair cross
/// product is capped at `k` candidates, and the global pool is cut back to
/// `k/2` pairs by raw joint log probability. The final winner maximizes the
/// length-penalized joint score.
pub fn beam_bidirectional(
    enc_out: &Tensor,
    params: &Params,
    config: &ModelConfig,
    dcfg: &DecodeConfig,
) -> Result<DecodeResult> {
    dcfg.validate(config.mode)?;
    check_budget(dcfg, config)?;
    if config.mode != Mode::Bidirectional {
        return Err(SbsgError::Contract(format!(
            "two-stream decode called on a {} model",
            config.mode
        )));
    }
    let k = match dcfg.beam {
        Some(k) => k,
        None => return greedy_bidirectional(enc_out, params, config, dcfg.max_len),
    };
    let half = k / 2;
    let width = (k as f64).sqrt().ceil() as usize;
    let vocab = config.vocab_size;

    let mut pairs = vec![Pair::start()];
    let mut state = DecoderState::new(enc_out, 2, params, config)?;
    let mut steps = 0;

    for _ in 0..dcfg.max_len {
        if pairs.iter().all(Pair::done) {
            break;
        }
        let live = pairs.len();
        let mut ids = vec![PAD_ID; 2 * live];
        let mut active = vec![false; 2 * live];
        for (i, pair) in pairs.iter().enumerate() {
            let ((tf, af), (tb, ab)) = pair.feeds();
            ids[i] = tf;
            active[i] = af;
            ids[live + i] = tb;
            active[live + i] = ab;
        }
        let (logits, next) = incremental_step(&state, &ids, &active, params, config)?;
        steps += 1;

        let mut pool: Vec<Candidate> = Vec::new();
        for (i, pair) in pairs.iter().enumerate() {
            if pair.done() {
                pool.push(Candidate {
                    parent: i,
                    tok_f: None,
                    tok_b: None,
                    logp: pair.logp(),
                });
                continue;
            }
            let opts_f: Vec<Option<(u32, f64)>> = if pair.done_f {
                vec![None]
            } else {
                let lp = log_probs(&logits[i * vocab..(i + 1) * vocab]);
                top_tokens(&lp, width).into_iter().map(Some).collect()
            };
            let opts_b: Vec<Option<(u32, f64)>> = if pair.done_b {
                vec![None]
            } else {
                let lp = log_probs(&logits[(live + i) * vocab..(live + i + 1) * vocab]);
                top_tokens(&lp, width).into_iter().map(Some).collect()
            };
            let mut local: Vec<Candidate> = Vec::with_capacity(opts_f.len() * opts_b.len());
            for &of in &opts_f {
                for &ob in &opts_b {
                    let logp = pair.logp()
                        + of.map_or(0.0, |(_, l)| l)
                        + ob.map_or(0.0, |(_, l)| l);
                    local.push(Candidate {
                        parent: i,
                        tok_f: of,
                        tok_b: ob,
                        logp,
                    });
                }
            }
            local.sort_by(|a, b| b.logp.total_cmp(&a.logp).then(a.order_key().cmp(&b.order_key())));
            local.truncate(k);
            pool.extend(local);
        }
        pool.sort_by(|a, b| b.logp.total_cmp(&a.logp).then(a.order_key().cmp(&b.order_key())));
        pool.truncate(half);

        let mut new_pairs = Vec::with_capacity(pool.len());
        let mut parent_rows = Vec::with_capacity(2 * pool.len());
        for cand in &pool {
            let mut pair = pairs[cand.parent].clone();
            if let Some((tok, lp)) = cand.tok_f {
                pair.logp_f += lp;
                pair.fwd.push(tok);
                pair.done_f = tok == EOS_ID;
            }
            if let Some((tok, lp)) = cand.tok_b {
                pair.logp_b += lp;
                pair.bwd.push(tok);
                pair.done_b = tok == EOS_ID;
            }
            new_pairs.push(pair);
        }
        for cand in &pool {
            parent_rows.push(cand.parent);
        }
        for cand in &pool {
            parent_rows.push(live + cand.parent);
        }
        // Order matters: forward rows of all pairs first, then their
        // partners, so row i still faces row i + pairs.len().
        let (fwd_rows, bwd_rows) = parent_rows.split_at(pool.len());
        let mut rows = fwd_rows.to_vec();
        rows.extend_from_slice(bwd_rows);
        state = next.select_rows(&rows)?;
        pairs = new_pairs;
    }

    // Final selection by penalized score; the beam is already sorted by the
    // deterministic candidate order, so the first maximum wins ties.
    let best = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| (p.logp() / length_penalty(p.len(), dcfg.alpha), i))
        .max_by(|(sa, ia), (sb, ib)| sa.total_cmp(sb).then(ib.cmp(ia)))
        .map(|(_, i)| i)
        .expect("beam never empties");
    Ok(finish_pair(pairs[best].clone(), steps, dcfg.alpha))
}

// ---------------------------------------------------------------------------
// single-stream decoding
// ---------------------------------------------------------------------------

fn start_marker(mode: Mode) -> Result<u32> {
    match mode {
        Mode::L2R => Ok(L2R_ID),
        Mode::R2L => Ok(R2L_ID),
        Mode::Bidirectional => Err(SbsgError::Contract(
            "single-stream decode called on a bidirectional model".into(),
        )),
    }
}

#[derive(Debug, Clone)]
struct Beam {
    toks: Vec<u32>,
    logp: f64,
    done: bool,
}

/// Finalizes a single-stream hypothesis: strip the end marker and
/// structural tokens, un-reverse right-to-left output.
fn finish_stream(beam: Beam, mode: Mode, steps: usize, alpha: f64) -> DecodeResult {
    let mut tokens = stitch(&beam.toks, &[]);
    if mode == Mode::R2L {
        tokens.reverse();
    }
    let fwd: Vec<u32> = beam.toks.iter().copied().filter(|&t| t != EOS_ID).collect();
    let score = beam.logp / length_penalty(beam.toks.len(), alpha);
    DecodeResult {
        tokens,
        fwd,
        bwd: Vec::new(),
        logp: beam.logp,
        score,
        steps,
    }
}

/// Greedy single-stream decoding (the `k = 1` beam).
pub fn greedy_unidirectional(
    enc_out: &Tensor,
    params: &Params,
    config: &ModelConfig,
    max_len: usize,
) -> Result<DecodeResult> {
    let dcfg = DecodeConfig::greedy(max_len);
    dcfg.validate(config.mode)?;
    check_budget(&dcfg, config)?;
    let start = start_marker(config.mode)?;
    let vocab = config.vocab_size;
    let mut state = DecoderState::new(enc_out, 1, params, config)?;
    let mut beam = Beam {
        toks: Vec::new(),
        logp: 0.0,
        done: false,
    };
    let mut steps = 0;
    for _ in 0..max_len {
        if beam.done {
            break;
        }
        let feed = *beam.toks.last().unwrap_or(&start);
        let (logits, next) = incremental_step(&state, &[feed], &[true], params, config)?;
        state = next;
        steps += 1;
        let lp = log_probs(&logits[..vocab]);
        let tok = argmax_skip_pad(&lp);
        beam.logp += lp[tok as usize];
        beam.toks.push(tok);
        beam.done = tok == EOS_ID;
    }
    Ok(finish_stream(beam, config.mode, steps, 0.0))
}

/// Standard beam search for the single-stream baselines. Candidates are
/// ranked by raw log probability during search and by the length-penalized
/// score at the end; ties break to the lowest token id, then the lowest
/// parent index.
pub fn beam_unidirectional(
    enc_out: &Tensor,
    params: &Params,
    config: &ModelConfig,
    dcfg: &DecodeConfig,
) -> Result<DecodeResult> {
    dcfg.validate(config.mode)?;
    check_budget(dcfg, config)?;
    let start = start_marker(config.mode)?;
    let k = match dcfg.beam {
        Some(k) => k,
        None => return greedy_unidirectional(enc_out, params, config, dcfg.max_len),
    };
    let vocab = config.vocab_size;
    let mut beams = vec![Beam {
        toks: Vec::new(),
        logp: 0.0,
        done: false,
    }];
    let mut state = DecoderState::new(enc_out, 1, params, config)?;
    let mut steps = 0;

    for _ in 0..dcfg.max_len {
        if beams.iter().all(|b| b.done) {
            break;
        }
        let live = beams.len();
        let mut ids = vec![PAD_ID; live];
        let mut active = vec![false; live];
        for (i, beam) in beams.iter().enumerate() {
            if !beam.done {
                ids[i] = *beam.toks.last().unwrap_or(&start);
                active[i] = true;
            }
        }
        let (logits, next) = incremental_step(&state, &ids, &active, params, config)?;
        steps += 1;

        // (logp, token, parent): frozen beams carry a None token.
        let mut pool: Vec<(f64, Option<(u32, f64)>, usize)> = Vec::new();
        for (i, beam) in beams.iter().enumerate() {
            if beam.done {
                pool.push((beam.logp, None, i));
            } else {
                let row = log_probs(&logits[i * vocab..(i + 1) * vocab]);
                for (tok, lp) in top_tokens(&row, k) {
                    pool.push((beam.logp + lp, Some((tok, lp)), i));
                }
            }
        }
        pool.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| {
                    let ta = a.1.map_or(u32::MAX, |(t, _)| t);
                    let tb = b.1.map_or(u32::MAX, |(t, _)| t);
                    ta.cmp(&tb)
                })
                .then(a.2.cmp(&b.2))
        });
        pool.truncate(k);

        let mut new_beams = Vec::with_capacity(pool.len());
        let mut rows = Vec::with_capacity(pool.len());
        for &(_, ext, parent) in &pool {
            let mut beam = beams[parent].clone();
            if let Some((tok, lp)) = ext {
                beam.logp += lp;
                beam.toks.push(tok);
                beam.done = tok == EOS_ID;
            }
            new_beams.push(beam);
            rows.push(parent);
        }
        state = next.select_rows(&rows)?;
        beams = new_beams;
    }

    let best = beams
        .iter()
        .enumerate()
        .map(|(i, b)| (b.logp / length_penalty(b.toks.len(), dcfg.alpha), i))
        .max_by(|(sa, ia), (sb, ib)| sa.total_cmp(sb).then(ib.cmp(ia)))
        .map(|(_, i)| i)
        .expect("beam never empties");
    Ok(finish_stream(
        beams[best].clone(),
        config.mode,
        steps,
        dcfg.alpha,
    ))
}

// ---------------------------------------------------------------------------
// one-call decoding
// ---------------------------------------------------------------------------

/// Encodes one source sentence and decodes it according to the model's mode
/// and the search settings.
pub fn translate_ids(
    src_ids: &[u32],
    params: &Params,
    config: &ModelConfig,
    dcfg: &DecodeConfig,
) -> Result<DecodeResult> {
    if src_ids.is_empty() {
        return Err(SbsgError::Input("cannot translate an empty sentence".into()));
    }
    let enc = crate::tensor::no_grad(|| {
        crate::model::encode(
            src_ids,
            &[src_ids.len()],
            params,
            config,
            &mut crate::model::ForwardMode::Eval,
        )
    })?;
    match (config.mode, dcfg.beam) {
        (Mode::Bidirectional, None) => greedy_bidirectional(&enc, params, config, dcfg.max_len),
        (Mode::Bidirectional, Some(_)) => beam_bidirectional(&enc, params, config, dcfg),
        (_, None) => greedy_unidirectional(&enc, params, config, dcfg.max_len),
        (_, Some(_)) => beam_unidirectional(&enc, params, config, dcfg),
    }
}

/// Replays recorded emissions through the incremental decoder and returns
/// the joint log probability the search should have accumulated; test and
/// audit hook for beam bookkeeping.
pub fn replay_joint_logp(
    enc_out: &Tensor,
    fwd: &[u32],
    bwd: &[u32],
    params: &Params,
    config: &ModelConfig,
) -> Result<f64> {
    let vocab = config.vocab_size;
    let mut state = DecoderState::new(enc_out, 2, params, config)?;
    let mut pair = Pair::start();
    let mut total = 0.0;
    let rounds = fwd.len().max(bwd.len());
    for t in 0..rounds {
        if pair.done() {
            break;
        }
        let ((tf, af), (tb, ab)) = pair.feeds();
        let (logits, next) = incremental_step(&state, &[tf, tb], &[af, ab], params, config)?;
        state = next;
        if af {
            let tok = *fwd.get(t).ok_or_else(|| {
                SbsgError::Contract("forward emissions end before the stream froze".into())
            })?;
            total += log_probs(&logits[..vocab])[tok as usize];
            pair.fwd.push(tok);
            pair.done_f = tok == EOS_ID;
        }
        if ab {
            let tok = *bwd.get(t).ok_or_else(|| {
                SbsgError::Contract("backward emissions end before the stream froze".into())
            })?;
            total += log_probs(&logits[vocab..])[tok as usize];
            pair.bwd.push(tok);
            pair.done_b = tok == EOS_ID;
        }
    }
    Ok(total)
}
