//! Vocabulary, the halve-and-reverse target transform, batching, stitching,
//! and synthetic task generation.
//!
//! A target sentence is split into two streams that meet in the middle: the
//! forward stream carries the first half left-to-right, the backward stream
//! carries the second half right-to-left. Odd-length targets get a `<null>`
//! filler on a randomly chosen side so both streams always have equal
//! length; `<null>` is dropped again when the streams are stitched back
//! together.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SbsgError};

pub const PAD_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
pub const UNK_ID: u32 = 2;
pub const L2R_ID: u32 = 3;
pub const R2L_ID: u32 = 4;
pub const NULL_ID: u32 = 5;

/// The six reserved tokens, in id order.
pub const RESERVED_TOKENS: [&str; 6] = ["<pad>", "<eos>", "<unk>", "<l2r>", "<r2l>", "<null>"];

/// Token/id bijection. Ids 0..=5 are reserved; real tokens follow ordered
/// by descending corpus frequency, ties broken lexicographically.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_token_list(tokens: Vec<String>) -> Result<Vocabulary> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), i as u32).is_some() {
                return Err(SbsgError::Vocab(format!("duplicate token {tok:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Builds a vocabulary from token sequences, capped at `max_size` total
    /// entries (including the six reserved ids).
    pub fn build<'a, I>(sequences: I, max_size: usize) -> Result<Vocabulary>
    where
        I: IntoIterator<Item = &'a Vec<String>>,
    {
        if max_size <= RESERVED_TOKENS.len() {
            return Err(SbsgError::Config(format!(
                "vocabulary size {max_size} leaves no room for real tokens"
            )));
        }
        let mut counts: HashMap<&str, u64> = HashMap::new();
        let mut saw_any = false;
        for seq in sequences {
            saw_any = true;
            for tok in seq {
                *counts.entry(tok.as_str()).or_insert(0) += 1;
            }
        }
        if !saw_any {
            return Err(SbsgError::Input("empty corpus".into()));
        }
        let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(
            ranked
                .into_iter()
                .take(max_size - RESERVED_TOKENS.len())
                .map(|(t, _)| t.to_string()),
        );
        Self::from_token_list(tokens)
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    /// Id of a token; unseen tokens map to `<unk>`.
    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or_else(|| {
                SbsgError::Vocab(format!(
                    "id {id} out of range for vocabulary of size {}",
                    self.tokens.len()
                ))
            })
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<String>> {
        ids.iter().map(|&i| self.token(i).map(str::to_string)).collect()
    }

    /// Writes one token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = self.tokens.join("\n");
        body.push('\n');
        fs::write(path, body).map_err(|e| SbsgError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Vocabulary> {
        let text = fs::read_to_string(path).map_err(|e| SbsgError::io(path, e))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < RESERVED_TOKENS.len() + 1 {
            return Err(SbsgError::Vocab(format!(
                "vocabulary file {} has only {} entries",
                path.display(),
                tokens.len()
            )));
        }
        for (i, want) in RESERVED_TOKENS.iter().enumerate() {
            if tokens[i] != *want {
                return Err(SbsgError::Vocab(format!(
                    "line {} of {} is {:?}, expected reserved token {want:?}",
                    i + 1,
                    path.display(),
                    tokens[i]
                )));
            }
        }
        Self::from_token_list(tokens)
    }
}

/// Which stream received the `<null>` filler for an odd-length target.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NullSide {
    None,
    Fwd,
    Bwd,
}

/// A target split into two equal-length directed streams. `fwd` starts with
/// `<l2r>`, `bwd` with `<r2l>`; both end with `<eos>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BidirectionalTarget {
    pub fwd: Vec<u32>,
    pub bwd: Vec<u32>,
    pub null_side: NullSide,
}

fn reject_reserved(y: &[u32]) -> Result<()> {
    if y.is_empty() {
        return Err(SbsgError::Input("cannot split an empty target".into()));
    }
    if let Some(&id) = y.iter().find(|&&id| (id as usize) < RESERVED_TOKENS.len()) {
        return Err(SbsgError::Input(format!(
            "target contains reserved token id {id}"
        )));
    }
    Ok(())
}

/// Deterministic core of `split_target`; `null_fwd` chooses the side that
/// takes the filler when the length is odd.
fn split_with_side(y: &[u32], null_fwd: bool) -> BidirectionalTarget {
    let n = y.len();
    let (mut fwd_toks, mut bwd_toks): (Vec<u32>, Vec<u32>);
    let null_side;
    if n % 2 == 0 {
        fwd_toks = y[..n / 2].to_vec();
        bwd_toks = y[n / 2..].iter().rev().copied().collect();
        null_side = NullSide::None;
    } else if null_fwd {
        // Forward keeps the shorter half and pads with <null> before <eos>.
        fwd_toks = y[..(n - 1) / 2].to_vec();
        fwd_toks.push(NULL_ID);
        bwd_toks = y[(n - 1) / 2..].iter().rev().copied().collect();
        null_side = NullSide::Fwd;
    } else {
        fwd_toks = y[..(n + 1) / 2].to_vec();
        bwd_toks = y[(n + 1) / 2..].iter().rev().copied().collect();
        bwd_toks.push(NULL_ID);
        null_side = NullSide::Bwd;
    }
    let mut fwd = Vec::with_capacity(fwd_toks.len() + 2);
    fwd.push(L2R_ID);
    fwd.append(&mut fwd_toks);
    fwd.push(EOS_ID);
    let mut bwd = Vec::with_capacity(bwd_toks.len() + 2);
    bwd.push(R2L_ID);
    bwd.append(&mut bwd_toks);
    bwd.push(EOS_ID);
    debug_assert_eq!(fwd.len(), bwd.len());
    BidirectionalTarget { fwd, bwd, null_side }
}

/// Splits a target id sequence into the two directed streams. Even lengths
/// split exactly in half; odd lengths draw the `<null>` side from `rng`.
pub fn split_target(y: &[u32], rng: &mut ChaCha8Rng) -> Result<BidirectionalTarget> {
    reject_reserved(y)?;
    let null_fwd = y.len() % 2 == 1 && rng.gen_bool(0.5);
    Ok(split_with_side(y, null_fwd))
}

/// Like [`split_target`] but with the `<null>` side of odd lengths fixed by
/// the caller instead of drawn at random.
pub fn split_target_fixed(y: &[u32], null_fwd: bool) -> Result<BidirectionalTarget> {
    reject_reserved(y)?;
    Ok(split_with_side(y, null_fwd))
}

/// Inverse of the split: truncates each stream at its first `<eos>`, strips
/// structural tokens (`<pad>`, `<l2r>`, `<r2l>`, `<null>`), and concatenates
/// the forward tokens with the reversed backward tokens.
pub fn stitch(fwd: &[u32], bwd: &[u32]) -> Vec<u32> {
    let clean = |stream: &[u32]| -> Vec<u32> {
        stream
            .iter()
            .take_while(|&&id| id != EOS_ID)
            .filter(|&&id| id != PAD_ID && id != L2R_ID && id != R2L_ID && id != NULL_ID)
            .copied()
            .collect()
    };
    let mut out = clean(fwd);
    out.extend(clean(bwd).into_iter().rev());
    out
}

/// A padded training batch with teacher-forcing shifts applied. All id
/// matrices are row-major; `loss_mask` is true exactly on positions where
/// `fwd_out`/`bwd_out` carry a real (non-pad) token.
#[derive(Clone, Debug)]
pub struct Batch {
    pub batch: usize,
    /// Padded source length m.
    pub src_len: usize,
    /// Padded shifted target length q.
    pub q: usize,
    pub src_ids: Vec<u32>,
    pub src_lens: Vec<usize>,
    pub fwd_in: Vec<u32>,
    pub fwd_out: Vec<u32>,
    pub bwd_in: Vec<u32>,
    pub bwd_out: Vec<u32>,
    /// Per-example shifted target length (stream length minus one).
    pub tgt_lens: Vec<usize>,
    pub loss_mask: Vec<bool>,
}

/// Encodes sources, pads everything to the batch maxima, and applies the
/// teacher-forcing shift (`*_in` drops the last token, `*_out` the first).
pub fn make_batch(
    pairs: &[(Vec<String>, BidirectionalTarget)],
    vocab: &Vocabulary,
) -> Result<Batch> {
    if pairs.is_empty() {
        return Err(SbsgError::Input("cannot batch zero examples".into()));
    }
    let batch = pairs.len();
    let src_len = pairs.iter().map(|(s, _)| s.len()).max().unwrap();
    let q = pairs.iter().map(|(_, t)| t.fwd.len() - 1).max().unwrap();
    if src_len == 0 {
        return Err(SbsgError::Input("batch contains an empty source".into()));
    }

    let mut b = Batch {
        batch,
        src_len,
        q,
        src_ids: vec![PAD_ID; batch * src_len],
        src_lens: Vec::with_capacity(batch),
        fwd_in: vec![PAD_ID; batch * q],
        fwd_out: vec![PAD_ID; batch * q],
        bwd_in: vec![PAD_ID; batch * q],
        bwd_out: vec![PAD_ID; batch * q],
        tgt_lens: Vec::with_capacity(batch),
        loss_mask: vec![false; batch * q],
    };
    for (i, (src, tgt)) in pairs.iter().enumerate() {
        let ids = vocab.encode(src);
        b.src_ids[i * src_len..i * src_len + ids.len()].copy_from_slice(&ids);
        b.src_lens.push(ids.len());
        debug_assert_eq!(tgt.fwd.len(), tgt.bwd.len());
        let ti = tgt.fwd.len() - 1;
        b.fwd_in[i * q..i * q + ti].copy_from_slice(&tgt.fwd[..ti]);
        b.fwd_out[i * q..i * q + ti].copy_from_slice(&tgt.fwd[1..]);
        b.bwd_in[i * q..i * q + ti].copy_from_slice(&tgt.bwd[..ti]);
        b.bwd_out[i * q..i * q + ti].copy_from_slice(&tgt.bwd[1..]);
        b.loss_mask[i * q..i * q + ti].iter_mut().for_each(|m| *m = true);
        b.tgt_lens.push(ti);
    }
    Ok(b)
}

/// The synthetic benchmark tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Copy,
    Reverse,
    Sort,
}

impl FromStr for TaskKind {
    type Err = SbsgError;

    fn from_str(s: &str) -> Result<TaskKind> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "sort" => Ok(TaskKind::Sort),
            other => Err(SbsgError::Config(format!(
                "unknown task {other:?} (expected copy, reverse, or sort)"
            ))),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Sort => "sort",
        })
    }
}

/// Target-side transform for one synthetic example.
fn task_target(task: TaskKind, src: &[u32]) -> Vec<u32> {
    match task {
        TaskKind::Copy => src.to_vec(),
        TaskKind::Reverse => src.iter().rev().copied().collect(),
        TaskKind::Sort => {
            let mut t = src.to_vec();
            t.sort_unstable();
            t
        }
    }
}

/// Generates `count` (source, target) token pairs for a synthetic task.
/// Tokens are the decimal strings of integers in `0..vocab_real_size`;
/// lengths are uniform over `len_range` (inclusive). Deterministic per seed.
pub fn synth_generate(
    task: TaskKind,
    count: usize,
    len_range: (usize, usize),
    vocab_real_size: usize,
    seed: u64,
) -> Result<Vec<(Vec<String>, Vec<String>)>> {
    let (lo, hi) = len_range;
    if lo == 0 || lo > hi {
        return Err(SbsgError::Config(format!(
            "invalid length range {lo}..={hi}"
        )));
    }
    if vocab_real_size == 0 {
        return Err(SbsgError::Config("vocab_real_size must be positive".into()));
    }
    use rand_chacha::rand_core::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = rng.gen_range(lo..=hi);
        let src: Vec<u32> = (0..len)
            .map(|_| rng.gen_range(0..vocab_real_size as u32))
            .collect();
        let tgt = task_target(task, &src);
        let to_tokens = |ids: &[u32]| ids.iter().map(u32::to_string).collect::<Vec<String>>();
        out.push((to_tokens(&src), to_tokens(&tgt)));
    }
    Ok(out)
}

/// Writes pairs as UTF-8 lines `src-tokens \t tgt-tokens`, space-separated.
pub fn write_tsv(path: &Path, pairs: &[(Vec<String>, Vec<String>)]) -> Result<()> {
    let mut body = String::new();
    for (src, tgt) in pairs {
        body.push_str(&src.join(" "));
        body.push('\t');
        body.push_str(&tgt.join(" "));
        body.push('\n');
    }
    fs::write(path, body).map_err(|e| SbsgError::io(path, e))
}

/// Reads a dataset written by `write_tsv`. Blank lines are skipped; any
/// other line must contain exactly one tab with tokens on both sides.
pub fn read_tsv(path: &Path) -> Result<Vec<(Vec<String>, Vec<String>)>> {
    let text = fs::read_to_string(path).map_err(|e| SbsgError::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (src, tgt) = match (fields.next(), fields.next(), fields.next()) {
            (Some(s), Some(t), None) => (s, t),
            _ => {
                return Err(SbsgError::Input(format!(
                    "{}:{}: expected exactly one tab",
                    path.display(),
                    lineno + 1
                )))
            }
        };
        let src: Vec<String> = src.split_whitespace().map(str::to_string).collect();
        let tgt: Vec<String> = tgt.split_whitespace().map(str::to_string).collect();
        if src.is_empty() || tgt.is_empty() {
            return Err(SbsgError::Input(format!(
                "{}:{}: empty source or target",
                path.display(),
                lineno + 1
            )));
        }
        out.push((src, tgt));
    }
    Ok(out)
}
