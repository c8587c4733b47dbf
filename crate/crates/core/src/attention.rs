//! Attention kernels: scaled dot-product attention, multi-head attention,
//! and their two-stream variants where a forward (left-to-right) and a
//! backward (right-to-left) decoder stream attend to each other's history.
//!
//! The two streams are carried as separate tensors throughout; cross-stream
//! keys at the same step are visible because both streams' states at step j
//! depend only on inputs up to j, so the usual causal mask applies unchanged
//! to own-stream and cross-stream keys alike.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SbsgError};
use crate::tensor::Tensor;

/// Additive pre-softmax penalty for disallowed keys. Large enough that the
/// exponent underflows to exactly 0.0 after max subtraction, so masked
/// positions get bit-exact zero weight.
pub const MASK_BIAS: f64 = -1e9;

/// Boolean attention mask over `[query_len, key_len]`; `true` means the
/// query may attend to the key.
#[derive(Clone, Debug)]
pub struct AttentionMask {
    allowed: Vec<bool>,
    query_len: usize,
    key_len: usize,
}

impl AttentionMask {
    /// Builds a mask from row-major flags. Every query row must keep at
    /// least one allowed key, otherwise softmax over that row is undefined.
    pub fn new(allowed: Vec<bool>, query_len: usize, key_len: usize) -> Result<AttentionMask> {
        if query_len == 0 || key_len == 0 {
            return Err(SbsgError::Contract(
                "attention mask dimensions must be positive".into(),
            ));
        }
        if allowed.len() != query_len * key_len {
            return Err(SbsgError::Dimension(format!(
                "mask flag count {} does not match {query_len}x{key_len}",
                allowed.len()
            )));
        }
        for q in 0..query_len {
            if !allowed[q * key_len..(q + 1) * key_len].iter().any(|&a| a) {
                return Err(SbsgError::Contract(format!(
                    "query row {q} has no allowed keys"
                )));
            }
        }
        Ok(AttentionMask { allowed, query_len, key_len })
    }

    pub fn query_len(&self) -> usize {
        self.query_len
    }

    pub fn key_len(&self) -> usize {
        self.key_len
    }

    pub fn is_allowed(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.key_len + key]
    }

    /// Additive bias tensor `[query_len, key_len]`: 0 where allowed,
    /// `MASK_BIAS` where not. Broadcasts over any leading batch/head dims.
    pub fn to_bias(&self) -> Tensor {
        let data = self
            .allowed
            .iter()
            .map(|&a| if a { 0.0 } else { MASK_BIAS })
            .collect();
        Tensor::new(data, &[self.query_len, self.key_len]).expect("mask shape is consistent")
    }
}

/// Lower-triangular mask: position j may attend to positions 0..=j.
pub fn make_causal_mask(len: usize) -> Result<AttentionMask> {
    if len == 0 {
        return Err(SbsgError::Contract("causal mask length must be >= 1".into()));
    }
    let mut allowed = vec![false; len * len];
    for q in 0..len {
        for k in 0..=q {
            allowed[q * len + k] = true;
        }
    }
    AttentionMask::new(allowed, len, len)
}

/// Per-example key-padding masks: every query may attend to exactly the
/// first `lengths[i]` key columns of example i. One mask per example,
/// each `[max_len, max_len]`.
pub fn make_padding_mask(lengths: &[usize], max_len: usize) -> Result<Vec<AttentionMask>> {
    if max_len == 0 {
        return Err(SbsgError::Contract("padding mask length must be >= 1".into()));
    }
    lengths
        .iter()
        .map(|&len| {
            if len == 0 || len > max_len {
                return Err(SbsgError::Contract(format!(
                    "example length {len} outside 1..={max_len}"
                )));
            }
            let mut row = vec![false; max_len];
            row[..len].iter_mut().for_each(|a| *a = true);
            let allowed: Vec<bool> = row.iter().cycle().take(max_len * max_len).copied().collect();
            AttentionMask::new(allowed, max_len, max_len)
        })
        .collect()
}

/// Dropout plumbing for attention weights: `None` disables it (inference),
/// `Some` carries the rate and the RNG that draws the keep mask.
pub(crate) type AttnDropout<'a> = Option<(f64, &'a mut ChaCha8Rng)>;

/// Reborrows a dropout handle so one RNG can feed several attention calls
/// in sequence.
pub(crate) fn reborrow<'a>(d: &'a mut AttnDropout<'_>) -> AttnDropout<'a> {
    d.as_mut().map(|(rate, rng)| (*rate, &mut **rng))
}

/// Core attention: `softmax(Q K^T / sqrt(d_k) + bias) V` with an optional
/// additive bias (broadcast over leading dims) and optional post-softmax
/// dropout. All public entry points funnel through here.
pub(crate) fn attend(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    bias: Option<&Tensor>,
    mut dropout: AttnDropout,
) -> Result<Tensor> {
    if q.ndim() < 2 || k.ndim() < 2 || v.ndim() < 2 {
        return Err(SbsgError::Dimension(
            "attention operands need at least 2 dims".into(),
        ));
    }
    let d_k = q.shape()[q.ndim() - 1];
    if k.shape()[k.ndim() - 1] != d_k {
        return Err(SbsgError::Dimension(format!(
            "query dim {d_k} does not match key dim {}",
            k.shape()[k.ndim() - 1]
        )));
    }
    let t = k.shape()[k.ndim() - 2];
    if v.shape()[v.ndim() - 2] != t {
        return Err(SbsgError::Dimension(format!(
            "key length {t} does not match value length {}",
            v.shape()[v.ndim() - 2]
        )));
    }
    let kt = transpose_last(k)?;
    let mut scores = q.matmul(&kt)?.scale(1.0 / (d_k as f64).sqrt());
    if let Some(bias) = bias {
        scores = scores.add(bias)?;
    }
    let mut weights = scores.softmax(scores.ndim() - 1)?;
    if let Some((rate, rng)) = dropout.as_mut() {
        if *rate > 0.0 {
            weights = weights.dropout(*rate, &mut || rng.gen::<f64>());
        }
    }
    weights.matmul(v)
}

fn transpose_last(x: &Tensor) -> Result<Tensor> {
    let mut axes: Vec<usize> = (0..x.ndim()).collect();
    let n = axes.len();
    axes.swap(n - 2, n - 1);
    x.permute(&axes)
}

fn check_mask_dims(q: &Tensor, k: &Tensor, mask: &AttentionMask) -> Result<()> {
    let ql = q.shape()[q.ndim() - 2];
    let kl = k.shape()[k.ndim() - 2];
    if mask.query_len() != ql || mask.key_len() != kl {
        return Err(SbsgError::Dimension(format!(
            "mask {}x{} does not cover queries {ql} x keys {kl}",
            mask.query_len(),
            mask.key_len()
        )));
    }
    Ok(())
}

/// Scaled dot-product attention over `[..., q, d_k] x [..., t, d_k] x
/// [..., t, d_v]`. Masked keys receive exactly zero weight.
pub fn sdpa(q: &Tensor, k: &Tensor, v: &Tensor, mask: &AttentionMask) -> Result<Tensor> {
    check_mask_dims(q, k, mask)?;
    attend(q, k, v, Some(&mask.to_bias()), None)
}

/// Multi-head projection parameters. The per-head projections are stored
/// fused: column block `i*d_k..(i+1)*d_k` of `wq`/`wk`/`wv` is head i's
/// matrix, which keeps the hot path a single matrix product per input.
#[derive(Clone, Debug)]
pub struct MultiHeadParams {
    pub wq: Tensor, // [d_model, h*d_k]
    pub wk: Tensor, // [d_model, h*d_k]
    pub wv: Tensor, // [d_model, h*d_k]
    pub wo: Tensor, // [h*d_k, d_model]
    pub heads: usize,
}

impl MultiHeadParams {
    pub fn new(wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor, heads: usize) -> Result<Self> {
        if wq.ndim() != 2 || wq.shape() != wk.shape() || wq.shape() != wv.shape() {
            return Err(SbsgError::Dimension(
                "q/k/v projections must be 2-d and identically shaped".into(),
            ));
        }
        let d_model = wq.shape()[0];
        if heads == 0 || d_model % heads != 0 {
            return Err(SbsgError::Dimension(format!(
                "head count {heads} must divide d_model {d_model}"
            )));
        }
        if wq.shape()[1] != d_model || wo.shape() != [d_model, wq.shape()[0]] {
            return Err(SbsgError::Dimension(format!(
                "projection shapes {:?}/{:?} do not agree with d_model {d_model}",
                wq.shape(),
                wo.shape()
            )));
        }
        Ok(MultiHeadParams { wq, wk, wv, wo, heads })
    }

    pub fn d_model(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn d_k(&self) -> usize {
        self.wq.shape()[1] / self.heads
    }

    /// Head i's query projection `[d_model, d_k]`.
    pub fn head_wq(&self, i: usize) -> Result<Tensor> {
        self.wq.narrow(1, i * self.d_k(), self.d_k())
    }

    pub fn head_wk(&self, i: usize) -> Result<Tensor> {
        self.wk.narrow(1, i * self.d_k(), self.d_k())
    }

    pub fn head_wv(&self, i: usize) -> Result<Tensor> {
        self.wv.narrow(1, i * self.d_k(), self.d_k())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().last() != Some(&self.d_model()) {
            return Err(SbsgError::Dimension(format!(
                "input last dim {:?} does not match d_model {}",
                x.shape().last(),
                self.d_model()
            )));
        }
        Ok(())
    }
}

/// Projects `[..., n, d_model]` to per-head form `[..., h, n, d_k]`.
pub(crate) fn split_heads(x: &Tensor, w: &Tensor, heads: usize) -> Result<Tensor> {
    let proj = x.matmul(w)?;
    let ndim = proj.ndim();
    let n = proj.shape()[ndim - 2];
    let d_k = proj.shape()[ndim - 1] / heads;
    let mut shape: Vec<usize> = proj.shape()[..ndim - 1].to_vec();
    shape.push(heads);
    shape.push(d_k);
    let split = proj.reshape(&shape)?;
    // [..., n, h, d_k] -> [..., h, n, d_k]
    let mut axes: Vec<usize> = (0..split.ndim()).collect();
    axes.swap(split.ndim() - 3, split.ndim() - 2);
    debug_assert_eq!(shape[split.ndim() - 3], n);
    split.permute(&axes)
}

/// Inverse of `split_heads` without the projection: `[..., h, n, d_k]` back
/// to `[..., n, h*d_k]`.
pub(crate) fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let ndim = x.ndim();
    let (h, n, d_k) = (x.shape()[ndim - 3], x.shape()[ndim - 2], x.shape()[ndim - 1]);
    let mut axes: Vec<usize> = (0..ndim).collect();
    axes.swap(ndim - 3, ndim - 2);
    let moved = x.permute(&axes)?;
    let mut shape: Vec<usize> = moved.shape()[..ndim - 2].to_vec();
    shape.push(h * d_k);
    let _ = n;
    moved.reshape(&shape)
}

/// Multi-head attention with an additive bias instead of a boolean mask;
/// the batched model paths build per-example biases directly.
pub(crate) fn mha_bias(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    bias: Option<&Tensor>,
    p: &MultiHeadParams,
    dropout: AttnDropout,
) -> Result<Tensor> {
    p.check_input(q)?;
    p.check_input(k)?;
    p.check_input(v)?;
    let qh = split_heads(q, &p.wq, p.heads)?;
    let kh = split_heads(k, &p.wk, p.heads)?;
    let vh = split_heads(v, &p.wv, p.heads)?;
    let ctx = attend(&qh, &kh, &vh, bias, dropout)?;
    merge_heads(&ctx)?.matmul(&p.wo)
}

/// Multi-head attention: h heads of `sdpa` on learned projections,
/// concatenated and projected by `wo`.
pub fn mha(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &AttentionMask,
    p: &MultiHeadParams,
) -> Result<Tensor> {
    check_mask_dims(q, k, mask)?;
    mha_bias(q, k, v, Some(&mask.to_bias()), p, None)
}

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(SbsgError::Dimension(format!(
            "{what} stream shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Two-stream scaled dot-product attention. Each stream attends to its own
/// history and, weighted by `lambda`, to the other stream's history under
/// the same mask:
///
/// ```text
/// H_f = sdpa(Q_f, K_f, V_f) + lambda * sdpa(Q_f, K_b, V_b)
/// H_b = sdpa(Q_b, K_b, V_b) + lambda * sdpa(Q_b, K_f, V_f)
/// ```
///
/// At `lambda == 0` the cross term is skipped entirely, so the result is
/// bit-identical to two independent `sdpa` calls.
#[allow(clippy::too_many_arguments)]
pub fn bsdpa(
    q_f: &Tensor,
    q_b: &Tensor,
    k_f: &Tensor,
    k_b: &Tensor,
    v_f: &Tensor,
    v_b: &Tensor,
    mask: &AttentionMask,
    lambda: f64,
) -> Result<(Tensor, Tensor)> {
    check_same_shape(q_f, q_b, "query")?;
    check_same_shape(k_f, k_b, "key")?;
    check_same_shape(v_f, v_b, "value")?;
    check_mask_dims(q_f, k_f, mask)?;
    let bias = mask.to_bias();
    bsdpa_bias(q_f, q_b, k_f, k_b, v_f, v_b, Some(&bias), lambda, None)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn bsdpa_bias(
    q_f: &Tensor,
    q_b: &Tensor,
    k_f: &Tensor,
    k_b: &Tensor,
    v_f: &Tensor,
    v_b: &Tensor,
    bias: Option<&Tensor>,
    lambda: f64,
    mut dropout: AttnDropout,
) -> Result<(Tensor, Tensor)> {
    // One RNG feeds all four attention maps, drawn in a fixed order.
    let own_f = attend(q_f, k_f, v_f, bias, reborrow(&mut dropout))?;
    let own_b = attend(q_b, k_b, v_b, bias, reborrow(&mut dropout))?;
    if lambda == 0.0 {
        return Ok((own_f, own_b));
    }
    let cross_f = attend(q_f, k_b, v_b, bias, reborrow(&mut dropout))?;
    let cross_b = attend(q_b, k_f, v_f, bias, dropout)?;
    Ok((
        own_f.add(&cross_f.scale(lambda))?,
        own_b.add(&cross_b.scale(lambda))?,
    ))
}

/// Two-stream multi-head self-attention over decoder states. Both streams
/// are projected by the SAME parameter set; per head the streams run
/// two-stream attention, heads are concatenated per stream and projected.
pub fn bi_mha_intra(
    s_f: &Tensor,
    s_b: &Tensor,
    mask: &AttentionMask,
    p: &MultiHeadParams,
    lambda: f64,
) -> Result<(Tensor, Tensor)> {
    check_same_shape(s_f, s_b, "decoder state")?;
    check_mask_dims(s_f, s_f, mask)?;
    let bias = mask.to_bias();
    bi_mha_intra_bias(s_f, s_b, Some(&bias), p, lambda, None)
}

pub(crate) fn bi_mha_intra_bias(
    s_f: &Tensor,
    s_b: &Tensor,
    bias: Option<&Tensor>,
    p: &MultiHeadParams,
    lambda: f64,
    dropout: AttnDropout,
) -> Result<(Tensor, Tensor)> {
    p.check_input(s_f)?;
    let qf = split_heads(s_f, &p.wq, p.heads)?;
    let kf = split_heads(s_f, &p.wk, p.heads)?;
    let vf = split_heads(s_f, &p.wv, p.heads)?;
    let qb = split_heads(s_b, &p.wq, p.heads)?;
    let kb = split_heads(s_b, &p.wk, p.heads)?;
    let vb = split_heads(s_b, &p.wv, p.heads)?;
    let (hf, hb) = bsdpa_bias(&qf, &qb, &kf, &kb, &vf, &vb, bias, lambda, dropout)?;
    Ok((
        merge_heads(&hf)?.matmul(&p.wo)?,
        merge_heads(&hb)?.matmul(&p.wo)?,
    ))
}
