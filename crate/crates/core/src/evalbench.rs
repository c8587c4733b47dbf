//! Corpus scoring and decoding-speed measurement.
//!
//! Scoring is deliberately plain: case-sensitive corpus BLEU over
//! pre-tokenized text with no smoothing, exact sequence match, and a
//! source-length bucket breakdown (the under-translation diagnostic: long
//! inputs tend to show shorter, worse hypotheses). The benchmark times
//! batch-1 greedy/beam decoding of two models on the same sentences and
//! reports the wall-clock ratio, with exact per-sentence step counts taken
//! from the decoder rather than re-derived.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Instant;

use crate::decoding::{translate_ids, DecodeConfig, DecodeResult};
use crate::error::{Result, SbsgError};
use crate::model::{ModelConfig, Params};

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

fn check_aligned(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(SbsgError::Input(format!(
            "{what}: {a} hypotheses against {b} references"
        )));
    }
    Ok(())
}

/// Corpus-level BLEU in [0, 100]: geometric mean of modified n-gram
/// precisions for n = 1..=max_n times the brevity penalty. No smoothing —
/// a single missing precision level zeroes the score.
pub fn bleu(hyps: &[Vec<String>], refs: &[Vec<String>], max_n: usize) -> Result<f64> {
    check_aligned(hyps.len(), refs.len(), "bleu")?;
    if hyps.is_empty() {
        return Err(SbsgError::Input("bleu over an empty corpus".into()));
    }
    if max_n == 0 {
        return Err(SbsgError::Config("bleu needs max_n >= 1".into()));
    }
    let mut matched = vec![0u64; max_n];
    let mut proposed = vec![0u64; max_n];
    let (mut hyp_len, mut ref_len) = (0u64, 0u64);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len() as u64;
        ref_len += r.len() as u64;
        for n in 1..=max_n {
            let mut ref_counts: HashMap<&[String], u64> = HashMap::new();
            for g in r.windows(n) {
                *ref_counts.entry(g).or_insert(0) += 1;
            }
            for g in h.windows(n) {
                proposed[n - 1] += 1;
                if let Some(c) = ref_counts.get_mut(g) {
                    if *c > 0 {
                        *c -= 1;
                        matched[n - 1] += 1;
                    }
                }
            }
        }
    }
    if hyp_len == 0 || matched.iter().any(|&m| m == 0) || proposed.iter().any(|&p| p == 0) {
        return Ok(0.0);
    }
    let mean_log_p: f64 = (0..max_n)
        .map(|i| (matched[i] as f64 / proposed[i] as f64).ln())
        .sum::<f64>()
        / max_n as f64;
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * mean_log_p.exp())
}

/// Fraction of hypotheses that equal their reference token-for-token.
pub fn exact_match(hyps: &[Vec<String>], refs: &[Vec<String>]) -> Result<f64> {
    check_aligned(hyps.len(), refs.len(), "exact match")?;
    if hyps.is_empty() {
        return Err(SbsgError::Input("exact match over an empty corpus".into()));
    }
    let hits = hyps.iter().zip(refs).filter(|(h, r)| h == r).count();
    Ok(hits as f64 / hyps.len() as f64)
}

/// One source-length bucket: sentences whose source length falls in
/// `lo..=hi`, with the BLEU and mean hypothesis length of that slice.
#[derive(Debug, Clone)]
pub struct BucketRow {
    pub lo: usize,
    pub hi: usize,
    pub count: usize,
    pub bleu: f64,
    pub mean_hyp_len: f64,
}

/// Groups the corpus into source-length buckets [1,w], (w,2w], ... and
/// scores each slice separately. Empty buckets are omitted, so the counts
/// partition the corpus.
pub fn length_report(
    srcs: &[Vec<String>],
    hyps: &[Vec<String>],
    refs: &[Vec<String>],
    bucket_width: usize,
) -> Result<Vec<BucketRow>> {
    if bucket_width < 1 {
        return Err(SbsgError::Config("bucket width must be at least 1".into()));
    }
    check_aligned(hyps.len(), refs.len(), "length report")?;
    check_aligned(srcs.len(), hyps.len(), "length report sources")?;
    let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
    for (i, src) in srcs.iter().enumerate() {
        groups.entry(src.len().max(1).div_ceil(bucket_width) - 1).or_default().push(i);
    }
    let mut keys: Vec<usize> = groups.keys().copied().collect();
    keys.sort_unstable();
    let mut rows = Vec::with_capacity(keys.len());
    for k in keys {
        let members = &groups[&k];
        let h: Vec<Vec<String>> = members.iter().map(|&i| hyps[i].clone()).collect();
        let r: Vec<Vec<String>> = members.iter().map(|&i| refs[i].clone()).collect();
        let total_len: usize = h.iter().map(Vec::len).sum();
        rows.push(BucketRow {
            lo: k * bucket_width + 1,
            hi: (k + 1) * bucket_width,
            count: members.len(),
            bleu: bleu(&h, &r, 4)?,
            mean_hyp_len: total_len as f64 / members.len() as f64,
        });
    }
    Ok(rows)
}

/// Scores one hypothesis corpus against its references.
#[derive(Debug)]
pub struct EvalReport {
    pub bleu: f64,
    pub exact_match: f64,
    pub buckets: Vec<BucketRow>,
}

impl EvalReport {
    pub fn build(
        srcs: &[Vec<String>],
        hyps: &[Vec<String>],
        refs: &[Vec<String>],
        bucket_width: usize,
    ) -> Result<EvalReport> {
        Ok(EvalReport {
            bleu: bleu(hyps, refs, 4)?,
            exact_match: exact_match(hyps, refs)?,
            buckets: length_report(srcs, hyps, refs, bucket_width)?,
        })
    }

    /// Machine-readable `key=value` lines.
    pub fn key_values(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "bleu={:.4}", self.bleu);
        let _ = writeln!(out, "exact_match={:.4}", self.exact_match);
        let _ = writeln!(out, "buckets={}", self.buckets.len());
        for (i, b) in self.buckets.iter().enumerate() {
            let _ = writeln!(
                out,
                "bucket.{i}.src_len={}-{}\nbucket.{i}.count={}\nbucket.{i}.bleu={:.4}\nbucket.{i}.mean_hyp_len={:.4}",
                b.lo, b.hi, b.count, b.bleu, b.mean_hyp_len
            );
        }
        out
    }

    /// Human-readable summary table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "BLEU {:.2}   exact match {:.4}", self.bleu, self.exact_match);
        let _ = writeln!(out, "{:>12} {:>7} {:>8} {:>14}", "src length", "count", "BLEU", "mean hyp len");
        for b in &self.buckets {
            let _ = writeln!(
                out,
                "{:>12} {:>7} {:>8.2} {:>14.2}",
                format!("{}-{}", b.lo, b.hi),
                b.count,
                b.bleu,
                b.mean_hyp_len
            );
        }
        out
    }
}

// ---------------------------------------------------------------------------
// decoding-speed benchmark
// ---------------------------------------------------------------------------

/// Model invocations a decode of `out_len` surface tokens takes when the
/// decoder's streams stay balanced: both halves emit in lockstep and one
/// extra step produces the end markers.
pub fn nominal_steps(bidirectional: bool, out_len: usize) -> usize {
    if bidirectional {
        out_len.div_ceil(2) + 1
    } else {
        out_len + 1
    }
}

/// Measurements for one model over the benchmark corpus.
#[derive(Debug)]
pub struct BenchSide {
    /// Decoder label (the model's mode).
    pub model: String,
    /// Median wall-clock seconds for one full pass over the corpus.
    pub median_secs: f64,
    pub sentences_per_sec: f64,
    pub tokens_per_sec: f64,
    /// Exact decoder invocations per sentence, in corpus order.
    pub steps: Vec<usize>,
    /// Median per-sentence seconds across repetitions, in corpus order.
    pub sentence_secs: Vec<f64>,
    /// Surface tokens emitted per sentence.
    pub output_lens: Vec<usize>,
}

/// Side-by-side timing of a candidate decoder against a baseline.
#[derive(Debug)]
pub struct SpeedReport {
    pub candidate: BenchSide,
    pub baseline: BenchSide,
    /// baseline time / candidate time on the identical corpus.
    pub speedup: f64,
}

fn median(samples: &mut [f64]) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

fn bench_one(
    model: &(ModelConfig, Params),
    srcs: &[Vec<u32>],
    dcfg: &DecodeConfig,
    repetitions: usize,
    timing_batch: usize,
) -> Result<BenchSide> {
    let (config, params) = model;
    dcfg.validate(config.mode)?;

    // Untimed warmup pass; its outputs pin the expected step counts.
    let warmup: Vec<DecodeResult> = srcs
        .iter()
        .map(|s| translate_ids(s, params, config, dcfg))
        .collect::<Result<_>>()?;
    let steps: Vec<usize> = warmup.iter().map(|r| r.steps).collect();
    let output_lens: Vec<usize> = warmup.iter().map(|r| r.tokens.len()).collect();

    let mut per_sentence: Vec<Vec<f64>> = vec![Vec::with_capacity(repetitions); srcs.len()];
    let mut pass_secs = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let mut pass = 0.0;
        for (chunk_start, chunk) in (0..srcs.len()).step_by(timing_batch).map(|s| {
            (s, &srcs[s..(s + timing_batch).min(srcs.len())])
        }) {
            let t0 = Instant::now();
            for (offset, src) in chunk.iter().enumerate() {
                let result = translate_ids(src, params, config, dcfg)?;
                let i = chunk_start + offset;
                if result.steps != steps[i] {
                    return Err(SbsgError::Bench(format!(
                        "sentence {i} took {} steps in one run and {} in another",
                        steps[i], result.steps
                    )));
                }
            }
            let dt = t0.elapsed().as_secs_f64();
            for offset in 0..chunk.len() {
                per_sentence[chunk_start + offset].push(dt / chunk.len() as f64);
            }
            pass += dt;
        }
        pass_secs.push(pass);
    }
    let median_secs = median(&mut pass_secs);
    if median_secs <= 0.0 {
        return Err(SbsgError::Bench(
            "timer resolution too coarse: median pass time is zero".into(),
        ));
    }
    let total_tokens: usize = output_lens.iter().sum();
    Ok(BenchSide {
        model: config.mode.to_string(),
        median_secs,
        sentences_per_sec: srcs.len() as f64 / median_secs,
        tokens_per_sec: total_tokens as f64 / median_secs,
        steps,
        sentence_secs: per_sentence.iter_mut().map(|s| median(s)).collect(),
        output_lens,
    })
}

/// Times both models decoding the same sentences one at a time (latency
/// setting). The first pass per model is warmup and is not counted; the
/// reported time is the median over `repetitions` full passes.
/// `timing_batch` sentences share one timer read — 1 measures per-sentence
/// latency, larger values trade that resolution for throughput-style
/// aggregate timing.
pub fn bench_decode(
    candidate: &(ModelConfig, Params),
    baseline: &(ModelConfig, Params),
    srcs: &[Vec<u32>],
    dcfg: &DecodeConfig,
    repetitions: usize,
    timing_batch: usize,
) -> Result<SpeedReport> {
    if repetitions == 0 {
        return Err(SbsgError::Config("benchmark needs at least one repetition".into()));
    }
    if timing_batch == 0 {
        return Err(SbsgError::Config("timing batch must be positive".into()));
    }
    if srcs.is_empty() {
        return Err(SbsgError::Input("benchmark corpus is empty".into()));
    }
    if candidate.0.vocab_size != baseline.0.vocab_size {
        return Err(SbsgError::Input(format!(
            "models disagree on vocabulary size: {} vs {}",
            candidate.0.vocab_size, baseline.0.vocab_size
        )));
    }
    let candidate = bench_one(candidate, srcs, dcfg, repetitions, timing_batch)?;
    let baseline = bench_one(baseline, srcs, dcfg, repetitions, timing_batch)?;
    let speedup = baseline.median_secs / candidate.median_secs;
    Ok(SpeedReport { candidate, baseline, speedup })
}

impl SpeedReport {
    pub fn key_values(&self) -> String {
        let mut out = String::new();
        for (tag, side) in [("candidate", &self.candidate), ("baseline", &self.baseline)] {
            let _ = writeln!(out, "{tag}.model={}", side.model);
            let _ = writeln!(out, "{tag}.median_secs={:.6}", side.median_secs);
            let _ = writeln!(out, "{tag}.sentences_per_sec={:.4}", side.sentences_per_sec);
            let _ = writeln!(out, "{tag}.tokens_per_sec={:.4}", side.tokens_per_sec);
            let total: usize = side.steps.iter().sum();
            let _ = writeln!(out, "{tag}.total_steps={total}");
        }
        let _ = writeln!(out, "speedup={:.4}", self.speedup);
        out
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16} {:>12} {:>12} {:>12} {:>12}",
            "model", "sent/sec", "tok/sec", "median s", "total steps"
        );
        for side in [&self.candidate, &self.baseline] {
            let _ = writeln!(
                out,
                "{:<16} {:>12.2} {:>12.2} {:>12.4} {:>12}",
                side.model,
                side.sentences_per_sec,
                side.tokens_per_sec,
                side.median_secs,
                side.steps.iter().sum::<usize>()
            );
        }
        let _ = writeln!(out, "speedup={:.3}", self.speedup);
        out
    }

    /// One CSV row per (model, source-length bucket), plus a header.
    pub fn csv(&self, src_lens: &[usize], bucket_width: usize) -> Result<String> {
        if bucket_width < 1 {
            return Err(SbsgError::Config("bucket width must be at least 1".into()));
        }
        if src_lens.len() != self.candidate.steps.len() {
            return Err(SbsgError::Input(format!(
                "{} source lengths for a {}-sentence benchmark",
                src_lens.len(),
                self.candidate.steps.len()
            )));
        }
        let mut out = String::from(
            "model,src_len_lo,src_len_hi,count,mean_steps,mean_out_len,sentences_per_sec\n",
        );
        for side in [&self.candidate, &self.baseline] {
            let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
            for (i, len) in src_lens.iter().enumerate() {
                groups.entry((*len).max(1).div_ceil(bucket_width) - 1).or_default().push(i);
            }
            let mut keys: Vec<usize> = groups.keys().copied().collect();
            keys.sort_unstable();
            for k in keys {
                let members = &groups[&k];
                let n = members.len() as f64;
                let mean_steps: f64 =
                    members.iter().map(|&i| side.steps[i] as f64).sum::<f64>() / n;
                let mean_out: f64 =
                    members.iter().map(|&i| side.output_lens[i] as f64).sum::<f64>() / n;
                let secs: f64 = members.iter().map(|&i| side.sentence_secs[i]).sum();
                let rate = if secs > 0.0 { n / secs } else { f64::INFINITY };
                let _ = writeln!(
                    out,
                    "{},{},{},{},{:.2},{:.2},{:.4}",
                    side.model,
                    k * bucket_width + 1,
                    (k + 1) * bucket_width,
                    members.len(),
                    mean_steps,
                    mean_out,
                    rate
                );
            }
        }
        Ok(out)
    }
}
