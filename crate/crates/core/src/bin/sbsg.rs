//! Command-line front end: synthetic data generation, training,
//! translation, scoring, decoding-speed benchmarks, and sequence-level
//! distillation. Exit codes: 0 success, 1 usage/configuration error,
//! 2 runtime failure.

use std::fs::{self, File};
use std::io::{self, BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sbsg::config::RunConfig;
use sbsg::data::{read_tsv, synth_generate, write_tsv, Vocabulary};
use sbsg::decoding::translate_ids;
use sbsg::error::{Result, SbsgError};
use sbsg::evalbench::{bench_decode, EvalReport};
use sbsg::model::{load_checkpoint, ModelConfig, Params};
use sbsg::training::{distill, train};

#[derive(Parser)]
#[command(
    name = "sbsg",
    version,
    about = "Sequence-to-sequence toolkit whose decoder writes from both ends toward the middle"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic parallel corpus: train/dev/test.tsv plus vocab.txt.
    MakeData(MakeDataArgs),
    /// Train a model on a data directory and save the best checkpoint.
    Train(TrainArgs),
    /// Translate lines from a file or stdin, one output line per input line.
    Translate(TranslateArgs),
    /// Score a checkpoint on the test split: BLEU, exact match, length buckets.
    Evaluate(EvaluateArgs),
    /// Compare decoding speed of two checkpoints on the same sentences.
    Bench(BenchArgs),
    /// Rewrite a corpus with a trained teacher's decoded output as targets.
    Distill(DistillArgs),
}

/// Flags shared by every subcommand.
#[derive(Args)]
struct CommonOpts {
    /// Plain-text key=value config file, applied before the other flags.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for every random choice this command makes.
    #[arg(long)]
    seed: Option<u64>,
}

impl CommonOpts {
    fn build(&self) -> Result<RunConfig> {
        let mut rc = RunConfig::default();
        if let Some(path) = &self.config {
            rc.apply_file(path)?;
        }
        if let Some(seed) = self.seed {
            rc.seed = seed;
        }
        Ok(rc)
    }
}

/// Decoding flags shared by the commands that run a decoder.
#[derive(Args)]
struct DecodeOpts {
    /// Beam width; 0 or omitted keeps greedy decoding.
    #[arg(long)]
    beam: Option<usize>,
    /// Length-penalty strength for beam search.
    #[arg(long)]
    alpha: Option<f64>,
    /// Emission budget per decoder stream, end marker included.
    #[arg(long)]
    max_len: Option<usize>,
}

impl DecodeOpts {
    fn apply(&self, rc: &mut RunConfig) {
        if let Some(v) = self.beam {
            rc.beam = v;
        }
        if let Some(v) = self.alpha {
            rc.alpha = v;
        }
        if let Some(v) = self.max_len {
            rc.max_len = v;
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                SbsgError::Config(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::MakeData(args) => run_make_data(args),
        Command::Train(args) => run_train(args),
        Command::Translate(args) => run_translate(args),
        Command::Evaluate(args) => run_evaluate(args),
        Command::Bench(args) => run_bench(args),
        Command::Distill(args) => run_distill(args),
    }
}

fn require(path: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    path.ok_or_else(|| SbsgError::Config(format!("{what} must be given (flag or config file)")))
}

/// Loads a checkpoint and folds its architecture into the run config so the
/// remaining knobs are validated against the model actually on disk.
fn load_model(rc: &mut RunConfig, path: &Path) -> Result<(ModelConfig, Params)> {
    let (config, params) = load_checkpoint(path)?;
    rc.model = config.clone();
    rc.validate()?;
    Ok((config, params))
}

// ---------------------------------------------------------------------------
// make-data
// ---------------------------------------------------------------------------

#[derive(Args)]
struct MakeDataArgs {
    #[command(flatten)]
    common: CommonOpts,
    /// Transduction task: copy, reverse, or sort.
    #[arg(long)]
    task: Option<String>,
    /// Training examples to generate.
    #[arg(long)]
    count: Option<usize>,
    /// Development examples.
    #[arg(long)]
    dev_count: Option<usize>,
    /// Held-out test examples.
    #[arg(long)]
    test_count: Option<usize>,
    /// Shortest source length.
    #[arg(long)]
    len_lo: Option<usize>,
    /// Longest source length.
    #[arg(long)]
    len_hi: Option<usize>,
    /// Distinct non-reserved words in the synthetic vocabulary.
    #[arg(long)]
    vocab_real: Option<usize>,
    /// Output directory, created if missing.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

fn run_make_data(args: MakeDataArgs) -> Result<()> {
    let mut rc = args.common.build()?;
    if let Some(v) = &args.task {
        rc.task = v.parse()?;
    }
    if let Some(v) = args.count {
        rc.count = v;
    }
    if let Some(v) = args.dev_count {
        rc.dev_count = v;
    }
    if let Some(v) = args.test_count {
        rc.test_count = v;
    }
    if let Some(v) = args.len_lo {
        rc.len_lo = v;
    }
    if let Some(v) = args.len_hi {
        rc.len_hi = v;
    }
    if let Some(v) = args.vocab_real {
        rc.vocab_real = v;
    }
    if let Some(v) = args.out {
        rc.out = Some(v);
    }
    rc.validate()?;

    let out = rc.out.clone().unwrap_or_else(|| PathBuf::from("data"));
    let total = rc.count + rc.dev_count + rc.test_count;
    let pairs = synth_generate(rc.task, total, (rc.len_lo, rc.len_hi), rc.vocab_real, rc.seed)?;
    let (train_set, rest) = pairs.split_at(rc.count);
    let (dev_set, test_set) = rest.split_at(rc.dev_count);

    let vocab = Vocabulary::build(
        train_set.iter().flat_map(|(s, t)| [s, t]),
        rc.model.vocab_size,
    )?;

    fs::create_dir_all(&out).map_err(|e| SbsgError::io(&out, e))?;
    write_tsv(&out.join("train.tsv"), train_set)?;
    write_tsv(&out.join("dev.tsv"), dev_set)?;
    write_tsv(&out.join("test.tsv"), test_set)?;
    vocab.save(&out.join("vocab.txt"))?;

    println!(
        "wrote {} train / {} dev / {} test examples and a {}-token vocabulary to {}",
        train_set.len(),
        dev_set.len(),
        test_set.len(),
        vocab.size(),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonOpts,
    /// Data directory holding train.tsv, dev.tsv and vocab.txt.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Where the best checkpoint is written.
    #[arg(long, value_name = "PATH")]
    ckpt: Option<PathBuf>,
    /// Decoder layout: bidirectional, l2r, or r2l.
    #[arg(long)]
    mode: Option<String>,
    /// Cross-stream attention weight (bidirectional decoders only).
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    label_smoothing: Option<f64>,
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Steps between dev evaluations / progress lines.
    #[arg(long)]
    log_every: Option<usize>,
    /// Odd-length filler placement for two-stream training: bwd, fwd, or
    /// random.
    #[arg(long)]
    null_side: Option<String>,
}

fn run_train(args: TrainArgs) -> Result<()> {
    let mut rc = args.common.build()?;
    if let Some(v) = args.data {
        rc.data_dir = Some(v);
    }
    if let Some(v) = args.ckpt {
        rc.ckpt = Some(v);
    }
    if let Some(v) = &args.mode {
        rc.model.mode = v.parse()?;
    }
    if let Some(v) = args.lambda {
        rc.model.lambda = v;
    }
    if let Some(v) = args.dropout {
        rc.model.dropout = v;
    }
    if let Some(v) = args.layers {
        rc.model.layers = v;
    }
    if let Some(v) = args.d_model {
        rc.model.d_model = v;
    }
    if let Some(v) = args.heads {
        rc.model.heads = v;
    }
    if let Some(v) = args.d_ff {
        rc.model.d_ff = v;
    }
    if let Some(v) = args.batch_size {
        rc.hyper.batch_size = v;
    }
    if let Some(v) = args.max_steps {
        rc.hyper.max_steps = v;
    }
    if let Some(v) = args.warmup {
        rc.hyper.warmup = v;
    }
    if let Some(v) = args.label_smoothing {
        rc.hyper.label_smoothing = v;
    }
    if let Some(v) = args.clip_norm {
        rc.hyper.clip_norm = v;
    }
    if let Some(v) = args.log_every {
        rc.hyper.log_every = v;
    }
    if let Some(v) = &args.null_side {
        rc.hyper.null_side = v.parse()?;
    }
    rc.validate()?;

    let data = require(rc.data_dir.clone(), "--data")?;
    let ckpt = rc.ckpt.clone().unwrap_or_else(|| PathBuf::from("model.ckpt"));
    let train_set = read_tsv(&data.join("train.tsv"))?;
    let dev_set = read_tsv(&data.join("dev.tsv"))?;
    let vocab = Vocabulary::load(&data.join("vocab.txt"))?;

    let mut config = rc.model.clone();
    config.vocab_size = vocab.size();
    config.validate()?;

    println!("training {} on {} examples ({} dev)", config.mode, train_set.len(), dev_set.len());
    let report = train(
        &config,
        &rc.hyper,
        &train_set,
        &dev_set,
        &vocab,
        rc.seed,
        &ckpt,
        &mut |line| println!("{line}"),
    )?;
    println!(
        "best dev exact match {:.4} at step {}; checkpoint {}",
        report.best_metric,
        report.best_step,
        ckpt.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// translate
// ---------------------------------------------------------------------------

#[derive(Args)]
struct TranslateArgs {
    #[command(flatten)]
    common: CommonOpts,
    #[command(flatten)]
    decode: DecodeOpts,
    /// Checkpoint to decode with.
    #[arg(long, value_name = "PATH")]
    ckpt: Option<PathBuf>,
    /// Vocabulary file (vocab.txt from make-data).
    #[arg(long, value_name = "PATH")]
    vocab: Option<PathBuf>,
    /// Input file of whitespace-tokenized lines; stdin when omitted.
    #[arg(long, value_name = "PATH")]
    input: Option<PathBuf>,
    /// Output file; stdout when omitted.
    #[arg(long, value_name = "PATH")]
    output: Option<PathBuf>,
    /// Append the raw forward and backward half-sequences, tab-separated.
    #[arg(long)]
    dump_halves: bool,
}

fn run_translate(args: TranslateArgs) -> Result<()> {
    let mut rc = args.common.build()?;
    args.decode.apply(&mut rc);
    if let Some(v) = args.ckpt {
        rc.ckpt = Some(v);
    }
    if let Some(v) = args.vocab {
        rc.vocab = Some(v);
    }

    let ckpt = require(rc.ckpt.clone(), "--ckpt")?;
    let vocab_path = require(rc.vocab.clone(), "--vocab")?;
    let (config, params) = load_model(&mut rc, &ckpt)?;
    let vocab = Vocabulary::load(&vocab_path)?;
    let dcfg = rc.decode_config();

    let lines: Vec<String> = match &args.input {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| SbsgError::io(path, e))?;
            text.lines().map(str::to_string).collect()
        }
        None => {
            let mut lines = Vec::new();
            for line in io::stdin().lock().lines() {
                lines.push(line.map_err(|e| SbsgError::io(Path::new("<stdin>"), e))?);
            }
            lines
        }
    };

    let mut out: Box<dyn Write> = match &args.output {
        Some(path) => Box::new(BufWriter::new(
            File::create(path).map_err(|e| SbsgError::io(path, e))?,
        )),
        None => Box::new(io::stdout().lock()),
    };
    let out_path = args
        .output
        .clone()
        .unwrap_or_else(|| PathBuf::from("<stdout>"));
    let mut emit = |text: String| -> Result<()> {
        writeln!(out, "{text}").map_err(|e| SbsgError::io(&out_path, e))
    };

    for line in &lines {
        let tokens: Vec<String> = line.split_whitespace().map(str::to_string).collect();
        if tokens.is_empty() {
            emit(String::new())?;
            continue;
        }
        let result = translate_ids(&vocab.encode(&tokens), &params, &config, &dcfg)?;
        let mut rendered = vocab.decode(&result.tokens)?.join(" ");
        if args.dump_halves {
            let half = |ids: &[u32]| -> Result<String> {
                let words: Vec<&str> =
                    ids.iter().map(|&i| vocab.token(i)).collect::<Result<_>>()?;
                Ok(words.join(" "))
            };
            rendered = format!("{rendered}\t{}\t{}", half(&result.fwd)?, half(&result.bwd)?);
        }
        emit(rendered)?;
    }
    out.flush().map_err(|e| SbsgError::io(&out_path, e))
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: CommonOpts,
    #[command(flatten)]
    decode: DecodeOpts,
    /// Checkpoint to score.
    #[arg(long, value_name = "PATH")]
    ckpt: Option<PathBuf>,
    /// Data directory with test.tsv and vocab.txt.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Source-length bucket width for the breakdown table.
    #[arg(long)]
    bucket_width: Option<usize>,
}

fn run_evaluate(args: EvaluateArgs) -> Result<()> {
    let mut rc = args.common.build()?;
    args.decode.apply(&mut rc);
    if let Some(v) = args.ckpt {
        rc.ckpt = Some(v);
    }
    if let Some(v) = args.data {
        rc.data_dir = Some(v);
    }
    if let Some(v) = args.bucket_width {
        rc.bucket_width = v;
    }

    let ckpt = require(rc.ckpt.clone(), "--ckpt")?;
    let data = require(rc.data_dir.clone(), "--data")?;
    let (config, params) = load_model(&mut rc, &ckpt)?;
    let vocab = match &rc.vocab {
        Some(path) => Vocabulary::load(path)?,
        None => Vocabulary::load(&data.join("vocab.txt"))?,
    };
    let test_set = read_tsv(&data.join("test.tsv"))?;
    let dcfg = rc.decode_config();

    let mut srcs = Vec::with_capacity(test_set.len());
    let mut hyps = Vec::with_capacity(test_set.len());
    let mut refs = Vec::with_capacity(test_set.len());
    for (src, reference) in &test_set {
        let result = translate_ids(&vocab.encode(src), &params, &config, &dcfg)?;
        hyps.push(vocab.decode(&result.tokens)?);
        srcs.push(src.clone());
        refs.push(reference.clone());
    }

    let report = EvalReport::build(&srcs, &hyps, &refs, rc.bucket_width)?;
    print!("{}", report.table());
    println!();
    print!("{}", report.key_values());
    Ok(())
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: CommonOpts,
    #[command(flatten)]
    decode: DecodeOpts,
    /// Candidate checkpoint.
    #[arg(long, value_name = "PATH")]
    model: Option<PathBuf>,
    /// Baseline checkpoint measured on the same sentences.
    #[arg(long, value_name = "PATH")]
    baseline: Option<PathBuf>,
    /// Data directory whose test.tsv supplies the sentences.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Use only the first N test sentences.
    #[arg(long, value_name = "N")]
    limit: Option<usize>,
    /// Timed passes over the corpus (median is reported).
    #[arg(long)]
    repetitions: Option<usize>,
    /// Sentences per timer read; 1 measures per-sentence latency.
    #[arg(long)]
    batch: Option<usize>,
    /// Source-length bucket width for --csv rows.
    #[arg(long)]
    bucket_width: Option<usize>,
    /// Emit one CSV row per (model, source-length bucket) instead of tables.
    #[arg(long)]
    csv: bool,
}

fn run_bench(args: BenchArgs) -> Result<()> {
    let mut rc = args.common.build()?;
    args.decode.apply(&mut rc);
    if let Some(v) = args.data {
        rc.data_dir = Some(v);
    }
    if let Some(v) = args.repetitions {
        rc.repetitions = v;
    }
    if let Some(v) = args.batch {
        rc.batch = v;
    }
    if let Some(v) = args.bucket_width {
        rc.bucket_width = v;
    }

    let candidate_path = require(args.model, "--model")?;
    let baseline_path = require(args.baseline, "--baseline")?;
    let data = require(rc.data_dir.clone(), "--data")?;
    let candidate = load_model(&mut rc, &candidate_path)?;
    let baseline = load_checkpoint(&baseline_path)?;
    let vocab = match &rc.vocab {
        Some(path) => Vocabulary::load(path)?,
        None => Vocabulary::load(&data.join("vocab.txt"))?,
    };

    let test_set = read_tsv(&data.join("test.tsv"))?;
    let take = args.limit.unwrap_or(test_set.len()).min(test_set.len());
    let srcs: Vec<Vec<u32>> = test_set[..take]
        .iter()
        .map(|(s, _)| vocab.encode(s))
        .collect();
    let src_lens: Vec<usize> = srcs.iter().map(Vec::len).collect();

    let report = bench_decode(
        &candidate,
        &baseline,
        &srcs,
        &rc.decode_config(),
        rc.repetitions,
        rc.batch,
    )?;
    if args.csv {
        print!("{}", report.csv(&src_lens, rc.bucket_width)?);
    } else {
        print!("{}", report.table());
        println!();
        print!("{}", report.key_values());
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// distill
// ---------------------------------------------------------------------------

#[derive(Args)]
struct DistillArgs {
    #[command(flatten)]
    common: CommonOpts,
    #[command(flatten)]
    decode: DecodeOpts,
    /// Trained single-stream teacher checkpoint.
    #[arg(long, value_name = "PATH")]
    teacher: Option<PathBuf>,
    /// Data directory whose train.tsv is re-labeled.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Where the distilled corpus is written.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

fn run_distill(args: DistillArgs) -> Result<()> {
    let mut rc = args.common.build()?;
    args.decode.apply(&mut rc);
    if let Some(v) = args.data {
        rc.data_dir = Some(v);
    }
    if let Some(v) = args.out {
        rc.out = Some(v);
    }

    let teacher_path = require(args.teacher, "--teacher")?;
    let data = require(rc.data_dir.clone(), "--data")?;
    let out = require(rc.out.clone(), "--out")?;
    let teacher = load_model(&mut rc, &teacher_path)?;
    let vocab = match &rc.vocab {
        Some(path) => Vocabulary::load(path)?,
        None => Vocabulary::load(&data.join("vocab.txt"))?,
    };
    let pairs = read_tsv(&data.join("train.tsv"))?;

    let distilled = distill(&teacher, &pairs, &vocab, &rc.decode_config())?;
    write_tsv(&out, &distilled)?;
    println!("wrote {} distilled examples to {}", distilled.len(), out.display());
    Ok(())
}
