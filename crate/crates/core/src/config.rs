//! Run configuration shared by the command-line tools: desk-scale defaults,
//! overridden first by an optional `key=value` config file, then by flags.
//! Everything is validated up front so a bad run dies before touching data.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::TaskKind;
use crate::decoding::DecodeConfig;
use crate::error::{Result, SbsgError};
use crate::model::ModelConfig;
use crate::training::TrainHyper;

/// Merged view of every knob a subcommand can need. `model.vocab_size`
/// starts as the vocabulary-size cap; training replaces it with the actual
/// vocabulary size before building the model.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub hyper: TrainHyper,
    /// Beam width; 0 selects greedy decoding.
    pub beam: usize,
    pub alpha: f64,
    pub max_len: usize,
    pub seed: u64,
    // synthetic-data generation
    pub task: TaskKind,
    pub count: usize,
    pub dev_count: usize,
    pub test_count: usize,
    pub len_lo: usize,
    pub len_hi: usize,
    pub vocab_real: usize,
    // evaluation / benchmarking
    pub bucket_width: usize,
    pub repetitions: usize,
    /// Sentences decoded per timer read in `bench` (1 = pure latency).
    pub batch: usize,
    // file locations; flags may override any of these
    pub data_dir: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::desk_default(64),
            hyper: TrainHyper::desk_default(),
            beam: 0,
            alpha: 0.6,
            max_len: 32,
            seed: 42,
            task: TaskKind::Copy,
            count: 5000,
            dev_count: 500,
            test_count: 500,
            len_lo: 2,
            len_hi: 16,
            vocab_real: 16,
            bucket_width: 4,
            repetitions: 3,
            batch: 1,
            data_dir: None,
            ckpt: None,
            vocab: None,
            out: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| {
        SbsgError::Config(format!("bad value {value:?} for key {key:?}"))
    })
}

impl RunConfig {
    /// Applies a UTF-8 config file of `key=value` lines. Blank lines and
    /// lines starting with `#` are skipped; inline comments are not.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| SbsgError::io(path, e))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                SbsgError::Config(format!(
                    "{}:{}: expected key=value, got {raw:?}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            self.set(key.trim(), value.trim()).map_err(|e| {
                SbsgError::Config(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
        }
        Ok(())
    }

    /// Sets one knob from its textual form. Unknown keys are rejected so
    /// typos in a config file cannot silently fall back to defaults.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "mode" => self.model.mode = value.parse()?,
            "lambda" => self.model.lambda = parse(key, value)?,
            "dropout" => self.model.dropout = parse(key, value)?,
            "layers" => self.model.layers = parse(key, value)?,
            "d_model" => self.model.d_model = parse(key, value)?,
            "heads" => self.model.heads = parse(key, value)?,
            "d_ff" => self.model.d_ff = parse(key, value)?,
            "max_positions" => self.model.max_positions = parse(key, value)?,
            "vocab_size" => self.model.vocab_size = parse(key, value)?,
            "batch_size" => self.hyper.batch_size = parse(key, value)?,
            "max_steps" => self.hyper.max_steps = parse(key, value)?,
            "warmup" => self.hyper.warmup = parse(key, value)?,
            "label_smoothing" => self.hyper.label_smoothing = parse(key, value)?,
            "clip_norm" => self.hyper.clip_norm = parse(key, value)?,
            "log_every" => self.hyper.log_every = parse(key, value)?,
            "null_side" => self.hyper.null_side = value.parse()?,
            "beam" => self.beam = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "max_len" => self.max_len = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "task" => self.task = value.parse()?,
            "count" => self.count = parse(key, value)?,
            "dev_count" => self.dev_count = parse(key, value)?,
            "test_count" => self.test_count = parse(key, value)?,
            "len_lo" => self.len_lo = parse(key, value)?,
            "len_hi" => self.len_hi = parse(key, value)?,
            "vocab_real" => self.vocab_real = parse(key, value)?,
            "bucket_width" => self.bucket_width = parse(key, value)?,
            "repetitions" => self.repetitions = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "ckpt" => self.ckpt = Some(PathBuf::from(value)),
            "vocab" => self.vocab = Some(PathBuf::from(value)),
            "out" => self.out = Some(PathBuf::from(value)),
            other => {
                return Err(SbsgError::Config(format!("unknown config key {other:?}")));
            }
        }
        Ok(())
    }

    /// The decoding setup these knobs describe.
    pub fn decode_config(&self) -> DecodeConfig {
        if self.beam == 0 {
            DecodeConfig::greedy(self.max_len)
        } else {
            DecodeConfig::beam(self.beam, self.alpha, self.max_len)
        }
    }

    /// Cross-checks every field against its module's invariants.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.hyper.validate()?;
        self.decode_config().validate(self.model.mode)?;
        if self.max_len > self.model.max_positions {
            return Err(SbsgError::Config(format!(
                "max_len {} exceeds the position table ({} entries)",
                self.max_len, self.model.max_positions
            )));
        }
        if self.len_lo == 0 || self.len_lo > self.len_hi {
            return Err(SbsgError::Config(format!(
                "bad length range {}..={}",
                self.len_lo, self.len_hi
            )));
        }
        if self.count == 0 {
            return Err(SbsgError::Config("count must be positive".into()));
        }
        if self.vocab_real == 0 {
            return Err(SbsgError::Config("vocab_real must be positive".into()));
        }
        if self.bucket_width == 0 {
            return Err(SbsgError::Config("bucket_width must be positive".into()));
        }
        if self.repetitions == 0 {
            return Err(SbsgError::Config("repetitions must be positive".into()));
        }
        if self.batch == 0 {
            return Err(SbsgError::Config("batch must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
