//! Checkpoint format: a plain-text header (magic line, one `key=value` line
//! per config field, a tensor count) followed by binary records in leaf
//! order. Each record is `name_len: u32 LE`, the UTF-8 name, `ndim: u32 LE`,
//! the dims as `u32 LE`, then the row-major values as `f64 LE`. The position
//! table is derived from the config and never written.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{for_each_leaf, init_params, ModelConfig, Params};
use crate::error::{Result, SbsgError};
use crate::tensor::Tensor;

const MAGIC: &str = "SBSG1";

pub fn save_checkpoint(path: &Path, config: &ModelConfig, params: &Params) -> Result<()> {
    config.validate()?;
    let file = File::create(path).map_err(|e| SbsgError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let leaves = params.leaves();
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    header.push_str(&format!("layers={}\n", config.layers));
    header.push_str(&format!("d_model={}\n", config.d_model));
    header.push_str(&format!("heads={}\n", config.heads));
    header.push_str(&format!("d_ff={}\n", config.d_ff));
    header.push_str(&format!("vocab_size={}\n", config.vocab_size));
    header.push_str(&format!("lambda={:?}\n", config.lambda));
    header.push_str(&format!("dropout={:?}\n", config.dropout));
    header.push_str(&format!("max_positions={}\n", config.max_positions));
    header.push_str(&format!("mode={}\n", config.mode));
    header.push_str(&format!("tensors={}\n", leaves.len()));
    let io_err = |e| SbsgError::io(path, e);
    w.write_all(header.as_bytes()).map_err(io_err)?;
    for (name, tensor) in &leaves {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(name.as_bytes()).map_err(io_err)?;
        w.write_all(&(tensor.ndim() as u32).to_le_bytes()).map_err(io_err)?;
        for &dim in tensor.shape() {
            w.write_all(&(dim as u32).to_le_bytes()).map_err(io_err)?;
        }
        for &v in tensor.data().iter() {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, Params)> {
    let file = File::open(path).map_err(|e| SbsgError::io(path, e))?;
    let mut r = BufReader::new(file);
    let magic = read_line(&mut r, path)?;
    if magic != MAGIC {
        return Err(SbsgError::Checkpoint(format!(
            "bad magic '{magic}' in {}",
            path.display()
        )));
    }
    let mut fields = HashMap::new();
    for key in [
        "layers",
        "d_model",
        "heads",
        "d_ff",
        "vocab_size",
        "lambda",
        "dropout",
        "max_positions",
        "mode",
        "tensors",
    ] {
        let line = read_line(&mut r, path)?;
        let (k, v) = line.split_once('=').ok_or_else(|| {
            SbsgError::Checkpoint(format!("malformed header line '{line}'"))
        })?;
        if k != key {
            return Err(SbsgError::Checkpoint(format!(
                "expected header key '{key}', found '{k}'"
            )));
        }
        fields.insert(key, v.to_string());
    }
    let uint = |key: &str| -> Result<usize> {
        fields[key]
            .parse()
            .map_err(|_| SbsgError::Checkpoint(format!("bad {key} '{}'", fields[key])))
    };
    let real = |key: &str| -> Result<f64> {
        fields[key]
            .parse()
            .map_err(|_| SbsgError::Checkpoint(format!("bad {key} '{}'", fields[key])))
    };
    let config = ModelConfig {
        layers: uint("layers")?,
        d_model: uint("d_model")?,
        heads: uint("heads")?,
        d_ff: uint("d_ff")?,
        vocab_size: uint("vocab_size")?,
        lambda: real("lambda")?,
        dropout: real("dropout")?,
        max_positions: uint("max_positions")?,
        mode: fields["mode"].parse()?,
    };
    config.validate()?;
    let count = uint("tensors")?;

    let mut records: HashMap<String, Tensor> = HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r, path)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|e| SbsgError::io(path, e))?;
        let name = String::from_utf8(name)
            .map_err(|_| SbsgError::Checkpoint("tensor name is not UTF-8".into()))?;
        let ndim = read_u32(&mut r, path)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r, path)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut buf = vec![0u8; 8];
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            r.read_exact(&mut buf).map_err(|e| SbsgError::io(path, e))?;
            data.push(f64::from_le_bytes(buf[..8].try_into().unwrap()));
        }
        let tensor = Tensor::new(data, &shape)?.with_grad();
        if records.insert(name.clone(), tensor).is_some() {
            return Err(SbsgError::Checkpoint(format!("duplicate tensor '{name}'")));
        }
    }

    // Build a parameter skeleton of the right shapes, then swap every leaf
    // for its stored value; the throwaway random draws cost nothing at these
    // sizes and the position table comes back via the config.
    let mut params = init_params(&config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut missing = Vec::new();
    let mut mismatched = Vec::new();
    for_each_leaf!(&mut params, |name: String, t: &mut Tensor| {
        match records.remove(&name) {
            Some(loaded) if loaded.shape() == t.shape() => *t = loaded,
            Some(loaded) => mismatched.push(format!(
                "{name}: stored {:?}, expected {:?}",
                loaded.shape(),
                t.shape()
            )),
            None => missing.push(name),
        }
    });
    if !mismatched.is_empty() {
        return Err(SbsgError::Checkpoint(format!(
            "tensor shapes disagree with the header config: {}",
            mismatched.join("; ")
        )));
    }
    if !missing.is_empty() {
        return Err(SbsgError::Checkpoint(format!(
            "missing tensors: {}",
            missing.join(", ")
        )));
    }
    if !records.is_empty() {
        let mut extra: Vec<&str> = records.keys().map(|s| s.as_str()).collect();
        extra.sort_unstable();
        return Err(SbsgError::Checkpoint(format!(
            "unexpected tensors: {}",
            extra.join(", ")
        )));
    }
    Ok((config, params))
}

fn read_line(r: &mut BufReader<File>, path: &Path) -> Result<String> {
    use std::io::BufRead;
    let mut line = String::new();
    let n = r.read_line(&mut line).map_err(|e| SbsgError::io(path, e))?;
    if n == 0 {
        return Err(SbsgError::Checkpoint(format!(
            "truncated header in {}",
            path.display()
        )));
    }
    Ok(line.trim_end_matches('\n').to_string())
}

fn read_u32(r: &mut BufReader<File>, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| SbsgError::io(path, e))?;
    Ok(u32::from_le_bytes(buf))
}
