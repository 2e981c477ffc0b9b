//! Binary parameter checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic        4 bytes  "SQRC"
//! version      u32      1
//! config_len   u32      length of the config record in bytes
//! config       UTF-8    `key = value` lines (model config plus item_count)
//! tensor_count u32
//! per tensor:
//!   name_len   u32
//!   name       UTF-8
//!   ndim       u32
//!   dims       u64 × ndim
//!   values     f64 × product(dims)
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use super::{init_params, ModelConfig, ModelParams};
use crate::kernel::{seeded_rng, Tensor};

const MAGIC: &[u8; 4] = b"SQRC";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn fmt_err(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Format(msg.into())
}

fn config_record(config: &ModelConfig, item_count: usize) -> String {
    format!(
        "dim = {}\nmax_len = {}\nnum_blocks = {}\nlong_query_len = {}\nalpha = {}\ndropout = {}\ntau = {}\nshort_only = {}\nitem_count = {}\n",
        config.dim,
        config.max_len,
        config.num_blocks,
        config.long_query_len,
        config.alpha,
        config.dropout,
        config.tau,
        config.short_only,
        item_count
    )
}

fn parse_config_record(text: &str) -> Result<(ModelConfig, usize), CheckpointError> {
    let mut config = ModelConfig::default();
    let mut item_count = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| fmt_err(format!("bad config line {line:?}")))?;
        let (k, v) = (k.trim(), v.trim());
        let bad = |_| fmt_err(format!("bad value {v:?} for {k}"));
        match k {
            "dim" => config.dim = v.parse().map_err(bad)?,
            "max_len" => config.max_len = v.parse().map_err(bad)?,
            "num_blocks" => config.num_blocks = v.parse().map_err(bad)?,
            "long_query_len" => config.long_query_len = v.parse().map_err(bad)?,
            "alpha" => config.alpha = v.parse().map_err(|_| fmt_err(format!("bad alpha {v:?}")))?,
            "dropout" => config.dropout = v.parse().map_err(|_| fmt_err(format!("bad dropout {v:?}")))?,
            "tau" => config.tau = v.parse().map_err(|_| fmt_err(format!("bad tau {v:?}")))?,
            "short_only" => config.short_only = v.parse().map_err(|_| fmt_err(format!("bad short_only {v:?}")))?,
            "item_count" => item_count = Some(v.parse().map_err(bad)?),
            other => return Err(fmt_err(format!("unknown config key {other:?}"))),
        }
    }
    Ok((config, item_count.ok_or_else(|| fmt_err("config record lacks item_count"))?))
}

pub fn write_checkpoint(mut out: impl Write, config: &ModelConfig, params: &ModelParams) -> io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    let record = config_record(config, params.item_count);
    out.write_all(&(record.len() as u32).to_le_bytes())?;
    out.write_all(record.as_bytes())?;
    let tensors = params.named_tensors();
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string(r: &mut impl Read, len: usize) -> Result<String, CheckpointError> {
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| fmt_err("invalid UTF-8"))
}

pub fn read_checkpoint(mut r: impl Read) -> Result<(ModelConfig, ModelParams), CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(fmt_err("not a checkpoint file (bad magic)"));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(fmt_err(format!("unsupported checkpoint version {version}")));
    }
    let len = read_u32(&mut r)? as usize;
    let (config, item_count) = parse_config_record(&read_string(&mut r, len)?)?;
    config.validate().map_err(|e| fmt_err(e.to_string()))?;
    // A freshly initialized model provides the expected names and shapes.
    let mut params = init_params(&config, item_count, &mut seeded_rng(0)).map_err(|e| fmt_err(e.to_string()))?;
    let expected: Vec<(String, Vec<usize>)> =
        params.named_tensors().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
    let count = read_u32(&mut r)? as usize;
    if count != expected.len() {
        return Err(fmt_err(format!("expected {} tensors, found {count}", expected.len())));
    }
    let mut loaded = Vec::with_capacity(count);
    for (name, shape) in &expected {
        let name_len = read_u32(&mut r)? as usize;
        let got = read_string(&mut r, name_len)?;
        if &got != name {
            return Err(fmt_err(format!("expected tensor {name:?}, found {got:?}")));
        }
        let ndim = read_u32(&mut r)? as usize;
        let dims = (0..ndim).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        if &dims != shape {
            return Err(fmt_err(format!("tensor {name}: shape {dims:?}, expected {shape:?}")));
        }
        let mut bytes = vec![0u8; dims.iter().product::<usize>() * 8];
        r.read_exact(&mut bytes)?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        loaded.push(Tensor::new(dims, data).map_err(|e| fmt_err(e.to_string()))?);
    }
    params.item_embeddings = loaded[0].clone();
    params.positional_embeddings = loaded[1].clone();
    let mut rest = loaded.into_iter().skip(2);
    let branches = std::iter::once(&mut params.short_branch).chain(params.long_branch.as_mut());
    for branch in branches {
        for block in &mut branch.blocks {
            for slot in block.tensors_mut() {
                *slot = rest.next().expect("count checked");
            }
        }
    }
    Ok((config, params))
}

pub fn save_checkpoint(path: impl AsRef<Path>, config: &ModelConfig, params: &ModelParams) -> io::Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, config, params)?;
    fs::write(path, buf)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelConfig, ModelParams), CheckpointError> {
    read_checkpoint(io::BufReader::new(fs::File::open(path)?))
}
