//! Model checkpointing.
//!
//! Layout: the magic line `jhgrf-ckpt v1`, then one `model.<field> = value`
//! line per configuration field, then `params <count>`, then per parameter a
//! header line `param <name> <dim0> <dim1> …` followed immediately by the
//! row-major values as little-endian 64-bit floats. Round-trips are
//! bit-exact.

use std::path::Path;

use rand::SeedableRng;
use thiserror::Error;

use crate::model::{Model, ModelConfig, ModelError, ModelParams};

/// First line of every checkpoint.
pub const CHECKPOINT_MAGIC: &str = "jhgrf-ckpt v1";

/// Errors from writing or reading checkpoints.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn format_err(message: impl std::fmt::Display) -> CheckpointError {
    CheckpointError::Format(message.to_string())
}

/// Serialize a model to the checkpoint byte format.
pub fn model_to_bytes(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC.as_bytes());
    out.push(b'\n');
    for (key, value) in model.config.to_key_values() {
        out.extend_from_slice(format!("model.{key} = {value}\n").as_bytes());
    }
    let mut params = model.params.clone();
    let named = params.named_params_mut();
    out.extend_from_slice(format!("params {}\n", named.len()).as_bytes());
    for (name, tensor) in named {
        out.extend_from_slice(b"param ");
        out.extend_from_slice(name.as_bytes());
        for dim in tensor.shape() {
            out.extend_from_slice(format!(" {dim}").as_bytes());
        }
        out.push(b'\n');
        for value in tensor.values() {
            out.extend_from_slice(&value.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn line(&mut self) -> Result<&'a str, CheckpointError> {
        if self.pos >= self.bytes.len() {
            return Err(format_err("unexpected end of checkpoint"));
        }
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| format_err("unterminated line"))?;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| format_err("non-utf8 text in header"))?;
        self.pos += end + 1;
        Ok(line)
    }

    fn raw(&mut self, len: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + len > self.bytes.len() {
            return Err(format_err(format!(
                "truncated checkpoint: wanted {len} bytes, {} left",
                self.bytes.len() - self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(slice)
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Deserialize a model from checkpoint bytes.
pub fn model_from_bytes(bytes: &[u8]) -> Result<Model, CheckpointError> {
    let mut reader = Reader { bytes, pos: 0 };
    let magic = reader.line()?;
    if magic != CHECKPOINT_MAGIC {
        return Err(format_err(format!(
            "bad magic `{magic}` (expected `{CHECKPOINT_MAGIC}`)"
        )));
    }

    // Configuration lines until the `params N` sentinel.
    let mut config = ModelConfig::new(1, 1, 1, 1);
    let mut seen: Vec<String> = Vec::new();
    let param_count: usize = loop {
        let line = reader.line()?;
        if let Some(count) = line.strip_prefix("params ") {
            break count
                .trim()
                .parse()
                .map_err(|e| format_err(format!("bad parameter count: {e}")))?;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format_err(format!("expected `model.key = value`, got `{line}`")))?;
        let key = key.trim();
        let field = key
            .strip_prefix("model.")
            .ok_or_else(|| format_err(format!("unexpected header key `{key}`")))?;
        if seen.iter().any(|s| s == field) {
            return Err(format_err(format!("duplicate config key `{key}`")));
        }
        config.set_key(field, value.trim())?;
        seen.push(field.to_string());
    };
    let expected_fields = ModelConfig::new(1, 1, 1, 1).to_key_values().len();
    if seen.len() != expected_fields {
        return Err(format_err(format!(
            "expected {expected_fields} config fields, found {}",
            seen.len()
        )));
    }
    config.validate()?;

    // Fresh parameter skeleton, then overwrite every tensor by name.
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut params = ModelParams::init(&config, &mut rng)?;
    {
        let mut named = params.named_params_mut();
        if named.len() != param_count {
            return Err(format_err(format!(
                "checkpoint stores {param_count} parameters, model needs {}",
                named.len()
            )));
        }
        let mut assigned = vec![false; named.len()];
        for _ in 0..param_count {
            let header = reader.line()?;
            let mut fields = header.split_whitespace();
            if fields.next() != Some("param") {
                return Err(format_err(format!(
                    "expected `param <name> <dims…>`, got `{header}`"
                )));
            }
            let name = fields
                .next()
                .ok_or_else(|| format_err("param line missing a name"))?;
            let shape: Vec<usize> = fields
                .map(|d| {
                    d.parse()
                        .map_err(|e| format_err(format!("bad dimension in `{header}`: {e}")))
                })
                .collect::<Result<_, _>>()?;
            let slot = named
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| format_err(format!("unknown parameter `{name}`")))?;
            if assigned[slot] {
                return Err(format_err(format!("duplicate parameter `{name}`")));
            }
            let tensor = &mut named[slot].1;
            if tensor.shape() != shape.as_slice() {
                return Err(format_err(format!(
                    "parameter `{name}` has shape {shape:?}, model expects {:?}",
                    tensor.shape()
                )));
            }
            let raw = reader.raw(tensor.numel() * 8)?;
            for (value, chunk) in tensor.values_mut().iter_mut().zip(raw.chunks_exact(8)) {
                *value = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            }
            assigned[slot] = true;
        }
        if let Some(missing) = assigned.iter().position(|a| !a) {
            return Err(format_err(format!(
                "parameter `{}` missing from checkpoint",
                named[missing].0
            )));
        }
    }
    if !reader.done() {
        return Err(format_err("trailing bytes after the last parameter"));
    }
    Ok(Model { config, params })
}

/// Write a checkpoint file.
pub fn save_model(path: &Path, model: &Model) -> Result<(), CheckpointError> {
    std::fs::write(path, model_to_bytes(model))?;
    Ok(())
}

/// Read a checkpoint file.
pub fn load_model(path: &Path) -> Result<Model, CheckpointError> {
    let bytes = std::fs::read(path)?;
    model_from_bytes(&bytes)
}
