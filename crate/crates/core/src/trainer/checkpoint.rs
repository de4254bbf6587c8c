//! Versioned binary checkpoint container: the magic `SRIEM1`, a JSON header
//! with dimensions, variant, loss mode and vocabulary hash, then the raw
//! parameter arrays as row-major little-endian f64. Save and load round-trip
//! bit for bit.

use crate::error::{Error, Result};
use crate::iem::ScaleBy;
use crate::model::{LossMode, ModelConfig, ModelParams, Variant};
use crate::ndmath::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 6] = b"SRIEM1";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    d: usize,
    l: usize,
    n_items: usize,
    variant: Variant,
    loss_mode: LossMode,
    scale_by: ScaleBy,
    vocab_hash: u64,
    arrays: Vec<ArraySpec>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArraySpec {
    name: String,
    rows: usize,
    cols: usize,
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let mut arrays = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    params.for_each_param(|name, tensor| {
        arrays.push(ArraySpec {
            name: name.to_string(),
            rows: tensor.rows(),
            cols: tensor.cols(),
        });
        for v in tensor.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    });
    let header = Header {
        version: VERSION,
        d: params.config.d,
        l: params.config.l,
        n_items: params.n_items,
        variant: params.config.variant,
        loss_mode: params.config.loss_mode,
        scale_by: params.config.scale_by,
        vocab_hash: params.vocab_hash,
        arrays,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header serialization failed: {e}")))?;

    let io_err = |source: std::io::Error| Error::Io {
        path: path.display().to_string(),
        source,
    };
    let mut file = std::fs::File::create(path).map_err(io_err)?;
    file.write_all(MAGIC).map_err(io_err)?;
    file.write_all(&(header_json.len() as u32).to_le_bytes())
        .map_err(io_err)?;
    file.write_all(&header_json).map_err(io_err)?;
    file.write_all(&payload).map_err(io_err)?;
    Ok(())
}

/// Load a checkpoint, validating magic, version, shapes and (when given) the
/// vocabulary hash of the corpus it will run against.
pub fn load_checkpoint(path: &Path, expect_vocab_hash: Option<u64>) -> Result<ModelParams> {
    let io_err = |source: std::io::Error| Error::Io {
        path: path.display().to_string(),
        source,
    };
    let mut file = std::fs::File::open(path).map_err(io_err)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(io_err)?;

    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a model checkpoint (bad magic)",
            path.display()
        )));
    }
    let mut offset = MAGIC.len();
    let header_len = u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap()) as usize;
    offset += 4;
    if bytes.len() < offset + header_len {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[offset..offset + header_len])
        .map_err(|e| Error::Checkpoint(format!("invalid header: {e}")))?;
    offset += header_len;

    if header.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            header.version
        )));
    }
    if let Some(expect) = expect_vocab_hash {
        if header.vocab_hash != expect {
            return Err(Error::Checkpoint(format!(
                "vocabulary hash mismatch: checkpoint {:#018x}, corpus {:#018x}",
                header.vocab_hash, expect
            )));
        }
    }

    let config = ModelConfig {
        d: header.d,
        l: header.l,
        variant: header.variant,
        loss_mode: header.loss_mode,
        scale_by: header.scale_by,
    };
    let mut params = ModelParams::init(config, header.n_items, header.vocab_hash, 0);

    // Read the arrays in the recorded order, then install them by name.
    let mut loaded: HashMap<String, Tensor> = HashMap::new();
    for spec in &header.arrays {
        let count = spec.rows * spec.cols;
        let end = offset + count * 8;
        if bytes.len() < end {
            return Err(Error::Checkpoint(format!(
                "truncated array `{}` (expected {count} values)",
                spec.name
            )));
        }
        let mut data = Vec::with_capacity(count);
        for chunk in bytes[offset..end].chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        offset = end;
        let tensor = Tensor::from_vec(spec.rows, spec.cols, data)
            .map_err(|e| Error::Checkpoint(format!("array `{}` invalid: {e}", spec.name)))?;
        loaded.insert(spec.name.clone(), tensor);
    }
    if offset != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the parameter arrays",
            bytes.len() - offset
        )));
    }

    let mut missing: Vec<String> = Vec::new();
    let mut shape_err: Option<String> = None;
    params.for_each_param_mut(|name, tensor| match loaded.remove(name) {
        Some(t) if t.rows() == tensor.rows() && t.cols() == tensor.cols() => *tensor = t,
        Some(t) => {
            shape_err = Some(format!(
                "array `{name}` has shape {}x{}, expected {}x{}",
                t.rows(),
                t.cols(),
                tensor.rows(),
                tensor.cols()
            ))
        }
        None => missing.push(name.to_string()),
    });
    if let Some(msg) = shape_err {
        return Err(Error::Checkpoint(msg));
    }
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!(
            "missing arrays: {}",
            missing.join(", ")
        )));
    }
    if !loaded.is_empty() {
        let extra: Vec<String> = loaded.keys().cloned().collect();
        return Err(Error::Checkpoint(format!(
            "unexpected arrays: {}",
            extra.join(", ")
        )));
    }
    Ok(params)
}
