//! Versioned binary checkpoint container.
//!
//! Layout:
//!
//! ```text
//! magic    8 bytes  "SNGCKPT\0"
//! version  u32 LE
//! hlen     u64 LE   length of the JSON header
//! header   hlen bytes of UTF-8 JSON: config, vocab, tensor names + shapes
//! data     every tensor's values as f64 LE, in header order
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a round trip is bit-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{ModelConfig, ModelParams, ParamId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::text::Vocab;

const MAGIC: &[u8; 8] = b"SNGCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vocab,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, vocab: &Vocab) -> Result<()> {
    let header = Header {
        config: params.config().clone(),
        vocab: vocab.clone(),
        tensors: params
            .named()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(20 + header.len() + 8 * params.num_scalars());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for t in params.tensors() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, Vocab)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(_) => e,
        other => Error::Checkpoint(format!("{}: {other}", path.display())),
    })
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
    let out = &bytes[*pos..end];
    *pos = end;
    Ok(out)
}

fn decode(bytes: &[u8]) -> Result<(ModelParams, Vocab)> {
    let mut pos = 0;
    if take(bytes, &mut pos, 8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(bytes, &mut pos, 4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(take(bytes, &mut pos, 8)?.try_into().unwrap()) as usize;
    let header: Header = serde_json::from_slice(take(bytes, &mut pos, hlen)?)?;

    if header.tensors.len() != ParamId::ALL.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            ParamId::ALL.len(),
            header.tensors.len()
        )));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for (entry, id) in header.tensors.iter().zip(ParamId::ALL) {
        if entry.name != id.name() {
            return Err(Error::Checkpoint(format!(
                "tensor {} found where {} was expected",
                entry.name,
                id.name()
            )));
        }
        let n: usize = entry.shape.iter().product();
        let raw = take(bytes, &mut pos, n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::new(entry.shape.clone(), data)?);
    }
    if pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    let params = ModelParams::from_tensors(header.config, tensors)?;
    if params.config().vocab_size != header.vocab.len() {
        return Err(Error::Checkpoint(format!(
            "vocab has {} entries but model expects {}",
            header.vocab.len(),
            params.config().vocab_size
        )));
    }
    Ok((params, header.vocab))
}
