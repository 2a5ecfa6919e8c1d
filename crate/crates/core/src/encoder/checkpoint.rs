//! Versioned single-file checkpoints: an 8-byte magic, a little-endian `u32`
//! format version, a `u64` manifest length, the JSON manifest (config,
//! vocabulary, tensor names and shapes), then every tensor as raw
//! little-endian `f64` in manifest order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{EncoderConfig, EncoderModel};
use super::tensor::Tensor;
use super::tokenizer::Tokenizer;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PDBCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: EncoderConfig,
    vocab: Tokenizer,
    tensors: Vec<TensorEntry>,
}

pub fn to_bytes(model: &EncoderModel) -> Vec<u8> {
    let manifest = Manifest {
        config: model.config.clone(),
        vocab: model.tokenizer.clone(),
        tensors: model
            .params()
            .iter()
            .zip(model.param_names())
            .map(|(t, n)| TensorEntry {
                name: n.clone(),
                rows: t.rows,
                cols: t.cols,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(20 + json.len() + model.n_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in model.params() {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<EncoderModel> {
    let mut r = bytes;
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Validation("not a checkpoint file (bad magic)".into()));
    }
    let mut u32buf = [0u8; 4];
    read_exact(&mut r, &mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != FORMAT_VERSION {
        return Err(Error::Validation(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut u64buf = [0u8; 8];
    read_exact(&mut r, &mut u64buf)?;
    let len = u64::from_le_bytes(u64buf) as usize;
    if len > r.len() {
        return Err(Error::Validation("truncated checkpoint manifest".into()));
    }
    let manifest: Manifest =
        serde_json::from_slice(&r[..len]).map_err(|e| Error::json("checkpoint manifest", e))?;
    r = &r[len..];
    let mut params = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let n = entry.rows * entry.cols;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            read_exact(&mut r, &mut u64buf)?;
            data.push(f64::from_le_bytes(u64buf));
        }
        params.push(Tensor::from_vec(entry.rows, entry.cols, data));
    }
    if !r.is_empty() {
        return Err(Error::Validation("trailing bytes after checkpoint".into()));
    }
    EncoderModel::from_parts(manifest.config, manifest.vocab, params)
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Validation("truncated checkpoint".into()))
}

pub fn save(model: &EncoderModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<EncoderModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reload_is_bit_exact() {
        let tok = Tokenizer::build(["he is a boss ."]);
        let cfg = EncoderConfig {
            d_model: 8,
            heads: 2,
            max_len: 8,
            seed: 3,
            ..EncoderConfig::default()
        };
        let model = EncoderModel::new(cfg, tok).unwrap();
        let bytes = to_bytes(&model);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, model);
        assert_eq!(to_bytes(&back), bytes);
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).is_err());
    }
}
