use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, TklError};
use crate::model::{Model, ModelConfig};
use crate::text::Vocabulary;

const MAGIC: &[u8; 8] = b"TKLCKPT\0";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    config_hash: String,
    vocabulary: Vec<String>,
    tensors: Vec<TensorHeader>,
}

#[derive(Serialize, Deserialize, PartialEq, Debug)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

/// Hex SHA-256 of the canonical JSON form of `config`.
pub fn config_hash(config: &ModelConfig) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    hex::encode(Sha256::digest(&json))
}

/// Serializes the model: magic, version, header length, JSON header, then
/// every parameter as little-endian f64 in enumeration order.
pub fn write_checkpoint(model: &Model, mut writer: impl Write) -> std::io::Result<()> {
    let tensors = model.params.tensors();
    let header = Header {
        config: model.config.clone(),
        config_hash: config_hash(&model.config),
        vocabulary: model.vocab.tokens().to_vec(),
        tensors: tensors
            .iter()
            .map(|t| TensorHeader {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    writer.write_all(MAGIC)?;
    writer.write_all(&VERSION.to_le_bytes())?;
    writer.write_all(&(json.len() as u64).to_le_bytes())?;
    writer.write_all(&json)?;
    for t in &tensors {
        for v in t.data {
            writer.write_all(&v.to_le_bytes())?;
        }
    }
    writer.flush()
}

pub fn read_checkpoint(mut reader: impl Read) -> Result<Model> {
    let bad = |m: &str| TklError::Checkpoint(m.to_string());
    let io = |e: std::io::Error| TklError::Checkpoint(format!("truncated or unreadable: {e}"));
    let mut magic = [0u8; 8];
    reader.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let mut word = [0u8; 4];
    reader.read_exact(&mut word).map_err(io)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(TklError::Checkpoint(format!("unsupported version {version}")));
    }
    let mut len = [0u8; 8];
    reader.read_exact(&mut len).map_err(io)?;
    let len = usize::try_from(u64::from_le_bytes(len)).map_err(|_| bad("header too large"))?;
    let mut json = vec![0u8; len];
    reader.read_exact(&mut json).map_err(io)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| TklError::Checkpoint(format!("header: {e}")))?;
    if header.config_hash != config_hash(&header.config) {
        return Err(bad("config hash mismatch"));
    }
    let vocab = Vocabulary::from_tokens(header.vocabulary);
    let mut model = Model::new(header.config, vocab, None, None, 0)?;
    let expected: Vec<TensorHeader> = model
        .params
        .tensors()
        .iter()
        .map(|t| TensorHeader {
            name: t.name.clone(),
            shape: t.shape.clone(),
        })
        .collect();
    if expected != header.tensors {
        return Err(bad("tensor layout does not match the configuration"));
    }
    let mut buf = [0u8; 8];
    for tensor in model.params.tensors_mut() {
        for v in tensor.iter_mut() {
            reader.read_exact(&mut buf).map_err(io)?;
            *v = f64::from_le_bytes(buf);
        }
    }
    if reader.read(&mut buf).map_err(io)? != 0 {
        return Err(bad("trailing bytes after parameters"));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| TklError::io(path, e))?;
    write_checkpoint(model, std::io::BufWriter::new(file)).map_err(|e| TklError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| TklError::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_corruption() {
        let vocab = Vocabulary::from_tokens(["a", "b"]);
        let cfg = ModelConfig {
            embedding_dim: 4,
            heads: 2,
            ffn_dim: 4,
            layers: 1,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg, vocab, None, None, 3).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&model, &mut bytes).unwrap();
        assert_eq!(read_checkpoint(bytes.as_slice()).unwrap(), model);
        assert!(read_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(read_checkpoint(extra.as_slice()).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(read_checkpoint(wrong.as_slice()).is_err());
    }
}
