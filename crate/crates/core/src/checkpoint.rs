//! Binary model checkpoints.
//!
//! Layout: 8-byte magic `RGCKPT01`, little-endian `u64` header length, a JSON
//! header (format version, model config, tensor names and shapes, free-form
//! metadata), then every tensor's entries as little-endian `f64` in header
//! order, row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

const MAGIC: &[u8; 8] = b"RGCKPT01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    tensors: Vec<TensorInfo>,
    meta: serde_json::Value,
}

pub fn write_checkpoint<W: Write>(model: &Model, meta: serde_json::Value, mut w: W) -> Result<()> {
    let header = Header {
        version: FORMAT_VERSION,
        config: model.config.clone(),
        tensors: model
            .store
            .iter()
            .map(|(_, name, m)| TensorInfo {
                name: name.to_string(),
                rows: m.nrows(),
                cols: m.ncols(),
            })
            .collect(),
        meta,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, _, m) in model.store.iter() {
        for &v in m.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(Model, serde_json::Value)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", header.version)));
    }
    let mut model = Model::new(header.config, 0)?;
    let ids: Vec<_> = model.store.ids().collect();
    if ids.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "{} tensors stored, model has {}",
            header.tensors.len(),
            ids.len()
        )));
    }
    let mut buf = [0u8; 8];
    for (id, info) in ids.into_iter().zip(&header.tensors) {
        let name = model.store.name(id).to_string();
        let target = model.store.get_mut(id);
        if name != info.name || target.dim() != (info.rows, info.cols) {
            return Err(Error::Checkpoint(format!(
                "tensor {} [{} x {}] does not match model tensor {name} {:?}",
                info.name,
                info.rows,
                info.cols,
                target.dim()
            )));
        }
        for v in target.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
    }
    if r.read(&mut buf)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after tensor data".into()));
    }
    Ok((model, header.meta))
}

pub fn save_checkpoint(model: &Model, meta: serde_json::Value, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(model, meta, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, serde_json::Value)> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EncoderConfig;

    fn small() -> Model {
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                dim: 3,
                vocab_bits: 4,
                ..Default::default()
            },
            classifier_hidden: 2,
            ..Default::default()
        };
        Model::new(cfg, 11).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let model = small();
        let mut bytes = Vec::new();
        write_checkpoint(&model, serde_json::json!({"seed": 11}), &mut bytes).unwrap();
        let (back, meta) = read_checkpoint(bytes.as_slice()).unwrap();
        assert_eq!(meta["seed"], 11);
        assert_eq!(back.config, model.config);
        for ((_, a, x), (_, b, y)) in model.store.iter().zip(back.store.iter()) {
            assert_eq!(a, b);
            assert_eq!(x, y);
        }
    }

    #[test]
    fn rejects_corruption() {
        let model = small();
        let mut bytes = Vec::new();
        write_checkpoint(&model, serde_json::Value::Null, &mut bytes).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(bad.as_slice()).is_err());
        assert!(read_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let mut longer = bytes.clone();
        longer.extend_from_slice(&[0; 8]);
        assert!(read_checkpoint(longer.as_slice()).is_err());
    }
}
