//! Checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "SSASCKPT"
//! version   u32
//! scalar    u32 length + utf-8 type name
//! config    u32 length + canonical TOML of the ModelConfig
//! params    u64 count, then per entry: u64 length + f64 values
//! buffers   u64 count, then per entry: u64 length + f64 values
//! ```
//!
//! Entries follow registry order, which is fixed by the config.

use std::fs;
use std::path::{Path, PathBuf};

use crate::model::{ConfigError, ModelConfig, SsaScModel};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"SSASCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic bytes)")]
    Magic,
    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    Version { found: u32 },
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("checkpoint config is unreadable: {0}")]
    Config(String),
    #[error(transparent)]
    InvalidConfig(#[from] ConfigError),
    #[error("checkpoint config differs from the target model's")]
    ConfigMismatch,
    #[error("checkpoint layout differs from the model: {0}")]
    Layout(String),
}

pub fn encode<T: Scalar>(model: &SsaScModel<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for text in [T::NAME.as_bytes(), model.config().to_toml().as_bytes()] {
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text);
    }
    let store = &model.store;
    let blocks = |out: &mut Vec<u8>, entries: Vec<&[T]>| {
        out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
        for values in entries {
            out.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
    };
    blocks(&mut out, store.params().iter().map(|p| p.values()).collect());
    blocks(&mut out, store.buffers().iter().map(|b| b.values()).collect());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn text(&mut self) -> Result<&'a str, CheckpointError> {
        let n = self.u32()? as usize;
        std::str::from_utf8(self.take(n)?).map_err(|e| CheckpointError::Config(e.to_string()))
    }

    fn blocks(&mut self) -> Result<Vec<Vec<f64>>, CheckpointError> {
        let count = self.u64()? as usize;
        let mut out = Vec::new();
        for _ in 0..count {
            let n = self.u64()? as usize;
            let raw = self.take(n.checked_mul(8).ok_or(CheckpointError::Truncated(self.pos))?)?;
            out.push(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect());
        }
        Ok(out)
    }
}

struct Decoded {
    config: ModelConfig,
    params: Vec<Vec<f64>>,
    buffers: Vec<Vec<f64>>,
}

fn decode(bytes: &[u8]) -> Result<Decoded, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if bytes.len() < MAGIC.len() || r.take(MAGIC.len())? != MAGIC {
        return Err(CheckpointError::Magic);
    }
    let found = r.u32()?;
    if found != VERSION {
        return Err(CheckpointError::Version { found });
    }
    let _scalar = r.text()?;
    let config: ModelConfig = toml::from_str(r.text()?).map_err(|e| CheckpointError::Config(e.to_string()))?;
    let params = r.blocks()?;
    let buffers = r.blocks()?;
    if r.pos != bytes.len() {
        return Err(CheckpointError::Layout(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Decoded { config, params, buffers })
}

fn install<T: Scalar>(model: &mut SsaScModel<T>, d: Decoded) -> Result<(), CheckpointError> {
    let (np, nb) = (model.store.params().len(), model.store.buffers().len());
    if d.params.len() != np || d.buffers.len() != nb {
        return Err(CheckpointError::Layout(format!(
            "{} params / {} buffers in file, model has {np} / {nb}",
            d.params.len(),
            d.buffers.len()
        )));
    }
    let ids: Vec<_> = model.store.ids().collect();
    for (id, values) in ids.into_iter().zip(d.params) {
        let dst = model.store.value_mut(id);
        if dst.len() != values.len() {
            return Err(CheckpointError::Layout(format!("parameter {} length", id.index())));
        }
        for (a, b) in dst.iter_mut().zip(values) {
            *a = T::lit(b);
        }
    }
    for (i, values) in d.buffers.into_iter().enumerate() {
        let id = model.store.buffer_ids()[i];
        let dst = model.store.buffer_mut(id);
        if dst.len() != values.len() {
            return Err(CheckpointError::Layout(format!("buffer {i} length")));
        }
        for (a, b) in dst.iter_mut().zip(values) {
            *a = T::lit(b);
        }
    }
    Ok(())
}

/// Rebuilds a model from checkpoint bytes.
pub fn decode_model<T: Scalar>(bytes: &[u8]) -> Result<SsaScModel<T>, CheckpointError> {
    let d = decode(bytes)?;
    let mut model = SsaScModel::new(d.config.clone())?;
    install(&mut model, d)?;
    Ok(model)
}

pub fn save_checkpoint<T: Scalar>(model: &SsaScModel<T>, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, encode(model)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<SsaScModel<T>, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_model(&bytes)
}

/// Loads weights into an existing model whose config must match exactly.
pub fn load_into<T: Scalar>(model: &mut SsaScModel<T>, path: &Path) -> Result<(), CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let d = decode(&bytes)?;
    if &d.config != model.config() {
        return Err(CheckpointError::ConfigMismatch);
    }
    install(model, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::GridSpec;

    fn tiny() -> ModelConfig {
        ModelConfig {
            grid: GridSpec {
                min: [0.0, 0.0, 0.0],
                max: [1.6, 1.6, 0.4],
                voxel_size: 0.1,
            },
            class_count: 3,
            feature_dim: 2,
            fusion_dim: 2,
            widths_2d: vec![2, 2, 2, 2],
            widths_3d: vec![2, 2, 2, 2],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn bytes_round_trip() {
        let mut m = SsaScModel::<f64>::new(tiny()).unwrap();
        let id = m.store.ids().next().unwrap();
        m.store.value_mut(id)[0] = 0.1 + 0.2;
        let bytes = encode(&m);
        let back = decode_model::<f64>(&bytes).unwrap();
        assert_eq!(encode(&back), bytes);
        assert_eq!(back.store.value(id)[0].to_bits(), (0.1f64 + 0.2).to_bits());
    }

    #[test]
    fn header_errors() {
        let m = SsaScModel::<f64>::new(tiny()).unwrap();
        let mut bytes = encode(&m);
        bytes[0] ^= 1;
        assert!(matches!(decode_model::<f64>(&bytes), Err(CheckpointError::Magic)));
        bytes[0] ^= 1;
        bytes[8] = 9;
        assert!(matches!(decode_model::<f64>(&bytes), Err(CheckpointError::Version { found: 9 })));
        bytes[8] = VERSION as u8;
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(decode_model::<f64>(&bytes), Err(CheckpointError::Truncated(_))));
    }

    #[test]
    fn config_mismatch_on_load_into() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&SsaScModel::<f64>::new(tiny()).unwrap(), &path).unwrap();
        let mut other = SsaScModel::<f64>::new(ModelConfig { seed: 3, ..tiny() }).unwrap();
        assert!(matches!(load_into(&mut other, &path), Err(CheckpointError::ConfigMismatch)));
    }
}
