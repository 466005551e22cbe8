//! Versioned checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"RONINCKP"  u32 version  u32 header_len  header (JSON: config + meta)
//! u32 n_arrays
//! n_arrays × { u16 name_len, name (UTF-8), u8 ndim, ndim × u32 dim, f32 data... }
//! ```

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::IxDyn;
use serde::{Deserialize, Serialize};

use super::{check_params, ModelConfig, ParamSet, Restorer};
use crate::autograd::Tensor;

const MAGIC: &[u8; 8] = b"RONINCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint config does not match the requested config")]
    ConfigMismatch,
    #[error("invalid parameters: {0}")]
    Params(#[from] super::ModelError),
    #[error("malformed array record: {0}")]
    Record(String),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    pub seed: u64,
    #[serde(default)]
    pub label: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: CheckpointMeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: CheckpointMeta,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn from_restorer(model: &Restorer, meta: CheckpointMeta) -> Self {
        Self {
            config: model.config.clone(),
            meta,
            params: model.params.round_to_f32(),
        }
    }

    pub fn into_restorer(self) -> Result<Restorer, CheckpointError> {
        Ok(Restorer::new(self.config, self.params)?)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            meta: self.meta.clone(),
        })?;
        w.write_u32::<LittleEndian>(header.len() as u32)?;
        w.write_all(&header)?;
        w.write_u32::<LittleEndian>(self.params.len() as u32)?;
        for (name, t) in self.params.iter() {
            w.write_u16::<LittleEndian>(name.len() as u16)?;
            w.write_all(name.as_bytes())?;
            w.write_u8(t.ndim() as u8)?;
            for &d in t.shape() {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
            for &v in t.iter() {
                w.write_f32::<LittleEndian>(v as f32)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let hlen = r.read_u32::<LittleEndian>()? as usize;
        let mut hbuf = vec![0u8; hlen];
        r.read_exact(&mut hbuf)?;
        let header: Header = serde_json::from_slice(&hbuf)?;
        let n = r.read_u32::<LittleEndian>()?;
        let mut params = ParamSet::new();
        for _ in 0..n {
            let nlen = r.read_u16::<LittleEndian>()? as usize;
            let mut nbuf = vec![0u8; nlen];
            r.read_exact(&mut nbuf)?;
            let name = String::from_utf8(nbuf).map_err(|e| CheckpointError::Record(e.to_string()))?;
            let ndim = r.read_u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.read_u32::<LittleEndian>()? as usize);
            }
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(r.read_f32::<LittleEndian>()? as f64);
            }
            let t = Tensor::from_shape_vec(IxDyn(&shape), data)
                .map_err(|e| CheckpointError::Record(format!("{name}: {e}")))?;
            params.insert(name, t);
        }
        header.config.validate()?;
        check_params(&header.config, &params)?;
        Ok(Self {
            config: header.config,
            meta: header.meta,
            params,
        })
    }

    /// Writes through a temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        crate::fsutil::write_atomic(path, &buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }

    /// Loads and rejects a checkpoint built for a different config.
    pub fn load_expecting(path: &Path, config: &ModelConfig) -> Result<Self, CheckpointError> {
        let ck = Self::load(path)?;
        if &ck.config != config {
            return Err(CheckpointError::ConfigMismatch);
        }
        Ok(ck)
    }
}
