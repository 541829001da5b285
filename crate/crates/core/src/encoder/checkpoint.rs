//! Checkpoint container.
//!
//! Little-endian layout:
//!
//! ```text
//! magic        8 bytes  "AVALCKPT"
//! version      u32      1
//! config_len   u32      length of the JSON encoder config that follows
//! config       bytes    UTF-8 JSON of `EncoderConfig`
//! count        u32      number of tensors
//! per tensor:
//!   name_len   u32
//!   name       bytes    UTF-8
//!   ndim       u32
//!   dims       u32 × ndim
//!   data       f64 × product(dims)
//! ```

use std::fs;
use std::path::Path;

use super::{EncoderConfig, FusionModel, ParamStore};
use crate::error::{Error, Result};
use crate::numkernel::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AVALCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Encoder configuration plus named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: EncoderConfig,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn from_model(model: &FusionModel) -> Self {
        Checkpoint { config: model.config().clone(), params: model.params().clone() }
    }

    pub fn into_model(self) -> Result<FusionModel> {
        let mut model = FusionModel::new(self.config, 0)?;
        model.params_mut().load_from(&self.params)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&self.config).expect("config serializes");
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::format(origin, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(origin, format!("unsupported checkpoint version {version}")));
        }
        let cfg_len = r.u32()? as usize;
        let config: EncoderConfig = serde_json::from_slice(r.take(cfg_len)?)
            .map_err(|e| Error::format(origin, format!("config: {e}")))?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format(origin, "tensor name is not UTF-8"))?
                .to_string();
            let ndim = r.u32()? as usize;
            let dims: Vec<usize> = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let n: usize = dims.iter().product();
            let raw = r.take(n * 8)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(dims, data).map_err(|e| Error::format(origin, format!("tensor '{name}': {e}")))?;
            params.add(name, t);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(origin, "trailing bytes after last tensor"));
        }
        Ok(Checkpoint { config, params })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.origin, "truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint(path: &Path, model: &FusionModel) -> Result<()> {
    fs::write(path, Checkpoint::from_model(model).to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<FusionModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)?.into_model()
}
