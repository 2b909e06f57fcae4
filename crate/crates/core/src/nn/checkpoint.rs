//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"ALIGNLAB" | u32 version | u64 header_len | header JSON
//! u64 n_tensors | n × (u32 name_len | name | u32 ndim | ndim × u64 | numel × f64)
//! ```
//!
//! Floats are stored as raw IEEE-754 bits so a load reproduces every value
//! exactly.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::model::{ModelConfig, PipelineModel};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"ALIGNLAB";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    seed: u64,
    meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub seed: u64,
    /// Free-form state, e.g. trainer progress.
    pub meta: serde_json::Value,
    pub tensors: IndexMap<String, Tensor>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflow".into()))
    }
}

impl Checkpoint {
    pub fn from_model(model: &PipelineModel, meta: serde_json::Value) -> Self {
        let tensors = model
            .store
            .iter()
            .map(|(_, p)| {
                let t = Tensor::new(p.tensor.shape().to_vec(), p.tensor.data().to_vec()).expect("valid shape");
                (p.name.clone(), t)
            })
            .collect();
        Self {
            model: model.config.clone(),
            seed: model.store.seed(),
            meta,
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            model: self.model.clone(),
            seed: self.seed,
            meta: self.meta.clone(),
        })
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not an alignlab checkpoint".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let hlen = r.len()?;
        let header: Header =
            serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let n = r.len()?;
        let mut tensors = IndexMap::with_capacity(n);
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect();
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint("trailing bytes after tensors".into()));
        }
        Ok(Self {
            model: header.model,
            seed: header.seed,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        static COUNTER: AtomicU64 = AtomicU64::new(0);
        let n = COUNTER.fetch_add(1, Ordering::Relaxed);
        let tmp = path.with_extension(format!("tmp{}.{n}", std::process::id()));
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the model and overwrites every parameter from the stored tensors.
    pub fn to_model(&self) -> Result<PipelineModel> {
        let mut model = PipelineModel::new(&self.model, self.seed)?;
        self.restore_into(&mut model)?;
        Ok(model)
    }

    pub fn restore_into(&self, model: &mut PipelineModel) -> Result<()> {
        for (_, p) in model.store.iter_mut() {
            let t = self
                .tensors
                .get(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{}`", p.name)))?;
            if t.shape() != p.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}
