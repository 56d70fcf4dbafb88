//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"MCGMCKPT" | u32 version | u64 header_len | header (UTF-8 JSON) | f64 data
//! ```
//!
//! The header holds the backbone config, the output normalization, a tensor
//! directory (name, shape, element offset, frozen flag) for the parameters and
//! for any extra tensors, and a free-form `meta` object. Tensor data follows
//! the header back to back in directory order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BackboneConfig, Model, Normalization};
use crate::error::{Error, Result};
use crate::numcore::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"MCGMCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    /// Optimizer moments and similar state, keyed by name.
    pub extra: Vec<(String, Tensor)>,
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    #[serde(default)]
    frozen: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: BackboneConfig,
    norm: Normalization,
    params: Vec<Entry>,
    extra: Vec<Entry>,
    meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Checkpoint {
            model,
            extra: Vec::new(),
            meta: serde_json::Value::Null,
        }
    }

    pub fn extra_tensor(&self, name: &str) -> Option<&Tensor> {
        self.extra.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let mut dir = |name: &str, t: &Tensor, frozen: bool| {
            let e = Entry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
                frozen,
            };
            offset += t.len();
            e
        };
        let params: Vec<Entry> = self
            .model
            .params
            .iter()
            .map(|p| dir(&p.name, &p.value, p.frozen))
            .collect();
        let extra: Vec<Entry> = self.extra.iter().map(|(n, t)| dir(n, t, false)).collect();
        let header = serde_json::to_vec(&Header {
            config: self.model.config.clone(),
            norm: self.model.norm,
            params,
            extra,
            meta: self.meta.clone(),
        })?;
        let mut out = Vec::with_capacity(20 + header.len() + offset * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let tensors = self
            .model
            .params
            .iter()
            .map(|p| &p.value)
            .chain(self.extra.iter().map(|(_, t)| t));
        for t in tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let data = &body[hlen..];
        if data.len() % 8 != 0 {
            return Err(bad("tensor data is not a whole number of f64 values"));
        }
        let floats: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let take = |e: &Entry| -> Result<Tensor> {
            let n: usize = e.shape.iter().product();
            let slice = floats
                .get(e.offset..e.offset + n)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {} runs past the end of the data", e.name)))?;
            Tensor::new(e.shape.clone(), slice.to_vec())
        };
        header.config.validate()?;
        let mut model = Model::new(header.config, 0)?;
        model.norm = header.norm;
        if header.params.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters for this config, file has {}",
                model.params.len(),
                header.params.len()
            )));
        }
        let mut store = ParamStore::new();
        for e in &header.params {
            let t = take(e)?;
            let expect = model
                .params
                .by_name(&e.name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter {}", e.name)))?;
            if expect.value.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, config implies {:?}",
                    e.name,
                    t.shape(),
                    expect.value.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Checkpoint(format!("parameter {} is not finite", e.name)));
            }
            let id = store.insert(e.name.clone(), t)?;
            store.get_mut(id).frozen = e.frozen;
        }
        model.params = store;
        let extra = header
            .extra
            .iter()
            .map(|e| Ok((e.name.clone(), take(e)?)))
            .collect::<Result<_>>()?;
        Ok(Checkpoint {
            model,
            extra,
            meta: header.meta,
        })
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    // write-then-rename so an interrupted run never leaves a torn file
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
