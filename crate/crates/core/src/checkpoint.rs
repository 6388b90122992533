//! Single-file little-endian checkpoints.
//!
//! Layout: magic `FAMC`, version `u32`, header length `u32`, header text
//! (canonical `key=value` model config plus `dtype`), entry count `u32`, then
//! each tensor in name order as name length `u32`, name bytes, rank `u32`,
//! extents `u32`…, raw scalars. Saved FAM states use the `rsp/` prefix.

use std::fs;
use std::path::Path;

use crate::config_text::KvText;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"FAMC";
pub const VERSION: u32 = 1;
pub const RSP_PREFIX: &str = "rsp/";

/// Decoded checkpoint contents.
#[derive(Clone, Debug)]
pub struct Checkpoint<S> {
    pub config: ModelConfig,
    /// Model parameters, sorted by name.
    pub params: Vec<(String, Tensor<S>)>,
    /// Per-layer saved FAM tensors; empty when none were saved.
    pub rsp: Vec<Tensor<S>>,
}

fn rsp_name(layer: usize) -> String {
    format!("{RSP_PREFIX}layer.{layer:04}")
}

impl<S: Scalar> Checkpoint<S> {
    pub fn from_model(model: &Model<S>, rsp: &[Tensor<S>]) -> Self {
        let mut params: Vec<_> = model.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        params.sort_by(|a, b| a.0.cmp(&b.0));
        Self { config: model.config().clone(), params, rsp: rsp.to_vec() }
    }

    pub fn into_model(self) -> Result<(Model<S>, Vec<Tensor<S>>)> {
        let model = Model::from_named(self.config, &self.params)?;
        if model.params().len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} stored parameters, model has {}",
                self.params.len(),
                model.params().len()
            )));
        }
        Ok((model, self.rsp))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut header = self.config.to_kv();
        header.set("dtype", S::DTYPE);
        let header = header.to_canonical();
        let mut entries: Vec<(String, &Tensor<S>)> = self.params.iter().map(|(n, t)| (n.clone(), t)).collect();
        entries.extend(self.rsp.iter().enumerate().map(|(i, t)| (rsp_name(i), t)));
        entries.sort_by(|a, b| a.0.cmp(&b.0));

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, header.len() as u32);
        out.extend_from_slice(header.as_bytes());
        put_u32(&mut out, entries.len() as u32);
        for (name, t) in entries {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.shape().len() as u32);
            for &e in t.shape() {
                put_u32(&mut out, e as u32);
            }
            for &x in t.data() {
                x.write_le(&mut out);
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(hlen)?).map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
        let header = KvText::parse(header)?;
        match header.get("dtype") {
            Some(d) if d == S::DTYPE => {}
            other => {
                return Err(Error::Checkpoint(format!("stored dtype {other:?}, expected {}", S::DTYPE)));
            }
        }
        let config = ModelConfig::from_kv(&header)?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        let mut rsp = Vec::new();
        let mut last: Option<String> = None;
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
            if last.as_ref().is_some_and(|l| *l >= name) {
                return Err(Error::Checkpoint(format!("entry {name} out of order")));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * S::BYTES)?;
            let data = raw.chunks_exact(S::BYTES).map(S::read_le).collect();
            let t = Tensor::new(shape, data)?;
            if let Some(rest) = name.strip_prefix(RSP_PREFIX) {
                if rest != rsp_name(rsp.len()).trim_start_matches(RSP_PREFIX) {
                    return Err(Error::Checkpoint(format!("unexpected saved-state entry {name}")));
                }
                rsp.push(t);
            } else {
                params.push((name.clone(), t));
            }
            last = Some(name);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { config, params, rsp })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
