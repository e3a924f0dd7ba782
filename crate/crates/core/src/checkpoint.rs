//! Checkpoint files.
//!
//! Layout (little-endian): `ATOMCKPT`, `u32` version, `u32` length + UTF-8
//! JSON header (configs and progress counters), `u32` buffer count, then per
//! buffer `u32` name length, name, `u32` rank, `u64` dims, `u64` length and
//! the `f32` values. Buffers are the parameters (`param/<name>`) and the
//! Adam moments (`adam.m/<name>`, `adam.v/<name>`).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::train::{Adam, TrainConfig, TrainState, Trainer};

pub const MAGIC: &[u8; 8] = b"ATOMCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub state: TrainState,
    pub adam_t: u64,
    /// FNV-1a of the two configs' JSON, hex.
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Buffer {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub buffers: Vec<Buffer>,
}

pub fn config_hash(model: &ModelConfig, train: &TrainConfig) -> String {
    let json = serde_json::to_string(&(model, train)).expect("configs serialize");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in json.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        let mut buffers = Vec::new();
        for (i, (_, p)) in t.model.store.iter().enumerate() {
            let shape = p.value.shape().to_vec();
            buffers.push(Buffer { name: format!("param/{}", p.name), shape: shape.clone(), data: p.value.data().to_vec() });
            buffers.push(Buffer { name: format!("adam.m/{}", p.name), shape: shape.clone(), data: t.adam.m[i].clone() });
            buffers.push(Buffer { name: format!("adam.v/{}", p.name), shape, data: t.adam.v[i].clone() });
        }
        Self {
            header: Header {
                model: t.model.cfg.clone(),
                train: t.cfg.clone(),
                state: t.state.clone(),
                adam_t: t.adam.t,
                config_hash: config_hash(&t.model.cfg, &t.cfg),
            },
            buffers,
        }
    }

    fn buffer(&self, name: &str) -> Result<&Buffer> {
        self.buffers
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing buffer {name:?}")))
    }

    /// Model with every parameter restored.
    pub fn model(&self) -> Result<Model<f32>> {
        let mut model = Model::<f32>::new(self.header.model.clone())?;
        let names: Vec<String> = model.store.iter().map(|(_, p)| p.name.clone()).collect();
        for (id, name) in model.store.ids().collect::<Vec<_>>().into_iter().zip(names) {
            let b = self.buffer(&format!("param/{name}"))?;
            let cur = model.store.get(id);
            if b.shape != cur.shape() {
                return Err(Error::Checkpoint(format!("{name}: shape {:?}, model expects {:?}", b.shape, cur.shape())));
            }
            *model.store.get_mut(id) = Tensor::new(b.shape.clone(), b.data.clone())?;
        }
        Ok(model)
    }

    /// Trainer state, optimizer included, ready to continue.
    pub fn trainer(&self) -> Result<Trainer> {
        let h = &self.header;
        if config_hash(&h.model, &h.train) != h.config_hash {
            return Err(Error::Checkpoint("config hash does not match the embedded configs".into()));
        }
        let model = self.model()?;
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (_, p) in model.store.iter() {
            for (kind, out) in [("adam.m", &mut m), ("adam.v", &mut v)] {
                let b = self.buffer(&format!("{kind}/{}", p.name))?;
                if b.data.len() != p.value.numel() {
                    return Err(Error::Checkpoint(format!("{kind}/{}: wrong length", p.name)));
                }
                out.push(b.data.clone());
            }
        }
        let mut t = Trainer::new(h.train.clone(), model)?;
        t.adam = Adam { cfg: h.train.adam, m, v, t: h.adam_t };
        t.state = h.state.clone();
        Ok(t)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&VERSION.to_le_bytes());
        let json = serde_json::to_vec(&self.header).expect("header serializes");
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.buffers.len() as u32).to_le_bytes());
        for b in &self.buffers {
            out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
            out.extend_from_slice(b.name.as_bytes());
            out.extend_from_slice(&(b.shape.len() as u32).to_le_bytes());
            for &d in &b.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(b.data.len() as u64).to_le_bytes());
            for v in &b.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let n = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(n)?).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let count = r.u32()? as usize;
        let mut buffers = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("buffer name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = r.u64()? as usize;
            if shape.iter().product::<usize>() != len {
                return Err(Error::Checkpoint(format!("{name}: shape {shape:?} does not hold {len} values")));
            }
            let raw = r.take(len.checked_mul(4).ok_or_else(|| Error::Checkpoint("buffer too large".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            buffers.push(Buffer { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { header, buffers })
    }

    /// Writes through a temporary file and a rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.encode()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
