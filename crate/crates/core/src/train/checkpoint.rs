//! Binary checkpoints.
//!
//! Layout: magic `SDCK`, version `u16`, a `u32`-length-prefixed UTF-8 config
//! block, then records of `{u16 name length, name, u8 dtype, 4 x u32
//! extents, little-endian payload}`, and finally a 64-bit FNV-1a checksum of
//! every preceding byte. All integers are little-endian.

use std::path::Path;

use super::adam::{AdamConfig, AdamState};
use crate::data::parse_key_values;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{DType, Real, Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"SDCK";
pub const VERSION: u16 = 1;

const PARAM: &str = "param/";
const MEAN: &str = "stats.mean/";
const VAR: &str = "stats.var/";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A stored tensor with its element type.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dtype: DType,
    pub shape: Shape,
    /// Little-endian element bytes.
    pub payload: Vec<u8>,
}

impl Record {
    pub fn from_tensor<T: Real>(name: String, t: &Tensor<T>) -> Self {
        let mut payload = Vec::with_capacity(t.len() * T::DTYPE.size());
        for &v in t.data() {
            v.write_le(&mut payload);
        }
        Record {
            name,
            dtype: T::DTYPE,
            shape: t.shape(),
            payload,
        }
    }

    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        if self.dtype != T::DTYPE {
            return Err(Error::format(format!(
                "record `{}` holds {:?}, expected {:?}",
                self.name,
                self.dtype,
                T::DTYPE
            )));
        }
        let data = self.payload.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
        Tensor::new(self.shape, data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// `key = value` text: the model config followed by run metadata.
    pub config: String,
    pub records: Vec<Record>,
}

impl Checkpoint {
    /// Captures the model, optional optimizer state and extra metadata lines.
    pub fn capture<T: Real>(model: &Model<T>, adam: Option<&AdamState<T>>, meta: &[(String, String)]) -> Self {
        let mut config = model.config().to_text();
        if let Some(a) = adam {
            config.push_str(&format!(
                "adam_lr = {:?}\nadam_beta1 = {:?}\nadam_beta2 = {:?}\nadam_eps = {:?}\nadam_step = {}\n",
                a.config.lr, a.config.beta1, a.config.beta2, a.config.eps, a.t
            ));
        }
        for (k, v) in meta {
            config.push_str(&format!("{k} = {v}\n"));
        }
        let mut records = Vec::new();
        for p in model.params() {
            records.push(Record::from_tensor(format!("{PARAM}{}", p.name), &p.value));
        }
        for s in model.running_stats() {
            records.push(Record::from_tensor(format!("{MEAN}{}", s.name), &s.value.mean));
            records.push(Record::from_tensor(format!("{VAR}{}", s.name), &s.value.var));
        }
        if let Some(a) = adam {
            for (p, (m, v)) in model.params().iter().zip(a.m.iter().zip(&a.v)) {
                records.push(Record::from_tensor(format!("{ADAM_M}{}", p.name), m));
                records.push(Record::from_tensor(format!("{ADAM_V}{}", p.name), v));
            }
        }
        Checkpoint { config, records }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let len = u32::try_from(self.config.len()).map_err(|_| Error::format("config block too large"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        for r in &self.records {
            let n = u16::try_from(r.name.len()).map_err(|_| Error::format("record name too long"))?;
            out.extend_from_slice(&n.to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.dtype as u8);
            for &e in &r.shape.0 {
                let e = u32::try_from(e).map_err(|_| Error::format("extent too large"))?;
                out.extend_from_slice(&e.to_le_bytes());
            }
            out.extend_from_slice(&r.payload);
        }
        out.extend_from_slice(&fnv1a(&out).to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 2 + 4 + 8 {
            return Err(Error::format("checkpoint truncated"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        if &body[..4] != MAGIC {
            return Err(Error::format("not a checkpoint (bad magic)"));
        }
        let mut r = Reader { bytes: body, pos: 4 };
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        if stored != fnv1a(body) {
            return Err(Error::format("checkpoint checksum mismatch (truncated or corrupt)"));
        }
        let len = r.u32()? as usize;
        let config = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::format("config block is not UTF-8"))?;
        let mut records = Vec::new();
        while r.pos < body.len() {
            let n = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::format("record name is not UTF-8"))?;
            let tag = r.take(1)?[0];
            let dtype = DType::from_tag(tag).ok_or_else(|| Error::format(format!("unknown dtype tag {tag}")))?;
            let mut extents = [0usize; 4];
            for e in extents.iter_mut() {
                *e = r.u32()? as usize;
            }
            let shape = Shape(extents);
            let payload = r.take(shape.numel() * dtype.size())?.to_vec();
            records.push(Record {
                name,
                dtype,
                shape,
                payload,
            });
        }
        Ok(Checkpoint { config, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes()?)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Looks up a key in the config block.
    pub fn meta(&self, key: &str) -> Option<String> {
        parse_key_values(&self.config)
            .ok()?
            .into_iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        ModelConfig::from_text(&self.config)
    }

    fn find(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    /// Rebuilds the stored model.
    pub fn model<T: Real>(&self) -> Result<Model<T>> {
        let mut model = Model::init(self.model_config()?, 0)?;
        self.load_into(&mut model)?;
        Ok(model)
    }

    /// Copies stored parameters and running statistics into `model`. Every
    /// tensor must be present with exactly the model's shape; the first one
    /// that is not is named in the error and nothing is modified.
    pub fn load_into<T: Real>(&self, model: &mut Model<T>) -> Result<()> {
        let fetch = |name: String, want: Shape| -> Result<Tensor<T>> {
            let r = self
                .find(&name)
                .ok_or_else(|| Error::shape(format!("checkpoint has no `{name}`")))?;
            if r.shape != want {
                return Err(Error::shape(format!(
                    "`{name}` is {:?} in the checkpoint but {:?} in the model",
                    r.shape, want
                )));
            }
            r.to_tensor()
        };
        let params = model
            .params()
            .iter()
            .map(|p| fetch(format!("{PARAM}{}", p.name), p.value.shape()))
            .collect::<Result<Vec<_>>>()?;
        let stats = model
            .running_stats()
            .iter()
            .map(|s| {
                Ok((
                    fetch(format!("{MEAN}{}", s.name), s.value.mean.shape())?,
                    fetch(format!("{VAR}{}", s.name), s.value.var.shape())?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        for (p, v) in model.params_mut().iter_mut().zip(params) {
            p.value = v;
        }
        for (s, (mean, var)) in model.running_stats_mut().iter_mut().zip(stats) {
            s.value.mean = mean;
            s.value.var = var;
        }
        Ok(())
    }

    /// Optimizer state for `model`, if the checkpoint carries one.
    pub fn adam_state<T: Real>(&self, model: &Model<T>) -> Result<Option<AdamState<T>>> {
        let Some(step) = self.meta("adam_step") else {
            return Ok(None);
        };
        let num = |k: &str| -> Result<f64> {
            self.meta(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format(format!("checkpoint lacks a numeric `{k}`")))
        };
        let config = AdamConfig {
            lr: num("adam_lr")?,
            beta1: num("adam_beta1")?,
            beta2: num("adam_beta2")?,
            eps: num("adam_eps")?,
        };
        let t = step.parse().map_err(|_| Error::format("bad adam_step"))?;
        let mut m = Vec::new();
        let mut v = Vec::new();
        for p in model.params() {
            for (prefix, out) in [(ADAM_M, &mut m), (ADAM_V, &mut v)] {
                let name = format!("{prefix}{}", p.name);
                let r = self
                    .find(&name)
                    .ok_or_else(|| Error::shape(format!("checkpoint has no `{name}`")))?;
                if r.shape != p.value.shape() {
                    return Err(Error::shape(format!("`{name}` does not match the model")));
                }
                out.push(r.to_tensor()?);
            }
        }
        Ok(Some(AdamState { config, m, v, t }))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format("checkpoint truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
