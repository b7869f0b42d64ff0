//! Binary checkpoint container.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic    8 bytes   "SCPCCKPT"
//! version  u32
//! cfg_len  u32       followed by cfg_len bytes of UTF-8 `key = value` config
//! count    u32       number of arrays
//! array*:  name_len u32, name bytes, ndim u32, dims u64 * ndim, data f64 * prod(dims)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::ScpcModel;

use super::{TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"SCPCCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: ScpcModel,
    pub state: TrainState,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_array(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.shape().len() as u32);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() < n {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn array(&mut self) -> Result<(String, Tensor)> {
        let n = self.u32()? as usize;
        let name = String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?;
        let ndim = self.u32()? as usize;
        let shape: Vec<usize> = (0..ndim).map(|_| self.u64().map(|d| d as usize)).collect::<Result<_>>()?;
        let numel: usize = shape.iter().product();
        let bytes = self.take(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint("array too large".into()))?)?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        let cfg = self.config.to_kv();
        put_u32(&mut out, cfg.len() as u32);
        out.extend_from_slice(cfg.as_bytes());
        let arrays = self.arrays();
        put_u32(&mut out, arrays.len() as u32);
        for (name, t) in &arrays {
            put_array(&mut out, name, t);
        }
        out
    }

    fn arrays(&self) -> Vec<(String, Tensor)> {
        let names = ScpcModel::param_names();
        let mut v: Vec<(String, Tensor)> = names.iter().cloned().zip(self.model.params().into_iter().cloned()).collect();
        let s = &self.state;
        for (n, m) in names.iter().zip(&s.m) {
            v.push((format!("adam.m.{n}"), m.clone()));
        }
        for (n, m) in names.iter().zip(&s.v) {
            v.push((format!("adam.v.{n}"), m.clone()));
        }
        v.push(("state.epoch".into(), Tensor::scalar(s.epoch as f64)));
        v.push(("state.step".into(), Tensor::scalar(s.step as f64)));
        v.push(("state.adam_t".into(), Tensor::scalar(s.adam_t as f64)));
        let h: Vec<f64> = s.history.iter().flat_map(|r| r.iter().copied()).collect();
        v.push(("state.history".into(), Tensor::new(vec![s.history.len(), 3], h).expect("shape")));
        v
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes };
        if r.take(8).ok() != Some(&MAGIC[..]) {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("format version {version}, this build reads version {VERSION}")));
        }
        let n = r.u32()? as usize;
        let cfg_text = std::str::from_utf8(r.take(n)?).map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        let config = TrainConfig::from_kv(cfg_text)?;
        let count = r.u32()?;
        let mut arrays = std::collections::BTreeMap::new();
        for _ in 0..count {
            let (name, t) = r.array()?;
            arrays.insert(name, t);
        }
        let mut take = |name: &str, like: &Tensor| -> Result<Tensor> {
            let t = arrays.remove(name).ok_or_else(|| Error::Checkpoint(format!("missing array `{name}`")))?;
            if t.shape() != like.shape() {
                return Err(Error::Checkpoint(format!("array `{name}` has shape {:?}, expected {:?}", t.shape(), like.shape())));
            }
            Ok(t)
        };
        let mut model = ScpcModel::init(config.model_config(), 0);
        let names = ScpcModel::param_names();
        for (name, slot) in names.iter().zip(model.params_mut()) {
            let t = take(name, slot)?;
            *slot = t;
        }
        let like: Vec<Tensor> = model.params().into_iter().cloned().collect();
        let m = names.iter().zip(&like).map(|(n, l)| take(&format!("adam.m.{n}"), l)).collect::<Result<Vec<_>>>()?;
        let v = names.iter().zip(&like).map(|(n, l)| take(&format!("adam.v.{n}"), l)).collect::<Result<Vec<_>>>()?;
        let scalar = Tensor::scalar(0.0);
        let epoch = take("state.epoch", &scalar)?.item() as usize;
        let step = take("state.step", &scalar)?.item() as usize;
        let adam_t = take("state.adam_t", &scalar)?.item() as u64;
        let h = arrays.remove("state.history").ok_or_else(|| Error::Checkpoint("missing array `state.history`".into()))?;
        if h.ndim() != 2 || h.cols() != 3 {
            return Err(Error::Checkpoint(format!("state.history has shape {:?}", h.shape())));
        }
        let history = h.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        Ok(Self { config, model, state: TrainState { epoch, step, adam_t, m, v, history } })
    }

    /// Writes atomically via a temporary file in the same directory.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
