//! Versioned binary container for [`ModelState`].
//!
//! Layout (little-endian): 8-byte magic, `u32` version, then the body, then
//! a CRC-32 of everything before it. The body holds the model config as
//! `key = value` text, stage, step, seed, trained volume ids, the named
//! parameter tensors and the optimizer moments.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::train::{ModelConfig, ModelState, Stage};

pub const MAGIC: &[u8; 8] = b"DCLSEGCK";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn params(&mut self, p: &ParamSet) {
        self.u32(p.len() as u32);
        for (name, t) in p.iter() {
            self.str(name);
            self.u8(DTYPE_F64);
            self.u32(t.shape().len() as u32);
            for &d in t.shape() {
                self.u64(d as u64);
            }
            for v in t.data() {
                self.0.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(String::from("unexpected end of checkpoint body")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format(String::from("invalid UTF-8 string")))
    }
    fn params(&mut self) -> Result<ParamSet> {
        let n = self.u32()?;
        let mut p = ParamSet::new();
        for _ in 0..n {
            let name = self.str()?;
            if self.u8()? != DTYPE_F64 {
                return Err(Error::Format(alloc::format!("tensor `{name}` has an unsupported dtype")));
            }
            let ndim = self.u32()? as usize;
            let shape = (0..ndim).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let len = len.ok_or_else(|| Error::Format(String::from("tensor too large")))?;
            let bytes = self.take(len.checked_mul(8).ok_or_else(|| Error::Format(String::from("tensor too large")))?)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            p.insert(name, Tensor::from_vec(&shape, data)?);
        }
        Ok(p)
    }
}

pub fn encode(state: &ModelState) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.str(&state.config.to_text());
    w.u8(state.stage.code());
    w.u64(state.step);
    w.u64(state.seed);
    w.u32(state.trained_ids.len() as u32);
    for &id in &state.trained_ids {
        w.u64(id);
    }
    w.params(&state.params);
    w.u64(state.optimizer.t);
    w.params(&state.optimizer.m);
    w.params(&state.optimizer.v);
    let crc = crc32fast::hash(&w.0);
    w.u32(crc);
    w.0
}

pub fn decode(bytes: &[u8]) -> Result<ModelState> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format(String::from("not a checkpoint (bad magic)")));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    if bytes.len() < 16 {
        return Err(Error::Checksum(String::from("file truncated before checksum")));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Checksum(alloc::format!(
            "stored {stored:08x}, computed {actual:08x}; file is corrupt or truncated"
        )));
    }
    let mut r = Reader { buf: body, pos: 12 };
    let config = ModelConfig::from_text(&r.str()?)?;
    let stage = Stage::from_code(r.u8()?)?;
    let step = r.u64()?;
    let seed = r.u64()?;
    let n_ids = r.u32()?;
    let trained_ids = (0..n_ids).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
    let params = r.params()?;
    let t = r.u64()?;
    let m = r.params()?;
    let v = r.params()?;
    if r.pos != body.len() {
        return Err(Error::Format(String::from("trailing bytes after checkpoint body")));
    }
    Ok(ModelState {
        config,
        params,
        optimizer: AdamState { m, v, t },
        stage,
        step,
        seed,
        trained_ids,
    })
}
