//! AQSW weight files.
//!
//! Layout (all integers little-endian `u32`):
//! `"AQSW"`, version, tensor count, then per tensor: name length, UTF-8 name,
//! rank, dims, and the values as little-endian `f32`.

use std::io::{Read, Write};

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"AQSW";
pub const VERSION: u32 = 1;

pub fn encode<'a, T: Real + 'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>) -> Vec<u8> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, msg: impl Into<String>) -> TensorError {
        TensorError::Format { offset: self.pos, msg: msg.into() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        c.pos = 0;
        return Err(c.err("bad magic, expected \"AQSW\""));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        c.pos -= 4;
        return Err(c.err(format!("unsupported version {version}")));
    }
    let count = c.u32("tensor count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let name_len = c.u32("name length")? as usize;
        let start = c.pos;
        let name = std::str::from_utf8(c.take(name_len, "name")?)
            .map_err(|e| TensorError::Format { offset: start + e.valid_up_to(), msg: "name is not UTF-8".into() })?
            .to_owned();
        let rank = c.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let at = c.pos;
            let d = c.u32("dim")? as usize;
            if d == 0 {
                return Err(TensorError::Format { offset: at, msg: format!("zero extent in `{name}`") });
            }
            dims.push(d);
        }
        let n: usize = dims.iter().product();
        let payload = c.take(n.checked_mul(4).ok_or_else(|| c.err("payload size overflows"))?, "payload")?;
        let data = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        out.push((name, Tensor::new(dims, data)?));
    }
    if c.pos != bytes.len() {
        return Err(c.err(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(out)
}

pub fn write<W: Write>(mut w: W, store: &ParamStore<f32>) -> Result<()> {
    w.write_all(&encode(store.iter().map(|(_, name, _, t)| (name, t))))?;
    Ok(())
}

pub fn read<R: Read>(mut r: R) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode(&bytes)
}

/// Overwrites matching tensors of `store` with the decoded ones. Every store
/// entry whose name starts with one of `prefixes` must be present.
pub fn load_into(store: &mut ParamStore<f32>, tensors: Vec<(String, Tensor<f32>)>, prefixes: &[&str]) -> Result<usize> {
    let mut loaded = 0;
    let mut seen = vec![false; store.len()];
    for (name, t) in tensors {
        let Some(id) = store.id(&name) else { continue };
        store.set(id, t)?;
        seen[id.index()] = true;
        loaded += 1;
    }
    for id in store.ids() {
        let name = store.name(id);
        if !seen[id.index()] && prefixes.iter().any(|p| name.starts_with(p)) {
            return Err(TensorError::Format { offset: 0, msg: format!("weight file lacks `{name}`") });
        }
    }
    Ok(loaded)
}
