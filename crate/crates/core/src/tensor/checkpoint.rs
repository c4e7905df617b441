//! `MCKPT1` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MCKPT1"
//! u32 entry count
//!   per entry: u32 name length, name bytes (UTF-8), u8 group tag,
//!              u32 rank, u64 per dim, f64 per element
//! u32 moment blob count
//!   per blob:  u32 name length, name bytes, u64 step,
//!              u64 element count, f64 first moments, f64 second moments
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::optim::AdamMoments;
use super::{Group, ParameterSet, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"MCKPT1";

/// Parameters plus optional optimizer moments.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub params: ParameterSet,
    pub moments: BTreeMap<String, AdamMoments>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Contract(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_f64s(out: &mut Vec<u8>, data: &[f64]) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn write_checkpoint(ckpt: &Checkpoint, mut w: impl Write) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, ckpt.params.len())?;
    for (name, p) in ckpt.params.iter() {
        put_str(&mut out, name)?;
        out.push(p.group.tag());
        put_u32(&mut out, p.value.shape().len())?;
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        put_f64s(&mut out, p.value.data());
    }
    put_u32(&mut out, ckpt.moments.len())?;
    for (name, m) in &ckpt.moments {
        put_str(&mut out, name)?;
        out.extend_from_slice(&m.step.to_le_bytes());
        out.extend_from_slice(&(m.m.len() as u64).to_le_bytes());
        put_f64s(&mut out, &m.m);
        put_f64s(&mut out, &m.v);
    }
    w.write_all(&out)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(self.pos, format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)?;
        let at = self.pos;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::format(at, format!("{what} is not UTF-8")))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::format(self.pos, "length overflow"))?, what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn read_checkpoint(mut r: impl Read) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(CHECKPOINT_MAGIC.len(), "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "not an MCKPT1 checkpoint"));
    }
    let mut params = ParameterSet::new();
    for _ in 0..c.u32("entry count")? {
        let name = c.string("parameter name")?;
        let at = c.pos;
        let tag = c.u8("group tag")?;
        let group = Group::from_tag(tag).ok_or_else(|| Error::format(at, format!("unknown group tag {tag}")))?;
        let rank = c.u32("rank")?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64("dimension")? as usize);
        }
        let at = c.pos;
        let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let numel = numel.ok_or_else(|| Error::format(at, "shape overflows"))?;
        let data = c.f64s(numel, "tensor data")?;
        let value = Tensor::new(&shape, data).map_err(|e| Error::format(at, e.to_string()))?;
        params.insert(name, group, value)?;
    }
    let mut moments = BTreeMap::new();
    for _ in 0..c.u32("moment count")? {
        let name = c.string("moment name")?;
        let step = c.u64("moment step")?;
        let n = c.u64("moment length")? as usize;
        let m = c.f64s(n, "first moments")?;
        let v = c.f64s(n, "second moments")?;
        moments.insert(name, AdamMoments { step, m, v });
    }
    if c.pos != buf.len() {
        return Err(Error::format(c.pos, "trailing bytes after checkpoint"));
    }
    Ok(Checkpoint { params, moments })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut buf = Vec::new();
    write_checkpoint(ckpt, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    read_checkpoint(fs::File::open(path)?)
}
