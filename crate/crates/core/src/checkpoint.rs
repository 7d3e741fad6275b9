//! Versioned little-endian binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, length-prefixed kind string,
//! then a model-specific payload written with [`Writer`].

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"GOLCKPT\0";

pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(kind: &str) -> Self {
        let mut w = Self { buf: Vec::new() };
        w.buf.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION);
        w.str(kind);
        w
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.usize(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn f64s(&mut self, v: &[f64]) {
        self.usize(v.len());
        for x in v {
            self.f64(*x);
        }
    }

    pub fn usizes(&mut self, v: &[usize]) {
        self.usize(v.len());
        for x in v {
            self.usize(*x);
        }
    }

    pub fn params(&mut self, store: &ParamStore) {
        self.usize(store.len());
        for (name, t) in store.iter() {
            self.str(name);
            self.usizes(t.shape());
            self.f64s(t.data());
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }

    pub fn save(self, path: &Path) -> Result<()> {
        fs::write(path, self.buf).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8], kind: &str) -> Result<Self> {
        if buf.len() < MAGIC.len() || &buf[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let mut r = Self {
            buf,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} does not match supported version {FORMAT_VERSION}"
            )));
        }
        let found = r.string()?;
        if found != kind {
            return Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {found}")));
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("length {v} too large")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len_prefix(&mut self, elem: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.saturating_mul(elem) > self.buf.len() - self.pos {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        Ok(n)
    }

    pub fn string(&mut self) -> Result<String> {
        let n = self.len_prefix(1)?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid utf-8".into()))
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len_prefix(8)?;
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn usizes(&mut self) -> Result<Vec<usize>> {
        let n = self.len_prefix(8)?;
        (0..n).map(|_| self.usize()).collect()
    }

    /// Overwrites `store` in place; names and shapes must match exactly.
    pub fn params_into(&mut self, store: &mut ParamStore) -> Result<()> {
        let n = self.usize()?;
        if n != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {n} parameter tensors, model expects {}",
                store.len()
            )));
        }
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = self.string()?;
            let shape = self.usizes()?;
            let data = self.f64s()?;
            if name != store.name(id) || shape != store.get(id).shape() || data.len() != store.get(id).len() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} {shape:?} does not match model parameter {} {:?}",
                    store.name(id),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = Tensor::new(shape, data);
        }
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Checkpoint("trailing bytes in checkpoint".into()));
        }
        Ok(())
    }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Checkpoint(format!("missing file {}", path.display())),
        _ => Error::io(format!("reading {}", path.display()), e),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_primitives() {
        let mut w = Writer::new("demo");
        w.u32(7);
        w.f64(-1.5);
        w.str("hello");
        w.f64s(&[1.0, 2.0]);
        w.usizes(&[3, 4]);
        let bytes = w.finish();
        let mut r = Reader::new(&bytes, "demo").unwrap();
        assert_eq!(r.u32().unwrap(), 7);
        assert_eq!(r.f64().unwrap(), -1.5);
        assert_eq!(r.string().unwrap(), "hello");
        assert_eq!(r.f64s().unwrap(), vec![1.0, 2.0]);
        assert_eq!(r.usizes().unwrap(), vec![3, 4]);
        r.finish().unwrap();
    }

    #[test]
    fn version_mismatch_is_hard_error() {
        let mut bytes = Writer::new("demo").finish();
        bytes[8] = 99;
        let err = Reader::new(&bytes, "demo").err().unwrap();
        assert!(err.to_string().contains("format version 99"));
    }

    #[test]
    fn wrong_kind_and_truncation_are_errors() {
        let mut w = Writer::new("demo");
        w.f64s(&[1.0, 2.0, 3.0]);
        let bytes = w.finish();
        assert!(Reader::new(&bytes, "other").is_err());
        let mut r = Reader::new(&bytes[..bytes.len() - 4], "demo").unwrap();
        assert!(r.f64s().is_err());
        assert!(Reader::new(b"junk", "demo").is_err());
    }
}
