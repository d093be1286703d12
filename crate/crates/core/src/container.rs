//! Little-endian byte encoding shared by every on-disk format: length-prefixed
//! strings, named `f32` tensor entries and a trailing 64-bit checksum.
//!
//! A generic tensor bundle (magic `VIMT`) built from the same pieces holds
//! backbones, task heads, downstream state and dataset dumps.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const BUNDLE_MAGIC: &[u8; 4] = b"VIMT";
pub const BUNDLE_VERSION: u32 = 1;

/// First eight bytes of SHA-256, read little-endian.
pub fn checksum64(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 is 32 bytes"))
}

#[derive(Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn i64(&mut self, v: i64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }

    pub fn tensor(&mut self, name: &str, t: &Tensor<f32>) {
        self.str(name);
        self.u32(t.rank() as u32);
        for &e in t.shape() {
            self.u32(e as u32);
        }
        for &v in t.data() {
            self.f32(v);
        }
    }

    /// Appends the checksum of everything written so far and returns the bytes.
    pub fn finish(mut self) -> Vec<u8> {
        let sum = checksum64(&self.buf);
        self.u64(sum);
        self.buf
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
}

pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    /// Verifies and strips the trailing checksum.
    pub fn checked(buf: &'a [u8]) -> Result<Self> {
        if buf.len() < 8 {
            return Err(Error::Truncated {
                offset: buf.len(),
                needed: 8 - buf.len(),
            });
        }
        let (body, tail) = buf.split_at(buf.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        let computed = checksum64(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        Ok(ByteReader::new(body))
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated {
                offset: self.pos,
                needed: n - self.remaining(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.array()?))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|e| Error::Malformed(format!("invalid UTF-8: {e}")))
    }

    pub fn tensor(&mut self) -> Result<(String, Tensor<f32>)> {
        let name = self.str()?;
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = self.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Malformed(format!("tensor {name}: {e}")))?;
        Ok((name, t))
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let found = self.take(4)?;
        if found != expected {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Ordered named tensors plus string metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorBundle {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl TensorBundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Malformed(format!("missing metadata key {key}")))
    }

    /// Tensors whose names start with `prefix`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, Tensor<f32>)> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|rest| (rest.to_string(), t.clone())))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(BUNDLE_MAGIC);
        w.u32(BUNDLE_VERSION);
        w.u32(self.meta.len() as u32);
        for (k, v) in &self.meta {
            w.str(k);
            w.str(v);
        }
        w.u32(self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            w.tensor(name, t);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::checked(bytes)?;
        r.magic(BUNDLE_MAGIC)?;
        let version = r.u32()?;
        if version > BUNDLE_VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                supported: BUNDLE_VERSION,
            });
        }
        let mut bundle = TensorBundle::new();
        for _ in 0..r.u32()? {
            let k = r.str()?;
            let v = r.str()?;
            bundle.meta.insert(k, v);
        }
        for _ in 0..r.u32()? {
            let (name, t) = r.tensor()?;
            bundle.tensors.push((name, t));
        }
        if r.remaining() != 0 {
            return Err(Error::Malformed(format!("{} trailing bytes", r.remaining())));
        }
        Ok(bundle)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&read_file(path.as_ref())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundle_round_trip_and_corruption() {
        let mut b = TensorBundle::new().with_meta("kind", "head");
        b.push("w", Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.5, 0.0]).unwrap());
        let bytes = b.to_bytes();
        assert_eq!(TensorBundle::from_bytes(&bytes).unwrap(), b);

        let mut bad = bytes.clone();
        bad[10] ^= 1;
        assert!(matches!(TensorBundle::from_bytes(&bad), Err(Error::Checksum { .. })));
        assert!(TensorBundle::from_bytes(&bytes[..5]).is_err());
    }
}
