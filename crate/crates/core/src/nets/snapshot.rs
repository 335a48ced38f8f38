//! Binary parameter snapshot: `EPG1`, format version (u32), then policy,
//! value and discriminator vectors, each as a u64 length followed by
//! little-endian f32 values.

use crate::error::{Error, Result};

use super::{DiscParams, PolicyParams, ValueParams};

pub const MAGIC: &[u8; 4] = b"EPG1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NetsSnapshot {
    pub policy: PolicyParams,
    pub value: ValueParams,
    pub disc: DiscParams,
}

/// Little-endian byte sink.
#[derive(Debug, Default)]
pub struct BinWriter {
    pub buf: Vec<u8>,
}

impl BinWriter {
    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.buf.extend_from_slice(b);
    }
    pub fn f32_vec(&mut self, values: &[f64]) {
        self.u64(values.len() as u64);
        for v in values {
            self.buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    pub fn f64_vec(&mut self, values: &[f64]) {
        self.u64(values.len() as u64);
        for v in values {
            self.f64(*v);
        }
    }
}

/// Little-endian byte source; running out of bytes is an integrity error.
#[derive(Debug)]
pub struct BinReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> BinReader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(Error::Integrity(format!(
                "file truncated at byte {} (needed {n} more, {} left)",
                self.pos,
                self.data.len() - self.pos
            )));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len_prefix(&mut self, elem: usize) -> Result<usize> {
        let n = self.u64()? as usize;
        if n.checked_mul(elem).is_none_or(|b| b > self.data.len() - self.pos) {
            return Err(Error::Integrity(format!(
                "declared length {n} exceeds remaining {} bytes",
                self.data.len() - self.pos
            )));
        }
        Ok(n)
    }
    pub fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len_prefix(1)?;
        self.take(n)
    }
    pub fn f32_vec(&mut self) -> Result<Vec<f64>> {
        let n = self.len_prefix(4)?;
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
    pub fn f64_vec(&mut self) -> Result<Vec<f64>> {
        let n = self.len_prefix(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
    pub fn is_empty(&self) -> bool {
        self.pos == self.data.len()
    }
    pub fn finish(self) -> Result<()> {
        if !self.is_empty() {
            return Err(Error::Integrity(format!(
                "{} trailing bytes after payload",
                self.data.len() - self.pos
            )));
        }
        Ok(())
    }
}

impl NetsSnapshot {
    pub fn write(&self, w: &mut BinWriter) {
        w.buf.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION);
        w.f32_vec(self.policy.as_slice());
        w.f32_vec(self.value.as_slice());
        w.f32_vec(self.disc.as_slice());
    }

    pub fn read(r: &mut BinReader<'_>) -> Result<Self> {
        let magic = r.take(4).map_err(|_| Error::Format("missing magic bytes".into()))?;
        if magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}, expected {MAGIC:?}")));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {version} (this build reads {FORMAT_VERSION})"
            )));
        }
        Ok(Self {
            policy: PolicyParams(r.f32_vec()?),
            value: ValueParams(r.f32_vec()?),
            disc: DiscParams(r.f32_vec()?),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = BinWriter::default();
        self.write(&mut w);
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = BinReader::new(bytes);
        let snap = Self::read(&mut r)?;
        r.finish()?;
        Ok(snap)
    }
}
