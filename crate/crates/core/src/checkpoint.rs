//! Versioned little-endian binary records shared by every persisted model.
//!
//! Layout: magic `RARN`, `u16` format version, `u8` kind tag, then a
//! kind-specific body written with [`RecordWriter`].

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RARN";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum RecordKind {
    ScoreModel = 0,
    Recommender = 1,
    Predictor = 2,
}

impl RecordKind {
    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(RecordKind::ScoreModel),
            1 => Ok(RecordKind::Recommender),
            2 => Ok(RecordKind::Predictor),
            other => Err(Error::Checkpoint(format!("unknown kind tag {other}"))),
        }
    }
}

#[derive(Debug, Default)]
pub struct RecordWriter {
    buf: Vec<u8>,
}

impl RecordWriter {
    pub fn new(kind: RecordKind) -> Self {
        let mut w = RecordWriter { buf: Vec::with_capacity(1024) };
        w.buf.extend_from_slice(MAGIC);
        w.buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        w.buf.push(kind as u8);
        w
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    /// Length-prefixed run of reals.
    pub fn f64s(&mut self, vs: &[f64]) -> &mut Self {
        self.u32(vs.len() as u32);
        for &v in vs {
            self.f64(v);
        }
        self
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }

    pub fn write_to(self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        fs::write(path, self.buf)?;
        Ok(())
    }
}

pub struct RecordReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> RecordReader<'a> {
    /// Validates the header and checks the kind tag.
    pub fn new(buf: &'a [u8], expected: RecordKind) -> Result<Self> {
        if buf.len() < 7 || &buf[..4] != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u16::from_le_bytes([buf[4], buf[5]]);
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let kind = RecordKind::from_tag(buf[6])?;
        if kind != expected {
            return Err(Error::Checkpoint(format!("expected {expected:?} record, found {kind:?}")));
        }
        Ok(RecordReader { buf, pos: 7 })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated record".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
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

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u32()? as usize;
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn finish(self) -> Result<()> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!("{} trailing bytes", self.buf.len() - self.pos)))
        }
    }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.to_path_buf()));
    }
    Ok(fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_roundtrip_and_kind_check() {
        let mut w = RecordWriter::new(RecordKind::Predictor);
        w.u32(7).f64s(&[1.5, -2.0]).f64(f64::MIN_POSITIVE);
        let bytes = w.finish();
        assert_eq!(&bytes[..4], b"RARN");

        let mut r = RecordReader::new(&bytes, RecordKind::Predictor).unwrap();
        assert_eq!(r.u32().unwrap(), 7);
        assert_eq!(r.f64s().unwrap(), vec![1.5, -2.0]);
        assert_eq!(r.f64().unwrap(), f64::MIN_POSITIVE);
        r.finish().unwrap();

        assert!(RecordReader::new(&bytes, RecordKind::Recommender).is_err());
    }

    #[test]
    fn truncated_record_is_rejected() {
        let mut w = RecordWriter::new(RecordKind::ScoreModel);
        w.f64s(&[1.0, 2.0, 3.0]);
        let bytes = w.finish();
        let mut r = RecordReader::new(&bytes[..bytes.len() - 3], RecordKind::ScoreModel).unwrap();
        assert!(r.f64s().is_err());
    }
}
