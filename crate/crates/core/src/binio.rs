//! Little-endian framing helpers for the on-disk formats.

use crate::error::{Error, Result};

pub(crate) struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut w = Self { buf: Vec::new() };
        w.buf.extend_from_slice(magic);
        w.u32(version);
        w
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        self.buf.reserve(vs.len() * 8);
        for v in vs {
            self.f64(*v);
        }
    }

    /// `u64` length followed by UTF-8 bytes.
    pub fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks magic and version, returning a reader positioned after them.
    pub fn open(buf: &'a [u8], magic: &[u8; 4], version: u32) -> Result<Self> {
        let mut r = Self { buf, pos: 0 };
        let m = r.take(4, "magic")?;
        if m != magic {
            return Err(Error::Format {
                offset: 0,
                message: format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(m), String::from_utf8_lossy(magic)),
            });
        }
        let v = r.u32("version")?;
        if v != version {
            return Err(Error::Format { offset: 4, message: format!("unsupported version {v}, expected {version}") });
        }
        Ok(r)
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Format { offset: self.pos as u64, message: message.into() })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => self.fail(format!(
                "truncated while reading {what}: need {n} bytes, {} left",
                self.buf.len() - self.pos
            )),
        }
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    /// A `u64` count that must fit in memory-sized arithmetic.
    pub fn len(&mut self, what: &str) -> Result<usize> {
        let at = self.pos;
        let v = self.u64(what)?;
        usize::try_from(v).ok().filter(|&n| n < 1 << 40).ok_or(Error::Format {
            offset: at as u64,
            message: format!("implausible {what} {v}"),
        })
    }

    pub fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    pub fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = n.checked_mul(8).ok_or(Error::Format { offset: self.pos as u64, message: format!("{what} too large") })?;
        let raw = self.take(bytes, what)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    pub fn str(&mut self, what: &str) -> Result<String> {
        let n = self.len(what)?;
        let at = self.pos;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec())
            .map_err(|e| Error::Format { offset: at as u64, message: format!("{what} is not UTF-8: {e}") })
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return self.fail(format!("{} trailing bytes", self.buf.len() - self.pos));
        }
        Ok(())
    }
}

/// `rows * cols` without overflow.
pub(crate) fn product(r: &Reader<'_>, a: usize, b: usize) -> Result<usize> {
    a.checked_mul(b).map_or_else(|| r.fail(format!("block size {a} x {b} overflows")), Ok)
}
