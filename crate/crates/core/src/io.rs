//! Little-endian binary encoding helpers for the artifact file formats.
//!
//! All on-disk formats (datasets, checkpoints, indexes) are little-endian with
//! CRC32-protected payloads. `ByteWriter`/`ByteReader` keep the encoding in one
//! place; truncation and checksum mismatches surface as [`Error::Format`].

use crate::error::{Error, Result};

#[derive(Debug, Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        ByteWriter { buf: Vec::new() }
    }

    pub fn put_bytes(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn put_u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn put_u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_f64_slice(&mut self, vs: &[f64]) {
        for &v in vs {
            self.put_f64(v);
        }
    }

    /// Length-prefixed UTF-8 string (u32 length).
    pub fn put_str(&mut self, s: &str) {
        self.put_u32(s.len() as u32);
        self.put_bytes(s.as_bytes());
    }

    /// Shape encoded as u8 rank followed by u32 dims.
    pub fn put_shape(&mut self, dims: &[usize]) {
        self.put_u8(dims.len() as u8);
        for &d in dims {
            self.put_u32(d as u32);
        }
    }

    /// Appends the CRC32 of everything written so far.
    pub fn put_trailing_crc(&mut self) {
        let crc = crc32fast::hash(&self.buf);
        self.put_u32(crc);
    }

    /// Appends `payload` as a length-prefixed (u64) section with trailing CRC32.
    pub fn put_section(&mut self, payload: &[u8]) {
        self.put_u64(payload.len() as u64);
        self.put_bytes(payload);
        self.put_u32(crc32fast::hash(payload));
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.buf
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

#[derive(Debug)]
pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take_bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format(format!(
                "unexpected end of data: need {n} bytes at offset {}, have {}",
                self.pos,
                self.remaining()
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn take_u8(&mut self) -> Result<u8> {
        Ok(self.take_bytes(1)?[0])
    }

    pub fn take_u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take_bytes(2)?.try_into().unwrap()))
    }

    pub fn take_u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take_bytes(4)?.try_into().unwrap()))
    }

    pub fn take_u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take_bytes(8)?.try_into().unwrap()))
    }

    pub fn take_f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take_bytes(4)?.try_into().unwrap()))
    }

    pub fn take_f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take_bytes(8)?.try_into().unwrap()))
    }

    pub fn take_f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.take_f64()?);
        }
        Ok(out)
    }

    pub fn take_str(&mut self) -> Result<String> {
        let len = self.take_u32()? as usize;
        let bytes = self.take_bytes(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Format("invalid UTF-8 string".into()))
    }

    pub fn take_shape(&mut self) -> Result<Vec<usize>> {
        let rank = self.take_u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(self.take_u32()? as usize);
        }
        Ok(dims)
    }

    /// Verifies a trailing CRC32 over everything consumed so far.
    pub fn check_trailing_crc(&mut self) -> Result<()> {
        let expected = crc32fast::hash(&self.buf[..self.pos]);
        let stored = self.take_u32()?;
        if stored != expected {
            return Err(Error::Format(format!(
                "checksum mismatch: stored {stored:#010x}, computed {expected:#010x}"
            )));
        }
        Ok(())
    }

    /// Reads a length-prefixed section written by [`ByteWriter::put_section`].
    pub fn take_section(&mut self) -> Result<&'a [u8]> {
        let len = self.take_u64()? as usize;
        let payload = self.take_bytes(len)?;
        let stored = self.take_u32()?;
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(Error::Format(format!(
                "section checksum mismatch: stored {stored:#010x}, computed {computed:#010x}"
            )));
        }
        Ok(payload)
    }

    pub fn expect_magic(&mut self, magic: &[u8; 4], what: &str) -> Result<()> {
        let got = self.take_bytes(4)?;
        if got != magic {
            return Err(Error::Format(format!(
                "bad magic for {what}: expected {:?}, got {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(got)
            )));
        }
        Ok(())
    }

    pub fn expect_version(&mut self, supported: u16, what: &str) -> Result<u16> {
        let v = self.take_u16()?;
        if v != supported {
            return Err(Error::Format(format!(
                "unsupported {what} version {v}, this build reads version {supported}"
            )));
        }
        Ok(v)
    }
}
