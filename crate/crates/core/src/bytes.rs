//! Little helper for parsing binary files with byte-offset error reporting.

use crate::error::{Error, Result};

pub(crate) struct ByteReader {
    buf: Vec<u8>,
    pos: usize,
}

impl ByteReader {
    pub fn new(buf: Vec<u8>) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn position(&self) -> u64 {
        self.pos as u64
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Parse {
                offset: self.pos as u64,
                msg: format!(
                    "truncated file: needed {n} bytes for {what}, {} remain",
                    self.buf.len() - self.pos
                ),
            });
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    pub fn expect_magic(&mut self, magic: &[u8; 4], what: &str) -> Result<()> {
        let offset = self.position();
        let got = self.take(4, "magic")?;
        if got != magic {
            return Err(Error::Parse {
                offset,
                msg: format!("bad {what} magic: expected {magic:?}, got {got:?}"),
            });
        }
        Ok(())
    }

    pub fn read_u32_le(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn read_u32_be(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn read_u64_le(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn read_f64_le(&mut self, what: &str) -> Result<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn read_bytes(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        self.take(n, what)
    }

    pub fn expect_eof(&self, what: &str) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Parse {
                offset: self.pos as u64,
                msg: format!("{} trailing bytes after {what}", self.buf.len() - self.pos),
            });
        }
        Ok(())
    }
}
