//! Length-prefixed binary encoding shared by the chain, the wire messages and
//! the store snapshot.
//!
//! Every field is written as an 8-byte big-endian length followed by the field
//! bytes. Integers are encoded as their 8-byte big-endian representation (so
//! they appear as a field of length 8).

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("unexpected end of input at offset {0}")]
    Truncated(usize),
    #[error("field at offset {offset} has length {got}, expected {expected}")]
    BadLength {
        offset: usize,
        got: usize,
        expected: usize,
    },
    #[error("invalid value: {0}")]
    Invalid(&'static str),
    #[error("{0} trailing bytes")]
    Trailing(usize),
}

#[derive(Debug, Default, Clone)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(cap: usize) -> Self {
        Writer {
            buf: Vec::with_capacity(cap),
        }
    }

    pub fn field(&mut self, bytes: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(&(bytes.len() as u64).to_be_bytes());
        self.buf.extend_from_slice(bytes);
        self
    }

    pub fn uint(&mut self, value: u64) -> &mut Self {
        self.field(&value.to_be_bytes())
    }

    pub fn byte(&mut self, value: u8) -> &mut Self {
        self.field(&[value])
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.buf
    }
}

/// Encoded size of a field carrying `len` bytes.
pub const fn field_len(len: usize) -> usize {
    8 + len
}

#[derive(Debug, Clone)]
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn field(&mut self) -> Result<&'a [u8], DecodeError> {
        let len = self.raw_u64()? as usize;
        let start = self.pos;
        let end = start
            .checked_add(len)
            .filter(|end| *end <= self.buf.len())
            .ok_or(DecodeError::Truncated(start))?;
        self.pos = end;
        Ok(&self.buf[start..end])
    }

    pub fn fixed<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        let offset = self.pos;
        let bytes = self.field()?;
        bytes.try_into().map_err(|_| DecodeError::BadLength {
            offset,
            got: bytes.len(),
            expected: N,
        })
    }

    pub fn uint(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_be_bytes(self.fixed::<8>()?))
    }

    pub fn byte(&mut self) -> Result<u8, DecodeError> {
        Ok(self.fixed::<1>()?[0])
    }

    fn raw_u64(&mut self) -> Result<u64, DecodeError> {
        let end = self.pos + 8;
        if end > self.buf.len() {
            return Err(DecodeError::Truncated(self.pos));
        }
        let value = u64::from_be_bytes(self.buf[self.pos..end].try_into().unwrap());
        self.pos = end;
        Ok(value)
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn finish(self) -> Result<(), DecodeError> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            n => Err(DecodeError::Trailing(n)),
        }
    }
}
