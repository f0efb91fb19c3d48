//! Little-endian binary helpers shared by the checkpoint format, the wire
//! protocol bodies and the persisted update files.

use crate::linalg::Matrix;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DecodeError {
    #[error("truncated input: needed {needed} bytes at offset {offset}, have {available}")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("matrix of {rows}x{cols} exceeds the decoder limit")]
    Oversized { rows: u32, cols: u32 },
    #[error("{0}")]
    Invalid(String),
}

/// Upper bound on decoded matrix entries; keeps hostile length fields from
/// forcing huge allocations.
pub const MAX_MATRIX_ENTRIES: u64 = 1 << 24;

pub fn put_u8(buf: &mut Vec<u8>, v: u8) {
    buf.push(v);
}

pub fn put_u16(buf: &mut Vec<u8>, v: u16) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub fn put_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Row count u32, column count u32, then row-major f64 LE entries.
pub fn put_matrix(buf: &mut Vec<u8>, m: &Matrix) {
    put_u32(buf, m.rows() as u32);
    put_u32(buf, m.cols() as u32);
    for &x in m.as_slice() {
        put_f64(buf, x);
    }
}

pub fn matrix_encoded_len(m: &Matrix) -> usize {
    8 + 8 * m.rows() * m.cols()
}

/// Cursor over a byte slice that never panics on short input.
pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.remaining() < n {
            return Err(DecodeError::Truncated {
                offset: self.pos,
                needed: n,
                available: self.remaining(),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        let mut out = [0u8; N];
        out.copy_from_slice(self.take(N)?);
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> Result<f64, DecodeError> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    pub fn matrix(&mut self) -> Result<Matrix, DecodeError> {
        let rows = self.u32()?;
        let cols = self.u32()?;
        let n = u64::from(rows) * u64::from(cols);
        if n > MAX_MATRIX_ENTRIES {
            return Err(DecodeError::Oversized { rows, cols });
        }
        let raw = self.take(n as usize * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Matrix::from_vec(rows as usize, cols as usize, data)
            .map_err(|e| DecodeError::Invalid(e.to_string()))
    }

    pub fn finish(self) -> Result<(), DecodeError> {
        if self.remaining() == 0 {
            Ok(())
        } else {
            Err(DecodeError::Invalid(format!(
                "{} trailing bytes after offset {}",
                self.remaining(),
                self.pos
            )))
        }
    }
}

pub fn crc32(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_roundtrip_and_truncation() {
        let m = Matrix::from_rows(&[&[1.0, -2.5], &[f64::MIN_POSITIVE, 3.0]]);
        let mut buf = Vec::new();
        put_matrix(&mut buf, &m);
        assert_eq!(buf.len(), matrix_encoded_len(&m));
        let mut r = Reader::new(&buf);
        assert_eq!(r.matrix().unwrap(), m);
        r.finish().unwrap();
        for cut in 0..buf.len() {
            assert!(Reader::new(&buf[..cut]).matrix().is_err());
        }
    }

    #[test]
    fn hostile_dimensions_rejected() {
        let mut buf = Vec::new();
        put_u32(&mut buf, u32::MAX);
        put_u32(&mut buf, u32::MAX);
        assert!(matches!(
            Reader::new(&buf).matrix(),
            Err(DecodeError::Oversized { .. })
        ));
    }
}
