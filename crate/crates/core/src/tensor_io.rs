//! Little-endian binary tensor files.
//!
//! Single matrix: `u32 rows, u32 cols`, then `rows·cols` `f64` values.
//! Bundle: `u32 count`, then per matrix `u32 rows, u32 cols` and its data.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Parse(format!(
                "truncated tensor data: need {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn matrix(&mut self) -> Result<Matrix> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Parse(format!("tensor header {rows}x{cols} overflows")))?;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Parse("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Matrix::new(rows, cols, data).map_err(|e| Error::Parse(e.to_string()))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Parse(format!(
                "{} trailing bytes after tensor data",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn push_matrix(out: &mut Vec<u8>, m: &Matrix) -> Result<()> {
    let rows = u32::try_from(m.rows()).map_err(|_| Error::Config("row count exceeds u32".into()))?;
    let cols = u32::try_from(m.cols()).map_err(|_| Error::Config("column count exceeds u32".into()))?;
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn encode_matrix(m: &Matrix) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + 8 * m.as_slice().len());
    push_matrix(&mut out, m)?;
    Ok(out)
}

pub fn decode_matrix(bytes: &[u8]) -> Result<Matrix> {
    let mut r = Reader { bytes, pos: 0 };
    let m = r.matrix()?;
    r.finish()?;
    Ok(m)
}

pub fn encode_bundle(ms: &[&Matrix]) -> Result<Vec<u8>> {
    let count = u32::try_from(ms.len()).map_err(|_| Error::Config("too many matrices".into()))?;
    let mut out = count.to_le_bytes().to_vec();
    for m in ms {
        push_matrix(&mut out, m)?;
    }
    Ok(out)
}

pub fn decode_bundle(bytes: &[u8]) -> Result<Vec<Matrix>> {
    let mut r = Reader { bytes, pos: 0 };
    let count = r.u32()? as usize;
    let ms = (0..count).map(|_| r.matrix()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(ms)
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    decode_matrix(&fs::read(path)?)
}

pub fn write_matrix(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    fs::write(path, encode_matrix(m)?)?;
    Ok(())
}
