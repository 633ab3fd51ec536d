//! Little-endian tensor encoding shared by dataset frame files and
//! checkpoints.
//!
//! A standalone tensor file is
//!
//! ```text
//! magic  "CSTT"        4 bytes
//! version u16          currently 1
//! dtype   u8           0 = f32, 1 = f64
//! rank    u8
//! extents u64 × rank
//! values  dtype × product(extents), row-major
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: [u8; 4] = *b"CSTT";
pub const TENSOR_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Appends dtype, rank, extents and values. `F32` rounds each value.
pub fn encode_tensor_body(t: &Tensor, dtype: DType, out: &mut Vec<u8>) {
    out.push(dtype.tag());
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    match dtype {
        DType::F32 => t.data().iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => t.data().iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
}

pub fn encode_tensor(t: &Tensor, dtype: DType) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * t.rank() + dtype.size() * t.len());
    out.extend_from_slice(&TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    encode_tensor_body(t, dtype, &mut out);
    out
}

/// Cursor over a byte buffer that reports failures with file and offset.
pub struct ByteReader<'a> {
    file: &'a Path,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(file: &'a Path, buf: &'a [u8]) -> Self {
        ByteReader { file, buf, pos: 0 }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn is_at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn error(&self, message: impl Into<String>) -> Error {
        self.error_at(self.pos, message)
    }

    pub fn error_at(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Format {
            file: self.file.to_path_buf(),
            offset: offset as u64,
            message: message.into(),
        }
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.error(format!(
                "truncated: need {n} bytes, {} left",
                self.buf.len() - self.pos
            ))),
        }
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.bytes(N)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    /// Reads and checks a 4-byte magic followed by a u16 version.
    pub fn header(&mut self, magic: &[u8; 4], version: u16) -> Result<()> {
        let got = self.bytes(4).map_err(|_| self.error("truncated before magic"))?;
        if got != magic {
            return Err(self.error_at(0, format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            )));
        }
        let at = self.pos;
        let v = self.u16()?;
        if v != version {
            return Err(self.error_at(at, format!("unsupported version {v}, expected {version}")));
        }
        Ok(())
    }

    /// Reads dtype, rank, extents and values written by [`encode_tensor_body`].
    pub fn tensor_body(&mut self) -> Result<(DType, Tensor)> {
        let at = self.pos;
        let tag = self.u8()?;
        let dtype = DType::from_tag(tag).ok_or_else(|| self.error_at(at, format!("unknown dtype tag {tag}")))?;
        let rank = self.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let at = self.pos;
            let e = self.u64()?;
            if e == 0 || e > u32::MAX as u64 {
                return Err(self.error_at(at, format!("invalid extent {e}")));
            }
            shape.push(e as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| self.error("element count overflows"))?;
        let raw = self.bytes(count.checked_mul(dtype.size()).ok_or_else(|| self.error("size overflows"))?)?;
        let data: Vec<f64> = match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("chunk")) as f64)
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk")))
                .collect(),
        };
        let t = Tensor::new(&shape, data).map_err(|e| self.error_at(at, e.to_string()))?;
        Ok((dtype, t))
    }
}

pub fn decode_tensor(file: &Path, buf: &[u8]) -> Result<(DType, Tensor)> {
    let mut r = ByteReader::new(file, buf);
    r.header(&TENSOR_MAGIC, TENSOR_VERSION)?;
    let out = r.tensor_body()?;
    if !r.is_at_end() {
        return Err(r.error("trailing bytes after tensor"));
    }
    Ok(out)
}

pub fn write_tensor_file(path: &Path, t: &Tensor, dtype: DType) -> Result<()> {
    fs::write(path, encode_tensor(t, dtype)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: &Path) -> Result<(DType, Tensor)> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(path, &buf)
}
