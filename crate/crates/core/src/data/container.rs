//! `SVE1` tensor container.
//!
//! Layout (little-endian):
//! - magic `b"SVE1"`, `u32` version (= 1), `u32` record count
//! - per record: `u16` name length, UTF-8 name, `u8` kind (0 = tokens,
//!   1 = vector), `u32` rows, `u32` cols, `rows * cols` `f32` values

use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SVE1";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecordKind {
    Tokens = 0,
    Vector = 1,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub kind: RecordKind,
    pub tensor: Tensor<f32>,
}

impl Record {
    pub fn tokens(name: impl Into<String>, tensor: Tensor<f32>) -> Self {
        Self {
            name: name.into(),
            kind: RecordKind::Tokens,
            tensor,
        }
    }

    pub fn vector(name: impl Into<String>, values: Vec<f32>) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            kind: RecordKind::Vector,
            tensor: Tensor::row_vector(values)?,
        })
    }
}

pub fn encode(records: &[Record]) -> Result<Vec<u8>> {
    let payload: usize = records
        .iter()
        .map(|r| 2 + r.name.len() + 9 + 4 * r.tensor.len())
        .sum();
    let mut out = Vec::with_capacity(12 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(records.len()).map_err(|_| too_large())?.to_le_bytes());
    for r in records {
        let name = r.name.as_bytes();
        let len = u16::try_from(name.len())
            .map_err(|_| Error::invalid(format!("record name too long: {}", r.name)))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(r.kind as u8);
        let (rows, cols) = r.tensor.shape();
        out.extend_from_slice(&u32::try_from(rows).map_err(|_| too_large())?.to_le_bytes());
        out.extend_from_slice(&u32::try_from(cols).map_err(|_| too_large())?.to_le_bytes());
        for v in r.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn too_large() -> Error {
    Error::invalid("container field exceeds u32 range")
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Record>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::UnrecognizedContainer);
    }
    let mut cur = Cursor { buf: bytes, pos: 4 };
    let version = cur.u32().ok_or(Error::UnrecognizedContainer)?;
    if version != VERSION {
        return Err(Error::InvalidDataset(format!(
            "unsupported container version {version}"
        )));
    }
    let count = cur.u32().ok_or(Error::UnrecognizedContainer)? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let placeholder = || Error::CorruptRecord(format!("#{i}"));
        let name_len = cur.u16().ok_or_else(placeholder)? as usize;
        let name_bytes = cur.take(name_len).ok_or_else(placeholder)?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| placeholder())?
            .to_string();
        let corrupt = || Error::CorruptRecord(name.clone());
        let kind = match cur.u8().ok_or_else(corrupt)? {
            0 => RecordKind::Tokens,
            1 => RecordKind::Vector,
            _ => return Err(corrupt()),
        };
        let rows = cur.u32().ok_or_else(corrupt)? as usize;
        let cols = cur.u32().ok_or_else(corrupt)? as usize;
        let n = rows.checked_mul(cols).ok_or_else(corrupt)?;
        let nbytes = n.checked_mul(4).ok_or_else(corrupt)?;
        if nbytes > cur.remaining() {
            return Err(corrupt());
        }
        let raw = cur.take(nbytes).ok_or_else(corrupt)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let tensor = Tensor::new(rows, cols, data).map_err(|_| corrupt())?;
        records.push(Record { name, kind, tensor });
    }
    if cur.remaining() != 0 {
        return Err(Error::InvalidDataset(format!(
            "{} trailing bytes after {count} records",
            cur.remaining()
        )));
    }
    Ok(records)
}

pub fn write_container(path: &Path, records: &[Record]) -> Result<()> {
    fs::write(path, encode(records)?)?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Vec<Record>> {
    decode(&fs::read(path)?)
}
