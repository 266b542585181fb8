//! KVD1 / KVC1 tensor containers.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic[4] | version u32 | entry_count u32 |
//!   { name_len u32 | name[name_len] (UTF-8) | dtype u8 | ndim u8 | dims u64 × ndim | payload }*
//! ```
//!
//! `dtype` 0 is f32, the only supported element type; payloads are row-major
//! and exactly `product(dims) × 4` bytes. KVC1 bundles share the grammar and
//! differ only in magic.

use std::collections::HashSet;

use thiserror::Error;

use crate::kernels::DenseMatrix;
use crate::Scalar;

pub const KVD_MAGIC: [u8; 4] = *b"KVD1";
pub const KVC_MAGIC: [u8; 4] = *b"KVC1";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("bad magic {found:?} at offset 0")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported version {version} at offset 4")]
    UnsupportedVersion { version: u32 },
    #[error("truncated input at offset {offset}: need {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("duplicate entry name {name:?} at offset {offset}")]
    DuplicateName { name: String, offset: usize },
    #[error("entry name at offset {offset} is not valid UTF-8")]
    InvalidName { offset: usize },
    #[error("unknown dtype {code} at offset {offset}")]
    UnknownDtype { code: u8, offset: usize },
    #[error("entry {name:?}: shape {shape:?} implies {expected} elements, payload has {actual}")]
    ShapeMismatch {
        name: String,
        shape: Vec<u64>,
        expected: u64,
        actual: u64,
    },
    #[error("entry at offset {offset}: element count overflows")]
    Overflow { offset: usize },
    #[error("{count} trailing bytes after last entry at offset {offset}")]
    TrailingBytes { offset: usize, count: usize },
    #[error("entry {name:?}: too many dimensions ({ndim})")]
    TooManyDims { name: String, ndim: usize },
    #[error("missing entry {0:?}")]
    MissingEntry(String),
}

impl FormatError {
    /// Byte offset the error refers to, when it refers to one.
    pub fn offset(&self) -> Option<usize> {
        match self {
            FormatError::BadMagic { .. } => Some(0),
            FormatError::UnsupportedVersion { .. } => Some(4),
            FormatError::Truncated { offset, .. }
            | FormatError::DuplicateName { offset, .. }
            | FormatError::InvalidName { offset }
            | FormatError::UnknownDtype { offset, .. }
            | FormatError::Overflow { offset }
            | FormatError::TrailingBytes { offset, .. } => Some(*offset),
            _ => None,
        }
    }
}

/// A named, shaped, row-major f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct KvTensor {
    pub name: String,
    pub shape: Vec<u64>,
    pub data: Vec<f32>,
}

impl KvTensor {
    pub fn new(name: impl Into<String>, shape: Vec<u64>, data: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            shape,
            data,
        }
    }

    pub fn from_matrix<T: Scalar>(name: impl Into<String>, m: &DenseMatrix<T>) -> Self {
        Self::new(
            name,
            vec![m.rows() as u64, m.cols() as u64],
            m.data().iter().map(|v| v.f64() as f32).collect(),
        )
    }

    pub fn from_vector<T: Scalar>(name: impl Into<String>, v: &[T]) -> Self {
        Self::new(
            name,
            vec![v.len() as u64],
            v.iter().map(|x| x.f64() as f32).collect(),
        )
    }

    /// Interprets a 2-D entry as a matrix.
    pub fn to_matrix<T: Scalar>(&self) -> crate::Result<DenseMatrix<T>> {
        if self.shape.len() != 2 {
            return Err(crate::Error::dim(
                "KvTensor::to_matrix",
                format!("{:?} has shape {:?}", self.name, self.shape),
            ));
        }
        DenseMatrix::new(
            self.shape[0] as usize,
            self.shape[1] as usize,
            self.data.iter().map(|&v| T::of(v as f64)).collect(),
        )
    }

    pub fn element_count(&self) -> Option<u64> {
        self.shape.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d))
    }
}

/// Serializes entries under the given magic.
pub fn encode(magic: [u8; 4], entries: &[KvTensor]) -> Result<Vec<u8>, FormatError> {
    let mut seen = HashSet::new();
    let payload: usize = entries.iter().map(|e| 4 + e.name.len() + 2 + 8 * e.shape.len() + 4 * e.data.len()).sum();
    let mut out = Vec::with_capacity(12 + payload);
    out.extend_from_slice(&magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        let offset = out.len();
        if !seen.insert(e.name.as_str()) {
            return Err(FormatError::DuplicateName {
                name: e.name.clone(),
                offset,
            });
        }
        if e.shape.len() > u8::MAX as usize {
            return Err(FormatError::TooManyDims {
                name: e.name.clone(),
                ndim: e.shape.len(),
            });
        }
        let expected = e.element_count().ok_or(FormatError::Overflow { offset })?;
        if expected != e.data.len() as u64 {
            return Err(FormatError::ShapeMismatch {
                name: e.name.clone(),
                shape: e.shape.clone(),
                expected,
                actual: e.data.len() as u64,
            });
        }
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(DTYPE_F32);
        out.push(e.shape.len() as u8);
        for d in &e.shape {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn encode_kvd(entries: &[KvTensor]) -> Result<Vec<u8>, FormatError> {
    encode(KVD_MAGIC, entries)
}

/// Parses a container of either magic, returning the magic and entries.
pub fn decode(bytes: &[u8]) -> Result<([u8; 4], Vec<KvTensor>), FormatError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if magic != KVD_MAGIC && magic != KVC_MAGIC {
        return Err(FormatError::BadMagic { found: magic });
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion { version });
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1024));
    let mut seen = HashSet::new();
    for _ in 0..count {
        let start = r.pos;
        let name_len = r.u32()? as usize;
        let name_at = r.pos;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| FormatError::InvalidName { offset: name_at })?
            .to_owned();
        let dtype_at = r.pos;
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(FormatError::UnknownDtype {
                code: dtype,
                offset: dtype_at,
            });
        }
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()?);
        }
        let payload_at = r.pos;
        let elems = shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .and_then(|b| usize::try_from(b).ok())
            .ok_or(FormatError::Overflow { offset: payload_at })?;
        let raw = r.take(elems)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if !seen.insert(name.clone()) {
            return Err(FormatError::DuplicateName {
                name,
                offset: start,
            });
        }
        entries.push(KvTensor { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(FormatError::TrailingBytes {
            offset: r.pos,
            count: bytes.len() - r.pos,
        });
    }
    Ok((magic, entries))
}

/// Parses a KVD1 file; KVC1 input is rejected as bad magic.
pub fn decode_kvd(bytes: &[u8]) -> Result<Vec<KvTensor>, FormatError> {
    match decode(bytes)? {
        (KVD_MAGIC, entries) => Ok(entries),
        (found, _) => Err(FormatError::BadMagic { found }),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let remaining = self.bytes.len() - self.pos;
        if n > remaining {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n - remaining,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Name-indexed view over decoded entries.
pub struct EntryMap<'a> {
    entries: std::collections::HashMap<&'a str, &'a KvTensor>,
}

impl<'a> EntryMap<'a> {
    pub fn new(entries: &'a [KvTensor]) -> Self {
        Self {
            entries: entries.iter().map(|e| (e.name.as_str(), e)).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&'a KvTensor> {
        self.entries.get(name).copied()
    }

    pub fn require(&self, name: &str) -> Result<&'a KvTensor, FormatError> {
        self.get(name)
            .ok_or_else(|| FormatError::MissingEntry(name.to_owned()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_round_trips() {
        let bytes = encode_kvd(&[]).unwrap();
        assert_eq!(bytes.len(), 12);
        assert_eq!(&bytes[..4], b"KVD1");
        assert!(decode_kvd(&bytes).unwrap().is_empty());
    }

    #[test]
    fn zeros_2x2_layout() {
        let t = KvTensor::new("z", vec![2, 2], vec![0.0; 4]);
        let bytes = encode_kvd(std::slice::from_ref(&t)).unwrap();
        // header 12 + name_len 4 + name 1 + dtype 1 + ndim 1 + dims 16 + payload 16
        assert_eq!(bytes.len(), 12 + 4 + 1 + 2 + 16 + 16);
        assert!(bytes[bytes.len() - 16..].iter().all(|&b| b == 0));
        assert_eq!(decode_kvd(&bytes).unwrap(), vec![t]);
    }

    #[test]
    fn typed_errors() {
        let t = KvTensor::new("a", vec![3], vec![1.0, 2.0, 3.0]);
        let good = encode_kvd(std::slice::from_ref(&t)).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(FormatError::BadMagic { .. })));

        assert!(matches!(
            decode(&good[..good.len() - 1]),
            Err(FormatError::Truncated { .. })
        ));

        let dup = encode_kvd(&[t.clone(), t.clone()]);
        assert!(matches!(dup, Err(FormatError::DuplicateName { .. })));

        let wrong = KvTensor::new("w", vec![2, 2], vec![0.0; 3]);
        assert!(matches!(
            encode_kvd(&[wrong]),
            Err(FormatError::ShapeMismatch { .. })
        ));

        let mut extra = good.clone();
        extra.push(0);
        assert!(matches!(decode(&extra), Err(FormatError::TrailingBytes { .. })));

        let mut ver = good;
        ver[4] = 2;
        assert!(matches!(decode(&ver), Err(FormatError::UnsupportedVersion { version: 2 })));
    }

    #[test]
    fn duplicate_on_decode() {
        // splice two copies of the same entry under one header
        let t = KvTensor::new("a", vec![1], vec![1.0]);
        let one = encode_kvd(std::slice::from_ref(&t)).unwrap();
        let mut two = one.clone();
        two[8] = 2;
        two.extend_from_slice(&one[12..]);
        assert!(matches!(decode(&two), Err(FormatError::DuplicateName { .. })));
    }

    #[test]
    fn kvc_rejected_as_kvd() {
        let bytes = encode(KVC_MAGIC, &[]).unwrap();
        assert!(decode(&bytes).is_ok());
        assert!(matches!(decode_kvd(&bytes), Err(FormatError::BadMagic { .. })));
    }

    #[test]
    fn huge_declared_shape_does_not_allocate() {
        let mut bytes = encode_kvd(&[KvTensor::new("a", vec![1], vec![0.0])]).unwrap();
        // overwrite the single dim with u64::MAX
        let dim_at = 12 + 4 + 1 + 2;
        bytes[dim_at..dim_at + 8].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(
            decode(&bytes),
            Err(FormatError::Overflow { .. } | FormatError::Truncated { .. })
        ));
    }
}
