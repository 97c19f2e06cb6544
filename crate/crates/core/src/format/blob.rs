//! PKMT tensor blobs.
//!
//! ```text
//! u32 tensor_count
//! repeat tensor_count:
//!     u16 name_len, name (UTF-8)
//!     "PKMT", u32 version (=1), u32 rank, rank x u64 extents, f32 values
//! u32 crc32 of every preceding byte
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::tensor::WeightTensor;

pub const MAGIC: &[u8; 4] = b"PKMT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BlobError {
    #[error("blob truncated at byte {0}")]
    Truncated(usize),
    #[error("bad magic {found:?} for tensor {name:?}")]
    BadMagic { name: String, found: [u8; 4] },
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("duplicate tensor name {0:?}")]
    DuplicateTensor(String),
    #[error("tensor {name:?}: {detail}")]
    BadTensor { name: String, detail: String },
    #[error("tensor {name:?} has a non-finite value at flat index {index}")]
    NonFinite { name: String, index: usize },
    #[error("{0}")]
    Unencodable(String),
}

impl BlobError {
    pub fn code(&self) -> &'static str {
        match self {
            BlobError::Truncated(_) => "Truncated",
            BlobError::BadMagic { .. } => "BadMagic",
            BlobError::UnsupportedVersion(_) => "UnsupportedVersion",
            BlobError::ChecksumMismatch { .. } => "ChecksumMismatch",
            BlobError::TrailingBytes(_) => "TrailingBytes",
            BlobError::BadName => "BadName",
            BlobError::DuplicateTensor(_) => "DuplicateTensor",
            BlobError::BadTensor { .. } => "BadTensor",
            BlobError::NonFinite { .. } => "NonFinite",
            BlobError::Unencodable(_) => "Unencodable",
        }
    }
}

pub fn encode_blob<'a, I>(tensors: I) -> Result<Vec<u8>, BlobError>
where
    I: IntoIterator<Item = (&'a str, &'a WeightTensor)>,
{
    let entries: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    let count = u32::try_from(entries.len())
        .map_err(|_| BlobError::Unencodable("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in entries {
        let len = u16::try_from(name.len())
            .map_err(|_| BlobError::Unencodable(format!("tensor name too long: {name:?}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], BlobError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&end| end <= self.bytes.len())
            .ok_or(BlobError::Truncated(self.bytes.len()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, BlobError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, BlobError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, BlobError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Decodes a blob, checking structure first, then the checksum, then that
/// every value is finite.
pub fn decode_blob(bytes: &[u8]) -> Result<Vec<(String, WeightTensor)>, BlobError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let count = cur.u32()?;
    let mut seen = BTreeSet::new();
    let mut raw = Vec::new();
    for _ in 0..count {
        let len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| BlobError::BadName)?
            .to_string();
        let magic: [u8; 4] = cur.take(4)?.try_into().unwrap();
        if &magic != MAGIC {
            return Err(BlobError::BadMagic { name, found: magic });
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(BlobError::UnsupportedVersion(version));
        }
        let rank = cur.u32()? as usize;
        if rank == 0 || rank > 4 {
            return Err(BlobError::BadTensor {
                name,
                detail: format!("unsupported rank {rank}"),
            });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let e = usize::try_from(cur.u64()?).map_err(|_| BlobError::Truncated(bytes.len()))?;
            shape.push(e);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .and_then(|n| n.checked_mul(4))
            .ok_or(BlobError::Truncated(bytes.len()))?;
        let data: Vec<f32> = cur
            .take(n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if !seen.insert(name.clone()) {
            return Err(BlobError::DuplicateTensor(name));
        }
        raw.push((name, shape, data));
    }
    let body_end = cur.pos;
    let stored = cur.u32()?;
    let rest = bytes.len() - cur.pos;
    if rest != 0 {
        return Err(BlobError::TrailingBytes(rest));
    }
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(BlobError::ChecksumMismatch { stored, computed });
    }
    raw.into_iter()
        .map(|(name, shape, data)| {
            let t = WeightTensor::new(shape, data).map_err(|e| BlobError::BadTensor {
                name: name.clone(),
                detail: e.to_string(),
            })?;
            if let Some(index) = t.first_non_finite() {
                return Err(BlobError::NonFinite { name, index });
            }
            Ok((name, t))
        })
        .collect()
}
