//! Binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"QTCK"
//! version u32 (= 1)
//! count   u32
//! count × record:
//!     name_len u32, name bytes (UTF-8)
//!     dtype    u8   (1 = f64, 2 = f32, 3 = i64)
//!     rank     u32
//!     dims     rank × u64
//!     data     product(dims) values, little-endian
//! ```
//!
//! Values are kept as f64 in memory whatever the stored dtype. Integer
//! records (labels) round-trip exactly for magnitudes below 2^53.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 4] = b"QTCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F64 = 1,
    F32 = 2,
    I64 = 3,
}

impl DType {
    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(Self::F64),
            2 => Some(Self::F32),
            3 => Some(Self::I64),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            Self::F32 => 4,
            Self::F64 | Self::I64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dtype: DType,
    pub tensor: Tensor,
}

/// Ordered list of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.push_typed(name, DType::F64, tensor);
    }

    pub fn push_typed(&mut self, name: impl Into<String>, dtype: DType, tensor: Tensor) {
        self.records.push(Record {
            name: name.into(),
            dtype,
            tensor,
        });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|r| r.name == name).map(|r| &r.tensor)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.name.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.dtype as u8);
            out.extend_from_slice(&(r.tensor.rank() as u32).to_le_bytes());
            for &d in r.tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in r.tensor.data() {
                match r.dtype {
                    DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
                    DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    DType::I64 => out.extend_from_slice(&(v as i64).to_le_bytes()),
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4)?;
        if magic != MAGIC {
            return Err(Error::Parse {
                offset: 0,
                message: format!("bad checkpoint magic: expected {MAGIC:?}, found {magic:?}"),
            });
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Parse {
                offset: 4,
                message: format!("unsupported checkpoint version {version}"),
            });
        }
        let count = cur.u32()? as usize;
        let mut records = Vec::new();
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let at = cur.pos;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| Error::Parse {
                    offset: at,
                    message: "record name is not UTF-8".into(),
                })?
                .to_string();
            let at = cur.pos;
            let dtype = DType::from_tag(cur.take(1)?[0]).ok_or_else(|| Error::Parse {
                offset: at,
                message: format!("unknown dtype tag for `{name}`"),
            })?;
            let rank = cur.u32()? as usize;
            if rank > 8 {
                return Err(Error::Parse {
                    offset: cur.pos - 4,
                    message: format!("rank {rank} too large for `{name}`"),
                });
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|n| n.checked_mul(dtype.width()).is_some_and(|b| b <= cur.remaining()))
                .ok_or_else(|| Error::Parse {
                    offset: cur.pos,
                    message: format!("data for `{name}` with shape {shape:?} runs past end of file"),
                })?;
            let raw = cur.take(n * dtype.width())?;
            let data = match dtype {
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                DType::I64 => raw
                    .chunks_exact(8)
                    .map(|c| i64::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
            };
            debug_assert_eq!(numel(&shape), n);
            records.push(Record {
                name,
                dtype,
                tensor: Tensor::new(shape, data)?,
            });
        }
        if cur.remaining() != 0 {
            return Err(Error::Parse {
                offset: cur.pos,
                message: format!("{} trailing bytes after last record", cur.remaining()),
            });
        }
        Ok(Self { records })
    }

    pub fn write(&self, mut out: impl Write) -> Result<()> {
        out.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(mut input: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Writes to `path` through a temporary sibling and a rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Parse {
                offset: self.pos,
                message: format!("truncated: need {n} bytes, {} left", self.remaining()),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push("w", Tensor::new(vec![2, 3], vec![0.1, -2.0, 3.5, 1e-9, 0.0, f64::MAX]).unwrap());
        ck.push("s", Tensor::scalar(0.04));
        ck.push_typed("labels", DType::I64, Tensor::from_vec(vec![0.0, 9.0, 3.0]));
        ck.push_typed("half", DType::F32, Tensor::from_vec(vec![0.5, -0.25]));
        ck
    }

    #[test]
    fn round_trip() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.get("s").unwrap().shape(), &[] as &[usize]);
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"QTCK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 4);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 1);
        assert_eq!(bytes[16], b'w');
        assert_eq!(bytes[17], 1);
    }

    #[test]
    fn truncation_is_reported_with_offset() {
        let bytes = sample().to_bytes();
        for cut in [0, 3, 11, 20, bytes.len() - 1] {
            match Checkpoint::from_bytes(&bytes[..cut]) {
                Err(Error::Parse { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn huge_dims_do_not_allocate() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.push(b'x');
        bytes.push(1);
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Parse { .. })));
    }
}
