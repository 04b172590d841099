//! Versioned checkpoint container.
//!
//! Byte layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes   "COLACKPT"
//! version      u32       currently 1
//! header_len   u32       length of the JSON metadata header
//! header       bytes     UTF-8 JSON, see `CheckpointMeta`
//! block_count  u32
//! block*       name_len u16 | name bytes (UTF-8)
//!              dtype u8 (0 = f32, 1 = f64) | rank u8 | dims u64 × rank
//!              payload: product(dims) values of the dtype
//! ```
//!
//! The file must end exactly after the last block.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"COLACKPT";
pub const FORMAT_VERSION: u32 = 1;

const MAX_HEADER: usize = 1 << 20;
const MAX_NAME: usize = 4096;
const MAX_RANK: usize = 8;
const MAX_BLOCKS: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Architecture description used to rebuild the model before loading.
    pub backbone: serde_json::Value,
    pub epoch: u64,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub enum BlockData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl BlockData {
    pub fn len(&self) -> usize {
        match self {
            BlockData::F32(v) => v.len(),
            BlockData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            BlockData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            BlockData::F64(v) => v.clone(),
        }
    }

    pub fn to_f32(&self) -> Vec<f32> {
        match self {
            BlockData::F32(v) => v.clone(),
            BlockData::F64(v) => v.iter().map(|&x| x as f32).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedBlock {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: BlockData,
}

impl NamedBlock {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: BlockData) -> Result<Self> {
        let name = name.into();
        let expected = checked_numel(&dims)
            .ok_or_else(|| Error::InvalidArgument(format!("block {name}: dims overflow")))?;
        if expected != data.len() {
            return Err(Error::InvalidArgument(format!(
                "block {name}: dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { name, dims, data })
    }

    pub fn from_tensor(name: &str, t: &Tensor) -> Result<Self> {
        let dims = t.dims().to_vec();
        let flat = t.flatten_all()?;
        let data = match t.dtype() {
            DType::F64 => BlockData::F64(flat.to_vec1()?),
            _ => BlockData::F32(flat.to_dtype(DType::F32)?.to_vec1()?),
        };
        Self::new(name, dims, data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub blocks: Vec<NamedBlock>,
}

fn checked_numel(dims: &[usize]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

impl Checkpoint {
    pub fn block(&self, name: &str) -> Option<&NamedBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.meta)?;
        if header.len() > MAX_HEADER {
            return Err(Error::Checkpoint("metadata header too large".into()));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for block in &self.blocks {
            let name = block.name.as_bytes();
            if name.len() > MAX_NAME || block.dims.len() > MAX_RANK {
                return Err(Error::Checkpoint(format!(
                    "block {} exceeds name or rank limits",
                    block.name
                )));
            }
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(match block.data {
                BlockData::F32(_) => 0,
                BlockData::F64(_) => 1,
            });
            out.push(block.dims.len() as u8);
            for &d in &block.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &block.data {
                BlockData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                BlockData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let header_len = r.u32()? as usize;
        if header_len > MAX_HEADER {
            return Err(Error::Checkpoint("metadata header too large".into()));
        }
        let meta: CheckpointMeta = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| Error::Checkpoint(format!("metadata header: {e}")))?;
        let count = r.u32()? as usize;
        if count > MAX_BLOCKS {
            return Err(Error::Checkpoint(format!("{count} blocks exceeds limit")));
        }
        let mut blocks: Vec<NamedBlock> = Vec::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            if name_len > MAX_NAME {
                return Err(Error::Checkpoint("block name too long".into()));
            }
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("block name is not UTF-8".into()))?
                .to_owned();
            if blocks.iter().any(|b| b.name == name) {
                return Err(Error::Checkpoint(format!("duplicate block {name}")));
            }
            let dtype = r.u8()?;
            let rank = r.u8()? as usize;
            if rank > MAX_RANK {
                return Err(Error::Checkpoint(format!("block {name}: rank {rank} too large")));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = usize::try_from(r.u64()?)
                    .map_err(|_| Error::Checkpoint(format!("block {name}: dim overflow")))?;
                dims.push(d);
            }
            let numel = checked_numel(&dims)
                .ok_or_else(|| Error::Checkpoint(format!("block {name}: dims overflow")))?;
            let width = match dtype {
                0 => 4,
                1 => 8,
                other => return Err(Error::Checkpoint(format!("block {name}: unknown dtype {other}"))),
            };
            let nbytes = numel
                .checked_mul(width)
                .ok_or_else(|| Error::Checkpoint(format!("block {name}: size overflow")))?;
            let payload = r.take(nbytes)?;
            let data = if width == 4 {
                BlockData::F32(
                    payload
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            } else {
                BlockData::F64(
                    payload
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            };
            blocks.push(NamedBlock { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after last block",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { meta, blocks })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
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
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                backbone: serde_json::json!({"role": "generator", "kind": "mlp"}),
                epoch: 12,
                seed: 3,
                config_hash: "abc123".into(),
            },
            blocks: vec![
                NamedBlock::new("fc.weight", vec![2, 3], BlockData::F32(vec![1.0, -2.0, 3.5, 0.0, f32::MIN_POSITIVE, 7.0])).unwrap(),
                NamedBlock::new("scalar", vec![], BlockData::F64(vec![std::f64::consts::PI])).unwrap(),
            ],
        }
    }

    #[test]
    fn layout_prefix() {
        let bytes = sample().encode().unwrap();
        assert_eq!(&bytes[..8], b"COLACKPT");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
    }

    #[test]
    fn round_trip() {
        let ck = sample();
        assert_eq!(Checkpoint::decode(&ck.encode().unwrap()).unwrap(), ck);
    }

    #[test]
    fn rejects_truncation_and_trailing_bytes() {
        let bytes = sample().encode().unwrap();
        for cut in [0, 7, 12, 20, bytes.len() - 1] {
            assert!(Checkpoint::decode(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::decode(&extra).is_err());
    }

    #[test]
    fn rejects_huge_dims_without_allocating() {
        let mut ck = sample();
        ck.blocks.truncate(0);
        let mut bytes = ck.encode().unwrap();
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.push(b'x');
        bytes.push(0);
        bytes.push(2);
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(Checkpoint::decode(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn decode_never_panics(data in proptest::collection::vec(any::<u8>(), 0..256)) {
            let _ = Checkpoint::decode(&data);
        }

        #[test]
        fn encode_decode_identity(values in proptest::collection::vec(-1e6f32..1e6, 0..40), epoch in 0u64..1000) {
            let mut ck = sample();
            ck.meta.epoch = epoch;
            ck.blocks = vec![NamedBlock::new("v", vec![values.len()], BlockData::F32(values)).unwrap()];
            prop_assert_eq!(Checkpoint::decode(&ck.encode().unwrap()).unwrap(), ck);
        }
    }
}
