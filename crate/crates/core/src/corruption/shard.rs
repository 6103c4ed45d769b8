//! Fixed-record binary shard of corrupted examples.
//!
//! Layout (little-endian):
//!
//! ```text
//! "KALB" | version u32 | seq_len u32 | count u32
//! count × { input_ids, token_type_ids, attention_mask, mlm_labels, wop_labels: seq_len × u16
//!           sop_label: u8 }
//! ```
//!
//! Labels store `-1` as `0xFFFF`.

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::CorruptedExample;
use crate::numeric::IGNORE_INDEX;

pub const SHARD_MAGIC: &[u8; 4] = b"KALB";
pub const SHARD_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;
const IGNORE_U16: u16 = 0xFFFF;

#[derive(Debug, Error)]
pub enum ShardError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a shard file (bad magic)")]
    BadMagic,
    #[error("unsupported shard version {found} (expected {SHARD_VERSION})")]
    VersionMismatch { found: u32 },
    #[error("shard is {actual} bytes, header implies {expected}")]
    Truncated { expected: usize, actual: usize },
    #[error("example {index} has length {len}, shard sequence length is {seq_len}")]
    LengthMismatch { index: usize, len: usize, seq_len: usize },
    #[error("value {value} in example {index} does not fit the u16 encoding")]
    ValueOutOfRange { index: usize, value: i64 },
    #[error("example index {index} out of range for {count} examples")]
    IndexOutOfRange { index: usize, count: usize },
}

fn record_len(seq_len: usize) -> usize {
    seq_len * 2 * 5 + 1
}

fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn label_u16(index: usize, v: i64) -> Result<u16, ShardError> {
    if v == IGNORE_INDEX {
        Ok(IGNORE_U16)
    } else if (0..IGNORE_U16 as i64).contains(&v) {
        Ok(v as u16)
    } else {
        Err(ShardError::ValueOutOfRange { index, value: v })
    }
}

/// Serializes examples into shard bytes.
pub fn encode_shard(seq_len: usize, examples: &[CorruptedExample]) -> Result<Vec<u8>, ShardError> {
    let mut out = Vec::with_capacity(HEADER_LEN + examples.len() * record_len(seq_len));
    out.extend_from_slice(SHARD_MAGIC);
    out.extend_from_slice(&SHARD_VERSION.to_le_bytes());
    out.extend_from_slice(&(seq_len as u32).to_le_bytes());
    out.extend_from_slice(&(examples.len() as u32).to_le_bytes());
    for (index, ex) in examples.iter().enumerate() {
        let lens = [
            ex.input_ids.len(),
            ex.token_type_ids.len(),
            ex.attention_mask.len(),
            ex.mlm_labels.len(),
            ex.wop_labels.len(),
        ];
        if let Some(&len) = lens.iter().find(|&&l| l != seq_len) {
            return Err(ShardError::LengthMismatch { index, len, seq_len });
        }
        for &id in &ex.input_ids {
            if id >= IGNORE_U16 as u32 {
                return Err(ShardError::ValueOutOfRange { index, value: id as i64 });
            }
            put_u16(&mut out, id as u16);
        }
        ex.token_type_ids.iter().for_each(|&v| put_u16(&mut out, v as u16));
        ex.attention_mask.iter().for_each(|&v| put_u16(&mut out, v as u16));
        for &l in &ex.mlm_labels {
            put_u16(&mut out, label_u16(index, l)?);
        }
        for &l in &ex.wop_labels {
            put_u16(&mut out, label_u16(index, l)?);
        }
        out.push(ex.sop_label);
    }
    Ok(out)
}

pub fn write_shard(path: &Path, seq_len: usize, examples: &[CorruptedExample]) -> Result<(), ShardError> {
    fs::write(path, encode_shard(seq_len, examples)?)?;
    Ok(())
}

/// Shard bytes with random access by example index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Shard {
    seq_len: usize,
    count: usize,
    bytes: Vec<u8>,
}

impl Shard {
    pub fn open(path: &Path) -> Result<Self, ShardError> {
        Self::from_bytes(fs::read(path)?)
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self, ShardError> {
        if bytes.len() < HEADER_LEN || &bytes[..4] != SHARD_MAGIC {
            return Err(ShardError::BadMagic);
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != SHARD_VERSION {
            return Err(ShardError::VersionMismatch { found: version });
        }
        let seq_len = word(8) as usize;
        let count = word(12) as usize;
        let expected = HEADER_LEN + count * record_len(seq_len);
        if bytes.len() != expected {
            return Err(ShardError::Truncated {
                expected,
                actual: bytes.len(),
            });
        }
        Ok(Self { seq_len, count, bytes })
    }

    /// In-memory shard built from examples.
    pub fn from_examples(seq_len: usize, examples: &[CorruptedExample]) -> Result<Self, ShardError> {
        Self::from_bytes(encode_shard(seq_len, examples)?)
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn get(&self, index: usize) -> Result<CorruptedExample, ShardError> {
        if index >= self.count {
            return Err(ShardError::IndexOutOfRange {
                index,
                count: self.count,
            });
        }
        let t = self.seq_len;
        let start = HEADER_LEN + index * record_len(t);
        let rec = &self.bytes[start..start + record_len(t)];
        let col = |c: usize| {
            rec[c * 2 * t..(c + 1) * 2 * t]
                .chunks_exact(2)
                .map(|b| u16::from_le_bytes([b[0], b[1]]))
        };
        let label = |v: u16| if v == IGNORE_U16 { IGNORE_INDEX } else { v as i64 };
        Ok(CorruptedExample {
            input_ids: col(0).map(u32::from).collect(),
            token_type_ids: col(1).map(|v| v as u8).collect(),
            attention_mask: col(2).map(|v| v as u8).collect(),
            mlm_labels: col(3).map(label).collect(),
            wop_labels: col(4).map(label).collect(),
            sop_label: rec[10 * t],
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = CorruptedExample> + '_ {
        (0..self.count).map(|i| self.get(i).expect("index in range"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example(seed: u32) -> CorruptedExample {
        CorruptedExample {
            input_ids: vec![2, seed + 5, 4, 3, 0, 0, 0, 0],
            token_type_ids: vec![0, 0, 0, 0, 0, 0, 0, 0],
            attention_mask: vec![1, 1, 1, 1, 0, 0, 0, 0],
            mlm_labels: vec![-1, -1, 17, -1, -1, -1, -1, -1],
            sop_label: (seed % 2) as u8,
            wop_labels: vec![-1; 8],
        }
    }

    #[test]
    fn round_trip_and_random_access() {
        let exs: Vec<_> = (0..5).map(example).collect();
        let shard = Shard::from_examples(8, &exs).unwrap();
        assert_eq!(shard.len(), 5);
        assert_eq!(shard.as_bytes().len(), 16 + 5 * 81);
        assert_eq!(shard.get(3).unwrap(), exs[3]);
        assert_eq!(shard.iter().collect::<Vec<_>>(), exs);
        assert!(matches!(shard.get(5), Err(ShardError::IndexOutOfRange { .. })));
    }

    #[test]
    fn header_validation() {
        let bytes = encode_shard(8, &[example(0)]).unwrap();
        assert!(matches!(Shard::from_bytes(bytes[..20].to_vec()), Err(ShardError::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Shard::from_bytes(bad), Err(ShardError::BadMagic)));
        let mut bad = bytes;
        bad[4] = 2;
        assert!(matches!(Shard::from_bytes(bad), Err(ShardError::VersionMismatch { found: 2 })));
    }

    #[test]
    fn rejects_wrong_lengths() {
        assert!(matches!(
            encode_shard(9, &[example(0)]),
            Err(ShardError::LengthMismatch { len: 8, seq_len: 9, .. })
        ));
    }
}
