//! Self-describing binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   b"FELO"
//! version u32            (currently 1)
//! round   u64
//! seed    u64            (root generator state)
//! count   u32            (number of tensors)
//! count × {
//!     name_len u32, name utf-8 bytes,
//!     ndim u32, ndim × u64 dims,
//!     prod(dims) × f64
//! }
//! ```

use std::fs;
use std::path::Path;

use crate::error::{FeloError, Result};
use crate::nn::Tensor;

pub const MAGIC: &[u8; 4] = b"FELO";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub round: u64,
    pub seed: u64,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(round: u64, seed: u64) -> Self {
        Checkpoint {
            round,
            seed,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| FeloError::data(format!("checkpoint is missing tensor `{name}`")))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, offset: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(FeloError::data(format!(
                "checkpoint: bad magic {magic:02x?} at offset 0"
            )));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(FeloError::data(format!(
                "checkpoint: unsupported version {version} at offset 4"
            )));
        }
        let round = r.u64()?;
        let seed = r.u64()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let at = r.offset;
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| {
                FeloError::data(format!(
                    "checkpoint: tensor name at offset {at} is not utf-8"
                ))
            })?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| {
                    FeloError::data(format!("checkpoint: shape overflow at offset {at}"))
                })?;
            let payload = r.take(n.checked_mul(8).ok_or_else(|| {
                FeloError::data(format!("checkpoint: payload overflow at offset {at}"))
            })?)?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let tensor = Tensor::new(shape, data).map_err(|e| {
                FeloError::data(format!("checkpoint: tensor `{name}` at offset {at}: {e}"))
            })?;
            tensors.push((name, tensor));
        }
        if r.offset != bytes.len() {
            return Err(FeloError::data(format!(
                "checkpoint: {} trailing bytes at offset {}",
                bytes.len() - r.offset,
                r.offset
            )));
        }
        Ok(Checkpoint {
            round,
            seed,
            tensors,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        match self
            .offset
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
        {
            Some(end) => {
                let s = &self.bytes[self.offset..end];
                self.offset = end;
                Ok(s)
            }
            None => Err(FeloError::data(format!(
                "checkpoint: truncated at offset {} (need {n} bytes, {} remain)",
                self.offset,
                self.bytes.len() - self.offset
            ))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn write_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let p = path.as_ref();
    fs::write(p, checkpoint.encode()).map_err(|e| FeloError::io(p.display().to_string(), e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let p = path.as_ref();
    let bytes = fs::read(p).map_err(|e| FeloError::io(p.display().to_string(), e))?;
    Checkpoint::decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(25, 7);
        c.push(
            "a.weight",
            Tensor::from_rows(&[vec![1.5, -0.0], vec![f64::MIN_POSITIVE, 3.0]]).unwrap(),
        );
        c.push("b", Tensor::vector(vec![42.0]));
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = Checkpoint::decode(&c.encode()).unwrap();
        assert_eq!(back, c);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.tensors[0].1), bits(&c.tensors[0].1));
    }

    #[test]
    fn header_layout() {
        let bytes = sample().encode();
        assert_eq!(&bytes[..4], b"FELO");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 25);
    }

    #[test]
    fn corruption_is_rejected_with_offset() {
        let mut bytes = sample().encode();
        bytes[0] = b'X';
        assert!(Checkpoint::decode(&bytes)
            .unwrap_err()
            .to_string()
            .contains("bad magic"));

        let mut bytes = sample().encode();
        bytes[4] = 9;
        assert!(Checkpoint::decode(&bytes)
            .unwrap_err()
            .to_string()
            .contains("version"));

        let bytes = sample().encode();
        let err = Checkpoint::decode(&bytes[..bytes.len() - 3])
            .unwrap_err()
            .to_string();
        assert!(err.contains("truncated at offset"), "{err}");
    }
}
