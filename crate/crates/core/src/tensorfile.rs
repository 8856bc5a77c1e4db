//! Portable tensor container used by checkpoints.
//!
//! Layout (little-endian): magic `ACOL`, format version `u32`, tensor count
//! `u32`, then per tensor: name length `u32`, UTF-8 name, dtype tag `u8`
//! (0 = single, 1 = double), rank `u32`, one `u64` per dimension, raw data.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"ACOL";
pub const FORMAT_VERSION: u32 = 1;

const MAX_RANK: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    Single(Tensor<f32>),
    Double(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::Single(t) => t.shape(),
            AnyTensor::Double(t) => t.shape(),
        }
    }

    /// Converts to the requested precision.
    pub fn to<T: Scalar>(&self) -> Tensor<T> {
        match self {
            AnyTensor::Single(t) => t.cast(),
            AnyTensor::Double(t) => t.cast(),
        }
    }
}

pub fn encode<T: Scalar>(tensors: &[(String, &Tensor<T>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE);
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn read_data<T: Scalar>(r: &mut Reader<'_>, shape: Vec<usize>, count: usize, name: &str) -> Result<Tensor<T>> {
    let bytes = count
        .checked_mul(T::BYTES)
        .ok_or_else(|| Error::Format(format!("tensor {name:?} is too large")))?;
    let raw = r.take(bytes, "tensor data")?;
    let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
    Tensor::from_vec(shape, data)
}

/// Parses a tensor container. Never panics on malformed input.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, AnyTensor)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, not an ACOL tensor file".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let count = r.u32("tensor count")? as usize;
    // Every entry needs at least a name length, dtype and rank.
    if count > r.remaining() / 9 {
        return Err(Error::Format(format!("tensor count {count} exceeds file size")));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("duplicate tensor name {name:?}")));
        }
        let dtype = r.take(1, "dtype")?[0];
        let rank = r.u32("rank")? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::Format(format!("tensor {name:?} has unsupported rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut elems = 1usize;
        for _ in 0..rank {
            let d = r.u64("dimension")?;
            let d = usize::try_from(d)
                .ok()
                .filter(|&d| d >= 1)
                .ok_or_else(|| Error::Format(format!("tensor {name:?} has invalid dimension {d}")))?;
            elems = elems
                .checked_mul(d)
                .ok_or_else(|| Error::Format(format!("tensor {name:?} is too large")))?;
            shape.push(d);
        }
        let tensor = match dtype {
            0 => AnyTensor::Single(read_data(&mut r, shape, elems, &name)?),
            1 => AnyTensor::Double(read_data(&mut r, shape, elems, &name)?),
            other => {
                return Err(Error::Format(format!("tensor {name:?} has unknown dtype tag {other}")))
            }
        };
        out.push((name, tensor));
    }
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes", r.remaining())));
    }
    Ok(out)
}

pub fn write_file<T: Scalar>(path: &Path, tensors: &[(String, &Tensor<T>)]) -> Result<()> {
    std::fs::write(path, encode(tensors)).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<(String, AnyTensor)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| Error::corrupt(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_stable() {
        let t = Tensor::<f32>::from_vec(vec![2], vec![1.0, -2.0]).unwrap();
        let bytes = encode(&[("w".to_string(), &t)]);
        let mut expect = b"ACOL".to_vec();
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.push(b'w');
        expect.push(0);
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u64.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, expect);
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let t = Tensor::<f64>::full(&[3, 2], 0.5);
        let good = encode(&[("a".to_string(), &t)]);
        assert!(decode(&good).is_ok());

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(decode(&bad).unwrap_err().to_string().contains("magic"));

        let mut bad = good.clone();
        bad[4] = 9;
        assert!(decode(&bad).unwrap_err().to_string().contains("version"));

        assert!(decode(&good[..good.len() - 1]).is_err());
        let mut long = good;
        long.push(0);
        assert!(decode(&long).is_err());
    }

    #[test]
    fn huge_declared_sizes_fail_cleanly() {
        let mut b = b"ACOL".to_vec();
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode(&b).is_err());

        let mut b = b"ACOL".to_vec();
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&1u32.to_le_bytes());
        b.push(b'x');
        b.push(0);
        b.extend_from_slice(&2u32.to_le_bytes());
        b.extend_from_slice(&u64::MAX.to_le_bytes());
        b.extend_from_slice(&u64::MAX.to_le_bytes());
        b.extend_from_slice(&[0u8; 64]);
        assert!(decode(&b).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_preserves_bits(
            dims in proptest::collection::vec(1usize..4, 1..4),
            seed in any::<u64>(),
            double in any::<bool>(),
        ) {
            let len: usize = dims.iter().product();
            let vals: Vec<f64> = (0..len)
                .map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) >> 2))
                .collect();
            let t64 = Tensor::<f64>::from_vec(dims.clone(), vals).unwrap();
            if double {
                let back = decode(&encode(&[("t".to_string(), &t64)])).unwrap();
                match &back[0].1 {
                    AnyTensor::Double(b) => {
                        let same = b.data().iter().zip(t64.data()).all(|(x, y)| x.to_bits() == y.to_bits());
                        prop_assert!(same);
                    }
                    other => prop_assert!(false, "wrong dtype {:?}", other.shape()),
                }
            } else {
                let t32: Tensor<f32> = t64.cast();
                let back = decode(&encode(&[("t".to_string(), &t32)])).unwrap();
                match &back[0].1 {
                    AnyTensor::Single(b) => {
                        let same = b.data().iter().zip(t32.data()).all(|(x, y)| x.to_bits() == y.to_bits());
                        prop_assert!(same);
                    }
                    other => prop_assert!(false, "wrong dtype {:?}", other.shape()),
                }
            }
        }
    }
}
