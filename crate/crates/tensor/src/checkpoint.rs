//! Binary checkpoints.
//!
//! Layout: 8-byte magic, then records `{name_len u32, name, rank u32,
//! dims u32 x rank, payload}` with little-endian integers and scalars.
//! `UFOR0001` carries f32 payloads, `UFOR0002` f64 payloads. Either file
//! loads into either precision.

use std::fs;
use std::path::Path;

use crate::array::DenseArray;
use crate::error::{Result, TensorError};
use crate::optim::Adam;
use crate::param::ParamStore;
use crate::scalar::Scalar;

pub const MAGIC_F32: &[u8; 8] = b"UFOR0001";
pub const MAGIC_F64: &[u8; 8] = b"UFOR0002";

pub type Record<T> = (String, DenseArray<T>);

fn bad(msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint(msg.into())
}

pub fn encode<T: Scalar>(records: &[Record<T>]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(if T::BYTES == 4 { MAGIC_F32 } else { MAGIC_F64 });
    for (name, arr) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(arr.rank() as u32).to_le_bytes());
        for &d in arr.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in arr.data() {
            x.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad(format!("truncated {what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

fn decode_as<S: Scalar, T: Scalar>(r: &mut Reader<'_>) -> Result<Vec<Record<T>>> {
    let mut records = Vec::new();
    while r.pos < r.bytes.len() {
        let len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| bad("record name is not UTF-8"))?
            .to_string();
        let rank = r.u32("rank")?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dims")?);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| bad("dimension overflow"))?;
        let bytes_len = count
            .checked_mul(S::BYTES)
            .ok_or_else(|| bad("dimension overflow"))?;
        let payload = r.take(bytes_len, "payload")?;
        let data: Vec<T> = payload
            .chunks_exact(S::BYTES)
            .map(|c| T::lit(S::read_le(c).as_f64()))
            .collect();
        let arr = DenseArray::new(&shape, data).map_err(|e| bad(format!("record `{name}`: {e}")))?;
        records.push((name, arr));
    }
    Ok(records)
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Vec<Record<T>>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(8, "magic")?;
    if magic == MAGIC_F32 {
        decode_as::<f32, T>(&mut r)
    } else if magic == MAGIC_F64 {
        decode_as::<f64, T>(&mut r)
    } else {
        Err(bad(format!("unknown magic {:?}", String::from_utf8_lossy(magic))))
    }
}

pub fn save<T: Scalar>(path: impl AsRef<Path>, records: &[Record<T>]) -> Result<()> {
    fs::write(path, encode(records))?;
    Ok(())
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<Vec<Record<T>>> {
    decode(&fs::read(path)?)
}

const STEP_RECORD: &str = "adam.step";

/// Parameters plus optimizer moments and step count.
pub fn training_records<T: Scalar>(store: &ParamStore<T>, adam: &Adam<T>) -> Vec<Record<T>> {
    let mut records = store.named_values();
    for (_, p) in store.iter() {
        if let Some((m, v)) = adam.moments(&p.name) {
            records.push((format!("adam.m.{}", p.name), m.clone()));
            records.push((format!("adam.v.{}", p.name), v.clone()));
        }
    }
    records.push((STEP_RECORD.to_string(), DenseArray::scalar(T::lit(adam.step as f64))));
    records
}

/// Restores parameter values and, when present, optimizer state.
pub fn restore_training<T: Scalar>(
    records: &[Record<T>],
    store: &mut ParamStore<T>,
    adam: &mut Adam<T>,
) -> Result<()> {
    store.load_values(records)?;
    let find = |n: &str| records.iter().find(|(k, _)| k == n).map(|(_, v)| v);
    let names: Vec<String> = store.iter().map(|(_, p)| p.name.clone()).collect();
    for name in names {
        if let (Some(m), Some(v)) = (find(&format!("adam.m.{name}")), find(&format!("adam.v.{name}"))) {
            adam.set_moments(name, m.clone(), v.clone());
        }
    }
    if let Some(s) = find(STEP_RECORD) {
        adam.step = s.item().as_f64().round() as u64;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let recs = vec![
            ("a".to_string(), DenseArray::from_fn(&[2, 3], |i| (i as f32).sin() * 1e-3)),
            ("b.c".to_string(), DenseArray::<f32>::scalar(f32::MIN_POSITIVE)),
        ];
        let back: Vec<Record<f32>> = decode(&encode(&recs)).unwrap();
        assert_eq!(back.len(), 2);
        for ((n0, a0), (n1, a1)) in recs.iter().zip(&back) {
            assert_eq!(n0, n1);
            assert_eq!(a0.shape(), a1.shape());
            assert!(a0.data().iter().zip(a1.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(decode::<f32>(b"NOTMAGIC").is_err());
        let mut bytes = encode(&[("w".to_string(), DenseArray::<f32>::ones(&[4]))]);
        bytes.truncate(bytes.len() - 1);
        let err = decode::<f32>(&bytes).unwrap_err().to_string();
        assert!(err.contains("truncated payload"), "{err}");
    }

    #[test]
    fn f64_files_use_second_magic() {
        let bytes = encode(&[("w".to_string(), DenseArray::<f64>::ones(&[1]))]);
        assert_eq!(&bytes[..8], MAGIC_F64);
    }
}
