//! ODT1 binary tensor files.
//!
//! Layout: magic `ODT1`, one dtype byte (1 = f32, 2 = f64), little-endian
//! `u32` rank, `rank` little-endian `u32` extents, then the row-major
//! little-endian payload.

use std::fs;
use std::path::Path;

use super::{DType, Float, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ODT1";

pub fn encode<F: Float>(tensor: &Tensor<F>) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + 4 * tensor.shape().len() + F::BYTES * tensor.numel());
    out.extend_from_slice(MAGIC);
    out.push(F::DTYPE.code());
    out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in tensor.data() {
        x.write_le(&mut out);
    }
    out
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format("truncated header".into()))
}

/// Stored dtype of an encoded tensor.
pub fn peek_dtype(bytes: &[u8]) -> Result<DType> {
    if bytes.len() < 5 || &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    DType::from_code(bytes[4]).ok_or_else(|| Error::Format(format!("dtype code {}", bytes[4])))
}

/// Decode into `F`, converting if the stored dtype differs.
pub fn decode<F: Float>(bytes: &[u8]) -> Result<Tensor<F>> {
    match peek_dtype(bytes)? {
        DType::F32 => decode_as::<f32>(bytes).map(|t| t.cast()),
        DType::F64 => decode_as::<f64>(bytes).map(|t| t.cast()),
    }
}

fn decode_as<S: Float>(bytes: &[u8]) -> Result<Tensor<S>> {
    let rank = read_u32(bytes, 5)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for r in 0..rank {
        shape.push(read_u32(bytes, 9 + 4 * r)? as usize);
    }
    let start = 9 + 4 * rank;
    let numel: usize = shape.iter().product();
    let payload = &bytes[start.min(bytes.len())..];
    if payload.len() != numel * S::BYTES {
        return Err(Error::Format(format!(
            "payload of {} bytes for shape {shape:?}",
            payload.len()
        )));
    }
    let data = payload.chunks_exact(S::BYTES).map(S::read_le).collect();
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn save<F: Float>(path: impl AsRef<Path>, tensor: &Tensor<F>) -> Result<()> {
    fs::write(path, encode(tensor))?;
    Ok(())
}

pub fn load<F: Float>(path: impl AsRef<Path>) -> Result<Tensor<F>> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::<f32>::from_f64(&[2, 1], &[1.0, -2.0]).unwrap();
        let bytes = encode(&t);
        assert_eq!(&bytes[..4], b"ODT1");
        assert_eq!(bytes[4], 1);
        assert_eq!(&bytes[5..9], &2u32.to_le_bytes());
        assert_eq!(&bytes[9..13], &2u32.to_le_bytes());
        assert_eq!(&bytes[13..17], &1u32.to_le_bytes());
        assert_eq!(&bytes[17..21], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 25);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(decode::<f32>(b"ODT2\x01").is_err());
        let t = Tensor::<f64>::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
        let bytes = encode(&t);
        assert!(decode::<f64>(&bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_preserves_bits(shape in prop::collection::vec(1usize..5, 1..4), seed in 0u64..1000) {
            let t: Tensor<f64> = crate::numerics::rng::normal(&mut crate::numerics::rng::stream(seed, 0), &shape);
            let back: Tensor<f64> = decode(&encode(&t)).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
