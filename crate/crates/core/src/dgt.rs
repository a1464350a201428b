//! The DGT1 tensor file format.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "DGT1"            4 bytes magic
//! rank              u32
//! dims              rank × u32, each ≥ 1
//! payload           product(dims) × f32, row-major
//! ```
//!
//! Decoding is all-or-nothing: any malformed header, size mismatch, trailing
//! bytes or non-finite value yields [`Error::Format`] with the byte offset
//! where the problem was found.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"DGT1";

/// Ranks above this are rejected while decoding.
pub const MAX_RANK: usize = 16;

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(offset, format!("truncated while reading {what}")))
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    match bytes.get(..4) {
        Some(m) if m == MAGIC => {}
        Some(_) => return Err(Error::format(0, "bad magic, expected \"DGT1\"")),
        None => return Err(Error::format(0, "truncated before magic")),
    }
    let rank = read_u32(bytes, 4, "rank")? as usize;
    if rank > MAX_RANK {
        return Err(Error::format(4, format!("rank {rank} exceeds the limit of {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel: usize = 1;
    for i in 0..rank {
        let off = 8 + 4 * i;
        let d = read_u32(bytes, off, "dimension")? as usize;
        if d == 0 {
            return Err(Error::format(off, format!("dimension {i} is zero")));
        }
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| Error::format(off, "declared element count overflows"))?;
        shape.push(d);
    }
    let header = 8 + 4 * rank;
    let payload = bytes.len() - header.min(bytes.len());
    let expected = numel
        .checked_mul(4)
        .ok_or_else(|| Error::format(header, "declared payload size overflows"))?;
    if payload != expected {
        return Err(Error::format(
            header,
            format!("declared {numel} elements ({expected} bytes) but payload has {payload} bytes"),
        ));
    }
    let mut data = Vec::with_capacity(numel);
    for (i, chunk) in bytes[header..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(Error::format(header + 4 * i, "non-finite value"));
        }
        data.push(T::lit(v as f64));
    }
    Tensor::new(shape, data)
}

pub fn write_file<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

pub fn read_file<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    decode(&fs::read(path)?).map_err(|e| match e {
        Error::Format { offset, msg } => Error::Format {
            offset,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"DGT1");
        assert_eq!(&b[4..8], &2u32.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 24);
    }

    #[test]
    fn corrupted_magic() {
        let mut b = encode(&Tensor::<f32>::ones(&[3]));
        b[2] = b'X';
        assert!(matches!(decode::<f32>(&b), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn size_mismatch() {
        let mut b = encode(&Tensor::<f32>::ones(&[3]));
        b[8] = 4;
        assert!(matches!(decode::<f32>(&b), Err(Error::Format { offset: 12, .. })));
        let b = encode(&Tensor::<f32>::ones(&[3]));
        assert!(decode::<f32>(&b[..b.len() - 1]).is_err());
        let mut long = b.clone();
        long.push(0);
        assert!(decode::<f32>(&long).is_err());
    }

    #[test]
    fn overflowing_dims() {
        let mut b = Vec::from(*MAGIC);
        b.extend_from_slice(&3u32.to_le_bytes());
        for _ in 0..3 {
            b.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(decode::<f32>(&b), Err(Error::Format { .. })));
    }

    #[test]
    fn truncated_header() {
        assert!(decode::<f32>(b"DG").is_err());
        assert!(decode::<f32>(b"DGT1\x02\x00").is_err());
        assert!(decode::<f32>(b"DGT1\x02\x00\x00\x00\x01\x00\x00\x00").is_err());
    }

    #[test]
    fn rejects_nan_payload() {
        let mut b = encode(&Tensor::<f32>::ones(&[2]));
        let n = b.len();
        b[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode::<f32>(&b), Err(Error::Format { offset: 16, .. })));
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(shape in prop::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|i| ((seed.wrapping_mul(i as u64 + 1) % 2001) as f32 - 1000.0) / 7.0).collect();
            let t = Tensor::new(shape, data).unwrap();
            let back: Tensor<f32> = decode(&encode(&t)).unwrap();
            prop_assert_eq!(back, t);
        }

        #[test]
        fn decode_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
            let _ = decode::<f32>(&bytes);
            let mut framed = Vec::from(*MAGIC);
            framed.extend_from_slice(&bytes);
            let _ = decode::<f64>(&framed);
        }
    }
}
