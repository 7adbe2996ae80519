//! Binary tensor container: magic "LGSP", version byte, dtype byte
//! (0 = f32, 1 = f64), ndim byte, u32 little-endian dims, then the payload
//! little-endian row-major.

use std::io::{Read, Write};
use std::path::Path;

use crate::tensor::Tensor;
use crate::{LgspError, Result};

const MAGIC: &[u8; 4] = b"LGSP";
const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

/// Serializes a tensor into the container layout.
pub fn encode(t: &Tensor, dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + t.numel() * 8);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(match dtype {
        Dtype::F32 => 0,
        Dtype::F64 => 1,
    });
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match dtype {
        Dtype::F32 => {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Dtype::F64 => {
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

/// Parses a container; f32 payloads widen to f64.
pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 7 || &bytes[..4] != MAGIC {
        return Err(LgspError::Format("bad magic".into()));
    }
    if bytes[4] != VERSION {
        return Err(LgspError::Format(format!("unsupported version {}", bytes[4])));
    }
    let dtype = match bytes[5] {
        0 => Dtype::F32,
        1 => Dtype::F64,
        other => return Err(LgspError::Format(format!("unknown dtype byte {other}"))),
    };
    let ndim = bytes[6] as usize;
    let mut off = 7;
    if bytes.len() < off + 4 * ndim {
        return Err(LgspError::Format("truncated dims".into()));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let d = u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        shape.push(d as usize);
        off += 4;
    }
    let numel: usize = shape.iter().product();
    let width = match dtype {
        Dtype::F32 => 4,
        Dtype::F64 => 8,
    };
    if bytes.len() != off + numel * width {
        return Err(LgspError::Format(format!(
            "payload length {} does not match {} elements",
            bytes.len() - off,
            numel
        )));
    }
    let mut data = Vec::with_capacity(numel);
    match dtype {
        Dtype::F32 => {
            for chunk in bytes[off..].chunks_exact(4) {
                data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
            }
        }
        Dtype::F64 => {
            for chunk in bytes[off..].chunks_exact(8) {
                data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
        }
    }
    Tensor::new(shape, data)
}

pub fn write_tensor(path: &Path, t: &Tensor, dtype: Dtype) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(t, dtype))?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;
    use proptest::prelude::*;

    #[test]
    fn f64_encode_decode_is_bitwise() {
        let mut rng = Rng::new(1);
        let t = Tensor::randn(&[2, 3, 4], &mut rng);
        let back = decode(&encode(&t, Dtype::F64)).unwrap();
        assert_eq!(t.shape(), back.shape());
        for (a, b) in t.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn f32_round_trip_is_stable() {
        // values already representable in f32 survive bit-exactly
        let t = Tensor::new(vec![4], vec![1.5, -0.25, 1024.0, 0.0]).unwrap();
        let bytes = encode(&t, Dtype::F32);
        let back = decode(&bytes).unwrap();
        assert_eq!(t.data(), back.data());
        // re-encoding reproduces the same bytes
        assert_eq!(encode(&back, Dtype::F32), bytes);
    }

    #[test]
    fn rejects_corrupt_headers() {
        let t = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut bytes = encode(&t, Dtype::F64);
        bytes[0] = b'X';
        assert!(decode(&bytes).is_err());
        let mut bad_len = encode(&t, Dtype::F64);
        bad_len.pop();
        assert!(decode(&bad_len).is_err());
        assert!(decode(&[]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_any_small_tensor(values in prop::collection::vec(-1e6f64..1e6, 1..64)) {
            let t = Tensor::from_vec(values).unwrap();
            let back = decode(&encode(&t, Dtype::F64)).unwrap();
            prop_assert_eq!(t.data(), back.data());
            // f32 path round-trips after one quantization
            let once = decode(&encode(&t, Dtype::F32)).unwrap();
            let twice = decode(&encode(&once, Dtype::F32)).unwrap();
            prop_assert_eq!(once.data(), twice.data());
        }
    }
}
