//! Binary feature tensor files.
//!
//! Layout (little-endian): magic `TACA`, `u8` version, `u8` rank, `rank`
//! `u32` dimensions, then `f32` payload in row-major order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const MAGIC: &[u8; 4] = b"TACA";
pub const VERSION: u8 = 1;

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.shape().len() + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let bad = |m: &str| Error::Data(format!("feature file: {m}"));
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    if bytes[4] != VERSION {
        return Err(bad(&format!("unsupported version {}", bytes[4])));
    }
    let rank = bytes[5] as usize;
    let header = 6 + 4 * rank;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let shape: Vec<usize> = bytes[6..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let n: usize = shape.iter().product();
    if bytes.len() != header + 4 * n {
        return Err(bad(&format!(
            "payload is {} bytes, shape {shape:?} needs {}",
            bytes.len() - header,
            4 * n
        )));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::from_vec(&shape, data))
}

pub fn write(path: &Path, t: &Tensor) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::from_vec(&[1, 2], vec![1.0, -2.5]);
        let b = encode(&t);
        assert_eq!(&b[..4], b"TACA");
        assert_eq!(b[4], 1);
        assert_eq!(b[5], 2);
        assert_eq!(&b[6..10], &1u32.to_le_bytes());
        assert_eq!(&b[10..14], &2u32.to_le_bytes());
        assert_eq!(&b[14..18], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 22);
    }

    #[test]
    fn rejects_truncated_payload() {
        let mut b = encode(&Tensor::zeros(&[2, 2]));
        b.pop();
        assert!(matches!(decode(&b), Err(Error::Data(_))));
        assert!(decode(b"XXXX\x01\x00").is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(rows in 1usize..6, cols in 1usize..6, seed in any::<u32>()) {
            let data: Vec<f32> = (0..rows * cols)
                .map(|i| ((i as u32).wrapping_mul(2654435761) ^ seed) as f32 * 1e-6)
                .collect();
            let t = Tensor::from_vec(&[rows, cols], data);
            prop_assert_eq!(decode(&encode(&t)).unwrap(), t);
        }
    }
}
