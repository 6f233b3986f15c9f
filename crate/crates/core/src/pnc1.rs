//! PNC1 binary tensor format.
//!
//! Layout (all little-endian):
//! - magic bytes `PNC1`
//! - ndim: u32
//! - dims: ndim * u64
//! - payload: row-major f32
//!
//! Used for latents, control tensors, weight blobs, and generated frames.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"PNC1";

#[derive(Debug, Error)]
pub enum Pnc1Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes {0:?}, expected \"PNC1\"")]
    BadMagic([u8; 4]),
    #[error("payload truncated: expected {expected} f32 values, got {got}")]
    Truncated { expected: usize, got: usize },
}

pub fn write(path: impl AsRef<Path>, dims: &[usize], data: &[f32]) -> Result<(), Pnc1Error> {
    let n: usize = dims.iter().product();
    assert_eq!(n, data.len(), "dims do not match payload length");
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<(Vec<usize>, Vec<f32>), Pnc1Error> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Pnc1Error::BadMagic(magic));
    }
    let mut u32_buf = [0u8; 4];
    r.read_exact(&mut u32_buf)?;
    let ndim = u32::from_le_bytes(u32_buf) as usize;
    let mut dims = Vec::with_capacity(ndim);
    let mut u64_buf = [0u8; 8];
    for _ in 0..ndim {
        r.read_exact(&mut u64_buf)?;
        dims.push(u64::from_le_bytes(u64_buf) as usize);
    }
    let n: usize = dims.iter().product();
    let mut payload = vec![0u8; n * 4];
    let mut got = 0;
    while got < payload.len() {
        let k = r.read(&mut payload[got..])?;
        if k == 0 {
            return Err(Pnc1Error::Truncated {
                expected: n,
                got: got / 4,
            });
        }
        got += k;
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((dims, data))
}

/// Serializes an f64 tensor, narrowing the payload to f32.
pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<(), Pnc1Error> {
    let data: Vec<f32> = t.data().iter().map(|&v| v as f32).collect();
    write(path, t.dims(), &data)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor, Pnc1Error> {
    let (dims, data) = read(path)?;
    let wide: Vec<f64> = data.iter().map(|&v| v as f64).collect();
    Ok(Tensor::from_vec(&dims, wide).expect("dims consistent with payload"))
}

/// Serializes to an in-memory byte buffer; used for byte-exact comparisons.
pub fn to_bytes(dims: &[usize], data: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 + dims.len() * 8 + data.len() * 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pnc1");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(matches!(read(&path), Err(Pnc1Error::BadMagic(_))));
    }

    #[test]
    fn detects_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pnc1");
        write(&path, &[4], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(read(&path), Err(Pnc1Error::Truncated { .. })));
    }

    #[test]
    fn header_layout_is_bit_exact() {
        let bytes = to_bytes(&[2, 3], &[0.0; 6]);
        assert_eq!(&bytes[0..4], b"PNC1");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[8..16], &2u64.to_le_bytes());
        assert_eq!(&bytes[16..24], &3u64.to_le_bytes());
        assert_eq!(bytes.len(), 24 + 6 * 4);
    }

    proptest! {
        #[test]
        fn roundtrip(dims in proptest::collection::vec(1usize..5, 1..4),
                     seed in any::<u64>()) {
            let n: usize = dims.iter().product();
            let mut s = seed;
            let data: Vec<f32> = (0..n).map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 33) as f32) / (u32::MAX as f32) - 0.5
            }).collect();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("rt.pnc1");
            write(&path, &dims, &data).unwrap();
            let (rd, rdata) = read(&path).unwrap();
            prop_assert_eq!(rd, dims);
            prop_assert_eq!(rdata, data);
        }
    }
}
