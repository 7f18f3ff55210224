//! PTNS binary tensor format.
//!
//! Layout (little-endian): `b"PTNS"`, `u8` dtype code (1 = f32, 2 = f64),
//! `u8` ndim, `ndim × u32` dims, then the raw values in row-major order.

use std::io::{Read, Write};
use std::path::Path;

use super::{Real, Tensor, TensorError};
use crate::{Error, Result};

pub const PTNS_MAGIC: &[u8; 4] = b"PTNS";

const DTYPE_F32: u8 = 1;
const DTYPE_F64: u8 = 2;

#[cfg(not(feature = "f32"))]
const NATIVE_DTYPE: u8 = DTYPE_F64;
#[cfg(feature = "f32")]
const NATIVE_DTYPE: u8 = DTYPE_F32;

pub fn write_tensor<W: Write>(mut w: W, t: &Tensor) -> std::io::Result<()> {
    let ndim = u8::try_from(t.ndim()).map_err(|_| {
        std::io::Error::new(std::io::ErrorKind::InvalidInput, "ptns: more than 255 dims")
    })?;
    let mut buf = Vec::with_capacity(6 + 4 * t.ndim() + t.numel() * std::mem::size_of::<Real>());
    buf.extend_from_slice(PTNS_MAGIC);
    buf.push(NATIVE_DTYPE);
    buf.push(ndim);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| {
            std::io::Error::new(std::io::ErrorKind::InvalidInput, "ptns: dim exceeds u32")
        })?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

/// Reads a PTNS tensor, converting either dtype to [`Real`].
pub fn read_tensor<R: Read>(mut r: R) -> std::result::Result<Tensor, TensorError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| TensorError::Format(e.to_string()))?;
    let fail = |m: &str| TensorError::Format(m.to_string());
    if bytes.len() < 6 || &bytes[..4] != PTNS_MAGIC {
        return Err(fail("bad magic"));
    }
    let dtype = bytes[4];
    let ndim = bytes[5] as usize;
    let mut pos = 6;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let b = bytes.get(pos..pos + 4).ok_or_else(|| fail("truncated header"))?;
        shape.push(u32::from_le_bytes(b.try_into().unwrap()) as usize);
        pos += 4;
    }
    let n: usize = shape.iter().product();
    let width = match dtype {
        DTYPE_F32 => 4,
        DTYPE_F64 => 8,
        other => return Err(TensorError::Format(format!("unknown dtype code {other}"))),
    };
    let body = &bytes[pos..];
    if body.len() != n * width {
        return Err(TensorError::Format(format!(
            "expected {} data bytes for shape {shape:?}, found {}",
            n * width,
            body.len()
        )));
    }
    let data: Vec<Real> = match dtype {
        DTYPE_F32 => body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as Real)
            .collect(),
        _ => body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as Real)
            .collect(),
    };
    Tensor::new(shape, data)
}

pub fn write_tensor_file(path: &Path, t: &Tensor) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_tensor(std::io::BufWriter::new(f), t).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: &Path) -> Result<Tensor> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(read_tensor(std::io::BufReader::new(f))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2, 3], (0..6).map(|v| v as Real).collect()).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"PTNS");
        assert_eq!(buf[4], NATIVE_DTYPE);
        assert_eq!(buf[5], 2);
        assert_eq!(&buf[6..10], &2u32.to_le_bytes());
        assert_eq!(&buf[10..14], &3u32.to_le_bytes());
        assert_eq!(buf.len(), 14 + 6 * std::mem::size_of::<Real>());
    }

    #[test]
    fn reads_f32_payload() {
        let mut buf = b"PTNS".to_vec();
        buf.extend_from_slice(&[DTYPE_F32, 1]);
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.extend_from_slice(&1.5f32.to_le_bytes());
        buf.extend_from_slice(&(-2.0f32).to_le_bytes());
        let t = read_tensor(&buf[..]).unwrap();
        assert_eq!(t.shape(), &[2]);
        assert_eq!(t.data(), &[1.5, -2.0]);
    }

    #[test]
    fn rejects_truncated() {
        let t = Tensor::ones(&[4]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf.pop();
        assert!(read_tensor(&buf[..]).is_err());
        assert!(read_tensor(&b"NOPE"[..]).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(dims in prop::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
            let n: usize = dims.iter().product();
            let data: Vec<Real> = (0..n).map(|i| ((seed as Real) * 1e-3 + i as Real).sin()).collect();
            let t = Tensor::new(dims, data).unwrap();
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t).unwrap();
            prop_assert_eq!(read_tensor(&buf[..]).unwrap(), t);
        }
    }
}
