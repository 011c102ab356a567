//! File formats: the `CTRL` tensor dump, binary PPM/PGM images.
//!
//! `CTRL` layout, all integers little-endian:
//!
//! ```text
//! b"CTRL" | u32 version (=1) | u32 ndim | u32 dims[ndim] | f64 data[prod(dims)]
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const TENSOR_MAGIC: &[u8; 4] = b"CTRL";
pub const TENSOR_VERSION: u32 = 1;

/// Owned n-dimensional tensor as stored in a `CTRL` file.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    /// Stacks equally shaped matrices along a new leading axis.
    pub fn stack(parts: &[Matrix]) -> Result<Self> {
        let (r, c) = parts.first().map_or((0, 0), Matrix::shape);
        if parts.iter().any(|m| m.shape() != (r, c)) {
            return Err(Error::Shape("stacking matrices of different shapes".into()));
        }
        let data = parts.iter().flat_map(|m| m.data().iter().copied()).collect();
        Self::new(vec![parts.len(), r, c], data)
    }
}

impl From<&Matrix> for Tensor {
    fn from(m: &Matrix) -> Self {
        Tensor {
            dims: vec![m.rows(), m.cols()],
            data: m.data().to_vec(),
        }
    }
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * t.dims.len() + 8 * t.data.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
    for &d in &t.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut cursor = bytes;
    let mut take = |n: usize| -> Result<&[u8]> {
        if cursor.len() < n {
            return Err(Error::Format("truncated tensor file".into()));
        }
        let (head, tail) = cursor.split_at(n);
        cursor = tail;
        Ok(head)
    };
    if take(4)? != TENSOR_MAGIC {
        return Err(Error::Format("bad magic, expected CTRL".into()));
    }
    let read_u32 = |b: &[u8]| u32::from_le_bytes([b[0], b[1], b[2], b[3]]);
    let version = read_u32(take(4)?);
    if version != TENSOR_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let ndim = read_u32(take(4)?) as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(read_u32(take(4)?) as usize);
    }
    let count: usize = dims.iter().product();
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        let b = take(8)?;
        data.push(f64::from_le_bytes(b.try_into().expect("8 bytes")));
    }
    if !cursor.is_empty() {
        return Err(Error::Format("trailing bytes after tensor data".into()));
    }
    Tensor::new(dims, data)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    decode_tensor(&fs::read(path)?)
}

/// 8-bit RGB raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for px in &self.pixels {
            out.extend_from_slice(px);
        }
        out
    }
}

/// Clamps to `[0, 1]` and quantizes with round-half-up.
pub fn quantize_unit(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0 + 0.5).floor() as u8
}

/// Binary PGM of a map, min-max scaled to the full 8-bit range. Constant maps
/// render black.
pub fn map_to_pgm(values: &[f64], width: usize, height: usize) -> Result<Vec<u8>> {
    if values.len() != width * height {
        return Err(Error::Shape(format!(
            "{} values for a {width}x{height} image",
            values.len()
        )));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    for &v in values {
        let scaled = if span > 0.0 { (v - lo) / span } else { 0.0 };
        out.push(quantize_unit(scaled));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let bytes = encode_tensor(&t);
        assert_eq!(&bytes[..4], b"CTRL");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &[2, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &[1, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &[2, 0, 0, 0]);
        assert_eq!(&bytes[20..28], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 20 + 16);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(decode_tensor(b"NOPE").is_err());
        let mut bytes = encode_tensor(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        bytes.pop();
        assert!(decode_tensor(&bytes).is_err());
        bytes.extend_from_slice(&[0, 0]);
        assert!(decode_tensor(&bytes).is_err());
    }

    #[test]
    fn quantization_rule() {
        assert_eq!(quantize_unit(0.0), 0);
        assert_eq!(quantize_unit(0.5), 128);
        assert_eq!(quantize_unit(1.7), 255);
        assert_eq!(quantize_unit(-0.3), 0);
    }

    #[test]
    fn pgm_scales_to_full_range() {
        let pgm = map_to_pgm(&[2.0, 4.0, 6.0, 6.0], 2, 2).unwrap();
        let header = b"P5\n2 2\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        assert_eq!(&pgm[header.len()..], &[0, 128, 255, 255]);
        assert!(map_to_pgm(&[1.0], 2, 2).is_err());
    }

    proptest! {
        #[test]
        fn tensor_roundtrip(dims in proptest::collection::vec(0usize..5, 0..4), seed in any::<u64>()) {
            let count: usize = dims.iter().product();
            let mut prng = crate::numerics::Prng::new(seed);
            let data: Vec<f64> = (0..count).map(|_| prng.next_gaussian()).collect();
            let t = Tensor::new(dims, data).unwrap();
            let back = decode_tensor(&encode_tensor(&t)).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
