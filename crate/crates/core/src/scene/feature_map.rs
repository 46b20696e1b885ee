//! `CFFM` dense float grids: magic, `u32` version, `u32` H, W, D, then
//! `H·W·D` little-endian `f32` values, row-major with the D axis innermost.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const CFFM_MAGIC: &[u8; 4] = b"CFFM";
pub const CFFM_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

/// An un-normalized `CFFM` payload.
#[derive(Clone, Debug, PartialEq)]
pub struct RawGrid {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

pub fn read_cffm(path: impl AsRef<Path>) -> Result<RawGrid> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cffm(&bytes)
}

pub(crate) fn decode_cffm(bytes: &[u8]) -> Result<RawGrid> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != CFFM_MAGIC {
        return Err(Error::Format("bad CFFM magic".into()));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap());
    let version = word(0);
    if version != CFFM_VERSION {
        return Err(Error::Format(format!("unsupported CFFM version {version}")));
    }
    let (height, width, dim) = (word(1) as usize, word(2) as usize, word(3) as usize);
    let expected = height
        .checked_mul(width)
        .and_then(|v| v.checked_mul(dim))
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::Format(format!("CFFM dimensions {height}x{width}x{dim} overflow")))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != expected {
        return Err(Error::SizeMismatch(format!(
            "CFFM header {height}x{width}x{dim} needs {expected} bytes, found {}",
            body.len()
        )));
    }
    let data: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Format(format!("non-finite value at element {pos}")));
    }
    Ok(RawGrid {
        height,
        width,
        dim,
        data,
    })
}

pub fn write_cffm(
    path: impl AsRef<Path>,
    height: usize,
    width: usize,
    dim: usize,
    data: &[f32],
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_cffm(height, width, dim, data)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn encode_cffm(
    height: usize,
    width: usize,
    dim: usize,
    data: &[f32],
) -> Result<Vec<u8>> {
    if data.len() != height * width * dim {
        return Err(Error::SizeMismatch(format!(
            "{} values for a {height}x{width}x{dim} grid",
            data.len()
        )));
    }
    let dims = [height, width, dim].map(|v| {
        u32::try_from(v).map_err(|_| Error::Format(format!("dimension {v} does not fit in u32")))
    });
    let mut out = Vec::with_capacity(HEADER_LEN + data.len() * 4);
    out.extend_from_slice(CFFM_MAGIC);
    out.extend_from_slice(&CFFM_VERSION.to_le_bytes());
    for d in dims {
        out.extend_from_slice(&d?.to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Per-pixel feature image with every pixel either unit length or zero.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f32>,
    /// `true` where the pixel vector was zero on input; such pixels are
    /// skipped by lifting.
    pub masked: Vec<bool>,
}

impl FeatureMap {
    /// L2-normalizes every pixel. Zero vectors stay zero and are masked.
    pub fn from_raw(raw: RawGrid) -> Result<Self> {
        let RawGrid {
            height,
            width,
            dim,
            mut data,
        } = raw;
        if dim == 0 {
            return Err(Error::Format("feature dimension is zero".into()));
        }
        if data.len() != height * width * dim {
            return Err(Error::SizeMismatch(format!(
                "{} values for a {height}x{width}x{dim} map",
                data.len()
            )));
        }
        let mut masked = Vec::with_capacity(height * width);
        for px in data.chunks_exact_mut(dim) {
            let norm = px
                .iter()
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>()
                .sqrt();
            if norm > 0.0 {
                for v in px.iter_mut() {
                    *v = (*v as f64 / norm) as f32;
                }
                masked.push(false);
            } else {
                masked.push(true);
            }
        }
        Ok(FeatureMap {
            height,
            width,
            dim,
            data,
            masked,
        })
    }

    pub fn from_pixels(height: usize, width: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        Self::from_raw(RawGrid {
            height,
            width,
            dim,
            data,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_raw(read_cffm(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_cffm(path, self.height, self.width, self.dim, &self.data)
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let start = (y * self.width + x) * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn is_masked(&self, x: usize, y: usize) -> bool {
        self.masked[y * self.width + x]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_vectors_unchanged() {
        let data: Vec<f32> = (0..6).flat_map(|_| [0.6f32, 0.8]).collect();
        let map = FeatureMap::from_pixels(2, 3, 2, data.clone()).unwrap();
        assert_eq!(map.dim, 2);
        assert_eq!(map.data, data);
        assert!(map.masked.iter().all(|m| !m));
    }

    #[test]
    fn normalizes_three_four() {
        let map = FeatureMap::from_pixels(1, 1, 2, vec![3.0, 4.0]).unwrap();
        assert!((map.data[0] - 0.6).abs() < 1e-7);
        assert!((map.data[1] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn zero_pixels_are_masked() {
        let map = FeatureMap::from_pixels(1, 2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(map.masked, vec![true, false]);
        assert_eq!(map.pixel(0, 0), &[0.0, 0.0]);
    }

    #[test]
    fn size_mismatch_detected() {
        let mut bytes = encode_cffm(2, 2, 2, &[1.0; 8]).unwrap();
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(decode_cffm(&bytes), Err(Error::SizeMismatch(_))));
    }

    #[test]
    fn bad_magic_and_nan() {
        let mut bytes = encode_cffm(1, 1, 1, &[1.0]).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_cffm(&bytes), Err(Error::Format(_))));
        let bytes = encode_cffm(1, 1, 1, &[f32::NAN]).unwrap();
        assert!(matches!(decode_cffm(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn overflowing_dimensions() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(CFFM_MAGIC);
        for v in [1u32, u32::MAX, u32::MAX, u32::MAX] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        assert!(decode_cffm(&bytes).is_err());
    }
}
