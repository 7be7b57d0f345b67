//! Binary containers for cubes and per-pixel code maps.
//!
//! Both share one envelope:
//!
//! ```text
//! "HSICUBE1"                      8-byte magic
//! u32 little-endian               header length in bytes
//! header                          UTF-8 JSON {rows, cols, bands, wavelengths?, dtype}
//! payload                         rows·cols·bands little-endian values, pixel-major
//! ```
//!
//! Cubes use `dtype: "f32"`; label masks `"u16"` with one band; superpixel
//! maps `"u32"` with one band.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bags::{Bag, BagSet, Label};
use crate::cube::HsiCube;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"HSICUBE1";

/// Negative pixels are tiled into bags of this many pixels, in raster order.
pub const NEGATIVE_BAG_SIZE: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U16,
    U32,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::U16 => 2,
            Dtype::F32 | Dtype::U32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub rows: usize,
    pub cols: usize,
    pub bands: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wavelengths: Option<Vec<f64>>,
    pub dtype: Dtype,
}

impl Header {
    fn values(&self) -> usize {
        self.rows * self.cols * self.bands
    }
}

pub fn write_envelope<W: Write>(mut w: W, header: &Header, payload: &[u8]) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    let len = u32::try_from(json.len())
        .map_err(|_| Error::MalformedHeader("header longer than 4 GiB".into()))?;
    w.write_all(MAGIC)?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(payload)?;
    Ok(())
}

pub fn read_envelope<R: Read>(mut r: R) -> Result<(Header, Vec<u8>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::MalformedHeader("file shorter than magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::MalformedHeader("bad magic".into()));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)
        .map_err(|_| Error::MalformedHeader("missing header length".into()))?;
    let len = u32::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)
        .map_err(|_| Error::MalformedHeader("header truncated".into()))?;
    let header: Header = serde_json::from_slice(&json)
        .map_err(|e| Error::MalformedHeader(format!("header JSON: {e}")))?;
    if header.rows == 0 || header.cols == 0 || header.bands == 0 {
        return Err(Error::MalformedHeader("zero dimension".into()));
    }
    if let Some(w) = &header.wavelengths {
        if w.len() != header.bands {
            return Err(Error::DimensionMismatch {
                expected: header.bands,
                found: w.len(),
            });
        }
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let expected = header.values() * header.dtype.width();
    if payload.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::DimensionMismatch {
            expected,
            found: payload.len(),
        });
    }
    Ok((header, payload))
}

pub fn encode_cube<T: Scalar>(cube: &HsiCube<T>) -> Result<Vec<u8>> {
    let header = Header {
        rows: cube.rows(),
        cols: cube.cols(),
        bands: cube.bands(),
        wavelengths: cube.wavelengths().map(<[f64]>::to_vec),
        dtype: Dtype::F32,
    };
    let mut payload = Vec::with_capacity(cube.data().len() * 4);
    for &v in cube.data() {
        payload.extend_from_slice(&v.to_f32_lossy().to_le_bytes());
    }
    let mut out = Vec::with_capacity(payload.len() + 256);
    write_envelope(&mut out, &header, &payload)?;
    Ok(out)
}

pub fn decode_cube<T: Scalar>(bytes: &[u8]) -> Result<HsiCube<T>> {
    let (header, payload) = read_envelope(bytes)?;
    if header.dtype != Dtype::F32 {
        return Err(Error::MalformedHeader(format!(
            "cube dtype must be f32, found {:?}",
            header.dtype
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| T::from_f32_bits(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
        .collect();
    let cube = HsiCube::new(header.rows, header.cols, header.bands, data)?;
    match header.wavelengths {
        Some(w) => cube.with_wavelengths(w),
        None => Ok(cube),
    }
}

/// Values are stored as `f32`; a cube whose values are all `f32`-representable
/// round-trips bit-exactly.
pub fn save_cube<T: Scalar>(cube: &HsiCube<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_cube(cube)?)?;
    Ok(())
}

pub fn load_cube<T: Scalar>(path: impl AsRef<Path>) -> Result<HsiCube<T>> {
    decode_cube(&fs::read(path)?)
}

/// Per-pixel label codes: 0 unlabeled, 1 negative, 2.. one positive bag per code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    pub rows: usize,
    pub cols: usize,
    pub codes: Vec<u16>,
}

impl LabelMask {
    pub fn new(rows: usize, cols: usize, codes: Vec<u16>) -> Result<Self> {
        if codes.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                found: codes.len(),
            });
        }
        Ok(Self { rows, cols, codes })
    }

    pub fn unlabeled(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            codes: vec![0; rows * cols],
        }
    }

    pub fn matches<T: Scalar>(&self, cube: &HsiCube<T>) -> Result<()> {
        if (self.rows, self.cols) != (cube.rows(), cube.cols()) {
            return Err(Error::DimensionMismatch {
                expected: cube.n_pixels(),
                found: self.codes.len(),
            });
        }
        Ok(())
    }

    /// One bag per distinct positive code (bag id = code); negative pixels
    /// tiled into bags of [`NEGATIVE_BAG_SIZE`] in raster order.
    pub fn to_bags(&self) -> Result<BagSet> {
        if self.codes.iter().all(|&c| c == 0) {
            return Err(Error::NoLabeledPixels);
        }
        let max_code = self.codes.iter().copied().max().unwrap_or(0);
        let mut positive: Vec<Vec<usize>> = vec![Vec::new(); max_code as usize + 1];
        let mut negative = Vec::new();
        for (i, &c) in self.codes.iter().enumerate() {
            match c {
                0 => {}
                1 => negative.push(i),
                c => positive[c as usize].push(i),
            }
        }
        let mut bags: Vec<Bag> = positive
            .into_iter()
            .enumerate()
            .filter(|(_, px)| !px.is_empty())
            .map(|(code, pixels)| Bag {
                id: code as u32,
                label: Label::Positive,
                pixels,
            })
            .collect();
        if bags.is_empty() {
            return Err(Error::NoPositiveBag);
        }
        if negative.is_empty() {
            return Err(Error::NoNegativeBag);
        }
        let mut next = u32::from(max_code) + 1;
        for chunk in negative.chunks(NEGATIVE_BAG_SIZE) {
            bags.push(Bag {
                id: next,
                label: Label::Negative,
                pixels: chunk.to_vec(),
            });
            next += 1;
        }
        BagSet::new(bags, self.codes.len())
    }

    /// Inverse of [`to_bags`](Self::to_bags) up to grouping: positive bags get
    /// codes 2, 3, … in bag order, negative pixels code 1.
    pub fn from_bags(rows: usize, cols: usize, bags: &BagSet) -> Result<Self> {
        let mut codes = vec![0u16; rows * cols];
        let mut next: u16 = 2;
        for bag in bags.bags() {
            let code = match bag.label {
                Label::Negative => 1,
                Label::Positive => {
                    let c = next;
                    next = next
                        .checked_add(1)
                        .ok_or_else(|| Error::InvalidInput("more than 65533 positive bags".into()))?;
                    c
                }
            };
            for &p in &bag.pixels {
                if p >= codes.len() {
                    return Err(Error::PixelOutOfRange {
                        index: p,
                        n_pixels: codes.len(),
                    });
                }
                codes[p] = code;
            }
        }
        Ok(Self { rows, cols, codes })
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = Header {
            rows: self.rows,
            cols: self.cols,
            bands: 1,
            wavelengths: None,
            dtype: Dtype::U16,
        };
        let payload: Vec<u8> = self.codes.iter().flat_map(|c| c.to_le_bytes()).collect();
        let mut out = Vec::new();
        write_envelope(&mut out, &header, &payload)?;
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (header, payload) = read_envelope(bytes)?;
        if header.dtype != Dtype::U16 || header.bands != 1 {
            return Err(Error::MalformedHeader(
                "mask must be dtype u16 with one band".into(),
            ));
        }
        let codes = payload
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
            .collect();
        Self::new(header.rows, header.cols, codes)
    }
}

pub fn save_mask(mask: &LabelMask, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, mask.encode()?)?;
    Ok(())
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<LabelMask> {
    LabelMask::decode(&fs::read(path)?)
}

pub fn mask_to_bags(mask: &LabelMask) -> Result<BagSet> {
    mask.to_bags()
}

pub(crate) fn encode_u32_map(rows: usize, cols: usize, values: &[u32]) -> Result<Vec<u8>> {
    let header = Header {
        rows,
        cols,
        bands: 1,
        wavelengths: None,
        dtype: Dtype::U32,
    };
    let payload: Vec<u8> = values.iter().flat_map(|c| c.to_le_bytes()).collect();
    let mut out = Vec::new();
    write_envelope(&mut out, &header, &payload)?;
    Ok(out)
}

pub(crate) fn decode_u32_map(bytes: &[u8]) -> Result<(usize, usize, Vec<u32>)> {
    let (header, payload) = read_envelope(bytes)?;
    if header.dtype != Dtype::U32 || header.bands != 1 {
        return Err(Error::MalformedHeader(
            "map must be dtype u32 with one band".into(),
        ));
    }
    let values = payload
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((header.rows, header.cols, values))
}
