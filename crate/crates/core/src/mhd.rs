//! MetaImage subset: a text header followed in the same file by the raw
//! payload (`ElementDataFile = LOCAL`).
//!
//! Writers always emit little-endian `MET_FLOAT` (or `MET_UCHAR` for masks).
//! The reader additionally accepts `MET_DOUBLE` and big-endian payloads when
//! the header says so.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{Grid, Mask3D, Volume3D};
use crate::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ElementType {
    UChar,
    Float,
    Double,
}

impl ElementType {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "MET_UCHAR" => Some(Self::UChar),
            "MET_FLOAT" => Some(Self::Float),
            "MET_DOUBLE" => Some(Self::Double),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::UChar => "MET_UCHAR",
            Self::Float => "MET_FLOAT",
            Self::Double => "MET_DOUBLE",
        }
    }

    fn width(self) -> usize {
        match self {
            Self::UChar => 1,
            Self::Float => 4,
            Self::Double => 8,
        }
    }
}

/// Decoded image with interleaved channels, values widened to `f64`.
pub(crate) struct RawImage {
    pub grid: Grid,
    pub channels: usize,
    element: ElementType,
    pub data: Vec<f64>,
}

fn header_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Header {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn parse_triple<U: std::str::FromStr>(path: &Path, key: &str, value: &str) -> Result<[U; 3]> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(header_err(path, format!("{key} needs 3 values, got '{value}'")));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(
            p.parse::<U>()
                .map_err(|_| header_err(path, format!("bad {key} entry '{p}'")))?,
        );
    }
    Ok(out.try_into().ok().unwrap())
}

pub(crate) fn read_raw(path: &Path) -> Result<RawImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;

    let mut dims: Option<[usize; 3]> = None;
    let mut spacing = [1.0f64; 3];
    let mut element = None;
    let mut channels = 1usize;
    let mut big_endian = false;
    let mut object_ok = false;
    let mut ndims_ok = false;
    let mut payload_start = None;

    let mut cursor = 0usize;
    while cursor < bytes.len() {
        let end = match bytes[cursor..].iter().position(|&b| b == b'\n') {
            Some(n) => cursor + n,
            None => return Err(header_err(path, "header ended without ElementDataFile")),
        };
        let line = std::str::from_utf8(&bytes[cursor..end])
            .map_err(|_| header_err(path, "non-text header line"))?
            .trim_end_matches('\r');
        cursor = end + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| header_err(path, format!("expected 'Key = Value', got '{line}'")))?;
        match key {
            "ObjectType" => {
                if value != "Image" {
                    return Err(header_err(path, format!("ObjectType {value} unsupported")));
                }
                object_ok = true;
            }
            "NDims" => {
                if value != "3" {
                    return Err(header_err(path, format!("NDims {value} unsupported")));
                }
                ndims_ok = true;
            }
            "DimSize" => dims = Some(parse_triple(path, key, value)?),
            "ElementSpacing" | "ElementSize" => spacing = parse_triple(path, key, value)?,
            "ElementNumberOfChannels" => {
                channels = value
                    .parse()
                    .ok()
                    .filter(|&c| c >= 1)
                    .ok_or_else(|| header_err(path, format!("bad channel count '{value}'")))?;
            }
            "BinaryDataByteOrderMSB" | "ElementByteOrderMSB" => {
                big_endian = value.eq_ignore_ascii_case("true");
            }
            "ElementType" => {
                element = Some(
                    ElementType::parse(value)
                        .ok_or_else(|| header_err(path, format!("unsupported ElementType {value}")))?,
                );
            }
            "ElementDataFile" => {
                if value != "LOCAL" {
                    return Err(header_err(path, "only ElementDataFile = LOCAL is supported"));
                }
                payload_start = Some(cursor);
                break;
            }
            _ => {}
        }
    }

    let payload_start = payload_start.ok_or_else(|| header_err(path, "missing ElementDataFile"))?;
    if !object_ok {
        return Err(header_err(path, "missing ObjectType = Image"));
    }
    if !ndims_ok {
        return Err(header_err(path, "missing NDims = 3"));
    }
    let dims = dims.ok_or_else(|| header_err(path, "missing DimSize"))?;
    let element = element.ok_or_else(|| header_err(path, "missing ElementType"))?;
    let grid = Grid::new(dims, spacing).map_err(|e| header_err(path, e.to_string()))?;

    let payload = &bytes[payload_start..];
    let expected = grid.len() * channels;
    let width = element.width();
    if payload.len() != expected * width {
        return Err(Error::SizeMismatch {
            path: path.to_path_buf(),
            expected,
            found: payload.len() / width,
        });
    }

    let data: Vec<f64> = match element {
        ElementType::UChar => payload.iter().map(|&b| b as f64).collect(),
        ElementType::Float => payload
            .chunks_exact(4)
            .map(|c| {
                let b: [u8; 4] = c.try_into().unwrap();
                (if big_endian { f32::from_be_bytes(b) } else { f32::from_le_bytes(b) }) as f64
            })
            .collect(),
        ElementType::Double => payload
            .chunks_exact(8)
            .map(|c| {
                let b: [u8; 8] = c.try_into().unwrap();
                if big_endian {
                    f64::from_be_bytes(b)
                } else {
                    f64::from_le_bytes(b)
                }
            })
            .collect(),
    };
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{} payload index {pos}", path.display())));
    }
    Ok(RawImage {
        grid,
        channels,
        element,
        data,
    })
}

fn header(grid: &Grid, channels: usize, element: ElementType) -> String {
    let [nx, ny, nz] = grid.dims;
    let [sx, sy, sz] = grid.spacing;
    let mut h = String::new();
    h.push_str("ObjectType = Image\n");
    h.push_str("NDims = 3\n");
    h.push_str("BinaryData = True\n");
    h.push_str("BinaryDataByteOrderMSB = False\n");
    h.push_str(&format!("DimSize = {nx} {ny} {nz}\n"));
    h.push_str(&format!("ElementSpacing = {sx:?} {sy:?} {sz:?}\n"));
    if channels > 1 {
        h.push_str(&format!("ElementNumberOfChannels = {channels}\n"));
    }
    h.push_str(&format!("ElementType = {}\n", element.name()));
    h.push_str("ElementDataFile = LOCAL\n");
    h
}

pub(crate) fn write_float_image<T: Scalar>(path: &Path, grid: &Grid, channels: usize, data: &[T]) -> Result<()> {
    debug_assert_eq!(data.len(), grid.len() * channels);
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("refusing to write value at index {pos}")));
    }
    let element = if T::BYTES == 8 { ElementType::Double } else { ElementType::Float };
    let mut out = header(grid, channels, element).into_bytes();
    out.reserve(data.len() * T::BYTES);
    for v in data {
        v.write_le(&mut out);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read a single-channel scalar volume.
pub fn read_volume<T: Scalar>(path: impl AsRef<Path>) -> Result<Volume3D<T>> {
    let path = path.as_ref();
    let raw = read_raw(path)?;
    if raw.channels != 1 {
        return Err(header_err(path, format!("expected 1 channel, found {}", raw.channels)));
    }
    if raw.element == ElementType::UChar {
        return Err(header_err(path, "expected a float image, found MET_UCHAR"));
    }
    Volume3D::new(raw.grid, raw.data.into_iter().map(T::of).collect())
}

/// Write a volume as little-endian floats of the scalar's width
/// (`MET_DOUBLE` for f64, `MET_FLOAT` for f32).
pub fn write_volume<T: Scalar>(v: &Volume3D<T>, path: impl AsRef<Path>) -> Result<()> {
    write_float_image(path.as_ref(), v.grid(), 1, v.data())
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask3D> {
    let path = path.as_ref();
    let raw = read_raw(path)?;
    if raw.channels != 1 || raw.element != ElementType::UChar {
        return Err(header_err(path, "mask must be single-channel MET_UCHAR"));
    }
    Mask3D::new(raw.grid, raw.data.into_iter().map(|v| v as u8).collect())
}

pub fn write_mask(m: &Mask3D, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = header(m.grid(), 1, ElementType::UChar).into_bytes();
    out.extend_from_slice(m.data());
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
