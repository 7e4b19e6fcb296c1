//! Raw float layer files.
//!
//! Layout: the 4-byte magic `LUM1`, then width, height and channel count as
//! little-endian `u32`, then `width * height * channels` little-endian `f32`
//! values in row-major, channel-interleaved order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::LinearImage;

pub const MAGIC: &[u8; 4] = b"LUM1";
pub const HEADER_LEN: usize = 16;

/// Decoded sidecar contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

pub fn encode(width: usize, height: usize, channels: usize, data: &[f64]) -> Result<Vec<u8>> {
    if data.len() != width * height * channels {
        return Err(Error::Shape(format!(
            "sidecar of {width}x{height}x{channels} needs {} values, got {}",
            width * height * channels,
            data.len()
        )));
    }
    let dim = |v: usize| {
        u32::try_from(v).map_err(|_| Error::Shape(format!("dimension {v} does not fit in u32")))
    };
    let mut out = Vec::with_capacity(HEADER_LEN + data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&dim(width)?.to_le_bytes());
    out.extend_from_slice(&dim(height)?.to_le_bytes());
    out.extend_from_slice(&dim(channels)?.to_le_bytes());
    for v in data {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Raster> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a LUM1 sidecar".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (width, height, channels) = (word(4), word(8), word(12));
    let n = width
        .checked_mul(height)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| Error::Format("sidecar dimensions overflow".into()))?;
    if bytes.len() != HEADER_LEN + n * 4 {
        return Err(Error::Format(format!(
            "sidecar body is {} bytes, header implies {}",
            bytes.len() - HEADER_LEN,
            n * 4
        )));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Raster {
        width,
        height,
        channels,
        data,
    })
}

pub fn write(path: impl AsRef<Path>, width: usize, height: usize, channels: usize, data: &[f64]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(width, height, channels, data)?).map_err(|e| Error::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_image(path: impl AsRef<Path>, img: &LinearImage) -> Result<()> {
    write(path, img.width(), img.height(), 3, img.data())
}

pub fn read_image(path: impl AsRef<Path>) -> Result<LinearImage> {
    let r = read(path)?;
    if r.channels != 3 {
        return Err(Error::Format(format!("expected 3 channels, sidecar has {}", r.channels)));
    }
    LinearImage::new(r.width, r.height, r.data)
}
