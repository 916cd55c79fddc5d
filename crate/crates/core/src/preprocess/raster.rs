//! Little-endian raster files.
//!
//! Header (21 bytes): `b"THSG"`, `u32` version (1), `u32` height, `u32` width,
//! `u32` channels, `u8` sample type (0 = f32, 2 = u16). The body holds
//! `height * width * channels` samples, band-interleaved by pixel.

use std::path::Path;

use super::{LabelMap, SceneCube};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"THSG";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 21;
pub const DTYPE_F32: u8 = 0;
pub const DTYPE_U16: u8 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub dtype: u8,
}

impl Header {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for v in [self.height, self.width, self.channels] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.push(self.dtype);
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::Format {
            path: path.into(),
            msg,
        };
        if bytes.len() < HEADER_LEN {
            return Err(bad(format!(
                "file is {} bytes, shorter than the {HEADER_LEN}-byte header",
                bytes.len()
            )));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad(format!("bad magic {:?}", &bytes[..4])));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        if word(4) != VERSION {
            return Err(bad(format!("unsupported version {}", word(4))));
        }
        let h = Header {
            height: word(8) as usize,
            width: word(12) as usize,
            channels: word(16) as usize,
            dtype: bytes[20],
        };
        if h.height == 0 || h.width == 0 || h.channels == 0 {
            return Err(bad(format!(
                "empty raster {}x{}x{}",
                h.height, h.width, h.channels
            )));
        }
        let size = match h.dtype {
            DTYPE_F32 => 4,
            DTYPE_U16 => 2,
            t => return Err(bad(format!("unknown sample type tag {t}"))),
        };
        let want = HEADER_LEN + h.height * h.width * h.channels * size;
        if bytes.len() != want {
            return Err(bad(format!(
                "expected {want} bytes for the declared shape, found {}",
                bytes.len()
            )));
        }
        Ok(h)
    }
}

fn read(path: &Path) -> Result<(Header, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = Header::decode(&bytes, path)?;
    Ok((header, bytes))
}

/// Writes a cube as f32 samples. Values that are not exactly representable in f32 are rounded.
pub fn write_cube(path: &Path, cube: &SceneCube) -> Result<()> {
    let mut out = Header {
        height: cube.height,
        width: cube.width,
        channels: cube.channels,
        dtype: DTYPE_F32,
    }
    .encode();
    out.reserve(cube.data.len() * 4);
    for &v in &cube.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_cube(path: &Path) -> Result<SceneCube> {
    let (h, bytes) = read(path)?;
    let body = &bytes[HEADER_LEN..];
    let data = match h.dtype {
        DTYPE_F32 => body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        _ => body
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    SceneCube::new(h.height, h.width, h.channels, data)
}

pub fn write_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    let mut out = Header {
        height: labels.height,
        width: labels.width,
        channels: 1,
        dtype: DTYPE_U16,
    }
    .encode();
    for &v in &labels.raw {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let (h, bytes) = read(path)?;
    if h.channels != 1 || h.dtype != DTYPE_U16 {
        return Err(Error::Format {
            path: path.into(),
            msg: format!(
                "label raster must be 1-channel u16, found {} channels with type tag {}",
                h.channels, h.dtype
            ),
        });
    }
    let raw = bytes[HEADER_LEN..]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
        .collect();
    LabelMap::new(h.height, h.width, raw)
}
