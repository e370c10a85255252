//! The `F32R` raster container.
//!
//! Layout (bit-exact):
//!
//! ```text
//! offset 0   b"F32R"
//! offset 4   height   u32 LE
//! offset 8   width    u32 LE
//! offset 12  channels u32 LE
//! offset 16  height*width*channels f32 LE, row-major, channel fastest
//! ```

use std::fs;
use std::path::Path;

use crate::atomic::write_atomic;
use crate::error::{FormatError, Result};

pub const RASTER_MAGIC: [u8; 4] = *b"F32R";
pub const RASTER_HEADER_LEN: usize = 16;

/// A dense `height x width x channels` float raster stored row-major with the
/// channel index varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Raster {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        let expected = height
            .checked_mul(width)
            .and_then(|v| v.checked_mul(channels))
            .ok_or_else(|| {
                FormatError::SizeOverflow(vec![height as u64, width as u64, channels as u64])
            })?;
        if data.len() != expected {
            return Err(FormatError::schema(format!(
                "raster {height}x{width}x{channels} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * self.channels + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.data[self.index(row, col, ch)]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f32) {
        let i = self.index(row, col, ch);
        self.data[i] = v;
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(RASTER_HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(&RASTER_MAGIC);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.channels as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Decodes an `F32R` byte buffer. The buffer must contain exactly one raster.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(FormatError::Truncated {
                needed: RASTER_HEADER_LEN,
                available: bytes.len(),
            });
        }
        if bytes[..4] != RASTER_MAGIC {
            return Err(FormatError::BadMagic {
                expected: RASTER_MAGIC,
                found: bytes[..4].to_vec(),
            });
        }
        if bytes.len() < RASTER_HEADER_LEN {
            return Err(FormatError::Truncated {
                needed: RASTER_HEADER_LEN,
                available: bytes.len(),
            });
        }
        let h = read_u32(bytes, 4);
        let w = read_u32(bytes, 8);
        let c = read_u32(bytes, 12);
        let count = (h as u64)
            .checked_mul(w as u64)
            .and_then(|v| v.checked_mul(c as u64))
            .and_then(|v| usize::try_from(v).ok())
            .and_then(|v| v.checked_mul(4).map(|b| (v, b)))
            .ok_or_else(|| FormatError::SizeOverflow(vec![h as u64, w as u64, c as u64]))?;
        let (count, payload) = count;
        let needed = RASTER_HEADER_LEN
            .checked_add(payload)
            .ok_or_else(|| FormatError::SizeOverflow(vec![h as u64, w as u64, c as u64]))?;
        if bytes.len() < needed {
            return Err(FormatError::Truncated {
                needed,
                available: bytes.len(),
            });
        }
        if bytes.len() > needed {
            return Err(FormatError::TrailingBytes(bytes.len() - needed));
        }
        let data = bytes[RASTER_HEADER_LEN..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect::<Vec<_>>();
        debug_assert_eq!(data.len(), count);
        Ok(Self {
            height: h as usize,
            width: w as usize,
            channels: c as usize,
            data,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| FormatError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

/// Writes `raster` to `path` in `F32R` format (atomic temp-file + rename).
pub fn write_raster(path: &Path, raster: &Raster) -> Result<()> {
    raster.write(path)
}

/// Reads an `F32R` raster from `path`.
pub fn read_raster(path: &Path) -> Result<Raster> {
    Raster::read(path)
}
