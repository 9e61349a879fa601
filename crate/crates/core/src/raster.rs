//! RGB rasters and their flat binary encoding.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, SkyError};

const MAGIC: &[u8; 4] = b"SKRA";

/// Row-major, channel-interleaved image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<f32>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(SkyError::arg(format!("raster extent {width}x{height}x{channels}")));
        }
        if pixels.len() != width * height * channels {
            return Err(SkyError::arg(format!(
                "raster {width}x{height}x{channels} needs {} values, got {}",
                width * height * channels,
                pixels.len()
            )));
        }
        Ok(Raster { width, height, channels, pixels })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Raster { width, height, channels: 3, pixels: vec![value; width * height * 3] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn clamp(&mut self) {
        for p in &mut self.pixels {
            *p = p.clamp(0.0, 1.0);
        }
    }

    pub fn in_unit_range(&self) -> bool {
        self.pixels.iter().all(|p| (0.0..=1.0).contains(p))
    }

    /// Quarter turns counter-clockwise; square rasters only.
    pub fn rotate90(&self, quarter_turns: usize) -> Raster {
        let mut out = self.clone();
        for _ in 0..quarter_turns % 4 {
            let src = out.clone();
            let n = src.width;
            for y in 0..n {
                for x in 0..n {
                    for c in 0..src.channels {
                        out.set(y, n - 1 - x, c, src.get(x, y, c));
                    }
                }
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.pixels.len() * 4);
        out.extend_from_slice(MAGIC);
        for v in [self.width, self.height, self.channels] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for p in &self.pixels {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(SkyError::format("raster", "missing SKRA header"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (w, h, c) = (word(0), word(1), word(2));
        let n = w.checked_mul(h).and_then(|v| v.checked_mul(c)).ok_or_else(|| SkyError::format("raster", "extent overflow"))?;
        if bytes.len() != 16 + 4 * n {
            return Err(SkyError::format("raster", format!("expected {} pixel bytes, found {}", 4 * n, bytes.len() - 16)));
        }
        let pixels = bytes[16..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        Raster::new(w, h, c, pixels).map_err(|e| SkyError::format("raster", e.to_string()))
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Raster::from_bytes(&buf)
    }
}
