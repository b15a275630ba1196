//! In-memory images and their on-disk formats (8-bit PNG, float32 depth).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub const DEPTH_MAGIC: &[u8; 8] = b"DPTH0001";

#[derive(thiserror::Error, Debug)]
pub enum RasterError {
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error("raster size mismatch: {0}")]
    Size(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RasterError + '_ {
    move |source| RasterError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Linear RGB in `[0, 1]`, row-major, interleaved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self, RasterError> {
        if data.len() != width * height * 3 {
            return Err(RasterError::Size(format!("{}x{} rgb needs {} values, got {}", width, height, width * height * 3, data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Rec. 601 luma.
    pub fn to_gray(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    /// Rounds to 8 bits per channel.
    pub fn quantized(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| to_u8(v) as f64 / 255.0).collect(),
        }
    }

    pub fn write_png(&self, path: &Path) -> Result<(), RasterError> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .ok_or_else(|| RasterError::Size("pixel buffer does not match dimensions".into()))?;
        img.save_with_format(path, image::ImageFormat::Png).map_err(|e| RasterError::Format {
            path: path.display().to_string(),
            msg: e.to_string(),
        })
    }

    pub fn read_png(path: &Path) -> Result<Self, RasterError> {
        let img = image::open(path)
            .map_err(|e| RasterError::Format {
                path: path.display().to_string(),
                msg: e.to_string(),
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Ok(Self {
            width: w as usize,
            height: h as usize,
            data: img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect(),
        })
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Metric depth raster; 0 marks an invalid pixel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl DepthImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, d: f32) {
        self.data[y * self.width + x] = d;
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        self.data.iter().map(|&d| d > 0.0 && d.is_finite()).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.data.len());
        out.extend_from_slice(DEPTH_MAGIC);
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        for d in &self.data {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, RasterError> {
        let bad = |msg: String| RasterError::Format {
            path: path.display().to_string(),
            msg,
        };
        if bytes.len() < 16 || &bytes[..8] != DEPTH_MAGIC {
            return Err(bad("missing DPTH0001 header".into()));
        }
        let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let h = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let payload = &bytes[16..];
        if payload.len() != 4 * w * h {
            return Err(bad(format!("{w}x{h} raster needs {} payload bytes, found {}", 4 * w * h, payload.len())));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { width: w, height: h, data })
    }

    pub fn write(&self, path: &Path) -> Result<(), RasterError> {
        let mut f = fs::File::create(path).map_err(io_err(path))?;
        f.write_all(&self.to_bytes()).map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self, RasterError> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes, path)
    }

    /// False-color visualization: near is bright, invalid pixels black.
    pub fn colorize(&self, max_depth: f32) -> RgbImage {
        let mut img = RgbImage::new(self.width, self.height);
        for (i, &d) in self.data.iter().enumerate() {
            if d <= 0.0 || !d.is_finite() {
                continue;
            }
            let s = (1.0 - (d / max_depth).clamp(0.0, 1.0)) as f64;
            img.data[3 * i..3 * i + 3].copy_from_slice(&[s, s * s, 1.0 - s]);
        }
        img
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_is_lossless_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let mut img = RgbImage::new(5, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = ((i * 37) % 256) as f64 / 255.0;
        }
        img.write_png(&path).unwrap();
        assert_eq!(RgbImage::read_png(&path).unwrap(), img);
    }

    #[test]
    fn depth_roundtrip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.f32");
        let mut d = DepthImage::new(4, 2);
        d.set(1, 1, 3.25);
        d.set(3, 0, f32::MAX);
        d.write(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], b"DPTH0001");
        assert_eq!(bytes.len(), 16 + 32);
        assert_eq!(DepthImage::read(&path).unwrap(), d);
    }

    #[test]
    fn truncated_depth_is_rejected() {
        let d = DepthImage::new(4, 2);
        let bytes = d.to_bytes();
        let err = DepthImage::from_bytes(&bytes[..bytes.len() - 1], Path::new("x.f32")).unwrap_err();
        assert!(err.to_string().contains("x.f32"));
    }
}
