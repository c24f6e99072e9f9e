//! Binary segmentation masks and their PGM (P5) on-disk form.
//!
//! A mask stores one byte per pixel, 0 = static, 1 = moving, row-major.
//! On disk the moving class is written as 255 so the files are viewable:
//! `P5\n<width> <height>\n255\n` followed by `width*height` bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("mask dimensions {0}x{1} do not match data length {2}")]
    DimensionMismatch(u32, u32, usize),
    #[error("not a binary P5 PGM: {0}")]
    Format(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Per-pixel moving/static labels for one frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMask {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl SegmentationMask {
    /// All-static mask.
    pub fn zeros(width: u32, height: u32) -> Self {
        SegmentationMask { width, height, data: vec![0; (width * height) as usize] }
    }

    pub fn from_data(width: u32, height: u32, data: Vec<u8>) -> Result<Self, MaskError> {
        if data.len() != (width as usize) * (height as usize) {
            return Err(MaskError::DimensionMismatch(width, height, data.len()));
        }
        debug_assert!(data.iter().all(|&v| v <= 1));
        Ok(SegmentationMask { width, height, data })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, u: u32, v: u32) -> u8 {
        self.data[(v * self.width + u) as usize]
    }

    pub fn set(&mut self, u: u32, v: u32, value: u8) {
        self.data[(v * self.width + u) as usize] = value;
    }

    pub fn moving_pixel_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn moving_fraction(&self) -> f64 {
        self.moving_pixel_count() as f64 / self.data.len() as f64
    }

    /// Pixel-wise OR with another mask of the same dimensions.
    pub fn union_with(&mut self, other: &SegmentationMask) {
        assert_eq!(
            (self.width, self.height),
            (other.width, other.height),
            "mask union requires equal dimensions"
        );
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a |= b;
        }
    }

    pub fn write_pgm(&self, path: &Path) -> Result<(), MaskError> {
        let io_err = |source| MaskError::Io { path: path.display().to_string(), source };
        let mut buf = Vec::with_capacity(self.data.len() + 32);
        write!(buf, "P5\n{} {}\n255\n", self.width, self.height).expect("write to vec");
        buf.extend(self.data.iter().map(|&v| if v != 0 { 255u8 } else { 0u8 }));
        fs::write(path, buf).map_err(io_err)
    }

    pub fn read_pgm(path: &Path) -> Result<Self, MaskError> {
        let io_err = |source| MaskError::Io { path: path.display().to_string(), source };
        let bytes = fs::read(path).map_err(io_err)?;
        let (width, height, pixels) = parse_p5(&bytes)?;
        let mut data = Vec::with_capacity(pixels.len());
        for &b in pixels {
            match b {
                0 => data.push(0),
                255 => data.push(1),
                other => {
                    return Err(MaskError::Format(format!(
                        "pixel value {other} is neither 0 nor 255"
                    )))
                }
            }
        }
        SegmentationMask::from_data(width, height, data)
    }
}

fn parse_p5(bytes: &[u8]) -> Result<(u32, u32, &[u8]), MaskError> {
    let err = |m: &str| MaskError::Format(m.to_string());
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String, MaskError> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(err("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(bytes)? != "P5" {
        return Err(err("missing P5 magic"));
    }
    let width: u32 = token(bytes)?.parse().map_err(|_| err("bad width"))?;
    let height: u32 = token(bytes)?.parse().map_err(|_| err("bad height"))?;
    let maxval: u32 = token(bytes)?.parse().map_err(|_| err("bad maxval"))?;
    if maxval != 255 {
        return Err(err("maxval must be 255"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let expected = (width as usize) * (height as usize);
    let raster = bytes.get(pos..).ok_or_else(|| err("missing raster"))?;
    if raster.len() != expected {
        return Err(MaskError::Format(format!(
            "raster has {} bytes, expected {expected}",
            raster.len()
        )));
    }
    Ok((width, height, raster))
}
