//! RGB rasters and their PPM (P6) on-disk form.
//!
//! Header `P6\n<width> <height>\n255\n` followed by `width*height` RGB
//! triples, row-major.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("raster dimensions {0}x{1} do not match data length {2}")]
    DimensionMismatch(u32, u32, usize),
    #[error("not a P6 PPM: {0}")]
    Format(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// 8-bit RGB image, row-major, 3 bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbRaster {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl RgbRaster {
    pub fn black(width: u32, height: u32) -> Self {
        RgbRaster { width, height, data: vec![0; (width * height * 3) as usize] }
    }

    pub fn from_data(width: u32, height: u32, data: Vec<u8>) -> Result<Self, RasterError> {
        if data.len() != (width as usize) * (height as usize) * 3 {
            return Err(RasterError::DimensionMismatch(width, height, data.len()));
        }
        Ok(RgbRaster { width, height, data })
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

    pub fn get(&self, u: u32, v: u32) -> [u8; 3] {
        let i = ((v * self.width + u) * 3) as usize;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, u: u32, v: u32, rgb: [u8; 3]) {
        let i = ((v * self.width + u) * 3) as usize;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn write_ppm(&self, path: &Path) -> Result<(), RasterError> {
        let io_err = |source| RasterError::Io { path: path.display().to_string(), source };
        let mut buf = Vec::with_capacity(self.data.len() + 32);
        write!(buf, "P6\n{} {}\n255\n", self.width, self.height).expect("write to vec");
        buf.extend_from_slice(&self.data);
        fs::write(path, buf).map_err(io_err)
    }

    pub fn read_ppm(path: &Path) -> Result<Self, RasterError> {
        let io_err = |source| RasterError::Io { path: path.display().to_string(), source };
        let bytes = fs::read(path).map_err(io_err)?;
        let err = |m: &str| RasterError::Format(m.to_string());
        let mut pos = 0usize;
        let mut token = |bytes: &[u8]| -> Result<String, RasterError> {
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
        if token(&bytes)? != "P6" {
            return Err(err("missing P6 magic"));
        }
        let width: u32 = token(&bytes)?.parse().map_err(|_| err("bad width"))?;
        let height: u32 = token(&bytes)?.parse().map_err(|_| err("bad height"))?;
        let maxval: u32 = token(&bytes)?.parse().map_err(|_| err("bad maxval"))?;
        if maxval != 255 {
            return Err(err("maxval must be 255"));
        }
        pos += 1;
        let expected = (width as usize) * (height as usize) * 3;
        let raster = bytes.get(pos..).ok_or_else(|| err("missing raster"))?;
        if raster.len() != expected {
            return Err(RasterError::Format(format!(
                "raster has {} bytes, expected {expected}",
                raster.len()
            )));
        }
        RgbRaster::from_data(width, height, raster.to_vec())
    }
}
