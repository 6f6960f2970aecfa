//! RGB images on the unit interval plus binary PPM (P6) serialization.
//!
//! Pixel values live on the 1/255 grid: every constructor and editing
//! operator snaps its output with [`Image::snap`], so writing a PPM and
//! reading it back reproduces the in-memory image exactly and byte-level
//! statements about operators (an inversion applied twice is the identity)
//! hold without floating-point caveats.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// RGB interleaved, row-major, each channel in [0, 1].
    pub data: Vec<f32>,
}

/// Round one channel value onto the 1/255 grid.
pub fn snap_channel(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height * 3, "image data length");
        let mut img = Image {
            width,
            height,
            data,
        };
        img.snap();
        img
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i] = rgb[0];
        self.data[i + 1] = rgb[1];
        self.data[i + 2] = rgb[2];
    }

    /// Rec. 601 luma.
    pub fn luma(&self, x: usize, y: usize) -> f32 {
        let [r, g, b] = self.pixel(x, y);
        0.299 * r + 0.587 * g + 0.114 * b
    }

    pub fn snap(&mut self) {
        for v in &mut self.data {
            *v = snap_channel(*v);
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut buf = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        buf.extend(self.to_bytes());
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::parse_ppm(&raw).map_err(|msg| {
            Error::Format(format!("{}: {msg}", path.display()))
        })
    }

    fn parse_ppm(raw: &[u8]) -> std::result::Result<Self, String> {
        let mut pos = 0;
        let mut token = |raw: &[u8]| -> std::result::Result<String, String> {
            while pos < raw.len() && raw[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated header".into());
            }
            Ok(String::from_utf8_lossy(&raw[start..pos]).into_owned())
        };
        if token(raw)? != "P6" {
            return Err("not a P6 file".into());
        }
        let width: usize = token(raw)?.parse().map_err(|_| "bad width")?;
        let height: usize = token(raw)?.parse().map_err(|_| "bad height")?;
        let maxval: usize = token(raw)?.parse().map_err(|_| "bad maxval")?;
        if maxval != 255 {
            return Err(format!("unsupported maxval {maxval}"));
        }
        // Exactly one whitespace byte separates the header from the payload.
        pos += 1;
        let need = width * height * 3;
        if raw.len() < pos + need {
            return Err(format!(
                "payload too short: need {need} bytes, have {}",
                raw.len().saturating_sub(pos)
            ));
        }
        let data = raw[pos..pos + need]
            .iter()
            .map(|&b| b as f32 / 255.0)
            .collect();
        Ok(Image {
            width,
            height,
            data,
        })
    }
}
