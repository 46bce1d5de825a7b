//! Binary PGM (P5) and PPM (P6) rasters.

use std::fs;
use std::path::Path;

use crate::domain::BoundingBox;
use crate::error::{Error, Result};

/// 8-bit single-channel raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        GrayImage {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }

    pub fn read_pgm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |message: &str| Error::Image {
            path: path.to_path_buf(),
            message: message.to_string(),
        };
        let (header, offset) = parse_header(&bytes, b"P5").ok_or_else(|| bad("not a P5 file"))?;
        let [width, height, maxval] = header;
        if maxval != 255 {
            return Err(bad("only maxval 255 is supported"));
        }
        let data = bytes
            .get(offset..offset + width * height)
            .ok_or_else(|| bad("truncated pixel data"))?
            .to_vec();
        Ok(GrayImage {
            width,
            height,
            data,
        })
    }
}

/// Parses `magic w h maxval` plus the single whitespace byte before the
/// raster. Comments are not supported.
fn parse_header(bytes: &[u8], magic: &[u8]) -> Option<([usize; 3], usize)> {
    if !bytes.starts_with(magic) {
        return None;
    }
    let mut pos = magic.len();
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos]).ok()?.parse().ok()?;
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return None;
    }
    Some((fields, pos + 1))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn from_gray(img: &GrayImage) -> Self {
        RgbImage {
            width: img.width,
            height: img.height,
            data: img.data.iter().map(|&v| [v, v, v]).collect(),
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        self.data[y * self.width + x]
    }

    /// Draws the outline of a pixel-space box with the given stroke width,
    /// growing inward from the box edge and clipped to the image.
    pub fn stroke_box(&mut self, b: &BoundingBox, stroke: usize, color: [u8; 3]) {
        let clamp_x = |v: f64| (v.round().max(0.0) as usize).min(self.width);
        let clamp_y = |v: f64| (v.round().max(0.0) as usize).min(self.height);
        let (x0, x1) = (clamp_x(b.x), clamp_x(b.right()));
        let (y0, y1) = (clamp_y(b.y), clamp_y(b.bottom()));
        if x0 >= x1 || y0 >= y1 {
            return;
        }
        for y in y0..y1 {
            for x in x0..x1 {
                let edge = x < x0 + stroke || x + stroke >= x1 || y < y0 + stroke || y + stroke >= y1;
                if edge {
                    self.data[y * self.width + x] = color;
                }
            }
        }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for px in &self.data {
            out.extend_from_slice(px);
        }
        out
    }

    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |message: &str| Error::Image {
            path: path.to_path_buf(),
            message: message.to_string(),
        };
        let ([width, height, _], offset) =
            parse_header(&bytes, b"P6").ok_or_else(|| bad("not a P6 file"))?;
        let raw = bytes
            .get(offset..offset + 3 * width * height)
            .ok_or_else(|| bad("truncated pixel data"))?;
        Ok(RgbImage {
            width,
            height,
            data: raw.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = GrayImage::new(5, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i * 17) as u8;
        }
        let p = dir.path().join("a.pgm");
        img.write_pgm(&p).unwrap();
        assert_eq!(GrayImage::read_pgm(&p).unwrap(), img);
    }

    #[test]
    fn truncated_pgm_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        std::fs::write(&p, b"P5\n4 4\n255\n\x00\x01").unwrap();
        assert!(GrayImage::read_pgm(&p).is_err());
    }

    #[test]
    fn stroke_lands_on_perimeter() {
        let mut img = RgbImage::from_gray(&GrayImage::new(20, 20));
        let b = BoundingBox::pixel(4.0, 4.0, 10.0, 8.0).unwrap();
        img.stroke_box(&b, 2, [255, 0, 0]);
        assert_eq!(img.get(4, 4), [255, 0, 0]);
        assert_eq!(img.get(5, 8), [255, 0, 0]);
        assert_eq!(img.get(13, 11), [255, 0, 0]);
        assert_eq!(img.get(6, 6), [0, 0, 0]);
        assert_eq!(img.get(14, 4), [0, 0, 0]);
    }
}
