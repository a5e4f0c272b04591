//! Binary PPM (P6) and PGM (P5) codecs, 8-bit only.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Fixed per-channel normalization applied before the encoder.
pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub pixels: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

struct Header {
    width: usize,
    height: usize,
    data_start: usize,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(start, format!("{what} out of range")))
    }
}

fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::format(
            0,
            format!("expected magic {:?}", std::str::from_utf8(magic).unwrap_or("")),
        ));
    }
    let mut cur = Cursor { bytes, pos: 2 };
    if !cur.bytes.get(2).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return Err(Error::format(2, "expected whitespace after magic"));
    }
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval_at = {
        cur.skip_space_and_comments();
        cur.pos
    };
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(Error::format(maxval_at, format!("maxval {maxval} unsupported, only 255")));
    }
    if width == 0 || height == 0 {
        return Err(Error::format(maxval_at, format!("empty image {width}x{height}")));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => {}
        _ => return Err(Error::format(cur.pos, "expected single whitespace before pixel data")),
    }
    Ok(Header {
        width,
        height,
        data_start: cur.pos + 1,
    })
}

fn payload<'a>(bytes: &'a [u8], h: &Header, channels: usize) -> Result<&'a [u8]> {
    let need = h
        .width
        .checked_mul(h.height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::format(h.data_start, "image dimensions overflow"))?;
    let have = bytes.len() - h.data_start;
    if have < need {
        return Err(Error::format(
            bytes.len(),
            format!("pixel data truncated: expected {need} bytes, found {have}"),
        ));
    }
    Ok(&bytes[h.data_start..h.data_start + need])
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::shape(
                "rgb_image",
                format!("{} bytes for {width}x{height}", pixels.len()),
            ));
        }
        Ok(RgbImage { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        RgbImage {
            width,
            height,
            pixels: rgb.repeat(width * height),
        }
    }

    pub fn decode_ppm(bytes: &[u8]) -> Result<Self> {
        let h = parse_header(bytes, b"P6")?;
        let data = payload(bytes, &h, 3)?;
        Ok(RgbImage {
            width: h.width,
            height: h.height,
            pixels: data.to_vec(),
        })
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode_ppm(&std::fs::read(path).map_err(|e| Error::io_at(path, e))?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_ppm()).map_err(|e| Error::io_at(path, e))
    }

    /// `1 × 3 × H × W` tensor, scaled to `[0, 1]` then standardized.
    pub fn to_tensor(&self) -> Tensor {
        let (w, px) = (self.width, &self.pixels);
        Tensor::from_fn(Shape::new(1, 3, self.height, w), |_, c, y, x| {
            (px[(y * w + x) * 3 + c] as f64 / 255.0 - PIXEL_MEAN) / PIXEL_STD
        })
    }
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::shape(
                "gray_image",
                format!("{} bytes for {width}x{height}", pixels.len()),
            ));
        }
        Ok(GrayImage { width, height, pixels })
    }

    pub fn decode_pgm(bytes: &[u8]) -> Result<Self> {
        let h = parse_header(bytes, b"P5")?;
        let data = payload(bytes, &h, 1)?;
        Ok(GrayImage {
            width: h.width,
            height: h.height,
            pixels: data.to_vec(),
        })
    }

    pub fn encode_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode_pgm(&std::fs::read(path).map_err(|e| Error::io_at(path, e))?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_pgm()).map_err(|e| Error::io_at(path, e))
    }

    /// Min-max scale `values` (row-major `height × width`) to 0..=255.
    /// A constant map becomes all zeros.
    pub fn from_normalized(width: usize, height: usize, values: &[f64]) -> Result<Self> {
        let (lo, hi) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Numeric("non-finite value in map".into()));
        }
        let span = hi - lo;
        let pixels = values
            .iter()
            .map(|&v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
            .collect();
        Self::new(width, height, pixels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_with_comments() {
        let img = RgbImage::new(2, 1, vec![1, 2, 3, 250, 251, 252]).unwrap();
        assert_eq!(RgbImage::decode_ppm(&img.encode_ppm()).unwrap(), img);
        let mut commented = b"P6 # made by hand\n2 # w\n1\n255\n".to_vec();
        commented.extend_from_slice(&img.pixels);
        assert_eq!(RgbImage::decode_ppm(&commented).unwrap(), img);
    }

    #[test]
    fn errors_carry_offsets() {
        let off = |bytes: &[u8]| match RgbImage::decode_ppm(bytes) {
            Err(Error::Format { offset, .. }) => offset,
            other => panic!("{other:?}"),
        };
        assert_eq!(off(b"P3\n1 1\n255\n"), 0);
        assert_eq!(off(b"P6\nx 1\n255\n"), 3);
        assert_eq!(off(b"P6\n1 1\n65535\n"), 7);
        assert_eq!(off(b"P6\n2 2\n255\n\x01\x02"), 13);
    }

    #[test]
    fn normalization() {
        let t = RgbImage::filled(2, 2, [0, 255, 51]).to_tensor();
        assert_eq!(t.at(0, 0, 1, 1), -1.0);
        assert_eq!(t.at(0, 1, 0, 0), 1.0);
        assert!((t.at(0, 2, 1, 0) + 0.6).abs() < 1e-15);
    }

    #[test]
    fn minmax_map() {
        let g = GrayImage::from_normalized(3, 1, &[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(g.pixels, vec![0, 128, 255]);
        assert_eq!(GrayImage::from_normalized(2, 1, &[0.5, 0.5]).unwrap().pixels, vec![0, 0]);
    }
}
