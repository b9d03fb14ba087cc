//! Images in `[0, 1]`, padded to multiples of 8, plus PGM/PPM and raw
//! `.f64` I/O.
//!
//! Raw layout: magic `"FLATI1\0"`, one zero byte, `u32` height, `u32` width
//! (little-endian, 16 bytes total), then `height·width` little-endian `f64`
//! grey values in row-major order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::weightfile::write_atomic;

pub const RAW_MAGIC: &[u8; 7] = b"FLATI1\0";
const RAW_HEADER: usize = 16;

/// Interleaved `height × width × channels` pixels. Height and width are
/// always multiples of 8.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Config(format!("images have 1 or 3 channels, got {channels}")));
        }
        if height == 0 || width == 0 || !height.is_multiple_of(8) || !width.is_multiple_of(8) {
            return Err(Error::Config(format!(
                "image size {height}x{width} is not a positive multiple of 8"
            )));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} pixel values for {height}x{width}x{channels}",
                pixels.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            pixels,
        })
    }

    /// Builds an image of any size, reflect-padding bottom and right edges up
    /// to the next multiple of 8.
    pub fn padded(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{} pixel values for {height}x{width}x{channels}",
                pixels.len()
            )));
        }
        let ph = height.div_ceil(8) * 8;
        let pw = width.div_ceil(8) * 8;
        let mut out = Vec::with_capacity(ph * pw * channels);
        for y in 0..ph {
            let sy = reflect(y, height);
            for x in 0..pw {
                let sx = reflect(x, width);
                let base = (sy * width + sx) * channels;
                out.extend_from_slice(&pixels[base..base + channels]);
            }
        }
        Image::new(ph, pw, channels, out)
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut px = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                px.push(f(x, y));
            }
        }
        Image::new(height, width, 1, px)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Channel mean; a grey image is returned unchanged.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let pixels = self
            .pixels
            .chunks_exact(self.channels)
            .map(|p| p.iter().sum::<f64>() / self.channels as f64)
            .collect();
        Image {
            channels: 1,
            pixels,
            ..*self
        }
    }

    /// Loads PGM (P5), PPM (P6) or raw `.f64`, chosen by the file's magic.
    pub fn load(path: &Path) -> Result<Image> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Image::decode(&bytes).map_err(|e| match e {
            Error::Format { offset, msg } => Error::Format {
                offset,
                msg: format!("{}: {msg}", path.display()),
            },
            other => other,
        })
    }

    pub fn decode(bytes: &[u8]) -> Result<Image> {
        if bytes.starts_with(RAW_MAGIC) {
            return decode_raw(bytes);
        }
        if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") {
            let img = ::image::load_from_memory_with_format(bytes, ::image::ImageFormat::Pnm)
                .map_err(|e| Error::Format {
                    offset: 0,
                    msg: format!("invalid PNM data: {e}"),
                })?;
            let (w, h) = (img.width() as usize, img.height() as usize);
            return if img.color().channel_count() >= 3 {
                let px = img.to_rgb32f().into_raw().into_iter().map(f64::from).collect();
                Image::padded(h, w, 3, px)
            } else {
                let px = img.to_luma32f().into_raw().into_iter().map(f64::from).collect();
                Image::padded(h, w, 1, px)
            };
        }
        Err(Error::Format {
            offset: 0,
            msg: "unrecognised image magic (expected P5, P6 or FLATI1)".into(),
        })
    }

    /// Raw `.f64` encoding of the grey image (lossless).
    pub fn encode_raw(&self) -> Vec<u8> {
        let g = self.to_gray();
        let mut out = Vec::with_capacity(RAW_HEADER + g.pixels.len() * 8);
        out.extend_from_slice(RAW_MAGIC);
        out.push(0);
        out.extend_from_slice(&(g.height as u32).to_le_bytes());
        out.extend_from_slice(&(g.width as u32).to_le_bytes());
        for v in &g.pixels {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// 8-bit PGM (grey) or PPM (colour) encoding.
    pub fn encode_pnm(&self) -> Vec<u8> {
        let tag = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{tag}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.pixels
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }

    /// Writes raw `.f64` when the extension is `f64`, PNM otherwise.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = if path.extension().is_some_and(|e| e == "f64") {
            self.encode_raw()
        } else {
            self.encode_pnm()
        };
        write_atomic(path, &bytes)
    }
}

/// Mirror index `i` into `0..n` without repeating the edge sample.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

fn decode_raw(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < RAW_HEADER {
        return Err(Error::Truncated {
            offset: 0,
            expected: RAW_HEADER as u64,
            found: bytes.len() as u64,
        });
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let need = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::Format {
            offset: 8,
            msg: format!("image size {h}x{w} overflows"),
        })?;
    let body = &bytes[RAW_HEADER..];
    if body.len() < need {
        return Err(Error::Truncated {
            offset: RAW_HEADER as u64,
            expected: need as u64,
            found: body.len() as u64,
        });
    }
    let px: Vec<f64> = body[..need]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if let Some(i) = px.iter().position(|v| !v.is_finite()) {
        return Err(Error::Format {
            offset: (RAW_HEADER + 8 * i) as u64,
            msg: "non-finite pixel".into(),
        });
    }
    Image::padded(h, w, 1, px)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_requires_multiple_of_eight() {
        assert!(Image::new(8, 12, 1, vec![0.0; 96]).is_err());
        assert!(Image::new(8, 8, 2, vec![0.0; 128]).is_err());
        assert!(Image::new(8, 8, 1, vec![0.0; 63]).is_err());
        assert!(Image::new(8, 16, 3, vec![0.0; 384]).is_ok());
    }

    #[test]
    fn reflect_padding() {
        let px: Vec<f64> = (0..6).map(|v| v as f64).collect();
        let img = Image::padded(1, 6, 1, px).unwrap();
        assert_eq!((img.height(), img.width()), (8, 8));
        // Row: 0 1 2 3 4 5 | 4 3
        let row: Vec<f64> = (0..8).map(|x| img.at(x, 0, 0)).collect();
        assert_eq!(row, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 4.0, 3.0]);
        // A single source row is replicated downwards.
        assert_eq!(img.at(6, 7, 0), 4.0);
        assert_eq!(reflect(9, 4), 3);
    }

    #[test]
    fn raw_round_trip() {
        let img = Image::from_fn(8, 16, |x, y| (x * 31 + y * 7) as f64 / 1000.0).unwrap();
        let back = Image::decode(&img.encode_raw()).unwrap();
        assert_eq!(back, img);
        assert_eq!(img.encode_raw().len(), 16 + 8 * 16 * 8);
    }

    #[test]
    fn raw_truncated() {
        let img = Image::from_fn(8, 8, |_, _| 0.5).unwrap();
        let bytes = img.encode_raw();
        assert!(matches!(
            Image::decode(&bytes[..100]),
            Err(Error::Truncated { offset: 16, .. })
        ));
    }

    #[test]
    fn pnm_round_trip_quantised() {
        let img = Image::from_fn(16, 8, |x, y| ((x + y) % 5) as f64 / 4.0).unwrap();
        let back = Image::decode(&img.encode_pnm()).unwrap();
        assert_eq!((back.height(), back.width(), back.channels()), (16, 8, 1));
        for (a, b) in back.pixels().iter().zip(img.pixels()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }

        let color = Image::new(8, 8, 3, (0..192).map(|i| (i % 3) as f64 / 2.0).collect()).unwrap();
        let back = Image::decode(&color.encode_pnm()).unwrap();
        assert_eq!(back.channels(), 3);
        assert!((back.to_gray().at(0, 0, 0) - 0.5).abs() < 1e-2);
    }

    #[test]
    fn odd_sized_pgm_is_padded() {
        let mut bytes = b"P5\n5 3\n255\n".to_vec();
        bytes.extend((0..15).map(|i| (i * 10) as u8));
        let img = Image::decode(&bytes).unwrap();
        assert_eq!((img.height(), img.width()), (8, 8));
    }

    #[test]
    fn unknown_magic() {
        assert!(matches!(Image::decode(b"GIF89a"), Err(Error::Format { offset: 0, .. })));
    }
}
