//! 8-bit raster images: decode/encode, bilinear resize, simple value
//! transforms. Everything the preprocessing and augmentation pipeline
//! touches stays in this representation until tensors are built.

use std::path::Path;

use crate::error::{Error, Result};

/// Row-major interleaved 8-bit image, 1 (gray) or 3 (RGB) channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Self {
        assert!(channels == 1 || channels == 3, "1 or 3 channels");
        assert_eq!(data.len(), width * height * channels);
        Self { width, height, channels, data }
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Self {
        Self::new(width, height, channels, vec![value; width * height * channels])
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

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: u8) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Mean across channels at one pixel, as intensity.
    pub fn luminance(&self, y: usize, x: usize) -> f64 {
        let base = (y * self.width + x) * self.channels;
        let sum: u32 = self.data[base..base + self.channels]
            .iter()
            .map(|&v| v as u32)
            .sum();
        sum as f64 / self.channels as f64
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Ingestion(format!("cannot decode {}: {e}", path.display())))?;
        Ok(match img.color().has_color() {
            true => {
                let rgb = img.to_rgb8();
                Self::new(rgb.width() as usize, rgb.height() as usize, 3, rgb.into_raw())
            }
            false => {
                let gray = img.to_luma8();
                Self::new(gray.width() as usize, gray.height() as usize, 1, gray.into_raw())
            }
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            _ => image::ExtendedColorType::Rgb8,
        };
        image::save_buffer(
            path,
            &self.data,
            self.width as u32,
            self.height as u32,
            color,
        )
        .map_err(|e| Error::Runtime(format!("cannot write {}: {e}", path.display())))
    }

    /// Bilinear resize to a square `side x side`, channel count preserved.
    /// Uses the half-pixel-center convention, so a same-size resize is the
    /// identity bit for bit.
    pub fn resize_bilinear(&self, side: usize) -> Raster {
        self.resize_bilinear_wh(side, side)
    }

    pub fn resize_bilinear_wh(&self, out_w: usize, out_h: usize) -> Raster {
        let sx = self.width as f64 / out_w as f64;
        let sy = self.height as f64 / out_h as f64;
        let mut out = vec![0u8; out_w * out_h * self.channels];
        for oy in 0..out_h {
            let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f64;
            for ox in 0..out_w {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f64;
                for c in 0..self.channels {
                    let v00 = self.get(y0, x0, c) as f64;
                    let v01 = self.get(y0, x1, c) as f64;
                    let v10 = self.get(y1, x0, c) as f64;
                    let v11 = self.get(y1, x1, c) as f64;
                    let top = v00 * (1.0 - wx) + v01 * wx;
                    let bot = v10 * (1.0 - wx) + v11 * wx;
                    let v = top * (1.0 - wy) + bot * wy;
                    out[(oy * out_w + ox) * self.channels + c] = v.round().clamp(0.0, 255.0) as u8;
                }
            }
        }
        Raster::new(out_w, out_h, self.channels, out)
    }

    /// Reverses column order; rows and channels untouched.
    pub fn flip_horizontal(&self) -> Raster {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out.set(y, x, c, self.get(y, self.width - 1 - x, c));
                }
            }
        }
        out
    }

    /// Crops rows `y0..y1` and columns `x0..x1` (exclusive ends).
    pub fn crop(&self, y0: usize, y1: usize, x0: usize, x1: usize) -> Raster {
        assert!(y0 < y1 && y1 <= self.height && x0 < x1 && x1 <= self.width);
        let (h, w) = (y1 - y0, x1 - x0);
        let mut out = vec![0u8; h * w * self.channels];
        for y in 0..h {
            let src = ((y0 + y) * self.width + x0) * self.channels;
            let dst = y * w * self.channels;
            out[dst..dst + w * self.channels]
                .copy_from_slice(&self.data[src..src + w * self.channels]);
        }
        Raster::new(w, h, self.channels, out)
    }

    /// Expands grayscale to 3 channels by replication; RGB passes through.
    pub fn to_rgb(&self) -> Raster {
        if self.channels == 3 {
            return self.clone();
        }
        let mut out = Vec::with_capacity(self.width * self.height * 3);
        for &v in &self.data {
            out.extend_from_slice(&[v, v, v]);
        }
        Raster::new(self.width, self.height, 3, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_image(w: usize, h: usize) -> Raster {
        let mut r = Raster::filled(w, h, 1, 0);
        for y in 0..h {
            for x in 0..w {
                r.set(y, x, 0, ((x * 7 + y * 13) % 256) as u8);
            }
        }
        r
    }

    #[test]
    fn resize_contract_shapes_and_identity() {
        let img = gradient_image(512, 384);
        let out = img.resize_bilinear(256);
        assert_eq!((out.width(), out.height()), (256, 256));
        assert_eq!(out.channels(), 1);

        let img = gradient_image(256, 256);
        let same = img.resize_bilinear(256);
        assert_eq!(img, same);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let img = Raster::filled(100, 70, 1, 137);
        let out = img.resize_bilinear(256);
        assert!(out.data().iter().all(|&v| v == 137));
    }

    #[test]
    fn resize_preserves_value_range_within_rounding() {
        let img = gradient_image(97, 41);
        let (lo, hi) = (
            *img.data().iter().min().unwrap() as i32,
            *img.data().iter().max().unwrap() as i32,
        );
        let out = img.resize_bilinear(64);
        for &v in out.data() {
            assert!(v as i32 >= lo - 1 && v as i32 <= hi + 1);
        }
    }

    #[test]
    fn hflip_reverses_columns() {
        let img = gradient_image(5, 3);
        let flipped = img.flip_horizontal();
        for y in 0..3 {
            for x in 0..5 {
                assert_eq!(flipped.get(y, x, 0), img.get(y, 4 - x, 0));
            }
        }
    }

    #[test]
    fn png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let img = gradient_image(40, 33);
        img.save_png(&path).unwrap();
        let back = Raster::load_png(&path).unwrap();
        assert_eq!(img, back);
    }
}
