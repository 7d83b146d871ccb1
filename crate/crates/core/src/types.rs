//! Pixel containers and geometry shared by every stage of the pipeline.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("invalid image geometry {height}x{width}x{channels} with {len} bytes")]
    Geometry {
        height: usize,
        width: usize,
        channels: usize,
        len: usize,
    },
    #[error("failed to decode image: {0}")]
    Decode(String),
    #[error("failed to encode image: {0}")]
    Encode(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// An 8-bit intensity image stored row-major, channels interleaved.
///
/// Only grayscale (1 channel) and RGB (3 channels) are representable.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<u8>,
    ) -> Result<Self, ImageError> {
        if height == 0
            || width == 0
            || !(channels == 1 || channels == 3)
            || data.len() != height * width * channels
        {
            return Err(ImageError::Geometry {
                height,
                width,
                channels,
                len: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(
        height: usize,
        width: usize,
        channels: usize,
        value: u8,
    ) -> Result<Self, ImageError> {
        Self::new(
            height,
            width,
            channels,
            vec![value; height * width * channels],
        )
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

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> u8 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: u8) {
        self.data[(row * self.width + col) * self.channels + channel] = value;
    }

    /// Returns the pixel as RGB, replicating grayscale.
    pub fn rgb(&self, row: usize, col: usize) -> [u8; 3] {
        let base = (row * self.width + col) * self.channels;
        if self.channels == 1 {
            let v = self.data[base];
            [v, v, v]
        } else {
            [self.data[base], self.data[base + 1], self.data[base + 2]]
        }
    }

    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        Image {
            height: self.height,
            width: self.width,
            channels: 3,
            data,
        }
    }

    /// Decodes PNG or JPEG bytes. Luma images stay single-channel; everything
    /// else becomes RGB.
    pub fn decode(bytes: &[u8]) -> Result<Self, ImageError> {
        let dynamic =
            image::load_from_memory(bytes).map_err(|e| ImageError::Decode(e.to_string()))?;
        Ok(Self::from_dynamic(dynamic))
    }

    pub fn load(path: &Path) -> Result<Self, ImageError> {
        let bytes = std::fs::read(path)?;
        Self::decode(&bytes).map_err(|e| match e {
            ImageError::Decode(msg) => ImageError::Decode(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    fn from_dynamic(dynamic: image::DynamicImage) -> Self {
        use image::DynamicImage;
        let (width, height) = (dynamic.width() as usize, dynamic.height() as usize);
        match dynamic {
            DynamicImage::ImageLuma8(buf) => Image {
                height,
                width,
                channels: 1,
                data: buf.into_raw(),
            },
            DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA8(_)
            | DynamicImage::ImageLumaA16(_) => Image {
                height,
                width,
                channels: 1,
                data: dynamic.to_luma8().into_raw(),
            },
            other => Image {
                height,
                width,
                channels: 3,
                data: other.to_rgb8().into_raw(),
            },
        }
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, ImageError> {
        use image::ImageEncoder;
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        let mut out = Vec::new();
        image::codecs::png::PngEncoder::new(&mut out)
            .write_image(&self.data, self.width as u32, self.height as u32, color)
            .map_err(|e| ImageError::Encode(e.to_string()))?;
        Ok(out)
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        std::fs::write(path, self.encode_png()?)?;
        Ok(())
    }
}

/// A binary grid, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Option<Self> {
        (data.len() == height * width).then_some(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    /// Foreground is every pixel of the half-open box, clipped to the grid.
    pub fn from_box(height: usize, width: usize, bbox: &BBox) -> Self {
        Self::from_fn(height, width, |r, c| {
            let (r, c) = (r as f64, c as f64);
            r >= bbox.r0 && r + 1.0 <= bbox.r1 && c >= bbox.c0 && c + 1.0 <= bbox.c1
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn iter_foreground(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.width;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v)
            .map(move |(i, _)| (i / w, i % w))
    }

    /// Reads an 8-bit mask image; values above 127 are foreground.
    pub fn load_png(path: &Path) -> Result<Self, ImageError> {
        let img = Image::load(path)?;
        let data = (0..img.height() * img.width())
            .map(|i| img.data()[i * img.channels()] > 127)
            .collect();
        Ok(Self {
            height: img.height(),
            width: img.width(),
            data,
        })
    }

    pub fn to_image(&self) -> Image {
        let data = self.data.iter().map(|&v| if v { 255 } else { 0 }).collect();
        Image::new(self.height, self.width, 1, data).expect("mask geometry is valid")
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        self.to_image().save_png(path)
    }
}

/// Axis-aligned box `(r0, c0, r1, c1)`, half-open, in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", from = "[f64; 4]")]
pub struct BBox {
    pub r0: f64,
    pub c0: f64,
    pub r1: f64,
    pub c1: f64,
}

impl BBox {
    pub const fn new(r0: f64, c0: f64, r1: f64, c1: f64) -> Self {
        Self { r0, c0, r1, c1 }
    }

    pub fn height(&self) -> f64 {
        self.r1 - self.r0
    }

    pub fn width(&self) -> f64 {
        self.c1 - self.c0
    }

    pub fn area(&self) -> f64 {
        (self.r1 - self.r0).max(0.0) * (self.c1 - self.c0).max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        [self.r0, self.c0, self.r1, self.c1]
            .iter()
            .all(|v| v.is_finite())
            && self.r1 > self.r0
            && self.c1 > self.c0
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let h = (self.r1.min(other.r1) - self.r0.max(other.r0)).max(0.0);
        let w = (self.c1.min(other.c1) - self.c0.max(other.c0)).max(0.0);
        h * w
    }

    pub fn scaled(&self, factor: f64) -> BBox {
        BBox::new(
            self.r0 * factor,
            self.c0 * factor,
            self.r1 * factor,
            self.c1 * factor,
        )
    }

    pub fn clipped(&self, height: f64, width: f64) -> BBox {
        BBox::new(
            self.r0.clamp(0.0, height),
            self.c0.clamp(0.0, width),
            self.r1.clamp(0.0, height),
            self.c1.clamp(0.0, width),
        )
    }

    pub fn contains_pixel(&self, row: usize, col: usize) -> bool {
        let (r, c) = (row as f64, col as f64);
        r >= self.r0 && r + 1.0 <= self.r1 && c >= self.c0 && c + 1.0 <= self.c1
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.r0, b.c0, b.r1, b.c1]
    }
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_channel_count() {
        assert!(Image::new(4, 4, 2, vec![0; 32]).is_err());
        assert!(Image::new(4, 4, 3, vec![0; 47]).is_err());
    }

    #[test]
    fn png_round_trip_keeps_pixels() {
        let data: Vec<u8> = (0..16 * 20 * 3).map(|i| (i * 7 % 251) as u8).collect();
        let img = Image::new(16, 20, 3, data).unwrap();
        let back = Image::decode(&img.encode_png().unwrap()).unwrap();
        assert_eq!(img, back);

        let gray = Image::new(17, 16, 1, (0..17 * 16).map(|i| i as u8).collect()).unwrap();
        assert_eq!(Image::decode(&gray.encode_png().unwrap()).unwrap(), gray);
    }

    #[test]
    fn box_json_is_an_array() {
        let json = serde_json::to_string(&BBox::new(1.0, 2.0, 3.0, 4.0)).unwrap();
        assert_eq!(json, "[1.0,2.0,3.0,4.0]");
    }

    #[test]
    fn mask_from_box_is_half_open() {
        let m = Mask::from_box(4, 4, &BBox::new(1.0, 1.0, 3.0, 2.0));
        assert_eq!(m.area(), 2);
        assert!(m.get(1, 1) && m.get(2, 1));
    }
}
