use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::VisionError;

pub type Rgb = [u8; 3];

/// Row-major RGB8 image.
#[derive(Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl fmt::Debug for RasterImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RasterImage")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl RasterImage {
    pub fn new(width: u32, height: u32, fill: Rgb) -> Result<Self, VisionError> {
        if width == 0 || height == 0 {
            return Err(VisionError::EmptyImage { width, height });
        }
        let mut pixels = Vec::with_capacity(width as usize * height as usize * 3);
        for _ in 0..(width as usize * height as usize) {
            pixels.extend_from_slice(&fill);
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn from_raw(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, VisionError> {
        if width == 0 || height == 0 {
            return Err(VisionError::EmptyImage { width, height });
        }
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected {
            return Err(VisionError::BufferSize {
                expected,
                actual: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * 3
    }

    pub fn get(&self, x: u32, y: u32) -> Rgb {
        let o = self.offset(x, y);
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    pub fn put(&mut self, x: u32, y: u32, c: Rgb) {
        let o = self.offset(x, y);
        self.pixels[o..o + 3].copy_from_slice(&c);
    }

    /// Luma (0.299 R + 0.587 G + 0.114 B) on the 0..255 scale.
    pub fn to_gray(&self) -> Vec<f32> {
        self.pixels
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32)
            .collect()
    }

    /// SHA-256 over dimensions and pixel bytes.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.width.to_le_bytes());
        h.update(self.height.to_le_bytes());
        h.update(&self.pixels);
        hex(&h.finalize())
    }

    pub fn to_rgb_image(&self) -> RgbImage {
        RgbImage::from_raw(self.width, self.height, self.pixels.clone())
            .expect("buffer length checked at construction")
    }

    pub fn from_rgb_image(img: RgbImage) -> Result<Self, VisionError> {
        let (w, h) = img.dimensions();
        Self::from_raw(w, h, img.into_raw())
    }

    pub fn load_png(path: &Path) -> Result<Self, VisionError> {
        let img = image::open(path).map_err(|source| VisionError::Image {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_rgb_image(img.to_rgb8())
    }

    pub fn save_png(&self, path: &Path) -> Result<(), VisionError> {
        self.to_rgb_image()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| VisionError::Image {
                path: path.display().to_string(),
                source,
            })
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, VisionError> {
        let mut out = std::io::Cursor::new(Vec::new());
        self.to_rgb_image()
            .write_to(&mut out, image::ImageFormat::Png)
            .map_err(|source| VisionError::Image {
                path: "<memory>".into(),
                source,
            })?;
        Ok(out.into_inner())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Viewpoint {
    Front,
    Left,
    Bottom,
    Right,
}

impl Viewpoint {
    pub const ALL: [Viewpoint; 4] = [
        Viewpoint::Front,
        Viewpoint::Left,
        Viewpoint::Bottom,
        Viewpoint::Right,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Viewpoint::Front => "front",
            Viewpoint::Left => "left",
            Viewpoint::Bottom => "bottom",
            Viewpoint::Right => "right",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Viewpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

// Deserialized through a plain string so map keys show up in error paths.
impl<'de> Deserialize<'de> for Viewpoint {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl FromStr for Viewpoint {
    type Err = VisionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Viewpoint::ALL
            .into_iter()
            .find(|v| v.as_str() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| VisionError::UnknownViewpoint(s.to_string()))
    }
}

/// Integer pixel rectangle, half-open: `[x, x + w) x [y, y + h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Rect {
    pub fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    pub fn right(&self) -> u32 {
        self.x + self.w
    }

    pub fn bottom(&self) -> u32 {
        self.y + self.h
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x && x < self.right() && y >= self.y && y < self.bottom()
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.x < other.right() && other.x < self.right() && self.y < other.bottom() && other.y < self.bottom()
    }

    pub fn center(&self) -> (f32, f32) {
        (self.x as f32 + self.w as f32 / 2.0, self.y as f32 + self.h as f32 / 2.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks() {
        assert!(RasterImage::new(0, 3, [0; 3]).is_err());
        assert!(RasterImage::from_raw(2, 2, vec![0; 11]).is_err());
        let mut img = RasterImage::new(3, 2, [1, 2, 3]).unwrap();
        assert_eq!(img.pixels().len(), 18);
        img.put(2, 1, [9, 9, 9]);
        assert_eq!(img.get(2, 1), [9, 9, 9]);
        assert_eq!(img.get(0, 0), [1, 2, 3]);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let mut img = RasterImage::new(5, 4, [10, 20, 30]).unwrap();
        img.put(1, 1, [255, 0, 0]);
        img.save_png(&path).unwrap();
        let back = RasterImage::load_png(&path).unwrap();
        assert_eq!(back, img);
        assert_eq!(back.content_hash(), img.content_hash());
    }

    #[test]
    fn gray_uses_luma_weights() {
        let img = RasterImage::new(1, 1, [100, 200, 50]).unwrap();
        let g = img.to_gray()[0];
        assert!((g - (29.9 + 117.4 + 5.7)).abs() < 1e-3);
    }

    #[test]
    fn viewpoint_parse() {
        assert_eq!("Right".parse::<Viewpoint>().unwrap(), Viewpoint::Right);
        assert!("top".parse::<Viewpoint>().is_err());
    }
}
