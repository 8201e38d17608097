use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use image::imageops::{self, FilterType};
use serde::{Deserialize, Serialize};

use super::raster::{RasterImage, Rect, Viewpoint};
use super::VisionError;

/// Which visual-knowledge overlay a composed image carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    None,
    Bbox,
    Mask,
    Flow,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::None, Variant::Bbox, Variant::Mask, Variant::Flow];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::None => "none",
            Variant::Bbox => "bbox",
            Variant::Mask => "mask",
            Variant::Flow => "flow",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(Variant::None),
            "bbox" | "bbx" => Ok(Variant::Bbox),
            "mask" => Ok(Variant::Mask),
            "flow" => Ok(Variant::Flow),
            other => Err(format!("unknown variant {other:?}; expected none, bbox, mask or flow")),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct MultiviewFrame {
    pub images: BTreeMap<Viewpoint, RasterImage>,
    pub captured_at: Option<DateTime<Utc>>,
}

impl MultiviewFrame {
    pub fn new(images: impl IntoIterator<Item = (Viewpoint, RasterImage)>) -> Self {
        Self {
            images: images.into_iter().collect(),
            captured_at: None,
        }
    }

    pub fn get(&self, vp: Viewpoint) -> Result<&RasterImage, VisionError> {
        self.images.get(&vp).ok_or(VisionError::MissingViewpoint(vp))
    }
}

/// Canvas with a full-width top patch (front) over a three-across row
/// (left, bottom, right).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanvasConfig {
    pub width: u32,
    pub top_height: u32,
    pub bottom_height: u32,
}

impl Default for CanvasConfig {
    fn default() -> Self {
        Self {
            width: 1200,
            top_height: 675,
            bottom_height: 300,
        }
    }
}

impl CanvasConfig {
    pub fn height(&self) -> u32 {
        self.top_height + self.bottom_height
    }

    pub fn patch_rect(&self, vp: Viewpoint) -> Rect {
        let third = self.width / 3;
        let y = self.top_height;
        let h = self.bottom_height;
        match vp {
            Viewpoint::Front => Rect::new(0, 0, self.width, self.top_height),
            Viewpoint::Left => Rect::new(0, y, third, h),
            Viewpoint::Bottom => Rect::new(third, y, third, h),
            Viewpoint::Right => Rect::new(2 * third, y, self.width - 2 * third, h),
        }
    }

    fn validate(&self) -> Result<(), VisionError> {
        if self.width < 3 || self.top_height == 0 || self.bottom_height == 0 {
            return Err(VisionError::InvalidCanvas(format!(
                "{}x{}+{} leaves an empty patch",
                self.width, self.top_height, self.bottom_height
            )));
        }
        Ok(())
    }
}

/// Where a viewpoint image sits on the canvas. `content` is the letterboxed
/// area actually covered by the resized source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchPlacement {
    pub rect: Rect,
    pub content: Rect,
    pub source_width: u32,
    pub source_height: u32,
}

impl PatchPlacement {
    fn fit(rect: Rect, source_width: u32, source_height: u32) -> Self {
        let scale = (rect.w as f64 / source_width as f64).min(rect.h as f64 / source_height as f64);
        let cw = ((source_width as f64 * scale).round() as u32).clamp(1, rect.w);
        let ch = ((source_height as f64 * scale).round() as u32).clamp(1, rect.h);
        let content = Rect::new(rect.x + (rect.w - cw) / 2, rect.y + (rect.h - ch) / 2, cw, ch);
        Self {
            rect,
            content,
            source_width,
            source_height,
        }
    }

    pub fn scale(&self) -> (f32, f32) {
        (
            self.content.w as f32 / self.source_width as f32,
            self.content.h as f32 / self.source_height as f32,
        )
    }

    /// Maps a source-image coordinate onto the canvas.
    pub fn map_point(&self, x: f32, y: f32) -> (f32, f32) {
        let (sx, sy) = self.scale();
        (self.content.x as f32 + x * sx, self.content.y as f32 + y * sy)
    }
}

#[derive(Debug, Clone)]
pub struct ComposedImage {
    pub raster: RasterImage,
    pub layout: BTreeMap<Viewpoint, PatchPlacement>,
    pub variant: Variant,
}

impl ComposedImage {
    pub fn placement(&self, vp: Viewpoint) -> Result<&PatchPlacement, VisionError> {
        self.layout.get(&vp).ok_or(VisionError::AbsentViewpoint(vp))
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        Self {
            raster: self.raster.clone(),
            layout: self.layout.clone(),
            variant,
        }
    }
}

pub fn compose_multiview(frame: &MultiviewFrame, canvas: &CanvasConfig) -> Result<ComposedImage, VisionError> {
    canvas.validate()?;
    for vp in Viewpoint::ALL {
        frame.get(vp)?;
    }
    let mut out = image::RgbImage::new(canvas.width, canvas.height());
    let mut layout = BTreeMap::new();
    for vp in Viewpoint::ALL {
        let src = frame.get(vp)?;
        let placement = PatchPlacement::fit(canvas.patch_rect(vp), src.width(), src.height());
        let c = placement.content;
        let resized = if (c.w, c.h) == (src.width(), src.height()) {
            src.to_rgb_image()
        } else {
            imageops::resize(&src.to_rgb_image(), c.w, c.h, FilterType::Triangle)
        };
        imageops::replace(&mut out, &resized, c.x as i64, c.y as i64);
        layout.insert(vp, placement);
    }
    Ok(ComposedImage {
        raster: RasterImage::from_rgb_image(out)?,
        layout,
        variant: Variant::None,
    })
}
