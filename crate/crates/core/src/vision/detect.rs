use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::raster::Viewpoint;
use super::VisionError;

/// Axis-aligned box in source-image pixels, serialized as `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f32; 4]", into = "[f32; 4]")]
pub struct BoxPx {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl From<[f32; 4]> for BoxPx {
    fn from(v: [f32; 4]) -> Self {
        Self {
            x1: v[0],
            y1: v[1],
            x2: v[2],
            y2: v[3],
        }
    }
}

impl From<BoxPx> for [f32; 4] {
    fn from(b: BoxPx) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BoxPx {
    pub fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn is_well_formed(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite()) && self.x1 < self.x2 && self.y1 < self.y2
    }

    pub fn area(&self) -> f32 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn clamp_to(&self, width: u32, height: u32) -> BoxPx {
        let (w, h) = (width as f32, height as f32);
        BoxPx::new(
            self.x1.clamp(0.0, w),
            self.y1.clamp(0.0, h),
            self.x2.clamp(0.0, w),
            self.y2.clamp(0.0, h),
        )
    }

    pub fn translate(&self, dx: f32, dy: f32) -> BoxPx {
        BoxPx::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }
}

pub fn iou(a: &BoxPx, b: &BoxPx) -> f32 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub viewpoint: Viewpoint,
    #[serde(rename = "class")]
    pub class_name: String,
    pub confidence: f32,
    #[serde(rename = "box")]
    pub bbox: BoxPx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskInstance {
    pub viewpoint: Viewpoint,
    #[serde(rename = "class")]
    pub class_name: String,
    pub confidence: f32,
    pub polygon: Vec<[f32; 2]>,
}

impl MaskInstance {
    pub fn bounds(&self) -> BoxPx {
        let mut b = BoxPx::new(f32::INFINITY, f32::INFINITY, f32::NEG_INFINITY, f32::NEG_INFINITY);
        for [x, y] in &self.polygon {
            b.x1 = b.x1.min(*x);
            b.y1 = b.y1.min(*y);
            b.x2 = b.x2.max(*x);
            b.y2 = b.y2.max(*y);
        }
        b
    }
}

/// Confidence and deduplication thresholds applied before anything is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IngestionFilter {
    pub conf_front: f32,
    pub conf_other: f32,
    pub dedup_iou: f32,
}

impl Default for IngestionFilter {
    fn default() -> Self {
        Self {
            conf_front: 0.5,
            conf_other: 0.25,
            dedup_iou: 0.7,
        }
    }
}

impl IngestionFilter {
    pub fn validate(&self) -> Result<(), VisionError> {
        for (name, v) in [
            ("conf_front", self.conf_front),
            ("conf_other", self.conf_other),
            ("dedup_iou", self.dedup_iou),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(VisionError::InvalidFilter(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn threshold(&self, vp: Viewpoint) -> f32 {
        if vp == Viewpoint::Front {
            self.conf_front
        } else {
            self.conf_other
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestOutcome<T> {
    pub kept: Vec<T>,
    pub warnings: Vec<String>,
}

trait Scored {
    fn viewpoint(&self) -> Viewpoint;
    fn class_name(&self) -> &str;
    fn confidence(&self) -> f32;
    fn nms_box(&self) -> BoxPx;
}

impl Scored for Detection {
    fn viewpoint(&self) -> Viewpoint {
        self.viewpoint
    }
    fn class_name(&self) -> &str {
        &self.class_name
    }
    fn confidence(&self) -> f32 {
        self.confidence
    }
    fn nms_box(&self) -> BoxPx {
        self.bbox
    }
}

impl Scored for MaskInstance {
    fn viewpoint(&self) -> Viewpoint {
        self.viewpoint
    }
    fn class_name(&self) -> &str {
        &self.class_name
    }
    fn confidence(&self) -> f32 {
        self.confidence
    }
    fn nms_box(&self) -> BoxPx {
        self.bounds()
    }
}

fn rank<T: Scored>(a: &T, b: &T) -> Ordering {
    let (ba, bb) = (a.nms_box(), b.nms_box());
    b.confidence()
        .total_cmp(&a.confidence())
        .then(ba.x1.total_cmp(&bb.x1))
        .then(ba.y1.total_cmp(&bb.y1))
}

/// Greedy NMS per (viewpoint, class) after the confidence cut.
fn filter_and_suppress<T: Scored + Clone>(items: Vec<T>, filter: &IngestionFilter) -> Vec<T> {
    let mut groups: BTreeMap<(Viewpoint, String), Vec<T>> = BTreeMap::new();
    for item in items {
        if item.confidence() < filter.threshold(item.viewpoint()) {
            continue;
        }
        groups
            .entry((item.viewpoint(), item.class_name().to_string()))
            .or_default()
            .push(item);
    }
    let mut kept = Vec::new();
    for (_, mut group) in groups {
        group.sort_by(rank);
        let mut survivors: Vec<T> = Vec::with_capacity(group.len());
        for cand in group {
            let b = cand.nms_box();
            if survivors.iter().all(|k| iou(&k.nms_box(), &b) <= filter.dedup_iou) {
                survivors.push(cand);
            }
        }
        kept.extend(survivors);
    }
    kept
}

pub fn ingest_detections(raw: &[Detection], filter: &IngestionFilter) -> IngestOutcome<Detection> {
    let mut warnings = Vec::new();
    let mut valid = Vec::with_capacity(raw.len());
    for (i, d) in raw.iter().enumerate() {
        if !d.bbox.is_well_formed() {
            warnings.push(format!(
                "detection {i} ({} on {}): malformed box {:?}",
                d.class_name, d.viewpoint, <[f32; 4]>::from(d.bbox)
            ));
        } else if !(0.0..=1.0).contains(&d.confidence) {
            warnings.push(format!(
                "detection {i} ({} on {}): confidence {} outside [0, 1]",
                d.class_name, d.viewpoint, d.confidence
            ));
        } else {
            valid.push(d.clone());
        }
    }
    IngestOutcome {
        kept: filter_and_suppress(valid, filter),
        warnings,
    }
}

pub fn ingest_masks(raw: &[MaskInstance], filter: &IngestionFilter) -> IngestOutcome<MaskInstance> {
    let mut warnings = Vec::new();
    let mut valid = Vec::with_capacity(raw.len());
    for (i, m) in raw.iter().enumerate() {
        if m.polygon.len() < 3 {
            warnings.push(format!(
                "mask {i} ({} on {}): polygon has {} vertices, need at least 3",
                m.class_name,
                m.viewpoint,
                m.polygon.len()
            ));
        } else if m.polygon.iter().flatten().any(|v| !v.is_finite()) {
            warnings.push(format!("mask {i} ({} on {}): non-finite vertex", m.class_name, m.viewpoint));
        } else if !(0.0..=1.0).contains(&m.confidence) {
            warnings.push(format!(
                "mask {i} ({} on {}): confidence {} outside [0, 1]",
                m.class_name, m.viewpoint, m.confidence
            ));
        } else {
            valid.push(m.clone());
        }
    }
    IngestOutcome {
        kept: filter_and_suppress(valid, filter),
        warnings,
    }
}
