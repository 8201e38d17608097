//! Overlay renderers. Each takes a plain composed image and returns a new
//! one tagged with its variant; drawing is clipped to the patch of the
//! viewpoint being annotated.

use serde::{Deserialize, Serialize};

use super::compose::{ComposedImage, Variant};
use super::detect::{Detection, MaskInstance};
use super::draw::{class_color, Painter, GLYPH};
use super::flow::AvgFlow;
use super::raster::{Rgb, Viewpoint};
use super::VisionError;

pub const MASK_ALPHA: f32 = 0.45;
const BOX_THICKNESS: i64 = 2;

fn require_plain(composed: &ComposedImage) -> Result<(), VisionError> {
    if composed.variant != Variant::None {
        return Err(VisionError::VariantNotNone(composed.variant));
    }
    Ok(())
}

fn label_fg(bg: Rgb) -> Rgb {
    let luma = 0.299 * bg[0] as f32 + 0.587 * bg[1] as f32 + 0.114 * bg[2] as f32;
    if luma > 140.0 {
        [0, 0, 0]
    } else {
        [255, 255, 255]
    }
}

pub fn render_bboxes(composed: &ComposedImage, dets: &[Detection]) -> Result<ComposedImage, VisionError> {
    require_plain(composed)?;
    for d in dets {
        composed.placement(d.viewpoint)?;
    }
    let mut out = composed.with_variant(Variant::Bbox);
    for d in dets {
        let placement = *composed.placement(d.viewpoint)?;
        let b = d.bbox.clamp_to(placement.source_width, placement.source_height);
        if !b.is_well_formed() {
            log::warn!("skipping {} box on {} that is empty after clamping", d.class_name, d.viewpoint);
            continue;
        }
        let (fx0, fy0) = placement.map_point(b.x1, b.y1);
        let (fx1, fy1) = placement.map_point(b.x2, b.y2);
        let (x0, y0) = (fx0.floor() as i64, fy0.floor() as i64);
        let (x1, y1) = ((fx1.ceil() as i64).max(x0 + 1), (fy1.ceil() as i64).max(y0 + 1));
        let color = class_color(&d.class_name);
        let mut painter = Painter::new(&mut out.raster, placement.rect);
        painter.stroke_rect(x0, y0, x1, y1, BOX_THICKNESS, color);

        let label = format!("{} {:.2}", d.class_name, d.confidence);
        let label_h = GLYPH as i64 + 2;
        let clip = painter.clip();
        let ly = if y0 - label_h >= clip.y as i64 { y0 - label_h } else { y0 };
        painter.text(x0, ly, &label, label_fg(color), color);
    }
    Ok(out)
}

/// Returns the overlaid image and one warning per rejected mask.
pub fn render_masks(
    composed: &ComposedImage,
    masks: &[MaskInstance],
) -> Result<(ComposedImage, Vec<String>), VisionError> {
    require_plain(composed)?;
    for m in masks {
        composed.placement(m.viewpoint)?;
    }
    let mut out = composed.with_variant(Variant::Mask);
    let mut warnings = Vec::new();
    for (i, m) in masks.iter().enumerate() {
        if m.polygon.len() < 3 {
            warnings.push(format!(
                "mask {i} ({} on {}): polygon has {} vertices, need at least 3",
                m.class_name,
                m.viewpoint,
                m.polygon.len()
            ));
            continue;
        }
        let placement = *composed.placement(m.viewpoint)?;
        let (sw, sh) = (placement.source_width as f32, placement.source_height as f32);
        let pts: Vec<(f32, f32)> = m
            .polygon
            .iter()
            .map(|[x, y]| placement.map_point(x.clamp(0.0, sw), y.clamp(0.0, sh)))
            .collect();
        Painter::new(&mut out.raster, placement.rect).fill_polygon(&pts, class_color(&m.class_name), MASK_ALPHA);
    }
    Ok((out, warnings))
}

/// Geometry of averaged-flow arrows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArrowStyle {
    /// Canvas pixels of arrow per pixel/frame of flow.
    pub scale: f32,
    pub min_length: f32,
    /// Upper bound as a fraction of the patch width.
    pub max_length_frac: f32,
    pub shaft_width: f32,
    /// Flows below this magnitude draw nothing.
    pub min_magnitude: f32,
    pub color: Rgb,
}

impl Default for ArrowStyle {
    fn default() -> Self {
        Self {
            scale: 20.0,
            min_length: 10.0,
            max_length_frac: 0.45,
            shaft_width: 3.0,
            min_magnitude: 0.5,
            color: [255, 0, 0],
        }
    }
}

pub fn render_flow_arrows(
    composed: &ComposedImage,
    avgs: &[AvgFlow],
    style: &ArrowStyle,
) -> Result<ComposedImage, VisionError> {
    require_plain(composed)?;
    for a in avgs {
        if a.viewpoint == Viewpoint::Bottom {
            return Err(VisionError::BottomFlow);
        }
        composed.placement(a.viewpoint)?;
    }
    let mut out = composed.with_variant(Variant::Flow);
    for a in avgs {
        let mag = a.magnitude();
        if a.sample_count == 0 || !(mag >= style.min_magnitude) {
            continue;
        }
        let placement = *composed.placement(a.viewpoint)?;
        let max_len = (style.max_length_frac * placement.rect.w as f32).max(style.min_length);
        let len = (mag * style.scale).clamp(style.min_length, max_len);
        let dir = (a.mean_dx / mag, a.mean_dy / mag);
        let start = placement.rect.center();
        let tip = (start.0 + dir.0 * len, start.1 + dir.1 * len);
        let head_len = (len * 0.35).clamp(6.0, 18.0);
        let half_w = head_len * 0.6;
        let base = (tip.0 - dir.0 * head_len, tip.1 - dir.1 * head_len);
        let normal = (-dir.1, dir.0);

        let mut painter = Painter::new(&mut out.raster, placement.rect);
        painter.thick_line(start, base, style.shaft_width, style.color);
        painter.fill_triangle(
            [
                tip,
                (base.0 + normal.0 * half_w, base.1 + normal.1 * half_w),
                (base.0 - normal.0 * half_w, base.1 - normal.1 * half_w),
            ],
            style.color,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vision::{compose_multiview, CanvasConfig, MultiviewFrame, RasterImage};

    fn black_composed(w: u32, h: u32) -> ComposedImage {
        let frame = MultiviewFrame::new(Viewpoint::ALL.map(|vp| (vp, RasterImage::new(w, h, [0, 0, 0]).unwrap())));
        compose_multiview(&frame, &CanvasConfig::default()).unwrap()
    }

    fn changed_pixels(a: &RasterImage, b: &RasterImage) -> Vec<(u32, u32)> {
        let mut out = Vec::new();
        for y in 0..a.height() {
            for x in 0..a.width() {
                if a.get(x, y) != b.get(x, y) {
                    out.push((x, y));
                }
            }
        }
        out
    }

    fn det(vp: Viewpoint, b: [f32; 4]) -> Detection {
        Detection {
            viewpoint: vp,
            class_name: "car".into(),
            confidence: 0.87,
            bbox: b.into(),
        }
    }

    #[test]
    fn empty_overlays_only_change_variant() {
        let base = black_composed(320, 180);
        let b = render_bboxes(&base, &[]).unwrap();
        assert_eq!(b.variant, Variant::Bbox);
        assert_eq!(b.raster, base.raster);
        let (m, w) = render_masks(&base, &[]).unwrap();
        assert_eq!(m.variant, Variant::Mask);
        assert_eq!(m.raster, base.raster);
        assert!(w.is_empty());
        let f = render_flow_arrows(&base, &[], &ArrowStyle::default()).unwrap();
        assert_eq!(f.variant, Variant::Flow);
        assert_eq!(f.raster, base.raster);
    }

    #[test]
    fn single_front_box_stays_in_front_patch() {
        let base = black_composed(320, 180);
        let out = render_bboxes(&base, &[det(Viewpoint::Front, [40.0, 60.0, 120.0, 140.0])]).unwrap();
        let changed = changed_pixels(&base.raster, &out.raster);
        assert!(!changed.is_empty());
        let front = base.layout[&Viewpoint::Front].rect;
        assert!(changed.iter().all(|&(x, y)| front.contains(x, y)));
        // 320x180 maps onto 1200x675 at scale 3.75: box corners at (150,225) and (450,525)
        let color = class_color("car");
        assert_eq!(out.raster.get(150, 300), color);
        assert_eq!(out.raster.get(449, 300), color);
        assert_eq!(out.raster.get(300, 224 + 1), color);
        assert_eq!(out.raster.get(300, 400), [0, 0, 0]);
        // label background sits directly above the box
        assert_eq!(out.raster.get(150, 220), color);
        // input untouched
        assert_eq!(base.variant, Variant::None);
    }

    #[test]
    fn boxes_outside_source_are_clamped_to_patch() {
        let base = black_composed(320, 240);
        let out = render_bboxes(&base, &[det(Viewpoint::Left, [-50.0, -20.0, 500.0, 100.0])]).unwrap();
        let left = base.layout[&Viewpoint::Left].rect;
        let changed = changed_pixels(&base.raster, &out.raster);
        assert!(!changed.is_empty());
        assert!(changed.iter().all(|&(x, y)| left.contains(x, y)));
    }

    #[test]
    fn overlay_requires_plain_input() {
        let base = black_composed(320, 180);
        let once = render_bboxes(&base, &[]).unwrap();
        assert!(matches!(render_bboxes(&once, &[]), Err(VisionError::VariantNotNone(Variant::Bbox))));
    }

    fn red_class() -> String {
        (0..)
            .map(|i| format!("class{i}"))
            .find(|c| class_color(c) == [255, 0, 0])
            .unwrap()
    }

    #[test]
    fn full_patch_mask_blends_at_alpha() {
        let base = black_composed(320, 180);
        let mask = MaskInstance {
            viewpoint: Viewpoint::Front,
            class_name: red_class(),
            confidence: 0.9,
            polygon: vec![[0.0, 0.0], [320.0, 0.0], [320.0, 180.0], [0.0, 180.0]],
        };
        let (out, _) = render_masks(&base, &[mask]).unwrap();
        let front = base.layout[&Viewpoint::Front].rect;
        for (x, y) in [(0, 0), (600, 300), (1199, 674)] {
            let p = out.raster.get(x, y);
            assert!((p[0] as i32 - 115).abs() <= 1 && p[1] == 0 && p[2] == 0, "{p:?}");
        }
        let changed = changed_pixels(&base.raster, &out.raster);
        assert_eq!(changed.len() as u32, front.w * front.h);
    }

    #[test]
    fn later_masks_paint_over_earlier() {
        let base = black_composed(320, 180);
        let sq = |class: &str| MaskInstance {
            viewpoint: Viewpoint::Front,
            class_name: class.into(),
            confidence: 0.9,
            polygon: vec![[10.0, 10.0], [100.0, 10.0], [100.0, 100.0], [10.0, 100.0]],
        };
        let (a, _) = render_masks(&base, &[sq("car"), sq("person")]).unwrap();
        let (b, _) = render_masks(&base, &[sq("person"), sq("car")]).unwrap();
        assert_ne!(a.raster, b.raster);
        let (again, _) = render_masks(&base, &[sq("car"), sq("person")]).unwrap();
        assert_eq!(a.raster, again.raster);
    }

    #[test]
    fn short_polygon_is_rejected_with_warning() {
        let base = black_composed(320, 180);
        let bad = MaskInstance {
            viewpoint: Viewpoint::Right,
            class_name: "car".into(),
            confidence: 0.9,
            polygon: vec![[0.0, 0.0], [5.0, 5.0]],
        };
        let (out, warnings) = render_masks(&base, &[bad]).unwrap();
        assert_eq!(warnings.len(), 1);
        assert_eq!(out.raster, base.raster);
    }

    fn avg(vp: Viewpoint, dx: f32, dy: f32, n: usize) -> AvgFlow {
        AvgFlow {
            viewpoint: vp,
            mean_dx: dx,
            mean_dy: dy,
            sample_count: n,
        }
    }

    #[test]
    fn zero_flow_draws_nothing() {
        let base = black_composed(320, 180);
        let out = render_flow_arrows(&base, &[avg(Viewpoint::Front, 0.0, 0.0, 0)], &ArrowStyle::default()).unwrap();
        assert_eq!(out.raster, base.raster);
        let out = render_flow_arrows(&base, &[avg(Viewpoint::Left, 0.3, 0.0, 10)], &ArrowStyle::default()).unwrap();
        assert_eq!(out.raster, base.raster);
    }

    #[test]
    fn horizontal_arrow_from_front_center() {
        let base = black_composed(320, 180);
        let out = render_flow_arrows(&base, &[avg(Viewpoint::Front, 3.0, 0.0, 12)], &ArrowStyle::default()).unwrap();
        let front = base.layout[&Viewpoint::Front].rect;
        let (cx, cy) = front.center();
        let (cx, cy) = (cx as u32, cy as u32);
        // 3 px/frame at scale 20 gives a 60 px arrow pointing right
        for x in cx..cx + 58 {
            assert_eq!(out.raster.get(x, cy), [255, 0, 0], "x={x}");
        }
        assert_eq!(out.raster.get(cx + 62, cy), [0, 0, 0]);
        assert_eq!(out.raster.get(cx - 3, cy), [0, 0, 0]);
        let changed = changed_pixels(&base.raster, &out.raster);
        assert!(changed.iter().all(|&(x, y)| front.contains(x, y) && x + 2 >= cx));
    }

    #[test]
    fn arrow_length_is_clamped() {
        let base = black_composed(320, 180);
        let out = render_flow_arrows(&base, &[avg(Viewpoint::Right, 100.0, 0.0, 1)], &ArrowStyle::default()).unwrap();
        let right = base.layout[&Viewpoint::Right].rect;
        let changed = changed_pixels(&base.raster, &out.raster);
        let max_x = changed.iter().map(|p| p.0).max().unwrap();
        let (cx, _) = right.center();
        assert!((max_x as f32 - cx) <= 0.45 * 400.0 + 1.0);
        assert!(changed.iter().all(|&(x, y)| right.contains(x, y)));
    }

    #[test]
    fn bottom_flow_is_an_error() {
        let base = black_composed(320, 180);
        assert!(matches!(
            render_flow_arrows(&base, &[avg(Viewpoint::Bottom, 1.0, 1.0, 3)], &ArrowStyle::default()),
            Err(VisionError::BottomFlow)
        ));
    }

    #[test]
    fn absent_viewpoint_is_an_error() {
        let mut base = black_composed(320, 180);
        base.layout.remove(&Viewpoint::Left);
        assert!(matches!(
            render_bboxes(&base, &[det(Viewpoint::Left, [0.0, 0.0, 5.0, 5.0])]),
            Err(VisionError::AbsentViewpoint(Viewpoint::Left))
        ));
    }
}
