//! Clipped raster primitives used by the overlay renderers.

use font8x8::UnicodeFonts;

use super::raster::{RasterImage, Rect, Rgb};

const PALETTE: [Rgb; 16] = [
    [255, 0, 0],
    [255, 157, 151],
    [255, 112, 31],
    [255, 178, 29],
    [207, 210, 49],
    [72, 249, 10],
    [146, 204, 23],
    [61, 219, 134],
    [26, 147, 52],
    [0, 212, 187],
    [44, 153, 168],
    [0, 194, 255],
    [52, 69, 147],
    [100, 115, 255],
    [132, 56, 255],
    [255, 149, 200],
];

/// Stable per-class color: FNV-1a of the class name into a 16-entry palette.
pub fn class_color(class_name: &str) -> Rgb {
    let mut h: u32 = 0x811c_9dc5;
    for b in class_name.bytes() {
        h ^= b as u32;
        h = h.wrapping_mul(0x0100_0193);
    }
    PALETTE[(h % PALETTE.len() as u32) as usize]
}

pub(crate) const GLYPH: u32 = 8;

pub(crate) struct Painter<'a> {
    img: &'a mut RasterImage,
    clip: Rect,
}

impl<'a> Painter<'a> {
    pub fn new(img: &'a mut RasterImage, clip: Rect) -> Self {
        let clip = Rect::new(
            clip.x.min(img.width()),
            clip.y.min(img.height()),
            clip.w.min(img.width().saturating_sub(clip.x)),
            clip.h.min(img.height().saturating_sub(clip.y)),
        );
        Self { img, clip }
    }

    pub fn clip(&self) -> Rect {
        self.clip
    }

    fn plot(&mut self, x: i64, y: i64, c: Rgb) {
        if x < 0 || y < 0 {
            return;
        }
        let (x, y) = (x as u32, y as u32);
        if self.clip.contains(x, y) {
            self.img.put(x, y, c);
        }
    }

    fn blend(&mut self, x: i64, y: i64, c: Rgb, alpha: f32) {
        if x < 0 || y < 0 {
            return;
        }
        let (x, y) = (x as u32, y as u32);
        if self.clip.contains(x, y) {
            let bg = self.img.get(x, y);
            let mix = |f: u8, b: u8| (alpha * f as f32 + (1.0 - alpha) * b as f32).round().clamp(0.0, 255.0) as u8;
            self.img.put(x, y, [mix(c[0], bg[0]), mix(c[1], bg[1]), mix(c[2], bg[2])]);
        }
    }

    /// Fills the integer span `[x0, x1) x [y0, y1)`.
    pub fn fill_rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb) {
        let cx0 = x0.max(self.clip.x as i64);
        let cy0 = y0.max(self.clip.y as i64);
        let cx1 = x1.min(self.clip.right() as i64);
        let cy1 = y1.min(self.clip.bottom() as i64);
        for y in cy0..cy1 {
            for x in cx0..cx1 {
                self.plot(x, y, c);
            }
        }
    }

    /// Rectangle outline drawn inward from the span edges.
    pub fn stroke_rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, thickness: i64, c: Rgb) {
        let t = thickness.min((x1 - x0 + 1) / 2).min((y1 - y0 + 1) / 2).max(1);
        self.fill_rect(x0, y0, x1, y0 + t, c);
        self.fill_rect(x0, y1 - t, x1, y1, c);
        self.fill_rect(x0, y0, x0 + t, y1, c);
        self.fill_rect(x1 - t, y0, x1, y1, c);
    }

    /// 8x8 bitmap text on a filled background; returns the drawn width.
    pub fn text(&mut self, x: i64, y: i64, s: &str, fg: Rgb, bg: Rgb) -> i64 {
        let width = s.chars().count() as i64 * GLYPH as i64 + 2;
        self.fill_rect(x, y, x + width, y + GLYPH as i64 + 2, bg);
        for (i, ch) in s.chars().enumerate() {
            let glyph = font8x8::BASIC_FONTS.get(ch).unwrap_or([0; 8]);
            let gx = x + 1 + i as i64 * GLYPH as i64;
            for (row, bits) in glyph.iter().enumerate() {
                for col in 0..8 {
                    if bits & (1 << col) != 0 {
                        self.plot(gx + col, y + 1 + row as i64, fg);
                    }
                }
            }
        }
        width
    }

    /// Even-odd polygon fill sampled at pixel centers, alpha-blended.
    pub fn fill_polygon(&mut self, pts: &[(f32, f32)], c: Rgb, alpha: f32) {
        if pts.len() < 3 {
            return;
        }
        let ymin = pts.iter().map(|p| p.1).fold(f32::INFINITY, f32::min).floor().max(self.clip.y as f32) as i64;
        let ymax = pts
            .iter()
            .map(|p| p.1)
            .fold(f32::NEG_INFINITY, f32::max)
            .ceil()
            .min(self.clip.bottom() as f32) as i64;
        let mut xs = Vec::new();
        for y in ymin..ymax {
            let sy = y as f32 + 0.5;
            xs.clear();
            for i in 0..pts.len() {
                let (ax, ay) = pts[i];
                let (bx, by) = pts[(i + 1) % pts.len()];
                if (ay <= sy && by > sy) || (by <= sy && ay > sy) {
                    xs.push(ax + (sy - ay) / (by - ay) * (bx - ax));
                }
            }
            xs.sort_by(f32::total_cmp);
            for pair in xs.chunks_exact(2) {
                // pixel centers strictly inside [pair[0], pair[1])
                let start = (pair[0] - 0.5).ceil() as i64;
                let end = (pair[1] - 0.5).ceil() as i64;
                for x in start.max(self.clip.x as i64)..end.min(self.clip.right() as i64) {
                    self.blend(x, y, c, alpha);
                }
            }
        }
    }

    /// Segment of the given thickness: pixels whose centers lie within
    /// `thickness / 2` of the segment.
    pub fn thick_line(&mut self, a: (f32, f32), b: (f32, f32), thickness: f32, c: Rgb) {
        let r = thickness / 2.0;
        let (x0, x1) = (a.0.min(b.0) - r, a.0.max(b.0) + r);
        let (y0, y1) = (a.1.min(b.1) - r, a.1.max(b.1) + r);
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len2 = dx * dx + dy * dy;
        for y in y0.floor() as i64..=y1.ceil() as i64 {
            for x in x0.floor() as i64..=x1.ceil() as i64 {
                let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
                let t = if len2 > 0.0 {
                    (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (qx, qy) = (a.0 + t * dx - px, a.1 + t * dy - py);
                if qx * qx + qy * qy <= r * r {
                    self.plot(x, y, c);
                }
            }
        }
    }

    pub fn fill_triangle(&mut self, p: [(f32, f32); 3], c: Rgb) {
        let edge = |a: (f32, f32), b: (f32, f32), q: (f32, f32)| (b.0 - a.0) * (q.1 - a.1) - (b.1 - a.1) * (q.0 - a.0);
        let xmin = p.iter().map(|v| v.0).fold(f32::INFINITY, f32::min).floor() as i64;
        let xmax = p.iter().map(|v| v.0).fold(f32::NEG_INFINITY, f32::max).ceil() as i64;
        let ymin = p.iter().map(|v| v.1).fold(f32::INFINITY, f32::min).floor() as i64;
        let ymax = p.iter().map(|v| v.1).fold(f32::NEG_INFINITY, f32::max).ceil() as i64;
        for y in ymin..=ymax {
            for x in xmin..=xmax {
                let q = (x as f32 + 0.5, y as f32 + 0.5);
                let e0 = edge(p[0], p[1], q);
                let e1 = edge(p[1], p[2], q);
                let e2 = edge(p[2], p[0], q);
                if (e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0) || (e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0) {
                    self.plot(x, y, c);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palette_is_stable() {
        assert_eq!(class_color("car"), class_color("car"));
        let colors: std::collections::HashSet<_> =
            ["car", "person", "road", "bus", "bicycle", "traffic_light"].iter().map(|c| class_color(c)).collect();
        assert!(colors.len() >= 3);
    }

    #[test]
    fn drawing_respects_clip() {
        let mut img = RasterImage::new(20, 20, [0; 3]).unwrap();
        let clip = Rect::new(5, 5, 10, 10);
        let mut p = Painter::new(&mut img, clip);
        p.fill_rect(-10, -10, 100, 100, [255; 3]);
        p.text(0, 0, "hello", [1; 3], [2; 3]);
        p.thick_line((0.0, 0.0), (19.0, 19.0), 3.0, [7; 3]);
        for y in 0..20 {
            for x in 0..20 {
                if !clip.contains(x, y) {
                    assert_eq!(img.get(x, y), [0; 3]);
                }
            }
        }
    }

    #[test]
    fn even_odd_fill_leaves_hole() {
        let mut img = RasterImage::new(30, 30, [0; 3]).unwrap();
        let mut p = Painter::new(&mut img, Rect::new(0, 0, 30, 30));
        // outer square then inner square traversed as one polygon via a bridge
        let pts = [
            (0.0, 0.0),
            (30.0, 0.0),
            (30.0, 30.0),
            (0.0, 30.0),
            (0.0, 0.0),
            (10.0, 10.0),
            (10.0, 20.0),
            (20.0, 20.0),
            (20.0, 10.0),
            (10.0, 10.0),
        ];
        p.fill_polygon(&pts, [200, 0, 0], 1.0);
        assert_eq!(img.get(2, 25), [200, 0, 0]);
        assert_eq!(img.get(15, 15), [0, 0, 0]);
    }
}
