//! Sparse single-level Lucas-Kanade flow on a regular grid, and per-view
//! averaging of the resulting vectors.

use serde::{Deserialize, Serialize};

use super::raster::{RasterImage, Viewpoint};
use super::VisionError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowParams {
    /// Window is `(2 r + 1)^2` pixels.
    pub window_radius: u32,
    pub grid_stride: u32,
    /// Gate on the smallest eigenvalue of the structure tensor divided by
    /// the window pixel count, intensities on the 0..255 scale.
    pub min_eigenvalue: f64,
    /// Newton refinements of the 2x2 solve; 1 means the plain one-shot solve.
    pub max_iterations: u32,
    pub convergence_eps: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            window_radius: 7,
            grid_stride: 16,
            min_eigenvalue: 1e-3,
            max_iterations: 20,
            convergence_eps: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowVector {
    pub x: f32,
    pub y: f32,
    pub dx: f32,
    pub dy: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowField {
    pub viewpoint: Viewpoint,
    pub vectors: Vec<FlowVector>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AvgFlow {
    pub viewpoint: Viewpoint,
    pub mean_dx: f32,
    pub mean_dy: f32,
    pub sample_count: usize,
}

impl AvgFlow {
    pub fn magnitude(&self) -> f32 {
        self.mean_dx.hypot(self.mean_dy)
    }
}

struct Gray {
    w: usize,
    h: usize,
    data: Vec<f32>,
}

impl Gray {
    fn at(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.w + x]
    }

    /// Bilinear sample with edge clamping.
    fn sample(&self, x: f64, y: f64) -> f64 {
        let x = x.clamp(0.0, (self.w - 1) as f64);
        let y = y.clamp(0.0, (self.h - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.w - 1);
        let y1 = (y0 + 1).min(self.h - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let top = self.at(x0, y0) as f64 * (1.0 - fx) + self.at(x1, y0) as f64 * fx;
        let bot = self.at(x0, y1) as f64 * (1.0 - fx) + self.at(x1, y1) as f64 * fx;
        top * (1.0 - fy) + bot * fy
    }
}

pub fn lucas_kanade_flow(
    viewpoint: Viewpoint,
    prev: &RasterImage,
    curr: &RasterImage,
    params: &FlowParams,
) -> Result<FlowField, VisionError> {
    if (prev.width(), prev.height()) != (curr.width(), curr.height()) {
        return Err(VisionError::DimensionMismatch(
            prev.width(),
            prev.height(),
            curr.width(),
            curr.height(),
        ));
    }
    let r = params.window_radius as usize;
    let (w, h) = (prev.width() as usize, prev.height() as usize);
    // window plus one pixel each side for central differences
    let need = 2 * r + 3;
    if w < need || h < need {
        return Err(VisionError::ImageTooSmall {
            width: prev.width(),
            height: prev.height(),
            size: need as u32,
        });
    }
    let p = Gray {
        w,
        h,
        data: prev.to_gray(),
    };
    let c = Gray {
        w,
        h,
        data: curr.to_gray(),
    };

    let stride = params.grid_stride.max(1) as usize;
    let first = (r + 1).max(stride / 2);
    let (last_x, last_y) = (w - r - 2, h - r - 2);
    let n_win = ((2 * r + 1) * (2 * r + 1)) as f64;
    let lost_track = (2 * r + 1) as f64;

    let mut vectors = Vec::new();
    let mut win_ix = Vec::with_capacity(n_win as usize);
    let mut win_iy = Vec::with_capacity(n_win as usize);
    for py in (first..=last_y).step_by(stride) {
        for px in (first..=last_x).step_by(stride) {
            win_ix.clear();
            win_iy.clear();
            let (mut gxx, mut gxy, mut gyy) = (0.0f64, 0.0f64, 0.0f64);
            for y in py - r..=py + r {
                for x in px - r..=px + r {
                    let ix = (p.at(x + 1, y) as f64 - p.at(x - 1, y) as f64) * 0.5;
                    let iy = (p.at(x, y + 1) as f64 - p.at(x, y - 1) as f64) * 0.5;
                    gxx += ix * ix;
                    gxy += ix * iy;
                    gyy += iy * iy;
                    win_ix.push(ix);
                    win_iy.push(iy);
                }
            }
            let (a, b, d) = (gxx / n_win, gxy / n_win, gyy / n_win);
            let min_eig = (a + d) / 2.0 - (((a - d) / 2.0).powi(2) + b * b).sqrt();
            if !(min_eig >= params.min_eigenvalue) {
                continue;
            }
            let det = gxx * gyy - gxy * gxy;
            let (mut vx, mut vy) = (0.0f64, 0.0f64);
            for _ in 0..params.max_iterations.max(1) {
                let (mut bx, mut by) = (0.0f64, 0.0f64);
                let mut k = 0;
                for y in py - r..=py + r {
                    for x in px - r..=px + r {
                        let it = c.sample(x as f64 + vx, y as f64 + vy) - p.at(x, y) as f64;
                        bx += win_ix[k] * it;
                        by += win_iy[k] * it;
                        k += 1;
                    }
                }
                // G v = -b
                let ux = -(gyy * bx - gxy * by) / det;
                let uy = -(gxx * by - gxy * bx) / det;
                vx += ux;
                vy += uy;
                if ux.hypot(uy) < params.convergence_eps {
                    break;
                }
            }
            if !vx.is_finite() || !vy.is_finite() || vx.hypot(vy) > lost_track {
                continue;
            }
            vectors.push(FlowVector {
                x: px as f32,
                y: py as f32,
                dx: vx as f32,
                dy: vy as f32,
            });
        }
    }
    Ok(FlowField { viewpoint, vectors })
}

pub fn average_flow(field: &FlowField) -> AvgFlow {
    let n = field.vectors.len();
    if n == 0 {
        return AvgFlow {
            viewpoint: field.viewpoint,
            mean_dx: 0.0,
            mean_dy: 0.0,
            sample_count: 0,
        };
    }
    let (sx, sy) = field
        .vectors
        .iter()
        .fold((0.0f64, 0.0f64), |(sx, sy), v| (sx + v.dx as f64, sy + v.dy as f64));
    AvgFlow {
        viewpoint: field.viewpoint,
        mean_dx: (sx / n as f64) as f32,
        mean_dy: (sy / n as f64) as f32,
        sample_count: n,
    }
}
