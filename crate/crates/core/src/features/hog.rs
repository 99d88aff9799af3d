//! Histogram-of-oriented-gradient descriptors around landmarks.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::image::{DepthImage, Shape};

use super::patch_origin;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HogConfig {
    pub patch_side: usize,
    pub cells_per_side: usize,
    pub bins: usize,
    pub epsilon: f64,
}

impl Default for HogConfig {
    fn default() -> Self {
        Self {
            patch_side: 32,
            cells_per_side: 4,
            bins: 9,
            epsilon: 1e-6,
        }
    }
}

impl HogConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cells_per_side == 0 || self.patch_side == 0 || self.patch_side % self.cells_per_side != 0 {
            return Err(Error::InvalidParameter(format!(
                "HOG patch side {} not divisible by {} cells",
                self.patch_side, self.cells_per_side
            )));
        }
        if self.bins < 2 {
            return Err(Error::InvalidParameter(format!("HOG needs >= 2 bins, got {}", self.bins)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidParameter("HOG epsilon must be positive".into()));
        }
        Ok(())
    }

    pub fn per_landmark_len(&self) -> usize {
        self.cells_per_side * self.cells_per_side * self.bins
    }
}

/// Concatenated per-landmark HOG descriptors, landmark-major.
pub fn extract_hog(img: &DepthImage, shape: &Shape, cfg: &HogConfig) -> Vec<f64> {
    let per = cfg.per_landmark_len();
    let mut out = vec![0.0; per * shape.len()];
    for (p, chunk) in shape.points.iter().zip(out.chunks_exact_mut(per)) {
        hog_patch(img, *p, cfg, chunk);
    }
    out
}

/// Unsigned-orientation cell histograms with linear interpolation between
/// neighbouring bins, each cell L2-normalised with floor `epsilon`.
pub(crate) fn hog_patch(img: &DepthImage, center: [f64; 2], cfg: &HogConfig, out: &mut [f64]) {
    let side = cfg.patch_side as i64;
    let cell = side / cfg.cells_per_side as i64;
    let bins = cfg.bins;
    let inv_width = bins as f64 / PI;
    let (x0, y0) = patch_origin(center, cfg.patch_side);
    out.fill(0.0);
    let (w, h) = (img.width() as i64, img.height() as i64);
    let interior = x0 >= 1 && y0 >= 1 && x0 + side < w && y0 + side < h;
    let depth = img.depth();
    let cell_of: Vec<usize> = (0..side).map(|i| (i / cell) as usize).collect();
    let mut vote = |px: i64, py: i64, gx: f64, gy: f64| {
        let mag = (gx * gx + gy * gy).sqrt();
        if mag == 0.0 {
            return;
        }
        let pos = unsigned_angle(gx, gy) * inv_width - 0.5;
        // pos lies in [-0.5, bins - 0.5): below zero means the last bin
        // wraps around, otherwise truncation is the floor
        let (b0, frac) = if pos < 0.0 {
            (bins - 1, pos + 1.0)
        } else {
            let lo = pos as usize;
            (lo.min(bins - 1), pos - lo as f64)
        };
        let b1 = if b0 + 1 == bins { 0 } else { b0 + 1 };
        let base = (cell_of[py as usize] * cfg.cells_per_side + cell_of[px as usize]) * bins;
        out[base + b0] += (1.0 - frac) * mag;
        out[base + b1] += frac * mag;
    };
    if interior {
        // no clamping needed: index rows directly
        let stride = w as usize;
        for py in 0..side {
            let row = ((y0 + py) as usize) * stride;
            for px in 0..side {
                let i = row + (x0 + px) as usize;
                let gx = depth[i + 1] - depth[i - 1];
                let gy = depth[i + stride] - depth[i - stride];
                vote(px, py, gx, gy);
            }
        }
    } else {
        for py in 0..side {
            let y = y0 + py;
            for px in 0..side {
                let x = x0 + px;
                let gx = img.clamped(x + 1, y) - img.clamped(x - 1, y);
                let gy = img.clamped(x, y + 1) - img.clamped(x, y - 1);
                vote(px, py, gx, gy);
            }
        }
    }
    let eps2 = cfg.epsilon * cfg.epsilon;
    for hist in out.chunks_exact_mut(bins) {
        let norm = (hist.iter().map(|v| v * v).sum::<f64>() + eps2).sqrt();
        for v in hist.iter_mut() {
            *v /= norm;
        }
    }
}

/// Gradient orientation folded into `[0, π)`. Polynomial arctangent
/// (absolute error below 1e-5 rad), several times cheaper than `atan2`.
#[inline]
fn unsigned_angle(gx: f64, gy: f64) -> f64 {
    let (x, y) = if gy < 0.0 || (gy == 0.0 && gx < 0.0) { (-gx, -gy) } else { (gx, gy) };
    let ax = x.abs();
    let base = if y <= ax {
        atan_unit(y / ax)
    } else {
        std::f64::consts::FRAC_PI_2 - atan_unit(ax / y)
    };
    if x < 0.0 {
        PI - base
    } else {
        base
    }
}

/// `atan(t)` for `t` in `[0, 1]`.
#[inline]
fn atan_unit(t: f64) -> f64 {
    let t2 = t * t;
    t * (0.999_866_0 + t2 * (-0.330_299_5 + t2 * (0.180_141_0 + t2 * (-0.085_133_0 + t2 * 0.020_835_1))))
}
