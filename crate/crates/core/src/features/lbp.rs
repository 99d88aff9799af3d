//! Uniform local binary pattern histograms (8 neighbours, radius 1).

use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::image::{DepthImage, Shape};

use super::patch_origin;

/// Neighbour offsets in circular order starting at the top-left pixel.
pub const NEIGHBOURS: [(i64, i64); 8] = [(-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0)];

/// 58 uniform patterns plus one bin for everything else.
pub const UNIFORM_BINS: usize = 59;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbpConfig {
    pub patch_side: usize,
}

impl Default for LbpConfig {
    fn default() -> Self {
        Self { patch_side: 32 }
    }
}

impl LbpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_side == 0 {
            return Err(Error::InvalidParameter("LBP patch side must be positive".into()));
        }
        Ok(())
    }
}

/// Number of 0/1 transitions around the circular 8-bit pattern.
pub fn transitions(code: u8) -> u32 {
    (code ^ code.rotate_right(1)).count_ones()
}

/// Maps each 8-bit code to its histogram bin: uniform patterns in ascending
/// code order, then the shared non-uniform bin.
pub fn uniform_table() -> &'static [u8; 256] {
    static TABLE: OnceLock<[u8; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [0u8; 256];
        let mut next = 0u8;
        for code in 0..=255u8 {
            if transitions(code) <= 2 {
                t[code as usize] = next;
                next += 1;
            } else {
                t[code as usize] = (UNIFORM_BINS - 1) as u8;
            }
        }
        debug_assert_eq!(next as usize, UNIFORM_BINS - 1);
        t
    })
}

/// Pattern at one pixel: bit `i` is set when neighbour `i` is strictly
/// greater than the centre. Reads are replicate-padded.
pub fn lbp_code(img: &DepthImage, x: i64, y: i64) -> u8 {
    let c = img.clamped(x, y);
    let mut code = 0u8;
    for (i, (dx, dy)) in NEIGHBOURS.iter().enumerate() {
        if img.clamped(x + dx, y + dy) > c {
            code |= 1 << i;
        }
    }
    code
}

/// Per-landmark L1-normalised uniform LBP histograms, landmark-major.
pub fn extract_lbp(img: &DepthImage, shape: &Shape, cfg: &LbpConfig) -> Vec<f64> {
    let mut out = vec![0.0; UNIFORM_BINS * shape.len()];
    for (p, chunk) in shape.points.iter().zip(out.chunks_exact_mut(UNIFORM_BINS)) {
        lbp_patch(img, *p, cfg, chunk);
    }
    out
}

pub(crate) fn lbp_patch(img: &DepthImage, center: [f64; 2], cfg: &LbpConfig, out: &mut [f64]) {
    let table = uniform_table();
    let side = cfg.patch_side as i64;
    let (x0, y0) = patch_origin(center, cfg.patch_side);
    out.fill(0.0);
    let unit = 1.0 / (side * side) as f64;
    for py in 0..side {
        for px in 0..side {
            let code = lbp_code(img, x0 + px, y0 + py);
            out[table[code as usize] as usize] += unit;
        }
    }
}
