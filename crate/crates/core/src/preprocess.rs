//! Depth-to-surface-normal preprocessing.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::image::DepthImage;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocessConfig {
    /// Apply a 3x3 median filter after hole filling.
    pub median: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { median: true }
    }
}

/// Normal-z image plus the mask of pixels whose depth was filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    /// z-component of the unit surface normal at every pixel; all pixels valid.
    pub image: DepthImage,
    /// true where the input pixel was invalid and got a nearest-neighbour fill.
    pub filled: Vec<bool>,
}

/// Fills holes, smooths, and replaces depth by the camera-facing component of
/// the surface normal.
pub fn preprocess(img: &DepthImage, cfg: &PreprocessConfig) -> Result<Preprocessed> {
    let (filled_depth, filled) = fill_holes(img)?;
    let (w, h) = (img.width(), img.height());
    let smooth = if cfg.median {
        median3(&filled_depth, w, h)
    } else {
        filled_depth
    };
    let nz = normal_z(&smooth, w, h, img.pitch_mm);
    let image = DepthImage::new(w, h, nz, vec![true; w * h])?.with_pitch(img.pitch_mm);
    Ok(Preprocessed { image, filled })
}

/// Nearest-valid-neighbour fill by breadth-first distance (4-connected).
pub fn fill_holes(img: &DepthImage) -> Result<(Vec<f64>, Vec<bool>)> {
    let (w, h) = (img.width(), img.height());
    if img.valid_count() == 0 {
        return Err(Error::NoValidPixels);
    }
    let mut depth = img.depth().to_vec();
    let mut known = img.mask().to_vec();
    let filled: Vec<bool> = known.iter().map(|&v| !v).collect();
    let mut queue: VecDeque<usize> = (0..w * h).filter(|&i| known[i]).collect();
    while let Some(i) = queue.pop_front() {
        let (x, y) = (i % w, i / w);
        let d = depth[i];
        let mut visit = |j: usize| {
            if !known[j] {
                known[j] = true;
                depth[j] = d;
                queue.push_back(j);
            }
        };
        if x > 0 {
            visit(i - 1);
        }
        if x + 1 < w {
            visit(i + 1);
        }
        if y > 0 {
            visit(i - w);
        }
        if y + 1 < h {
            visit(i + w);
        }
    }
    Ok((depth, filled))
}

/// 3x3 median with replicate padding.
pub fn median3(src: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    let mut win = [0.0f64; 9];
    for y in 0..h {
        for x in 0..w {
            let mut k = 0;
            for dy in -1i64..=1 {
                let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                for dx in -1i64..=1 {
                    let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                    win[k] = src[yy * w + xx];
                    k += 1;
                }
            }
            win.sort_unstable_by(f64::total_cmp);
            out[y * w + x] = win[4];
        }
    }
    out
}

/// z-component of the unit normal from central differences; one-sided at
/// the borders.
pub fn normal_z(depth: &[f64], w: usize, h: usize, pitch_mm: f64) -> Vec<f64> {
    let at = |x: usize, y: usize| depth[y * w + x];
    let mut out = vec![1.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let dzdx = if w < 2 {
                0.0
            } else if x == 0 {
                (at(1, y) - at(0, y)) / pitch_mm
            } else if x == w - 1 {
                (at(x, y) - at(x - 1, y)) / pitch_mm
            } else {
                (at(x + 1, y) - at(x - 1, y)) / (2.0 * pitch_mm)
            };
            let dzdy = if h < 2 {
                0.0
            } else if y == 0 {
                (at(x, 1) - at(x, 0)) / pitch_mm
            } else if y == h - 1 {
                (at(x, y) - at(x, y - 1)) / pitch_mm
            } else {
                (at(x, y + 1) - at(x, y - 1)) / (2.0 * pitch_mm)
            };
            out[y * w + x] = 1.0 / (dzdx * dzdx + dzdy * dzdy + 1.0).sqrt();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_plane_faces_camera() {
        let img = DepthImage::from_fn(9, 7, |_, _| 800.0).unwrap();
        let p = preprocess(&img, &PreprocessConfig::default()).unwrap();
        assert!(p.image.depth().iter().all(|&v| v == 1.0));
        assert!(p.filled.iter().all(|&f| !f));
    }

    #[test]
    fn tilted_plane_matches_analytic_normal() {
        let img = DepthImage::from_fn(12, 10, |x, _| 600.0 + x as f64).unwrap();
        let p = preprocess(&img, &PreprocessConfig::default()).unwrap();
        let expected = 1.0 / 2f64.sqrt();
        for y in 1..9 {
            for x in 2..10 {
                assert!((p.image.get(x, y) - expected).abs() < 1e-6);
            }
        }
        // finer pitch steepens the same depth ramp
        let fine = preprocess(&img.clone().with_pitch(0.5), &PreprocessConfig::default()).unwrap();
        assert!((fine.image.get(5, 5) - 1.0 / 5f64.sqrt()).abs() < 1e-6);
    }

    #[test]
    fn interior_hole_in_constant_plane_is_invisible() {
        let full = DepthImage::from_fn(8, 8, |_, _| 700.0).unwrap();
        let mut valid = vec![true; 64];
        valid[3 * 8 + 4] = false;
        let holed = DepthImage::new(8, 8, full.depth().to_vec(), valid).unwrap();
        let a = preprocess(&full, &PreprocessConfig::default()).unwrap();
        let b = preprocess(&holed, &PreprocessConfig::default()).unwrap();
        assert_eq!(a.image, b.image);
        assert!(b.filled[3 * 8 + 4]);
    }

    #[test]
    fn no_valid_pixels_is_an_error() {
        let img = DepthImage::new(2, 2, vec![0.0; 4], vec![false; 4]).unwrap();
        assert!(matches!(
            preprocess(&img, &PreprocessConfig::default()),
            Err(Error::NoValidPixels)
        ));
    }

    #[test]
    fn output_is_a_unit_normal_component() {
        let img = DepthImage::from_fn(20, 20, |x, y| {
            let (fx, fy) = (x as f64 - 10.0, y as f64 - 10.0);
            600.0 + 0.3 * fx * fx - 0.7 * fy * fx.sin()
        })
        .unwrap();
        let p = preprocess(&img, &PreprocessConfig::default()).unwrap();
        assert!(p.image.depth().iter().all(|&v| (-1.0..=1.0).contains(&v) && v > 0.0));
    }

    #[test]
    fn fill_uses_nearest_neighbour() {
        let img = DepthImage::new(5, 1, vec![10.0, 0.0, 0.0, 0.0, 50.0], vec![true, false, false, false, true]).unwrap();
        let (d, f) = fill_holes(&img).unwrap();
        assert_eq!(d, vec![10.0, 10.0, 10.0, 50.0, 50.0]);
        assert_eq!(f, vec![false, true, true, true, false]);
    }
}
