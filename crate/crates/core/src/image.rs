//! Core value types: depth images, face boxes and landmark shapes.

use crate::error::{Error, Result};

/// Value stored at invalid pixels. Algorithms consult the mask and never read it.
pub const INVALID_DEPTH: f64 = 0.0;

/// A rectangular grid of depth samples in millimetres with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    width: usize,
    height: usize,
    depth: Vec<f64>,
    valid: Vec<bool>,
    /// Millimetres per pixel, used for normal estimation and error reporting.
    pub pitch_mm: f64,
}

impl DepthImage {
    /// Builds an image from row-major grids. Invalid pixels are reset to the
    /// sentinel; valid pixels must be finite.
    pub fn new(width: usize, height: usize, mut depth: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::ZeroDimensions);
        }
        let n = width * height;
        if depth.len() != n || valid.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "expected {n} samples, got depth {} / mask {}",
                depth.len(),
                valid.len()
            )));
        }
        for (d, &v) in depth.iter_mut().zip(&valid) {
            if !v {
                *d = INVALID_DEPTH;
            } else if !d.is_finite() {
                return Err(Error::NonFinite("depth image"));
            }
        }
        Ok(Self {
            width,
            height,
            depth,
            valid,
            pitch_mm: 1.0,
        })
    }

    /// All pixels valid.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut depth = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                depth.push(f(x, y));
            }
        }
        Self::new(width, height, depth, vec![true; width * height])
    }

    pub fn with_pitch(mut self, pitch_mm: f64) -> Self {
        self.pitch_mm = pitch_mm;
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn depth(&self) -> &[f64] {
        &self.depth
    }

    pub fn mask(&self) -> &[bool] {
        &self.valid
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.depth[y * self.width + x]
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.width + x]
    }

    /// Value at integer coordinates with replicate padding outside the grid.
    #[inline]
    pub fn clamped(&self, x: i64, y: i64) -> f64 {
        let cx = x.clamp(0, self.width as i64 - 1) as usize;
        let cy = y.clamp(0, self.height as i64 - 1) as usize;
        self.depth[cy * self.width + cx]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Adds `offset` to every valid sample.
    pub fn offset_depth(&self, offset: f64) -> Self {
        let mut out = self.clone();
        for (d, &v) in out.depth.iter_mut().zip(&out.valid) {
            if v {
                *d += offset;
            }
        }
        out
    }
}

/// Face region in pixel coordinates: top-left corner plus extent.
///
/// Coordinates are real-valued so jittered training boxes can be represented;
/// boxes produced by the detector are integral and lie inside the image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl FaceBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(w > 0.0 && h > 0.0) || !x.is_finite() || !y.is_finite() {
            return Err(Error::DegenerateBox { w, h });
        }
        Ok(Self { x, y, w, h })
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x >= 0.0
            && self.y >= 0.0
            && self.x + self.w <= width as f64
            && self.y + self.h <= height as f64
    }

    /// Closed containment test.
    pub fn contains(&self, px: f64, py: f64) -> bool {
        px >= self.x && px <= self.x + self.w && py >= self.y && py <= self.y + self.h
    }

    /// Whether pixel `(px, py)` is one of the pixels the box covers
    /// (half-open on the far edges).
    pub fn covers_pixel(&self, px: usize, py: usize) -> bool {
        let (x, y) = (px as f64, py as f64);
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }

    /// Box grown by `margin` times its size on every side.
    pub fn expanded(&self, margin: f64) -> Self {
        Self {
            x: self.x - margin * self.w,
            y: self.y - margin * self.h,
            w: self.w * (1.0 + 2.0 * margin),
            h: self.h * (1.0 + 2.0 * margin),
        }
    }

    /// Mirror about the vertical axis of an image `width` pixels wide.
    pub fn hflip(&self, width: usize) -> Self {
        Self {
            x: width as f64 - self.x - self.w,
            ..*self
        }
    }
}

/// Ordered landmark coordinates (pixels) with per-landmark visibility.
#[derive(Debug, Clone, PartialEq)]
pub struct Shape {
    pub points: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
}

impl Shape {
    pub fn new(points: Vec<[f64; 2]>) -> Self {
        let visible = vec![true; points.len()];
        Self { points, visible }
    }

    pub fn with_visibility(points: Vec<[f64; 2]>, visible: Vec<bool>) -> Result<Self> {
        if points.len() != visible.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} points vs {} visibility flags",
                points.len(),
                visible.len()
            )));
        }
        Ok(Self { points, visible })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Flat `(x1, y1, ..., xL, yL)` vector.
    pub fn to_vector(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p[0], p[1]]).collect()
    }

    /// Inverse of [`Shape::to_vector`]; all landmarks visible.
    pub fn from_vector(v: &[f64]) -> Result<Self> {
        if v.len() % 2 != 0 {
            return Err(Error::DimensionMismatch(format!("odd shape vector length {}", v.len())));
        }
        Ok(Self::new(v.chunks_exact(2).map(|c| [c[0], c[1]]).collect()))
    }

    pub fn centroid(&self) -> [f64; 2] {
        let n = self.points.len().max(1) as f64;
        let (sx, sy) = self
            .points
            .iter()
            .fold((0.0, 0.0), |(sx, sy), p| (sx + p[0], sy + p[1]));
        [sx / n, sy / n]
    }

    /// Sub-shape with the given landmark indices, in that order.
    pub fn select(&self, ids: &[usize]) -> Self {
        Self {
            points: ids.iter().map(|&i| self.points[i]).collect(),
            visible: ids.iter().map(|&i| self.visible[i]).collect(),
        }
    }

    /// Places a sub-shape back into a full-size shape; unlisted landmarks are
    /// marked invisible at the origin.
    pub fn expand(&self, ids: &[usize], full_len: usize) -> Self {
        let mut out = Shape {
            points: vec![[0.0, 0.0]; full_len],
            visible: vec![false; full_len],
        };
        for (k, &i) in ids.iter().enumerate() {
            out.points[i] = self.points[k];
            out.visible[i] = self.visible[k];
        }
        out
    }

    pub fn visible_count(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }
}

/// Semantic landmark table shared by a dataset: names and the left/right
/// mirror permutation.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkTable {
    pub names: Vec<String>,
    pub mirror: Vec<usize>,
}

impl LandmarkTable {
    pub fn new(names: Vec<String>, mirror: Vec<usize>) -> Result<Self> {
        check_involution(&mirror)?;
        if names.len() != mirror.len() {
            return Err(Error::DimensionMismatch("landmark names vs mirror map".into()));
        }
        Ok(Self { names, mirror })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// The 22-point face layout used by the synthetic generator.
    pub fn face22() -> Self {
        let names = FACE22_NAMES.iter().map(|s| s.to_string()).collect();
        Self {
            names,
            mirror: FACE22_MIRROR.to_vec(),
        }
    }
}

pub const FACE22_NAMES: [&str; 22] = [
    "brow_outer_r",
    "brow_mid_r",
    "brow_inner_r",
    "brow_inner_l",
    "brow_mid_l",
    "brow_outer_l",
    "eye_outer_r",
    "eye_inner_r",
    "eye_inner_l",
    "eye_outer_l",
    "nose_saddle_r",
    "nose_saddle_l",
    "alar_r",
    "nose_tip",
    "alar_l",
    "mouth_corner_r",
    "lip_upper_outer",
    "mouth_corner_l",
    "lip_upper_inner",
    "lip_lower_inner",
    "lip_lower_outer",
    "chin",
];

pub const FACE22_MIRROR: [usize; 22] = [
    5, 4, 3, 2, 1, 0, 9, 8, 7, 6, 11, 10, 14, 13, 12, 17, 16, 15, 18, 19, 20, 21,
];

/// Landmarks on the subject's right half of the face plus the midline: the
/// 14 points that stay in view when the head turns to positive yaw.
pub const FACE22_RIGHT_AND_MIDLINE: [usize; 14] = [0, 1, 2, 6, 7, 10, 12, 13, 15, 16, 18, 19, 20, 21];
/// Mirror image of [`FACE22_RIGHT_AND_MIDLINE`].
pub const FACE22_LEFT_AND_MIDLINE: [usize; 14] = [3, 4, 5, 8, 9, 11, 13, 14, 16, 17, 18, 19, 20, 21];

/// Landmark groups used for per-group comparisons: inner eye corners, outer
/// eye corners, nose tip, nose corners, mouth corners, chin tip.
pub const FACE22_GROUPS: [(&str, &[usize]); 6] = [
    ("inner_eye_corners", &[7, 8]),
    ("outer_eye_corners", &[6, 9]),
    ("nose_tip", &[13]),
    ("nose_corners", &[12, 14]),
    ("mouth_corners", &[15, 17]),
    ("chin_tip", &[21]),
];

fn check_involution(map: &[usize]) -> Result<()> {
    for (i, &j) in map.iter().enumerate() {
        if j >= map.len() || map[j] != i {
            return Err(Error::NonInvolutiveMirror);
        }
    }
    Ok(())
}

/// Mirrors an image and its landmarks about the vertical axis.
///
/// Landmark `i` of the output is the mirrored landmark `mirror[i]` of the
/// input, so semantic names stay attached to the correct side of the face.
pub fn hflip(img: &DepthImage, shape: &Shape, mirror: &[usize]) -> Result<(DepthImage, Shape)> {
    check_involution(mirror)?;
    if mirror.len() != shape.len() {
        return Err(Error::DimensionMismatch(format!(
            "mirror map has {} entries, shape has {} landmarks",
            mirror.len(),
            shape.len()
        )));
    }
    let flipped = hflip_image(img);
    let w = img.width() as f64;
    let points = mirror
        .iter()
        .map(|&j| {
            let p = shape.points[j];
            [w - 1.0 - p[0], p[1]]
        })
        .collect();
    let visible = mirror.iter().map(|&j| shape.visible[j]).collect();
    Ok((flipped, Shape { points, visible }))
}

pub fn hflip_image(img: &DepthImage) -> DepthImage {
    let (w, h) = (img.width, img.height);
    let mut depth = Vec::with_capacity(w * h);
    let mut valid = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in (0..w).rev() {
            depth.push(img.depth[y * w + x]);
            valid.push(img.valid[y * w + x]);
        }
    }
    DepthImage {
        width: w,
        height: h,
        depth,
        valid,
        pitch_mm: img.pitch_mm,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> DepthImage {
        DepthImage::from_fn(w, h, |x, y| 500.0 + x as f64 * 1.5 + y as f64 * 0.25).unwrap()
    }

    #[test]
    fn invalid_pixels_hold_sentinel() {
        let img = DepthImage::new(2, 1, vec![5.0, 7.0], vec![true, false]).unwrap();
        assert_eq!(img.depth(), &[5.0, INVALID_DEPTH]);
        assert_eq!(img.valid_count(), 1);
    }

    #[test]
    fn zero_dimensions_rejected() {
        assert!(matches!(DepthImage::new(0, 3, vec![], vec![]), Err(Error::ZeroDimensions)));
    }

    #[test]
    fn shape_vector_roundtrip() {
        let s = Shape::new(vec![[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(s.to_vector(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(Shape::from_vector(&s.to_vector()).unwrap(), s);
    }

    #[test]
    fn face22_mirror_is_involution() {
        let t = LandmarkTable::face22();
        assert!(check_involution(&t.mirror).is_ok());
        let mut mirrored: Vec<usize> = FACE22_RIGHT_AND_MIDLINE.iter().map(|&i| t.mirror[i]).collect();
        mirrored.sort();
        assert_eq!(mirrored, FACE22_LEFT_AND_MIDLINE.to_vec());
    }

    #[test]
    fn hflip_is_involution() {
        let img = ramp(100, 7);
        let mirror = LandmarkTable::face22().mirror;
        let shape = Shape::with_visibility(
            (0..22).map(|i| [i as f64 * 3.75, i as f64 + 0.5]).collect(),
            (0..22).map(|i| i % 3 != 0).collect(),
        )
        .unwrap();
        let (fi, fs) = hflip(&img, &shape, &mirror).unwrap();
        let (bi, bs) = hflip(&fi, &fs, &mirror).unwrap();
        assert_eq!(bi, img);
        assert_eq!(bs, shape);
        assert_eq!(fs.visible_count(), shape.visible_count());
        let mut a: Vec<f64> = img.depth().to_vec();
        let mut b: Vec<f64> = fi.depth().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
    }

    #[test]
    fn hflip_mirror_formula_and_fixed_point() {
        let img = ramp(100, 3);
        let mut points = vec![[50.0, 1.0]; 22];
        points[0] = [10.0, 1.0];
        points[13] = [49.5, 2.0];
        let shape = Shape::new(points);
        let (_, fs) = hflip(&img, &shape, &LandmarkTable::face22().mirror).unwrap();
        // landmark 0 lands in slot 5 (its mirror partner)
        assert_eq!(fs.points[5], [89.0, 1.0]);
        assert_eq!(fs.points[13], [49.5, 2.0]);
    }

    #[test]
    fn hflip_rejects_non_involutive_map() {
        let img = ramp(4, 4);
        let shape = Shape::new(vec![[0.0, 0.0]; 3]);
        assert!(matches!(
            hflip(&img, &shape, &[1, 2, 0]),
            Err(Error::NonInvolutiveMirror)
        ));
    }

    #[test]
    fn box_contains_is_closed() {
        let b = FaceBox::new(10.0, 10.0, 20.0, 20.0).unwrap();
        assert!(b.contains(30.0, 30.0));
        assert!(!b.contains(30.0001, 30.0));
        assert!(FaceBox::new(0.0, 0.0, 0.0, 1.0).is_err());
    }
}
