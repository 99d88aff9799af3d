//! Per-landmark feature extraction.
//!
//! Every extractor works on the preprocessed (normal-z) image, centres its
//! patch on the landmark rounded to the nearest pixel and replicates border
//! pixels for patches that leave the image. Output is landmark-major: the
//! descriptor of landmark 0, then landmark 1, and so on.

pub mod binary;
pub mod hog;
pub mod lbp;

pub use binary::{binarize, extract_depth_diff, PackedCode};
pub use hog::{extract_hog, HogConfig};
pub use lbp::{extract_lbp, LbpConfig};

use crate::error::Result;
use crate::image::{DepthImage, Shape};

/// Hand-crafted descriptor used by a ridge cascade.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FeatureKind {
    Hog(HogConfig),
    Lbp(LbpConfig),
}

impl Default for FeatureKind {
    fn default() -> Self {
        FeatureKind::Hog(HogConfig::default())
    }
}

impl FeatureKind {
    pub fn validate(&self) -> Result<()> {
        match self {
            FeatureKind::Hog(c) => c.validate(),
            FeatureKind::Lbp(c) => c.validate(),
        }
    }

    pub fn per_landmark_len(&self) -> usize {
        match self {
            FeatureKind::Hog(c) => c.per_landmark_len(),
            FeatureKind::Lbp(_) => lbp::UNIFORM_BINS,
        }
    }

    /// Feature length `m` for `landmarks` points.
    pub fn len(&self, landmarks: usize) -> usize {
        self.per_landmark_len() * landmarks
    }

    pub fn extract(&self, img: &DepthImage, shape: &Shape) -> Vec<f64> {
        let mut out = vec![0.0; self.len(shape.len())];
        self.extract_into(img, shape, &mut out);
        out
    }

    pub fn extract_into(&self, img: &DepthImage, shape: &Shape, out: &mut [f64]) {
        let per = self.per_landmark_len();
        for (p, chunk) in shape.points.iter().zip(out.chunks_exact_mut(per)) {
            match self {
                FeatureKind::Hog(c) => hog::hog_patch(img, *p, c, chunk),
                FeatureKind::Lbp(c) => lbp::lbp_patch(img, *p, c, chunk),
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FeatureKind::Hog(_) => "hog",
            FeatureKind::Lbp(_) => "lbp",
        }
    }
}

/// Nearest pixel; non-finite coordinates collapse to 0 and huge ones are
/// clamped so patch arithmetic cannot overflow.
#[inline]
pub(crate) fn round_coord(v: f64) -> i64 {
    if v.is_finite() {
        v.round().clamp(-1e9, 1e9) as i64
    } else {
        0
    }
}

/// Top-left pixel of a `side`-wide patch centred on `center`.
#[inline]
pub(crate) fn patch_origin(center: [f64; 2], side: usize) -> (i64, i64) {
    let half = (side / 2) as i64;
    (round_coord(center[0]) - half, round_coord(center[1]) - half)
}
