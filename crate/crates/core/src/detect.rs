//! Depth-clustering face detector.
//!
//! Valid depth values are clustered into three groups with 1-D k-means; the
//! group nearest to the camera is taken as the head. Clusters that are
//! contiguous in depth (no gap wider than `merge_gap_mm`) are merged first so a
//! lone head is not cut into depth slabs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{DepthImage, FaceBox};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// k-means++ restarts; the lowest within-cluster sum of squares wins.
    pub restarts: usize,
    /// Components smaller than this fraction of the valid pixels are dropped.
    pub min_component_fraction: f64,
    pub merge_gap_mm: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            k: 3,
            seed: 0x5eed,
            max_iter: 100,
            restarts: 4,
            min_component_fraction: 0.01,
            merge_gap_mm: 50.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub face: FaceBox,
    /// Clustering was skipped (fewer than `k` distinct depths); the box is the
    /// extent of all valid pixels.
    pub fallback: bool,
}

/// Result of 1-D k-means on sorted values: half-open index ranges per cluster
/// in ascending order of centre.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub centers: Vec<f64>,
    pub ranges: Vec<(usize, usize)>,
    pub sse: f64,
}

pub fn detect_face(img: &DepthImage, cfg: &DetectConfig) -> Result<Detection> {
    let valid = img.valid_count();
    if valid == 0 {
        return Err(Error::NoValidPixels);
    }
    let mut values: Vec<f64> = img
        .depth()
        .iter()
        .zip(img.mask())
        .filter(|(_, &v)| v)
        .map(|(&d, _)| d)
        .collect();
    values.sort_unstable_by(f64::total_cmp);
    let mut distinct = 1;
    for w in values.windows(2) {
        if w[1] != w[0] {
            distinct += 1;
            if distinct >= cfg.k {
                break;
            }
        }
    }
    if distinct < cfg.k {
        let face = bounding_box(img.width(), img.height(), img.mask().iter().copied())
            .ok_or(Error::NoValidPixels)?;
        return Ok(Detection { face, fallback: true });
    }

    let clustering = kmeans_1d(&values, cfg.k, cfg.seed, cfg.max_iter, cfg.restarts);
    // merge clusters that touch in depth, then keep the nearest group
    let mut limit = f64::NEG_INFINITY;
    for &(s, e) in clustering.ranges.iter().filter(|(s, e)| e > s) {
        if limit.is_finite() && values[s] - limit >= cfg.merge_gap_mm {
            break;
        }
        limit = values[e - 1];
    }

    let (w, h) = (img.width(), img.height());
    let mask: Vec<bool> = img
        .depth()
        .iter()
        .zip(img.mask())
        .map(|(&d, &v)| v && d <= limit)
        .collect();
    let kept = filter_components(&mask, w, h, cfg.min_component_fraction * valid as f64);
    let face = bounding_box(w, h, kept.into_iter()).ok_or(Error::NoValidPixels)?;
    Ok(Detection { face, fallback: false })
}

/// Exact Lloyd iterations on sorted 1-D data using prefix sums; each
/// assignment step is a set of midpoint splits.
pub fn kmeans_1d(sorted: &[f64], k: usize, seed: u64, max_iter: usize, restarts: usize) -> Clustering {
    let n = sorted.len();
    let mut prefix = Vec::with_capacity(n + 1);
    let mut prefix_sq = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    prefix_sq.push(0.0);
    for &v in sorted {
        prefix.push(prefix.last().unwrap() + v);
        prefix_sq.push(prefix_sq.last().unwrap() + v * v);
    }
    let range_sse = |s: usize, e: usize| -> f64 {
        if e <= s {
            return 0.0;
        }
        let cnt = (e - s) as f64;
        let sum = prefix[e] - prefix[s];
        (prefix_sq[e] - prefix_sq[s] - sum * sum / cnt).max(0.0)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<Clustering> = None;
    for _ in 0..restarts.max(1) {
        let mut centers = kmeanspp_init(sorted, k, &mut rng);
        for _ in 0..max_iter {
            centers.sort_unstable_by(f64::total_cmp);
            let ranges = split_ranges(sorted, &centers);
            let mut moved = false;
            for (c, &(s, e)) in centers.iter_mut().zip(&ranges) {
                if e > s {
                    let m = (prefix[e] - prefix[s]) / (e - s) as f64;
                    if m != *c {
                        moved = true;
                        *c = m;
                    }
                }
            }
            if !moved {
                break;
            }
        }
        centers.sort_unstable_by(f64::total_cmp);
        let ranges = split_ranges(sorted, &centers);
        let sse = ranges.iter().map(|&(s, e)| range_sse(s, e)).sum();
        if best.as_ref().is_none_or(|b| sse < b.sse) {
            best = Some(Clustering { centers, ranges, sse });
        }
    }
    best.expect("at least one restart")
}

fn split_ranges(sorted: &[f64], centers: &[f64]) -> Vec<(usize, usize)> {
    let mut ranges = Vec::with_capacity(centers.len());
    let mut start = 0;
    for i in 0..centers.len() {
        let end = if i + 1 == centers.len() {
            sorted.len()
        } else {
            let mid = 0.5 * (centers[i] + centers[i + 1]);
            start + sorted[start..].partition_point(|&v| v <= mid)
        };
        ranges.push((start, end));
        start = end;
    }
    ranges
}

fn kmeanspp_init(values: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = values.len();
    let mut centers = vec![values[rng.random_range(0..n)]];
    let mut d2: Vec<f64> = values.iter().map(|&v| (v - centers[0]).powi(2)).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            values[rng.random_range(0..n)]
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            values[pick]
        };
        for (d, &v) in d2.iter_mut().zip(values) {
            *d = d.min((v - next).powi(2));
        }
        centers.push(next);
    }
    centers
}

/// 4-connected components of `mask`; components below `min_area` are removed
/// unless that would remove everything, in which case the largest survives.
pub fn filter_components(mask: &[bool], w: usize, h: usize, min_area: f64) -> Vec<bool> {
    let mut label = vec![usize::MAX; w * h];
    let mut comps: Vec<Vec<usize>> = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !mask[start] || label[start] != usize::MAX {
            continue;
        }
        let id = comps.len();
        let mut members = Vec::new();
        label[start] = id;
        stack.push(start);
        while let Some(i) = stack.pop() {
            members.push(i);
            let (x, y) = (i % w, i / w);
            let mut push = |j: usize| {
                if mask[j] && label[j] == usize::MAX {
                    label[j] = id;
                    stack.push(j);
                }
            };
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < w {
                push(i + 1);
            }
            if y > 0 {
                push(i - w);
            }
            if y + 1 < h {
                push(i + w);
            }
        }
        comps.push(members);
    }
    let mut out = vec![false; w * h];
    let mut any = false;
    for c in &comps {
        if c.len() as f64 >= min_area {
            any = true;
            for &i in c {
                out[i] = true;
            }
        }
    }
    if !any {
        if let Some(c) = comps.iter().max_by_key(|c| c.len()) {
            for &i in c {
                out[i] = true;
            }
        }
    }
    out
}

fn bounding_box(w: usize, _h: usize, mask: impl Iterator<Item = bool>) -> Option<FaceBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    let mut any = false;
    for (i, m) in mask.enumerate() {
        if m {
            let (x, y) = (i % w, i / w);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            any = true;
        }
    }
    any.then(|| FaceBox {
        x: x0 as f64,
        y: y0 as f64,
        w: (x1 - x0 + 1) as f64,
        h: (y1 - y0 + 1) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene() -> (DepthImage, Vec<u8>) {
        // 0 background, 1 torso, 2 head
        let (w, h) = (60, 50);
        let mut labels = vec![0u8; w * h];
        let mut depth = vec![2000.0; w * h];
        for y in 30..50 {
            for x in 10..50 {
                labels[y * w + x] = 1;
                depth[y * w + x] = 900.0 + (x as f64 - 30.0).abs();
            }
        }
        for y in 8..32 {
            for x in 20..40 {
                let (dx, dy) = (x as f64 - 29.5, y as f64 - 19.5);
                if (dx / 10.0).powi(2) + (dy / 12.0).powi(2) <= 1.0 {
                    labels[y * w + x] = 2;
                    depth[y * w + x] = 600.0 + dx * dx * 0.3 + dy * dy * 0.2;
                }
            }
        }
        (DepthImage::new(w, h, depth, vec![true; w * h]).unwrap(), labels)
    }

    #[test]
    fn head_blob_is_selected() {
        let (img, labels) = scene();
        let det = detect_face(&img, &DetectConfig::default()).unwrap();
        assert!(!det.fallback);
        for (i, &l) in labels.iter().enumerate() {
            let (x, y) = ((i % 60) as f64, (i / 60) as f64);
            if l == 2 {
                assert!(det.face.contains(x, y));
            }
        }
        assert!(det.face.y + det.face.h <= 32.0);
    }

    #[test]
    fn constant_image_falls_back() {
        let mut valid = vec![false; 100];
        for y in 2..6 {
            for x in 3..9 {
                valid[y * 10 + x] = true;
            }
        }
        let img = DepthImage::new(10, 10, vec![500.0; 100], valid).unwrap();
        let det = detect_face(&img, &DetectConfig::default()).unwrap();
        assert!(det.fallback);
        assert_eq!(det.face, FaceBox { x: 3.0, y: 2.0, w: 6.0, h: 4.0 });
    }

    #[test]
    fn deterministic() {
        let (img, _) = scene();
        let cfg = DetectConfig::default();
        assert_eq!(detect_face(&img, &cfg).unwrap(), detect_face(&img, &cfg).unwrap());
    }

    #[test]
    fn kmeans_separates_obvious_groups() {
        let mut v: Vec<f64> = (0..50)
            .map(|i| 10.0 + i as f64 * 0.01)
            .chain((0..50).map(|i| 100.0 + i as f64 * 0.01))
            .chain((0..50).map(|i| 300.0 + i as f64 * 0.01))
            .collect();
        v.sort_by(f64::total_cmp);
        let c = kmeans_1d(&v, 3, 1, 100, 3);
        assert_eq!(c.ranges, vec![(0, 50), (50, 100), (100, 150)]);
    }

    #[test]
    fn speckle_components_are_dropped() {
        let mut mask = vec![false; 100];
        mask[0] = true;
        for i in 40..60 {
            mask[i] = true;
        }
        let kept = filter_components(&mask, 10, 10, 5.0);
        assert!(!kept[0]);
        assert!(kept[45]);
    }
}
