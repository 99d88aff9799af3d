//! Pose-partitioned training subsets and the gating function that picks one
//! regression cascade per test image.

use crate::cascade::{place_unchecked, CascadeModel, Extractor, SampleRef};
use crate::error::{Error, Result};
use crate::features::FeatureKind;
use crate::image::{DepthImage, FaceBox, Shape, FACE22_LEFT_AND_MIDLINE, FACE22_RIGHT_AND_MIDLINE};
use crate::smuf::SmufModel;
use crate::timing::{timed, PhaseTimes};

/// Default variance floor of the gating statistics.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// One pose subset: a closed yaw range and the landmarks its cascade predicts.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseBin {
    pub name: String,
    pub yaw_min: f64,
    pub yaw_max: f64,
    pub landmark_ids: Vec<usize>,
    /// Only samples with every landmark visible join this subset.
    pub require_all_visible: bool,
}

impl PoseBin {
    pub fn new(name: &str, yaw_min: f64, yaw_max: f64, landmark_ids: Vec<usize>) -> Self {
        Self {
            name: name.to_string(),
            yaw_min,
            yaw_max,
            landmark_ids,
            require_all_visible: false,
        }
    }

    pub fn contains(&self, yaw: f64) -> bool {
        yaw >= self.yaw_min && yaw <= self.yaw_max
    }

}

/// The 1-, 3- and 5-subset layouts for the 22-landmark table. Subset 0 is
/// always the frontal cascade trained on fully annotated faces; positive yaw
/// turns the face so that its left half is hidden. A lone frontal subset
/// spans every pose, otherwise it covers `[-45, 45]`.
pub fn pose_layout(dms: usize) -> Result<Vec<PoseBin>> {
    let all: Vec<usize> = (0..22).collect();
    let frontal = |half: f64| {
        let mut b = PoseBin::new("frontal", -half, half, all.clone());
        b.require_all_visible = true;
        b
    };
    let right = FACE22_RIGHT_AND_MIDLINE.to_vec();
    let left = FACE22_LEFT_AND_MIDLINE.to_vec();
    match dms {
        1 => Ok(vec![frontal(90.0)]),
        3 => Ok(vec![
            frontal(45.0),
            PoseBin::new("yaw+0..45", 0.0, 45.0, right),
            PoseBin::new("yaw-45..0", -45.0, 0.0, left),
        ]),
        5 => Ok(vec![
            frontal(45.0),
            PoseBin::new("yaw+0..45", 0.0, 45.0, right.clone()),
            PoseBin::new("yaw-45..0", -45.0, 0.0, left.clone()),
            PoseBin::new("yaw+45..90", 45.0, 90.0, right),
            PoseBin::new("yaw-90..-45", -90.0, -45.0, left),
        ]),
        other => Err(Error::InvalidParameter(format!(
            "unsupported number of descent-map subsets {other} (expected 1, 3 or 5)"
        ))),
    }
}

/// Pose label of a training sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseLabel {
    pub yaw: f64,
    pub all_visible: bool,
}

/// Indices of the samples in each bin. Bins may overlap; a sample lands in
/// every bin whose range contains its yaw (and whose visibility requirement
/// it meets).
pub fn partition_by_pose(labels: &[PoseLabel], bins: &[PoseBin]) -> Result<Vec<Vec<usize>>> {
    if bins.is_empty() {
        return Err(Error::EmptyInput("no pose bins"));
    }
    let mut out = vec![Vec::new(); bins.len()];
    for (i, label) in labels.iter().enumerate() {
        if !bins.iter().any(|b| b.contains(label.yaw)) {
            return Err(Error::SampleOutsideBins { index: i, yaw: label.yaw });
        }
        for (z, bin) in bins.iter().enumerate() {
            if bin.contains(label.yaw) && (label.all_visible || !bin.require_all_visible) {
                out[z].push(i);
            }
        }
    }
    Ok(out)
}

/// Ground-truth feature mean and floored per-coordinate variance of a subset.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub floor: f64,
}

impl GatingStats {
    /// Statistics over the given feature vectors (population variance).
    pub fn from_features<'a>(features: impl IntoIterator<Item = &'a [f64]>, floor: f64) -> Result<Self> {
        if !(floor > 0.0) {
            return Err(Error::InvalidParameter(format!("variance floor {floor}")));
        }
        let mut count = 0usize;
        let mut mean: Vec<f64> = Vec::new();
        let mut m2: Vec<f64> = Vec::new();
        // Welford, so one pass suffices for large subsets
        for f in features {
            if count == 0 {
                mean = vec![0.0; f.len()];
                m2 = vec![0.0; f.len()];
            } else if f.len() != mean.len() {
                return Err(Error::DimensionMismatch(format!(
                    "feature length {} vs {}",
                    f.len(),
                    mean.len()
                )));
            }
            count += 1;
            let c = count as f64;
            for ((mu, s), &v) in mean.iter_mut().zip(m2.iter_mut()).zip(f) {
                let d = v - *mu;
                *mu += d / c;
                *s += d * (v - *mu);
            }
        }
        if count < 2 {
            return Err(Error::TooFewSamples { needed: 2, got: count });
        }
        let var = m2.iter().map(|s| (s / count as f64).max(floor)).collect();
        Ok(Self { mean, var, floor })
    }

    /// Raises the floor to `max(floor, relative · median variance)`.
    /// A handful of nearly constant coordinates otherwise dominate the
    /// distance of every test image.
    pub fn refloor(mut self, relative: f64) -> Self {
        let mut sorted = self.var.clone();
        sorted.sort_by(f64::total_cmp);
        let median = sorted.get(sorted.len() / 2).copied().unwrap_or(0.0);
        self.floor = self.floor.max(relative * median);
        let floor = self.floor;
        self.var.iter_mut().for_each(|v| *v = v.max(floor));
        self
    }

    /// `sqrt((1/m) Σ (φ_j − μ_j)² / σ_j²)`.
    pub fn distance(&self, phi: &[f64]) -> f64 {
        let m = self.mean.len().max(1) as f64;
        let s: f64 = phi
            .iter()
            .zip(&self.mean)
            .zip(&self.var)
            .map(|((p, mu), v)| (p - mu) * (p - mu) / v)
            .sum();
        (s / m).sqrt()
    }
}

/// Gating statistics from features at the ground-truth landmarks.
pub fn fit_gate<E: Extractor>(samples: &[SampleRef<'_>], landmark_ids: &[usize], extractor: &E, floor: f64) -> Result<GatingStats> {
    if samples.len() < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: samples.len() });
    }
    let m = extractor.len(landmark_ids.len());
    let feats: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| {
            let mut f = vec![0.0; m];
            extractor.extract_into(s.image, &s.gt.select(landmark_ids), &mut f);
            f
        })
        .collect();
    GatingStats::from_features(feats.iter().map(|f| f.as_slice()), floor)
}

/// A subset's regressor.
#[derive(Debug, Clone, PartialEq)]
pub enum Regressor {
    Grid(CascadeModel),
    Smuf(SmufModel),
}

impl Regressor {
    pub fn init_shape(&self) -> &Shape {
        match self {
            Regressor::Grid(m) => &m.init_shape,
            Regressor::Smuf(m) => &m.init_shape,
        }
    }

    pub fn landmark_ids(&self) -> &[usize] {
        match self {
            Regressor::Grid(m) => &m.landmark_ids,
            Regressor::Smuf(m) => &m.landmark_ids,
        }
    }

    pub fn stage_count(&self) -> usize {
        match self {
            Regressor::Grid(m) => m.stages.len(),
            Regressor::Smuf(m) => m.stages.len(),
        }
    }

    pub fn refine(&self, img: &DepthImage, start: Shape, times: Option<&mut PhaseTimes>) -> Shape {
        match self {
            Regressor::Grid(m) => crate::cascade::refine(&m.stages, &m.feature, img, start, times),
            Regressor::Smuf(m) => m.refine(img, start, times),
        }
    }

    pub fn predict(&self, img: &DepthImage, face: &FaceBox) -> Shape {
        self.refine(img, place_unchecked(self.init_shape(), face), None)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subset {
    pub bin: PoseBin,
    pub regressor: Regressor,
    pub gate: GatingStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatedModel {
    pub subsets: Vec<Subset>,
    /// Size of the full landmark table the subsets index into.
    pub table_len: usize,
    /// Features the gates are computed on. GRID cascades must use the same
    /// kind; SMUF subsets gate on it in place of their binary codes.
    pub gate_feature: FeatureKind,
}

impl GatedModel {
    pub fn new(subsets: Vec<Subset>, table_len: usize, gate_feature: FeatureKind) -> Result<Self> {
        if subsets.is_empty() {
            return Err(Error::EmptyInput("gated model needs at least one subset"));
        }
        gate_feature.validate()?;
        let grid = matches!(subsets[0].regressor, Regressor::Grid(_));
        for s in &subsets {
            if matches!(s.regressor, Regressor::Grid(_)) != grid {
                return Err(Error::MalformedModel("subsets mix regressor kinds".into()));
            }
            if s.regressor.landmark_ids() != s.bin.landmark_ids.as_slice() {
                return Err(Error::MalformedModel(format!("subset {} landmark ids disagree with its bin", s.bin.name)));
            }
            if s.bin.landmark_ids.iter().any(|&i| i >= table_len) {
                return Err(Error::MalformedModel(format!("subset {} indexes past the landmark table", s.bin.name)));
            }
            if let Regressor::Grid(m) = &s.regressor {
                if m.feature != gate_feature {
                    return Err(Error::MalformedModel("subsets use different feature kinds".into()));
                }
            }
            if s.gate.mean.len() != gate_feature.len(s.bin.landmark_ids.len()) {
                return Err(Error::MalformedModel(format!("subset {} gate has the wrong length", s.bin.name)));
            }
        }
        Ok(Self {
            subsets,
            table_len,
            gate_feature,
        })
    }

    pub fn is_grid(&self) -> bool {
        matches!(self.subsets[0].regressor, Regressor::Grid(_))
    }

    pub fn gate_scores(&self, img: &DepthImage, face: &FaceBox) -> Vec<f64> {
        self.subsets
            .iter()
            .map(|s| {
                let start = place_unchecked(s.regressor.init_shape(), face);
                s.gate.distance(&self.gate_feature.extract(img, &start))
            })
            .collect()
    }
}

/// Index of the smallest score; ties go to the lowest index.
pub fn argmin(scores: &[f64]) -> usize {
    let mut best = 0;
    for (z, &g) in scores.iter().enumerate().skip(1) {
        if g < scores[best] {
            best = z;
        }
    }
    best
}

/// Subset whose gate is closest to the features at its placed mean shape.
pub fn gate_select(img: &DepthImage, face: &FaceBox, model: &GatedModel) -> usize {
    if model.subsets.len() == 1 {
        return 0;
    }
    argmin(&model.gate_scores(img, face))
}

/// Selects a subset once, then runs that subset's full cascade. The shape has
/// the selected subset's landmarks, in its order.
pub fn gated_predict(img: &DepthImage, face: &FaceBox, model: &GatedModel) -> (Shape, usize) {
    gated_predict_traced(img, face, model, None)
}

pub fn gated_predict_traced(img: &DepthImage, face: &FaceBox, model: &GatedModel, mut times: Option<&mut PhaseTimes>) -> (Shape, usize) {
    let z = timed(&mut times, |t| &mut t.gate_selection, || gate_select(img, face, model));
    let reg = &model.subsets[z].regressor;
    let start = place_unchecked(reg.init_shape(), face);
    (reg.refine(img, start, times), z)
}

/// Whether picking `selected` for a face at `yaw` counts as a correct
/// selection: the selected range must contain the yaw. Overlapping bins are
/// all correct where they overlap; a left/right mix-up never is.
pub fn selection_correct(bins: &[PoseBin], selected: usize, yaw: f64) -> bool {
    bins[selected].contains(yaw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::DepthImage;

    fn labels(yaws: &[f64]) -> Vec<PoseLabel> {
        yaws.iter().map(|&yaw| PoseLabel { yaw, all_visible: yaw.abs() < 40.0 }).collect()
    }

    #[test]
    fn single_bin_takes_everything() {
        let bins = vec![PoseBin::new("all", -90.0, 90.0, vec![0])];
        let parts = partition_by_pose(&labels(&[-80.0, 0.0, 12.0, 90.0]), &bins).unwrap();
        assert_eq!(parts, vec![vec![0, 1, 2, 3]]);
    }

    #[test]
    fn five_bin_layout_membership() {
        let bins = pose_layout(5).unwrap();
        let parts = partition_by_pose(&labels(&[0.0, 70.0]), &bins).unwrap();
        assert_eq!(parts, vec![vec![0], vec![0], vec![0], vec![1], vec![]]);
        assert_eq!(bins[1].landmark_ids.len(), 14);
        let err = partition_by_pose(&labels(&[95.0]), &bins).unwrap_err();
        assert!(matches!(err, Error::SampleOutsideBins { index: 0, .. }));
        assert!(pose_layout(4).is_err());
    }

    #[test]
    fn gate_stats() {
        let a = [1.0, 2.0, 3.0];
        let s = GatingStats::from_features([&a[..], &a[..]], 1e-6).unwrap();
        assert_eq!(s.var, vec![1e-6; 3]);
        let rows: Vec<Vec<f64>> = (0..7).map(|i| (0..4).map(|j| ((i * 7 + j * 3) % 5) as f64 * 0.37).collect()).collect();
        let s = GatingStats::from_features(rows.iter().map(|r| r.as_slice()), 1e-6).unwrap();
        for j in 0..4 {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / 7.0;
            assert!((s.mean[j] - mean).abs() < 1e-12);
        }
        let doubled: Vec<&[f64]> = rows.iter().chain(&rows).map(|r| r.as_slice()).collect();
        let d = GatingStats::from_features(doubled, 1e-6).unwrap();
        for j in 0..4 {
            assert!((d.mean[j] - s.mean[j]).abs() < 1e-12);
            assert!((d.var[j] - s.var[j]).abs() < 1e-12);
        }
        assert_eq!(s.distance(&s.mean.clone()), 0.0);
        assert!(GatingStats::from_features([&a[..]], 1e-6).is_err());
        let r = s.clone().refloor(0.0);
        assert_eq!(r, s);
        let r = s.clone().refloor(1.0);
        assert!(r.var.iter().all(|&v| v >= r.floor && v >= s.floor));
        assert_eq!(r.var.iter().filter(|&&v| v == r.floor).count() >= 2, true);
    }

    #[test]
    fn argmin_ties_and_monotone_transform() {
        assert_eq!(argmin(&[2.0, 1.0, 1.0]), 1);
        let g = [0.7, 0.3, 0.9, 0.31];
        let sq: Vec<f64> = g.iter().map(|v| v * v).collect();
        assert_eq!(argmin(&g), argmin(&sq));
    }

    #[test]
    fn zero_distance_subset_wins() {
        let img = DepthImage::from_fn(64, 64, |x, y| ((x * 3 + y * 5) % 17) as f64 / 17.0).unwrap();
        let face = FaceBox::new(16.0, 16.0, 32.0, 32.0).unwrap();
        let feature = crate::features::FeatureKind::Hog(crate::features::HogConfig {
            patch_side: 8,
            cells_per_side: 2,
            bins: 4,
            epsilon: 1e-6,
        });
        let make = |dx: f64| {
            let init = Shape::new(vec![[dx, 0.0], [0.0, 0.1]]);
            CascadeModel { stages: vec![], init_shape: init, landmark_ids: vec![0, 1], feature }
        };
        let subsets: Vec<Subset> = [-0.2, 0.0, 0.2]
            .iter()
            .map(|&dx| {
                let cascade = make(dx);
                let f = feature.extract(&img, &place_unchecked(&cascade.init_shape, &face));
                Subset {
                    bin: PoseBin::new("b", -90.0, 90.0, vec![0, 1]),
                    regressor: Regressor::Grid(cascade),
                    gate: GatingStats { mean: f.iter().map(|v| v + 0.3).collect(), var: vec![1.0; f.len()], floor: 1e-6 },
                }
            })
            .collect();
        let mut model = GatedModel::new(subsets, 2, feature).unwrap();
        let start = place_unchecked(model.subsets[2].regressor.init_shape(), &face);
        model.subsets[2].gate.mean = feature.extract(&img, &start);
        assert_eq!(gate_select(&img, &face, &model), 2);
        assert_eq!(model.gate_scores(&img, &face)[2], 0.0);

        let single = GatedModel::new(vec![model.subsets[0].clone()], 2, feature).unwrap();
        assert_eq!(gate_select(&img, &face, &single), 0);
        let (shape, z) = gated_predict(&img, &face, &single);
        assert_eq!(z, 0);
        assert_eq!(shape, single.subsets[0].regressor.predict(&img, &face));
    }

    #[test]
    fn selection_rule() {
        let bins = pose_layout(5).unwrap();
        assert!(!selection_correct(&bins, 0, 80.0));
        assert!(selection_correct(&bins, 0, -45.0));
        assert!(selection_correct(&bins, 3, 70.0));
        assert!(!selection_correct(&bins, 1, 70.0));
        assert!(!selection_correct(&bins, 4, 70.0));
        assert!(!selection_correct(&bins, 2, 30.0));
        assert!(selection_correct(&bins, 2, 0.0) && selection_correct(&bins, 1, 0.0));
        assert!(!selection_correct(&bins, 3, -10.0));
        let single = pose_layout(1).unwrap();
        assert!([-90.0, -3.0, 0.0, 61.0, 90.0].iter().all(|&y| selection_correct(&single, 0, y)));
    }
}
