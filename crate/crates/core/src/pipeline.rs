//! End-to-end training and evaluation: detection, preprocessing, flip
//! augmentation, pose partitioning and one regressor plus gate per subset.

use std::time::Instant;

use crate::cascade::{train_cascade, SampleRef, TrainConfig};
use crate::detect::{detect_face, DetectConfig};
use crate::error::{Error, Result};
use crate::eval::{detection_ok, localization_error, EvalRecord};
use crate::features::FeatureKind;
use crate::gating::{fit_gate, gated_predict, partition_by_pose, selection_correct, GatedModel, PoseBin, PoseLabel, Regressor, Subset};
use crate::image::{hflip, hflip_image, DepthImage, FaceBox, LandmarkTable, Shape};
use crate::preprocess::{preprocess, PreprocessConfig};
use crate::rng::derive_seed;
use crate::smuf::{train_smuf_traced, SmufConfig};
use crate::synth::SynthSample;

/// A preprocessed image ready for training or evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    /// Normal-z image.
    pub image: DepthImage,
    pub gt: Shape,
    pub yaw: f64,
    pub face: FaceBox,
}

impl Prepared {
    pub fn as_ref(&self) -> SampleRef<'_> {
        SampleRef {
            image: &self.image,
            gt: &self.gt,
            face: self.face,
        }
    }
}

/// Preprocesses a raw depth image; the face box is detected unless given.
pub fn prepare(
    raw: &DepthImage,
    gt: Shape,
    yaw: f64,
    face: Option<FaceBox>,
    pre: &PreprocessConfig,
    det: &DetectConfig,
) -> Result<Prepared> {
    let face = match face {
        Some(f) => f,
        None => detect_face(raw, det)?.face,
    };
    Ok(Prepared {
        image: preprocess(raw, pre)?.image,
        gt,
        yaw,
        face,
    })
}

/// Preprocesses synthetic samples, keeping the box detected at render time.
pub fn prepare_synth(samples: &[SynthSample], pre: &PreprocessConfig) -> Result<Vec<Prepared>> {
    samples
        .iter()
        .map(|s| prepare(&s.image, s.gt.clone(), s.yaw, Some(s.face), pre, &DetectConfig::default()))
        .collect()
}

/// Mirror image of a sample: flipped pixels, box and landmarks (with the
/// mirror permutation applied) and negated yaw.
pub fn flipped(sample: &Prepared, mirror: &[usize]) -> Result<Prepared> {
    let (image, gt) = hflip(&sample.image, &sample.gt, mirror)?;
    debug_assert_eq!(image, hflip_image(&sample.image));
    Ok(Prepared {
        face: sample.face.hflip(sample.image.width()),
        image,
        gt,
        yaw: -sample.yaw,
    })
}

/// Originals followed by their mirrors.
pub fn flip_augment(samples: &[Prepared], mirror: &[usize]) -> Result<Vec<Prepared>> {
    let mut out = samples.to_vec();
    for s in samples {
        out.push(flipped(s, mirror)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MethodConfig {
    Grid { feature: FeatureKind, train: TrainConfig },
    Smuf(SmufConfig),
}

impl MethodConfig {
    pub fn name(&self) -> &'static str {
        match self {
            MethodConfig::Grid { .. } => "grid",
            MethodConfig::Smuf(_) => "smuf",
        }
    }

    fn seed(&self) -> u64 {
        match self {
            MethodConfig::Grid { train, .. } => train.seed,
            MethodConfig::Smuf(c) => c.train.seed,
        }
    }

    fn with_seed(&self, seed: u64) -> Self {
        let mut out = *self;
        match &mut out {
            MethodConfig::Grid { train, .. } => train.seed = seed,
            MethodConfig::Smuf(c) => c.train.seed = seed,
        }
        out
    }

    /// Features the gates use: the cascade features for GRID, HOG for SMUF.
    pub fn gate_feature(&self) -> FeatureKind {
        match self {
            MethodConfig::Grid { feature, .. } => *feature,
            MethodConfig::Smuf(_) => FeatureKind::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            MethodConfig::Grid { feature, train } => {
                feature.validate()?;
                train.validate()
            }
            MethodConfig::Smuf(c) => c.validate(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatedTrainConfig {
    pub bins: Vec<PoseBin>,
    pub method: MethodConfig,
    pub variance_floor: f64,
    /// Gate variances are floored at this fraction of their median as well.
    pub relative_floor: f64,
    /// Add the mirror image of every training sample.
    pub flip: bool,
}

/// What training did for one subset.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsetReport {
    pub name: String,
    pub samples: usize,
    pub landmarks: usize,
    /// Mean training error (px) before the first stage and after each stage.
    pub trace: Vec<f64>,
    /// Human-readable matrix sizes of the first stage.
    pub dims: String,
}

/// Trains one regressor and gate per pose bin. Samples whose yaw lies outside
/// every bin are left out, so a layout spanning `[-45, 45]` can train on a
/// full-profile corpus. Subset `z` trains with seed
/// `derive_seed(seed, z)`, so a bin shared by two layouts at the same index
/// yields the same cascade.
pub fn train_gated(samples: &[Prepared], table: &LandmarkTable, cfg: &GatedTrainConfig) -> Result<(GatedModel, Vec<SubsetReport>)> {
    cfg.method.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyInput("no training samples"));
    }
    if let Some(s) = samples.iter().find(|s| s.gt.len() != table.len()) {
        return Err(Error::InconsistentLandmarks(format!(
            "sample has {} landmarks, table {}",
            s.gt.len(),
            table.len()
        )));
    }
    let in_span: Vec<Prepared> = samples
        .iter()
        .filter(|s| cfg.bins.iter().any(|b| b.contains(s.yaw)))
        .cloned()
        .collect();
    if in_span.is_empty() {
        return Err(Error::EmptyInput("no training sample lies inside the pose bins"));
    }
    let data = if cfg.flip {
        flip_augment(&in_span, &table.mirror)?
    } else {
        in_span
    };
    let labels: Vec<PoseLabel> = data
        .iter()
        .map(|s| PoseLabel {
            yaw: s.yaw,
            all_visible: s.gt.visible.iter().all(|&v| v),
        })
        .collect();
    let parts = partition_by_pose(&labels, &cfg.bins)?;
    let gate_feature = cfg.method.gate_feature();

    let mut subsets = Vec::with_capacity(cfg.bins.len());
    let mut reports = Vec::with_capacity(cfg.bins.len());
    for (z, (bin, idx)) in cfg.bins.iter().zip(&parts).enumerate() {
        if idx.len() < 2 {
            return Err(Error::InvalidParameter(format!(
                "pose bin {} has {} training samples; need at least 2",
                bin.name,
                idx.len()
            )));
        }
        let refs: Vec<SampleRef<'_>> = idx.iter().map(|&i| data[i].as_ref()).collect();
        let ids = &bin.landmark_ids;
        let method = cfg.method.with_seed(derive_seed(cfg.method.seed(), z as u64));
        let (regressor, trace, dims) = match method {
            MethodConfig::Grid { feature, train } => {
                let t = train_cascade(&refs, ids, &train, feature)?;
                let dims = t
                    .model
                    .stages
                    .first()
                    .map(|s| format!("R {}x{}", s.descent.nrows(), s.descent.ncols()))
                    .unwrap_or_default();
                (Regressor::Grid(t.model), t.trace, dims)
            }
            MethodConfig::Smuf(c) => {
                let (m, tr) = train_smuf_traced(&refs, ids, &c)?;
                let dims = m
                    .stages
                    .first()
                    .map(|s| format!("W {}x{}, R {}x{}", s.w.nrows(), s.w.ncols(), s.r.nrows(), s.r.ncols()))
                    .unwrap_or_default();
                (Regressor::Smuf(m), tr.errors, dims)
            }
        };
        let gate = fit_gate(&refs, ids, &gate_feature, cfg.variance_floor)?.refloor(cfg.relative_floor);
        reports.push(SubsetReport {
            name: bin.name.clone(),
            samples: refs.len(),
            landmarks: ids.len(),
            trace,
            dims,
        });
        subsets.push(Subset {
            bin: bin.clone(),
            regressor,
            gate,
        });
    }
    Ok((GatedModel::new(subsets, table.len(), gate_feature)?, reports))
}

/// Prediction for one image: the shape over the full landmark table (only
/// the selected subset's landmarks visible) and the selected subset.
pub fn predict_full(model: &GatedModel, img: &DepthImage, face: &FaceBox) -> (Shape, usize) {
    let (shape, z) = gated_predict(img, face, model);
    (shape.expand(model.subsets[z].regressor.landmark_ids(), model.table_len), z)
}

/// Runs the gated model on every test sample and records errors, detection
/// and selection outcomes.
pub fn evaluate(model: &GatedModel, test: &[Prepared], margin: f64) -> Result<Vec<EvalRecord>> {
    let bins: Vec<PoseBin> = model.subsets.iter().map(|s| s.bin.clone()).collect();
    test.iter()
        .map(|s| {
            let start = Instant::now();
            let (pred, z) = predict_full(model, &s.image, &s.face);
            let predict_time = start.elapsed().as_secs_f64();
            Ok(EvalRecord {
                errors: localization_error(&pred, &s.gt, s.image.pitch_mm)?,
                selected_subset: z,
                selection_correct: selection_correct(&bins, z, s.yaw),
                detection_ok: detection_ok(&s.face, &s.gt, margin),
                predict_time,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gating::pose_layout;
    use crate::synth::{make_dataset, DatasetConfig, YawDistribution};

    fn corpus(n: usize, seed: u64) -> Vec<Prepared> {
        let cfg = DatasetConfig {
            yaw: YawDistribution::Uniform { min: -90.0, max: 90.0 },
            ..DatasetConfig::default()
        };
        prepare_synth(&make_dataset(n, &cfg, seed).unwrap(), &PreprocessConfig::default()).unwrap()
    }

    #[test]
    fn flip_is_an_involution_on_samples() {
        let s = &corpus(1, 3)[0];
        let mirror = LandmarkTable::face22().mirror;
        let twice = flipped(&flipped(s, &mirror).unwrap(), &mirror).unwrap();
        assert_eq!(twice.image, s.image);
        assert_eq!(twice.yaw, s.yaw);
        assert_eq!(twice.gt.visible, s.gt.visible);
        for (a, b) in twice.gt.points.iter().zip(&s.gt.points) {
            assert!((a[0] - b[0]).abs() < 1e-9 && a[1] == b[1]);
        }
        assert!((twice.face.x - s.face.x).abs() < 1e-9);
    }

    #[test]
    fn too_small_bin_is_reported() {
        let data = corpus(3, 5);
        let cfg = GatedTrainConfig {
            bins: pose_layout(5).unwrap(),
            method: MethodConfig::Grid {
                feature: FeatureKind::default(),
                train: TrainConfig { stages: 1, ..TrainConfig::default() },
            },
            variance_floor: 1e-6,
            relative_floor: 1.0,
            flip: false,
        };
        let err = train_gated(&data, &LandmarkTable::face22(), &cfg).unwrap_err();
        assert!(matches!(err, Error::InvalidParameter(_)), "{err}");
    }
}
