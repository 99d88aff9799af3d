//! Ridge-regression descent maps and cascaded shape refinement.
//!
//! A cascade starts from a mean shape placed in the face box and applies
//! `x_{k+1} = x_k + R_k (φ(x_k) − φ̄*)` for `K` stages, where `φ̄*` is the mean
//! feature at the ground-truth landmarks. Each `R_k` is the ridge solution of
//! the least-squares fit from centred features to the remaining shape error.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::features::FeatureKind;
use crate::image::{DepthImage, FaceBox, Shape};
use crate::linalg;
use crate::rng;
use crate::timing::{timed, PhaseTimes};

/// Maps an image and a shape to a fixed-length feature vector.
pub trait Extractor {
    fn len(&self, landmarks: usize) -> usize;
    fn extract_into(&self, img: &DepthImage, shape: &Shape, out: &mut [f64]);
}

impl Extractor for FeatureKind {
    fn len(&self, landmarks: usize) -> usize {
        FeatureKind::len(self, landmarks)
    }

    fn extract_into(&self, img: &DepthImage, shape: &Shape, out: &mut [f64]) {
        FeatureKind::extract_into(self, img, shape, out)
    }
}

/// One cascade stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageModel {
    /// Descent map, `2L' x m`.
    pub descent: DMatrix<f64>,
    /// Mean feature at ground-truth landmarks, length `m`.
    pub mean_feature: Vec<f64>,
    /// Absolute regularisation used for this stage.
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeModel {
    pub stages: Vec<StageModel>,
    /// Mean shape in the unit box frame.
    pub init_shape: Shape,
    /// Indices into the dataset's landmark table.
    pub landmark_ids: Vec<usize>,
    pub feature: FeatureKind,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub stages: usize,
    /// Relative ridge strength: stage `k` uses `gamma * trace(Φ̂Φ̂ᵀ) / m`.
    pub gamma: f64,
    pub jitter_count: usize,
    pub jitter_scale_sigma: f64,
    pub jitter_shift_sigma: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stages: 7,
            gamma: 1e-3,
            jitter_count: 10,
            jitter_scale_sigma: 0.05,
            jitter_shift_sigma: 0.05,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages == 0 {
            return Err(Error::InvalidParameter("cascade needs at least one stage".into()));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::InvalidParameter(format!("gamma {}", self.gamma)));
        }
        if !(self.jitter_scale_sigma >= 0.0 && self.jitter_shift_sigma >= 0.0) {
            return Err(Error::InvalidParameter("jitter sigmas must be non-negative".into()));
        }
        Ok(())
    }
}

/// A training image with its full ground-truth shape and detected face box.
#[derive(Debug, Clone, Copy)]
pub struct SampleRef<'a> {
    /// Preprocessed image.
    pub image: &'a DepthImage,
    pub gt: &'a Shape,
    pub face: FaceBox,
}

/// Result of cascade training: the model plus the mean training error
/// before the first stage and after every stage.
#[derive(Debug, Clone)]
pub struct Trained<M> {
    pub model: M,
    pub trace: Vec<f64>,
}

/// Maps a unit-frame shape into `face`: scaled by the box size and translated
/// to the box centre.
pub fn place_init_shape(unit: &Shape, face: &FaceBox) -> Result<Shape> {
    if !(face.w > 0.0 && face.h > 0.0) {
        return Err(Error::DegenerateBox { w: face.w, h: face.h });
    }
    Ok(place_unchecked(unit, face))
}

pub(crate) fn place_unchecked(unit: &Shape, face: &FaceBox) -> Shape {
    let (cx, cy) = face.center();
    Shape {
        points: unit
            .points
            .iter()
            .map(|p| [cx + p[0] * face.w, cy + p[1] * face.h])
            .collect(),
        visible: unit.visible.clone(),
    }
}

/// Inverse of [`place_init_shape`].
pub fn normalize_shape(shape: &Shape, face: &FaceBox) -> Result<Shape> {
    if !(face.w > 0.0 && face.h > 0.0) {
        return Err(Error::DegenerateBox { w: face.w, h: face.h });
    }
    let (cx, cy) = face.center();
    Ok(Shape {
        points: shape
            .points
            .iter()
            .map(|p| [(p[0] - cx) / face.w, (p[1] - cy) / face.h])
            .collect(),
        visible: shape.visible.clone(),
    })
}

/// Randomly rescaled and displaced copies of `face`: scale ~ N(1, σ_s²),
/// shift ~ N(0, σ_t²) in units of the box size.
pub fn make_jitters(face: &FaceBox, count: usize, scale_sigma: f64, shift_sigma: f64, seed: u64) -> Vec<FaceBox> {
    let mut rng = rng::stream(seed, 0x717e);
    let (cx, cy) = face.center();
    (0..count)
        .map(|_| {
            let z: [f64; 3] = [
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
                StandardNormal.sample(&mut rng),
            ];
            let s = (1.0 + scale_sigma * z[0]).max(0.1);
            let (w, h) = (face.w * s, face.h * s);
            let ncx = cx + shift_sigma * z[1] * face.w;
            let ncy = cy + shift_sigma * z[2] * face.h;
            FaceBox {
                x: ncx - w / 2.0,
                y: ncy - h / 2.0,
                w,
                h,
            }
        })
        .collect()
}

/// Ridge descent map for one stage. `shape_deltas` is `2L' x Ñ`,
/// `features` (already centred) is `m x Ñ`.
pub fn train_stage(shape_deltas: &DMatrix<f64>, features: &DMatrix<f64>, gamma: f64) -> Result<DMatrix<f64>> {
    linalg::ridge(shape_deltas, features, gamma)
}

/// Ridge objective `‖X̂ − RΦ̂‖² + γ‖R‖²`.
pub fn ridge_objective(r: &DMatrix<f64>, shape_deltas: &DMatrix<f64>, features: &DMatrix<f64>, gamma: f64) -> f64 {
    linalg::frob2(&(shape_deltas - r * features)) + gamma * linalg::frob2(r)
}

pub(crate) fn check_samples(samples: &[SampleRef<'_>], landmark_ids: &[usize]) -> Result<usize> {
    if samples.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    let full = samples[0].gt.len();
    if let Some((i, s)) = samples.iter().enumerate().find(|(_, s)| s.gt.len() != full) {
        return Err(Error::InconsistentLandmarks(format!(
            "sample {i} has {} landmarks, sample 0 has {full}",
            s.gt.len()
        )));
    }
    if landmark_ids.is_empty() {
        return Err(Error::InconsistentLandmarks("empty landmark subset".into()));
    }
    if let Some(&bad) = landmark_ids.iter().find(|&&i| i >= full) {
        return Err(Error::InconsistentLandmarks(format!(
            "landmark id {bad} outside table of {full}"
        )));
    }
    Ok(full)
}

/// Mean unit-frame ground-truth shape over the samples.
pub fn mean_unit_shape(samples: &[SampleRef<'_>], landmark_ids: &[usize]) -> Result<Shape> {
    let l = landmark_ids.len();
    let mut acc = vec![[0.0f64; 2]; l];
    for s in samples {
        let unit = normalize_shape(&s.gt.select(landmark_ids), &s.face)?;
        for (a, p) in acc.iter_mut().zip(&unit.points) {
            a[0] += p[0];
            a[1] += p[1];
        }
    }
    let n = samples.len() as f64;
    Ok(Shape::new(acc.into_iter().map(|a| [a[0] / n, a[1] / n]).collect()))
}

/// Training shapes: every sample's detected box followed by its jitters.
pub(crate) struct InitSet {
    pub owner: Vec<usize>,
    pub shapes: Vec<Shape>,
}

pub(crate) fn initial_shapes(samples: &[SampleRef<'_>], init: &Shape, cfg: &TrainConfig) -> InitSet {
    let mut owner = Vec::new();
    let mut shapes = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let seed = rng::derive_seed(cfg.seed, i as u64);
        let mut boxes = vec![s.face];
        boxes.extend(make_jitters(
            &s.face,
            cfg.jitter_count,
            cfg.jitter_scale_sigma,
            cfg.jitter_shift_sigma,
            seed,
        ));
        for b in boxes {
            owner.push(i);
            shapes.push(place_unchecked(init, &b));
        }
    }
    InitSet { owner, shapes }
}

pub(crate) fn mean_error(shapes: &[Shape], owner: &[usize], targets: &[Shape]) -> f64 {
    let mut total = 0.0;
    for (s, &o) in shapes.iter().zip(owner) {
        let t = &targets[o];
        let e: f64 = s
            .points
            .iter()
            .zip(&t.points)
            .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
            .sum();
        total += e / s.len() as f64;
    }
    total / shapes.len().max(1) as f64
}

/// Trains descent maps for any extractor; returns the stages and the error
/// trace. `init` is the unit-frame starting shape.
pub fn train_stages<E: Extractor>(
    samples: &[SampleRef<'_>],
    landmark_ids: &[usize],
    init: &Shape,
    cfg: &TrainConfig,
    extractor: &E,
) -> Result<(Vec<StageModel>, Vec<f64>)> {
    cfg.validate()?;
    check_samples(samples, landmark_ids)?;
    let l = landmark_ids.len();
    let m = extractor.len(l);
    let targets: Vec<Shape> = samples.iter().map(|s| s.gt.select(landmark_ids)).collect();

    let mut mean_feature = vec![0.0; m];
    let mut buf = vec![0.0; m];
    for (s, t) in samples.iter().zip(&targets) {
        extractor.extract_into(s.image, t, &mut buf);
        for (a, b) in mean_feature.iter_mut().zip(&buf) {
            *a += b;
        }
    }
    let inv = 1.0 / samples.len() as f64;
    mean_feature.iter_mut().for_each(|v| *v *= inv);

    let InitSet { owner, mut shapes } = initial_shapes(samples, init, cfg);
    let n = shapes.len();
    let mut trace = vec![mean_error(&shapes, &owner, &targets)];
    let mut stages = Vec::with_capacity(cfg.stages);

    for _ in 0..cfg.stages {
        let mut phi = DMatrix::<f64>::zeros(m, n);
        let mut deltas = DMatrix::<f64>::zeros(2 * l, n);
        for (j, (shape, &o)) in shapes.iter().zip(&owner).enumerate() {
            let mut col = phi.column_mut(j);
            let slice = col.as_mut_slice();
            extractor.extract_into(samples[o].image, shape, slice);
            for (v, mu) in slice.iter_mut().zip(&mean_feature) {
                *v -= mu;
            }
            for (k, (p, t)) in shape.points.iter().zip(&targets[o].points).enumerate() {
                deltas[(2 * k, j)] = t[0] - p[0];
                deltas[(2 * k + 1, j)] = t[1] - p[1];
            }
        }
        let gamma = cfg.gamma * linalg::frob2(&phi) / m as f64;
        let descent = train_stage(&deltas, &phi, gamma)?;
        if descent.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("descent map"));
        }
        let update = &descent * &phi;
        for (j, shape) in shapes.iter_mut().enumerate() {
            for (k, p) in shape.points.iter_mut().enumerate() {
                p[0] += update[(2 * k, j)];
                p[1] += update[(2 * k + 1, j)];
            }
        }
        trace.push(mean_error(&shapes, &owner, &targets));
        stages.push(StageModel {
            descent,
            mean_feature: mean_feature.clone(),
            gamma,
        });
    }
    Ok((stages, trace))
}

/// Trains a full cascade: mean-shape initialisation plus `K` ridge stages.
pub fn train_cascade(
    samples: &[SampleRef<'_>],
    landmark_ids: &[usize],
    cfg: &TrainConfig,
    feature: FeatureKind,
) -> Result<Trained<CascadeModel>> {
    feature.validate()?;
    check_samples(samples, landmark_ids)?;
    let init_shape = mean_unit_shape(samples, landmark_ids)?;
    let (stages, trace) = train_stages(samples, landmark_ids, &init_shape, cfg, &feature)?;
    Ok(Trained {
        model: CascadeModel {
            stages,
            init_shape,
            landmark_ids: landmark_ids.to_vec(),
            feature,
        },
        trace,
    })
}

/// Runs the stages from an already placed shape.
pub fn refine<E: Extractor>(
    stages: &[StageModel],
    extractor: &E,
    img: &DepthImage,
    start: Shape,
    mut times: Option<&mut PhaseTimes>,
) -> Shape {
    let mut shape = start;
    let l = shape.len();
    let mut phi = DVector::<f64>::zeros(extractor.len(l));
    for stage in stages {
        timed(&mut times, |t| &mut t.feature_extraction, || {
            extractor.extract_into(img, &shape, phi.as_mut_slice());
        });
        timed(&mut times, |t| &mut t.location_update, || {
            for (v, mu) in phi.iter_mut().zip(&stage.mean_feature) {
                *v -= mu;
            }
            let update = &stage.descent * &phi;
            for (k, p) in shape.points.iter_mut().enumerate() {
                p[0] += update[2 * k];
                p[1] += update[2 * k + 1];
            }
        });
    }
    shape
}

impl CascadeModel {
    pub fn landmarks(&self) -> usize {
        self.landmark_ids.len()
    }

    pub fn feature_len(&self) -> usize {
        self.feature.len(self.landmarks())
    }

    /// Shape after all stages, starting from the mean shape in `face`.
    pub fn predict(&self, img: &DepthImage, face: &FaceBox) -> Shape {
        self.predict_traced(img, face, None)
    }

    pub fn predict_traced(&self, img: &DepthImage, face: &FaceBox, times: Option<&mut PhaseTimes>) -> Shape {
        refine(&self.stages, &self.feature, img, place_unchecked(&self.init_shape, face), times)
    }

    /// Copy with only the first `k` stages.
    pub fn truncated(&self, k: usize) -> Self {
        Self {
            stages: self.stages[..k.min(self.stages.len())].to_vec(),
            ..self.clone()
        }
    }
}
