//! Simultaneous learning of binary features and descent maps.
//!
//! Each stage learns a projection `W` (p x B) shared by all landmarks and a
//! descent map `R` over the concatenated binary codes. Codes are
//! `sgn(Wᵀ(d − d̄*))` of per-landmark depth-difference vectors `d`, where `d̄*`
//! is the mean depth-difference vector at the ground-truth landmarks.
//!
//! Matrix layout: depth differences and codes are kept one column per
//! (sample, landmark) pair, landmark-major within each sample, so column
//! `n·L' + l` belongs to landmark `l` of sample `n`:
//!
//! ```text
//!   D̂, Φ̃ (per-landmark form)        Φ̃ stacked form, (B·L') x N
//!   ┌───────┬───────┬─────┐          ┌──────────┐
//!   │ n0 l0 │ n0 l1 │ ... │    ->    │ bits l0  │  column n
//!   └───────┴───────┴─────┘          │ bits l1  │
//!                                    │ ...      │
//!                                    └──────────┘
//! ```
//!
//! The regression consumes the stacked form.

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};

use crate::cascade::{initial_shapes, mean_error, mean_unit_shape, InitSet, SampleRef, TrainConfig, Trained};
use crate::error::{Error, Result};
use crate::features::binary::{depth_diff_into, diff_len, PackedCode};
use crate::image::{DepthImage, FaceBox, Shape};
use crate::linalg;
use crate::rng;
use crate::timing::{timed, PhaseTimes};

/// Default relative ridge strength for SMUF stages.
pub const SMUF_GAMMA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmufConfig {
    /// Stage count, relative ridge strength, jitter and seed.
    pub train: TrainConfig,
    pub bits: usize,
    pub lambda: f64,
    pub alternations: usize,
    pub patch_side: usize,
}

impl Default for SmufConfig {
    fn default() -> Self {
        Self {
            // binary codes overfit with the cascade's 1e-3
            train: TrainConfig {
                gamma: SMUF_GAMMA,
                ..TrainConfig::default()
            },
            bits: 64,
            lambda: 1.0,
            alternations: 4,
            patch_side: 15,
        }
    }
}

impl SmufConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.bits == 0 {
            return Err(Error::InvalidParameter("bits must be at least 1".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!("lambda {}", self.lambda)));
        }
        if !(self.train.gamma > 0.0) {
            return Err(Error::InvalidParameter("binary feature learning needs gamma > 0".into()));
        }
        if self.alternations == 0 {
            return Err(Error::InvalidParameter("alternations must be at least 1".into()));
        }
        if self.patch_side % 2 == 0 {
            return Err(Error::EvenPatchSide(self.patch_side));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmufStage {
    /// Projection, `p x B`.
    pub w: DMatrix<f64>,
    /// Descent map over stacked codes, `2L' x (B·L')`.
    pub r: DMatrix<f64>,
    /// Mean ground-truth depth-difference vector per landmark, `p x L'`.
    pub mean_diff: DMatrix<f64>,
    pub lambda: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmufModel {
    pub stages: Vec<SmufStage>,
    pub init_shape: Shape,
    pub landmark_ids: Vec<usize>,
    pub patch_side: usize,
    pub bits: usize,
}

/// Training matrices of one stage.
#[derive(Debug, Clone)]
pub struct SmufTrainState {
    /// Centred depth differences, `p x (L'·N)`.
    pub d_hat: DMatrix<f64>,
    /// Binary codes, `B x (L'·N)`, entries in {0, 1}.
    pub phi: DMatrix<f64>,
    /// Shape deltas (ground truth minus current), `2L' x N`.
    pub x_hat: DMatrix<f64>,
    pub landmarks: usize,
}

/// Objective value split into its fit and quantisation parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub c: f64,
    pub c1: f64,
    pub c2: f64,
}

/// Per-alternation diagnostics of one stage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageTrace {
    /// Fit term after each `R` update (the last entry follows the closing refit).
    pub c1: Vec<f64>,
    /// `‖Φ̃ − 0.5 − WᵀD̂‖` after each `W` update.
    pub quantization: Vec<f64>,
}

/// Stacks a `B x (L'·N)` matrix into `(B·L') x N`.
pub fn stack(m: &DMatrix<f64>, landmarks: usize) -> DMatrix<f64> {
    let b = m.nrows();
    let n = m.ncols() / landmarks;
    DMatrix::from_fn(b * landmarks, n, |row, col| m[(row % b, col * landmarks + row / b)])
}

/// Inverse of [`stack`].
pub fn unstack(m: &DMatrix<f64>, landmarks: usize) -> DMatrix<f64> {
    let b = m.nrows() / landmarks;
    let n = m.ncols();
    DMatrix::from_fn(b, n * landmarks, |row, col| m[(row + (col % landmarks) * b, col / landmarks)])
}

fn codes_of(proj: &DMatrix<f64>) -> DMatrix<f64> {
    proj.map(|v| if v >= 0.0 { 1.0 } else { 0.0 })
}

impl SmufTrainState {
    pub fn new(d_hat: DMatrix<f64>, x_hat: DMatrix<f64>, landmarks: usize) -> Result<Self> {
        if landmarks == 0 || x_hat.nrows() != 2 * landmarks {
            return Err(Error::DimensionMismatch(format!(
                "shape deltas have {} rows for {landmarks} landmarks",
                x_hat.nrows()
            )));
        }
        if d_hat.ncols() != landmarks * x_hat.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "depth differences have {} columns, expected {}",
                d_hat.ncols(),
                landmarks * x_hat.ncols()
            )));
        }
        Ok(Self {
            phi: DMatrix::zeros(0, d_hat.ncols()),
            d_hat,
            x_hat,
            landmarks,
        })
    }

    pub fn samples(&self) -> usize {
        self.x_hat.ncols()
    }

    /// `Φ̃ = 0.5 (sgn(WᵀD̂) + 1)`.
    pub fn recompute_codes(&mut self, w: &DMatrix<f64>) -> Result<()> {
        self.check_w(w)?;
        self.phi = codes_of(&(w.transpose() * &self.d_hat));
        Ok(())
    }

    fn check_w(&self, w: &DMatrix<f64>) -> Result<()> {
        if w.nrows() != self.d_hat.nrows() || w.ncols() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "projection is {}x{}, depth differences have {} rows",
                w.nrows(),
                w.ncols(),
                self.d_hat.nrows()
            )));
        }
        if self.phi.nrows() != 0 && self.phi.nrows() != w.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "codes have {} bits, projection {}",
                self.phi.nrows(),
                w.ncols()
            )));
        }
        Ok(())
    }

    fn check_r(&self, r: &DMatrix<f64>) -> Result<()> {
        if r.nrows() != self.x_hat.nrows() || r.ncols() != self.phi.nrows() * self.landmarks {
            return Err(Error::DimensionMismatch(format!(
                "descent map is {}x{}, expected {}x{}",
                r.nrows(),
                r.ncols(),
                self.x_hat.nrows(),
                self.phi.nrows() * self.landmarks
            )));
        }
        Ok(())
    }

    /// `Φ̃ − 0.5 − WᵀD̂` in per-landmark form.
    pub fn quantization_residual(&self, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_w(w)?;
        Ok(self.phi.add_scalar(-0.5) - w.transpose() * &self.d_hat)
    }
}

/// `C = ‖X̂ − RΦ̃‖² + γ‖R‖² + λ‖R(Φ̃ − 0.5 − WᵀD̂)‖²` with both code matrices
/// in stacked form.
pub fn smuf_objective(state: &SmufTrainState, w: &DMatrix<f64>, r: &DMatrix<f64>, gamma: f64, lambda: f64) -> Result<Objective> {
    state.check_r(r)?;
    let phi = stack(&state.phi, state.landmarks);
    let q = stack(&state.quantization_residual(w)?, state.landmarks);
    let c1 = linalg::frob2(&(&state.x_hat - r * &phi)) + gamma * linalg::frob2(r);
    let c2 = linalg::frob2(&(r * q));
    Ok(Objective {
        c: c1 + lambda * c2,
        c1,
        c2,
    })
}

/// `∂C/∂R = −2(X̂ − RΦ̃)Φ̃ᵀ + 2γR + 2λRQQᵀ`.
pub fn objective_gradient(state: &SmufTrainState, w: &DMatrix<f64>, r: &DMatrix<f64>, gamma: f64, lambda: f64) -> Result<DMatrix<f64>> {
    state.check_r(r)?;
    let phi = stack(&state.phi, state.landmarks);
    let q = stack(&state.quantization_residual(w)?, state.landmarks);
    let resid = &state.x_hat - r * &phi;
    Ok(resid * phi.transpose() * -2.0 + r * (2.0 * gamma) + (r * &q) * q.transpose() * (2.0 * lambda))
}

/// Closed-form minimiser of the objective in `R` at fixed `W` and codes:
/// `R = X̂Φ̃ᵀ (Φ̃Φ̃ᵀ + γI + λQQᵀ)⁻¹`.
///
/// When there are fewer code rows than augmented columns the primal system
/// is built directly, with `Φ̃Φ̃ᵀ` counted by popcount; otherwise it is solved
/// as a dual ridge regression on the design `[Φ̃, √λ Q]` with targets `[X̂, 0]`.
pub fn update_r(state: &SmufTrainState, w: &DMatrix<f64>, gamma: f64, lambda: f64) -> Result<DMatrix<f64>> {
    let n = state.samples();
    let phi = stack(&state.phi, state.landmarks);
    let q = stack(&state.quantization_residual(w)?, state.landmarks);
    let rows = phi.nrows();
    if rows <= 2 * n {
        let mut g = binary_gram(&phi);
        if lambda > 0.0 {
            g += linalg::gram(&q) * lambda;
        }
        for i in 0..rows {
            g[(i, i)] += gamma;
        }
        let rhs = &phi * state.x_hat.transpose();
        return Ok(linalg::spd_solve(g, &rhs, gamma)?.transpose());
    }
    let mut design = DMatrix::<f64>::zeros(rows, 2 * n);
    design.columns_mut(0, n).copy_from(&phi);
    design.columns_mut(n, n).copy_from(&(q * lambda.sqrt()));
    let mut targets = DMatrix::<f64>::zeros(state.x_hat.nrows(), 2 * n);
    targets.columns_mut(0, n).copy_from(&state.x_hat);
    linalg::ridge(&targets, &design, gamma)
}

/// `A Aᵀ` for a 0/1 matrix, as exact co-occurrence counts.
pub fn binary_gram(a: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, n) = a.shape();
    let words = n.div_ceil(64);
    let mut bits = vec![0u64; m * words];
    for (j, col) in a.column_iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            if v != 0.0 {
                bits[i * words + j / 64] |= 1 << (j % 64);
            }
        }
    }
    let mut g = DMatrix::zeros(m, m);
    for i in 0..m {
        let ri = &bits[i * words..(i + 1) * words];
        for j in i..m {
            let rj = &bits[j * words..(j + 1) * words];
            let c: u32 = ri.iter().zip(rj).map(|(x, y)| (x & y).count_ones()).sum();
            g[(i, j)] = c as f64;
            g[(j, i)] = c as f64;
        }
    }
    g
}

/// Relative residual `‖RR⁺X̂ − X̂‖ / ‖X̂‖` above which `R` counts as rank
/// deficient.
pub const PINV_RESIDUAL: f64 = 1e-3;

/// `W = [(R⁺X̂ + λ(Φ̃ − 0.5)) D̂ᵀ]ᵀ / (1 + γ + λ)` with `R⁺X̂` unstacked to
/// per-landmark form.
pub fn update_w(state: &SmufTrainState, r: &DMatrix<f64>, gamma: f64, lambda: f64) -> Result<DMatrix<f64>> {
    state.check_r(r)?;
    let pinv = linalg::pinv(r, 1e-12)?;
    let ideal = &pinv * &state.x_hat;
    let scale = state.x_hat.norm();
    if scale > 0.0 {
        let rel = (r * &ideal - &state.x_hat).norm() / scale;
        if !(rel <= PINV_RESIDUAL) {
            return Err(Error::PseudoInverseResidual(rel));
        }
    }
    let target = unstack(&ideal, state.landmarks) + state.phi.add_scalar(-0.5) * lambda;
    let w = &state.d_hat * target.transpose() / (1.0 + gamma + lambda);
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("projection update"));
    }
    Ok(w)
}

/// Random `p x b` matrix with orthonormal columns (or rows when `b > p`),
/// from the QR factor of a seeded Gaussian matrix.
pub fn orthonormal_init(p: usize, b: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = rng::stream(seed, 0x0a7);
    let (rows, cols) = if p >= b { (p, b) } else { (b, p) };
    let g = DMatrix::<f64>::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng));
    let q = g.qr().q();
    if p >= b {
        q
    } else {
        q.transpose()
    }
}

/// Alternating optimisation of one stage. Returns `(W, R, γ, trace)`;
/// `state.phi` holds the codes of the returned `W` on exit.
///
/// Depth differences are whitened while learning so that `D̂D̂ᵀ = I`, which
/// the closed-form projection update relies on; the returned `W` is
/// expressed for raw inputs.
/// After the last alternation the codes are recomputed with the final `W` and
/// `R` is refitted once. Of all `(W, R)` pairs seen, the one with the lowest
/// fit term is returned; the alternation has no descent guarantee.
pub fn train_smuf_stage(
    state: &mut SmufTrainState,
    bits: usize,
    gamma_rel: f64,
    lambda: f64,
    alternations: usize,
    seed: u64,
) -> Result<(DMatrix<f64>, DMatrix<f64>, f64, StageTrace)> {
    if !(gamma_rel > 0.0) {
        return Err(Error::InvalidParameter("binary feature learning needs gamma > 0".into()));
    }
    let m = whitener(&state.d_hat);
    let raw = std::mem::replace(&mut state.d_hat, DMatrix::zeros(0, 0));
    state.d_hat = &m * &raw;
    state.phi = DMatrix::zeros(0, raw.ncols());

    let result = alternate(state, bits, gamma_rel, lambda, alternations, seed);
    state.d_hat = raw;
    let (w, r, gamma, trace) = result?;
    // codes of M d under W equal codes of d under M W (M symmetric)
    Ok((&m * w, r, gamma, trace))
}

/// Shrinkage added to every eigenvalue before whitening, relative to the mean
/// eigenvalue. Full whitening lets the projection fit noise directions.
pub const WHITEN_SHRINK: f64 = 1.0;

/// Symmetric whitening matrix `(D̂D̂ᵀ + εI)^(-1/2)` with `ε` the mean
/// eigenvalue times [`WHITEN_SHRINK`]. Strong directions end up near unit
/// scale, which is what the closed-form projection update assumes.
fn whitener(d: &DMatrix<f64>) -> DMatrix<f64> {
    let p = d.nrows();
    let cov = d * d.transpose();
    let eps = (cov.trace() / p.max(1) as f64).max(f64::MIN_POSITIVE) * WHITEN_SHRINK;
    let eig = nalgebra::SymmetricEigen::new(cov);
    let scale = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / (l.max(0.0) + eps).sqrt()));
    &eig.eigenvectors * scale * eig.eigenvectors.transpose()
}

fn alternate(
    state: &mut SmufTrainState,
    bits: usize,
    gamma_rel: f64,
    lambda: f64,
    alternations: usize,
    seed: u64,
) -> Result<(DMatrix<f64>, DMatrix<f64>, f64, StageTrace)> {
    let mut w = orthonormal_init(state.d_hat.nrows(), bits, seed);
    state.recompute_codes(&w)?;
    let gamma = gamma_rel * linalg::frob2(&state.phi) / (bits * state.landmarks) as f64;
    let gamma = if gamma > 0.0 { gamma } else { gamma_rel };
    let mut trace = StageTrace::default();
    // (C1, W the codes came from, R) of the best pair seen
    let mut best: Option<(f64, DMatrix<f64>, DMatrix<f64>)> = None;
    let mut keep = |c1: f64, w: &DMatrix<f64>, r: &DMatrix<f64>| {
        if best.as_ref().is_none_or(|b| c1 < b.0) {
            best = Some((c1, w.clone(), r.clone()));
        }
    };
    for it in 0..alternations {
        if it > 0 {
            state.recompute_codes(&w)?;
        }
        let r = update_r(state, &w, gamma, lambda)?;
        let c1 = smuf_objective(state, &w, &r, gamma, lambda)?.c1;
        trace.c1.push(c1);
        keep(c1, &w, &r);
        w = update_w(state, &r, gamma, lambda)?;
        trace.quantization.push(state.quantization_residual(&w)?.norm());
    }
    state.recompute_codes(&w)?;
    let r = update_r(state, &w, gamma, lambda)?;
    let c1 = smuf_objective(state, &w, &r, gamma, lambda)?.c1;
    trace.c1.push(c1);
    keep(c1, &w, &r);
    let (_, best_w, r) = best.expect("at least one alternation");
    if best_w != w {
        state.recompute_codes(&best_w)?;
    }
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("descent map"));
    }
    Ok((best_w, r, gamma, trace))
}

impl SmufStage {
    pub fn bits(&self) -> usize {
        self.w.ncols()
    }

    pub fn patch_len(&self) -> usize {
        self.w.nrows()
    }

    /// Packed code of every landmark, landmark-major. All landmarks are
    /// projected in one matrix product.
    pub fn codes(&self, img: &DepthImage, shape: &Shape, patch_side: usize) -> PackedCode {
        let (p, b) = self.w.shape();
        let l = shape.len();
        let mut d = DMatrix::zeros(p, l);
        for (k, &pt) in shape.points.iter().enumerate() {
            depth_diff_into(img, pt, patch_side, d.column_mut(k).as_mut_slice());
        }
        d -= &self.mean_diff;
        let proj = d.transpose() * &self.w;
        let mut code = PackedCode::zeros(b * l);
        for k in 0..l {
            for j in 0..b {
                if proj[(k, j)] >= 0.0 {
                    code.set(k * b + j);
                }
            }
        }
        code
    }

    /// `R Φ̃` by summing the columns of `R` selected by set bits.
    pub fn gather_update(&self, code: &PackedCode) -> Vec<f64> {
        let rows = self.r.nrows();
        let mut out = vec![0.0; rows];
        let data = self.r.as_slice();
        for j in code.ones() {
            let col = &data[j * rows..(j + 1) * rows];
            for (o, v) in out.iter_mut().zip(col) {
                *o += v;
            }
        }
        out
    }

    /// Same as [`SmufStage::gather_update`] through a dense product.
    pub fn dense_update(&self, code: &PackedCode) -> Vec<f64> {
        let phi = nalgebra::DVector::from_fn(code.bits, |j, _| if code.get(j) { 1.0 } else { 0.0 });
        (&self.r * phi).iter().copied().collect()
    }
}

fn apply(shape: &mut Shape, update: &[f64]) {
    for (k, p) in shape.points.iter_mut().enumerate() {
        p[0] += update[2 * k];
        p[1] += update[2 * k + 1];
    }
}

impl SmufModel {
    pub fn landmarks(&self) -> usize {
        self.landmark_ids.len()
    }

    pub fn predict(&self, img: &DepthImage, face: &FaceBox) -> Shape {
        self.predict_traced(img, face, None)
    }

    pub fn predict_traced(&self, img: &DepthImage, face: &FaceBox, times: Option<&mut PhaseTimes>) -> Shape {
        self.refine(img, crate::cascade::place_unchecked(&self.init_shape, face), times)
    }

    pub fn refine(&self, img: &DepthImage, start: Shape, mut times: Option<&mut PhaseTimes>) -> Shape {
        let mut shape = start;
        for stage in &self.stages {
            let code = timed(&mut times, |t| &mut t.feature_extraction, || stage.codes(img, &shape, self.patch_side));
            timed(&mut times, |t| &mut t.location_update, || {
                let update = stage.gather_update(&code);
                apply(&mut shape, &update);
            });
        }
        shape
    }

    /// Reference prediction through dense products, for cross-checking.
    pub fn predict_dense(&self, img: &DepthImage, face: &FaceBox) -> Shape {
        let mut shape = crate::cascade::place_unchecked(&self.init_shape, face);
        for stage in &self.stages {
            let code = stage.codes(img, &shape, self.patch_side);
            apply(&mut shape, &stage.dense_update(&code));
        }
        shape
    }

    pub fn truncated(&self, k: usize) -> Self {
        Self {
            stages: self.stages[..k.min(self.stages.len())].to_vec(),
            ..self.clone()
        }
    }
}

/// Per-stage diagnostics of a SMUF training run.
#[derive(Debug, Clone, Default)]
pub struct SmufTrace {
    /// Mean training error before the first stage and after every stage.
    pub errors: Vec<f64>,
    pub stages: Vec<StageTrace>,
}

/// Trains a `K`-stage SMUF model.
pub fn train_smuf(samples: &[SampleRef<'_>], landmark_ids: &[usize], cfg: &SmufConfig) -> Result<Trained<SmufModel>> {
    let (model, trace) = train_smuf_traced(samples, landmark_ids, cfg)?;
    Ok(Trained {
        model,
        trace: trace.errors,
    })
}

pub fn train_smuf_traced(samples: &[SampleRef<'_>], landmark_ids: &[usize], cfg: &SmufConfig) -> Result<(SmufModel, SmufTrace)> {
    cfg.validate()?;
    crate::cascade::check_samples(samples, landmark_ids)?;
    let l = landmark_ids.len();
    let side = cfg.patch_side;
    let p = diff_len(side);
    let targets: Vec<Shape> = samples.iter().map(|s| s.gt.select(landmark_ids)).collect();
    let init_shape = mean_unit_shape(samples, landmark_ids)?;

    let mut mean_diff = DMatrix::<f64>::zeros(p, l);
    let mut d = vec![0.0; p];
    for (s, t) in samples.iter().zip(&targets) {
        for (k, &pt) in t.points.iter().enumerate() {
            depth_diff_into(s.image, pt, side, &mut d);
            for (acc, v) in mean_diff.column_mut(k).iter_mut().zip(&d) {
                *acc += v;
            }
        }
    }
    mean_diff /= samples.len() as f64;

    let InitSet { owner, mut shapes } = initial_shapes(samples, &init_shape, &cfg.train);
    let n = shapes.len();
    let mut trace = SmufTrace {
        errors: vec![mean_error(&shapes, &owner, &targets)],
        stages: Vec::new(),
    };
    let mut stages = Vec::with_capacity(cfg.train.stages);

    for k in 0..cfg.train.stages {
        let mut d_hat = DMatrix::<f64>::zeros(p, l * n);
        let mut x_hat = DMatrix::<f64>::zeros(2 * l, n);
        for (j, (shape, &o)) in shapes.iter().zip(&owner).enumerate() {
            for (li, pt) in shape.points.iter().enumerate() {
                let mut col = d_hat.column_mut(j * l + li);
                let slice = col.as_mut_slice();
                depth_diff_into(samples[o].image, *pt, side, slice);
                for (v, mu) in slice.iter_mut().zip(mean_diff.column(li).iter()) {
                    *v -= mu;
                }
                let t = targets[o].points[li];
                x_hat[(2 * li, j)] = t[0] - pt[0];
                x_hat[(2 * li + 1, j)] = t[1] - pt[1];
            }
        }
        let mut state = SmufTrainState::new(d_hat, x_hat, l)?;
        let seed = rng::derive_seed(cfg.train.seed, 0x5_0000 + k as u64);
        let (w, r, gamma, stage_trace) =
            train_smuf_stage(&mut state, cfg.bits, cfg.train.gamma, cfg.lambda, cfg.alternations, seed)?;
        let update = &r * stack(&state.phi, l);
        for (j, shape) in shapes.iter_mut().enumerate() {
            apply(shape, update.column(j).as_slice());
        }
        trace.errors.push(mean_error(&shapes, &owner, &targets));
        trace.stages.push(stage_trace);
        stages.push(SmufStage {
            w,
            r,
            mean_diff: mean_diff.clone(),
            lambda: cfg.lambda,
            gamma,
        });
    }
    Ok((
        SmufModel {
            stages,
            init_shape,
            landmark_ids: landmark_ids.to_vec(),
            patch_side: side,
            bits: cfg.bits,
        },
        trace,
    ))
}
