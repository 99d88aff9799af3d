//! Parametric synthetic depth faces with exact landmark ground truth.
//!
//! The head is an ellipsoid whose front is displaced along its normal by a
//! sum of smooth bumps and dents (nose, alae, eye sockets, brows, lips, mouth
//! slit, chin, cheeks) anchored at the landmark positions. The surface is
//! tessellated, rotated about the vertical axis, projected orthographically
//! (one pixel per `pitch` mm) and rasterised with a z-buffer.
//!
//! Head frame: `X` towards the image right, `Y` down, `Z` towards the camera.
//! The subject's right half is `X < 0`. Positive yaw turns the nose towards
//! the image right and hides the left half of the face.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::detect::{detect_face, DetectConfig};
use crate::error::{Error, Result};
use crate::image::{DepthImage, FaceBox, Shape};
use crate::rng;

pub const DEFAULT_WIDTH: usize = 250;
pub const DEFAULT_HEIGHT: usize = 200;

/// Per-subject shape variation. All offsets are in millimetres and applied
/// symmetrically so an unrotated face stays mirror-symmetric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Identity {
    /// Ellipsoid semi-axes (X, Y, Z).
    pub axes: [f64; 3],
    pub eye_spread: f64,
    pub eye_y: f64,
    pub brow_y: f64,
    pub nose_y: f64,
    pub nose_height: f64,
    pub mouth_width: f64,
    pub mouth_y: f64,
    pub chin_y: f64,
}

impl Default for Identity {
    fn default() -> Self {
        Self {
            axes: [65.0, 85.0, 80.0],
            eye_spread: 0.0,
            eye_y: 0.0,
            brow_y: 0.0,
            nose_y: 0.0,
            nose_height: 0.0,
            mouth_width: 0.0,
            mouth_y: 0.0,
            chin_y: 0.0,
        }
    }
}

impl Identity {
    /// Random subject drawn around the nominal head.
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        let mut g = |s: f64| s * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
        let axes = [65.0 + g(3.0), 85.0 + g(3.0), 80.0 + g(3.0)];
        Self {
            axes,
            eye_spread: g(1.5),
            eye_y: g(1.5),
            brow_y: g(1.5),
            nose_y: g(1.5),
            nose_height: g(2.0),
            mouth_width: g(1.5),
            mouth_y: g(1.5),
            chin_y: g(1.5),
        }
        .clamped()
    }

    fn clamped(mut self) -> Self {
        let c = |v: f64, lim: f64| v.clamp(-lim, lim);
        self.axes = [self.axes[0].clamp(58.0, 72.0), self.axes[1].clamp(78.0, 92.0), self.axes[2].clamp(72.0, 88.0)];
        self.eye_spread = c(self.eye_spread, 4.0);
        self.eye_y = c(self.eye_y, 4.0);
        self.brow_y = c(self.brow_y, 4.0);
        self.nose_y = c(self.nose_y, 4.0);
        self.nose_height = c(self.nose_height, 5.0);
        self.mouth_width = c(self.mouth_width, 4.0);
        self.mouth_y = c(self.mouth_y, 4.0);
        self.chin_y = c(self.chin_y, 3.0);
        self
    }
}

/// Everything that determines one rendered head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadParams {
    /// Degrees in [−90, 90].
    pub yaw: f64,
    pub scale: f64,
    /// 0 = neutral; 1 = wide smile with open mouth.
    pub expression_amp: f64,
    /// Occluding rectangle `(x, y, w, h)` as fractions of the landmark extent.
    pub occlusion: Option<[f64; 4]>,
    pub noise_sigma: f64,
    pub seed: u64,
    pub identity: Identity,
    /// Head-centre offset from the image centre, pixels.
    pub offset: [f64; 2],
    /// Distance from the camera to the head centre, mm.
    pub distance: f64,
    /// Depth of the far plane behind the head; `None` leaves it invalid.
    pub background: Option<f64>,
    pub width: usize,
    pub height: usize,
    /// Millimetres per pixel.
    pub pitch: f64,
}

impl Default for HeadParams {
    fn default() -> Self {
        Self {
            yaw: 0.0,
            scale: 1.0,
            expression_amp: 0.0,
            occlusion: None,
            noise_sigma: 0.0,
            seed: 0,
            identity: Identity::default(),
            offset: [0.0, 0.0],
            distance: 700.0,
            background: None,
            width: DEFAULT_WIDTH,
            height: DEFAULT_HEIGHT,
            pitch: 1.0,
        }
    }
}

impl HeadParams {
    pub fn validate(&self) -> Result<()> {
        if !(-90.0..=90.0).contains(&self.yaw) {
            return Err(Error::InvalidParameter(format!("yaw {} outside [-90, 90]", self.yaw)));
        }
        if !(self.scale > 0.0) || !(self.pitch > 0.0) {
            return Err(Error::InvalidParameter("scale and pitch must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidParameter("noise sigma must be non-negative".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::ZeroDimensions);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    /// Raw depth in mm.
    pub image: DepthImage,
    /// 22 landmarks in the `face22` order, with visibility.
    pub gt: Shape,
    pub yaw: f64,
    /// Detector output on `image`.
    pub face: FaceBox,
    /// Pixels covered by the head surface.
    pub head_mask: Vec<bool>,
}

/// Landmark positions and feature parameters on the unrotated face, in the
/// `(X, Y)` plane.
struct Geometry {
    axes: [f64; 3],
    landmarks: [[f64; 2]; 22],
    eye_cx: f64,
    eye_y: f64,
    brow_y: f64,
    nose_tip_y: f64,
    nose_height: f64,
    mouth_half_width: f64,
    mouth_y: f64,
    lip_gap: f64,
    upper_inner_y: f64,
    lower_inner_y: f64,
    chin_y: f64,
    expression: f64,
}

impl Geometry {
    fn new(id: &Identity, expression: f64) -> Self {
        let e = expression.clamp(0.0, 1.0);
        let eye_y = -20.0 + id.eye_y;
        let eye_outer = 42.0 + id.eye_spread;
        let eye_inner = 16.0 + 0.5 * id.eye_spread;
        let brow_y = -38.0 + id.brow_y;
        let tip_y = 12.0 + id.nose_y;
        let mouth_y = 42.0 + id.mouth_y;
        let half_w = 24.0 + id.mouth_width + 4.0 * e;
        let corner_y = mouth_y - 3.0 * e;
        let upper_inner = mouth_y - 0.5;
        let lower_inner = mouth_y + 0.5 + 5.0 * e;
        let chin_y = 72.0 + id.chin_y + 3.0 * e;
        let landmarks = [
            [-48.0, brow_y],
            [-32.0, brow_y - 4.0],
            [-13.0, brow_y],
            [13.0, brow_y],
            [32.0, brow_y - 4.0],
            [48.0, brow_y],
            [-eye_outer, eye_y],
            [-eye_inner, eye_y],
            [eye_inner, eye_y],
            [eye_outer, eye_y],
            [-12.0, tip_y - 14.0],
            [12.0, tip_y - 14.0],
            [-17.0, tip_y + 1.0],
            [0.0, tip_y],
            [17.0, tip_y + 1.0],
            [-half_w, corner_y],
            [0.0, mouth_y - 6.0],
            [half_w, corner_y],
            [0.0, upper_inner],
            [0.0, lower_inner],
            [0.0, lower_inner + 6.0],
            [0.0, chin_y],
        ];
        Self {
            axes: id.axes,
            landmarks,
            eye_cx: 0.5 * (eye_outer + eye_inner),
            eye_y,
            brow_y,
            nose_tip_y: tip_y,
            nose_height: 22.0 + id.nose_height,
            mouth_half_width: half_w,
            mouth_y,
            lip_gap: lower_inner - upper_inner,
            upper_inner_y: upper_inner,
            lower_inner_y: lower_inner,
            chin_y,
            expression: e,
        }
    }

    /// Outward displacement (mm) of the front surface at `(x, y)`.
    fn displacement(&self, x: f64, y: f64) -> f64 {
        let g = |dx: f64, sx: f64, dy: f64, sy: f64| (-(dx * dx) / (2.0 * sx * sx) - (dy * dy) / (2.0 * sy * sy)).exp();
        let ax = x.abs();
        let mut h = 0.0;

        // nose: ridge rising from the bridge to the tip, then a quick drop
        let tip = self.nose_tip_y;
        let start = tip - 26.0;
        let bridge = 5.0;
        let (amp, width) = if y < start {
            (bridge * (-(y - start).powi(2) / (2.0 * 36.0)).exp(), 5.0)
        } else if y <= tip {
            let t = (y - start) / 26.0;
            (bridge + (self.nose_height - bridge) * t.powf(1.5), 5.0 + 4.0 * t)
        } else {
            (self.nose_height * (-(y - tip).powi(2) / (2.0 * 3.5 * 3.5)).exp(), 9.0)
        };
        h += amp * (-(x * x) / (2.0 * width * width)).exp();
        h += 7.0 * g(ax - 17.0, 4.5, y - (tip + 1.0), 4.5);

        h -= 10.0 * g(ax - self.eye_cx, 10.0, y - self.eye_y, 6.0);
        h += 5.0 * g(ax - 30.0, 16.0, y - (self.brow_y + 2.0), 5.0);
        h += 4.0 * g(x, 9.0, y - (self.brow_y + 8.0), 9.0);
        h += 4.0 * g(ax - 38.0, 12.0, y - 10.0, 12.0);

        let hw = self.mouth_half_width;
        h += 5.0 * g(x, 0.7 * hw, y - (self.upper_inner_y - 3.0), 3.0);
        h += 4.0 * g(x, 0.6 * hw, y - (self.lower_inner_y + 3.0), 3.0);
        let mid = 0.5 * (self.upper_inner_y + self.lower_inner_y);
        let e = self.expression;
        h -= (4.0 + 6.0 * e) * g(x, 0.8 * hw, y - mid, 1.8 + 0.3 * self.lip_gap);
        h += 9.0 * g(x, 13.0, y - (self.chin_y - 6.0), 7.0);
        // keep the mouth corners on a visible dimple
        h -= 2.0 * g(ax - hw, 3.0, y - (self.mouth_y - 3.0 * e), 3.0);
        h
    }

    /// Base ellipsoid point, outward unit normal and displaced point at
    /// parameters `(α, β)`.
    fn surface(&self, alpha: f64, beta: f64) -> [f64; 3] {
        let [a, b, c] = self.axes;
        let (sa, ca) = alpha.sin_cos();
        let (sb, cb) = beta.sin_cos();
        let p = [a * cb * sa, b * sb, c * cb * ca];
        let n = normalize([p[0] / (a * a), p[1] / (b * b), p[2] / (c * c)]);
        let front = smoothstep(0.0, 0.35, p[2] / c);
        let h = if front > 0.0 { front * self.displacement(p[0], p[1]) } else { 0.0 };
        [p[0] + h * n[0], p[1] + h * n[1], p[2] + h * n[2]]
    }

    /// Surface parameters of the front point whose base projects to `(x, y)`.
    fn params_of(&self, x: f64, y: f64) -> (f64, f64) {
        let [a, b, c] = self.axes;
        let sb = (y / b).clamp(-1.0, 1.0);
        let z = c * (1.0 - (x / a).powi(2) - (y / b).powi(2)).max(0.0).sqrt();
        (f64::atan2(x / a, z / c), sb.asin())
    }

    fn normal(&self, alpha: f64, beta: f64) -> [f64; 3] {
        let h = 1e-5;
        let da = sub(self.surface(alpha + h, beta), self.surface(alpha - h, beta));
        let db = sub(self.surface(alpha, beta + h), self.surface(alpha, beta - h));
        // (∂/∂β × ∂/∂α) points outward for this parametrisation
        let n = normalize(cross(db, da));
        let p = self.surface(alpha, beta);
        if dot(n, p) < 0.0 {
            [-n[0], -n[1], -n[2]]
        } else {
            n
        }
    }
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = dot(v, v).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Rotation about the vertical axis, then scale.
struct View {
    cos: f64,
    sin: f64,
    scale: f64,
    cx: f64,
    cy: f64,
    pitch: f64,
}

impl View {
    fn new(p: &HeadParams) -> Self {
        let (sin, cos) = p.yaw.to_radians().sin_cos();
        Self {
            cos,
            sin,
            scale: p.scale,
            cx: (p.width as f64 - 1.0) / 2.0 + p.offset[0],
            cy: (p.height as f64 - 1.0) / 2.0 + p.offset[1],
            pitch: p.pitch,
        }
    }

    fn rotate(&self, v: [f64; 3]) -> [f64; 3] {
        [v[0] * self.cos + v[2] * self.sin, v[1], -v[0] * self.sin + v[2] * self.cos]
    }

    /// Image `(x, y)` and height towards the camera, mm.
    fn project(&self, v: [f64; 3]) -> [f64; 3] {
        let r = self.rotate(v);
        [
            self.cx + self.scale * r[0] / self.pitch,
            self.cy + self.scale * r[1] / self.pitch,
            self.scale * r[2],
        ]
    }
}

const MESH_ALPHA: usize = 720;
const MESH_BETA: usize = 360;
/// Normal z-component below which a landmark counts as turned away.
const VISIBILITY_NZ: f64 = 0.05;
/// Z-buffer margin beyond which a landmark counts as occluded, mm.
const VISIBILITY_DEPTH_MM: f64 = 2.0;

/// Z-buffer of heights towards the camera; `NEG_INFINITY` where uncovered.
fn rasterize(geom: &Geometry, view: &View, width: usize, height: usize) -> Vec<f64> {
    let mut zbuf = vec![f64::NEG_INFINITY; width * height];
    let na = MESH_ALPHA;
    let nb = MESH_BETA;
    let verts: Vec<[f64; 3]> = (0..=nb)
        .flat_map(|j| {
            let beta = -std::f64::consts::FRAC_PI_2 + std::f64::consts::PI * j as f64 / nb as f64;
            (0..na).map(move |i| (i, beta))
        })
        .map(|(i, beta)| {
            let alpha = -std::f64::consts::PI + 2.0 * std::f64::consts::PI * i as f64 / na as f64;
            view.project(geom.surface(alpha, beta))
        })
        .collect();
    let at = |i: usize, j: usize| verts[j * na + i % na];
    for j in 0..nb {
        for i in 0..na {
            let (v00, v10, v01, v11) = (at(i, j), at(i + 1, j), at(i, j + 1), at(i + 1, j + 1));
            raster_triangle(&mut zbuf, width, height, v00, v10, v11);
            raster_triangle(&mut zbuf, width, height, v00, v11, v01);
        }
    }
    zbuf
}

fn raster_triangle(zbuf: &mut [f64], width: usize, height: usize, a: [f64; 3], b: [f64; 3], c: [f64; 3]) {
    let area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
    if area.abs() < 1e-12 {
        return;
    }
    let x0 = a[0].min(b[0]).min(c[0]).ceil().max(0.0);
    let x1 = a[0].max(b[0]).max(c[0]).floor().min(width as f64 - 1.0);
    let y0 = a[1].min(b[1]).min(c[1]).ceil().max(0.0);
    let y1 = a[1].max(b[1]).max(c[1]).floor().min(height as f64 - 1.0);
    if x0 > x1 || y0 > y1 {
        return;
    }
    let eps = -1e-9;
    for py in y0 as usize..=y1 as usize {
        for px in x0 as usize..=x1 as usize {
            let (x, y) = (px as f64, py as f64);
            let w0 = ((b[0] - x) * (c[1] - y) - (b[1] - y) * (c[0] - x)) / area;
            let w1 = ((c[0] - x) * (a[1] - y) - (c[1] - y) * (a[0] - x)) / area;
            let w2 = 1.0 - w0 - w1;
            if w0 >= eps && w1 >= eps && w2 >= eps {
                let z = w0 * a[2] + w1 * b[2] + w2 * c[2];
                let slot = &mut zbuf[py * width + px];
                if z > *slot {
                    *slot = z;
                }
            }
        }
    }
}

/// Z-buffer height at a sub-pixel position: bilinear when the four
/// surrounding pixels are covered, nearest pixel otherwise. `None` outside the
/// image.
fn surface_height(zbuf: &[f64], w: usize, h: usize, x: f64, y: f64) -> Option<f64> {
    if !(x > -0.5 && y > -0.5 && x < w as f64 - 0.5 && y < h as f64 - 0.5) {
        return None;
    }
    let (x0, y0) = (x.floor().max(0.0) as usize, y.floor().max(0.0) as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let q = [zbuf[y0 * w + x0], zbuf[y0 * w + x1], zbuf[y1 * w + x0], zbuf[y1 * w + x1]];
    if q.iter().all(|v| v.is_finite()) {
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let top = q[0] + fx * (q[1] - q[0]);
        let bottom = q[2] + fx * (q[3] - q[2]);
        return Some(top + fy * (bottom - top));
    }
    let z = zbuf[y.round() as usize * w + x.round() as usize];
    // an uncovered pixel cannot occlude
    Some(if z.is_finite() { z } else { f64::NEG_INFINITY })
}

/// Renders one head. The returned box is the detector's output on the
/// rendered image.
pub fn render_head(params: &HeadParams) -> Result<SynthSample> {
    params.validate()?;
    let (w, h) = (params.width, params.height);
    let geom = Geometry::new(&params.identity, params.expression_amp);
    let view = View::new(params);
    let mut zbuf = rasterize(&geom, &view, w, h);
    let head_mask: Vec<bool> = zbuf.iter().map(|z| z.is_finite()).collect();

    // landmarks: projected surface points, visibility from normal and z-buffer
    let mut points = Vec::with_capacity(22);
    let mut facing = Vec::with_capacity(22);
    let mut heights = Vec::with_capacity(22);
    for &[x, y] in &geom.landmarks {
        let (alpha, beta) = geom.params_of(x, y);
        let p = view.project(geom.surface(alpha, beta));
        let n = view.rotate(geom.normal(alpha, beta));
        points.push([p[0], p[1]]);
        heights.push(p[2]);
        facing.push(n[2] >= VISIBILITY_NZ);
    }

    let mut rng = rng::stream(params.seed, 1);
    if let Some([fx, fy, fw, fh]) = params.occlusion {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in &points {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let rx0 = lo[0] + fx * (hi[0] - lo[0]);
        let ry0 = lo[1] + fy * (hi[1] - lo[1]);
        let rx1 = rx0 + fw * (hi[0] - lo[0]);
        let ry1 = ry0 + fh * (hi[1] - lo[1]);
        let inside = |px: usize, py: usize| {
            let (x, y) = (px as f64, py as f64);
            x >= rx0 && x <= rx1 && y >= ry0 && y <= ry1
        };
        let mut top = f64::NEG_INFINITY;
        for py in 0..h {
            for px in 0..w {
                if inside(px, py) && head_mask[py * w + px] {
                    top = top.max(zbuf[py * w + px]);
                }
            }
        }
        if top.is_finite() {
            for py in 0..h {
                for px in 0..w {
                    if inside(px, py) && head_mask[py * w + px] {
                        zbuf[py * w + px] = top + 25.0;
                    }
                }
            }
        }
    }

    let visible: Vec<bool> = points
        .iter()
        .zip(&heights)
        .zip(&facing)
        .map(|((p, &z), &f)| {
            if !f {
                return false;
            }
            match surface_height(&zbuf, w, h, p[0], p[1]) {
                None => false,
                Some(surf) => surf - z <= VISIBILITY_DEPTH_MM,
            }
        })
        .collect();

    let noise = Normal::new(0.0, params.noise_sigma.max(0.0)).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut depth = vec![0.0; w * h];
    let mut valid = vec![false; w * h];
    for i in 0..w * h {
        if zbuf[i].is_finite() {
            let n = if params.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            depth[i] = params.distance - zbuf[i] + n;
            valid[i] = true;
        } else if let Some(bg) = params.background {
            depth[i] = bg;
            valid[i] = true;
        }
    }
    let image = DepthImage::new(w, h, depth, valid)?.with_pitch(params.pitch);
    let face = detect_face(&image, &DetectConfig::default())?.face;
    Ok(SynthSample {
        image,
        gt: Shape::with_visibility(points, visible)?,
        yaw: params.yaw,
        face,
        head_mask,
    })
}

/// How yaw angles are drawn for a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum YawDistribution {
    Uniform { min: f64, max: f64 },
    Fixed(f64),
}

/// Per-sample variation of a generated dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetConfig {
    pub yaw: YawDistribution,
    /// Template for the fields not randomised below.
    pub template: HeadParams,
    pub identity_variation: bool,
    /// Expression amplitude drawn uniformly from `[0, max_expression]`.
    pub max_expression: f64,
    pub occlusion_probability: f64,
    /// Standard deviation of the head scale around the template's.
    pub scale_sigma: f64,
    /// Maximum head-centre offset from the image centre, pixels.
    pub max_offset: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            yaw: YawDistribution::Uniform { min: -90.0, max: 90.0 },
            template: HeadParams {
                noise_sigma: 0.3,
                ..HeadParams::default()
            },
            identity_variation: true,
            max_expression: 0.3,
            occlusion_probability: 0.0,
            scale_sigma: 0.03,
            max_offset: 6.0,
        }
    }
}

/// Head parameters of sample `index` of a dataset.
pub fn sample_params(cfg: &DatasetConfig, seed: u64, index: usize) -> HeadParams {
    let mut rng = rng::stream(seed, index as u64);
    let yaw = match cfg.yaw {
        YawDistribution::Uniform { min, max } => {
            if max > min {
                rng.random_range(min..=max)
            } else {
                min
            }
        }
        YawDistribution::Fixed(v) => v,
    };
    let identity = if cfg.identity_variation { Identity::sample(&mut rng) } else { cfg.template.identity };
    let expression_amp = if cfg.max_expression > 0.0 { rng.random_range(0.0..=cfg.max_expression) } else { 0.0 };
    let occlusion = if cfg.occlusion_probability > 0.0 && rng.random_bool(cfg.occlusion_probability.min(1.0)) {
        let fw = rng.random_range(0.2..0.4);
        let fh = rng.random_range(0.15..0.3);
        Some([rng.random_range(0.0..1.0 - fw), rng.random_range(0.0..1.0 - fh), fw, fh])
    } else {
        cfg.template.occlusion
    };
    let z: f64 = StandardNormal.sample(&mut rng);
    let scale = cfg.template.scale * (1.0 + cfg.scale_sigma * z).clamp(0.85, 1.15);
    let offset = if cfg.max_offset > 0.0 {
        [rng.random_range(-cfg.max_offset..=cfg.max_offset), rng.random_range(-cfg.max_offset..=cfg.max_offset)]
    } else {
        cfg.template.offset
    };
    HeadParams {
        yaw,
        scale,
        expression_amp,
        occlusion,
        identity,
        offset,
        seed: rng::derive_seed(seed, 0x1000_0000 + index as u64),
        ..cfg.template
    }
}

/// `n` samples, deterministic in `seed`; sample `i` depends only on
/// `(seed, i)`.
pub fn make_dataset(n: usize, cfg: &DatasetConfig, seed: u64) -> Result<Vec<SynthSample>> {
    if n == 0 {
        return Err(Error::InvalidParameter("dataset size must be at least 1".into()));
    }
    (0..n).map(|i| render_head(&sample_params(cfg, seed, i))).collect()
}

/// A head placed in front of a seat back and torso, with a far background.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub image: DepthImage,
    pub head_mask: Vec<bool>,
    pub background_mask: Vec<bool>,
}

/// Composes a rendered head (with an invalid background) into a scene: a
/// seat back at `torso_mm` covering the head's surroundings, shoulders below,
/// and a wall at `background_mm` elsewhere.
pub fn compose_scene(sample: &SynthSample, torso_mm: f64, background_mm: f64, seed: u64) -> Result<Scene> {
    let img = &sample.image;
    let (w, h) = (img.width(), img.height());
    let mut rng = rng::stream(seed, 2);
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..h {
        for x in 0..w {
            if sample.head_mask[y * w + x] {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    if x0 == usize::MAX {
        return Err(Error::NoValidPixels);
    }
    let margin = rng.random_range(8..16);
    let sx0 = x0.saturating_sub(margin);
    let sx1 = (x1 + margin).min(w - 1);
    let sy0 = y0.saturating_sub(margin);
    let shoulder_y = (y0 + y1) / 2 + rng.random_range(40..60);
    let tilt = rng.random_range(-0.1..0.1);

    let mut depth = vec![0.0; w * h];
    let mut valid = vec![false; w * h];
    let mut head_mask = vec![false; w * h];
    let mut background_mask = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            valid[i] = true;
            if sample.head_mask[i] && img.is_valid(x, y) {
                depth[i] = img.depth()[i];
                head_mask[i] = true;
            } else if (x >= sx0 && x <= sx1 && y >= sy0) || y >= shoulder_y {
                depth[i] = torso_mm + tilt * (x as f64 - w as f64 / 2.0);
            } else {
                depth[i] = background_mm;
                background_mask[i] = true;
            }
        }
    }
    Ok(Scene {
        image: DepthImage::new(w, h, depth, valid)?.with_pitch(img.pitch_mm),
        head_mask,
        background_mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::FACE22_MIRROR;

    fn frontal() -> SynthSample {
        render_head(&HeadParams::default()).unwrap()
    }

    #[test]
    fn frontal_render_is_symmetric() {
        let s = frontal();
        let cx = (DEFAULT_WIDTH as f64 - 1.0) / 2.0;
        for (i, &j) in FACE22_MIRROR.iter().enumerate() {
            let (a, b) = (s.gt.points[i], s.gt.points[j]);
            assert!(((a[0] - cx) + (b[0] - cx)).abs() < 0.5, "landmark {i}");
            assert!((a[1] - b[1]).abs() < 0.5);
        }
        assert!(s.gt.visible.iter().all(|&v| v));
        assert!(s.face.fits(DEFAULT_WIDTH, DEFAULT_HEIGHT));
        for p in &s.gt.points {
            assert!(s.face.contains(p[0], p[1]));
        }
    }

    #[test]
    fn nose_tip_is_closest_point() {
        let s = frontal();
        let tip = s.gt.points[13];
        let d = s.image.get(tip[0].round() as usize, tip[1].round() as usize);
        let min = s.image.depth().iter().zip(s.image.mask()).filter(|(_, &v)| v).map(|(&d, _)| d).fold(f64::INFINITY, f64::min);
        assert!(d - min < 1.5, "tip depth {d}, min {min}");
    }

    #[test]
    fn far_side_hidden_at_large_yaw() {
        let s = render_head(&HeadParams { yaw: 80.0, ..Default::default() }).unwrap();
        for &i in &[3usize, 4, 5, 8, 9, 11, 14, 17] {
            assert!(!s.gt.visible[i], "left landmark {i} visible");
        }
        assert!(s.gt.visible[13]);
        let m = render_head(&HeadParams { yaw: -80.0, ..Default::default() }).unwrap();
        for &i in &[0usize, 1, 2, 6, 7, 10, 12, 15] {
            assert!(!m.gt.visible[i], "right landmark {i} visible");
        }
    }

    #[test]
    fn far_side_visibility_is_monotone_in_yaw() {
        let left = [3usize, 4, 5, 8, 9, 11, 14, 17];
        let mut last = usize::MAX;
        for yaw in (0..=90).step_by(10) {
            let s = render_head(&HeadParams { yaw: yaw as f64, ..Default::default() }).unwrap();
            let count = left.iter().filter(|&&i| s.gt.visible[i]).count();
            assert!(count <= last, "yaw {yaw}: {count} > {last}");
            last = count;
        }
    }

    #[test]
    fn landmarks_follow_analytic_rotation() {
        let a = render_head(&HeadParams { yaw: 10.0, ..Default::default() }).unwrap();
        let b = render_head(&HeadParams { yaw: 25.0, ..Default::default() }).unwrap();
        let geom = Geometry::new(&Identity::default(), 0.0);
        let cx = (DEFAULT_WIDTH as f64 - 1.0) / 2.0;
        for i in 0..22 {
            let [x, y] = geom.landmarks[i];
            let (al, be) = geom.params_of(x, y);
            let p = geom.surface(al, be);
            // rotate the 10° position by a further 15° about the vertical axis
            let t = 10f64.to_radians();
            let xr = p[0] * t.cos() + p[2] * t.sin();
            let zr = -p[0] * t.sin() + p[2] * t.cos();
            assert!((a.gt.points[i][0] - cx - xr).abs() < 1e-9);
            let d = 15f64.to_radians();
            let x2 = xr * d.cos() + zr * d.sin();
            if b.gt.visible[i] {
                assert!((b.gt.points[i][0] - cx - x2).abs() < 1.0);
                assert!((b.gt.points[i][1] - a.gt.points[i][1]).abs() < 1.0);
            }
        }
    }

    #[test]
    fn landmarks_lie_on_the_rendered_surface() {
        let s = render_head(&HeadParams { yaw: 20.0, ..Default::default() }).unwrap();
        let geom = Geometry::new(&Identity::default(), 0.0);
        let view = View::new(&HeadParams { yaw: 20.0, ..Default::default() });
        for i in 0..22 {
            if !s.gt.visible[i] {
                continue;
            }
            let [x, y] = geom.landmarks[i];
            let (al, be) = geom.params_of(x, y);
            let p = view.project(geom.surface(al, be));
            let d = s.image.get(p[0].round() as usize, p[1].round() as usize);
            let expected = 700.0 - p[2];
            assert!((d - expected).abs() < 3.0, "landmark {i}: {d} vs {expected}");
        }
    }

    #[test]
    fn deterministic() {
        let p = HeadParams { yaw: 33.0, noise_sigma: 0.5, seed: 9, occlusion: Some([0.2, 0.2, 0.3, 0.3]), ..Default::default() };
        assert_eq!(render_head(&p).unwrap(), render_head(&p).unwrap());
        let cfg = DatasetConfig::default();
        assert_eq!(make_dataset(3, &cfg, 5).unwrap(), make_dataset(3, &cfg, 5).unwrap());
        assert_eq!(make_dataset(1, &cfg, 5).unwrap().len(), 1);
        assert!(make_dataset(0, &cfg, 5).is_err());
    }

    #[test]
    fn occluder_hides_landmarks_beneath_it() {
        let clear = frontal();
        let occ = render_head(&HeadParams { occlusion: Some([0.0, 0.6, 1.0, 0.45]), ..Default::default() }).unwrap();
        assert!(!occ.gt.visible[21], "chin should be covered");
        assert!(occ.gt.visible[0]);
        assert!(occ.gt.visible_count() < clear.gt.visible_count());
    }

    #[test]
    fn yaw_histogram_covers_default_bins() {
        let cfg = DatasetConfig::default();
        let mut counts = [0usize; 4];
        for i in 0..100 {
            let y = sample_params(&cfg, 7, i).yaw;
            assert!((-90.0..=90.0).contains(&y));
            counts[(((y + 90.0) / 45.0) as usize).min(3)] += 1;
        }
        assert!(counts.iter().all(|&c| c > 0), "{counts:?}");
    }

    #[test]
    fn scene_box_covers_head_only() {
        let s = render_head(&HeadParams { yaw: 30.0, distance: 690.0, ..Default::default() }).unwrap();
        let scene = compose_scene(&s, 900.0, 2000.0, 1).unwrap();
        let det = detect_face(&scene.image, &DetectConfig::default()).unwrap().face;
        let w = scene.image.width();
        for (i, (&hm, &bg)) in scene.head_mask.iter().zip(&scene.background_mask).enumerate() {
            let (x, y) = (i % w, i / w);
            if hm {
                assert!(det.covers_pixel(x, y));
            }
            if bg {
                assert!(!det.covers_pixel(x, y));
            }
        }
    }
}
