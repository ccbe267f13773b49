//! CPU reference splatter with analytic gradients.
//!
//! Each Gaussian is projected through the linearised perspective Jacobian
//! (EWA splatting) with `0.3·I` added to the screen-space covariance, cut off
//! at three standard deviations, sorted by camera depth (ties by index) and
//! composited front to back with pixel centres at integer coordinates.
//! Splats with zero opacity are dropped before sorting, contributions with
//! `α < 1/255` are skipped and there is no early termination, so a scene
//! with masked-out Gaussians renders bit-identically to the pruned scene.
//!
//! Cameras use the OpenCV convention: `x` right, `y` down, `z` forward.

pub mod metrics;
pub mod sh;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::math::{norm3, quat_to_mat, quat_to_mat_backward, sub3, to_f64_3, vec3};
use crate::model::{sh_coeff_count, Gaussian, SplatScene};
pub use metrics::{psnr, ssim, ssim_with_grad};
use sh::{sh_basis, sh_basis_grad};

/// Screen-space covariance regulariser (pixels²).
pub const COV2D_BLUR: f64 = 0.3;
/// Smallest alpha that contributes to a pixel.
pub const MIN_ALPHA: f64 = 1.0 / 255.0;
/// Points closer than this to the camera plane are culled.
pub const NEAR_PLANE: f64 = 0.01;
const TILE: u32 = 16;

#[derive(Debug, PartialEq, thiserror::Error)]
pub enum RenderError {
    #[error("invalid camera: {0}")]
    Camera(String),
    #[error("image dimensions differ: {a:?} vs {b:?}")]
    Dimensions { a: (u32, u32), b: (u32, u32) },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation, row-major.
    pub rotation: [[f64; 3]; 3],
    /// World-to-camera translation.
    pub translation: [f64; 3],
}

impl Camera {
    /// Pinhole camera at `eye` looking at `target`, with vertical field of
    /// view `fov_y` in degrees and the principal point at the image centre.
    pub fn look_at(
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        width: u32,
        height: u32,
        fov_y: f64,
    ) -> Result<Self, RenderError> {
        let f = vec3(sub3(target, eye));
        if f.norm() == 0.0 {
            return Err(RenderError::Camera("eye and target coincide".into()));
        }
        let f = f.normalize();
        let right = f.cross(&vec3(up));
        if right.norm() < 1e-12 {
            return Err(RenderError::Camera("up vector parallel to view direction".into()));
        }
        let right = right.normalize();
        let down = f.cross(&right);
        let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), f.transpose()]);
        let t = -(r * vec3(eye));
        let focal = 0.5 * height as f64 / (0.5 * fov_y.to_radians()).tan();
        let cam = Self {
            width,
            height,
            fx: focal,
            fy: focal,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            rotation: std::array::from_fn(|i| std::array::from_fn(|j| r[(i, j)])),
            translation: [t[0], t[1], t[2]],
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        if self.width == 0 || self.height == 0 {
            return Err(RenderError::Camera("empty image".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(RenderError::Camera("focal lengths must be positive".into()));
        }
        let r = self.rotation_matrix();
        let err = (r * r.transpose() - Matrix3::identity()).abs().max();
        if !(err < 1e-6) || !((r.determinant() - 1.0).abs() < 1e-6) {
            return Err(RenderError::Camera("rotation is not orthonormal".into()));
        }
        if self.translation.iter().chain([&self.cx, &self.cy]).any(|v| !v.is_finite()) {
            return Err(RenderError::Camera("non-finite parameters".into()));
        }
        Ok(())
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.rotation[i][j])
    }

    pub fn world_to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let t = self.rotation_matrix() * vec3(p) + vec3(self.translation);
        [t[0], t[1], t[2]]
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> [f64; 3] {
        let c = -(self.rotation_matrix().transpose() * vec3(self.translation));
        [c[0], c[1], c[2]]
    }
}

/// RGB image stored as three row-major planes.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; 3 * width as usize * height as usize],
        }
    }

    pub fn filled(width: u32, height: u32, color: [f64; 3]) -> Self {
        let mut img = Self::new(width, height);
        for c in 0..3 {
            img.plane_mut(c).iter_mut().for_each(|v| *v = color[c]);
        }
        img
    }

    fn plane_len(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, x: u32, y: u32, c: usize) -> f64 {
        self.data[c * self.plane_len() + (y * self.width + x) as usize]
    }

    pub fn pixel(&self, x: u32, y: u32) -> [f64; 3] {
        std::array::from_fn(|c| self.get(x, y, c))
    }

    /// Interleaved 8-bit RGB, clamped to `[0,1]` and rounded.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let n = self.plane_len();
        (0..n)
            .flat_map(|i| (0..3).map(move |c| (c, i)))
            .map(|(c, i)| (self.data[c * n + i].clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_rgb8(width: u32, height: u32, bytes: &[u8]) -> Self {
        let mut img = Self::new(width, height);
        let n = img.plane_len();
        for i in 0..n {
            for c in 0..3 {
                img.data[c * n + i] = bytes[3 * i + c] as f64 / 255.0;
            }
        }
        img
    }
}

/// A Gaussian in double precision, as consumed by the renderer.
#[derive(Clone, Debug, PartialEq)]
pub struct Splat {
    pub position: [f64; 3],
    pub opacity: f64,
    pub scale: [f64; 3],
    /// Quaternion `(w, x, y, z)`; normalised during projection.
    pub rotation: [f64; 4],
    /// SH blocks up to the Gaussian's bandwidth.
    pub sh: Vec<[f64; 3]>,
}

impl From<&Gaussian> for Splat {
    fn from(g: &Gaussian) -> Self {
        let n = sh_coeff_count(g.bandwidth as usize).min(g.sh.len());
        Self {
            position: to_f64_3(g.position),
            opacity: g.opacity as f64,
            scale: to_f64_3(g.scale),
            rotation: g.rotation.map(|v| v as f64),
            sh: g.sh[..n].iter().map(|c| c.map(|v| v as f64)).collect(),
        }
    }
}

/// Gradient of a loss with respect to one [`Splat`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplatGrad {
    pub position: [f64; 3],
    pub opacity: f64,
    pub scale: [f64; 3],
    pub rotation: [f64; 4],
    pub sh: Vec<[f64; 3]>,
}

/// 3D covariance `R S Sᵀ Rᵀ` of a splat.
pub fn splat_covariance(s: &Splat) -> Matrix3<f64> {
    let q = s.rotation;
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let r = quat_to_mat(q.map(|v| v / n));
    let m = r * Matrix3::from_diagonal(&vec3(s.scale));
    m * m.transpose()
}

/// `o·exp(−½ (x−p)ᵀ Σ⁻¹ (x−p))` for a splat in world space.
pub fn gaussian_alpha(s: &Splat, x: [f64; 3]) -> f64 {
    let cov = splat_covariance(s);
    let inv = cov
        .try_inverse()
        .unwrap_or_else(|| (cov + Matrix3::identity() * 1e-12).try_inverse().unwrap_or(Matrix3::zeros()));
    let d = vec3(sub3(x, s.position));
    s.opacity * (-0.5 * (d.transpose() * inv * d)[0]).exp()
}

/// Screen-space footprint of one splat.
#[derive(Clone, Debug)]
struct Projected {
    index: usize,
    depth: f64,
    t: [f64; 3],
    mean: [f64; 2],
    conic: Matrix2<f64>,
    radius: f64,
    color: [f64; 3],
    color_raw: [f64; 3],
    dir: [f64; 3],
    dist: f64,
    jac: Matrix2x3<f64>,
    cov3d: Matrix3<f64>,
}

fn project(s: &Splat, index: usize, cam: &Camera, w: &Matrix3<f64>, center: [f64; 3]) -> Option<Projected> {
    if !(s.opacity > 0.0) {
        return None;
    }
    let tv = w * vec3(s.position) + vec3(cam.translation);
    let t = [tv[0], tv[1], tv[2]];
    if t[2] <= NEAR_PLANE {
        return None;
    }
    let (x, y, z) = (t[0], t[1], t[2]);
    let jac = Matrix2x3::new(cam.fx / z, 0.0, -cam.fx * x / (z * z), 0.0, cam.fy / z, -cam.fy * y / (z * z));
    let cov3d = splat_covariance(s);
    let tw = jac * w;
    let cov2d = tw * cov3d * tw.transpose() + Matrix2::identity() * COV2D_BLUR;
    let det = cov2d.determinant();
    if !(det > 0.0) {
        return None;
    }
    let conic = Matrix2::new(cov2d[(1, 1)], -cov2d[(0, 1)], -cov2d[(1, 0)], cov2d[(0, 0)]) / det;
    let mid = 0.5 * (cov2d[(0, 0)] + cov2d[(1, 1)]);
    let lambda = mid + (mid * mid - det).max(0.1).sqrt();
    let radius = (3.0 * lambda.sqrt()).ceil();
    let mean = [cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy];
    let dv = sub3(s.position, center);
    let dist = norm3(dv);
    let dir = if dist > 0.0 { dv.map(|v| v / dist) } else { [0.0, 0.0, 1.0] };
    let color_raw = sh::sh_color_unclamped(&s.sh, dir);
    Some(Projected {
        index,
        depth: z,
        t,
        mean,
        conic,
        radius,
        color: color_raw.map(|v| v.max(0.0)),
        color_raw,
        dir,
        dist,
        jac,
        cov3d,
    })
}

/// Per-pixel record of the splats that contributed, front to back.
#[derive(Clone, Debug, Default)]
struct PixelTrace {
    /// `(projected index, alpha, exp(power))`.
    hits: Vec<(u32, f64, f64)>,
}

/// Forward state kept for [`render_backward`].
#[derive(Clone, Debug)]
pub struct RenderTape {
    projected: Vec<Projected>,
    traces: Vec<PixelTrace>,
    background: [f64; 3],
    splat_count: usize,
}

impl RenderTape {
    /// Indices of splats that touched at least one pixel.
    pub fn visible(&self) -> Vec<usize> {
        let mut seen = vec![false; self.splat_count];
        for t in &self.traces {
            for &(p, _, _) in &t.hits {
                seen[self.projected[p as usize].index] = true;
            }
        }
        (0..self.splat_count).filter(|&i| seen[i]).collect()
    }
}

fn tile_grid(cam: &Camera) -> (u32, u32) {
    (cam.width.div_ceil(TILE), cam.height.div_ceil(TILE))
}

/// Projects, sorts and bins splats; returns them with per-tile lists.
fn prepare(splats: &[Splat], cam: &Camera) -> (Vec<Projected>, Vec<Vec<u32>>) {
    let w = cam.rotation_matrix();
    let center = cam.center();
    let mut projected: Vec<Projected> = splats
        .par_iter()
        .enumerate()
        .filter_map(|(i, s)| project(s, i, cam, &w, center))
        .collect();
    projected.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    let (tx, ty) = tile_grid(cam);
    let mut bins = vec![Vec::new(); (tx * ty) as usize];
    for (k, p) in projected.iter().enumerate() {
        let lo_x = (p.mean[0] - p.radius).max(0.0);
        let hi_x = (p.mean[0] + p.radius).min(cam.width as f64 - 1.0);
        let lo_y = (p.mean[1] - p.radius).max(0.0);
        let hi_y = (p.mean[1] + p.radius).min(cam.height as f64 - 1.0);
        if !(lo_x <= hi_x && lo_y <= hi_y) {
            continue;
        }
        let (x0, x1) = (lo_x.ceil() as u32 / TILE, hi_x.floor() as u32 / TILE);
        let (y0, y1) = (lo_y.ceil() as u32 / TILE, hi_y.floor() as u32 / TILE);
        for yy in y0..=y1 {
            for xx in x0..=x1 {
                bins[(yy * tx + xx) as usize].push(k as u32);
            }
        }
    }
    (projected, bins)
}

fn tile_pixels(cam: &Camera, tile: usize) -> impl Iterator<Item = (u32, u32)> {
    let (tx, _) = tile_grid(cam);
    let (bx, by) = ((tile as u32 % tx) * TILE, (tile as u32 / tx) * TILE);
    let (ex, ey) = ((bx + TILE).min(cam.width), (by + TILE).min(cam.height));
    (by..ey).flat_map(move |y| (bx..ex).map(move |x| (x, y)))
}

/// Alpha of projected splat `p` at pixel `(x, y)`, with `exp(power)`, or
/// `None` outside the footprint or below [`MIN_ALPHA`].
fn pixel_alpha(p: &Projected, opacity: f64, x: u32, y: u32) -> Option<(f64, f64)> {
    let dx = x as f64 - p.mean[0];
    let dy = y as f64 - p.mean[1];
    if dx.abs() > p.radius || dy.abs() > p.radius {
        return None;
    }
    let q = &p.conic;
    let power = -0.5 * (q[(0, 0)] * dx * dx + 2.0 * q[(0, 1)] * dx * dy + q[(1, 1)] * dy * dy);
    if power > 0.0 {
        return None;
    }
    let g = power.exp();
    let alpha = opacity * g;
    (alpha >= MIN_ALPHA).then_some((alpha, g))
}

/// Renders splats; with `record` the returned tape supports
/// [`render_backward`].
pub fn render_splats(
    splats: &[Splat],
    cam: &Camera,
    background: [f64; 3],
    record: bool,
) -> Result<(Image, Option<RenderTape>), RenderError> {
    cam.validate()?;
    let (projected, bins) = prepare(splats, cam);
    let tiles: Vec<(Vec<((u32, u32), [f64; 3])>, Vec<PixelTrace>)> = bins
        .par_iter()
        .enumerate()
        .map(|(tile, list)| {
            let mut colors = Vec::new();
            let mut traces = Vec::new();
            for (x, y) in tile_pixels(cam, tile) {
                let mut c = [0.0; 3];
                let mut t = 1.0;
                let mut trace = PixelTrace::default();
                for &k in list {
                    let p = &projected[k as usize];
                    let Some((alpha, g)) = pixel_alpha(p, splats[p.index].opacity, x, y) else {
                        continue;
                    };
                    for ch in 0..3 {
                        c[ch] += t * alpha * p.color[ch];
                    }
                    t *= 1.0 - alpha;
                    if record {
                        trace.hits.push((k, alpha, g));
                    }
                }
                for ch in 0..3 {
                    c[ch] += t * background[ch];
                }
                colors.push(((x, y), c));
                if record {
                    traces.push(trace);
                }
            }
            (colors, traces)
        })
        .collect();

    let mut img = Image::new(cam.width, cam.height);
    let n = (cam.width * cam.height) as usize;
    let mut pixel_traces = if record { vec![PixelTrace::default(); n] } else { Vec::new() };
    for (colors, traces) in tiles {
        for (i, ((x, y), c)) in colors.iter().enumerate() {
            let idx = (y * cam.width + x) as usize;
            for ch in 0..3 {
                img.data[ch * n + idx] = c[ch];
            }
            if record {
                pixel_traces[idx] = traces[i].clone();
            }
        }
    }
    let tape = record.then(|| RenderTape {
        projected,
        traces: pixel_traces,
        background,
        splat_count: splats.len(),
    });
    Ok((img, tape))
}

/// Renders a scene.
pub fn render(scene: &SplatScene, cam: &Camera, background: [f64; 3]) -> Result<Image, RenderError> {
    let splats: Vec<Splat> = scene.gaussians.iter().map(Splat::from).collect();
    Ok(render_splats(&splats, cam, background, false)?.0)
}

#[derive(Clone, Debug, Default)]
struct ProjGrad {
    mean: [f64; 2],
    /// Full-matrix gradient with respect to the conic.
    conic: [[f64; 2]; 2],
    color: [f64; 3],
    opacity: f64,
}

/// Gradients of a loss with respect to every splat, given `∂L/∂image`.
pub fn render_backward(
    splats: &[Splat],
    cam: &Camera,
    tape: &RenderTape,
    d_image: &Image,
) -> Result<Vec<SplatGrad>, RenderError> {
    if d_image.width != cam.width || d_image.height != cam.height {
        return Err(RenderError::Dimensions {
            a: (cam.width, cam.height),
            b: (d_image.width, d_image.height),
        });
    }
    let n = (cam.width * cam.height) as usize;
    let width = cam.width as usize;
    // Rows are processed in parallel into per-row sparse accumulators and
    // merged in row order, which keeps the result deterministic.
    let rows: Vec<Vec<(u32, ProjGrad)>> = (0..cam.height as usize)
        .into_par_iter()
        .map(|y| {
            let mut acc: Vec<(u32, ProjGrad)> = Vec::new();
            let mut slot = std::collections::HashMap::new();
            for x in 0..width {
                let idx = y * width + x;
                let trace = &tape.traces[idx];
                if trace.hits.is_empty() {
                    continue;
                }
                let g: [f64; 3] = std::array::from_fn(|c| d_image.data[c * n + idx]);
                let mut trans = Vec::with_capacity(trace.hits.len());
                let mut t = 1.0;
                for &(_, alpha, _) in &trace.hits {
                    trans.push(t);
                    t *= 1.0 - alpha;
                }
                let mut behind = tape.background;
                for (h, &(k, alpha, gauss)) in trace.hits.iter().enumerate().rev() {
                    let p = &tape.projected[k as usize];
                    let ti = trans[h];
                    let e = *slot.entry(k).or_insert_with(|| {
                        acc.push((k, ProjGrad::default()));
                        acc.len() - 1
                    });
                    let pg = &mut acc[e].1;
                    let mut d_alpha = 0.0;
                    for c in 0..3 {
                        pg.color[c] += ti * alpha * g[c];
                        d_alpha += ti * g[c] * (p.color[c] - behind[c]);
                    }
                    for c in 0..3 {
                        behind[c] = alpha * p.color[c] + (1.0 - alpha) * behind[c];
                    }
                    pg.opacity += d_alpha * gauss;
                    let d_power = d_alpha * alpha;
                    let dx = x as f64 - p.mean[0];
                    let dy = y as f64 - p.mean[1];
                    let q = &p.conic;
                    pg.mean[0] += d_power * (q[(0, 0)] * dx + q[(0, 1)] * dy);
                    pg.mean[1] += d_power * (q[(0, 1)] * dx + q[(1, 1)] * dy);
                    pg.conic[0][0] += -0.5 * d_power * dx * dx;
                    pg.conic[0][1] += -0.5 * d_power * dx * dy;
                    pg.conic[1][0] += -0.5 * d_power * dx * dy;
                    pg.conic[1][1] += -0.5 * d_power * dy * dy;
                }
            }
            acc
        })
        .collect();

    let mut grads: Vec<ProjGrad> = vec![ProjGrad::default(); tape.projected.len()];
    for row in rows {
        for (k, pg) in row {
            let dst = &mut grads[k as usize];
            for i in 0..2 {
                dst.mean[i] += pg.mean[i];
                for j in 0..2 {
                    dst.conic[i][j] += pg.conic[i][j];
                }
            }
            for c in 0..3 {
                dst.color[c] += pg.color[c];
            }
            dst.opacity += pg.opacity;
        }
    }

    let w = cam.rotation_matrix();
    let mut out: Vec<SplatGrad> = splats
        .iter()
        .map(|s| SplatGrad {
            sh: vec![[0.0; 3]; s.sh.len()],
            ..SplatGrad::default()
        })
        .collect();
    for (p, pg) in tape.projected.iter().zip(&grads) {
        let s = &splats[p.index];
        let dst = &mut out[p.index];
        dst.opacity += pg.opacity;

        // Colour: SH coefficients and view direction.
        let basis = sh_basis(p.dir);
        let dc: [f64; 3] = std::array::from_fn(|c| if p.color_raw[c] > 0.0 { pg.color[c] } else { 0.0 });
        let mut d_dir = [0.0; 3];
        let dbasis = sh_basis_grad(p.dir);
        for (j, k) in s.sh.iter().enumerate() {
            for c in 0..3 {
                dst.sh[j][c] += basis[j] * dc[c];
                for a in 0..3 {
                    d_dir[a] += dc[c] * k[c] * dbasis[j][a];
                }
            }
        }
        if p.dist > 0.0 {
            let proj = d_dir[0] * p.dir[0] + d_dir[1] * p.dir[1] + d_dir[2] * p.dir[2];
            for a in 0..3 {
                dst.position[a] += (d_dir[a] - p.dir[a] * proj) / p.dist;
            }
        }

        // Conic → 2D covariance → 3D covariance and Jacobian.
        let gq = Matrix2::new(pg.conic[0][0], pg.conic[0][1], pg.conic[1][0], pg.conic[1][1]);
        let g2 = -(p.conic * gq * p.conic);
        let tw = p.jac * w;
        let g3 = tw.transpose() * g2 * tw;
        let d_tw = (g2 + g2.transpose()) * tw * p.cov3d;
        let d_jac = d_tw * w.transpose();

        let (x, y, z) = (p.t[0], p.t[1], p.t[2]);
        let (fx, fy) = (cam.fx, cam.fy);
        let mut dt = [0.0; 3];
        dt[2] += d_jac[(0, 0)] * (-fx / (z * z));
        dt[0] += d_jac[(0, 2)] * (-fx / (z * z));
        dt[2] += d_jac[(0, 2)] * (2.0 * fx * x / (z * z * z));
        dt[2] += d_jac[(1, 1)] * (-fy / (z * z));
        dt[1] += d_jac[(1, 2)] * (-fy / (z * z));
        dt[2] += d_jac[(1, 2)] * (2.0 * fy * y / (z * z * z));
        dt[0] += pg.mean[0] * fx / z;
        dt[2] += pg.mean[0] * (-fx * x / (z * z));
        dt[1] += pg.mean[1] * fy / z;
        dt[2] += pg.mean[1] * (-fy * y / (z * z));
        let dp = w.transpose() * Vector3::new(dt[0], dt[1], dt[2]);
        for a in 0..3 {
            dst.position[a] += dp[a];
        }

        // Σ = M Mᵀ with M = R S.
        let q = s.rotation;
        let qn_len = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        let qn = q.map(|v| v / qn_len);
        let r = quat_to_mat(qn);
        let sm = Matrix3::from_diagonal(&vec3(s.scale));
        let m = r * sm;
        let d_m = (g3 + g3.transpose()) * m;
        let d_s = r.transpose() * d_m;
        for k in 0..3 {
            dst.scale[k] += d_s[(k, k)];
        }
        let d_r = d_m * sm;
        let d_qn = quat_to_mat_backward(qn, &d_r);
        let dot: f64 = (0..4).map(|i| qn[i] * d_qn[i]).sum();
        for i in 0..4 {
            dst.rotation[i] += (d_qn[i] - qn[i] * dot) / qn_len;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
