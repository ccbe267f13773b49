//! Dense initialisation from a volumetric density field: uniform ray
//! marching, median-depth extraction and back-projection of pixels into a
//! coloured point cloud.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::PointCloud;
use crate::render::Camera;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DensifyError {
    #[error("invalid ray: {0}")]
    Ray(String),
    #[error("at least one camera is required")]
    NoCameras,
    #[error("no ray reached a surface")]
    NoSurface,
    #[error(transparent)]
    Camera(#[from] crate::render::RenderError),
}

/// Density `σ(x) ≥ 0` and colour `c(x) ∈ [0,1]³`.
pub trait DensityOracle: Sync {
    fn sigma(&self, x: [f64; 3]) -> f64;
    fn color(&self, x: [f64; 3]) -> [f64; 3];
}

/// Analytic test fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DensityField {
    Vacuum,
    /// Constant density between two planes orthogonal to `axis`.
    Slab { axis: usize, min: f64, max: f64, sigma: f64, color: [f64; 3] },
    /// Constant density between two radii.
    SphereShell { center: [f64; 3], inner: f64, outer: f64, sigma: f64, color: [f64; 3] },
    /// `σ = max(0, sigma0 + slope·x[axis])`; colour blends from `color0` at
    /// `x[axis] = -1` to `color1` at `+1`.
    AxisGradient { axis: usize, sigma0: f64, slope: f64, color0: [f64; 3], color1: [f64; 3] },
}

impl DensityOracle for DensityField {
    fn sigma(&self, x: [f64; 3]) -> f64 {
        match self {
            DensityField::Vacuum => 0.0,
            DensityField::Slab { axis, min, max, sigma, .. } => {
                if x[*axis] >= *min && x[*axis] <= *max {
                    *sigma
                } else {
                    0.0
                }
            }
            DensityField::SphereShell { center, inner, outer, sigma, .. } => {
                let r = (0..3).map(|a| (x[a] - center[a]).powi(2)).sum::<f64>().sqrt();
                if r >= *inner && r <= *outer {
                    *sigma
                } else {
                    0.0
                }
            }
            DensityField::AxisGradient { axis, sigma0, slope, .. } => (sigma0 + slope * x[*axis]).max(0.0),
        }
    }

    fn color(&self, x: [f64; 3]) -> [f64; 3] {
        match self {
            DensityField::Vacuum => [0.0; 3],
            DensityField::Slab { color, .. } | DensityField::SphereShell { color, .. } => *color,
            DensityField::AxisGradient { axis, color0, color1, .. } => {
                let t = ((x[*axis] + 1.0) * 0.5).clamp(0.0, 1.0);
                std::array::from_fn(|c| color0[c] * (1.0 - t) + color1[c] * t)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ray {
    pub origin: [f64; 3],
    /// Unit direction.
    pub direction: [f64; 3],
    pub near: f64,
    pub far: f64,
    pub samples: usize,
}

impl Ray {
    pub fn new(origin: [f64; 3], direction: [f64; 3], near: f64, far: f64, samples: usize) -> Result<Self, DensifyError> {
        let n = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n.is_finite() && n > 0.0) {
            return Err(DensifyError::Ray("direction has zero length".into()));
        }
        if !(near.is_finite() && far.is_finite() && near < far) {
            return Err(DensifyError::Ray(format!("need near < far, got {near} and {far}")));
        }
        if samples == 0 {
            return Err(DensifyError::Ray("at least one sample is required".into()));
        }
        Ok(Self { origin, direction: direction.map(|v| v / n), near, far, samples })
    }

    pub fn spacing(&self) -> f64 {
        (self.far - self.near) / self.samples as f64
    }

    /// Sample depth `tᵢ = near + i·δ`.
    pub fn t(&self, i: usize) -> f64 {
        self.near + i as f64 * self.spacing()
    }

    pub fn at(&self, t: f64) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + t * self.direction[a])
    }
}

/// Result of marching one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct Composite {
    pub color: [f64; 3],
    /// `T₁..T_{N+1}`; `T₁ = 1` and `T_{N+1}` is what passes the far bound.
    pub transmittance: Vec<f64>,
    pub alpha: Vec<f64>,
}

/// `C = Σ Tᵢ αᵢ cᵢ` with `αᵢ = 1 − exp(−σᵢ δ)` over uniform samples.
pub fn composite<F: DensityOracle + ?Sized>(ray: &Ray, field: &F) -> Composite {
    let delta = ray.spacing();
    let mut t = 1.0;
    let mut color = [0.0; 3];
    let mut transmittance = Vec::with_capacity(ray.samples + 1);
    let mut alpha = Vec::with_capacity(ray.samples);
    transmittance.push(1.0);
    for i in 0..ray.samples {
        let x = ray.at(ray.t(i));
        let a = 1.0 - (-field.sigma(x) * delta).exp();
        if a > 0.0 {
            let c = field.color(x);
            for ch in 0..3 {
                color[ch] += t * a * c[ch];
            }
        }
        t *= 1.0 - a;
        alpha.push(a);
        transmittance.push(t);
    }
    Composite { color, transmittance, alpha }
}

/// Depth at which transmittance first drops below one half.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum MedianDepth {
    /// Sample index `i` with `Tᵢ ≥ 0.5 > Tᵢ₊₁`, and its depth `tᵢ`.
    Surface { index: usize, depth: f64 },
    NoSurface,
}

pub fn median_depth(ray: &Ray, comp: &Composite) -> MedianDepth {
    match comp.transmittance.iter().skip(1).position(|&t| t < 0.5) {
        Some(index) => MedianDepth::Surface { index, depth: ray.t(index) },
        None => MedianDepth::NoSurface,
    }
}

/// Parameters for [`sample_dense_points`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseSampling {
    pub rays: usize,
    pub near: f64,
    pub far: f64,
    pub samples: usize,
    pub seed: u64,
}

impl Default for DenseSampling {
    fn default() -> Self {
        Self { rays: 100_000, near: 0.05, far: 10.0, samples: 256, seed: 0 }
    }
}

/// Camera ray through pixel `(x, y)` (pixel centres at integer coordinates).
pub fn pixel_ray(cam: &Camera, x: f64, y: f64, near: f64, far: f64, samples: usize) -> Result<Ray, DensifyError> {
    let d_cam = [(x - cam.cx) / cam.fx, (y - cam.cy) / cam.fy, 1.0];
    let r = cam.rotation;
    let d: [f64; 3] = std::array::from_fn(|a| (0..3).map(|k| r[k][a] * d_cam[k]).sum());
    Ray::new(cam.center(), d, near, far, samples)
}

/// Marches `rays` randomly chosen training-view pixels and back-projects
/// every ray that reaches a surface to `p = o + z·d`, coloured by `C(r)`.
pub fn sample_dense_points<F: DensityOracle + ?Sized>(
    field: &F,
    cameras: &[Camera],
    params: &DenseSampling,
) -> Result<PointCloud, DensifyError> {
    if cameras.is_empty() {
        return Err(DensifyError::NoCameras);
    }
    for c in cameras {
        c.validate()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let rays = (0..params.rays)
        .map(|_| {
            let cam = &cameras[rng.random_range(0..cameras.len())];
            let x = rng.random_range(0..cam.width) as f64;
            let y = rng.random_range(0..cam.height) as f64;
            pixel_ray(cam, x, y, params.near, params.far, params.samples)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let hits: Vec<Option<([f32; 3], [f32; 3])>> = rays
        .par_iter()
        .map(|ray| {
            let comp = composite(ray, field);
            match median_depth(ray, &comp) {
                MedianDepth::Surface { depth, .. } => {
                    Some((ray.at(depth).map(|v| v as f32), comp.color.map(|v| v.clamp(0.0, 1.0) as f32)))
                }
                MedianDepth::NoSurface => None,
            }
        })
        .collect();
    let mut cloud = PointCloud::default();
    for (p, c) in hits.into_iter().flatten() {
        cloud.positions.push(p);
        cloud.colors.push(c);
    }
    if cloud.positions.is_empty() {
        return Err(DensifyError::NoSurface);
    }
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn axis_ray(samples: usize) -> Ray {
        Ray::new([0.0, 0.0, -1.0], [0.0, 0.0, 1.0], 0.0, 4.0, samples).unwrap()
    }

    fn opaque_wall(at: f64) -> DensityField {
        DensityField::Slab { axis: 2, min: at, max: 1e9, sigma: 1e6, color: [0.2, 0.4, 0.6] }
    }

    #[test]
    fn vacuum() {
        let r = axis_ray(64);
        let c = composite(&r, &DensityField::Vacuum);
        assert_eq!(c.color, [0.0; 3]);
        assert!(c.transmittance.iter().all(|&t| t == 1.0));
        assert_eq!(median_depth(&r, &c), MedianDepth::NoSurface);
    }

    #[test]
    fn beer_lambert_limit() {
        // Slab z ∈ [0, 1.5] crossed by a ray from z = -1.
        let f = DensityField::Slab { axis: 2, min: 0.0, max: 1.5, sigma: 1.3, color: [1.0; 3] };
        let c = composite(&axis_ray(10_000), &f);
        let want = (-1.3f64 * 1.5).exp();
        assert!((c.transmittance.last().unwrap() - want).abs() < 1e-3);
    }

    #[test]
    fn single_opaque_sample_takes_its_colour() {
        let r = Ray::new([0.0; 3], [1.0, 0.0, 0.0], 0.0, 1.0, 1).unwrap();
        let f = DensityField::Slab { axis: 0, min: -1.0, max: 1.0, sigma: 1e9, color: [0.3, 0.6, 0.9] };
        let c = composite(&r, &f);
        for ch in 0..3 {
            assert!((c.color[ch] - [0.3, 0.6, 0.9][ch]).abs() < 1e-12);
        }
    }

    #[test]
    fn transmittance_is_conserved() {
        let fields = [
            DensityField::Slab { axis: 2, min: 0.2, max: 0.9, sigma: 2.0, color: [1.0; 3] },
            DensityField::SphereShell { center: [0.0, 0.0, 1.0], inner: 0.3, outer: 0.8, sigma: 5.0, color: [1.0; 3] },
            DensityField::AxisGradient { axis: 2, sigma0: 0.5, slope: 1.0, color0: [1.0; 3], color1: [1.0; 3] },
        ];
        for f in &fields {
            let c = composite(&axis_ray(500), f);
            let w: f64 = c.alpha.iter().zip(&c.transmittance).map(|(a, t)| a * t).sum();
            assert!((w + c.transmittance.last().unwrap() - 1.0).abs() < 1e-12);
            // With white colour, C equals the accumulated weight.
            assert!((c.color[0] - w).abs() < 1e-12);
        }
    }

    #[test]
    fn opaque_wall_depth() {
        let r = Ray::new([0.0; 3], [0.0, 0.0, 1.0], 0.0, 5.0, 1000).unwrap();
        let c = composite(&r, &opaque_wall(2.0));
        match median_depth(&r, &c) {
            MedianDepth::Surface { depth, .. } => assert!((depth - 2.0).abs() <= r.spacing()),
            MedianDepth::NoSurface => panic!("wall not found"),
        }
    }

    #[test]
    fn crossing_index_matches_linear_scan() {
        let f = DensityField::AxisGradient { axis: 2, sigma0: 0.3, slope: 0.7, color0: [0.0; 3], color1: [1.0; 3] };
        for n in [10, 37, 200, 999] {
            let r = axis_ray(n);
            let c = composite(&r, &f);
            let mut want = None;
            for i in 0..n {
                if c.transmittance[i] >= 0.5 && c.transmittance[i + 1] < 0.5 {
                    want = Some(i);
                    break;
                }
            }
            match median_depth(&r, &c) {
                MedianDepth::Surface { index, depth } => {
                    assert_eq!(Some(index), want);
                    assert_eq!(depth, r.t(index));
                }
                MedianDepth::NoSurface => assert_eq!(want, None),
            }
        }
    }

    #[test]
    fn refinement_converges_at_first_order() {
        let f = DensityField::AxisGradient { axis: 2, sigma0: 0.4, slope: 0.5, color0: [1.0, 0.0, 0.2], color1: [0.0, 1.0, 0.8] };
        let ns = [100usize, 200, 400, 800, 1600, 3200];
        let pts: Vec<(f64, f64)> = ns
            .iter()
            .map(|&n| {
                let a = composite(&axis_ray(n), &f).color;
                let b = composite(&axis_ray(2 * n), &f).color;
                let d = (0..3).map(|c| (a[c] - b[c]).abs()).fold(0.0, f64::max);
                ((n as f64).ln(), d.ln())
            })
            .collect();
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
        let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
            / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
        assert!(-slope >= 0.9, "slope {slope}");
    }

    fn plane_camera() -> Camera {
        Camera::look_at([0.0, 0.0, -2.0], [0.0; 3], [0.0, -1.0, 0.0], 32, 32, 50.0).unwrap()
    }

    #[test]
    fn plane_points_lie_on_the_plane() {
        let params = DenseSampling { rays: 2000, near: 0.1, far: 6.0, samples: 600, seed: 3 };
        let cloud = sample_dense_points(&opaque_wall(1.0), &[plane_camera()], &params).unwrap();
        assert_eq!(cloud.positions.len(), 2000);
        let spacing = (params.far - params.near) / params.samples as f64;
        for p in &cloud.positions {
            assert!((p[2] as f64 - 1.0).abs() <= spacing + 1e-6, "{p:?}");
        }
    }

    #[test]
    fn points_stay_within_ray_bounds() {
        let f = DensityField::SphereShell { center: [0.0; 3], inner: 0.5, outer: 0.7, sigma: 20.0, color: [0.5; 3] };
        let cam = plane_camera();
        let params = DenseSampling { rays: 500, near: 0.5, far: 4.0, samples: 300, seed: 1 };
        let cloud = sample_dense_points(&f, &[cam], &params).unwrap();
        let o = cam.center();
        for p in &cloud.positions {
            let d = (0..3).map(|a| (p[a] as f64 - o[a]).powi(2)).sum::<f64>().sqrt();
            assert!(d >= params.near - 1e-5 && d <= params.far + 1e-5);
        }
    }

    #[test]
    fn vacuum_scene_is_an_error_and_sampling_is_seeded() {
        let params = DenseSampling { rays: 50, samples: 32, ..DenseSampling::default() };
        assert_eq!(
            sample_dense_points(&DensityField::Vacuum, &[plane_camera()], &params),
            Err(DensifyError::NoSurface)
        );
        assert_eq!(sample_dense_points(&opaque_wall(1.0), &[], &params), Err(DensifyError::NoCameras));
        let a = sample_dense_points(&opaque_wall(1.0), &[plane_camera()], &params).unwrap();
        let b = sample_dense_points(&opaque_wall(1.0), &[plane_camera()], &params).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ray_validation() {
        assert!(Ray::new([0.0; 3], [0.0; 3], 0.0, 1.0, 4).is_err());
        assert!(Ray::new([0.0; 3], [1.0, 0.0, 0.0], 1.0, 1.0, 4).is_err());
        assert!(Ray::new([0.0; 3], [1.0, 0.0, 0.0], 0.0, 1.0, 0).is_err());
        let r = Ray::new([0.0; 3], [0.0, 3.0, 4.0], 0.0, 1.0, 4).unwrap();
        assert!((r.direction[1] - 0.6).abs() < 1e-15);
    }
}
