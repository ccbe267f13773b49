//! Gaussian records, scenes and the explicit/implicit attribute split.
//!
//! Stored attributes are single precision, the precision of the on-disk splat
//! format. All derived quantities (covariances, normalised scales, field
//! outputs) are computed in double precision and rounded back once, which is
//! what makes `compose_attrs(split_attrs(g)) == g` hold bit for bit.

mod ply;

use std::collections::BTreeMap;

use nalgebra::Matrix3;
use thiserror::Error;

use crate::math::quat_to_mat;

pub use ply::{
    load_ply, load_point_cloud, read_ply, save_ply, save_point_cloud, write_ply, ExtraProperty,
    PlyError, PointCloud, ScalarKind,
};

/// Highest SH degree carried by any Gaussian.
pub const MAX_SH_DEGREE: usize = 3;

/// Number of RGB coefficients for SH up to and including `degree`.
pub const fn sh_coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Residual (degree ≥ 1) coefficients for a bandwidth.
pub const fn residual_coeff_count(bandwidth: usize) -> usize {
    sh_coeff_count(bandwidth) - 1
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("scale vector has no positive component")]
    ZeroScale,
    #[error("bandwidth {bandwidth} carries {expected} residual SH coefficients, got {actual}")]
    BlockCountMismatch {
        bandwidth: u8,
        expected: usize,
        actual: usize,
    },
    #[error("gaussian {index}: {reason}")]
    Invalid { index: usize, reason: String },
}

/// One splat: position, opacity, scale, rotation and SH colour.
#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub position: [f32; 3],
    /// Activated opacity in `[0, 1]`.
    pub opacity: f32,
    /// Activated (positive) per-axis scale.
    pub scale: [f32; 3],
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: [f32; 4],
    /// `(bandwidth + 1)²` RGB coefficients, degree-major, `m = -l..=l`.
    pub sh: Vec<[f32; 3]>,
    /// Maximum SH degree, `0..=3`.
    pub bandwidth: u8,
}

impl Gaussian {
    /// Base colour (the degree-0 SH coefficient).
    pub fn base_color(&self) -> [f32; 3] {
        self.sh[0]
    }

    /// Checks the type invariants.
    pub fn validate(&self) -> Result<(), String> {
        let finite = self.position.iter().all(|v| v.is_finite())
            && self.opacity.is_finite()
            && self.scale.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.sh.iter().flatten().all(|v| v.is_finite());
        if !finite {
            return Err("non-finite attribute".into());
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(format!("opacity {} outside [0, 1]", self.opacity));
        }
        if self.scale.iter().any(|&s| s <= 0.0) {
            return Err(format!("non-positive scale {:?}", self.scale));
        }
        let n: f64 = self.rotation.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-6 {
            return Err(format!("rotation norm {n} is not 1"));
        }
        if self.bandwidth as usize > MAX_SH_DEGREE {
            return Err(format!("bandwidth {} > {MAX_SH_DEGREE}", self.bandwidth));
        }
        if self.sh.len() != sh_coeff_count(self.bandwidth as usize) {
            return Err(format!(
                "{} SH coefficients for bandwidth {}",
                self.sh.len(),
                self.bandwidth
            ));
        }
        Ok(())
    }
}

/// Directly stored attributes: position, base scale, base colour, bandwidth.
#[derive(Clone, Debug, PartialEq)]
pub struct ExplicitAttrs {
    pub position: [f32; 3],
    /// Base scale γ, the largest scale component.
    pub base_scale: f32,
    pub base_color: [f32; 3],
    pub bandwidth: u8,
}

/// Attributes regenerated from the neural field.
#[derive(Clone, Debug, PartialEq)]
pub struct ImplicitAttrs {
    pub opacity: f64,
    /// Scale divided by the base scale; components in `(0, 1]`.
    pub normalized_scale: [f64; 3],
    pub rotation: [f64; 4],
    /// Degree 1..=bandwidth RGB coefficients.
    pub residual_sh: Vec<[f64; 3]>,
}

/// Splits a Gaussian into its explicit and implicit parts.
pub fn split_attrs(g: &Gaussian) -> Result<(ExplicitAttrs, ImplicitAttrs), ModelError> {
    let gamma = g.scale.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !(gamma > 0.0) {
        return Err(ModelError::ZeroScale);
    }
    let g64 = gamma as f64;
    let explicit = ExplicitAttrs {
        position: g.position,
        base_scale: gamma,
        base_color: g.sh[0],
        bandwidth: g.bandwidth,
    };
    let implicit = ImplicitAttrs {
        opacity: g.opacity as f64,
        normalized_scale: g.scale.map(|s| s as f64 / g64),
        rotation: g.rotation.map(|v| v as f64),
        residual_sh: g.sh[1..].iter().map(|c| c.map(|v| v as f64)).collect(),
    };
    Ok((explicit, implicit))
}

/// Rebuilds a Gaussian from its two attribute groups; `s = γ·ŝ` and
/// `k = [k⁰, k¹..ᵇ]`.
pub fn compose_attrs(e: &ExplicitAttrs, i: &ImplicitAttrs) -> Result<Gaussian, ModelError> {
    let expected = residual_coeff_count(e.bandwidth as usize);
    if i.residual_sh.len() != expected {
        return Err(ModelError::BlockCountMismatch {
            bandwidth: e.bandwidth,
            expected,
            actual: i.residual_sh.len(),
        });
    }
    let gamma = e.base_scale as f64;
    let mut sh = Vec::with_capacity(expected + 1);
    sh.push(e.base_color);
    sh.extend(i.residual_sh.iter().map(|c| c.map(|v| v as f32)));
    Ok(Gaussian {
        position: e.position,
        opacity: i.opacity as f32,
        scale: i.normalized_scale.map(|s| (gamma * s) as f32),
        rotation: i.rotation.map(|v| v as f32),
        sh,
        bandwidth: e.bandwidth,
    })
}

/// 3D covariance `R S Sᵀ Rᵀ`; the quaternion is renormalised in double
/// precision first.
pub fn covariance(g: &Gaussian) -> Matrix3<f64> {
    let q = g.rotation.map(|v| v as f64);
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let r = quat_to_mat(q.map(|v| v / n));
    let s = Matrix3::from_diagonal(&nalgebra::Vector3::new(
        g.scale[0] as f64,
        g.scale[1] as f64,
        g.scale[2] as f64,
    ));
    let m = r * s;
    m * m.transpose()
}

/// Precision at which positions are meaningful.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionPrecision {
    /// Every position is exactly representable as IEEE binary16.
    Half,
    #[default]
    Single,
}

/// Axis-aligned bounding box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: [f32; 3],
    pub max: [f32; 3],
}

/// An ordered list of Gaussians. Order is significant: the codec and the
/// mask state associate rows by index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplatScene {
    pub gaussians: Vec<Gaussian>,
    pub position_precision: PositionPrecision,
    /// Free-form key/value pairs, persisted as PLY comments.
    pub metadata: BTreeMap<String, String>,
    /// Unrecognised per-vertex PLY properties, kept aligned with `gaussians`.
    pub extra: Vec<ExtraProperty>,
}

impl SplatScene {
    pub fn new(gaussians: Vec<Gaussian>) -> Self {
        Self {
            gaussians,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// Tight bounds of all positions; `None` for an empty scene.
    pub fn bounds(&self) -> Option<Aabb> {
        let first = self.gaussians.first()?;
        let mut b = Aabb {
            min: first.position,
            max: first.position,
        };
        for g in &self.gaussians {
            for a in 0..3 {
                b.min[a] = b.min[a].min(g.position[a]);
                b.max[a] = b.max[a].max(g.position[a]);
            }
        }
        Some(b)
    }

    /// Largest bandwidth present.
    pub fn max_bandwidth(&self) -> u8 {
        self.gaussians.iter().map(|g| g.bandwidth).max().unwrap_or(0)
    }

    /// New scene holding rows `indices` (in that order); extra properties
    /// follow the same selection.
    pub fn select(&self, indices: &[usize]) -> SplatScene {
        SplatScene {
            gaussians: indices.iter().map(|&i| self.gaussians[i].clone()).collect(),
            position_precision: self.position_precision,
            metadata: self.metadata.clone(),
            extra: self.extra.iter().map(|e| e.select(indices)).collect(),
        }
    }

    /// Validates every Gaussian, reporting the first offending index.
    pub fn validate(&self) -> Result<(), ModelError> {
        for (index, g) in self.gaussians.iter().enumerate() {
            g.validate()
                .map_err(|reason| ModelError::Invalid { index, reason })?;
        }
        Ok(())
    }

    /// Rounds positions to the nearest binary16 value and marks the scene as
    /// half precision.
    pub fn round_positions_to_half(&mut self) {
        for g in &mut self.gaussians {
            g.position = g.position.map(|v| half::f16::from_f32(v).to_f32());
        }
        self.position_precision = PositionPrecision::Half;
    }

    /// True when every position is exactly representable in binary16.
    pub fn positions_are_half(&self) -> bool {
        self.gaussians.iter().all(|g| {
            g.position
                .iter()
                .all(|&v| half::f16::from_f32(v).to_f32().to_bits() == v.to_bits())
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::SymmetricEigen;
    use proptest::prelude::*;

    fn gaussian(scale: [f32; 3], rotation: [f32; 4]) -> Gaussian {
        Gaussian {
            position: [0.1, 0.2, 0.3],
            opacity: 0.7,
            scale,
            rotation,
            sh: vec![[0.1, 0.2, 0.3]],
            bandwidth: 0,
        }
    }

    #[test]
    fn split_normalises_by_largest_scale() {
        let (e, i) = split_attrs(&gaussian([2.0, 1.0, 0.5], [1.0, 0.0, 0.0, 0.0])).unwrap();
        assert_eq!(e.base_scale, 2.0);
        assert_eq!(i.normalized_scale, [1.0, 0.5, 0.25]);

        let (_, i) = split_attrs(&gaussian([0.3, 0.3, 0.3], [1.0, 0.0, 0.0, 0.0])).unwrap();
        assert_eq!(i.normalized_scale, [1.0, 1.0, 1.0]);
    }

    #[test]
    fn split_rejects_zero_scale() {
        let g = gaussian([0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(split_attrs(&g), Err(ModelError::ZeroScale));
    }

    #[test]
    fn compose_checks_block_count() {
        let e = ExplicitAttrs {
            position: [0.0; 3],
            base_scale: 1.0,
            base_color: [0.0; 3],
            bandwidth: 1,
        };
        let mut i = ImplicitAttrs {
            opacity: 0.5,
            normalized_scale: [1.0, 0.5, 0.25],
            rotation: [1.0, 0.0, 0.0, 0.0],
            residual_sh: vec![],
        };
        assert!(matches!(
            compose_attrs(&e, &i),
            Err(ModelError::BlockCountMismatch { expected: 3, actual: 0, .. })
        ));
        i.residual_sh = vec![[0.0; 3]; 3];
        let g = compose_attrs(&e, &i).unwrap();
        assert_eq!(g.sh.len(), 4);
        // γ = 1 leaves ŝ untouched.
        assert_eq!(g.scale, [1.0, 0.5, 0.25]);
    }

    #[test]
    fn bandwidth_zero_composes_base_colour_only() {
        let g = gaussian([0.2, 0.1, 0.4], [1.0, 0.0, 0.0, 0.0]);
        let (e, i) = split_attrs(&g).unwrap();
        assert!(i.residual_sh.is_empty());
        assert_eq!(compose_attrs(&e, &i).unwrap().sh, vec![[0.1, 0.2, 0.3]]);
    }

    #[test]
    fn covariance_diagonal_cases() {
        let c = covariance(&gaussian([1.0, 2.0, 3.0], [1.0, 0.0, 0.0, 0.0]));
        assert!((c - Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, 4.0, 9.0))).norm() < 1e-12);

        let h = std::f32::consts::FRAC_1_SQRT_2;
        let c = covariance(&gaussian([1.0, 2.0, 1.0], [h, 0.0, 0.0, h]));
        assert!((c - Matrix3::from_diagonal(&nalgebra::Vector3::new(4.0, 1.0, 1.0))).norm() < 1e-6);
    }

    fn arb_gaussian() -> impl Strategy<Value = Gaussian> {
        (
            prop::array::uniform3(-100.0f32..100.0),
            0.0f32..=1.0,
            prop::array::uniform3(1e-4f32..10.0),
            prop::array::uniform4(-1.0f32..1.0),
            0u8..=3,
            prop::collection::vec(prop::array::uniform3(-2.0f32..2.0), 16),
        )
            .prop_filter_map("degenerate rotation", |(p, o, s, r, b, sh)| {
                let n = r.iter().map(|v| v * v).sum::<f32>().sqrt();
                (n > 1e-3).then(|| Gaussian {
                    position: p,
                    opacity: o,
                    scale: s,
                    rotation: r.map(|v| v / n),
                    sh: sh[..sh_coeff_count(b as usize)].to_vec(),
                    bandwidth: b,
                })
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn compose_inverts_split_exactly(g in arb_gaussian()) {
            let (e, i) = split_attrs(&g).unwrap();
            let back = compose_attrs(&e, &i).unwrap();
            prop_assert_eq!(back, g);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]

        #[test]
        fn covariance_spectrum_is_squared_scale(g in arb_gaussian()) {
            let c = covariance(&g);
            prop_assert!((c - c.transpose()).norm() < 1e-12);
            let eig = SymmetricEigen::new(c);
            let mut ev: Vec<f64> = eig.eigenvalues.iter().copied().collect();
            ev.sort_by(f64::total_cmp);
            let mut s2: Vec<f64> = g.scale.iter().map(|&s| (s as f64).powi(2)).collect();
            s2.sort_by(f64::total_cmp);
            for (a, b) in ev.iter().zip(&s2) {
                prop_assert!((a - b).abs() <= 1e-9 * s2[2].max(1.0), "{ev:?} vs {s2:?}");
            }
            let det = c.determinant();
            let expected = s2.iter().product::<f64>();
            prop_assert!((det - expected).abs() <= 1e-6 * expected);
        }
    }
}
