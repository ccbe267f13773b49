//! Fitting the field to the implicit attributes of an existing scene.
//!
//! Each step draws a mini-batch of Gaussians, evaluates the field at their
//! positions and minimises the squared error against the scene's own
//! opacity, normalised scale, rotation and residual SH.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, LrSchedule, EPS_DEFAULT};
use super::TrainError;
use crate::field::HashGridField;
use crate::masks::{MaskState, INITIAL_PASS_PROBABILITY};
use crate::math::{logit, to_f64_3};
use crate::model::{split_attrs, ImplicitAttrs, SplatScene};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub iterations: usize,
    /// Gaussians per step; the whole scene when larger than it.
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub seed: u64,
    /// Decay of the exponential moving average reported as the smoothed loss.
    pub smoothing: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 4096,
            lr: LrSchedule { init: 1e-2, end: 1e-3, steps: 2000, warmup: 0 },
            seed: 0,
            smoothing: 0.95,
        }
    }
}

/// Root-mean-square error per attribute family, over all components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttributeRmse {
    pub opacity: f64,
    pub scale: f64,
    pub rotation: f64,
    pub sh: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub losses: Vec<f64>,
    pub smoothed: Vec<f64>,
    pub rmse: AttributeRmse,
}

/// One logged distillation step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillLog {
    pub step: usize,
    pub loss: f64,
    pub smoothed: f64,
    pub lr: f64,
}

fn targets(scene: &SplatScene) -> Result<Vec<([f64; 3], u8, ImplicitAttrs)>, TrainError> {
    scene
        .gaussians
        .iter()
        .map(|g| {
            let (e, mut i) = split_attrs(g)?;
            let n = i.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
            i.rotation.iter_mut().for_each(|v| *v /= n);
            Ok((to_f64_3(e.position), e.bandwidth, i))
        })
        .collect()
}

/// Squared errors per family and `∂/∂pred` of their sum. The target
/// quaternion is sign-aligned with the prediction first.
fn residual(pred: &ImplicitAttrs, target: &ImplicitAttrs) -> ([f64; 4], [usize; 4], ImplicitAttrs) {
    let flip = if (0..4).map(|k| pred.rotation[k] * target.rotation[k]).sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
    let d_o = pred.opacity - target.opacity;
    let d_s: [f64; 3] = std::array::from_fn(|a| pred.normalized_scale[a] - target.normalized_scale[a]);
    let d_q: [f64; 4] = std::array::from_fn(|k| pred.rotation[k] - flip * target.rotation[k]);
    let n_sh = pred.residual_sh.len().min(target.residual_sh.len());
    let d_k: Vec<[f64; 3]> = (0..n_sh)
        .map(|j| std::array::from_fn(|c| pred.residual_sh[j][c] - target.residual_sh[j][c]))
        .collect();
    let sq = [
        d_o * d_o,
        d_s.iter().map(|v| v * v).sum(),
        d_q.iter().map(|v| v * v).sum(),
        d_k.iter().flatten().map(|v| v * v).sum(),
    ];
    let counts = [1, 3, 4, 3 * n_sh];
    let grad = ImplicitAttrs {
        opacity: 2.0 * d_o,
        normalized_scale: d_s.map(|v| 2.0 * v),
        rotation: d_q.map(|v| 2.0 * v),
        residual_sh: d_k.iter().map(|b| b.map(|v| 2.0 * v)).collect(),
    };
    (sq, counts, grad)
}

/// Per-family RMSE of `field` against the scene's implicit attributes.
pub fn attribute_rmse(scene: &SplatScene, field: &HashGridField) -> Result<AttributeRmse, TrainError> {
    let t = targets(scene)?;
    let (sq, counts) = t
        .par_iter()
        .map(|(p, b, target)| {
            let (sq, counts, _) = residual(&field.eval_implicit(*p, *b), target);
            (sq, counts)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(([0.0; 4], [0usize; 4]), |(mut s, mut c), (a, b)| {
            for k in 0..4 {
                s[k] += a[k];
                c[k] += b[k];
            }
            (s, c)
        });
    let r = |k: usize| if counts[k] == 0 { 0.0 } else { (sq[k] / counts[k] as f64).sqrt() };
    Ok(AttributeRmse { opacity: r(0), scale: r(1), rotation: r(2), sh: r(3) })
}

/// Masks that reproduce the scene as given: every Gaussian kept and each
/// SH degree enabled up to its bandwidth.
pub fn masks_for_scene(scene: &SplatScene, tau: f64, tau_sh: f64) -> MaskState {
    let pass = logit(INITIAL_PASS_PROBABILITY);
    let fail = logit(tau_sh * 0.1);
    let mut m = MaskState::new(scene.len(), tau, tau_sh);
    for (e, g) in m.eta.iter_mut().zip(&scene.gaussians) {
        *e = std::array::from_fn(|l| if l < g.bandwidth as usize { pass } else { fail });
    }
    m
}

/// Fits `field` to the scene's implicit attributes in place.
pub fn distill(
    scene: &SplatScene,
    field: &mut HashGridField,
    cfg: &DistillConfig,
    mut log: impl FnMut(&DistillLog),
) -> Result<DistillReport, TrainError> {
    if scene.is_empty() {
        return Err(TrainError::EmptyScene);
    }
    let t = targets(scene)?;
    let n = t.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt_theta = Adam::new(field.theta.len(), EPS_DEFAULT);
    let mut opt_heads = Adam::new(field.heads.len(), EPS_DEFAULT);
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut smoothed = Vec::with_capacity(cfg.iterations);
    let mut ema = None;
    for step in 0..cfg.iterations {
        let batch: Vec<usize> = if cfg.batch_size >= n {
            (0..n).collect()
        } else {
            (0..cfg.batch_size).map(|_| rng.random_range(0..n)).collect()
        };
        let scale = 1.0 / batch.len() as f64;
        let results: Vec<_> = batch
            .par_iter()
            .map(|&i| {
                let (p, b, target) = &t[i];
                let (pred, tape) = field.forward(*p, *b);
                let (sq, _, mut g) = residual(&pred, target);
                g.opacity *= scale;
                g.normalized_scale.iter_mut().for_each(|v| *v *= scale);
                g.rotation.iter_mut().for_each(|v| *v *= scale);
                g.residual_sh.iter_mut().flatten().for_each(|v| *v *= scale);
                (sq.iter().sum::<f64>(), tape, g)
            })
            .collect();
        let loss = results.iter().map(|r| r.0).sum::<f64>() * scale;
        if !loss.is_finite() {
            return Err(TrainError::Diverged { step, loss, detail: "distillation loss is not finite".into() });
        }
        let (tapes, ups): (Vec<_>, Vec<_>) = results.into_iter().map(|(_, t, g)| (t, g)).unzip();
        let (grad, _) = field.backward_batch(&tapes, &ups);
        let lr = cfg.lr.at(step);
        opt_theta.step(&mut field.theta, &grad.theta, lr);
        opt_heads.step(&mut field.heads, &grad.heads, lr);

        let e = match ema {
            None => loss,
            Some(prev) => cfg.smoothing * prev + (1.0 - cfg.smoothing) * loss,
        };
        ema = Some(e);
        losses.push(loss);
        smoothed.push(e);
        log(&DistillLog { step, loss, smoothed: e, lr });
    }
    Ok(DistillReport { losses, smoothed, rmse: attribute_rmse(scene, field)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{FieldConfig, HashGridConfig};
    use crate::model::Gaussian;

    fn small_field(seed: u64) -> HashGridField {
        let cfg = FieldConfig {
            grid: HashGridConfig { levels: 6, min_res: 4, max_res: 64, table_size_log2: 12, feature_dim: 2 },
            hidden_width: 32,
            ..FieldConfig::default()
        };
        HashGridField::new(cfg, seed).unwrap()
    }

    fn constant_scene(n: usize) -> SplatScene {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        SplatScene::new(
            (0..n)
                .map(|_| Gaussian {
                    position: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
                    opacity: 0.6,
                    scale: [0.02, 0.01, 0.015],
                    rotation: [0.8, 0.0, 0.6, 0.0],
                    sh: vec![[0.1, 0.2, 0.3], [0.05, -0.05, 0.0], [0.0, 0.02, 0.01], [0.03, 0.0, -0.02]],
                    bandwidth: 1,
                })
                .collect(),
        )
    }

    #[test]
    fn zero_iterations_leave_the_field_unchanged() {
        let scene = constant_scene(50);
        let mut field = small_field(1);
        let before = field.clone();
        let cfg = DistillConfig { iterations: 0, ..DistillConfig::default() };
        let r = distill(&scene, &mut field, &cfg, |_| {}).unwrap();
        assert_eq!(field, before);
        assert!(r.losses.is_empty());
        assert!(r.rmse.opacity > 0.0);
    }

    #[test]
    fn constant_attributes_fit_closely() {
        let scene = constant_scene(400);
        let mut field = small_field(2);
        let cfg = DistillConfig { iterations: 2000, batch_size: 256, ..DistillConfig::default() };
        let r = distill(&scene, &mut field, &cfg, |_| {}).unwrap();
        assert!(r.rmse.opacity < 1e-3, "{:?}", r.rmse);
        assert!(r.rmse.scale < 1e-3, "{:?}", r.rmse);
        assert!(r.rmse.rotation < 1e-3, "{:?}", r.rmse);
        assert!(r.rmse.sh < 1e-3, "{:?}", r.rmse);
        assert!(r.smoothed.last().unwrap() < &r.smoothed[0]);
    }

    #[test]
    fn distillation_is_deterministic() {
        let scene = constant_scene(300);
        let cfg = DistillConfig { iterations: 20, batch_size: 64, ..DistillConfig::default() };
        let mut a = small_field(3);
        let mut b = small_field(3);
        let ra = distill(&scene, &mut a, &cfg, |_| {}).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let rb = pool.install(|| distill(&scene, &mut b, &cfg, |_| {}).unwrap());
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }

    #[test]
    fn non_finite_targets_abort() {
        let mut scene = constant_scene(10);
        scene.gaussians[3].sh[1][0] = f32::NAN;
        let mut field = small_field(4);
        let cfg = DistillConfig { iterations: 5, ..DistillConfig::default() };
        assert!(matches!(distill(&scene, &mut field, &cfg, |_| {}), Err(TrainError::Diverged { step: 0, .. })));
    }

    #[test]
    fn scene_masks_reproduce_bandwidths() {
        let mut scene = constant_scene(4);
        for (g, b) in scene.gaussians.iter_mut().zip([0u8, 1, 2, 3]) {
            g.bandwidth = b;
            g.sh.resize(16, [0.0; 3]);
        }
        let m = masks_for_scene(&scene, 0.01, 0.01);
        assert_eq!(m.derive_bandwidth(), vec![0, 1, 2, 3]);
        assert_eq!(m.survivors().len(), 4);
    }
}
