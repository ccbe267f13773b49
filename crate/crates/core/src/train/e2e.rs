//! Toy end-to-end training: field lookup, masking, rasterisation, loss and
//! Adam updates, with periodic pruning.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, LrSchedule, EPS_DEFAULT, EPS_POSITION};
use super::loss::{total_loss, LossTerms, LossWeights};
use super::TrainError;
use crate::field::{FieldGrad, FieldTape, HashGridField};
use crate::masks::{mask_backward, mask_splat, MaskState};
use crate::math::to_f64_3;
use crate::model::{compose_attrs, split_attrs, ExplicitAttrs, ImplicitAttrs, PointCloud, SplatScene, MAX_SH_DEGREE};
use crate::render::sh::SH_C0;
use crate::render::{render_backward, render_splats, Camera, Image, Splat};

/// Hash-table size and pruning strength of the two model variants.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Base,
    Small,
}

impl Variant {
    pub fn table_size_log2(self) -> u32 {
        match self {
            Variant::Base => 19,
            Variant::Small => 17,
        }
    }

    pub fn lambda_mask(self) -> f64 {
        match self {
            Variant::Base => 0.004,
            Variant::Small => 0.005,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub lambda: f64,
    pub lambda_mask: f64,
    pub lambda_sh_mask: f64,
    pub tau: f64,
    pub tau_sh: f64,
    pub iterations: usize,
    /// Length of the linear learning-rate ramp of the field.
    pub warmup_iters: usize,
    pub lr_field_init: f64,
    pub lr_field_final: f64,
    pub lr_position_init: f64,
    pub lr_position_final: f64,
    pub lr_log_scale: f64,
    pub lr_base_color: f64,
    pub lr_mask: f64,
    /// Steps between pruning events; 0 disables pruning.
    pub prune_interval: usize,
    /// No pruning before this step.
    pub prune_from: usize,
    pub densify: bool,
    pub densify_interval: usize,
    pub densify_until: usize,
    /// Mean position-gradient norm above which a Gaussian is cloned.
    pub densify_grad_threshold: f64,
    pub background: [f64; 3],
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::preset(Variant::Base)
    }
}

impl TrainConfig {
    pub fn preset(variant: Variant) -> Self {
        Self {
            variant,
            lambda: 0.2,
            lambda_mask: variant.lambda_mask(),
            lambda_sh_mask: 1e-4,
            tau: 0.01,
            tau_sh: 0.01,
            iterations: 3000,
            warmup_iters: 300,
            lr_field_init: 1e-2,
            lr_field_final: 1e-4,
            lr_position_init: 1.6e-4,
            lr_position_final: 1.6e-6,
            lr_log_scale: 5e-3,
            lr_base_color: 2.5e-3,
            lr_mask: 1e-2,
            prune_interval: 1000,
            prune_from: 0,
            densify: false,
            densify_interval: 100,
            densify_until: 1500,
            densify_grad_threshold: 2e-4,
            background: [0.0; 3],
            seed: 0,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { lambda: self.lambda, lambda_mask: self.lambda_mask, lambda_sh_mask: self.lambda_sh_mask }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda = {} is not in [0, 1]", self.lambda));
        }
        if self.iterations == 0 {
            return bad("iterations must be positive".into());
        }
        for (name, t) in [("tau", self.tau), ("tau_sh", self.tau_sh)] {
            if !(t > 0.0 && t < 1.0) {
                return bad(format!("{name} = {t} is not in (0, 1)"));
            }
        }
        for (name, v) in [
            ("lambda_mask", self.lambda_mask),
            ("lambda_sh_mask", self.lambda_sh_mask),
            ("lr_field_init", self.lr_field_init),
            ("lr_field_final", self.lr_field_final),
            ("lr_position_init", self.lr_position_init),
            ("lr_position_final", self.lr_position_final),
            ("lr_log_scale", self.lr_log_scale),
            ("lr_base_color", self.lr_base_color),
            ("lr_mask", self.lr_mask),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} = {v} must be finite and non-negative"));
            }
        }
        if self.densify && self.densify_interval == 0 {
            return bad("densify_interval must be positive".into());
        }
        Ok(())
    }

    pub fn field_schedule(&self) -> LrSchedule {
        LrSchedule {
            init: self.lr_field_init,
            end: self.lr_field_final,
            steps: self.iterations,
            warmup: self.warmup_iters,
        }
    }

    pub fn position_schedule(&self) -> LrSchedule {
        LrSchedule { init: self.lr_position_init, end: self.lr_position_final, steps: self.iterations, warmup: 0 }
    }
}

/// A training image and the camera it was taken from.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub camera: Camera,
    pub image: Image,
}

/// Trainable representation: explicit attributes per Gaussian, the shared
/// field and the masks.
#[derive(Clone, Debug, PartialEq)]
pub struct LocoModel {
    pub positions: Vec<[f64; 3]>,
    /// `ln γ`.
    pub log_scale: Vec<f64>,
    /// `k⁰`.
    pub base_color: Vec<[f64; 3]>,
    pub field: HashGridField,
    pub masks: MaskState,
}

/// Gradient of the loss with respect to every parameter of a [`LocoModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrad {
    pub positions: Vec<[f64; 3]>,
    pub log_scale: Vec<f64>,
    pub base_color: Vec<[f64; 3]>,
    pub field: FieldGrad,
    pub mu: Vec<f64>,
    pub eta: Vec<[f64; MAX_SH_DEGREE]>,
}

impl LocoModel {
    pub fn from_scene(scene: &SplatScene, field: HashGridField, tau: f64, tau_sh: f64) -> Result<Self, TrainError> {
        let explicit = scene
            .gaussians
            .iter()
            .map(|g| split_attrs(g).map(|(e, _)| e))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            positions: explicit.iter().map(|e| to_f64_3(e.position)).collect(),
            log_scale: explicit.iter().map(|e| (e.base_scale as f64).ln()).collect(),
            base_color: explicit.iter().map(|e| to_f64_3(e.base_color)).collect(),
            field,
            masks: MaskState::new(explicit.len(), tau, tau_sh),
        })
    }

    /// Initialises from a coloured point cloud. `γ` is the root mean squared
    /// distance to the three nearest neighbours.
    pub fn from_points(cloud: &PointCloud, field: HashGridField, tau: f64, tau_sh: f64) -> Result<Self, TrainError> {
        if cloud.positions.is_empty() {
            return Err(TrainError::EmptyScene);
        }
        let pts: Vec<[f64; 3]> = cloud.positions.iter().map(|&p| to_f64_3(p)).collect();
        let log_scale = pts
            .par_iter()
            .enumerate()
            .map(|(i, p)| {
                let mut best = [f64::INFINITY; 3];
                for (j, q) in pts.iter().enumerate() {
                    if i == j {
                        continue;
                    }
                    let d = (0..3).map(|a| (p[a] - q[a]).powi(2)).sum::<f64>();
                    if d < best[2] {
                        best[2] = d;
                        best.sort_by(f64::total_cmp);
                    }
                }
                let finite: Vec<f64> = best.into_iter().filter(|d| d.is_finite()).collect();
                let mean = if finite.is_empty() { 1e-2 } else { finite.iter().sum::<f64>() / finite.len() as f64 };
                0.5 * mean.max(1e-7).ln()
            })
            .collect();
        Ok(Self {
            base_color: cloud.colors.iter().map(|c| to_f64_3(*c).map(|v| (v - 0.5) / SH_C0)).collect(),
            log_scale,
            masks: MaskState::new(pts.len(), tau, tau_sh),
            positions: pts,
            field,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    fn degree(&self) -> u8 {
        (self.field.config.sh_degree as usize).min(MAX_SH_DEGREE) as u8
    }

    /// Unmasked splats at full SH degree plus the field tapes.
    pub fn splats(&self) -> (Vec<Splat>, Vec<FieldTape>) {
        let b = self.degree();
        (0..self.len())
            .into_par_iter()
            .map(|i| {
                let (attrs, tape) = self.field.forward(self.positions[i], b);
                let gamma = self.log_scale[i].exp();
                let mut sh = Vec::with_capacity(1 + attrs.residual_sh.len());
                sh.push(self.base_color[i]);
                sh.extend_from_slice(&attrs.residual_sh);
                let splat = Splat {
                    position: self.positions[i],
                    opacity: attrs.opacity,
                    scale: attrs.normalized_scale.map(|s| gamma * s),
                    rotation: attrs.rotation,
                    sh,
                };
                (splat, tape)
            })
            .unzip()
    }

    pub fn masked_splats(&self) -> Vec<Splat> {
        let (splats, _) = self.splats();
        splats.iter().enumerate().map(|(i, s)| mask_splat(s, &self.masks, i)).collect()
    }

    /// Surviving Gaussians with their derived bandwidths, in single precision.
    pub fn to_scene(&self) -> Result<SplatScene, TrainError> {
        let kept = self.masks.survivors();
        let gaussians = kept
            .par_iter()
            .map(|&i| {
                let b = self.masks.bandwidth(i).min(self.degree());
                let e = ExplicitAttrs {
                    position: self.positions[i].map(|v| v as f32),
                    base_scale: self.log_scale[i].exp() as f32,
                    base_color: self.base_color[i].map(|v| v as f32),
                    bandwidth: b,
                };
                let implicit = self.field.eval_implicit(to_f64_3(e.position), b);
                compose_attrs(&e, &implicit)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(SplatScene::new(gaussians))
    }

    /// Loss on one view and its gradient with respect to every parameter.
    pub fn loss_and_grad(
        &self,
        view: &View,
        weights: &LossWeights,
        background: [f64; 3],
    ) -> Result<(LossTerms, ModelGrad), TrainError> {
        let (raw, tapes) = self.splats();
        let masked: Vec<Splat> = raw.iter().enumerate().map(|(i, s)| mask_splat(s, &self.masks, i)).collect();
        let (img, tape) = render_splats(&masked, &view.camera, background, true)?;
        let (terms, lg) = total_loss(&img, &view.image, &self.masks, weights)?;
        let tape = tape.expect("tape was requested");
        let mut sg = render_backward(&masked, &view.camera, &tape, &lg.image)?;

        let n = self.len();
        let mut grad = ModelGrad {
            positions: vec![[0.0; 3]; n],
            log_scale: vec![0.0; n],
            base_color: vec![[0.0; 3]; n],
            field: self.field.zero_grad(),
            mu: lg.mu,
            eta: lg.eta,
        };
        let mut upstream = Vec::with_capacity(n);
        for (i, g) in sg.iter_mut().enumerate() {
            let mg = mask_backward(&raw[i], &self.masks, i, g);
            grad.mu[i] += mg.mu;
            for l in 0..MAX_SH_DEGREE {
                grad.eta[i][l] += mg.eta[l];
            }
            let gamma = self.log_scale[i].exp();
            // s = γ·ŝ with γ = exp(ln γ).
            grad.log_scale[i] = (0..3).map(|a| g.scale[a] * raw[i].scale[a]).sum();
            grad.positions[i] = g.position;
            grad.base_color[i] = g.sh[0];
            upstream.push(ImplicitAttrs {
                opacity: g.opacity,
                normalized_scale: std::array::from_fn(|a| g.scale[a] * gamma),
                rotation: g.rotation,
                residual_sh: g.sh[1..].to_vec(),
            });
        }
        let (fg, dp) = self.field.backward_batch(&tapes, &upstream);
        grad.field = fg;
        for (p, d) in grad.positions.iter_mut().zip(dp) {
            for a in 0..3 {
                p[a] += d[a];
            }
        }
        Ok((terms, grad))
    }
}

/// Per-group optimiser state.
#[derive(Clone, Debug, PartialEq)]
struct Optimizers {
    positions: Adam,
    log_scale: Adam,
    base_color: Adam,
    mu: Adam,
    eta: Adam,
    theta: Adam,
    heads: Adam,
}

impl Optimizers {
    fn new(m: &LocoModel) -> Self {
        let n = m.len();
        Self {
            positions: Adam::new(3 * n, EPS_POSITION),
            log_scale: Adam::new(n, EPS_DEFAULT),
            base_color: Adam::new(3 * n, EPS_DEFAULT),
            mu: Adam::new(n, EPS_DEFAULT),
            eta: Adam::new(MAX_SH_DEGREE * n, EPS_DEFAULT),
            theta: Adam::new(m.field.theta.len(), EPS_DEFAULT),
            heads: Adam::new(m.field.heads.len(), EPS_DEFAULT),
        }
    }

    fn select(&mut self, kept: &[usize]) {
        self.positions.select_rows(kept, 3);
        self.log_scale.select_rows(kept, 1);
        self.base_color.select_rows(kept, 3);
        self.mu.select_rows(kept, 1);
        self.eta.select_rows(kept, MAX_SH_DEGREE);
    }

    fn grow(&mut self, count: usize) {
        self.positions.append_zero_rows(count, 3);
        self.log_scale.append_zero_rows(count, 1);
        self.base_color.append_zero_rows(count, 3);
        self.mu.append_zero_rows(count, 1);
        self.eta.append_zero_rows(count, MAX_SH_DEGREE);
    }
}

/// One logged training step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub view: usize,
    pub loss: LossTerms,
    pub gaussians: usize,
    pub lr_field: f64,
}

/// Gaussian count after a pruning event.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneEvent {
    pub step: usize,
    pub before: usize,
    pub after: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<StepLog>,
    pub prunes: Vec<PruneEvent>,
    pub clones: usize,
}

/// Removes masked Gaussians from the model; returns the surviving indices.
pub fn prune_model(model: &mut LocoModel) -> Vec<usize> {
    let kept = model.masks.survivors();
    let pick = |v: &[[f64; 3]]| kept.iter().map(|&i| v[i]).collect::<Vec<_>>();
    model.positions = pick(&model.positions);
    model.base_color = pick(&model.base_color);
    model.log_scale = kept.iter().map(|&i| model.log_scale[i]).collect();
    model.masks = model.masks.select(&kept);
    kept
}

fn clone_rows(model: &mut LocoModel, rows: &[usize]) {
    for &i in rows {
        model.positions.push(model.positions[i]);
        model.log_scale.push(model.log_scale[i]);
        model.base_color.push(model.base_color[i]);
        model.masks.mu.push(model.masks.mu[i]);
        model.masks.eta.push(model.masks.eta[i]);
    }
}

fn check_finite(step: usize, terms: &LossTerms, grad: &ModelGrad) -> Result<(), TrainError> {
    if !terms.total.is_finite() {
        return Err(TrainError::Diverged { step, loss: terms.total, detail: format!("{terms:?}") });
    }
    let bad = grad.positions.iter().flatten().chain(&grad.log_scale).chain(grad.base_color.iter().flatten())
        .chain(&grad.field.theta).chain(&grad.field.heads).chain(&grad.mu)
        .any(|v| !v.is_finite());
    if bad {
        return Err(TrainError::Diverged { step, loss: terms.total, detail: "non-finite gradient".into() });
    }
    Ok(())
}

/// Runs the training loop on `model` in place.
pub fn train_e2e(
    views: &[View],
    model: &mut LocoModel,
    cfg: &TrainConfig,
    mut log: impl FnMut(&StepLog),
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if views.is_empty() {
        return Err(TrainError::Config("at least one training view is required".into()));
    }
    if model.is_empty() {
        return Err(TrainError::EmptyScene);
    }
    model.masks.tau = cfg.tau;
    model.masks.tau_sh = cfg.tau_sh;
    let weights = cfg.weights();
    let field_lr = cfg.field_schedule();
    let pos_lr = cfg.position_schedule();
    let mut opt = Optimizers::new(model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport { history: Vec::new(), prunes: Vec::new(), clones: 0 };
    let mut grad_accum = vec![0.0; model.len()];
    let mut grad_count = vec![0usize; model.len()];

    for step in 0..cfg.iterations {
        let v = if views.len() == 1 { 0 } else { rng.random_range(0..views.len()) };
        let (terms, g) = model.loss_and_grad(&views[v], &weights, cfg.background)?;
        check_finite(step, &terms, &g)?;

        let lr_f = field_lr.at(step);
        opt.positions.step(model.positions.as_flattened_mut(), g.positions.as_flattened(), pos_lr.at(step));
        opt.log_scale.step(&mut model.log_scale, &g.log_scale, cfg.lr_log_scale);
        opt.base_color.step(model.base_color.as_flattened_mut(), g.base_color.as_flattened(), cfg.lr_base_color);
        opt.mu.step(&mut model.masks.mu, &g.mu, cfg.lr_mask);
        opt.eta.step(model.masks.eta.as_flattened_mut(), g.eta.as_flattened(), cfg.lr_mask);
        opt.theta.step(&mut model.field.theta, &g.field.theta, lr_f);
        opt.heads.step(&mut model.field.heads, &g.field.heads, lr_f);

        let entry = StepLog { step, view: v, loss: terms, gaussians: model.len(), lr_field: lr_f };
        log(&entry);
        report.history.push(entry);

        if cfg.densify && step < cfg.densify_until {
            for (i, p) in g.positions.iter().enumerate() {
                grad_accum[i] += p.iter().map(|x| x * x).sum::<f64>().sqrt();
                grad_count[i] += 1;
            }
            if (step + 1) % cfg.densify_interval == 0 {
                let rows: Vec<usize> = (0..model.len())
                    .filter(|&i| grad_count[i] > 0 && grad_accum[i] / grad_count[i] as f64 > cfg.densify_grad_threshold)
                    .collect();
                clone_rows(model, &rows);
                opt.grow(rows.len());
                report.clones += rows.len();
                grad_accum = vec![0.0; model.len()];
                grad_count = vec![0; model.len()];
            }
        }

        if cfg.prune_interval > 0 && step >= cfg.prune_from && (step + 1) % cfg.prune_interval == 0 {
            let before = model.len();
            let kept = prune_model(model);
            opt.select(&kept);
            grad_accum = kept.iter().map(|&i| grad_accum[i]).collect();
            grad_count = kept.iter().map(|&i| grad_count[i]).collect();
            report.prunes.push(PruneEvent { step, before, after: model.len() });
            if model.is_empty() {
                return Err(TrainError::EmptyScene);
            }
        }
    }
    Ok(report)
}
