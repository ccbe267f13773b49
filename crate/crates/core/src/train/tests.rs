use super::*;
use crate::field::{FieldConfig, HashGridConfig, HashGridField};
use crate::math::sigmoid_grad;
use crate::model::{Gaussian, SplatScene};
use crate::render::sh::SH_C0;
use crate::render::{render, render_splats, Camera, Image};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_field(seed: u64) -> HashGridField {
    let cfg = FieldConfig {
        grid: HashGridConfig { levels: 4, min_res: 4, max_res: 32, table_size_log2: 10, feature_dim: 2 },
        hidden_width: 16,
        ..FieldConfig::default()
    };
    HashGridField::new(cfg, seed).unwrap()
}

fn gaussian(p: [f32; 3], color: [f32; 3], scale: f32, opacity: f32) -> Gaussian {
    Gaussian {
        position: p,
        opacity,
        scale: [scale; 3],
        rotation: [1.0, 0.0, 0.0, 0.0],
        sh: vec![color.map(|c| (c - 0.5) / SH_C0 as f32)],
        bandwidth: 0,
    }
}

fn camera(size: u32) -> Camera {
    Camera::look_at([0.0, 0.0, -3.0], [0.0; 3], [0.0, -1.0, 0.0], size, size, 45.0).unwrap()
}

fn target_scene() -> SplatScene {
    SplatScene::new(vec![
        gaussian([-0.3, 0.0, 0.0], [0.9, 0.1, 0.1], 0.25, 0.9),
        gaussian([0.3, 0.2, 0.1], [0.1, 0.8, 0.2], 0.2, 0.8),
        gaussian([0.0, -0.3, -0.1], [0.2, 0.2, 0.9], 0.3, 0.85),
    ])
}

fn micro_model(seed: u64) -> LocoModel {
    let mut start = target_scene();
    start.gaussians.truncate(2);
    // Keep positions off grid-cell boundaries, where trilinear
    // interpolation has kinks.
    for (g, d) in start.gaussians.iter_mut().zip([0.0137f32, -0.0211]) {
        g.position.iter_mut().for_each(|v| *v += d);
    }
    let mut m = LocoModel::from_scene(&start, busy(tiny_field(seed), seed), 0.01, 0.01).unwrap();
    m.masks.mu = vec![0.3, -0.4];
    m.masks.eta = vec![[0.5, 0.2, 1.0], [2.0, 0.4, 0.7]];
    m
}

/// Field with non-trivial SH heads so every gradient path is exercised.
fn busy(mut f: HashGridField, seed: u64) -> HashGridField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    f.theta.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
    f.heads.iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05));
    f
}

fn loss_of(m: &LocoModel, view: &View, w: &LossWeights) -> f64 {
    m.loss_and_grad(view, w, [0.1, 0.1, 0.1]).unwrap().0.total
}

fn micro_view() -> View {
    let cam = Camera::look_at([0.2, -0.1, -2.5], [0.0; 3], [0.0, -1.0, 0.0], 8, 8, 50.0).unwrap();
    View { image: render(&target_scene(), &cam, [0.0; 3]).unwrap(), camera: cam }
}

#[test]
fn explicit_gradients_match_finite_differences() {
    let m = micro_model(1);
    let view = micro_view();
    let w = LossWeights { lambda: 0.2, lambda_mask: 0.004, lambda_sh_mask: 1e-4 };
    let (_, g) = m.loss_and_grad(&view, &w, [0.1; 3]).unwrap();
    let h = 1e-6;
    let fd = |f: &dyn Fn(&mut LocoModel, f64)| {
        let mut p = m.clone();
        let mut q = m.clone();
        f(&mut p, h);
        f(&mut q, -h);
        (loss_of(&p, &view, &w) - loss_of(&q, &view, &w)) / (2.0 * h)
    };
    let close = |a: f64, b: f64, what: &str| {
        assert!((a - b).abs() <= 1e-4 * b.abs().max(1e-6), "{what}: analytic {a} fd {b}");
    };
    for i in 0..2 {
        for a in 0..3 {
            close(g.positions[i][a], fd(&|m, d| m.positions[i][a] += d), "position");
            close(g.base_color[i][a], fd(&|m, d| m.base_color[i][a] += d), "base colour");
        }
        close(g.log_scale[i], fd(&|m, d| m.log_scale[i] += d), "log scale");
    }
}

#[test]
fn mask_gradient_matches_relaxed_finite_difference() {
    let m = micro_model(2);
    let view = micro_view();
    let w = LossWeights { lambda: 0.2, lambda_mask: 0.05, lambda_sh_mask: 0.01 };
    let (_, g) = m.loss_and_grad(&view, &w, [0.1; 3]).unwrap();
    let (raw, _) = m.splats();
    // Image loss as a function of a continuous multiplier on one Gaussian.
    let image_term = |i: usize, mult: f64| {
        let mut s: Vec<_> = raw.iter().enumerate().map(|(k, s)| crate::masks::mask_splat(s, &m.masks, k)).collect();
        s[i].opacity *= mult;
        s[i].scale.iter_mut().for_each(|v| *v *= mult);
        let (img, _) = render_splats(&s, &view.camera, [0.1; 3], false).unwrap();
        image_loss(&img, &view.image, w.lambda).unwrap().0
    };
    let h = 1e-6;
    for i in 0..2 {
        let d_m = (image_term(i, 1.0 + h) - image_term(i, 1.0 - h)) / (2.0 * h);
        let want = d_m * sigmoid_grad(m.masks.mu[i]) + w.lambda_mask * sigmoid_grad(m.masks.mu[i]) / 2.0;
        assert!((g.mu[i] - want).abs() <= 1e-5 * want.abs().max(1e-8), "μ{i}: {} vs {want}", g.mu[i]);
    }
}

#[test]
fn mask_loss_alone_lowers_every_probability() {
    let mut m = micro_model(3);
    let view = micro_view();
    let w = LossWeights { lambda: 0.0, lambda_mask: 1.0, lambda_sh_mask: 0.0 };
    let mut opt = Adam::new(2, EPS_DEFAULT);
    for _ in 0..5 {
        let (_, g) = m.loss_and_grad(&view, &w, [0.1; 3]).unwrap();
        let (lm, dmu) = crate::masks::mask_loss(&m.masks);
        let before: Vec<f64> = m.masks.mu.iter().map(|&v| crate::math::sigmoid(v)).collect();
        opt.step(&mut m.masks.mu, &dmu, 0.1);
        let after: Vec<f64> = m.masks.mu.iter().map(|&v| crate::math::sigmoid(v)).collect();
        assert!(before.iter().zip(&after).all(|(b, a)| a < b));
        assert!(lm > 0.0 && g.mu.iter().all(|v| v.is_finite()));
    }
}

fn smoke_config(iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        warmup_iters: 10,
        lr_base_color: 2e-2,
        lr_log_scale: 1e-2,
        lr_position_init: 2e-3,
        lr_position_final: 2e-4,
        prune_interval: 0,
        lambda_mask: 0.0,
        ..TrainConfig::default()
    }
}

#[test]
fn three_gaussian_smoke_training() {
    let cam = camera(32);
    let view = View { image: render(&target_scene(), &cam, [0.0; 3]).unwrap(), camera: cam };
    let mut start = target_scene();
    for g in &mut start.gaussians {
        g.position[0] += 0.08;
        g.position[1] -= 0.05;
        g.sh[0] = [0.0; 3];
    }
    let mut model = LocoModel::from_scene(&start, tiny_field(5), 0.01, 0.01).unwrap();
    let report = train_e2e(&[view], &mut model, &smoke_config(500), |_| {}).unwrap();
    let first = report.history[0].loss.l1;
    let last = report.history.last().unwrap().loss.l1;
    assert!(last <= 0.5 * first, "L1 went from {first} to {last}");
}

#[test]
fn field_learning_rate_follows_warmup() {
    let cfg = smoke_config(100);
    let s = cfg.field_schedule();
    assert!((s.at(0) - cfg.lr_field_init / cfg.warmup_iters as f64).abs() < 1e-18);
    let cam = camera(8);
    let view = View { image: Image::new(8, 8), camera: cam };
    let mut model = LocoModel::from_scene(&target_scene(), tiny_field(6), 0.01, 0.01).unwrap();
    let r = train_e2e(&[view], &mut model, &smoke_config(3), |_| {}).unwrap();
    assert_eq!(r.history[0].lr_field, s.at(0));
}

#[test]
fn presets() {
    let base = TrainConfig::preset(Variant::Base);
    let small = TrainConfig::preset(Variant::Small);
    assert_eq!((base.lambda, base.lambda_mask, base.lambda_sh_mask), (0.2, 0.004, 1e-4));
    assert_eq!(small.lambda_mask, 0.005);
    assert_eq!((base.tau, base.tau_sh), (0.01, 0.01));
    assert_eq!(Variant::Base.table_size_log2(), 19);
    assert_eq!(Variant::Small.table_size_log2(), 17);
    assert!(TrainConfig { lambda: 1.5, ..base.clone() }.validate().is_err());
    assert!(TrainConfig { iterations: 0, ..base }.validate().is_err());
}

#[test]
fn pruning_pressure_shrinks_the_scene() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let gs: Vec<Gaussian> = (0..40)
        .map(|_| {
            let p = std::array::from_fn(|_| rng.random_range(-0.6..0.6));
            let c = std::array::from_fn(|_| rng.random_range(0.0..1.0));
            gaussian(p, c, rng.random_range(0.03..0.15), 0.8)
        })
        .collect();
    let scene = SplatScene::new(gs);
    let views: Vec<View> = [[0.0, 0.0, -3.0], [2.0, 0.5, -2.5], [-2.0, -0.5, -2.5]]
        .iter()
        .map(|&eye| {
            let cam = Camera::look_at(eye, [0.0; 3], [0.0, -1.0, 0.0], 24, 24, 45.0).unwrap();
            View { image: render(&scene, &cam, [0.0; 3]).unwrap(), camera: cam }
        })
        .collect();
    let mut model = LocoModel::from_scene(&scene, tiny_field(8), 0.01, 0.01).unwrap();
    let cfg = TrainConfig {
        prune_interval: 100,
        prune_from: 350,
        lambda_mask: 0.02,
        lr_mask: 0.05,
        ..smoke_config(1000)
    };
    let r = train_e2e(&views, &mut model, &cfg, |_| {}).unwrap();
    let counts: Vec<usize> = r.prunes.iter().map(|p| p.after).collect();
    assert_eq!(counts.len(), 7);
    assert!(counts[0] < 40 && counts.windows(2).all(|w| w[1] < w[0]), "{counts:?}");
    assert_eq!(model.len(), *counts.last().unwrap());
}

#[test]
fn training_is_deterministic() {
    let cam = camera(16);
    let view = View { image: render(&target_scene(), &cam, [0.0; 3]).unwrap(), camera: cam };
    let cfg = TrainConfig { densify: true, densify_interval: 5, densify_grad_threshold: 1e-3, ..smoke_config(20) };
    let mut a = LocoModel::from_scene(&target_scene(), tiny_field(9), 0.01, 0.01).unwrap();
    let mut b = a.clone();
    let ra = train_e2e(std::slice::from_ref(&view), &mut a, &cfg, |_| {}).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let rb = pool.install(|| train_e2e(std::slice::from_ref(&view), &mut b, &cfg, |_| {}).unwrap());
    assert_eq!(a, b);
    assert_eq!(ra, rb);
}

#[test]
fn masked_model_renders_like_its_pruned_scene() {
    let mut m = LocoModel::from_scene(&target_scene(), tiny_field(10), 0.01, 0.01).unwrap();
    m.masks.mu[1] = -20.0;
    let cam = camera(16);
    let (masked, _) = render_splats(&m.masked_splats(), &cam, [0.0; 3], false).unwrap();
    let before = m.len();
    let kept = prune_model(&mut m);
    assert_eq!(kept, vec![0, 2]);
    assert_eq!(m.len(), before - 1);
    let (pruned, _) = render_splats(&m.masked_splats(), &cam, [0.0; 3], false).unwrap();
    assert_eq!(masked, pruned);
}

#[test]
fn point_cloud_initialisation() {
    let cloud = crate::model::PointCloud {
        positions: vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 2.0]],
        colors: vec![[0.5; 3], [1.0, 0.0, 0.0], [0.0; 3], [0.25; 3]],
    };
    let m = LocoModel::from_points(&cloud, tiny_field(11), 0.01, 0.01).unwrap();
    // Point 0: neighbours at squared distances 1, 4, 4.
    assert!((m.log_scale[0] - 0.5 * 3.0f64.ln()).abs() < 1e-12);
    assert_eq!(m.base_color[0], [0.0; 3]);
    assert!((m.base_color[1][0] - 0.5 / SH_C0).abs() < 1e-6);
    let scene = m.to_scene().unwrap();
    assert_eq!(scene.len(), 4);
    assert!(scene.gaussians.iter().all(|g| g.bandwidth == 3));
}


