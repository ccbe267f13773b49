//! Synthetic scenes for tests, benchmarks and the CLI.
//!
//! The coherent generator draws positions uniformly in `[-1, 1]³` and sets
//! every attribute to a low-frequency function of position plus a little
//! noise. The shuffled generator keeps the same positions and attribute
//! marginals but assigns attribute records to positions at random.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{Gaussian, SplatScene};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub count: usize,
    pub seed: u64,
    /// Half extent of the cube positions are drawn from.
    pub extent: f64,
    /// Spatial frequency of the attribute functions.
    pub frequency: f64,
    /// Relative amplitude of the i.i.d. noise added to each attribute.
    pub noise: f64,
    /// Natural log of the mean base scale.
    pub log_scale: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { count: 10_000, seed: 0, extent: 1.0, frequency: 2.0, noise: 0.02, log_scale: -4.0 }
    }
}

/// A random plane wave `sin(k·p + φ)`.
#[derive(Clone, Copy)]
struct Wave {
    k: [f64; 3],
    phase: f64,
}

impl Wave {
    fn random(rng: &mut ChaCha8Rng, freq: f64) -> Self {
        let mut k: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = k.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-3);
        k.iter_mut().for_each(|v| *v *= freq / n);
        Self { k, phase: rng.random_range(0.0..std::f64::consts::TAU) }
    }

    fn at(&self, p: [f64; 3]) -> f64 {
        (self.k[0] * p[0] + self.k[1] * p[1] + self.k[2] * p[2] + self.phase).sin()
    }
}

/// Scene whose attributes vary smoothly with position.
pub fn coherent_scene(cfg: &SyntheticConfig) -> SplatScene {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // opacity, scale ×3, rotation ×3, colour ×3, bandwidth, then 15 SH waves.
    let waves: Vec<Wave> = (0..26).map(|_| Wave::random(&mut rng, cfg.frequency)).collect();
    let gaussians = (0..cfg.count)
        .map(|_| {
            let p: [f64; 3] = std::array::from_fn(|_| rng.random_range(-cfg.extent..cfg.extent));
            let mut noise = || cfg.noise * rng.random_range(-1.0..1.0);
            let w = |i: usize| waves[i].at(p);
            let opacity = (0.55 + 0.4 * w(0) + noise()).clamp(0.02, 0.99);
            let gamma = (cfg.log_scale + 0.4 * w(1) + noise()).exp();
            let scale = [gamma, gamma * (0.55 + 0.3 * w(2) + noise()), gamma * (0.3 + 0.2 * w(3) + noise()).max(0.05)];
            let angle = 1.2 * w(4) + noise();
            let axis = [w(5) + 0.1, w(6), 1.0];
            let an = axis.iter().map(|v| v * v).sum::<f64>().sqrt();
            let (s, c) = (0.5 * angle).sin_cos();
            let rotation = [c, s * axis[0] / an, s * axis[1] / an, s * axis[2] / an];
            let color: [f64; 3] = std::array::from_fn(|ch| 1.2 * w(7 + ch) + noise());
            let bandwidth = (2.0 + 1.6 * w(10)).floor().clamp(0.0, 3.0) as u8;
            let mut sh = vec![color.map(|v| v as f32)];
            for j in 0..15 {
                sh.push(std::array::from_fn(|ch| (0.12 * waves[11 + j].at([p[0] + ch as f64 * 0.3, p[1], p[2]]) + 0.1 * noise()) as f32));
            }
            sh.truncate(crate::model::sh_coeff_count(bandwidth as usize));
            Gaussian {
                position: p.map(|v| v as f32),
                opacity: opacity as f32,
                scale: scale.map(|v| v as f32),
                rotation: rotation.map(|v| v as f32),
                sh,
                bandwidth,
            }
        })
        .collect();
    SplatScene::new(gaussians)
}

/// The coherent scene with attribute records shuffled across positions.
pub fn shuffled_scene(cfg: &SyntheticConfig) -> SplatScene {
    let mut scene = coherent_scene(cfg);
    let positions: Vec<[f32; 3]> = scene.gaussians.iter().map(|g| g.position).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_5EED);
    scene.gaussians.shuffle(&mut rng);
    for (g, p) in scene.gaussians.iter_mut().zip(positions) {
        g.position = p;
    }
    scene
}
