//! Spatial coherence of splat attributes: how far apart the attributes of
//! two Gaussians are, as a function of how close the Gaussians are.
//!
//! Positions are normalised by a centre and radius and contracted into the
//! ball of radius 2. A bucket with threshold `d` holds pairs whose squared
//! contracted distance is below `d`.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use crate::math::contract;
use crate::math::to_f64_3;
use crate::model::{Gaussian, SplatScene};

/// Attribute families, in report order.
pub const ATTRIBUTES: [&str; 5] = ["opacity", "scale", "rotation", "base_color", "residual_sh"];

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CoherenceError {
    #[error("scene needs at least two Gaussians")]
    TooFewGaussians,
    #[error("no pair of Gaussians lies within squared distance {0}")]
    NoPairs(f64),
    #[error("invalid thresholds: {0}")]
    Thresholds(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoherenceConfig {
    /// Strictly increasing squared-distance thresholds in contracted space.
    pub thresholds: Vec<f64>,
    pub pairs_per_bucket: usize,
    pub seed: u64,
    pub bins: usize,
    pub center: [f64; 3],
    pub radius: f64,
}

impl Default for CoherenceConfig {
    fn default() -> Self {
        Self {
            thresholds: default_thresholds(),
            pairs_per_bucket: 100_000,
            seed: 0,
            bins: 32,
            center: [0.0; 3],
            radius: 1.0,
        }
    }
}

/// Geometric ladder `1e-4 · 10^(k/2)`, `k = 0..6`.
pub fn default_thresholds() -> Vec<f64> {
    (0..6).map(|k| 1e-4 * 10f64.powf(k as f64 / 2.0)).collect()
}

impl CoherenceConfig {
    /// Centre and radius taken from the scene's bounding box.
    pub fn fit_to(mut self, scene: &SplatScene) -> Self {
        if let Some(b) = scene.bounds() {
            self.center = std::array::from_fn(|a| 0.5 * (b.min[a] as f64 + b.max[a] as f64));
            let half = (0..3).map(|a| 0.5 * (b.max[a] - b.min[a]) as f64).fold(0.0, f64::max);
            self.radius = if half > 0.0 { half } else { 1.0 };
        }
        self
    }
}

fn contracted(scene: &SplatScene, center: [f64; 3], radius: f64) -> Vec<[f64; 3]> {
    scene
        .gaussians
        .iter()
        .map(|g| {
            let p = to_f64_3(g.position);
            contract(std::array::from_fn(|a| (p[a] - center[a]) / radius))
        })
        .collect()
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum()
}

/// Uniform grid over contracted positions with cells of side `√d`.
struct Grid {
    cell: f64,
    cells: HashMap<[i64; 3], Vec<usize>>,
}

impl Grid {
    fn new(points: &[[f64; 3]], d: f64) -> Self {
        let cell = d.sqrt();
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(cell, *p)).or_default().push(i);
        }
        Self { cell, cells }
    }

    fn key(cell: f64, p: [f64; 3]) -> [i64; 3] {
        p.map(|v| (v / cell).floor() as i64)
    }

    /// The (up to) 27 occupied cells around `p`, in a fixed order.
    fn around(&self, p: [f64; 3]) -> Vec<&[usize]> {
        let k = Self::key(self.cell, p);
        let mut out = Vec::with_capacity(27);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(v) = self.cells.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                        out.push(v.as_slice());
                    }
                }
            }
        }
        out
    }
}

/// Draws up to `n` distinct pairs `(i, k)`, `i < k`, with squared
/// contracted distance below `d`. Each draw picks a random anchor and then
/// a random candidate from the grid cells around it, accepting it when it
/// lies within `d`.
pub fn sample_pairs_in(points: &[[f64; 3]], d: f64, n: usize, seed: u64) -> Result<Vec<(usize, usize)>, CoherenceError> {
    if points.len() < 2 {
        return Err(CoherenceError::TooFewGaussians);
    }
    if !(d > 0.0 && d.is_finite()) {
        return Err(CoherenceError::Thresholds(format!("threshold {d} must be positive")));
    }
    let grid = Grid::new(points, d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    let budget = 64 * n.max(1) + 16 * points.len();
    for _ in 0..budget {
        if out.len() == n {
            break;
        }
        let i = rng.random_range(0..points.len());
        let cells = grid.around(points[i]);
        let total: usize = cells.iter().map(|c| c.len()).sum();
        if total <= 1 {
            continue;
        }
        let mut r = rng.random_range(0..total);
        let mut k = usize::MAX;
        for c in &cells {
            if r < c.len() {
                k = c[r];
                break;
            }
            r -= c.len();
        }
        if k == i || dist2(points[i], points[k]) >= d {
            continue;
        }
        let pair = (i.min(k), i.max(k));
        if seen.insert(pair) {
            out.push(pair);
        }
    }
    if out.is_empty() {
        return Err(CoherenceError::NoPairs(d));
    }
    Ok(out)
}

/// [`sample_pairs_in`] on the scene's contracted positions (unit radius
/// about the origin).
pub fn sample_pairs(scene: &SplatScene, d: f64, n: usize, seed: u64) -> Result<Vec<(usize, usize)>, CoherenceError> {
    sample_pairs_in(&contracted(scene, [0.0; 3], 1.0), d, n, seed)
}

fn sh_block(g: &Gaussian, j: usize) -> [f64; 3] {
    g.sh.get(j).map_or([0.0; 3], |c| to_f64_3(*c))
}

/// Euclidean attribute distances of one pair, in [`ATTRIBUTES`] order.
/// Scales are compared in the log domain; quaternions are normalised and
/// sign-aligned; residual SH covers the degrees either Gaussian carries,
/// with absent blocks read as zero.
pub fn pair_distances(a: &Gaussian, b: &Gaussian) -> [f64; 5] {
    let opacity = (a.opacity as f64 - b.opacity as f64).abs();
    let scale = (0..3)
        .map(|k| ((a.scale[k] as f64).ln() - (b.scale[k] as f64).ln()).powi(2))
        .sum::<f64>()
        .sqrt();
    let qa = normalize4(a.rotation);
    let qb = normalize4(b.rotation);
    let sign = if (0..4).map(|k| qa[k] * qb[k]).sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
    let rotation = (0..4).map(|k| (qa[k] - sign * qb[k]).powi(2)).sum::<f64>().sqrt();
    let ca = sh_block(a, 0);
    let cb = sh_block(b, 0);
    let base_color = (0..3).map(|k| (ca[k] - cb[k]).powi(2)).sum::<f64>().sqrt();
    let blocks = a.sh.len().max(b.sh.len());
    let residual_sh = (1..blocks)
        .map(|j| {
            let (x, y) = (sh_block(a, j), sh_block(b, j));
            (0..3).map(|k| (x[k] - y[k]).powi(2)).sum::<f64>()
        })
        .sum::<f64>()
        .sqrt();
    [opacity, scale, rotation, base_color, residual_sh]
}

fn normalize4(q: [f32; 4]) -> [f64; 4] {
    let q = q.map(|v| v as f64);
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-30);
    q.map(|v| v / n)
}

/// Per-attribute distance arrays for `pairs`, in [`ATTRIBUTES`] order.
pub fn attribute_distances(scene: &SplatScene, pairs: &[(usize, usize)]) -> [Vec<f64>; 5] {
    let rows: Vec<[f64; 5]> = pairs
        .par_iter()
        .map(|&(i, k)| pair_distances(&scene.gaussians[i], &scene.gaussians[k]))
        .collect();
    std::array::from_fn(|a| rows.iter().map(|r| r[a]).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeStats {
    /// `None` when the bucket holds no pairs.
    pub mean: Option<f64>,
    /// Standard error of the mean.
    pub std_err: Option<f64>,
    pub histogram: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub threshold: f64,
    pub pair_count: usize,
    /// In [`ATTRIBUTES`] order.
    pub attributes: Vec<AttributeStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoherenceReport {
    pub center: [f64; 3],
    pub radius: f64,
    pub pairs_per_bucket: usize,
    pub seed: u64,
    pub attributes: Vec<String>,
    /// Histogram bin edges per attribute, shared by all buckets.
    pub bin_edges: Vec<Vec<f64>>,
    pub buckets: Vec<BucketReport>,
}

impl CoherenceReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per bucket, attribute and histogram bin.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,attribute,pair_count,mean,std_err,bin_lo,bin_hi,count\n");
        for b in &self.buckets {
            for (a, stats) in b.attributes.iter().enumerate() {
                let edges = &self.bin_edges[a];
                let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
                for (k, count) in stats.histogram.iter().enumerate() {
                    let _ = writeln!(
                        s,
                        "{},{},{},{},{},{},{},{}",
                        b.threshold,
                        self.attributes[a],
                        b.pair_count,
                        opt(stats.mean),
                        opt(stats.std_err),
                        edges[k], edges[k + 1], count
                    );
                }
            }
        }
        s
    }

    /// Bucket means of one attribute; empty buckets read as NaN.
    pub fn means(&self, attribute: usize) -> Vec<f64> {
        self.buckets.iter().map(|b| b.attributes[attribute].mean.unwrap_or(f64::NAN)).collect()
    }
}

fn mean_and_stderr(v: &[f64]) -> (Option<f64>, Option<f64>) {
    if v.is_empty() {
        return (None, None);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (Some(mean), Some(0.0));
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (Some(mean), Some((var / n).sqrt()))
}

/// Samples pairs for every threshold and summarises their attribute
/// distances. Buckets without pairs are reported empty; it is an error only
/// when every bucket is.
pub fn coherence_report(scene: &SplatScene, cfg: &CoherenceConfig) -> Result<CoherenceReport, CoherenceError> {
    if cfg.thresholds.is_empty() {
        return Err(CoherenceError::Thresholds("at least one threshold is required".into()));
    }
    if cfg.thresholds.windows(2).any(|w| w[1] <= w[0]) {
        return Err(CoherenceError::Thresholds("thresholds must be strictly increasing".into()));
    }
    if cfg.bins == 0 || cfg.pairs_per_bucket == 0 || !(cfg.radius > 0.0) {
        return Err(CoherenceError::Config("bins, pairs_per_bucket and radius must be positive".into()));
    }
    let points = contracted(scene, cfg.center, cfg.radius);
    let mut dists = Vec::with_capacity(cfg.thresholds.len());
    for (b, &d) in cfg.thresholds.iter().enumerate() {
        let pairs = match sample_pairs_in(&points, d, cfg.pairs_per_bucket, cfg.seed.wrapping_add(b as u64)) {
            Err(CoherenceError::NoPairs(_)) => Vec::new(),
            r => r?,
        };
        dists.push(attribute_distances(scene, &pairs));
    }
    if dists.iter().all(|d| d[0].is_empty()) {
        return Err(CoherenceError::NoPairs(*cfg.thresholds.last().unwrap()));
    }
    let bin_edges: Vec<Vec<f64>> = (0..ATTRIBUTES.len())
        .map(|a| {
            let hi = dists.iter().flat_map(|d| d[a].iter().copied()).fold(0.0, f64::max);
            let hi = if hi > 0.0 { hi } else { 1.0 };
            (0..=cfg.bins).map(|k| hi * k as f64 / cfg.bins as f64).collect()
        })
        .collect();
    let buckets = cfg
        .thresholds
        .iter()
        .zip(&dists)
        .map(|(&threshold, d)| BucketReport {
            threshold,
            pair_count: d[0].len(),
            attributes: (0..ATTRIBUTES.len())
                .map(|a| {
                    let (mean, std_err) = mean_and_stderr(&d[a]);
                    let hi = bin_edges[a][cfg.bins];
                    let mut histogram = vec![0u64; cfg.bins];
                    for &v in &d[a] {
                        let k = ((v / hi) * cfg.bins as f64).floor() as usize;
                        histogram[k.min(cfg.bins - 1)] += 1;
                    }
                    AttributeStats { mean, std_err, histogram }
                })
                .collect(),
        })
        .collect();
    Ok(CoherenceReport {
        center: cfg.center,
        radius: cfg.radius,
        pairs_per_bucket: cfg.pairs_per_bucket,
        seed: cfg.seed,
        attributes: ATTRIBUTES.iter().map(|s| s.to_string()).collect(),
        bin_edges,
        buckets,
    })
}
