//! Multi-resolution hash-grid layout and trilinear lookup.

use serde::{Deserialize, Serialize};

/// Per-axis multipliers of the spatial hash. Part of the file format.
pub const HASH_PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HashGridConfig {
    pub levels: u32,
    pub min_res: u32,
    pub max_res: u32,
    pub table_size_log2: u32,
    pub feature_dim: u32,
}

impl Default for HashGridConfig {
    fn default() -> Self {
        Self {
            levels: 16,
            min_res: 16,
            max_res: 4096,
            table_size_log2: 19,
            feature_dim: 2,
        }
    }
}

impl HashGridConfig {
    pub fn small() -> Self {
        Self {
            table_size_log2: 17,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.levels == 0 || self.levels > 32 {
            return Err(format!("levels must be in 1..=32, got {}", self.levels));
        }
        if self.min_res == 0 || (self.levels > 1 && self.min_res >= self.max_res) {
            return Err(format!("need 0 < min_res < max_res, got {} and {}", self.min_res, self.max_res));
        }
        if self.table_size_log2 == 0 || self.table_size_log2 > 28 {
            return Err(format!("table_size_log2 must be in 1..=28, got {}", self.table_size_log2));
        }
        if self.feature_dim == 0 || self.feature_dim > 16 {
            return Err(format!("feature_dim must be in 1..=16, got {}", self.feature_dim));
        }
        Ok(())
    }

    /// Growth factor between consecutive level resolutions.
    pub fn growth(&self) -> f64 {
        if self.levels < 2 {
            return 1.0;
        }
        (((self.max_res as f64).ln() - (self.min_res as f64).ln()) / (self.levels - 1) as f64).exp()
    }

    /// `⌊min_res · g^l⌋`. The product is nudged by a relative 1e-9 before
    /// flooring so the last level lands on `max_res` despite rounding.
    pub fn resolution(&self, level: u32) -> u32 {
        let r = self.min_res as f64 * self.growth().powi(level as i32);
        (r * (1.0 + 1e-9)).floor() as u32
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridLevel {
    pub resolution: u32,
    /// Number of feature vectors stored for this level.
    pub size: usize,
    pub dense: bool,
    /// Index of this level's first feature vector in the flat table.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridLayout {
    pub levels: Vec<GridLevel>,
    pub feature_dim: usize,
    /// Total number of feature vectors over all levels.
    pub entries: usize,
}

impl GridLayout {
    pub fn new(cfg: &HashGridConfig) -> Self {
        let table = 1usize << cfg.table_size_log2;
        let mut offset = 0;
        let levels = (0..cfg.levels)
            .map(|l| {
                let resolution = cfg.resolution(l);
                let corners = (resolution as u128 + 1).pow(3);
                let dense = corners <= table as u128;
                let size = if dense { corners as usize } else { table };
                let level = GridLevel { resolution, size, dense, offset };
                offset += size;
                level
            })
            .collect();
        Self {
            levels,
            feature_dim: cfg.feature_dim as usize,
            entries: offset,
        }
    }

    pub fn param_count(&self) -> usize {
        self.entries * self.feature_dim
    }

    pub fn output_dim(&self) -> usize {
        self.levels.len() * self.feature_dim
    }

    /// Feature-vector index of an integer grid corner on `level`.
    pub fn corner_index(&self, level: &GridLevel, c: [u32; 3]) -> usize {
        let local = if level.dense {
            let n = level.resolution as usize + 1;
            c[0] as usize + n * (c[1] as usize + n * c[2] as usize)
        } else {
            let h = c[0].wrapping_mul(HASH_PRIMES[0])
                ^ c[1].wrapping_mul(HASH_PRIMES[1])
                ^ c[2].wrapping_mul(HASH_PRIMES[2]);
            h as usize & (level.size - 1)
        };
        level.offset + local
    }
}

/// Corner indices, blend weights and cell-local coordinates of one lookup.
#[derive(Clone, Debug, Default)]
pub struct GridSample {
    pub corners: Vec<[usize; 8]>,
    pub weights: Vec<[f64; 8]>,
    pub local: Vec<[f64; 3]>,
}

/// Locates `x ∈ [0,1]³` on every level. Corner `c` has offset
/// `(c & 1, c >> 1 & 1, c >> 2 & 1)` from the cell origin.
pub fn locate(layout: &GridLayout, x: [f64; 3]) -> GridSample {
    let mut s = GridSample {
        corners: Vec::with_capacity(layout.levels.len()),
        weights: Vec::with_capacity(layout.levels.len()),
        local: Vec::with_capacity(layout.levels.len()),
    };
    for level in &layout.levels {
        let n = level.resolution as f64;
        let mut cell = [0u32; 3];
        let mut t = [0.0; 3];
        for a in 0..3 {
            let u = x[a].clamp(0.0, 1.0) * n;
            let i = u.floor().min(n - 1.0).max(0.0);
            cell[a] = i as u32;
            t[a] = u - i;
        }
        let mut corners = [0usize; 8];
        let mut weights = [0.0; 8];
        for c in 0..8 {
            let o = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
            let corner = [cell[0] + o[0] as u32, cell[1] + o[1] as u32, cell[2] + o[2] as u32];
            corners[c] = layout.corner_index(level, corner);
            weights[c] = (0..3).map(|a| if o[a] == 1 { t[a] } else { 1.0 - t[a] }).product();
        }
        s.corners.push(corners);
        s.weights.push(weights);
        s.local.push(t);
    }
    s
}

/// Blends the features of a located sample: `levels × feature_dim` values.
pub fn interpolate(layout: &GridLayout, theta: &[f64], s: &GridSample) -> Vec<f64> {
    let f = layout.feature_dim;
    let mut out = vec![0.0; layout.output_dim()];
    for (l, (corners, weights)) in s.corners.iter().zip(&s.weights).enumerate() {
        let dst = &mut out[l * f..(l + 1) * f];
        for (&idx, &w) in corners.iter().zip(weights) {
            for (d, v) in dst.iter_mut().zip(&theta[idx * f..(idx + 1) * f]) {
                *d += w * v;
            }
        }
    }
    out
}

/// Accumulates `∂L/∂θ` for upstream `dfeat` and returns `∂L/∂x`.
pub fn interpolate_backward(
    layout: &GridLayout,
    theta: &[f64],
    s: &GridSample,
    dfeat: &[f64],
    dtheta: &mut [f64],
) -> [f64; 3] {
    interpolate_backward_with(layout, theta, s, dfeat, |i, v| dtheta[i] += v)
}

/// Like [`interpolate_backward`], but hands each `(index, ∂L/∂θ[index])`
/// contribution to `sink` in a fixed order.
pub fn interpolate_backward_with(
    layout: &GridLayout,
    theta: &[f64],
    s: &GridSample,
    dfeat: &[f64],
    mut sink: impl FnMut(usize, f64),
) -> [f64; 3] {
    let f = layout.feature_dim;
    let mut dx = [0.0; 3];
    for (l, level) in layout.levels.iter().enumerate() {
        let g = &dfeat[l * f..(l + 1) * f];
        let t = s.local[l];
        let n = level.resolution as f64;
        for c in 0..8 {
            let idx = s.corners[l][c];
            let w = s.weights[l][c];
            let feat = &theta[idx * f..(idx + 1) * f];
            let mut gdotf = 0.0;
            for k in 0..f {
                sink(idx * f + k, w * g[k]);
                gdotf += g[k] * feat[k];
            }
            if gdotf == 0.0 {
                continue;
            }
            for a in 0..3 {
                let mut dw = if (c >> a) & 1 == 1 { 1.0 } else { -1.0 };
                for b in 0..3 {
                    if b != a {
                        dw *= if (c >> b) & 1 == 1 { t[b] } else { 1.0 - t[b] };
                    }
                }
                dx[a] += gdotf * dw * n;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_resolutions_span_16_to_4096() {
        let cfg = HashGridConfig::default();
        assert_eq!(cfg.resolution(0), 16);
        assert_eq!(cfg.resolution(15), 4096);
        let g = cfg.growth();
        for l in 0..16 {
            assert_eq!(cfg.resolution(l), (16.0 * g.powi(l as i32) * (1.0 + 1e-9)).floor() as u32);
        }
    }

    #[test]
    fn small_levels_are_dense() {
        let layout = GridLayout::new(&HashGridConfig::default());
        assert!(layout.levels[0].dense);
        assert_eq!(layout.levels[0].size, 17 * 17 * 17);
        assert!(!layout.levels[15].dense);
        assert_eq!(layout.levels[15].size, 1 << 19);
        let sum: usize = layout.levels.iter().map(|l| l.size).sum();
        assert_eq!(sum, layout.entries);
    }

    #[test]
    fn dense_indices_are_unique() {
        let cfg = HashGridConfig { levels: 1, min_res: 3, max_res: 4, table_size_log2: 10, feature_dim: 1 };
        let layout = GridLayout::new(&cfg);
        let mut seen = std::collections::HashSet::new();
        for x in 0..4 {
            for y in 0..4 {
                for z in 0..4 {
                    assert!(seen.insert(layout.corner_index(&layout.levels[0], [x, y, z])));
                }
            }
        }
        assert_eq!(seen.len(), layout.entries);
    }

    #[test]
    fn hashed_index_matches_formula() {
        let cfg = HashGridConfig { levels: 1, min_res: 64, max_res: 128, table_size_log2: 8, feature_dim: 1 };
        let layout = GridLayout::new(&cfg);
        let lvl = layout.levels[0];
        assert!(!lvl.dense);
        let c = [5u32, 9, 63];
        let h = 5u32 ^ 9u32.wrapping_mul(2_654_435_761) ^ 63u32.wrapping_mul(805_459_861);
        assert_eq!(layout.corner_index(&lvl, c), (h & 255) as usize);
    }
}
