//! Learnable pruning and SH-bandwidth masks.
//!
//! A Gaussian survives when `σ(μ) ≥ τ`; masked Gaussians get zero opacity
//! and scale. Degree-`l` SH blocks are kept only while every degree up to
//! `l` passes `σ(ηˡ) ≥ τ_SH`. The forward pass uses these hard indicators;
//! gradients pass straight through as if each indicator were its sigmoid.

use serde::{Deserialize, Serialize};

use crate::math::{logit, sigmoid, sigmoid_grad};
use crate::model::{SplatScene, MAX_SH_DEGREE};
use crate::render::{Splat, SplatGrad};

const L: usize = MAX_SH_DEGREE;

/// Initial mask probability: no Gaussian starts pruned.
pub const INITIAL_PASS_PROBABILITY: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskState {
    pub mu: Vec<f64>,
    pub eta: Vec<[f64; L]>,
    pub tau: f64,
    pub tau_sh: f64,
}

/// Weight of degree `l` (1-based) in the SH mask loss: `(2l+1)/((L+1)²−1)`.
pub fn sh_mask_weight(l: usize) -> f64 {
    (2 * l + 1) as f64 / ((L + 1) * (L + 1) - 1) as f64
}

impl MaskState {
    pub fn new(n: usize, tau: f64, tau_sh: f64) -> Self {
        let init = logit(INITIAL_PASS_PROBABILITY);
        Self {
            mu: vec![init; n],
            eta: vec![[init; L]; n],
            tau,
            tau_sh,
        }
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.eta.len() != self.mu.len() {
            return Err(format!("{} μ values but {} η rows", self.mu.len(), self.eta.len()));
        }
        for (name, t) in [("tau", self.tau), ("tau_sh", self.tau_sh)] {
            if !(t > 0.0 && t < 1.0) {
                return Err(format!("{name} = {t} is not in (0, 1)"));
            }
        }
        Ok(())
    }

    /// Pruning mask `mᵢ`.
    pub fn keep(&self, i: usize) -> bool {
        sigmoid(self.mu[i]) >= self.tau
    }

    /// Cumulative SH masks `mᵢ¹..mᵢᴸ`.
    pub fn sh_masks(&self, i: usize) -> [bool; L] {
        let mut out = [false; L];
        let mut pass = true;
        for l in 0..L {
            pass &= sigmoid(self.eta[i][l]) >= self.tau_sh;
            out[l] = pass;
        }
        out
    }

    /// `bᵢ = max{l | mᵢˡ = 1}`, or 0 when degree 1 already fails.
    pub fn bandwidth(&self, i: usize) -> u8 {
        bandwidth_from_masks(self.sh_masks(i))
    }

    pub fn derive_bandwidth(&self) -> Vec<u8> {
        (0..self.len()).map(|i| self.bandwidth(i)).collect()
    }

    /// Indices of Gaussians that survive pruning, in order.
    pub fn survivors(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.keep(i)).collect()
    }

    /// Rows at `kept`, in that order.
    pub fn select(&self, kept: &[usize]) -> Self {
        Self {
            mu: kept.iter().map(|&i| self.mu[i]).collect(),
            eta: kept.iter().map(|&i| self.eta[i]).collect(),
            tau: self.tau,
            tau_sh: self.tau_sh,
        }
    }
}

pub fn bandwidth_from_masks(m: [bool; L]) -> u8 {
    m.iter().rposition(|&p| p).map_or(0, |l| l as u8 + 1)
}

/// `L_mask = mean σ(μᵢ)` and its gradient.
pub fn mask_loss(state: &MaskState) -> (f64, Vec<f64>) {
    let n = state.len().max(1) as f64;
    let loss = state.mu.iter().map(|&m| sigmoid(m)).sum::<f64>() / n;
    let grad = state.mu.iter().map(|&m| sigmoid_grad(m) / n).collect();
    (loss, grad)
}

/// `L_SH = (1/N) Σᵢ Σₗ wₗ σ(ηᵢˡ)` and its gradient.
pub fn sh_mask_loss(state: &MaskState) -> (f64, Vec<[f64; L]>) {
    let n = state.len().max(1) as f64;
    let mut loss = 0.0;
    let grad = state
        .eta
        .iter()
        .map(|e| {
            std::array::from_fn(|l| {
                let w = sh_mask_weight(l + 1);
                loss += w * sigmoid(e[l]);
                w * sigmoid_grad(e[l]) / n
            })
        })
        .collect();
    (loss / n, grad)
}

/// Masked copy of one splat: `õ = m·o`, `s̃ = m·s`, SH blocks of failed
/// degrees zeroed.
pub fn mask_splat(s: &Splat, state: &MaskState, i: usize) -> Splat {
    let mut out = s.clone();
    if !state.keep(i) {
        out.opacity = 0.0;
        out.scale = [0.0; 3];
    }
    let m = state.sh_masks(i);
    for (j, block) in out.sh.iter_mut().enumerate().skip(1) {
        if !m[degree_of(j) - 1] {
            *block = [0.0; 3];
        }
    }
    out
}

fn degree_of(coeff: usize) -> usize {
    (coeff as f64).sqrt().floor() as usize
}

/// Applies the masks to a whole scene.
pub fn apply_masks(scene: &SplatScene, state: &MaskState) -> SplatScene {
    let mut out = scene.clone();
    for (i, g) in out.gaussians.iter_mut().enumerate() {
        if !state.keep(i) {
            g.opacity = 0.0;
            g.scale = [0.0; 3];
        }
        let m = state.sh_masks(i);
        for (j, block) in g.sh.iter_mut().enumerate().skip(1) {
            if !m[degree_of(j) - 1] {
                *block = [0.0; 3];
            }
        }
    }
    out
}

/// Mask gradients of one Gaussian, from the gradient `masked` of its masked
/// splat and the unmasked values `s`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MaskGrad {
    pub mu: f64,
    pub eta: [f64; L],
}

/// Straight-through backward for [`mask_splat`]: rewrites `masked` into the
/// gradient with respect to the unmasked splat and returns the mask
/// gradients.
pub fn mask_backward(s: &Splat, state: &MaskState, i: usize, grad: &mut SplatGrad) -> MaskGrad {
    let keep = state.keep(i);
    let m = if keep { 1.0 } else { 0.0 };
    let mut d_m = grad.opacity * s.opacity;
    for k in 0..3 {
        d_m += grad.scale[k] * s.scale[k];
    }
    grad.opacity *= m;
    grad.scale.iter_mut().for_each(|v| *v *= m);
    let mut out = MaskGrad {
        mu: d_m * sigmoid_grad(state.mu[i]),
        eta: [0.0; L],
    };

    let ind: [f64; L] = std::array::from_fn(|l| if sigmoid(state.eta[i][l]) >= state.tau_sh { 1.0 } else { 0.0 });
    let cum = state.sh_masks(i);
    let mut d_cum = [0.0; L];
    for (j, block) in grad.sh.iter_mut().enumerate().skip(1) {
        let l = degree_of(j);
        for c in 0..3 {
            d_cum[l - 1] += block[c] * s.sh[j][c];
        }
        if !cum[l - 1] {
            *block = [0.0; 3];
        }
    }
    for (j, e) in out.eta.iter_mut().enumerate() {
        // mˡ = Π_{i≤l} indᵢ, so ∂mˡ/∂ind_j is the product of the others.
        let mut acc = 0.0;
        for l in j..L {
            let others: f64 = (0..=l).filter(|&k| k != j).map(|k| ind[k]).product();
            acc += d_cum[l] * others;
        }
        *e = acc * sigmoid_grad(state.eta[i][j]);
    }
    out
}

/// Removes masked Gaussians. Returns the pruned scene, the matching mask
/// rows and the surviving original indices.
pub fn prune(scene: &SplatScene, state: &MaskState) -> (SplatScene, MaskState, Vec<usize>) {
    let kept = state.survivors();
    (scene.select(&kept), state.select(&kept), kept)
}
