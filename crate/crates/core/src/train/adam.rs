//! Adam and learning-rate schedules.

use serde::{Deserialize, Serialize};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
/// Epsilon used for Gaussian positions.
pub const EPS_POSITION: f64 = 1e-15;
pub const EPS_DEFAULT: f64 = 1e-8;

/// First and second moment estimates for one parameter group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(len: usize, eps: f64) -> Self {
        Self { eps, m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        adam_step(params, grads, self, lr);
    }

    /// Keeps the moment rows of `kept` (each row `width` values wide).
    pub fn select_rows(&mut self, kept: &[usize], width: usize) {
        let pick = |src: &[f64]| kept.iter().flat_map(|&i| src[i * width..(i + 1) * width].iter().copied()).collect();
        self.m = pick(&self.m);
        self.v = pick(&self.v);
    }

    /// Appends `count` fresh rows.
    pub fn append_zero_rows(&mut self, count: usize, width: usize) {
        self.m.resize(self.m.len() + count * width, 0.0);
        self.v.resize(self.v.len() + count * width, 0.0);
    }
}

/// One Adam update with bias correction.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut Adam, lr: f64) {
    assert_eq!(params.len(), grads.len(), "parameter and gradient lengths differ");
    assert_eq!(params.len(), state.m.len(), "optimizer state has the wrong length");
    state.t += 1;
    let c1 = 1.0 - BETA1.powi(state.t as i32);
    let c2 = 1.0 - BETA2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = BETA1 * state.m[i] + (1.0 - BETA1) * g;
        state.v[i] = BETA2 * state.v[i] + (1.0 - BETA2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
}

/// Log-linear decay from `init` to `end` over `steps`, multiplied by a
/// linear warm-up ramp `(step+1)/warmup` during the first `warmup` steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub init: f64,
    pub end: f64,
    pub steps: usize,
    pub warmup: usize,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self { init: lr, end: lr, steps: 1, warmup: 0 }
    }

    pub fn ramp(&self, step: usize) -> f64 {
        if step < self.warmup {
            (step + 1) as f64 / self.warmup as f64
        } else {
            1.0
        }
    }

    pub fn at(&self, step: usize) -> f64 {
        if self.init == self.end {
            return self.init * self.ramp(step);
        }
        let t = (step as f64 / self.steps.max(1) as f64).clamp(0.0, 1.0);
        (self.init.ln() * (1.0 - t) + self.end.ln() * t).exp() * self.ramp(step)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = vec![1.0, -2.0, 3.5];
        let mut s = Adam::new(3, EPS_DEFAULT);
        for _ in 0..5 {
            adam_step(&mut p, &[0.0; 3], &mut s, 0.1);
        }
        assert_eq!(p, vec![1.0, -2.0, 3.5]);
    }

    #[test]
    fn three_step_trajectory() {
        // Hand-unrolled recurrence for g = 0.5, -1.0, 2.0 with lr 0.1.
        let grads = [0.5, -1.0, 2.0];
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 1.0f64);
        let mut want = Vec::new();
        for (t, g) in grads.iter().enumerate() {
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32 + 1));
            let vh = v / (1.0 - 0.999f64.powi(t as i32 + 1));
            x -= 0.1 * mh / (vh.sqrt() + 1e-8);
            want.push(x);
        }
        let mut p = [1.0];
        let mut s = Adam::new(1, EPS_DEFAULT);
        for (g, w) in grads.iter().zip(&want) {
            adam_step(&mut p, &[*g], &mut s, 0.1);
            assert!((p[0] - w).abs() < 1e-15);
        }
        // Step 1: m̂ = g, v̂ = g², so the move is 0.1·sign(g) up to ε.
        assert!((want[0] - 0.9).abs() < 1e-7);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        for g in [1e-6, 3.0, -250.0] {
            let mut p = [0.0];
            let mut s = Adam::new(1, EPS_POSITION);
            adam_step(&mut p, &[g], &mut s, 0.01);
            assert!((p[0] + 0.01 * f64::signum(g)).abs() < 1e-9);
        }
    }

    #[test]
    fn schedule_warmup_and_decay() {
        let s = LrSchedule { init: 1e-2, end: 1e-4, steps: 100, warmup: 10 };
        assert!((s.at(0) - 1e-3).abs() < 1e-15);
        assert!((s.at(4) - 1e-2 * 0.5 * (0.01f64).powf(0.04)).abs() < 1e-15);
        assert!((s.at(100) - 1e-4).abs() < 1e-15);
        assert!((s.at(50) - 1e-3).abs() < 1e-15);
        assert_eq!(LrSchedule::constant(0.3).at(1000), 0.3);
    }

    #[test]
    fn row_selection() {
        let mut s = Adam::new(6, EPS_DEFAULT);
        s.m = vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        s.select_rows(&[2, 0], 2);
        assert_eq!(s.m, vec![4.0, 5.0, 0.0, 1.0]);
        s.append_zero_rows(1, 2);
        assert_eq!(s.m, vec![4.0, 5.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(s.v.len(), 6);
    }
}
