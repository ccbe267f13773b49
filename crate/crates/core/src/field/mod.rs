//! Hash-grid neural field mapping positions to implicit Gaussian attributes.
//!
//! A position is normalised by the configured center and radius, contracted
//! into the radius-2 ball and mapped to `[0,1]³`. Features from every grid
//! level are concatenated and fed to four MLP heads:
//!
//! | head     | outputs | activation                    |
//! |----------|---------|-------------------------------|
//! | scale    | 3       | sigmoid                       |
//! | rotation | 4       | normalisation to a unit quat  |
//! | opacity  | 1       | sigmoid (or clamped exp)      |
//! | SH       | 45      | none                          |
//!
//! Flat parameter order (used by checkpoints and the container):
//! `θ` is level-major, then feature vector, then feature component. `Θ` is
//! head-major in the order above; each head stores its layers in order, each
//! layer as a row-major `out × in` weight matrix followed by its bias.

pub mod hashgrid;

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::math::{contract, contract_backward, sigmoid};
use crate::model::{residual_coeff_count, ImplicitAttrs};
pub use hashgrid::{GridLayout, HashGridConfig, HASH_PRIMES};
use hashgrid::{interpolate, interpolate_backward_with, locate, GridSample};

#[derive(Debug, thiserror::Error)]
pub enum FieldError {
    #[error("invalid field configuration: {0}")]
    Config(String),
    #[error("parameter length mismatch: expected {expected}, got {actual}")]
    Length { expected: usize, actual: usize },
    #[error("bad field checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OpacityActivation {
    #[default]
    Sigmoid,
    /// `min(exp(a), 1)`.
    ExpClamped,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub grid: HashGridConfig,
    pub hidden_width: u32,
    pub hidden_layers: u32,
    pub sh_degree: u32,
    pub opacity_activation: OpacityActivation,
    /// Positions are mapped through `(p - center) / radius` before contraction.
    pub center: [f64; 3],
    pub radius: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            grid: HashGridConfig::default(),
            hidden_width: 64,
            hidden_layers: 2,
            sh_degree: 3,
            opacity_activation: OpacityActivation::Sigmoid,
            center: [0.0; 3],
            radius: 1.0,
        }
    }
}

/// Serialized size of a [`FieldConfig`].
pub const FIELD_CONFIG_BYTES: usize = 4 * 8 + 1 + 32;

impl FieldConfig {
    pub fn validate(&self) -> Result<(), FieldError> {
        self.grid.validate().map_err(FieldError::Config)?;
        if self.hidden_width == 0 || self.hidden_width > 4096 {
            return Err(FieldError::Config(format!("hidden_width {}", self.hidden_width)));
        }
        if self.hidden_layers > 8 {
            return Err(FieldError::Config(format!("hidden_layers {}", self.hidden_layers)));
        }
        if self.sh_degree > 3 {
            return Err(FieldError::Config(format!("sh_degree {}", self.sh_degree)));
        }
        if !(self.radius.is_finite() && self.radius > 0.0) || self.center.iter().any(|c| !c.is_finite()) {
            return Err(FieldError::Config("center/radius must be finite with radius > 0".into()));
        }
        Ok(())
    }

    pub fn head_outputs(&self) -> [usize; 4] {
        [3, 4, 1, 3 * residual_coeff_count(self.sh_degree as usize)]
    }

    /// Little-endian binary form shared by checkpoints and containers.
    pub fn to_bytes(&self) -> Vec<u8> {
        let g = &self.grid;
        let mut out = Vec::with_capacity(FIELD_CONFIG_BYTES);
        for v in [
            g.levels,
            g.min_res,
            g.max_res,
            g.table_size_log2,
            g.feature_dim,
            self.hidden_width,
            self.hidden_layers,
            self.sh_degree,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(match self.opacity_activation {
            OpacityActivation::Sigmoid => 0,
            OpacityActivation::ExpClamped => 1,
        });
        for v in self.center.iter().chain(std::iter::once(&self.radius)) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, FieldError> {
        if b.len() != FIELD_CONFIG_BYTES {
            return Err(FieldError::Checkpoint(format!("config block of {} bytes", b.len())));
        }
        let u = |i: usize| u32::from_le_bytes(b[4 * i..4 * i + 4].try_into().unwrap());
        let f = |i: usize| f64::from_le_bytes(b[33 + 8 * i..41 + 8 * i].try_into().unwrap());
        let cfg = Self {
            grid: HashGridConfig {
                levels: u(0),
                min_res: u(1),
                max_res: u(2),
                table_size_log2: u(3),
                feature_dim: u(4),
            },
            hidden_width: u(5),
            hidden_layers: u(6),
            sh_degree: u(7),
            opacity_activation: match b[32] {
                0 => OpacityActivation::Sigmoid,
                1 => OpacityActivation::ExpClamped,
                v => return Err(FieldError::Checkpoint(format!("opacity activation tag {v}"))),
            },
            center: [f(0), f(1), f(2)],
            radius: f(3),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct HeadLayout {
    offset: usize,
    /// Layer widths from input to output.
    dims: Vec<usize>,
}

impl HeadLayout {
    fn param_count(&self) -> usize {
        self.dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Parameter gradients with the same layout as the field's flat vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldGrad {
    pub theta: Vec<f64>,
    pub heads: Vec<f64>,
}

impl FieldGrad {
    pub fn add(&mut self, other: &FieldGrad) {
        for (a, b) in self.theta.iter_mut().zip(&other.theta) {
            *a += b;
        }
        for (a, b) in self.heads.iter_mut().zip(&other.heads) {
            *a += b;
        }
    }

    pub fn clear(&mut self) {
        self.theta.iter_mut().for_each(|v| *v = 0.0);
        self.heads.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Intermediate values of one forward pass, consumed by the backward pass.
#[derive(Clone, Debug)]
pub struct FieldTape {
    normalized: [f64; 3],
    sample: GridSample,
    /// Per head: the input features followed by every hidden activation.
    activations: Vec<Vec<Vec<f64>>>,
    /// Per head: pre-activation outputs.
    raw: Vec<Vec<f64>>,
    bandwidth: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HashGridField {
    pub config: FieldConfig,
    pub layout: GridLayout,
    /// Hash-grid features `θ`.
    pub theta: Vec<f64>,
    /// MLP weights `Θ`.
    pub heads: Vec<f64>,
    head_layouts: Vec<HeadLayout>,
}

impl HashGridField {
    /// Field with all parameters zero.
    pub fn zeros(config: FieldConfig) -> Result<Self, FieldError> {
        config.validate()?;
        let layout = GridLayout::new(&config.grid);
        let mut offset = 0;
        let head_layouts: Vec<HeadLayout> = config
            .head_outputs()
            .iter()
            .map(|&out| {
                let mut dims = vec![layout.output_dim()];
                dims.extend(std::iter::repeat_n(config.hidden_width as usize, config.hidden_layers as usize));
                dims.push(out);
                let h = HeadLayout { offset, dims };
                offset += h.param_count();
                h
            })
            .collect();
        Ok(Self {
            theta: vec![0.0; layout.param_count()],
            heads: vec![0.0; offset],
            layout,
            head_layouts,
            config,
        })
    }

    /// Seeded initialisation: `θ ~ U(±1e-4)`, Kaiming-uniform weights with
    /// zero biases, an all-zero SH output layer and a rotation bias of
    /// `(1, 0, 0, 0)`.
    pub fn new(config: FieldConfig, seed: u64) -> Result<Self, FieldError> {
        let mut field = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in &mut field.theta {
            *v = rng.random_range(-1e-4..1e-4);
        }
        let sh_head = field.head_layouts.len() - 1;
        for (h, head) in field.head_layouts.iter().enumerate() {
            let mut off = head.offset;
            let last = head.dims.len() - 2;
            for (l, w) in head.dims.windows(2).enumerate() {
                let (fan_in, fan_out) = (w[0], w[1]);
                let zero = h == sh_head && l == last;
                let bound = if l == last { (3.0 / fan_in as f64).sqrt() } else { (6.0 / fan_in as f64).sqrt() };
                for v in &mut field.heads[off..off + fan_in * fan_out] {
                    *v = if zero { 0.0 } else { rng.random_range(-bound..bound) };
                }
                off += fan_in * fan_out + fan_out;
            }
        }
        let rot = &field.head_layouts[1];
        let bias = rot.offset + rot.param_count() - 4;
        field.heads[bias] = 1.0;
        Ok(field)
    }

    pub fn param_count(&self) -> usize {
        self.theta.len() + self.heads.len()
    }

    /// Closed-form parameter count of a configuration.
    pub fn expected_param_count(config: &FieldConfig) -> usize {
        let layout = GridLayout::new(&config.grid);
        let input = layout.output_dim();
        let h = config.hidden_width as usize;
        let layers = config.hidden_layers as usize;
        config
            .head_outputs()
            .iter()
            .map(|&out| {
                if layers == 0 {
                    input * out + out
                } else {
                    input * h + h + (layers - 1) * (h * h + h) + h * out + out
                }
            })
            .sum::<usize>()
            + layout.param_count()
    }

    pub fn zero_grad(&self) -> FieldGrad {
        FieldGrad {
            theta: vec![0.0; self.theta.len()],
            heads: vec![0.0; self.heads.len()],
        }
    }

    /// `[0,1]³` grid coordinate of a world-space position.
    pub fn grid_coord(&self, p: [f64; 3]) -> [f64; 3] {
        let c = contract(self.normalize(p));
        c.map(|v| (v + 2.0) * 0.25)
    }

    fn normalize(&self, p: [f64; 3]) -> [f64; 3] {
        let r = self.config.radius;
        std::array::from_fn(|a| (p[a] - self.config.center[a]) / r)
    }

    /// Concatenated trilinear features at grid coordinate `x ∈ [0,1]³`.
    pub fn grid_lookup(&self, x: [f64; 3]) -> Vec<f64> {
        interpolate(&self.layout, &self.theta, &locate(&self.layout, x))
    }

    pub fn eval_implicit(&self, p: [f64; 3], bandwidth: u8) -> ImplicitAttrs {
        self.forward(p, bandwidth).0
    }

    /// Forward pass that also records what [`HashGridField::backward`] needs.
    pub fn forward(&self, p: [f64; 3], bandwidth: u8) -> (ImplicitAttrs, FieldTape) {
        let normalized = self.normalize(p);
        let c = contract(normalized);
        let x = c.map(|v| (v + 2.0) * 0.25);
        let sample = locate(&self.layout, x);
        let features = interpolate(&self.layout, &self.theta, &sample);
        let bandwidth = (bandwidth as usize).min(self.config.sh_degree as usize);
        let mut activations = Vec::with_capacity(4);
        let mut raw = Vec::with_capacity(4);
        for (h, head) in self.head_layouts.iter().enumerate() {
            // Only the SH coefficients up to the bandwidth are needed.
            let width = if h == 3 { 3 * residual_coeff_count(bandwidth) } else { head.dims[head.dims.len() - 1] };
            let (acts, out) = mlp_forward(&self.heads, head, features.clone(), width);
            activations.push(acts);
            raw.push(out);
        }
        let attrs = self.activate(&raw, bandwidth);
        (attrs, FieldTape { normalized, sample, activations, raw, bandwidth })
    }

    fn activate(&self, raw: &[Vec<f64>], bandwidth: usize) -> ImplicitAttrs {
        let s = &raw[0];
        let r = &raw[1];
        let norm = (r.iter().map(|v| v * v).sum::<f64>()).sqrt().max(1e-12);
        let opacity = match self.config.opacity_activation {
            OpacityActivation::Sigmoid => sigmoid(raw[2][0]),
            OpacityActivation::ExpClamped => raw[2][0].exp().min(1.0),
        };
        ImplicitAttrs {
            opacity,
            normalized_scale: [sigmoid(s[0]), sigmoid(s[1]), sigmoid(s[2])],
            rotation: [r[0] / norm, r[1] / norm, r[2] / norm, r[3] / norm],
            residual_sh: (0..residual_coeff_count(bandwidth))
                .map(|j| [raw[3][3 * j], raw[3][3 * j + 1], raw[3][3 * j + 2]])
                .collect(),
        }
    }

    /// Reverse-mode pass. `upstream` holds `∂L/∂` of each implicit attribute
    /// (entries beyond the tape's bandwidth are ignored). Parameter
    /// gradients are accumulated into `grad`; `∂L/∂p` is returned.
    pub fn backward(&self, tape: &FieldTape, upstream: &ImplicitAttrs, grad: &mut FieldGrad) -> [f64; 3] {
        let FieldGrad { theta, heads } = grad;
        self.backward_into(tape, upstream, heads, |i, v| theta[i] += v)
    }

    /// Backward over many samples at once. Work is split into fixed-size
    /// chunks, so the result does not depend on the number of threads;
    /// `θ` contributions are summed in sample order.
    pub fn backward_batch(&self, tapes: &[FieldTape], upstream: &[ImplicitAttrs]) -> (FieldGrad, Vec<[f64; 3]>) {
        use rayon::prelude::*;
        assert_eq!(tapes.len(), upstream.len());
        const CHUNK: usize = 256;
        let parts: Vec<(Vec<f64>, Vec<(usize, f64)>, Vec<[f64; 3]>)> = tapes
            .par_chunks(CHUNK)
            .zip(upstream.par_chunks(CHUNK))
            .map(|(ts, us)| {
                let mut heads = vec![0.0; self.heads.len()];
                let mut sparse = Vec::new();
                let dp = ts
                    .iter()
                    .zip(us)
                    .map(|(t, u)| self.backward_into(t, u, &mut heads, |i, v| sparse.push((i, v))))
                    .collect();
                (heads, sparse, dp)
            })
            .collect();
        let mut grad = self.zero_grad();
        let mut dp = Vec::with_capacity(tapes.len());
        for (heads, sparse, d) in parts {
            for (a, b) in grad.heads.iter_mut().zip(&heads) {
                *a += b;
            }
            for (i, v) in sparse {
                grad.theta[i] += v;
            }
            dp.extend(d);
        }
        (grad, dp)
    }

    fn backward_into(
        &self,
        tape: &FieldTape,
        upstream: &ImplicitAttrs,
        dheads: &mut [f64],
        theta_sink: impl FnMut(usize, f64),
    ) -> [f64; 3] {
        let raw = &tape.raw;
        let mut draw: Vec<Vec<f64>> = raw.iter().map(|r| vec![0.0; r.len()]).collect();
        for a in 0..3 {
            let s = sigmoid(raw[0][a]);
            draw[0][a] = upstream.normalized_scale[a] * s * (1.0 - s);
        }
        let norm = (raw[1].iter().map(|v| v * v).sum::<f64>()).sqrt().max(1e-12);
        let q: Vec<f64> = raw[1].iter().map(|v| v / norm).collect();
        let qg: f64 = (0..4).map(|i| q[i] * upstream.rotation[i]).sum();
        for i in 0..4 {
            draw[1][i] = (upstream.rotation[i] - q[i] * qg) / norm;
        }
        draw[2][0] = upstream.opacity
            * match self.config.opacity_activation {
                OpacityActivation::Sigmoid => {
                    let s = sigmoid(raw[2][0]);
                    s * (1.0 - s)
                }
                OpacityActivation::ExpClamped => {
                    let e = raw[2][0].exp();
                    if e < 1.0 {
                        e
                    } else {
                        0.0
                    }
                }
            };
        for (j, c) in upstream.residual_sh.iter().take(residual_coeff_count(tape.bandwidth)).enumerate() {
            draw[3][3 * j..3 * j + 3].copy_from_slice(c);
        }

        let mut dfeat = vec![0.0; self.layout.output_dim()];
        for (h, head) in self.head_layouts.iter().enumerate() {
            if draw[h].iter().all(|&v| v == 0.0) {
                continue;
            }
            let d = mlp_backward(&self.heads, head, &tape.activations[h], &draw[h], dheads);
            for (a, b) in dfeat.iter_mut().zip(&d) {
                *a += b;
            }
        }
        let dx = interpolate_backward_with(&self.layout, &self.theta, &tape.sample, &dfeat, theta_sink);
        let dc = dx.map(|v| v * 0.25);
        let dn = contract_backward(tape.normalized, dc);
        dn.map(|v| v / self.config.radius)
    }

    /// Forward and backward in one call; returns the attributes, the
    /// parameter gradient and `∂L/∂p`.
    pub fn eval_implicit_grad(
        &self,
        p: [f64; 3],
        bandwidth: u8,
        upstream: &ImplicitAttrs,
    ) -> (ImplicitAttrs, FieldGrad, [f64; 3]) {
        let (attrs, tape) = self.forward(p, bandwidth);
        let mut grad = self.zero_grad();
        let dp = self.backward(&tape, upstream, &mut grad);
        (attrs, grad, dp)
    }

    /// Flat `(θ, Θ)` vectors in the documented order.
    pub fn field_param_vector(&self) -> (Vec<f64>, Vec<f64>) {
        (self.theta.clone(), self.heads.clone())
    }

    pub fn from_param_vectors(config: FieldConfig, theta: Vec<f64>, heads: Vec<f64>) -> Result<Self, FieldError> {
        let mut field = Self::zeros(config)?;
        if theta.len() != field.theta.len() {
            return Err(FieldError::Length { expected: field.theta.len(), actual: theta.len() });
        }
        if heads.len() != field.heads.len() {
            return Err(FieldError::Length { expected: field.heads.len(), actual: heads.len() });
        }
        field.theta = theta;
        field.heads = heads;
        Ok(field)
    }

    /// Number of `θ` values stored for each grid level.
    pub fn level_param_counts(&self) -> Vec<usize> {
        self.layout.levels.iter().map(|l| l.size * self.layout.feature_dim).collect()
    }

    /// Checkpoint layout: `b"LGSFIELD"`, `u16` version, the config block,
    /// `u64` seed, `u64` length and `f64` values of `θ`, then the same for `Θ`.
    pub fn write_checkpoint<W: Write>(&self, seed: u64, mut w: W) -> Result<(), FieldError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&self.config.to_bytes())?;
        w.write_all(&seed.to_le_bytes())?;
        for values in [&self.theta, &self.heads] {
            w.write_all(&(values.len() as u64).to_le_bytes())?;
            let mut buf = Vec::with_capacity(values.len() * 8);
            for v in values.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    /// Reads a checkpoint, returning the field and its recorded seed.
    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(Self, u64), FieldError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(FieldError::Checkpoint("not a field checkpoint".into()));
        }
        let mut v = [0u8; 2];
        r.read_exact(&mut v)?;
        if u16::from_le_bytes(v) != CHECKPOINT_VERSION {
            return Err(FieldError::Checkpoint(format!("unsupported version {}", u16::from_le_bytes(v))));
        }
        let mut cfg = vec![0u8; FIELD_CONFIG_BYTES];
        r.read_exact(&mut cfg)?;
        let config = FieldConfig::from_bytes(&cfg)?;
        let mut seed = [0u8; 8];
        r.read_exact(&mut seed)?;
        let mut field = Self::zeros(config)?;
        for values in [&mut field.theta, &mut field.heads] {
            let mut n = [0u8; 8];
            r.read_exact(&mut n)?;
            let n = u64::from_le_bytes(n) as usize;
            if n != values.len() {
                return Err(FieldError::Length { expected: values.len(), actual: n });
            }
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf)?;
            for (v, c) in values.iter_mut().zip(buf.chunks_exact(8)) {
                *v = f64::from_le_bytes(c.try_into().unwrap());
            }
        }
        Ok((field, u64::from_le_bytes(seed)))
    }

    pub fn save(&self, seed: u64, path: &Path) -> Result<(), FieldError> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(seed, f)
    }

    pub fn load(path: &Path) -> Result<(Self, u64), FieldError> {
        Self::read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"LGSFIELD";
const CHECKPOINT_VERSION: u16 = 1;

/// Runs one head, computing only the first `width` outputs of the last layer.
fn mlp_forward(params: &[f64], head: &HeadLayout, input: Vec<f64>, width: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut acts = vec![input];
    let mut off = head.offset;
    let n_layers = head.dims.len() - 1;
    for (l, w) in head.dims.windows(2).enumerate() {
        let (fan_in, fan_out) = (w[0], w[1]);
        let weights = &params[off..off + fan_in * fan_out];
        let bias = &params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
        let last = l + 1 == n_layers;
        let rows = if last { width } else { fan_out };
        let a = acts.last().unwrap();
        let mut z: Vec<f64> = (0..rows)
            .map(|o| {
                let row = &weights[o * fan_in..(o + 1) * fan_in];
                bias[o] + row.iter().zip(a).map(|(w, x)| w * x).sum::<f64>()
            })
            .collect();
        off += fan_in * fan_out + fan_out;
        if last {
            return (acts, z);
        }
        z.iter_mut().for_each(|v| *v = v.max(0.0));
        acts.push(z);
    }
    unreachable!("heads have at least one layer")
}

/// Backpropagates `dout` through one head; returns `∂L/∂input`.
fn mlp_backward(params: &[f64], head: &HeadLayout, acts: &[Vec<f64>], dout: &[f64], grads: &mut [f64]) -> Vec<f64> {
    let mut offsets = Vec::with_capacity(head.dims.len() - 1);
    let mut off = head.offset;
    for w in head.dims.windows(2) {
        offsets.push(off);
        off += w[0] * w[1] + w[1];
    }
    let mut delta: Vec<f64> = dout.to_vec();
    for l in (0..head.dims.len() - 1).rev() {
        let (fan_in, fan_out) = (head.dims[l], head.dims[l + 1]);
        let off = offsets[l];
        let a = &acts[l];
        let mut dinput = vec![0.0; fan_in];
        for (o, &d) in delta.iter().enumerate().take(fan_out) {
            if d == 0.0 {
                continue;
            }
            let row = off + o * fan_in;
            for i in 0..fan_in {
                grads[row + i] += d * a[i];
                dinput[i] += d * params[row + i];
            }
            grads[off + fan_in * fan_out + o] += d;
        }
        if l > 0 {
            // ReLU derivative from the stored post-activation values.
            for (di, &ai) in dinput.iter_mut().zip(a) {
                if ai <= 0.0 {
                    *di = 0.0;
                }
            }
        }
        delta = dinput;
    }
    delta
}
