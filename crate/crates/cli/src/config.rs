//! Run configuration: preset defaults, an optional JSON file and `--set`
//! overrides, merged in that order.

use std::path::Path;

use anyhow::{bail, Context, Result};
use locogs::codec::EncodeOptions;
use locogs::coherence::CoherenceConfig;
use locogs::densify::DenseSampling;
use locogs::field::FieldConfig;
use locogs::synthetic::SyntheticConfig;
use locogs::train::{DistillConfig, TrainConfig, Variant};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncodeConfig {
    pub theta_bits: u8,
    pub scale_bits: u8,
    pub color_bits: u8,
}

impl Default for EncodeConfig {
    fn default() -> Self {
        let o = EncodeOptions::default();
        Self { theta_bits: o.theta_bits, scale_bits: o.scale_bits, color_bits: o.color_bits }
    }
}

impl EncodeConfig {
    pub fn options(&self) -> EncodeOptions {
        EncodeOptions { theta_bits: self.theta_bits, scale_bits: self.scale_bits, color_bits: self.color_bits }
    }
}

/// Default camera for `render` when no camera file is given: it looks at
/// the scene centre from `distance` bounding radii along `direction`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub width: u32,
    pub height: u32,
    pub fov_y: f64,
    pub direction: [f64; 3],
    pub distance: f64,
    pub up: [f64; 3],
    pub background: [f64; 3],
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            fov_y: 50.0,
            direction: [0.0, -1.0, 0.35],
            distance: 3.0,
            up: [0.0, 0.0, 1.0],
            background: [0.0; 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub variant: Variant,
    /// Seed of the field initialisation.
    pub seed: u64,
    /// Take the field and coherence centre/radius from the scene bounds.
    pub fit_to_scene: bool,
    /// Progress is logged every this many steps.
    pub log_every: usize,
    pub field: FieldConfig,
    pub distill: DistillConfig,
    pub train: TrainConfig,
    pub coherence: CoherenceConfig,
    pub densify: DenseSampling,
    pub encode: EncodeConfig,
    pub render: RenderConfig,
    pub synth: SyntheticConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Variant::Base)
    }
}

impl RunConfig {
    pub fn preset(variant: Variant) -> Self {
        let mut field = FieldConfig::default();
        field.grid.table_size_log2 = variant.table_size_log2();
        Self {
            variant,
            seed: 0,
            fit_to_scene: true,
            log_every: 100,
            field,
            distill: DistillConfig::default(),
            train: TrainConfig::preset(variant),
            coherence: CoherenceConfig::default(),
            densify: DenseSampling::default(),
            encode: EncodeConfig::default(),
            render: RenderConfig::default(),
            synth: SyntheticConfig::default(),
        }
    }

    /// Preset defaults, then `file`, then each `key.path=value` in `sets`.
    /// `preset` wins over a `variant` named in the file.
    pub fn load(file: Option<&Path>, preset: Option<Variant>, sets: &[String]) -> Result<Self> {
        let user = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str::<Value>(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => Value::Object(Default::default()),
        };
        if !user.is_object() {
            bail!("config file must hold a JSON object");
        }
        let variant = match (preset, user.get("variant")) {
            (Some(v), _) => v,
            (None, Some(v)) => serde_json::from_value(v.clone()).context("config field `variant`")?,
            (None, None) => Variant::Base,
        };
        let mut merged = serde_json::to_value(Self::preset(variant))?;
        merge(&mut merged, &user, "")?;
        for s in sets {
            let (key, raw) = s.split_once('=').with_context(|| format!("override `{s}` is not key=value"))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut patch = value;
            for part in key.rsplit('.') {
                patch = Value::Object([(part.to_string(), patch)].into_iter().collect());
            }
            merge(&mut merged, &patch, "")?;
        }
        merged["variant"] = serde_json::to_value(variant)?;
        let cfg: Self = serde_json::from_value(merged).context("invalid configuration")?;
        Ok(cfg)
    }
}

/// Recursive merge that rejects keys the defaults do not have, so typos in
/// a config file or override fail loudly.
fn merge(base: &mut Value, patch: &Value, path: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() => merge(slot, v, &here)?,
                    Some(slot) => *slot = v.clone(),
                    None => bail!("unknown config key `{here}`"),
                }
            }
            Ok(())
        }
        (b, p) => {
            *b = p.clone();
            Ok(())
        }
    }
}
