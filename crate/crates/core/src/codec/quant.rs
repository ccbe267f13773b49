//! Uniform k-bit quantization over a clipped distributional range.

use super::CodecError;

/// Dequantization parameters of one lossy stream.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantSpec {
    pub bits: u8,
    pub mean: f64,
    pub std: f64,
    /// Set when all inputs were equal; `mean` then holds that value exactly.
    pub degenerate: bool,
}

/// Serialized size of a [`QuantSpec`].
pub const QUANT_SPEC_BYTES: usize = 18;

/// Clip multiplier `3 + 3(k-1)/15` for a `k`-bit quantizer.
pub fn clip_multiplier(bits: u8) -> f64 {
    (42.0 + 3.0 * bits as f64) / 15.0
}

impl QuantSpec {
    pub fn clip_multiplier(&self) -> f64 {
        clip_multiplier(self.bits)
    }

    pub fn levels(&self) -> u32 {
        1u32 << self.bits
    }

    /// Lower and upper ends of the clipped range.
    pub fn range(&self) -> (f64, f64) {
        let half = self.clip_multiplier() * self.std;
        (self.mean - half, self.mean + half)
    }

    pub fn step(&self) -> f64 {
        let (lo, hi) = self.range();
        (hi - lo) / self.levels() as f64
    }

    pub fn encode(&self, x: f64) -> u16 {
        if self.degenerate {
            return 0;
        }
        let (lo, _) = self.range();
        let c = ((x - lo) / self.step()).floor();
        c.clamp(0.0, (self.levels() - 1) as f64) as u16
    }

    pub fn decode(&self, code: u16) -> f64 {
        if self.degenerate {
            return self.mean;
        }
        let (lo, _) = self.range();
        lo + (code as f64 + 0.5) * self.step()
    }

    pub fn write(&self, out: &mut Vec<u8>) {
        out.push(self.bits);
        out.push(self.degenerate as u8);
        out.extend_from_slice(&self.mean.to_le_bytes());
        out.extend_from_slice(&self.std.to_le_bytes());
    }

    pub fn read(input: &[u8], pos: &mut usize) -> Result<Self, CodecError> {
        let b = input
            .get(*pos..*pos + QUANT_SPEC_BYTES)
            .ok_or(CodecError::Truncated("quantization parameters"))?;
        *pos += QUANT_SPEC_BYTES;
        let spec = QuantSpec {
            bits: b[0],
            degenerate: match b[1] {
                0 => false,
                1 => true,
                v => return Err(CodecError::Corrupt(format!("degenerate flag {v}"))),
            },
            mean: f64::from_le_bytes(b[2..10].try_into().unwrap()),
            std: f64::from_le_bytes(b[10..18].try_into().unwrap()),
        };
        if !(1..=16).contains(&spec.bits) {
            return Err(CodecError::Corrupt(format!("quantizer with {} bits", spec.bits)));
        }
        if !spec.mean.is_finite() || !spec.std.is_finite() || (!spec.degenerate && spec.std <= 0.0) {
            return Err(CodecError::Corrupt("invalid quantizer statistics".into()));
        }
        Ok(spec)
    }
}

/// Quantizes `values` to `bits`-bit codes after clipping to
/// `mean ± clip_multiplier(bits)·std`.
pub fn quantize(values: &[f64], bits: u8) -> Result<(Vec<u16>, QuantSpec), CodecError> {
    if !(1..=16).contains(&bits) {
        return Err(CodecError::Range(format!("{bits} quantization bits")));
    }
    if values.is_empty() {
        let spec = QuantSpec { bits, mean: 0.0, std: 0.0, degenerate: true };
        return Ok((Vec::new(), spec));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(CodecError::NonFinite { what: "quantizer input", index: i });
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let first = values[0];
    let spec = if values.iter().all(|&v| v == first) {
        QuantSpec { bits, mean: first, std: 0.0, degenerate: true }
    } else {
        QuantSpec { bits, mean, std: var.sqrt(), degenerate: false }
    };
    Ok((values.iter().map(|&v| spec.encode(v)).collect(), spec))
}

pub fn dequantize(codes: &[u16], spec: &QuantSpec) -> Vec<f64> {
    codes.iter().map(|&c| spec.decode(c)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn clip_constants() {
        assert_eq!(clip_multiplier(6), 4.0);
        assert_eq!(clip_multiplier(8), 4.4);
        assert_eq!(clip_multiplier(1), 3.0);
        assert_eq!(clip_multiplier(16), 6.0);
    }

    #[test]
    fn constant_input_is_exact() {
        let (codes, spec) = quantize(&[0.3; 100], 6).unwrap();
        assert!(spec.degenerate);
        assert!(codes.iter().all(|&c| c == 0));
        assert!(dequantize(&codes, &spec).iter().all(|&v| v == 0.3));
    }

    #[test]
    fn gaussian_samples_stay_within_half_a_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let normal = Normal::new(1.5, 0.7).unwrap();
        let xs: Vec<f64> = (0..100_000).map(|_| normal.sample(&mut rng)).collect();
        for bits in [1u8, 6, 8, 12, 16] {
            let (codes, spec) = quantize(&xs, bits).unwrap();
            let (lo, hi) = spec.range();
            let half = spec.step() / 2.0;
            for (&x, &c) in xs.iter().zip(&codes) {
                assert!((c as u32) < spec.levels());
                if (lo..=hi).contains(&x) {
                    assert!((x - spec.decode(c)).abs() <= half * (1.0 + 1e-12));
                } else {
                    let edge = if x < lo { 0 } else { spec.levels() - 1 };
                    assert_eq!(c as u32, edge);
                }
            }
        }
    }

    #[test]
    fn spec_serialization_roundtrip() {
        let (_, spec) = quantize(&[1.0, 2.0, 4.0], 8).unwrap();
        let mut buf = Vec::new();
        spec.write(&mut buf);
        assert_eq!(buf.len(), QUANT_SPEC_BYTES);
        let mut pos = 0;
        assert_eq!(QuantSpec::read(&buf, &mut pos).unwrap(), spec);
        buf[0] = 0;
        assert!(QuantSpec::read(&buf, &mut 0).is_err());
    }

    #[test]
    fn bad_inputs() {
        assert!(quantize(&[1.0], 0).is_err());
        assert!(quantize(&[1.0], 17).is_err());
        assert!(quantize(&[1.0, f64::NAN], 6).is_err());
    }
}
