//! Adaptive order-0 arithmetic coding.
//!
//! The coder is a 64-bit range coder with LZMA-style carry propagation: the
//! range is renormalised a byte at a time once it falls below 2⁵⁶, and
//! symbol totals are bounded by 2²⁴, so the per-symbol quantisation loss of
//! `range / total` stays below 2⁻³².

use super::CodecError;

const TOP: u64 = 1 << 56;
const MAX_TOTAL: u32 = 1 << 24;

/// Adaptation parameters for [`AdaptiveModel`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    /// Number of distinct symbols, `1..=256`.
    pub alphabet: u16,
    /// Count added to a symbol each time it is coded.
    pub increment: u32,
    /// Frequencies are halved when their total exceeds this value; small
    /// limits make the model track local statistics.
    pub limit: u32,
}

impl ModelSpec {
    /// Long-memory byte model: learns quickly and keeps nearly the whole
    /// history.
    pub const BYTES: ModelSpec = ModelSpec {
        alphabet: 256,
        increment: 32,
        limit: MAX_TOTAL,
    };

    pub const fn with_alphabet(alphabet: u16) -> Self {
        ModelSpec {
            alphabet,
            ..Self::BYTES
        }
    }

    /// Short-memory model over `alphabet` symbols, forgetting after roughly
    /// `window` symbols.
    pub const fn local(alphabet: u16, window: u32) -> Self {
        let floor = 2 * (alphabet as u32 + 32);
        let limit = 32 * window;
        ModelSpec {
            alphabet,
            increment: 32,
            limit: if limit < floor { floor } else if limit > MAX_TOTAL { MAX_TOTAL } else { limit },
        }
    }

    fn validate(&self) -> Result<(), CodecError> {
        if self.alphabet == 0 || self.alphabet > 256 {
            return Err(CodecError::Model(format!("alphabet {} not in 1..=256", self.alphabet)));
        }
        if self.increment == 0
            || self.limit > MAX_TOTAL
            || self.limit < self.alphabet as u32 + self.increment
        {
            return Err(CodecError::Model(format!(
                "increment {} / limit {} unusable",
                self.increment, self.limit
            )));
        }
        Ok(())
    }
}

/// Frequency table that adapts as symbols are coded.
#[derive(Clone, Debug)]
pub struct AdaptiveModel {
    freq: Vec<u32>,
    total: u32,
    increment: u32,
    limit: u32,
}

impl AdaptiveModel {
    pub fn new(spec: ModelSpec) -> Result<Self, CodecError> {
        spec.validate()?;
        Ok(Self {
            freq: vec![1; spec.alphabet as usize],
            total: spec.alphabet as u32,
            increment: spec.increment,
            limit: spec.limit,
        })
    }

    pub fn alphabet(&self) -> usize {
        self.freq.len()
    }

    fn interval(&self, symbol: usize) -> (u32, u32) {
        let cum: u32 = self.freq[..symbol].iter().sum();
        (cum, self.freq[symbol])
    }

    /// Symbol whose interval contains `target`, with its interval.
    fn lookup(&self, target: u32) -> (usize, u32, u32) {
        let mut cum = 0;
        for (s, &f) in self.freq.iter().enumerate() {
            if target < cum + f {
                return (s, cum, f);
            }
            cum += f;
        }
        let last = self.freq.len() - 1;
        (last, cum - self.freq[last], self.freq[last])
    }

    fn update(&mut self, symbol: usize) {
        self.freq[symbol] += self.increment;
        self.total += self.increment;
        if self.total > self.limit {
            self.total = 0;
            for f in &mut self.freq {
                *f = f.div_ceil(2);
                self.total += *f;
            }
        }
    }
}

/// Byte-oriented range encoder.
pub struct RangeEncoder {
    low: u128,
    range: u64,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u64::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u64) < 0xFF00_0000_0000_0000 || (self.low >> 64) != 0 {
            let carry = (self.low >> 64) as u8;
            let mut temp = self.cache;
            loop {
                self.out.push(temp.wrapping_add(carry));
                temp = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 56) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF_FFFF_FFFF) << 8;
    }

    fn encode_interval(&mut self, cum: u32, freq: u32, total: u32) {
        let r = self.range / total as u64;
        self.low += r as u128 * cum as u128;
        self.range = r * freq as u64;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    /// Codes `symbol` under `model` and adapts the model.
    pub fn encode(&mut self, model: &mut AdaptiveModel, symbol: usize) {
        let (cum, freq) = model.interval(symbol);
        self.encode_interval(cum, freq, model.total);
        model.update(symbol);
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..9 {
            self.shift_low();
        }
        self.out
    }
}

/// Decoder matching [`RangeEncoder`]; reads past the end as zero bytes.
pub struct RangeDecoder<'a> {
    code: u64,
    range: u64,
    input: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Self {
        let mut d = Self {
            code: 0,
            range: u64::MAX,
            input,
            pos: 0,
        };
        for _ in 0..9 {
            d.code = (d.code << 8) | d.next_byte() as u64;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.input.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    pub fn decode(&mut self, model: &mut AdaptiveModel) -> usize {
        let total = model.total;
        let r = self.range / total as u64;
        let target = (self.code / r).min(total as u64 - 1) as u32;
        let (symbol, cum, freq) = model.lookup(target);
        self.code -= r * cum as u64;
        self.range = r * freq as u64;
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte() as u64;
            self.range <<= 8;
        }
        model.update(symbol);
        symbol
    }
}

pub(crate) fn write_varint(out: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7F) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

pub(crate) fn read_varint(input: &[u8], pos: &mut usize) -> Result<u64, CodecError> {
    let mut v = 0u64;
    for shift in (0..64).step_by(7) {
        let byte = *input.get(*pos).ok_or(CodecError::Truncated("varint"))?;
        *pos += 1;
        v |= ((byte & 0x7F) as u64) << shift;
        if byte & 0x80 == 0 {
            return Ok(v);
        }
    }
    Err(CodecError::Corrupt("varint longer than 64 bits".into()))
}

/// Entropy-codes `symbols` (each `< spec.alphabet`) into a self-delimiting
/// block: `varint(count) varint(payload_len) payload`.
pub fn entropy_encode(symbols: &[u8], spec: ModelSpec) -> Result<Vec<u8>, CodecError> {
    let mut model = AdaptiveModel::new(spec)?;
    let mut out = Vec::new();
    write_varint(&mut out, symbols.len() as u64);
    if symbols.is_empty() {
        write_varint(&mut out, 0);
        return Ok(out);
    }
    let mut enc = RangeEncoder::new();
    for &s in symbols {
        if s as usize >= model.alphabet() {
            return Err(CodecError::Model(format!("symbol {s} outside alphabet {}", spec.alphabet)));
        }
        enc.encode(&mut model, s as usize);
    }
    let payload = enc.finish();
    write_varint(&mut out, payload.len() as u64);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Decodes one block written by [`entropy_encode`] starting at `*pos`,
/// advancing `*pos` past it.
pub fn entropy_decode_at(input: &[u8], pos: &mut usize, spec: ModelSpec) -> Result<Vec<u8>, CodecError> {
    let count = read_varint(input, pos)? as usize;
    let len = read_varint(input, pos)? as usize;
    let end = pos.checked_add(len).ok_or(CodecError::Truncated("entropy payload"))?;
    if end > input.len() {
        return Err(CodecError::Truncated("entropy payload"));
    }
    if count > 0 && len == 0 {
        return Err(CodecError::Corrupt("non-empty symbol block without payload".into()));
    }
    let payload = &input[*pos..end];
    *pos = end;
    let mut model = AdaptiveModel::new(spec)?;
    let mut dec = RangeDecoder::new(payload);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        out.push(dec.decode(&mut model) as u8);
    }
    Ok(out)
}

pub fn entropy_decode(input: &[u8], spec: ModelSpec) -> Result<Vec<u8>, CodecError> {
    let mut pos = 0;
    entropy_decode_at(input, &mut pos, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_stream_is_header_only() {
        let enc = entropy_encode(&[], ModelSpec::BYTES).unwrap();
        assert_eq!(enc, vec![0, 0]);
        assert!(entropy_decode(&enc, ModelSpec::BYTES).unwrap().is_empty());
    }

    #[test]
    fn constant_stream_compresses_below_one_percent() {
        let data = vec![42u8; 10_000];
        let enc = entropy_encode(&data, ModelSpec::BYTES).unwrap();
        assert!(enc.len() * 100 < data.len(), "{} bytes", enc.len());
        assert_eq!(entropy_decode(&enc, ModelSpec::BYTES).unwrap(), data);
    }

    #[test]
    fn random_bytes_expand_less_than_half_a_percent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<u8> = (0..1_000_000).map(|_| rng.random()).collect();
        let enc = entropy_encode(&data, ModelSpec::BYTES).unwrap();
        let expansion = enc.len() as f64 / data.len() as f64 - 1.0;
        assert!(expansion <= 0.005, "expansion {expansion}");
        assert_eq!(entropy_decode(&enc, ModelSpec::BYTES).unwrap(), data);
    }

    #[test]
    fn skewed_stream_beats_fixed_width_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<u8> = (0..50_000)
            .map(|_| if rng.random_bool(0.9) { 0 } else { rng.random_range(0..16) })
            .collect();
        let spec = ModelSpec::with_alphabet(16);
        let enc = entropy_encode(&data, spec).unwrap();
        assert!(enc.len() < data.len() * 4 / 8);
        assert_eq!(entropy_decode(&enc, spec).unwrap(), data);
    }

    #[test]
    fn truncated_payload_is_detected() {
        let data: Vec<u8> = (0..1000u32).map(|i| (i * 7 % 251) as u8).collect();
        let mut enc = entropy_encode(&data, ModelSpec::BYTES).unwrap();
        enc.truncate(enc.len() - 1);
        assert!(matches!(
            entropy_decode(&enc, ModelSpec::BYTES),
            Err(CodecError::Truncated(_))
        ));
    }

    #[test]
    fn rejects_out_of_alphabet_symbols() {
        assert!(entropy_encode(&[3], ModelSpec::with_alphabet(3)).is_err());
    }

    #[test]
    fn carry_propagation_stress() {
        // Long runs of the most probable symbol followed by rare ones push
        // `low` across byte boundaries repeatedly.
        let mut data = Vec::new();
        for i in 0..200 {
            data.extend(std::iter::repeat_n(255u8, 500 + i));
            data.push((i % 255) as u8);
        }
        for spec in [ModelSpec::BYTES, ModelSpec::local(256, 64)] {
            let enc = entropy_encode(&data, spec).unwrap();
            assert_eq!(entropy_decode(&enc, spec).unwrap(), data);
        }
    }

    proptest! {
        #[test]
        fn roundtrip(data in prop::collection::vec(any::<u8>(), 0..4000), window in 8u32..5000) {
            for spec in [ModelSpec::BYTES, ModelSpec::local(256, window)] {
                let enc = entropy_encode(&data, spec).unwrap();
                prop_assert_eq!(entropy_decode(&enc, spec).unwrap(), data.clone());
            }
        }
    }
}
