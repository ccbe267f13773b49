//! The `.locogs` container: scene encode/decode and its byte layout.
//!
//! See `docs/FORMAT.md` for the byte-level description.

use std::path::Path;

use half::f16;
use rayon::prelude::*;
use serde::Serialize;

use super::entropy::{entropy_decode_at, entropy_encode, ModelSpec};
use super::morton::{position_key, MORTON_BITS};
use super::octree::{octree_decode, octree_encode};
use super::quant::{quantize, QuantSpec};
use super::reinterpret::{reinterpret_pos, reinterpret_pos_inv};
use super::CodecError;
use crate::field::{FieldConfig, HashGridField, FIELD_CONFIG_BYTES};
use crate::math::to_f64_3;
use crate::model::{compose_attrs, split_attrs, ExplicitAttrs, PositionPrecision, SplatScene, MAX_SH_DEGREE};

pub const MAGIC: &[u8; 6] = b"LOCOGS";
pub const VERSION: u16 = 1;

/// Model for per-Gaussian attribute codes. The short memory lets the coder
/// follow colours and scales as they drift along the Morton curve.
fn attribute_model(bits: u8) -> ModelSpec {
    ModelSpec::local(1 << bits.min(8), 256)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamKind {
    Position = 1,
    Color = 2,
    Scale = 3,
    Mask = 4,
    Hash = 5,
    Mlp = 6,
}

impl StreamKind {
    pub const ALL: [StreamKind; 6] = [
        StreamKind::Position,
        StreamKind::Color,
        StreamKind::Scale,
        StreamKind::Mask,
        StreamKind::Hash,
        StreamKind::Mlp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StreamKind::Position => "position",
            StreamKind::Color => "color",
            StreamKind::Scale => "scale",
            StreamKind::Mask => "mask",
            StreamKind::Hash => "hash",
            StreamKind::Mlp => "mlp",
        }
    }

    fn from_tag(tag: u8) -> Result<Self, CodecError> {
        Self::ALL
            .into_iter()
            .find(|k| *k as u8 == tag)
            .ok_or_else(|| CodecError::Corrupt(format!("unknown stream kind {tag}")))
    }
}

/// Quantisation bit widths used at encode time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncodeOptions {
    pub theta_bits: u8,
    pub scale_bits: u8,
    pub color_bits: u8,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        Self {
            theta_bits: 6,
            scale_bits: 6,
            color_bits: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Header {
    pub version: u16,
    pub count: u64,
    pub field: FieldConfig,
    /// Quantiser of `ln γ`.
    pub scale: QuantSpec,
    /// One quantiser per colour channel of `k⁰`.
    pub color: [QuantSpec; 3],
    /// One quantiser per hash-grid level of `θ`.
    pub theta: Vec<QuantSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stream {
    pub kind: StreamKind,
    /// Checksum as recorded in the container; verified when the stream is
    /// decoded.
    pub crc: u32,
    pub payload: Vec<u8>,
}

impl Stream {
    fn new(kind: StreamKind, payload: Vec<u8>) -> Self {
        Self {
            kind,
            crc: crc32fast::hash(&payload),
            payload,
        }
    }

    /// Framed size: kind, length, checksum and payload.
    pub fn size(&self) -> usize {
        9 + self.payload.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressedScene {
    pub header: Header,
    pub streams: Vec<Stream>,
}

/// Per-category byte counts of a container.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct StorageStats {
    pub position: usize,
    pub color: usize,
    pub scale: usize,
    pub mask: usize,
    #[serde(rename = "hash+mlp")]
    pub hash_mlp: usize,
    /// Magic, version, header block, header checksum and stream count.
    pub header: usize,
    /// Sum of the five stream categories: container size minus `header`.
    pub total: usize,
}

fn gaussian_order(ints: &[[i32; 3]], positions: &[[f32; 3]]) -> Vec<usize> {
    let keys: Vec<u64> = positions.iter().map(|&p| position_key(p, MORTON_BITS)).collect();
    let mut order: Vec<usize> = (0..ints.len()).collect();
    order.sort_by(|&a, &b| keys[a].cmp(&keys[b]).then(ints[a].cmp(&ints[b])));
    order
}

fn half_position(p: [f32; 3], index: usize) -> Result<[f16; 3], CodecError> {
    let h = p.map(f16::from_f32);
    if h.iter().any(|v| !v.is_finite()) {
        return Err(CodecError::Range(format!(
            "position {p:?} of Gaussian {index} overflows half precision"
        )));
    }
    Ok(h)
}

fn encode_codes(codes: &[u16], spec: ModelSpec) -> Result<Vec<u8>, CodecError> {
    let bytes: Vec<u8> = codes.iter().map(|&c| c as u8).collect();
    entropy_encode(&bytes, spec)
}

fn pack_bandwidths(bw: &[u8]) -> Vec<u8> {
    bw.chunks(4)
        .map(|c| c.iter().enumerate().fold(0u8, |acc, (i, &b)| acc | (b << (2 * i))))
        .collect()
}

fn unpack_bandwidths(packed: &[u8], n: usize) -> Vec<u8> {
    (0..n).map(|i| (packed[i / 4] >> (2 * (i % 4))) & 3).collect()
}

/// Splits `f32` values into four byte planes (lowest byte first) so that
/// exponent bytes sit next to each other.
fn shuffle_f32(values: &[f64]) -> Vec<u8> {
    let words: Vec<[u8; 4]> = values.iter().map(|&v| (v as f32).to_le_bytes()).collect();
    (0..4).flat_map(|plane| words.iter().map(move |w| w[plane])).collect()
}

fn unshuffle_f32(bytes: &[u8], n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| f32::from_le_bytes([bytes[i], bytes[n + i], bytes[2 * n + i], bytes[3 * n + i]]) as f64)
        .collect()
}

/// Quantizes base colours channel by channel and entropy codes the codes in
/// the given order, as the colour stream of a container.
pub fn color_stream(colors: &[[f64; 3]], bits: u8) -> Result<(Vec<u8>, [QuantSpec; 3]), CodecError> {
    if bits > 8 {
        return Err(CodecError::Range("stored codes are limited to 8 bits".into()));
    }
    let mut out = Vec::new();
    let mut specs = Vec::with_capacity(3);
    for c in 0..3 {
        let v: Vec<f64> = colors.iter().map(|k| k[c]).collect();
        let (codes, spec) = quantize(&v, bits)?;
        out.extend(encode_codes(&codes, attribute_model(bits))?);
        specs.push(spec);
    }
    Ok((out, [specs[0], specs[1], specs[2]]))
}

/// Encodes a scene and its field. Positions are rounded to half precision
/// first; everything after that is lossless except the quantised `γ`, `k⁰`
/// and `θ` and the `f32` rounding of the MLP weights.
pub fn encode_scene(
    scene: &SplatScene,
    field: &HashGridField,
    options: &EncodeOptions,
) -> Result<CompressedScene, CodecError> {
    scene.validate().map_err(|e| CodecError::Range(e.to_string()))?;
    if scene.max_bandwidth() as usize > MAX_SH_DEGREE {
        return Err(CodecError::Range("bandwidth above 3".into()));
    }
    let n = scene.len();
    let halves = scene
        .gaussians
        .iter()
        .enumerate()
        .map(|(i, g)| half_position(g.position, i))
        .collect::<Result<Vec<_>, _>>()?;
    let ints = halves.iter().map(|&h| reinterpret_pos(h)).collect::<Result<Vec<_>, _>>()?;
    let rounded: Vec<[f32; 3]> = halves.iter().map(|h| h.map(|v| v.to_f32())).collect();
    let order = gaussian_order(&ints, &rounded);

    let explicit = order
        .iter()
        .map(|&i| split_attrs(&scene.gaussians[i]).map(|(e, _)| e))
        .collect::<Result<Vec<ExplicitAttrs>, _>>()
        .map_err(|e| CodecError::Range(e.to_string()))?;

    let log_gamma: Vec<f64> = explicit.iter().map(|e| (e.base_scale as f64).ln()).collect();
    let (scale_codes, scale_spec) = quantize(&log_gamma, options.scale_bits)?;
    let base_colors: Vec<[f64; 3]> = explicit.iter().map(|e| to_f64_3(e.base_color)).collect();
    let level_sizes = field.level_param_counts();
    let mut theta_specs = Vec::with_capacity(level_sizes.len());
    let mut theta_codes = Vec::with_capacity(level_sizes.len());
    let mut start = 0;
    for len in level_sizes {
        let (codes, spec) = quantize(&field.theta[start..start + len], options.theta_bits)?;
        theta_codes.push(codes);
        theta_specs.push(spec);
        start += len;
    }

    if options.color_bits > 8 || options.scale_bits > 8 || options.theta_bits > 8 {
        return Err(CodecError::Range("stored codes are limited to 8 bits".into()));
    }
    let scale_model = attribute_model(options.scale_bits);
    let (color_bytes, color_specs) = color_stream(&base_colors, options.color_bits)?;
    let theta_model = ModelSpec::with_alphabet(1 << options.theta_bits);

    let sorted_ints: Vec<[i32; 3]> = order.iter().map(|&i| ints[i]).collect();
    let bandwidths: Vec<u8> = explicit.iter().map(|e| e.bandwidth).collect();
    let jobs: Vec<StreamKind> = StreamKind::ALL.to_vec();
    let payloads = jobs
        .par_iter()
        .map(|kind| -> Result<Vec<u8>, CodecError> {
            match kind {
                StreamKind::Position => octree_encode(&sorted_ints),
                StreamKind::Color => Ok(color_bytes.clone()),
                StreamKind::Scale => encode_codes(&scale_codes, scale_model),
                StreamKind::Mask => entropy_encode(&pack_bandwidths(&bandwidths), ModelSpec::BYTES),
                StreamKind::Hash => {
                    let mut out = Vec::new();
                    for codes in &theta_codes {
                        out.extend(encode_codes(codes, theta_model)?);
                    }
                    Ok(out)
                }
                StreamKind::Mlp => entropy_encode(&shuffle_f32(&field.heads), ModelSpec::BYTES),
            }
        })
        .collect::<Result<Vec<_>, _>>()?;

    Ok(CompressedScene {
        header: Header {
            version: VERSION,
            count: n as u64,
            field: field.config,
            scale: scale_spec,
            color: color_specs,
            theta: theta_specs,
        },
        streams: jobs.into_iter().zip(payloads).map(|(k, p)| Stream::new(k, p)).collect(),
    })
}

impl CompressedScene {
    fn stream(&self, kind: StreamKind) -> Result<&[u8], CodecError> {
        let s = self
            .streams
            .iter()
            .find(|s| s.kind == kind)
            .ok_or_else(|| CodecError::Corrupt(format!("missing {} stream", kind.name())))?;
        if crc32fast::hash(&s.payload) != s.crc {
            return Err(CodecError::Checksum { stream: kind.name() });
        }
        Ok(&s.payload)
    }

    fn count(&self) -> usize {
        self.header.count as usize
    }

    /// Decoded positions in stream order (the encoder's association order).
    pub fn decode_positions(&self) -> Result<Vec<[f32; 3]>, CodecError> {
        let ints = octree_decode(self.stream(StreamKind::Position)?)?;
        if ints.len() != self.count() {
            return Err(CodecError::Corrupt(format!(
                "position stream holds {} points, header says {}",
                ints.len(),
                self.count()
            )));
        }
        let positions = ints
            .iter()
            .map(|&q| reinterpret_pos_inv(q).map(|h| h.map(|v| v.to_f32())))
            .collect::<Result<Vec<_>, _>>()?;
        let order = gaussian_order(&ints, &positions);
        Ok(order.into_iter().map(|i| positions[i]).collect())
    }

    pub fn decode_colors(&self) -> Result<Vec<[f32; 3]>, CodecError> {
        let data = self.stream(StreamKind::Color)?;
        let mut pos = 0;
        let mut out = vec![[0f32; 3]; self.count()];
        for c in 0..3 {
            let spec = &self.header.color[c];
            let model = attribute_model(spec.bits);
            let codes = entropy_decode_at(data, &mut pos, model)?;
            if codes.len() != out.len() {
                return Err(CodecError::Corrupt("colour count mismatch".into()));
            }
            for (o, &code) in out.iter_mut().zip(&codes) {
                o[c] = spec.decode(code as u16) as f32;
            }
        }
        expect_end(data, pos, "color")?;
        Ok(out)
    }

    /// Decoded base scales `γ`.
    pub fn decode_scales(&self) -> Result<Vec<f32>, CodecError> {
        let data = self.stream(StreamKind::Scale)?;
        let spec = &self.header.scale;
        let mut pos = 0;
        let codes = entropy_decode_at(data, &mut pos, attribute_model(spec.bits))?;
        expect_end(data, pos, "scale")?;
        if codes.len() != self.count() {
            return Err(CodecError::Corrupt("scale count mismatch".into()));
        }
        Ok(codes.iter().map(|&c| spec.decode(c as u16).exp() as f32).collect())
    }

    pub fn decode_bandwidths(&self) -> Result<Vec<u8>, CodecError> {
        let data = self.stream(StreamKind::Mask)?;
        let mut pos = 0;
        let packed = entropy_decode_at(data, &mut pos, ModelSpec::BYTES)?;
        expect_end(data, pos, "mask")?;
        if packed.len() != self.count().div_ceil(4) {
            return Err(CodecError::Corrupt("bandwidth count mismatch".into()));
        }
        Ok(unpack_bandwidths(&packed, self.count()))
    }

    pub fn decode_field(&self) -> Result<HashGridField, CodecError> {
        let mut field = HashGridField::zeros(self.header.field).map_err(|e| CodecError::Corrupt(e.to_string()))?;
        let sizes = field.level_param_counts();
        if sizes.len() != self.header.theta.len() {
            return Err(CodecError::Corrupt("hash level count mismatch".into()));
        }
        let data = self.stream(StreamKind::Hash)?;
        let mut pos = 0;
        let mut start = 0;
        for (len, spec) in sizes.into_iter().zip(&self.header.theta) {
            let codes = entropy_decode_at(data, &mut pos, ModelSpec::with_alphabet(1 << spec.bits.min(8)))?;
            if codes.len() != len {
                return Err(CodecError::Corrupt("hash level size mismatch".into()));
            }
            for (t, &c) in field.theta[start..start + len].iter_mut().zip(&codes) {
                *t = spec.decode(c as u16);
            }
            start += len;
        }
        expect_end(data, pos, "hash")?;

        let data = self.stream(StreamKind::Mlp)?;
        let mut pos = 0;
        let bytes = entropy_decode_at(data, &mut pos, ModelSpec::BYTES)?;
        expect_end(data, pos, "mlp")?;
        if bytes.len() != 4 * field.heads.len() {
            return Err(CodecError::Corrupt("MLP weight count mismatch".into()));
        }
        field.heads = unshuffle_f32(&bytes, field.heads.len());
        Ok(field)
    }

    /// Explicit attributes in stream order.
    pub fn decode_explicit(&self) -> Result<Vec<ExplicitAttrs>, CodecError> {
        let positions = self.decode_positions()?;
        let colors = self.decode_colors()?;
        let scales = self.decode_scales()?;
        let bandwidths = self.decode_bandwidths()?;
        Ok((0..self.count())
            .map(|i| ExplicitAttrs {
                position: positions[i],
                base_scale: scales[i],
                base_color: colors[i],
                bandwidth: bandwidths[i],
            })
            .collect())
    }

    pub fn stats(&self) -> StorageStats {
        let size = |k: StreamKind| self.streams.iter().filter(|s| s.kind == k).map(Stream::size).sum();
        let header = MAGIC.len() + 2 + 4 + self.header_bytes().len() + 4 + 1;
        let mut s = StorageStats {
            position: size(StreamKind::Position),
            color: size(StreamKind::Color),
            scale: size(StreamKind::Scale),
            mask: size(StreamKind::Mask),
            hash_mlp: size(StreamKind::Hash) + size(StreamKind::Mlp),
            header,
            total: 0,
        };
        s.total = s.position + s.color + s.scale + s.mask + s.hash_mlp;
        s
    }

    fn header_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::new();
        out.extend_from_slice(&h.count.to_le_bytes());
        out.extend(h.field.to_bytes());
        h.scale.write(&mut out);
        for c in &h.color {
            c.write(&mut out);
        }
        out.extend_from_slice(&(h.theta.len() as u16).to_le_bytes());
        for t in &h.theta {
            t.write(&mut out);
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = self.header_bytes();
        let stats = self.stats();
        let mut out = Vec::with_capacity(stats.total + stats.header);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.header.version.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&crc32fast::hash(&header).to_le_bytes());
        out.push(self.streams.len() as u8);
        for s in &self.streams {
            out.push(s.kind as u8);
            out.extend_from_slice(&(s.payload.len() as u32).to_le_bytes());
            out.extend_from_slice(&s.crc.to_le_bytes());
            out.extend_from_slice(&s.payload);
        }
        out
    }

    /// Parses the container framing and header. Stream checksums are only
    /// checked when the stream is decoded.
    pub fn from_bytes(b: &[u8]) -> Result<Self, CodecError> {
        let mut pos = 0;
        let mut take = |n: usize, what: &'static str| -> Result<&[u8], CodecError> {
            let s = b.get(pos..pos + n).ok_or(CodecError::Truncated(what))?;
            pos += n;
            Ok(s)
        };
        if take(6, "magic")? != MAGIC {
            return Err(CodecError::Magic);
        }
        let version = u16::from_le_bytes(take(2, "version")?.try_into().unwrap());
        if version != VERSION {
            return Err(CodecError::Version { found: version, expected: VERSION });
        }
        let hlen = u32::from_le_bytes(take(4, "header length")?.try_into().unwrap()) as usize;
        let hb = take(hlen, "header")?.to_vec();
        let crc = u32::from_le_bytes(take(4, "header checksum")?.try_into().unwrap());
        if crc32fast::hash(&hb) != crc {
            return Err(CodecError::Checksum { stream: "header" });
        }
        let header = parse_header(&hb, version)?;
        let n_streams = take(1, "stream count")?[0];
        let mut streams = Vec::with_capacity(n_streams as usize);
        for _ in 0..n_streams {
            let kind = StreamKind::from_tag(take(1, "stream kind")?[0])?;
            let len = u32::from_le_bytes(take(4, "stream length")?.try_into().unwrap()) as usize;
            let crc = u32::from_le_bytes(take(4, "stream checksum")?.try_into().unwrap());
            let payload = take(len, "stream payload")?.to_vec();
            streams.push(Stream { kind, crc, payload });
        }
        if pos != b.len() {
            return Err(CodecError::Corrupt("trailing bytes after last stream".into()));
        }
        Ok(Self { header, streams })
    }

    pub fn save(&self, path: &Path) -> Result<(), CodecError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CodecError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn expect_end(data: &[u8], pos: usize, stream: &str) -> Result<(), CodecError> {
    if pos != data.len() {
        return Err(CodecError::Corrupt(format!("trailing bytes in {stream} stream")));
    }
    Ok(())
}

fn parse_header(b: &[u8], version: u16) -> Result<Header, CodecError> {
    if b.len() < 8 + FIELD_CONFIG_BYTES {
        return Err(CodecError::Truncated("header"));
    }
    let count = u64::from_le_bytes(b[0..8].try_into().unwrap());
    let field = FieldConfig::from_bytes(&b[8..8 + FIELD_CONFIG_BYTES]).map_err(|e| CodecError::Corrupt(e.to_string()))?;
    let mut pos = 8 + FIELD_CONFIG_BYTES;
    let scale = QuantSpec::read(b, &mut pos)?;
    let color = [QuantSpec::read(b, &mut pos)?, QuantSpec::read(b, &mut pos)?, QuantSpec::read(b, &mut pos)?];
    let levels = b.get(pos..pos + 2).ok_or(CodecError::Truncated("header"))?;
    let levels = u16::from_le_bytes(levels.try_into().unwrap());
    pos += 2;
    let theta = (0..levels).map(|_| QuantSpec::read(b, &mut pos)).collect::<Result<Vec<_>, _>>()?;
    if pos != b.len() {
        return Err(CodecError::Corrupt("trailing bytes in header".into()));
    }
    Ok(Header { version, count, field, scale, color, theta })
}

/// Decodes a container into an explicit scene (all attributes materialised
/// through the field) and the field itself.
pub fn decode_scene(cs: &CompressedScene) -> Result<(SplatScene, HashGridField), CodecError> {
    let explicit = cs.decode_explicit()?;
    let field = cs.decode_field()?;
    let gaussians = explicit
        .par_iter()
        .map(|e| {
            let implicit = field.eval_implicit(to_f64_3(e.position), e.bandwidth);
            compose_attrs(e, &implicit).map_err(|err| CodecError::Corrupt(err.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut scene = SplatScene::new(gaussians);
    scene.position_precision = PositionPrecision::Half;
    Ok((scene, field))
}
