//! Binary little-endian PLY in the de-facto 3DGS splat layout.
//!
//! On disk opacity is a logit, scale is a log and rotation is an
//! unnormalised quaternion; in memory all three are activated. The writer
//! picks, for every activated value, a raw `f32` that the reader maps back to
//! exactly the same activated value, so `read ∘ write` is the identity. When
//! no such `f32` exists for some value the opacity and scale columns are
//! written as `double` instead.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{sh_coeff_count, Gaussian, PositionPrecision, SplatScene, MAX_SH_DEGREE};
use crate::math::{logit, sigmoid};

#[derive(Debug, Error)]
pub enum PlyError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("field count mismatch: {0}")]
    FieldCount(String),
    #[error("record {index}: non-finite value in `{field}`")]
    NonFinite { index: usize, field: String },
    #[error("record {index}: {reason}")]
    Invalid { index: usize, reason: String },
    #[error("body truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
}

/// PLY scalar property types.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScalarKind {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarKind {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Self::I8 => "char",
            Self::U8 => "uchar",
            Self::I16 => "short",
            Self::U16 => "ushort",
            Self::I32 => "int",
            Self::U32 => "uint",
            Self::F32 => "float",
            Self::F64 => "double",
        }
    }

    pub fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

/// An unrecognised vertex property, carried through as raw bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtraProperty {
    pub name: String,
    pub kind: ScalarKind,
    /// `len * kind.size()` little-endian bytes.
    pub data: Vec<u8>,
}

impl ExtraProperty {
    pub(crate) fn select(&self, indices: &[usize]) -> ExtraProperty {
        let w = self.kind.size();
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            data.extend_from_slice(&self.data[i * w..(i + 1) * w]);
        }
        ExtraProperty {
            name: self.name.clone(),
            kind: self.kind,
            data,
        }
    }
}

struct Element {
    name: String,
    count: usize,
    props: Vec<(String, ScalarKind)>,
}

impl Element {
    fn row_size(&self) -> usize {
        self.props.iter().map(|(_, k)| k.size()).sum()
    }
}

struct Header {
    elements: Vec<Element>,
    comments: Vec<String>,
}

fn parse_header(reader: &mut impl BufRead) -> Result<Header, PlyError> {
    let mut line = String::new();
    let mut next_line = |line: &mut String| -> Result<(), PlyError> {
        line.clear();
        if reader.read_line(line)? == 0 {
            return Err(PlyError::Header("unexpected end of file".into()));
        }
        Ok(())
    };
    next_line(&mut line)?;
    if line.trim_end() != "ply" {
        return Err(PlyError::Header("missing `ply` magic".into()));
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut comments = Vec::new();
    let mut format_seen = false;
    loop {
        next_line(&mut line)?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        let mut words = trimmed.split_whitespace();
        match words.next() {
            Some("format") => {
                let fmt = words.next().unwrap_or_default();
                if fmt != "binary_little_endian" {
                    return Err(PlyError::Header(format!("unsupported format `{fmt}`")));
                }
                format_seen = true;
            }
            Some("comment") => {
                let text = trimmed.strip_prefix("comment").unwrap_or("").trim_start();
                comments.push(text.to_string());
            }
            Some("obj_info") => {}
            Some("element") => {
                let name = words.next().ok_or_else(|| PlyError::Header("unnamed element".into()))?;
                let count = words
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| PlyError::Header(format!("bad count for element `{name}`")))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            Some("property") => {
                let ty = words.next().unwrap_or_default();
                if ty == "list" {
                    return Err(PlyError::Header("list properties are not supported".into()));
                }
                let kind = ScalarKind::parse(ty)
                    .ok_or_else(|| PlyError::Header(format!("unknown property type `{ty}`")))?;
                let name = words.next().ok_or_else(|| PlyError::Header("unnamed property".into()))?;
                let element = elements
                    .last_mut()
                    .ok_or_else(|| PlyError::Header("property before element".into()))?;
                element.props.push((name.to_string(), kind));
            }
            Some("end_header") => break,
            Some(other) => return Err(PlyError::Header(format!("unexpected keyword `{other}`"))),
            None => {}
        }
    }
    if !format_seen {
        return Err(PlyError::Header("missing format line".into()));
    }
    Ok(Header { elements, comments })
}

/// Locates the vertex element and returns it with the byte offset of its
/// first row within the body.
fn vertex_element(header: &Header) -> Result<(&Element, usize), PlyError> {
    let mut offset = 0;
    for e in &header.elements {
        if e.name == "vertex" {
            return Ok((e, offset));
        }
        offset += e.count * e.row_size();
    }
    Err(PlyError::Header("no vertex element".into()))
}

fn read_body(reader: &mut impl Read, needed: usize) -> Result<Vec<u8>, PlyError> {
    let mut body = Vec::with_capacity(needed);
    reader.read_to_end(&mut body)?;
    if body.len() < needed {
        return Err(PlyError::Truncated {
            expected: needed,
            actual: body.len(),
        });
    }
    Ok(body)
}

struct Columns<'a> {
    element: &'a Element,
    offsets: Vec<usize>,
    row: usize,
}

impl<'a> Columns<'a> {
    fn new(element: &'a Element) -> Self {
        let mut offsets = Vec::with_capacity(element.props.len());
        let mut acc = 0;
        for (_, k) in &element.props {
            offsets.push(acc);
            acc += k.size();
        }
        Self {
            element,
            offsets,
            row: acc,
        }
    }

    fn find(&self, name: &str) -> Option<usize> {
        self.element.props.iter().position(|(n, _)| n == name)
    }

    fn require(&self, name: &str) -> Result<usize, PlyError> {
        self.find(name)
            .ok_or_else(|| PlyError::Header(format!("missing vertex property `{name}`")))
    }

    fn value(&self, rows: &[u8], record: usize, col: usize) -> f64 {
        let start = record * self.row + self.offsets[col];
        self.element.props[col].1.read(&rows[start..])
    }
}

fn degree_for_rest_count(n: usize) -> Option<usize> {
    (0..=MAX_SH_DEGREE).find(|&d| 3 * (sh_coeff_count(d) - 1) == n)
}

/// Quaternion normalisation that leaves already-unit inputs untouched, so it
/// is idempotent on its own output.
fn normalize_rotation(r: [f64; 4]) -> Option<[f32; 4]> {
    let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(n > 0.0) {
        return None;
    }
    if (n - 1.0).abs() <= 1e-6 {
        Some(r.map(|v| v as f32))
    } else {
        Some(r.map(|v| (v / n) as f32))
    }
}

/// Reads a splat scene from a PLY byte stream.
pub fn read_ply(reader: impl Read) -> Result<SplatScene, PlyError> {
    let mut reader = BufReader::new(reader);
    let header = parse_header(&mut reader)?;
    let (vertex, offset) = vertex_element(&header)?;
    let cols = Columns::new(vertex);
    let n = vertex.count;
    let body = read_body(&mut reader, offset + n * cols.row)?;
    let rows = &body[offset..offset + n * cols.row];

    let pos = [cols.require("x")?, cols.require("y")?, cols.require("z")?];
    let opacity = cols.require("opacity")?;
    let scale = [
        cols.require("scale_0")?,
        cols.require("scale_1")?,
        cols.require("scale_2")?,
    ];
    let rot = [
        cols.require("rot_0")?,
        cols.require("rot_1")?,
        cols.require("rot_2")?,
        cols.require("rot_3")?,
    ];
    let dc = [
        cols.require("f_dc_0")?,
        cols.require("f_dc_1")?,
        cols.require("f_dc_2")?,
    ];
    let rest_count = vertex
        .props
        .iter()
        .filter(|(name, _)| name.starts_with("f_rest_"))
        .count();
    let file_degree = degree_for_rest_count(rest_count).ok_or_else(|| {
        PlyError::FieldCount(format!("{rest_count} f_rest properties is not a full SH degree"))
    })?;
    let rest: Vec<usize> = (0..rest_count)
        .map(|i| cols.require(&format!("f_rest_{i}")))
        .collect::<Result<_, _>>()?;
    let bandwidth_col = cols.find("sh_bandwidth");

    let mut known: Vec<usize> = pos.to_vec();
    known.extend([opacity]);
    known.extend(scale);
    known.extend(rot);
    known.extend(dc);
    known.extend(&rest);
    known.extend(bandwidth_col);

    let per_channel = sh_coeff_count(file_degree) - 1;
    let mut gaussians = Vec::with_capacity(n);
    for index in 0..n {
        let v = |col: usize| cols.value(rows, index, col);
        let check = |col: usize| -> Result<f64, PlyError> {
            let x = v(col);
            if x.is_finite() {
                Ok(x)
            } else {
                Err(PlyError::NonFinite {
                    index,
                    field: vertex.props[col].0.clone(),
                })
            }
        };
        let position = [check(pos[0])? as f32, check(pos[1])? as f32, check(pos[2])? as f32];
        let raw_opacity = check(opacity)?;
        let raw_scale = [check(scale[0])?, check(scale[1])?, check(scale[2])?];
        let raw_rot = [check(rot[0])?, check(rot[1])?, check(rot[2])?, check(rot[3])?]
            .map(|x| x as f32 as f64);
        let bandwidth = match bandwidth_col {
            Some(col) => {
                let b = check(col)?;
                if b < 0.0 || b > file_degree as f64 {
                    return Err(PlyError::Invalid {
                        index,
                        reason: format!("sh_bandwidth {b} exceeds stored degree {file_degree}"),
                    });
                }
                b as u8
            }
            None => file_degree as u8,
        };
        let mut sh = Vec::with_capacity(sh_coeff_count(bandwidth as usize));
        sh.push([check(dc[0])? as f32, check(dc[1])? as f32, check(dc[2])? as f32]);
        for j in 1..sh_coeff_count(bandwidth as usize) {
            let mut c = [0.0f32; 3];
            for (ch, slot) in c.iter_mut().enumerate() {
                *slot = check(rest[ch * per_channel + j - 1])? as f32;
            }
            sh.push(c);
        }
        for &col in &rest {
            check(col)?;
        }
        let rotation = normalize_rotation(raw_rot).ok_or_else(|| PlyError::Invalid {
            index,
            reason: "zero-length rotation quaternion".into(),
        })?;
        gaussians.push(Gaussian {
            position,
            opacity: activate_opacity(raw_opacity),
            scale: raw_scale.map(activate_scale),
            rotation,
            sh,
            bandwidth,
        });
    }

    let extra = vertex
        .props
        .iter()
        .enumerate()
        .filter(|(i, _)| !known.contains(i))
        .map(|(col, (name, kind))| {
            let w = kind.size();
            let mut data = Vec::with_capacity(n * w);
            for r in 0..n {
                let start = r * cols.row + cols.offsets[col];
                data.extend_from_slice(&rows[start..start + w]);
            }
            ExtraProperty {
                name: name.clone(),
                kind: *kind,
                data,
            }
        })
        .collect();

    let mut scene = SplatScene {
        gaussians,
        extra,
        ..Default::default()
    };
    let mut free = 0;
    for c in header.comments {
        match c.split_once('=') {
            Some((k, v)) => {
                scene.metadata.insert(k.to_string(), v.to_string());
            }
            None => {
                scene.metadata.insert(format!("comment{free}"), c);
                free += 1;
            }
        }
    }
    if scene.metadata.remove(PRECISION_KEY).as_deref() == Some("half") && scene.positions_are_half() {
        scene.position_precision = PositionPrecision::Half;
    }
    Ok(scene)
}

const PRECISION_KEY: &str = "position_precision";

pub fn load_ply(path: impl AsRef<Path>) -> Result<SplatScene, PlyError> {
    read_ply(File::open(path)?)
}

fn activate_opacity(raw: f64) -> f32 {
    sigmoid(raw) as f32
}

fn activate_scale(raw: f64) -> f32 {
    raw.exp() as f32
}

/// Finds a raw `f32` whose activation is bit-identical to `target`, starting
/// from `guess` and walking monotonically. Falls back to the closest
/// candidate when the activation skips over `target`.
fn invert_exact(target: f32, guess: f32, activate: impl Fn(f64) -> f32) -> f32 {
    let activate = |x: f32| activate(x as f64);
    let hit = activate(guess);
    if hit == target {
        return guess;
    }
    let up = hit < target;
    let mut best = guess;
    let mut best_err = (hit as f64 - target as f64).abs();
    let mut x = guess;
    for _ in 0..4096 {
        x = if up { x.next_up() } else { x.next_down() };
        let y = activate(x);
        let err = (y as f64 - target as f64).abs();
        if y == target {
            return x;
        }
        if err < best_err {
            best = x;
            best_err = err;
        }
        if (up && y > target) || (!up && y < target) {
            break;
        }
    }
    best
}

fn raw_opacity_f64(o: f32) -> f64 {
    match o {
        0.0 => -800.0,
        1.0 => 800.0,
        _ => logit(o as f64),
    }
}

fn raw_opacity(o: f32) -> f32 {
    let guess = raw_opacity_f64(o).clamp(-110.0, 40.0) as f32;
    invert_exact(o, guess, activate_opacity)
}

fn raw_scale(s: f32) -> f32 {
    invert_exact(s, (s as f64).ln() as f32, activate_scale)
}

/// Raw opacity and log-scales for one Gaussian, at the precision the file
/// will use.
enum RawActivated {
    Single([f32; 4]),
    Double([f64; 4]),
}

/// Chooses `float` storage when every activated value survives it exactly,
/// `double` otherwise (some opacities near 0 have no exact `f32` logit).
fn raw_activated(scene: &SplatScene) -> Vec<RawActivated> {
    let single: Vec<[f32; 4]> = scene
        .gaussians
        .iter()
        .map(|g| {
            let s = g.scale.map(raw_scale);
            [raw_opacity(g.opacity), s[0], s[1], s[2]]
        })
        .collect();
    let exact = scene.gaussians.iter().zip(&single).all(|(g, r)| {
        activate_opacity(r[0] as f64) == g.opacity
            && (0..3).all(|a| activate_scale(r[a + 1] as f64) == g.scale[a])
    });
    if exact {
        single.into_iter().map(RawActivated::Single).collect()
    } else {
        scene
            .gaussians
            .iter()
            .map(|g| {
                let s = g.scale.map(|v| (v as f64).ln());
                RawActivated::Double([raw_opacity_f64(g.opacity), s[0], s[1], s[2]])
            })
            .collect()
    }
}

/// Writes a splat scene as binary little-endian PLY.
pub fn write_ply(scene: &SplatScene, writer: impl Write) -> Result<(), PlyError> {
    let mut w = BufWriter::new(writer);
    let n = scene.len();
    let degree = scene.max_bandwidth() as usize;
    let per_channel = sh_coeff_count(degree) - 1;
    let mixed = scene.gaussians.iter().any(|g| g.bandwidth as usize != degree);
    let raw = raw_activated(scene);
    let activated_ty = match raw.first() {
        Some(RawActivated::Double(_)) => "double",
        _ => "float",
    };

    writeln!(w, "ply")?;
    writeln!(w, "format binary_little_endian 1.0")?;
    if scene.position_precision == PositionPrecision::Half {
        writeln!(w, "comment {PRECISION_KEY}=half")?;
    }
    for (k, v) in &scene.metadata {
        writeln!(w, "comment {k}={v}")?;
    }
    writeln!(w, "element vertex {n}")?;
    for name in ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"] {
        writeln!(w, "property float {name}")?;
    }
    for i in 0..3 * per_channel {
        writeln!(w, "property float f_rest_{i}")?;
    }
    for name in ["opacity", "scale_0", "scale_1", "scale_2"] {
        writeln!(w, "property {activated_ty} {name}")?;
    }
    for name in ["rot_0", "rot_1", "rot_2", "rot_3"] {
        writeln!(w, "property float {name}")?;
    }
    if mixed {
        writeln!(w, "property uchar sh_bandwidth")?;
    }
    for e in &scene.extra {
        writeln!(w, "property {} {}", e.kind.name(), e.name)?;
    }
    writeln!(w, "end_header")?;

    for (i, (g, raw)) in scene.gaussians.iter().zip(&raw).enumerate() {
        let mut put = |v: f32| w.write_all(&v.to_le_bytes());
        for v in g.position {
            put(v)?;
        }
        for v in g.sh[0] {
            put(v)?;
        }
        for ch in 0..3 {
            for j in 1..=per_channel {
                put(g.sh.get(j).map_or(0.0, |c| c[ch]))?;
            }
        }
        match raw {
            RawActivated::Single(v) => v.iter().try_for_each(|&x| put(x))?,
            RawActivated::Double(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes()))?,
        }
        let mut put = |v: f32| w.write_all(&v.to_le_bytes());
        for r in g.rotation {
            put(r)?;
        }
        if mixed {
            w.write_all(&[g.bandwidth])?;
        }
        for e in &scene.extra {
            let sz = e.kind.size();
            w.write_all(&e.data[i * sz..(i + 1) * sz])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_ply(scene: &SplatScene, path: impl AsRef<Path>) -> Result<(), PlyError> {
    write_ply(scene, File::create(path)?)
}

/// Coloured point cloud, e.g. the output of dense initialisation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<[f32; 3]>,
    /// Linear RGB in `[0, 1]`.
    pub colors: Vec<[f32; 3]>,
}

/// Writes positions as `float` and colours as `uchar` RGB.
pub fn save_point_cloud(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<(), PlyError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "ply")?;
    writeln!(w, "format binary_little_endian 1.0")?;
    writeln!(w, "element vertex {}", cloud.positions.len())?;
    for name in ["x", "y", "z"] {
        writeln!(w, "property float {name}")?;
    }
    for name in ["red", "green", "blue"] {
        writeln!(w, "property uchar {name}")?;
    }
    writeln!(w, "end_header")?;
    for (p, c) in cloud.positions.iter().zip(&cloud.colors) {
        for v in p {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in c {
            w.write_all(&[(v.clamp(0.0, 1.0) * 255.0).round() as u8])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a point cloud; `uchar` colours are rescaled to `[0, 1]`, float
/// colours are taken as is, missing colours default to mid grey.
pub fn load_point_cloud(path: impl AsRef<Path>) -> Result<PointCloud, PlyError> {
    let mut reader = BufReader::new(File::open(path)?);
    let header = parse_header(&mut reader)?;
    let (vertex, offset) = vertex_element(&header)?;
    let cols = Columns::new(vertex);
    let body = read_body(&mut reader, offset + vertex.count * cols.row)?;
    let rows = &body[offset..];
    let pos = [cols.require("x")?, cols.require("y")?, cols.require("z")?];
    let rgb = ["red", "green", "blue"].map(|c| cols.find(c));
    let mut cloud = PointCloud::default();
    for index in 0..vertex.count {
        let mut p = [0.0f32; 3];
        for a in 0..3 {
            let v = cols.value(rows, index, pos[a]);
            if !v.is_finite() {
                return Err(PlyError::NonFinite {
                    index,
                    field: vertex.props[pos[a]].0.clone(),
                });
            }
            p[a] = v as f32;
        }
        let mut c = [0.5f32; 3];
        for a in 0..3 {
            if let Some(col) = rgb[a] {
                let v = cols.value(rows, index, col);
                c[a] = match vertex.props[col].1 {
                    ScalarKind::U8 => (v / 255.0) as f32,
                    _ => v as f32,
                };
            }
        }
        cloud.positions.push(p);
        cloud.colors.push(c);
    }
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn roundtrip(scene: &SplatScene) -> SplatScene {
        let mut buf = Vec::new();
        write_ply(scene, &mut buf).unwrap();
        read_ply(buf.as_slice()).unwrap()
    }

    fn header(rest: usize) -> String {
        let mut h = String::from("ply\nformat binary_little_endian 1.0\nelement vertex 1\n");
        for p in ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"] {
            h += &format!("property float {p}\n");
        }
        for i in 0..rest {
            h += &format!("property float f_rest_{i}\n");
        }
        for p in ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"] {
            h += &format!("property float {p}\n");
        }
        h + "end_header\n"
    }

    fn single(values: &[f32], rest: usize) -> Vec<u8> {
        let mut buf = header(rest).into_bytes();
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    #[test]
    fn activations_applied_on_load() {
        let bytes = single(&[1.0, 2.0, 3.0, 0.1, 0.2, 0.3, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0], 0);
        let scene = read_ply(bytes.as_slice()).unwrap();
        let g = &scene.gaussians[0];
        assert_eq!(g.opacity, 0.5);
        assert_eq!(g.scale, [1.0, 1.0, 1.0]);
        assert_eq!(g.rotation, [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(g.bandwidth, 0);
        assert_eq!(g.sh, vec![[0.1, 0.2, 0.3]]);
    }

    #[test]
    fn rejects_non_finite_with_record_index() {
        let mut v = vec![0.0f32; 14];
        v[10] = 1.0;
        v[6] = f32::NAN;
        let err = read_ply(single(&v, 0).as_slice()).unwrap_err();
        assert!(matches!(err, PlyError::NonFinite { index: 0, ref field } if field == "opacity"));
    }

    #[test]
    fn rejects_partial_sh_degree() {
        let err = read_ply(single(&[0.0; 14 + 5], 5).as_slice()).unwrap_err();
        assert!(matches!(err, PlyError::FieldCount(_)));
    }

    #[test]
    fn rejects_malformed_header_and_truncation() {
        assert!(matches!(read_ply(&b"plx\n"[..]), Err(PlyError::Header(_))));
        let ascii = b"ply\nformat ascii 1.0\nelement vertex 0\nend_header\n";
        assert!(matches!(read_ply(&ascii[..]), Err(PlyError::Header(_))));
        let mut bytes = single(&[0.0; 14], 0);
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(read_ply(bytes.as_slice()), Err(PlyError::Truncated { .. })));
    }

    #[test]
    fn empty_scene_roundtrips() {
        let scene = SplatScene::default();
        let mut buf = Vec::new();
        write_ply(&scene, &mut buf).unwrap();
        let text = String::from_utf8_lossy(&buf);
        assert!(text.contains("element vertex 0"));
        assert!(!text.contains("f_rest"));
        assert_eq!(read_ply(buf.as_slice()).unwrap(), scene);
    }

    fn random_gaussian(rng: &mut ChaCha8Rng, bandwidth: u8) -> Gaussian {
        let mut r: [f32; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = r.iter().map(|v| v * v).sum::<f32>().sqrt();
        r.iter_mut().for_each(|v| *v /= n);
        let raw_o: f64 = rng.random_range(-12.0f32..12.0) as f64;
        let raw_s: [f64; 3] = std::array::from_fn(|_| rng.random_range(-9.0f32..2.0) as f64);
        Gaussian {
            position: std::array::from_fn(|_| rng.random_range(-50.0..50.0)),
            opacity: activate_opacity(raw_o),
            scale: raw_s.map(activate_scale),
            rotation: normalize_rotation(r.map(|v| v as f64)).unwrap(),
            sh: (0..sh_coeff_count(bandwidth as usize))
                .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
                .collect(),
            bandwidth,
        }
    }

    #[test]
    fn three_gaussians_roundtrip_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scene = SplatScene::new((0..3).map(|i| random_gaussian(&mut rng, i as u8)).collect());
        let back = roundtrip(&scene);
        assert_eq!(back, scene);
        // and stays fixed under a second pass
        assert_eq!(roundtrip(&back), back);
    }

    #[test]
    fn random_scenes_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let scene = SplatScene::new(
            (0..100)
                .map(|_| {
                    let b = rng.random_range(0..=3);
                    random_gaussian(&mut rng, b)
                })
                .collect(),
        );
        assert_eq!(roundtrip(&scene), scene);
    }

    #[test]
    fn extreme_opacities_roundtrip() {
        let gs: Vec<Gaussian> = [0.0f32, 1.0, 1e-30, 0.999_999_9, 0.5]
            .iter()
            .map(|&o| Gaussian {
                position: [0.0; 3],
                opacity: o,
                scale: [1e-6, 3.0, 0.5],
                rotation: [1.0, 0.0, 0.0, 0.0],
                sh: vec![[0.0; 3]],
                bandwidth: 0,
            })
            .collect();
        let scene = SplatScene::new(gs);
        let mut buf = Vec::new();
        write_ply(&scene, &mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).contains("property double opacity"));
        assert_eq!(read_ply(buf.as_slice()).unwrap(), scene);
    }

    #[test]
    fn loaded_scenes_keep_float_storage() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let scene = SplatScene::new((0..200).map(|_| random_gaussian(&mut rng, 1)).collect());
        let mut buf = Vec::new();
        write_ply(&scene, &mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).contains("property float opacity"));
    }

    #[test]
    fn bandwidth_zero_scene_has_no_rest_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scene = SplatScene::new((0..4).map(|_| random_gaussian(&mut rng, 0)).collect());
        let mut buf = Vec::new();
        write_ply(&scene, &mut buf).unwrap();
        assert!(!String::from_utf8_lossy(&buf).contains("f_rest"));
    }

    #[test]
    fn extra_properties_and_metadata_survive() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut scene = SplatScene::new((0..3).map(|_| random_gaussian(&mut rng, 1)).collect());
        scene.metadata.insert("source".into(), "unit test".into());
        scene.extra.push(ExtraProperty {
            name: "nx".into(),
            kind: ScalarKind::F32,
            data: [1.0f32, 2.0, 3.0].iter().flat_map(|v| v.to_le_bytes()).collect(),
        });
        scene.round_positions_to_half();
        let back = roundtrip(&scene);
        assert_eq!(back, scene);
        assert_eq!(back.position_precision, PositionPrecision::Half);
        let picked = back.select(&[2, 0]);
        assert_eq!(picked.extra[0].data, [3.0f32, 1.0].iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<_>>());
    }

    #[test]
    fn file_roundtrip_and_point_cloud() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let scene = SplatScene::new((0..5).map(|_| random_gaussian(&mut rng, 3)).collect());
        let path = dir.path().join("scene.ply");
        save_ply(&scene, &path).unwrap();
        assert_eq!(load_ply(&path).unwrap(), scene);

        let cloud = PointCloud {
            positions: vec![[1.0, 2.0, 3.0], [-1.0, 0.5, 0.25]],
            colors: vec![[1.0, 0.0, 0.2], [0.0, 1.0, 0.6]],
        };
        let path = dir.path().join("cloud.ply");
        save_point_cloud(&cloud, &path).unwrap();
        let back = load_point_cloud(&path).unwrap();
        assert_eq!(back.positions, cloud.positions);
        for (a, b) in back.colors.iter().flatten().zip(cloud.colors.iter().flatten()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn unwritable_path_is_an_error() {
        let err = save_ply(&SplatScene::default(), "/nonexistent-dir/x.ply").unwrap_err();
        assert!(matches!(err, PlyError::Io(_)));
    }
}
