//! Lossless octree coding of integer point sets.
//!
//! Points are shifted by their per-axis minimum and the cube is subdivided
//! breadth-first. Each occupied node emits one occupancy octet (child index
//! `x | y << 1 | z << 2`), coded with an adaptive model chosen by the number
//! of occupied siblings in its parent. Leaves carry a repeat count so
//! duplicate points survive.
//!
//! Layout: `varint(n)`, then for `n > 0`: three zigzag varint minima, one
//! depth byte, an occupancy block `varint(octets) varint(len) payload` and a
//! leaf-count block as written by [`entropy_encode`].

use super::entropy::{
    entropy_decode_at, entropy_encode, read_varint, write_varint, AdaptiveModel, ModelSpec,
    RangeDecoder, RangeEncoder,
};
use super::morton::{morton_decode, morton_key, MORTON_BITS};
use super::CodecError;

fn zigzag(v: i64) -> u64 {
    ((v << 1) ^ (v >> 63)) as u64
}

fn unzigzag(v: u64) -> i64 {
    ((v >> 1) as i64) ^ -((v & 1) as i64)
}

fn occupancy_models() -> Result<Vec<AdaptiveModel>, CodecError> {
    (0..9).map(|_| AdaptiveModel::new(ModelSpec::BYTES)).collect()
}

/// Encodes a multiset of points. Every coordinate span must fit in
/// [`MORTON_BITS`] bits.
pub fn octree_encode(points: &[[i32; 3]]) -> Result<Vec<u8>, CodecError> {
    let mut out = Vec::new();
    write_varint(&mut out, points.len() as u64);
    if points.is_empty() {
        return Ok(out);
    }
    let mut min = [i32::MAX; 3];
    let mut max = [i32::MIN; 3];
    for p in points {
        for a in 0..3 {
            min[a] = min[a].min(p[a]);
            max[a] = max[a].max(p[a]);
        }
    }
    let span = (0..3).map(|a| (max[a] as i64 - min[a] as i64) as u64).max().unwrap();
    let depth = 64 - span.leading_zeros();
    if depth > MORTON_BITS {
        return Err(CodecError::Range(format!(
            "point extent {span} exceeds {MORTON_BITS} bits per axis"
        )));
    }
    let mut keys = points
        .iter()
        .map(|p| {
            let q: [u32; 3] = std::array::from_fn(|a| (p[a] as i64 - min[a] as i64) as u32);
            morton_key(q, depth)
        })
        .collect::<Result<Vec<u64>, _>>()?;
    keys.sort_unstable();

    for m in min {
        write_varint(&mut out, zigzag(m as i64));
    }
    out.push(depth as u8);

    let mut models = occupancy_models()?;
    let mut enc = RangeEncoder::new();
    let mut octets = 0u64;
    // Nodes of the current level as (start, end, context) ranges into `keys`.
    let mut level = vec![(0usize, keys.len(), 0usize)];
    for d in (0..depth).rev() {
        let shift = 3 * d;
        let mut next = Vec::with_capacity(level.len() * 2);
        for &(start, end, ctx) in &level {
            let mut octet = 0u8;
            let mut children = Vec::with_capacity(8);
            let mut i = start;
            while i < end {
                let child = ((keys[i] >> shift) & 7) as u8;
                let mut j = i + 1;
                while j < end && ((keys[j] >> shift) & 7) as u8 == child {
                    j += 1;
                }
                octet |= 1 << child;
                children.push((i, j));
                i = j;
            }
            enc.encode(&mut models[ctx], octet as usize);
            octets += 1;
            let child_ctx = octet.count_ones() as usize;
            next.extend(children.into_iter().map(|(s, e)| (s, e, child_ctx)));
        }
        level = next;
    }
    write_varint(&mut out, octets);
    let payload = if octets > 0 { enc.finish() } else { Vec::new() };
    write_varint(&mut out, payload.len() as u64);
    out.extend_from_slice(&payload);

    let mut counts = Vec::new();
    for &(start, end, _) in &level {
        write_varint(&mut counts, (end - start - 1) as u64);
    }
    out.extend(entropy_encode(&counts, ModelSpec::BYTES)?);
    Ok(out)
}

/// Decodes a stream written by [`octree_encode`], returning the points in
/// Morton order of their shifted coordinates.
pub fn octree_decode(input: &[u8]) -> Result<Vec<[i32; 3]>, CodecError> {
    let mut pos = 0;
    let points = octree_decode_at(input, &mut pos)?;
    if pos != input.len() {
        return Err(CodecError::Corrupt("trailing bytes after octree stream".into()));
    }
    Ok(points)
}

pub(crate) fn octree_decode_at(input: &[u8], pos: &mut usize) -> Result<Vec<[i32; 3]>, CodecError> {
    let n = read_varint(input, pos)? as usize;
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut min = [0i64; 3];
    for m in &mut min {
        *m = unzigzag(read_varint(input, pos)?);
    }
    let depth = *input.get(*pos).ok_or(CodecError::Truncated("octree depth"))? as u32;
    *pos += 1;
    if depth > MORTON_BITS {
        return Err(CodecError::Corrupt(format!("octree depth {depth}")));
    }
    let octets = read_varint(input, pos)?;
    let len = read_varint(input, pos)? as usize;
    let end = pos.checked_add(len).filter(|&e| e <= input.len());
    let end = end.ok_or(CodecError::Truncated("octree occupancy payload"))?;
    let payload = &input[*pos..end];
    *pos = end;

    let mut models = occupancy_models()?;
    let mut dec = RangeDecoder::new(payload);
    let mut decoded = 0u64;
    let mut level = vec![(0u64, 0usize)];
    for _ in 0..depth {
        let mut next = Vec::with_capacity(level.len() * 2);
        for &(prefix, ctx) in &level {
            if decoded == octets {
                return Err(CodecError::Corrupt("occupancy octets exhausted".into()));
            }
            let octet = dec.decode(&mut models[ctx]) as u8;
            decoded += 1;
            if octet == 0 {
                return Err(CodecError::Corrupt("empty occupancy octet".into()));
            }
            if next.len() as u64 + octet.count_ones() as u64 > n as u64 {
                return Err(CodecError::Corrupt("more octree leaves than points".into()));
            }
            let child_ctx = octet.count_ones() as usize;
            for c in 0..8u64 {
                if octet & (1 << c) != 0 {
                    next.push(((prefix << 3) | c, child_ctx));
                }
            }
        }
        level = next;
    }
    if decoded != octets {
        return Err(CodecError::Corrupt("occupancy octet count mismatch".into()));
    }

    let counts = entropy_decode_at(input, pos, ModelSpec::BYTES)?;
    let mut cpos = 0;
    let mut points = Vec::with_capacity(n);
    for &(key, _) in &level {
        let repeat = read_varint(&counts, &mut cpos)? + 1;
        if points.len() as u64 + repeat > n as u64 {
            return Err(CodecError::Corrupt("leaf counts exceed point count".into()));
        }
        let q = morton_decode(key);
        let p: [i32; 3] = std::array::from_fn(|a| {
            i32::try_from(q[a] as i64 + min[a]).unwrap_or(i32::MAX)
        });
        for _ in 0..repeat {
            points.push(p);
        }
    }
    if points.len() != n || cpos != counts.len() {
        return Err(CodecError::Corrupt("leaf counts do not match point count".into()));
    }
    Ok(points)
}
