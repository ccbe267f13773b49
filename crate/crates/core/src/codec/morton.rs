//! Z-order keys and Morton sorting of scenes.

use super::CodecError;
use crate::math::{contract_to_unit, to_f64_3};
use crate::model::SplatScene;

/// Default per-axis bit width of Morton keys.
pub const MORTON_BITS: u32 = 21;

/// Spreads the low 21 bits of `x` so that bit `i` lands on bit `3i`.
fn spread(x: u32) -> u64 {
    let mut x = x as u64 & 0x1f_ffff;
    x = (x | (x << 32)) & 0x001f_0000_0000_ffff;
    x = (x | (x << 16)) & 0x001f_0000_ff00_00ff;
    x = (x | (x << 8)) & 0x100f_00f0_0f00_f00f;
    x = (x | (x << 4)) & 0x10c3_0c30_c30c_30c3;
    x = (x | (x << 2)) & 0x1249_2492_4924_9249;
    x
}

fn compact(x: u64) -> u32 {
    let mut x = x & 0x1249_2492_4924_9249;
    x = (x | (x >> 2)) & 0x10c3_0c30_c30c_30c3;
    x = (x | (x >> 4)) & 0x100f_00f0_0f00_f00f;
    x = (x | (x >> 8)) & 0x001f_0000_ff00_00ff;
    x = (x | (x >> 16)) & 0x001f_0000_0000_ffff;
    x = (x | (x >> 32)) & 0x1f_ffff;
    x as u32
}

/// Interleaves the bits of `q` with x in the lowest position:
/// `(1,0,0) → 1`, `(0,1,0) → 2`, `(0,0,1) → 4`.
pub fn morton_key(q: [u32; 3], bits: u32) -> Result<u64, CodecError> {
    if bits > MORTON_BITS {
        return Err(CodecError::Range(format!("{bits} bits per axis exceeds {MORTON_BITS}")));
    }
    if let Some(&c) = q.iter().find(|&&c| bits < 32 && c >> bits != 0) {
        return Err(CodecError::Range(format!("coordinate {c} does not fit in {bits} bits")));
    }
    Ok(spread(q[0]) | (spread(q[1]) << 1) | (spread(q[2]) << 2))
}

/// Inverse of [`morton_key`].
pub fn morton_decode(key: u64) -> [u32; 3] {
    [compact(key), compact(key >> 1), compact(key >> 2)]
}

/// Morton key of a position after contraction into the unit cube and
/// quantisation to a `2^bits` grid.
pub fn position_key(p: [f32; 3], bits: u32) -> u64 {
    let x = contract_to_unit(to_f64_3(p));
    let cells = (1u64 << bits) as f64;
    let q = x.map(|v| ((v * cells).floor()).clamp(0.0, cells - 1.0) as u32);
    spread(q[0]) | (spread(q[1]) << 1) | (spread(q[2]) << 2)
}

/// Reorders the scene along the Morton curve of its contracted positions.
/// Returns the sorted scene and the permutation: `sorted[i] = scene[perm[i]]`.
/// Equal keys keep their input order.
pub fn morton_sort(scene: &SplatScene) -> (SplatScene, Vec<usize>) {
    let keys: Vec<u64> = scene
        .gaussians
        .iter()
        .map(|g| position_key(g.position, MORTON_BITS))
        .collect();
    let mut perm: Vec<usize> = (0..scene.len()).collect();
    perm.sort_by_key(|&i| keys[i]);
    (scene.select(&perm), perm)
}
