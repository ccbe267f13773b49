//! Lossless mapping between half-precision positions and signed integers.
//!
//! The magnitude bits of a half are read as an unsigned integer and the sign
//! is applied on top. Negative values are shifted down by one so that `-0.0`
//! (mapped to `-1`) stays distinct from `+0.0` (mapped to `0`); the map is
//! then a bijection onto its image and strictly increasing in the real value.

use half::f16;

use super::CodecError;

/// Largest magnitude bit pattern of a finite half (65504).
pub const MAX_FINITE_BITS: i32 = 0x7BFF;

/// Integer code of one half-precision value.
pub fn reinterpret(p: f16) -> Result<i32, CodecError> {
    if !p.is_finite() {
        return Err(CodecError::Range(format!("non-finite half {p}")));
    }
    let bits = p.to_bits();
    let mag = (bits & 0x7FFF) as i32;
    Ok(if bits & 0x8000 == 0 { mag } else { -mag - 1 })
}

/// Inverse of [`reinterpret`].
pub fn reinterpret_inv(v: i32) -> Result<f16, CodecError> {
    let (sign, mag) = if v >= 0 { (0u16, v) } else { (0x8000, -(v + 1)) };
    if mag > MAX_FINITE_BITS {
        return Err(CodecError::Range(format!("integer {v} is not a finite half code")));
    }
    Ok(f16::from_bits(sign | mag as u16))
}

pub fn reinterpret_pos(p: [f16; 3]) -> Result<[i32; 3], CodecError> {
    Ok([reinterpret(p[0])?, reinterpret(p[1])?, reinterpret(p[2])?])
}

pub fn reinterpret_pos_inv(v: [i32; 3]) -> Result<[f16; 3], CodecError> {
    Ok([reinterpret_inv(v[0])?, reinterpret_inv(v[1])?, reinterpret_inv(v[2])?])
}
