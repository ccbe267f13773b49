//! Real spherical-harmonics colour evaluation (3DGS conventions).

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
pub const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
pub const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// The 16 basis values at unit direction `d` (entries past the requested
/// degree are still filled).
pub fn sh_basis(d: [f64; 3]) -> [f64; 16] {
    let [x, y, z] = d;
    let (xx, yy, zz) = (x * x, y * y, z * z);
    [
        SH_C0,
        -SH_C1 * y,
        SH_C1 * z,
        -SH_C1 * x,
        SH_C2[0] * x * y,
        SH_C2[1] * y * z,
        SH_C2[2] * (2.0 * zz - xx - yy),
        SH_C2[3] * x * z,
        SH_C2[4] * (xx - yy),
        SH_C3[0] * y * (3.0 * xx - yy),
        SH_C3[1] * x * y * z,
        SH_C3[2] * y * (4.0 * zz - xx - yy),
        SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
        SH_C3[4] * x * (4.0 * zz - xx - yy),
        SH_C3[5] * z * (xx - yy),
        SH_C3[6] * x * (xx - 3.0 * yy),
    ]
}

/// Partial derivatives of [`sh_basis`] with respect to the (unnormalised)
/// components of `d`.
pub fn sh_basis_grad(d: [f64; 3]) -> [[f64; 3]; 16] {
    let [x, y, z] = d;
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (c2, c3) = (SH_C2, SH_C3);
    [
        [0.0; 3],
        [0.0, -SH_C1, 0.0],
        [0.0, 0.0, SH_C1],
        [-SH_C1, 0.0, 0.0],
        [c2[0] * y, c2[0] * x, 0.0],
        [0.0, c2[1] * z, c2[1] * y],
        [-2.0 * c2[2] * x, -2.0 * c2[2] * y, 4.0 * c2[2] * z],
        [c2[3] * z, 0.0, c2[3] * x],
        [2.0 * c2[4] * x, -2.0 * c2[4] * y, 0.0],
        [6.0 * c3[0] * x * y, c3[0] * (3.0 * xx - 3.0 * yy), 0.0],
        [c3[1] * y * z, c3[1] * x * z, c3[1] * x * y],
        [-2.0 * c3[2] * x * y, c3[2] * (4.0 * zz - xx - 3.0 * yy), 8.0 * c3[2] * y * z],
        [-6.0 * c3[3] * x * z, -6.0 * c3[3] * y * z, c3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)],
        [c3[4] * (4.0 * zz - 3.0 * xx - yy), -2.0 * c3[4] * x * y, 8.0 * c3[4] * x * z],
        [2.0 * c3[5] * x * z, -2.0 * c3[5] * y * z, c3[5] * (xx - yy)],
        [c3[6] * (3.0 * xx - 3.0 * yy), -6.0 * c3[6] * x * y, 0.0],
    ]
}

/// Colour before clamping: `Σ Y_j(d) k_j + 0.5` over the supplied blocks.
pub fn sh_color_unclamped(sh: &[[f64; 3]], d: [f64; 3]) -> [f64; 3] {
    let basis = sh_basis(d);
    let mut c = [0.5; 3];
    for (k, y) in sh.iter().zip(basis) {
        for ch in 0..3 {
            c[ch] += y * k[ch];
        }
    }
    c
}

/// View-dependent colour of SH blocks `sh` truncated to degree `bandwidth`,
/// clamped below at zero. `d` must be a unit vector.
pub fn sh_color(sh: &[[f64; 3]], bandwidth: u8, d: [f64; 3]) -> [f64; 3] {
    let n = ((bandwidth as usize + 1).pow(2)).min(sh.len());
    sh_color_unclamped(&sh[..n], d).map(|v| v.max(0.0))
}
