//! Small numeric helpers shared across modules.

use nalgebra::{Matrix3, Vector3};

/// Numerically stable logistic sigmoid.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Derivative of [`sigmoid`] at `x`.
#[inline]
pub fn sigmoid_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

/// Inverse of [`sigmoid`]; `p` must lie in the open unit interval.
#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Rotation matrix of a unit quaternion stored as `(w, x, y, z)`.
pub fn quat_to_mat(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls a gradient w.r.t. the matrix of [`quat_to_mat`] back to the four
/// quaternion components (no normalisation is differentiated through).
pub fn quat_to_mat_backward(q: [f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = q;
    let dw = 2.0
        * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
            + x * g[(2, 1)]);
    let dx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let dy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let dz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    [dw, dx, dy, dz]
}

/// Scene contraction into the ball of radius 2: identity inside the unit
/// ball, `(2 - 1/|p|) p/|p|` outside.
pub fn contract(p: [f64; 3]) -> [f64; 3] {
    let r = norm3(p);
    if r <= 1.0 {
        p
    } else {
        let f = (2.0 - 1.0 / r) / r;
        [p[0] * f, p[1] * f, p[2] * f]
    }
}

/// Vector-Jacobian product of [`contract`]: returns `Jᵀ g`.
pub fn contract_backward(p: [f64; 3], g: [f64; 3]) -> [f64; 3] {
    let r = norm3(p);
    if r <= 1.0 {
        return g;
    }
    let f = 2.0 / r - 1.0 / (r * r);
    let df = -2.0 / (r * r) + 2.0 / (r * r * r);
    let pg = dot3(p, g);
    let k = df * pg / r;
    [f * g[0] + k * p[0], f * g[1] + k * p[1], f * g[2] + k * p[2]]
}

/// Contracted position mapped affinely from `[-2, 2]³` to `[0, 1]³`.
pub fn contract_to_unit(p: [f64; 3]) -> [f64; 3] {
    let c = contract(p);
    [(c[0] + 2.0) * 0.25, (c[1] + 2.0) * 0.25, (c[2] + 2.0) * 0.25]
}

#[inline]
pub fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm3(a: [f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

#[inline]
pub fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn to_f64_3(v: [f32; 3]) -> [f64; 3] {
    [v[0] as f64, v[1] as f64, v[2] as f64]
}

#[inline]
pub fn vec3(v: [f64; 3]) -> Vector3<f64> {
    Vector3::new(v[0], v[1], v[2])
}
