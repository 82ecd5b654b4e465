//! Small rotation and linear-algebra helpers.

use nalgebra::{Matrix3, UnitQuaternion, Vector3, Vector6};

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Geodesic angle (radians) between two orientations, in `[0, π]`.
pub fn geodesic_angle(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> f64 {
    let d = a.inverse() * b;
    let w = d.w.abs();
    let n = d.imag().norm();
    2.0 * n.atan2(w)
}

/// Rotation vector `e` with `Exp(e) = a⁻¹·b`, taken along the shortest arc.
pub fn relative_rotation_vector(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> Vector3<f64> {
    let mut d = (a.inverse() * b).into_inner();
    if d.w < 0.0 {
        d = -d;
    }
    let n = d.imag().norm();
    if n < 1e-300 {
        return Vector3::zeros();
    }
    let angle = 2.0 * n.atan2(d.w);
    d.imag() * (angle / n)
}

/// Left Jacobian of SO(3).
pub fn so3_left_jacobian(x: &Vector3<f64>) -> Matrix3<f64> {
    let t = x.norm();
    let k = skew(x);
    if t < 1e-6 {
        return Matrix3::identity() + 0.5 * k + (1.0 / 6.0) * k * k;
    }
    let t2 = t * t;
    Matrix3::identity() + ((1.0 - t.cos()) / t2) * k + ((t - t.sin()) / (t2 * t)) * k * k
}

/// Spatial motion cross product `V × W` for `V = (ω, ν)`.
pub fn motion_cross(v: &Vector6<f64>, w: &Vector6<f64>) -> Vector6<f64> {
    let om = v.fixed_rows::<3>(0);
    let nu = v.fixed_rows::<3>(3);
    let wa = w.fixed_rows::<3>(0);
    let wl = w.fixed_rows::<3>(3);
    let a = om.cross(&wa);
    let l = om.cross(&wl) + nu.cross(&wa);
    Vector6::new(a.x, a.y, a.z, l.x, l.y, l.z)
}

/// Spatial force cross product `V ×* F` for `V = (ω, ν)`, `F = (n, f)`.
pub fn force_cross(v: &Vector6<f64>, f: &Vector6<f64>) -> Vector6<f64> {
    let om = v.fixed_rows::<3>(0);
    let nu = v.fixed_rows::<3>(3);
    let n = f.fixed_rows::<3>(0);
    let fl = f.fixed_rows::<3>(3);
    let a = om.cross(&n) + nu.cross(&fl);
    let l = om.cross(&fl);
    Vector6::new(a.x, a.y, a.z, l.x, l.y, l.z)
}

pub fn stack6(a: &Vector3<f64>, b: &Vector3<f64>) -> Vector6<f64> {
    Vector6::new(a.x, a.y, a.z, b.x, b.y, b.z)
}

/// Symmetric 3×3 matrix from `(xx, yy, zz, xy, xz, yz)`.
pub fn sym_from6(v: &[f64; 6]) -> Matrix3<f64> {
    Matrix3::new(v[0], v[3], v[4], v[3], v[1], v[5], v[4], v[5], v[2])
}

pub fn sym_to6(m: &Matrix3<f64>) -> [f64; 6] {
    [m[(0, 0)], m[(1, 1)], m[(2, 2)], m[(0, 1)], m[(0, 2)], m[(1, 2)]]
}
