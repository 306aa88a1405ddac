//! Pose representation and the small set of distance primitives shared by the
//! kinematics, world and planner modules.

use std::f64::consts::PI;

use nalgebra::{IsometryMatrix3, Matrix3, Rotation3, Translation3, Vector3, Vector6};
use serde::{Deserialize, Serialize};

pub type Vec3 = Vector3<f64>;
pub type Transform = IsometryMatrix3<f64>;

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

/// Rotation for intrinsic X-Y-Z Euler angles: `R = Rx(a) * Ry(b) * Rz(c)`.
pub fn euler_xyz_to_matrix(r: &Vec3) -> Matrix3<f64> {
    let (sa, ca) = r.x.sin_cos();
    let (sb, cb) = r.y.sin_cos();
    let (sc, cc) = r.z.sin_cos();
    Matrix3::new(
        cb * cc,
        -cb * sc,
        sb,
        ca * sc + sa * sb * cc,
        ca * cc - sa * sb * sc,
        -sa * cb,
        sa * sc - ca * sb * cc,
        sa * cc + ca * sb * sc,
        ca * cb,
    )
}

/// Inverse of [`euler_xyz_to_matrix`]. At the pitch singularity the third
/// angle is fixed to zero.
pub fn matrix_to_euler_xyz(m: &Matrix3<f64>) -> Vec3 {
    let sb = m[(0, 2)].clamp(-1.0, 1.0);
    let b = sb.asin();
    let cb = (m[(0, 0)].powi(2) + m[(0, 1)].powi(2)).sqrt();
    let (a, c) = if cb > 1e-10 {
        (
            (-m[(1, 2)]).atan2(m[(2, 2)]),
            (-m[(0, 1)]).atan2(m[(0, 0)]),
        )
    } else if sb > 0.0 {
        (m[(1, 0)].atan2(m[(1, 1)]), 0.0)
    } else {
        ((-m[(1, 0)]).atan2(m[(1, 1)]), 0.0)
    };
    Vec3::new(wrap_angle(a), wrap_angle(b), wrap_angle(c))
}

/// End-effector (camera) pose as position plus Euler-XYZ rotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose6 {
    pub p: Vec3,
    pub r: Vec3,
}

impl Pose6 {
    pub fn new(p: Vec3, r: Vec3) -> Self {
        Self {
            p,
            r: r.map(wrap_angle),
        }
    }

    pub fn from_transform(t: &Transform) -> Self {
        Self {
            p: t.translation.vector,
            r: matrix_to_euler_xyz(t.rotation.matrix()),
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        euler_xyz_to_matrix(&self.r)
    }

    pub fn to_transform(&self) -> Transform {
        Transform::from_parts(
            Translation3::from(self.p),
            Rotation3::from_matrix_unchecked(self.rotation()),
        )
    }

    pub fn as_vector(&self) -> Vector6<f64> {
        Vector6::new(self.p.x, self.p.y, self.p.z, self.r.x, self.r.y, self.r.z)
    }

    /// Camera viewing direction (the optical frame's z axis).
    pub fn view_axis(&self) -> Vec3 {
        self.rotation().column(2).into_owned()
    }

    /// Applies a pose delta: translation is added in the world frame, the
    /// rotation delta is composed in the camera frame through matrices.
    pub fn compose(&self, delta: &PoseDelta) -> Pose6 {
        let d = delta.0;
        let p = self.p + Vec3::new(d[0], d[1], d[2]);
        let rot = self.rotation() * euler_xyz_to_matrix(&Vec3::new(d[3], d[4], d[5]));
        Pose6 {
            p,
            r: matrix_to_euler_xyz(&rot),
        }
    }

    /// Camera pose at `eye` whose optical axis points at `target`.
    pub fn look_at(eye: Vec3, target: Vec3) -> Pose6 {
        let z = (target - eye).normalize();
        let helper = if z.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
        let y = z.cross(&helper).normalize();
        let x = y.cross(&z);
        let m = Matrix3::from_columns(&[x, y, z]);
        Pose6 {
            p: eye,
            r: matrix_to_euler_xyz(&m),
        }
    }
}

/// Per-tick change of the end-effector pose: `[dx, dy, dz, rx, ry, rz]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseDelta(pub Vector6<f64>);

impl PoseDelta {
    pub fn zero() -> Self {
        Self(Vector6::zeros())
    }
}

/// Rotation vector (axis times angle) of a rotation matrix. Uses `atan2`
/// on the skew part so small angles keep full relative precision.
pub fn rotation_log(m: &Matrix3<f64>) -> Vec3 {
    let v = Vec3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    ) * 0.5;
    let c = 0.5 * (m.trace() - 1.0);
    if c < -0.9 {
        return Rotation3::from_matrix_unchecked(*m).scaled_axis();
    }
    let s = v.norm();
    if s < 1e-300 {
        return Vec3::zeros();
    }
    v * (s.atan2(c) / s)
}

/// Rotation-vector error `log(target * current^T)`, expressed in the world frame.
pub fn rotation_error(target: &Matrix3<f64>, current: &Matrix3<f64>) -> Vec3 {
    rotation_log(&(target * current.transpose()))
}

/// Frobenius distance between two rotation matrices.
pub fn rotation_distance(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    (a - b).norm()
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Self { min, max }
    }

    pub fn from_center(center: Vec3, half: Vec3) -> Self {
        Self {
            min: center - half,
            max: center + half,
        }
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn is_empty(&self) -> bool {
        (0..3).any(|i| self.max[i] <= self.min[i])
    }

    pub fn point_distance(&self, p: &Vec3) -> f64 {
        let mut d2 = 0.0;
        for i in 0..3 {
            let v = if p[i] < self.min[i] {
                self.min[i] - p[i]
            } else if p[i] > self.max[i] {
                p[i] - self.max[i]
            } else {
                0.0
            };
            d2 += v * v;
        }
        d2.sqrt()
    }

    /// Slab test for the closed segment `a -> b`.
    pub fn intersects_segment(&self, a: &Vec3, b: &Vec3) -> bool {
        let d = b - a;
        let (mut t0, mut t1) = (0.0_f64, 1.0_f64);
        for i in 0..3 {
            if d[i].abs() < 1e-15 {
                if a[i] < self.min[i] || a[i] > self.max[i] {
                    return false;
                }
            } else {
                let inv = 1.0 / d[i];
                let mut lo = (self.min[i] - a[i]) * inv;
                let mut hi = (self.max[i] - a[i]) * inv;
                if lo > hi {
                    std::mem::swap(&mut lo, &mut hi);
                }
                t0 = t0.max(lo);
                t1 = t1.min(hi);
                if t0 > t1 {
                    return false;
                }
            }
        }
        true
    }

    /// Distance between the segment `a -> b` and the box. The point-to-box
    /// distance is convex along the segment, so a golden-section search on
    /// the segment parameter converges to the exact minimum.
    pub fn segment_distance(&self, a: &Vec3, b: &Vec3) -> f64 {
        if self.intersects_segment(a, b) {
            return 0.0;
        }
        let f = |t: f64| self.point_distance(&(a + (b - a) * t));
        let g = 0.5 * (5.0_f64.sqrt() - 1.0);
        let (mut lo, mut hi) = (0.0, 1.0);
        let mut x1 = hi - g * (hi - lo);
        let mut x2 = lo + g * (hi - lo);
        let (mut f1, mut f2) = (f(x1), f(x2));
        for _ in 0..80 {
            if f1 < f2 {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - g * (hi - lo);
                f1 = f(x1);
            } else {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + g * (hi - lo);
                f2 = f(x2);
            }
        }
        f(0.5 * (lo + hi)).min(f(0.0)).min(f(1.0))
    }
}

/// Parameter of the closest point on segment `a -> b` to `p`, in `[0, 1]`.
pub fn segment_closest_param(a: &Vec3, b: &Vec3, p: &Vec3) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 < 1e-300 {
        return 0.0;
    }
    ((p - a).dot(&ab) / len2).clamp(0.0, 1.0)
}

pub fn segment_point_distance(a: &Vec3, b: &Vec3, p: &Vec3) -> f64 {
    let t = segment_closest_param(a, b, p);
    (a + (b - a) * t - p).norm()
}

/// Closest points between segments `p1 -> q1` and `p2 -> q2`.
/// Returns `(s, t, distance)` with `s`, `t` the segment parameters.
pub fn segment_segment_closest(p1: &Vec3, q1: &Vec3, p2: &Vec3, q2: &Vec3) -> (f64, f64, f64) {
    let d1 = q1 - p1;
    let d2 = q2 - p2;
    let r = p1 - p2;
    let a = d1.norm_squared();
    let e = d2.norm_squared();
    let f = d2.dot(&r);
    let eps = 1e-300;
    let (s, t);
    if a <= eps && e <= eps {
        return (0.0, 0.0, r.norm());
    }
    if a <= eps {
        s = 0.0;
        t = (f / e).clamp(0.0, 1.0);
    } else {
        let c = d1.dot(&r);
        if e <= eps {
            t = 0.0;
            s = (-c / a).clamp(0.0, 1.0);
        } else {
            let b = d1.dot(&d2);
            let denom = a * e - b * b;
            let mut s0 = if denom > 1e-14 * a * e {
                ((b * f - c * e) / denom).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let mut t0 = (b * s0 + f) / e;
            if t0 < 0.0 {
                t0 = 0.0;
                s0 = (-c / a).clamp(0.0, 1.0);
            } else if t0 > 1.0 {
                t0 = 1.0;
                s0 = ((b - c) / a).clamp(0.0, 1.0);
            }
            s = s0;
            t = t0;
        }
    }
    let c1 = p1 + d1 * s;
    let c2 = p2 + d2 * t;
    (s, t, (c1 - c2).norm())
}

/// Capsule in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldCapsule {
    pub a: Vec3,
    pub b: Vec3,
    pub radius: f64,
}

impl WorldCapsule {
    pub fn distance_to_capsule(&self, other: &WorldCapsule) -> f64 {
        segment_segment_closest(&self.a, &self.b, &other.a, &other.b).2 - self.radius - other.radius
    }

    pub fn distance_to_point(&self, p: &Vec3) -> f64 {
        segment_point_distance(&self.a, &self.b, p) - self.radius
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn wrap_angle_half_open_interval() {
        assert_abs_diff_eq!(wrap_angle(-PI), PI, epsilon = 1e-15);
        assert_abs_diff_eq!(wrap_angle(3.0 * PI), PI, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(0.3), 0.3, epsilon = 1e-15);
    }

    #[test]
    fn euler_singular_pitch_round_trip() {
        for &b in &[PI / 2.0, -PI / 2.0] {
            let m = euler_xyz_to_matrix(&Vec3::new(0.4, b, -0.7));
            let back = euler_xyz_to_matrix(&matrix_to_euler_xyz(&m));
            assert!(rotation_distance(&m, &back) < 1e-9);
        }
    }

    #[test]
    fn rotation_log_small_and_large_angles() {
        for &angle in &[1e-7, 0.3, 2.0, PI - 1e-3] {
            let axis = Vec3::new(0.3, -0.5, 0.8).normalize();
            let r = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
            let v = rotation_log(r.matrix());
            assert!((v - axis * angle).norm() < 1e-9 * angle.max(1.0), "{angle}");
        }
    }

    #[test]
    fn look_at_points_axis_at_target() {
        let eye = Vec3::new(0.1, -0.3, 1.0);
        let target = Vec3::new(-1.0, 2.0, 1.5);
        let pose = Pose6::look_at(eye, target);
        let dir = (target - eye).normalize();
        assert_abs_diff_eq!(pose.view_axis().dot(&dir), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn segment_segment_parallel_and_crossing() {
        let (_, _, d) = segment_segment_closest(
            &Vec3::new(0.0, 0.0, 0.0),
            &Vec3::new(1.0, 0.0, 0.0),
            &Vec3::new(0.0, 1.0, 0.0),
            &Vec3::new(1.0, 1.0, 0.0),
        );
        assert_abs_diff_eq!(d, 1.0, epsilon = 1e-12);
        let (s, t, d) = segment_segment_closest(
            &Vec3::new(-1.0, 0.0, 0.0),
            &Vec3::new(1.0, 0.0, 0.0),
            &Vec3::new(0.0, -1.0, 0.5),
            &Vec3::new(0.0, 1.0, 0.5),
        );
        assert_abs_diff_eq!(d, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(s, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(t, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn aabb_segment_queries() {
        let b = Aabb::from_center(Vec3::zeros(), Vec3::repeat(0.5));
        assert!(b.intersects_segment(&Vec3::new(-2.0, 0.0, 0.0), &Vec3::new(2.0, 0.1, 0.0)));
        assert!(!b.intersects_segment(&Vec3::new(-2.0, 1.0, 0.0), &Vec3::new(2.0, 1.0, 0.0)));
        let d = b.segment_distance(&Vec3::new(-2.0, 1.0, 0.0), &Vec3::new(2.0, 1.0, 0.0));
        assert_abs_diff_eq!(d, 0.5, epsilon = 1e-9);
        let d = b.segment_distance(&Vec3::new(1.5, 1.5, 0.0), &Vec3::new(3.0, 3.0, 0.0));
        assert_abs_diff_eq!(d, 2.0_f64.sqrt(), epsilon = 1e-9);
    }

    fn angle() -> impl Strategy<Value = f64> {
        -PI..PI
    }

    proptest! {
        #[test]
        fn euler_round_trip(a in angle(), b in angle(), c in angle()) {
            let m = euler_xyz_to_matrix(&Vec3::new(a, b, c));
            let e = matrix_to_euler_xyz(&m);
            prop_assert!(e.iter().all(|v| *v > -PI && *v <= PI));
            prop_assert!(rotation_distance(&m, &euler_xyz_to_matrix(&e)) < 1e-9);
        }

        #[test]
        fn segment_distance_not_above_sampled(
            ax in -2.0..2.0f64, ay in -2.0..2.0f64, az in -2.0..2.0f64,
            bx in -2.0..2.0f64, by in -2.0..2.0f64, bz in -2.0..2.0f64,
        ) {
            let b = Aabb::from_center(Vec3::zeros(), Vec3::new(0.3, 0.2, 0.4));
            let p = Vec3::new(ax, ay, az);
            let q = Vec3::new(bx, by, bz);
            let d = b.segment_distance(&p, &q);
            let sampled = (0..=200)
                .map(|i| b.point_distance(&(p + (q - p) * (i as f64 / 200.0))))
                .fold(f64::INFINITY, f64::min);
            prop_assert!(d <= sampled + 1e-9);
            prop_assert!(d >= sampled - 0.02);
        }
    }
}
