//! SE(3) and se(3) algebra used by the rod kinematics.
//!
//! Twists are ordered `(angular, linear)` everywhere in the crate, so a
//! 6-vector `[w; v]` holds the rotational part in its first three entries.

use nalgebra::{Matrix3, Matrix4, Matrix6, Vector3, Vector6};
use std::ops::Mul;

/// Strain or velocity twist of a backbone cross-section.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Twist {
    pub angular: Vector3<f64>,
    pub linear: Vector3<f64>,
}

impl Twist {
    pub fn new(angular: Vector3<f64>, linear: Vector3<f64>) -> Self {
        Self { angular, linear }
    }

    pub fn zero() -> Self {
        Self::new(Vector3::zeros(), Vector3::zeros())
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self::new(v.fixed_rows::<3>(0).into(), v.fixed_rows::<3>(3).into())
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        let mut v = Vector6::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.angular);
        v.fixed_rows_mut::<3>(3).copy_from(&self.linear);
        v
    }

    pub fn is_finite(&self) -> bool {
        self.angular.iter().chain(self.linear.iter()).all(|x| x.is_finite())
    }
}

/// Rigid frame of the backbone: orientation and position in the base frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub position: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, position: Vector3<f64>) -> Self {
        Self { rotation, position }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self::new(rt, -(rt * self.position))
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.position);
        m
    }

    pub fn from_homogeneous(m: &Matrix4<f64>) -> Self {
        Self::new(m.fixed_view::<3, 3>(0, 0).into(), m.fixed_view::<3, 1>(0, 3).into())
    }

    /// Largest deviation from orthonormality and unit determinant.
    pub fn orthonormality_error(&self) -> f64 {
        let r = &self.rotation;
        let gram = (r.transpose() * r - Matrix3::identity()).abs().max();
        gram.max((r.determinant() - 1.0).abs())
    }
}

impl Mul for Pose {
    type Output = Pose;

    fn mul(self, rhs: Pose) -> Pose {
        Pose::new(
            self.rotation * rhs.rotation,
            self.rotation * rhs.position + self.position,
        )
    }
}

impl Mul<&Pose> for &Pose {
    type Output = Pose;

    fn mul(self, rhs: &Pose) -> Pose {
        *self * *rhs
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// se(3) hat map: 4x4 matrix with `skew(angular)` and the linear column.
pub fn hat(v: &Twist) -> Matrix4<f64> {
    let mut m = Matrix4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&v.angular));
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&v.linear);
    m
}

/// Closed-form exponential of `h * hat(v)`.
pub fn exp_se3(v: &Twist, h: f64) -> Pose {
    let w = v.angular * h;
    let u = v.linear * h;
    let theta2 = w.norm_squared();
    let theta = theta2.sqrt();
    // a = sin t / t, b = (1 - cos t) / t^2, c = (t - sin t) / t^3
    let (a, b, c) = if theta < 1e-2 {
        let t4 = theta2 * theta2;
        (
            1.0 - theta2 / 6.0 + t4 / 120.0 - t4 * theta2 / 5040.0,
            0.5 - theta2 / 24.0 + t4 / 720.0 - t4 * theta2 / 40320.0,
            1.0 / 6.0 - theta2 / 120.0 + t4 / 5040.0 - t4 * theta2 / 362880.0,
        )
    } else {
        let half = 0.5 * theta;
        let s = half.sin();
        (theta.sin() / theta, 2.0 * s * s / theta2, (theta - theta.sin()) / (theta2 * theta))
    };
    let wx = skew(&w);
    let wx2 = wx * wx;
    let rotation = Matrix3::identity() + wx * a + wx2 * b;
    let left = Matrix3::identity() + wx * b + wx2 * c;
    Pose::new(rotation, left * u)
}

/// Adjoint of a pose acting on `(angular, linear)` twists.
pub fn adjoint_big(g: &Pose) -> Matrix6<f64> {
    let r = &g.rotation;
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(r);
    m.fixed_view_mut::<3, 3>(3, 0).copy_from(&(skew(&g.position) * r));
    m
}

/// Adjoint of the inverse pose, without forming the inverse explicitly.
pub fn adjoint_inv(g: &Pose) -> Matrix6<f64> {
    let rt = g.rotation.transpose();
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&rt);
    m.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-(rt * skew(&g.position))));
    m
}

/// Lie bracket matrix: `adjoint_small(a) * b = [a, b]`.
pub fn adjoint_small(v: &Twist) -> Matrix6<f64> {
    ad_vec(&v.to_vector())
}

pub(crate) fn ad_vec(v: &Vector6<f64>) -> Matrix6<f64> {
    let w = skew(&Vector3::new(v[0], v[1], v[2]));
    let u = skew(&Vector3::new(v[3], v[4], v[5]));
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&w);
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&w);
    m.fixed_view_mut::<3, 3>(3, 0).copy_from(&u);
    m
}

/// `ad_a * b` without building the 6x6 matrix.
pub(crate) fn bracket(a: &Vector6<f64>, b: &Vector6<f64>) -> Vector6<f64> {
    let wa = Vector3::new(a[0], a[1], a[2]);
    let va = Vector3::new(a[3], a[4], a[5]);
    let wb = Vector3::new(b[0], b[1], b[2]);
    let vb = Vector3::new(b[3], b[4], b[5]);
    let w = wa.cross(&wb);
    let v = wa.cross(&vb) + va.cross(&wb);
    Vector6::new(w.x, w.y, w.z, v.x, v.y, v.z)
}

const SERIES_CAP: usize = 40;

fn series_coeff(k: usize) -> f64 {
    // (-1)^k / (k + 1)!
    let mut f = 1.0;
    for i in 2..=k + 1 {
        f *= i as f64;
    }
    if k % 2 == 0 {
        1.0 / f
    } else {
        -1.0 / f
    }
}

fn series_terms(norm: f64) -> usize {
    let mut term = 1.0;
    for k in 1..SERIES_CAP {
        term *= norm / (k + 1) as f64;
        if term < 1e-18 {
            return k + 1;
        }
    }
    SERIES_CAP
}

/// Body-velocity tangent operator of the exponential map:
/// `exp(-W) d/dt exp(W) = tangent(W) * dW/dt`, i.e. `sum_k (-ad_W)^k / (k+1)!`.
pub(crate) fn tangent(omega: &Vector6<f64>) -> Matrix6<f64> {
    let ad = ad_vec(omega);
    let terms = series_terms(ad.norm());
    let mut power = Matrix6::identity();
    let mut sum = Matrix6::identity();
    for k in 1..terms {
        power = ad * power;
        sum += power * series_coeff(k);
    }
    sum
}

/// Time derivative of `tangent(W(t))` applied to `w`, given `dW/dt`.
pub(crate) fn tangent_rate_apply(
    omega: &Vector6<f64>,
    omega_dot: &Vector6<f64>,
    w: &Vector6<f64>,
) -> Vector6<f64> {
    let ad = ad_vec(omega);
    let terms = series_terms(ad.norm()) + 1;
    let mut p = *w;
    let mut r = Vector6::zeros();
    let mut sum = Vector6::zeros();
    for k in 1..terms {
        r = bracket(omega_dot, &p) + ad * r;
        p = ad * p;
        sum += r * series_coeff(k);
    }
    sum
}

/// Time derivative of `tangent(W(t))` as a matrix, given `dW/dt`.
pub(crate) fn tangent_rate(omega: &Vector6<f64>, omega_dot: &Vector6<f64>) -> Matrix6<f64> {
    let ad = ad_vec(omega);
    let ad_dot = ad_vec(omega_dot);
    let terms = series_terms(ad.norm()) + 1;
    let mut power = Matrix6::identity();
    let mut d_power = Matrix6::zeros();
    let mut sum = Matrix6::zeros();
    for k in 1..terms {
        d_power = ad_dot * power + ad * d_power;
        power = ad * power;
        sum += d_power * series_coeff(k);
    }
    sum
}
