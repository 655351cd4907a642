//! SO(3) primitives and the 29-DOF composite estimator state.
//!
//! Rotations are stored as 3×3 matrices and perturbed on the right,
//! `R ⊞ δθ = R·exp(δθ)`. Every Jacobian in the crate is taken with respect to
//! the `⊞` defined here.

use nalgebra::{Matrix3, SMatrix, SVector, UnitQuaternion, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dimension of the error state: 8 three-vectors, the time offset and the
/// four intrinsics.
pub const STATE_DIM: usize = 29;

/// Tangent-space perturbation of a [`FullState`].
pub type ErrorState = SVector<f64, STATE_DIM>;
/// Covariance (or any square operator) over the error state.
pub type StateMatrix = SMatrix<f64, STATE_DIM, STATE_DIM>;

/// Offsets of each block inside an [`ErrorState`].
pub mod idx {
    pub const ROT: usize = 0;
    pub const POS: usize = 3;
    pub const VEL: usize = 6;
    pub const BIAS_GYRO: usize = 9;
    pub const BIAS_ACC: usize = 12;
    pub const GRAVITY: usize = 15;
    pub const ROT_IC: usize = 18;
    pub const POS_IC: usize = 21;
    pub const TIME_OFFSET: usize = 24;
    pub const INTRINSICS: usize = 25;
}

const ORTHO_TOL: f64 = 1e-9;

pub mod so3 {
    use super::*;

    /// Below this angle `exp` switches to its second-order series.
    pub const SMALL_ANGLE: f64 = 1e-7;
    const JACOBIAN_SERIES: f64 = 1e-5;

    #[inline]
    pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
        w.cross_matrix()
    }

    #[inline]
    pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
        Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
    }

    /// Rodrigues' formula.
    pub fn exp(w: &Vector3<f64>) -> Matrix3<f64> {
        let theta2 = w.norm_squared();
        let theta = theta2.sqrt();
        let k = hat(w);
        if theta < SMALL_ANGLE {
            Matrix3::identity() + k + 0.5 * k * k
        } else {
            let (s, c) = theta.sin_cos();
            Matrix3::identity() + (s / theta) * k + ((1.0 - c) / theta2) * k * k
        }
    }

    /// Principal logarithm, `‖result‖ ≤ π`.
    ///
    /// For rotations by exactly π the axis sign is ambiguous; the returned
    /// axis has its largest-magnitude component positive.
    pub fn log(r: &Matrix3<f64>) -> Vector3<f64> {
        let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        let skew = vee(&(r - r.transpose())) * 0.5; // sin(θ)·axis
        let sin = skew.norm();
        if cos > 0.0 && sin < 1e-7 {
            // θ ≈ sin θ here; first-order correction keeps 1e-15 accuracy.
            return skew * (1.0 + sin * sin / 6.0);
        }
        if cos > -0.9 {
            let theta = sin.atan2(cos);
            return skew * (theta / sin);
        }
        // Near π: recover the axis from the symmetric part, aaᵀ = (S − cI)/(1 − c).
        let sym = (r + r.transpose()) * 0.5;
        let m = (sym - Matrix3::identity() * cos) / (1.0 - cos);
        let i = (0..3)
            .max_by(|&a, &b| m[(a, a)].total_cmp(&m[(b, b)]))
            .unwrap_or(0);
        let ai = m[(i, i)].max(0.0).sqrt();
        let mut axis = Vector3::new(m[(0, i)], m[(1, i)], m[(2, i)]) / ai;
        axis.normalize_mut();
        let mut s = axis.dot(&skew);
        if s < 0.0 {
            axis = -axis;
            s = -s;
        }
        if s < 1e-12 {
            let j = (0..3)
                .max_by(|&a, &b| axis[a].abs().total_cmp(&axis[b].abs()))
                .unwrap_or(0);
            if axis[j] < 0.0 {
                axis = -axis;
            }
        }
        axis * s.atan2(cos)
    }

    /// Right Jacobian `Jr(φ)`: `exp(φ + δ) ≈ exp(φ)·exp(Jr(φ)δ)`.
    pub fn right_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
        let theta2 = w.norm_squared();
        let k = hat(w);
        let (a, b) = if theta2.sqrt() < JACOBIAN_SERIES {
            (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
        } else {
            let theta = theta2.sqrt();
            let (s, c) = theta.sin_cos();
            ((1.0 - c) / theta2, (theta - s) / (theta2 * theta))
        };
        Matrix3::identity() - a * k + b * k * k
    }

    /// Inverse of [`right_jacobian`]: `log(exp(φ)·exp(δ)) ≈ φ + Jr⁻¹(φ)δ`.
    pub fn right_jacobian_inv(w: &Vector3<f64>) -> Matrix3<f64> {
        let theta2 = w.norm_squared();
        let k = hat(w);
        let c2 = if theta2.sqrt() < JACOBIAN_SERIES {
            1.0 / 12.0 + theta2 / 720.0
        } else {
            let theta = theta2.sqrt();
            let (s, c) = theta.sin_cos();
            1.0 / theta2 - (1.0 + c) / (2.0 * theta * s)
        };
        Matrix3::identity() + 0.5 * k + c2 * k * k
    }

    /// Left Jacobian, equal to `(1/Δt)∫₀^Δt exp(wτ/Δt) dτ` for `w = ωΔt`.
    pub fn left_jacobian(w: &Vector3<f64>) -> Matrix3<f64> {
        right_jacobian(&-w)
    }

    /// Double integral `(1/Δt²)∫₀^Δt∫₀^s exp(ωτ) dτ ds` for `w = ωΔt`.
    pub fn double_integral(w: &Vector3<f64>) -> Matrix3<f64> {
        let theta2 = w.norm_squared();
        let k = hat(w);
        let (a, b) = if theta2.sqrt() < JACOBIAN_SERIES {
            (1.0 / 6.0 - theta2 / 120.0, 1.0 / 24.0 - theta2 / 720.0)
        } else {
            let theta = theta2.sqrt();
            let (s, c) = theta.sin_cos();
            (
                (theta - s) / (theta2 * theta),
                (theta2 + 2.0 * c - 2.0) / (2.0 * theta2 * theta2),
            )
        };
        Matrix3::identity() * 0.5 + a * k + b * k * k
    }
}

/// A 3×3 rotation matrix. Construction through [`Rotation3::from_matrix`]
/// checks orthonormality and orientation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Matrix3<f64>", into = "Matrix3<f64>")]
pub struct Rotation3(Matrix3<f64>);

impl Rotation3 {
    pub fn identity() -> Self {
        Rotation3(Matrix3::identity())
    }

    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        let orthogonality = (m.transpose() * m - Matrix3::identity()).abs().max();
        let det = m.determinant();
        if !orthogonality.is_finite() || orthogonality > ORTHO_TOL || (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::InvalidRotation { orthogonality, det });
        }
        Ok(Rotation3(m))
    }

    /// Wraps a matrix the caller knows to be a rotation.
    pub(crate) fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Rotation3(m)
    }

    pub fn exp(w: &Vector3<f64>) -> Self {
        Rotation3(so3::exp(w))
    }

    pub fn log(&self) -> Vector3<f64> {
        so3::log(&self.0)
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        Self::exp(&(axis.normalize() * angle))
    }

    /// Z-Y-X (yaw, pitch, roll) Euler angles.
    pub fn from_euler_zyx(yaw: f64, pitch: f64, roll: f64) -> Self {
        let rz = so3::exp(&Vector3::new(0.0, 0.0, yaw));
        let ry = so3::exp(&Vector3::new(0.0, pitch, 0.0));
        let rx = so3::exp(&Vector3::new(roll, 0.0, 0.0));
        Rotation3(rz * ry * rx)
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>) -> Self {
        Rotation3(*q.to_rotation_matrix().matrix())
    }

    /// Shepperd's method: pivot on the largest of `w², x², y², z²`.
    pub fn to_quaternion(&self) -> UnitQuaternion<f64> {
        let m = &self.0;
        let tr = m.trace();
        let cands = [tr, m[(0, 0)], m[(1, 1)], m[(2, 2)]];
        let (k, _) = cands
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
        let (w, x, y, z) = match k {
            0 => {
                let s = 2.0 * (1.0 + tr).sqrt();
                (0.25 * s, (m[(2, 1)] - m[(1, 2)]) / s, (m[(0, 2)] - m[(2, 0)]) / s, (m[(1, 0)] - m[(0, 1)]) / s)
            }
            1 => {
                let s = 2.0 * (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt();
                ((m[(2, 1)] - m[(1, 2)]) / s, 0.25 * s, (m[(0, 1)] + m[(1, 0)]) / s, (m[(0, 2)] + m[(2, 0)]) / s)
            }
            2 => {
                let s = 2.0 * (1.0 - m[(0, 0)] + m[(1, 1)] - m[(2, 2)]).sqrt();
                ((m[(0, 2)] - m[(2, 0)]) / s, (m[(0, 1)] + m[(1, 0)]) / s, 0.25 * s, (m[(1, 2)] + m[(2, 1)]) / s)
            }
            _ => {
                let s = 2.0 * (1.0 - m[(0, 0)] - m[(1, 1)] + m[(2, 2)]).sqrt();
                ((m[(1, 0)] - m[(0, 1)]) / s, (m[(0, 2)] + m[(2, 0)]) / s, (m[(1, 2)] + m[(2, 1)]) / s, 0.25 * s)
            }
        };
        UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, x, y, z))
    }

    #[inline]
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    #[inline]
    pub fn transpose(&self) -> Self {
        Rotation3(self.0.transpose())
    }

    #[inline]
    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Geodesic distance to `other`, radians.
    pub fn angle_to(&self, other: &Rotation3) -> f64 {
        so3::log(&(self.0.transpose() * other.0)).norm()
    }

    /// Projects back onto SO(3) to shed accumulated round-off (one
    /// Newton-Schulz step, `R(3I − RᵀR)/2`).
    pub fn renormalized(&self) -> Self {
        let m = self.0;
        Rotation3(m * (Matrix3::identity() * 3.0 - m.transpose() * m) * 0.5)
    }
}

impl std::ops::Mul for Rotation3 {
    type Output = Rotation3;
    fn mul(self, rhs: Rotation3) -> Rotation3 {
        Rotation3(self.0 * rhs.0)
    }
}

impl TryFrom<Matrix3<f64>> for Rotation3 {
    type Error = Error;
    fn try_from(m: Matrix3<f64>) -> Result<Self> {
        let orthogonality = (m.transpose() * m - Matrix3::identity()).abs().max();
        if orthogonality <= 1e-13 && (m.determinant() - 1.0).abs() <= 1e-13 {
            return Ok(Rotation3(m));
        }
        // Decimal round-off from hand-written files; re-project before checking.
        let r = nalgebra::Rotation3::from_matrix_eps(&m, 1e-12, 100, nalgebra::Rotation3::identity());
        if (m - r.matrix()).abs().max() > 1e-6 {
            return Rotation3::from_matrix(m);
        }
        Ok(Rotation3(*r.matrix()))
    }
}

impl From<Rotation3> for Matrix3<f64> {
    fn from(r: Rotation3) -> Self {
        r.0
    }
}

/// Pinhole intrinsics φ = (f_x, f_y, c_x, c_y), pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self { fx, fy, cx, cy }
    }

    pub fn as_vector(&self) -> Vector4<f64> {
        Vector4::new(self.fx, self.fy, self.cx, self.cy)
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

/// The full estimator state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FullState {
    /// IMU attitude in the global frame.
    pub rot: Rotation3,
    /// IMU position in the global frame, meters.
    pub pos: Vector3<f64>,
    /// Velocity in the global frame, m/s.
    pub vel: Vector3<f64>,
    pub bias_gyro: Vector3<f64>,
    pub bias_acc: Vector3<f64>,
    pub gravity: Vector3<f64>,
    /// Camera-to-IMU rotation.
    pub rot_ic: Rotation3,
    /// Camera origin in the IMU frame, meters.
    pub pos_ic: Vector3<f64>,
    /// Camera-IMU time offset, seconds.
    pub time_offset: f64,
    pub intrinsics: Intrinsics,
}

impl FullState {
    /// Identity pose, zero motion and biases, standard gravity along −z.
    pub fn with_calibration(rot_ic: Rotation3, pos_ic: Vector3<f64>, time_offset: f64, intrinsics: Intrinsics) -> Self {
        Self {
            rot: Rotation3::identity(),
            pos: Vector3::zeros(),
            vel: Vector3::zeros(),
            bias_gyro: Vector3::zeros(),
            bias_acc: Vector3::zeros(),
            gravity: Vector3::new(0.0, 0.0, -9.81),
            rot_ic,
            pos_ic,
            time_offset,
            intrinsics,
        }
    }

    pub fn boxplus(&self, d: &ErrorState) -> FullState {
        let v3 = |i: usize| Vector3::new(d[i], d[i + 1], d[i + 2]);
        FullState {
            rot: Rotation3(self.rot.0 * so3::exp(&v3(idx::ROT))),
            pos: self.pos + v3(idx::POS),
            vel: self.vel + v3(idx::VEL),
            bias_gyro: self.bias_gyro + v3(idx::BIAS_GYRO),
            bias_acc: self.bias_acc + v3(idx::BIAS_ACC),
            gravity: self.gravity + v3(idx::GRAVITY),
            rot_ic: Rotation3(self.rot_ic.0 * so3::exp(&v3(idx::ROT_IC))),
            pos_ic: self.pos_ic + v3(idx::POS_IC),
            time_offset: self.time_offset + d[idx::TIME_OFFSET],
            intrinsics: Intrinsics::from_vector(
                &(self.intrinsics.as_vector() + d.fixed_rows::<4>(idx::INTRINSICS)),
            ),
        }
    }

    /// `self ⊟ other`: the perturbation δ with `other ⊞ δ = self`.
    pub fn boxminus(&self, other: &FullState) -> ErrorState {
        let mut d = ErrorState::zeros();
        let mut put = |i: usize, v: Vector3<f64>| d.fixed_rows_mut::<3>(i).copy_from(&v);
        put(idx::ROT, so3::log(&(other.rot.0.transpose() * self.rot.0)));
        put(idx::POS, self.pos - other.pos);
        put(idx::VEL, self.vel - other.vel);
        put(idx::BIAS_GYRO, self.bias_gyro - other.bias_gyro);
        put(idx::BIAS_ACC, self.bias_acc - other.bias_acc);
        put(idx::GRAVITY, self.gravity - other.gravity);
        put(idx::ROT_IC, so3::log(&(other.rot_ic.0.transpose() * self.rot_ic.0)));
        put(idx::POS_IC, self.pos_ic - other.pos_ic);
        d[idx::TIME_OFFSET] = self.time_offset - other.time_offset;
        d.fixed_rows_mut::<4>(idx::INTRINSICS)
            .copy_from(&(self.intrinsics.as_vector() - other.intrinsics.as_vector()));
        d
    }

    /// Camera attitude in the global frame, `R_GI·R_IC`.
    pub fn camera_rotation(&self) -> Matrix3<f64> {
        self.rot.0 * self.rot_ic.0
    }

    /// Camera center in the global frame.
    pub fn camera_center(&self) -> Vector3<f64> {
        self.pos + self.rot.0 * self.pos_ic
    }
}

/// Jacobian `𝓗 = ∂[(x̌ ⊞ δ) ⊟ x̂]/∂δ` at δ = 0, mapping a perturbation in the
/// tangent space of `x_check` to the tangent space of `x_hat`.
///
/// Block-diagonal: `Jr⁻¹` of the rotation residual on both rotation blocks,
/// identity on the additive blocks.
pub fn tangent_projection(x_check: &FullState, x_hat: &FullState) -> StateMatrix {
    let mut m = StateMatrix::identity();
    let r_body = so3::log(&(x_hat.rot.0.transpose() * x_check.rot.0));
    let r_ext = so3::log(&(x_hat.rot_ic.0.transpose() * x_check.rot_ic.0));
    m.fixed_view_mut::<3, 3>(idx::ROT, idx::ROT)
        .copy_from(&so3::right_jacobian_inv(&r_body));
    m.fixed_view_mut::<3, 3>(idx::ROT_IC, idx::ROT_IC)
        .copy_from(&so3::right_jacobian_inv(&r_ext));
    m
}

/// Closed-form inverse of [`tangent_projection`] (`Jr` on the rotation blocks).
pub fn tangent_projection_inverse(x_check: &FullState, x_hat: &FullState) -> StateMatrix {
    let mut m = StateMatrix::identity();
    let r_body = so3::log(&(x_hat.rot.0.transpose() * x_check.rot.0));
    let r_ext = so3::log(&(x_hat.rot_ic.0.transpose() * x_check.rot_ic.0));
    m.fixed_view_mut::<3, 3>(idx::ROT, idx::ROT)
        .copy_from(&so3::right_jacobian(&r_body));
    m.fixed_view_mut::<3, 3>(idx::ROT_IC, idx::ROT_IC)
        .copy_from(&so3::right_jacobian(&r_ext));
    m
}

/// State estimate with its error-state covariance, valid at time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateWithCov {
    pub x: FullState,
    pub cov: StateMatrix,
    pub t: f64,
}

impl StateWithCov {
    pub fn new(x: FullState, cov: StateMatrix, t: f64) -> Self {
        Self { x, cov, t }
    }

    pub fn symmetrize(&mut self) {
        self.cov = (self.cov + self.cov.transpose()) * 0.5;
    }

    pub fn position_cov(&self) -> Matrix3<f64> {
        self.cov.fixed_view::<3, 3>(idx::POS, idx::POS).into_owned()
    }

    pub fn rotation_cov(&self) -> Matrix3<f64> {
        self.cov.fixed_view::<3, 3>(idx::ROT, idx::ROT).into_owned()
    }
}
