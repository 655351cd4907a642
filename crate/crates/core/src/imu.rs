//! IMU mean/covariance propagation and backward motion compensation of scans.
//!
//! Each IMU sample is held constant until the next one (zero-order hold).
//! Within a held interval the kinematics are integrated in closed form, so
//! splitting an interval anywhere gives the same result as integrating it in
//! one piece.

use nalgebra::{Matrix3, SMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::{idx, so3, FullState, Rotation3, StateWithCov};
use crate::sensors::{check_monotone, ImuSample, LidarPoint, LidarScan};

/// Noise densities. Measurement densities are per √Hz, random-walk densities
/// per √s; the discrete sample noise of a sensor at rate `f` is `σ·√f`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// Gyroscope noise density, rad/s/√Hz.
    pub gyro: f64,
    /// Accelerometer noise density, m/s²/√Hz.
    pub acc: f64,
    /// Gyroscope bias random walk, rad/s/√s.
    pub bias_gyro: f64,
    /// Accelerometer bias random walk, m/s²/√s.
    pub bias_acc: f64,
    /// Per-channel map color random walk, 1/√s.
    pub color: f64,
    /// Optional random walks on the otherwise constant blocks.
    pub gravity: f64,
    pub rot_ic: f64,
    pub pos_ic: f64,
    pub time_offset: f64,
    pub intrinsics: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            gyro: 1e-3,
            acc: 1e-2,
            bias_gyro: 1e-5,
            bias_acc: 1e-4,
            color: 0.0,
            gravity: 0.0,
            rot_ic: 0.0,
            pos_ic: 0.0,
            time_offset: 0.0,
            intrinsics: 0.0,
        }
    }
}

impl NoiseConfig {
    pub fn zero() -> Self {
        Self {
            gyro: 0.0,
            acc: 0.0,
            bias_gyro: 0.0,
            bias_acc: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.gyro,
            self.acc,
            self.bias_gyro,
            self.bias_acc,
            self.color,
            self.gravity,
            self.rot_ic,
            self.pos_ic,
            self.time_offset,
            self.intrinsics,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("noise densities must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Kinematic part of the state carried through integration.
#[derive(Debug, Clone, Copy)]
struct Kinematics {
    rot: Matrix3<f64>,
    pos: Vector3<f64>,
    vel: Vector3<f64>,
}

/// Exact integration over `dt` with body rate `w` and specific force `a`
/// (both bias-corrected) held constant.
fn integrate(k: &Kinematics, w: &Vector3<f64>, a: &Vector3<f64>, g: &Vector3<f64>, dt: f64) -> Kinematics {
    let phi = w * dt;
    let rot = k.rot * so3::exp(&phi);
    let vel = k.vel + g * dt + k.rot * (so3::left_jacobian(&phi) * a) * dt;
    let pos = k.pos + k.vel * dt + g * (0.5 * dt * dt) + k.rot * (so3::double_integral(&phi) * a) * (dt * dt);
    Kinematics { rot, pos, vel }
}

/// Inverse of [`integrate`]: recovers the kinematics `dt` earlier.
fn integrate_back(k: &Kinematics, w: &Vector3<f64>, a: &Vector3<f64>, g: &Vector3<f64>, dt: f64) -> Kinematics {
    let phi = w * dt;
    let rot = k.rot * so3::exp(&phi).transpose();
    let vel = k.vel - g * dt - rot * (so3::left_jacobian(&phi) * a) * dt;
    let pos = k.pos - vel * dt - g * (0.5 * dt * dt) - rot * (so3::double_integral(&phi) * a) * (dt * dt);
    Kinematics { rot, pos, vel }
}

/// Index of the sample in effect at time `t` (last sample with `s.t ≤ t`,
/// or the first sample when `t` precedes the batch).
fn active_sample(imu: &[ImuSample], t: f64) -> usize {
    imu.partition_point(|s| s.t <= t).saturating_sub(1)
}

/// Error-state transition and process noise over one held interval.
/// Only the first 18 rows/columns (pose, velocity, biases, gravity) move.
fn transition(
    rot: &Matrix3<f64>,
    w: &Vector3<f64>,
    a: &Vector3<f64>,
    dt: f64,
) -> SMatrix<f64, 18, 18> {
    let mut f = SMatrix::<f64, 18, 18>::identity();
    let phi = w * dt;
    let ra_hat = rot * so3::hat(a);
    f.fixed_view_mut::<3, 3>(idx::ROT, idx::ROT).copy_from(&so3::exp(&phi).transpose());
    f.fixed_view_mut::<3, 3>(idx::ROT, idx::BIAS_GYRO)
        .copy_from(&(-so3::right_jacobian(&phi) * dt));
    f.fixed_view_mut::<3, 3>(idx::POS, idx::ROT)
        .copy_from(&(-ra_hat * (0.5 * dt * dt)));
    f.fixed_view_mut::<3, 3>(idx::POS, idx::VEL)
        .copy_from(&(Matrix3::identity() * dt));
    f.fixed_view_mut::<3, 3>(idx::POS, idx::BIAS_ACC)
        .copy_from(&(-rot * (0.5 * dt * dt)));
    f.fixed_view_mut::<3, 3>(idx::POS, idx::GRAVITY)
        .copy_from(&(Matrix3::identity() * (0.5 * dt * dt)));
    f.fixed_view_mut::<3, 3>(idx::VEL, idx::ROT).copy_from(&(-ra_hat * dt));
    f.fixed_view_mut::<3, 3>(idx::VEL, idx::BIAS_ACC).copy_from(&(-rot * dt));
    f.fixed_view_mut::<3, 3>(idx::VEL, idx::GRAVITY)
        .copy_from(&(Matrix3::identity() * dt));
    f
}

fn add_diag(cov: &mut crate::manifold::StateMatrix, start: usize, len: usize, var: f64) {
    for i in start..start + len {
        cov[(i, i)] += var;
    }
}

/// One held interval of mean and covariance propagation.
fn step(state: &mut StateWithCov, sample: &ImuSample, dt: f64, noise: &NoiseConfig) {
    if dt <= 0.0 {
        return;
    }
    let x = &mut state.x;
    let w = sample.gyro - x.bias_gyro;
    let a = sample.acc - x.bias_acc;
    let f = transition(x.rot.matrix(), &w, &a, dt);
    let k = integrate(
        &Kinematics {
            rot: *x.rot.matrix(),
            pos: x.pos,
            vel: x.vel,
        },
        &w,
        &a,
        &x.gravity,
        dt,
    );
    x.rot = Rotation3::from_matrix_unchecked(k.rot).renormalized();
    x.pos = k.pos;
    x.vel = k.vel;

    let cov = &mut state.cov;
    let aa = cov.fixed_view::<18, 18>(0, 0).into_owned();
    let ab = cov.fixed_view::<18, 11>(0, 18).into_owned();
    let new_aa = f * aa * f.transpose();
    let new_ab = f * ab;
    cov.fixed_view_mut::<18, 18>(0, 0).copy_from(&new_aa);
    cov.fixed_view_mut::<18, 11>(0, 18).copy_from(&new_ab);
    cov.fixed_view_mut::<11, 18>(18, 0).copy_from(&new_ab.transpose());

    add_diag(cov, idx::ROT, 3, noise.gyro * noise.gyro * dt);
    add_diag(cov, idx::VEL, 3, noise.acc * noise.acc * dt);
    add_diag(cov, idx::BIAS_GYRO, 3, noise.bias_gyro * noise.bias_gyro * dt);
    add_diag(cov, idx::BIAS_ACC, 3, noise.bias_acc * noise.bias_acc * dt);
    add_diag(cov, idx::GRAVITY, 3, noise.gravity * noise.gravity * dt);
    add_diag(cov, idx::ROT_IC, 3, noise.rot_ic * noise.rot_ic * dt);
    add_diag(cov, idx::POS_IC, 3, noise.pos_ic * noise.pos_ic * dt);
    add_diag(cov, idx::TIME_OFFSET, 1, noise.time_offset * noise.time_offset * dt);
    add_diag(cov, idx::INTRINSICS, 4, noise.intrinsics * noise.intrinsics * dt);
    state.symmetrize();
}

/// Propagates `prior` (valid at `prior.t`) to `t_end`.
///
/// Sample `i` drives the interval `[tᵢ, tᵢ₊₁)`. An interval that contains no
/// sample start reuses the last sample at or before it, and the first sample
/// covers any time before the batch begins.
pub fn propagate(prior: &StateWithCov, imu: &[ImuSample], t_end: f64, noise: &NoiseConfig) -> Result<StateWithCov> {
    if imu.is_empty() {
        return Err(Error::NoImuData);
    }
    check_monotone(imu, |s| s.t)?;
    if t_end < prior.t {
        return Err(Error::NonMonotoneTimestamps { index: 0, t: t_end });
    }
    let mut state = prior.clone();
    let mut t = prior.t;
    let mut i = active_sample(imu, t);
    while t < t_end {
        let next = imu
            .get(i + 1)
            .map(|s| s.t)
            .filter(|&nt| nt < t_end && nt > t)
            .unwrap_or(t_end);
        step(&mut state, &imu[i], next - t, noise);
        t = next;
        if i + 1 < imu.len() && imu[i + 1].t <= t {
            i += 1;
        }
    }
    state.t = t_end;
    Ok(state)
}

/// Pose of the IMU at arbitrary times inside `[t_start, t_end]`, obtained by
/// integrating backward from the state at `t_end` with constant biases.
pub struct BackwardPoses {
    /// Kinematics at each knot, with the sample driving `[knot, next knot)`.
    knots: Vec<(f64, Kinematics, Vector3<f64>, Vector3<f64>)>,
    gravity: Vector3<f64>,
    end_rot: Matrix3<f64>,
    end_pos: Vector3<f64>,
}

impl BackwardPoses {
    pub fn new(imu: &[ImuSample], state_end: &FullState, t_start: f64, t_end: f64) -> Result<Self> {
        if imu.is_empty() {
            return Err(Error::NoImuData);
        }
        check_monotone(imu, |s| s.t)?;
        let mut bounds: Vec<f64> = imu
            .iter()
            .map(|s| s.t)
            .filter(|&t| t > t_start && t < t_end)
            .collect();
        bounds.insert(0, t_start);
        let mut knots = Vec::with_capacity(bounds.len());
        let mut k = Kinematics {
            rot: *state_end.rot.matrix(),
            pos: state_end.pos,
            vel: state_end.vel,
        };
        let mut t = t_end;
        for &b in bounds.iter().rev() {
            let s = &imu[active_sample(imu, b)];
            let w = s.gyro - state_end.bias_gyro;
            let a = s.acc - state_end.bias_acc;
            k = integrate_back(&k, &w, &a, &state_end.gravity, t - b);
            knots.push((b, k, w, a));
            t = b;
        }
        knots.reverse();
        Ok(Self {
            knots,
            gravity: state_end.gravity,
            end_rot: *state_end.rot.matrix(),
            end_pos: state_end.pos,
        })
    }

    /// Re-expresses a sensor-frame point measured at `t` in the end frame.
    pub fn to_end_frame(&self, t: f64, p: &Vector3<f64>) -> Vector3<f64> {
        let j = self.knots.partition_point(|kn| kn.0 <= t).saturating_sub(1);
        let (tk, kin, w, a) = &self.knots[j];
        let k = integrate(kin, w, a, &self.gravity, t - tk);
        self.end_rot.transpose() * (k.rot * p + k.pos - self.end_pos)
    }
}

/// Removes motion distortion: every point is re-expressed in the IMU frame
/// at the scan end, using the pose recovered by integrating backward from
/// `state_end`.
pub fn backward_compensate(scan: &LidarScan, imu: &[ImuSample], state_end: &FullState) -> Result<LidarScan> {
    for (index, pt) in scan.points.iter().enumerate() {
        if !(pt.t >= scan.start && pt.t <= scan.end) {
            return Err(Error::PointOutsideScan {
                index,
                t: pt.t,
                start: scan.start,
                end: scan.end,
            });
        }
    }
    let poses = BackwardPoses::new(imu, state_end, scan.start, scan.end)?;
    let points = scan
        .points
        .iter()
        .map(|pt| LidarPoint {
            t: pt.t,
            p: poses.to_end_frame(pt.t, &pt.p),
        })
        .collect();
    Ok(LidarScan {
        start: scan.start,
        end: scan.end,
        points,
    })
}
