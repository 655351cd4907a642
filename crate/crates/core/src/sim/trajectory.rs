use std::f64::consts::TAU;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::Rotation3;

/// One additive term of a [`Waveform`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WaveTerm {
    /// `amplitude·sin(2π·frequency·t + phase)`.
    Sine { amplitude: f64, frequency: f64, phase: f64 },
    /// Quintic smoothstep from 0 to `delta` over `[t0, t1]` (C² continuous).
    Blend { t0: f64, t1: f64, delta: f64 },
}

impl WaveTerm {
    fn eval(&self, t: f64) -> [f64; 3] {
        match *self {
            WaveTerm::Sine {
                amplitude,
                frequency,
                phase,
            } => {
                let w = TAU * frequency;
                let (s, c) = (w * t + phase).sin_cos();
                [amplitude * s, amplitude * w * c, -amplitude * w * w * s]
            }
            WaveTerm::Blend { t0, t1, delta } => {
                if t <= t0 {
                    [0.0; 3]
                } else if t >= t1 {
                    [delta, 0.0, 0.0]
                } else {
                    let h = t1 - t0;
                    let u = (t - t0) / h;
                    let f = u * u * u * (10.0 + u * (-15.0 + 6.0 * u));
                    let df = 30.0 * u * u * (1.0 - u) * (1.0 - u);
                    let ddf = 60.0 * u * (1.0 - u) * (1.0 - 2.0 * u);
                    [delta * f, delta * df / h, delta * ddf / (h * h)]
                }
            }
        }
    }
}

/// Scalar signal `offset + rate·t + Σ terms` with analytic derivatives.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Waveform {
    pub offset: f64,
    pub rate: f64,
    pub terms: Vec<WaveTerm>,
}

impl Waveform {
    pub fn constant(offset: f64) -> Self {
        Self {
            offset,
            ..Default::default()
        }
    }

    pub fn linear(offset: f64, rate: f64) -> Self {
        Self {
            offset,
            rate,
            terms: vec![],
        }
    }

    pub fn with_sine(mut self, amplitude: f64, frequency: f64, phase: f64) -> Self {
        self.terms.push(WaveTerm::Sine {
            amplitude,
            frequency,
            phase,
        });
        self
    }

    pub fn with_blend(mut self, t0: f64, t1: f64, delta: f64) -> Self {
        self.terms.push(WaveTerm::Blend { t0, t1, delta });
        self
    }

    /// Value, first and second derivative at `t`.
    pub fn eval(&self, t: f64) -> [f64; 3] {
        let mut out = [self.offset + self.rate * t, self.rate, 0.0];
        for term in &self.terms {
            let v = term.eval(t);
            for k in 0..3 {
                out[k] += v[k];
            }
        }
        out
    }
}

/// Analytic trajectory of the IMU body frame plus sensor rates.
///
/// Attitude is `Rz(yaw)·Ry(pitch)·Rx(roll)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectorySpec {
    pub x: Waveform,
    pub y: Waveform,
    pub z: Waveform,
    pub yaw: Waveform,
    pub pitch: Waveform,
    pub roll: Waveform,
    pub duration: f64,
    #[serde(default = "default_imu_rate")]
    pub imu_rate: f64,
    #[serde(default = "default_lidar_rate")]
    pub lidar_rate: f64,
    #[serde(default = "default_camera_rate")]
    pub camera_rate: f64,
}

fn default_imu_rate() -> f64 {
    200.0
}
fn default_lidar_rate() -> f64 {
    10.0
}
fn default_camera_rate() -> f64 {
    20.0
}

/// Ground truth at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub rot: Rotation3,
    pub pos: Vector3<f64>,
    /// World-frame velocity.
    pub vel: Vector3<f64>,
    /// Body-frame angular rate.
    pub angular_rate: Vector3<f64>,
    /// World-frame acceleration.
    pub acc: Vector3<f64>,
}

impl TrajectorySpec {
    pub fn stationary(position: Vector3<f64>, yaw: f64, duration: f64) -> Self {
        Self {
            x: Waveform::constant(position.x),
            y: Waveform::constant(position.y),
            z: Waveform::constant(position.z),
            yaw: Waveform::constant(yaw),
            pitch: Waveform::default(),
            roll: Waveform::default(),
            duration,
            imu_rate: default_imu_rate(),
            lidar_rate: default_lidar_rate(),
            camera_rate: default_camera_rate(),
        }
    }

    /// Horizontal circle of `radius` at `height`, one revolution every
    /// `period` seconds, heading along the tangent.
    pub fn circle(radius: f64, height: f64, period: f64, duration: f64) -> Self {
        let f = 1.0 / period;
        Self {
            x: Waveform::default().with_sine(radius, f, std::f64::consts::FRAC_PI_2),
            y: Waveform::default().with_sine(radius, f, 0.0),
            z: Waveform::constant(height),
            yaw: Waveform::linear(std::f64::consts::FRAC_PI_2, TAU * f),
            pitch: Waveform::default(),
            roll: Waveform::default(),
            duration,
            imu_rate: default_imu_rate(),
            lidar_rate: default_lidar_rate(),
            camera_rate: default_camera_rate(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0) {
            return Err(Error::Config("trajectory duration must be positive".into()));
        }
        if !(self.imu_rate > 0.0 && self.lidar_rate > 0.0 && self.camera_rate > 0.0) {
            return Err(Error::Config("sensor rates must be positive".into()));
        }
        for w in [&self.x, &self.y, &self.z, &self.yaw, &self.pitch, &self.roll] {
            for term in &w.terms {
                if let WaveTerm::Blend { t0, t1, .. } = term {
                    if !(t1 > t0) {
                        return Err(Error::Config("blend needs t1 > t0".into()));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn check_time(&self, t: f64) -> Result<()> {
        if t < -1e-9 || t > self.duration + 1e-9 || !t.is_finite() {
            return Err(Error::TimeOutOfRange {
                t,
                duration: self.duration,
            });
        }
        Ok(())
    }

    /// Pose only; valid for any `t` (no range check).
    pub fn pose(&self, t: f64) -> (Rotation3, Vector3<f64>) {
        let rot = Rotation3::from_euler_zyx(self.yaw.eval(t)[0], self.pitch.eval(t)[0], self.roll.eval(t)[0]);
        let pos = Vector3::new(self.x.eval(t)[0], self.y.eval(t)[0], self.z.eval(t)[0]);
        (rot, pos)
    }

    pub fn sample(&self, t: f64) -> Result<GroundTruth> {
        self.check_time(t)?;
        Ok(self.sample_unchecked(t))
    }

    pub(crate) fn sample_unchecked(&self, t: f64) -> GroundTruth {
        let [x, vx, ax] = self.x.eval(t);
        let [y, vy, ay] = self.y.eval(t);
        let [z, vz, az] = self.z.eval(t);
        let [yaw, dyaw, _] = self.yaw.eval(t);
        let [pitch, dpitch, _] = self.pitch.eval(t);
        let [roll, droll, _] = self.roll.eval(t);
        let (sr, cr) = roll.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let angular_rate = Vector3::new(
            droll - dyaw * sp,
            dpitch * cr + dyaw * sr * cp,
            -dpitch * sr + dyaw * cr * cp,
        );
        GroundTruth {
            rot: Rotation3::from_euler_zyx(yaw, pitch, roll),
            pos: Vector3::new(x, y, z),
            vel: Vector3::new(vx, vy, vz),
            angular_rate,
            acc: Vector3::new(ax, ay, az),
        }
    }

    /// Path length by dense sampling of the speed.
    pub fn path_length(&self) -> f64 {
        let n = ((self.duration * 1000.0).ceil() as usize).max(1);
        let dt = self.duration / n as f64;
        (0..n)
            .map(|i| self.sample_unchecked((i as f64 + 0.5) * dt).vel.norm() * dt)
            .sum()
    }
}
