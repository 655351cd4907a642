use nalgebra::{Vector3, Vector4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::trajectory::TrajectorySpec;
use super::world::SimWorld;
use crate::exec::Exec;
use crate::imu::NoiseConfig;
use crate::manifold::{Intrinsics, Rotation3};
use crate::sensors::{CameraFrame, ImuSample, LidarPoint, LidarScan};

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent RNG stream keyed by `(seed, domain, index)`, so per-ray and
/// per-row noise does not depend on evaluation order.
pub fn stream_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(domain ^ splitmix(index))))
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gauss3(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    Vector3::new(gauss(rng), gauss(rng), gauss(rng))
}

const DOMAIN_IMU: u64 = 1;
const DOMAIN_LIDAR: u64 = 2;
const DOMAIN_CAMERA: u64 = 3;

/// IMU sample times: `i / rate` for every `i` with `i / rate ≤ duration`.
pub fn imu_times(spec: &TrajectorySpec) -> Vec<f64> {
    let n = (spec.duration * spec.imu_rate + 1e-9).floor() as usize;
    (0..=n).map(|i| i as f64 / spec.imu_rate).collect()
}

/// Synthesizes gyroscope and accelerometer readings along the trajectory.
///
/// `ω_m = ω + b_g + n_g`, `a_m = Rᵀ(a − g) + b_a + n_a`, with biases
/// following seeded random walks that start at zero.
pub fn synth_imu(spec: &TrajectorySpec, world: &SimWorld, noise: &NoiseConfig, seed: u64) -> Vec<ImuSample> {
    let mut rng = stream_rng(seed, DOMAIN_IMU, 0);
    let dt = 1.0 / spec.imu_rate;
    let sg = noise.gyro / dt.sqrt();
    let sa = noise.acc / dt.sqrt();
    let mut bg = Vector3::zeros();
    let mut ba = Vector3::zeros();
    imu_times(spec)
        .into_iter()
        .map(|t| {
            let gt = spec.sample_unchecked(t);
            let gyro = gt.angular_rate + bg + gauss3(&mut rng) * sg;
            let acc = gt.rot.matrix().transpose() * (gt.acc - world.gravity) + ba + gauss3(&mut rng) * sa;
            bg += gauss3(&mut rng) * (noise.bias_gyro * dt.sqrt());
            ba += gauss3(&mut rng) * (noise.bias_acc * dt.sqrt());
            ImuSample { t, gyro, acc }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    /// Columns fire together and the sweep advances column by column.
    Raster,
    /// Every point fires at its own instant, row after row.
    Lines,
}

/// Ray layout and emit timing of a LiDAR sweep, sensor frame (x forward,
/// z up).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanPattern {
    pub kind: PatternKind,
    /// Horizontal field of view in degrees; 360 for a spinning sensor.
    pub horizontal_fov_deg: f64,
    pub vertical_min_deg: f64,
    pub vertical_max_deg: f64,
    pub rows: usize,
    pub cols: usize,
    pub min_range: f64,
    pub max_range: f64,
}

impl ScanPattern {
    pub fn point_count(&self) -> usize {
        self.rows * self.cols
    }

    /// Unit ray direction and emit fraction in `(0, 1]` of ray `k`.
    pub fn ray(&self, k: usize) -> (Vector3<f64>, f64) {
        let (row, col) = (k / self.cols, k % self.cols);
        let full_circle = self.horizontal_fov_deg >= 360.0;
        let h = self.horizontal_fov_deg.to_radians();
        let az = if full_circle {
            -std::f64::consts::PI + h * col as f64 / self.cols as f64
        } else if self.cols > 1 {
            -h / 2.0 + h * col as f64 / (self.cols - 1) as f64
        } else {
            0.0
        };
        let (lo, hi) = (self.vertical_min_deg.to_radians(), self.vertical_max_deg.to_radians());
        let el = if self.rows > 1 {
            lo + (hi - lo) * row as f64 / (self.rows - 1) as f64
        } else {
            (lo + hi) / 2.0
        };
        let dir = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
        let frac = match self.kind {
            PatternKind::Raster => (col + 1) as f64 / self.cols as f64,
            PatternKind::Lines => (k + 1) as f64 / self.point_count() as f64,
        };
        (dir, frac)
    }
}

/// A simulated sweep in both its raw (motion-distorted) and ideal
/// (everything expressed at the end pose) forms.
#[derive(Debug, Clone, PartialEq)]
pub struct SimScan {
    pub distorted: LidarScan,
    pub undistorted: LidarScan,
    /// Source patch of each point.
    pub patch_ids: Vec<usize>,
}

/// Ray-casts one sweep over `[t_start, t_end]`. Rays that miss every patch
/// are dropped; Gaussian range noise is applied along the ray.
pub fn synth_lidar_scan(
    spec: &TrajectorySpec,
    world: &SimWorld,
    t_start: f64,
    t_end: f64,
    pattern: &ScanPattern,
    range_noise: f64,
    seed: u64,
) -> SimScan {
    synth_lidar_scan_with(Exec::default(), spec, world, t_start, t_end, pattern, range_noise, seed)
}

#[allow(clippy::too_many_arguments)]
pub fn synth_lidar_scan_with(
    exec: Exec,
    spec: &TrajectorySpec,
    world: &SimWorld,
    t_start: f64,
    t_end: f64,
    pattern: &ScanPattern,
    range_noise: f64,
    seed: u64,
) -> SimScan {
    let (end_rot, end_pos) = spec.pose(t_end);
    let scan_key = t_start.to_bits();
    let hits = exec.map_range(pattern.point_count(), |k| {
        let (dir, frac) = pattern.ray(k);
        let t = t_start + frac * (t_end - t_start);
        let (rot, pos) = spec.pose(t);
        let world_dir = rot.rotate(&dir);
        let hit = world.cast(&pos, &world_dir, pattern.min_range, pattern.max_range)?;
        let mut rng = stream_rng(seed ^ scan_key, DOMAIN_LIDAR, k as u64);
        let range = hit.range + gauss(&mut rng) * range_noise;
        let world_point = pos + world_dir * range;
        let ideal = end_rot.matrix().transpose() * (world_point - end_pos);
        Some((LidarPoint { t, p: dir * range }, LidarPoint { t, p: ideal }, hit.patch))
    });
    let mut distorted = Vec::with_capacity(hits.len());
    let mut undistorted = Vec::with_capacity(hits.len());
    let mut patch_ids = Vec::with_capacity(hits.len());
    for (d, u, id) in hits.into_iter().flatten() {
        distorted.push(d);
        undistorted.push(u);
        patch_ids.push(id);
    }
    SimScan {
        distorted: LidarScan {
            start: t_start,
            end: t_end,
            points: distorted,
        },
        undistorted: LidarScan {
            start: t_start,
            end: t_end,
            points: undistorted,
        },
        patch_ids,
    }
}

/// Camera calibration blocks of the state: extrinsics, time offset and
/// intrinsics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraCalibration {
    pub rot_ic: Rotation3,
    pub pos_ic: Vector3<f64>,
    /// The image stamped `t` was exposed at IMU time `t + time_offset`.
    pub time_offset: f64,
    pub intrinsics: Intrinsics,
}

impl CameraCalibration {
    /// Forward-looking camera (optical axis along body x, image x along
    /// body −y, image y along body −z).
    pub fn forward_looking(intrinsics: Intrinsics, pos_ic: Vector3<f64>) -> Self {
        let m = nalgebra::Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
        Self {
            rot_ic: Rotation3::from_matrix(m).expect("axis permutation is a rotation"),
            pos_ic,
            time_offset: 0.0,
            intrinsics,
        }
    }

    pub fn camera_pose(&self, body_rot: &Rotation3, body_pos: &Vector3<f64>) -> (Rotation3, Vector3<f64>) {
        (*body_rot * self.rot_ic, body_pos + body_rot.rotate(&self.pos_ic))
    }
}

/// Intentional calibration errors for convergence experiments.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibOffsets {
    /// Rotation vector applied on the right of `R_IC`, degrees.
    pub rot_deg: [f64; 3],
    pub pos_m: [f64; 3],
    pub time_offset_s: f64,
    /// `(f_x, f_y, c_x, c_y)` offsets, pixels.
    pub intrinsics_px: [f64; 4],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbedCalibration {
    pub init: CameraCalibration,
    pub offsets: CalibOffsets,
}

pub fn perturb_calibration(truth: &CameraCalibration, offsets: &CalibOffsets) -> PerturbedCalibration {
    let rot = Vector3::from(offsets.rot_deg).map(f64::to_radians);
    let init = CameraCalibration {
        rot_ic: truth.rot_ic * Rotation3::exp(&rot),
        pos_ic: truth.pos_ic + Vector3::from(offsets.pos_m),
        time_offset: truth.time_offset + offsets.time_offset_s,
        intrinsics: Intrinsics::from_vector(&(truth.intrinsics.as_vector() + Vector4::from(offsets.intrinsics_px))),
    };
    PerturbedCalibration {
        init,
        offsets: *offsets,
    }
}

/// Image geometry and noise of the simulated camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraModel {
    pub width: usize,
    pub height: usize,
    /// Additive per-channel Gaussian pixel noise (clamped to [0, 1]).
    pub pixel_noise: f64,
}

/// Unit-depth ray of pixel `(u, v)` in the camera frame.
pub fn pixel_ray(k: &Intrinsics, u: f64, v: f64) -> Vector3<f64> {
    Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0)
}

/// Ray-casts an image stamped `t`; the body pose is taken at
/// `t + calib.time_offset`.
pub fn synth_camera_image(
    spec: &TrajectorySpec,
    world: &SimWorld,
    t: f64,
    camera: &CameraModel,
    calib: &CameraCalibration,
    seed: u64,
) -> CameraFrame {
    synth_camera_image_with(Exec::default(), spec, world, t, camera, calib, seed)
}

pub fn synth_camera_image_with(
    exec: Exec,
    spec: &TrajectorySpec,
    world: &SimWorld,
    t: f64,
    camera: &CameraModel,
    calib: &CameraCalibration,
    seed: u64,
) -> CameraFrame {
    let (body_rot, body_pos) = spec.pose(t + calib.time_offset);
    let (cam_rot, cam_pos) = calib.camera_pose(&body_rot, &body_pos);
    let key = t.to_bits();
    let rows = exec.map_range(camera.height, |v| {
        let mut rng = (camera.pixel_noise > 0.0).then(|| stream_rng(seed ^ key, DOMAIN_CAMERA, v as u64));
        (0..camera.width)
            .map(|u| {
                let dir = cam_rot.rotate(&pixel_ray(&calib.intrinsics, u as f64, v as f64)).normalize();
                let rgb = match world.cast(&cam_pos, &dir, 1e-6, f64::INFINITY) {
                    Some(hit) => world.albedo_at(&hit),
                    None => world.background,
                };
                std::array::from_fn(|c| {
                    let n = rng.as_mut().map_or(0.0, |r| gauss(r) * camera.pixel_noise);
                    (rgb[c] + n).clamp(0.0, 1.0) as f32
                })
            })
            .collect::<Vec<[f32; 3]>>()
    });
    CameraFrame::new(t, camera.width, camera.height, rows.into_iter().flatten().collect())
}
