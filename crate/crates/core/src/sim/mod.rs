//! Synthetic worlds, trajectories and sensor streams with exact ground truth.

mod dataset;
pub mod presets;
mod synth;
mod trajectory;
mod world;

use std::path::PathBuf;
use std::sync::Arc;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

pub use dataset::{read_sequence, write_sequence, SEQUENCE_FILES};
pub use synth::{
    imu_times, perturb_calibration, pixel_ray, stream_rng, synth_camera_image, synth_camera_image_with, synth_imu,
    synth_lidar_scan, synth_lidar_scan_with, CalibOffsets, CameraCalibration, CameraModel, PatternKind,
    PerturbedCalibration, ScanPattern, SimScan,
};
pub use trajectory::{GroundTruth, TrajectorySpec, WaveTerm, Waveform};
pub use world::{Albedo, Hit, Patch, SimWorld};

use crate::error::{Error, Result};
use crate::eval::{StampedPose, Trajectory};
use crate::exec::Exec;
use crate::imu::NoiseConfig;
use crate::manifold::Rotation3;
use crate::sensors::{CameraFrame, ImuSample, LidarScan};

/// Everything needed to synthesize a sequence.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub world: SimWorld,
    pub trajectory: TrajectorySpec,
    pub lidar: ScanPattern,
    /// Standard deviation of the range noise, meters.
    pub range_noise: f64,
    /// Only the gyro, accelerometer and bias entries are used.
    pub imu_noise: NoiseConfig,
    /// `None` produces a sequence without images.
    pub camera: Option<CameraModel>,
    /// True camera calibration.
    pub calibration: CameraCalibration,
    /// Errors applied to the calibration handed to the estimator.
    #[serde(default)]
    pub calib_offsets: CalibOffsets,
    pub seed: u64,
    /// Interval during which the LiDAR is expected to see a single plane.
    #[serde(default)]
    pub degenerate_window: Option<[f64; 2]>,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.trajectory.validate()?;
        self.imu_noise.validate()?;
        let l = &self.lidar;
        if l.rows == 0 || l.cols == 0 || !(l.max_range > l.min_range) || !(l.min_range >= 0.0) {
            return Err(Error::Config("lidar pattern needs rows, cols > 0 and max_range > min_range ≥ 0".into()));
        }
        if !(self.range_noise >= 0.0) {
            return Err(Error::Config("range_noise must be non-negative".into()));
        }
        if let Some(c) = &self.camera {
            if c.width == 0 || c.height == 0 || !(c.pixel_noise >= 0.0) {
                return Err(Error::Config("camera needs a non-empty image and non-negative pixel noise".into()));
            }
        }
        let k = &self.calibration.intrinsics;
        if !(k.fx > 0.0 && k.fy > 0.0) {
            return Err(Error::Config("focal lengths must be positive".into()));
        }
        Ok(())
    }

    /// `(start, end)` of every full LiDAR sweep.
    pub fn scan_windows(&self) -> Vec<(f64, f64)> {
        let rate = self.trajectory.lidar_rate;
        let n = (self.trajectory.duration * rate + 1e-9).floor() as usize;
        (0..n).map(|k| (k as f64 / rate, (k + 1) as f64 / rate)).collect()
    }

    /// Image stamps whose exposure time falls inside the trajectory.
    pub fn frame_times(&self) -> Vec<f64> {
        if self.camera.is_none() {
            return vec![];
        }
        let rate = self.trajectory.camera_rate;
        let d = self.trajectory.duration;
        let offset = self.calibration.time_offset;
        (1..)
            .map(|j| j as f64 / rate)
            .take_while(|&t| t <= d + 1e-9)
            .filter(|&t| t + offset >= 0.0 && t + offset <= d)
            .collect()
    }

    pub fn render_frame(&self, t: f64) -> Option<CameraFrame> {
        let cam = self.camera.as_ref()?;
        Some(synth_camera_image(&self.trajectory, &self.world, t, cam, &self.calibration, self.seed))
    }
}

/// Body state the estimator starts from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitialState {
    pub t: f64,
    pub rot: Rotation3,
    pub pos: Vector3<f64>,
    pub vel: Vector3<f64>,
    pub gravity: Vector3<f64>,
}

/// Where camera images come from.
#[derive(Debug, Clone)]
pub enum FrameSource {
    /// Rendered on demand from the scenario.
    Render(Arc<Scenario>),
    /// `camera/NNNNNN.ppm` files below a sequence directory.
    Disk(PathBuf),
    Memory(Vec<CameraFrame>),
}

#[derive(Debug, Clone)]
pub struct Frames {
    pub times: Vec<f64>,
    pub source: FrameSource,
}

impl Frames {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn load(&self, i: usize) -> Result<CameraFrame> {
        let t = self.times[i];
        match &self.source {
            FrameSource::Render(s) => s
                .render_frame(t)
                .ok_or_else(|| Error::Config("scenario has no camera".into())),
            FrameSource::Disk(dir) => dataset::read_frame(dir, i, t),
            FrameSource::Memory(v) => Ok(v[i].clone()),
        }
    }
}

/// A full set of measurements plus ground truth and calibration metadata.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub scenario: Arc<Scenario>,
    pub imu: Vec<ImuSample>,
    /// Motion-distorted sweeps.
    pub scans: Vec<LidarScan>,
    /// Distinct patches hit by each sweep (empty when read from disk).
    pub scan_patches: Vec<Vec<usize>>,
    pub frames: Frames,
    /// Ground truth at every IMU sample time.
    pub ground_truth: Trajectory,
    pub calibration: PerturbedCalibration,
    pub initial: InitialState,
}

impl Sequence {
    /// Synthesizes every stream of `scenario`; images are rendered lazily.
    pub fn generate(scenario: Scenario) -> Result<Sequence> {
        scenario.validate()?;
        let scenario = Arc::new(scenario);
        let spec = &scenario.trajectory;
        let imu = synth_imu(spec, &scenario.world, &scenario.imu_noise, scenario.seed);
        let sims: Vec<SimScan> = scenario
            .scan_windows()
            .into_iter()
            .map(|(a, b)| {
                synth_lidar_scan_with(
                    Exec::default(),
                    spec,
                    &scenario.world,
                    a,
                    b,
                    &scenario.lidar,
                    scenario.range_noise,
                    scenario.seed,
                )
            })
            .collect();
        let mut scans = Vec::with_capacity(sims.len());
        let mut scan_patches = Vec::with_capacity(sims.len());
        for s in sims {
            let mut ids = s.patch_ids;
            ids.sort_unstable();
            ids.dedup();
            scan_patches.push(ids);
            scans.push(s.distorted);
        }
        let ground_truth = Trajectory::new(
            imu.iter()
                .map(|s| {
                    let (rot, pos) = spec.pose(s.t);
                    StampedPose { t: s.t, rot, pos }
                })
                .collect(),
        )?;
        let gt0 = spec.sample_unchecked(0.0);
        let initial = InitialState {
            t: 0.0,
            rot: gt0.rot,
            pos: gt0.pos,
            vel: gt0.vel,
            gravity: scenario.world.gravity,
        };
        let calibration = perturb_calibration(&scenario.calibration, &scenario.calib_offsets);
        let frames = Frames {
            times: scenario.frame_times(),
            source: FrameSource::Render(scenario.clone()),
        };
        Ok(Sequence {
            scenario,
            imu,
            scans,
            scan_patches,
            frames,
            ground_truth,
            calibration,
            initial,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn static_preset_counts() {
        let seq = Sequence::generate(presets::preset("static", 1).unwrap()).unwrap();
        let expected = seq.scenario.trajectory.imu_rate * seq.scenario.trajectory.duration;
        assert!((seq.imu.len() as f64 - expected).abs() <= 1.0);
        assert_eq!(seq.scans.len(), 10);
        assert_eq!(seq.frames.len(), 20);
    }

    #[test]
    fn unknown_preset_is_config_error() {
        assert!(matches!(presets::preset("nope", 0), Err(Error::Config(_))));
    }

    #[test]
    fn campus_loop_closes() {
        let s = presets::preset("campus-loop", 0).unwrap();
        let (r0, p0) = s.trajectory.pose(0.0);
        let (r1, p1) = s.trajectory.pose(s.trajectory.duration);
        assert!((p0 - p1).norm() < 1e-9);
        assert!(r0.angle_to(&r1) < 1e-9);
        let len = s.trajectory.path_length();
        assert!((len - 120.0).abs() < 2.0, "path {len}");
    }

    #[test]
    fn scenario_roundtrips_through_json() {
        let s = presets::preset("corridor-degenerate", 4).unwrap();
        let text = serde_json::to_string(&s).unwrap();
        let back: Scenario = serde_json::from_str(&text).unwrap();
        assert_eq!(back.trajectory, s.trajectory);
        assert_eq!(back.world.patches, s.world.patches);
        assert_eq!(back.calibration, s.calibration);
    }
}
