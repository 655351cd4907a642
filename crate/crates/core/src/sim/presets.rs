//! Named scenarios.

use std::f64::consts::{FRAC_PI_2, TAU};

use nalgebra::Vector3;

use super::synth::{CalibOffsets, CameraCalibration, CameraModel, PatternKind, ScanPattern};
use super::trajectory::{TrajectorySpec, Waveform};
use super::world::{Albedo, Patch, SimWorld};
use super::Scenario;
use crate::error::{Error, Result};
use crate::imu::NoiseConfig;
use crate::manifold::Intrinsics;

pub const PRESETS: [&str; 4] = ["static", "campus-loop", "corridor-degenerate", "rich-texture"];

pub fn preset(name: &str, seed: u64) -> Result<Scenario> {
    let scenario = match name {
        "static" => static_scene(seed),
        "campus-loop" => campus_loop(seed),
        "corridor-degenerate" => corridor_degenerate(seed),
        "rich-texture" => rich_texture(seed),
        _ => {
            return Err(Error::Config(format!(
                "unknown preset `{name}` (expected one of {})",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(scenario)
}

/// Smooth two-direction color waves; `k` varies phases and wavelength so
/// neighbouring surfaces differ.
fn waves(k: usize, wavelength: f64) -> Albedo {
    let f = k as f64;
    Albedo::Waves {
        base: [0.5, 0.5, 0.5],
        amplitude: [0.4, 0.35, 0.3],
        wavelength: wavelength * (1.0 + 0.13 * (f * 1.7).sin()),
        phase_s: [0.3 * f, 1.1 + 0.7 * f, 2.3 + 0.2 * f],
        phase_t: [0.9 + 0.4 * f, 0.5 * f, 1.7 + 1.3 * f],
    }
}

fn gravity() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, -9.81)
}

fn ground(half: f64, wavelength: f64) -> Patch {
    Patch::new(
        Vector3::new(-half, -half, 0.0),
        Vector3::new(2.0 * half, 0.0, 0.0),
        Vector3::new(0.0, 2.0 * half, 0.0),
        waves(0, wavelength),
    )
}

fn spinning_lidar(rows: usize, cols: usize, max_range: f64) -> ScanPattern {
    ScanPattern {
        kind: PatternKind::Raster,
        horizontal_fov_deg: 360.0,
        vertical_min_deg: -25.0,
        vertical_max_deg: 15.0,
        rows,
        cols,
        min_range: 0.3,
        max_range,
    }
}

fn small_camera(pixel_noise: f64) -> (CameraModel, Intrinsics) {
    (
        CameraModel {
            width: 160,
            height: 120,
            pixel_noise,
        },
        Intrinsics::new(100.0, 100.0, 80.0, 60.0),
    )
}

fn static_scene(seed: u64) -> Scenario {
    let mut world = SimWorld::new(vec![ground(20.0, 1.5)], gravity(), [0.0; 3]);
    world.push_box(Vector3::new(4.0, -3.0, 0.0), Vector3::new(6.0, 3.0, 3.0), |k| waves(k + 1, 1.2));
    world.push_box(Vector3::new(-6.0, -1.0, 0.0), Vector3::new(-4.0, 5.0, 2.0), |k| waves(k + 6, 1.2));
    world.push_box(Vector3::new(-1.0, 4.0, 0.0), Vector3::new(1.5, 5.0, 2.5), |k| waves(k + 11, 1.2));
    world.push_box(Vector3::new(1.0, -5.5, 0.0), Vector3::new(3.0, -4.5, 2.0), |k| waves(k + 16, 1.2));
    let (camera, k) = small_camera(0.01);
    Scenario {
        name: "static".into(),
        world,
        trajectory: TrajectorySpec::stationary(Vector3::new(0.0, 0.0, 1.5), 0.0, 1.0),
        lidar: spinning_lidar(32, 360, 40.0),
        range_noise: 0.02,
        imu_noise: NoiseConfig::default(),
        camera: Some(camera),
        calibration: CameraCalibration::forward_looking(k, Vector3::new(0.1, 0.0, 0.05)),
        calib_offsets: CalibOffsets::default(),
        seed,
        degenerate_window: None,
    }
}

/// ≈120 m horizontal loop through a block of textured buildings.
fn campus_loop(seed: u64) -> Scenario {
    let period = 60.0;
    let radius = 120.0 / TAU;
    let mut traj = TrajectorySpec::circle(radius, 1.5, period, period);
    // Frequencies are multiples of 1/period so the loop closes exactly.
    traj.z = traj.z.clone().with_sine(0.1, 3.0 / period, 0.0);
    traj.pitch = Waveform::default().with_sine(2f64.to_radians(), 6.0 / period, 0.0);
    traj.roll = Waveform::default().with_sine(1.5f64.to_radians(), 9.0 / period, 0.0);
    traj.yaw = traj.yaw.clone().with_sine(3f64.to_radians(), 4.0 / period, 0.0);

    let mut world = SimWorld::new(vec![ground(45.0, 1.7)], gravity(), [0.0; 3]);
    let mut k = 1;
    for i in 0..10 {
        let a = TAU * (i as f64 + 0.5) / 10.0;
        let c = Vector3::new(28.0 * a.cos(), 28.0 * a.sin(), 0.0);
        let half = Vector3::new(3.0 + (i % 3) as f64, 2.5 + (i % 2) as f64, 0.0);
        let height = 4.0 + (i % 4) as f64;
        world.push_box(c - half, c + half + Vector3::new(0.0, 0.0, height), |f| waves(k + f, 1.3));
        k += 5;
    }
    for i in 0..6 {
        let a = TAU * i as f64 / 6.0 + 0.3;
        let c = Vector3::new(11.0 * a.cos(), 11.0 * a.sin(), 0.0);
        let half = Vector3::new(1.5, 1.5, 0.0);
        world.push_box(c - half, c + half + Vector3::new(0.0, 0.0, 3.0), |f| waves(k + f, 1.1));
        k += 5;
    }
    let (camera, intr) = small_camera(0.01);
    Scenario {
        name: "campus-loop".into(),
        world,
        trajectory: traj,
        lidar: spinning_lidar(32, 360, 60.0),
        range_noise: 0.02,
        imu_noise: NoiseConfig::default(),
        camera: Some(camera),
        calibration: CameraCalibration::forward_looking(intr, Vector3::new(0.1, 0.0, 0.05)),
        calib_offsets: CalibOffsets::default(),
        seed,
        degenerate_window: None,
    }
}

/// Drive along a long textured wall with a forward-facing limited-FOV
/// LiDAR. Obstacles stand only at `|x| ≥ 7.1`, so while the sensor is in the
/// middle stretch the LiDAR sees nothing but the wall.
fn corridor_degenerate(seed: u64) -> Scenario {
    let duration = 30.0;
    let traj = TrajectorySpec {
        x: Waveform::linear(-15.0, 1.0),
        y: Waveform::default().with_sine(0.1, 0.1, 0.0),
        z: Waveform::constant(1.5).with_sine(0.05, 0.2, 0.0),
        yaw: Waveform::constant(FRAC_PI_2).with_sine(0.03, 0.07, 0.0),
        pitch: Waveform::default().with_sine(0.02, 0.13, 0.5),
        roll: Waveform::default().with_sine(0.02, 0.11, 1.0),
        duration,
        imu_rate: 200.0,
        lidar_rate: 10.0,
        camera_rate: 20.0,
    };
    let wall = Patch::new(
        Vector3::new(-25.0, 4.0, 0.0),
        Vector3::new(0.0, 0.0, 4.0),
        Vector3::new(50.0, 0.0, 0.0),
        waves(1, 0.9),
    );
    let mut world = SimWorld::new(vec![wall, ground(30.0, 1.3)], gravity(), [0.0; 3]);
    let mut k = 2;
    for side in [-1.0, 1.0] {
        for (j, &x0) in [7.1, 10.3, 13.6, 17.0, 20.5].iter().enumerate() {
            let (lo, hi) = if side > 0.0 { (x0, x0 + 0.8) } else { (-x0 - 0.8, -x0) };
            if j % 2 == 0 {
                // Waist-high block: its top face constrains height.
                world.push_box(Vector3::new(lo, 2.2, 0.0), Vector3::new(hi, 4.0, 1.1), |f| waves(k + f, 0.8));
            } else {
                world.push_box(Vector3::new(lo, 3.0, 0.0), Vector3::new(hi, 4.0, 4.0), |f| waves(k + f, 0.8));
            }
            k += 5;
        }
        // Slanted panel.
        let x0 = side * 8.8;
        world.patches.push(Patch::new(
            Vector3::new(x0, 3.9, 0.0),
            Vector3::new(0.6 * side, -1.2, 0.0),
            Vector3::new(0.0, 0.0, 3.0),
            waves(k, 0.8),
        ));
        k += 1;
    }
    let world = SimWorld::new(world.patches, world.gravity, world.background);
    let (camera, intr) = small_camera(0.01);
    Scenario {
        name: "corridor-degenerate".into(),
        world,
        trajectory: traj,
        lidar: ScanPattern {
            kind: PatternKind::Raster,
            horizontal_fov_deg: 60.0,
            vertical_min_deg: -15.0,
            vertical_max_deg: 15.0,
            rows: 16,
            cols: 64,
            min_range: 0.3,
            max_range: 30.0,
        },
        range_noise: 0.02,
        imu_noise: NoiseConfig::default(),
        camera: Some(camera),
        calibration: CameraCalibration::forward_looking(intr, Vector3::new(0.1, 0.0, 0.05)),
        calib_offsets: CalibOffsets::default(),
        seed,
        degenerate_window: Some([10.5, 19.5]),
    }
}

/// Small fully-textured room with rotational excitation, for calibration.
fn rich_texture(seed: u64) -> Scenario {
    let duration = 12.0;
    let (hx, hy, hz) = (5.0, 4.0, 3.0);
    let patches = vec![
        Patch::new(Vector3::new(-hx, -hy, 0.0), Vector3::new(2.0 * hx, 0.0, 0.0), Vector3::new(0.0, 2.0 * hy, 0.0), waves(0, 0.7)),
        Patch::new(Vector3::new(-hx, -hy, hz), Vector3::new(0.0, 2.0 * hy, 0.0), Vector3::new(2.0 * hx, 0.0, 0.0), waves(1, 0.7)),
        Patch::new(Vector3::new(-hx, -hy, 0.0), Vector3::new(0.0, 0.0, hz), Vector3::new(2.0 * hx, 0.0, 0.0), waves(2, 0.6)),
        Patch::new(Vector3::new(-hx, hy, 0.0), Vector3::new(2.0 * hx, 0.0, 0.0), Vector3::new(0.0, 0.0, hz), waves(3, 0.6)),
        Patch::new(Vector3::new(-hx, -hy, 0.0), Vector3::new(0.0, 2.0 * hy, 0.0), Vector3::new(0.0, 0.0, hz), waves(4, 0.6)),
        Patch::new(Vector3::new(hx, -hy, 0.0), Vector3::new(0.0, 0.0, hz), Vector3::new(0.0, 2.0 * hy, 0.0), waves(5, 0.6)),
    ];
    let mut world = SimWorld::new(patches, gravity(), [0.0; 3]);
    world.push_box(Vector3::new(2.5, 1.5, 0.0), Vector3::new(3.5, 2.5, 1.2), |f| waves(6 + f, 0.5));
    world.push_box(Vector3::new(-3.5, -2.8, 0.0), Vector3::new(-2.3, -1.8, 1.6), |f| waves(11 + f, 0.5));
    world.push_box(Vector3::new(-1.0, 2.6, 0.0), Vector3::new(0.2, 3.4, 2.2), |f| waves(16 + f, 0.5));

    let f = 1.0 / 6.0;
    let traj = TrajectorySpec {
        x: Waveform::default().with_sine(1.2, f, FRAC_PI_2).with_sine(0.2, 3.0 * f, 0.0),
        y: Waveform::default().with_sine(1.0, f, 0.0),
        z: Waveform::constant(1.4).with_sine(0.25, 0.37, 0.0),
        yaw: Waveform::linear(FRAC_PI_2, TAU * f).with_sine(0.35, 0.23, 0.0),
        pitch: Waveform::default().with_sine(0.12, 0.31, 0.4),
        roll: Waveform::default().with_sine(0.1, 0.43, 1.2),
        duration,
        imu_rate: 200.0,
        lidar_rate: 10.0,
        camera_rate: 20.0,
    };
    let camera = CameraModel {
        width: 320,
        height: 240,
        pixel_noise: 0.01,
    };
    let mut calibration =
        CameraCalibration::forward_looking(Intrinsics::new(200.0, 200.0, 160.0, 120.0), Vector3::new(0.1, -0.03, 0.05));
    calibration.time_offset = 0.01;
    Scenario {
        name: "rich-texture".into(),
        world,
        trajectory: traj,
        lidar: spinning_lidar(32, 360, 20.0),
        range_noise: 0.01,
        imu_noise: NoiseConfig::default(),
        camera: Some(camera),
        calibration,
        calib_offsets: CalibOffsets {
            rot_deg: [0.6, -0.48, 0.64],
            pos_m: [0.006, -0.0048, 0.0064],
            time_offset_s: 0.005,
            intrinsics_px: [0.0, 0.0, 2.0, -2.0],
        },
        seed,
        degenerate_window: None,
    }
}
