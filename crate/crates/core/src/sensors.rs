//! Measurement types shared by the simulator, the dataset reader and the
//! estimator.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    pub t: f64,
    /// Gyroscope, rad/s.
    pub gyro: Vector3<f64>,
    /// Accelerometer specific force, m/s².
    pub acc: Vector3<f64>,
}

/// Checks that the timestamps of a batch are strictly increasing.
pub fn check_monotone<T>(items: &[T], t: impl Fn(&T) -> f64) -> Result<()> {
    for (i, w) in items.windows(2).enumerate() {
        let (a, b) = (t(&w[0]), t(&w[1]));
        if !(b > a) {
            return Err(Error::NonMonotoneTimestamps { index: i + 1, t: b });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LidarPoint {
    pub t: f64,
    /// Sensor-frame position, meters.
    pub p: Vector3<f64>,
}

/// One LiDAR sweep. The LiDAR frame coincides with the IMU frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LidarScan {
    pub start: f64,
    pub end: f64,
    pub points: Vec<LidarPoint>,
}

/// An RGB image with channel values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraFrame {
    pub t: f64,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f32; 3]>,
}

impl CameraFrame {
    pub fn new(t: f64, width: usize, height: usize, pixels: Vec<[f32; 3]>) -> Self {
        assert_eq!(pixels.len(), width * height, "pixel buffer does not match image size");
        Self { t, width, height, pixels }
    }

    pub fn filled(t: f64, width: usize, height: usize, rgb: [f32; 3]) -> Self {
        Self::new(t, width, height, vec![rgb; width * height])
    }

    #[inline]
    pub fn at(&self, u: usize, v: usize) -> [f32; 3] {
        self.pixels[v * self.width + u]
    }

    /// Whether a continuous pixel coordinate lies inside `[m, W−1−m]×[m, H−1−m]`.
    #[inline]
    pub fn contains(&self, u: f64, v: f64, margin: f64) -> bool {
        u >= margin
            && v >= margin
            && u <= (self.width as f64 - 1.0 - margin)
            && v <= (self.height as f64 - 1.0 - margin)
    }

    /// Mean of the three channels.
    pub fn gray(&self) -> Vec<f32> {
        self.pixels.iter().map(|p| (p[0] + p[1] + p[2]) / 3.0).collect()
    }
}
