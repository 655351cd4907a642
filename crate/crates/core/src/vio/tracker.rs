use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{Vector2, Vector3};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::manifold::Rotation3;
use crate::map::{PointId, TrackedPoint};
use crate::sim::{pixel_ray, stream_rng, Scenario};

const DOMAIN_TRACK: u64 = 4;

/// How tracked pixel locations are obtained for the next image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrackerMode {
    /// Ground-truth tracking from the simulator with Gaussian pixel noise.
    #[default]
    Oracle,
    /// Pyramidal Lucas-Kanade on the images.
    Lk,
}

/// What a new oracle track is bound to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OracleBinding {
    /// The surface point the map point samples, seen from the true camera.
    #[default]
    Point,
    /// The surface point behind the pixel the track starts at, as an
    /// appearance tracker would follow. The start pixel comes from the
    /// estimated calibration, so calibration errors at birth persist.
    Pixel,
}

/// Simulator-backed tracker: each track is bound to the true surface point
/// seen through its pixel when it was created, and later locations are the
/// true projections of that point plus independent noise.
#[derive(Debug, Clone)]
pub struct OracleTracker {
    scenario: Arc<Scenario>,
    sigma: f64,
    seed: u64,
    anchors: HashMap<PointId, Vector3<f64>>,
}

impl OracleTracker {
    pub fn new(scenario: Arc<Scenario>, sigma: f64, seed: u64) -> Self {
        Self {
            scenario,
            sigma,
            seed,
            anchors: HashMap::new(),
        }
    }

    fn true_camera(&self, t: f64) -> (Rotation3, Vector3<f64>) {
        let cal = &self.scenario.calibration;
        let (r, p) = self.scenario.trajectory.pose(t + cal.time_offset);
        cal.camera_pose(&r, &p)
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Binds `id` to the surface point behind pixel `rho` of the image
    /// stamped `t`. Returns `false` when the ray escapes the world.
    pub fn register(&mut self, id: PointId, rho: &Vector2<f64>, t: f64) -> bool {
        let (rot, center) = self.true_camera(t);
        let k = &self.scenario.calibration.intrinsics;
        let dir = rot.rotate(&pixel_ray(k, rho.x, rho.y)).normalize();
        match self.scenario.world.cast(&center, &dir, 1e-6, f64::INFINITY) {
            Some(hit) => {
                self.anchors.insert(id, hit.point);
                true
            }
            None => false,
        }
    }

    /// Binds `id` to the surface point seen in the direction of `p_g` from
    /// the true camera of the image stamped `t`, i.e. the physical point the
    /// map point samples. Returns `false` when the ray escapes the world.
    pub fn register_point(&mut self, id: PointId, p_g: &Vector3<f64>, t: f64) -> bool {
        let (_, center) = self.true_camera(t);
        let to = p_g - center;
        let dist = to.norm();
        if dist <= 0.0 {
            return false;
        }
        match self.scenario.world.cast(&center, &(to / dist), 1e-6, f64::INFINITY) {
            Some(hit) => {
                self.anchors.insert(id, hit.point);
                true
            }
            None => false,
        }
    }

    /// Location of every point in the image stamped `t` (index `frame`), or
    /// `None` when its anchor is unknown, behind the camera, outside the
    /// image or occluded.
    pub fn track(&self, points: &[TrackedPoint], frame: usize, t: f64) -> Vec<Option<Vector2<f64>>> {
        let Some(cam) = self.scenario.camera.as_ref() else {
            return vec![None; points.len()];
        };
        let (rot, center) = self.true_camera(t);
        let k = &self.scenario.calibration.intrinsics;
        points
            .iter()
            .map(|tp| {
                let anchor = self.anchors.get(&tp.id)?;
                let pc = rot.matrix().transpose() * (anchor - center);
                if pc.z <= 0.01 {
                    return None;
                }
                let to = anchor - center;
                let dist = to.norm();
                if let Some(hit) = self.scenario.world.cast(&center, &(to / dist), 1e-6, dist) {
                    if hit.range < dist - 1e-3 {
                        return None;
                    }
                }
                let mut rng = stream_rng(self.seed, DOMAIN_TRACK, ((frame as u64) << 32) ^ tp.id as u64);
                let mut n = || -> f64 { StandardNormal.sample(&mut rng) };
                let rho = Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy)
                    + Vector2::new(n(), n()) * self.sigma;
                let inside =
                    rho.x >= 0.0 && rho.y >= 0.0 && rho.x <= cam.width as f64 - 1.0 && rho.y <= cam.height as f64 - 1.0;
                inside.then_some(rho)
            })
            .collect()
    }

    /// Surface point bound to `id`.
    pub fn anchor(&self, id: PointId) -> Option<Vector3<f64>> {
        self.anchors.get(&id).copied()
    }

    /// Drops anchors of points that are no longer tracked.
    pub fn retain(&mut self, keep: impl Fn(PointId) -> bool) {
        self.anchors.retain(|id, _| keep(*id));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::presets::preset;

    #[test]
    fn zero_noise_reproduces_true_projection() {
        let sc = Arc::new(preset("rich-texture", 1).unwrap());
        let mut tr = OracleTracker::new(sc.clone(), 0.0, 7);
        let rho = Vector2::new(100.0, 80.0);
        assert!(tr.register(3, &rho, 0.5));
        let tp = TrackedPoint { id: 3, prev: rho, curr: rho };
        let same = tr.track(&[tp], 1, 0.5)[0].unwrap();
        assert!((same - rho).norm() < 1e-6, "{same}");
        let moved = tr.track(&[tp], 2, 0.55)[0].unwrap();
        assert!((moved - rho).norm() > 0.01);
    }

    #[test]
    fn unknown_point_is_lost() {
        let sc = Arc::new(preset("rich-texture", 1).unwrap());
        let tr = OracleTracker::new(sc, 1.0, 7);
        let tp = TrackedPoint {
            id: 9,
            prev: Vector2::zeros(),
            curr: Vector2::zeros(),
        };
        assert_eq!(tr.track(&[tp], 1, 0.5), vec![None]);
    }
}
