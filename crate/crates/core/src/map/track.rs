use std::collections::{HashMap, HashSet};

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use super::color::CameraView;
use super::{PointId, VoxelMap};

/// A map point followed across images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackedPoint {
    pub id: PointId,
    /// Location in the previous image.
    pub prev: Vector2<f64>,
    /// Location in the current image.
    pub curr: Vector2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackConfig {
    /// Largest accepted final reprojection residual norm, pixels.
    pub pnp_threshold: f64,
    /// Largest accepted final photometric residual norm.
    pub photo_threshold: f64,
    /// No two tracked points closer than this, pixels.
    pub exclusion_radius: f64,
    /// Tracked points must stay this far inside the image border, pixels.
    pub margin: f64,
    pub z_min: f64,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self {
            pnp_threshold: 4.0,
            photo_threshold: 0.12,
            exclusion_radius: 50.0,
            margin: 1.0,
            z_min: 0.01,
        }
    }
}

/// Final residual norms of one tracked point after the VIO update.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ResidualNorms {
    pub pnp: Option<f64>,
    pub photo: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrackUpdate {
    pub tracked: Vec<TrackedPoint>,
    pub removed: usize,
    pub added: usize,
}

/// Bucket grid over pixel positions with cell size equal to the radius.
struct PixelGrid {
    cell: f64,
    radius2: f64,
    cells: HashMap<(i64, i64), Vec<Vector2<f64>>>,
}

impl PixelGrid {
    fn new(radius: f64) -> Self {
        Self {
            cell: radius.max(1e-9),
            radius2: radius * radius,
            cells: HashMap::new(),
        }
    }

    fn key(&self, p: &Vector2<f64>) -> (i64, i64) {
        ((p.x / self.cell).floor() as i64, (p.y / self.cell).floor() as i64)
    }

    fn occupied(&self, p: &Vector2<f64>) -> bool {
        let (cx, cy) = self.key(p);
        (-1..=1).any(|dx| {
            (-1..=1).any(|dy| {
                self.cells
                    .get(&(cx + dx, cy + dy))
                    .is_some_and(|v| v.iter().any(|q| (q - p).norm_squared() < self.radius2))
            })
        })
    }

    fn insert(&mut self, p: Vector2<f64>) {
        let k = self.key(&p);
        self.cells.entry(k).or_default().push(p);
    }
}

/// Drops tracked points with large final residuals or that left the image,
/// then adds activated map points that project at least
/// `exclusion_radius` away from every tracked point (ascending id, first
/// come first served). Points removed here are not re-added in the same
/// call. Survivors carry their current location as `prev`.
pub fn update_tracked_points(
    map: &VoxelMap,
    tracked: &[TrackedPoint],
    residuals: &HashMap<PointId, ResidualNorms>,
    view: &CameraView,
    width: usize,
    height: usize,
    config: &TrackConfig,
) -> TrackUpdate {
    let inside = |p: &Vector2<f64>| {
        p.x >= config.margin
            && p.y >= config.margin
            && p.x <= width as f64 - 1.0 - config.margin
            && p.y <= height as f64 - 1.0 - config.margin
    };
    let mut out = TrackUpdate::default();
    let mut grid = PixelGrid::new(config.exclusion_radius);
    let mut taken = HashSet::new();
    for t in tracked {
        let r = residuals.get(&t.id).copied().unwrap_or_default();
        let bad = r.pnp.is_some_and(|v| !(v <= config.pnp_threshold))
            || r.photo.is_some_and(|v| !(v <= config.photo_threshold))
            || !inside(&t.curr)
            || view.project(&map.point(t.id).p, config.z_min).is_none();
        taken.insert(t.id);
        if bad || grid.occupied(&t.curr) {
            out.removed += 1;
            continue;
        }
        grid.insert(t.curr);
        out.tracked.push(TrackedPoint {
            id: t.id,
            prev: t.curr,
            curr: t.curr,
        });
    }
    for id in map.activated_points() {
        if taken.contains(&id) {
            continue;
        }
        let Some((rho, _)) = view.project(&map.point(id).p, config.z_min) else {
            continue;
        };
        if !inside(&rho) || grid.occupied(&rho) {
            continue;
        }
        grid.insert(rho);
        out.tracked.push(TrackedPoint {
            id,
            prev: rho,
            curr: rho,
        });
        out.added += 1;
    }
    out
}
