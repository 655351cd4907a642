//! The shared colored point map.
//!
//! Points live in an arena and are bucketed by a spatial hash of fixed-size
//! voxels. LIO appends registered scan points; VIO paints their colors and
//! picks tracked points from the recently appended (activated) voxels.

mod color;
mod export;
mod track;

use rustc_hash::{FxHashMap, FxHashSet};

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

pub use color::{
    bilinear, fuse_color, interpolate_color, render_point_colors, render_point_colors_with, CameraView, PixelCovariance,
    RenderConfig, RenderReport,
};
pub use export::{pcd_bytes, ply_bytes, read_ply, write_pcd, write_ply, ExportPoint};
pub use track::{update_tracked_points, ResidualNorms, TrackConfig, TrackUpdate, TrackedPoint};

use crate::error::{Error, Result};

pub type PointId = u32;
pub type VoxelKey = [i64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapConfig {
    /// Voxel edge, meters.
    pub voxel_size: f64,
    /// Minimum distance between two map points, meters.
    pub min_spacing: f64,
    /// A voxel stays activated this long after its last append, seconds.
    pub activation_window: f64,
    /// Diagonal of the color covariance of a point that was never rendered.
    pub uncolored_var: f64,
    /// Neighbors per plane query.
    pub knn: usize,
    /// Voxel shells searched around the query voxel.
    pub max_shells: usize,
    /// Largest point-to-plane distance of a valid plane fit, meters.
    pub plane_threshold: f64,
    /// Smallest RMS spread of the neighbors along their second principal
    /// axis, meters; rejects near-collinear neighborhoods.
    pub min_spread: f64,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            voxel_size: 0.1,
            min_spacing: 0.1,
            activation_window: 1.0,
            uncolored_var: 1e3,
            knn: 5,
            max_shells: 3,
            plane_threshold: 0.05,
            min_spread: 0.04,
        }
    }
}

impl MapConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_size > 0.0 && self.min_spacing >= 0.0 && self.uncolored_var > 0.0) {
            return Err(Error::Config("map: voxel_size and uncolored_var must be positive".into()));
        }
        if !(self.activation_window >= 0.0) {
            return Err(Error::Config("map: activation_window must be non-negative".into()));
        }
        if self.knn < 3 {
            return Err(Error::Config("map: knn must be at least 3".into()));
        }
        if !(self.plane_threshold > 0.0) {
            return Err(Error::Config("map: plane_threshold must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapPoint {
    pub p: Vector3<f64>,
    pub color: Vector3<f64>,
    pub cov_p: Matrix3<f64>,
    pub cov_c: Matrix3<f64>,
    pub t_created: f64,
    pub t_rendered: f64,
}

#[derive(Debug, Clone, Default)]
struct Voxel {
    points: Vec<PointId>,
    /// Positions of `points`, kept inline for neighbor scans.
    positions: Vec<Vector3<f64>>,
    t_last_append: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct InsertReport {
    pub inserted: usize,
    pub rejected_spacing: usize,
    pub rejected_invalid: usize,
}

/// Result of a plane query.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneFit {
    pub neighbors: Vec<PointId>,
    /// Unit normal.
    pub normal: Vector3<f64>,
    /// `normal·x + offset = 0` on the plane.
    pub offset: f64,
    /// Mean squared point-to-plane distance of the neighbors.
    pub fit_var: f64,
    pub valid: bool,
}

#[derive(Debug, Clone)]
pub struct VoxelMap {
    config: MapConfig,
    points: Vec<MapPoint>,
    voxels: FxHashMap<VoxelKey, Voxel>,
    active: FxHashSet<VoxelKey>,
}

impl VoxelMap {
    pub fn new(config: MapConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            points: vec![],
            voxels: FxHashMap::default(),
            active: FxHashSet::default(),
        })
    }

    pub fn config(&self) -> &MapConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn voxel_count(&self) -> usize {
        self.voxels.len()
    }

    pub fn points(&self) -> &[MapPoint] {
        &self.points
    }

    pub fn point(&self, id: PointId) -> &MapPoint {
        &self.points[id as usize]
    }

    pub(crate) fn point_mut(&mut self, id: PointId) -> &mut MapPoint {
        &mut self.points[id as usize]
    }

    pub fn key(&self, p: &Vector3<f64>) -> VoxelKey {
        let s = self.config.voxel_size;
        [
            (p.x / s).floor() as i64,
            (p.y / s).floor() as i64,
            (p.z / s).floor() as i64,
        ]
    }

    /// Calls `f` on every key at Chebyshev distance exactly `s` from `c`.
    fn for_shell(c: VoxelKey, s: i64, mut f: impl FnMut(VoxelKey)) {
        for dx in -s..=s {
            for dy in -s..=s {
                if s == 0 || dx.abs() == s || dy.abs() == s {
                    for dz in -s..=s {
                        f([c[0] + dx, c[1] + dy, c[2] + dz]);
                    }
                } else {
                    f([c[0] + dx, c[1] + dy, c[2] - s]);
                    f([c[0] + dx, c[1] + dy, c[2] + s]);
                }
            }
        }
    }

    fn too_close(&self, p: &Vector3<f64>) -> bool {
        let d2 = self.config.min_spacing * self.config.min_spacing;
        if d2 == 0.0 {
            return false;
        }
        let reach = (self.config.min_spacing / self.config.voxel_size).ceil().max(1.0) as i64;
        let c = self.key(p);
        let mut hit = false;
        for s in 0..=reach {
            Self::for_shell(c, s, |k| {
                hit = hit
                    || self
                        .voxels
                        .get(&k)
                        .is_some_and(|v| v.positions.iter().any(|q| (q - p).norm_squared() < d2));
            });
            if hit {
                return true;
            }
        }
        false
    }

    /// Inserts global-frame points with their covariances. Every point's
    /// containing voxel (if it exists or gets created) is marked appended at
    /// `t_now`.
    pub fn insert_scan(&mut self, points: &[(Vector3<f64>, Matrix3<f64>)], t_now: f64) -> InsertReport {
        let mut report = InsertReport::default();
        let uncolored = Matrix3::identity() * self.config.uncolored_var;
        for (p, cov) in points {
            if !p.iter().all(|v| v.is_finite()) || !cov.iter().all(|v| v.is_finite()) {
                report.rejected_invalid += 1;
                continue;
            }
            let key = self.key(p);
            if self.too_close(p) {
                report.rejected_spacing += 1;
                if let Some(v) = self.voxels.get_mut(&key) {
                    v.t_last_append = t_now;
                    self.active.insert(key);
                }
                continue;
            }
            let id = self.points.len() as PointId;
            self.points.push(MapPoint {
                p: *p,
                color: Vector3::zeros(),
                cov_p: *cov,
                cov_c: uncolored,
                t_created: t_now,
                t_rendered: t_now,
            });
            let v = self.voxels.entry(key).or_default();
            v.points.push(id);
            v.positions.push(*p);
            v.t_last_append = t_now;
            self.active.insert(key);
            report.inserted += 1;
        }
        report
    }

    /// Deactivates voxels whose last append is older than the window.
    pub fn set_activation(&mut self, t_now: f64) {
        let window = self.config.activation_window;
        let voxels = &self.voxels;
        self.active
            .retain(|k| voxels.get(k).is_some_and(|v| t_now - v.t_last_append <= window));
    }

    pub fn is_activated(&self, key: &VoxelKey) -> bool {
        self.active.contains(key)
    }

    /// Points of all activated voxels, ascending id.
    pub fn activated_points(&self) -> Vec<PointId> {
        let mut ids: Vec<PointId> = self
            .active
            .iter()
            .filter_map(|k| self.voxels.get(k))
            .flat_map(|v| v.points.iter().copied())
            .collect();
        ids.sort_unstable();
        ids
    }

    /// Largest distance covered by the shell search.
    pub fn search_radius(&self) -> f64 {
        self.config.max_shells as f64 * self.config.voxel_size
    }

    /// Up to `k` nearest points within [`Self::search_radius`], sorted by
    /// `(distance, id)`.
    pub fn knn(&self, q: &Vector3<f64>, k: usize) -> Vec<(PointId, f64)> {
        let s = self.config.voxel_size;
        let rmax = self.search_radius();
        let c = self.key(q);
        let face = (0..3)
            .map(|a| {
                let lo = q[a] - c[a] as f64 * s;
                lo.min(s - lo).max(0.0)
            })
            .fold(f64::INFINITY, f64::min);
        let mut cand: Vec<(f64, PointId)> = vec![];
        for shell in 0..=self.config.max_shells as i64 {
            Self::for_shell(c, shell, |key| {
                if let Some(v) = self.voxels.get(&key) {
                    cand.extend(v.positions.iter().zip(&v.points).map(|(p, &id)| ((p - q).norm(), id)));
                }
            });
            let covered = (shell as f64 * s + face).min(rmax);
            if cand.iter().filter(|(d, _)| *d <= covered).count() >= k {
                break;
            }
        }
        cand.retain(|(d, _)| *d <= rmax);
        cand.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        cand.truncate(k);
        cand.into_iter().map(|(d, id)| (id, d)).collect()
    }

    /// Least-squares plane through the `k` nearest neighbors of `q`.
    pub fn plane_neighbors(&self, q: &Vector3<f64>, k: usize) -> PlaneFit {
        let nn = self.knn(q, k);
        let neighbors: Vec<PointId> = nn.iter().map(|(id, _)| *id).collect();
        let invalid = |neighbors| PlaneFit {
            neighbors,
            normal: Vector3::z(),
            offset: 0.0,
            fit_var: 0.0,
            valid: false,
        };
        if neighbors.len() < k.max(3) {
            return invalid(neighbors);
        }
        let pts: Vec<Vector3<f64>> = neighbors.iter().map(|&id| self.points[id as usize].p).collect();
        match fit_plane_spread(&pts) {
            Some((normal, offset, spread)) => {
                let dists: Vec<f64> = pts.iter().map(|p| normal.dot(p) + offset).collect();
                let n = dists.len() as f64;
                PlaneFit {
                    valid: spread >= self.config.min_spread
                        && dists.iter().all(|d| d.abs() < self.config.plane_threshold),
                    fit_var: dists.iter().map(|d| d * d).sum::<f64>() / n,
                    neighbors,
                    normal,
                    offset,
                }
            }
            None => invalid(neighbors),
        }
    }
}

/// Total least-squares plane `(n, d)` with `n·x + d = 0`; the normal's
/// largest-magnitude component is positive.
pub fn fit_plane(pts: &[Vector3<f64>]) -> Option<(Vector3<f64>, f64)> {
    fit_plane_spread(pts).map(|(n, d, _)| (n, d))
}

/// [`fit_plane`] plus the RMS spread along the second principal axis.
fn fit_plane_spread(pts: &[Vector3<f64>]) -> Option<(Vector3<f64>, f64, f64)> {
    if pts.len() < 3 {
        return None;
    }
    let n = pts.len() as f64;
    let centroid = pts.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for p in pts {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let (i_min, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let mut normal: Vector3<f64> = eig.eigenvectors.column(i_min).into_owned();
    let norm = normal.norm();
    if !(norm > 0.0) {
        return None;
    }
    normal /= norm;
    let big = normal.iamax();
    if normal[big] < 0.0 {
        normal = -normal;
    }
    // A line (two vanishing eigenvalues) has no defined plane.
    let mut sorted = [eig.eigenvalues[0], eig.eigenvalues[1], eig.eigenvalues[2]];
    sorted.sort_by(f64::total_cmp);
    if sorted[1] <= 1e-12 * sorted[2].max(1e-300) {
        return None;
    }
    Some((normal, -normal.dot(&centroid), (sorted[1].max(0.0) / n).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map() -> VoxelMap {
        VoxelMap::new(MapConfig::default()).unwrap()
    }

    fn pt(x: f64, y: f64, z: f64) -> (Vector3<f64>, Matrix3<f64>) {
        (Vector3::new(x, y, z), Matrix3::identity() * 1e-4)
    }

    #[test]
    fn single_insert_creates_activated_voxel() {
        let mut m = map();
        let r = m.insert_scan(&[pt(0.05, 0.05, 0.05)], 0.0);
        assert_eq!(r.inserted, 1);
        assert_eq!(m.voxel_count(), 1);
        assert_eq!(m.activated_points(), vec![0]);
        assert_eq!(m.point(0).color, Vector3::zeros());
        assert_eq!(m.point(0).cov_c, Matrix3::identity() * 1e3);
    }

    #[test]
    fn duplicate_is_rejected() {
        let mut m = map();
        let r = m.insert_scan(&[pt(1.0, 2.0, 3.0), pt(1.0, 2.0, 3.0)], 0.0);
        assert_eq!((r.inserted, r.rejected_spacing), (1, 1));
    }

    #[test]
    fn non_finite_is_rejected() {
        let mut m = map();
        let r = m.insert_scan(&[pt(f64::NAN, 0.0, 0.0)], 0.0);
        assert_eq!(r.rejected_invalid, 1);
        assert!(m.is_empty());
    }

    #[test]
    fn activation_window() {
        let mut m = map();
        m.insert_scan(&[pt(0.0, 0.0, 0.0)], 0.0);
        m.set_activation(0.5);
        assert_eq!(m.activated_points().len(), 1);
        m.set_activation(1.5);
        assert!(m.activated_points().is_empty());

        let mut forever = VoxelMap::new(MapConfig {
            activation_window: f64::INFINITY,
            ..Default::default()
        })
        .unwrap();
        forever.insert_scan(&[pt(0.0, 0.0, 0.0)], 0.0);
        forever.set_activation(1e9);
        assert_eq!(forever.activated_points().len(), 1);
    }

    #[test]
    fn rejected_points_refresh_their_voxel() {
        let mut m = map();
        m.insert_scan(&[pt(0.05, 0.05, 0.05)], 0.0);
        m.insert_scan(&[pt(0.05, 0.05, 0.05)], 0.9);
        m.set_activation(1.5);
        assert_eq!(m.activated_points().len(), 1);
    }

    #[test]
    fn shells_partition_the_cube() {
        let c = [4, -2, 7];
        let mut seen = std::collections::BTreeSet::new();
        for s in 0..4i64 {
            let mut keys = vec![];
            VoxelMap::for_shell(c, s, |k| keys.push(k));
            let side = 2 * s + 1;
            let inner = (2 * s - 1).max(0);
            assert_eq!(keys.len() as i64, side.pow(3) - inner.pow(3));
            for k in keys {
                let cheb = (0..3).map(|a| (k[a] - c[a]).abs()).max().unwrap();
                assert_eq!(cheb, s);
                assert!(seen.insert(k));
            }
        }
    }

    #[test]
    fn empty_region_query_is_invalid() {
        let m = map();
        assert!(!m.plane_neighbors(&Vector3::zeros(), 5).valid);
        assert!(m.activated_points().is_empty());
    }

    #[test]
    fn coplanar_fit_recovers_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = Vector3::new(0.3, -0.5, 0.8).normalize();
        let u = n.cross(&Vector3::x()).normalize();
        let v = n.cross(&u);
        let c = Vector3::new(1.0, 2.0, -1.0);
        let mut m = map();
        let pts: Vec<_> = (0..400)
            .map(|_| {
                let p = c + u * rng.random_range(-0.5..0.5) + v * rng.random_range(-0.5..0.5);
                (p, Matrix3::zeros())
            })
            .collect();
        m.insert_scan(&pts, 0.0);
        let fit = m.plane_neighbors(&c, 5);
        assert!(fit.valid);
        assert!((fit.normal.dot(&n).abs() - 1.0).abs() < 1e-6);
        assert!((fit.normal.dot(&c) + fit.offset).abs() < 1e-6);
    }

    #[test]
    fn collinear_points_have_no_plane() {
        let pts: Vec<_> = (0..5).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect();
        assert!(fit_plane(&pts).is_none());
    }
}
