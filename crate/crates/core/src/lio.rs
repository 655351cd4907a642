//! LiDAR-inertial update: point-to-plane residuals against the map inside
//! the iterated error-state filter, then insertion of the registered scan.

use nalgebra::{Matrix3, SMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::esikf::{iterated_update, EsikfConfig, NormalEquations, UpdateReport};
use crate::exec::Exec;
use crate::manifold::{idx, so3, FullState, StateWithCov, STATE_DIM};
use crate::map::{InsertReport, VoxelMap};
use crate::sensors::LidarScan;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LioConfig {
    /// Standard deviation of a point-to-plane residual, meters (the plane
    /// fit variance is added on top).
    pub point_sigma: f64,
    /// Range noise used for the covariance of inserted map points, meters.
    pub range_sigma: f64,
    /// Fewer valid residuals than this flags the scan as degenerate.
    pub min_residuals: usize,
    /// Residuals larger than this are treated as wrong associations, meters.
    pub max_residual: f64,
    /// Use every `stride`-th scan point for residuals (all are inserted).
    pub stride: usize,
    /// Plane associations are recomputed at most this many times; each
    /// association is solved to convergence by the iterated update.
    pub associations: usize,
    pub esikf: EsikfConfig,
}

impl Default for LioConfig {
    fn default() -> Self {
        Self {
            point_sigma: 0.02,
            range_sigma: 0.02,
            min_residuals: 10,
            max_residual: 0.5,
            stride: 1,
            associations: 4,
            esikf: EsikfConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneResidual {
    pub normal: Vector3<f64>,
    pub offset: f64,
    /// Point in the scan-end body frame.
    pub point_body: Vector3<f64>,
    pub point_world: Vector3<f64>,
    /// `nᵀ p_G + d`, meters.
    pub residual: f64,
    /// Non-zero only on the attitude and position blocks.
    pub h: SMatrix<f64, 1, STATE_DIM>,
    pub var: f64,
}

/// Residual and Jacobian of one body point against a plane, with
/// `p_G = R·p_I + p`, `∂r/∂θ = −nᵀR[p_I]×`, `∂r/∂δp = nᵀ`.
pub fn plane_residual(x: &FullState, p_body: &Vector3<f64>, normal: &Vector3<f64>, offset: f64, var: f64) -> PlaneResidual {
    let r = x.rot.matrix();
    let point_world = r * p_body + x.pos;
    let mut h = SMatrix::<f64, 1, STATE_DIM>::zeros();
    let d_theta = -(normal.transpose() * r * so3::hat(p_body));
    h.fixed_view_mut::<1, 3>(0, idx::ROT).copy_from(&d_theta);
    h.fixed_view_mut::<1, 3>(0, idx::POS).copy_from(&normal.transpose());
    PlaneResidual {
        normal: *normal,
        offset,
        point_body: *p_body,
        point_world,
        residual: normal.dot(&point_world) + offset,
        h,
        var,
    }
}

/// Associates every (strided) scan point with a local map plane at state `x`.
pub fn build_plane_residuals(map: &VoxelMap, scan: &LidarScan, x: &FullState, config: &LioConfig) -> Vec<PlaneResidual> {
    build_plane_residuals_with(Exec::default(), map, scan, x, config)
}

pub fn build_plane_residuals_with(
    exec: Exec,
    map: &VoxelMap,
    scan: &LidarScan,
    x: &FullState,
    config: &LioConfig,
) -> Vec<PlaneResidual> {
    let stride = config.stride.max(1);
    let picked: Vec<Vector3<f64>> = scan.points.iter().step_by(stride).map(|p| p.p).collect();
    let k = map.config().knn;
    let base_var = config.point_sigma * config.point_sigma;
    let found = exec.map_slice(&picked, |p_body| {
        let pw = x.rot.rotate(p_body) + x.pos;
        let fit = map.plane_neighbors(&pw, k);
        if !fit.valid {
            return None;
        }
        let res = plane_residual(x, p_body, &fit.normal, fit.offset, base_var + fit.fit_var);
        (res.residual.abs() <= config.max_residual).then_some(res)
    });
    found.into_iter().flatten().collect()
}

/// Covariance of a registered point `R·p_I + p` from range noise along the
/// ray and the attitude/position covariance.
pub fn point_covariance(x: &StateWithCov, p_body: &Vector3<f64>, range_sigma: f64) -> Matrix3<f64> {
    let r = x.x.rot.matrix();
    let mut j = SMatrix::<f64, 3, 6>::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-(r * so3::hat(p_body))));
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
    let mut pose_cov = SMatrix::<f64, 6, 6>::zeros();
    pose_cov.fixed_view_mut::<3, 3>(0, 0).copy_from(&x.cov.fixed_view::<3, 3>(idx::ROT, idx::ROT));
    pose_cov.fixed_view_mut::<3, 3>(0, 3).copy_from(&x.cov.fixed_view::<3, 3>(idx::ROT, idx::POS));
    pose_cov.fixed_view_mut::<3, 3>(3, 0).copy_from(&x.cov.fixed_view::<3, 3>(idx::POS, idx::ROT));
    pose_cov.fixed_view_mut::<3, 3>(3, 3).copy_from(&x.cov.fixed_view::<3, 3>(idx::POS, idx::POS));
    let n = p_body.norm();
    let ray = if n > 0.0 { r * (p_body / n) } else { Vector3::zeros() };
    let s2 = range_sigma * range_sigma;
    let meas = ray * ray.transpose() * s2 + Matrix3::identity() * (0.01 * s2);
    let cov = j * pose_cov * j.transpose() + meas;
    (cov + cov.transpose()) * 0.5
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LioReport {
    pub update: UpdateReport,
    pub residuals: usize,
    pub degenerate: bool,
    pub insert: InsertReport,
}

/// Registers a motion-compensated scan (points in the scan-end body frame)
/// and appends it to the map with the converged pose.
pub fn lio_update(
    prior: &StateWithCov,
    scan: &LidarScan,
    map: &mut VoxelMap,
    config: &LioConfig,
) -> Result<(StateWithCov, LioReport)> {
    let mut current: Option<(StateWithCov, UpdateReport)> = None;
    for _ in 0..config.associations.max(1) {
        let start = current.as_ref().map_or(prior.x, |(p, _)| p.x);
        let planes = build_plane_residuals(map, scan, &start, config);
        let (post, mut rep) = iterated_update(prior, &start, &config.esikf, |x| {
            let mut ne = NormalEquations::default();
            for r in &planes {
                let r = plane_residual(x, &r.point_body, &r.normal, r.offset, r.var);
                ne.add_scalar(&r.h, r.residual, r.var);
            }
            ne
        })?;
        let moved = post.x.boxminus(&start).norm();
        if let Some((_, prev)) = &current {
            rep.iterations += prev.iterations;
            rep.halvings += prev.halvings;
        }
        current = Some((post, rep));
        if moved < config.esikf.epsilon || planes.is_empty() {
            break;
        }
    }
    let (post, update) = current.expect("at least one association");
    let degenerate = update.terms < config.min_residuals;
    if degenerate {
        log::debug!("degenerate scan at t = {}: {} residuals", scan.end, update.terms);
    }
    let points: Vec<_> = scan
        .points
        .iter()
        .map(|p| (post.x.rot.rotate(&p.p) + post.x.pos, point_covariance(&post, &p.p, config.range_sigma)))
        .collect();
    let insert = map.insert_scan(&points, scan.end);
    map.set_activation(scan.end);
    Ok((
        post,
        LioReport {
            residuals: update.terms,
            update,
            degenerate,
            insert,
        },
    ))
}
