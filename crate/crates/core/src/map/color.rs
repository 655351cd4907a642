use nalgebra::{Matrix2, Matrix3, SMatrix, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::{PointId, VoxelMap};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::manifold::{FullState, Intrinsics, Rotation3};
use crate::sensors::CameraFrame;

/// Bilinear color and its analytic gradient `(∂/∂u, ∂/∂v)` at a continuous
/// pixel coordinate inside `[0, W−1]×[0, H−1]`. The gradient is that of the
/// interpolant on the cell containing the point (piecewise constant).
pub fn bilinear(frame: &CameraFrame, u: f64, v: f64) -> Option<(Vector3<f64>, [Vector3<f64>; 2])> {
    if !frame.contains(u, v, 0.0) || frame.width < 2 || frame.height < 2 {
        return None;
    }
    let u0 = (u.floor() as usize).min(frame.width - 2);
    let v0 = (v.floor() as usize).min(frame.height - 2);
    let (a, b) = (u - u0 as f64, v - v0 as f64);
    let px = |x: usize, y: usize| {
        let p = frame.at(x, y);
        Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64)
    };
    let (c00, c10, c01, c11) = (px(u0, v0), px(u0 + 1, v0), px(u0, v0 + 1), px(u0 + 1, v0 + 1));
    let color = c00 * ((1.0 - a) * (1.0 - b)) + c10 * (a * (1.0 - b)) + c01 * ((1.0 - a) * b) + c11 * (a * b);
    let du = (c10 - c00) * (1.0 - b) + (c11 - c01) * b;
    let dv = (c01 - c00) * (1.0 - a) + (c11 - c10) * a;
    Some((color, [du, dv]))
}

/// Observed color at `rho` and its covariance `σ_pix²·I`.
pub fn interpolate_color(frame: &CameraFrame, rho: &Vector2<f64>, pixel_var: f64) -> Result<(Vector3<f64>, Matrix3<f64>)> {
    match bilinear(frame, rho.x, rho.y) {
        Some((c, _)) => Ok((c, Matrix3::identity() * pixel_var)),
        None => Err(Error::PixelOutOfBounds {
            u: rho.x,
            v: rho.y,
            width: frame.width,
            height: frame.height,
        }),
    }
}

/// Bayesian fusion of a stored color (after adding the random-walk
/// variance `process_var`) with an observation, in information form:
/// `Σ̃ = ((Σ_c + σ²Δt)⁻¹ + Σ_γ⁻¹)⁻¹`, `c̃ = Σ̃((Σ_c + σ²Δt)⁻¹c + Σ_γ⁻¹γ)`.
pub fn fuse_color(
    c: &Vector3<f64>,
    cov_c: &Matrix3<f64>,
    gamma: &Vector3<f64>,
    cov_gamma: &Matrix3<f64>,
    process_var: f64,
) -> Option<(Vector3<f64>, Matrix3<f64>)> {
    let prior_info = (cov_c + Matrix3::identity() * process_var).try_inverse()?;
    let obs_info = cov_gamma.try_inverse()?;
    let cov = (prior_info + obs_info).try_inverse()?;
    let cov = (cov + cov.transpose()) * 0.5;
    Some((cov * (prior_info * c + obs_info * gamma), cov))
}

/// Pinhole camera pose in the world: `rot` maps camera to world axes and
/// `pos` is the optical center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraView {
    pub rot: Rotation3,
    pub pos: Vector3<f64>,
    pub intrinsics: Intrinsics,
}

impl CameraView {
    pub fn from_state(x: &FullState) -> Self {
        Self {
            rot: x.rot * x.rot_ic,
            pos: x.camera_center(),
            intrinsics: x.intrinsics,
        }
    }

    pub fn camera_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rot.matrix().transpose() * (p - self.pos)
    }

    /// Pixel and depth of a world point, `None` when `z ≤ z_min`.
    pub fn project(&self, p: &Vector3<f64>, z_min: f64) -> Option<(Vector2<f64>, f64)> {
        let c = self.camera_point(p);
        (c.z > z_min).then(|| {
            let k = &self.intrinsics;
            (Vector2::new(k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy), c.z)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    /// Per-channel standard deviation of an interpolated pixel color.
    pub pixel_sigma: f64,
    /// Color random-walk density σ: variance grows by `σ²·Δt`. The pipeline
    /// takes it from the noise settings.
    #[serde(skip)]
    pub color_sigma: f64,
    /// Points are rendered only this far inside the image border, pixels.
    pub margin: f64,
    pub z_min: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            pixel_sigma: 0.01,
            color_sigma: 0.0,
            margin: 1.0,
            z_min: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct RenderReport {
    pub candidates: usize,
    pub rendered: usize,
    pub behind: usize,
    pub outside: usize,
}

/// Paints every activated point that falls inside `frame`.
pub fn render_point_colors(
    map: &mut VoxelMap,
    frame: &CameraFrame,
    view: &CameraView,
    config: &RenderConfig,
    t_now: f64,
) -> RenderReport {
    render_point_colors_with(Exec::default(), map, frame, view, config, t_now, None)
}

/// Optional pixel covariance of a world point's projection; it is mapped
/// through the image gradient and added to `Σ_γ`.
pub type PixelCovariance<'a> = &'a (dyn Fn(&Vector3<f64>) -> Option<Matrix2<f64>> + Sync);

enum Outcome {
    Behind,
    Outside,
    Fused(PointId, Vector3<f64>, Matrix3<f64>),
}

pub fn render_point_colors_with(
    exec: Exec,
    map: &mut VoxelMap,
    frame: &CameraFrame,
    view: &CameraView,
    config: &RenderConfig,
    t_now: f64,
    pixel_cov: Option<PixelCovariance>,
) -> RenderReport {
    let ids = map.activated_points();
    let pixel_var = config.pixel_sigma * config.pixel_sigma;
    let color_var = config.color_sigma * config.color_sigma;
    let cov_gamma = Matrix3::identity() * pixel_var;
    let m: &VoxelMap = map;
    let outcomes = exec.map_slice(&ids, |&id| {
        let pt = m.point(id);
        let Some((rho, _)) = view.project(&pt.p, config.z_min) else {
            return Outcome::Behind;
        };
        if !frame.contains(rho.x, rho.y, config.margin) {
            return Outcome::Outside;
        }
        let Some((gamma, grad)) = bilinear(frame, rho.x, rho.y) else {
            return Outcome::Outside;
        };
        let mut cov_obs = cov_gamma;
        if let Some(c) = pixel_cov.and_then(|f| f(&pt.p)) {
            let d = SMatrix::<f64, 3, 2>::from_columns(&grad);
            cov_obs += d * c * d.transpose();
        }
        let dt = (t_now - pt.t_rendered).max(0.0);
        match fuse_color(&pt.color, &pt.cov_c, &gamma, &cov_obs, color_var * dt) {
            Some((c, cov)) => Outcome::Fused(id, c, cov),
            None => Outcome::Outside,
        }
    });
    let mut report = RenderReport {
        candidates: ids.len(),
        ..Default::default()
    };
    for o in outcomes {
        match o {
            Outcome::Behind => report.behind += 1,
            Outcome::Outside => report.outside += 1,
            Outcome::Fused(id, c, cov) => {
                let p = map.point_mut(id);
                p.color = c.map(|v| v.clamp(0.0, 1.0));
                p.cov_c = cov;
                p.t_rendered = t_now;
                report.rendered += 1;
            }
        }
    }
    report
}
