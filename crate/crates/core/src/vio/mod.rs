//! Visual-inertial updates: a frame-to-frame reprojection stage on tracked
//! map points followed by a frame-to-map photometric stage on the same
//! points.

mod lk;
mod tracker;

use nalgebra::{Matrix2, Matrix3, SMatrix, Vector2, Vector3};
use serde::{Deserialize, Serialize};

pub use lk::{track_lk, LkConfig};
pub use tracker::{OracleBinding, OracleTracker, TrackerMode};

use crate::error::{Error, Result};
use crate::esikf::{iterated_update, EsikfConfig, NormalEquations, UpdateReport};
use crate::exec::Exec;
use crate::manifold::{idx, so3, FullState, StateWithCov, STATE_DIM};
use crate::map::{bilinear, PointId};
use crate::sensors::CameraFrame;

/// Point in the camera frame:
/// `ᶜp = (R_GI·R_IC)ᵀ p_G − R_ICᵀ p_IC − (R_GI·R_IC)ᵀ p_GI`.
pub fn camera_point(x: &FullState, p_g: &Vector3<f64>) -> Vector3<f64> {
    let r_gc = x.rot.matrix() * x.rot_ic.matrix();
    r_gc.transpose() * p_g - x.rot_ic.matrix().transpose() * x.pos_ic - r_gc.transpose() * x.pos
}

/// Pinhole projection plus the temporal correction
/// `(t_IC/Δt)(ρ_curr − ρ_prev)`.
pub fn project_with_temporal(
    x: &FullState,
    pc: &Vector3<f64>,
    rho_prev: &Vector2<f64>,
    rho_curr: &Vector2<f64>,
    dt_frames: f64,
    z_min: f64,
) -> Result<Vector2<f64>> {
    if !(pc.z > z_min) {
        return Err(Error::BehindCamera { z: pc.z });
    }
    let k = &x.intrinsics;
    let pin = Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy);
    Ok(pin + flow_rate(rho_prev, rho_curr, dt_frames) * x.time_offset)
}

fn flow_rate(rho_prev: &Vector2<f64>, rho_curr: &Vector2<f64>, dt_frames: f64) -> Vector2<f64> {
    if dt_frames > 0.0 {
        (rho_curr - rho_prev) / dt_frames
    } else {
        Vector2::zeros()
    }
}

/// Projection `ρ(x)` with its Jacobians w.r.t. the error state and `p_G`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub rho: Vector2<f64>,
    pub camera_point: Vector3<f64>,
    pub d_state: SMatrix<f64, 2, STATE_DIM>,
    pub d_point: SMatrix<f64, 2, 3>,
}

pub fn projection_jacobians(
    x: &FullState,
    p_g: &Vector3<f64>,
    rho_prev: &Vector2<f64>,
    rho_curr: &Vector2<f64>,
    dt_frames: f64,
    z_min: f64,
) -> Result<Projection> {
    let pc = camera_point(x, p_g);
    let rho = project_with_temporal(x, &pc, rho_prev, rho_curr, dt_frames, z_min)?;
    let k = &x.intrinsics;
    let (iz, iz2) = (1.0 / pc.z, 1.0 / (pc.z * pc.z));
    let d_pin = SMatrix::<f64, 2, 3>::new(k.fx * iz, 0.0, -k.fx * pc.x * iz2, 0.0, k.fy * iz, -k.fy * pc.y * iz2);
    let r_gi_t = x.rot.matrix().transpose();
    let r_ic_t = x.rot_ic.matrix().transpose();
    let p_i = r_gi_t * (p_g - x.pos);
    let mut d_state = SMatrix::<f64, 2, STATE_DIM>::zeros();
    d_state
        .fixed_view_mut::<2, 3>(0, idx::ROT)
        .copy_from(&(d_pin * r_ic_t * so3::hat(&p_i)));
    d_state
        .fixed_view_mut::<2, 3>(0, idx::POS)
        .copy_from(&(-d_pin * r_ic_t * r_gi_t));
    d_state.fixed_view_mut::<2, 3>(0, idx::ROT_IC).copy_from(&(d_pin * so3::hat(&pc)));
    d_state.fixed_view_mut::<2, 3>(0, idx::POS_IC).copy_from(&(-d_pin * r_ic_t));
    d_state
        .fixed_view_mut::<2, 1>(0, idx::TIME_OFFSET)
        .copy_from(&flow_rate(rho_prev, rho_curr, dt_frames));
    let intr = SMatrix::<f64, 2, 4>::new(pc.x * iz, 0.0, 1.0, 0.0, 0.0, pc.y * iz, 0.0, 1.0);
    d_state.fixed_view_mut::<2, 4>(0, idx::INTRINSICS).copy_from(&intr);
    Ok(Projection {
        rho,
        camera_point: pc,
        d_state,
        d_point: d_pin * r_ic_t * r_gi_t,
    })
}

/// Error-state columns a still projection depends on.
const PROJECTION_COLUMNS: [usize; 16] = [
    idx::ROT,
    idx::ROT + 1,
    idx::ROT + 2,
    idx::POS,
    idx::POS + 1,
    idx::POS + 2,
    idx::ROT_IC,
    idx::ROT_IC + 1,
    idx::ROT_IC + 2,
    idx::POS_IC,
    idx::POS_IC + 1,
    idx::POS_IC + 2,
    idx::INTRINSICS,
    idx::INTRINSICS + 1,
    idx::INTRINSICS + 2,
    idx::INTRINSICS + 3,
];

/// Pixel covariance `JΣJᵀ` of projecting fixed world points with an
/// uncertain state.
#[derive(Debug, Clone)]
pub struct ProjectionUncertainty {
    x: FullState,
    cov: SMatrix<f64, 16, 16>,
    z_min: f64,
}

impl ProjectionUncertainty {
    pub fn new(state: &StateWithCov, z_min: f64) -> Self {
        let cov = SMatrix::<f64, 16, 16>::from_fn(|i, j| state.cov[(PROJECTION_COLUMNS[i], PROJECTION_COLUMNS[j])]);
        Self { x: state.x, cov, z_min }
    }

    pub fn at(&self, p_g: &Vector3<f64>) -> Option<Matrix2<f64>> {
        let z = Vector2::zeros();
        let pr = projection_jacobians(&self.x, p_g, &z, &z, 0.0, self.z_min).ok()?;
        let j = SMatrix::<f64, 2, 16>::from_fn(|r, c| pr.d_state[(r, PROJECTION_COLUMNS[c])]);
        let c = j * self.cov * j.transpose();
        Some((c + c.transpose()) * 0.5)
    }
}

/// A tracked map point as seen by both visual stages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackInput {
    pub id: PointId,
    pub p_g: Vector3<f64>,
    pub cov_p: Matrix3<f64>,
    pub color: Vector3<f64>,
    pub cov_c: Matrix3<f64>,
    /// Time since the point was last rendered, seconds.
    pub dt_color: f64,
    pub rho_prev: Vector2<f64>,
    pub rho_curr: Vector2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PnpResidualTerm {
    pub id: PointId,
    pub rho: Vector2<f64>,
    pub predicted: Vector2<f64>,
    /// `ρ − π(ᶜp, x)`, pixels.
    pub residual: Vector2<f64>,
    pub h: SMatrix<f64, 2, STATE_DIM>,
    pub f: SMatrix<f64, 2, 3>,
    pub cov: Matrix2<f64>,
}

/// Reprojection residual, its Jacobians and `Σ_α = Σ_nρ + FΣ_pFᵀ`.
pub fn pnp_jacobians(x: &FullState, input: &TrackInput, dt_frames: f64, cov_rho: &Matrix2<f64>, z_min: f64) -> Result<PnpResidualTerm> {
    let pr = projection_jacobians(x, &input.p_g, &input.rho_prev, &input.rho_curr, dt_frames, z_min)?;
    let f = -pr.d_point;
    let cov = cov_rho + f * input.cov_p * f.transpose();
    Ok(PnpResidualTerm {
        id: input.id,
        rho: input.rho_curr,
        predicted: pr.rho,
        residual: input.rho_curr - pr.rho,
        h: -pr.d_state,
        f,
        cov: (cov + cov.transpose()) * 0.5,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhotoResidualTerm {
    pub id: PointId,
    pub predicted: Vector2<f64>,
    pub observed: Vector3<f64>,
    /// `c_s − γ_s`.
    pub residual: Vector3<f64>,
    pub h: SMatrix<f64, 3, STATE_DIM>,
    pub f: SMatrix<f64, 3, 3>,
    pub cov: Matrix3<f64>,
}

/// Photometric residual against the current image with bilinear-gradient
/// Jacobians and `Σ_β = Σ_c + σ²Δt + Σ_γ + FΣ_pFᵀ`.
pub fn photometric_jacobians(
    x: &FullState,
    input: &TrackInput,
    frame: &CameraFrame,
    dt_frames: f64,
    config: &VioConfig,
) -> Result<PhotoResidualTerm> {
    let pr = projection_jacobians(x, &input.p_g, &input.rho_prev, &input.rho_curr, dt_frames, config.z_min)?;
    let out_of_view = || Error::PixelOutOfBounds {
        u: pr.rho.x,
        v: pr.rho.y,
        width: frame.width,
        height: frame.height,
    };
    if !frame.contains(pr.rho.x, pr.rho.y, 1.0) {
        return Err(out_of_view());
    }
    let (gamma, grad) = bilinear(frame, pr.rho.x, pr.rho.y).ok_or_else(out_of_view)?;
    // ∂γ/∂ρ, one row per channel.
    let d_gamma = SMatrix::<f64, 3, 2>::from_columns(&[grad[0], grad[1]]);
    let h = -(d_gamma * pr.d_state);
    let f = -(d_gamma * pr.d_point);
    let pixel_var = config.pixel_sigma * config.pixel_sigma;
    let color_var = config.color_sigma * config.color_sigma * input.dt_color.max(0.0);
    let cov = input.cov_c + Matrix3::identity() * (color_var + pixel_var) + f * input.cov_p * f.transpose();
    Ok(PhotoResidualTerm {
        id: input.id,
        predicted: pr.rho,
        observed: gamma,
        residual: input.color - gamma,
        h,
        f,
        cov: (cov + cov.transpose()) * 0.5,
    })
}

/// Pixel velocity `∂ρ/∂t` of a fixed world point when the body rotates at
/// `omega` (body frame) and moves at `x.vel`.
pub fn motion_flow(x: &FullState, p_g: &Vector3<f64>, omega: &Vector3<f64>, z_min: f64) -> Result<Vector2<f64>> {
    let z = Vector2::zeros();
    let pr = projection_jacobians(x, p_g, &z, &z, 0.0, z_min)?;
    Ok(pr.d_state.fixed_columns::<3>(idx::ROT) * omega + pr.d_state.fixed_columns::<3>(idx::POS) * x.vel)
}

/// Source of the pixel velocity in the temporal correction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TemporalFlow {
    /// `(ρ_curr − ρ_prev)/Δt` from the tracks.
    #[default]
    Tracks,
    /// [`motion_flow`] at the propagated state, so the correction does not
    /// reuse the noise of `ρ_curr`.
    Motion,
}

/// How the frame-to-map stage picks its prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StagePrior {
    /// Same propagated prior as the frame-to-frame stage, linearized at the
    /// frame-to-frame estimate.
    #[default]
    Shared,
    /// The frame-to-frame posterior becomes the prior.
    Chained,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VioConfig {
    /// Standard deviation of a tracked pixel location, pixels.
    pub tracking_sigma: f64,
    /// Per-channel standard deviation of an interpolated color (the pipeline
    /// copies it from the render settings).
    #[serde(skip)]
    pub pixel_sigma: f64,
    /// Color random-walk density.
    #[serde(skip)]
    pub color_sigma: f64,
    pub z_min: f64,
    /// Huber threshold on reprojection residuals, pixels; `None` disables.
    pub huber: Option<f64>,
    pub stage_prior: StagePrior,
    pub temporal_flow: TemporalFlow,
    /// Charge each rendered color with the pixel uncertainty of the state
    /// it was painted from.
    pub render_uncertainty: bool,
    pub esikf: EsikfConfig,
}

impl Default for VioConfig {
    fn default() -> Self {
        Self {
            tracking_sigma: 1.0,
            pixel_sigma: 0.01,
            color_sigma: 0.0,
            z_min: 0.01,
            huber: None,
            stage_prior: StagePrior::Shared,
            temporal_flow: TemporalFlow::Tracks,
            render_uncertainty: false,
            esikf: EsikfConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StageReport {
    pub update: UpdateReport,
    pub terms: usize,
    /// Root mean square of the final residuals (pixels or color units).
    pub rms: f64,
}

fn huber_weight(norm: f64, delta: Option<f64>) -> f64 {
    match delta {
        Some(d) if norm > d => d / norm,
        _ => 1.0,
    }
}

/// Normal equations of all valid reprojection terms at `x`.
pub fn pnp_normal_equations(x: &FullState, inputs: &[TrackInput], dt_frames: f64, config: &VioConfig) -> NormalEquations {
    let cov_rho = Matrix2::identity() * (config.tracking_sigma * config.tracking_sigma);
    let terms = Exec::default().map_slice(inputs, |t| pnp_jacobians(x, t, dt_frames, &cov_rho, config.z_min).ok());
    let mut ne = NormalEquations::default();
    for t in terms.into_iter().flatten() {
        let w = huber_weight(t.residual.norm() / config.tracking_sigma.max(1e-12), config.huber.map(|d| d / config.tracking_sigma.max(1e-12)));
        ne.add_block(&t.h, &t.residual, &(t.cov / w));
    }
    ne
}

/// Normal equations of all valid photometric terms at `x`.
pub fn photo_normal_equations(
    x: &FullState,
    inputs: &[TrackInput],
    frame: &CameraFrame,
    dt_frames: f64,
    config: &VioConfig,
) -> NormalEquations {
    let terms = Exec::default().map_slice(inputs, |t| photometric_jacobians(x, t, frame, dt_frames, config).ok());
    let mut ne = NormalEquations::default();
    for t in terms.into_iter().flatten() {
        ne.add_block(&t.h, &t.residual, &t.cov);
    }
    ne
}

fn rms(chi: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in chi {
        s += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        (s / n as f64).sqrt()
    }
}

/// Frame-to-frame reprojection update starting from `start`.
pub fn frame_to_frame_update(
    prior: &StateWithCov,
    start: &FullState,
    inputs: &[TrackInput],
    dt_frames: f64,
    config: &VioConfig,
) -> Result<(StateWithCov, StageReport)> {
    let (post, update) = iterated_update(prior, start, &config.esikf, |x| {
        pnp_normal_equations(x, inputs, dt_frames, config)
    })?;
    let cov_rho = Matrix2::identity() * (config.tracking_sigma * config.tracking_sigma);
    let final_terms: Vec<_> = inputs
        .iter()
        .filter_map(|t| pnp_jacobians(&post.x, t, dt_frames, &cov_rho, config.z_min).ok())
        .collect();
    Ok((
        post,
        StageReport {
            terms: update.terms,
            rms: rms(final_terms.iter().map(|t| t.residual.norm_squared() / 2.0)),
            update,
        },
    ))
}

/// Frame-to-map photometric update starting from `start`.
pub fn frame_to_map_update(
    prior: &StateWithCov,
    start: &FullState,
    inputs: &[TrackInput],
    frame: &CameraFrame,
    dt_frames: f64,
    config: &VioConfig,
) -> Result<(StateWithCov, StageReport)> {
    let (post, update) = iterated_update(prior, start, &config.esikf, |x| {
        photo_normal_equations(x, inputs, frame, dt_frames, config)
    })?;
    let final_terms: Vec<_> = inputs
        .iter()
        .filter_map(|t| photometric_jacobians(&post.x, t, frame, dt_frames, config).ok())
        .collect();
    Ok((
        post,
        StageReport {
            terms: update.terms,
            rms: rms(final_terms.iter().map(|t| t.residual.norm_squared() / 3.0)),
            update,
        },
    ))
}
