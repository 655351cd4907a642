//! Replay of a recorded or simulated sequence through the LiDAR-inertial and
//! visual-inertial updates, plus the file-level commands behind the CLI.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{StampedPose, Trajectory};
use crate::imu::{backward_compensate, propagate, NoiseConfig};
use crate::lio::{lio_update, LioConfig};
use crate::manifold::{idx, FullState, Rotation3, StateMatrix, StateWithCov};
use crate::exec::Exec;
use crate::map::{
    read_ply, render_point_colors_with, update_tracked_points, write_pcd, write_ply, CameraView, MapConfig,
    PixelCovariance, PointId, RenderConfig, ResidualNorms, TrackConfig, TrackedPoint, VoxelMap,
};
use crate::sensors::{CameraFrame, ImuSample};
use crate::sim::{presets, read_sequence, write_sequence, CalibOffsets, Scenario, Sequence};
use crate::vio::{
    frame_to_frame_update, frame_to_map_update, motion_flow, photometric_jacobians, pnp_jacobians, track_lk, LkConfig,
    OracleBinding, OracleTracker, ProjectionUncertainty, StagePrior, TemporalFlow, TrackInput, TrackerMode,
    VioConfig,
};

/// Initial standard deviations of the state blocks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialSigma {
    pub rot: f64,
    pub pos: f64,
    pub vel: f64,
    pub bias_gyro: f64,
    pub bias_acc: f64,
    pub gravity: f64,
    pub rot_ic: f64,
    pub pos_ic: f64,
    pub time_offset: f64,
    pub intrinsics: f64,
}

impl Default for InitialSigma {
    fn default() -> Self {
        Self {
            rot: 1e-3,
            pos: 1e-3,
            vel: 1e-2,
            bias_gyro: 1e-3,
            bias_acc: 1e-2,
            gravity: 1e-3,
            rot_ic: 0.03,
            pos_ic: 0.02,
            time_offset: 0.01,
            intrinsics: 4.0,
        }
    }
}

impl InitialSigma {
    pub fn covariance(&self) -> StateMatrix {
        let mut c = StateMatrix::zeros();
        let blocks = [
            (idx::ROT, 3, self.rot),
            (idx::POS, 3, self.pos),
            (idx::VEL, 3, self.vel),
            (idx::BIAS_GYRO, 3, self.bias_gyro),
            (idx::BIAS_ACC, 3, self.bias_acc),
            (idx::GRAVITY, 3, self.gravity),
            (idx::ROT_IC, 3, self.rot_ic),
            (idx::POS_IC, 3, self.pos_ic),
            (idx::TIME_OFFSET, 1, self.time_offset),
            (idx::INTRINSICS, 4, self.intrinsics),
        ];
        for (start, n, s) in blocks {
            for i in start..start + n {
                c[(i, i)] = s * s;
            }
        }
        c
    }
}

/// All run settings. Relative paths are resolved against the directory of
/// the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub sequence: PathBuf,
    pub output: PathBuf,
    /// Process a scan before an image carrying the same timestamp.
    pub lidar_first: bool,
    /// Set to false to run LiDAR-inertial only.
    pub use_camera: bool,
    pub tracker: TrackerMode,
    pub oracle_binding: OracleBinding,
    /// Seed of the oracle tracker noise.
    pub seed: u64,
    pub noise: NoiseConfig,
    pub initial_sigma: InitialSigma,
    pub map: MapConfig,
    pub lio: LioConfig,
    pub vio: VioConfig,
    pub render: RenderConfig,
    pub track: TrackConfig,
    pub lk: LkConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            sequence: PathBuf::from("sequence"),
            output: PathBuf::from("run"),
            lidar_first: true,
            use_camera: true,
            tracker: TrackerMode::Oracle,
            oracle_binding: OracleBinding::Point,
            seed: 0,
            noise: NoiseConfig::default(),
            initial_sigma: InitialSigma::default(),
            map: MapConfig::default(),
            lio: LioConfig::default(),
            vio: VioConfig::default(),
            render: RenderConfig::default(),
            track: TrackConfig::default(),
            lk: LkConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and resolves its paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.sequence = base.join(&cfg.sequence);
        cfg.output = base.join(&cfg.output);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.map.validate()?;
        self.noise.validate()?;
        let positive = [
            ("vio.tracking_sigma", self.vio.tracking_sigma),
            ("render.pixel_sigma", self.render.pixel_sigma),
            ("lio.point_sigma", self.lio.point_sigma),
            ("track.exclusion_radius", self.track.exclusion_radius),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.lk.window.is_multiple_of(2) || self.lk.levels == 0 {
            return Err(Error::Config("lk.window must be odd and lk.levels at least 1".into()));
        }
        Ok(())
    }

    fn vio_config(&self) -> VioConfig {
        let mut v = self.vio;
        v.pixel_sigma = self.render.pixel_sigma;
        v.color_sigma = self.noise.color;
        v
    }

    fn render_config(&self) -> RenderConfig {
        RenderConfig {
            color_sigma: self.noise.color,
            ..self.render
        }
    }
}

/// One JSON line of the diagnostics log.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Diagnostic {
    Scan {
        t: f64,
        iterations: usize,
        converged: bool,
        residuals: usize,
        degenerate: bool,
        inserted: usize,
        map_points: usize,
        cov_trace: f64,
        pose_cov_trace: f64,
    },
    Frame {
        t: f64,
        f2f_iterations: usize,
        f2m_iterations: usize,
        pnp_terms: usize,
        photo_terms: usize,
        pnp_rms: f64,
        photo_rms: f64,
        tracked: usize,
        added: usize,
        removed: usize,
        lost: usize,
        rendered: usize,
        cov_trace: f64,
        pose_cov_trace: f64,
        time_offset: f64,
    },
}

impl Diagnostic {
    pub fn t(&self) -> f64 {
        match self {
            Diagnostic::Scan { t, .. } | Diagnostic::Frame { t, .. } => *t,
        }
    }

    pub fn pose_cov_trace(&self) -> f64 {
        match self {
            Diagnostic::Scan { pose_cov_trace, .. } | Diagnostic::Frame { pose_cov_trace, .. } => *pose_cov_trace,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    /// Pose after every update, plus the initial pose.
    pub trajectory: Trajectory,
    pub map: VoxelMap,
    pub diagnostics: Vec<Diagnostic>,
    pub final_state: StateWithCov,
}

impl RunReport {
    pub fn diagnostics_jsonl(&self) -> String {
        let mut out = String::new();
        for d in &self.diagnostics {
            let line = serde_json::to_string(d).expect("diagnostics serialize");
            let _ = writeln!(out, "{line}");
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.trajectory.write_csv(&dir.join("trajectory.csv"))?;
        write_ply(&dir.join("map.ply"), &self.map.export_points())?;
        let path = dir.join("diagnostics.jsonl");
        fs::write(&path, self.diagnostics_jsonl()).map_err(|e| Error::io(&path, e))?;
        let path = dir.join("final_state.json");
        let text = serde_json::to_string_pretty(&self.final_state.x).expect("state serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Event {
    Scan(usize),
    Frame(usize),
}

fn schedule(seq: &Sequence, use_camera: bool, lidar_first: bool) -> Vec<(f64, Event)> {
    let mut events: Vec<(f64, Event)> = seq.scans.iter().enumerate().map(|(i, s)| (s.end, Event::Scan(i))).collect();
    if use_camera {
        events.extend(seq.frames.times.iter().enumerate().map(|(i, &t)| (t, Event::Frame(i))));
    }
    let rank = |e: &Event| match (e, lidar_first) {
        (Event::Scan(_), true) | (Event::Frame(_), false) => 0,
        _ => 1,
    };
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(rank(&a.1).cmp(&rank(&b.1))));
    events
}

/// IMU samples needed to move from `t0` to `t1`: the one active at `t0`
/// through the last one stamped at or before `t1`.
fn imu_window(imu: &[ImuSample], t0: f64, t1: f64) -> &[ImuSample] {
    let a = imu.partition_point(|s| s.t <= t0).saturating_sub(1);
    let b = imu.partition_point(|s| s.t <= t1).max(a + 1);
    &imu[a..b.min(imu.len())]
}

fn pose_trace(c: &StateMatrix) -> f64 {
    (0..6).map(|i| c[(i, i)]).sum()
}

/// Camera pose at the exposure time `t + t_IC`, extrapolated to first order
/// from the state at `t`.
fn exposure_view(x: &FullState, omega: &Vector3<f64>) -> CameraView {
    let dt = x.time_offset;
    let mut y = *x;
    y.rot = x.rot * Rotation3::exp(&(omega * dt));
    y.pos = x.pos + x.vel * dt;
    CameraView::from_state(&y)
}

struct Visual {
    tracked: Vec<TrackedPoint>,
    oracle: Option<OracleTracker>,
    prev_frame: Option<CameraFrame>,
    prev_t: f64,
}

/// Runs the estimator over an in-memory sequence.
pub fn run_sequence(seq: &Sequence, config: &PipelineConfig) -> Result<RunReport> {
    config.validate()?;
    let vio_cfg = config.vio_config();
    let init = &seq.initial;
    let calib = &seq.calibration.init;
    let mut x = FullState::with_calibration(calib.rot_ic, calib.pos_ic, calib.time_offset, calib.intrinsics);
    x.rot = init.rot;
    x.pos = init.pos;
    x.vel = init.vel;
    x.gravity = init.gravity;
    let mut state = StateWithCov::new(x, config.initial_sigma.covariance(), init.t);
    let mut map = VoxelMap::new(config.map)?;
    let mut trajectory = Trajectory::new(vec![StampedPose {
        t: state.t,
        rot: state.x.rot,
        pos: state.x.pos,
    }])?;
    let mut diagnostics = vec![];
    let mut visual = Visual {
        tracked: vec![],
        oracle: (config.tracker == TrackerMode::Oracle)
            .then(|| OracleTracker::new(seq.scenario.clone(), vio_cfg.tracking_sigma, config.seed)),
        prev_frame: None,
        prev_t: f64::NAN,
    };

    for (t, event) in schedule(seq, config.use_camera && seq.scenario.camera.is_some(), config.lidar_first) {
        if t < state.t {
            continue;
        }
        let prior = propagate(&state, imu_window(&seq.imu, state.t, t), t, &config.noise)?;
        match event {
            Event::Scan(i) => {
                let scan = &seq.scans[i];
                let undistorted = backward_compensate(scan, imu_window(&seq.imu, scan.start, scan.end), &prior.x)?;
                let (post, rep) = lio_update(&prior, &undistorted, &mut map, &config.lio)?;
                state = post;
                diagnostics.push(Diagnostic::Scan {
                    t,
                    iterations: rep.update.iterations,
                    converged: rep.update.converged,
                    residuals: rep.residuals,
                    degenerate: rep.degenerate,
                    inserted: rep.insert.inserted,
                    map_points: map.len(),
                    cov_trace: state.cov.trace(),
                    pose_cov_trace: pose_trace(&state.cov),
                });
            }
            Event::Frame(i) => {
                let frame = seq.frames.load(i)?;
                let omega = imu_window(&seq.imu, t, t)
                    .last()
                    .map(|s| s.gyro - prior.x.bias_gyro)
                    .unwrap_or_default();
                let (post, diag) = visual_update(&prior, &frame, i, &omega, &mut map, &mut visual, config, &vio_cfg)?;
                state = post;
                diagnostics.push(diag);
            }
        }
        trajectory.push(StampedPose {
            t,
            rot: state.x.rot,
            pos: state.x.pos,
        })?;
    }
    Ok(RunReport {
        trajectory,
        map,
        diagnostics,
        final_state: state,
    })
}

#[allow(clippy::too_many_arguments)]
fn visual_update(
    prior: &StateWithCov,
    frame: &CameraFrame,
    index: usize,
    omega: &Vector3<f64>,
    map: &mut VoxelMap,
    vis: &mut Visual,
    config: &PipelineConfig,
    vio_cfg: &VioConfig,
) -> Result<(StateWithCov, Diagnostic)> {
    let t = frame.t;
    let dt_frames = t - vis.prev_t;
    let before = vis.tracked.len();

    // Follow the tracked points into this image.
    let located: Vec<Option<nalgebra::Vector2<f64>>> = match (&vis.oracle, &vis.prev_frame) {
        (Some(oracle), _) => oracle.track(&vis.tracked, index, t),
        (None, Some(prev)) => {
            let pts: Vec<_> = vis.tracked.iter().map(|p| p.curr).collect();
            track_lk(&prev.gray(), &frame.gray(), frame.width, frame.height, &pts, &config.lk)
        }
        (None, None) => vec![None; vis.tracked.len()],
    };
    vis.tracked = vis
        .tracked
        .iter()
        .zip(located)
        .filter_map(|(tp, loc)| {
            loc.map(|curr| TrackedPoint {
                id: tp.id,
                prev: tp.curr,
                curr,
            })
        })
        .collect();
    let lost = before - vis.tracked.len();

    let uncolored = 0.5 * map.config().uncolored_var;
    let mut inputs: Vec<TrackInput> = vis
        .tracked
        .iter()
        .map(|tp| {
            let p = map.point(tp.id);
            TrackInput {
                id: tp.id,
                p_g: p.p,
                cov_p: p.cov_p,
                color: p.color,
                cov_c: p.cov_c,
                dt_color: t - p.t_rendered,
                rho_prev: tp.prev,
                rho_curr: tp.curr,
            }
        })
        .collect();
    if vio_cfg.temporal_flow == TemporalFlow::Motion {
        for inp in &mut inputs {
            if let Ok(flow) = motion_flow(&prior.x, &inp.p_g, omega, vio_cfg.z_min) {
                inp.rho_prev = inp.rho_curr - flow * dt_frames;
            }
        }
    }
    let colored: Vec<TrackInput> = inputs.iter().filter(|i| i.cov_c[(0, 0)] < uncolored).copied().collect();

    let (f2f, r1) = frame_to_frame_update(prior, &prior.x, &inputs, dt_frames, vio_cfg)?;
    let stage_prior = match vio_cfg.stage_prior {
        StagePrior::Shared => prior,
        StagePrior::Chained => &f2f,
    };
    let (post, r2) = frame_to_map_update(stage_prior, &f2f.x, &colored, frame, dt_frames, vio_cfg)?;

    // Final residual norms decide which tracks survive.
    let cov_rho = Matrix2::identity() * vio_cfg.tracking_sigma.powi(2);
    let mut norms = HashMap::new();
    for inp in &inputs {
        norms.insert(
            inp.id,
            ResidualNorms {
                pnp: pnp_jacobians(&post.x, inp, dt_frames, &cov_rho, vio_cfg.z_min)
                    .map(|r| r.residual.norm())
                    .ok(),
                photo: None,
            },
        );
    }
    for inp in &colored {
        if let Ok(r) = photometric_jacobians(&post.x, inp, frame, dt_frames, vio_cfg) {
            norms.entry(inp.id).or_default().photo = Some(r.residual.norm());
        }
    }

    let view = exposure_view(&post.x, omega);
    let uncertainty = ProjectionUncertainty::new(&post, vio_cfg.z_min);
    let pixel_cov = |p: &Vector3<f64>| uncertainty.at(p);
    let rendered = render_point_colors_with(
        Exec::default(),
        map,
        frame,
        &view,
        &config.render_config(),
        t,
        vio_cfg.render_uncertainty.then_some(&pixel_cov as PixelCovariance),
    );
    let up = update_tracked_points(map, &vis.tracked, &norms, &view, frame.width, frame.height, &config.track);
    let mut added = up.added;
    vis.tracked = Vec::with_capacity(up.tracked.len());
    for tp in up.tracked {
        let fresh = tp.prev == tp.curr && !norms.contains_key(&tp.id);
        if fresh {
            if let Some(oracle) = vis.oracle.as_mut() {
                let bound = match config.oracle_binding {
                    OracleBinding::Point => oracle.register_point(tp.id, &map.point(tp.id).p, t),
                    OracleBinding::Pixel => oracle.register(tp.id, &tp.curr, t),
                };
                if !bound {
                    added -= 1;
                    continue;
                }
            }
        }
        vis.tracked.push(tp);
    }
    let ids: HashSet<PointId> = vis.tracked.iter().map(|p| p.id).collect();
    match vis.oracle.as_mut() {
        Some(oracle) => oracle.retain(|id| ids.contains(&id)),
        None => vis.prev_frame = Some(frame.clone()),
    }
    vis.prev_t = t;

    let diag = Diagnostic::Frame {
        t,
        f2f_iterations: r1.update.iterations,
        f2m_iterations: r2.update.iterations,
        pnp_terms: r1.terms,
        photo_terms: r2.terms,
        pnp_rms: r1.rms,
        photo_rms: r2.rms,
        tracked: vis.tracked.len(),
        added,
        removed: up.removed,
        lost,
        rendered: rendered.rendered,
        cov_trace: post.cov.trace(),
        pose_cov_trace: pose_trace(&post.cov),
        time_offset: post.x.time_offset,
    };
    Ok((post, diag))
}

/// Reads the configured sequence, runs it and writes the outputs.
pub fn run(config: &PipelineConfig) -> Result<RunReport> {
    config.validate()?;
    let seq = read_sequence(&config.sequence)?;
    let report = run_sequence(&seq, config)?;
    report.write(&config.output)?;
    Ok(report)
}

/// Input of `simulate`: a preset or a scenario file, plus overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSpec {
    pub preset: Option<String>,
    /// JSON scenario file, as written into `scenario.json`.
    pub scenario: Option<PathBuf>,
    pub seed: Option<u64>,
    pub output: PathBuf,
    pub duration: Option<f64>,
    /// Set to false to drop the camera stream.
    pub camera: Option<bool>,
    pub calib_offsets: Option<CalibOffsets>,
}

impl SimulateSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec: SimulateSpec =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        spec.output = base.join(&spec.output);
        spec.scenario = spec.scenario.map(|p| base.join(p));
        Ok(spec)
    }

    pub fn scenario(&self) -> Result<Scenario> {
        let mut sc = match (&self.preset, &self.scenario) {
            (Some(name), None) => presets::preset(name, self.seed.unwrap_or(0))?,
            (None, Some(path)) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?
            }
            _ => return Err(Error::Config("exactly one of `preset` and `scenario` is required".into())),
        };
        if let Some(seed) = self.seed {
            sc.seed = seed;
        }
        if let Some(d) = self.duration {
            sc.trajectory.duration = d;
        }
        if self.camera == Some(false) {
            sc.camera = None;
        }
        if let Some(off) = self.calib_offsets {
            sc.calib_offsets = off;
        }
        sc.validate()?;
        Ok(sc)
    }
}

pub fn simulate(spec: &SimulateSpec) -> Result<Sequence> {
    let seq = Sequence::generate(spec.scenario()?)?;
    write_sequence(&seq, &spec.output)?;
    Ok(seq)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Ply,
    Pcd,
}

/// Converts `run_dir/map.ply` into `run_dir/map.<format>` (or `output`).
pub fn export(run_dir: &Path, format: ExportFormat, output: Option<&Path>) -> Result<PathBuf> {
    let points = read_ply(&run_dir.join("map.ply"))?;
    let ext = match format {
        ExportFormat::Ply => "ply",
        ExportFormat::Pcd => "pcd",
    };
    let out = output.map_or_else(|| run_dir.join(format!("map.{ext}")), Path::to_path_buf);
    match format {
        ExportFormat::Ply => write_ply(&out, &points)?,
        ExportFormat::Pcd => write_pcd(&out, &points)?,
    }
    Ok(out)
}
