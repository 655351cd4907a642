//! Trajectory accuracy metrics: endpoint drift and relative pose errors over
//! fixed-length sub-sequences.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::manifold::Rotation3;

/// Sub-sequence lengths used when none are given, meters.
pub const DEFAULT_LENGTHS: [f64; 6] = [50.0, 100.0, 150.0, 200.0, 250.0, 300.0];

/// Maximum time gap for associating an estimate with a ground-truth pose.
pub const DEFAULT_MAX_DT: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StampedPose {
    pub t: f64,
    pub rot: Rotation3,
    pub pos: Vector3<f64>,
}

impl StampedPose {
    /// `self⁻¹ · other`.
    pub fn between(&self, other: &StampedPose) -> (Rotation3, Vector3<f64>) {
        let rt = self.rot.transpose();
        (rt * other.rot, rt.rotate(&(other.pos - self.pos)))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct PoseRecord {
    t: f64,
    px: f64,
    py: f64,
    pz: f64,
    qx: f64,
    qy: f64,
    qz: f64,
    qw: f64,
}

/// Poses with strictly increasing timestamps.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    poses: Vec<StampedPose>,
}

impl Trajectory {
    pub fn new(poses: Vec<StampedPose>) -> Result<Self> {
        crate::sensors::check_monotone(&poses, |p| p.t)?;
        Ok(Self { poses })
    }

    pub fn poses(&self) -> &[StampedPose] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Appends a pose; silently replaces the last one if it has the same
    /// timestamp.
    pub fn push(&mut self, pose: StampedPose) -> Result<()> {
        match self.poses.last() {
            Some(last) if pose.t == last.t => {
                *self.poses.last_mut().unwrap() = pose;
                Ok(())
            }
            Some(last) if pose.t < last.t => Err(Error::NonMonotoneTimestamps {
                index: self.poses.len(),
                t: pose.t,
            }),
            _ => {
                self.poses.push(pose);
                Ok(())
            }
        }
    }

    /// Applies `T · pose` to every pose.
    pub fn transformed(&self, rot: &Rotation3, trans: &Vector3<f64>) -> Trajectory {
        Trajectory {
            poses: self
                .poses
                .iter()
                .map(|p| StampedPose {
                    t: p.t,
                    rot: *rot * p.rot,
                    pos: rot.rotate(&p.pos) + trans,
                })
                .collect(),
        }
    }

    /// Pose with the nearest timestamp, if within `max_dt`.
    pub fn nearest(&self, t: f64, max_dt: f64) -> Option<&StampedPose> {
        let i = self.poses.partition_point(|p| p.t < t);
        let candidates = [i.checked_sub(1), (i < self.poses.len()).then_some(i)];
        candidates
            .into_iter()
            .flatten()
            .map(|k| &self.poses[k])
            .min_by(|a, b| (a.t - t).abs().total_cmp(&(b.t - t).abs()))
            .filter(|p| (p.t - t).abs() <= max_dt)
    }

    pub fn to_csv_string(&self) -> String {
        let mut w = csv::Writer::from_writer(vec![]);
        for p in &self.poses {
            let q = p.rot.to_quaternion();
            w.serialize(PoseRecord {
                t: p.t,
                px: p.pos.x,
                py: p.pos.y,
                pz: p.pos.z,
                qx: q.i,
                qy: q.j,
                qz: q.k,
                qw: q.w,
            })
            .expect("writing to memory");
        }
        String::from_utf8(w.into_inner().expect("writing to memory")).expect("csv is utf-8")
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Trajectory> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_str(&text).map_err(|e| match e {
            Error::Format { message, .. } => Error::format(path, message),
            other => other,
        })
    }

    pub fn from_csv_str(text: &str) -> Result<Trajectory> {
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let mut poses = vec![];
        for (i, rec) in r.deserialize::<PoseRecord>().enumerate() {
            let rec = rec.map_err(|e| Error::format("<trajectory>", format!("row {}: {e}", i + 1)))?;
            let q = Quaternion::new(rec.qw, rec.qx, rec.qy, rec.qz);
            if !(q.norm() > 1e-9) || ![rec.t, rec.px, rec.py, rec.pz].iter().all(|v| v.is_finite()) {
                return Err(Error::format("<trajectory>", format!("row {}: invalid pose", i + 1)));
            }
            poses.push(StampedPose {
                t: rec.t,
                rot: Rotation3::from_quaternion(&UnitQuaternion::from_quaternion(q)),
                pos: Vector3::new(rec.px, rec.py, rec.pz),
            });
        }
        Trajectory::new(poses)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Drift {
    pub rot_deg: f64,
    pub trans_m: f64,
}

/// Discrepancy between the estimated start-to-end motion and `gt_relative`.
pub fn endpoint_drift(est: &Trajectory, gt_relative: &(Rotation3, Vector3<f64>)) -> Result<Drift> {
    let (first, last) = match (est.poses.first(), est.poses.last()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::Config("endpoint drift needs a non-empty trajectory".into())),
    };
    let (r, p) = first.between(last);
    Ok(Drift {
        rot_deg: gt_relative.0.angle_to(&r).to_degrees(),
        trans_m: (p - gt_relative.1).norm(),
    })
}

/// Endpoint drift with the ground-truth relative motion taken between the
/// poses associated with the first and last estimate.
pub fn endpoint_drift_against(est: &Trajectory, gt: &Trajectory, max_dt: f64) -> Result<Drift> {
    let (first, last) = match (est.poses.first(), est.poses.last()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::Config("endpoint drift needs a non-empty trajectory".into())),
    };
    let missing = |t: f64| Error::Config(format!("no ground truth within {max_dt} s of t = {t}"));
    let g0 = gt.nearest(first.t, max_dt).ok_or_else(|| missing(first.t))?;
    let g1 = gt.nearest(last.t, max_dt).ok_or_else(|| missing(last.t))?;
    endpoint_drift(est, &g0.between(g1))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RpeOptions {
    pub max_dt: f64,
    /// Start-index stride between sub-sequences.
    pub stride: usize,
}

impl Default for RpeOptions {
    fn default() -> Self {
        Self {
            max_dt: DEFAULT_MAX_DT,
            stride: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RpeRow {
    pub length: f64,
    pub windows: usize,
    /// Mean relative rotation error, degrees.
    pub rre_deg: f64,
    /// Mean relative translation error, percent of the length.
    pub rte_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct RpeReport {
    pub rows: Vec<RpeRow>,
    /// Lengths longer than the ground-truth path.
    pub skipped: Vec<f64>,
    /// Estimates without a ground-truth pose within the association window.
    pub unmatched: usize,
}

/// Relative rotation and translation errors over sub-sequences whose
/// ground-truth arc length spans each of `lengths`.
pub fn relative_pose_errors(est: &Trajectory, gt: &Trajectory, lengths: &[f64], opts: &RpeOptions) -> RpeReport {
    relative_pose_errors_with(Exec::default(), est, gt, lengths, opts)
}

pub fn relative_pose_errors_with(
    exec: Exec,
    est: &Trajectory,
    gt: &Trajectory,
    lengths: &[f64],
    opts: &RpeOptions,
) -> RpeReport {
    let mut pairs = Vec::with_capacity(est.len());
    let mut unmatched = 0;
    for e in &est.poses {
        match gt.nearest(e.t, opts.max_dt) {
            Some(g) => pairs.push((*e, *g)),
            None => unmatched += 1,
        }
    }
    let mut dist = Vec::with_capacity(pairs.len());
    let mut acc = 0.0;
    for (i, (_, g)) in pairs.iter().enumerate() {
        if i > 0 {
            acc += (g.pos - pairs[i - 1].1.pos).norm();
        }
        dist.push(acc);
    }
    let stride = opts.stride.max(1);
    let starts: Vec<usize> = (0..pairs.len()).step_by(stride).collect();
    let mut report = RpeReport {
        unmatched,
        ..Default::default()
    };
    for &length in lengths {
        let errors = exec.map_slice(&starts, |&i| {
            let j = i + dist[i..].partition_point(|&d| d - dist[i] < length);
            (j < pairs.len()).then(|| {
                let (re, pe) = pairs[i].0.between(&pairs[j].0);
                let (rg, pg) = pairs[i].1.between(&pairs[j].1);
                // E = ΔT_gt⁻¹ · ΔT_est
                let rot = rg.angle_to(&re).to_degrees();
                let trans = rg.transpose().rotate(&(pe - pg)).norm();
                (rot, trans / length * 100.0)
            })
        });
        let errors: Vec<(f64, f64)> = errors.into_iter().flatten().collect();
        if errors.is_empty() {
            report.skipped.push(length);
            continue;
        }
        let n = errors.len() as f64;
        report.rows.push(RpeRow {
            length,
            windows: errors.len(),
            rre_deg: errors.iter().map(|e| e.0).sum::<f64>() / n,
            rte_pct: errors.iter().map(|e| e.1).sum::<f64>() / n,
        });
    }
    report
}

impl RpeReport {
    /// Plain-text table, one column per sub-sequence length.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<22}", "Length (m)");
        for r in &self.rows {
            let _ = write!(s, "{:>10}", format_length(r.length));
        }
        s.push('\n');
        let _ = write!(s, "{:<22}", "RRE (deg)");
        for r in &self.rows {
            let _ = write!(s, "{:>10.4}", r.rre_deg);
        }
        s.push('\n');
        let _ = write!(s, "{:<22}", "RTE (%)");
        for r in &self.rows {
            let _ = write!(s, "{:>10.4}", r.rte_pct);
        }
        s.push('\n');
        for l in &self.skipped {
            let _ = writeln!(s, "skipped {} m: trajectory shorter than the sub-sequence", format_length(*l));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("length_m,windows,rre_deg,rte_pct\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.length, r.windows, r.rre_deg, r.rte_pct);
        }
        s
    }
}

impl Drift {
    pub fn to_table(&self, path_length: Option<f64>) -> String {
        let mut s = format!(
            "{:<30}{:>10.4}\n{:<30}{:>10.4}\n",
            "Drift in rotation (deg)", self.rot_deg, "Drift in translation (m)", self.trans_m
        );
        if let Some(l) = path_length {
            let _ = writeln!(s, "{:<30}{:>10.4}", "Drift in translation (%)", self.trans_m / l * 100.0);
        }
        s
    }
}

fn format_length(l: f64) -> String {
    if l.fract() == 0.0 {
        format!("{l:.0}")
    } else {
        format!("{l}")
    }
}

/// Parses a comma-separated list of lengths such as `50,100,150`.
pub fn parse_lengths(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|x| {
            let v: f64 = x
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid length `{}`", x.trim())))?;
            if v > 0.0 && v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Config(format!("length must be positive, got {v}")))
            }
        })
        .collect()
}

/// Ground-truth path length between the first and last pose.
pub fn path_length(traj: &Trajectory) -> f64 {
    traj.poses.windows(2).map(|w| (w[1].pos - w[0].pos).norm()).sum()
}
