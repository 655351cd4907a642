//! On-disk sequence layout (see `docs/formats.md`).

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{CalibOffsets, CameraCalibration, FrameSource, Frames, InitialState, PerturbedCalibration, Scenario, Sequence};
use crate::error::{Error, Result};
use crate::eval::Trajectory;
use crate::sensors::{check_monotone, CameraFrame, ImuSample, LidarPoint, LidarScan};

/// Files (or directories) a sequence directory must contain.
pub const SEQUENCE_FILES: [&str; 7] = [
    "imu.csv",
    "lidar.csv",
    "lidar",
    "camera.csv",
    "groundtruth.csv",
    "calib.json",
    "scenario.json",
];

#[derive(Debug, Serialize, Deserialize)]
struct ImuRecord {
    t: f64,
    wx: f64,
    wy: f64,
    wz: f64,
    ax: f64,
    ay: f64,
    az: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScanRecord {
    index: usize,
    start: f64,
    end: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct FrameRecord {
    index: usize,
    t: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CalibFile {
    truth: CameraCalibration,
    init: CameraCalibration,
    offsets: CalibOffsets,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    scenario: Scenario,
    initial: InitialState,
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn csv_string<T: Serialize>(rows: impl IntoIterator<Item = T>) -> String {
    let mut w = csv::Writer::from_writer(vec![]);
    for r in rows {
        w.serialize(r).expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("writing to memory")).expect("csv is utf-8")
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    r.deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| Error::format(path, format!("row {}: {e}", i + 1))))
        .collect()
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn frame_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("camera").join(format!("{i:06}.ppm"))
}

fn scan_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("lidar").join(format!("{i:06}.bin"))
}

/// Writes every stream of `seq`, rendering images as needed.
pub fn write_sequence(seq: &Sequence, dir: &Path) -> Result<()> {
    for sub in ["lidar", "camera"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    write_file(
        &dir.join("imu.csv"),
        csv_string(seq.imu.iter().map(|s| ImuRecord {
            t: s.t,
            wx: s.gyro.x,
            wy: s.gyro.y,
            wz: s.gyro.z,
            ax: s.acc.x,
            ay: s.acc.y,
            az: s.acc.z,
        })),
    )?;
    write_file(
        &dir.join("lidar.csv"),
        csv_string(seq.scans.iter().enumerate().map(|(index, s)| ScanRecord {
            index,
            start: s.start,
            end: s.end,
        })),
    )?;
    for (i, scan) in seq.scans.iter().enumerate() {
        let mut bytes = Vec::with_capacity(scan.points.len() * 16);
        for p in &scan.points {
            for v in [p.t - scan.start, p.p.x, p.p.y, p.p.z] {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        write_file(&scan_path(dir, i), bytes)?;
    }
    write_file(
        &dir.join("camera.csv"),
        csv_string(
            seq.frames
                .times
                .iter()
                .enumerate()
                .map(|(index, &t)| FrameRecord { index, t }),
        ),
    )?;
    for i in 0..seq.frames.len() {
        let frame = seq.frames.load(i)?;
        write_ppm(&frame_path(dir, i), &frame)?;
    }
    seq.ground_truth.write_csv(&dir.join("groundtruth.csv"))?;
    let calib = CalibFile {
        truth: seq.scenario.calibration,
        init: seq.calibration.init,
        offsets: seq.calibration.offsets,
    };
    write_file(
        &dir.join("calib.json"),
        serde_json::to_string_pretty(&calib).expect("serializable"),
    )?;
    let scen = ScenarioFile {
        scenario: (*seq.scenario).clone(),
        initial: seq.initial,
    };
    write_file(
        &dir.join("scenario.json"),
        serde_json::to_string_pretty(&scen).expect("serializable"),
    )
}

/// Binary 8-bit PPM (P6).
pub fn write_ppm(path: &Path, frame: &CameraFrame) -> Result<()> {
    let buf: Vec<u8> = frame
        .pixels
        .iter()
        .flat_map(|p| p.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect();
    image::save_buffer_with_format(
        path,
        &buf,
        frame.width as u32,
        frame.height as u32,
        image::ExtendedColorType::Rgb8,
        image::ImageFormat::Pnm,
    )
    .map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    })
}

pub(super) fn read_frame(dir: &Path, i: usize, t: f64) -> Result<CameraFrame> {
    let path = frame_path(dir, i);
    let img = image::open(&path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(&path, io),
        other => Error::format(&path, other.to_string()),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let pixels = rgb.pixels().map(|p| p.0.map(|c| c as f32 / 255.0)).collect();
    Ok(CameraFrame::new(t, w, h, pixels))
}

fn read_scan(path: &Path, start: f64, end: f64) -> Result<LidarScan> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 16 != 0 {
        return Err(Error::format(path, format!("length {} is not a multiple of 16", bytes.len())));
    }
    let f = |b: &[u8]| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
    let mut points = Vec::with_capacity(bytes.len() / 16);
    for (k, rec) in bytes.chunks_exact(16).enumerate() {
        let dt = f(&rec[0..4]);
        let p = Vector3::new(f(&rec[4..8]), f(&rec[8..12]), f(&rec[12..16]));
        if !dt.is_finite() || !p.iter().all(|v| v.is_finite()) {
            return Err(Error::format(path, format!("record {k} is not finite")));
        }
        let span = end - start;
        if dt < -1e-6 || dt > span + 1e-6 {
            return Err(Error::format(path, format!("record {k} has time offset {dt} outside [0, {span}]")));
        }
        points.push(LidarPoint {
            t: (start + dt).clamp(start, end),
            p,
        });
    }
    Ok(LidarScan { start, end, points })
}

/// Reads a sequence directory. Images are loaded on demand.
pub fn read_sequence(dir: &Path) -> Result<Sequence> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    for f in SEQUENCE_FILES {
        let p = dir.join(f);
        if !p.exists() {
            return Err(Error::MissingFile(p));
        }
    }
    let scen: ScenarioFile = read_json(&dir.join("scenario.json"))?;
    let calib: CalibFile = read_json(&dir.join("calib.json"))?;

    let imu_path = dir.join("imu.csv");
    let imu: Vec<ImuSample> = read_csv::<ImuRecord>(&imu_path)?
        .into_iter()
        .map(|r| ImuSample {
            t: r.t,
            gyro: Vector3::new(r.wx, r.wy, r.wz),
            acc: Vector3::new(r.ax, r.ay, r.az),
        })
        .collect();
    check_monotone(&imu, |s| s.t).map_err(|e| Error::format(&imu_path, e.to_string()))?;

    let lidar_path = dir.join("lidar.csv");
    let records: Vec<ScanRecord> = read_csv(&lidar_path)?;
    let mut scans = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        if r.index != i || !(r.end > r.start) {
            return Err(Error::format(&lidar_path, format!("row {}: bad index or interval", i + 1)));
        }
        scans.push(read_scan(&scan_path(dir, i), r.start, r.end)?);
    }
    check_monotone(&scans, |s| s.end).map_err(|e| Error::format(&lidar_path, e.to_string()))?;

    let camera_path = dir.join("camera.csv");
    let frames: Vec<FrameRecord> = read_csv(&camera_path)?;
    for (i, r) in frames.iter().enumerate() {
        if r.index != i {
            return Err(Error::format(&camera_path, format!("row {}: expected index {i}", i + 1)));
        }
        let p = frame_path(dir, i);
        if !p.exists() {
            return Err(Error::MissingFile(p));
        }
    }
    let times: Vec<f64> = frames.iter().map(|r| r.t).collect();
    check_monotone(&times, |t| *t).map_err(|e| Error::format(&camera_path, e.to_string()))?;

    let ground_truth = Trajectory::read_csv(&dir.join("groundtruth.csv"))?;
    Ok(Sequence {
        scenario: Arc::new(scen.scenario),
        imu,
        scan_patches: vec![vec![]; scans.len()],
        scans,
        frames: Frames {
            times,
            source: FrameSource::Disk(dir.to_path_buf()),
        },
        ground_truth,
        calibration: PerturbedCalibration {
            init: calib.init,
            offsets: calib.offsets,
        },
        initial: scen.initial,
    })
}

#[cfg(test)]
mod tests {
    use super::super::presets::preset;
    use super::*;

    #[test]
    fn write_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let seq = Sequence::generate(preset("static", 2).unwrap()).unwrap();
        write_sequence(&seq, dir.path()).unwrap();
        let back = read_sequence(dir.path()).unwrap();
        assert_eq!(back.imu, seq.imu);
        assert_eq!(back.scans.len(), seq.scans.len());
        for (a, b) in seq.scans.iter().zip(&back.scans) {
            assert_eq!(a.start, b.start);
            assert_eq!(a.points.len(), b.points.len());
            for (p, q) in a.points.iter().zip(&b.points) {
                assert!((p.t - q.t).abs() < 1e-6);
                assert!((p.p - q.p).norm() < 1e-4);
            }
        }
        assert_eq!(back.frames.times, seq.frames.times);
        let (f0, g0) = (seq.frames.load(3).unwrap(), back.frames.load(3).unwrap());
        for (p, q) in f0.pixels.iter().zip(&g0.pixels) {
            for c in 0..3 {
                assert!((p[c] - q[c]).abs() <= 0.5 / 255.0 + 1e-6);
            }
        }
        assert_eq!(back.initial, seq.initial);
        assert_eq!(back.calibration, seq.calibration);
    }

    #[test]
    fn missing_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let seq = Sequence::generate(preset("static", 2).unwrap()).unwrap();
        write_sequence(&seq, dir.path()).unwrap();
        fs::remove_file(dir.path().join("imu.csv")).unwrap();
        match read_sequence(dir.path()) {
            Err(Error::MissingFile(p)) => assert!(p.ends_with("imu.csv")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_monotone_imu_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let seq = Sequence::generate(preset("static", 2).unwrap()).unwrap();
        write_sequence(&seq, dir.path()).unwrap();
        let p = dir.path().join("imu.csv");
        let text = fs::read_to_string(&p).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines.swap(3, 4);
        fs::write(&p, lines.join("\n")).unwrap();
        let err = read_sequence(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        assert!(err.to_string().contains("imu.csv"));
    }

    #[test]
    fn truncated_scan_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let seq = Sequence::generate(preset("static", 2).unwrap()).unwrap();
        write_sequence(&seq, dir.path()).unwrap();
        let p = scan_path(dir.path(), 0);
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&p, bytes).unwrap();
        assert!(matches!(read_sequence(dir.path()), Err(Error::Format { .. })));
    }
}
