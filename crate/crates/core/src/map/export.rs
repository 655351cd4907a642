//! Colored point cloud files: binary little-endian PLY and binary PCD.

use std::fs;
use std::path::Path;

use super::VoxelMap;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExportPoint {
    pub p: [f32; 3],
    pub rgb: [u8; 3],
}

impl VoxelMap {
    pub fn export_points(&self) -> Vec<ExportPoint> {
        self.points
            .iter()
            .map(|pt| ExportPoint {
                p: [pt.p.x as f32, pt.p.y as f32, pt.p.z as f32],
                rgb: [0, 1, 2].map(|c| (pt.color[c].clamp(0.0, 1.0) * 255.0).round() as u8),
            })
            .collect()
    }
}

const PLY_PROPS: &str = "property float x\nproperty float y\nproperty float z\n\
property uchar red\nproperty uchar green\nproperty uchar blue\n";

pub fn ply_bytes(points: &[ExportPoint]) -> Vec<u8> {
    let header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n{PLY_PROPS}end_header\n",
        points.len()
    );
    let mut out = header.into_bytes();
    out.reserve(points.len() * 15);
    for p in points {
        for v in p.p {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&p.rgb);
    }
    out
}

/// Records of 12 bytes of float32 xyz followed by 3 bytes of rgb.
pub fn write_ply(path: &Path, points: &[ExportPoint]) -> Result<()> {
    fs::write(path, ply_bytes(points)).map_err(|e| Error::io(path, e))
}

/// Reads files written by [`write_ply`].
pub fn read_ply(path: &Path) -> Result<Vec<ExportPoint>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let marker = b"end_header\n";
    let end = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| Error::format(path, "missing end_header"))?
        + marker.len();
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::format(path, "header is not text"))?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") || lines.next() != Some("format binary_little_endian 1.0") {
        return Err(Error::format(path, "expected binary little-endian PLY"));
    }
    let count: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("element vertex "))
        .and_then(|n| n.trim().parse().ok())
        .ok_or_else(|| Error::format(path, "missing vertex count"))?;
    let props: String = lines.take_while(|l| *l != "end_header").map(|l| format!("{l}\n")).collect();
    if props != PLY_PROPS {
        return Err(Error::format(path, "unexpected vertex properties"));
    }
    let body = &bytes[end..];
    if body.len() != count * 15 {
        return Err(Error::format(
            path,
            format!("expected {} body bytes, found {}", count * 15, body.len()),
        ));
    }
    Ok(body
        .chunks_exact(15)
        .map(|r| {
            let f = |i: usize| f32::from_le_bytes([r[i], r[i + 1], r[i + 2], r[i + 3]]);
            ExportPoint {
                p: [f(0), f(4), f(8)],
                rgb: [r[12], r[13], r[14]],
            }
        })
        .collect())
}

/// Binary PCD v0.7 with `x y z` float32 and `rgb` packed as uint32
/// `0x00RRGGBB`.
pub fn pcd_bytes(points: &[ExportPoint]) -> Vec<u8> {
    let header = format!(
        "# .PCD v0.7 - Point Cloud Data file format\nVERSION 0.7\nFIELDS x y z rgb\nSIZE 4 4 4 4\nTYPE F F F U\n\
COUNT 1 1 1 1\nWIDTH {n}\nHEIGHT 1\nVIEWPOINT 0 0 0 1 0 0 0\nPOINTS {n}\nDATA binary\n",
        n = points.len()
    );
    let mut out = header.into_bytes();
    out.reserve(points.len() * 16);
    for p in points {
        for v in p.p {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let rgb = (p.rgb[0] as u32) << 16 | (p.rgb[1] as u32) << 8 | p.rgb[2] as u32;
        out.extend_from_slice(&rgb.to_le_bytes());
    }
    out
}

pub fn write_pcd(path: &Path, points: &[ExportPoint]) -> Result<()> {
    fs::write(path, pcd_bytes(points)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<ExportPoint> {
        vec![
            ExportPoint {
                p: [1.0, -2.5, 3.25],
                rgb: [255, 0, 7],
            },
            ExportPoint {
                p: [0.0, 0.5, -1.0],
                rgb: [1, 2, 3],
            },
        ]
    }

    #[test]
    fn ply_layout_and_roundtrip() {
        let bytes = ply_bytes(&sample());
        let text = String::from_utf8_lossy(&bytes);
        assert!(text.starts_with("ply\nformat binary_little_endian 1.0\nelement vertex 2\n"));
        let body_start = bytes.windows(11).position(|w| w == b"end_header\n").unwrap() + 11;
        assert_eq!(bytes.len() - body_start, 30);
        assert_eq!(&bytes[body_start..body_start + 4], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[body_start + 12..body_start + 15], &[255, 0, 7]);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ply");
        write_ply(&path, &sample()).unwrap();
        assert_eq!(read_ply(&path).unwrap(), sample());
    }

    #[test]
    fn truncated_ply_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ply");
        let mut bytes = ply_bytes(&sample());
        bytes.pop();
        fs::write(&path, bytes).unwrap();
        assert!(matches!(read_ply(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn pcd_layout() {
        let bytes = pcd_bytes(&sample());
        let marker = b"DATA binary\n";
        let start = bytes.windows(marker.len()).position(|w| w == marker).unwrap() + marker.len();
        assert_eq!(bytes.len() - start, 32);
        let rgb = u32::from_le_bytes(bytes[start + 12..start + 16].try_into().unwrap());
        assert_eq!(rgb, 0x00FF0007);
    }
}
