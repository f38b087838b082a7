use std::path::Path;

use nalgebra::Matrix3;

use super::{Mat3, PointCloud, Pose};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadStats {
    pub read: usize,
    pub dropped_non_finite: usize,
}

/// Reads a velodyne scan: consecutive little-endian `f32` quadruples
/// `(x, y, z, intensity)`. Non-finite points are dropped and counted.
pub fn read_kitti_bin(path: &Path) -> Result<(PointCloud, LoadStats)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (mut pc, stats) = parse_kitti_bin(&bytes, &path.display().to_string())?;
    pc.frame_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok((pc, stats))
}

pub(crate) fn parse_kitti_bin(bytes: &[u8], context: &str) -> Result<(PointCloud, LoadStats)> {
    if bytes.len() % 16 != 0 {
        return Err(Error::Format {
            context: context.to_string(),
            offset: (bytes.len() / 16 * 16) as u64,
            msg: format!(
                "file length {} is not a multiple of 16 bytes (truncated record)",
                bytes.len()
            ),
        });
    }
    if bytes.is_empty() {
        log::warn!("{context}: empty scan");
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    let mut intensity = Vec::with_capacity(bytes.len() / 16);
    let mut stats = LoadStats::default();
    for rec in bytes.chunks_exact(16) {
        let f = |i: usize| f32::from_le_bytes(rec[i * 4..i * 4 + 4].try_into().unwrap());
        stats.read += 1;
        let p = [f(0) as f64, f(1) as f64, f(2) as f64];
        if p.iter().all(|v| v.is_finite()) {
            points.push(p);
            intensity.push(f(3));
        } else {
            stats.dropped_non_finite += 1;
        }
    }
    if stats.dropped_non_finite > 0 {
        log::warn!(
            "{context}: dropped {} non-finite points",
            stats.dropped_non_finite
        );
    }
    Ok((
        PointCloud {
            points,
            intensity: Some(intensity),
            frame_id: String::new(),
        },
        stats,
    ))
}

pub fn write_kitti_bin(path: &Path, pc: &PointCloud) -> Result<()> {
    let mut buf = Vec::with_capacity(pc.len() * 16);
    for (i, p) in pc.points.iter().enumerate() {
        for v in p {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        let inten = pc.intensity.as_ref().map(|v| v[i]).unwrap_or(0.0);
        buf.extend_from_slice(&inten.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

const ORTHO_PROJECT_ABOVE: f64 = 1e-6;
const ORTHO_REJECT_ABOVE: f64 = 1e-3;

/// One pose per non-empty line: 12 whitespace-separated values, row-major
/// `[R | t]`.
pub fn read_pose_file(path: &Path) -> Result<Vec<Pose>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            parse_pose_line(l).map_err(|msg| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            })
        })
        .collect()
}

/// Parses one 12-value `[R | t]` row; near-orthogonal blocks are projected
/// onto the closest rotation.
pub fn parse_pose_line(line: &str) -> std::result::Result<Pose, String> {
    let vals: Vec<f64> = line
        .split_whitespace()
        .map(|s| {
            s.parse::<f64>()
                .map_err(|e| format!("bad number `{s}`: {e}"))
        })
        .collect::<std::result::Result<_, _>>()?;
    if vals.len() != 12 {
        return Err(format!("expected 12 values, found {}", vals.len()));
    }
    if vals.iter().any(|v| !v.is_finite()) {
        return Err("non-finite value".into());
    }
    let mut r: Mat3 = [
        [vals[0], vals[1], vals[2]],
        [vals[4], vals[5], vals[6]],
        [vals[8], vals[9], vals[10]],
    ];
    let t = [vals[3], vals[7], vals[11]];
    let m = Matrix3::from_fn(|i, j| r[i][j]);
    let drift = (m.transpose() * m - Matrix3::identity()).abs().max();
    if drift > ORTHO_REJECT_ABOVE || m.determinant() <= 0.0 {
        return Err(format!(
            "rotation block is not a proper rotation (orthogonality drift {drift:.3e})"
        ));
    }
    if drift > ORTHO_PROJECT_ABOVE {
        let svd = m.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let p = u * vt;
        for (i, row) in r.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = p[(i, j)];
            }
        }
    }
    Ok(Pose::from_matrix(&r, t))
}

/// KITTI row: 12 values of `[R | t]`.
pub fn format_pose_line(p: &Pose) -> String {
    p.to_kitti_row()
        .iter()
        .map(|v| format!("{v:.9e}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// `qw qx qy qz tx ty tz`
pub fn format_pose_sidecar(p: &Pose) -> String {
    p.to_string()
}
