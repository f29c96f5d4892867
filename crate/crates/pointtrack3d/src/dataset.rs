//! On-disk sequence format and training-corpus plumbing.
//!
//! A sequence directory holds:
//!
//! - `manifest.json` — frame count, image size, per-frame camera (3×3
//!   intrinsics + 3×4 extrinsics, row-major), query list.
//! - `frames/NNNN.ply` — binary little-endian PLY, properties
//!   `x y z red green blue`, all float32.
//! - `depth/NNNN.bin` — two `u32` (height, width) then `H·W` float32
//!   depths, row-major.
//! - `tracks.csv` — `query_id,frame,x,y,z,visible`.
//! - `flow/NNNN.bin` — `N×3` float32 rows aligned with the frame's points.
//! - `ids/NNNN.bin` — `u32` count then `N` material ids (extension; enables
//!   exact temporal-flip augmentation on visible-only clouds).
//!
//! All multi-byte values are little-endian.

use crate::geometry::{CameraModel, DepthMap, PointCloudFrame};
use crate::synthdata::SequenceRecord;
use crate::tracker::{QuerySpec, TrajectoryRecord};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{self, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("parse error in {path} at byte offset {offset}: {message}")]
    Parse {
        path: String,
        offset: usize,
        message: String,
    },
    #[error("validation error: {0}")]
    Validation(String),
}

fn io_err(path: &Path, source: io::Error) -> DatasetError {
    DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_err(path: &Path, offset: usize, message: impl Into<String>) -> DatasetError {
    DatasetError::Parse {
        path: path.display().to_string(),
        offset,
        message: message.into(),
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    frame_count: usize,
    image_size: [usize; 2],
    cameras: Vec<ManifestCamera>,
    queries: Vec<ManifestQuery>,
}

#[derive(Serialize, Deserialize)]
struct ManifestCamera {
    /// Row-major 3×3.
    intrinsics: [f64; 9],
    /// Row-major 3×4 `[R | t]`.
    extrinsics: [f64; 12],
}

#[derive(Serialize, Deserialize)]
struct ManifestQuery {
    id: u32,
    start_frame: usize,
    position: [f64; 3],
}

impl ManifestCamera {
    fn from_camera(c: &CameraModel) -> Self {
        let r = c.rotation;
        Self {
            intrinsics: [c.fx, 0.0, c.cx, 0.0, c.fy, c.cy, 0.0, 0.0, 1.0],
            extrinsics: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                c.translation.x,
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                c.translation.y,
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
                c.translation.z,
            ],
        }
    }

    fn to_camera(&self, width: usize, height: usize) -> Result<CameraModel, DatasetError> {
        let e = &self.extrinsics;
        let rotation = Matrix3::new(e[0], e[1], e[2], e[4], e[5], e[6], e[8], e[9], e[10]);
        let translation = Vector3::new(e[3], e[7], e[11]);
        CameraModel::new(
            self.intrinsics[0],
            self.intrinsics[4],
            self.intrinsics[2],
            self.intrinsics[5],
            rotation,
            translation,
            width,
            height,
        )
        .map_err(|e| DatasetError::Validation(format!("bad camera in manifest: {e}")))
    }
}

/// Write a sequence directory (see module docs for the layout).
pub fn write_sequence(dir: &Path, seq: &SequenceRecord) -> Result<(), DatasetError> {
    for sub in ["frames", "depth", "flow", "ids"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| io_err(dir, e))?;
    }
    let manifest = Manifest {
        frame_count: seq.frames.len(),
        image_size: [seq.cameras[0].height, seq.cameras[0].width],
        cameras: seq.cameras.iter().map(ManifestCamera::from_camera).collect(),
        queries: seq
            .queries
            .iter()
            .map(|q| ManifestQuery {
                id: q.id,
                start_frame: q.start_frame,
                position: [q.position.x, q.position.y, q.position.z],
            })
            .collect(),
    };
    let mpath = dir.join("manifest.json");
    fs::write(
        &mpath,
        serde_json::to_vec_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(|e| io_err(&mpath, e))?;

    for (t, frame) in seq.frames.iter().enumerate() {
        write_ply(&dir.join(format!("frames/{t:04}.ply")), frame)?;
        write_depth(&dir.join(format!("depth/{t:04}.bin")), &seq.depth_maps[t])?;
        write_ids(&dir.join(format!("ids/{t:04}.bin")), &seq.point_ids[t])?;
        if t + 1 < seq.frames.len() {
            write_flow(&dir.join(format!("flow/{t:04}.bin")), &seq.gt_flow[t])?;
        }
    }
    write_tracks_csv(&dir.join("tracks.csv"), &seq.gt_tracks)?;
    Ok(())
}

/// Read a sequence directory back; validates counts against the manifest.
pub fn read_sequence(dir: &Path) -> Result<SequenceRecord, DatasetError> {
    let mpath = dir.join("manifest.json");
    let mbytes = fs::read(&mpath).map_err(|e| io_err(&mpath, e))?;
    let manifest: Manifest = serde_json::from_slice(&mbytes)
        .map_err(|e| parse_err(&mpath, e.column(), e.to_string()))?;
    if manifest.cameras.len() != manifest.frame_count {
        return Err(DatasetError::Validation(format!(
            "manifest has {} cameras for {} frames",
            manifest.cameras.len(),
            manifest.frame_count
        )));
    }
    let [height, width] = manifest.image_size;

    let mut frames = Vec::with_capacity(manifest.frame_count);
    let mut depth_maps = Vec::with_capacity(manifest.frame_count);
    let mut cameras = Vec::with_capacity(manifest.frame_count);
    let mut point_ids = Vec::with_capacity(manifest.frame_count);
    let mut gt_flow = Vec::new();
    for t in 0..manifest.frame_count {
        cameras.push(manifest.cameras[t].to_camera(width, height)?);
        let frame = read_ply(&dir.join(format!("frames/{t:04}.ply")), t)?;
        let depth = read_depth(&dir.join(format!("depth/{t:04}.bin")))?;
        if depth.width != width || depth.height != height {
            return Err(DatasetError::Validation(format!(
                "depth map {t} is {}x{}, manifest says {width}x{height}",
                depth.width, depth.height
            )));
        }
        let ids_path = dir.join(format!("ids/{t:04}.bin"));
        let ids = if ids_path.exists() {
            read_ids(&ids_path, frame.len())?
        } else {
            (0..frame.len() as u32).collect()
        };
        if t + 1 < manifest.frame_count {
            let flow = read_flow(&dir.join(format!("flow/{t:04}.bin")), frame.len())?;
            gt_flow.push(flow);
        }
        frames.push(frame);
        depth_maps.push(depth);
        point_ids.push(ids);
    }

    let queries: Vec<QuerySpec> = manifest
        .queries
        .iter()
        .map(|q| QuerySpec {
            id: q.id,
            start_frame: q.start_frame,
            position: Vector3::new(q.position[0], q.position[1], q.position[2]),
        })
        .collect();
    let gt_tracks = read_tracks_csv(&dir.join("tracks.csv"), manifest.frame_count)?;
    if gt_tracks.len() != queries.len() {
        return Err(DatasetError::Validation(format!(
            "tracks.csv covers {} queries, manifest lists {}",
            gt_tracks.len(),
            queries.len()
        )));
    }
    Ok(SequenceRecord {
        frames,
        depth_maps,
        cameras,
        queries,
        gt_tracks,
        gt_flow,
        point_ids,
    })
}

fn write_ply(path: &Path, frame: &PointCloudFrame) -> Result<(), DatasetError> {
    let mut buf = Vec::new();
    write!(
        buf,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nproperty float red\nproperty float green\nproperty float blue\nend_header\n",
        frame.len()
    )
    .unwrap();
    for (p, f) in frame.points.iter().zip(&frame.features) {
        for v in [p.x, p.y, p.z, f[0], f[1], f[2]] {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| io_err(path, e))
}

fn read_ply(path: &Path, frame_index: usize) -> Result<PointCloudFrame, DatasetError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let header_end = find_subslice(&bytes, b"end_header\n")
        .ok_or_else(|| parse_err(path, 0, "missing end_header"))?
        + b"end_header\n".len();
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|e| parse_err(path, e.valid_up_to(), "header is not UTF-8"))?;
    if !header.starts_with("ply") {
        return Err(parse_err(path, 0, "not a PLY file"));
    }
    if !header.contains("format binary_little_endian 1.0") {
        return Err(parse_err(path, 4, "expected binary_little_endian 1.0"));
    }
    let count: usize = header
        .lines()
        .find_map(|l| l.strip_prefix("element vertex "))
        .ok_or_else(|| parse_err(path, 0, "missing element vertex"))?
        .trim()
        .parse()
        .map_err(|_| parse_err(path, 0, "bad vertex count"))?;
    let need = header_end + count * 6 * 4;
    if bytes.len() < need {
        return Err(parse_err(
            path,
            bytes.len(),
            format!("truncated payload: need {need} bytes"),
        ));
    }
    let mut points = Vec::with_capacity(count);
    let mut features = Vec::with_capacity(count);
    let mut at = header_end;
    for _ in 0..count {
        let mut vals = [0.0f64; 6];
        for v in &mut vals {
            *v = f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as f64;
            at += 4;
        }
        points.push(Vector3::new(vals[0], vals[1], vals[2]));
        features.push([vals[3], vals[4], vals[5]]);
    }
    PointCloudFrame::new(points, features, frame_index)
        .map_err(|e| DatasetError::Validation(format!("{}: {e}", path.display())))
}

fn write_depth(path: &Path, depth: &DepthMap) -> Result<(), DatasetError> {
    let mut buf = Vec::with_capacity(8 + depth.depths.len() * 4);
    buf.extend_from_slice(&(depth.height as u32).to_le_bytes());
    buf.extend_from_slice(&(depth.width as u32).to_le_bytes());
    for &d in &depth.depths {
        buf.extend_from_slice(&(d as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| io_err(path, e))
}

fn read_depth(path: &Path) -> Result<DepthMap, DatasetError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() < 8 {
        return Err(parse_err(path, bytes.len(), "missing H,W header"));
    }
    let h = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let need = 8 + h * w * 4;
    if bytes.len() != need {
        return Err(parse_err(
            path,
            bytes.len().min(need),
            format!("expected {need} bytes for {h}x{w}"),
        ));
    }
    let mut depths = Vec::with_capacity(h * w);
    for i in 0..h * w {
        let off = 8 + i * 4;
        depths.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64);
    }
    Ok(DepthMap::new(w, h, depths))
}

fn write_flow(path: &Path, flow: &[Vector3<f64>]) -> Result<(), DatasetError> {
    let mut buf = Vec::with_capacity(flow.len() * 12);
    for v in flow {
        for c in [v.x, v.y, v.z] {
            buf.extend_from_slice(&(c as f32).to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| io_err(path, e))
}

fn read_flow(path: &Path, expected: usize) -> Result<Vec<Vector3<f64>>, DatasetError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() != expected * 12 {
        return Err(parse_err(
            path,
            bytes.len().min(expected * 12),
            format!(
                "flow has {} bytes, frame has {expected} points (need {})",
                bytes.len(),
                expected * 12
            ),
        ));
    }
    let mut out = Vec::with_capacity(expected);
    for i in 0..expected {
        let off = i * 12;
        let x = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64;
        let y = f32::from_le_bytes(bytes[off + 4..off + 8].try_into().unwrap()) as f64;
        let z = f32::from_le_bytes(bytes[off + 8..off + 12].try_into().unwrap()) as f64;
        out.push(Vector3::new(x, y, z));
    }
    Ok(out)
}

fn write_ids(path: &Path, ids: &[u32]) -> Result<(), DatasetError> {
    let mut buf = Vec::with_capacity(4 + ids.len() * 4);
    buf.extend_from_slice(&(ids.len() as u32).to_le_bytes());
    for &id in ids {
        buf.extend_from_slice(&id.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| io_err(path, e))
}

fn read_ids(path: &Path, expected: usize) -> Result<Vec<u32>, DatasetError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() < 4 {
        return Err(parse_err(path, bytes.len(), "missing count"));
    }
    let n = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    if n != expected {
        return Err(DatasetError::Validation(format!(
            "{}: id count {n} does not match frame point count {expected}",
            path.display()
        )));
    }
    if bytes.len() != 4 + n * 4 {
        return Err(parse_err(path, bytes.len(), "truncated id payload"));
    }
    Ok((0..n)
        .map(|i| u32::from_le_bytes(bytes[4 + i * 4..8 + i * 4].try_into().unwrap()))
        .collect())
}

/// `query_id,frame,x,y,z,visible` — shared by GT and predictions.
pub fn write_tracks_csv(path: &Path, tracks: &[TrajectoryRecord]) -> Result<(), DatasetError> {
    let mut buf = String::from("query_id,frame,x,y,z,visible\n");
    for t in tracks {
        for (frame, (p, &vis)) in t.positions.iter().zip(&t.visible).enumerate() {
            buf.push_str(&format!(
                "{},{},{},{},{},{}\n",
                t.query_id,
                frame,
                p.x,
                p.y,
                p.z,
                u8::from(vis)
            ));
        }
    }
    fs::write(path, buf).map_err(|e| io_err(path, e))
}

/// Read a tracks CSV. When `expected_frames` is nonzero every track must
/// cover exactly that many contiguous frames from 0.
pub fn read_tracks_csv(
    path: &Path,
    expected_frames: usize,
) -> Result<Vec<TrajectoryRecord>, DatasetError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut rows: Vec<(u32, usize, Vector3<f64>, bool)> = Vec::new();
    let mut offset = 0usize;
    for (ln, line) in text.lines().enumerate() {
        let line_offset = offset;
        offset += line.len() + 1;
        if ln == 0 && line.starts_with("query_id") {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(parse_err(
                path,
                line_offset,
                format!("expected 6 fields, got {}", fields.len()),
            ));
        }
        let parse_f = |s: &str, what: &str| -> Result<f64, DatasetError> {
            s.trim()
                .parse()
                .map_err(|_| parse_err(path, line_offset, format!("bad {what}: {s}")))
        };
        let id: u32 = fields[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(path, line_offset, "bad query id"))?;
        let frame: usize = fields[1]
            .trim()
            .parse()
            .map_err(|_| parse_err(path, line_offset, "bad frame"))?;
        let x = parse_f(fields[2], "x")?;
        let y = parse_f(fields[3], "y")?;
        let z = parse_f(fields[4], "z")?;
        let vis = match fields[5].trim() {
            "0" => false,
            "1" => true,
            other => return Err(parse_err(path, line_offset, format!("bad visible flag {other}"))),
        };
        rows.push((id, frame, Vector3::new(x, y, z), vis));
    }

    let mut ids: Vec<u32> = rows.iter().map(|r| r.0).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut tracks = Vec::with_capacity(ids.len());
    for id in ids {
        let mut per: Vec<(usize, Vector3<f64>, bool)> = rows
            .iter()
            .filter(|r| r.0 == id)
            .map(|r| (r.1, r.2, r.3))
            .collect();
        per.sort_by_key(|r| r.0);
        for (i, r) in per.iter().enumerate() {
            if r.0 != i {
                return Err(DatasetError::Validation(format!(
                    "track {id} frames are not contiguous from 0 (saw frame {} at position {i})",
                    r.0
                )));
            }
        }
        if expected_frames != 0 && per.len() != expected_frames {
            return Err(DatasetError::Validation(format!(
                "track {id} covers {} frames, expected {expected_frames}",
                per.len()
            )));
        }
        tracks.push(TrajectoryRecord {
            query_id: id,
            start_frame: 0,
            positions: per.iter().map(|r| r.1).collect(),
            visible: per.iter().map(|r| r.2).collect(),
        });
    }
    Ok(tracks)
}

/// 2D tracks: `query_id,frame,u,v,visible`.
#[derive(Debug, Clone, PartialEq)]
pub struct Track2d {
    pub query_id: u32,
    pub uv: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
}

pub fn write_tracks2d_csv(path: &Path, tracks: &[Track2d]) -> Result<(), DatasetError> {
    let mut buf = String::from("query_id,frame,u,v,visible\n");
    for t in tracks {
        for (frame, (uv, &vis)) in t.uv.iter().zip(&t.visible).enumerate() {
            buf.push_str(&format!(
                "{},{},{},{},{}\n",
                t.query_id,
                frame,
                uv[0],
                uv[1],
                u8::from(vis)
            ));
        }
    }
    fs::write(path, buf).map_err(|e| io_err(path, e))
}

pub fn read_tracks2d_csv(path: &Path) -> Result<Vec<Track2d>, DatasetError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut rows: Vec<(u32, usize, [f64; 2], bool)> = Vec::new();
    let mut offset = 0usize;
    for (ln, line) in text.lines().enumerate() {
        let line_offset = offset;
        offset += line.len() + 1;
        if ln == 0 && line.starts_with("query_id") {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(parse_err(
                path,
                line_offset,
                format!("expected 5 fields, got {}", fields.len()),
            ));
        }
        let id: u32 = fields[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(path, line_offset, "bad query id"))?;
        let frame: usize = fields[1]
            .trim()
            .parse()
            .map_err(|_| parse_err(path, line_offset, "bad frame"))?;
        let u: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(path, line_offset, "bad u"))?;
        let v: f64 = fields[3]
            .trim()
            .parse()
            .map_err(|_| parse_err(path, line_offset, "bad v"))?;
        let vis = fields[4].trim() == "1";
        rows.push((id, frame, [u, v], vis));
    }
    let mut ids: Vec<u32> = rows.iter().map(|r| r.0).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let mut per: Vec<(usize, [f64; 2], bool)> = rows
            .iter()
            .filter(|r| r.0 == id)
            .map(|r| (r.1, r.2, r.3))
            .collect();
        per.sort_by_key(|r| r.0);
        out.push(Track2d {
            query_id: id,
            uv: per.iter().map(|r| r.1).collect(),
            visible: per.iter().map(|r| r.2).collect(),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_sequence, scenes};

    #[test]
    fn sequence_roundtrip_field_exact() {
        let dir = tempfile::tempdir().unwrap();
        let seq = generate_sequence(&scenes::two_movers(7, 400, 5), 17).unwrap();
        // The on-disk format is float32, so quantize the reference the same
        // way before comparing.
        write_sequence(dir.path(), &seq).unwrap();
        let back = read_sequence(dir.path()).unwrap();
        assert_eq!(back.frames.len(), seq.frames.len());
        for (a, b) in seq.frames.iter().zip(&back.frames) {
            assert_eq!(a.len(), b.len());
            for (pa, pb) in a.points.iter().zip(&b.points) {
                for c in 0..3 {
                    assert_eq!(pa[c] as f32, pb[c] as f32);
                    assert_eq!(pb[c], pb[c] as f32 as f64);
                }
            }
        }
        assert_eq!(seq.point_ids, back.point_ids);
        for (a, b) in seq.gt_tracks.iter().zip(&back.gt_tracks) {
            assert_eq!(a.visible, b.visible);
        }
        // Second write/read round-trips exactly (already f32-quantized).
        let dir2 = tempfile::tempdir().unwrap();
        write_sequence(dir2.path(), &back).unwrap();
        let back2 = read_sequence(dir2.path()).unwrap();
        assert_eq!(back.frames, back2.frames);
        assert_eq!(back.depth_maps, back2.depth_maps);
        assert_eq!(back.gt_flow, back2.gt_flow);
    }

    #[test]
    fn truncated_ply_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let seq = generate_sequence(&scenes::two_movers(8, 300, 4), 18).unwrap();
        write_sequence(dir.path(), &seq).unwrap();
        let ply = dir.path().join("frames/0001.ply");
        let bytes = fs::read(&ply).unwrap();
        fs::write(&ply, &bytes[..bytes.len() - 10]).unwrap();
        match read_sequence(dir.path()) {
            Err(DatasetError::Parse { offset, .. }) => assert!(offset > 0),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn flow_count_mismatch_is_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let seq = generate_sequence(&scenes::two_movers(9, 300, 4), 19).unwrap();
        write_sequence(dir.path(), &seq).unwrap();
        // Truncate one flow file to half its rows.
        let fpath = dir.path().join("flow/0000.bin");
        let bytes = fs::read(&fpath).unwrap();
        fs::write(&fpath, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            read_sequence(dir.path()),
            Err(DatasetError::Parse { .. })
        ));
    }

    #[test]
    fn manifest_camera_count_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let seq = generate_sequence(&scenes::two_movers(10, 300, 4), 20).unwrap();
        write_sequence(dir.path(), &seq).unwrap();
        let mpath = dir.path().join("manifest.json");
        let mut manifest: serde_json::Value =
            serde_json::from_slice(&fs::read(&mpath).unwrap()).unwrap();
        manifest["frame_count"] = serde_json::json!(7);
        fs::write(&mpath, serde_json::to_vec(&manifest).unwrap()).unwrap();
        assert!(matches!(
            read_sequence(dir.path()),
            Err(DatasetError::Validation(_))
        ));
    }

    #[test]
    fn tracks2d_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tracks2d.csv");
        let tracks = vec![Track2d {
            query_id: 3,
            uv: vec![[1.5, 2.5], [3.0, 4.0]],
            visible: vec![true, false],
        }];
        write_tracks2d_csv(&path, &tracks).unwrap();
        let back = read_tracks2d_csv(&path).unwrap();
        assert_eq!(back, tracks);
    }
}

fn find_subslice(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack
        .windows(needle.len())
        .position(|w| w == needle)
}
