//! Metrics, baselines and ablation harnesses: position/occlusion metrics in
//! 3D and 2D, average Jaccard, scene-flow chaining, 2D-track lifting with
//! depth interpolation, and the rotated-view evaluation.

use crate::dataset::Track2d;
use crate::geometry::{backproject, project, sample_depth, CameraModel, DepthMap, InterpMode};
use crate::model::Model;
use crate::synthdata::SequenceRecord;
use crate::tracker::{QuerySpec, TrajectoryRecord};
use crate::training::{infer_scene_flow, TrainError};
use nalgebra::{Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("misaligned records: {0}")]
    Misaligned(String),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    #[serde(rename = "3d")]
    ThreeD,
    #[serde(rename = "2d")]
    TwoD,
}

impl Space {
    /// Position thresholds: centimeters in 3D, pixels in 2D.
    pub fn thresholds(self) -> [f64; 5] {
        match self {
            Space::ThreeD => [0.01, 0.02, 0.04, 0.08, 0.16],
            Space::TwoD => [1.0, 2.0, 4.0, 8.0, 16.0],
        }
    }
}

/// Survival-rate drift threshold in metres.
pub const SURVIVAL_DRIFT: f64 = 0.5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Occlusion (visibility) classification accuracy over all
    /// (query, frame), percent.
    pub oa: f64,
    /// δ^x for x in {1,2,4,8,16} (cm in 3D, px in 2D), GT-visible frames.
    pub delta: [f64; 5],
    /// Mean of the five δ^x values.
    pub delta_avg: f64,
    /// Same thresholds evaluated on GT-occluded frames.
    pub delta_avg_occluded: Option<f64>,
    /// Survival rate (3D only): mean normalized frame count before a track
    /// drifts more than 50 cm from GT, percent.
    pub sr: Option<f64>,
    pub visible_frames: usize,
    pub occluded_frames: usize,
    pub total_frames: usize,
    /// Pairs excluded from the 2D evaluation (behind a camera).
    pub excluded_pairs: usize,
}

fn pair_records<'a>(
    pred: &'a [TrajectoryRecord],
    gt: &'a [TrajectoryRecord],
) -> Result<Vec<(&'a TrajectoryRecord, &'a TrajectoryRecord)>, EvalError> {
    if pred.len() != gt.len() {
        return Err(EvalError::Misaligned(format!(
            "{} predicted records vs {} ground truth",
            pred.len(),
            gt.len()
        )));
    }
    let mut pairs = Vec::with_capacity(pred.len());
    for p in pred {
        let g = gt
            .iter()
            .find(|g| g.query_id == p.query_id)
            .ok_or_else(|| {
                EvalError::Misaligned(format!("query {} missing from ground truth", p.query_id))
            })?;
        if p.num_frames() != g.num_frames() {
            return Err(EvalError::Misaligned(format!(
                "query {}: {} predicted frames vs {} GT frames",
                p.query_id,
                p.num_frames(),
                g.num_frames()
            )));
        }
        pairs.push((p, g));
    }
    Ok(pairs)
}

/// Core metric computation over aligned records. `valid` masks pairs out of
/// the evaluation entirely (used by 2D projection for behind-camera points).
fn metric_core(
    pairs: &[(&TrajectoryRecord, &TrajectoryRecord)],
    space: Space,
    valid: Option<&[Vec<bool>]>,
) -> MetricsReport {
    let thresholds = space.thresholds();
    let mut oa_hits = 0usize;
    let mut total = 0usize;
    let mut excluded = 0usize;
    let mut vis_within = [0usize; 5];
    let mut vis_count = 0usize;
    let mut occ_within = [0usize; 5];
    let mut occ_count = 0usize;
    let mut sr_sum = 0.0;

    for (qi, (p, g)) in pairs.iter().enumerate() {
        let frames = p.num_frames();
        let mut first_drift = frames;
        for t in 0..frames {
            if let Some(mask) = valid {
                if !mask[qi][t] {
                    excluded += 1;
                    continue;
                }
            }
            total += 1;
            if p.visible[t] == g.visible[t] {
                oa_hits += 1;
            }
            let err = match space {
                Space::ThreeD => (p.positions[t] - g.positions[t]).norm(),
                Space::TwoD => {
                    let d = p.positions[t] - g.positions[t];
                    (d.x * d.x + d.y * d.y).sqrt()
                }
            };
            let bucket = if g.visible[t] {
                vis_count += 1;
                &mut vis_within
            } else {
                occ_count += 1;
                &mut occ_within
            };
            for (i, &x) in thresholds.iter().enumerate() {
                if err <= x {
                    bucket[i] += 1;
                }
            }
            if space == Space::ThreeD && err > SURVIVAL_DRIFT && t < first_drift {
                first_drift = t;
            }
        }
        sr_sum += 100.0 * first_drift as f64 / frames as f64;
    }

    let pct = |hits: usize, n: usize| {
        if n == 0 {
            0.0
        } else {
            100.0 * hits as f64 / n as f64
        }
    };
    let delta: [f64; 5] = std::array::from_fn(|i| pct(vis_within[i], vis_count));
    let delta_avg = delta.iter().sum::<f64>() / 5.0;
    let delta_avg_occluded = if occ_count > 0 {
        let d: [f64; 5] = std::array::from_fn(|i| pct(occ_within[i], occ_count));
        Some(d.iter().sum::<f64>() / 5.0)
    } else {
        None
    };
    MetricsReport {
        oa: pct(oa_hits, total),
        delta,
        delta_avg,
        delta_avg_occluded,
        sr: match space {
            Space::ThreeD => Some(sr_sum / pairs.len().max(1) as f64),
            Space::TwoD => None,
        },
        visible_frames: vis_count,
        occluded_frames: occ_count,
        total_frames: total,
        excluded_pairs: excluded,
    }
}

/// Position and occlusion metrics over frame-aligned records. In 2D space
/// the records must already carry pixel coordinates in x/y.
pub fn compute_metrics(
    pred: &[TrajectoryRecord],
    gt: &[TrajectoryRecord],
    space: Space,
) -> Result<MetricsReport, EvalError> {
    let pairs = pair_records(pred, gt)?;
    Ok(metric_core(&pairs, space, None))
}

/// Project 3D records into a camera per frame; returns the 2D records and a
/// per-record validity mask (false where the point sits behind the camera).
pub fn project_records(
    records: &[TrajectoryRecord],
    cameras: &[CameraModel],
) -> (Vec<TrajectoryRecord>, Vec<Vec<bool>>) {
    let mut out = Vec::with_capacity(records.len());
    let mut masks = Vec::with_capacity(records.len());
    for r in records {
        let mut positions = Vec::with_capacity(r.num_frames());
        let mut mask = Vec::with_capacity(r.num_frames());
        for (t, p) in r.positions.iter().enumerate() {
            match project(p, &cameras[t.min(cameras.len() - 1)]) {
                Ok(([u, v], _)) => {
                    positions.push(Vector3::new(u, v, 0.0));
                    mask.push(true);
                }
                Err(_) => {
                    positions.push(Vector3::zeros());
                    mask.push(false);
                }
            }
        }
        out.push(TrajectoryRecord {
            query_id: r.query_id,
            start_frame: r.start_frame,
            positions,
            visible: r.visible.clone(),
        });
        masks.push(mask);
    }
    (out, masks)
}

/// 2D metrics of 3D records under per-frame cameras; behind-camera pairs are
/// excluded and counted in the report.
pub fn compute_metrics_projected(
    pred: &[TrajectoryRecord],
    gt: &[TrajectoryRecord],
    cameras: &[CameraModel],
) -> Result<MetricsReport, EvalError> {
    let (pred2d, mask_p) = project_records(pred, cameras);
    let (gt2d, mask_g) = project_records(gt, cameras);
    let both: Vec<Vec<bool>> = mask_p
        .iter()
        .zip(&mask_g)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| *x && *y).collect())
        .collect();
    let pairs = pair_records(&pred2d, &gt2d)?;
    Ok(metric_core(&pairs, Space::TwoD, Some(&both)))
}

/// Average Jaccard over the five thresholds: true positives are within
/// threshold with both prediction and GT visible; a predicted-visible point
/// that is GT-occluded or out of threshold is a false positive.
pub fn compute_average_jaccard(
    pred: &[TrajectoryRecord],
    gt: &[TrajectoryRecord],
    space: Space,
) -> Result<f64, EvalError> {
    let pairs = pair_records(pred, gt)?;
    let thresholds = space.thresholds();
    let mut jaccards = Vec::with_capacity(5);
    for &x in &thresholds {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut gt_pos = 0usize;
        for (p, g) in &pairs {
            for t in 0..p.num_frames() {
                let err = match space {
                    Space::ThreeD => (p.positions[t] - g.positions[t]).norm(),
                    Space::TwoD => {
                        let d = p.positions[t] - g.positions[t];
                        (d.x * d.x + d.y * d.y).sqrt()
                    }
                };
                let within = err <= x;
                if g.visible[t] {
                    gt_pos += 1;
                }
                if p.visible[t] {
                    if g.visible[t] && within {
                        tp += 1;
                    } else {
                        fp += 1;
                    }
                }
            }
        }
        let denom = gt_pos + fp;
        jaccards.push(if denom == 0 {
            0.0
        } else {
            100.0 * tp as f64 / denom as f64
        });
    }
    Ok(jaccards.iter().sum::<f64>() / 5.0)
}

/// Flow field used by the chaining baseline.
pub enum FlowSource<'a> {
    Model(&'a Model),
    /// Ground-truth flow fields from the sequence (diagnostics).
    Gt,
}

/// Inverse-distance 3-NN interpolation of a flow field at a free position;
/// an exact point hit short-circuits to that point's flow.
pub fn interpolate_flow(
    points: &[Vector3<f64>],
    flows: &[Vector3<f64>],
    at: &Vector3<f64>,
) -> Vector3<f64> {
    let nn = crate::geometry::knn(&[*at], points, 3).expect("non-empty flow field");
    let mut num = Vector3::zeros();
    let mut den = 0.0;
    for &j in &nn[0] {
        let d = (points[j] - at).norm();
        if d < 1e-9 {
            return flows[j];
        }
        let w = 1.0 / d;
        num += flows[j] * w;
        den += w;
    }
    num / den
}

/// Scene-flow chaining baseline: per step, predict (or look up) the dense
/// flow between consecutive frames and advect each query by the interpolated
/// flow at its current position. No occlusion output — predictions are
/// marked visible everywhere. Runs forward from each query's start and
/// backward to frame 0, like the tracker.
pub fn chain_sceneflow(
    seq: &SequenceRecord,
    queries: &[QuerySpec],
    source: &FlowSource,
) -> Result<Vec<TrajectoryRecord>, EvalError> {
    let n_frames = seq.num_frames();
    let mut records: Vec<TrajectoryRecord> = queries
        .iter()
        .map(|q| TrajectoryRecord {
            query_id: q.id,
            start_frame: q.start_frame,
            positions: vec![Vector3::zeros(); n_frames],
            visible: vec![true; n_frames],
        })
        .collect();

    // Cache per-pair flow fields: key (from, to).
    let mut flow_cache: std::collections::HashMap<(usize, usize), Vec<Vector3<f64>>> =
        Default::default();
    let field = |from: usize,
                     to: usize,
                     cache: &mut std::collections::HashMap<(usize, usize), Vec<Vector3<f64>>>|
     -> Result<Vec<Vector3<f64>>, EvalError> {
        if let Some(f) = cache.get(&(from, to)) {
            return Ok(f.clone());
        }
        let flows = match source {
            FlowSource::Model(model) => {
                let (_, finest) = infer_scene_flow(model, &seq.frames[from], &seq.frames[to])?;
                (0..finest.rows()).map(|r| finest.row_vector3(r)).collect()
            }
            FlowSource::Gt => {
                if to == from + 1 {
                    seq.gt_flow[from].clone()
                } else {
                    // Backward field from material correspondence.
                    debug_assert_eq!(to + 1, from);
                    let prev_rows: std::collections::HashMap<u32, usize> = seq.point_ids[to]
                        .iter()
                        .enumerate()
                        .map(|(row, &id)| (id, row))
                        .collect();
                    seq.point_ids[from]
                        .iter()
                        .enumerate()
                        .map(|(row, id)| match prev_rows.get(id) {
                            Some(&prev_row) => -seq.gt_flow[to][prev_row],
                            None => {
                                // No correspondence in the previous frame;
                                // reuse the forward motion, negated.
                                -interpolate_flow(
                                    &seq.frames[to].points,
                                    &seq.gt_flow[to],
                                    &seq.frames[from].points[row],
                                )
                            }
                        })
                        .collect()
                }
            }
        };
        cache.insert((from, to), flows.clone());
        Ok(cache[&(from, to)].clone())
    };

    for (qi, q) in queries.iter().enumerate() {
        records[qi].positions[q.start_frame] = q.position;
        // Forward then backward.
        let forward: Vec<usize> = (q.start_frame..n_frames).collect();
        let backward: Vec<usize> = (0..=q.start_frame).rev().collect();
        for order in [forward, backward] {
            let mut pos = q.position;
            for w in order.windows(2) {
                let flows = field(w[0], w[1], &mut flow_cache)?;
                let v = interpolate_flow(&seq.frames[w[0]].points, &flows, &pos);
                pos += v;
                records[qi].positions[w[1]] = pos;
            }
        }
    }
    Ok(records)
}

/// Lift 2D point tracks to 3D using per-frame depth maps and cameras.
/// Visible frames sample the depth map; occluded frames interpolate the
/// depth linearly in time between the nearest visible anchors (clamped at
/// the ends). Tracks that are never visible are skipped with a warning.
pub fn lift_2d_tracks(
    tracks: &[Track2d],
    depth_maps: &[DepthMap],
    cameras: &[CameraModel],
    mode: InterpMode,
) -> (Vec<TrajectoryRecord>, Vec<u32>) {
    let mut out = Vec::with_capacity(tracks.len());
    let mut skipped = Vec::new();
    for track in tracks {
        let frames = track.uv.len();
        // Depth anchors at visible frames with a valid sample.
        let mut anchors: Vec<(usize, f64)> = Vec::new();
        for t in 0..frames {
            if track.visible[t] {
                if let Ok(d) = sample_depth(&depth_maps[t], track.uv[t], mode) {
                    anchors.push((t, d));
                }
            }
        }
        if anchors.is_empty() {
            eprintln!(
                "warning: query {} has no visible frame with valid depth; skipped",
                track.query_id
            );
            skipped.push(track.query_id);
            continue;
        }
        let mut positions = Vec::with_capacity(frames);
        for t in 0..frames {
            let depth = interp_depth(&anchors, t);
            let p = backproject(track.uv[t], depth, &cameras[t]).expect("positive depth");
            positions.push(p);
        }
        out.push(TrajectoryRecord {
            query_id: track.query_id,
            start_frame: anchors[0].0,
            positions,
            visible: track.visible.clone(),
        });
    }
    (out, skipped)
}

/// Linear temporal interpolation between depth anchors, clamped at the ends.
fn interp_depth(anchors: &[(usize, f64)], t: usize) -> f64 {
    match anchors.binary_search_by_key(&t, |a| a.0) {
        Ok(i) => anchors[i].1,
        Err(i) => {
            if i == 0 {
                anchors[0].1
            } else if i == anchors.len() {
                anchors[anchors.len() - 1].1
            } else {
                let (t0, d0) = anchors[i - 1];
                let (t1, d1) = anchors[i];
                let w = (t - t0) as f64 / (t1 - t0) as f64;
                d0 + (d1 - d0) * w
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AngleReport {
    pub angle_deg: f64,
    pub delta_avg: f64,
    pub excluded_pairs: usize,
}

/// Rotate the camera eye about the world z-axis, always looking at the
/// origin, and evaluate the 2D position accuracy of predictions against GT
/// in each rotated view. Points behind a rotated camera are excluded and
/// counted.
pub fn rotated_view_eval(
    pred: &[TrajectoryRecord],
    gt: &[TrajectoryRecord],
    camera: &CameraModel,
    angles_deg: &[f64],
) -> Result<Vec<AngleReport>, EvalError> {
    let eye0 = camera.center();
    let mut out = Vec::with_capacity(angles_deg.len());
    for &deg in angles_deg {
        let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), deg.to_radians());
        let eye = rot * eye0;
        let cam = CameraModel::look_at(
            eye,
            Vector3::zeros(),
            Vector3::new(0.0, 0.0, 1.0),
            camera.fx,
            camera.fy,
            camera.cx,
            camera.cy,
            camera.width,
            camera.height,
        );
        let cams = vec![cam; pred.first().map_or(1, |r| r.num_frames())];
        let report = compute_metrics_projected(pred, gt, &cams)?;
        out.push(AngleReport {
            angle_deg: deg,
            delta_avg: report.delta_avg,
            excluded_pairs: report.excluded_pairs,
        });
    }
    Ok(out)
}

/// Plain-text results table: one row per method, the headline columns.
pub fn format_table(rows: &[(String, MetricsReport)]) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "{:<24} {:>6} {:>10} {:>14} {:>8}\n",
        "method", "OA", "3D-d_avg", "d_avg_occluded", "SR"
    ));
    for (name, r) in rows {
        let occ = r
            .delta_avg_occluded
            .map_or("-".to_string(), |v| format!("{v:.1}"));
        let sr = r.sr.map_or("-".to_string(), |v| format!("{v:.1}"));
        s.push_str(&format!(
            "{:<24} {:>6.1} {:>10.1} {:>14} {:>8}\n",
            name, r.oa, r.delta_avg, occ, sr
        ));
    }
    s
}

/// Rotation-ablation table: per-method δ^avg across view angles.
pub fn format_rotation_table(rows: &[(String, Vec<AngleReport>)]) -> String {
    let mut s = String::new();
    if let Some((_, first)) = rows.first() {
        s.push_str(&format!("{:<24}", "method"));
        for a in first {
            s.push_str(&format!(" d_avg@{:>3.0}deg", a.angle_deg));
        }
        s.push('\n');
    }
    for (name, reports) in rows {
        s.push_str(&format!("{name:<24}"));
        for a in reports {
            s.push_str(&format!(" {:>12.1}", a.delta_avg));
        }
        s.push('\n');
    }
    s
}

/// Render projected GT and predicted trajectories into a binary PPM image.
pub fn render_trajectory_overlay(
    pred: &[TrajectoryRecord],
    gt: &[TrajectoryRecord],
    camera: &CameraModel,
    path: &std::path::Path,
) -> std::io::Result<()> {
    let (w, h) = (camera.width, camera.height);
    let mut img = vec![0u8; w * h * 3];
    let mut draw = |records: &[TrajectoryRecord], color: [u8; 3]| {
        for r in records {
            for p in &r.positions {
                if let Ok(([u, v], _)) = project(p, camera) {
                    let (ui, vi) = (u.round() as i64, v.round() as i64);
                    if ui >= 0 && vi >= 0 && (ui as usize) < w && (vi as usize) < h {
                        let at = (vi as usize * w + ui as usize) * 3;
                        img[at..at + 3].copy_from_slice(&color);
                    }
                }
            }
        }
    };
    draw(gt, [60, 220, 60]);
    draw(pred, [230, 90, 200]);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(&img);
    std::fs::write(path, bytes)
}
