//! Training losses: position tracking, scene flow, motion smoothness,
//! rigidity/isometry regularizers, 2D projection error, and their weighted
//! total.
//!
//! Conventions shared by the per-level losses: `preds[0]` is the densest
//! level (discount exponent zero), rows are frame-major (`row = t * queries
//! + q`), and the discount factors default to 0.8. The tracking and
//! projection losses restrict to GT-visible rows by default; masked rows
//! contribute zero while the normalization keeps the formula's `1/(T·n_q)`.

use crate::autodiff::{Tape, Tensor, Var};
use crate::geometry::CameraModel;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::rc::Rc;
use thiserror::Error;

/// Default level discount for both the tracking (alpha) and scene-flow
/// (gamma) losses.
pub const LEVEL_DISCOUNT: f64 = 0.8;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("negative loss weight {0}")]
    NegativeWeight(f64),
    #[error("stage-inconsistent weights: {0}")]
    StageMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Track,
}

/// Weighted-sum coefficients and level discounts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_sf: f64,
    pub lambda_track: f64,
    pub lambda_smooth: f64,
    pub lambda_rigid: f64,
    pub lambda_iso: f64,
    /// Weight of the optional 2D projection term (0 disables it).
    pub lambda_projection: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub stage: Stage,
}

impl LossWeights {
    pub fn pretrain() -> Self {
        Self {
            lambda_sf: 2.0,
            lambda_track: 1.0,
            lambda_smooth: 0.0,
            lambda_rigid: 0.0,
            lambda_iso: 0.0,
            lambda_projection: 0.0,
            alpha: LEVEL_DISCOUNT,
            gamma: LEVEL_DISCOUNT,
            stage: Stage::Pretrain,
        }
    }

    pub fn track() -> Self {
        Self {
            lambda_sf: 2.0,
            lambda_track: 1.0,
            lambda_smooth: 0.3,
            lambda_rigid: 0.2,
            lambda_iso: 0.2,
            lambda_projection: 0.0,
            alpha: LEVEL_DISCOUNT,
            gamma: LEVEL_DISCOUNT,
            stage: Stage::Track,
        }
    }

    pub fn for_stage(stage: Stage) -> Self {
        match stage {
            Stage::Pretrain => Self::pretrain(),
            Stage::Track => Self::track(),
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        for w in [
            self.lambda_sf,
            self.lambda_track,
            self.lambda_smooth,
            self.lambda_rigid,
            self.lambda_iso,
            self.lambda_projection,
        ] {
            if w < 0.0 {
                return Err(LossError::NegativeWeight(w));
            }
        }
        if self.stage == Stage::Pretrain
            && (self.lambda_smooth != 0.0 || self.lambda_rigid != 0.0 || self.lambda_iso != 0.0)
        {
            return Err(LossError::StageMismatch(
                "pretrain stage requires zero smooth/rigid/iso weights".into(),
            ));
        }
        Ok(())
    }
}

fn mask_var(tape: &Tape, visible: &[bool]) -> Var {
    tape.constant(Tensor::from_vec(
        visible.len(),
        1,
        visible.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
    ))
}

fn check_rows(name: &str, t: &Tensor, rows: usize, cols: usize) -> Result<(), LossError> {
    if t.rows() != rows || t.cols() != cols {
        return Err(LossError::ShapeMismatch(format!(
            "{name}: expected {rows}x{cols}, got {}x{}",
            t.rows(),
            t.cols()
        )));
    }
    Ok(())
}

/// Position tracking loss: `(1/(T·n_q)) Σ_l α^{l-1} Σ_t Σ_i |q - q̂|_1`.
/// Rows where `visible` is false contribute nothing (the default training
/// configuration supervises only GT-visible frames).
pub fn track_loss(
    tape: &Tape,
    preds: &[Var],
    gt: &Tensor,
    visible: Option<&[bool]>,
    frames: usize,
    queries: usize,
    alpha: f64,
) -> Result<Var, LossError> {
    let rows = frames * queries;
    check_rows("track_loss gt", gt, rows, 3)?;
    for &p in preds {
        check_rows("track_loss pred", &tape.value(p), rows, 3)?;
    }
    if let Some(v) = visible {
        if v.len() != rows {
            return Err(LossError::ShapeMismatch(format!(
                "visibility mask has {} entries for {rows} rows",
                v.len()
            )));
        }
    }
    let gt_var = tape.constant(gt.clone());
    let mask = visible.map(|v| mask_var(tape, v));
    let mut total: Option<Var> = None;
    for (l, &pred) in preds.iter().enumerate() {
        let diff = tape.sub(pred, gt_var);
        let diff = tape.abs(diff);
        let per_row = tape.sum_rows(diff);
        let per_row = match mask {
            Some(m) => tape.mul(per_row, m),
            None => per_row,
        };
        let s = tape.sum_all(per_row);
        let s = tape.scale(s, alpha.powi(l as i32));
        total = Some(match total {
            Some(t) => tape.add(t, s),
            None => s,
        });
    }
    Ok(tape.scale(total.unwrap(), 1.0 / (frames * queries) as f64))
}

/// Scene-flow loss: `(1/T) Σ_l γ^{l-1} Σ_t Σ_i |Δp - Δp̂|_1` — averaged over
/// frames, summed over points, as in the tracking formula's companion.
pub fn sceneflow_loss(
    tape: &Tape,
    pred_flows: &[Var],
    gt_flow: &Tensor,
    frames: usize,
    gamma: f64,
) -> Result<Var, LossError> {
    if gt_flow.cols() != 3 {
        return Err(LossError::ShapeMismatch("gt_flow must be N×3".into()));
    }
    let gt_var = tape.constant(gt_flow.clone());
    let mut total: Option<Var> = None;
    for (l, &pred) in pred_flows.iter().enumerate() {
        check_rows("sceneflow pred", &tape.value(pred), gt_flow.rows(), 3)?;
        let diff = tape.sub(pred, gt_var);
        let diff = tape.abs(diff);
        let s = tape.sum_all(diff);
        let s = tape.scale(s, gamma.powi(l as i32));
        total = Some(match total {
            Some(t) => tape.add(t, s),
            None => s,
        });
    }
    Ok(tape.scale(total.unwrap(), 1.0 / frames as f64))
}

/// Scene-flow loss over levels with differing point counts: each level
/// brings its own ground truth, discounted by `γ^{l-1}` and normalized per
/// level by its point count, averaged over `frames`.
pub fn sceneflow_loss_levels(
    tape: &Tape,
    levels: &[(Var, &Tensor)],
    frames: usize,
    gamma: f64,
) -> Result<Var, LossError> {
    let mut total: Option<Var> = None;
    for (l, (pred, gt)) in levels.iter().enumerate() {
        check_rows("sceneflow level pred", &tape.value(*pred), gt.rows(), 3)?;
        let gt_var = tape.constant((*gt).clone());
        let diff = tape.sub(*pred, gt_var);
        let diff = tape.abs(diff);
        let s = tape.sum_all(diff);
        let s = tape.scale(s, gamma.powi(l as i32) / gt.rows().max(1) as f64);
        total = Some(match total {
            Some(t) => tape.add(t, s),
            None => s,
        });
    }
    Ok(tape.scale(
        total.ok_or_else(|| LossError::ShapeMismatch("no levels".into()))?,
        1.0 / frames as f64,
    ))
}

/// Tracking loss over levels with differing point counts (the two-frame
/// pretraining path treats each level's points as its query set).
pub fn track_loss_levels(
    tape: &Tape,
    levels: &[(Var, &Tensor)],
    frames: usize,
    alpha: f64,
) -> Result<Var, LossError> {
    let mut total: Option<Var> = None;
    for (l, (pred, gt)) in levels.iter().enumerate() {
        check_rows("track level pred", &tape.value(*pred), gt.rows(), 3)?;
        let gt_var = tape.constant((*gt).clone());
        let diff = tape.sub(*pred, gt_var);
        let diff = tape.abs(diff);
        let s = tape.sum_all(diff);
        let s = tape.scale(s, alpha.powi(l as i32) / gt.rows().max(1) as f64);
        total = Some(match total {
            Some(t) => tape.add(t, s),
            None => s,
        });
    }
    Ok(tape.scale(
        total.ok_or_else(|| LossError::ShapeMismatch("no levels".into()))?,
        1.0 / frames as f64,
    ))
}

/// Motion smoothness: `1/(L·T·n_q) Σ_l Σ_i Σ_t ||v_{t,i} - v_{t+1,i}||_1`
/// over consecutive motion pairs (`T` counts pairs). A single-motion series
/// has no pairs and scores zero.
pub fn smoothness_loss(
    tape: &Tape,
    motions: &[Var],
    steps: usize,
    queries: usize,
) -> Result<Var, LossError> {
    let rows = steps * queries;
    for &m in motions {
        check_rows("smoothness motions", &tape.value(m), rows, 3)?;
    }
    if steps < 2 {
        eprintln!("warning: smoothness loss over a single motion step is zero");
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let pairs = steps - 1;
    let early: Rc<Vec<usize>> = Rc::new((0..pairs * queries).collect());
    let late: Rc<Vec<usize>> = Rc::new((queries..steps * queries).collect());
    let mut total: Option<Var> = None;
    for &m in motions {
        let a = tape.gather_rows(m, early.clone());
        let b = tape.gather_rows(m, late.clone());
        let diff = tape.sub(a, b);
        let diff = tape.abs(diff);
        let s = tape.sum_all(diff);
        total = Some(match total {
            Some(t) => tape.add(t, s),
            None => s,
        });
    }
    let norm = 1.0 / (motions.len() * pairs * queries) as f64;
    Ok(tape.scale(total.unwrap(), norm))
}

/// Directed k-NN edges over the query set at its start configuration.
#[derive(Debug, Clone)]
pub struct NeighborGraph {
    pub edges: Vec<(usize, usize)>,
    pub queries: usize,
}

pub fn build_query_graph(start: &[Vector3<f64>], k: usize) -> NeighborGraph {
    let mut edges = Vec::new();
    if start.len() >= 2 {
        let lists = crate::geometry::knn(start, start, k + 1).expect("non-empty");
        for (i, list) in lists.iter().enumerate() {
            for &j in list {
                if j != i {
                    edges.push((i, j));
                }
            }
        }
    }
    NeighborGraph {
        edges,
        queries: start.len(),
    }
}

/// Rigidity and isometry regularizers over the query neighbor graph.
///
/// Isometry penalizes `| ||q_i - q_j|| - ||q⁰_i - q⁰_j|| |` per edge and
/// frame. Rigidity fits, per query and frame, the rotation best aligning the
/// start-frame neighbor offsets to the current ones (orthogonal Procrustes)
/// and penalizes the mean squared deviation from it. The fitted rotation is
/// treated as a constant of the loss: it minimizes that same squared
/// objective, so its own sensitivity contributes nothing to first order.
pub fn rigidity_iso_losses(
    tape: &Tape,
    frame_positions: &[Var],
    start: &Tensor,
    graph: &NeighborGraph,
) -> Result<(Var, Var), LossError> {
    let q = graph.queries;
    check_rows("rigidity start", start, q, 3)?;
    if q < 2 || graph.edges.is_empty() || frame_positions.is_empty() {
        eprintln!("warning: rigidity/isometry need at least two queries; returning zero");
        let z = tape.constant(Tensor::scalar(0.0));
        return Ok((z, z));
    }
    for &p in frame_positions {
        check_rows("rigidity frame", &tape.value(p), q, 3)?;
    }

    let n_edges = graph.edges.len();
    let srcs: Rc<Vec<usize>> = Rc::new(graph.edges.iter().map(|e| e.0).collect());
    let dsts: Rc<Vec<usize>> = Rc::new(graph.edges.iter().map(|e| e.1).collect());

    // Start offsets and distances are constants.
    let mut d0 = Vec::with_capacity(n_edges);
    let mut offsets0 = Vec::with_capacity(n_edges);
    for &(i, j) in &graph.edges {
        let a = start.row_vector3(i);
        let b = start.row_vector3(j);
        offsets0.push(b - a);
        d0.push((b - a).norm());
    }
    let d0_var = tape.constant(Tensor::from_vec(n_edges, 1, d0));

    let mut iso_total: Option<Var> = None;
    let mut rigid_total: Option<Var> = None;
    for &pos in frame_positions {
        let pi = tape.gather_rows(pos, srcs.clone());
        let pj = tape.gather_rows(pos, dsts.clone());
        let diff = tape.sub(pj, pi);

        // Isometry: edge length drift.
        let sq = tape.square(diff);
        let d2 = tape.sum_rows(sq);
        let d = tape.sqrt_eps(d2, 1e-12);
        let drift = tape.sub(d, d0_var);
        let drift = tape.abs(drift);
        let s = tape.sum_all(drift);
        iso_total = Some(match iso_total {
            Some(t) => tape.add(t, s),
            None => s,
        });

        // Rigidity: deviation from the per-neighborhood Procrustes rotation.
        let rotations = fit_neighborhood_rotations(&tape.value(pos), &offsets0, graph, q);
        let mut targets = Vec::with_capacity(n_edges * 3);
        for (e, &(i, _)) in graph.edges.iter().enumerate() {
            let t = rotations[i] * offsets0[e];
            targets.extend_from_slice(&[t.x, t.y, t.z]);
        }
        let target = tape.constant(Tensor::from_vec(n_edges, 3, targets));
        let dev = tape.sub(diff, target);
        let dev2 = tape.square(dev);
        let s = tape.sum_all(dev2);
        rigid_total = Some(match rigid_total {
            Some(t) => tape.add(t, s),
            None => s,
        });
    }
    let norm = 1.0 / (n_edges * frame_positions.len()) as f64;
    Ok((
        tape.scale(rigid_total.unwrap(), norm),
        tape.scale(iso_total.unwrap(), norm),
    ))
}

/// Per-query Kabsch fit of current neighbor offsets against start offsets.
fn fit_neighborhood_rotations(
    current: &Tensor,
    offsets0: &[Vector3<f64>],
    graph: &NeighborGraph,
    queries: usize,
) -> Vec<Matrix3<f64>> {
    let mut h = vec![Matrix3::<f64>::zeros(); queries];
    for (e, &(i, j)) in graph.edges.iter().enumerate() {
        let cur = current.row_vector3(j) - current.row_vector3(i);
        h[i] += offsets0[e] * cur.transpose();
    }
    h.into_iter()
        .map(|hi| {
            if hi.norm() < 1e-12 {
                return Matrix3::identity();
            }
            let svd = hi.svd(true, true);
            let u = svd.u.unwrap();
            let vt = svd.v_t.unwrap();
            let d = (vt.transpose() * u.transpose()).determinant();
            let fix = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d.signum()));
            vt.transpose() * fix * u.transpose()
        })
        .collect()
}

/// L1 pixel reprojection error with the tracking loss's discounting.
/// Points behind a camera are skipped and counted.
pub fn projection_loss(
    tape: &Tape,
    preds: &[Var],
    cameras: &[CameraModel],
    gt_2d: &Tensor,
    visible: Option<&[bool]>,
    frames: usize,
    queries: usize,
    alpha: f64,
) -> Result<(Var, usize), LossError> {
    let rows = frames * queries;
    check_rows("projection gt", gt_2d, rows, 2)?;
    if cameras.len() != frames {
        return Err(LossError::ShapeMismatch(format!(
            "{} cameras for {frames} frames",
            cameras.len()
        )));
    }
    let gt_var = tape.constant(gt_2d.clone());
    let mut skipped = 0usize;
    let mut total: Option<Var> = None;
    for (l, &pred) in preds.iter().enumerate() {
        check_rows("projection pred", &tape.value(pred), rows, 3)?;
        // Row validity: visible (if masked) and in front of the camera.
        let mut keep = vec![1.0; rows];
        {
            let v = tape.value(pred);
            for t in 0..frames {
                for qi in 0..queries {
                    let r = t * queries + qi;
                    if visible.is_some_and(|m| !m[r]) {
                        keep[r] = 0.0;
                        continue;
                    }
                    let p = v.row_vector3(r);
                    if cameras[t].world_to_camera(&p).z <= 0.0 {
                        keep[r] = 0.0;
                        skipped += 1;
                    }
                }
            }
        }
        // Camera transform on-tape, one frame block at a time.
        let mut frame_uvs = Vec::with_capacity(frames);
        for (t, cam) in cameras.iter().enumerate() {
            let idx: Rc<Vec<usize>> = Rc::new((t * queries..(t + 1) * queries).collect());
            let block = tape.gather_rows(pred, idx);
            let rot_t = {
                let r = cam.rotation;
                Tensor::from_vec(
                    3,
                    3,
                    vec![
                        r[(0, 0)],
                        r[(1, 0)],
                        r[(2, 0)],
                        r[(0, 1)],
                        r[(1, 1)],
                        r[(2, 1)],
                        r[(0, 2)],
                        r[(1, 2)],
                        r[(2, 2)],
                    ],
                )
            };
            let rt = tape.constant(rot_t);
            let trans = tape.constant(Tensor::from_vec(
                1,
                3,
                vec![cam.translation.x, cam.translation.y, cam.translation.z],
            ));
            let pc = tape.matmul(block, rt);
            let pc = tape.add_bias_row(pc, trans);
            let x = tape.slice_cols(pc, 0, 1);
            let y = tape.slice_cols(pc, 1, 1);
            let z = tape.slice_cols(pc, 2, 1);
            // Guard z for skipped rows; their contribution is masked to zero.
            let z = tape.abs(z);
            let inv_z = tape.recip_eps(z, 1e-30);
            let u = tape.mul(x, inv_z);
            let u = tape.scale(u, cam.fx);
            let u = tape.add_scalar(u, cam.cx);
            let v = tape.mul(y, inv_z);
            let v = tape.scale(v, cam.fy);
            let v = tape.add_scalar(v, cam.cy);
            frame_uvs.push(tape.concat_cols(&[u, v]));
        }
        let uv = tape.concat_rows(&frame_uvs);
        let diff = tape.sub(uv, gt_var);
        let diff = tape.abs(diff);
        let per_row = tape.sum_rows(diff);
        let keep_var = tape.constant(Tensor::from_vec(rows, 1, keep));
        let per_row = tape.mul(per_row, keep_var);
        let s = tape.sum_all(per_row);
        let s = tape.scale(s, alpha.powi(l as i32));
        total = Some(match total {
            Some(t) => tape.add(t, s),
            None => s,
        });
    }
    Ok((
        tape.scale(total.unwrap(), 1.0 / (frames * queries) as f64),
        skipped,
    ))
}

/// Binary cross-entropy on logits, mean over rows.
pub fn occlusion_bce(tape: &Tape, logits: Var, occluded: &[bool]) -> Var {
    let n = occluded.len();
    assert_eq!(tape.value(logits).rows(), n);
    let y = tape.constant(Tensor::from_vec(
        n,
        1,
        occluded.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect(),
    ));
    let sp = tape.softplus(logits);
    let xy = tape.mul(logits, y);
    let per = tape.sub(sp, xy);
    tape.mean_all(per)
}

/// Numeric loss components for the weighted total.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub sf: f64,
    pub track: f64,
    pub smooth: f64,
    pub rigid: f64,
    pub iso: f64,
    pub projection: f64,
}

/// `λ1·L_sf + λ2·L_track + λ3·L_smooth + λ4·L_rigid + λ5·L_iso` plus the
/// optional projection term.
pub fn total_loss(components: &LossComponents, weights: &LossWeights) -> Result<f64, LossError> {
    weights.validate()?;
    Ok(weights.lambda_sf * components.sf
        + weights.lambda_track * components.track
        + weights.lambda_smooth * components.smooth
        + weights.lambda_rigid * components.rigid
        + weights.lambda_iso * components.iso
        + weights.lambda_projection * components.projection)
}

/// Mean Euclidean end-point error between flow fields, in meters.
pub fn epe3d(pred: &Tensor, gt: &Tensor) -> f64 {
    assert_eq!(pred.rows(), gt.rows());
    assert_eq!(pred.cols(), 3);
    let mut total = 0.0;
    for r in 0..pred.rows() {
        total += (pred.row_vector3(r) - gt.row_vector3(r)).norm();
    }
    total / pred.rows().max(1) as f64
}
