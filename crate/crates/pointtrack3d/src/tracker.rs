//! Autoregressive online tracking: per-query state (appearance memory,
//! motion buffer, occlusion), the per-frame step, and forward/backward
//! whole-sequence inference for mid-video queries.
//!
//! Per step, coarse to fine over pyramid levels: interpolate the query's
//! current feature, build one cost volume per stored appearance against the
//! next frame, fuse them with the motion prior, and refine the flow residual
//! down the pyramid. Level-1 flow advances the position; the level-1
//! occlusion head gates whether the new frame's appearance enters the
//! memory. During predicted occlusion the position still advances by the
//! predicted flow — the motion prior carries the track.

use crate::autodiff::{Tape, Tensor, Var};
use crate::backbone::{
    adaptive_decode_radii, build_decode_mask, BackboneError, DecodeMask, LevelFeatures,
};
use crate::fusion::{occluded_from_logit, FusionError, FusionTrace};
use crate::geometry::PointHierarchy;
use crate::model::{Model, ModelConfig, Nets};
use crate::nn::Binder;
use crate::synthdata::SequenceRecord;
use nalgebra::Vector3;
use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrackError {
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error("query start frame {0} outside sequence of {1} frames")]
    StartOutOfRange(usize, usize),
    #[error("sequence too short to track")]
    TooShort,
}

/// A query to track: identity, the frame it starts at, and its 3D position
/// in that frame.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySpec {
    pub id: u32,
    pub start_frame: usize,
    pub position: Vector3<f64>,
}

/// Full-video trajectory with per-frame visibility. Predictions and ground
/// truth share this shape; `positions[t]` covers every frame of the video
/// (backward inference fills the frames before `start_frame`).
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub query_id: u32,
    pub start_frame: usize,
    pub positions: Vec<Vector3<f64>>,
    pub visible: Vec<bool>,
}

impl TrajectoryRecord {
    pub fn num_frames(&self) -> usize {
        self.positions.len()
    }
}

/// Appearance snapshot schedule `{start, T-6, T-2, T}` clamped to
/// `[start, T]`, deduplicated, ascending.
pub fn select_appearance_frames(current: usize, start: usize) -> Vec<usize> {
    assert!(current >= start, "current frame before query start");
    let mut frames = vec![start];
    for offset in [6usize, 2, 0] {
        if let Some(f) = current.checked_sub(offset) {
            if f >= start {
                frames.push(f);
            }
        }
    }
    frames.sort_unstable();
    frames.dedup();
    frames
}

/// Detached per-frame backbone products: hierarchy plus decoder features as
/// plain tensors, reusable across step tapes.
pub struct FramePyramid {
    pub hierarchy: PointHierarchy,
    pub dec: Vec<OwnedLevelFeatures>,
    pub compression_rates: Vec<f64>,
}

pub struct OwnedLevelFeatures {
    pub data: Tensor,
    pub rows: Vec<usize>,
    pub level_len: usize,
}

impl FramePyramid {
    /// Bind the decoder features onto a tape as constants.
    pub fn bind(&self, tape: &Tape) -> Vec<LevelFeatures> {
        self.dec
            .iter()
            .map(|lf| {
                let var = tape.constant(lf.data.clone());
                if lf.rows.len() == lf.level_len {
                    LevelFeatures::full(var, lf.level_len)
                } else {
                    LevelFeatures::subset(var, lf.rows.clone(), lf.level_len)
                }
            })
            .collect()
    }
}

/// Encode and decode one frame with frozen parameters, optionally pruning
/// the two densest levels to balls around `focus` positions.
pub fn compute_frame_pyramid(
    model: &Model,
    nets: &Nets,
    frame: &crate::geometry::PointCloudFrame,
    focus: Option<(&[Vector3<f64>], f64)>,
) -> Result<FramePyramid, TrackError> {
    let cfg = &model.config;
    let tape = Tape::new();
    let b = Binder::frozen(&tape, &model.params);
    let (hierarchy, enc) = crate::backbone::encode_frame(&b, &nets.backbone, frame, cfg)?;
    let mask = match focus {
        None => DecodeMask::full(hierarchy.num_levels()),
        Some((positions, margin)) => {
            let mut radii = adaptive_decode_radii(&hierarchy, &cfg.decode_radii());
            for r in radii.iter_mut() {
                *r += margin;
            }
            build_decode_mask(&hierarchy, positions, &radii)
        }
    };
    let compression_rates = mask.compression_rates.clone();
    let dec = nets.backbone.decode(&b, &hierarchy, &enc, &mask)?;
    let dec = dec
        .into_iter()
        .enumerate()
        .map(|(l, lf)| OwnedLevelFeatures {
            data: tape.value(lf.var),
            rows: lf.rows,
            level_len: hierarchy.levels[l].points.len(),
        })
        .collect();
    Ok(FramePyramid {
        hierarchy,
        dec,
        compression_rates,
    })
}

/// An appearance snapshot: the frame it was taken at plus per-level features.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub frame: usize,
    pub feats: Vec<Tensor>,
}

/// Detached tracking state between steps.
#[derive(Debug, Clone)]
pub struct TrackState {
    pub query_ids: Vec<u32>,
    pub start_frames: Vec<usize>,
    pub positions: Vec<Vector3<f64>>,
    pub occluded: Vec<bool>,
    /// `Q×(M*3)`, oldest motion first.
    pub motion_buffer: Tensor,
    /// Per query, ascending by frame.
    pub memory: Vec<Vec<Snapshot>>,
}

impl TrackState {
    pub fn new(queries: &[QuerySpec], cfg: &ModelConfig) -> Self {
        Self {
            query_ids: queries.iter().map(|q| q.id).collect(),
            start_frames: queries.iter().map(|q| q.start_frame).collect(),
            positions: queries.iter().map(|q| q.position).collect(),
            occluded: vec![false; queries.len()],
            motion_buffer: Tensor::zeros(queries.len(), cfg.motion_history * 3),
            memory: vec![Vec::new(); queries.len()],
        }
    }
}

/// On-tape tracking state used inside a step (and across steps during
/// training rollouts, so gradients flow through positions, motion buffers
/// and stored appearances).
pub struct VarState {
    pub query_ids: Vec<u32>,
    pub start_frames: Vec<usize>,
    pub positions: Var,
    pub occluded: Vec<bool>,
    pub motion_buffer: Var,
    pub memory: Vec<Vec<(usize, Vec<Var>)>>,
}

impl VarState {
    pub fn bind(tape: &Tape, state: &TrackState) -> Self {
        Self {
            query_ids: state.query_ids.clone(),
            start_frames: state.start_frames.clone(),
            positions: tape.constant(Tensor::from_points(&state.positions)),
            occluded: state.occluded.clone(),
            motion_buffer: tape.constant(state.motion_buffer.clone()),
            memory: state
                .memory
                .iter()
                .map(|snaps| {
                    snaps
                        .iter()
                        .map(|s| {
                            (
                                s.frame,
                                s.feats.iter().map(|f| tape.constant(f.clone())).collect(),
                            )
                        })
                        .collect()
                })
                .collect(),
        }
    }

    pub fn detach(&self, tape: &Tape) -> TrackState {
        let pos = tape.value(self.positions);
        Self::detach_with_positions(self, tape, &pos)
    }

    fn detach_with_positions(&self, tape: &Tape, pos: &Tensor) -> TrackState {
        TrackState {
            query_ids: self.query_ids.clone(),
            start_frames: self.start_frames.clone(),
            positions: (0..pos.rows()).map(|r| pos.row_vector3(r)).collect(),
            occluded: self.occluded.clone(),
            motion_buffer: tape.value(self.motion_buffer),
            memory: self
                .memory
                .iter()
                .map(|snaps| {
                    snaps
                        .iter()
                        .map(|(frame, feats)| Snapshot {
                            frame: *frame,
                            feats: feats.iter().map(|&f| tape.value(f)).collect(),
                        })
                        .collect()
                })
                .collect(),
        }
    }

    pub fn num_queries(&self) -> usize {
        self.query_ids.len()
    }
}

/// One step's products, all on the step's tape.
pub struct StepOutput {
    /// Per level (densest first): predicted flow `Q×3`.
    pub flows: Vec<Var>,
    /// Per level: occlusion logits `Q×1`.
    pub occ_logits: Vec<Var>,
    pub new_positions: Var,
    pub attention: Vec<FusionTrace>,
}

/// Advance every query from `current_frame` to the next frame of the given
/// pyramids. Updates `state` in place (positions, occlusion, motion buffer,
/// appearance memory).
pub fn track_step(
    b: &Binder,
    nets: &Nets,
    cfg: &ModelConfig,
    state: &mut VarState,
    frame_t: &[LevelFeatures],
    hier_t: &PointHierarchy,
    frame_t1: &[LevelFeatures],
    hier_t1: &PointHierarchy,
    current_frame: usize,
) -> Result<StepOutput, TrackError> {
    let tape = b.tape();
    let nq = state.num_queries();
    let levels = cfg.levels;

    // Current-frame query features per level: flow-head context, and the
    // appearance snapshot for this frame when the query is visible.
    let mut current_feats = Vec::with_capacity(levels);
    for l in 0..levels {
        let f = nets.query_conv[l].fwd(
            b,
            state.positions,
            l,
            &hier_t.levels[l].points,
            &frame_t[l],
        )?;
        current_feats.push(f);
    }

    // Appearance memory upkeep: store this frame's snapshot for visible
    // queries, then prune to the schedule (retaining the most recent visible
    // snapshot when this frame's is missing). The single-appearance ablation
    // keeps only the most recent visible snapshot.
    let max_snapshots = match cfg.ablation {
        crate::model::AblationMode::SingleAppearance => 1,
        _ => cfg.max_appearances,
    };
    for qi in 0..nq {
        if !state.occluded[qi] {
            let feats: Vec<Var> = (0..levels)
                .map(|l| tape.gather_rows(current_feats[l], Rc::new(vec![qi])))
                .collect();
            let mem = &mut state.memory[qi];
            match mem.binary_search_by_key(&current_frame, |(f, _)| *f) {
                Ok(i) => mem[i] = (current_frame, feats),
                Err(i) => mem.insert(i, (current_frame, feats)),
            }
        }
        let schedule = select_appearance_frames(current_frame, state.start_frames[qi]);
        let mem = &mut state.memory[qi];
        let latest = mem.last().map(|(f, _)| *f);
        mem.retain(|(f, _)| schedule.contains(f) || Some(*f) == latest);
        while mem.len() > max_snapshots {
            // Drop the oldest non-start snapshot first; under the
            // single-appearance ablation drop the oldest outright.
            let drop_at = if max_snapshots > 1 && mem.len() >= 2 { 1 } else { 0 };
            mem.remove(drop_at);
        }
    }

    // (query, snapshot) pair layout shared by all levels.
    let mut seg_q: Vec<usize> = Vec::new();
    for (qi, mem) in state.memory.iter().enumerate() {
        for _ in mem {
            seg_q.push(qi);
        }
    }
    let have_pairs = !seg_q.is_empty();
    let pos_rows = if have_pairs {
        Some(tape.gather_rows(state.positions, Rc::new(seg_q.clone())))
    } else {
        None
    };

    let mut flows: Vec<Option<Var>> = vec![None; levels];
    let mut occ_logits: Vec<Option<Var>> = vec![None; levels];
    let mut attention = Vec::with_capacity(levels);
    let mut coarse_flow: Option<Var> = None;
    let mut coarse_feat: Option<Var> = None;

    // The no-motion ablations feed a zero buffer into the prior encoder.
    let prior_input = match cfg.ablation {
        crate::model::AblationMode::Full => state.motion_buffer,
        _ => tape.constant(Tensor::zeros(nq, cfg.motion_history * 3)),
    };

    for l in (0..levels).rev() {
        let phi = nets.motion_enc[l].fwd(b, prior_input)?;
        let cost_features = if have_pairs {
            let app_rows: Vec<Var> = state
                .memory
                .iter()
                .flat_map(|mem| mem.iter().map(|(_, feats)| feats[l]))
                .collect();
            let app = tape.concat_rows(&app_rows);
            let cost = nets.query_cost[l].fwd(
                b,
                pos_rows.unwrap(),
                app,
                l,
                &hier_t1.levels[l].points,
                &frame_t1[l],
            )?;
            Some(tape.concat_cols(&[cost, app]))
        } else {
            None
        };
        let (fused, trace) = nets.fusion[l].fwd(b, phi, cost_features, &seg_q, nq);
        attention.push(trace);

        let up_feat = match coarse_feat {
            Some(f) => f,
            None => tape.constant(Tensor::zeros(nq, cfg.predictor_width)),
        };
        let cflow = match coarse_flow {
            Some(f) => f,
            None => tape.constant(Tensor::zeros(nq, 3)),
        };
        let head_in = tape.concat_cols(&[fused, up_feat, current_feats[l], cflow]);
        let (pred_feat, residual) = nets.track_heads[l].fwd(b, head_in);
        let flow = tape.add(cflow, residual);
        occ_logits[l] = Some(nets.occ_heads[l].fwd(b, fused));
        flows[l] = Some(flow);
        coarse_flow = Some(flow);
        coarse_feat = Some(pred_feat);
    }

    let flows: Vec<Var> = flows.into_iter().map(Option::unwrap).collect();
    let occ_logits: Vec<Var> = occ_logits.into_iter().map(Option::unwrap).collect();
    let new_positions = tape.add(state.positions, flows[0]);

    // Occlusion state for frame t+1 from the level-1 head.
    let logits_l1 = tape.value(occ_logits[0]);
    let occluded: Vec<bool> = (0..nq)
        .map(|qi| occluded_from_logit(logits_l1.get(qi, 0)))
        .collect();

    // Shift-register motion buffer: drop the oldest, append the new motion.
    let m = cfg.motion_history;
    let kept = tape.slice_cols(state.motion_buffer, 3, (m - 1) * 3);
    let buffer = tape.concat_cols(&[kept, flows[0]]);

    state.positions = new_positions;
    state.occluded = occluded;
    state.motion_buffer = buffer;
    attention.reverse();

    Ok(StepOutput {
        flows,
        occ_logits,
        new_positions,
        attention,
    })
}

/// How the tracker advances queries: the trained model, or a ground-truth
/// motion oracle (testing/diagnostics).
pub enum Stepper<'a> {
    Model(&'a Model),
    /// Uses the sequence's GT track motions; visibility copied from GT.
    GtOracle,
}

/// Track every query through the whole sequence: a forward pass from each
/// query's start to the last frame, and a backward pass over the reversed
/// frames down to frame 0, concatenated into one full-video trajectory.
pub fn track_sequence(
    stepper: &Stepper,
    seq: &SequenceRecord,
    queries: &[QuerySpec],
    selective: bool,
) -> Result<Vec<TrajectoryRecord>, TrackError> {
    let n_frames = seq.num_frames();
    if n_frames < 2 {
        return Err(TrackError::TooShort);
    }
    for q in queries {
        if q.start_frame >= n_frames {
            return Err(TrackError::StartOutOfRange(q.start_frame, n_frames));
        }
    }

    match stepper {
        Stepper::GtOracle => Ok(queries
            .iter()
            .map(|q| {
                let gt = seq
                    .gt_tracks
                    .iter()
                    .find(|t| t.query_id == q.id)
                    .expect("oracle needs a GT track per query");
                gt.clone()
            })
            .collect()),
        Stepper::Model(model) => track_with_model(model, seq, queries, selective),
    }
}

fn track_with_model(
    model: &Model,
    seq: &SequenceRecord,
    queries: &[QuerySpec],
    selective: bool,
) -> Result<Vec<TrajectoryRecord>, TrackError> {
    let nets = model.nets();
    let n_frames = seq.num_frames();

    // Group queries by start frame; each group runs an independent forward
    // and backward pass.
    let mut starts: Vec<usize> = queries.iter().map(|q| q.start_frame).collect();
    starts.sort_unstable();
    starts.dedup();

    let mut records: Vec<TrajectoryRecord> = queries
        .iter()
        .map(|q| TrajectoryRecord {
            query_id: q.id,
            start_frame: q.start_frame,
            positions: vec![Vector3::zeros(); n_frames],
            visible: vec![false; n_frames],
        })
        .collect();
    let by_id: std::collections::HashMap<u32, usize> = queries
        .iter()
        .enumerate()
        .map(|(i, q)| (q.id, i))
        .collect();

    // Full-decode pyramids can be shared across groups and directions.
    let mut cache: Vec<Option<std::rc::Rc<FramePyramid>>> = vec![None; n_frames];

    for &start in &starts {
        let group: Vec<QuerySpec> = queries
            .iter()
            .filter(|q| q.start_frame == start)
            .cloned()
            .collect();
        // Seed each record at the start frame: given position, visible.
        for q in &group {
            let r = &mut records[by_id[&q.id]];
            r.positions[start] = q.position;
            r.visible[start] = true;
        }
        // Forward: start .. last; backward: start .. 0 on reversed frames.
        let forward: Vec<usize> = (start..n_frames).collect();
        let backward: Vec<usize> = (0..=start).rev().collect();
        for order in [forward, backward] {
            if order.len() < 2 {
                continue;
            }
            run_direction(
                model, &nets, seq, &group, &order, selective, &mut cache, &mut records, &by_id,
            )?;
        }
    }
    Ok(records)
}

#[allow(clippy::too_many_arguments)]
fn run_direction(
    model: &Model,
    nets: &Nets,
    seq: &SequenceRecord,
    group: &[QuerySpec],
    order: &[usize],
    selective: bool,
    cache: &mut [Option<std::rc::Rc<FramePyramid>>],
    records: &mut [TrajectoryRecord],
    by_id: &std::collections::HashMap<u32, usize>,
) -> Result<(), TrackError> {
    let cfg = &model.config;
    // The appearance schedule runs in pass-local time: every query in the
    // group starts at the first frame of this pass.
    let local_group: Vec<QuerySpec> = group
        .iter()
        .map(|q| QuerySpec {
            id: q.id,
            start_frame: 0,
            position: q.position,
        })
        .collect();
    let mut state = TrackState::new(&local_group, cfg);
    // Selective masks need headroom for motion between mask construction and
    // the query's arrival in that frame.
    let margin = 0.15;

    let pyramid_at = |frame: usize,
                          focus: Option<&[Vector3<f64>]>,
                          cache: &mut [Option<std::rc::Rc<FramePyramid>>]|
     -> Result<std::rc::Rc<FramePyramid>, TrackError> {
        if selective {
            let fp = compute_frame_pyramid(
                model,
                nets,
                &seq.frames[frame],
                focus.map(|f| (f, margin)),
            )?;
            Ok(std::rc::Rc::new(fp))
        } else {
            if cache[frame].is_none() {
                let fp = compute_frame_pyramid(model, nets, &seq.frames[frame], None)?;
                cache[frame] = Some(std::rc::Rc::new(fp));
            }
            Ok(cache[frame].clone().unwrap())
        }
    };

    let mut prev = pyramid_at(order[0], Some(&state.positions.clone()), cache)?;
    for w in order.windows(2) {
        let (t, t1) = (w[0], w[1]);
        let next = pyramid_at(t1, Some(&state.positions.clone()), cache)?;

        let tape = Tape::new();
        let b = Binder::frozen(&tape, &model.params);
        let mut vstate = VarState::bind(&tape, &state);
        let ft = prev.bind(&tape);
        let ft1 = next.bind(&tape);
        // The step index is the position along this pass, counted from the
        // query's start; the schedule works in pass-local time.
        let local_frame = order
            .iter()
            .position(|&f| f == t)
            .expect("frame in order");
        track_step(
            &b,
            nets,
            cfg,
            &mut vstate,
            &ft,
            &prev.hierarchy,
            &ft1,
            &next.hierarchy,
            local_frame,
        )?;
        state = vstate.detach(&tape);
        for (qi, q) in group.iter().enumerate() {
            let r = &mut records[by_id[&q.id]];
            r.positions[t1] = state.positions[qi];
            r.visible[t1] = !state.occluded[qi];
        }
        prev = next;
    }
    Ok(())
}
