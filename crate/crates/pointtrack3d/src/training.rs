//! Two-stage training: scene-flow pretraining of the backbone and dense
//! path, then tracker training on autoregressive clip rollouts with the
//! backbone frozen. Checkpoints carry the optimizer state so a resumed run
//! reproduces the next step bit-exactly; per-step data sampling is a pure
//! function of `(seed, step)`, so resume needs no RNG state.

use crate::autodiff::{Tape, Tensor, Var};
use crate::backbone::DecodeMask;
use crate::fusion::FusionError;
use crate::geometry::{PointCloudFrame, PointHierarchy};
use crate::losses::{
    self, occlusion_bce, sceneflow_loss, sceneflow_loss_levels, smoothness_loss, track_loss,
    track_loss_levels, LossComponents, LossWeights, Stage,
};
use crate::model::{scene_flow_forward, Model, ModelConfig, Nets};
use crate::nn::{cosine_lr, Adam, Binder, ParamStore};
use crate::synthdata::{augment, simulate_sceneflow_pair, AugmentFlags, SequenceRecord, TrainingSample};
use crate::tracker::{track_step, QuerySpec, TrackError, TrackState, VarState};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step}; diagnostics dumped to {dump}")]
    NonFinite { step: usize, dump: String },
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error(transparent)]
    Track(#[from] TrackError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Loss(#[from] losses::LossError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch_size: usize,
    /// Clip length in frames for tracker training.
    pub clip_frames: usize,
    /// Points kept per frame (random subset when the frame is larger).
    pub points_per_frame: usize,
    pub queries_per_clip: usize,
    pub lr: f64,
    /// Cosine decay floor as a fraction of `lr`.
    pub lr_floor_frac: f64,
    pub seed: u64,
    pub hflip: bool,
    pub scale_augment: bool,
    pub tflip: bool,
    pub freeze_backbone: bool,
    /// Fraction of stage-1 samples fabricated by rigidly warping one frame.
    pub simulated_pair_fraction: f64,
    pub sim_max_translation: f64,
    pub sim_max_rotation: f64,
    /// Occlusion BCE coefficient folded into the tracking-loss term.
    pub occlusion_bce_weight: f64,
    /// Supervise positions only on GT-visible frames.
    pub visible_only_supervision: bool,
    pub checkpoint_every: usize,
    /// Neighbors in the rigidity/isometry query graph.
    pub rigidity_neighbors: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Pretrain,
            steps: 1000,
            batch_size: 4,
            clip_frames: 8,
            points_per_frame: 2048,
            queries_per_clip: 32,
            lr: 1e-4,
            lr_floor_frac: 0.1,
            seed: 0,
            hflip: true,
            scale_augment: true,
            tflip: true,
            freeze_backbone: true,
            simulated_pair_fraction: 0.5,
            sim_max_translation: 0.04,
            sim_max_rotation: 0.05,
            occlusion_bce_weight: 0.1,
            visible_only_supervision: true,
            checkpoint_every: 0,
            rigidity_neighbors: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub components: LossComponents,
    pub occ_bce: f64,
    pub total: f64,
    pub lr: f64,
}

/// Training loop state: model, optimizer, step counter.
pub struct Trainer {
    pub model: Model,
    pub adam: Adam,
    pub step: usize,
    pub cfg: TrainConfig,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Self {
        Self {
            model,
            adam: Adam::new(),
            step: 0,
            cfg,
        }
    }

    /// Serialize model + optimizer state + step counter.
    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut combined = self.model.params.clone();
        for (name, t) in self.adam.m.iter() {
            combined.insert(&format!("opt.m.{name}"), t.clone());
        }
        for (name, t) in self.adam.v.iter() {
            combined.insert(&format!("opt.v.{name}"), t.clone());
        }
        let extra = serde_json::json!({
            "step": self.step,
            "adam_steps": self.adam.steps,
            "stage": self.cfg.stage,
            "train_config": self.cfg,
        });
        crate::checkpoint::save(path, &self.model.config, &combined, extra)
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let (config, combined, extra) = crate::checkpoint::load(path)?;
        let mut params = ParamStore::new();
        let mut adam = Adam::new();
        for (name, t) in combined.iter() {
            if let Some(rest) = name.strip_prefix("opt.m.") {
                adam.m.insert(rest.to_string(), t.clone());
            } else if let Some(rest) = name.strip_prefix("opt.v.") {
                adam.v.insert(rest.to_string(), t.clone());
            } else {
                params.insert(name, t.clone());
            }
        }
        adam.steps = extra["adam_steps"].as_u64().unwrap_or(0);
        let step = extra["step"].as_u64().unwrap_or(0) as usize;
        let cfg: TrainConfig = serde_json::from_value(extra["train_config"].clone())
            .unwrap_or_default();
        Ok(Self {
            model: Model { config, params },
            adam,
            step,
            cfg,
        })
    }

    fn lr_now(&self) -> f64 {
        cosine_lr(
            self.cfg.lr,
            self.step as u64,
            self.cfg.steps as u64,
            self.cfg.lr_floor_frac,
        )
    }

    fn frozen_prefixes(&self) -> Vec<String> {
        match self.cfg.stage {
            Stage::Pretrain => Vec::new(),
            Stage::Track => {
                if self.cfg.freeze_backbone {
                    vec!["backbone.".into()]
                } else {
                    Vec::new()
                }
            }
        }
    }
}

/// A two-frame scene-flow sample.
struct FlowPair {
    frame_t: PointCloudFrame,
    frame_t1: PointCloudFrame,
    flow: Vec<Vector3<f64>>,
}

/// Scene-flow training data: consecutive frames of generated sequences plus
/// simulated rigid pairs fabricated from single frames.
pub struct SceneFlowCorpus {
    pub sequences: Vec<SequenceRecord>,
}

impl SceneFlowCorpus {
    pub fn new(sequences: Vec<SequenceRecord>) -> Self {
        Self { sequences }
    }

    fn draw(&self, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> FlowPair {
        let seq = &self.sequences[rng.gen_range(0..self.sequences.len())];
        let simulated = rng.gen_bool(cfg.simulated_pair_fraction.clamp(0.0, 1.0));
        if simulated || seq.num_frames() < 2 {
            let t = rng.gen_range(0..seq.num_frames());
            let (a, b, flow) = simulate_sceneflow_pair(
                &seq.frames[t],
                cfg.sim_max_translation,
                cfg.sim_max_rotation,
                rng.gen(),
            );
            FlowPair {
                frame_t: a,
                frame_t1: b,
                flow,
            }
        } else {
            let t = rng.gen_range(0..seq.num_frames() - 1);
            FlowPair {
                frame_t: seq.frames[t].clone(),
                frame_t1: seq.frames[t + 1].clone(),
                flow: seq.gt_flow[t].clone(),
            }
        }
    }
}

fn subsample_pair(pair: &FlowPair, max_points: usize, rng: &mut ChaCha8Rng) -> FlowPair {
    let pick = |n: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        if n <= max_points {
            return (0..n).collect();
        }
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..max_points {
            let j = rng.gen_range(i..n);
            idx.swap(i, j);
        }
        idx.truncate(max_points);
        idx.sort_unstable();
        idx
    };
    let ia = pick(pair.frame_t.len(), rng);
    let ib = pick(pair.frame_t1.len(), rng);
    FlowPair {
        frame_t: PointCloudFrame::new(
            ia.iter().map(|&i| pair.frame_t.points[i]).collect(),
            ia.iter().map(|&i| pair.frame_t.features[i]).collect(),
            pair.frame_t.frame_index,
        )
        .unwrap(),
        frame_t1: PointCloudFrame::new(
            ib.iter().map(|&i| pair.frame_t1.points[i]).collect(),
            ib.iter().map(|&i| pair.frame_t1.features[i]).collect(),
            pair.frame_t1.frame_index,
        )
        .unwrap(),
        flow: ia.iter().map(|&i| pair.flow[i]).collect(),
    }
}

fn augment_pair(pair: &mut FlowPair, cfg: &TrainConfig, rng: &mut ChaCha8Rng) {
    if cfg.hflip && rng.gen_bool(0.5) {
        for p in &mut pair.frame_t.points {
            p.x = -p.x;
        }
        for p in &mut pair.frame_t1.points {
            p.x = -p.x;
        }
        for v in &mut pair.flow {
            v.x = -v.x;
        }
    }
    if cfg.scale_augment {
        let s = rng.gen_range(0.8..1.2);
        for p in &mut pair.frame_t.points {
            *p *= s;
        }
        for p in &mut pair.frame_t1.points {
            *p *= s;
        }
        for v in &mut pair.flow {
            *v *= s;
        }
    }
}

/// Average GT flow up the pyramid: each coarser point inherits the mean flow
/// of its children.
pub fn downsample_flow_levels(
    hierarchy: &PointHierarchy,
    flow_l0: &[Vector3<f64>],
) -> Vec<Tensor> {
    let mut levels = Vec::with_capacity(hierarchy.num_levels());
    let mut current: Vec<Vector3<f64>> = flow_l0.to_vec();
    levels.push(Tensor::from_points(&current));
    for l in 0..hierarchy.num_levels() - 1 {
        let next_len = hierarchy.levels[l + 1].points.len();
        let mut sums = vec![Vector3::<f64>::zeros(); next_len];
        let mut counts = vec![0usize; next_len];
        for (i, &parent) in hierarchy.levels[l].parents.iter().enumerate() {
            sums[parent] += current[i];
            counts[parent] += 1;
        }
        current = sums
            .into_iter()
            .zip(counts)
            .map(|(s, c)| s / c.max(1) as f64)
            .collect();
        levels.push(Tensor::from_points(&current));
    }
    levels
}

/// One pretraining step: forward the dense path on a batch of two-frame
/// pairs, backprop the pretrain losses, take an Adam step.
impl Trainer {
    pub fn step_sceneflow(&mut self, corpus: &SceneFlowCorpus) -> Result<StepStats, TrainError> {
        if corpus.sequences.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        assert_eq!(self.cfg.stage, Stage::Pretrain, "wrong stage for step_sceneflow");
        let weights = LossWeights::pretrain();
        let nets = self.model.nets();
        let cfg_model = self.model.config.clone();
        let lr = self.lr_now();

        let mut grad_acc: std::collections::BTreeMap<String, Tensor> = Default::default();
        let mut comp_acc = LossComponents::default();
        let mut total_acc = 0.0;
        for bi in 0..self.cfg.batch_size {
            let mut rng = ChaCha8Rng::seed_from_u64(
                self.cfg.seed ^ (self.step as u64).wrapping_mul(0x9e37_79b9) ^ (bi as u64) << 48,
            );
            let mut pair = corpus.draw(&self.cfg, &mut rng);
            pair = subsample_pair(&pair, self.cfg.points_per_frame, &mut rng);
            augment_pair(&mut pair, &self.cfg, &mut rng);

            let tape = Tape::new();
            let binder = Binder::new(&tape, &self.model.params);
            let (sf, track) =
                sceneflow_pair_losses(&tape, &binder, &nets, &cfg_model, &pair, &weights)?;
            let sf_w = tape.scale(sf, weights.lambda_sf);
            let track_w = tape.scale(track, weights.lambda_track);
            let loss = tape.add(sf_w, track_w);
            let loss_val = tape.value(loss).item();
            if !loss_val.is_finite() {
                return Err(self.dump_diagnostics(loss_val));
            }
            comp_acc.sf += tape.value(sf).item() / self.cfg.batch_size as f64;
            comp_acc.track += tape.value(track).item() / self.cfg.batch_size as f64;
            total_acc += loss_val / self.cfg.batch_size as f64;

            let mut grads = tape.backward(loss);
            for (name, g) in binder.parameter_grads(&mut grads) {
                let slot = grad_acc
                    .entry(name)
                    .or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
                for (a, b) in slot.data_mut().iter_mut().zip(g.data()) {
                    *a += b / self.cfg.batch_size as f64;
                }
            }
        }
        self.adam.step(&mut self.model.params, &grad_acc, lr);
        self.step += 1;
        Ok(StepStats {
            step: self.step,
            components: comp_acc,
            occ_bce: 0.0,
            total: total_acc,
            lr,
        })
    }

    pub fn step_tracker(&mut self, corpus: &[SequenceRecord]) -> Result<StepStats, TrainError> {
        if corpus.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        assert_eq!(self.cfg.stage, Stage::Track, "wrong stage for step_tracker");
        let weights = LossWeights::track();
        let nets = self.model.nets();
        let cfg_model = self.model.config.clone();
        let lr = self.lr_now();
        let frozen = self.frozen_prefixes();

        let mut grad_acc: std::collections::BTreeMap<String, Tensor> = Default::default();
        let mut comp_acc = LossComponents::default();
        let mut occ_acc = 0.0;
        let mut total_acc = 0.0;
        for bi in 0..self.cfg.batch_size {
            let mut rng = ChaCha8Rng::seed_from_u64(
                self.cfg.seed ^ (self.step as u64).wrapping_mul(0x51_7cc1) ^ (bi as u64) << 48,
            );
            let sample = draw_clip(corpus, &self.cfg, &mut rng);
            let queries = pick_queries(&sample, self.cfg.queries_per_clip, &mut rng);
            if queries.is_empty() {
                continue;
            }

            let tape = Tape::new();
            let binder = Binder::with_frozen_prefixes(&tape, &self.model.params, frozen.clone());
            let out = rollout_losses(
                &tape,
                &binder,
                &nets,
                &cfg_model,
                &sample,
                &queries,
                &self.cfg,
                &weights,
            )?;
            let loss_val = tape.value(out.total).item();
            if !loss_val.is_finite() {
                return Err(self.dump_diagnostics(loss_val));
            }
            let inv = 1.0 / self.cfg.batch_size as f64;
            comp_acc.sf += out.components.sf * inv;
            comp_acc.track += out.components.track * inv;
            comp_acc.smooth += out.components.smooth * inv;
            comp_acc.rigid += out.components.rigid * inv;
            comp_acc.iso += out.components.iso * inv;
            occ_acc += out.occ_bce * inv;
            total_acc += loss_val * inv;

            let mut grads = tape.backward(out.total);
            for (name, g) in binder.parameter_grads(&mut grads) {
                let slot = grad_acc
                    .entry(name)
                    .or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
                for (a, b) in slot.data_mut().iter_mut().zip(g.data()) {
                    *a += b * inv;
                }
            }
        }
        self.adam.step(&mut self.model.params, &grad_acc, lr);
        self.step += 1;
        Ok(StepStats {
            step: self.step,
            components: comp_acc,
            occ_bce: occ_acc,
            total: total_acc,
            lr,
        })
    }

    fn dump_diagnostics(&self, loss: f64) -> TrainError {
        let dump = format!("train_diagnostics_step{}.json", self.step);
        let body = serde_json::json!({
            "step": self.step,
            "loss": format!("{loss}"),
            "param_scalars": self.model.params.scalar_count(),
            "config": self.cfg,
        });
        let _ = fs::write(&dump, serde_json::to_vec_pretty(&body).unwrap());
        TrainError::NonFinite {
            step: self.step,
            dump,
        }
    }
}

fn sceneflow_pair_losses(
    tape: &Tape,
    binder: &Binder,
    nets: &Nets,
    cfg: &ModelConfig,
    pair: &FlowPair,
    weights: &LossWeights,
) -> Result<(Var, Var), TrainError> {
    let (ht, enc_t) = crate::backbone::encode_frame(binder, &nets.backbone, &pair.frame_t, cfg)
        .map_err(TrackError::from)?;
    let (ht1, enc_t1) = crate::backbone::encode_frame(binder, &nets.backbone, &pair.frame_t1, cfg)
        .map_err(TrackError::from)?;
    let full_t = DecodeMask::full(ht.num_levels());
    let full_t1 = DecodeMask::full(ht1.num_levels());
    let dec_t = nets
        .backbone
        .decode(binder, &ht, &enc_t, &full_t)
        .map_err(TrackError::from)?;
    let dec_t1 = nets
        .backbone
        .decode(binder, &ht1, &enc_t1, &full_t1)
        .map_err(TrackError::from)?;
    let flows = scene_flow_forward(binder, nets, cfg, &ht, &dec_t, &ht1, &dec_t1);

    let gt_levels = downsample_flow_levels(&ht, &pair.flow);
    let pairs: Vec<(Var, &Tensor)> = flows.iter().copied().zip(gt_levels.iter()).collect();
    let sf = sceneflow_loss_levels(tape, &pairs, 1, weights.gamma)?;

    // Position form of the same supervision: p + flow vs p + gt_flow.
    let mut track_pairs = Vec::with_capacity(flows.len());
    let mut gt_pos_levels = Vec::with_capacity(flows.len());
    for (l, gt) in gt_levels.iter().enumerate() {
        let pts = Tensor::from_points(&ht.levels[l].points);
        let mut gt_pos = pts.clone();
        for i in 0..gt.rows() {
            for c in 0..3 {
                gt_pos.set(i, c, pts.get(i, c) + gt.get(i, c));
            }
        }
        gt_pos_levels.push(gt_pos);
        let pts_var = tape.constant(pts);
        track_pairs.push(tape.add(pts_var, flows[l]));
    }
    let entries: Vec<(Var, &Tensor)> = track_pairs
        .iter()
        .copied()
        .zip(gt_pos_levels.iter())
        .collect();
    let track = track_loss_levels(tape, &entries, 1, weights.alpha)?;
    Ok((sf, track))
}

fn draw_clip(corpus: &[SequenceRecord], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> TrainingSample {
    let seq = &corpus[rng.gen_range(0..corpus.len())];
    let len = cfg.clip_frames.min(seq.num_frames()).max(2);
    let max_start = seq.num_frames() - len;
    let start = if max_start == 0 {
        0
    } else {
        rng.gen_range(0..=max_start)
    };
    let sample = TrainingSample::from_sequence(seq).window(start, len);
    let flags = AugmentFlags {
        hflip: cfg.hflip && rng.gen_bool(0.5),
        scale: if cfg.scale_augment {
            Some(rng.gen_range(0.8..1.2))
        } else {
            None
        },
        tflip: cfg.tflip && sample.point_ids.is_some() && rng.gen_bool(0.5),
    };
    augment(&sample, &flags)
}

fn pick_queries(sample: &TrainingSample, count: usize, rng: &mut ChaCha8Rng) -> Vec<QuerySpec> {
    let mut candidates: Vec<&crate::tracker::TrajectoryRecord> = sample
        .tracks
        .iter()
        .filter(|t| t.visible[0])
        .collect();
    // Shuffle, keep `count`.
    for i in (1..candidates.len()).rev() {
        candidates.swap(i, rng.gen_range(0..=i));
    }
    candidates
        .into_iter()
        .take(count)
        .enumerate()
        .map(|(i, t)| QuerySpec {
            id: i as u32,
            start_frame: 0,
            position: t.positions[0],
        })
        .collect()
}

struct RolloutLosses {
    total: Var,
    components: LossComponents,
    occ_bce: f64,
}

/// Full autoregressive rollout over a clip with gradients through every
/// step; returns the weighted loss on the rollout tape.
#[allow(clippy::too_many_arguments)]
fn rollout_losses(
    tape: &Tape,
    binder: &Binder,
    nets: &Nets,
    cfg: &ModelConfig,
    sample: &TrainingSample,
    queries: &[QuerySpec],
    tcfg: &TrainConfig,
    weights: &LossWeights,
) -> Result<RolloutLosses, TrainError> {
    let frames = sample.frames.len();
    let steps = frames - 1;
    let nq = queries.len();

    // Which GT track backs each picked query (ids were re-assigned by
    // pick_queries in order).
    let gt_tracks: Vec<&crate::tracker::TrajectoryRecord> = {
        let visible_at0: Vec<&crate::tracker::TrajectoryRecord> =
            sample.tracks.iter().filter(|t| t.visible[0]).collect();
        // pick_queries shuffled deterministically from the same rng stream;
        // instead of re-deriving the shuffle, match by start position.
        queries
            .iter()
            .map(|q| {
                visible_at0
                    .iter()
                    .find(|t| (t.positions[0] - q.position).norm() < 1e-12)
                    .copied()
                    .expect("query taken from sample tracks")
            })
            .collect()
    };

    // Per-frame pyramids on the rollout tape (constants under a frozen
    // backbone; gradients flow through query-side ops only).
    let mut pyramids = Vec::with_capacity(frames);
    for f in &sample.frames {
        let (h, enc) = crate::backbone::encode_frame(binder, &nets.backbone, f, cfg)
            .map_err(TrackError::from)?;
        let mask = DecodeMask::full(h.num_levels());
        let dec = nets
            .backbone
            .decode(binder, &h, &enc, &mask)
            .map_err(TrackError::from)?;
        pyramids.push((h, dec));
    }

    let mut state = VarState::bind(tape, &TrackState::new(queries, cfg));
    let mut positions_per_level: Vec<Vec<Var>> = vec![Vec::with_capacity(steps); cfg.levels];
    let mut motions_per_level: Vec<Vec<Var>> = vec![Vec::with_capacity(steps); cfg.levels];
    let mut frame_positions_l1: Vec<Var> = Vec::with_capacity(steps);
    let mut occ_logit_rows: Vec<Vec<Var>> = vec![Vec::with_capacity(steps); cfg.levels];

    for t in 0..steps {
        let pos_before = state.positions;
        let (ht, dec_t) = &pyramids[t];
        let (ht1, dec_t1) = &pyramids[t + 1];
        let out = track_step(binder, nets, cfg, &mut state, dec_t, ht, dec_t1, ht1, t)?;
        for l in 0..cfg.levels {
            let pos_l = tape.add(pos_before, out.flows[l]);
            positions_per_level[l].push(pos_l);
            motions_per_level[l].push(out.flows[l]);
            occ_logit_rows[l].push(out.occ_logits[l]);
        }
        frame_positions_l1.push(out.new_positions);
    }

    // Assemble GT targets for frames 1..frames.
    let mut gt_pos = Tensor::zeros(steps * nq, 3);
    let mut vis = vec![false; steps * nq];
    let mut gt_motion = Tensor::zeros(steps * nq, 3);
    let mut occ_labels = Vec::with_capacity(steps * nq);
    for t in 0..steps {
        for (qi, gt) in gt_tracks.iter().enumerate() {
            let r = t * nq + qi;
            let p = gt.positions[t + 1];
            gt_pos.set(r, 0, p.x);
            gt_pos.set(r, 1, p.y);
            gt_pos.set(r, 2, p.z);
            let m = gt.positions[t + 1] - gt.positions[t];
            gt_motion.set(r, 0, m.x);
            gt_motion.set(r, 1, m.y);
            gt_motion.set(r, 2, m.z);
            vis[r] = gt.visible[t + 1];
            occ_labels.push(!gt.visible[t + 1]);
        }
    }

    let stack = |per_step: &[Var]| tape.concat_rows(per_step);
    let preds: Vec<Var> = positions_per_level.iter().map(|v| stack(v)).collect();
    let motions: Vec<Var> = motions_per_level.iter().map(|v| stack(v)).collect();

    let mask = tcfg.visible_only_supervision.then_some(vis.as_slice());
    let track = track_loss(tape, &preds, &gt_pos, mask, steps, nq, weights.alpha)?;
    let sf = sceneflow_loss(tape, &motions, &gt_motion, steps, weights.gamma)?;
    let smooth = smoothness_loss(tape, &motions, steps, nq)?;

    let start_positions = Tensor::from_points(&queries.iter().map(|q| q.position).collect::<Vec<_>>());
    let graph = losses::build_query_graph(
        &queries.iter().map(|q| q.position).collect::<Vec<_>>(),
        tcfg.rigidity_neighbors,
    );
    let (rigid, iso) = losses::rigidity_iso_losses(tape, &frame_positions_l1, &start_positions, &graph)?;

    let mut occ = None;
    for per_level in &occ_logit_rows {
        let logits = stack(per_level);
        let bce = occlusion_bce(tape, logits, &occ_labels);
        occ = Some(match occ {
            Some(o) => tape.add(o, bce),
            None => bce,
        });
    }
    let occ = tape.scale(occ.unwrap(), 1.0 / cfg.levels as f64);

    let components = LossComponents {
        sf: tape.value(sf).item(),
        track: tape.value(track).item(),
        smooth: tape.value(smooth).item(),
        rigid: tape.value(rigid).item(),
        iso: tape.value(iso).item(),
        projection: 0.0,
    };
    let occ_val = tape.value(occ).item();

    // λ2 multiplies the tracking term with the occlusion BCE folded in.
    let occ_scaled = tape.scale(occ, tcfg.occlusion_bce_weight);
    let track_plus = tape.add(track, occ_scaled);
    let mut total = tape.scale(sf, weights.lambda_sf);
    for (v, w) in [
        (track_plus, weights.lambda_track),
        (smooth, weights.lambda_smooth),
        (rigid, weights.lambda_rigid),
        (iso, weights.lambda_iso),
    ] {
        let scaled = tape.scale(v, w);
        total = tape.add(total, scaled);
    }
    Ok(RolloutLosses {
        total,
        components,
        occ_bce: occ_val,
    })
}

/// Run stage-1 pretraining to `cfg.steps`, writing the loss curve and
/// periodic checkpoints under `out_dir`.
pub fn pretrain_sceneflow(
    model: Model,
    corpus: &SceneFlowCorpus,
    cfg: TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(Trainer, Vec<StepStats>), TrainError> {
    let mut trainer = Trainer::new(model, cfg);
    run_loop(&mut trainer, out_dir, |t| t.step_sceneflow(corpus)).map(|stats| (trainer, stats))
}

/// Run stage-2 tracker training to `cfg.steps`.
pub fn train_tracker(
    model: Model,
    corpus: &[SequenceRecord],
    cfg: TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(Trainer, Vec<StepStats>), TrainError> {
    let mut trainer = Trainer::new(model, cfg);
    run_loop(&mut trainer, out_dir, |t| t.step_tracker(corpus)).map(|stats| (trainer, stats))
}

fn run_loop(
    trainer: &mut Trainer,
    out_dir: Option<&Path>,
    mut step_fn: impl FnMut(&mut Trainer) -> Result<StepStats, TrainError>,
) -> Result<Vec<StepStats>, TrainError> {
    let mut curve: Option<fs::File> = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let mut f = fs::File::create(dir.join("loss_curve.csv"))?;
            writeln!(f, "step,sf,track,smooth,rigid,iso,occ_bce,total,lr")?;
            Some(f)
        }
        None => None,
    };
    let mut stats = Vec::with_capacity(trainer.cfg.steps);
    while trainer.step < trainer.cfg.steps {
        let s = step_fn(trainer)?;
        if let Some(f) = curve.as_mut() {
            writeln!(
                f,
                "{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
                s.step,
                s.components.sf,
                s.components.track,
                s.components.smooth,
                s.components.rigid,
                s.components.iso,
                s.occ_bce,
                s.total,
                s.lr
            )?;
        }
        if trainer.cfg.checkpoint_every > 0
            && trainer.step % trainer.cfg.checkpoint_every == 0
        {
            if let Some(dir) = out_dir {
                trainer.save(&dir.join(format!("step{:06}.ckpt", trainer.step)))?;
            }
        }
        stats.push(s);
    }
    if let Some(dir) = out_dir {
        trainer.save(&dir.join("final.ckpt"))?;
    }
    Ok(stats)
}

/// Dense scene-flow inference on a frame pair; returns level-0 flow rows.
pub fn infer_scene_flow(
    model: &Model,
    frame_t: &PointCloudFrame,
    frame_t1: &PointCloudFrame,
) -> Result<(PointHierarchy, Tensor), TrainError> {
    let nets = model.nets();
    let cfg = &model.config;
    let tape = Tape::new();
    let binder = Binder::frozen(&tape, &model.params);
    let (ht, enc_t) = crate::backbone::encode_frame(&binder, &nets.backbone, frame_t, cfg)
        .map_err(TrackError::from)?;
    let (ht1, enc_t1) = crate::backbone::encode_frame(&binder, &nets.backbone, frame_t1, cfg)
        .map_err(TrackError::from)?;
    let dec_t = nets
        .backbone
        .decode(&binder, &ht, &enc_t, &DecodeMask::full(ht.num_levels()))
        .map_err(TrackError::from)?;
    let dec_t1 = nets
        .backbone
        .decode(&binder, &ht1, &enc_t1, &DecodeMask::full(ht1.num_levels()))
        .map_err(TrackError::from)?;
    let flows = scene_flow_forward(&binder, &nets, cfg, &ht, &dec_t, &ht1, &dec_t1);
    let finest = tape.value(flows[0]);
    Ok((ht, finest))
}
