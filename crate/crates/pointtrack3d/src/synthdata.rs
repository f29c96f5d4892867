//! Synthetic dynamic scenes with ground truth: rigid primitives under
//! scripted motion, sampled into per-frame point clouds, rendered into depth
//! maps by point z-buffering, with per-query trajectories, visibility bits
//! and per-frame scene flow.
//!
//! Scenes are deliberately simple (boxes, spheres, planar backgrounds with
//! Poisson-disk surface sampling) — enough to script occlusion events and
//! desk-scale motion patterns without an asset pipeline.

use crate::geometry::{project, CameraModel, DepthMap, PointCloudFrame};
use crate::tracker::{QuerySpec, TrajectoryRecord};
use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("object {0} has zero surface points")]
    DegenerateObject(usize),
    #[error("scene needs at least one object and one frame")]
    EmptyScene,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Box { half_extents: [f64; 3] },
    Sphere { radius: f64 },
    Plane { half_extents: [f64; 2] },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ColorSpec {
    Uniform { rgb: [f64; 3] },
    /// Linear blend along a local axis (0 = x, 1 = y, 2 = z).
    Gradient { axis: usize, from: [f64; 3], to: [f64; 3] },
    Checker { scale: f64, a: [f64; 3], b: [f64; 3] },
}

impl ColorSpec {
    fn eval(&self, local: &Vector3<f64>, extent: f64) -> [f64; 3] {
        match self {
            ColorSpec::Uniform { rgb } => *rgb,
            ColorSpec::Gradient { axis, from, to } => {
                let t = ((local[*axis] / extent.max(1e-9)) * 0.5 + 0.5).clamp(0.0, 1.0);
                [
                    from[0] + (to[0] - from[0]) * t,
                    from[1] + (to[1] - from[1]) * t,
                    from[2] + (to[2] - from[2]) * t,
                ]
            }
            ColorSpec::Checker { scale, a, b } => {
                let s = scale.max(1e-9);
                let q = (local.x / s).floor() + (local.y / s).floor() + (local.z / s).floor();
                if (q as i64).rem_euclid(2) == 0 {
                    *a
                } else {
                    *b
                }
            }
        }
    }
}

/// Time-parameterized rigid motion: linear drift plus an optional sinusoidal
/// sway and a spin about the object center.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RigidMotion {
    /// Meters per frame.
    pub linear_velocity: [f64; 3],
    pub sine_axis: [f64; 3],
    /// Meters.
    pub sine_amplitude: f64,
    /// Frames per full period.
    pub sine_period: f64,
    pub spin_axis: [f64; 3],
    /// Radians per frame, about the object center.
    pub spin_rate: f64,
}

impl Default for RigidMotion {
    fn default() -> Self {
        Self {
            linear_velocity: [0.0; 3],
            sine_axis: [0.0, 0.0, 1.0],
            sine_amplitude: 0.0,
            sine_period: 16.0,
            spin_axis: [0.0, 0.0, 1.0],
            spin_rate: 0.0,
        }
    }
}

impl RigidMotion {
    /// Pose at frame `t`: rotation about the object center plus translation.
    fn at(&self, t: f64) -> (Matrix3<f64>, Vector3<f64>) {
        let v = Vector3::from(self.linear_velocity);
        let sway = if self.sine_amplitude != 0.0 {
            Vector3::from(self.sine_axis)
                * (self.sine_amplitude * (2.0 * std::f64::consts::PI * t / self.sine_period).sin())
        } else {
            Vector3::zeros()
        };
        let translation = v * t + sway;
        let rotation = if self.spin_rate != 0.0 {
            let axis = Unit::new_normalize(Vector3::from(self.spin_axis));
            Rotation3::from_axis_angle(&axis, self.spin_rate * t).into_inner()
        } else {
            Matrix3::identity()
        };
        (rotation, translation)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ObjectSpec {
    pub primitive: Primitive,
    pub color: ColorSpec,
    /// Object center at frame 0.
    pub center: [f64; 3],
    /// Surface sample budget.
    pub points: usize,
    #[serde(default)]
    pub motion: RigidMotion,
    /// Queries sampled on this object's surface.
    #[serde(default)]
    pub queries: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct CameraSpec {
    pub eye: [f64; 3],
    pub target: [f64; 3],
    pub up: [f64; 3],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Orbit of the eye about the world z-axis through the target,
    /// degrees per frame.
    pub orbit_deg_per_frame: f64,
}

impl Default for CameraSpec {
    fn default() -> Self {
        Self {
            eye: [0.0, 0.0, 0.0],
            target: [0.0, 0.0, 1.5],
            up: [0.0, -1.0, 0.0],
            fx: 200.0,
            fy: 200.0,
            cx: 128.0,
            cy: 128.0,
            width: 256,
            height: 256,
            orbit_deg_per_frame: 0.0,
        }
    }
}

impl CameraSpec {
    pub fn camera_at(&self, t: usize) -> CameraModel {
        let target = Vector3::from(self.target);
        let mut eye = Vector3::from(self.eye);
        if self.orbit_deg_per_frame != 0.0 {
            let angle = self.orbit_deg_per_frame.to_radians() * t as f64;
            let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), angle);
            eye = target + rot * (eye - target);
        }
        if (eye - target).norm() < 1e-9 {
            // Degenerate spec; fall back to identity pose.
            return CameraModel::identity(
                self.fx,
                self.fy,
                self.cx,
                self.cy,
                self.width,
                self.height,
            );
        }
        CameraModel::look_at(
            eye,
            target,
            Vector3::from(self.up),
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            self.width,
            self.height,
        )
    }
}

/// Whether per-frame clouds carry every material point or only the points
/// visible from the camera (the depth-sensor regime).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OccluderPolicy {
    /// Frames contain all material points.
    KeepAll,
    /// Frames contain only camera-visible points.
    #[default]
    VisibleOnly,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SceneScript {
    pub objects: Vec<ObjectSpec>,
    pub camera: CameraSpec,
    /// Total frame count (T + 1).
    pub frames: usize,
    pub policy: OccluderPolicy,
    /// A point is occluded when another point projects within this many
    /// pixels and is at least `occlusion_depth_margin` meters nearer.
    pub occlusion_pixel_radius: f64,
    pub occlusion_depth_margin: f64,
    /// Depth-map splat half-width in pixels (1 gives 3×3 splats).
    pub splat_radius: i64,
    /// Queries start at a random frame in `[0, start_spread]`
    /// (0 keeps every query anchored at frame 0).
    pub query_start_spread: usize,
}

impl Default for SceneScript {
    fn default() -> Self {
        Self {
            objects: Vec::new(),
            camera: CameraSpec::default(),
            frames: 24,
            policy: OccluderPolicy::default(),
            occlusion_pixel_radius: 1.0,
            occlusion_depth_margin: 0.02,
            splat_radius: 1,
            query_start_spread: 0,
        }
    }
}

/// A generated sequence with full ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceRecord {
    pub frames: Vec<PointCloudFrame>,
    pub depth_maps: Vec<DepthMap>,
    pub cameras: Vec<CameraModel>,
    pub queries: Vec<QuerySpec>,
    pub gt_tracks: Vec<TrajectoryRecord>,
    /// Per frame `t < T`: the 3D motion of each frame-`t` point to `t + 1`,
    /// aligned with that frame's point order.
    pub gt_flow: Vec<Vec<Vector3<f64>>>,
    /// Material point ids aligned with each frame's points.
    pub point_ids: Vec<Vec<u32>>,
}

impl SequenceRecord {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }
}

/// Poisson-disk-ish surface sampling by dart throwing: candidates are
/// uniform on the surface, rejected when closer than the target radius to
/// an accepted sample; any shortfall is filled uniformly so the budget is
/// met exactly.
fn sample_surface(
    primitive: &Primitive,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vector3<f64>> {
    let area = match primitive {
        Primitive::Box { half_extents } => {
            let [a, b, c] = *half_extents;
            8.0 * (a * b + b * c + a * c)
        }
        Primitive::Sphere { radius } => 4.0 * std::f64::consts::PI * radius * radius,
        Primitive::Plane { half_extents } => 4.0 * half_extents[0] * half_extents[1],
    };
    let r_min = 0.7 * (area / count.max(1) as f64).sqrt();
    let cell = r_min / 3f64.sqrt().max(1e-9);
    let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    let mut accepted: Vec<Vector3<f64>> = Vec::with_capacity(count);
    let key = |p: &Vector3<f64>| {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    };
    let mut attempts = 0usize;
    let max_attempts = count.saturating_mul(40).max(1000);
    while accepted.len() < count && attempts < max_attempts {
        attempts += 1;
        let p = uniform_on_surface(primitive, rng);
        let (kx, ky, kz) = key(&p);
        let mut ok = true;
        'scan: for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(bucket) = grid.get(&(kx + dx, ky + dy, kz + dz)) {
                        for &i in bucket {
                            if (accepted[i] - p).norm() < r_min {
                                ok = false;
                                break 'scan;
                            }
                        }
                    }
                }
            }
        }
        if ok {
            grid.entry((kx, ky, kz)).or_default().push(accepted.len());
            accepted.push(p);
        }
    }
    while accepted.len() < count {
        accepted.push(uniform_on_surface(primitive, rng));
    }
    accepted
}

fn uniform_on_surface(primitive: &Primitive, rng: &mut ChaCha8Rng) -> Vector3<f64> {
    match primitive {
        Primitive::Plane { half_extents } => Vector3::new(
            rng.gen_range(-half_extents[0]..half_extents[0]),
            rng.gen_range(-half_extents[1]..half_extents[1]),
            0.0,
        ),
        Primitive::Sphere { radius } => {
            // Box-Muller pairs give an isotropic direction.
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let u3: f64 = rng.gen_range(1e-12..1.0);
            let u4: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let g = Vector3::new(
                (-2.0 * u1.ln()).sqrt() * u2.cos(),
                (-2.0 * u1.ln()).sqrt() * u2.sin(),
                (-2.0 * u3.ln()).sqrt() * u4.cos(),
            );
            g.normalize() * *radius
        }
        Primitive::Box { half_extents } => {
            let [a, b, c] = *half_extents;
            let areas = [b * c, b * c, a * c, a * c, a * b, a * b];
            let total: f64 = areas.iter().sum();
            let mut pick = rng.gen_range(0.0..total);
            let mut face = 0;
            for (i, &ar) in areas.iter().enumerate() {
                if pick < ar {
                    face = i;
                    break;
                }
                pick -= ar;
            }
            let (u, v): (f64, f64) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            match face {
                0 => Vector3::new(a, u * b, v * c),
                1 => Vector3::new(-a, u * b, v * c),
                2 => Vector3::new(u * a, b, v * c),
                3 => Vector3::new(u * a, -b, v * c),
                4 => Vector3::new(u * a, v * b, c),
                _ => Vector3::new(u * a, v * b, -c),
            }
        }
    }
}

struct MaterialPoint {
    object: usize,
    local: Vector3<f64>,
    color: [f64; 3],
}

/// Deterministic scene generation: sample surfaces, sweep the scripted rigid
/// motions over all frames, render depth by z-buffered splatting, derive
/// visibility from the point z-buffer rule, and record per-query tracks and
/// per-frame scene flow.
pub fn generate_sequence(script: &SceneScript, seed: u64) -> Result<SequenceRecord, SynthError> {
    if script.objects.is_empty() || script.frames < 2 {
        return Err(SynthError::EmptyScene);
    }
    for (i, obj) in script.objects.iter().enumerate() {
        if obj.points == 0 {
            return Err(SynthError::DegenerateObject(i));
        }
    }

    // Material points, fixed across the whole sequence.
    let mut material: Vec<MaterialPoint> = Vec::new();
    let mut query_ids: Vec<(u32, usize)> = Vec::new(); // (material id, start frame)
    for (oi, obj) in script.objects.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x5eed_0001u64.wrapping_add(oi as u64 * 7919)));
        let extent = match &obj.primitive {
            Primitive::Box { half_extents } => {
                half_extents[0].max(half_extents[1]).max(half_extents[2])
            }
            Primitive::Sphere { radius } => *radius,
            Primitive::Plane { half_extents } => half_extents[0].max(half_extents[1]),
        };
        let samples = sample_surface(&obj.primitive, obj.points, &mut rng);
        let base = material.len();
        for local in samples {
            material.push(MaterialPoint {
                object: oi,
                local,
                color: obj.color.eval(&local, extent),
            });
        }
        for qi in 0..obj.queries {
            let pick = base + rng.gen_range(0..obj.points);
            let start = if script.query_start_spread == 0 {
                0
            } else {
                rng.gen_range(0..=script.query_start_spread.min(script.frames - 1))
            };
            let _ = qi;
            query_ids.push((pick as u32, start));
        }
    }
    let n_material = material.len();

    // World positions per frame.
    let mut world: Vec<Vec<Vector3<f64>>> = Vec::with_capacity(script.frames);
    for t in 0..script.frames {
        let poses: Vec<(Matrix3<f64>, Vector3<f64>)> = script
            .objects
            .iter()
            .map(|o| o.motion.at(t as f64))
            .collect();
        let pts = material
            .iter()
            .map(|m| {
                let (rot, trans) = &poses[m.object];
                let center = Vector3::from(script.objects[m.object].center);
                center + rot * m.local + trans
            })
            .collect();
        world.push(pts);
    }

    // Cameras, visibility, depth maps.
    let cameras: Vec<CameraModel> = (0..script.frames).map(|t| script.camera.camera_at(t)).collect();
    let mut visible: Vec<Vec<bool>> = Vec::with_capacity(script.frames);
    let mut depth_maps = Vec::with_capacity(script.frames);
    for t in 0..script.frames {
        let (vis, depth) = render_frame(&world[t], &cameras[t], script);
        visible.push(vis);
        depth_maps.push(depth);
    }

    // Per-frame clouds under the occluder policy.
    let mut frames = Vec::with_capacity(script.frames);
    let mut point_ids: Vec<Vec<u32>> = Vec::with_capacity(script.frames);
    for t in 0..script.frames {
        let mut pts = Vec::new();
        let mut feats = Vec::new();
        let mut ids = Vec::new();
        for (i, m) in material.iter().enumerate() {
            if script.policy == OccluderPolicy::VisibleOnly && !visible[t][i] {
                continue;
            }
            pts.push(world[t][i]);
            feats.push(m.color);
            ids.push(i as u32);
        }
        point_ids.push(ids);
        frames.push(PointCloudFrame::new(pts, feats, t).expect("finite synthetic points"));
    }

    // Scene flow: material correspondence between consecutive frames.
    let mut gt_flow = Vec::with_capacity(script.frames - 1);
    for t in 0..script.frames - 1 {
        let flow = point_ids[t]
            .iter()
            .map(|&id| world[t + 1][id as usize] - world[t][id as usize])
            .collect();
        gt_flow.push(flow);
    }

    // Query tracks over all frames.
    let mut queries = Vec::new();
    let mut gt_tracks = Vec::new();
    for (qi, &(mid, start)) in query_ids.iter().enumerate() {
        let positions: Vec<Vector3<f64>> =
            (0..script.frames).map(|t| world[t][mid as usize]).collect();
        let vis: Vec<bool> = (0..script.frames).map(|t| visible[t][mid as usize]).collect();
        queries.push(QuerySpec {
            id: qi as u32,
            start_frame: start,
            position: positions[start],
        });
        gt_tracks.push(TrajectoryRecord {
            query_id: qi as u32,
            start_frame: start,
            positions,
            visible: vis,
        });
    }

    debug_assert_eq!(world[0].len(), n_material);
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

/// Project all material points, bucket them by pixel, apply the z-buffer
/// occlusion rule, and splat a depth map.
fn render_frame(
    world: &[Vector3<f64>],
    camera: &CameraModel,
    script: &SceneScript,
) -> (Vec<bool>, DepthMap) {
    let (w, h) = (camera.width, camera.height);
    let mut depth = vec![0.0f64; w * h];
    let mut buckets: HashMap<(i64, i64), Vec<(usize, f64)>> = HashMap::new();
    let mut projections: Vec<Option<([f64; 2], f64)>> = Vec::with_capacity(world.len());

    for (i, p) in world.iter().enumerate() {
        match project(p, camera) {
            Ok((uv, z)) if uv[0] >= 0.0 && uv[0] <= (w - 1) as f64 && uv[1] >= 0.0 && uv[1] <= (h - 1) as f64 => {
                let px = (uv[0].round() as i64, uv[1].round() as i64);
                buckets.entry(px).or_default().push((i, z));
                projections.push(Some((uv, z)));
                for dv in -script.splat_radius..=script.splat_radius {
                    for du in -script.splat_radius..=script.splat_radius {
                        let (u, v) = (px.0 + du, px.1 + dv);
                        if u < 0 || v < 0 || u >= w as i64 || v >= h as i64 {
                            continue;
                        }
                        let slot = &mut depth[v as usize * w + u as usize];
                        if *slot <= 0.0 || z < *slot {
                            *slot = z;
                        }
                    }
                }
            }
            _ => projections.push(None),
        }
    }

    let reach = script.occlusion_pixel_radius.ceil() as i64;
    let visible = (0..world.len())
        .map(|i| {
            let Some((uv, z)) = projections[i] else {
                return false;
            };
            let px = (uv[0].round() as i64, uv[1].round() as i64);
            for dv in -reach..=reach {
                for du in -reach..=reach {
                    if let Some(bucket) = buckets.get(&(px.0 + du, px.1 + dv)) {
                        for &(j, zj) in bucket {
                            if j == i {
                                continue;
                            }
                            let (uvj, _) = projections[j].unwrap();
                            let du_px = uvj[0] - uv[0];
                            let dv_px = uvj[1] - uv[1];
                            if du_px * du_px + dv_px * dv_px
                                <= script.occlusion_pixel_radius * script.occlusion_pixel_radius
                                && z - zj >= script.occlusion_depth_margin
                            {
                                return false;
                            }
                        }
                    }
                }
            }
            true
        })
        .collect();
    (visible, DepthMap::new(w, h, depth))
}

/// Rigidly transform a frame to fabricate a scene-flow training pair:
/// `p' = R p + t` with the rotation and translation drawn within the given
/// bounds. Returns the warped frame and the exact per-point flow.
pub fn simulate_sceneflow_pair(
    frame: &PointCloudFrame,
    max_translation: f64,
    max_rotation: f64,
    seed: u64,
) -> (PointCloudFrame, PointCloudFrame, Vec<Vector3<f64>>) {
    assert!(!frame.is_empty(), "empty frame");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let axis = Vector3::new(
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
    );
    let axis = if axis.norm() < 1e-9 {
        Vector3::z()
    } else {
        axis.normalize()
    };
    let angle = if max_rotation > 0.0 {
        rng.gen_range(-max_rotation..max_rotation)
    } else {
        0.0
    };
    let rot = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).into_inner();
    let t = if max_translation > 0.0 {
        Vector3::new(
            rng.gen_range(-max_translation..max_translation),
            rng.gen_range(-max_translation..max_translation),
            rng.gen_range(-max_translation..max_translation),
        )
    } else {
        Vector3::zeros()
    };
    let warped: Vec<Vector3<f64>> = frame.points.iter().map(|p| rot * p + t).collect();
    let flow: Vec<Vector3<f64>> = warped
        .iter()
        .zip(&frame.points)
        .map(|(b, a)| b - a)
        .collect();
    let warped_frame = PointCloudFrame::new(warped, frame.features.clone(), frame.frame_index + 1)
        .expect("finite warp");
    (frame.clone(), warped_frame, flow)
}

/// An in-memory training window: frames, per-frame flow, clipped GT tracks.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub frames: Vec<PointCloudFrame>,
    pub flows: Vec<Vec<Vector3<f64>>>,
    pub tracks: Vec<TrajectoryRecord>,
    pub cameras: Option<Vec<CameraModel>>,
    pub point_ids: Option<Vec<Vec<u32>>>,
}

impl TrainingSample {
    pub fn from_sequence(seq: &SequenceRecord) -> Self {
        Self {
            frames: seq.frames.clone(),
            flows: seq.gt_flow.clone(),
            tracks: seq.gt_tracks.clone(),
            cameras: Some(seq.cameras.clone()),
            point_ids: Some(seq.point_ids.clone()),
        }
    }

    /// Clip to `[start, start + len)`, re-indexing frames and track coverage.
    pub fn window(&self, start: usize, len: usize) -> Self {
        let end = (start + len).min(self.frames.len());
        let frames: Vec<PointCloudFrame> = self.frames[start..end]
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let mut f = f.clone();
                f.frame_index = i;
                f
            })
            .collect();
        let flows = self.flows[start..end - 1].to_vec();
        let tracks = self
            .tracks
            .iter()
            .map(|t| TrajectoryRecord {
                query_id: t.query_id,
                start_frame: t.start_frame.saturating_sub(start),
                positions: t.positions[start..end].to_vec(),
                visible: t.visible[start..end].to_vec(),
            })
            .collect();
        Self {
            frames,
            flows,
            tracks,
            cameras: self.cameras.as_ref().map(|c| c[start..end].to_vec()),
            point_ids: self.point_ids.as_ref().map(|p| p[start..end].to_vec()),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct AugmentFlags {
    pub hflip: bool,
    /// Explicit scale factor; the trainer draws it from `[0.8, 1.2]`.
    pub scale: Option<f64>,
    pub tflip: bool,
}

/// Apply the resolved augmentation to a sample. Horizontal flips negate x
/// everywhere and invalidate the cameras (a reflection is not a rigid
/// camera); scaling multiplies coordinates and flows and rescales camera
/// translations so projections stay consistent; temporal flips reverse the
/// frame order and negate flows via material correspondence.
pub fn augment(sample: &TrainingSample, flags: &AugmentFlags) -> TrainingSample {
    let mut out = sample.clone();
    if flags.hflip {
        for f in &mut out.frames {
            for p in &mut f.points {
                p.x = -p.x;
            }
        }
        for fl in &mut out.flows {
            for v in fl {
                v.x = -v.x;
            }
        }
        for t in &mut out.tracks {
            for p in &mut t.positions {
                p.x = -p.x;
            }
        }
        out.cameras = None;
    }
    if let Some(s) = flags.scale {
        for f in &mut out.frames {
            for p in &mut f.points {
                *p *= s;
            }
        }
        for fl in &mut out.flows {
            for v in fl {
                *v *= s;
            }
        }
        for t in &mut out.tracks {
            for p in &mut t.positions {
                *p *= s;
            }
        }
        if let Some(cams) = &mut out.cameras {
            for c in cams {
                c.translation *= s;
            }
        }
    }
    if flags.tflip {
        out = tflip(&out);
    }
    out
}

fn tflip(sample: &TrainingSample) -> TrainingSample {
    let ids = sample
        .point_ids
        .as_ref()
        .expect("temporal flip needs material point ids");
    let n = sample.frames.len();
    let last = n - 1;

    // id -> row maps per original frame.
    let maps: Vec<HashMap<u32, usize>> = ids
        .iter()
        .map(|frame_ids| {
            frame_ids
                .iter()
                .enumerate()
                .map(|(row, &id)| (id, row))
                .collect()
        })
        .collect();

    let mut frames = Vec::with_capacity(n);
    let mut new_ids = Vec::with_capacity(n);
    let mut flows = Vec::with_capacity(n - 1);
    for new_t in 0..n {
        let old_t = last - new_t;
        // Reversed flow at new_t points to old frame old_t - 1; keep only the
        // points whose correspondence exists there.
        if new_t < n - 1 {
            let prev = old_t - 1;
            let mut pts = Vec::new();
            let mut feats = Vec::new();
            let mut fids = Vec::new();
            let mut flow = Vec::new();
            for (row, &id) in ids[old_t].iter().enumerate() {
                if let Some(&prev_row) = maps[prev].get(&id) {
                    pts.push(sample.frames[old_t].points[row]);
                    feats.push(sample.frames[old_t].features[row]);
                    fids.push(id);
                    flow.push(-sample.flows[prev][prev_row]);
                }
            }
            flows.push(flow);
            let mut f = PointCloudFrame::new(pts, feats, new_t).expect("finite");
            f.frame_index = new_t;
            frames.push(f);
            new_ids.push(fids);
        } else {
            let mut f = sample.frames[old_t].clone();
            f.frame_index = new_t;
            frames.push(f);
            new_ids.push(ids[old_t].clone());
        }
    }

    let tracks = sample
        .tracks
        .iter()
        .map(|t| TrajectoryRecord {
            query_id: t.query_id,
            start_frame: last - t.start_frame,
            positions: t.positions.iter().rev().copied().collect(),
            visible: t.visible.iter().rev().copied().collect(),
        })
        .collect();

    TrainingSample {
        frames,
        flows,
        tracks,
        cameras: sample.cameras.as_ref().map(|c| c.iter().rev().cloned().collect()),
        point_ids: Some(new_ids),
    }
}

/// Ready-made scene scripts used across tests, examples and default configs.
pub mod scenes {
    use super::*;

    /// A textured box translating in front of a static background plane.
    /// With `seed`-jittered velocity and colors.
    pub fn drifting_box(seed: u64, points_budget: usize, frames: usize) -> SceneScript {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1f7);
        let vx = rng.gen_range(0.008..0.016);
        let vy = rng.gen_range(-0.004..0.004);
        SceneScript {
            objects: vec![
                ObjectSpec {
                    primitive: Primitive::Plane {
                        half_extents: [0.8, 0.8],
                    },
                    color: ColorSpec::Checker {
                        scale: 0.12,
                        a: [0.25, 0.3, 0.35],
                        b: [0.6, 0.55, 0.5],
                    },
                    center: [0.0, 0.0, 2.2],
                    points: points_budget * 2 / 3,
                    motion: RigidMotion::default(),
                    queries: 8,
                },
                ObjectSpec {
                    primitive: Primitive::Box {
                        half_extents: [0.09, 0.07, 0.05],
                    },
                    color: ColorSpec::Gradient {
                        axis: 0,
                        from: [0.9, 0.2, 0.1],
                        to: [0.1, 0.4, 0.9],
                    },
                    center: [-0.25, rng.gen_range(-0.1..0.1), 1.5],
                    points: points_budget / 3,
                    motion: RigidMotion {
                        linear_velocity: [vx, vy, 0.0],
                        ..Default::default()
                    },
                    queries: 24,
                },
            ],
            frames,
            ..Default::default()
        }
    }

    /// A moving target that passes behind a static occluder slab mid-way,
    /// under a constant velocity — the scripted occlusion scenario. The
    /// travel direction, speed and colors are randomized per seed so the
    /// motion of a particular sequence cannot be inferred from appearance;
    /// during the occlusion stretch only the observed motion history can
    /// carry the track.
    pub fn occlusion_pass(seed: u64, points_budget: usize, frames: usize) -> SceneScript {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0cc1);
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let speed: f64 = sign * rng.gen_range(0.018..0.03);
        let vy: f64 = rng.gen_range(-0.008..0.008);
        let y0 = rng.gen_range(-0.05..0.05);
        let depth = rng.gen_range(1.45..1.8);
        let hue = rng.gen_range(0.0..1.0);
        SceneScript {
            objects: vec![
                ObjectSpec {
                    primitive: Primitive::Plane {
                        half_extents: [0.9, 0.9],
                    },
                    color: ColorSpec::Checker {
                        scale: 0.15,
                        a: [0.3, 0.32, 0.35],
                        b: [0.5, 0.48, 0.45],
                    },
                    center: [0.0, 0.0, 2.4],
                    points: points_budget / 2,
                    motion: RigidMotion::default(),
                    queries: 4,
                },
                // Occluder: a slab between target and camera, wide enough to
                // swallow the whole target for several frames, so appearance
                // matching has nothing to hold on to mid-pass.
                ObjectSpec {
                    primitive: Primitive::Box {
                        half_extents: [0.075, 0.22, 0.02],
                    },
                    color: ColorSpec::Uniform {
                        rgb: [0.85, 0.8, 0.2],
                    },
                    center: [0.0, y0 * 0.5, 1.1],
                    points: points_budget / 4,
                    motion: RigidMotion::default(),
                    queries: 0,
                },
                // Target crossing behind the occluder: a thin plate facing
                // the camera, so its own back side never pollutes the
                // occluded bucket — a query counts occluded only during the
                // actual pass behind the slab.
                ObjectSpec {
                    primitive: Primitive::Box {
                        half_extents: [0.05, 0.04, 0.008],
                    },
                    color: ColorSpec::Gradient {
                        axis: 1,
                        from: [0.6 + 0.4 * hue, 0.1, 0.3],
                        to: [0.2, 0.9 - 0.5 * hue, 0.4 + 0.4 * hue],
                    },
                    center: [
                        -speed * frames as f64 / 2.0,
                        y0 - vy * frames as f64 / 2.0,
                        depth,
                    ],
                    points: points_budget / 4,
                    motion: RigidMotion {
                        linear_velocity: [speed, vy, 0.0],
                        ..Default::default()
                    },
                    queries: 28,
                },
            ],
            frames,
            // Desk-scale budgets leave several pixels between samples; the
            // occlusion test radius has to reach past that spacing to see
            // the occluder surface at all.
            occlusion_pixel_radius: 4.0,
            ..Default::default()
        }
    }

    /// Two independently moving objects over a background, no scripted
    /// occlusion; good for scene-flow pairs and general tracking.
    pub fn two_movers(seed: u64, points_budget: usize, frames: usize) -> SceneScript {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x2207);
        SceneScript {
            objects: vec![
                ObjectSpec {
                    primitive: Primitive::Plane {
                        half_extents: [0.8, 0.8],
                    },
                    color: ColorSpec::Gradient {
                        axis: 0,
                        from: [0.2, 0.25, 0.3],
                        to: [0.6, 0.6, 0.55],
                    },
                    center: [0.0, 0.0, 2.3],
                    points: points_budget / 2,
                    motion: RigidMotion::default(),
                    queries: 8,
                },
                ObjectSpec {
                    primitive: Primitive::Box {
                        half_extents: [0.08, 0.05, 0.06],
                    },
                    color: ColorSpec::Checker {
                        scale: 0.04,
                        a: [0.9, 0.4, 0.1],
                        b: [0.15, 0.2, 0.7],
                    },
                    center: [rng.gen_range(-0.3..-0.1), rng.gen_range(-0.15..0.15), 1.5],
                    points: points_budget / 4,
                    motion: RigidMotion {
                        linear_velocity: [
                            rng.gen_range(-0.014..0.014),
                            rng.gen_range(-0.008..0.008),
                            0.0,
                        ],
                        sine_axis: [0.0, 0.0, 1.0],
                        sine_amplitude: rng.gen_range(0.0..0.03),
                        sine_period: 20.0,
                        ..Default::default()
                    },
                    queries: 12,
                },
                ObjectSpec {
                    primitive: Primitive::Sphere { radius: 0.06 },
                    color: ColorSpec::Gradient {
                        axis: 2,
                        from: [0.1, 0.8, 0.8],
                        to: [0.8, 0.1, 0.8],
                    },
                    center: [rng.gen_range(0.1..0.3), rng.gen_range(-0.15..0.15), 1.8],
                    motion: RigidMotion {
                        linear_velocity: [
                            rng.gen_range(-0.014..0.014),
                            rng.gen_range(-0.008..0.008),
                            rng.gen_range(-0.004..0.004),
                        ],
                        spin_axis: [0.0, 1.0, 0.0],
                        spin_rate: rng.gen_range(0.0..0.05),
                        ..Default::default()
                    },
                    points: points_budget / 4,
                    queries: 12,
                },
            ],
            frames,
            ..Default::default()
        }
    }
}
