//! Point-cloud containers, grid subsampling, neighborhood search, pinhole
//! projection and depth-map sampling.
//!
//! Everything here is pure and reentrant; coordinates are meters in f64.

use nalgebra::{Matrix3, Vector3};
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("empty point cloud")]
    EmptyPointCloud,
    #[error("point behind camera (z = {0})")]
    BehindCamera(f64),
    #[error("invalid depth {0}")]
    InvalidDepth(f64),
    #[error("sample position ({0}, {1}) outside image bounds")]
    OutOfBounds(f64, f64),
    #[error("no valid depth at sample position")]
    NoValidDepth,
    #[error("camera rotation is not a proper rotation (|R R^T - I| = {0:.2e})")]
    BadRotation(f64),
    #[error("point and feature counts differ: {points} vs {features}")]
    CountMismatch { points: usize, features: usize },
    #[error("non-finite coordinate in point cloud")]
    NonFinite,
}

/// One frame of the dynamic scene: 3D points with per-point feature vectors
/// (RGB color in `[0, 1]` for raw input).
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloudFrame {
    pub points: Vec<Vector3<f64>>,
    pub features: Vec<[f64; 3]>,
    pub frame_index: usize,
}

impl PointCloudFrame {
    pub fn new(
        points: Vec<Vector3<f64>>,
        features: Vec<[f64; 3]>,
        frame_index: usize,
    ) -> Result<Self, GeometryError> {
        if points.len() != features.len() {
            return Err(GeometryError::CountMismatch {
                points: points.len(),
                features: features.len(),
            });
        }
        if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(GeometryError::NonFinite);
        }
        Ok(Self {
            points,
            features,
            frame_index,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Pinhole camera: intrinsics in pixels, extrinsics world-to-camera.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    /// World-to-camera translation (camera coords of the world origin).
    pub translation: Vector3<f64>,
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let residual = (rotation * rotation.transpose() - Matrix3::identity()).norm();
        let det = rotation.determinant();
        if residual > 1e-6 || (det - 1.0).abs() > 1e-6 {
            return Err(GeometryError::BadRotation(residual.max((det - 1.0).abs())));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            width,
            height,
        })
    }

    /// Identity pose with the given intrinsics; camera at the origin looking
    /// down +z.
    pub fn identity(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            width,
            height,
        }
    }

    /// Camera placed at `eye` looking at `target`, with `up` fixing the roll.
    /// Camera convention: +z forward, +x right, +y down.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Self {
        let forward = (target - eye).normalize();
        let mut right = forward.cross(&up);
        if right.norm() < 1e-9 {
            // Degenerate up; pick any perpendicular roll.
            right = forward.cross(&Vector3::x());
            if right.norm() < 1e-9 {
                right = forward.cross(&Vector3::y());
            }
        }
        let right = right.normalize();
        let down = forward.cross(&right).normalize();
        // Rows of R are the camera axes expressed in world coordinates.
        let rotation = Matrix3::from_rows(&[
            right.transpose(),
            down.transpose(),
            forward.transpose(),
        ]);
        let translation = -rotation * eye;
        Self {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            width,
            height,
        }
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -self.rotation.transpose() * self.translation
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }
}

/// Project a world point; returns pixel coordinates and camera-frame depth.
pub fn project(point: &Vector3<f64>, camera: &CameraModel) -> Result<([f64; 2], f64), GeometryError> {
    let pc = camera.world_to_camera(point);
    if pc.z <= 0.0 {
        return Err(GeometryError::BehindCamera(pc.z));
    }
    let u = camera.fx * pc.x / pc.z + camera.cx;
    let v = camera.fy * pc.y / pc.z + camera.cy;
    Ok(([u, v], pc.z))
}

/// Inverse of [`project`] under the same camera.
pub fn backproject(uv: [f64; 2], depth: f64, camera: &CameraModel) -> Result<Vector3<f64>, GeometryError> {
    if depth <= 0.0 {
        return Err(GeometryError::InvalidDepth(depth));
    }
    let pc = Vector3::new(
        (uv[0] - camera.cx) / camera.fx * depth,
        (uv[1] - camera.cy) / camera.fy * depth,
        depth,
    );
    Ok(camera.rotation.transpose() * (pc - camera.translation))
}

/// Per-frame depth image; values are meters, `<= 0` marks invalid pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    /// Row-major, `depths[v * width + u]`.
    pub depths: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterpMode {
    Bilinear,
    Nearest,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, depths: Vec<f64>) -> Self {
        assert_eq!(depths.len(), width * height);
        Self {
            width,
            height,
            depths,
        }
    }

    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.depths[v * self.width + u]
    }
}

/// Sample a depth map at subpixel coordinates. Bilinear mode excludes
/// invalid (`<= 0`) pixels and renormalizes the remaining weights; depth maps
/// near object boundaries routinely contain holes.
pub fn sample_depth(map: &DepthMap, uv: [f64; 2], mode: InterpMode) -> Result<f64, GeometryError> {
    let (u, v) = (uv[0], uv[1]);
    if !(0.0..=(map.width - 1) as f64).contains(&u) || !(0.0..=(map.height - 1) as f64).contains(&v)
    {
        return Err(GeometryError::OutOfBounds(u, v));
    }
    match mode {
        InterpMode::Nearest => {
            let ui = u.round() as usize;
            let vi = v.round() as usize;
            let d = map.at(ui.min(map.width - 1), vi.min(map.height - 1));
            if d > 0.0 {
                Ok(d)
            } else {
                Err(GeometryError::NoValidDepth)
            }
        }
        InterpMode::Bilinear => {
            let u0 = u.floor() as usize;
            let v0 = v.floor() as usize;
            let u1 = (u0 + 1).min(map.width - 1);
            let v1 = (v0 + 1).min(map.height - 1);
            let fu = u - u0 as f64;
            let fv = v - v0 as f64;
            let taps = [
                (map.at(u0, v0), (1.0 - fu) * (1.0 - fv)),
                (map.at(u1, v0), fu * (1.0 - fv)),
                (map.at(u0, v1), (1.0 - fu) * fv),
                (map.at(u1, v1), fu * fv),
            ];
            let mut num = 0.0;
            let mut den = 0.0;
            for (d, w) in taps {
                if d > 0.0 {
                    num += d * w;
                    den += w;
                }
            }
            if den > 0.0 {
                Ok(num / den)
            } else {
                Err(GeometryError::NoValidDepth)
            }
        }
    }
}

/// Grid subsampling: one output point per occupied voxel, placed at the
/// centroid of its members, features averaged. `parent_indices` maps each
/// input point to its output voxel representative.
pub fn grid_subsample(
    points: &[Vector3<f64>],
    features: &[f64],
    feature_width: usize,
    voxel: f64,
) -> Result<(Vec<Vector3<f64>>, Vec<f64>, Vec<usize>), GeometryError> {
    assert!(voxel > 0.0, "voxel size must be positive");
    if points.is_empty() {
        return Err(GeometryError::EmptyPointCloud);
    }
    assert_eq!(features.len(), points.len() * feature_width);

    let mut voxel_of: HashMap<(i64, i64, i64), usize> = HashMap::new();
    let mut sums: Vec<Vector3<f64>> = Vec::new();
    let mut feat_sums: Vec<f64> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    let mut parents = Vec::with_capacity(points.len());

    for (i, p) in points.iter().enumerate() {
        let key = (
            (p.x / voxel).floor() as i64,
            (p.y / voxel).floor() as i64,
            (p.z / voxel).floor() as i64,
        );
        let slot = *voxel_of.entry(key).or_insert_with(|| {
            sums.push(Vector3::zeros());
            feat_sums.extend(std::iter::repeat(0.0).take(feature_width));
            counts.push(0);
            counts.len() - 1
        });
        sums[slot] += p;
        counts[slot] += 1;
        for c in 0..feature_width {
            feat_sums[slot * feature_width + c] += features[i * feature_width + c];
        }
        parents.push(slot);
    }

    let out_points: Vec<Vector3<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| s / n as f64)
        .collect();
    let mut out_feats = feat_sums;
    for (slot, &n) in counts.iter().enumerate() {
        for c in 0..feature_width {
            out_feats[slot * feature_width + c] /= n as f64;
        }
    }
    Ok((out_points, out_feats, parents))
}

/// k-nearest neighbors by Euclidean distance, ties broken by lower index.
/// If `reference` has fewer than `k` points, all indices are returned.
/// Exhaustive for small references, uniform-grid accelerated above that;
/// both paths return identical results.
pub fn knn(
    query: &[Vector3<f64>],
    reference: &[Vector3<f64>],
    k: usize,
) -> Result<Vec<Vec<usize>>, GeometryError> {
    assert!(k >= 1, "k must be at least 1");
    if reference.is_empty() {
        return Err(GeometryError::EmptyPointCloud);
    }
    if reference.len() > 2048 {
        let index = GridIndex::build(reference);
        return Ok(query.iter().map(|q| index.knn(q, k)).collect());
    }
    Ok(query
        .iter()
        .map(|q| knn_brute_single(q, reference, k))
        .collect())
}

fn knn_brute_single(q: &Vector3<f64>, reference: &[Vector3<f64>], k: usize) -> Vec<usize> {
    let mut ranked: Vec<(f64, usize)> = reference
        .iter()
        .enumerate()
        .map(|(i, p)| ((p - q).norm_squared(), i))
        .collect();
    ranked.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    // An explicit exact-size allocation: collecting the truncated vector
    // in place would retain its full candidate capacity per list.
    exact_indices(&ranked, k)
}

fn exact_indices(ranked: &[(f64, usize)], k: usize) -> Vec<usize> {
    let n = k.min(ranked.len());
    let mut out = Vec::with_capacity(n);
    out.extend(ranked.iter().take(n).map(|&(_, i)| i));
    out
}

/// Uniform hash-grid over a point set for exact kNN and radius queries.
pub struct GridIndex<'a> {
    points: &'a [Vector3<f64>],
    cell: f64,
    extent: f64,
    buckets: HashMap<(i64, i64, i64), Vec<usize>>,
}

impl<'a> GridIndex<'a> {
    pub fn build(points: &'a [Vector3<f64>]) -> Self {
        assert!(!points.is_empty());
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let extent = (hi - lo).norm().max(1e-9);
        // Points live on surfaces, so occupied cells hold well above the
        // volumetric average; a finer cell keeps per-ring candidate sets
        // small.
        let cell = (extent / (points.len() as f64).cbrt() / 2.0).max(1e-9);
        let mut buckets: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            buckets.entry(Self::key(p, cell)).or_default().push(i);
        }
        Self {
            points,
            cell,
            extent,
            buckets,
        }
    }

    fn key(p: &Vector3<f64>, cell: f64) -> (i64, i64, i64) {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    }

    /// Exact kNN, ties broken by lower index (matches the brute-force rule).
    pub fn knn(&self, q: &Vector3<f64>, k: usize) -> Vec<usize> {
        let center = Self::key(q, self.cell);
        let mut candidates: Vec<(f64, usize)> = Vec::new();
        let mut ring = 0i64;
        loop {
            for (cx, cy, cz) in ring_cells(center, ring) {
                if let Some(bucket) = self.buckets.get(&(cx, cy, cz)) {
                    for &i in bucket {
                        candidates.push(((self.points[i] - q).norm_squared(), i));
                    }
                }
            }
            if candidates.len() >= k.min(self.points.len()) {
                candidates
                    .sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                let kth = candidates[k.min(candidates.len()) - 1].0.sqrt();
                // Points in cells beyond this ring are at least ring*cell away.
                if kth <= ring as f64 * self.cell {
                    return exact_indices(&candidates, k);
                }
            }
            ring += 1;
            // Entire grid swept.
            if ring as f64 * self.cell > 2.0 * self.extent + self.cell {
                candidates
                    .sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                return exact_indices(&candidates, k);
            }
        }
    }

    /// All indices within `radius` of `q`, ascending.
    pub fn radius(&self, q: &Vector3<f64>, radius: f64) -> Vec<usize> {
        let r2 = radius * radius;
        let reach = (radius / self.cell).ceil() as i64 + 1;
        let center = Self::key(q, self.cell);
        let mut out = Vec::new();
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                for dz in -reach..=reach {
                    let key = (center.0 + dx, center.1 + dy, center.2 + dz);
                    if let Some(bucket) = self.buckets.get(&key) {
                        for &i in bucket {
                            if (self.points[i] - q).norm_squared() <= r2 {
                                out.push(i);
                            }
                        }
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// One level of the point pyramid.
#[derive(Debug, Clone)]
pub struct HierarchyLevel {
    pub points: Vec<Vector3<f64>>,
    /// Index of each point's voxel representative in the next (coarser)
    /// level; empty for the coarsest level.
    pub parents: Vec<usize>,
    /// Same-level k-nearest neighbors (the point itself ranks first).
    pub neighbors: Vec<Vec<usize>>,
    /// k-nearest points in the finer level (strided convolution support);
    /// empty for the densest level.
    pub finer_neighbors: Vec<Vec<usize>>,
    /// 3 nearest points in the coarser level (upsampling support); empty for
    /// the coarsest level.
    pub upsample_anchors: Vec<Vec<usize>>,
}

/// Grid-subsampled point pyramid. Level 0 is the input point set itself;
/// level `l` is produced by grid subsampling level `l - 1` with
/// `grid_sizes[l]` (the level-0 entry is a nominal spacing used only for
/// radius heuristics).
#[derive(Debug, Clone)]
pub struct PointHierarchy {
    pub levels: Vec<HierarchyLevel>,
    pub grid_sizes: Vec<f64>,
}

impl PointHierarchy {
    pub fn build(
        points: &[Vector3<f64>],
        grid_sizes: &[f64],
        k: usize,
    ) -> Result<Self, GeometryError> {
        if points.is_empty() {
            return Err(GeometryError::EmptyPointCloud);
        }
        let mut level_points: Vec<Vec<Vector3<f64>>> = vec![points.to_vec()];
        let mut level_parents: Vec<Vec<usize>> = Vec::new();
        for gs in &grid_sizes[1..] {
            let prev = level_points.last().unwrap();
            let feats = vec![0.0; prev.len()];
            let (pts, _, parents) = grid_subsample(prev, &feats, 1, *gs)?;
            level_parents.push(parents);
            level_points.push(pts);
        }

        let nlevels = level_points.len();
        let mut levels = Vec::with_capacity(nlevels);
        for l in 0..nlevels {
            let pts = &level_points[l];
            let neighbors = knn(pts, pts, k)?;
            let finer_neighbors = if l > 0 {
                knn(pts, &level_points[l - 1], k)?
            } else {
                Vec::new()
            };
            let upsample_anchors = if l + 1 < nlevels {
                knn(pts, &level_points[l + 1], 3)?
            } else {
                Vec::new()
            };
            let parents = if l + 1 < nlevels {
                level_parents[l].clone()
            } else {
                Vec::new()
            };
            levels.push(HierarchyLevel {
                points: pts.clone(),
                parents,
                neighbors,
                finer_neighbors,
                upsample_anchors,
            });
        }
        Ok(Self {
            levels,
            grid_sizes: grid_sizes.to_vec(),
        })
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }
}

/// Cells whose Chebyshev distance from `center` is exactly `ring`.
fn ring_cells(center: (i64, i64, i64), ring: i64) -> Vec<(i64, i64, i64)> {
    if ring == 0 {
        return vec![center];
    }
    let mut cells = Vec::new();
    for dx in -ring..=ring {
        for dy in -ring..=ring {
            for dz in -ring..=ring {
                if dx.abs().max(dy.abs()).max(dz.abs()) == ring {
                    cells.push((center.0 + dx, center.1 + dy, center.2 + dz));
                }
            }
        }
    }
    cells
}
