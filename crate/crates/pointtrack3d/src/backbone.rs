//! Hierarchical point feature extractor: a U-shaped encoder/decoder over the
//! grid-subsampled point pyramid, with selective decoding of query-adjacent
//! points at the two densest levels.
//!
//! Encoder level `l` convolves features from level `l-1` onto the level-`l`
//! points (strided continuous convolution); the densest level convolves the
//! raw color features in place. The decoder mirrors the widths: each level
//! upsamples the coarser decoder features by inverse-distance 3-NN
//! interpolation, concatenates the same-level encoder features and applies a
//! point convolution. Under a [`DecodeMask`], the two densest levels compute
//! decoder features only for the kept points.

use crate::autodiff::{Tensor, Var};
use crate::geometry::{GridIndex, PointHierarchy};
use crate::model::ModelConfig;
use crate::nn::{Binder, Mlp, ParamStore, LEAKY_SLOPE};
use nalgebra::Vector3;
use rand_chacha::ChaCha8Rng;
use std::rc::Rc;
use thiserror::Error;

/// Number of dense levels subject to selective decoding.
pub const PRUNED_LEVELS: usize = 2;

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("frame has {0} points, below the coarsest-level minimum of {1}")]
    TooFewPoints(usize, usize),
    #[error("mask too tight: level {level} point {point} needed but not decoded")]
    MaskTooTight { level: usize, point: usize },
    #[error("query uncovered: no decoded level-{level} points near the query")]
    QueryUncovered { level: usize },
}

/// A continuous point convolution: elementwise weights from an MLP on
/// relative coordinates, multiplied onto gathered source features, summed
/// over each neighborhood and passed through an output MLP.
#[derive(Debug, Clone)]
pub struct PointConv {
    pub wnet: Mlp,
    pub out: Mlp,
    pub cin: usize,
}

impl PointConv {
    pub fn new(name: &str, cin: usize, cout: usize, cfg: &ModelConfig) -> Self {
        Self {
            wnet: Mlp::new(format!("{name}.wnet"), &[3, cfg.weightnet_hidden, cin]),
            out: Mlp::new(format!("{name}.out"), &[cin, cout, cout]),
            cin,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.wnet.init(store, rng);
        self.out.init(store, rng);
    }

    /// `rel` is `center - source` per gathered row; `src_rows` the gathered
    /// source features; `seg` maps rows to output slots.
    pub fn fwd(
        &self,
        b: &Binder,
        rel: Var,
        src_rows: Var,
        seg: Rc<Vec<usize>>,
        n_out: usize,
    ) -> Var {
        let w = self.wnet.fwd(b, rel);
        let prod = b.tape().mul(w, src_rows);
        let pooled = b.tape().segment_sum(prod, seg, n_out);
        self.out.fwd(b, pooled)
    }
}

/// Flattened neighborhood bookkeeping for batched gather/segment ops.
pub struct FlatNeighborhoods {
    pub gather: Rc<Vec<usize>>,
    pub seg: Rc<Vec<usize>>,
    /// `center - source` rows, aligned with `gather`.
    pub rel: Tensor,
}

pub fn flatten_neighborhoods(
    centers: &[Vector3<f64>],
    sources: &[Vector3<f64>],
    lists: &[Vec<usize>],
) -> FlatNeighborhoods {
    let total: usize = lists.iter().map(Vec::len).sum();
    let mut gather = Vec::with_capacity(total);
    let mut seg = Vec::with_capacity(total);
    let mut rel = Vec::with_capacity(total * 3);
    for (i, list) in lists.iter().enumerate() {
        for &j in list {
            gather.push(j);
            seg.push(i);
            let d = centers[i] - sources[j];
            rel.extend_from_slice(&[d.x, d.y, d.z]);
        }
    }
    FlatNeighborhoods {
        gather: Rc::new(gather),
        seg: Rc::new(seg),
        rel: Tensor::from_vec(total, 3, rel),
    }
}

/// Decoder features at one level, possibly restricted to a kept subset.
pub struct LevelFeatures {
    pub var: Var,
    /// Level point indices with decoded features, ascending.
    pub rows: Vec<usize>,
    /// Level point index -> row in `var`.
    pub index_of: Vec<Option<usize>>,
}

impl LevelFeatures {
    pub fn full(var: Var, n: usize) -> Self {
        Self {
            var,
            rows: (0..n).collect(),
            index_of: (0..n).map(Some).collect(),
        }
    }

    pub fn subset(var: Var, rows: Vec<usize>, level_len: usize) -> Self {
        let mut index_of = vec![None; level_len];
        for (r, &p) in rows.iter().enumerate() {
            index_of[p] = Some(r);
        }
        Self {
            var,
            rows,
            index_of,
        }
    }

    pub fn row_of(&self, point: usize) -> Option<usize> {
        self.index_of[point]
    }
}

/// Keep-flags for the pruned levels; `None` entries keep every point.
pub struct DecodeMask {
    pub keep: Vec<Option<Vec<bool>>>,
    /// total/kept per pruned level (1.0 means nothing pruned).
    pub compression_rates: Vec<f64>,
}

impl DecodeMask {
    /// Mask keeping every point at every level.
    pub fn full(levels: usize) -> Self {
        Self {
            keep: (0..levels).map(|_| None).collect(),
            compression_rates: vec![1.0; PRUNED_LEVELS],
        }
    }

    pub fn kept(&self, level: usize, point: usize) -> bool {
        match &self.keep[level] {
            None => true,
            Some(flags) => flags[point],
        }
    }
}

/// Union of balls around the queries at the two densest levels; everything
/// kept at coarser levels.
pub fn build_decode_mask(
    hierarchy: &PointHierarchy,
    queries: &[Vector3<f64>],
    radii: &[f64],
) -> DecodeMask {
    assert!(radii.len() >= PRUNED_LEVELS);
    assert!(radii.iter().all(|r| *r > 0.0), "radii must be positive");
    if queries.is_empty() {
        eprintln!("warning: decode mask built with zero queries keeps nothing at pruned levels");
    }
    let mut keep: Vec<Option<Vec<bool>>> = (0..hierarchy.num_levels()).map(|_| None).collect();
    let mut rates = Vec::with_capacity(PRUNED_LEVELS);
    for l in 0..PRUNED_LEVELS.min(hierarchy.num_levels()) {
        let pts = &hierarchy.levels[l].points;
        let mut flags = vec![false; pts.len()];
        if !queries.is_empty() {
            let index = GridIndex::build(pts);
            for q in queries {
                for i in index.radius(q, radii[l]) {
                    flags[i] = true;
                }
            }
        }
        let kept = flags.iter().filter(|k| **k).count();
        rates.push(pts.len() as f64 / kept.max(1) as f64);
        keep[l] = Some(flags);
    }
    DecodeMask {
        keep,
        compression_rates: rates,
    }
}

/// Data-adaptive selective-decoding radii. The configured radii
/// (`2 * grid_size * K^(1/3)`) cover the receptive field when point spacing
/// tracks the grid size; on sparser clouds the neighborhoods grow, so this
/// measures the actual k-NN reach per level and widens the balls accordingly.
/// Taking `max` with the configured radii keeps the equivalence guarantee.
pub fn adaptive_decode_radii(hierarchy: &PointHierarchy, configured: &[f64]) -> Vec<f64> {
    let reach = |level: usize| -> f64 {
        let lvl = &hierarchy.levels[level];
        let mut worst: f64 = 0.0;
        let step = (lvl.points.len() / 256).max(1);
        for i in (0..lvl.points.len()).step_by(step) {
            for &j in &lvl.neighbors[i] {
                worst = worst.max((lvl.points[i] - lvl.points[j]).norm());
            }
        }
        worst
    };
    let anchor_reach = |level: usize| -> f64 {
        let lvl = &hierarchy.levels[level];
        let coarser = &hierarchy.levels[level + 1];
        let mut worst: f64 = 0.0;
        let step = (lvl.points.len() / 256).max(1);
        for i in (0..lvl.points.len()).step_by(step) {
            for &a in &lvl.upsample_anchors[i] {
                worst = worst.max((lvl.points[i] - coarser.points[a]).norm());
            }
        }
        worst
    };
    let r0_nn = reach(0);
    let r1_nn = if hierarchy.num_levels() > 1 { reach(1) } else { 0.0 };
    let a1 = if hierarchy.num_levels() > 1 {
        anchor_reach(0)
    } else {
        0.0
    };
    let mut out = configured.to_vec();
    out[0] = out[0].max(1.5 * r0_nn);
    if out.len() > 1 {
        out[1] = out[1].max(1.5 * r1_nn.max(2.0 * r0_nn + a1));
    }
    out
}

/// The U-shaped encoder/decoder descriptors.
pub struct BackboneNet {
    pub enc: Vec<PointConv>,
    pub dec_top: Mlp,
    pub dec: Vec<PointConv>,
    levels: usize,
}

impl BackboneNet {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        let l = cfg.levels;
        let w = &cfg.encoder_widths;
        let mut enc = Vec::with_capacity(l);
        enc.push(PointConv::new("backbone.enc0", 3, w[0], cfg));
        for i in 1..l {
            enc.push(PointConv::new(
                &format!("backbone.enc{i}"),
                w[i - 1],
                w[i],
                cfg,
            ));
        }
        let dec_top = Mlp::new("backbone.dectop", &[w[l - 1], w[l - 1], w[l - 1]]);
        let mut dec = Vec::with_capacity(l - 1);
        for i in 0..l - 1 {
            dec.push(PointConv::new(
                &format!("backbone.dec{i}"),
                w[i] + w[i + 1],
                w[i],
                cfg,
            ));
        }
        Self {
            enc,
            dec_top,
            dec,
            levels: l,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for c in &self.enc {
            c.init(store, rng);
        }
        self.dec_top.init(store, rng);
        for c in &self.dec {
            c.init(store, rng);
        }
    }

    /// Encoder pass over a prebuilt hierarchy. `input_features` are the
    /// level-0 per-point features (RGB), one row per point.
    pub fn encode(
        &self,
        b: &Binder,
        hierarchy: &PointHierarchy,
        input_features: Var,
    ) -> Vec<Var> {
        let tape = b.tape();
        let mut enc_feats = Vec::with_capacity(self.levels);
        let lvl0 = &hierarchy.levels[0];
        let flat = flatten_neighborhoods(&lvl0.points, &lvl0.points, &lvl0.neighbors);
        let rel = tape.constant(flat.rel);
        let rows = tape.gather_rows(input_features, flat.gather);
        let e0 = self.enc[0].fwd(b, rel, rows, flat.seg, lvl0.points.len());
        enc_feats.push(tape.leaky_relu(e0, LEAKY_SLOPE));

        for l in 1..hierarchy.num_levels() {
            let lvl = &hierarchy.levels[l];
            let finer = &hierarchy.levels[l - 1];
            let flat = flatten_neighborhoods(&lvl.points, &finer.points, &lvl.finer_neighbors);
            let rel = tape.constant(flat.rel);
            let rows = tape.gather_rows(enc_feats[l - 1], flat.gather);
            let e = self.enc[l].fwd(b, rel, rows, flat.seg, lvl.points.len());
            enc_feats.push(tape.leaky_relu(e, LEAKY_SLOPE));
        }
        enc_feats
    }

    /// Decoder pass. Levels under the mask compute features only for kept
    /// points; a kept point whose upsampling anchors were pruned at the
    /// coarser level is a mask violation.
    pub fn decode(
        &self,
        b: &Binder,
        hierarchy: &PointHierarchy,
        enc: &[Var],
        mask: &DecodeMask,
    ) -> Result<Vec<LevelFeatures>, BackboneError> {
        let tape = b.tape();
        let top = hierarchy.num_levels() - 1;
        let mut dec: Vec<Option<LevelFeatures>> = (0..hierarchy.num_levels()).map(|_| None).collect();
        let d_top = self.dec_top.fwd(b, enc[top]);
        let d_top = tape.leaky_relu(d_top, LEAKY_SLOPE);
        dec[top] = Some(LevelFeatures::full(d_top, hierarchy.levels[top].points.len()));

        for l in (0..top).rev() {
            let lvl = &hierarchy.levels[l];
            let n = lvl.points.len();
            let kept: Vec<usize> = match &mask.keep[l] {
                None => (0..n).collect(),
                Some(flags) => (0..n).filter(|&i| flags[i]).collect(),
            };
            if kept.is_empty() {
                // Nothing requested at this level; keep an empty feature set.
                let empty = tape.constant(Tensor::zeros(0, self.dec[l].out.out_dim()));
                dec[l] = Some(LevelFeatures::subset(empty, Vec::new(), n));
                continue;
            }

            // Sources whose h-features feed the kept points' convolutions.
            let mut needed: Vec<usize> = kept
                .iter()
                .flat_map(|&i| lvl.neighbors[i].iter().copied())
                .collect();
            needed.sort_unstable();
            needed.dedup();
            let mut local = vec![usize::MAX; n];
            for (r, &p) in needed.iter().enumerate() {
                local[p] = r;
            }

            // Upsample coarser decoder features onto the needed sources.
            let coarser = dec[l + 1].as_ref().unwrap();
            let mut up_gather = Vec::new();
            let mut up_seg = Vec::new();
            let mut up_w = Vec::new();
            for (r, &p) in needed.iter().enumerate() {
                let anchors = &lvl.upsample_anchors[p];
                let mut weights = Vec::with_capacity(anchors.len());
                for &a in anchors {
                    let row = coarser.row_of(a).ok_or(BackboneError::MaskTooTight {
                        level: l + 1,
                        point: a,
                    })?;
                    let d = (lvl.points[p] - hierarchy.levels[l + 1].points[a]).norm();
                    up_gather.push(row);
                    up_seg.push(r);
                    weights.push(1.0 / (d + 1e-8));
                }
                let total: f64 = weights.iter().sum();
                up_w.extend(weights.into_iter().map(|w| w / total));
            }
            let up_rows = tape.gather_rows(coarser.var, Rc::new(up_gather));
            let up_wc = tape.constant(Tensor::from_vec(up_w.len(), 1, up_w));
            let up_weighted = tape.mul_col(up_rows, up_wc);
            let up = tape.segment_sum(up_weighted, Rc::new(up_seg), needed.len());

            let enc_src = tape.gather_rows(enc[l], Rc::new(needed.clone()));
            let h_src = tape.concat_cols(&[enc_src, up]);

            // Convolution over the kept points, sourcing from `needed` rows.
            let mut gather = Vec::new();
            let mut seg = Vec::new();
            let mut rel = Vec::new();
            for (out_row, &i) in kept.iter().enumerate() {
                for &j in &lvl.neighbors[i] {
                    gather.push(local[j]);
                    seg.push(out_row);
                    let d = lvl.points[i] - lvl.points[j];
                    rel.extend_from_slice(&[d.x, d.y, d.z]);
                }
            }
            let rel = tape.constant(Tensor::from_vec(gather.len(), 3, rel));
            let rows = tape.gather_rows(h_src, Rc::new(gather));
            let d = self.dec[l].fwd(b, rel, rows, Rc::new(seg), kept.len());
            let d = tape.leaky_relu(d, LEAKY_SLOPE);
            dec[l] = Some(if kept.len() == n {
                LevelFeatures::full(d, n)
            } else {
                LevelFeatures::subset(d, kept, n)
            });
        }
        Ok(dec.into_iter().map(Option::unwrap).collect())
    }
}

/// Inverse-distance-weighted 3-NN interpolation of per-point values from the
/// coarser level onto this level's points (full levels only).
pub fn upsample_3nn(
    b: &Binder,
    coarser_values: Var,
    level: &crate::geometry::HierarchyLevel,
    coarser_points: &[Vector3<f64>],
) -> Var {
    let tape = b.tape();
    let mut gather = Vec::new();
    let mut seg = Vec::new();
    let mut weights = Vec::new();
    for (i, anchors) in level.upsample_anchors.iter().enumerate() {
        let mut w = Vec::with_capacity(anchors.len());
        for &a in anchors {
            let d = (level.points[i] - coarser_points[a]).norm();
            gather.push(a);
            seg.push(i);
            w.push(1.0 / (d + 1e-8));
        }
        let total: f64 = w.iter().sum();
        weights.extend(w.into_iter().map(|x| x / total));
    }
    let rows = tape.gather_rows(coarser_values, Rc::new(gather));
    let wc = tape.constant(Tensor::from_vec(weights.len(), 1, weights));
    let weighted = tape.mul_col(rows, wc);
    tape.segment_sum(weighted, Rc::new(seg), level.points.len())
}

/// Validate the frame, build its hierarchy and run the encoder with the
/// frame colors bound as constants.
pub fn encode_frame(
    b: &Binder,
    net: &BackboneNet,
    frame: &crate::geometry::PointCloudFrame,
    cfg: &ModelConfig,
) -> Result<(PointHierarchy, Vec<Var>), BackboneError> {
    if frame.len() < cfg.min_input_points {
        return Err(BackboneError::TooFewPoints(frame.len(), cfg.min_input_points));
    }
    let hierarchy = PointHierarchy::build(&frame.points, &cfg.grid_sizes, cfg.conv_k)
        .expect("non-empty frame");
    let mut data = Vec::with_capacity(frame.len() * 3);
    for f in &frame.features {
        data.extend_from_slice(f);
    }
    let feats = b.tape().constant(Tensor::from_vec(frame.len(), 3, data));
    let enc = net.encode(b, &hierarchy, feats);
    Ok((hierarchy, enc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::gradcheck::check_gradient;
    use crate::model::ModelConfig;
    use crate::nn::Binder;
    use rand::{Rng, SeedableRng};

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            encoder_widths: vec![8, 8, 12, 12],
            conv_k: 6,
            weightnet_hidden: 6,
            ..ModelConfig::small()
        }
    }

    fn init_model(cfg: &ModelConfig, seed: u64) -> crate::model::Model {
        crate::model::Model::init(cfg.clone(), seed)
    }

    fn plane_cloud(nx: usize, ny: usize, spacing: f64) -> Vec<Vector3<f64>> {
        let mut pts = Vec::new();
        for i in 0..nx {
            for j in 0..ny {
                pts.push(Vector3::new(i as f64 * spacing, j as f64 * spacing, 1.0));
            }
        }
        pts
    }

    #[test]
    fn encoder_translation_symmetry_on_constant_plane() {
        // K = 9 closes the diagonal shell of the lattice, so interior
        // neighborhoods are congruent with no distance ties at the boundary.
        let cfg = ModelConfig {
            conv_k: 9,
            ..small_cfg()
        };
        let model = init_model(&cfg, 3);
        let nets = model.nets();
        let pts = plane_cloud(12, 12, 0.02);
        let h = PointHierarchy::build(&pts, &cfg.grid_sizes, cfg.conv_k).unwrap();

        let tape = Tape::new();
        let b = Binder::frozen(&tape, &model.params);
        let feats = tape.constant(Tensor::filled(pts.len(), 3, 0.5));
        let enc = nets.backbone.encode(&b, &h, feats);
        let e0 = tape.value(enc[0]);

        // Interior points of a uniform lattice have congruent neighborhoods,
        // so their features agree up to summation order.
        let interior: Vec<usize> = (0..pts.len())
            .filter(|&i| {
                let (x, y) = (pts[i].x, pts[i].y);
                x > 0.06 && x < 0.16 && y > 0.06 && y < 0.16
            })
            .collect();
        assert!(interior.len() > 4);
        let reference = e0.row(interior[0]).to_vec();
        for &i in &interior[1..] {
            for (a, bv) in reference.iter().zip(e0.row(i)) {
                assert!((a - bv).abs() < 1e-5, "interior features differ: {a} vs {bv}");
            }
        }
    }

    #[test]
    fn encode_is_deterministic() {
        let cfg = small_cfg();
        let model = init_model(&cfg, 4);
        let nets = model.nets();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        let pts: Vec<Vector3<f64>> = (0..120)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(0.8..1.4),
                )
            })
            .collect();
        let h = PointHierarchy::build(&pts, &cfg.grid_sizes, cfg.conv_k).unwrap();
        let run = || {
            let tape = Tape::new();
            let b = Binder::frozen(&tape, &model.params);
            let feats = tape.constant(Tensor::filled(pts.len(), 3, 0.3));
            let enc = nets.backbone.encode(&b, &h, feats);
            enc.iter().map(|&v| tape.value(v)).collect::<Vec<_>>()
        };
        let a = run();
        let bb = run();
        assert_eq!(a, bb);
    }

    #[test]
    fn encoder_permutation_equivariant() {
        let cfg = small_cfg();
        let model = init_model(&cfg, 5);
        let nets = model.nets();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let pts: Vec<Vector3<f64>> = (0..90)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-0.2..0.2),
                    rng.gen_range(-0.2..0.2),
                    rng.gen_range(0.9..1.3),
                )
            })
            .collect();
        let colors: Vec<f64> = (0..pts.len() * 3).map(|_| rng.gen_range(0.0..1.0)).collect();

        let eval_level0 = |pts: &[Vector3<f64>], colors: &[f64]| {
            let h = PointHierarchy::build(pts, &cfg.grid_sizes, cfg.conv_k).unwrap();
            let tape = Tape::new();
            let b = Binder::frozen(&tape, &model.params);
            let feats = tape.constant(Tensor::from_vec(pts.len(), 3, colors.to_vec()));
            let enc = nets.backbone.encode(&b, &h, feats);
            tape.value(enc[0])
        };

        let base = eval_level0(&pts, &colors);
        let mut perm: Vec<usize> = (0..pts.len()).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let pts_p: Vec<Vector3<f64>> = perm.iter().map(|&i| pts[i]).collect();
        let mut colors_p = vec![0.0; colors.len()];
        for (new_i, &old_i) in perm.iter().enumerate() {
            colors_p[new_i * 3..new_i * 3 + 3].copy_from_slice(&colors[old_i * 3..old_i * 3 + 3]);
        }
        let permuted = eval_level0(&pts_p, &colors_p);
        for (new_i, &old_i) in perm.iter().enumerate() {
            for (a, bv) in base.row(old_i).iter().zip(permuted.row(new_i)) {
                assert!((a - bv).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn full_mask_decode_matches_explicit_all_true() {
        let cfg = small_cfg();
        let model = init_model(&cfg, 6);
        let nets = model.nets();
        let pts = plane_cloud(10, 10, 0.025);
        let h = PointHierarchy::build(&pts, &cfg.grid_sizes, cfg.conv_k).unwrap();

        let decode_with = |mask: &DecodeMask| {
            let tape = Tape::new();
            let b = Binder::frozen(&tape, &model.params);
            let feats = tape.constant(Tensor::filled(pts.len(), 3, 0.4));
            let enc = nets.backbone.encode(&b, &h, feats);
            let dec = nets.backbone.decode(&b, &h, &enc, mask).unwrap();
            dec.iter().map(|lf| tape.value(lf.var)).collect::<Vec<_>>()
        };

        let implicit = decode_with(&DecodeMask::full(h.num_levels()));
        let explicit_mask = DecodeMask {
            keep: (0..h.num_levels())
                .map(|l| {
                    if l < PRUNED_LEVELS {
                        Some(vec![true; h.levels[l].points.len()])
                    } else {
                        None
                    }
                })
                .collect(),
            compression_rates: vec![1.0; PRUNED_LEVELS],
        };
        let explicit = decode_with(&explicit_mask);
        for (a, bv) in implicit.iter().zip(&explicit) {
            for (x, y) in a.data().iter().zip(bv.data()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn selective_decode_matches_full_decode_near_queries() {
        let cfg = small_cfg();
        let model = init_model(&cfg, 8);
        let nets = model.nets();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(40);
        // Two dense surface sheets, jittered: spacing tracks the level-1 grid
        // size, which is the regime the configured radii are designed for.
        let mut pts: Vec<Vector3<f64>> = Vec::new();
        for i in 0..40 {
            for j in 0..40 {
                let jx: f64 = rng.gen_range(-0.004..0.004);
                let jy: f64 = rng.gen_range(-0.004..0.004);
                pts.push(Vector3::new(
                    -0.3 + i as f64 * 0.015 + jx,
                    -0.3 + j as f64 * 0.015 + jy,
                    1.0,
                ));
                pts.push(Vector3::new(
                    -0.3 + i as f64 * 0.015 + jy,
                    -0.3 + j as f64 * 0.015 + jx,
                    1.3 + 0.2 * (i as f64 * 0.015),
                ));
            }
        }
        let h = PointHierarchy::build(&pts, &cfg.grid_sizes, cfg.conv_k).unwrap();
        let queries = vec![Vector3::new(0.0, 0.0, 1.0), Vector3::new(0.1, -0.1, 1.33)];
        let radii = adaptive_decode_radii(&h, &cfg.decode_radii());
        let mask = build_decode_mask(&h, &queries, &radii);
        assert!(mask.compression_rates[0] > 1.0);

        let colors: Vec<f64> = (0..pts.len() * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        let run = |mask: &DecodeMask| {
            let tape = Tape::new();
            let b = Binder::frozen(&tape, &model.params);
            let feats = tape.constant(Tensor::from_vec(pts.len(), 3, colors.clone()));
            let enc = nets.backbone.encode(&b, &h, feats);
            let dec = nets.backbone.decode(&b, &h, &enc, mask).unwrap();
            dec.into_iter()
                .map(|lf| (tape.value(lf.var), lf.rows))
                .collect::<Vec<_>>()
        };
        let full = run(&DecodeMask::full(h.num_levels()));
        let pruned = run(&mask);

        // Every query-adjacent point inside the kept set must agree with the
        // full decode. Check the query's conv_k nearest level-0/1 points.
        for l in 0..PRUNED_LEVELS {
            let nn = crate::geometry::knn(&queries, &h.levels[l].points, cfg.conv_k).unwrap();
            let (full_t, _) = &full[l];
            let (pruned_t, rows) = &pruned[l];
            let mut row_of = vec![None; h.levels[l].points.len()];
            for (r, &p) in rows.iter().enumerate() {
                row_of[p] = Some(r);
            }
            for list in &nn {
                for &p in list {
                    let r = row_of[p].expect("query-adjacent point must be kept");
                    for (x, y) in full_t.row(p).iter().zip(pruned_t.row(r)) {
                        assert!(
                            (x - y).abs() < 1e-6,
                            "selective decode diverged at level {l}: {x} vs {y}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn ball_mask_matches_bruteforce_ball_query() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(50);
        let pts: Vec<Vector3<f64>> = (0..400)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(0.5..1.5),
                )
            })
            .collect();
        let h = PointHierarchy::build(&pts, &[0.02, 0.04, 0.08, 0.16], 8).unwrap();
        let q = vec![Vector3::new(-0.45, -0.45, 0.6)];
        let mask = build_decode_mask(&h, &q, &[0.2, 0.3]);
        for l in 0..PRUNED_LEVELS {
            let flags = mask.keep[l].as_ref().unwrap();
            for (i, p) in h.levels[l].points.iter().enumerate() {
                let inside = (p - q[0]).norm() <= [0.2, 0.3][l];
                assert_eq!(flags[i], inside, "level {l} point {i}");
            }
        }
        assert!(mask.compression_rates[0] > 1.0);
    }

    #[test]
    fn empty_queries_keep_nothing_at_dense_levels() {
        let pts = plane_cloud(8, 8, 0.03);
        let h = PointHierarchy::build(&pts, &[0.02, 0.04, 0.08, 0.16], 6).unwrap();
        let mask = build_decode_mask(&h, &[], &[0.1, 0.2]);
        assert!(mask.keep[0].as_ref().unwrap().iter().all(|k| !k));
    }

    #[test]
    fn too_few_points_error() {
        let cfg = small_cfg();
        let model = init_model(&cfg, 9);
        let nets = model.nets();
        let tape = Tape::new();
        let b = Binder::frozen(&tape, &model.params);
        let frame = crate::geometry::PointCloudFrame::new(
            vec![Vector3::new(0.0, 0.0, 1.0); 4],
            vec![[0.5; 3]; 4],
            0,
        )
        .unwrap();
        assert!(matches!(
            encode_frame(&b, &nets.backbone, &frame, &cfg),
            Err(BackboneError::TooFewPoints(4, _))
        ));
    }

    #[test]
    fn encoder_gradient_wrt_input_features_matches_fd() {
        let cfg = ModelConfig {
            encoder_widths: vec![6, 6, 8, 8],
            conv_k: 4,
            weightnet_hidden: 4,
            ..ModelConfig::small()
        };
        let model = init_model(&cfg, 11);
        let nets = model.nets();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(60);
        let pts: Vec<Vector3<f64>> = (0..20)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-0.2..0.2),
                    rng.gen_range(-0.2..0.2),
                    rng.gen_range(0.9..1.2),
                )
            })
            .collect();
        let h = PointHierarchy::build(&pts, &cfg.grid_sizes, cfg.conv_k).unwrap();
        let feats0 = Tensor::from_vec(
            pts.len(),
            3,
            (0..pts.len() * 3).map(|_| rng.gen_range(0.0..1.0)).collect(),
        );

        let build = |inputs: &[Tensor]| {
            let tape = Tape::new();
            let b = Binder::frozen(&tape, &model.params);
            let feats = tape.leaf(inputs[0].clone());
            let enc = nets.backbone.encode(&b, &h, feats);
            let dec = nets
                .backbone
                .decode(&b, &h, &enc, &DecodeMask::full(h.num_levels()))
                .unwrap();
            let pooled = tape.mean_all(dec[0].var);
            (tape, vec![feats], pooled)
        };
        let err = check_gradient(&[feats0], build, 1e-5);
        assert!(err < 1e-4, "backbone FD gradient: {err}");
    }
}
