//! Cost computation: the patch-to-patch cost volume used by the dense
//! scene-flow path, query feature interpolation, and the simplified per-query
//! cost volume used by the tracker.
//!
//! Weight MLPs take raw relative coordinates `center - source`; cost MLPs take
//! `[f_center, f_source, source - center]`, matching the predictor pipeline
//! this design follows. Neighbor selection is k-nearest by position value and
//! carries no gradient; gradients flow through the relative coordinates and
//! features.

use crate::autodiff::{Tensor, Var};
use crate::backbone::{BackboneError, LevelFeatures};
use crate::geometry::knn;
use crate::model::ModelConfig;
use crate::nn::{Binder, Mlp, ParamStore};
use nalgebra::Vector3;
use rand_chacha::ChaCha8Rng;
use std::rc::Rc;

/// Query feature interpolation: a point convolution that pulls level decoder
/// features onto a free 3D position.
#[derive(Debug, Clone)]
pub struct QueryFeatureConv {
    pub wnet: Mlp,
    pub out: Mlp,
    pub k: usize,
}

impl QueryFeatureConv {
    pub fn new(name: String, width: usize, cfg: &ModelConfig) -> Self {
        Self {
            wnet: Mlp::new(format!("{name}.wnet"), &[3, cfg.weightnet_hidden, width]),
            out: Mlp::new(format!("{name}.out"), &[width, width, width]),
            k: cfg.conv_k,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.wnet.init(store, rng);
        self.out.init(store, rng);
    }

    /// `positions` is `Q×3` (tracked; gradients flow through the relative
    /// coordinates). Level points must be decoded at the query's k nearest
    /// neighbors or the mask is too tight.
    pub fn fwd(
        &self,
        b: &Binder,
        positions: Var,
        level: usize,
        level_points: &[Vector3<f64>],
        feats: &LevelFeatures,
    ) -> Result<Var, BackboneError> {
        let tape = b.tape();
        let q_vals: Vec<Vector3<f64>> = {
            let t = tape.val(positions);
            (0..t.rows()).map(|r| t.row_vector3(r)).collect()
        };
        if level_points.is_empty() {
            return Err(BackboneError::QueryUncovered { level });
        }
        let lists = knn(&q_vals, level_points, self.k).expect("non-empty level");

        let total: usize = lists.iter().map(Vec::len).sum();
        let mut seg = Vec::with_capacity(total);
        let mut local_rows = Vec::with_capacity(total);
        let mut nbr_pos = Vec::with_capacity(total * 3);
        for (qi, list) in lists.iter().enumerate() {
            for &j in list {
                let row = feats
                    .row_of(j)
                    .ok_or(BackboneError::MaskTooTight { level, point: j })?;
                seg.push(qi);
                local_rows.push(row);
                let p = level_points[j];
                nbr_pos.extend_from_slice(&[p.x, p.y, p.z]);
            }
        }
        let seg = Rc::new(seg);
        let nbr = tape.constant(Tensor::from_vec(total, 3, nbr_pos));
        let q_rows = tape.gather_rows(positions, seg.clone());
        let rel = tape.sub(q_rows, nbr); // q - p_j
        let w = self.wnet.fwd(b, rel);
        let f = tape.gather_rows(feats.var, Rc::new(local_rows));
        let prod = tape.mul(w, f);
        let pooled = tape.segment_sum(prod, seg, q_vals.len());
        Ok(self.out.fwd(b, pooled))
    }
}

/// Simplified per-query cost volume against the next frame. One output row
/// per input row, so callers can batch `(query, stored appearance)` pairs by
/// repeating position rows.
#[derive(Debug, Clone)]
pub struct QueryCostVolume {
    pub cost: Mlp,
    pub wnet: Mlp,
    pub k: usize,
}

impl QueryCostVolume {
    pub fn new(name: String, width: usize, cfg: &ModelConfig) -> Self {
        Self {
            cost: Mlp::new(
                format!("{name}.cost"),
                &[width + width + 3, cfg.cost_dim, cfg.cost_dim],
            ),
            wnet: Mlp::new(format!("{name}.wnet"), &[3, cfg.weightnet_hidden, cfg.cost_dim]),
            k: cfg.conv_k,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.cost.init(store, rng);
        self.wnet.init(store, rng);
    }

    /// `positions (R×3)` and `appearance (R×C)` are paired row-wise;
    /// `next_feats` are the decoded level features of frame `t+1`.
    pub fn fwd(
        &self,
        b: &Binder,
        positions: Var,
        appearance: Var,
        level: usize,
        next_points: &[Vector3<f64>],
        next_feats: &LevelFeatures,
    ) -> Result<Var, BackboneError> {
        let tape = b.tape();
        let q_vals: Vec<Vector3<f64>> = {
            let t = tape.val(positions);
            (0..t.rows()).map(|r| t.row_vector3(r)).collect()
        };
        if next_points.is_empty() {
            return Err(BackboneError::QueryUncovered { level });
        }
        let lists = knn(&q_vals, next_points, self.k).expect("non-empty next frame");

        let total: usize = lists.iter().map(Vec::len).sum();
        let mut seg = Vec::with_capacity(total);
        let mut local_rows = Vec::with_capacity(total);
        let mut nbr_pos = Vec::with_capacity(total * 3);
        for (qi, list) in lists.iter().enumerate() {
            for &j in list {
                let row = next_feats
                    .row_of(j)
                    .ok_or(BackboneError::MaskTooTight { level, point: j })?;
                seg.push(qi);
                local_rows.push(row);
                let p = next_points[j];
                nbr_pos.extend_from_slice(&[p.x, p.y, p.z]);
            }
        }
        let seg = Rc::new(seg);
        let nbr = tape.constant(Tensor::from_vec(total, 3, nbr_pos));
        let q_rows = tape.gather_rows(positions, seg.clone());
        let fq_rows = tape.gather_rows(appearance, seg.clone());
        let fp_rows = tape.gather_rows(next_feats.var, Rc::new(local_rows));
        let rel_cost = tape.sub(nbr, q_rows); // p_j - q
        let cost_in = tape.concat_cols(&[fq_rows, fp_rows, rel_cost]);
        let cost = self.cost.fwd(b, cost_in);
        let rel_w = tape.sub(q_rows, nbr); // q - p_j
        let w = self.wnet.fwd(b, rel_w);
        let prod = tape.mul(w, cost);
        Ok(tape.segment_sum(prod, seg, q_vals.len()))
    }
}

/// Patch-to-patch cost volume between two frames at one level: matching
/// costs are aggregated over the next-frame neighborhoods of each point in
/// the current frame's neighborhood, then over that neighborhood itself.
#[derive(Debug, Clone)]
pub struct PatchCostVolume {
    pub cost: Mlp,
    pub wnet_t: Mlp,
    pub wnet_t1: Mlp,
    pub k: usize,
}

impl PatchCostVolume {
    pub fn new(name: String, width: usize, cfg: &ModelConfig) -> Self {
        Self {
            cost: Mlp::new(
                format!("{name}.cost"),
                &[width + width + 3, cfg.cost_dim, cfg.cost_dim],
            ),
            wnet_t: Mlp::new(format!("{name}.wt"), &[3, cfg.weightnet_hidden, cfg.cost_dim]),
            wnet_t1: Mlp::new(
                format!("{name}.wt1"),
                &[3, cfg.weightnet_hidden, cfg.cost_dim],
            ),
            k: cfg.patch_k,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.cost.init(store, rng);
        self.wnet_t.init(store, rng);
        self.wnet_t1.init(store, rng);
    }

    /// Per-point cost vectors for frame `t` against frame `t+1`.
    pub fn fwd(
        &self,
        b: &Binder,
        points_t: &[Vector3<f64>],
        feats_t: Var,
        points_t1: &[Vector3<f64>],
        feats_t1: Var,
    ) -> Var {
        let tape = b.tape();
        let n = points_t.len();
        let same = knn(points_t, points_t, self.k).expect("non-empty frame");
        let cross = knn(points_t, points_t1, self.k).expect("non-empty next frame");

        // Inner sum: for every frame-t point u, aggregate costs over its
        // frame-(t+1) neighbors j.
        let mut seg_u = Vec::new();
        let mut gather_j = Vec::new();
        let mut rel_cost = Vec::new();
        let mut rel_w = Vec::new();
        for (u, list) in cross.iter().enumerate() {
            for &j in list {
                seg_u.push(u);
                gather_j.push(j);
                let d = points_t1[j] - points_t[u];
                rel_cost.extend_from_slice(&[d.x, d.y, d.z]);
                rel_w.extend_from_slice(&[-d.x, -d.y, -d.z]);
            }
        }
        let m2 = gather_j.len();
        let fu_rows = tape.gather_rows(feats_t, Rc::new(seg_u.clone()));
        let fj_rows = tape.gather_rows(feats_t1, Rc::new(gather_j));
        let rel_cost = tape.constant(Tensor::from_vec(m2, 3, rel_cost));
        let cost_in = tape.concat_cols(&[fu_rows, fj_rows, rel_cost]);
        let cost = self.cost.fwd(b, cost_in);
        let w1 = {
            let rel = tape.constant(Tensor::from_vec(m2, 3, rel_w));
            self.wnet_t1.fwd(b, rel)
        };
        let weighted = tape.mul(w1, cost);
        let inner = tape.segment_sum(weighted, Rc::new(seg_u), n);

        // Outer sum over the frame-t neighborhood of each point i.
        let mut seg_i = Vec::new();
        let mut gather_u = Vec::new();
        let mut rel_outer = Vec::new();
        for (i, list) in same.iter().enumerate() {
            for &u in list {
                seg_i.push(i);
                gather_u.push(u);
                let d = points_t[i] - points_t[u];
                rel_outer.extend_from_slice(&[d.x, d.y, d.z]);
            }
        }
        let m1 = gather_u.len();
        let s_rows = tape.gather_rows(inner, Rc::new(gather_u));
        let w0 = {
            let rel = tape.constant(Tensor::from_vec(m1, 3, rel_outer));
            self.wnet_t.fwd(b, rel)
        };
        let weighted = tape.mul(w0, s_rows);
        tape.segment_sum(weighted, Rc::new(seg_i), n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::backbone::LevelFeatures;
    use crate::gradcheck::check_gradient;
    use crate::model::Model;
    use crate::nn::Binder;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            encoder_widths: vec![6, 6, 8, 8],
            conv_k: 4,
            patch_k: 3,
            weightnet_hidden: 5,
            cost_dim: 10,
            fusion_width: 8,
            fusion_heads: 2,
            groupnorm_groups: 2,
            predictor_width: 6,
            ..ModelConfig::small()
        }
    }

    fn rand_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(-0.3..0.3),
                    rng.gen_range(0.8..1.4),
                )
            })
            .collect()
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Independent dense re-implementation of the query feature interpolation
    /// (explicit loops over plain slices, no tape).
    fn eq2_oracle(
        model: &Model,
        conv: &QueryFeatureConv,
        q: &Vector3<f64>,
        pts: &[Vector3<f64>],
        feats: &Tensor,
        k: usize,
    ) -> Vec<f64> {
        let lists = knn(&[*q], pts, k).unwrap();
        let width = feats.cols();
        let mut pooled = vec![0.0; width];
        for &j in &lists[0] {
            let rel = [q.x - pts[j].x, q.y - pts[j].y, q.z - pts[j].z];
            let w = mlp_oracle(model, &conv.wnet, &rel);
            for c in 0..width {
                pooled[c] += w[c] * feats.get(j, c);
            }
        }
        mlp_oracle(model, &conv.out, &pooled)
    }

    /// Plain-slice MLP evaluation straight off the parameter store.
    fn mlp_oracle(model: &Model, mlp: &Mlp, input: &[f64]) -> Vec<f64> {
        let mut h = input.to_vec();
        for (i, layer) in mlp.layers.iter().enumerate() {
            let w = model.params.get(&format!("{}.w", layer.name));
            let bias = model.params.get(&format!("{}.b", layer.name));
            let mut out = vec![0.0; layer.dout];
            for (c, o) in out.iter_mut().enumerate() {
                let mut acc = bias.get(0, c);
                for (r, &hv) in h.iter().enumerate() {
                    acc += hv * w.get(r, c);
                }
                *o = acc;
            }
            if i + 1 < mlp.layers.len() {
                for v in out.iter_mut() {
                    if *v < 0.0 {
                        *v *= crate::nn::LEAKY_SLOPE;
                    }
                }
            }
            h = out;
        }
        h
    }

    #[test]
    fn query_feature_matches_dense_oracle() {
        let cfg = tiny_cfg();
        let model = Model::init(cfg.clone(), 31);
        let nets = model.nets();
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let pts = rand_points(&mut rng, 32);
        let feats = rand_tensor(&mut rng, 32, cfg.width(0));
        let queries = rand_points(&mut rng, 5);

        let tape = Tape::new();
        let b = Binder::frozen(&tape, &model.params);
        let fvar = tape.constant(feats.clone());
        let lf = LevelFeatures::full(fvar, 32);
        let qvar = tape.constant(Tensor::from_points(&queries));
        let out = nets.query_conv[0].fwd(&b, qvar, 0, &pts, &lf).unwrap();
        let got = tape.value(out);

        for (qi, q) in queries.iter().enumerate() {
            let want = eq2_oracle(&model, &nets.query_conv[0], q, &pts, &feats, cfg.conv_k);
            for (a, bv) in got.row(qi).iter().zip(&want) {
                assert!((a - bv).abs() < 1e-6, "{a} vs {bv}");
            }
        }
    }

    #[test]
    fn identical_queries_give_identical_features() {
        let cfg = tiny_cfg();
        let model = Model::init(cfg.clone(), 32);
        let nets = model.nets();
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let pts = rand_points(&mut rng, 24);
        let feats = rand_tensor(&mut rng, 24, cfg.width(0));

        let tape = Tape::new();
        let b = Binder::frozen(&tape, &model.params);
        let fvar = tape.constant(feats);
        let lf = LevelFeatures::full(fvar, 24);
        let q = Vector3::new(0.05, 0.0, 1.0);
        let qvar = tape.constant(Tensor::from_points(&[q, q]));
        let out = nets.query_conv[0].fwd(&b, qvar, 0, &pts, &lf).unwrap();
        let v = tape.value(out);
        assert_eq!(v.row(0), v.row(1));
    }

    #[test]
    fn zero_features_collapse_to_bias_pathway() {
        let cfg = tiny_cfg();
        let model = Model::init(cfg.clone(), 33);
        let nets = model.nets();
        let mut rng = ChaCha8Rng::seed_from_u64(102);
        let pts = rand_points(&mut rng, 24);

        let tape = Tape::new();
        let b = Binder::frozen(&tape, &model.params);
        let fvar = tape.constant(Tensor::zeros(24, cfg.width(0)));
        let lf = LevelFeatures::full(fvar, 24);
        let queries = rand_points(&mut rng, 3);
        let qvar = tape.constant(Tensor::from_points(&queries));
        let out = nets.query_conv[0].fwd(&b, qvar, 0, &pts, &lf).unwrap();
        let v = tape.value(out);
        // With zero decoder features the pooled sum is zero regardless of the
        // query, so every query maps to the same bias-driven output.
        assert_eq!(v.row(0), v.row(1));
        assert_eq!(v.row(1), v.row(2));
    }

    #[test]
    fn query_cost_volume_matches_dense_oracle() {
        let cfg = tiny_cfg();
        let model = Model::init(cfg.clone(), 34);
        let nets = model.nets();
        let mut rng = ChaCha8Rng::seed_from_u64(103);
        let next_pts = rand_points(&mut rng, 40);
        let next_feats = rand_tensor(&mut rng, 40, cfg.width(0));
        let queries = rand_points(&mut rng, 4);
        let q_feats = rand_tensor(&mut rng, 4, cfg.width(0));

        let tape = Tape::new();
        let b = Binder::frozen(&tape, &model.params);
        let nf = LevelFeatures::full(tape.constant(next_feats.clone()), 40);
        let qvar = tape.constant(Tensor::from_points(&queries));
        let fvar = tape.constant(q_feats.clone());
        let out = nets.query_cost[0]
            .fwd(&b, qvar, fvar, 0, &next_pts, &nf)
            .unwrap();
        let got = tape.value(out);

        let qc = &nets.query_cost[0];
        for (qi, q) in queries.iter().enumerate() {
            let lists = knn(&[*q], &next_pts, cfg.conv_k).unwrap();
            let mut want = vec![0.0; cfg.cost_dim];
            for &j in &lists[0] {
                let p = next_pts[j];
                let mut cost_in = q_feats.row(qi).to_vec();
                cost_in.extend_from_slice(next_feats.row(j));
                cost_in.extend_from_slice(&[p.x - q.x, p.y - q.y, p.z - q.z]);
                let cost = mlp_oracle(&model, &qc.cost, &cost_in);
                let w = mlp_oracle(&model, &qc.wnet, &[q.x - p.x, q.y - p.y, q.z - p.z]);
                for c in 0..cfg.cost_dim {
                    want[c] += w[c] * cost[c];
                }
            }
            for (a, bv) in got.row(qi).iter().zip(&want) {
                assert!((a - bv).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn query_cost_volume_single_neighbor_degenerate_sum() {
        let mut cfg = tiny_cfg();
        cfg.conv_k = 1;
        let model = Model::init(cfg.clone(), 35);
        let nets = model.nets();
        let mut rng = ChaCha8Rng::seed_from_u64(104);
        let next_pts = vec![Vector3::new(0.1, 0.0, 1.0)];
        let next_feats = rand_tensor(&mut rng, 1, cfg.width(0));
        let q = Vector3::new(0.0, 0.0, 1.0);
        let q_feats = rand_tensor(&mut rng, 1, cfg.width(0));

        let tape = Tape::new();
        let b = Binder::frozen(&tape, &model.params);
        let nf = LevelFeatures::full(tape.constant(next_feats.clone()), 1);
        let qvar = tape.constant(Tensor::from_points(&[q]));
        let fvar = tape.constant(q_feats.clone());
        let out = nets.query_cost[0]
            .fwd(&b, qvar, fvar, 0, &next_pts, &nf)
            .unwrap();
        let got = tape.value(out);

        let qc = &nets.query_cost[0];
        let p = next_pts[0];
        let mut cost_in = q_feats.row(0).to_vec();
        cost_in.extend_from_slice(next_feats.row(0));
        cost_in.extend_from_slice(&[p.x - q.x, p.y - q.y, p.z - q.z]);
        let cost = mlp_oracle(&model, &qc.cost, &cost_in);
        let w = mlp_oracle(&model, &qc.wnet, &[q.x - p.x, q.y - p.y, q.z - p.z]);
        for c in 0..cfg.cost_dim {
            assert!((got.get(0, c) - w[c] * cost[c]).abs() < 1e-9);
        }
    }

    #[test]
    fn query_cost_volume_permutation_invariant_in_next_frame() {
        let cfg = tiny_cfg();
        let model = Model::init(cfg.clone(), 36);
        let nets = model.nets();
        let mut rng = ChaCha8Rng::seed_from_u64(105);
        let next_pts = rand_points(&mut rng, 30);
        let next_feats = rand_tensor(&mut rng, 30, cfg.width(0));
        let queries = rand_points(&mut rng, 3);
        let q_feats = rand_tensor(&mut rng, 3, cfg.width(0));

        let eval = |pts: &[Vector3<f64>], feats: &Tensor| {
            let tape = Tape::new();
            let b = Binder::frozen(&tape, &model.params);
            let nf = LevelFeatures::full(tape.constant(feats.clone()), pts.len());
            let qvar = tape.constant(Tensor::from_points(&queries));
            let fvar = tape.constant(q_feats.clone());
            let out = nets.query_cost[0].fwd(&b, qvar, fvar, 0, pts, &nf).unwrap();
            tape.value(out)
        };
        let base = eval(&next_pts, &next_feats);

        let mut perm: Vec<usize> = (0..next_pts.len()).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let pts_p: Vec<Vector3<f64>> = perm.iter().map(|&i| next_pts[i]).collect();
        let mut feats_p = Tensor::zeros(next_pts.len(), cfg.width(0));
        for (new_i, &old_i) in perm.iter().enumerate() {
            for c in 0..cfg.width(0) {
                feats_p.set(new_i, c, next_feats.get(old_i, c));
            }
        }
        let shuffled = eval(&pts_p, &feats_p);
        for (a, bv) in base.data().iter().zip(shuffled.data()) {
            assert!((a - bv).abs() < 1e-6);
        }
    }

    #[test]
    fn patch_cost_volume_matches_triple_loop_oracle() {
        let cfg = tiny_cfg();
        let model = Model::init(cfg.clone(), 37);
        let nets = model.nets();
        let mut rng = ChaCha8Rng::seed_from_u64(106);
        let pts_t = rand_points(&mut rng, 20);
        let pts_t1 = rand_points(&mut rng, 22);
        let feats_t = rand_tensor(&mut rng, 20, cfg.width(0));
        let feats_t1 = rand_tensor(&mut rng, 22, cfg.width(0));

        let tape = Tape::new();
        let b = Binder::frozen(&tape, &model.params);
        let ft = tape.constant(feats_t.clone());
        let ft1 = tape.constant(feats_t1.clone());
        let out = nets.patch_cost[0].fwd(&b, &pts_t, ft, &pts_t1, ft1);
        let got = tape.value(out);

        let pc = &nets.patch_cost[0];
        let same = knn(&pts_t, &pts_t, cfg.patch_k).unwrap();
        let cross = knn(&pts_t, &pts_t1, cfg.patch_k).unwrap();
        for i in 0..pts_t.len() {
            let mut want = vec![0.0; cfg.cost_dim];
            for &u in &same[i] {
                let w_outer = mlp_oracle(
                    &model,
                    &pc.wnet_t,
                    &[
                        pts_t[i].x - pts_t[u].x,
                        pts_t[i].y - pts_t[u].y,
                        pts_t[i].z - pts_t[u].z,
                    ],
                );
                let mut inner = vec![0.0; cfg.cost_dim];
                for &j in &cross[u] {
                    let w_inner = mlp_oracle(
                        &model,
                        &pc.wnet_t1,
                        &[
                            pts_t[u].x - pts_t1[j].x,
                            pts_t[u].y - pts_t1[j].y,
                            pts_t[u].z - pts_t1[j].z,
                        ],
                    );
                    let mut cost_in = feats_t.row(u).to_vec();
                    cost_in.extend_from_slice(feats_t1.row(j));
                    cost_in.extend_from_slice(&[
                        pts_t1[j].x - pts_t[u].x,
                        pts_t1[j].y - pts_t[u].y,
                        pts_t1[j].z - pts_t[u].z,
                    ]);
                    let cost = mlp_oracle(&model, &pc.cost, &cost_in);
                    for c in 0..cfg.cost_dim {
                        inner[c] += w_inner[c] * cost[c];
                    }
                }
                for c in 0..cfg.cost_dim {
                    want[c] += w_outer[c] * inner[c];
                }
            }
            for (a, bv) in got.row(i).iter().zip(&want) {
                assert!((a - bv).abs() < 1e-6, "point {i}: {a} vs {bv}");
            }
        }
    }

    #[test]
    fn patch_cost_volume_singleton_neighborhoods() {
        let mut cfg = tiny_cfg();
        cfg.patch_k = 1;
        let model = Model::init(cfg.clone(), 38);
        let nets = model.nets();
        let mut rng = ChaCha8Rng::seed_from_u64(107);
        let pts_t = vec![Vector3::new(0.0, 0.0, 1.0)];
        let pts_t1 = vec![Vector3::new(0.02, 0.0, 1.0)];
        let feats_t = rand_tensor(&mut rng, 1, cfg.width(0));
        let feats_t1 = rand_tensor(&mut rng, 1, cfg.width(0));

        let tape = Tape::new();
        let b = Binder::frozen(&tape, &model.params);
        let ft = tape.constant(feats_t.clone());
        let ft1 = tape.constant(feats_t1.clone());
        let out = nets.patch_cost[0].fwd(&b, &pts_t, ft, &pts_t1, ft1);
        let got = tape.value(out);

        // Both neighborhoods are singletons (u = i = 0, j = 0), so the result
        // is W_t(0) ∘ W_t1 ∘ cost of the single pair.
        let pc = &nets.patch_cost[0];
        let w_outer = mlp_oracle(&model, &pc.wnet_t, &[0.0, 0.0, 0.0]);
        let w_inner = mlp_oracle(&model, &pc.wnet_t1, &[-0.02, 0.0, 0.0]);
        let mut cost_in = feats_t.row(0).to_vec();
        cost_in.extend_from_slice(feats_t1.row(0));
        cost_in.extend_from_slice(&[0.02, 0.0, 0.0]);
        let cost = mlp_oracle(&model, &pc.cost, &cost_in);
        for c in 0..cfg.cost_dim {
            let want = w_outer[c] * w_inner[c] * cost[c];
            assert!((got.get(0, c) - want).abs() < 1e-9);
        }
    }

    #[test]
    fn cost_volume_gradients_match_fd() {
        let cfg = tiny_cfg();
        let model = Model::init(cfg.clone(), 39);
        let nets = model.nets();
        let mut rng = ChaCha8Rng::seed_from_u64(108);
        let next_pts = rand_points(&mut rng, 16);
        let next_feats0 = rand_tensor(&mut rng, 16, cfg.width(0));
        let queries = rand_points(&mut rng, 2);
        let q_feats0 = rand_tensor(&mut rng, 2, cfg.width(0));
        let q_pos0 = Tensor::from_points(&queries);

        let build = |inputs: &[Tensor]| {
            let tape = Tape::new();
            let b = Binder::frozen(&tape, &model.params);
            let q_pos = tape.leaf(inputs[0].clone());
            let q_feats = tape.leaf(inputs[1].clone());
            let nf_var = tape.leaf(inputs[2].clone());
            let nf = LevelFeatures::full(nf_var, 16);
            let out = nets.query_cost[0]
                .fwd(&b, q_pos, q_feats, 0, &next_pts, &nf)
                .unwrap();
            let loss = tape.mean_all(out);
            (tape, vec![q_pos, q_feats, nf_var], loss)
        };
        let err = check_gradient(&[q_pos0, q_feats0, next_feats0], build, 1e-6);
        assert!(err < 1e-4, "query cost volume FD: {err}");
    }
}
