//! Cost volume fusion: encode the recent motion history into a prior vector,
//! cross-attend it over the per-appearance cost features plus a learnable
//! fallback token, and decode refined flow residuals and occlusion logits.
//!
//! The attention query is the motion prior concatenated with a learnable
//! feature token; keys and values are the cost features `[C ‖ f^q]` of each
//! stored appearance plus a learnable token `E`, so the module can fall back
//! to pure motion extrapolation when no appearance matches (total occlusion).
//! Each pyramid level owns a separate set of parameters.

use crate::autodiff::{Tensor, Var};
use crate::model::ModelConfig;
use crate::nn::{Binder, GroupNorm, Linear, Mlp, ParamStore, LEAKY_SLOPE};
use rand_chacha::ChaCha8Rng;
use std::rc::Rc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("motion buffer has {got} values, expected {want}")]
    WrongBufferLength { got: usize, want: usize },
}

/// Encodes the concatenated last-M motion vectors into a prior vector:
/// an MLP followed by group normalization. Zero-initialized buffers at the
/// start of a sequence map to a fixed, query-independent vector.
#[derive(Debug, Clone)]
pub struct MotionPriorEncoder {
    pub mlp: Mlp,
    pub gn: GroupNorm,
    pub input_len: usize,
}

impl MotionPriorEncoder {
    pub fn new(name: String, cfg: &ModelConfig) -> Self {
        let d = cfg.fusion_width;
        Self {
            mlp: Mlp::new(format!("{name}.mlp"), &[cfg.motion_history * 3, d, d]),
            gn: GroupNorm::new(format!("{name}.gn"), d, cfg.groupnorm_groups),
            input_len: cfg.motion_history * 3,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.mlp.init(store, rng);
        self.gn.init(store, rng);
    }

    /// `motions` is `Q×(M*3)`, oldest motion first.
    pub fn fwd(&self, b: &Binder, motions: Var) -> Result<Var, FusionError> {
        let got = b.tape().val(motions).cols();
        if got != self.input_len {
            return Err(FusionError::WrongBufferLength {
                got,
                want: self.input_len,
            });
        }
        let h = self.mlp.fwd(b, motions);
        Ok(self.gn.fwd(b, h))
    }
}

/// Attention weights recorded per decoder layer: one `rows×heads` matrix,
/// rows grouped by query via the segment ids the caller supplied (plus one
/// appended row per query for the fallback token).
pub struct FusionTrace {
    pub attention: Vec<Var>,
    /// Segment id (query index) of each attention row.
    pub segments: Rc<Vec<usize>>,
}

struct AttnLayer {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln1: GroupNorm,
    ffn: Mlp,
    ln2: GroupNorm,
}

/// Cross-attention fusion over the set of per-appearance cost features.
pub struct FusionBlock {
    pub kv_dim: usize,
    pub width: usize,
    pub heads: usize,
    in_mlp: Linear,
    layers: Vec<AttnLayer>,
    out_mlp: Mlp,
    token_f_name: String,
    token_e_name: String,
}

impl FusionBlock {
    pub fn new(name: String, kv_dim: usize, cfg: &ModelConfig) -> Self {
        let d = cfg.fusion_width;
        let layers = (0..cfg.fusion_layers)
            .map(|i| AttnLayer {
                wq: Linear::new(format!("{name}.l{i}.wq"), d, d),
                wk: Linear::new(format!("{name}.l{i}.wk"), kv_dim, d),
                wv: Linear::new(format!("{name}.l{i}.wv"), kv_dim, d),
                wo: Linear::new(format!("{name}.l{i}.wo"), d, d),
                ln1: GroupNorm::new(format!("{name}.l{i}.ln1"), d, 1),
                ffn: Mlp::new(format!("{name}.l{i}.ffn"), &[d, 2 * d, d]),
                ln2: GroupNorm::new(format!("{name}.l{i}.ln2"), d, 1),
            })
            .collect();
        Self {
            kv_dim,
            width: d,
            heads: cfg.fusion_heads,
            in_mlp: Linear::new(format!("{name}.inproj"), 2 * d, d),
            layers,
            out_mlp: Mlp::new(format!("{name}.out"), &[d, d, d]),
            token_f_name: format!("{name}.token_f"),
            token_e_name: format!("{name}.token_e"),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.in_mlp.init(store, rng);
        for l in &self.layers {
            l.wq.init(store, rng);
            l.wk.init(store, rng);
            l.wv.init(store, rng);
            l.wo.init(store, rng);
            l.ln1.init(store, rng);
            l.ffn.init(store, rng);
            l.ln2.init(store, rng);
        }
        self.out_mlp.init(store, rng);
        let limit = (1.0 / self.width as f64).sqrt();
        let tok = |rng: &mut ChaCha8Rng, cols: usize| {
            Tensor::from_vec(
                1,
                cols,
                (0..cols)
                    .map(|_| rand::Rng::gen_range(rng, -limit..limit))
                    .collect(),
            )
        };
        let f = tok(rng, self.width);
        let e = tok(rng, self.kv_dim);
        store.insert(&self.token_f_name, f);
        store.insert(&self.token_e_name, e);
    }

    /// Fuse per-appearance cost features with the motion prior.
    ///
    /// `phi` is `Q×d`; `cost_features` holds one `kv_dim` row per
    /// `(query, appearance)` pair with `segments[row] = query index`
    /// (`None` when every query attends only to the fallback token).
    /// Returns the fused feature `Q×d` and the attention trace.
    pub fn fwd(
        &self,
        b: &Binder,
        phi: Var,
        cost_features: Option<Var>,
        segments: &[usize],
        n_queries: usize,
    ) -> (Var, FusionTrace) {
        let tape = b.tape();
        let d = self.width;
        let dh = d / self.heads;

        // Key/value set: the cost features plus one fallback token per query.
        let e_tok = b.param(&self.token_e_name);
        let e_rows = tape.repeat_row(e_tok, n_queries);
        let (kv, seg): (Var, Vec<usize>) = match cost_features {
            Some(cf) => {
                assert_eq!(tape.val(cf).rows(), segments.len());
                let kv = tape.concat_rows(&[cf, e_rows]);
                let mut seg = segments.to_vec();
                seg.extend(0..n_queries);
                (kv, seg)
            }
            None => (e_rows, (0..n_queries).collect()),
        };
        let seg = Rc::new(seg);

        let f_tok = b.param(&self.token_f_name);
        let f_rows = tape.repeat_row(f_tok, n_queries);
        let entry = tape.concat_cols(&[phi, f_rows]);
        let mut x = self.in_mlp.fwd(b, entry);

        let scale = 1.0 / (dh as f64).sqrt();
        let mut attn_trace = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let q = layer.wq.fwd(b, x);
            let k = layer.wk.fwd(b, kv);
            let v = layer.wv.fwd(b, kv);
            let mut head_outs = Vec::with_capacity(self.heads);
            let mut head_weights = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let qh = tape.slice_cols(q, h * dh, dh);
                let kh = tape.slice_cols(k, h * dh, dh);
                let vh = tape.slice_cols(v, h * dh, dh);
                let q_rows = tape.gather_rows(qh, seg.clone());
                let prod = tape.mul(kh, q_rows);
                let scores = tape.sum_rows(prod);
                let scores = tape.scale(scores, scale);
                let weights = tape.segment_softmax(scores, seg.clone());
                head_weights.push(weights);
                let weighted = tape.mul_col(vh, weights);
                head_outs.push(tape.segment_sum(weighted, seg.clone(), n_queries));
            }
            attn_trace.push(tape.concat_cols(&head_weights));
            let concat = tape.concat_cols(&head_outs);
            let attn_out = layer.wo.fwd(b, concat);
            let res = tape.add(x, attn_out);
            x = layer.ln1.fwd(b, res);
            let f = self.ffn_fwd(layer, b, x);
            let res = tape.add(x, f);
            x = layer.ln2.fwd(b, res);
        }

        let summed = tape.add(x, phi);
        let fused = self.out_mlp.fwd(b, summed);
        (
            fused,
            FusionTrace {
                attention: attn_trace,
                segments: seg,
            },
        )
    }

    fn ffn_fwd(&self, layer: &AttnLayer, b: &Binder, x: Var) -> Var {
        layer.ffn.fwd(b, x)
    }
}

/// Flow predictor head: maps the fused feature, upsampled predictor features,
/// the query's own decoder-feature context and the coarse flow to a flow
/// residual plus the predictor features handed to the next finer level.
/// The residual layer starts at zero so an untrained model predicts zero
/// motion.
#[derive(Debug, Clone)]
pub struct FlowHead {
    pub trunk: Linear,
    pub feat: Linear,
    pub resid: Linear,
}

impl FlowHead {
    pub fn new(name: String, input_dim: usize, predictor_width: usize) -> Self {
        let hidden = 2 * predictor_width;
        Self {
            trunk: Linear::new(format!("{name}.trunk"), input_dim, hidden),
            feat: Linear::new(format!("{name}.feat"), hidden, predictor_width),
            resid: Linear::zeroed(format!("{name}.resid"), hidden, 3),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.trunk.init(store, rng);
        self.feat.init(store, rng);
        self.resid.init(store, rng);
    }

    /// Returns `(predictor features, flow residual)`.
    pub fn fwd(&self, b: &Binder, input: Var) -> (Var, Var) {
        let h = self.trunk.fwd(b, input);
        let h = b.tape().leaky_relu(h, LEAKY_SLOPE);
        (self.feat.fwd(b, h), self.resid.fwd(b, h))
    }
}

/// Per-level occlusion logit head. Inference thresholds the level-1 logit at
/// probability 0.5; a logit of exactly zero classifies as visible.
#[derive(Debug, Clone)]
pub struct OcclusionHead {
    pub mlp: Mlp,
}

impl OcclusionHead {
    pub fn new(name: String, cfg: &ModelConfig) -> Self {
        let d = cfg.fusion_width;
        Self {
            mlp: Mlp::new(name, &[d, d / 2, 1]),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.mlp.init(store, rng);
    }

    pub fn fwd(&self, b: &Binder, fused: Var) -> Var {
        self.mlp.fwd(b, fused)
    }
}

/// Occlusion decision from a logit: occluded iff `P(occluded) > 0.5`.
pub fn occluded_from_logit(logit: f64) -> bool {
    logit > 0.0
}
