//! Model configuration and parameter assembly for both network paths: the
//! dense scene-flow path (patch-to-patch cost volume + flow heads) and the
//! tracking path (query cost volumes + cost volume fusion).

use crate::autodiff::{Tensor, Var};
use crate::backbone::{upsample_3nn, BackboneNet, LevelFeatures};
use crate::checkpoint;
use crate::costvolume::{PatchCostVolume, QueryCostVolume, QueryFeatureConv};
use crate::fusion::{FlowHead, FusionBlock, MotionPriorEncoder, OcclusionHead};
use crate::geometry::PointHierarchy;
use crate::nn::{Binder, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Tracker capability switches for the appearance/motion ablation. The mode
/// is part of the config so a checkpoint self-describes its variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Multiple stored appearances fused with the motion prior.
    #[default]
    Full,
    /// Multiple appearances, motion prior input zeroed.
    MultiAppearance,
    /// Only the most recent visible appearance, motion prior input zeroed.
    SingleAppearance,
}

/// Architecture hyperparameters. The defaults are the desk-scale reference
/// configuration; every run echoes its config into the checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Pyramid depth; level 1 is the densest.
    pub levels: usize,
    /// Per-level voxel edge in meters. The level-1 entry is a nominal point
    /// spacing used only for radius heuristics; subsampling starts at level 2.
    pub grid_sizes: Vec<f64>,
    /// Encoder channel widths per level; the decoder mirrors them.
    pub encoder_widths: Vec<usize>,
    /// Neighborhood size for all point convolutions and query cost volumes.
    pub conv_k: usize,
    /// Neighborhood size for both nested sums of the patch-to-patch cost
    /// volume.
    pub patch_k: usize,
    /// Hidden width of the relative-coordinate weight MLPs.
    pub weightnet_hidden: usize,
    /// Cost vector width (cost MLPs are two layers of this width).
    pub cost_dim: usize,
    /// Transformer model width for the fusion module.
    pub fusion_width: usize,
    pub fusion_layers: usize,
    pub fusion_heads: usize,
    pub groupnorm_groups: usize,
    /// Number of past motions in the motion prior buffer.
    pub motion_history: usize,
    /// Width of the predictor features passed from coarse to fine levels.
    pub predictor_width: usize,
    /// Maximum stored appearance snapshots per query.
    pub max_appearances: usize,
    /// Minimum input points per frame accepted by the encoder.
    pub min_input_points: usize,
    pub ablation: AblationMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            grid_sizes: vec![0.02, 0.04, 0.08, 0.16],
            encoder_widths: vec![32, 64, 128, 256],
            conv_k: 16,
            patch_k: 8,
            weightnet_hidden: 16,
            cost_dim: 128,
            fusion_width: 128,
            fusion_layers: 2,
            fusion_heads: 4,
            groupnorm_groups: 8,
            motion_history: 8,
            predictor_width: 64,
            max_appearances: 4,
            min_input_points: 8,
            ablation: AblationMode::Full,
        }
    }
}

impl ModelConfig {
    /// Reduced widths for fast experiments; same topology as the default.
    pub fn small() -> Self {
        Self {
            encoder_widths: vec![16, 24, 32, 48],
            conv_k: 8,
            patch_k: 6,
            weightnet_hidden: 8,
            cost_dim: 48,
            fusion_width: 48,
            fusion_layers: 2,
            fusion_heads: 2,
            groupnorm_groups: 4,
            predictor_width: 24,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.levels < 2 {
            return Err("need at least two pyramid levels".into());
        }
        if self.grid_sizes.len() != self.levels || self.encoder_widths.len() != self.levels {
            return Err("grid_sizes and encoder_widths must have one entry per level".into());
        }
        if self.fusion_width % self.fusion_heads != 0 {
            return Err("fusion_width must be divisible by fusion_heads".into());
        }
        if self.fusion_width % self.groupnorm_groups != 0 {
            return Err("fusion_width must be divisible by groupnorm_groups".into());
        }
        if self.grid_sizes.iter().any(|g| *g <= 0.0) {
            return Err("grid sizes must be positive".into());
        }
        Ok(())
    }

    /// Selective-decoding radii for the two densest levels: a conservative
    /// receptive-field cover of `2 * grid_size(l) * K^(1/3)`.
    pub fn decode_radii(&self) -> Vec<f64> {
        let factor = 2.0 * (self.conv_k as f64).cbrt();
        self.grid_sizes.iter().map(|g| g * factor).collect()
    }

    /// Decoder width at a level (mirrors the encoder).
    pub fn width(&self, level: usize) -> usize {
        self.encoder_widths[level]
    }
}

/// Descriptor bundle for every sub-network; rebuilt cheaply from the config.
pub struct Nets {
    pub backbone: BackboneNet,
    pub patch_cost: Vec<PatchCostVolume>,
    pub dense_heads: Vec<FlowHead>,
    pub query_conv: Vec<QueryFeatureConv>,
    pub query_cost: Vec<QueryCostVolume>,
    pub motion_enc: Vec<MotionPriorEncoder>,
    pub fusion: Vec<FusionBlock>,
    pub track_heads: Vec<FlowHead>,
    pub occ_heads: Vec<OcclusionHead>,
}

impl Nets {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        let backbone = BackboneNet::from_config(cfg);
        let mut patch_cost = Vec::new();
        let mut dense_heads = Vec::new();
        let mut query_conv = Vec::new();
        let mut query_cost = Vec::new();
        let mut motion_enc = Vec::new();
        let mut fusion = Vec::new();
        let mut track_heads = Vec::new();
        let mut occ_heads = Vec::new();
        for l in 0..cfg.levels {
            let w = cfg.width(l);
            patch_cost.push(PatchCostVolume::new(format!("dense.cost{l}"), w, cfg));
            dense_heads.push(FlowHead::new(
                format!("dense.head{l}"),
                cfg.cost_dim + cfg.predictor_width + w + 3,
                cfg.predictor_width,
            ));
            query_conv.push(QueryFeatureConv::new(format!("query.conv{l}"), w, cfg));
            query_cost.push(QueryCostVolume::new(format!("query.cost{l}"), w, cfg));
            motion_enc.push(MotionPriorEncoder::new(format!("fusion.motion{l}"), cfg));
            fusion.push(FusionBlock::new(
                format!("fusion.block{l}"),
                cfg.cost_dim + w,
                cfg,
            ));
            track_heads.push(FlowHead::new(
                format!("fusion.head{l}"),
                cfg.fusion_width + cfg.predictor_width + w + 3,
                cfg.predictor_width,
            ));
            occ_heads.push(OcclusionHead::new(format!("fusion.occ{l}"), cfg));
        }
        Self {
            backbone,
            patch_cost,
            dense_heads,
            query_conv,
            query_cost,
            motion_enc,
            fusion,
            track_heads,
            occ_heads,
        }
    }
}

/// A model is a config plus its flat parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Fresh parameters, deterministic per seed.
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        config.validate().expect("invalid model config");
        let nets = Nets::from_config(&config);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        nets.backbone.init(&mut store, &mut rng);
        for l in 0..config.levels {
            nets.patch_cost[l].init(&mut store, &mut rng);
            nets.dense_heads[l].init(&mut store, &mut rng);
            nets.query_conv[l].init(&mut store, &mut rng);
            nets.query_cost[l].init(&mut store, &mut rng);
            nets.motion_enc[l].init(&mut store, &mut rng);
            nets.fusion[l].init(&mut store, &mut rng);
            nets.track_heads[l].init(&mut store, &mut rng);
            nets.occ_heads[l].init(&mut store, &mut rng);
        }
        // Live state stays exactly f32-representable from the start; see
        // ParamStore::quantize_f32.
        store.quantize_f32();
        Self {
            config,
            params: store,
        }
    }

    pub fn nets(&self) -> Nets {
        Nets::from_config(&self.config)
    }

    pub fn save(&self, path: &Path, extra: serde_json::Value) -> std::io::Result<()> {
        checkpoint::save(path, &self.config, &self.params, extra)
    }

    pub fn load(path: &Path) -> std::io::Result<(Self, serde_json::Value)> {
        let (config, params, extra) = checkpoint::load(path)?;
        Ok((Self { config, params }, extra))
    }
}

/// Dense scene-flow forward pass: per level, a patch-to-patch cost volume
/// between the two frames' decoder features feeds the flow predictor; flow
/// and predictor features propagate coarse-to-fine by inverse-distance 3-NN
/// upsampling. Returns one `N_l×3` flow per level, densest first.
#[allow(clippy::too_many_arguments)]
pub fn scene_flow_forward(
    b: &Binder,
    nets: &Nets,
    cfg: &ModelConfig,
    hier_t: &PointHierarchy,
    dec_t: &[LevelFeatures],
    hier_t1: &PointHierarchy,
    dec_t1: &[LevelFeatures],
) -> Vec<Var> {
    let tape = b.tape();
    let levels = cfg.levels.min(hier_t.num_levels());
    let mut flows: Vec<Option<Var>> = vec![None; levels];
    let mut coarse_flow: Option<Var> = None;
    let mut coarse_feat: Option<Var> = None;
    for l in (0..levels).rev() {
        let n = hier_t.levels[l].points.len();
        let cost = nets.patch_cost[l].fwd(
            b,
            &hier_t.levels[l].points,
            dec_t[l].var,
            &hier_t1.levels[l].points,
            dec_t1[l].var,
        );
        let (up_flow, up_feat) = match (coarse_flow, coarse_feat) {
            (Some(f), Some(p)) => (
                upsample_3nn(b, f, &hier_t.levels[l], &hier_t.levels[l + 1].points),
                upsample_3nn(b, p, &hier_t.levels[l], &hier_t.levels[l + 1].points),
            ),
            _ => (
                tape.constant(Tensor::zeros(n, 3)),
                tape.constant(Tensor::zeros(n, cfg.predictor_width)),
            ),
        };
        let head_in = tape.concat_cols(&[cost, up_feat, dec_t[l].var, up_flow]);
        let (feat, resid) = nets.dense_heads[l].fwd(b, head_in);
        let flow = tape.add(up_flow, resid);
        flows[l] = Some(flow);
        coarse_flow = Some(flow);
        coarse_feat = Some(feat);
    }
    flows.into_iter().map(Option::unwrap).collect()
}
