//! Online long-term 3D point tracking in dynamic point clouds.
//!
//! Given a sequence of 3D point clouds and a set of query points, the tracker
//! predicts per-frame 3D motion and an occlusion flag for every query,
//! autoregressively. Matching information comes from cost volumes built
//! against several stored past appearances of each query; a motion prior over
//! the recent trajectory is fused with those cost volumes by cross-attention,
//! so tracking can coast through occlusions on motion alone.
//!
//! The crate is organized as a library plus one thin `pointtrack3d` binary.
//! Major pieces:
//!
//! - [`geometry`] — point-cloud containers, grid subsampling, kNN, pinhole
//!   camera projection, depth-map sampling.
//! - [`autodiff`] / [`nn`] — a small f64 reverse-mode tape and the layers
//!   built on it (linear, MLP, group norm, point convolution plumbing).
//! - [`backbone`] — hierarchical point U-Net encoder/decoder with selective
//!   decoding around query points.
//! - [`costvolume`] — patch-to-patch cost volume for the scene-flow path and
//!   the simplified per-query cost volume for tracking.
//! - [`fusion`] — the cost volume fusion module: motion-prior encoder,
//!   cross-attention over per-appearance cost features plus a learnable
//!   token, per-level flow and occlusion heads.
//! - [`tracker`] — the autoregressive tracking loop and forward/backward
//!   inference for mid-video queries.
//! - [`losses`] — training losses and their weighted total.
//! - [`synthdata`] / [`dataset`] — synthetic dynamic-scene generation with
//!   ground-truth trajectories and the on-disk sequence format.
//! - [`training`] — two-stage training (scene-flow pretraining, then
//!   tracking with the backbone frozen) and checkpointing.
//! - [`evalkit`] — metrics, baselines (scene-flow chaining, 2D-track
//!   lifting) and the ablation harnesses.
//! - [`cli`] — the subcommand interface used by the binary.
//!
//! See the crate `examples/` directory for runnable entry points covering
//! each capability, and `tests/acceptance.rs` for the acceptance suite.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod costvolume;
pub mod dataset;
pub mod evalkit;
pub mod fusion;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod nn;
pub mod synthdata;
pub mod training;
pub mod tracker;

pub use geometry::{CameraModel, DepthMap, PointCloudFrame};
pub use model::{Model, ModelConfig};
