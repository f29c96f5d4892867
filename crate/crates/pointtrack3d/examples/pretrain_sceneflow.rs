//! Stage-1 scene-flow pretraining demo: overfit one fixed rigid pair and
//! watch the end-point error drop.
//!
//! ```bash
//! cargo run --example pretrain_sceneflow -- [steps] [lr]
//! ```

use pointtrack3d::autodiff::Tensor;
use pointtrack3d::losses::{epe3d, Stage};
use pointtrack3d::model::{Model, ModelConfig};
use pointtrack3d::synthdata::{generate_sequence, scenes, simulate_sceneflow_pair, SequenceRecord};
use pointtrack3d::training::{infer_scene_flow, SceneFlowCorpus, TrainConfig, Trainer};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3e-4);

    // A fixed rigid pair fabricated from one synthetic frame.
    let seq = generate_sequence(&scenes::two_movers(0, 700, 3), 100).unwrap();
    let (a, b, flow) = simulate_sceneflow_pair(&seq.frames[0], 0.03, 0.04, 5);
    println!(
        "pair: {} points, mean GT flow {:.3} m",
        a.len(),
        flow.iter().map(|v| v.norm()).sum::<f64>() / flow.len() as f64
    );

    let pair_seq = SequenceRecord {
        frames: vec![a.clone(), b.clone()],
        depth_maps: vec![seq.depth_maps[0].clone(); 2],
        cameras: vec![seq.cameras[0].clone(); 2],
        queries: vec![],
        gt_tracks: vec![],
        gt_flow: vec![flow.clone()],
        point_ids: vec![
            (0..a.len() as u32).collect(),
            (0..b.len() as u32).collect(),
        ],
    };
    let corpus = SceneFlowCorpus::new(vec![pair_seq]);

    let tcfg = TrainConfig {
        stage: Stage::Pretrain,
        steps,
        batch_size: 1,
        points_per_frame: a.len(),
        lr,
        seed: 3,
        hflip: false,
        scale_augment: false,
        tflip: false,
        simulated_pair_fraction: 0.0,
        ..Default::default()
    };
    let mut trainer = Trainer::new(Model::init(ModelConfig::small(), 7), tcfg);
    let gt = Tensor::from_points(&flow);
    let started = Instant::now();
    for s in 0..steps {
        let stats = trainer.step_sceneflow(&corpus).unwrap();
        if (s + 1) % 25 == 0 || s == 0 {
            let (_, pred) = infer_scene_flow(&trainer.model, &a, &b).unwrap();
            let epe = epe3d(&pred, &gt);
            println!(
                "step {:4}  loss {:.5}  EPE3D {:.5} m  [{:.1}s]",
                s + 1,
                stats.total,
                epe,
                started.elapsed().as_secs_f64()
            );
            if epe < 0.005 {
                println!("converged below 5 mm at step {}", s + 1);
                break;
            }
        }
    }
}
