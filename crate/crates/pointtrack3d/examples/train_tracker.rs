//! Stage-2 tracker training demo: pretrain the backbone on one clip's frame
//! pairs, then overfit the fusion tracker on the clip and report position
//! accuracy.
//!
//! ```bash
//! cargo run --example train_tracker -- [stage1_steps] [stage2_steps]
//! ```

use pointtrack3d::evalkit::{compute_metrics, Space};
use pointtrack3d::losses::Stage;
use pointtrack3d::model::{Model, ModelConfig};
use pointtrack3d::synthdata::{generate_sequence, scenes};
use pointtrack3d::tracker::{track_sequence, Stepper};
use pointtrack3d::training::{SceneFlowCorpus, TrainConfig, Trainer};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let s1_steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let s2_steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(200);

    let mut script = scenes::two_movers(1, 700, 8);
    script.objects[0].queries = 4;
    script.objects[1].queries = 16;
    script.objects[2].queries = 12;
    let seq = generate_sequence(&script, 11).unwrap();
    println!(
        "clip: {} frames, ~{} points/frame, {} queries",
        seq.num_frames(),
        seq.frames[0].len(),
        seq.queries.len()
    );

    let started = Instant::now();
    let corpus = SceneFlowCorpus::new(vec![seq.clone()]);
    let t1 = TrainConfig {
        stage: Stage::Pretrain,
        steps: s1_steps,
        batch_size: 1,
        points_per_frame: 700,
        lr: 3e-4,
        seed: 3,
        hflip: false,
        scale_augment: false,
        tflip: false,
        simulated_pair_fraction: 0.3,
        ..Default::default()
    };
    let mut tr1 = Trainer::new(Model::init(ModelConfig::small(), 7), t1);
    for _ in 0..s1_steps {
        tr1.step_sceneflow(&corpus).unwrap();
    }
    println!("stage 1 done [{:.0}s]", started.elapsed().as_secs_f64());

    let t2 = TrainConfig {
        stage: Stage::Track,
        steps: s2_steps,
        batch_size: 1,
        clip_frames: 8,
        points_per_frame: 700,
        queries_per_clip: 32,
        lr: 4e-4,
        seed: 4,
        hflip: false,
        scale_augment: false,
        tflip: false,
        ..Default::default()
    };
    let mut tr2 = Trainer::new(tr1.model.clone(), t2);
    for s in 0..s2_steps {
        let stats = tr2.step_tracker(std::slice::from_ref(&seq)).unwrap();
        if (s + 1) % 20 == 0 || s == 0 {
            let recs =
                track_sequence(&Stepper::Model(&tr2.model), &seq, &seq.queries, false).unwrap();
            let m = compute_metrics(&recs, &seq.gt_tracks, Space::ThreeD).unwrap();
            println!(
                "step {:4}  loss {:.4}  3D d_avg {:.1}  OA {:.1}  [{:.0}s]",
                s + 1,
                stats.total,
                m.delta_avg,
                m.oa,
                started.elapsed().as_secs_f64()
            );
            if m.delta_avg >= 90.0 {
                println!("clip d_avg reached 90 at step {}", s + 1);
                break;
            }
        }
    }
}
