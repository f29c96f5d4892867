//! End-to-end tracking and evaluation: train a small model on an occlusion
//! corpus, track held-out sequences forward+backward, and compare against
//! the scene-flow chaining baseline.
//!
//! ```bash
//! cargo run --example track_and_eval -- [stage1_steps] [stage2_steps] [eval_seqs]
//! ```

use pointtrack3d::evalkit::{
    chain_sceneflow, compute_metrics, format_table, FlowSource, Space,
};
use pointtrack3d::losses::Stage;
use pointtrack3d::model::{Model, ModelConfig};
use pointtrack3d::synthdata::{generate_sequence, scenes, SequenceRecord};
use pointtrack3d::tracker::{track_sequence, Stepper, TrajectoryRecord};
use pointtrack3d::training::{SceneFlowCorpus, TrainConfig, Trainer};
use std::time::Instant;

fn pool(
    seqs: &[SequenceRecord],
    mut run: impl FnMut(&SequenceRecord) -> Vec<TrajectoryRecord>,
) -> (Vec<TrajectoryRecord>, Vec<TrajectoryRecord>) {
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for (i, seq) in seqs.iter().enumerate() {
        for (mut r, mut g) in run(seq).into_iter().zip(seq.gt_tracks.iter().cloned()) {
            r.query_id += (i * 1000) as u32;
            g.query_id += (i * 1000) as u32;
            pred.push(r);
            gt.push(g);
        }
    }
    (pred, gt)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let s1: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(150);
    let s2: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(250);
    let n_eval: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(4);
    let started = Instant::now();

    // Training corpus: occlusion passes + free movers.
    let mut corpus = Vec::new();
    for i in 0..4u64 {
        corpus.push(generate_sequence(&scenes::occlusion_pass(i, 700, 16), 1000 + i).unwrap());
        corpus.push(generate_sequence(&scenes::two_movers(100 + i, 700, 16), 2000 + i).unwrap());
    }

    let t1 = TrainConfig {
        stage: Stage::Pretrain,
        steps: s1,
        batch_size: 1,
        points_per_frame: 700,
        lr: 3e-4,
        seed: 31,
        tflip: false,
        simulated_pair_fraction: 0.4,
        ..Default::default()
    };
    let mut tr1 = Trainer::new(Model::init(ModelConfig::small(), 7), t1);
    for _ in 0..s1 {
        tr1.step_sceneflow(&SceneFlowCorpus::new(corpus.clone())).unwrap();
    }
    println!("stage 1 done [{:.0}s]", started.elapsed().as_secs_f64());

    let t2 = TrainConfig {
        stage: Stage::Track,
        steps: s2,
        batch_size: 1,
        clip_frames: 8,
        points_per_frame: 700,
        queries_per_clip: 16,
        lr: 3e-4,
        seed: 32,
        ..Default::default()
    };
    let mut tr2 = Trainer::new(tr1.model.clone(), t2);
    for _ in 0..s2 {
        tr2.step_tracker(&corpus).unwrap();
    }
    println!("stage 2 done [{:.0}s]", started.elapsed().as_secs_f64());

    // Held-out occlusion sequences.
    let eval: Vec<SequenceRecord> = (0..n_eval as u64)
        .map(|i| generate_sequence(&scenes::occlusion_pass(500 + i, 700, 24), 9000 + i).unwrap())
        .collect();

    let (pred_t, gt_t) = pool(&eval, |seq| {
        track_sequence(&Stepper::Model(&tr2.model), seq, &seq.queries, false).unwrap()
    });
    let ours = compute_metrics(&pred_t, &gt_t, Space::ThreeD).unwrap();

    let (pred_c, gt_c) = pool(&eval, |seq| {
        chain_sceneflow(seq, &seq.queries, &FlowSource::Model(&tr1.model)).unwrap()
    });
    let chain = compute_metrics(&pred_c, &gt_c, Space::ThreeD).unwrap();

    println!(
        "\n{}",
        format_table(&[
            ("fusion tracker".to_string(), ours),
            ("scene-flow chaining".to_string(), chain),
        ])
    );
    println!("total {:.0}s", started.elapsed().as_secs_f64());
}
