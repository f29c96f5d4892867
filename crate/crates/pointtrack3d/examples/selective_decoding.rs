//! Selective decoding demo: decode only the points around the queries at
//! the two densest pyramid levels, report the measured compression rates,
//! and verify the query features match a full decode.
//!
//! ```bash
//! cargo run --example selective_decoding [points] [queries]
//! ```

use nalgebra::Vector3;
use pointtrack3d::autodiff::{Tape, Tensor};
use pointtrack3d::backbone::{adaptive_decode_radii, build_decode_mask, DecodeMask};
use pointtrack3d::geometry::PointHierarchy;
use pointtrack3d::model::{Model, ModelConfig};
use pointtrack3d::nn::Binder;
use pointtrack3d::synthdata::{generate_sequence, scenes};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let points: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(20_000);
    let n_queries: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(32);

    let model = Model::init(ModelConfig::small(), 42);
    let nets = model.nets();
    let cfg = &model.config;

    let seq = generate_sequence(&scenes::two_movers(3, points, 2), 9).unwrap();
    let frame = &seq.frames[0];
    println!("scene: {} points", frame.len());

    // Clustered queries near one of the moving objects.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let anchor = frame.points[frame.len() / 2];
    let queries: Vec<Vector3<f64>> = (0..n_queries)
        .map(|_| {
            anchor
                + Vector3::new(
                    rng.gen_range(-0.05..0.05),
                    rng.gen_range(-0.05..0.05),
                    rng.gen_range(-0.05..0.05),
                )
        })
        .collect();

    let hierarchy = PointHierarchy::build(&frame.points, &cfg.grid_sizes, cfg.conv_k).unwrap();
    let radii = adaptive_decode_radii(&hierarchy, &cfg.decode_radii());
    let mask = build_decode_mask(&hierarchy, &queries, &radii);
    println!(
        "compression rates: level 1 = {:.2}, level 2 = {:.2}",
        mask.compression_rates[0], mask.compression_rates[1]
    );

    let mut colors = Vec::with_capacity(frame.len() * 3);
    for f in &frame.features {
        colors.extend_from_slice(f);
    }

    let run = |mask: &DecodeMask, label: &str| {
        let started = Instant::now();
        let tape = Tape::new();
        let b = Binder::frozen(&tape, &model.params);
        let feats = tape.constant(Tensor::from_vec(frame.len(), 3, colors.clone()));
        let enc = nets.backbone.encode(&b, &hierarchy, feats);
        let dec = nets.backbone.decode(&b, &hierarchy, &enc, mask).unwrap();
        let qvar = tape.constant(Tensor::from_points(&queries));
        let qfeat = nets.query_conv[0]
            .fwd(&b, qvar, 0, &hierarchy.levels[0].points, &dec[0])
            .unwrap();
        let out = tape.value(qfeat);
        println!("{label}: {:.2}s", started.elapsed().as_secs_f64());
        out
    };

    let full = run(&DecodeMask::full(hierarchy.num_levels()), "full decode");
    let pruned = run(&mask, "selective decode");
    let max_diff = full
        .data()
        .iter()
        .zip(pruned.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    println!("max query-feature difference: {max_diff:.2e} (equivalence bound 1e-6)");
}
