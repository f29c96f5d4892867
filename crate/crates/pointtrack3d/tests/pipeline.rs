//! End-to-end CLI pipeline on tiny settings: generate a dataset, pretrain,
//! train the tracker, track a sequence, evaluate, and run the ablation
//! harnesses — all through the public subcommand surface.

use pointtrack3d::cli::run;

fn cli(args: &[&str]) -> i32 {
    let mut argv = vec!["pointtrack3d".to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    run(argv)
}

#[test]
fn full_pipeline_via_cli() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    // Scene set.
    let scenes = serde_json::json!({
        "scenes": [
            { "name": "mix", "kind": "two_movers", "count": 2, "points": 350, "frames": 6 }
        ]
    });
    let scenes_path = root.join("scenes.json");
    std::fs::write(&scenes_path, serde_json::to_vec_pretty(&scenes).unwrap()).unwrap();

    let data = root.join("data");
    assert_eq!(
        cli(&[
            "gen",
            "--config",
            scenes_path.to_str().unwrap(),
            "--out",
            data.to_str().unwrap(),
            "--seed",
            "7"
        ]),
        0
    );
    assert!(data.join("mix-0000/manifest.json").exists());
    assert!(data.join("run_manifest.json").exists());

    // Tiny model + train configs.
    let train_cfg = serde_json::json!({
        "model": {
            "encoder_widths": [6, 6, 8, 8],
            "conv_k": 4, "patch_k": 3, "weightnet_hidden": 4,
            "cost_dim": 8, "fusion_width": 8, "fusion_layers": 1,
            "fusion_heads": 2, "groupnorm_groups": 2, "predictor_width": 6
        },
        "train": {
            "steps": 2, "batch_size": 1, "points_per_frame": 200,
            "clip_frames": 3, "queries_per_clip": 4, "seed": 5,
            "tflip": false
        }
    });
    let cfg_path = root.join("train.json");
    std::fs::write(&cfg_path, serde_json::to_vec_pretty(&train_cfg).unwrap()).unwrap();

    let sf_out = root.join("sf");
    assert_eq!(
        cli(&[
            "pretrain-sf",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            sf_out.to_str().unwrap(),
            "--data",
            data.to_str().unwrap()
        ]),
        0
    );
    let sf_ckpt = sf_out.join("final.ckpt");
    assert!(sf_ckpt.exists());
    assert!(sf_out.join("loss_curve.csv").exists());
    assert!(sf_out.join("run_manifest.json").exists());

    let tr_out = root.join("track_run");
    assert_eq!(
        cli(&[
            "train",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            tr_out.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--checkpoint",
            sf_ckpt.to_str().unwrap()
        ]),
        0
    );
    let tr_ckpt = tr_out.join("final.ckpt");
    assert!(tr_ckpt.exists());

    // Track one sequence.
    let seq_dir = data.join("mix-0000");
    let preds = root.join("preds");
    assert_eq!(
        cli(&[
            "track",
            "--checkpoint",
            tr_ckpt.to_str().unwrap(),
            "--data",
            seq_dir.to_str().unwrap(),
            "--out",
            preds.to_str().unwrap()
        ]),
        0
    );
    assert!(preds.join("tracks.csv").exists());
    let meta: serde_json::Value =
        serde_json::from_slice(&std::fs::read(preds.join("predictions.json")).unwrap()).unwrap();
    assert_eq!(meta["direction"], "forward+backward");
    assert!(meta["checkpoint_hash"].as_str().unwrap().len() == 16);

    // Evaluate 3D and write a report.
    let metrics = root.join("metrics.json");
    assert_eq!(
        cli(&[
            "eval",
            "--pred",
            preds.join("tracks.csv").to_str().unwrap(),
            "--gt",
            seq_dir.join("tracks.csv").to_str().unwrap(),
            "--space",
            "3d",
            "--out",
            metrics.to_str().unwrap()
        ]),
        0
    );
    let doc: serde_json::Value =
        serde_json::from_slice(&std::fs::read(&metrics).unwrap()).unwrap();
    assert!(doc["delta_avg"].as_f64().unwrap() >= 0.0);

    // 2D evaluation against the sequence cameras.
    assert_eq!(
        cli(&[
            "eval",
            "--pred",
            preds.join("tracks.csv").to_str().unwrap(),
            "--gt",
            seq_dir.join("tracks.csv").to_str().unwrap(),
            "--space",
            "2d",
            "--data",
            seq_dir.to_str().unwrap()
        ]),
        0
    );

    // Chaining through the same CLI entry.
    let chain_out = root.join("chain");
    assert_eq!(
        cli(&[
            "track",
            "--checkpoint",
            sf_ckpt.to_str().unwrap(),
            "--data",
            seq_dir.to_str().unwrap(),
            "--out",
            chain_out.to_str().unwrap(),
            "--chain"
        ]),
        0
    );
    assert!(chain_out.join("tracks.csv").exists());

    // Rotation ablation over the predictions.
    assert_eq!(
        cli(&[
            "ablate",
            "--mode",
            "rotation",
            "--angles",
            "0,45,90",
            "--pred",
            preds.join("tracks.csv").to_str().unwrap(),
            "--data",
            seq_dir.to_str().unwrap(),
            "--out",
            root.join("rotation.json").to_str().unwrap()
        ]),
        0
    );

    // Interp ablation needs 2D tracks: project GT quickly via lift2d's own
    // input format written from the GT records.
    let seq = pointtrack3d::dataset::read_sequence(&seq_dir).unwrap();
    let tracks2d: Vec<pointtrack3d::dataset::Track2d> = seq
        .gt_tracks
        .iter()
        .map(|t| pointtrack3d::dataset::Track2d {
            query_id: t.query_id,
            uv: t
                .positions
                .iter()
                .enumerate()
                .map(|(f, p)| {
                    pointtrack3d::geometry::project(p, &seq.cameras[f])
                        .map(|(uv, _)| uv)
                        .unwrap_or([0.0, 0.0])
                })
                .collect(),
            visible: t.visible.clone(),
        })
        .collect();
    let t2d_path = root.join("tracks2d.csv");
    pointtrack3d::dataset::write_tracks2d_csv(&t2d_path, &tracks2d).unwrap();
    assert_eq!(
        cli(&[
            "ablate",
            "--mode",
            "interp",
            "--tracks2d",
            t2d_path.to_str().unwrap(),
            "--data",
            seq_dir.to_str().unwrap(),
            "--out",
            root.join("interp.json").to_str().unwrap()
        ]),
        0
    );

    // Lift2d as its own subcommand.
    let lifted = root.join("lifted");
    assert_eq!(
        cli(&[
            "lift2d",
            "--tracks2d",
            t2d_path.to_str().unwrap(),
            "--data",
            seq_dir.to_str().unwrap(),
            "--mode",
            "nearest",
            "--out",
            lifted.to_str().unwrap()
        ]),
        0
    );
    assert!(lifted.join("tracks.csv").exists());

    // Report merges metrics files.
    assert_eq!(
        cli(&[
            "report",
            "--inputs",
            &format!("ours={}", metrics.display()),
        ]),
        0
    );
}

#[test]
fn cache_env_generates_once() {
    // Inline scenes + cache env: the corpus lands in the cache directory.
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cache = root.join("cache");
    std::env::set_var(pointtrack3d::cli::CACHE_ENV, cache.to_str().unwrap());

    let cfg = serde_json::json!({
        "model": {
            "encoder_widths": [6, 6, 8, 8],
            "conv_k": 4, "patch_k": 3, "weightnet_hidden": 4,
            "cost_dim": 8, "fusion_width": 8, "fusion_layers": 1,
            "fusion_heads": 2, "groupnorm_groups": 2, "predictor_width": 6
        },
        "train": { "steps": 1, "batch_size": 1, "points_per_frame": 150, "seed": 5 },
        "scenes": { "scenes": [ { "name": "c", "kind": "two_movers", "count": 1, "points": 250, "frames": 4 } ] }
    });
    let cfg_path = root.join("train.json");
    std::fs::write(&cfg_path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    let out = root.join("run");
    assert_eq!(
        cli(&[
            "pretrain-sf",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap()
        ]),
        0
    );
    std::env::remove_var(pointtrack3d::cli::CACHE_ENV);
    assert!(cache.exists(), "corpus was not cached");
    let entries: Vec<_> = std::fs::read_dir(&cache).unwrap().collect();
    assert!(!entries.is_empty());
}
