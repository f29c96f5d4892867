//! Command-line interface: data generation, two-stage training, tracking,
//! evaluation, baselines and ablation harnesses.
//!
//! Every run writes a `run_manifest.json` beside its outputs with the config
//! echo, seed and the content hash of any checkpoint involved, so results
//! stay attributable. Exit codes: 0 success, 1 usage error, 2 runtime
//! failure.

use crate::dataset::{read_sequence, read_tracks2d_csv, read_tracks_csv, write_sequence, write_tracks_csv};
use crate::evalkit::{
    chain_sceneflow, compute_average_jaccard, compute_metrics, compute_metrics_projected,
    format_rotation_table, format_table, lift_2d_tracks, rotated_view_eval, FlowSource,
    MetricsReport, Space,
};
use crate::geometry::InterpMode;
use crate::losses::Stage;
use crate::model::{Model, ModelConfig};
use crate::synthdata::{generate_sequence, scenes, OccluderPolicy, SceneScript, SequenceRecord};
use crate::tracker::{track_sequence, Stepper};
use crate::training::{
    pretrain_sceneflow, train_tracker, SceneFlowCorpus, TrainConfig, Trainer,
};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const CACHE_ENV: &str = "POINTTRACK3D_CACHE";

#[derive(Parser)]
#[command(name = "pointtrack3d", version, about = "Online long-term 3D point tracking by cost volume fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SpaceArg {
    #[value(name = "3d")]
    ThreeD,
    #[value(name = "2d")]
    TwoD,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Bilinear,
    Nearest,
}

impl From<ModeArg> for InterpMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Bilinear => InterpMode::Bilinear,
            ModeArg::Nearest => InterpMode::Nearest,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AblateModeArg {
    Rotation,
    Interp,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic sequences with full ground truth.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Parallel generation workers (defaults to the core count).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Stage-1 scene-flow pretraining.
    #[command(name = "pretrain-sf")]
    PretrainSf {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory (defaults to scenes declared in the config).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Resume from a trainer checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Stage-2 tracker training from a stage-1 checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Stage-1 checkpoint to start from.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Track the manifest queries through a sequence (forward + backward).
    Track {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sequence directory.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Selective decoding around the queries at the dense levels.
        #[arg(long, default_value_t = false)]
        selective: bool,
        /// Chain dense scene flow instead of running the tracker.
        #[arg(long, default_value_t = false)]
        chain: bool,
    },
    /// Evaluate predicted tracks against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_enum, default_value = "3d")]
        space: SpaceArg,
        /// Sequence directory providing cameras (required for 2d space).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Lift 2D tracks to 3D using the sequence's depth maps and cameras.
    Lift2d {
        #[arg(long)]
        tracks2d: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "bilinear")]
        mode: ModeArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ablation harnesses: rotated-view robustness, nearest-vs-bilinear.
    Ablate {
        #[arg(long, value_enum)]
        mode: AblateModeArg,
        /// Comma-separated view angles in degrees (rotation mode).
        #[arg(long, default_value = "0,15,30,45,60,75,90")]
        angles: String,
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Sequence directory (cameras / depth maps / GT).
        #[arg(long)]
        data: PathBuf,
        /// 2D tracks for the interp mode.
        #[arg(long)]
        tracks2d: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge metrics.json files into one results table.
    Report {
        /// Entries of the form name=path/to/metrics.json.
        #[arg(long, required = true, num_args = 1..)]
        inputs: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Scene-set description consumed by `gen` and by inline training configs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenConfig {
    pub scenes: Vec<SceneEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneEntry {
    pub name: String,
    #[serde(default)]
    pub kind: SceneKind,
    /// Sequences generated from this entry (seed-jittered variants).
    #[serde(default = "one")]
    pub count: usize,
    #[serde(default = "default_points")]
    pub points: usize,
    #[serde(default = "default_frames")]
    pub frames: usize,
    #[serde(default)]
    pub policy: Option<OccluderPolicy>,
    /// Full script override (kind = custom).
    #[serde(default)]
    pub script: Option<SceneScript>,
}

fn one() -> usize {
    1
}
fn default_points() -> usize {
    1200
}
fn default_frames() -> usize {
    24
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, Default, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    DriftingBox,
    OcclusionPass,
    #[default]
    TwoMovers,
    Custom,
}

impl SceneEntry {
    pub fn script(&self, variant_seed: u64) -> SceneScript {
        let mut script = match self.kind {
            SceneKind::DriftingBox => scenes::drifting_box(variant_seed, self.points, self.frames),
            SceneKind::OcclusionPass => {
                scenes::occlusion_pass(variant_seed, self.points, self.frames)
            }
            SceneKind::TwoMovers => scenes::two_movers(variant_seed, self.points, self.frames),
            SceneKind::Custom => self
                .script
                .clone()
                .expect("custom scene entry needs a script"),
        };
        if let Some(policy) = self.policy {
            script.policy = policy;
        }
        script
    }
}

/// Training config file: train settings plus either an inline scene set or
/// a model override.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct TrainFileConfig {
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub scenes: Option<GenConfig>,
}

pub fn generate_set(cfg: &GenConfig, seed: u64) -> Result<Vec<(String, SequenceRecord)>, String> {
    let mut out = Vec::new();
    for entry in &cfg.scenes {
        for i in 0..entry.count.max(1) {
            let variant_seed = seed
                .wrapping_add(crate::checkpoint::fnv1a(entry.name.as_bytes()))
                .wrapping_add(i as u64 * 7919);
            let script = entry.script(variant_seed);
            let seq = generate_sequence(&script, variant_seed).map_err(|e| e.to_string())?;
            out.push((format!("{}-{i:04}", entry.name), seq));
        }
    }
    Ok(out)
}

/// Load every sequence under a dataset directory (or a single sequence dir).
pub fn load_dataset(dir: &Path) -> Result<Vec<SequenceRecord>, String> {
    if dir.join("manifest.json").exists() {
        return Ok(vec![read_sequence(dir).map_err(|e| e.to_string())?]);
    }
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| format!("{}: {e}", dir.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.join("manifest.json").exists())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(format!("no sequences under {}", dir.display()));
    }
    subdirs
        .iter()
        .map(|p| read_sequence(p).map_err(|e| e.to_string()))
        .collect()
}

/// Resolve training data: an explicit dataset directory wins; otherwise the
/// config's inline scenes are generated (and cached under the directory
/// named by `POINTTRACK3D_CACHE`, keyed by the config hash and seed).
fn resolve_corpus(
    data: Option<&Path>,
    cfg: &TrainFileConfig,
    seed: u64,
) -> Result<Vec<SequenceRecord>, String> {
    if let Some(dir) = data {
        return load_dataset(dir);
    }
    let gen_cfg = cfg
        .scenes
        .as_ref()
        .ok_or("no --data directory and no scenes in the config")?;
    if let Ok(cache_root) = std::env::var(CACHE_ENV) {
        let key = format!(
            "{:016x}-{seed}",
            crate::checkpoint::fnv1a(serde_json::to_string(gen_cfg).unwrap().as_bytes())
        );
        let cache_dir = Path::new(&cache_root).join(key);
        if cache_dir.exists() {
            return load_dataset(&cache_dir);
        }
        let set = generate_set(gen_cfg, seed)?;
        for (name, seq) in &set {
            write_sequence(&cache_dir.join(name), seq).map_err(|e| e.to_string())?;
        }
        return Ok(set.into_iter().map(|(_, s)| s).collect());
    }
    Ok(generate_set(gen_cfg, seed)?
        .into_iter()
        .map(|(_, s)| s)
        .collect())
}

fn write_run_manifest(
    out_dir: &Path,
    command: &str,
    config_echo: serde_json::Value,
    seed: Option<u64>,
    checkpoint: Option<&Path>,
    elapsed_s: f64,
) -> std::io::Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let ckpt_hash = match checkpoint {
        Some(p) if p.exists() => Some(crate::checkpoint::content_hash(p)?),
        _ => None,
    };
    let manifest = serde_json::json!({
        "command": command,
        "config": config_echo,
        "seed": seed,
        "checkpoint": checkpoint.map(|p| p.display().to_string()),
        "checkpoint_hash": ckpt_hash,
        "elapsed_s": elapsed_s,
    });
    std::fs::write(
        out_dir.join("run_manifest.json"),
        serde_json::to_vec_pretty(&manifest).unwrap(),
    )
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, String> {
    let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_slice(&bytes).map_err(|e| format!("{}: {e}", path.display()))
}

/// Entry point used by the binary; returns the process exit code.
pub fn run(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // Help/version requests are successful exits.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(command: Command) -> Result<(), String> {
    match command {
        Command::Gen {
            config,
            out,
            seed,
            workers,
        } => {
            let started = Instant::now();
            let cfg: GenConfig = read_json(&config)?;
            let set = generate_parallel(&cfg, seed, workers.unwrap_or_else(default_workers))?;
            for (name, seq) in &set {
                write_sequence(&out.join(name), seq).map_err(|e| e.to_string())?;
            }
            write_run_manifest(
                &out,
                "gen",
                serde_json::to_value(&cfg).unwrap(),
                Some(seed),
                None,
                started.elapsed().as_secs_f64(),
            )
            .map_err(|e| e.to_string())?;
            println!("generated {} sequences under {}", set.len(), out.display());
            Ok(())
        }
        Command::PretrainSf {
            config,
            out,
            data,
            checkpoint,
            seed,
        } => {
            let started = Instant::now();
            let mut file_cfg: TrainFileConfig = read_json(&config)?;
            file_cfg.train.stage = Stage::Pretrain;
            if let Some(s) = seed {
                file_cfg.train.seed = s;
            }
            let corpus = SceneFlowCorpus::new(resolve_corpus(
                data.as_deref(),
                &file_cfg,
                file_cfg.train.seed,
            )?);
            let (trainer, stats) = match checkpoint {
                Some(ckpt) => {
                    let mut t = Trainer::load(&ckpt).map_err(|e| e.to_string())?;
                    t.cfg = file_cfg.train.clone();
                    let stats = resume_loop(&mut t, &out, |t| t.step_sceneflow(&corpus))?;
                    (t, stats)
                }
                None => {
                    let model = Model::init(
                        file_cfg.model.clone().unwrap_or_default(),
                        file_cfg.train.seed,
                    );
                    pretrain_sceneflow(model, &corpus, file_cfg.train.clone(), Some(&out))
                        .map_err(|e| e.to_string())?
                }
            };
            let final_path = out.join("final.ckpt");
            trainer.save(&final_path).map_err(|e| e.to_string())?;
            write_run_manifest(
                &out,
                "pretrain-sf",
                serde_json::to_value(&file_cfg).unwrap(),
                Some(file_cfg.train.seed),
                Some(&final_path),
                started.elapsed().as_secs_f64(),
            )
            .map_err(|e| e.to_string())?;
            println!(
                "pretrained {} steps; final loss {:.6}",
                trainer.step,
                stats.last().map_or(f64::NAN, |s| s.total)
            );
            Ok(())
        }
        Command::Train {
            config,
            out,
            data,
            checkpoint,
            seed,
        } => {
            let started = Instant::now();
            let mut file_cfg: TrainFileConfig = read_json(&config)?;
            file_cfg.train.stage = Stage::Track;
            if let Some(s) = seed {
                file_cfg.train.seed = s;
            }
            let corpus = resolve_corpus(data.as_deref(), &file_cfg, file_cfg.train.seed)?;
            let (model, _) = Model::load(&checkpoint).map_err(|e| e.to_string())?;
            let (trainer, stats) =
                train_tracker(model, &corpus, file_cfg.train.clone(), Some(&out))
                    .map_err(|e| e.to_string())?;
            let final_path = out.join("final.ckpt");
            trainer.save(&final_path).map_err(|e| e.to_string())?;
            write_run_manifest(
                &out,
                "train",
                serde_json::to_value(&file_cfg).unwrap(),
                Some(file_cfg.train.seed),
                Some(&final_path),
                started.elapsed().as_secs_f64(),
            )
            .map_err(|e| e.to_string())?;
            println!(
                "trained {} steps; final loss {:.6}",
                trainer.step,
                stats.last().map_or(f64::NAN, |s| s.total)
            );
            Ok(())
        }
        Command::Track {
            checkpoint,
            data,
            out,
            selective,
            chain,
        } => {
            let started = Instant::now();
            let (model, _) = Model::load(&checkpoint).map_err(|e| e.to_string())?;
            let seq = read_sequence(&data).map_err(|e| e.to_string())?;
            let records = if chain {
                chain_sceneflow(&seq, &seq.queries, &FlowSource::Model(&model))
                    .map_err(|e| e.to_string())?
            } else {
                track_sequence(&Stepper::Model(&model), &seq, &seq.queries, selective)
                    .map_err(|e| e.to_string())?
            };
            std::fs::create_dir_all(&out).map_err(|e| e.to_string())?;
            write_tracks_csv(&out.join("tracks.csv"), &records).map_err(|e| e.to_string())?;
            let elapsed = started.elapsed().as_secs_f64();
            let meta = serde_json::json!({
                "checkpoint_hash": crate::checkpoint::content_hash(&checkpoint).map_err(|e| e.to_string())?,
                "direction": "forward+backward",
                "selective": selective,
                "chain": chain,
                "elapsed_s": elapsed,
                "queries": records.len(),
            });
            std::fs::write(
                out.join("predictions.json"),
                serde_json::to_vec_pretty(&meta).unwrap(),
            )
            .map_err(|e| e.to_string())?;
            write_run_manifest(&out, "track", meta, None, Some(&checkpoint), elapsed)
                .map_err(|e| e.to_string())?;
            println!("tracked {} queries in {elapsed:.2}s", records.len());
            Ok(())
        }
        Command::Eval {
            pred,
            gt,
            space,
            data,
            out,
        } => {
            let pred_r = read_tracks_csv(&pred, 0).map_err(|e| e.to_string())?;
            let gt_r = read_tracks_csv(&gt, 0).map_err(|e| e.to_string())?;
            let (report, aj) = match space {
                SpaceArg::ThreeD => {
                    let r = compute_metrics(&pred_r, &gt_r, Space::ThreeD)
                        .map_err(|e| e.to_string())?;
                    let aj = compute_average_jaccard(&pred_r, &gt_r, Space::ThreeD)
                        .map_err(|e| e.to_string())?;
                    (r, aj)
                }
                SpaceArg::TwoD => {
                    let dir = data.ok_or("--space 2d needs --data for cameras")?;
                    let seq = read_sequence(&dir).map_err(|e| e.to_string())?;
                    let r = compute_metrics_projected(&pred_r, &gt_r, &seq.cameras)
                        .map_err(|e| e.to_string())?;
                    let (p2, _) = crate::evalkit::project_records(&pred_r, &seq.cameras);
                    let (g2, _) = crate::evalkit::project_records(&gt_r, &seq.cameras);
                    let aj = compute_average_jaccard(&p2, &g2, Space::TwoD)
                        .map_err(|e| e.to_string())?;
                    (r, aj)
                }
            };
            let table = format_table(&[("pred".to_string(), report.clone())]);
            println!("{table}");
            println!("AJ: {aj:.2}");
            if let Some(path) = out {
                let mut doc = serde_json::to_value(&report).unwrap();
                doc["average_jaccard"] = serde_json::json!(aj);
                std::fs::write(&path, serde_json::to_vec_pretty(&doc).unwrap())
                    .map_err(|e| e.to_string())?;
            }
            Ok(())
        }
        Command::Lift2d {
            tracks2d,
            data,
            mode,
            out,
        } => {
            let tracks = read_tracks2d_csv(&tracks2d).map_err(|e| e.to_string())?;
            let seq = read_sequence(&data).map_err(|e| e.to_string())?;
            let (records, skipped) =
                lift_2d_tracks(&tracks, &seq.depth_maps, &seq.cameras, mode.into());
            std::fs::create_dir_all(&out).map_err(|e| e.to_string())?;
            write_tracks_csv(&out.join("tracks.csv"), &records).map_err(|e| e.to_string())?;
            write_run_manifest(
                &out,
                "lift2d",
                serde_json::json!({"mode": format!("{mode:?}"), "skipped": skipped}),
                None,
                None,
                0.0,
            )
            .map_err(|e| e.to_string())?;
            println!(
                "lifted {} tracks ({} skipped) to {}",
                records.len(),
                skipped.len(),
                out.display()
            );
            Ok(())
        }
        Command::Ablate {
            mode,
            angles,
            pred,
            gt,
            data,
            tracks2d,
            out,
        } => match mode {
            AblateModeArg::Rotation => {
                let angles: Vec<f64> = angles
                    .split(',')
                    .map(|s| s.trim().parse::<f64>().map_err(|e| e.to_string()))
                    .collect::<Result<_, _>>()?;
                let pred = pred.ok_or("rotation mode needs --pred")?;
                let pred_r = read_tracks_csv(&pred, 0).map_err(|e| e.to_string())?;
                let seq = read_sequence(&data).map_err(|e| e.to_string())?;
                let gt_r = match gt {
                    Some(p) => read_tracks_csv(&p, 0).map_err(|e| e.to_string())?,
                    None => seq.gt_tracks.clone(),
                };
                let reports = rotated_view_eval(&pred_r, &gt_r, &seq.cameras[0], &angles)
                    .map_err(|e| e.to_string())?;
                let table = format_rotation_table(&[("pred".to_string(), reports.clone())]);
                println!("{table}");
                if let Some(path) = out {
                    std::fs::write(&path, serde_json::to_vec_pretty(&reports).unwrap())
                        .map_err(|e| e.to_string())?;
                }
                Ok(())
            }
            AblateModeArg::Interp => {
                let tracks2d = tracks2d.ok_or("interp mode needs --tracks2d")?;
                let tracks = read_tracks2d_csv(&tracks2d).map_err(|e| e.to_string())?;
                let seq = read_sequence(&data).map_err(|e| e.to_string())?;
                let mut rows: Vec<(String, MetricsReport)> = Vec::new();
                let mut doc = serde_json::Map::new();
                for (name, mode) in [
                    ("bilinear", InterpMode::Bilinear),
                    ("nearest", InterpMode::Nearest),
                ] {
                    let (records, _) =
                        lift_2d_tracks(&tracks, &seq.depth_maps, &seq.cameras, mode);
                    let gt: Vec<_> = seq
                        .gt_tracks
                        .iter()
                        .filter(|t| records.iter().any(|r| r.query_id == t.query_id))
                        .cloned()
                        .collect();
                    let report =
                        compute_metrics(&records, &gt, Space::ThreeD).map_err(|e| e.to_string())?;
                    doc.insert(name.to_string(), serde_json::to_value(&report).unwrap());
                    rows.push((format!("lift2d ({name})"), report));
                }
                println!("{}", format_table(&rows));
                if let Some(path) = out {
                    std::fs::write(&path, serde_json::to_vec_pretty(&doc).unwrap())
                        .map_err(|e| e.to_string())?;
                }
                Ok(())
            }
        },
        Command::Report { inputs, out } => {
            let mut rows = Vec::new();
            for entry in &inputs {
                let (name, path) = entry
                    .split_once('=')
                    .ok_or_else(|| format!("bad --inputs entry {entry}; want name=path"))?;
                let report: MetricsReport = read_json(Path::new(path))?;
                rows.push((name.to_string(), report));
            }
            let table = format_table(&rows);
            println!("{table}");
            if let Some(path) = out {
                std::fs::write(&path, table).map_err(|e| e.to_string())?;
            }
            Ok(())
        }
    }
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Generate scene variants, chunked over worker threads. Each sequence's
/// seed is independent, so the output is identical for any worker count.
fn generate_parallel(
    cfg: &GenConfig,
    seed: u64,
    workers: usize,
) -> Result<Vec<(String, SequenceRecord)>, String> {
    if workers <= 1 {
        return generate_set(cfg, seed);
    }
    // Expand entries to (name, script, seed) jobs first.
    let mut jobs = Vec::new();
    for entry in &cfg.scenes {
        for i in 0..entry.count.max(1) {
            let variant_seed = seed
                .wrapping_add(crate::checkpoint::fnv1a(entry.name.as_bytes()))
                .wrapping_add(i as u64 * 7919);
            jobs.push((format!("{}-{i:04}", entry.name), entry.clone(), variant_seed));
        }
    }
    let results: Vec<Result<(String, SequenceRecord), String>> = std::thread::scope(|scope| {
        let chunk = jobs.len().div_ceil(workers);
        let mut handles = Vec::new();
        for piece in jobs.chunks(chunk) {
            handles.push(scope.spawn(move || {
                piece
                    .iter()
                    .map(|(name, entry, vseed)| {
                        generate_sequence(&entry.script(*vseed), *vseed)
                            .map(|s| (name.clone(), s))
                            .map_err(|e| e.to_string())
                    })
                    .collect::<Vec<_>>()
            }));
        }
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("generation worker panicked"))
            .collect()
    });
    results.into_iter().collect()
}

fn resume_loop(
    trainer: &mut Trainer,
    out: &Path,
    mut step_fn: impl FnMut(&mut Trainer) -> Result<crate::training::StepStats, crate::training::TrainError>,
) -> Result<Vec<crate::training::StepStats>, String> {
    std::fs::create_dir_all(out).map_err(|e| e.to_string())?;
    let mut stats = Vec::new();
    while trainer.step < trainer.cfg.steps {
        stats.push(step_fn(trainer).map_err(|e| e.to_string())?);
    }
    Ok(stats)
}
