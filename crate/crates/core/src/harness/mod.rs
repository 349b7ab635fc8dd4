//! Experiment plumbing: datasets, the training loop, evaluation and exports.

mod config;
mod metrics;
pub mod ply;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{DataConfig, RunConfig};
pub use metrics::{nds_score, LevelMetrics, LossCurves, MetricsReport, NdsReport};

use crate::autodiff::{adam_step, checkpoint, AdamState, Graph, ParamStore};
use crate::decoder::Mode;
use crate::dsrecon::{build_existence_pyramid, compose_dsrecon, smear_metric, MidpointDensifier, Smear};
use crate::error::{Error, Result};
use crate::model::{complete, detect, detection_labels, init_model, prepare_sample, training_losses, ModelConfig, Sample};
use crate::sim::{simulate, SceneSequence};
use crate::voxel::{ndjson, points_above_threshold, ActiveSet, ScoredVoxels, SparseVoxelTensor};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.json";
pub const CONFIG_FILE: &str = "config.json";
pub const PLY_FILE: &str = "completion.ply";
pub const NDJSON_FILE: &str = "completion.ndjson";

/// Seed of the `index`-th generated scene (splitmix64 of the pair).
pub fn scene_seed(base: u64, index: usize) -> u64 {
    let mut z = base.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn scene_file_name(index: usize) -> String {
    format!("scene_{index:04}.json")
}

/// Sequence files of `dir` in name order.
pub fn list_scene_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("scene_") && name.ends_with(".json") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// The `count` sequences of a run, read from `data.dir` or simulated.
pub fn load_sequences(cfg: &RunConfig, count: usize) -> Result<Vec<SceneSequence>> {
    match &cfg.data.dir {
        Some(dir) => {
            let files = list_scene_files(dir)?;
            if files.len() < count {
                return Err(Error::Config(format!("{} holds {} scenes, config needs {count}", dir.display(), files.len())));
            }
            files[..count].iter().map(|p| SceneSequence::read(p)).collect()
        }
        None => (0..count).map(|i| simulate(scene_seed(cfg.data.seed, i), &cfg.scene)).collect(),
    }
}

/// Network sample of the configured frame, with DSRecon completion labels.
pub fn sample_from_sequence(seq: &SceneSequence, cfg: &RunConfig) -> Result<Sample> {
    let t = cfg.data.frame;
    if t >= seq.num_frames() {
        return Err(Error::Config(format!("frame {t} out of range for a {}-frame sequence", seq.num_frames())));
    }
    let dense = compose_dsrecon(seq, &MidpointDensifier { params: cfg.densify.clone() })?;
    prepare_sample(seq, t, &dense[t], &cfg.model.grid)
}

/// Simulates the configured scenes and writes them as `scene_XXXX.json`.
pub fn generate_scenes(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let n = cfg.data.train_scenes + cfg.data.eval_scenes;
    (0..n)
        .map(|i| {
            let path = out.join(scene_file_name(i));
            simulate(scene_seed(cfg.data.seed, i), &cfg.scene)?.write(&path)?;
            Ok(path)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DsreconScene {
    pub index: usize,
    pub dense_points: Vec<usize>,
    pub smear: Smear,
}

/// Runs DSRecon on every scene. See [`dsrecon_sequences`] for the outputs.
pub fn run_dsrecon(cfg: &RunConfig, out: &Path) -> Result<Vec<DsreconScene>> {
    cfg.validate()?;
    let seqs = load_sequences(cfg, cfg.data.train_scenes + cfg.data.eval_scenes)?;
    dsrecon_sequences(cfg, &seqs, out)
}

/// Writes the dense frames of scene `i` to `dense_XXXX.json`, the existence
/// pyramid of frame `data.frame` to `pyramid_XXXX.ndjson`, and a per-scene
/// summary to `dsrecon.json`.
pub fn dsrecon_sequences(cfg: &RunConfig, seqs: &[SceneSequence], out: &Path) -> Result<Vec<DsreconScene>> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let densifier = MidpointDensifier { params: cfg.densify.clone() };
    let mut summary = Vec::new();
    for (i, seq) in seqs.iter().enumerate() {
        let dense = compose_dsrecon(seq, &densifier)?;
        let path = out.join(format!("dense_{i:04}.json"));
        write_text(&path, &serde_json::to_string(&dense).expect("dense frames serialize"))?;
        if let Some(frame) = dense.get(cfg.data.frame) {
            let pyramid = build_existence_pyramid(&frame.points, &cfg.model.grid)?;
            let path = out.join(format!("pyramid_{i:04}.ndjson"));
            let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
            ndjson::write(BufWriter::new(f), ndjson::pyramid_records(&pyramid)).map_err(|e| Error::io(&path, e))?;
        }
        summary.push(DsreconScene { index: i, dense_points: dense.iter().map(|f| f.points.len()).collect(), smear: smear_metric(seq, &dense) });
    }
    write_text(&out.join("dsrecon.json"), &serde_json::to_string_pretty(&summary).expect("summary serializes"))?;
    Ok(summary)
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

impl Dataset {
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.data.train_scenes + cfg.data.eval_scenes;
        let seqs = load_sequences(cfg, n)?;
        let mut samples = seqs.iter().map(|s| sample_from_sequence(s, cfg)).collect::<Result<Vec<_>>>()?;
        let eval = samples.split_off(cfg.data.train_scenes);
        Ok(Self { train: samples, eval })
    }
}

fn check_samples(cfg: &ModelConfig, samples: &[Sample]) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        if s.input.channels() != cfg.encoder.in_channels {
            return Err(Error::Config(format!(
                "sample {i} has {} input channels, encoder expects {}",
                s.input.channels(),
                cfg.encoder.in_channels
            )));
        }
        if s.input.level() != 1 || s.pyramid.num_levels() != cfg.num_levels() {
            return Err(Error::Config(format!(
                "sample {i} has a {}-level pyramid, model has {} levels",
                s.pyramid.num_levels(),
                cfg.num_levels()
            )));
        }
    }
    Ok(())
}

/// Fails unless `store` holds exactly the parameters `cfg` would create.
pub fn check_compatible(store: &ParamStore, cfg: &ModelConfig) -> Result<()> {
    let fresh = init_model(cfg, 0)?;
    for (name, value) in fresh.iter() {
        let got = store.get(name).map_err(|_| Error::Checkpoint(format!("missing parameter `{name}`")))?;
        if got.dims() != value.dims() {
            return Err(Error::Checkpoint(format!("parameter `{name}` has dims {:?}, config expects {:?}", got.dims(), value.dims())));
        }
    }
    if store.len() != fresh.len() {
        return Err(Error::Checkpoint(format!("checkpoint has {} parameters, config expects {}", store.len(), fresh.len())));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub store: ParamStore,
    pub optimizer: AdamState,
    /// Evaluation on the held-out scenes plus the training loss curves.
    pub report: MetricsReport,
}

/// Joint training over `data.train`, then evaluation on `data.eval`. With
/// `out` set, writes the final checkpoint, periodic checkpoints, the metrics
/// and the resolved config there.
pub fn train(cfg: &RunConfig, data: &Dataset, out: Option<&Path>) -> Result<TrainOutput> {
    cfg.validate()?;
    check_samples(&cfg.model, &data.train)?;
    check_samples(&cfg.model, &data.eval)?;
    if data.train.is_empty() {
        return Err(Error::Config("no training scenes".into()));
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut store = init_model(&cfg.model, cfg.seed)?;
    let mut opt = AdamState::default();
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0DE7_0000);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5A3B_0000);
    let mut curves = LossCurves::default();
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        for batch in order.chunks(cfg.batch_size) {
            store.zero_grad();
            let (mut total, mut det, mut comp) = (0.0, 0.0, 0.0);
            for &i in batch {
                let mut g = Graph::new();
                let l = training_losses(&mut g, &store, &cfg.model, &data.train[i], &mut sample_rng)?;
                total += g.value(l.total).item();
                det += g.value(l.detection).item();
                comp += g.value(l.completion).item();
                g.backward(l.total, &mut store)?;
            }
            let b = batch.len() as f64;
            store.scale_grads(1.0 / b);
            adam_step(&mut store, &mut opt, &cfg.optimizer)?;
            curves.total.push(total / b);
            curves.detection.push(det / b);
            curves.completion.push(comp / b);
        }
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 && epoch != cfg.epochs {
                checkpoint::save(&dir.join(format!("checkpoint_epoch{epoch:03}.bin")), &store, &opt)?;
            }
        }
    }

    let mut report = evaluate(&store, &cfg.model, &data.eval)?;
    report.curves = curves;
    if let Some(dir) = out {
        checkpoint::save(&dir.join(CHECKPOINT_FILE), &store, &opt)?;
        write_text(&dir.join(METRICS_FILE), &report.to_json())?;
        write_text(&dir.join(CONFIG_FILE), &cfg.to_json())?;
    }
    Ok(TrainOutput { store, optimizer: opt, report })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Inference-mode occupancy metrics per level and the mean proxy detection
/// loss over `samples`. Does not modify `store`.
pub fn evaluate(store: &ParamStore, cfg: &ModelConfig, samples: &[Sample]) -> Result<MetricsReport> {
    check_compatible(store, cfg)?;
    check_samples(cfg, samples)?;
    let n = cfg.num_levels();
    let mut levels: Vec<LevelMetrics> = (1..=n).map(LevelMetrics::new).collect();
    let mut det_loss = 0.0;
    for s in samples {
        let mut g = Graph::new();
        let det = detect(&mut g, store, cfg, &s.input)?;
        let labels = detection_labels(cfg, &det, &s.boxes);
        let l = g.bce_with_logits(det.logits, &labels)?;
        det_loss += g.value(l).item();
        let out = complete::<ChaCha8Rng>(&mut g, store, cfg, &det, Mode::Inference { beta: cfg.decoder.beta })?;
        for m in &mut levels {
            m.accumulate(&out.level(m.level).kept, s.pyramid.level(m.level));
        }
    }
    let scenes = samples.len();
    Ok(MetricsReport {
        levels,
        detection_loss: if scenes > 0 { det_loss / scenes as f64 } else { 0.0 },
        scenes,
        curves: LossCurves::default(),
        nds: None,
    })
}

/// Loads a checkpoint and evaluates it; the file is only read.
pub fn evaluate_checkpoint(path: &Path, cfg: &ModelConfig, samples: &[Sample]) -> Result<MetricsReport> {
    let (store, _) = checkpoint::load(path)?;
    evaluate(&store, cfg, samples)
}

/// Level-1 completion of one input.
#[derive(Clone, Debug, PartialEq)]
pub struct Completion {
    pub kept: ActiveSet,
    pub scores: ScoredVoxels,
    /// Centers and scores of the kept voxels.
    pub points: Vec<([f64; 3], f64)>,
}

pub fn complete_input(store: &ParamStore, cfg: &ModelConfig, input: &SparseVoxelTensor, beta: f64) -> Result<Completion> {
    check_compatible(store, cfg)?;
    let mut g = Graph::new();
    let det = detect(&mut g, store, cfg, input)?;
    let out = complete::<ChaCha8Rng>(&mut g, store, cfg, &det, Mode::Inference { beta })?;
    let l1 = out.level(1);
    let scores = ScoredVoxels { level: 1, coords: l1.features.set.coords().to_vec(), scores: l1.score_values.clone() };
    let points = points_above_threshold(&scores, beta, &cfg.grid.level(1))?;
    Ok(Completion { kept: (*l1.kept).clone(), scores, points })
}

/// Writes the completed level-1 cloud as PLY and the kept voxels with their
/// scores as NDJSON into `dir`.
pub fn export_completion(store: &ParamStore, cfg: &ModelConfig, input: &SparseVoxelTensor, beta: f64, dir: &Path) -> Result<Completion> {
    let c = complete_input(store, cfg, input, beta)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let ply_path = dir.join(PLY_FILE);
    let f = File::create(&ply_path).map_err(|e| Error::io(&ply_path, e))?;
    ply::write_ply(BufWriter::new(f), &c.points).map_err(|e| Error::io(&ply_path, e))?;
    let kept = ScoredVoxels {
        level: 1,
        coords: c.kept.coords().to_vec(),
        scores: c.kept.iter().map(|k| c.scores.scores[c.scores.coords.binary_search(&k).expect("kept voxel is generated")]).collect(),
    };
    let nd_path = dir.join(NDJSON_FILE);
    let f = File::create(&nd_path).map_err(|e| Error::io(&nd_path, e))?;
    ndjson::write(BufWriter::new(f), ndjson::score_records(&kept)).map_err(|e| Error::io(&nd_path, e))?;
    Ok(c)
}
