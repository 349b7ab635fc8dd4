use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use transbridge_core::autodiff::checkpoint;
use transbridge_core::harness::{self, Dataset, RunConfig, METRICS_FILE};
use transbridge_core::sim::SceneSequence;
use transbridge_core::Error;

/// Joint 3D detection and scene completion on simulated LiDAR scenes.
#[derive(Debug, Parser)]
#[command(name = "transbridge", version)]
struct Cli {
    /// JSON run config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Scene seed for `gen`, run seed for every other command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate scenes and write them as sequence files.
    Gen,
    /// Build dense frames for every scene and report the smear.
    Dsrecon {
        /// Directory of sequence files (overrides `data.dir`).
        #[arg(long, conflicts_with = "input")]
        data: Option<PathBuf>,
        /// A single sequence file instead of a scene set.
        #[arg(long = "in")]
        input: Option<PathBuf>,
    },
    /// Train jointly and write checkpoint, metrics and config.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the held-out scenes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Export the level-1 completion of one scene as PLY and NDJSON.
    Complete {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scene index over the whole scene list.
        #[arg(long, default_value_t = 0)]
        scene: usize,
        /// Existence threshold (defaults to `model.decoder.beta`).
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli, data: Option<&Path>) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        if matches!(cli.command, Command::Gen) {
            cfg.data.seed = seed;
        } else {
            cfg.seed = seed;
        }
    }
    if let Some(dir) = data {
        cfg.data.dir = Some(dir.to_path_buf());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Error> {
    match &cli.command {
        Command::Gen => {
            let cfg = load_config(cli, None)?;
            let files = harness::generate_scenes(&cfg, &cli.out)?;
            println!("wrote {} scenes to {}", files.len(), cli.out.display());
        }
        Command::Dsrecon { data, input } => {
            let cfg = load_config(cli, data.as_deref())?;
            let summary = match input {
                Some(path) => harness::dsrecon_sequences(&cfg, &[SceneSequence::read(path)?], &cli.out)?,
                None => harness::run_dsrecon(&cfg, &cli.out)?,
            };
            for s in &summary {
                println!("scene {:4}  smear dsrecon {:.4}  naive {:.4}", s.index, s.smear.dsrecon, s.smear.naive);
            }
        }
        Command::Train { data } => {
            let cfg = load_config(cli, data.as_deref())?;
            let dataset = Dataset::build(&cfg)?;
            let out = harness::train(&cfg, &dataset, Some(&cli.out))?;
            print_levels(&out.report);
            println!("checkpoint written to {}", cli.out.display());
        }
        Command::Eval { checkpoint, data } => {
            let cfg = load_config(cli, data.as_deref())?;
            let dataset = Dataset::build(&cfg)?;
            let report = harness::evaluate_checkpoint(checkpoint, &cfg.model, &dataset.eval)?;
            std::fs::create_dir_all(&cli.out).map_err(|e| Error::Io { path: cli.out.clone(), source: e })?;
            harness::write_text(&cli.out.join(METRICS_FILE), &report.to_json())?;
            print_levels(&report);
        }
        Command::Complete { checkpoint: ckpt, scene, beta, data } => {
            let cfg = load_config(cli, data.as_deref())?;
            let beta = beta.unwrap_or(cfg.model.decoder.beta);
            let (store, _) = checkpoint::load(ckpt)?;
            let n = cfg.data.train_scenes + cfg.data.eval_scenes;
            if *scene >= n {
                return Err(Error::Config(format!("scene {scene} out of range for {n} scenes")));
            }
            let seq = harness::load_sequences(&cfg, scene + 1)?.pop().expect("at least one scene");
            let sample = harness::sample_from_sequence(&seq, &cfg)?;
            let c = harness::export_completion(&store, &cfg.model, &sample.input, beta, &cli.out)?;
            println!("exported {} points to {}", c.points.len(), cli.out.display());
        }
    }
    Ok(())
}

fn print_levels(report: &harness::MetricsReport) {
    for m in &report.levels {
        println!("level {}  precision {:.4}  recall {:.4}  iou {:.4}", m.level, m.precision, m.recall, m.iou);
    }
    println!("detection loss {:.6}", report.detection_loss);
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
