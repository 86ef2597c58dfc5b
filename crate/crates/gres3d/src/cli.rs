//! Command-line entry point: dataset generation, training, evaluation,
//! gradient checking, and seed coverage statistics, all reproducible from
//! a config file plus a seed.

use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::autodiff::grad_check;
use crate::data::{self, GenConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalEntry};
use crate::geometry;
use crate::losses;
use crate::model::{forward, forward_graph, BoundParams, ModelConfig, ModelParams};
use crate::trainer::{self, TrainConfig};

/// Merged configuration for every subcommand; flags override file values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub gen: GenConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            gen: GenConfig::default(),
            model: ModelConfig::desk_scale(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "gres3d",
    about = "Generalized 3D referring expression segmentation on synthetic scenes",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory
    GenData {
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Generation seed (overrides the config file)
        #[arg(long)]
        seed: Option<u64>,
        /// Scene count (overrides the config file)
        #[arg(long)]
        scenes: Option<usize>,
        /// Samples per scene (overrides the config file)
        #[arg(long)]
        samples: Option<usize>,
        /// JSON config file
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model on a dataset and write a checkpoint
    Train {
        /// Dataset directory
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint output path
        #[arg(long)]
        out: PathBuf,
        /// Optimization steps (overrides the config file)
        #[arg(long)]
        steps: Option<usize>,
        /// Training seed (overrides the config file)
        #[arg(long)]
        seed: Option<u64>,
        /// JSON config file
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset split and write a JSON report
    Eval {
        /// Dataset directory
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path
        #[arg(long)]
        ckpt: PathBuf,
        /// Split to evaluate: train or val
        #[arg(long, default_value = "val")]
        split: String,
        /// Report output path
        #[arg(long)]
        report: PathBuf,
    },
    /// Finite-difference sweep over every parameter of a tiny model
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Seed coverage/repetition statistics over a dataset, as CSV
    Stats {
        /// Dataset directory
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated seed counts
        #[arg(long = "nseed-list", default_value = "8,16,32,64")]
        nseed_list: String,
    },
}

enum CliError {
    Usage(String),
    Lib(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

type CliResult = std::result::Result<(), CliError>;

/// Parses and runs one invocation; returns the process exit code
/// (0 success, 1 usage, 2 data/format, 3 numerical).
pub fn run<I>(argv: I) -> i32
where
    I: IntoIterator<Item = String>,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::GenData {
            out,
            seed,
            scenes,
            samples,
            config,
        } => gen_data(&out, seed, scenes, samples, config.as_deref()),
        Command::Train {
            data,
            out,
            steps,
            seed,
            config,
        } => train(&data, &out, steps, seed, config.as_deref()),
        Command::Eval {
            data,
            ckpt,
            split,
            report,
        } => eval_cmd(&data, &ckpt, &split, &report),
        Command::Gradcheck { seed } => gradcheck(seed),
        Command::Stats { data, nseed_list } => stats(&data, &nseed_list),
    };
    match outcome {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CliError::Lib(e)) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn gen_data(
    out: &Path,
    seed: Option<u64>,
    scenes: Option<usize>,
    samples: Option<usize>,
    config: Option<&Path>,
) -> CliResult {
    let mut cfg = load_config(config)?.gen;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(scenes) = scenes {
        cfg.scene_count = scenes;
    }
    if let Some(samples) = samples {
        cfg.samples_per_scene = samples;
    }
    let dataset = data::generate_dataset(&cfg)?;
    data::write_dataset(&dataset, out)?;
    println!(
        "wrote {} scenes, {} samples to {}",
        dataset.scenes.len(),
        dataset.manifest.samples.len(),
        out.display()
    );
    Ok(())
}

fn train(
    data_dir: &Path,
    out: &Path,
    steps: Option<usize>,
    seed: Option<u64>,
    config: Option<&Path>,
) -> CliResult {
    let cfg = load_config(config)?;
    let mut tcfg = cfg.train;
    if let Some(steps) = steps {
        tcfg.total_steps = steps;
    }
    if let Some(seed) = seed {
        tcfg.seed = seed;
    }
    let dataset = data::read_dataset(data_dir)?;
    let ckpt = trainer::fit(&dataset, &cfg.model, &tcfg)?;
    trainer::save_checkpoint(&ckpt, out)?;
    println!("trained {} steps, checkpoint at {}", ckpt.step, out.display());
    Ok(())
}

fn eval_cmd(data_dir: &Path, ckpt_path: &Path, split: &str, report_path: &Path) -> CliResult {
    let dataset = data::read_dataset(data_dir)?;
    let indices = match split {
        "train" => &dataset.manifest.splits.train,
        "val" => &dataset.manifest.splits.val,
        other => {
            return Err(CliError::Usage(format!(
                "unknown split {other:?} (expected train or val)"
            )))
        }
    };
    if indices.is_empty() {
        return Err(CliError::Lib(Error::InvalidArgument(format!(
            "split {split:?} is empty"
        ))));
    }
    let ckpt = trainer::load_checkpoint(ckpt_path)?;
    let mut entries = Vec::with_capacity(indices.len());
    for (scene, expr) in dataset.samples_of(indices) {
        let prediction = forward(scene, expr, &ckpt.params, &ckpt.model_config)?;
        entries.push(EvalEntry {
            prediction,
            gt_point_mask: scene.instance_point_mask(&expr.target_instance_ids),
            gt_empty: expr.target_instance_ids.is_empty(),
            category: expr.category,
        });
    }
    let report = evaluate(&entries)?;
    let json =
        serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(report_path, json).map_err(Error::from)?;
    println!(
        "miou={:.4} acc@0.25={:.4} acc@0.5={:.4} over {} samples",
        report.miou, report.acc_025, report.acc_05, report.sample_count
    );
    Ok(())
}

/// Tiny model/scene pair for the finite-difference sweep.
fn gradcheck(seed: u64) -> CliResult {
    let gen = GenConfig {
        seed,
        scene_count: 1,
        instances_min: 3,
        instances_max: 3,
        points_per_instance_min: 8,
        points_per_instance_max: 12,
        floor_points: 20,
        room_extent: [5.0, 5.0],
        superpoint_pitch: 1.6,
        samples_per_scene: 4,
        val_fraction: 0.0,
        ..GenConfig::default()
    };
    let scene = data::generate_scene(&gen, 0)?;
    let samples = data::generate_samples(&scene, &gen, 0)?;
    let expr = samples
        .iter()
        .find(|e| !e.target_instance_ids.is_empty())
        .unwrap_or(&samples[0])
        .clone();
    let mcfg = ModelConfig {
        d: 4,
        d_p: 4,
        d_t: 4,
        c: 4,
        layers: 1,
        n_seed: 4.min(scene.n_superpoints()),
        n_q: 2,
        vocab_size: data::VOCAB_SIZE,
        tau: 1.0,
        alpha: 1.0,
        sigma: 1.0,
    };
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let params = ModelParams::init(&mcfg, &mut rng);
    let tensors: Vec<_> = params.named().into_iter().map(|(_, t)| t.clone()).collect();
    let n_layers = mcfg.layers;
    let weights = losses::LossWeights::default();
    let err = grad_check(
        &tensors,
        |tape, ids| {
            let bound = BoundParams::from_ids(n_layers, ids)?;
            let graph = forward_graph(tape, &bound, &scene, &expr, &mcfg)?;
            losses::sample_loss(tape, &graph, &bound, &scene, &expr, &mcfg, &weights)
        },
        1e-5,
    )?;
    println!("max relative error: {err:.3e}");
    if err >= 1e-4 {
        return Err(CliError::Lib(Error::Computation(format!(
            "gradient check failed: max relative error {err:.3e} >= 1e-4"
        ))));
    }
    Ok(())
}

fn stats(data_dir: &Path, nseed_list: &str) -> CliResult {
    let n_seeds: Vec<usize> = nseed_list
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Usage(format!("bad seed count {s:?} in --nseed-list")))
        })
        .collect::<std::result::Result<_, _>>()?;
    if n_seeds.is_empty() {
        return Err(CliError::Usage("--nseed-list is empty".into()));
    }
    let dataset = data::read_dataset(data_dir)?;
    println!("n_seed,coverage_rate,repetition_rate");
    for &n in &n_seeds {
        let (cr, rr) = mean_seed_statistics(&dataset.scenes, n)?;
        println!("{n},{cr},{rr}");
    }
    Ok(())
}

/// Mean coverage/repetition rates over scenes for one seed count; the
/// count is clamped to each scene's superpoint total.
pub fn mean_seed_statistics(
    scenes: &[crate::geometry::SceneCloud],
    n_seed: usize,
) -> Result<(f64, f64)> {
    if scenes.is_empty() || n_seed == 0 {
        return Err(Error::InvalidArgument(
            "seed statistics need scenes and a positive seed count".into(),
        ));
    }
    let mut cr_sum = 0.0;
    let mut rr_sum = 0.0;
    for scene in scenes {
        let centroids = geometry::superpoint_centroids(scene)?;
        let n = n_seed.min(centroids.len());
        let seeds = geometry::fss(&centroids, n)?;
        let (cr, rr) = geometry::coverage_repetition_rates(&seeds, scene)?;
        cr_sum += cr;
        rr_sum += rr;
    }
    Ok((cr_sum / scenes.len() as f64, rr_sum / scenes.len() as f64))
}
