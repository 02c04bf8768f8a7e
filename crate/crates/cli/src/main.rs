//! `sgm`: few-shot scene classification by scene-graph matching.
//!
//! The pipeline runs in phases, each a subcommand: `gen-data` renders the
//! synthetic dataset, `pretrain` fits the convolutional backbone on the
//! train split, `meta-train` fits the graph matcher episodically over the
//! frozen backbone, `evaluate` reports few-shot accuracy (matcher or pooled
//! baselines) as a metrics JSON, and `match-viz` exports cross-graph
//! attention for a pair of images.
//!
//! Configuration precedence: built-in defaults < `--config` file <
//! `SGM_OUT_ROOT` (output root only) < explicit flags. Exit codes: 0 ok,
//! 1 usage or config error, 2 data or file error, 3 numeric failure.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use sgm_core::episodic::BaselineMetric;
use sgm_core::graph_matching::Ablation;
use sgm_core::synthscene::Split;
use sgm_core::{Error, Result};

use config::{ArchChoice, RunConfig};

#[derive(Parser)]
#[command(name = "sgm", version, about = "Few-shot scene classification by scene-graph matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene dataset to disk.
    GenData(GenDataArgs),
    /// Print the built-in dataset manifest (or write it with --out).
    DefaultManifest(DefaultManifestArgs),
    /// Pre-train the convolutional backbone on the train split.
    Pretrain(PretrainArgs),
    /// Meta-train the graph matcher over the frozen backbone.
    MetaTrain(MetaTrainArgs),
    /// Score few-shot episodes and write a metrics JSON.
    Evaluate(EvaluateArgs),
    /// Export matching weights between two images as CSV plus heatmaps.
    MatchViz(MatchVizArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Flat `key = value` config file; explicit flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root for relative output paths (overrides SGM_OUT_ROOT).
    #[arg(long)]
    out_root: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Manifest file; the built-in default manifest when absent.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output dataset directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace an existing dataset instead of refusing.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct DefaultManifestArgs {
    /// Write here instead of printing to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Dataset directory (as written by gen-data).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output checkpoint path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    momentum: Option<f32>,
    #[arg(long)]
    weight_decay: Option<f32>,
    /// Weight of the rotation-prediction objective (0 disables it).
    #[arg(long)]
    rotation_weight: Option<f32>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct MetaTrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Pre-trained backbone checkpoint.
    #[arg(long)]
    backbone: Option<PathBuf>,
    /// Output matcher checkpoint path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Graph width profile: standard or desk.
    #[arg(long)]
    arch: Option<String>,
    /// Train without the propagation stage.
    #[arg(long)]
    no_propagation: bool,
    /// Train without the interaction stage.
    #[arg(long)]
    no_interaction: bool,
    #[arg(long)]
    way: Option<usize>,
    #[arg(long)]
    shot: Option<usize>,
    #[arg(long)]
    queries: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    episodes_per_epoch: Option<usize>,
    #[arg(long)]
    val_episodes: Option<usize>,
    /// Epochs without validation improvement before stopping (0 disables).
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    weight_decay: Option<f32>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    backbone: Option<PathBuf>,
    /// Matcher checkpoint (ignored with --baseline).
    #[arg(long)]
    matcher: Option<PathBuf>,
    /// Score a pooled-feature baseline instead: euclidean or cosine.
    #[arg(long)]
    baseline: Option<String>,
    /// Split to sample episodes from: train, val, or test.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    way: Option<usize>,
    #[arg(long)]
    shot: Option<usize>,
    #[arg(long)]
    queries: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Metrics JSON output path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Assert that the matcher was trained without propagation.
    #[arg(long)]
    no_propagation: bool,
    /// Assert that the matcher was trained without interaction.
    #[arg(long)]
    no_interaction: bool,
}

#[derive(Args)]
struct MatchVizArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    backbone: Option<PathBuf>,
    #[arg(long)]
    matcher: Option<PathBuf>,
    /// Support image (binary PPM).
    #[arg(long)]
    support: PathBuf,
    /// Query image (binary PPM).
    #[arg(long)]
    query: PathBuf,
    /// Output directory for the CSV and heatmaps.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(commands::exit_code(&e));
    }
}

/// Config shared by defaults, file, environment, and flags; flags win.
fn build_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(root) = &common.out_root {
        cfg.out_root = root.clone();
    }
    Ok(cfg)
}

macro_rules! merge {
    ($cfg:expr, $args:expr, { $($flag:ident => $field:ident),* $(,)? }) => {
        $(if let Some(v) = $args.$flag.clone() { $cfg.$field = v; })*
    };
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(args) => {
            let cfg = build_config(&args.common)?;
            let out = cfg.resolve(args.out.as_deref().unwrap_or(&cfg.data_dir));
            commands::gen_data(args.manifest.as_deref(), &out, args.force)
        }
        Command::DefaultManifest(args) => commands::default_manifest(args.out.as_deref()),
        Command::Pretrain(args) => {
            let mut cfg = build_config(&args.common)?;
            merge!(cfg, args, {
                data => data_dir,
                epochs => pre_epochs,
                batch_size => pre_batch_size,
                lr => pre_lr,
                momentum => pre_momentum,
                weight_decay => pre_weight_decay,
                rotation_weight => pre_rotation_weight,
                seed => seed,
            });
            cfg.validate()?;
            let data = cfg.resolve(&cfg.data_dir);
            let out = cfg.resolve(args.out.as_deref().unwrap_or(&cfg.backbone_ckpt));
            commands::pretrain(&cfg, &data, &out)
        }
        Command::MetaTrain(args) => {
            let mut cfg = build_config(&args.common)?;
            merge!(cfg, args, {
                data => data_dir,
                backbone => backbone_ckpt,
                way => way,
                shot => shot,
                queries => queries,
                epochs => meta_epochs,
                episodes_per_epoch => episodes_per_epoch,
                val_episodes => val_episodes,
                patience => patience,
                lr => meta_lr,
                weight_decay => meta_weight_decay,
                seed => seed,
            });
            if let Some(arch) = &args.arch {
                cfg.arch = ArchChoice::parse(arch)?;
            }
            cfg.no_propagation |= args.no_propagation;
            cfg.no_interaction |= args.no_interaction;
            cfg.validate()?;
            let data = cfg.resolve(&cfg.data_dir);
            let backbone = cfg.resolve(&cfg.backbone_ckpt);
            let out = cfg.resolve(args.out.as_deref().unwrap_or(&cfg.matcher_ckpt));
            commands::meta_train(&cfg, &data, &backbone, &out)
        }
        Command::Evaluate(args) => {
            let mut cfg = build_config(&args.common)?;
            merge!(cfg, args, {
                data => data_dir,
                backbone => backbone_ckpt,
                matcher => matcher_ckpt,
                episodes => episodes,
                way => way,
                shot => shot,
                queries => queries,
                seed => seed,
            });
            cfg.validate()?;
            let baseline = match args.baseline.as_deref() {
                None => None,
                Some("euclidean") => Some(BaselineMetric::Euclidean),
                Some("cosine") => Some(BaselineMetric::Cosine),
                Some(other) => {
                    return Err(Error::Config(format!(
                        "unknown baseline `{other}` (expected euclidean or cosine)"
                    )))
                }
            };
            let split = match args.split.as_deref() {
                None => Split::Test,
                Some(s) => Split::parse(s)?,
            };
            let data = cfg.resolve(&cfg.data_dir);
            let backbone = cfg.resolve(&cfg.backbone_ckpt);
            let matcher = cfg.resolve(&cfg.matcher_ckpt);
            let out = cfg.resolve(args.out.as_deref().unwrap_or(std::path::Path::new("metrics.json")));
            commands::evaluate(
                &cfg,
                &data,
                &backbone,
                &matcher,
                baseline,
                split,
                &out,
                Ablation {
                    no_propagation: args.no_propagation,
                    no_interaction: args.no_interaction,
                },
            )
        }
        Command::MatchViz(args) => {
            let mut cfg = build_config(&args.common)?;
            merge!(cfg, args, {
                backbone => backbone_ckpt,
                matcher => matcher_ckpt,
            });
            let backbone = cfg.resolve(&cfg.backbone_ckpt);
            let matcher = cfg.resolve(&cfg.matcher_ckpt);
            let out = cfg.resolve(args.out.as_deref().unwrap_or(std::path::Path::new("match-viz")));
            commands::match_viz(&backbone, &matcher, &args.support, &args.query, &out)
        }
    }
}
