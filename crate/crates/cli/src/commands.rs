//! Command implementations. Each prints one summary line on success and
//! returns crate errors for the exit-code mapping in `main`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sgm_core::backbone::{
    self, load_backbone_trunk, save_pretrain_checkpoint, LabeledImages, PretrainConfig,
};
use sgm_core::episodic::{
    self, extract_split_features, BaselineMetric, MatcherScorer, MetaTrainConfig, PooledScorer,
    TaskSpec,
};
use sgm_core::graph_matching::{export_matching_weights, Ablation, MatcherParams};
use sgm_core::image_io::{atomic_write, encode_pgm};
use sgm_core::scene_graph::build_graph;
use sgm_core::synthscene::{self, Split, INDEX_FILE};
use sgm_core::{Error, Result};

use crate::config::RunConfig;

/// Generates the dataset described by `manifest_path` (the built-in default
/// when absent). Refuses to touch a directory that already holds a dataset
/// unless `force` is set, in which case it is removed and regenerated.
pub fn gen_data(manifest_path: Option<&Path>, out_dir: &Path, force: bool) -> Result<()> {
    let manifest = match manifest_path {
        Some(path) => synthscene::load_manifest(path)?,
        None => synthscene::default_manifest(),
    };
    if out_dir.join(INDEX_FILE).exists() {
        if !force {
            return Err(Error::Config(format!(
                "{} already holds a dataset; pass --force to regenerate",
                out_dir.display()
            )));
        }
        std::fs::remove_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    }
    let count = synthscene::generate_dataset(&manifest, out_dir)?;
    println!(
        "generated {count} images across {} classes under {}",
        manifest.classes.len(),
        out_dir.display()
    );
    Ok(())
}

/// Writes the built-in manifest to `out`, or prints it when absent.
pub fn default_manifest(out: Option<&Path>) -> Result<()> {
    let text = synthscene::manifest_to_text(&synthscene::default_manifest());
    match out {
        Some(path) => {
            atomic_write(path, text.as_bytes())?;
            println!("wrote {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

/// Pre-trains the backbone on the train split and writes the checkpoint.
pub fn pretrain(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<()> {
    let dataset = synthscene::load_dataset(data_dir)?;
    let (images, labels) = dataset.train.stacked();
    let n_classes = dataset.train.classes.len();
    let data = LabeledImages::new(&images, &labels, n_classes)?;
    let pc = PretrainConfig {
        epochs: cfg.pre_epochs,
        batch_size: cfg.pre_batch_size,
        lr: cfg.pre_lr,
        momentum: cfg.pre_momentum,
        weight_decay: cfg.pre_weight_decay,
        rotation_weight: cfg.pre_rotation_weight,
        seed: cfg.seed,
    };
    let outcome = backbone::pretrain(&data, &pc)?;
    save_pretrain_checkpoint(out, &outcome.backbone, &outcome.heads)?;
    let last = outcome
        .history
        .epoch_mean_total
        .last()
        .copied()
        .unwrap_or(f32::NAN);
    println!(
        "pretrained on {} images / {n_classes} classes, final epoch loss {last:.4}; wrote {}",
        images.len(),
        out.display()
    );
    Ok(())
}

/// Meta-trains a fresh matcher over the frozen backbone and writes the
/// best-validation snapshot.
pub fn meta_train(cfg: &RunConfig, data_dir: &Path, backbone_path: &Path, out: &Path) -> Result<()> {
    let dataset = synthscene::load_dataset(data_dir)?;
    let trunk = load_backbone_trunk(backbone_path)?;
    let ablation = Ablation {
        no_propagation: cfg.no_propagation,
        no_interaction: cfg.no_interaction,
    };
    // Parameter init draws from a stream decorrelated from episode sampling.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9E37_79B9_7F4A_7C15);
    let matcher = MatcherParams::new(cfg.arch.arch(), ablation, &mut rng);
    let mtc = MetaTrainConfig {
        task: TaskSpec {
            way: cfg.way,
            shot: cfg.shot,
            queries: cfg.queries,
        },
        episodes_per_epoch: cfg.episodes_per_epoch,
        epochs: cfg.meta_epochs,
        val_episodes: cfg.val_episodes,
        patience: cfg.patience,
        lr: cfg.meta_lr,
        weight_decay: cfg.meta_weight_decay,
        seed: cfg.seed,
    };
    let outcome = episodic::meta_train(&trunk, matcher, &dataset, &mtc)?;
    outcome.matcher.save(out)?;
    println!(
        "meta-trained {} ({}): best val acc {:.4} at epoch {}; wrote {}",
        cfg.arch.as_str(),
        ablation.tag(),
        outcome.best_val_accuracy,
        outcome.best_epoch,
        out.display()
    );
    Ok(())
}

/// Everything the evaluate command records; field order fixes the JSON.
#[derive(serde::Serialize)]
struct Metrics {
    schema_version: u32,
    task: String,
    split: String,
    scorer: String,
    episodes: usize,
    mean_acc: f64,
    ci95: f64,
    tie_count: usize,
    seed: u64,
    no_propagation: bool,
    no_interaction: bool,
}

/// Evaluates the matcher (or a pooled-feature baseline) on episodes sampled
/// from one split and writes a metrics JSON. The episode stream depends only
/// on split, task, and seed, so runs differing in scorer alone are paired.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    cfg: &RunConfig,
    data_dir: &Path,
    backbone_path: &Path,
    matcher_path: &Path,
    baseline: Option<BaselineMetric>,
    split: Split,
    out: &Path,
    assert_ablation: Ablation,
) -> Result<()> {
    let dataset = synthscene::load_dataset(data_dir)?;
    let trunk = load_backbone_trunk(backbone_path)?;
    let split_images = dataset.split(split);
    let task = TaskSpec {
        way: cfg.way,
        shot: cfg.shot,
        queries: cfg.queries,
    };
    let episodes = episodic::sample_episodes(split_images, task, cfg.episodes, cfg.seed)?;
    let feats = extract_split_features(&trunk, split_images)?;

    let (report, scorer, ablation) = match baseline {
        Some(metric) => {
            let mut scorer = PooledScorer::new(&feats, metric);
            let report = episodic::evaluate_with(&mut scorer, &episodes, task)?;
            (report, format!("baseline-{}", metric.as_str()), Ablation::default())
        }
        None => {
            let matcher = MatcherParams::load(matcher_path)?;
            let ablation = matcher.ablation();
            if (assert_ablation.no_propagation && !ablation.no_propagation)
                || (assert_ablation.no_interaction && !ablation.no_interaction)
            {
                return Err(Error::Config(format!(
                    "ablation flags ask for {} but {} was trained as {}",
                    assert_ablation.tag(),
                    matcher_path.display(),
                    ablation.tag()
                )));
            }
            let mut scorer = MatcherScorer::new(&feats, &matcher);
            let report = episodic::evaluate_with(&mut scorer, &episodes, task)?;
            (report, "sgmnet".to_string(), ablation)
        }
    };

    let metrics = Metrics {
        schema_version: 1,
        task: format!("{}w{}s", task.way, task.shot),
        split: split.as_str().to_string(),
        scorer,
        episodes: report.episodes,
        mean_acc: report.mean_accuracy,
        ci95: report.ci95,
        tie_count: report.tie_count,
        seed: cfg.seed,
        no_propagation: ablation.no_propagation,
        no_interaction: ablation.no_interaction,
    };
    let json = serde_json::to_string_pretty(&metrics)
        .map_err(|e| Error::Config(format!("metrics serialization: {e}")))?;
    atomic_write(out, format!("{json}\n").as_bytes())?;
    println!(
        "{} {} [{}]: mean_acc {:.4} ci95 {:.4} over {} episodes (ties {}); wrote {}",
        metrics.split,
        metrics.task,
        metrics.scorer,
        metrics.mean_acc,
        metrics.ci95,
        metrics.episodes,
        metrics.tie_count,
        out.display()
    );
    Ok(())
}

/// Exports the interaction weights between a support and a query image:
/// the full row-stochastic matrix as CSV plus one grid-shaped PGM heatmap
/// per support node, each row scaled by its own maximum.
pub fn match_viz(
    backbone_path: &Path,
    matcher_path: &Path,
    support: &Path,
    query: &Path,
    out_dir: &Path,
) -> Result<()> {
    let trunk = load_backbone_trunk(backbone_path)?;
    let matcher = MatcherParams::load(matcher_path)?;
    let s_img = synthscene::load_image_tensor(support)?;
    let q_img = synthscene::load_image_tensor(query)?;
    let s_graph = build_graph(&trunk.extract_spatial(&s_img)?, &matcher.gcm)?;
    let q_graph = build_graph(&trunk.extract_spatial(&q_img)?, &matcher.gcm)?;
    let weights = export_matching_weights(&s_graph, &q_graph)?;
    let m = weights.shape()[0];
    let grid = (m as f64).sqrt().round() as usize;

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut csv = String::new();
    for r in 0..m {
        let row: Vec<String> = (0..m)
            .map(|c| format!("{:.6}", weights.data()[r * m + c]))
            .collect();
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    atomic_write(&out_dir.join("weights.csv"), csv.as_bytes())?;

    for r in 0..m {
        let row = &weights.data()[r * m..(r + 1) * m];
        let max = row.iter().fold(0.0f32, |a, &v| a.max(v));
        let bytes: Vec<u8> = row
            .iter()
            .map(|&v| if max > 0.0 { (v / max * 255.0).round() as u8 } else { 0 })
            .collect();
        let pgm = encode_pgm(grid, grid, &bytes);
        atomic_write(&out_dir.join(format!("node_{r:02}.pgm")), &pgm)?;
    }
    println!(
        "wrote {m}x{m} matching weights and {m} heatmaps under {}",
        out_dir.display()
    );
    Ok(())
}

/// Maps error variants to process exit codes: configuration and argument
/// problems are 1, data and file problems 2, numeric failures 3.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Data { .. } | Error::Io { .. } => 2,
        Error::Numeric(_) | Error::MissingGrad(_) => 3,
        _ => 1,
    }
}
