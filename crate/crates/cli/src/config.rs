//! Run configuration: one flat struct covering every phase, filled from
//! defaults, then an optional `key = value` config file, then the
//! `SGM_OUT_ROOT` environment variable (output root only), then explicit
//! command-line flags. Later sources win.

use std::path::{Path, PathBuf};

use sgm_core::scene_graph::ArchConfig;
use sgm_core::{Error, Result};

/// Width profile of the graph layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArchChoice {
    /// Full-size layers.
    Standard,
    /// Reduced widths for runs that must finish on one CPU core.
    Desk,
}

impl ArchChoice {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(ArchChoice::Standard),
            "desk" => Ok(ArchChoice::Desk),
            other => Err(Error::Config(format!(
                "unknown arch `{other}` (expected standard or desk)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ArchChoice::Standard => "standard",
            ArchChoice::Desk => "desk",
        }
    }

    pub fn arch(self) -> ArchConfig {
        match self {
            ArchChoice::Standard => ArchConfig::standard(),
            ArchChoice::Desk => ArchConfig::desk(),
        }
    }
}

/// Every tunable of the pipeline. Optimizer settings are per phase
/// (`pre_*` for backbone pre-training, `meta_*` for meta-training).
#[derive(Clone, Debug)]
pub struct RunConfig {
    // Paths. Relative output paths resolve under `out_root`.
    pub data_dir: PathBuf,
    pub out_root: PathBuf,
    pub backbone_ckpt: PathBuf,
    pub matcher_ckpt: PathBuf,
    // Episode task.
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub episodes: usize,
    // Graph architecture and ablations.
    pub arch: ArchChoice,
    pub no_propagation: bool,
    pub no_interaction: bool,
    // Backbone pre-training.
    pub pre_epochs: usize,
    pub pre_batch_size: usize,
    pub pre_lr: f32,
    pub pre_momentum: f32,
    pub pre_weight_decay: f32,
    pub pre_rotation_weight: f32,
    // Meta-training.
    pub meta_epochs: usize,
    pub episodes_per_epoch: usize,
    pub val_episodes: usize,
    pub patience: usize,
    pub meta_lr: f32,
    pub meta_weight_decay: f32,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_dir: "data".into(),
            out_root: ".".into(),
            backbone_ckpt: "backbone.ckpt".into(),
            matcher_ckpt: "matcher.ckpt".into(),
            way: 5,
            shot: 1,
            queries: 15,
            episodes: 600,
            arch: ArchChoice::Standard,
            no_propagation: false,
            no_interaction: false,
            pre_epochs: 10,
            pre_batch_size: 32,
            pre_lr: 0.1,
            pre_momentum: 0.9,
            pre_weight_decay: 5e-4,
            pre_rotation_weight: 1.0,
            meta_epochs: 30,
            episodes_per_epoch: 200,
            val_episodes: 100,
            patience: 5,
            meta_lr: 1e-3,
            meta_weight_decay: 5e-4,
            seed: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("key `{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "key `{key}`: expected true or false, got `{value}`"
        ))),
    }
}

impl RunConfig {
    /// Defaults overlaid with a config file (if given) and `SGM_OUT_ROOT`.
    pub fn load(file: Option<&Path>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            cfg.apply_file(path)?;
        }
        if let Ok(root) = std::env::var("SGM_OUT_ROOT") {
            if !root.is_empty() {
                cfg.out_root = root.into();
            }
        }
        Ok(cfg)
    }

    /// Applies a flat `key = value` file. `#` starts a comment; unknown keys
    /// are rejected so typos fail loudly.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}: line {}: expected `key = value`",
                    path.display(),
                    ln + 1
                ))
            })?;
            self.set(key.trim(), value.trim()).map_err(|e| {
                Error::Config(format!("{}: line {}: {e}", path.display(), ln + 1))
            })?;
        }
        Ok(())
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data_dir" => self.data_dir = value.into(),
            "out_root" => self.out_root = value.into(),
            "backbone_ckpt" => self.backbone_ckpt = value.into(),
            "matcher_ckpt" => self.matcher_ckpt = value.into(),
            "way" => self.way = parse(key, value)?,
            "shot" => self.shot = parse(key, value)?,
            "queries" => self.queries = parse(key, value)?,
            "episodes" => self.episodes = parse(key, value)?,
            "arch" => self.arch = ArchChoice::parse(value)?,
            "no_propagation" => self.no_propagation = parse_bool(key, value)?,
            "no_interaction" => self.no_interaction = parse_bool(key, value)?,
            "pre_epochs" => self.pre_epochs = parse(key, value)?,
            "pre_batch_size" => self.pre_batch_size = parse(key, value)?,
            "pre_lr" => self.pre_lr = parse(key, value)?,
            "pre_momentum" => self.pre_momentum = parse(key, value)?,
            "pre_weight_decay" => self.pre_weight_decay = parse(key, value)?,
            "pre_rotation_weight" => self.pre_rotation_weight = parse(key, value)?,
            "meta_epochs" => self.meta_epochs = parse(key, value)?,
            "episodes_per_epoch" => self.episodes_per_epoch = parse(key, value)?,
            "val_episodes" => self.val_episodes = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "meta_lr" => self.meta_lr = parse(key, value)?,
            "meta_weight_decay" => self.meta_weight_decay = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Resolves an artifact path: absolute stays as-is, relative lands under
    /// the output root, so one root prefixes every phase's artifacts.
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.out_root.join(path)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.way < 2 {
            return Err(Error::Config(format!(
                "way must be at least 2, got {}",
                self.way
            )));
        }
        if self.shot == 0 {
            return Err(Error::Config("shot must be at least 1".into()));
        }
        if self.queries == 0 {
            return Err(Error::Config("queries must be at least 1".into()));
        }
        if self.episodes == 0 {
            return Err(Error::Config("episodes must be at least 1".into()));
        }
        if !(self.pre_lr > 0.0) || !(self.meta_lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rates must be positive, got pre_lr {} and meta_lr {}",
                self.pre_lr, self.meta_lr
            )));
        }
        Ok(())
    }
}
