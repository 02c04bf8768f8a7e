//! Convolutional feature extractor and its self-supervised pre-training loop.
//!
//! The extractor is a five-block network: each block is a 3x3 convolution
//! (padding 1, no bias), batch normalization, and ReLU; blocks 1-4 end with a
//! 2x2 max-pool. Channel widths run 3 -> 64 -> 64 -> 128 -> 128 -> 256, so a
//! 64x64 RGB image becomes a 256x4x4 spatial feature map. The 16 grid cells of
//! that map later become scene-graph nodes.
//!
//! Pre-training minimizes a class cross-entropy plus a rotation-prediction
//! auxiliary: every batch image is also presented at one random quarter-turn
//! rotation and a 4-way head must recover the rotation. Both heads read a
//! global-average-pooled feature vector. When the rotation weight is zero the
//! rotated copies are omitted entirely so the run is a true ablation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{
    checkpoint, init_fan_in, BnMode, BnStats, Optimizer, SgdConfig, Tape, Tensor, Var,
};

/// Side length of the square input images.
pub const IMAGE_SIZE: usize = 64;
/// Channels of the final feature map.
pub const FEATURE_CHANNELS: usize = 256;
/// Spatial side of the final feature map (16 cells total).
pub const FEATURE_GRID: usize = 4;
/// Number of rotation classes in the auxiliary head.
pub const NUM_ROTATIONS: usize = 4;

/// Output channels of each block; input channels follow from the predecessor.
const WIDTHS: [usize; 5] = [64, 64, 128, 128, 256];

/// One convolution + batch-norm block. The convolution carries no bias; the
/// batch-norm shift plays that role.
pub struct ConvBlock {
    pub weight: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub stats: BnStats,
}

impl ConvBlock {
    fn new(in_ch: usize, out_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = in_ch * 9;
        ConvBlock {
            weight: init_fan_in(&[out_ch, in_ch, 3, 3], fan_in, rng),
            gamma: Tensor::ones(&[out_ch]),
            beta: Tensor::zeros(&[out_ch]),
            stats: BnStats::new(out_ch),
        }
    }
}

/// The five-block convolutional trunk.
pub struct Conv5Backbone {
    pub blocks: Vec<ConvBlock>,
}

/// Tape handles for one bound copy of the trunk parameters.
pub struct BackboneBinds {
    blocks: Vec<(Var, Var, Var)>,
}

impl Conv5Backbone {
    /// Fresh trunk with He-initialized weights.
    pub fn new(rng: &mut ChaCha8Rng) -> Self {
        let mut blocks = Vec::with_capacity(WIDTHS.len());
        let mut in_ch = 3;
        for &out_ch in &WIDTHS {
            blocks.push(ConvBlock::new(in_ch, out_ch, rng));
            in_ch = out_ch;
        }
        Conv5Backbone { blocks }
    }

    /// Copies the parameters onto `tape`, requesting gradients if `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BackboneBinds {
        let put = |tape: &mut Tape, t: &Tensor| {
            if trainable {
                tape.param(t)
            } else {
                tape.frozen(t)
            }
        };
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                (
                    put(tape, &b.weight),
                    put(tape, &b.gamma),
                    put(tape, &b.beta),
                )
            })
            .collect();
        BackboneBinds { blocks }
    }

    /// Training-mode forward: batch statistics, running-stat updates.
    /// `x` is `[B, 3, 64, 64]`; the result is `[B, 256, 4, 4]`.
    pub fn forward_train(
        &mut self,
        tape: &mut Tape,
        binds: &BackboneBinds,
        x: Var,
    ) -> Result<Var> {
        let mut h = x;
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let (w, gamma, beta) = binds.blocks[i];
            h = tape.conv2d(h, w)?;
            h = tape.batchnorm2d(h, gamma, beta, &mut block.stats, BnMode::Train)?;
            h = tape.relu(h);
            if i + 1 < WIDTHS.len() {
                h = tape.maxpool2(h)?;
            }
        }
        Ok(h)
    }

    /// Inference-mode forward: running statistics, no state mutation.
    pub fn forward_eval(&self, tape: &mut Tape, binds: &BackboneBinds, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, block) in self.blocks.iter().enumerate() {
            let (w, gamma, beta) = binds.blocks[i];
            let mut stats = block.stats.clone();
            h = tape.conv2d(h, w)?;
            h = tape.batchnorm2d(h, gamma, beta, &mut stats, BnMode::Eval)?;
            h = tape.relu(h);
            if i + 1 < WIDTHS.len() {
                h = tape.maxpool2(h)?;
            }
        }
        Ok(h)
    }

    /// Inference features for a single `[3, 64, 64]` image as `[256, 4, 4]`.
    pub fn extract_spatial(&self, image: &Tensor) -> Result<Tensor> {
        if image.shape() != [3, IMAGE_SIZE, IMAGE_SIZE] {
            return Err(Error::BadShape {
                op: "extract_spatial",
                expected: format!("[3, {IMAGE_SIZE}, {IMAGE_SIZE}]"),
                got: image.shape().to_vec(),
            });
        }
        let mut tape = Tape::new();
        let x = tape.constant(image.clone().reshaped(&[1, 3, IMAGE_SIZE, IMAGE_SIZE])?);
        let binds = self.bind(&mut tape, false);
        let out = self.forward_eval(&mut tape, &binds, x)?;
        let feat = tape
            .detach(out)
            .reshaped(&[FEATURE_CHANNELS, FEATURE_GRID, FEATURE_GRID])?;
        if !feat.is_finite() {
            return Err(Error::Numeric(
                "non-finite value in extracted spatial features".into(),
            ));
        }
        Ok(feat)
    }

    /// Trainable parameters in a fixed order, paired with checkpoint names.
    pub fn trainable_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("backbone.block{i}.conv.weight"), &mut b.weight));
            out.push((format!("backbone.block{i}.bn.gamma"), &mut b.gamma));
            out.push((format!("backbone.block{i}.bn.beta"), &mut b.beta));
        }
        out
    }

    /// All tensors (parameters and running statistics) for checkpointing.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("backbone.block{i}.conv.weight"), b.weight.clone()));
            out.push((format!("backbone.block{i}.bn.gamma"), b.gamma.clone()));
            out.push((format!("backbone.block{i}.bn.beta"), b.beta.clone()));
            let c = b.gamma.numel();
            let mean = Tensor::new(vec![c], b.stats.mean.clone()).expect("stat length");
            let var = Tensor::new(vec![c], b.stats.var.clone()).expect("stat length");
            out.push((format!("backbone.block{i}.bn.running_mean"), mean));
            out.push((format!("backbone.block{i}.bn.running_var"), var));
        }
        out
    }

    fn from_map(map: &mut checkpoint::TensorMap) -> Result<Self> {
        let mut blocks = Vec::with_capacity(WIDTHS.len());
        let mut in_ch = 3;
        for (i, &out_ch) in WIDTHS.iter().enumerate() {
            let weight = map.take(
                &format!("backbone.block{i}.conv.weight"),
                &[out_ch, in_ch, 3, 3],
            )?;
            let gamma = map.take(&format!("backbone.block{i}.bn.gamma"), &[out_ch])?;
            let beta = map.take(&format!("backbone.block{i}.bn.beta"), &[out_ch])?;
            let mean = map.take(&format!("backbone.block{i}.bn.running_mean"), &[out_ch])?;
            let var = map.take(&format!("backbone.block{i}.bn.running_var"), &[out_ch])?;
            blocks.push(ConvBlock {
                weight,
                gamma,
                beta,
                stats: BnStats {
                    mean: mean.data().to_vec(),
                    var: var.data().to_vec(),
                },
            });
            in_ch = out_ch;
        }
        Ok(Conv5Backbone { blocks })
    }

    /// Sum of all parameter and running-statistic bits; detects any drift.
    pub fn bit_checksum(&self) -> u64 {
        let mut acc = 0u64;
        for (_, t) in self.named_tensors() {
            for &v in t.data() {
                acc = acc.wrapping_mul(0x100000001b3).wrapping_add(v.to_bits() as u64);
            }
        }
        acc
    }
}

/// Classification and rotation heads used only during pre-training.
pub struct PretrainHeads {
    pub class_w: Tensor,
    pub class_b: Tensor,
    pub rot_w: Tensor,
    pub rot_b: Tensor,
}

impl PretrainHeads {
    pub fn new(n_classes: usize, rng: &mut ChaCha8Rng) -> Self {
        PretrainHeads {
            class_w: init_fan_in(&[n_classes, FEATURE_CHANNELS], FEATURE_CHANNELS, rng),
            class_b: Tensor::zeros(&[n_classes]),
            rot_w: init_fan_in(&[NUM_ROTATIONS, FEATURE_CHANNELS], FEATURE_CHANNELS, rng),
            rot_b: Tensor::zeros(&[NUM_ROTATIONS]),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.class_w.shape()[0]
    }

    pub fn trainable_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("heads.class.weight".into(), &mut self.class_w),
            ("heads.class.bias".into(), &mut self.class_b),
            ("heads.rot.weight".into(), &mut self.rot_w),
            ("heads.rot.bias".into(), &mut self.rot_b),
        ]
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        vec![
            ("heads.class.weight".into(), self.class_w.clone()),
            ("heads.class.bias".into(), self.class_b.clone()),
            ("heads.rot.weight".into(), self.rot_w.clone()),
            ("heads.rot.bias".into(), self.rot_b.clone()),
        ]
    }

    fn from_map(map: &mut checkpoint::TensorMap, n_classes: usize) -> Result<Self> {
        Ok(PretrainHeads {
            class_w: map.take("heads.class.weight", &[n_classes, FEATURE_CHANNELS])?,
            class_b: map.take("heads.class.bias", &[n_classes])?,
            rot_w: map.take("heads.rot.weight", &[NUM_ROTATIONS, FEATURE_CHANNELS])?,
            rot_b: map.take("heads.rot.bias", &[NUM_ROTATIONS])?,
        })
    }
}

/// Trunk plus heads, as written by pre-training.
pub struct PretrainCheckpoint {
    pub backbone: Conv5Backbone,
    pub heads: PretrainHeads,
}

/// Writes trunk and head tensors to `path` atomically.
pub fn save_pretrain_checkpoint(
    path: &Path,
    backbone: &Conv5Backbone,
    heads: &PretrainHeads,
) -> Result<()> {
    let mut tensors = backbone.named_tensors();
    tensors.extend(heads.named_tensors());
    let named: Vec<(String, &Tensor)> = tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
    checkpoint::save(path, &named)
}

/// Reads a checkpoint written by [`save_pretrain_checkpoint`].
pub fn load_pretrain_checkpoint(path: &Path, n_classes: usize) -> Result<PretrainCheckpoint> {
    let mut map = checkpoint::TensorMap::load(path)?;
    let backbone = Conv5Backbone::from_map(&mut map)?;
    let heads = PretrainHeads::from_map(&mut map, n_classes)?;
    map.finish()?;
    Ok(PretrainCheckpoint { backbone, heads })
}

/// Reads only the trunk from a pre-training checkpoint, ignoring the heads.
/// Downstream phases freeze the trunk and never need the head shapes.
pub fn load_backbone_trunk(path: &Path) -> Result<Conv5Backbone> {
    let mut map = checkpoint::TensorMap::load(path)?;
    Conv5Backbone::from_map(&mut map)
}

/// A labeled image collection borrowed from a dataset.
pub struct LabeledImages<'a> {
    pub images: &'a [Tensor],
    pub labels: &'a [u32],
    pub n_classes: usize,
}

impl<'a> LabeledImages<'a> {
    pub fn new(images: &'a [Tensor], labels: &'a [u32], n_classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if images.is_empty() {
            return Err(Error::InvalidArgument("empty image collection".into()));
        }
        for (i, img) in images.iter().enumerate() {
            if img.shape() != [3, IMAGE_SIZE, IMAGE_SIZE] {
                return Err(Error::BadShape {
                    op: "LabeledImages",
                    expected: format!("[3, {IMAGE_SIZE}, {IMAGE_SIZE}] for image {i}"),
                    got: img.shape().to_vec(),
                });
            }
        }
        if let Some((i, &l)) = labels
            .iter()
            .enumerate()
            .find(|&(_, &l)| l as usize >= n_classes)
        {
            return Err(Error::InvalidArgument(format!(
                "label {l} of image {i} out of range for {n_classes} classes"
            )));
        }
        Ok(LabeledImages {
            images,
            labels,
            n_classes,
        })
    }
}

/// Hyper-parameters of the pre-training loop.
#[derive(Clone, Debug)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Weight of the rotation objective; zero disables rotated copies.
    pub rotation_weight: f32,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            rotation_weight: 1.0,
            seed: 0,
        }
    }
}

/// Loss components recorded after every optimizer step.
#[derive(Clone, Copy, Debug)]
pub struct StepLoss {
    pub class_loss: f32,
    pub rot_loss: f32,
    pub total: f32,
}

/// Per-step and per-epoch training record.
pub struct PretrainHistory {
    pub steps: Vec<StepLoss>,
    pub epoch_mean_total: Vec<f32>,
}

/// Result of a pre-training run.
pub struct PretrainOutcome {
    pub backbone: Conv5Backbone,
    pub heads: PretrainHeads,
    pub history: PretrainHistory,
}

/// Rotates a `[C, H, W]` image by `k` quarter turns counter-clockwise.
pub fn rotate90(image: &Tensor, k: usize) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 || shape[1] != shape[2] {
        return Err(Error::BadShape {
            op: "rotate90",
            expected: "[C, N, N]".into(),
            got: shape.to_vec(),
        });
    }
    let (c, n) = (shape[0], shape[1]);
    let k = k % 4;
    if k == 0 {
        return Ok(image.clone());
    }
    let src = image.data();
    let mut dst = vec![0.0f32; src.len()];
    for ch in 0..c {
        let base = ch * n * n;
        for y in 0..n {
            for x in 0..n {
                // One quarter turn maps (y, x) <- (x, n-1-y); higher k composes it.
                let (sy, sx) = match k {
                    1 => (x, n - 1 - y),
                    2 => (n - 1 - y, n - 1 - x),
                    _ => (n - 1 - x, y),
                };
                dst[base + y * n + x] = src[base + sy * n + sx];
            }
        }
    }
    Tensor::new(vec![c, n, n], dst)
}

fn stack_images(images: &[&Tensor]) -> Result<Tensor> {
    let n = images.len();
    let mut data = Vec::with_capacity(n * 3 * IMAGE_SIZE * IMAGE_SIZE);
    for img in images {
        data.extend_from_slice(img.data());
    }
    Tensor::new(vec![n, 3, IMAGE_SIZE, IMAGE_SIZE], data)
}

/// Learning rate for a given epoch: the base rate decayed tenfold at 60%,
/// 80%, and 90% of the schedule.
fn epoch_lr(base: f32, epoch: usize, total: usize) -> f32 {
    let mut lr = base;
    for frac in [0.6, 0.8, 0.9] {
        if epoch >= ((total as f64) * frac).floor() as usize {
            lr *= 0.1;
        }
    }
    lr
}

/// Runs supervised + rotation pre-training and returns the trained network.
pub fn pretrain(data: &LabeledImages, cfg: &PretrainConfig) -> Result<PretrainOutcome> {
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config(
            "pretrain epochs and batch_size must be positive".into(),
        ));
    }
    if cfg.batch_size < 2 {
        return Err(Error::Config(
            "batch normalization needs batch_size >= 2".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut backbone = Conv5Backbone::new(&mut rng);
    let mut heads = PretrainHeads::new(data.n_classes, &mut rng);

    let sizes: Vec<usize> = backbone
        .trainable_mut()
        .iter()
        .map(|(_, t)| t.numel())
        .chain(heads.trainable_mut().iter().map(|(_, t)| t.numel()))
        .collect();
    let mut opt = Optimizer::sgd(
        SgdConfig {
            lr: cfg.lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        },
        &sizes,
    );

    let use_rotation = cfg.rotation_weight != 0.0;
    let mut order: Vec<usize> = (0..data.images.len()).collect();
    let mut steps = Vec::new();
    let mut epoch_mean_total = Vec::new();

    for epoch in 0..cfg.epochs {
        opt.set_lr(epoch_lr(cfg.lr, epoch, cfg.epochs));
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0f64;
        let mut epoch_steps = 0usize;

        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue; // batch statistics are undefined for a single image
            }
            let originals: Vec<&Tensor> = chunk.iter().map(|&i| &data.images[i]).collect();
            let class_labels: Vec<u32> = chunk.iter().map(|&i| data.labels[i]).collect();
            let b = chunk.len();

            let mut rotated = Vec::new();
            let mut rot_labels = Vec::new();
            if use_rotation {
                for &i in chunk {
                    let k = rng.gen_range(0..NUM_ROTATIONS);
                    rotated.push(rotate90(&data.images[i], k)?);
                    rot_labels.push(k as u32);
                }
            }

            let mut tape = Tape::new();
            let bb = backbone.bind(&mut tape, true);
            let class_w = tape.param(&heads.class_w);
            let class_b = tape.param(&heads.class_b);
            let rot_w = tape.param(&heads.rot_w);
            let rot_b = tape.param(&heads.rot_b);

            let mut all: Vec<&Tensor> = originals.clone();
            all.extend(rotated.iter());
            let x = tape.leaf(stack_images(&all)?);
            let feats4 = backbone.forward_train(&mut tape, &bb, x)?;
            let feats = tape.global_avg_pool(feats4)?;

            let orig_rows: Vec<u32> = (0..b as u32).collect();
            let f_orig = tape.gather_rows(feats, Arc::new(orig_rows))?;
            let class_logits = tape.linear(f_orig, class_w, class_b)?;
            let class_loss = tape.cross_entropy(class_logits, Arc::new(class_labels))?;

            let (loss, rot_loss_val) = if use_rotation {
                let rot_rows: Vec<u32> = (b as u32..2 * b as u32).collect();
                let f_rot = tape.gather_rows(feats, Arc::new(rot_rows))?;
                let rot_logits = tape.linear(f_rot, rot_w, rot_b)?;
                let rot_loss = tape.cross_entropy(rot_logits, Arc::new(rot_labels))?;
                let scaled = tape.scale(rot_loss, cfg.rotation_weight);
                (tape.add(class_loss, scaled)?, tape.value(rot_loss).item())
            } else {
                (class_loss, 0.0)
            };

            let class_loss_val = tape.value(class_loss).item();
            let total_val = tape.value(loss).item();
            if !total_val.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite pre-training loss at epoch {epoch}, step {epoch_steps}"
                )));
            }
            tape.backward(loss)?;

            let bound: Vec<Var> = bb
                .blocks
                .iter()
                .flat_map(|&(w, g, be)| [w, g, be])
                .chain([class_w, class_b, rot_w, rot_b])
                .collect();
            let grads: Vec<Option<&[f32]>> = bound.iter().map(|&v| tape.grad(v)).collect();
            let mut params = backbone.trainable_mut();
            params.extend(heads.trainable_mut());
            let mut params: Vec<(&str, &mut Tensor)> = params
                .iter_mut()
                .map(|(n, t)| (n.as_str(), &mut **t))
                .collect();
            opt.step(&mut params, &grads)?;

            steps.push(StepLoss {
                class_loss: class_loss_val,
                rot_loss: rot_loss_val,
                total: total_val,
            });
            epoch_total += total_val as f64;
            epoch_steps += 1;
        }
        if epoch_steps == 0 {
            return Err(Error::Config(
                "batch_size leaves no usable batches".into(),
            ));
        }
        let mean = (epoch_total / epoch_steps as f64) as f32;
        log::info!("pretrain epoch {epoch}: mean loss {mean:.4}");
        epoch_mean_total.push(mean);
    }

    Ok(PretrainOutcome {
        backbone,
        heads,
        history: PretrainHistory {
            steps,
            epoch_mean_total,
        },
    })
}

/// Classification accuracy of the trunk + class head in inference mode.
pub fn class_accuracy(
    backbone: &Conv5Backbone,
    heads: &PretrainHeads,
    data: &LabeledImages,
) -> Result<f32> {
    let mut correct = 0usize;
    for (img, &label) in data.images.iter().zip(data.labels) {
        let mut tape = Tape::new();
        let x = tape.constant(img.clone().reshaped(&[1, 3, IMAGE_SIZE, IMAGE_SIZE])?);
        let binds = backbone.bind(&mut tape, false);
        let w = tape.frozen(&heads.class_w);
        let bvar = tape.frozen(&heads.class_b);
        let feats4 = backbone.forward_eval(&mut tape, &binds, x)?;
        let feats = tape.global_avg_pool(feats4)?;
        let logits = tape.linear(feats, w, bvar)?;
        let row = tape.value(logits);
        let mut best = 0usize;
        for (j, &v) in row.data().iter().enumerate() {
            if v > row.data()[best] {
                best = j;
            }
        }
        if best == label as usize {
            correct += 1;
        }
    }
    Ok(correct as f32 / data.images.len() as f32)
}
