//! Episode sampling, meta-training, and episodic evaluation.
//!
//! An *episode* is one N-way K-shot task: N classes drawn from a split, K
//! support and M_q query images per class, support and query disjoint.
//! Meta-training builds one prototype graph per class from the mean of its
//! support features, scores every query against every prototype, and takes
//! a gradient step on the mean squared error against the one-hot class
//! indicator. Evaluation predicts the highest-scoring prototype and reports
//! mean accuracy with a 95% confidence half-width over episodes.
//!
//! The backbone is frozen throughout: spatial features are extracted once
//! per split and all learning happens in the graph parameters.

use std::collections::HashMap;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::Conv5Backbone;
use crate::error::{Error, Result};
use crate::graph_matching::{aggregate_rows, prepare, MatcherParams};
use crate::scene_graph::build_graph;
use crate::synthscene::{LoadedDataset, SplitImages};
use crate::tensor::{AdamConfig, BnMode, Optimizer, Tape, Tensor, Var};

/// Task dimensions of one episode: `way` classes, `shot` support and
/// `queries` query images per class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskSpec {
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
}

impl TaskSpec {
    /// The 5-way 1-shot protocol with 15 queries per class.
    pub const fn five_way_one_shot() -> Self {
        TaskSpec {
            way: 5,
            shot: 1,
            queries: 15,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.way < 2 {
            return Err(Error::InvalidArgument(format!(
                "an episode needs at least 2 classes, got way = {}",
                self.way
            )));
        }
        if self.shot == 0 || self.queries == 0 {
            return Err(Error::InvalidArgument(format!(
                "shot and queries must be at least 1, got {} and {}",
                self.shot, self.queries
            )));
        }
        Ok(())
    }

    /// Query count per episode.
    pub const fn n_query(&self) -> usize {
        self.way * self.queries
    }
}

/// One image reference inside an episode. `label` is the episode-local class
/// index in `[0, way)`; `class_pos` indexes the split's class list.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeItem {
    pub class_pos: usize,
    pub image_idx: usize,
    pub label: usize,
}

/// A sampled N-way K-shot task. Support and query sets are disjoint and
/// grouped by label; `classes[label]` is the split position of that class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub classes: Vec<usize>,
    pub support: Vec<EpisodeItem>,
    pub query: Vec<EpisodeItem>,
}

/// The first `k` entries of a uniformly shuffled `0..n` (partial
/// Fisher-Yates), so every size-k ordered selection is equally likely.
fn choose(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

/// Draws one episode: uniform class selection, then uniform disjoint
/// support/query selection within each class.
pub fn sample_episode(
    split: &SplitImages,
    task: TaskSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    task.validate()?;
    let have = split.classes.len();
    if have < task.way {
        return Err(Error::Capacity(format!(
            "episode needs {} classes but the split has {have}",
            task.way
        )));
    }
    let classes = choose(have, task.way, rng);
    let per = task.shot + task.queries;
    let mut support = Vec::with_capacity(task.way * task.shot);
    let mut query = Vec::with_capacity(task.n_query());
    for (label, &class_pos) in classes.iter().enumerate() {
        let class = &split.classes[class_pos];
        let n = class.images.len();
        if n < per {
            return Err(Error::Capacity(format!(
                "class {} needs {per} images ({} support + {} query) but has {n}",
                class.class_id, task.shot, task.queries
            )));
        }
        let picks = choose(n, per, rng);
        for (j, &image_idx) in picks.iter().enumerate() {
            let item = EpisodeItem {
                class_pos,
                image_idx,
                label,
            };
            if j < task.shot {
                support.push(item);
            } else {
                query.push(item);
            }
        }
    }
    Ok(Episode {
        classes,
        support,
        query,
    })
}

/// Pre-samples a fixed episode sequence from one seed. Evaluations that share
/// a seed consume identical episodes, which makes their accuracies paired.
pub fn sample_episodes(
    split: &SplitImages,
    task: TaskSpec,
    count: usize,
    seed: u64,
) -> Result<Vec<Episode>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| sample_episode(split, task, &mut rng))
        .collect()
}

// ---------------------------------------------------------------------------
// Features
// ---------------------------------------------------------------------------

/// Frozen spatial features for every image of a split, indexed like the
/// split's class list.
pub struct SplitFeatures {
    pub classes: Vec<Vec<Tensor>>,
}

impl SplitFeatures {
    fn get(&self, item: EpisodeItem) -> &Tensor {
        &self.classes[item.class_pos][item.image_idx]
    }
}

/// Runs the frozen backbone over every image of the split once.
pub fn extract_split_features(
    backbone: &Conv5Backbone,
    split: &SplitImages,
) -> Result<SplitFeatures> {
    let mut classes = Vec::with_capacity(split.classes.len());
    for class in &split.classes {
        let mut feats = Vec::with_capacity(class.images.len());
        for image in &class.images {
            feats.push(backbone.extract_spatial(image)?);
        }
        classes.push(feats);
    }
    Ok(SplitFeatures { classes })
}

// ---------------------------------------------------------------------------
// Scoring
// ---------------------------------------------------------------------------

/// Produces one similarity score per (query, class) pair of an episode.
pub trait EpisodeScorer {
    /// Row-major `[n_query, way]` scores; higher means more similar.
    fn score_episode(&mut self, episode: &Episode, task: TaskSpec) -> Result<Vec<f32>>;
}

/// Copies a column block `[lo, hi)` of a row-major matrix.
fn slice_cols(w: &Tensor, lo: usize, hi: usize) -> Tensor {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let mut out = Vec::with_capacity(rows * (hi - lo));
    for r in 0..rows {
        out.extend_from_slice(&w.data()[r * cols + lo..r * cols + hi]);
    }
    Tensor::new(vec![rows, hi - lo], out).expect("column slice shape")
}

/// A graph prepared for repeated pair scoring: the update layer is applied
/// to the pair-independent inputs (own nodes, propagated nodes) once, so a
/// pair costs only the cross-attention term.
#[derive(Clone)]
struct EngineGraph {
    nodes: Tensor,
    /// `[M, update_dim]`, bias included, pre-activation.
    z_self: Tensor,
}

/// Graph-matching scorer over frozen features. Per-image graphs are cached
/// across episodes; parameters must not change while the scorer is alive.
pub struct MatcherScorer<'a> {
    feats: &'a SplitFeatures,
    params: &'a MatcherParams,
    /// Update-weight columns for the pair-independent input block.
    w_self: Tensor,
    /// Update-weight columns for the cross representation, if interaction
    /// is enabled.
    w_cross: Option<Tensor>,
    cache: HashMap<(usize, usize), EngineGraph>,
}

impl<'a> MatcherScorer<'a> {
    pub fn new(feats: &'a SplitFeatures, params: &'a MatcherParams) -> Self {
        let arch = params.arch();
        let ablation = params.ablation();
        let upd = &params.gmm.upd_w;
        let self_w = upd.shape()[1] - if ablation.no_interaction { 0 } else { arch.node_dim };
        let w_self = slice_cols(upd, 0, self_w);
        let w_cross = (!ablation.no_interaction)
            .then(|| slice_cols(upd, self_w, self_w + arch.node_dim));
        MatcherScorer {
            feats,
            params,
            w_self,
            w_cross,
            cache: HashMap::new(),
        }
    }

    /// Builds the graph for one feature map and pre-applies the update layer
    /// to its pair-independent inputs.
    fn engine_graph(&self, feat: &Tensor) -> Result<EngineGraph> {
        let g = build_graph(feat, &self.params.gcm)?;
        let pg = prepare(&g, &self.params.gmm)?;
        let mut tape = Tape::new();
        let nodes = tape.constant(pg.nodes.clone());
        let x = match &pg.intra {
            Some(intra) => {
                let iv = tape.constant(intra.clone());
                tape.concat_cols(&[nodes, iv])?
            }
            None => nodes,
        };
        let w = tape.constant(self.w_self.clone());
        let b = tape.constant(self.params.gmm.upd_b.clone());
        let z = tape.linear(x, w, b)?;
        Ok(EngineGraph {
            nodes: pg.nodes,
            z_self: tape.detach(z),
        })
    }

    fn cached(&mut self, item: EpisodeItem) -> Result<EngineGraph> {
        let key = (item.class_pos, item.image_idx);
        if let Some(g) = self.cache.get(&key) {
            return Ok(g.clone());
        }
        let g = self.engine_graph(self.feats.get(item))?;
        self.cache.insert(key, g.clone());
        Ok(g)
    }

    /// Prototype graph for one class: mean support features, then encode.
    fn prototype(&mut self, items: &[EpisodeItem]) -> Result<EngineGraph> {
        if items.len() == 1 {
            return self.cached(items[0]);
        }
        let feats: Vec<&Tensor> = items.iter().map(|it| self.feats.get(*it)).collect();
        self.engine_graph(&Tensor::mean_of(&feats)?)
    }
}

impl EpisodeScorer for MatcherScorer<'_> {
    fn score_episode(&mut self, episode: &Episode, task: TaskSpec) -> Result<Vec<f32>> {
        let mut protos = Vec::with_capacity(task.way);
        for label in 0..task.way {
            let items: Vec<EpisodeItem> = episode
                .support
                .iter()
                .copied()
                .filter(|it| it.label == label)
                .collect();
            protos.push(self.prototype(&items)?);
        }
        let queries: Vec<EngineGraph> = episode
            .query
            .iter()
            .map(|it| self.cached(*it))
            .collect::<Result<_>>()?;

        let mut tape = Tape::new();
        let wc = match &self.w_cross {
            Some(w) => Some(tape.constant(w.clone())),
            None => None,
        };
        let agg_w = tape.constant(self.params.gmm.agg_w.clone());
        let agg_b = tape.constant(self.params.gmm.agg_b.clone());
        let lift = |tape: &mut Tape, g: &EngineGraph| {
            let nodes = tape.constant(g.nodes.clone());
            let z_self = tape.constant(g.z_self.clone());
            (nodes, z_self)
        };
        let pvars: Vec<(Var, Var)> = protos.iter().map(|g| lift(&mut tape, g)).collect();
        let qvars: Vec<(Var, Var)> = queries.iter().map(|g| lift(&mut tape, g)).collect();

        let mut scores = Vec::with_capacity(queries.len() * task.way);
        for &(qn, qz) in &qvars {
            for &(pn, pz) in &pvars {
                let (zq, zp) = match wc {
                    Some(wc) => {
                        let logits = tape.matmul_nt(qn, pn)?;
                        let wa = tape.softmax(logits, 1)?;
                        let ca = tape.matmul(wa, pn)?;
                        let wb = tape.softmax(logits, 0)?;
                        let cb = tape.matmul_tn(wb, qn)?;
                        let zq = tape.matmul_nt(ca, wc)?;
                        let zp = tape.matmul_nt(cb, wc)?;
                        (tape.add(qz, zq)?, tape.add(pz, zp)?)
                    }
                    None => (qz, pz),
                };
                let uq = tape.relu(zq);
                let up = tape.relu(zp);
                let rq = aggregate_rows(&mut tape, uq, agg_w, agg_b)?;
                let rp = aggregate_rows(&mut tape, up, agg_w, agg_b)?;
                let cos = tape.cosine_sim(rq, rp)?;
                let v = tape.value(cos).data()[0];
                if !v.is_finite() {
                    return Err(Error::Numeric("non-finite match score".into()));
                }
                scores.push((v + 1.0) * 0.5);
            }
        }
        Ok(scores)
    }
}

/// Distance choice for the pooled-feature baselines.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineMetric {
    Euclidean,
    Cosine,
}

impl BaselineMetric {
    pub fn as_str(&self) -> &'static str {
        match self {
            BaselineMetric::Euclidean => "euclidean",
            BaselineMetric::Cosine => "cosine",
        }
    }
}

/// Prototype baseline on globally average-pooled features: prototype = mean
/// pooled support vector per class, prediction by the chosen metric.
pub struct PooledScorer<'a> {
    feats: &'a SplitFeatures,
    metric: BaselineMetric,
    cache: HashMap<(usize, usize), Vec<f32>>,
}

impl<'a> PooledScorer<'a> {
    pub fn new(feats: &'a SplitFeatures, metric: BaselineMetric) -> Self {
        PooledScorer {
            feats,
            metric,
            cache: HashMap::new(),
        }
    }

    /// Mean over the spatial cells of each channel.
    fn pooled(&mut self, item: EpisodeItem) -> Vec<f32> {
        let key = (item.class_pos, item.image_idx);
        if let Some(v) = self.cache.get(&key) {
            return v.clone();
        }
        let feat = self.feats.get(item);
        let (c, cells) = (feat.shape()[0], feat.numel() / feat.shape()[0]);
        let v: Vec<f32> = (0..c)
            .map(|ch| feat.data()[ch * cells..(ch + 1) * cells].iter().sum::<f32>() / cells as f32)
            .collect();
        self.cache.insert(key, v.clone());
        v
    }
}

impl EpisodeScorer for PooledScorer<'_> {
    fn score_episode(&mut self, episode: &Episode, task: TaskSpec) -> Result<Vec<f32>> {
        let mut protos = vec![vec![0.0f32; 0]; task.way];
        for label in 0..task.way {
            let items: Vec<EpisodeItem> = episode
                .support
                .iter()
                .copied()
                .filter(|it| it.label == label)
                .collect();
            let mut mean = vec![0.0f32; self.pooled(items[0]).len()];
            for it in &items {
                for (m, v) in mean.iter_mut().zip(self.pooled(*it)) {
                    *m += v / items.len() as f32;
                }
            }
            protos[label] = mean;
        }
        let mut scores = Vec::with_capacity(episode.query.len() * task.way);
        for item in &episode.query {
            let q = self.pooled(*item);
            for proto in &protos {
                let s = match self.metric {
                    // Negated squared distance: argmax(score) = argmin(dist).
                    BaselineMetric::Euclidean => {
                        -q.iter()
                            .zip(proto)
                            .map(|(a, b)| {
                                let d = (*a - *b) as f64;
                                d * d
                            })
                            .sum::<f64>()
                    }
                    BaselineMetric::Cosine => {
                        let dot: f64 = q.iter().zip(proto).map(|(a, b)| *a as f64 * *b as f64).sum();
                        let na: f64 = q.iter().map(|v| (*v as f64).powi(2)).sum();
                        let nb: f64 = proto.iter().map(|v| (*v as f64).powi(2)).sum();
                        let denom = na.sqrt() * nb.sqrt();
                        if denom == 0.0 {
                            0.0
                        } else {
                            dot / denom
                        }
                    }
                };
                scores.push(s as f32);
            }
        }
        Ok(scores)
    }
}

/// Degenerate scorer that rates every class equally; exposes the behavior of
/// the tie-break rule for protocol statistics checks.
pub struct ConstantScorer;

impl EpisodeScorer for ConstantScorer {
    fn score_episode(&mut self, episode: &Episode, task: TaskSpec) -> Result<Vec<f32>> {
        Ok(vec![0.0; episode.query.len() * task.way])
    }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Accuracy statistics over a sequence of episodes.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub episodes: usize,
    /// Mean of the per-episode accuracies.
    pub mean_accuracy: f64,
    /// Half-width of the 95% confidence interval: 1.96·σ/√E with σ the
    /// sample standard deviation over episodes (0 when E = 1).
    pub ci95: f64,
    /// Queries whose maximal score was shared by several classes.
    pub tie_count: usize,
    pub per_episode: Vec<f64>,
}

impl EvalReport {
    fn from_accuracies(per_episode: Vec<f64>, tie_count: usize) -> Self {
        let e = per_episode.len();
        let mean = per_episode.iter().sum::<f64>() / e as f64;
        let ci95 = if e > 1 {
            let var = per_episode.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (e - 1) as f64;
            1.96 * var.sqrt() / (e as f64).sqrt()
        } else {
            0.0
        };
        EvalReport {
            episodes: e,
            mean_accuracy: mean,
            ci95,
            tie_count,
            per_episode,
        }
    }
}

/// Scores every episode and reduces to accuracy statistics. Prediction is
/// the score argmax; exact ties go to the lowest class index and are counted.
pub fn evaluate_with(
    scorer: &mut dyn EpisodeScorer,
    episodes: &[Episode],
    task: TaskSpec,
) -> Result<EvalReport> {
    if episodes.is_empty() {
        return Err(Error::InvalidArgument("no episodes to evaluate".into()));
    }
    let mut per_episode = Vec::with_capacity(episodes.len());
    let mut ties = 0usize;
    for episode in episodes {
        let scores = scorer.score_episode(episode, task)?;
        let nq = episode.query.len();
        if scores.len() != nq * task.way {
            return Err(Error::InvalidArgument(format!(
                "scorer returned {} scores for {} query/class pairs",
                scores.len(),
                nq * task.way
            )));
        }
        let mut correct = 0usize;
        for (q, item) in episode.query.iter().enumerate() {
            let row = &scores[q * task.way..(q + 1) * task.way];
            let mut best = 0usize;
            for (k, v) in row.iter().enumerate().skip(1) {
                if *v > row[best] {
                    best = k;
                }
            }
            if row.iter().filter(|v| **v == row[best]).count() > 1 {
                ties += 1;
            }
            if best == item.label {
                correct += 1;
            }
        }
        per_episode.push(correct as f64 / nq as f64);
    }
    Ok(EvalReport::from_accuracies(per_episode, ties))
}

// ---------------------------------------------------------------------------
// Meta-training
// ---------------------------------------------------------------------------

/// Hyper-parameters of the episodic training loop.
#[derive(Clone, Debug)]
pub struct MetaTrainConfig {
    pub task: TaskSpec,
    pub episodes_per_epoch: usize,
    pub epochs: usize,
    /// Fixed validation episodes scored after every epoch.
    pub val_episodes: usize,
    /// Stop after this many epochs without a validation improvement;
    /// 0 disables early stopping.
    pub patience: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub seed: u64,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        MetaTrainConfig {
            task: TaskSpec::five_way_one_shot(),
            episodes_per_epoch: 200,
            epochs: 30,
            val_episodes: 100,
            patience: 5,
            lr: 1e-3,
            weight_decay: 5e-4,
            seed: 0,
        }
    }
}

/// One epoch of the training history.
#[derive(Clone, Copy, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_accuracy: f64,
    pub seconds: f64,
}

/// Result of a meta-training run: the matcher snapshot with the best
/// validation accuracy, plus the full history.
pub struct MetaTrainOutcome {
    pub matcher: MatcherParams,
    pub best_val_accuracy: f64,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// One episodic gradient step: prototype and query graphs share a tape, the
/// loss is the mean over all (query, class) pairs of (score − indicator)².
fn train_step(
    matcher: &mut MatcherParams,
    feats: &SplitFeatures,
    episode: &Episode,
    task: TaskSpec,
    opt: &mut Optimizer,
) -> Result<f32> {
    let mut tape = Tape::new();
    let binds = matcher.bind(&mut tape, true);
    let mut bn = matcher.gcm.bn_stats();

    let mut protos = Vec::with_capacity(task.way);
    for label in 0..task.way {
        let items: Vec<&Tensor> = episode
            .support
            .iter()
            .filter(|it| it.label == label)
            .map(|it| feats.get(*it))
            .collect();
        let proto_feat = Tensor::mean_of(&items)?;
        let x = tape.constant(proto_feat);
        let g = matcher
            .gcm
            .encode(&mut tape, &binds.gcm, x, BnMode::Train, &mut bn)?;
        protos.push(matcher.gmm.prepare_on(&mut tape, &binds.gmm, &g)?);
    }
    let mut queries = Vec::with_capacity(episode.query.len());
    for item in &episode.query {
        let x = tape.constant(feats.get(*item).clone());
        let g = matcher
            .gcm
            .encode(&mut tape, &binds.gcm, x, BnMode::Train, &mut bn)?;
        queries.push((
            matcher.gmm.prepare_on(&mut tape, &binds.gmm, &g)?,
            item.label,
        ));
    }

    let hit = tape.constant(Tensor::new(vec![1], vec![1.0])?);
    let miss = tape.constant(Tensor::new(vec![1], vec![0.0])?);
    let mut total: Option<Var> = None;
    for (q, label) in &queries {
        for (k, p) in protos.iter().enumerate() {
            let s = matcher.gmm.score_on(&mut tape, &binds.gmm, q, p)?;
            let target = if *label == k { hit } else { miss };
            let pair = tape.mse_loss(s, target)?;
            total = Some(match total {
                Some(t) => tape.add(t, pair)?,
                None => pair,
            });
        }
    }
    let pairs = (queries.len() * task.way) as f32;
    let loss = tape.scale(total.expect("episode has pairs"), 1.0 / pairs);
    let value = tape.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::Numeric("non-finite episode loss".into()));
    }
    tape.backward(loss)?;

    let vars = binds.param_vars(matcher.ablation());
    let grads: Vec<Option<&[f32]>> = vars.iter().map(|v| tape.grad(*v)).collect();
    let mut named = matcher.trainable_mut();
    let mut refs: Vec<(&str, &mut Tensor)> = named
        .iter_mut()
        .map(|(n, t)| (n.as_str(), &mut **t))
        .collect();
    opt.step(&mut refs, &grads)?;
    matcher.gcm.set_bn_stats(&bn);
    Ok(value)
}

/// Episodic training of the graph parameters over a frozen backbone.
/// Returns the matcher snapshot with the best validation accuracy.
pub fn meta_train(
    backbone: &Conv5Backbone,
    mut matcher: MatcherParams,
    data: &LoadedDataset,
    cfg: &MetaTrainConfig,
) -> Result<MetaTrainOutcome> {
    cfg.task.validate()?;
    if cfg.epochs == 0 || cfg.episodes_per_epoch == 0 || cfg.val_episodes == 0 {
        return Err(Error::InvalidArgument(
            "epochs, episodes per epoch, and validation episodes must be at least 1".into(),
        ));
    }
    let frozen = backbone.bit_checksum();
    let train_feats = extract_split_features(backbone, &data.train)?;
    let val_feats = extract_split_features(backbone, &data.val)?;
    let val_episodes = sample_episodes(
        &data.val,
        cfg.task,
        cfg.val_episodes,
        cfg.seed ^ 0xD1B5_4A32_D192_ED03,
    )?;

    let sizes: Vec<usize> = matcher.trainable_mut().iter().map(|(_, t)| t.numel()).collect();
    let mut opt = Optimizer::adam(AdamConfig::new(cfg.lr, cfg.weight_decay), &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut best: Option<(f64, usize, MatcherParams)> = None;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut stale = 0usize;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut loss_sum = 0.0f64;
        for i in 0..cfg.episodes_per_epoch {
            let episode = sample_episode(&data.train, cfg.task, &mut rng)?;
            let loss =
                train_step(&mut matcher, &train_feats, &episode, cfg.task, &mut opt).map_err(
                    |e| match e {
                        Error::Numeric(msg) => Error::Numeric(format!(
                            "{msg} (epoch {epoch}, episode {i}, run seed {})",
                            cfg.seed
                        )),
                        other => other,
                    },
                )?;
            loss_sum += loss as f64;
        }
        let val_accuracy = {
            let mut scorer = MatcherScorer::new(&val_feats, &matcher);
            evaluate_with(&mut scorer, &val_episodes, cfg.task)?.mean_accuracy
        };
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / cfg.episodes_per_epoch as f64,
            val_accuracy,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "meta-train epoch {}/{}: loss {:.4}, val acc {:.4}, {:.1}s",
            epoch + 1,
            cfg.epochs,
            record.mean_loss,
            record.val_accuracy,
            record.seconds
        );
        history.push(record);
        let improved = best.as_ref().map_or(true, |(acc, _, _)| val_accuracy > *acc);
        if improved {
            best = Some((val_accuracy, epoch, matcher.clone()));
            stale = 0;
        } else {
            stale += 1;
            if cfg.patience > 0 && stale >= cfg.patience {
                log::info!("early stop after {} stale epochs", stale);
                break;
            }
        }
    }
    assert_eq!(
        backbone.bit_checksum(),
        frozen,
        "backbone parameters changed during meta-training"
    );
    let (best_val_accuracy, best_epoch, matcher) = best.expect("at least one epoch ran");
    Ok(MetaTrainOutcome {
        matcher,
        best_val_accuracy,
        best_epoch,
        history,
    })
}
