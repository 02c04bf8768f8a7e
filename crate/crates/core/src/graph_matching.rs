//! Cross-graph matching: score how well two scene graphs correspond.
//!
//! The matcher runs four stages. *Propagation* enriches each node with the
//! average of an MLP over all (node, neighbor, edge) triples of its own
//! graph. *Interaction* attends across the two graphs with parameter-free
//! dot-product attention. *Update* fuses a node's own embedding with its
//! propagated and cross-graph representations through a single ReLU layer.
//! *Aggregation* pools the updated nodes into one graph vector with a
//! learned sigmoid gate per node. The final score is the cosine similarity
//! of the two graph vectors, mapped affinely from [-1, 1] to [0, 1].
//!
//! Either of the first two stages can be compiled out for ablation studies;
//! the update layer is then sized for the narrower input.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scene_graph::{ArchConfig, GcmBinds, GcmParams, GraphVars, SceneGraph};
use crate::tensor::{checkpoint, init_fan_in, BnMode, Tape, Tensor, Var};

/// Which matcher stages to remove. Parameter shapes depend on these flags,
/// so they are fixed at construction time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    /// Drop within-graph propagation from the update input.
    pub no_propagation: bool,
    /// Drop cross-graph attention from the update input.
    pub no_interaction: bool,
}

impl Ablation {
    /// Short label for logs and artifact names.
    pub fn tag(&self) -> &'static str {
        match (self.no_propagation, self.no_interaction) {
            (false, false) => "full",
            (true, false) => "no-propagation",
            (false, true) => "no-interaction",
            (true, true) => "no-propagation-no-interaction",
        }
    }
}

/// Matching parameters: propagation MLP, update layer, aggregation gate.
#[derive(Clone)]
pub struct GmmParams {
    pub arch: ArchConfig,
    pub ablation: Ablation,
    pub prop_w1: Tensor,
    pub prop_b1: Tensor,
    pub prop_w2: Tensor,
    pub prop_b2: Tensor,
    pub upd_w: Tensor,
    pub upd_b: Tensor,
    pub agg_w: Tensor,
    pub agg_b: Tensor,
}

/// Tape handles for one bound copy of [`GmmParams`].
pub struct GmmBinds {
    prop_w1: Var,
    prop_b1: Var,
    prop_w2: Var,
    prop_b2: Var,
    upd_w: Var,
    upd_b: Var,
    agg_w: Var,
    agg_b: Var,
}

impl GmmBinds {
    /// Bound parameter handles in [`GmmParams::trainable_mut`] order for the
    /// given ablation, for pairing gradients with optimizer slots.
    pub fn param_vars(&self, ablation: Ablation) -> Vec<Var> {
        let mut out = Vec::new();
        if !ablation.no_propagation {
            out.extend([self.prop_w1, self.prop_b1, self.prop_w2, self.prop_b2]);
        }
        out.extend([self.upd_w, self.upd_b, self.agg_w, self.agg_b]);
        out
    }
}

/// A graph with its propagation output, ready for pair scoring. Preparing
/// once and scoring many pairs avoids recomputing the (pair-independent)
/// propagation stage.
pub struct PreparedVars {
    pub nodes: Var,
    pub intra: Option<Var>,
}

/// Detached analogue of [`PreparedVars`] for the pure scoring path.
#[derive(Clone, Debug)]
pub struct PreparedGraph {
    pub nodes: Tensor,
    pub intra: Option<Tensor>,
}

impl GmmParams {
    /// Width of the update-layer input under the configured ablation.
    pub fn update_input(arch: &ArchConfig, ablation: Ablation) -> usize {
        let mut w = arch.node_dim;
        if !ablation.no_propagation {
            w += arch.prop_dim;
        }
        if !ablation.no_interaction {
            w += arch.node_dim;
        }
        w
    }

    pub fn new(arch: ArchConfig, ablation: Ablation, rng: &mut ChaCha8Rng) -> Self {
        let pi = arch.prop_input();
        let ui = Self::update_input(&arch, ablation);
        GmmParams {
            arch,
            ablation,
            prop_w1: init_fan_in(&[arch.prop_hidden, pi], pi, rng),
            prop_b1: Tensor::zeros(&[arch.prop_hidden]),
            prop_w2: init_fan_in(&[arch.prop_dim, arch.prop_hidden], arch.prop_hidden, rng),
            prop_b2: Tensor::zeros(&[arch.prop_dim]),
            upd_w: init_fan_in(&[arch.update_dim, ui], ui, rng),
            upd_b: Tensor::zeros(&[arch.update_dim]),
            agg_w: init_fan_in(&[1, 2 * arch.update_dim], 2 * arch.update_dim, rng),
            agg_b: Tensor::zeros(&[1]),
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> GmmBinds {
        let put = |tape: &mut Tape, t: &Tensor, on: bool| {
            if on {
                tape.param(t)
            } else {
                tape.frozen(t)
            }
        };
        // An ablated propagation MLP is carried but never trained.
        let train_prop = trainable && !self.ablation.no_propagation;
        GmmBinds {
            prop_w1: put(tape, &self.prop_w1, train_prop),
            prop_b1: put(tape, &self.prop_b1, train_prop),
            prop_w2: put(tape, &self.prop_w2, train_prop),
            prop_b2: put(tape, &self.prop_b2, train_prop),
            upd_w: put(tape, &self.upd_w, trainable),
            upd_b: put(tape, &self.upd_b, trainable),
            agg_w: put(tape, &self.agg_w, trainable),
            agg_b: put(tape, &self.agg_b, trainable),
        }
    }

    /// Propagation: intra[m] = (1/M) Σ_n MLP(e_m ‖ e_n ‖ d_{m,n}).
    /// The sum runs over all n, including n = m.
    pub fn propagate_on(&self, tape: &mut Tape, binds: &GmmBinds, g: &GraphVars) -> Result<Var> {
        let ns = tape.value(g.nodes).shape().to_vec();
        let es = tape.value(g.edges).shape().to_vec();
        let m = ns[0];
        if es[0] != m * m {
            return Err(Error::ShapeMismatch {
                op: "propagate",
                lhs: ns,
                rhs: es,
            });
        }
        let idx_m: Arc<Vec<u32>> = Arc::new((0..m * m).map(|e| (e / m) as u32).collect());
        let idx_n: Arc<Vec<u32>> = Arc::new((0..m * m).map(|e| (e % m) as u32).collect());
        let em = tape.gather_rows(g.nodes, idx_m)?;
        let en = tape.gather_rows(g.nodes, idx_n)?;
        let x = tape.concat_cols(&[em, en, g.edges])?;
        let h = tape.linear(x, binds.prop_w1, binds.prop_b1)?;
        let h = tape.relu(h);
        let msgs = tape.linear(h, binds.prop_w2, binds.prop_b2)?;
        let sums = tape.sum_chunk_rows(msgs, m)?;
        Ok(tape.scale(sums, 1.0 / m as f32))
    }

    /// Runs the pair-independent stages for one graph.
    pub fn prepare_on(
        &self,
        tape: &mut Tape,
        binds: &GmmBinds,
        g: &GraphVars,
    ) -> Result<PreparedVars> {
        let intra = if self.ablation.no_propagation {
            None
        } else {
            Some(self.propagate_on(tape, binds, g)?)
        };
        Ok(PreparedVars {
            nodes: g.nodes,
            intra,
        })
    }

    /// Update: fuse each node with its intra and cross representations
    /// through one ReLU layer. Present inputs must match the ablation flags.
    fn update_on(
        &self,
        tape: &mut Tape,
        binds: &GmmBinds,
        nodes: Var,
        intra: Option<Var>,
        cross: Option<Var>,
    ) -> Result<Var> {
        if intra.is_some() == self.ablation.no_propagation
            || cross.is_some() == self.ablation.no_interaction
        {
            return Err(Error::InvalidArgument(
                "update inputs do not match the configured ablation".into(),
            ));
        }
        let mut parts = vec![nodes];
        parts.extend(intra);
        parts.extend(cross);
        let x = tape.concat_cols(&parts)?;
        let z = tape.linear(x, binds.upd_w, binds.upd_b)?;
        Ok(tape.relu(z))
    }

    /// Aggregation: gate each updated node by a sigmoid of (node ‖ mean) and
    /// sum. Returns the `[1, update_dim]` graph representation.
    fn aggregate_on(&self, tape: &mut Tape, binds: &GmmBinds, upd: Var) -> Result<Var> {
        aggregate_rows(tape, upd, binds.agg_w, binds.agg_b)
    }

    /// Full pair score between two prepared graphs as a `[1]` tape value in
    /// [0, 1].
    pub fn score_on(
        &self,
        tape: &mut Tape,
        binds: &GmmBinds,
        a: &PreparedVars,
        b: &PreparedVars,
    ) -> Result<Var> {
        let (cross_a, cross_b) = if self.ablation.no_interaction {
            (None, None)
        } else {
            let (ca, cb) = interact_on(tape, a.nodes, b.nodes)?;
            (Some(ca), Some(cb))
        };
        let ua = self.update_on(tape, binds, a.nodes, a.intra, cross_a)?;
        let ub = self.update_on(tape, binds, b.nodes, b.intra, cross_b)?;
        let ra = self.aggregate_on(tape, binds, ua)?;
        let rb = self.aggregate_on(tape, binds, ub)?;
        let cos = tape.cosine_sim(ra, rb)?;
        let half = tape.scale(cos, 0.5);
        let shift = tape.constant(Tensor::new(vec![1], vec![0.5])?);
        tape.add(half, shift)
    }

    pub fn trainable_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        if !self.ablation.no_propagation {
            out.push(("gmm.prop.w1".into(), &mut self.prop_w1));
            out.push(("gmm.prop.b1".into(), &mut self.prop_b1));
            out.push(("gmm.prop.w2".into(), &mut self.prop_w2));
            out.push(("gmm.prop.b2".into(), &mut self.prop_b2));
        }
        out.push(("gmm.upd.w".into(), &mut self.upd_w));
        out.push(("gmm.upd.b".into(), &mut self.upd_b));
        out.push(("gmm.agg.w".into(), &mut self.agg_w));
        out.push(("gmm.agg.b".into(), &mut self.agg_b));
        out
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        vec![
            ("gmm.prop.w1".into(), self.prop_w1.clone()),
            ("gmm.prop.b1".into(), self.prop_b1.clone()),
            ("gmm.prop.w2".into(), self.prop_w2.clone()),
            ("gmm.prop.b2".into(), self.prop_b2.clone()),
            ("gmm.upd.w".into(), self.upd_w.clone()),
            ("gmm.upd.b".into(), self.upd_b.clone()),
            ("gmm.agg.w".into(), self.agg_w.clone()),
            ("gmm.agg.b".into(), self.agg_b.clone()),
        ]
    }
}

/// Gated pooling of updated node rows into a `[1, update_dim]` graph vector;
/// shared by the tape scorer and the cached evaluation scorer so both paths
/// run identical arithmetic.
pub(crate) fn aggregate_rows(tape: &mut Tape, upd: Var, agg_w: Var, agg_b: Var) -> Result<Var> {
    let m = tape.value(upd).shape()[0];
    let total = tape.sum_chunk_rows(upd, m)?;
    let mean = tape.scale(total, 1.0 / m as f32);
    let tiled = tape.repeat_row(mean, m)?;
    let gate_in = tape.concat_cols(&[upd, tiled])?;
    let z = tape.linear(gate_in, agg_w, agg_b)?;
    let w = tape.sigmoid(z);
    let weighted = tape.row_scale(upd, w)?;
    tape.sum_chunk_rows(weighted, m)
}

/// Cross-graph attention over raw node embeddings: logits A[m,n] =
/// e_{a,m}·e_{b,n}; cross_a takes row softmax over b's nodes, cross_b takes
/// column softmax over a's nodes. No parameters.
pub fn interact_on(tape: &mut Tape, nodes_a: Var, nodes_b: Var) -> Result<(Var, Var)> {
    let logits = tape.matmul_nt(nodes_a, nodes_b)?;
    let wa = tape.softmax(logits, 1)?;
    let cross_a = tape.matmul(wa, nodes_b)?;
    let wb = tape.softmax(logits, 0)?;
    let cross_b = tape.matmul_tn(wb, nodes_a)?;
    Ok((cross_a, cross_b))
}

fn graph_vars(tape: &mut Tape, g: &SceneGraph) -> Result<GraphVars> {
    g.validate()?;
    Ok(GraphVars {
        nodes: tape.constant(g.nodes.clone()),
        edges: tape.constant(g.edges.clone()),
    })
}

/// Propagation of a detached graph; returns `[M, prop_dim]`.
pub fn propagate(g: &SceneGraph, params: &GmmParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let gv = graph_vars(&mut tape, g)?;
    let binds = params.bind(&mut tape, false);
    let out = params.propagate_on(&mut tape, &binds, &gv)?;
    Ok(tape.detach(out))
}

/// Cross representations of a detached graph pair.
pub fn interact(ga: &SceneGraph, gb: &SceneGraph) -> Result<(Tensor, Tensor)> {
    if ga.nodes.shape()[1] != gb.nodes.shape()[1] {
        return Err(Error::ShapeMismatch {
            op: "interact",
            lhs: ga.nodes.shape().to_vec(),
            rhs: gb.nodes.shape().to_vec(),
        });
    }
    let mut tape = Tape::new();
    let na = {
        ga.validate()?;
        tape.constant(ga.nodes.clone())
    };
    let nb = {
        gb.validate()?;
        tape.constant(gb.nodes.clone())
    };
    let (ca, cb) = interact_on(&mut tape, na, nb)?;
    Ok((tape.detach(ca), tape.detach(cb)))
}

/// Updated node representations; inputs must match the ablation flags.
pub fn update(
    nodes: &Tensor,
    intra: Option<&Tensor>,
    cross: Option<&Tensor>,
    params: &GmmParams,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let n = tape.constant(nodes.clone());
    let i = intra.map(|t| tape.constant(t.clone()));
    let c = cross.map(|t| tape.constant(t.clone()));
    let binds = params.bind(&mut tape, false);
    let out = params.update_on(&mut tape, &binds, n, i, c)?;
    Ok(tape.detach(out))
}

/// Gated sum of updated nodes; returns the `[update_dim]` graph vector.
pub fn aggregate(updated: &Tensor, params: &GmmParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let u = tape.constant(updated.clone());
    let binds = params.bind(&mut tape, false);
    let out = params.aggregate_on(&mut tape, &binds, u)?;
    let d = tape.detach(out);
    let n = d.numel();
    d.reshaped(&[n])
}

/// Runs the pair-independent stages once for a detached graph.
pub fn prepare(g: &SceneGraph, params: &GmmParams) -> Result<PreparedGraph> {
    let intra = if params.ablation.no_propagation {
        None
    } else {
        Some(propagate(g, params)?)
    };
    Ok(PreparedGraph {
        nodes: g.nodes.clone(),
        intra,
    })
}

/// Scores a prepared pair. Zero-norm graph representations are reported via
/// the warning log and scored as 0.5 (orthogonal by convention).
pub fn score_prepared(a: &PreparedGraph, b: &PreparedGraph, params: &GmmParams) -> Result<f32> {
    let mut tape = Tape::new();
    let binds = params.bind(&mut tape, false);
    let to_vars = |tape: &mut Tape, p: &PreparedGraph| PreparedVars {
        nodes: tape.constant(p.nodes.clone()),
        intra: p.intra.as_ref().map(|t| tape.constant(t.clone())),
    };
    let pa = to_vars(&mut tape, a);
    let pb = to_vars(&mut tape, b);

    let (cross_a, cross_b) = if params.ablation.no_interaction {
        (None, None)
    } else {
        let (ca, cb) = interact_on(&mut tape, pa.nodes, pb.nodes)?;
        (Some(ca), Some(cb))
    };
    let ua = params.update_on(&mut tape, &binds, pa.nodes, pa.intra, cross_a)?;
    let ub = params.update_on(&mut tape, &binds, pb.nodes, pb.intra, cross_b)?;
    let ra = params.aggregate_on(&mut tape, &binds, ua)?;
    let rb = params.aggregate_on(&mut tape, &binds, ub)?;
    for (side, r) in [("left", ra), ("right", rb)] {
        if tape.value(r).data().iter().all(|v| *v == 0.0) {
            log::warn!("{side} graph representation has zero norm; score defined as 0.5");
        }
    }
    let cos = tape.cosine_sim(ra, rb)?;
    let value = tape.value(cos).data()[0];
    if !value.is_finite() {
        return Err(Error::Numeric("non-finite match score".into()));
    }
    Ok((value + 1.0) * 0.5)
}

/// Full match score of two scene graphs, in [0, 1].
pub fn match_graphs(ga: &SceneGraph, gb: &SceneGraph, params: &GmmParams) -> Result<f32> {
    score_prepared(&prepare(ga, params)?, &prepare(gb, params)?, params)
}

/// The support→query attention weights: row m holds softmax over query
/// nodes of the logits e_{s,m}·e_{q,n}. Rows sum to 1.
pub fn export_matching_weights(g_support: &SceneGraph, g_query: &SceneGraph) -> Result<Tensor> {
    if g_support.nodes.shape()[1] != g_query.nodes.shape()[1] {
        return Err(Error::ShapeMismatch {
            op: "export_matching_weights",
            lhs: g_support.nodes.shape().to_vec(),
            rhs: g_query.nodes.shape().to_vec(),
        });
    }
    g_support.validate()?;
    g_query.validate()?;
    let mut tape = Tape::new();
    let ns = tape.constant(g_support.nodes.clone());
    let nq = tape.constant(g_query.nodes.clone());
    let logits = tape.matmul_nt(ns, nq)?;
    let w = tape.softmax(logits, 1)?;
    Ok(tape.detach(w))
}

// ---------------------------------------------------------------------------
// Matcher bundle
// ---------------------------------------------------------------------------

/// Graph construction plus matching parameters: everything meta-training
/// optimizes, checkpointed as one file.
#[derive(Clone)]
pub struct MatcherParams {
    pub gcm: GcmParams,
    pub gmm: GmmParams,
}

/// Tape handles for one bound copy of [`MatcherParams`].
pub struct MatcherBinds {
    pub gcm: GcmBinds,
    pub gmm: GmmBinds,
}

impl MatcherBinds {
    /// Bound parameter handles in [`MatcherParams::trainable_mut`] order.
    pub fn param_vars(&self, ablation: Ablation) -> Vec<Var> {
        let mut out = self.gcm.param_vars();
        out.extend(self.gmm.param_vars(ablation));
        out
    }
}

impl MatcherParams {
    pub fn new(arch: ArchConfig, ablation: Ablation, rng: &mut ChaCha8Rng) -> Self {
        MatcherParams {
            gcm: GcmParams::new(arch, rng),
            gmm: GmmParams::new(arch, ablation, rng),
        }
    }

    pub fn arch(&self) -> ArchConfig {
        self.gcm.arch
    }

    pub fn ablation(&self) -> Ablation {
        self.gmm.ablation
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> MatcherBinds {
        MatcherBinds {
            gcm: self.gcm.bind(tape, trainable),
            gmm: self.gmm.bind(tape, trainable),
        }
    }

    pub fn trainable_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.gcm.trainable_mut();
        out.extend(self.gmm.trainable_mut());
        out
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = self.gcm.named_tensors();
        out.extend(self.gmm.named_tensors());
        out
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let named = self.named_tensors();
        let pairs: Vec<(String, &Tensor)> = named.iter().map(|(n, t)| (n.clone(), t)).collect();
        checkpoint::save(path, &pairs)
    }

    /// Loads a matcher checkpoint. All widths and the ablation flags are
    /// reconstructed from the stored tensor shapes.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let mut map = checkpoint::TensorMap::load(path)?;
        let params = Self::from_map(&mut map)?;
        map.finish()?;
        Ok(params)
    }

    fn from_map(map: &mut checkpoint::TensorMap) -> Result<Self> {
        let prop_w1 = map.take_any("gmm.prop.w1")?;
        let prop_w2 = map.take_any("gmm.prop.w2")?;
        let upd_w = map.take_any("gmm.upd.w")?;
        let prop_hidden = prop_w1.shape()[0];
        let prop_dim = prop_w2.shape()[0];
        let update_dim = upd_w.shape()[0];
        let gcm = GcmParams::from_map(map, prop_hidden, prop_dim, update_dim)?;
        let arch = gcm.arch;
        if prop_w1.shape() != [prop_hidden, arch.prop_input()]
            || prop_w2.shape() != [prop_dim, prop_hidden]
        {
            return Err(Error::BadShape {
                op: "gmm.prop",
                expected: format!("[*, {}] and [*, {prop_hidden}]", arch.prop_input()),
                got: prop_w1.shape().to_vec(),
            });
        }
        let nd = arch.node_dim;
        let ui = upd_w.shape()[1];
        let ablation = if ui == nd + prop_dim + nd {
            Ablation::default()
        } else if ui == nd + nd && prop_dim != nd {
            Ablation {
                no_propagation: true,
                no_interaction: false,
            }
        } else if ui == nd + prop_dim && prop_dim != nd {
            Ablation {
                no_propagation: false,
                no_interaction: true,
            }
        } else if ui == nd && prop_dim != nd {
            Ablation {
                no_propagation: true,
                no_interaction: true,
            }
        } else {
            return Err(Error::BadShape {
                op: "gmm.upd.w",
                expected: "an input width matching one ablation configuration".into(),
                got: upd_w.shape().to_vec(),
            });
        };
        let gmm = GmmParams {
            arch,
            ablation,
            prop_w1,
            prop_b1: map.take("gmm.prop.b1", &[prop_hidden])?,
            prop_w2,
            prop_b2: map.take("gmm.prop.b2", &[prop_dim])?,
            upd_w,
            upd_b: map.take("gmm.upd.b", &[update_dim])?,
            agg_w: map.take("gmm.agg.w", &[1, 2 * update_dim])?,
            agg_b: map.take("gmm.agg.b", &[1])?,
        };
        Ok(MatcherParams { gcm, gmm })
    }

    /// Differentiable image-pair score: encodes both spatial maps, prepares
    /// both graphs, and scores the pair, all on one tape. Uses training-mode
    /// normalization so every parameter keeps a gradient path.
    pub fn score_images_on(
        &self,
        tape: &mut Tape,
        binds: &MatcherBinds,
        spatial_a: Var,
        spatial_b: Var,
    ) -> Result<Var> {
        let mut bn = self.gcm.bn_stats();
        let ga = self
            .gcm
            .encode(tape, &binds.gcm, spatial_a, BnMode::Train, &mut bn)?;
        let gb = self
            .gcm
            .encode(tape, &binds.gcm, spatial_b, BnMode::Train, &mut bn)?;
        let pa = self.gmm.prepare_on(tape, &binds.gmm, &ga)?;
        let pb = self.gmm.prepare_on(tape, &binds.gmm, &gb)?;
        self.gmm.score_on(tape, &binds.gmm, &pa, &pb)
    }
}
