//! Node-level contrastive unlearning.
//!
//! Each round walks over the forgotten nodes in batches. For a batch, the encoder is
//! pushed to place forgotten nodes away from same-class neighbors and toward
//! different-class remaining nodes, while cross-entropy on remaining nodes keeps the
//! classifier intact. The surrounding neighborhood is then re-anchored layer by layer,
//! deepest first, onto nodes that are not being forgotten. Rounds stop once the
//! forgotten nodes are classified no better than held-out test nodes.

mod loss;
mod sets;

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamState, Tape, Var};
use crate::error::{Error, Result};
use crate::gnn::GnnModel;
use crate::graph::{context_subgraph, k_hop_layers, Graph, LayeredNeighborhood, NodePartition};
use crate::trainer::{accuracies, apply_update, cross_entropy};

pub use loss::{reconstruction_loss, unlearn_loss, TemperaturePlacement};
pub use sets::{build_anchors, build_contrastive_sets, ContrastiveSets, ReconstructionAnchors};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlearnConfig {
    pub tau: f64,
    /// Weight of cross-entropy on the remaining batch.
    pub beta: f64,
    /// Weight of cross-entropy on the deeper layer during reconstruction.
    pub gamma: f64,
    /// Representation steps per forgotten batch.
    pub omega: usize,
    pub batch_size_u: usize,
    pub batch_size_r: usize,
    /// Neighborhood depth; must equal the model's layer count.
    pub k: usize,
    pub max_rounds: usize,
    pub lr: f64,
    pub seed: u64,
    /// L2-normalize embeddings before any dot product.
    pub normalize: bool,
    pub reconstruction: bool,
    pub temperature: TemperaturePlacement,
    pub reduction: LossReduction,
}

/// How per-node terms of the contrastive losses are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReduction {
    /// Average over nodes with a nonempty set.
    #[default]
    Mean,
    /// Plain sum over nodes.
    Sum,
}

impl LossReduction {
    fn apply(self, tape: &mut Tape, loss: Var, contributing: usize) -> Result<Var> {
        match self {
            LossReduction::Mean if contributing > 1 => tape.scale(loss, 1.0 / contributing as f64),
            _ => Ok(loss),
        }
    }
}

impl Default for UnlearnConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            beta: 8.0,
            gamma: 1.0,
            omega: 2,
            batch_size_u: 128,
            batch_size_r: 128,
            k: 2,
            max_rounds: 100,
            lr: 5e-3,
            seed: 0,
            normalize: true,
            reconstruction: true,
            temperature: TemperaturePlacement::Inside,
            reduction: LossReduction::Mean,
        }
    }
}

impl UnlearnConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        if self.omega == 0 || self.max_rounds == 0 {
            return fail("omega and max_rounds must be at least 1".into());
        }
        if self.batch_size_u == 0 || self.batch_size_r == 0 {
            return fail("batch sizes must be positive".into());
        }
        if self.k == 0 {
            return fail("k must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(self.beta >= 0.0 && self.gamma >= 0.0) {
            return fail("beta and gamma must be non-negative".into());
        }
        Ok(())
    }

    /// Reconstruction passes per forgotten batch: `⌈ω / 2⌉`.
    pub fn reconstruction_passes(&self) -> usize {
        self.omega.div_ceil(2)
    }
}

fn maybe_normalize(tape: &mut Tape, h: Var, on: bool) -> Result<Var> {
    if on {
        tape.l2_normalize_rows(h)
    } else {
        Ok(h)
    }
}

/// Gathers encoder outputs for several global node lists from one forward pass over
/// their shared `k`-hop context.
fn encode_groups(
    model: &GnnModel,
    tape: &mut Tape,
    vars: &[Var],
    graph: &Graph,
    groups: &[&[usize]],
    k: usize,
) -> Result<Vec<Var>> {
    let all: Vec<usize> = groups.iter().flat_map(|g| g.iter().copied()).collect();
    let sub = context_subgraph(graph, &all, k)?;
    let h = model.encode(tape, vars, &sub, None)?;
    groups
        .iter()
        .map(|g| tape.gather_rows(h, Arc::new(sub.locals(g)?)))
        .collect()
}

fn labels_of(graph: &Graph, nodes: &[usize]) -> Arc<Vec<usize>> {
    Arc::new(nodes.iter().map(|&u| graph.labels()[u]).collect())
}

/// Builds `L_U + β · CE(B_r)` on `tape`; returns the parameter handles and the loss.
pub fn node_objective(
    model: &GnnModel,
    tape: &mut Tape,
    graph: &Graph,
    sets: &ContrastiveSets,
    cfg: &UnlearnConfig,
) -> Result<(Vec<Var>, Var)> {
    let vars = model.bind(tape)?;
    let groups: [&[usize]; 3] = [&sets.batch, &sets.neighbors, &sets.remaining];
    let h = encode_groups(model, tape, &vars, graph, &groups, cfg.k)?;
    let h_u = maybe_normalize(tape, h[0], cfg.normalize)?;
    let h_nb = maybe_normalize(tape, h[1], cfg.normalize)?;
    let h_r = maybe_normalize(tape, h[2], cfg.normalize)?;
    let mut loss = unlearn_loss(tape, h_u, h_nb, h_r, sets, cfg.tau, cfg.temperature)?;
    let active = (0..sets.batch.len()).filter(|&i| sets.is_active(i)).count();
    loss = cfg.reduction.apply(tape, loss, active)?;
    if cfg.beta > 0.0 && !sets.remaining.is_empty() {
        let logits = model.head(tape, &vars, h[2])?;
        let ce = cross_entropy(tape, logits, labels_of(graph, &sets.remaining))?;
        let ce = tape.scale(ce, cfg.beta)?;
        loss = tape.add(loss, ce)?;
    }
    Ok((vars, loss))
}

/// Builds `L_N(layer, next) + γ · CE(ce_nodes)` on `tape`.
///
/// `ce_nodes` must be a subset of `anchors.next`.
pub fn reconstruction_objective(
    model: &GnnModel,
    tape: &mut Tape,
    graph: &Graph,
    anchors: &ReconstructionAnchors,
    ce_nodes: &[usize],
    cfg: &UnlearnConfig,
) -> Result<(Vec<Var>, Var)> {
    let vars = model.bind(tape)?;
    let groups: [&[usize]; 3] = [&anchors.layer, &anchors.next, ce_nodes];
    let h = encode_groups(model, tape, &vars, graph, &groups, cfg.k)?;
    let h_l = maybe_normalize(tape, h[0], cfg.normalize)?;
    let h_n = maybe_normalize(tape, h[1], cfg.normalize)?;
    let mut loss = reconstruction_loss(tape, h_l, h_n, anchors, cfg.tau)?;
    let active = anchors.anchors.iter().filter(|a| !a.is_empty()).count();
    loss = cfg.reduction.apply(tape, loss, active)?;
    if cfg.gamma > 0.0 && !ce_nodes.is_empty() {
        let logits = model.head(tape, &vars, h[2])?;
        let ce = cross_entropy(tape, logits, labels_of(graph, ce_nodes))?;
        let ce = tape.scale(ce, cfg.gamma)?;
        loss = tape.add(loss, ce)?;
    }
    Ok((vars, loss))
}

/// One optimizer step on the node-representation objective. Returns the loss before the step.
pub fn node_representation_unlearn_step(
    model: &mut GnnModel,
    adam: &mut AdamState,
    graph: &Graph,
    sets: &ContrastiveSets,
    cfg: &UnlearnConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let (vars, loss) = node_objective(model, &mut tape, graph, sets, cfg)?;
    let value = tape.value(loss)?.item()?;
    let grads = tape.backward(loss)?;
    apply_update(model, adam, &vars, &grads, 0.0)?;
    Ok(value)
}

/// One entry of the reconstruction trace.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionUpdate {
    /// 1-based index of the shallower layer of the pair, or of the only layer when no
    /// pair exists.
    pub layer: usize,
    pub pairs: usize,
    pub ce_nodes: usize,
    pub loss: f64,
}

/// One reconstruction pass over `layers`, deepest pair first.
///
/// The pair (ℓ, ℓ+1) takes a step on `L_N(H_ℓ, H_{ℓ+1}) + γ · CE(layer ℓ+1 ∩ V_r)` and
/// the shallower pair then sees the updated model. Layers after the first empty one
/// are ignored. With a single nonempty layer only its cross-entropy step is taken.
pub fn neighborhood_reconstruction(
    model: &mut GnnModel,
    adam: &mut AdamState,
    graph: &Graph,
    layers: &LayeredNeighborhood,
    is_remaining: &[bool],
    is_unlearn: &[bool],
    cfg: &UnlearnConfig,
) -> Result<Vec<ReconstructionUpdate>> {
    let depth = layers.depth();
    let mut trace = Vec::new();
    let remaining_of = |nodes: &[usize]| -> Vec<usize> { nodes.iter().copied().filter(|&u| is_remaining[u]).collect() };
    let mut step = |model: &mut GnnModel, anchors: &ReconstructionAnchors, ce: &[usize], layer: usize| -> Result<()> {
        if anchors.num_pairs() == 0 && (ce.is_empty() || cfg.gamma == 0.0) {
            return Ok(());
        }
        let mut tape = Tape::new();
        let (vars, loss) = reconstruction_objective(model, &mut tape, graph, anchors, ce, cfg)?;
        let value = tape.value(loss)?.item()?;
        let grads = tape.backward(loss)?;
        apply_update(model, adam, &vars, &grads, 0.0)?;
        trace.push(ReconstructionUpdate {
            layer,
            pairs: anchors.num_pairs(),
            ce_nodes: ce.len(),
            loss: value,
        });
        Ok(())
    };
    match depth {
        0 => {}
        1 => {
            let only = &layers.layers[0];
            let anchors = ReconstructionAnchors {
                layer: Vec::new(),
                next: only.clone(),
                anchors: Vec::new(),
            };
            step(model, &anchors, &remaining_of(only), 1)?;
        }
        _ => {
            for l in (0..depth - 1).rev() {
                let (cur, next) = (&layers.layers[l], &layers.layers[l + 1]);
                let anchors = build_anchors(graph, cur, next, is_unlearn)?;
                step(model, &anchors, &remaining_of(next), l + 1)?;
            }
        }
    }
    Ok(trace)
}

/// The stopping rule on already-measured accuracies.
pub fn condition_met(acc_unlearn: f64, acc_eval: f64) -> bool {
    acc_unlearn <= acc_eval
}

/// True when accuracy on the forgotten nodes is at most accuracy on the eval nodes.
pub fn termination_check(model: &GnnModel, graph: &Graph, unlearn: &[usize], eval: &[usize]) -> Result<bool> {
    let acc = accuracies(model, graph, &[unlearn, eval])?;
    Ok(condition_met(acc[0], acc[1]))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    ConditionMet,
    MaxRounds,
    EmptyUnlearnSet,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub acc_unlearn: f64,
    pub acc_eval: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnlearnReport {
    /// Full passes over the forgotten nodes.
    pub rounds: usize,
    /// Metrics before the first round (round 0) and after every round.
    pub history: Vec<RoundMetrics>,
    pub termination: Termination,
    pub wall_time_secs: f64,
    pub config: UnlearnConfig,
}

impl UnlearnReport {
    pub fn final_metrics(&self) -> Option<&RoundMetrics> {
        self.history.last()
    }
}

/// Draws remaining-node batches without replacement, reshuffling when the pool runs out.
struct RemainingSampler {
    order: Vec<usize>,
    pos: usize,
}

impl RemainingSampler {
    fn new(pool: &[usize]) -> Self {
        Self {
            order: pool.to_vec(),
            pos: 0,
        }
    }

    fn reshuffle(&mut self, rng: &mut ChaCha8Rng) {
        self.order.shuffle(rng);
        self.pos = 0;
    }

    fn next(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let n = n.min(self.order.len());
        if self.pos + n > self.order.len() {
            self.reshuffle(rng);
        }
        let out = self.order[self.pos..self.pos + n].to_vec();
        self.pos += n;
        out
    }
}

/// Runs the full unlearning procedure on a copy of `model`.
pub fn run_node_cul(
    model: &GnnModel,
    graph: &Graph,
    partition: &NodePartition,
    cfg: &UnlearnConfig,
) -> Result<(GnnModel, UnlearnReport)> {
    cfg.validate()?;
    if cfg.k != model.spec().layers {
        return Err(Error::Config(format!(
            "neighborhood depth {} differs from the model's {} layers",
            cfg.k,
            model.spec().layers
        )));
    }
    let started = Instant::now();
    let mut model = model.clone();
    let mut report = UnlearnReport {
        rounds: 0,
        history: Vec::new(),
        termination: Termination::EmptyUnlearnSet,
        wall_time_secs: 0.0,
        config: cfg.clone(),
    };
    if partition.unlearn.is_empty() {
        return Ok((model, report));
    }
    if partition.eval.is_empty() {
        return Err(Error::Contract("the stopping rule needs eval nodes".into()));
    }
    let n = graph.num_nodes();
    let is_unlearn = sets::membership(n, &partition.unlearn);
    let is_remaining = sets::membership(n, &partition.remain);
    let measure = |model: &GnnModel, round: usize| -> Result<RoundMetrics> {
        let acc = accuracies(model, graph, &[&partition.unlearn, &partition.eval])?;
        Ok(RoundMetrics {
            round,
            acc_unlearn: acc[0],
            acc_eval: acc[1],
        })
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sampler = RemainingSampler::new(&partition.remain);
    let mut adam = AdamState::new(cfg.lr);
    let mut order = partition.unlearn.clone();

    let start = measure(&model, 0)?;
    report.history.push(start);
    report.termination = Termination::MaxRounds;
    while report.termination != Termination::ConditionMet && report.rounds < cfg.max_rounds {
        order.shuffle(&mut rng);
        sampler.reshuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size_u) {
            let layers = k_hop_layers(graph, batch, cfg.k, &partition.unlearn)?;
            for _ in 0..cfg.omega {
                let b_r = sampler.next(cfg.batch_size_r, &mut rng);
                let sets = build_contrastive_sets(graph, &is_remaining, batch, &b_r)?;
                node_representation_unlearn_step(&mut model, &mut adam, graph, &sets, cfg)?;
            }
            if cfg.reconstruction {
                for _ in 0..cfg.reconstruction_passes() {
                    neighborhood_reconstruction(&mut model, &mut adam, graph, &layers, &is_remaining, &is_unlearn, cfg)?;
                }
            }
        }
        report.rounds += 1;
        let m = measure(&model, report.rounds)?;
        report.history.push(m);
        if condition_met(m.acc_unlearn, m.acc_eval) {
            report.termination = Termination::ConditionMet;
        }
    }
    report.wall_time_secs = started.elapsed().as_secs_f64();
    Ok((model, report))
}
