//! Full-batch transductive training with early stopping, and the retrain baseline.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AdamState, Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::gnn::{GnnModel, ModelSpec};
use crate::graph::{Graph, NodePartition, Subgraph};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 500,
            lr: 0.01,
            weight_decay: 5e-4,
            patience: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were returned; 0 means the initial model.
    pub best_epoch: usize,
    pub best_eval_acc: f64,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,eval_acc\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{}", r.epoch, r.train_loss, r.eval_acc);
        }
        s
    }
}

/// How the retrain baseline treats the forgotten nodes' structure.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RetrainStructure {
    /// Forgotten nodes lose all their edges, so no message passes through them.
    #[default]
    Delete,
    /// Forgotten nodes stay in the graph; only their labels are withheld.
    Retain,
}

/// Mean cross-entropy of `logits` rows against `labels`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: Arc<Vec<usize>>) -> Result<Var> {
    let logp = tape.log_softmax_rows(logits)?;
    tape.nll_loss(logp, labels)
}

/// Adds `weight_decay · θ` to each gradient and takes one Adam step.
pub(crate) fn apply_update(
    model: &mut GnnModel,
    adam: &mut AdamState,
    vars: &[Var],
    grads: &Gradients,
    weight_decay: f64,
) -> Result<()> {
    let g: Vec<Tensor> = vars
        .iter()
        .zip(model.params())
        .map(|(&v, p)| {
            let mut g = grads.get_or_zeros(v, p);
            if weight_decay > 0.0 {
                g.add_scaled(p, weight_decay);
            }
            g
        })
        .collect();
    adam.step(model.params_mut(), &g)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Accuracy on `nodes` (local indices of `sub`) with true labels `labels[sub.global(u)]`.
pub fn accuracy_on(model: &GnnModel, sub: &Subgraph, labels: &[usize], nodes: &[usize]) -> Result<f64> {
    if nodes.is_empty() {
        return Err(Error::Contract("accuracy over an empty node set".into()));
    }
    let logits = model.predict(sub, nodes)?;
    let correct = nodes
        .iter()
        .enumerate()
        .filter(|&(i, &u)| argmax(logits.row(i)) == labels[sub.global(u)])
        .count();
    Ok(correct as f64 / nodes.len() as f64)
}

/// Accuracy on `nodes` with a forward pass over the whole graph.
pub fn accuracy(model: &GnnModel, graph: &Graph, nodes: &[usize]) -> Result<f64> {
    accuracy_on(model, &Subgraph::full(graph), graph.labels(), nodes)
}

/// Accuracies of several node sets from one full-graph forward pass.
pub fn accuracies(model: &GnnModel, graph: &Graph, sets: &[&[usize]]) -> Result<Vec<f64>> {
    let logits = model.predict_all(&Subgraph::full(graph))?;
    sets.iter()
        .map(|nodes| {
            if nodes.is_empty() {
                return Err(Error::Contract("accuracy over an empty node set".into()));
            }
            let correct = nodes
                .iter()
                .filter(|&&u| argmax(logits.row(u)) == graph.labels()[u])
                .count();
            Ok(correct as f64 / nodes.len() as f64)
        })
        .collect()
}

fn numeric_to_diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged {
            epoch,
            loss: f64::NAN,
        },
        other => other,
    }
}

/// Trains a fresh model on `graph`, supervising `supervised` and early-stopping on `eval`.
///
/// Returns the parameters with the best eval accuracy (earliest on ties).
pub fn fit(
    graph: &Graph,
    supervised: &[usize],
    eval: &[usize],
    spec: &ModelSpec,
    cfg: &TrainConfig,
) -> Result<(GnnModel, TrainLog)> {
    cfg.validate()?;
    if supervised.is_empty() {
        return Err(Error::Contract("no supervised nodes".into()));
    }
    if eval.is_empty() {
        return Err(Error::Contract("no early-stopping nodes".into()));
    }
    for &u in supervised.iter().chain(eval) {
        graph.check_node(u)?;
    }
    let sub = Subgraph::full(graph);
    let mut model = GnnModel::new(spec.clone(), cfg.seed)?;
    let mut adam = AdamState::new(cfg.lr);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let idx = Arc::new(supervised.to_vec());
    let labels = Arc::new(supervised.iter().map(|&u| graph.labels()[u]).collect::<Vec<_>>());

    let mut log = TrainLog::default();
    let mut best = model.clone();
    log.best_eval_acc = if cfg.max_epochs == 0 {
        accuracy_on(&model, &sub, graph.labels(), eval)?
    } else {
        f64::NEG_INFINITY
    };
    let mut since_best = 0;
    let mut tape = Tape::new();
    for epoch in 1..=cfg.max_epochs {
        let step = (|| -> Result<f64> {
            let vars = model.bind(&mut tape)?;
            let h = model.encode(&mut tape, &vars, &sub, Some(&mut dropout_rng))?;
            let rows = tape.gather_rows(h, Arc::clone(&idx))?;
            let logits = model.head(&mut tape, &vars, rows)?;
            let loss = cross_entropy(&mut tape, logits, Arc::clone(&labels))?;
            let loss_value = tape.value(loss)?.item()?;
            let grads = tape.backward(loss)?;
            apply_update(&mut model, &mut adam, &vars, &grads, cfg.weight_decay)?;
            Ok(loss_value)
        })();
        let train_loss = step.map_err(|e| {
            tape.clear();
            numeric_to_diverged(epoch, e)
        })?;
        if !train_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: train_loss,
            });
        }
        let eval_acc = accuracy_on(&model, &sub, graph.labels(), eval).map_err(|e| numeric_to_diverged(epoch, e))?;
        log.records.push(EpochRecord {
            epoch,
            train_loss,
            eval_acc,
        });
        if eval_acc > log.best_eval_acc {
            log.best_eval_acc = eval_acc;
            log.best_epoch = epoch;
            best = model.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    Ok((best, log))
}

/// Standard training: supervise the whole training set, stop early on the eval set.
pub fn train(
    graph: &Graph,
    partition: &NodePartition,
    spec: &ModelSpec,
    cfg: &TrainConfig,
) -> Result<(GnnModel, TrainLog)> {
    fit(graph, &partition.train, &partition.eval, spec, cfg)
}

/// Trains from scratch without the forgotten nodes.
pub fn retrain_reference(
    graph: &Graph,
    partition: &NodePartition,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    structure: RetrainStructure,
) -> Result<(GnnModel, TrainLog)> {
    match structure {
        RetrainStructure::Retain => fit(graph, &partition.remain, &partition.eval, spec, cfg),
        RetrainStructure::Delete if partition.unlearn.is_empty() => {
            fit(graph, &partition.remain, &partition.eval, spec, cfg)
        }
        RetrainStructure::Delete => {
            let reduced = graph.isolate(&partition.unlearn)?;
            fit(&reduced, &partition.remain, &partition.eval, spec, cfg)
        }
    }
}
