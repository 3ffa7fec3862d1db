//! Shadow-model membership inference (offline likelihood-ratio attack).
//!
//! Shadows are trained on random halves of a candidate node set. For each candidate,
//! the logit-scaled confidences of the shadows that did not train on it form a
//! Gaussian; the target model's confidence is scored by its CDF under that Gaussian.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::logsumexp;
use crate::error::{Error, Result};
use crate::gnn::{GnnModel, ModelSpec};
use crate::graph::{Graph, NodePartition, Subgraph};
use crate::trainer::{fit, TrainConfig};

/// Confidence values are clamped to this magnitude.
pub const CONFIDENCE_CLAMP: f64 = 30.0;
/// Smallest variance used for an out-distribution.
pub const VARIANCE_FLOOR: f64 = 1e-4;
/// Nodes with fewer out-shadows than this borrow the pooled variance.
pub const MIN_OUT_SHADOWS: usize = 4;
pub const FPR_TARGETS: [f64; 3] = [0.01, 0.05, 0.1];

/// Nodes under attack: forgotten nodes labeled members, test nodes labeled non-members.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MiaNodes {
    pub members: Vec<usize>,
    pub nonmembers: Vec<usize>,
}

impl MiaNodes {
    /// Candidates in attack order: members first.
    pub fn candidates(&self) -> Vec<usize> {
        self.members.iter().chain(&self.nonmembers).copied().collect()
    }

    pub fn labels(&self) -> Vec<bool> {
        let mut l = vec![true; self.members.len()];
        l.resize(self.members.len() + self.nonmembers.len(), false);
        l
    }
}

/// Draws equally many members and non-members. When the test set is smaller than the
/// forgotten set, both sides are subsampled to the test set's size.
pub fn select_mia_nodes(partition: &NodePartition, seed: u64) -> Result<MiaNodes> {
    let m = partition.unlearn.len().min(partition.test.len());
    if m == 0 {
        return Err(Error::Contract("membership inference needs forgotten and test nodes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d69_6100);
    let pick = |pool: &[usize], rng: &mut ChaCha8Rng| {
        let mut v: Vec<usize> = pool.choose_multiple(rng, m).copied().collect();
        v.sort_unstable();
        v
    };
    let members = pick(&partition.unlearn, &mut rng);
    let nonmembers = pick(&partition.test, &mut rng);
    Ok(MiaNodes { members, nonmembers })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Shadow {
    pub model: GnnModel,
    /// Candidates this shadow was supervised on, sorted.
    pub members: Vec<usize>,
}

impl Shadow {
    pub fn trained_on(&self, node: usize) -> bool {
        self.members.binary_search(&node).is_ok()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShadowEnsemble {
    pub candidates: Vec<usize>,
    pub shadows: Vec<Shadow>,
}

/// Seed of shadow `index`; shared by its membership draw and its training run.
fn shadow_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(index as u64 + 1)
}

/// Trains `n_shadow` models, each supervised on the training nodes outside `candidates`
/// plus a Bernoulli(1/2) half of `candidates`. Shadows come in complementary pairs
/// (shadow `2j + 1` trains on exactly the candidates shadow `2j` leaves out), so every
/// candidate is held out by at least `⌊n_shadow / 2⌋` shadows. Early stopping uses the
/// eval nodes the shadow did not train on. `jobs = 0` uses every core.
#[allow(clippy::too_many_arguments)]
pub fn train_shadows(
    graph: &Graph,
    partition: &NodePartition,
    candidates: &[usize],
    n_shadow: usize,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    seed: u64,
    jobs: usize,
) -> Result<ShadowEnsemble> {
    if n_shadow < 2 {
        return Err(Error::Config(format!("need at least 2 shadow models, got {n_shadow}")));
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != candidates.len() {
        return Err(Error::Contract("duplicate candidate nodes".into()));
    }
    for &u in &sorted {
        graph.check_node(u)?;
    }
    let base: Vec<usize> = partition
        .train
        .iter()
        .copied()
        .filter(|u| sorted.binary_search(u).is_err())
        .collect();

    let one = |index: usize| -> Result<Shadow> {
        let s = shadow_seed(seed, index);
        let mut rng = ChaCha8Rng::seed_from_u64(shadow_seed(seed, index - index % 2));
        let flip = index % 2 == 1;
        let members: Vec<usize> = sorted.iter().copied().filter(|_| rng.gen_bool(0.5) != flip).collect();
        let mut supervised = base.clone();
        supervised.extend_from_slice(&members);
        supervised.sort_unstable();
        let eval: Vec<usize> = partition
            .eval
            .iter()
            .copied()
            .filter(|u| members.binary_search(u).is_err())
            .collect();
        let (model, _) = fit(graph, &supervised, &eval, spec, &TrainConfig { seed: s, ..cfg.clone() })?;
        log::debug!("shadow {index}: {} members", members.len());
        Ok(Shadow { model, members })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let shadows = pool.install(|| (0..n_shadow).into_par_iter().map(one).collect::<Result<Vec<_>>>())?;
    Ok(ShadowEnsemble {
        candidates: candidates.to_vec(),
        shadows,
    })
}

/// Logit-scaled confidence `log(p_y / (1 − p_y))` of a softmax row, clamped to ±30.
///
/// Computed as `z_y − logsumexp_{j≠y} z_j`, which stays exact when `p_y` is near 1.
pub fn confidence_transform(logits: &[f64], label: usize) -> f64 {
    let others: Vec<f64> = logits
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != label)
        .map(|(_, &z)| z)
        .collect();
    let phi = if others.is_empty() {
        CONFIDENCE_CLAMP
    } else {
        logits[label] - logsumexp(&others)
    };
    if phi.is_nan() {
        0.0
    } else {
        phi.clamp(-CONFIDENCE_CLAMP, CONFIDENCE_CLAMP)
    }
}

/// Confidences of `model` on `nodes`, from one full-graph forward pass.
pub fn confidences(model: &GnnModel, graph: &Graph, nodes: &[usize]) -> Result<Vec<f64>> {
    for &u in nodes {
        graph.check_node(u)?;
    }
    let logits = model.predict(&Subgraph::full(graph), nodes)?;
    Ok(nodes
        .iter()
        .enumerate()
        .map(|(i, &u)| confidence_transform(logits.row(i), graph.labels()[u]))
        .collect())
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var)
}

/// Score of one target confidence against out-shadow confidences. `fallback_var`
/// replaces the node's own variance when it has fewer than four out-shadows.
pub fn lira_score(target: f64, out: &[f64], fallback_var: f64) -> Option<f64> {
    if out.is_empty() {
        return None;
    }
    let (mean, var) = mean_var(out);
    let var = if out.len() < MIN_OUT_SHADOWS { fallback_var } else { var };
    let sd = var.max(VARIANCE_FLOOR).sqrt();
    Some(normal_cdf((target - mean) / sd))
}

/// Out-shadow confidences per candidate, in candidate order.
#[derive(Clone, Debug, PartialEq)]
pub struct ShadowConfidences {
    pub nodes: Vec<usize>,
    pub out: Vec<Vec<f64>>,
}

impl ShadowConfidences {
    pub fn collect(ensemble: &ShadowEnsemble, graph: &Graph) -> Result<Self> {
        let nodes = ensemble.candidates.clone();
        let mut out = vec![Vec::new(); nodes.len()];
        for shadow in &ensemble.shadows {
            let phi = confidences(&shadow.model, graph, &nodes)?;
            for (i, &u) in nodes.iter().enumerate() {
                if !shadow.trained_on(u) {
                    out[i].push(phi[i]);
                }
            }
        }
        Ok(Self { nodes, out })
    }

    /// Mean variance over nodes with enough out-shadows, or the floor if there are none.
    pub fn pooled_variance(&self) -> f64 {
        let vars: Vec<f64> = self
            .out
            .iter()
            .filter(|o| o.len() >= MIN_OUT_SHADOWS)
            .map(|o| mean_var(o).1)
            .collect();
        if vars.is_empty() {
            VARIANCE_FLOOR
        } else {
            vars.iter().sum::<f64>() / vars.len() as f64
        }
    }

    /// Scores for target confidences given in candidate order.
    pub fn scores(&self, target: &[f64]) -> Result<Vec<f64>> {
        if target.len() != self.nodes.len() {
            return Err(Error::Shape {
                op: "lira_scores",
                left: (target.len(), 1),
                right: (self.nodes.len(), 1),
            });
        }
        let pooled = self.pooled_variance();
        target
            .iter()
            .zip(&self.out)
            .zip(&self.nodes)
            .map(|((&t, o), &node)| lira_score(t, o, pooled).ok_or(Error::InsufficientShadows { node }))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MiaResult {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
    pub auc: f64,
    pub roc: Vec<RocPoint>,
    /// `(fpr target, tpr)` pairs.
    pub tpr_at_fpr: Vec<(f64, f64)>,
}

impl MiaResult {
    pub fn tpr_at(&self, fpr: f64) -> Option<f64> {
        self.tpr_at_fpr.iter().find(|(f, _)| *f == fpr).map(|&(_, t)| t)
    }

    pub fn roc_csv(&self) -> String {
        let mut s = String::from("fpr,tpr,threshold\n");
        for p in &self.roc {
            s.push_str(&format!("{},{},{}\n", p.fpr, p.tpr, p.threshold));
        }
        s
    }
}

/// AUC by rank sum with tied scores sharing their average rank, plus the ROC curve.
pub fn mia_auc(scores: &[f64], labels: &[bool]) -> Result<MiaResult> {
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            op: "mia_auc",
            left: (scores.len(), 1),
            right: (labels.len(), 1),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite { op: "mia_auc" });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Contract("scores need both members and non-members".into()));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    let auc = (rank_sum - p * (p + 1.0) / 2.0) / (p * q);

    let mut roc = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = order.len();
    while k > 0 {
        let t = scores[order[k - 1]];
        while k > 0 && scores[order[k - 1]] == t {
            if labels[order[k - 1]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k -= 1;
        }
        roc.push(RocPoint {
            fpr: fp as f64 / q,
            tpr: tp as f64 / p,
            threshold: t,
        });
    }
    let tpr_at_fpr = FPR_TARGETS
        .iter()
        .map(|&f| {
            let t = roc.iter().filter(|pt| pt.fpr <= f).map(|pt| pt.tpr).fold(0.0, f64::max);
            (f, t)
        })
        .collect();
    Ok(MiaResult {
        scores: scores.to_vec(),
        labels: labels.to_vec(),
        auc,
        roc,
        tpr_at_fpr,
    })
}

/// Scores `target` on the attack nodes and summarizes the attack.
pub fn attack(target: &GnnModel, graph: &Graph, shadow_conf: &ShadowConfidences, nodes: &MiaNodes) -> Result<MiaResult> {
    let candidates = nodes.candidates();
    if candidates != shadow_conf.nodes {
        return Err(Error::Contract("shadow confidences were collected for other nodes".into()));
    }
    let phi = confidences(target, graph, &candidates)?;
    let scores = shadow_conf.scores(&phi)?;
    mia_auc(&scores, &nodes.labels())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnn::Architecture;
    use crate::graph::fixtures::sbm;
    use crate::graph::split_nodes;
    use proptest::prelude::*;

    #[test]
    fn confidence_examples() {
        assert!(confidence_transform(&[1.0, 1.0], 0).abs() < 1e-15);
        // One logit ahead by 1 among C = 4: p = e / (e + 3), φ = 1 − ln 3.
        let phi = confidence_transform(&[1.0, 0.0, 0.0, 0.0], 0);
        assert!((phi - (1.0 - 3f64.ln())).abs() < 1e-14);
        let p = 1f64.exp() / (1f64.exp() + 3.0);
        assert!((phi - (p / (1.0 - p)).ln()).abs() < 1e-14);
        assert_eq!(confidence_transform(&[100.0, 0.0, 0.0], 0), CONFIDENCE_CLAMP);
        assert_eq!(confidence_transform(&[0.0, 100.0], 0), -CONFIDENCE_CLAMP);
    }

    #[test]
    fn score_examples() {
        let out = [1.0, 2.0, 3.0, 4.0, 5.0];
        let (mean, var) = mean_var(&out);
        assert!((lira_score(mean, &out, 0.0).unwrap() - 0.5).abs() < 1e-15);
        let s = lira_score(mean + 2.0 * var.sqrt(), &out, 0.0).unwrap();
        assert!((s - 0.977_249_868_051_820_8).abs() < 1e-12);
        assert!((lira_score(0.7, &[0.7; 8], 0.0).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(lira_score(0.7, &[], 1.0), None);
    }

    #[test]
    fn few_out_shadows_borrow_pooled_variance() {
        let s = lira_score(2.0, &[0.0, 0.0], 4.0).unwrap();
        assert!((s - normal_cdf(1.0)).abs() < 1e-15);
    }

    #[test]
    fn auc_examples() {
        let r = mia_auc(&[0.9, 0.8, 0.4, 0.3], &[true, false, true, false]).unwrap();
        assert!((r.auc - 0.75).abs() < 1e-15);
        assert_eq!(mia_auc(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap().auc, 1.0);
        assert_eq!(mia_auc(&[0.5; 6], &[true, false, true, false, true, false]).unwrap().auc, 0.5);
        assert!(matches!(mia_auc(&[0.1, 0.2], &[true, true]), Err(Error::Contract(_))));
    }

    #[test]
    fn roc_reads_tpr_at_low_fpr() {
        let labels: Vec<bool> = (0..200).map(|i| i < 100).collect();
        let scores: Vec<f64> = (0..200).map(|i| if i < 100 { 1.0 + i as f64 } else { (i - 100) as f64 + 0.5 }).collect();
        let r = mia_auc(&scores, &labels).unwrap();
        let last = r.roc.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        // Members are 1..=100 and non-members 0.5..=99.5: one false positive per true positive.
        assert_eq!(r.tpr_at(0.01), Some(0.02));
        assert!(r.roc.windows(2).all(|w| w[0].fpr <= w[1].fpr && w[0].tpr <= w[1].tpr));
        assert!(r.roc_csv().starts_with("fpr,tpr,threshold\n0,0,inf\n"));
    }

    proptest! {
        #[test]
        fn auc_matches_pair_count(
            pts in prop::collection::vec((0u8..20, any::<bool>()), 2..200)
        ) {
            let scores: Vec<f64> = pts.iter().map(|&(s, _)| s as f64 / 4.0).collect();
            let labels: Vec<bool> = pts.iter().map(|&(_, l)| l).collect();
            let pos: Vec<f64> = scores.iter().zip(&labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
            let neg: Vec<f64> = scores.iter().zip(&labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
            prop_assume!(!pos.is_empty() && !neg.is_empty());
            let mut wins = 0.0;
            for &a in &pos {
                for &b in &neg {
                    wins += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
                }
            }
            let want = wins / (pos.len() * neg.len()) as f64;
            let got = mia_auc(&scores, &labels).unwrap().auc;
            prop_assert!((got - want).abs() < 1e-12);
        }
    }

    fn setup() -> (Graph, NodePartition, ModelSpec, MiaNodes) {
        let g = sbm(60, 0.25, 0.03, 11);
        let p = split_nodes(60, 3, 0.3, 0.3, 0.5).unwrap();
        let spec = ModelSpec {
            hidden_dim: 8,
            embed_dim: 8,
            ..ModelSpec::new(Architecture::Gcn, g.feature_dim(), g.num_classes())
        };
        let nodes = select_mia_nodes(&p, 0).unwrap();
        (g, p, spec, nodes)
    }

    #[test]
    fn attack_node_selection_is_balanced() {
        let (_, p, _, nodes) = setup();
        assert_eq!(nodes.members.len(), nodes.nonmembers.len());
        assert!(nodes.members.iter().all(|u| p.unlearn.contains(u)));
        assert!(nodes.nonmembers.iter().all(|u| p.test.contains(u)));
    }

    #[test]
    fn two_shadow_smoke_run_is_deterministic() {
        let (g, p, spec, nodes) = setup();
        let cfg = TrainConfig {
            max_epochs: 30,
            ..TrainConfig::default()
        };
        let cands = nodes.candidates();
        let a = train_shadows(&g, &p, &cands, 2, &spec, &cfg, 5, 2).unwrap();
        let b = train_shadows(&g, &p, &cands, 2, &spec, &cfg, 5, 1).unwrap();
        assert_eq!(a, b);
        for s in &a.shadows {
            assert!(s.members.iter().all(|u| cands.contains(u)));
        }
        // A complementary pair: every candidate is in exactly one shadow.
        for &u in &cands {
            assert_eq!(a.shadows.iter().filter(|s| s.trained_on(u)).count(), 1);
        }
        let target = GnnModel::new(spec, 0).unwrap();
        let conf = ShadowConfidences::collect(&a, &g).unwrap();
        let r = attack(&target, &g, &conf, &nodes).unwrap();
        assert!((0.0..=1.0).contains(&r.auc));
        assert!(matches!(
            train_shadows(&g, &p, &cands, 1, &ModelSpec::new(Architecture::Gcn, 8, 2), &cfg, 5, 1),
            Err(Error::Config(_))
        ));
    }
}
