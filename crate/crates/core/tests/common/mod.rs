//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::HashSet;
use std::sync::Arc;

use gnn_unlearn::autodiff::{SparseMatrix, Tape, Tensor, Var};
use gnn_unlearn::gnn::{Architecture, GnnModel, ModelSpec};
use gnn_unlearn::graph::Graph;
use gnn_unlearn::unlearn::{
    build_anchors, build_contrastive_sets, node_objective, reconstruction_loss, reconstruction_objective,
    unlearn_loss, ContrastiveSets, ReconstructionAnchors, TemperaturePlacement, UnlearnConfig,
};
use gnn_unlearn::Result;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared on this scale.
pub const FD_SCALE_FLOOR: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values in `[lo, hi]` with magnitude at least `gap`, to keep away from kinks at 0.
fn away_from_zero(rng: &mut ChaCha8Rng, r: usize, c: usize, gap: f64) -> Tensor {
    let v = (0..r * c)
        .map(|_| {
            let x: f64 = rng.gen_range(gap..2.0);
            if rng.gen_bool(0.5) {
                x
            } else {
                -x
            }
        })
        .collect();
    Tensor::from_vec(r, c, v).unwrap()
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_SCALE_FLOOR)
}

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

/// Worst relative error between tape gradients and central differences of `build`.
/// Non-scalar outputs are reduced with fixed random weights.
pub fn fd_check(inputs: &[Tensor], build: &Build<'_>, seed: u64) -> f64 {
    let weights: std::cell::RefCell<Option<Arc<Tensor>>> = std::cell::RefCell::new(None);
    let mut wrng = rng(seed ^ 0xfeed);
    let mut eval = |tape: &mut Tape, xs: &[Tensor]| -> (Vec<Var>, Var) {
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone()).unwrap()).collect();
        let out = build(tape, &vars).unwrap();
        let (r, c) = tape.value(out).unwrap().shape();
        let loss = if (r, c) == (1, 1) {
            out
        } else {
            let mut w = weights.borrow_mut();
            let w = w.get_or_insert_with(|| Arc::new(random_tensor(&mut wrng, r, c, -1.0, 1.0)));
            let m = tape.mul_const(out, Arc::clone(w)).unwrap();
            tape.sum(m).unwrap()
        };
        (vars, loss)
    };
    let mut tape = Tape::new();
    let (vars, loss) = eval(&mut tape, inputs);
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Tensor> = vars.iter().zip(inputs).map(|(&v, x)| grads.get_or_zeros(v, x)).collect();

    let mut worst: f64 = 0.0;
    let mut xs = inputs.to_vec();
    for k in 0..xs.len() {
        for i in 0..xs[k].len() {
            let orig = xs[k].data()[i];
            let mut value_at = |x: f64, xs: &mut Vec<Tensor>| {
                xs[k].data_mut()[i] = x;
                let mut t = Tape::new();
                let (_, l) = eval(&mut t, xs);
                t.value(l).unwrap().item().unwrap()
            };
            let up = value_at(orig + FD_STEP, &mut xs);
            let down = value_at(orig - FD_STEP, &mut xs);
            xs[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[k].data()[i], numeric));
        }
    }
    worst
}

/// Worst relative error over all parameters of `model` for a model-level objective.
pub fn fd_check_model(model: &GnnModel, build: &dyn Fn(&GnnModel, &mut Tape) -> Result<(Vec<Var>, Var)>) -> f64 {
    let mut tape = Tape::new();
    let (vars, loss) = build(model, &mut tape).unwrap();
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Tensor> = vars.iter().zip(model.params()).map(|(&v, p)| grads.get_or_zeros(v, p)).collect();
    let value = |m: &GnnModel| {
        let mut t = Tape::new();
        let (_, l) = build(m, &mut t).unwrap();
        t.value(l).unwrap().item().unwrap()
    };
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for k in 0..analytic.len() {
        for i in 0..analytic[k].len() {
            let orig = probe.params()[k].data()[i];
            probe.params_mut()[k].data_mut()[i] = orig + FD_STEP;
            let up = value(&probe);
            probe.params_mut()[k].data_mut()[i] = orig - FD_STEP;
            let down = value(&probe);
            probe.params_mut()[k].data_mut()[i] = orig;
            worst = worst.max(rel_err(analytic[k].data()[i], (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..5), rng.gen_range(1..5))
}

fn random_mask(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Arc<Tensor> {
    Arc::new(Tensor::from_vec(r, c, (0..r * c).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect()).unwrap())
}

/// One gradient-check instance of the named primitive.
pub fn primitive_instance(op: &str, seed: u64) -> f64 {
    let mut g = rng(seed);
    let (r, c) = dims(&mut g);
    match op {
        "matmul" => {
            let k = g.gen_range(1..5);
            let a = random_tensor(&mut g, r, k, -1.0, 1.0);
            let b = random_tensor(&mut g, k, c, -1.0, 1.0);
            fd_check(&[a, b], &|t, v| t.matmul(v[0], v[1]), seed)
        }
        "spmm" => {
            let k = g.gen_range(1..5);
            let mut trip = Vec::new();
            for i in 0..r * k {
                if g.gen_bool(0.6) {
                    trip.push((i / k, i % k, g.gen_range(-1.0..1.0)));
                }
            }
            let m = Arc::new(SparseMatrix::from_triplets(r, k, &trip).unwrap());
            let x = random_tensor(&mut g, k, c, -1.0, 1.0);
            fd_check(&[x], &|t, v| t.spmm(&m, v[0]), seed)
        }
        "add" | "sub" | "mul" => {
            let a = random_tensor(&mut g, r, c, -2.0, 2.0);
            let b = random_tensor(&mut g, r, c, -2.0, 2.0);
            match op {
                "add" => fd_check(&[a, b], &|t, v| t.add(v[0], v[1]), seed),
                "sub" => fd_check(&[a, b], &|t, v| t.sub(v[0], v[1]), seed),
                _ => fd_check(&[a, b], &|t, v| t.mul(v[0], v[1]), seed),
            }
        }
        "mul_const" => {
            let a = random_tensor(&mut g, r, c, -2.0, 2.0);
            let k = Arc::new(random_tensor(&mut g, r, c, -2.0, 2.0));
            fd_check(&[a], &|t, v| t.mul_const(v[0], Arc::clone(&k)), seed)
        }
        "add_row_bias" => {
            let a = random_tensor(&mut g, r, c, -2.0, 2.0);
            let b = random_tensor(&mut g, 1, c, -2.0, 2.0);
            fd_check(&[a, b], &|t, v| t.add_row_bias(v[0], v[1]), seed)
        }
        "scale" => {
            let a = random_tensor(&mut g, r, c, -2.0, 2.0);
            let s = g.gen_range(-3.0..3.0);
            fd_check(&[a], &|t, v| t.scale(v[0], s), seed)
        }
        "relu" => fd_check(&[away_from_zero(&mut g, r, c, 0.05)], &|t, v| t.relu(v[0]), seed),
        "exp" => fd_check(&[random_tensor(&mut g, r, c, -2.0, 2.0)], &|t, v| t.exp(v[0]), seed),
        "log" => fd_check(&[random_tensor(&mut g, r, c, 0.5, 3.0)], &|t, v| t.log(v[0]), seed),
        "sum" => fd_check(&[random_tensor(&mut g, r, c, -2.0, 2.0)], &|t, v| t.sum(v[0]), seed),
        "mean" => fd_check(&[random_tensor(&mut g, r, c, -2.0, 2.0)], &|t, v| t.mean(v[0]), seed),
        "log_softmax_rows" => fd_check(
            &[random_tensor(&mut g, r, c, -3.0, 3.0)],
            &|t, v| t.log_softmax_rows(v[0]),
            seed,
        ),
        "nll_loss" => {
            let labels = Arc::new((0..r).map(|_| g.gen_range(0..c)).collect::<Vec<_>>());
            fd_check(
                &[random_tensor(&mut g, r, c, -3.0, 0.0)],
                &|t, v| t.nll_loss(v[0], Arc::clone(&labels)),
                seed,
            )
        }
        "l2_normalize_rows" => fd_check(
            &[away_from_zero(&mut g, r, c, 0.1)],
            &|t, v| t.l2_normalize_rows(v[0]),
            seed,
        ),
        "pairwise_dot" => {
            let q = g.gen_range(1..5);
            let a = random_tensor(&mut g, r, c, -1.0, 1.0);
            let b = random_tensor(&mut g, q, c, -1.0, 1.0);
            fd_check(&[a, b], &|t, v| t.pairwise_dot(v[0], v[1]), seed)
        }
        "pair_dots" => {
            let q = g.gen_range(1..5);
            let n = g.gen_range(1..8);
            let pairs = Arc::new((0..n).map(|_| (g.gen_range(0..r), g.gen_range(0..q))).collect::<Vec<_>>());
            let a = random_tensor(&mut g, r, c, -1.0, 1.0);
            let b = random_tensor(&mut g, q, c, -1.0, 1.0);
            fd_check(&[a, b], &|t, v| t.pair_dots(v[0], v[1], Arc::clone(&pairs)), seed)
        }
        "gather_rows" => {
            let n = g.gen_range(1..8);
            let idx = Arc::new((0..n).map(|_| g.gen_range(0..r)).collect::<Vec<_>>());
            fd_check(
                &[random_tensor(&mut g, r, c, -2.0, 2.0)],
                &|t, v| t.gather_rows(v[0], Arc::clone(&idx)),
                seed,
            )
        }
        "masked_mean_rows" => {
            let m = random_mask(&mut g, r, c);
            fd_check(
                &[random_tensor(&mut g, r, c, -2.0, 2.0)],
                &|t, v| t.masked_mean_rows(v[0], Arc::clone(&m)),
                seed,
            )
        }
        "masked_logsumexp_rows" => {
            let m = random_mask(&mut g, r, c);
            fd_check(
                &[random_tensor(&mut g, r, c, -2.0, 2.0)],
                &|t, v| t.masked_logsumexp_rows(v[0], Arc::clone(&m)),
                seed,
            )
        }
        other => panic!("unknown op {other}"),
    }
}

pub const PRIMITIVES: [&str; 21] = [
    "matmul",
    "spmm",
    "add",
    "sub",
    "mul",
    "mul_const",
    "add_row_bias",
    "scale",
    "relu",
    "exp",
    "log",
    "sum",
    "mean",
    "log_softmax_rows",
    "nll_loss",
    "l2_normalize_rows",
    "pairwise_dot",
    "pair_dots",
    "gather_rows",
    "masked_mean_rows",
    "masked_logsumexp_rows",
];

/// Random contrastive sets over `b` batch rows, `m` neighbor rows and `q` remaining rows.
pub fn random_sets(g: &mut ChaCha8Rng, b: usize, m: usize, q: usize) -> ContrastiveSets {
    let subset = |g: &mut ChaCha8Rng, n: usize| -> Vec<usize> { (0..n).filter(|_| g.gen_bool(0.5)).collect() };
    ContrastiveSets {
        batch: (0..b).collect(),
        neighbors: (0..m).collect(),
        remaining: (0..q).collect(),
        positives: (0..b).map(|_| subset(g, m)).collect(),
        negatives: (0..b).map(|_| subset(g, q)).collect(),
    }
}

pub fn random_anchors(g: &mut ChaCha8Rng, l: usize, n: usize) -> ReconstructionAnchors {
    ReconstructionAnchors {
        layer: (0..l).collect(),
        next: (0..n).collect(),
        anchors: (0..l).map(|_| (0..n).filter(|_| g.gen_bool(0.5)).collect()).collect(),
    }
}

fn unit_rows(g: &mut ChaCha8Rng, r: usize, d: usize) -> Tensor {
    let mut t = random_tensor(g, r, d, -1.0, 1.0);
    for i in 0..r {
        let n = t.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        t.row_mut(i).iter_mut().for_each(|x| *x /= n);
    }
    t
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Node unlearning loss written as the printed double sum of log ratios.
pub fn naive_unlearn_loss(hu: &Tensor, hnb: &Tensor, hr: &Tensor, s: &ContrastiveSets, tau: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..s.batch.len() {
        let (p, n) = (&s.positives[i], &s.negatives[i]);
        if p.is_empty() || n.is_empty() {
            continue;
        }
        let mut denom = 0.0;
        for &j in p {
            denom += (dot(hu.row(i), hnb.row(j)) / tau).exp();
        }
        let mut inner = 0.0;
        for &j in n {
            inner += ((dot(hu.row(i), hr.row(j)) / tau).exp() / denom).ln();
        }
        total += -inner / n.len() as f64;
    }
    total
}

pub fn naive_reconstruction_loss(hl: &Tensor, hn: &Tensor, a: &ReconstructionAnchors, tau: f64) -> f64 {
    let mut total = 0.0;
    for (i, s) in a.anchors.iter().enumerate() {
        if s.is_empty() {
            continue;
        }
        let mut inner = 0.0;
        for &j in s {
            inner += dot(hl.row(i), hn.row(j)) / tau;
        }
        total += -inner / s.len() as f64;
    }
    total
}

/// Largest absolute gap between the tape losses and the double loops over `count`
/// random instances of at most 16 nodes.
pub fn loss_oracle_gap(count: usize, seed: u64) -> (f64, f64) {
    let (mut worst_u, mut worst_n) = (0.0f64, 0.0f64);
    for k in 0..count {
        let mut g = rng(seed + k as u64);
        let d = g.gen_range(2..6);
        let tau = g.gen_range(0.1..2.0);
        let (b, m, q) = (g.gen_range(1..6), g.gen_range(1..6), g.gen_range(1..6));
        let sets = random_sets(&mut g, b, m, q);
        let (hu, hnb, hr) = (unit_rows(&mut g, b, d), unit_rows(&mut g, m, d), unit_rows(&mut g, q, d));
        let mut t = Tape::new();
        let (a, bb, c) = (
            t.constant(hu.clone()).unwrap(),
            t.constant(hnb.clone()).unwrap(),
            t.constant(hr.clone()).unwrap(),
        );
        let l = unlearn_loss(&mut t, a, bb, c, &sets, tau, TemperaturePlacement::Inside).unwrap();
        let got = t.value(l).unwrap().item().unwrap();
        worst_u = worst_u.max((got - naive_unlearn_loss(&hu, &hnb, &hr, &sets, tau)).abs());

        let (l1, l2) = (g.gen_range(1..9), g.gen_range(1..9));
        let anchors = random_anchors(&mut g, l1, l2);
        let (h1, h2) = (unit_rows(&mut g, l1, d), unit_rows(&mut g, l2, d));
        let mut t = Tape::new();
        let (a, bb) = (t.constant(h1.clone()).unwrap(), t.constant(h2.clone()).unwrap());
        let l = reconstruction_loss(&mut t, a, bb, &anchors, tau).unwrap();
        let got = t.value(l).unwrap().item().unwrap();
        worst_n = worst_n.max((got - naive_reconstruction_loss(&h1, &h2, &anchors, tau)).abs());
    }
    (worst_u, worst_n)
}

/// Gradient checks of both losses (through row normalization) on one random instance.
pub fn composite_loss_instance(seed: u64) -> (f64, f64) {
    let mut g = rng(seed);
    let d = g.gen_range(2..5);
    let tau = g.gen_range(0.3..1.5);
    let (b, m, q) = (g.gen_range(1..4), g.gen_range(1..4), g.gen_range(1..4));
    let mut sets = random_sets(&mut g, b, m, q);
    sets.positives[0] = vec![0];
    sets.negatives[0] = vec![0];
    let inputs = [
        away_from_zero(&mut g, b, d, 0.1),
        away_from_zero(&mut g, m, d, 0.1),
        away_from_zero(&mut g, q, d, 0.1),
    ];
    let eu = fd_check(
        &inputs,
        &|t, v| {
            let (a, bb, c) = (t.l2_normalize_rows(v[0])?, t.l2_normalize_rows(v[1])?, t.l2_normalize_rows(v[2])?);
            unlearn_loss(t, a, bb, c, &sets, tau, TemperaturePlacement::Inside)
        },
        seed,
    );
    let (l1, l2) = (g.gen_range(1..5), g.gen_range(1..5));
    let mut anchors = random_anchors(&mut g, l1, l2);
    anchors.anchors[0] = vec![0];
    let inputs = [away_from_zero(&mut g, l1, d, 0.1), away_from_zero(&mut g, l2, d, 0.1)];
    let en = fd_check(
        &inputs,
        &|t, v| {
            let (a, bb) = (t.l2_normalize_rows(v[0])?, t.l2_normalize_rows(v[1])?);
            reconstruction_loss(t, a, bb, &anchors, tau)
        },
        seed,
    );
    (eu, en)
}

/// Connected-ish random graph with dense random features.
pub fn random_graph(g: &mut ChaCha8Rng, n: usize, p: f64, classes: usize, dim: usize) -> Graph {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if g.gen_bool(p) {
                edges.push((u, v));
            }
        }
    }
    let labels = (0..n).map(|_| g.gen_range(0..classes)).collect();
    let names = (0..classes).map(|c| format!("c{c}")).collect();
    Graph::from_edges(random_tensor(g, n, dim, 0.0, 1.0), labels, names, &edges).unwrap().0
}

/// Gradient checks of the two total objectives on one random graph and model.
pub fn objective_instance(seed: u64) -> (f64, f64) {
    let mut g = rng(seed);
    let n = 12;
    let graph = random_graph(&mut g, n, 0.3, 2, 4);
    let arch = if seed % 2 == 0 { Architecture::Gcn } else { Architecture::Gin };
    let spec = ModelSpec {
        hidden_dim: 3,
        embed_dim: 3,
        ..ModelSpec::new(arch, 4, 2)
    };
    let mut model = GnnModel::new(spec, seed).unwrap();
    // Nonzero biases keep embedding rows away from the origin, where row
    // normalization is discontinuous.
    let names: Vec<String> = model.spec().param_layout().into_iter().map(|(n, _)| n).collect();
    for (p, name) in model.params_mut().iter_mut().zip(&names) {
        if name.ends_with("bias") {
            p.data_mut().iter_mut().for_each(|b| *b = g.gen_range(-0.5..0.5));
        }
    }
    let mut nodes: Vec<usize> = (0..n).collect();
    nodes.shuffle(&mut g);
    let (batch, rest) = nodes.split_at(3);
    let is_remaining: Vec<bool> = (0..n).map(|u| !batch.contains(&u)).collect();
    let sets = build_contrastive_sets(&graph, &is_remaining, batch, &rest[..5]).unwrap();
    let cfg = UnlearnConfig::default();
    let e6 = fd_check_model(&model, &|m, t| node_objective(m, t, &graph, &sets, &cfg));
    let is_unlearn: Vec<bool> = is_remaining.iter().map(|r| !r).collect();
    let anchors = build_anchors(&graph, &rest[..4], &rest[4..], &is_unlearn).unwrap();
    let ce = rest[4..].to_vec();
    let e7 = fd_check_model(&model, &|m, t| reconstruction_objective(m, t, &graph, &anchors, &ce, &cfg));
    (e6, e7)
}

/// Hop distances by repeated edge relaxation until nothing changes.
pub fn relaxed_distances(graph: &Graph, seeds: &[usize]) -> Vec<Option<usize>> {
    let mut dist: Vec<Option<usize>> = vec![None; graph.num_nodes()];
    for &s in seeds {
        dist[s] = Some(0);
    }
    let edges = graph.undirected_edges();
    loop {
        let mut changed = false;
        for &(u, v) in &edges {
            for (a, b) in [(u, v), (v, u)] {
                if let Some(da) = dist[a] {
                    if dist[b].is_none_or(|db| da + 1 < db) {
                        dist[b] = Some(da + 1);
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            return dist;
        }
    }
}

/// Number of random graphs on which `k_hop_layers` disagrees with relaxed distances.
pub fn bfs_oracle_mismatches(count: usize, seed: u64) -> usize {
    use gnn_unlearn::graph::k_hop_layers;
    let mut bad = 0;
    for i in 0..count {
        let mut g = rng(seed + i as u64);
        let n = g.gen_range(1..=200);
        let p = g.gen_range(0.0..(4.0 / n as f64).min(1.0));
        let graph = random_graph(&mut g, n, p, 1, 1);
        let k = g.gen_range(0..=4);
        let seeds: Vec<usize> = (0..g.gen_range(1..=3)).map(|_| g.gen_range(0..n)).collect();
        let exclude: HashSet<usize> = (0..n).filter(|_| g.gen_bool(0.1)).collect();
        let ex: Vec<usize> = exclude.iter().copied().collect();
        let got = k_hop_layers(&graph, &seeds, k, &ex).unwrap();
        let dist = relaxed_distances(&graph, &seeds);
        let mut want = vec![Vec::new(); k + 1];
        for (u, d) in dist.iter().enumerate() {
            if let Some(d) = *d {
                if (1..=k + 1).contains(&d) && !exclude.contains(&u) {
                    want[d - 1].push(u);
                }
            }
        }
        if got.layers != want {
            bad += 1;
        }
    }
    bad
}
