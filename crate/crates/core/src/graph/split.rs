use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Node roles for one experiment. All sets are sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodePartition {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Training nodes to forget.
    pub unlearn: Vec<usize>,
    /// Training nodes kept.
    pub remain: Vec<usize>,
    /// Test nodes used for the stopping rule.
    pub eval: Vec<usize>,
}

pub const MIN_SPLIT_NODES: usize = 10;

/// Random transductive split.
///
/// The test set and its eval subset depend only on `seed`, `test_fraction` and
/// `eval_fraction`, so sweeping `unlearn_fraction` keeps them fixed.
pub fn split_nodes(
    num_nodes: usize,
    seed: u64,
    test_fraction: f64,
    unlearn_fraction: f64,
    eval_fraction: f64,
) -> Result<NodePartition> {
    for (name, f) in [
        ("test_fraction", test_fraction),
        ("unlearn_fraction", unlearn_fraction),
        ("eval_fraction", eval_fraction),
    ] {
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::Config(format!("{name} must lie in (0, 1), got {f}")));
        }
    }
    if num_nodes < MIN_SPLIT_NODES {
        return Err(Error::TooSmall {
            nodes: num_nodes,
            min: MIN_SPLIT_NODES,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all: Vec<usize> = (0..num_nodes).collect();
    all.shuffle(&mut rng);
    let n_test = (test_fraction * num_nodes as f64).floor() as usize;
    let (test, train) = all.split_at(n_test);
    let (mut test, mut train) = (test.to_vec(), train.to_vec());

    test.shuffle(&mut rng);
    let n_eval = (eval_fraction * test.len() as f64).floor() as usize;
    let mut eval = test[..n_eval].to_vec();

    train.shuffle(&mut rng);
    let n_unlearn = (unlearn_fraction * train.len() as f64).floor() as usize;
    let mut unlearn = train[..n_unlearn].to_vec();
    let mut remain = train[n_unlearn..].to_vec();

    for set in [&mut test, &mut train, &mut unlearn, &mut remain, &mut eval] {
        set.sort_unstable();
    }
    Ok(NodePartition {
        train,
        test,
        unlearn,
        remain,
        eval,
    })
}
