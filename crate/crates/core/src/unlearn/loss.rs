use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::sets::{ContrastiveSets, ReconstructionAnchors};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Where the temperature enters the unlearning loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemperaturePlacement {
    /// `exp(s / τ)`.
    #[default]
    Inside,
    /// `exp(s) / τ`, where τ cancels between numerator and denominator.
    Outside,
}

/// Contrastive unlearning loss for one batch:
///
/// `Σ_i [ log Σ_{p∈P(i)} exp(h_i·h_p / τ) − mean_{n∈N(i)} h_i·h_n / τ ]`
///
/// summed over batch nodes with nonempty positive and negative sets.
pub fn unlearn_loss(
    tape: &mut Tape,
    h_u: Var,
    h_nb: Var,
    h_r: Var,
    sets: &ContrastiveSets,
    tau: f64,
    placement: TemperaturePlacement,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if sets.batch.is_empty() || (0..sets.batch.len()).all(|i| !sets.is_active(i)) {
        return tape.constant(Tensor::scalar(0.0));
    }
    let scale = match placement {
        TemperaturePlacement::Inside => 1.0 / tau,
        TemperaturePlacement::Outside => 1.0,
    };
    let s_p = tape.pairwise_dot(h_u, h_nb)?;
    let s_p = tape.scale(s_p, scale)?;
    let lse = tape.masked_logsumexp_rows(s_p, sets.positive_mask())?;
    let s_n = tape.pairwise_dot(h_u, h_r)?;
    let s_n = tape.scale(s_n, scale)?;
    let mean_n = tape.masked_mean_rows(s_n, sets.negative_mask())?;
    let per_node = tape.sub(lse, mean_n)?;
    let per_node = tape.mul_const(per_node, sets.active_mask())?;
    tape.sum(per_node)
}

/// Neighborhood reconstruction loss for one layer pair:
///
/// `−(1/τ) Σ_i (1/|S(i)|) Σ_{j∈S(i)} h_i·h_j`.
pub fn reconstruction_loss(
    tape: &mut Tape,
    h_layer: Var,
    h_next: Var,
    anchors: &ReconstructionAnchors,
    tau: f64,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let mut pairs = Vec::with_capacity(anchors.num_pairs());
    let mut weights = Vec::with_capacity(anchors.num_pairs());
    for (i, s) in anchors.anchors.iter().enumerate() {
        for &j in s {
            pairs.push((i, j));
            weights.push(1.0 / s.len() as f64);
        }
    }
    if pairs.is_empty() {
        return tape.constant(Tensor::scalar(0.0));
    }
    let n = pairs.len();
    let dots = tape.pair_dots(h_layer, h_next, Arc::new(pairs))?;
    let weighted = tape.mul_const(dots, Arc::new(Tensor::from_vec(n, 1, weights)?))?;
    let total = tape.sum(weighted)?;
    tape.scale(total, -1.0 / tau)
}
