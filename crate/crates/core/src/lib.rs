//! Node-level contrastive unlearning for graph neural networks.
//!
//! The crate is layered bottom-up: [`autodiff`] supplies tensors and gradients,
//! [`graph`] stores citation graphs and extracts neighborhoods, [`gnn`] defines the
//! models, [`trainer`] fits them, [`unlearn`] removes nodes from a trained model and
//! [`attack`] checks the result with a membership-inference attack.

pub mod attack;
pub mod autodiff;
pub mod error;
pub mod gnn;
pub mod graph;
pub mod trainer;
pub mod unlearn;

pub use error::{Error, Result};
